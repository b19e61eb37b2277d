fn main() {
    std::process::exit(mixq::cli::main_with_args(std::env::args_os()));
}
