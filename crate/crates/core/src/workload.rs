//! Matrix-multiplication workloads of DeiT encoders.
//!
//! Every accelerated operation is described by a [`LayerDims`]: `M` output
//! channels, `N` input channels, `F` tokens and the number of heads `N` is
//! split into. For the two attention matmuls (`Q·Kᵀ` and `scores·V`) every
//! head produces its own output, so `M` counts the outputs of one head while
//! `N` spans all heads. Softmax, GELU, LayerNorm and scaling run on the host.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{read_file, write_file, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLayerDims", into = "RawLayerDims")]
pub struct LayerDims {
    pub name: String,
    pub m: usize,
    pub n: usize,
    pub f: usize,
    pub n_heads: usize,
    /// Attention matmul whose heads write separate outputs.
    pub is_attention_multi_out: bool,
}

#[derive(Serialize, Deserialize)]
struct RawLayerDims {
    name: String,
    #[serde(rename = "M")]
    m: u64,
    #[serde(rename = "N")]
    n: u64,
    #[serde(rename = "F")]
    f: u64,
    n_heads: u64,
    is_attention_multi_out: bool,
}

impl TryFrom<RawLayerDims> for LayerDims {
    type Error = String;

    fn try_from(raw: RawLayerDims) -> std::result::Result<Self, String> {
        LayerDims::new(
            raw.name.clone(),
            raw.m as usize,
            raw.n as usize,
            raw.f as usize,
            raw.n_heads as usize,
            raw.is_attention_multi_out,
        )
        .map_err(|e| match e {
            Error::Schema { msg, .. } => format!("layer `{}`: {msg}", raw.name),
            other => other.to_string(),
        })
    }
}

impl From<LayerDims> for RawLayerDims {
    fn from(l: LayerDims) -> Self {
        RawLayerDims {
            name: l.name,
            m: l.m as u64,
            n: l.n as u64,
            f: l.f as u64,
            n_heads: l.n_heads as u64,
            is_attention_multi_out: l.is_attention_multi_out,
        }
    }
}

impl LayerDims {
    pub fn new(
        name: impl Into<String>,
        m: usize,
        n: usize,
        f: usize,
        n_heads: usize,
        is_attention_multi_out: bool,
    ) -> Result<Self> {
        let schema = |msg: String| Error::Schema { what: "layer", msg };
        for (field, v) in [("M", m), ("N", n), ("F", f), ("n_heads", n_heads)] {
            if v < 1 {
                return Err(schema(format!("{field} must be ≥ 1")));
            }
        }
        if !n.is_multiple_of(n_heads) {
            return Err(schema(format!(
                "N={n} must be divisible by n_heads={n_heads}"
            )));
        }
        Ok(LayerDims {
            name: name.into(),
            m,
            n,
            f,
            n_heads,
            is_attention_multi_out,
        })
    }

    /// `γ`: extra output tiles written by a multi-output attention layer.
    pub fn gamma(&self) -> usize {
        if self.is_attention_multi_out {
            self.n_heads - 1
        } else {
            0
        }
    }

    /// Input channels belonging to one head.
    pub fn head_dim(&self) -> usize {
        self.n / self.n_heads
    }

    /// Rows of the integer output: `n_heads * M` for multi-output layers.
    pub fn output_rows(&self) -> usize {
        self.m * (1 + self.gamma())
    }

    pub fn macs(&self) -> u64 {
        (self.m * self.n * self.f) as u64
    }

    /// PoT rows presuppose static weights, which the attention matmuls lack.
    pub fn allows_pot(&self) -> bool {
        !self.is_attention_multi_out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    DeitTiny,
    DeitSmall,
    DeitBase,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::DeitTiny, Variant::DeitSmall, Variant::DeitBase];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::DeitTiny => "deit-tiny",
            Variant::DeitSmall => "deit-small",
            Variant::DeitBase => "deit-base",
        }
    }

    pub fn config(&self) -> EncoderConfig {
        let (embed_dim, heads) = match self {
            Variant::DeitTiny => (192, 3),
            Variant::DeitSmall => (384, 6),
            Variant::DeitBase => (768, 12),
        };
        EncoderConfig {
            embed_dim,
            heads,
            depth: 12,
            mlp_ratio: 4,
            image_size: 224,
            patch_size: 16,
            in_chans: 3,
            num_classes: 1000,
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(Variant::name).collect();
                Error::Domain(format!(
                    "unknown variant `{s}`; valid variants: {}",
                    names.join(", ")
                ))
            })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Hyperparameters of a ViT encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub in_chans: usize,
    pub num_classes: usize,
}

impl EncoderConfig {
    pub fn patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// Patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub variant: String,
    pub layers: Vec<LayerDims>,
    /// Fixed host-CPU cycles charged per layer for softmax/GELU/LayerNorm.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub host_cycles_per_layer: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

impl Workload {
    pub fn new(variant: impl Into<String>, layers: Vec<LayerDims>) -> Result<Self> {
        let w = Workload {
            variant: variant.into(),
            layers,
            host_cycles_per_layer: 0,
        };
        w.check()?;
        Ok(w)
    }

    fn check(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Schema {
                what: "workload",
                msg: "layers must not be empty".into(),
            });
        }
        Ok(())
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(LayerDims::macs).sum()
    }

    pub fn max_f(&self) -> usize {
        self.layers.iter().map(|l| l.f).max().unwrap_or(0)
    }

    pub fn max_heads(&self) -> usize {
        self.layers.iter().map(|l| l.n_heads).max().unwrap_or(0)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerDims> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let w: Workload = serde_json::from_str(s).map_err(|e| Error::Schema {
            what: "workload",
            msg: e.to_string(),
        })?;
        w.check()?;
        Ok(w)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }
}

pub fn build_workload(variant: Variant) -> Workload {
    let cfg = variant.config();
    let e = cfg.embed_dim;
    let h = cfg.heads;
    let t = cfg.tokens();
    let layer = |name: String, m, n, f, multi| {
        LayerDims::new(name, m, n, f, h, multi).expect("DeiT dimensions are valid")
    };

    let mut layers = Vec::with_capacity(2 + 6 * cfg.depth);
    // the 16x16/16 patch convolution is an FC over flattened patches
    layers.push(layer(
        "patch_embed".into(),
        e,
        cfg.in_chans * cfg.patch_size * cfg.patch_size,
        cfg.patches(),
        false,
    ));
    for i in 0..cfg.depth {
        let p = format!("blocks.{i}");
        layers.push(layer(format!("{p}.attn.qkv"), 3 * e, e, t, false));
        layers.push(layer(format!("{p}.attn.scores"), t, e, t, true));
        layers.push(layer(
            format!("{p}.attn.context"),
            cfg.head_dim(),
            h * t,
            t,
            true,
        ));
        layers.push(layer(format!("{p}.attn.proj"), e, e, t, false));
        layers.push(layer(
            format!("{p}.mlp.fc1"),
            cfg.mlp_ratio * e,
            e,
            t,
            false,
        ));
        layers.push(layer(
            format!("{p}.mlp.fc2"),
            e,
            cfg.mlp_ratio * e,
            t,
            false,
        ));
    }
    // only the class token reaches the classifier
    layers.push(layer("head".into(), cfg.num_classes, e, 1, false));
    Workload::new(variant.name(), layers).expect("non-empty")
}

pub fn load_workload(path: &Path) -> Result<Workload> {
    Workload::from_json(&read_file(path)?)
}

pub fn save_workload(workload: &Workload, path: &Path) -> Result<()> {
    write_file(path, &workload.to_json())
}
