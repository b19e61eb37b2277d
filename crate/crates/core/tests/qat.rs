mod common;

use common::{on_grid, reference_qat};
use mixq::mixed::{qat_train_toy, qat_train_toy_with, ToyDataset, ToyModel};
use mixq::workload::LayerDims;

#[test]
fn reference_toy_converges() {
    let (model, data, cfg) = reference_qat(0.5, 0.1);
    let out = qat_train_toy(model, &data, &cfg).unwrap();
    assert_eq!(out.loss_trace.len(), 201);
    assert!(out.loss_trace.iter().all(|l| l.is_finite()));
    let (first, last) = (out.loss_trace[0], *out.loss_trace.last().unwrap());
    assert!(last < 0.1 * first, "{first} -> {last}");
}

#[test]
fn weights_stay_on_grid_every_step() {
    let (model, data, cfg) = reference_qat(0.5, 0.1);
    let mut steps = 0;
    let out = qat_train_toy_with(model, &data, &cfg, |_, qws| {
        steps += 1;
        assert!(qws.iter().all(on_grid));
        assert!(qws.iter().all(|q| q.pot_rows() == 2));
    })
    .unwrap();
    assert_eq!(steps, 200);
    assert!(out.quantized.iter().all(on_grid));
}

#[test]
fn identical_seeds_give_identical_traces() {
    let run = || {
        let (model, data, cfg) = reference_qat(0.5, 0.1);
        qat_train_toy(model, &data, &cfg).unwrap().loss_trace
    };
    let (a, b) = (run(), run());
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn zero_learning_rate_freezes_loss() {
    let (model, data, cfg) = reference_qat(0.5, 0.0);
    let out = qat_train_toy(model.clone(), &data, &cfg).unwrap();
    assert!(out.loss_trace.iter().all(|&l| l == out.loss_trace[0]));
    assert_eq!(out.model, model);
}

#[test]
fn fixed_point_is_not_worse_than_pot() {
    let final_loss = |k| {
        let (model, data, cfg) = reference_qat(k, 0.1);
        *qat_train_toy(model, &data, &cfg)
            .unwrap()
            .loss_trace
            .last()
            .unwrap()
    };
    assert!(final_loss(0.0) <= final_loss(1.0) + 0.01);
}

#[test]
fn minibatches_and_two_layers() {
    let schedule = [
        LayerDims::new("a", 8, 4, 16, 1, false).unwrap(),
        LayerDims::new("b", 4, 8, 16, 2, false).unwrap(),
    ];
    let model = ToyModel::from_schedule(&schedule, 3).unwrap();
    let data = ToyDataset::synthetic(4, 4, 16, 3).unwrap();
    let (_, _, mut cfg) = reference_qat(0.5, 0.05);
    cfg.batch_size = Some(4);
    cfg.epochs = 5;
    let out = qat_train_toy(model, &data, &cfg).unwrap();
    assert_eq!(out.loss_trace.len(), 5 * 4 + 1);
    assert!(out.loss_trace.iter().all(|l| l.is_finite()));
}

#[test]
fn invalid_setups_are_rejected() {
    let too_big = LayerDims::new("x", 65, 4, 1, 1, false).unwrap();
    assert!(ToyModel::from_schedule(&[too_big], 0).is_err());
    let a = LayerDims::new("a", 8, 4, 1, 1, false).unwrap();
    let b = LayerDims::new("b", 4, 6, 1, 1, false).unwrap();
    assert!(ToyModel::from_schedule(&[a, b], 0).is_err());
    let (model, data, mut cfg) = reference_qat(0.5, -1.0);
    assert!(qat_train_toy(model.clone(), &data, &cfg).is_err());
    cfg.learning_rate = 0.1;
    let wrong = ToyDataset::synthetic(3, 4, 8, 0).unwrap();
    assert!(qat_train_toy(model, &wrong, &cfg).is_err());
}
