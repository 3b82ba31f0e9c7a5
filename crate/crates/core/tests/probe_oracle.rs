mod common;

use common::checks::{blob_dataset, planted_traces};
use ctxprobe::encoder::SubLayer;
use ctxprobe::probes::{evaluate, probe_grid, train_lr, ProbeConfig, ProbeKind};

#[test]
fn blobs_and_planted_cell() {
    common::checks::probe_oracle().assert_pass();
}

#[test]
fn grid_is_reproducible_for_a_seed() {
    let (traces, labels) = planted_traces(10, 2, 3, SubLayer::Sa, 5);
    let cfg = ProbeConfig::default();
    let a = probe_grid(traces.as_slice(), &labels, 12, ProbeKind::Lr, 9, &cfg, "p").unwrap();
    let b = probe_grid(traces.as_slice(), &labels, 12, ProbeKind::Lr, 9, &cfg, "p").unwrap();
    assert_eq!(a.accuracies, b.accuracies);
    assert_eq!(a.best_cell(), (3, SubLayer::Sa));
}

#[test]
fn grid_rejects_wrong_layer_count() {
    let (traces, labels) = planted_traces(5, 2, 1, SubLayer::Out, 5);
    let r = probe_grid(traces.as_slice(), &labels, 24, ProbeKind::Lr, 0, &ProbeConfig::default(), "p");
    assert!(r.is_err());
}

#[test]
fn training_on_blobs_reduces_objective() {
    let ds = blob_dataset(3, 15, 64, 12.0, 1);
    let model = train_lr(&ds, &ProbeConfig::default()).unwrap();
    for h in &model.objective_history {
        assert!(h.first() >= h.last());
    }
    assert_eq!(evaluate(&model, &ds).unwrap(), 1.0);
}
