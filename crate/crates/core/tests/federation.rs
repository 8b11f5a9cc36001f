use fedmap::codec::{mask_bytes, value_bytes};
use fedmap::config::{parse_config, ExperimentConfig};
use fedmap::feddr::HybridConfig;
use fedmap::{run_experiment, run_fedavg_dense, run_federated_pruning, run_fedmap, Method};

fn small(method: &str) -> ExperimentConfig {
    parse_config(&format!(
        "method = {method}
clients = 3
rounds = 14
local_epochs = 2
lr = 0.1
schedule.s = 4
model.hidden = 8
data.samples = 300
data.dim = 6
data.classes = 3
seed = 11
"
    ))
    .unwrap()
}

#[test]
fn fedmap_follows_schedule_and_nests() {
    let cfg = small("fedmap");
    let out = run_fedmap::<f64>(&cfg).unwrap();
    let spec = cfg.schedule_spec();
    let events: Vec<usize> = out
        .metrics
        .iter()
        .filter(|m| m.prune_event)
        .map(|m| m.round)
        .collect();
    assert_eq!(events, spec.prune_events());
    assert_eq!(events, vec![4, 8, 12]);
    assert!(out
        .mask_chain
        .iter()
        .all(|e| e.subset_of_previous && e.reactivated == 0));
    for m in &out.metrics {
        assert_eq!(m.remaining_params, spec.remaining_params(m.round));
        assert_eq!(
            m.uplink_bytes_per_client,
            value_bytes(m.remaining_params, 32)
        );
        assert_eq!(m.downlink_bytes, m.uplink_bytes_per_client);
    }
    // pruned positions of the final model are exactly zero
    for (l, layer) in out.final_model.layers().iter().enumerate() {
        for (i, &w) in layer.weight.values().iter().enumerate() {
            if !out.final_mask.get(l, i) {
                assert_eq!(w, 0.0);
            }
        }
    }
}

#[test]
fn runs_are_deterministic() {
    for method in ["fedmap", "fedavg_dense", "federated_pruning"] {
        let cfg = small(method);
        let a = run_experiment::<f64>(&cfg).unwrap();
        let b = run_experiment::<f64>(&cfg).unwrap();
        assert_eq!(a.metrics, b.metrics, "{method}");
        assert_eq!(a.final_model, b.final_model, "{method}");
    }
}

#[test]
fn baseline_without_pruning_matches_dense_at_64_bits() {
    let mut cfg = small("federated_pruning");
    cfg.bits_per_param = 64;
    cfg.schedule.prune_fraction = 1e-9;
    let base = run_federated_pruning::<f64>(&cfg).unwrap();
    let dense = run_fedavg_dense::<f64>(&cfg).unwrap();
    assert_eq!(base.final_model, dense.final_model);
    let d = cfg.total_params();
    for (b, m) in base.metrics.iter().zip(&dense.metrics) {
        assert_eq!(b.global_test_accuracy, m.global_test_accuracy);
        assert_eq!(b.downlink_bytes, m.downlink_bytes + mask_bytes(d));
        assert_eq!(b.uplink_bytes_per_client, m.uplink_bytes_per_client);
    }
}

#[test]
fn baseline_downlink_carries_mask() {
    let cfg = small("federated_pruning");
    let base = run_federated_pruning::<f64>(&cfg).unwrap();
    let fm = run_fedmap::<f64>(&cfg).unwrap();
    let d = cfg.total_params();
    for (b, m) in base.metrics.iter().zip(&fm.metrics) {
        assert_eq!(b.remaining_params, m.remaining_params);
        assert_eq!(b.downlink_bytes - m.downlink_bytes, mask_bytes(d));
    }
}

#[test]
fn cumulative_bytes_recomputed_from_series() {
    let cfg = small("fedmap");
    let out = run_fedmap::<f64>(&cfg).unwrap();
    let mut total = 0;
    for (t, k) in cfg.schedule_spec().series().into_iter().enumerate() {
        total += 2 * cfg.clients as u64 * value_bytes(k, 32);
        assert_eq!(out.metrics[t].cumulative_bytes, total);
    }
}

#[test]
fn biases_travel_densely() {
    let mut cfg = small("fedmap");
    cfg.model.bias = true;
    let out = run_fedmap::<f64>(&cfg).unwrap();
    let biases = 8 + 3;
    for m in &out.metrics {
        assert_eq!(
            m.uplink_bytes_per_client,
            value_bytes(m.remaining_params + biases, 32)
        );
    }
}

#[test]
fn single_precision_runs() {
    let cfg = small("fedmap");
    let out = run_fedmap::<f32>(&cfg).unwrap();
    assert_eq!(out.metrics.len(), cfg.rounds);
    assert!(out.final_accuracy() > 0.5);
}

#[test]
fn feddr_configs_run() {
    for config in [
        HybridConfig::FedDr,
        HybridConfig::FedMapFedDr,
        HybridConfig::C1,
        HybridConfig::C2,
        HybridConfig::C3,
    ] {
        let mut cfg = small("fedmap");
        cfg.feddr_enabled = true;
        cfg.feddr.config = config;
        cfg.feddr.post_alpha = 1.75;
        cfg.feddr.post_eta = 10.0;
        cfg.validate().unwrap();
        let out = run_fedmap::<f64>(&cfg).unwrap();
        let pruned = out.metrics.iter().any(|m| m.prune_event);
        assert_eq!(pruned, config.uses_pruning(), "{config}");
        assert!(
            out.final_accuracy() > 0.4,
            "{config}: {}",
            out.final_accuracy()
        );
    }
}

#[test]
fn c1_before_switch_matches_feddr() {
    let mut a = small("fedmap");
    a.feddr_enabled = true;
    a.feddr.config = HybridConfig::FedMapFedDr;
    let mut b = a.clone();
    b.feddr.config = HybridConfig::C1;
    let ra = run_fedmap::<f64>(&a).unwrap();
    let rb = run_fedmap::<f64>(&b).unwrap();
    // identical until the first prune event at round 4
    assert_eq!(ra.metrics[..3], rb.metrics[..3]);
    assert_ne!(ra.metrics[5..], rb.metrics[5..]);
}

#[test]
fn method_dispatch() {
    assert_eq!(small("fedavg_dense").method, Method::FedAvgDense);
    let out = run_experiment::<f64>(&small("fedavg_dense")).unwrap();
    assert!(out.mask_chain.is_empty());
    assert!(out
        .metrics
        .iter()
        .all(|m| m.remaining_fraction == 1.0 && !m.prune_event));
}

#[test]
fn size_skew_and_dirichlet_partitions_run() {
    for mode in ["size_skew", "dirichlet"] {
        let mut cfg = small("fedmap");
        cfg.set("partition.mode", mode).unwrap();
        cfg.data.samples = 600;
        let out = run_fedmap::<f64>(&cfg).unwrap();
        assert_eq!(out.metrics.len(), cfg.rounds);
    }
}
