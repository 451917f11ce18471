use stegflow_core::dataset::synthetic_dataset;
use stegflow_core::eval::{evaluate_channel, run_capacity_sweep, run_proxies, Report};
use stegflow_core::flow::{init_model, FlowConfig, TrainingStage};
use stegflow_core::pipeline::EmbeddingSettings;

fn build_report(seed: u64) -> Report {
    let mut model = init_model(&FlowConfig::toy(), 2).unwrap();
    model.set_stage(TrainingStage::Likelihood);
    let settings = EmbeddingSettings::default();
    let hosts = synthetic_dataset(6, 16, 4);
    Report {
        name: "det".into(),
        seed,
        alpha: settings.alpha,
        ecc_enabled: false,
        channel: evaluate_channel(&model, &hosts, &settings, seed).unwrap(),
        capacity: run_capacity_sweep(&model, &[8, 16], 2, &settings, seed).unwrap(),
        proxies: Some(run_proxies(&model, &hosts, &settings, seed).unwrap()),
    }
}

#[test]
fn reports_are_byte_identical_for_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let files_a = build_report(9).write(a.path()).unwrap();
    let files_b = build_report(9).write(b.path()).unwrap();
    assert_eq!(files_a.len(), files_b.len());
    for (x, y) in files_a.iter().zip(&files_b) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
    assert_ne!(build_report(10).to_json(), build_report(9).to_json());
}

#[test]
fn report_json_is_flat() {
    let json: serde_json::Value = serde_json::from_str(&build_report(1).to_json()).unwrap();
    for key in ["acc_ideal", "acc_rounded", "capacity_bpp", "grayscale_linf", "capacity", "proxies"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    assert_eq!(json["capacity_bpp"], 2.0);
    assert_eq!(json["acc_ideal"], 100.0);
}
