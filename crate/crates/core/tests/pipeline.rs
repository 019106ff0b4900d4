//! End-to-end use of the public API: config, training, checkpoints, sampling, evaluation.

use branchflow::harness::checkpoint;
use branchflow::harness::config::RunConfig;
use branchflow::harness::data::ToyDatasetSpec;
use branchflow::harness::pipeline::{eval_run, parse_samples_jsonl, sample_run, samples_jsonl, train_run};
use branchflow::sampler::{ScheduleKind, StepSchedule};

fn small(data: ToyDatasetSpec) -> RunConfig {
    let mut cfg = RunConfig::preset(data);
    cfg.model.steps = 40;
    cfg.model.hidden_dim = 12;
    cfg.model.batch_size = 8;
    cfg
}

#[test]
fn train_checkpoint_sample_eval() {
    let dir = std::env::temp_dir().join(format!("bf-core-it-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    for data in [ToyDatasetSpec::token_runs(), ToyDatasetSpec::polyline2d()] {
        let cfg = small(data);
        let (model, losses) = train_run(&cfg, 3, |_, _| {}).unwrap();
        assert_eq!(losses.len(), 40);
        assert!(losses.iter().all(|l| l.total.is_finite()));

        let path = dir.join(format!("{}.ckpt", cfg.data.name()));
        checkpoint::save(&path, &cfg, &model).unwrap();
        let (cfg2, model2) = checkpoint::load(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(model2, model);

        let sched = StepSchedule { kind: ScheduleKind::Uniform, n_steps: 20 };
        let out = sample_run(&cfg2, &model2, sched, 50, 9, false).unwrap();
        assert_eq!(out.len(), 50);
        for o in &out {
            assert!(o.elements.iter().all(|e| e.token < cfg.data.alphabet() && e.continuous.len() == cfg.data.d()));
            assert!(o.elements.iter().all(|e| e.continuous.iter().all(|x| x.is_finite())));
        }
        let generated: Vec<_> = out.into_iter().map(|o| o.elements).collect();
        let parsed = parse_samples_jsonl(&samples_jsonl(&generated, 9)).unwrap();
        assert_eq!(parsed.len(), generated.len());

        let reference = cfg.data.held_out(50, 10);
        let report = eval_run(&cfg, &parsed, &reference, 9).unwrap();
        assert!(report.overlaps.contains_key("length"));
        assert!(report.overlaps.values().all(|v| (0.0..=1.0).contains(v)));
        if cfg.data.d() > 0 {
            for key in ["x", "y", "step_distance", "pairwise_distance"] {
                assert!(report.overlaps.contains_key(key), "{key}");
            }
        }
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn sampling_does_not_depend_on_chunking() {
    let cfg = small(ToyDatasetSpec::polyline2d());
    let (model, _) = train_run(&cfg, 5, |_, _| {}).unwrap();
    let sched = StepSchedule { kind: ScheduleKind::Cosine, n_steps: 15 };
    let mut a = cfg.clone();
    a.sampler.chunk = 1;
    let mut b = cfg.clone();
    b.sampler.chunk = 64;
    assert_eq!(sample_run(&a, &model, sched, 30, 2, false).unwrap(), sample_run(&b, &model, sched, 30, 2, false).unwrap());
}

#[test]
fn config_files_load() {
    let dir = std::env::temp_dir().join(format!("bf-core-cfg-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = RunConfig::preset(ToyDatasetSpec::token_runs());
    let path = dir.join("run.json");
    std::fs::write(&path, cfg.to_json_pretty()).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    std::fs::write(&path, "{ not json").unwrap();
    assert!(RunConfig::load(&path).is_err());
    assert!(RunConfig::load(&dir.join("missing.json")).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}
