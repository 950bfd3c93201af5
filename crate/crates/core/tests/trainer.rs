use std::fs;
use std::path::Path;

use tdgrpc::config::TrainConfig;
use tdgrpc::metrics::{read_metrics, Phase};
use tdgrpc::trainer::{evaluate, evaluate_random, run_training, Trainer};

fn tiny(extra: &[&str]) -> TrainConfig {
    let mut o: Vec<String> = [
        "total_steps=400",
        "warmup_steps=100",
        "trajectory_length=100",
        "gradient_steps=20",
        "batch_segments=4",
        "eval_episodes=1",
        "planner.num_samples=16",
        "planner.num_policy_samples=4",
        "planner.top_k=4",
        "planner.iterations=2",
        "model.latent_dim=4",
        "model.hidden_sizes=[8]",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    TrainConfig::from_toml_with_overrides(None, &o).unwrap()
}

#[test]
fn each_outer_iteration_is_t_pushes_then_s_steps() {
    let mut t = Trainer::new(tiny(&[])).unwrap();
    let s = t.collect(100).unwrap();
    assert_eq!((s.steps, t.counters().pushes), (100, 100));
    let before = t.counters().clone();
    for _ in 0..20 {
        t.train_step().unwrap();
    }
    assert_eq!(t.counters().train_steps, before.train_steps + 20);
    assert_eq!(t.counters().pushes, before.pushes);

    let (report, t) = run_training(tiny(&[]), None).unwrap();
    let c = &report.counters;
    assert_eq!(c.env_steps, 400);
    assert_eq!(c.pushes, 400);
    assert_eq!(c.outer_iterations, 4);
    // Warm-up ends after the first phase, so all four phases train.
    assert_eq!(c.train_steps, 80);
    assert_eq!(c.episodes, 2);
    let train: Vec<_> = t.records().iter().filter(|r| r.phase == Phase::Train).collect();
    assert_eq!(train.len(), 80);
    for (k, chunk) in train.chunks(20).enumerate() {
        assert!(chunk.iter().all(|r| r.env_step == 100 * (k as u64 + 1)));
    }
}

#[test]
fn no_training_before_warmup_ends() {
    let (report, _) = run_training(tiny(&["warmup_steps=250"]), None).unwrap();
    // Phases end at 100, 200, 300, 400 env steps; only the last two train.
    assert_eq!(report.counters.train_steps, 40);
}

#[test]
fn identical_seeds_give_identical_metrics_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_training(tiny(&["eval_every=200"]), Some(a.path())).unwrap();
    run_training(tiny(&["eval_every=200"]), Some(b.path())).unwrap();
    let fa = fs::read(a.path().join("metrics.jsonl")).unwrap();
    let fb = fs::read(b.path().join("metrics.jsonl")).unwrap();
    assert!(!fa.is_empty());
    assert_eq!(fa, fb);
    let c = tempfile::tempdir().unwrap();
    run_training(tiny(&["eval_every=200", "seed=1"]), Some(c.path())).unwrap();
    assert_ne!(fa, fs::read(c.path().join("metrics.jsonl")).unwrap());
}

#[test]
fn run_directory_layout() {
    let d = tempfile::tempdir().unwrap();
    run_training(tiny(&[]), Some(d.path())).unwrap();
    for f in ["config.toml", "metrics.jsonl", "report.json", "model.json", "checkpoints/latest.json"] {
        assert!(d.path().join(f).exists(), "{f}");
    }
    let cfg = TrainConfig::from_file(&d.path().join("config.toml")).unwrap();
    assert_eq!(cfg, tiny(&[]));
    let recs = read_metrics(&d.path().join("metrics.jsonl")).unwrap();
    assert_eq!(recs.last().unwrap().phase, Phase::Eval);
}

#[test]
fn disable_kl_zeroes_the_constraint_term() {
    let (_, t) = run_training(tiny(&["ablation.disable_kl=true"]), None).unwrap();
    let mut n = 0;
    for r in t.records().iter().filter(|r| r.phase == Phase::Train) {
        let p = r.policy_loss.as_ref().unwrap();
        assert_eq!(p.kl_term, 0.0);
        assert!((p.total + p.grpo).abs() <= 1e-12 * p.grpo.abs().max(1.0));
        n += 1;
    }
    assert!(n > 0);
}

#[test]
fn advantages_are_on_the_simplex_unless_std_normalized() {
    let (_, t) = run_training(tiny(&[]), None).unwrap();
    for r in t.records().iter().filter(|r| r.phase == Phase::Train) {
        assert!(r.advantage_min.unwrap() >= 0.0 && r.advantage_max.unwrap() <= 1.0);
    }
    let (_, t) = run_training(tiny(&["ablation.use_std_norm_advantages=true"]), None).unwrap();
    let negative = t
        .records()
        .iter()
        .filter(|r| r.phase == Phase::Train)
        .filter(|r| r.advantage_min.unwrap() < 0.0)
        .count();
    assert!(negative > 0);
}

#[test]
fn disable_groups_uses_single_samples() {
    let cfg = tiny(&["ablation.disable_groups=true"]);
    assert_eq!(cfg.group_size(), 1);
    let (_, t) = run_training(cfg, None).unwrap();
    // With one member per group every softmax advantage is exactly 1.
    for r in t.records().iter().filter(|r| r.phase == Phase::Train) {
        assert_eq!((r.advantage_min, r.advantage_max), (Some(1.0), Some(1.0)));
    }
}

#[test]
fn logmu_and_previous_policy_variants_train() {
    for extra in [
        &["ablation.use_logmu_constraint=true"][..],
        &["constraint.prior=\"previous_policy\""][..],
        &["constraint.kl_direction=\"prior_to_policy\""][..],
        &["model.bootstrap=\"live\""][..],
    ] {
        let (report, t) = run_training(tiny(extra), None).unwrap();
        assert_eq!(report.counters.train_steps, 80, "{extra:?}");
        assert!(t.model().is_finite());
    }
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    run_training(tiny(&["checkpoint_every=200", "eval_every=200"]), Some(full.path())).unwrap();
    let stamped = full.path().join("checkpoints").join("step-00000200.json");
    assert!(stamped.exists());

    let copy = tempfile::tempdir().unwrap();
    copy_dir(full.path(), copy.path());
    let ck = copy.path().join("checkpoints").join("step-00000200.json");
    let mut t = Trainer::resume_from(copy.path(), &ck).unwrap();
    assert_eq!(t.counters().env_steps, 200);
    let report = t.run().unwrap();
    assert_eq!(report.counters.env_steps, 400);
    assert_eq!(
        fs::read(full.path().join("metrics.jsonl")).unwrap(),
        fs::read(copy.path().join("metrics.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(full.path().join("model.json")).unwrap(),
        fs::read(copy.path().join("model.json")).unwrap()
    );
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let dst = to.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &dst);
        } else {
            fs::copy(e.path(), dst).unwrap();
        }
    }
}

#[test]
fn corrupt_or_foreign_checkpoints_are_rejected() {
    let d = tempfile::tempdir().unwrap();
    run_training(tiny(&["total_steps=100"]), Some(d.path())).unwrap();
    let model = d.path().join("model.json");
    assert!(Trainer::resume_from(d.path(), &model).is_err());
    let latest = d.path().join("checkpoints").join("latest.json");
    let text = fs::read_to_string(&latest).unwrap();
    fs::write(&latest, &text[..text.len() / 2]).unwrap();
    assert!(Trainer::resume(d.path()).is_err());
}

#[test]
fn one_train_step_matches_the_pinned_record() {
    let mut t = Trainer::new(tiny(&[])).unwrap();
    t.collect(100).unwrap();
    let record = t.train_step().unwrap();
    let got = serde_json::to_string_pretty(&record).unwrap();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/train_step.json");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, &got).unwrap();
    }
    let want = fs::read_to_string(&path).expect("golden file; regenerate with UPDATE_GOLDEN=1");
    assert_eq!(got, want);
}

#[test]
fn evaluation_is_deterministic() {
    let t = Trainer::new(tiny(&[])).unwrap();
    let cfg = t.config().clone();
    let a = evaluate(t.model(), "pendulum", &cfg.planner, 2, 3).unwrap();
    let b = evaluate(t.model(), "pendulum", &cfg.planner, 2, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.returns.len(), 2);
    let one = evaluate(t.model(), "pendulum", &cfg.planner, 1, 3).unwrap();
    assert_eq!(one.returns[0], a.returns[0]);
    assert_eq!(one.mean_return, one.returns[0]);
    let r = evaluate_random("pendulum", 1, 3).unwrap();
    assert_eq!(r.std_return, 0.0);
}
