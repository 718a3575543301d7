use repgen::config::TrainConfig;
use repgen::dataset::{generate_dataset, Dataset};
use repgen::heads::Paradigm;
use repgen::params::Group;
use repgen::scene::SceneSpec;
use repgen::task::Task;
use repgen::trainer::{run, LossWeights, Trainer};
use repgen::Error;

fn data(n_train: usize) -> Dataset {
    let spec = SceneSpec { min_objects: Some(2), ..SceneSpec::with_size(16, 3) };
    generate_dataset(&spec, n_train, 4, 11).unwrap()
}

fn tiny(paradigm: Paradigm) -> TrainConfig {
    TrainConfig {
        paradigm,
        d: 16,
        layers: 1,
        heads: 2,
        codebook_size: 8,
        batch_size: 2,
        vq_fit_scenes: 8,
        diffusion_steps: 20,
        fm_steps: 4,
        maskgit_iters: 2,
        text_warmup_steps: 3,
        n_heldout: 2,
        checkpoint_every: 0,
        eval_every: 0,
        ..Default::default()
    }
}

fn group_values(t: &Trainer, group: Group) -> Vec<f64> {
    t.model.params.iter().filter(|(_, p)| p.group == group).flat_map(|(_, p)| p.value.data.clone()).collect()
}

#[test]
fn loss_total_is_the_weighted_sum() {
    let ds = data(12);
    for paradigm in Paradigm::ALL {
        let mut cfg = tiny(paradigm);
        cfg.set_weights([0.5, 2.0, 1.0, 0.25]);
        let mut t = Trainer::new(cfg, &ds).unwrap();
        for _ in 0..5 {
            let r = t.step_once().unwrap();
            let sum = 0.5 * r.l_pixel.unwrap() + 2.0 * r.l_depth.unwrap() + r.l_seg.unwrap() + 0.25 * r.l_und.unwrap();
            assert!((r.l_total - sum).abs() / r.l_total < 1e-12, "{paradigm:?}");
        }
    }
}

#[test]
fn zero_weight_task_is_bitwise_absent() {
    let ds = data(12);
    let cfg = tiny(Paradigm::Ddpm);
    let w = LossWeights::new(1.0, 0.0, 0.0, 1.0);
    let mut a = Trainer::new(cfg.clone(), &ds).unwrap();
    let mut b = Trainer::new(cfg, &ds).unwrap();
    for step in 1..=3 {
        let all: Vec<_> = Task::ALL.iter().map(|&t| a.make_batch(t, step)).collect();
        let only = b.make_batches(&w, step);
        assert_eq!(only.len(), 2);
        a.train_step(&all, &w).unwrap();
        b.train_step(&only, &w).unwrap();
    }
    assert_eq!(a.model.params.flatten(), b.model.params.flatten());
}

#[test]
fn doubling_weights_doubles_loss_and_gradient_exactly() {
    let ds = data(12);
    let t = Trainer::new(tiny(Paradigm::Maskgit), &ds).unwrap();
    let w = LossWeights::new(1.0, 0.5, 0.25, 1.0);
    let batches = t.make_batches(&w, 1);
    let mask = t.model.trainable_mask(true);
    let (l1, g1) = t.gradients(&batches, &w, &mask).unwrap();
    let (l2, g2) = t.gradients(&batches, &w.scaled(2.0), &mask).unwrap();
    assert_eq!(l1, l2, "per-task losses do not depend on the weights");
    assert_eq!(g2.norm(), 2.0 * g1.norm());
    for (id, _) in t.model.params.iter() {
        if let (Some(a), Some(b)) = (g1.get(id), g2.get(id)) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| 2.0 * x == *y));
        }
    }
}

#[test]
fn accumulation_matches_one_large_batch() {
    let ds = data(12);
    for paradigm in [Paradigm::Ar, Paradigm::Fm] {
        let mut small = tiny(paradigm);
        small.batch_size = 2;
        small.accum = 4;
        let mut large = tiny(paradigm);
        large.batch_size = 8;
        large.accum = 1;
        let mut a = Trainer::new(small, &ds).unwrap();
        let mut b = Trainer::new(large, &ds).unwrap();
        for _ in 0..2 {
            let ra = a.step_once().unwrap();
            let rb = b.step_once().unwrap();
            assert!((ra.l_total - rb.l_total).abs() < 1e-9);
        }
        let diff = a.model.params.flatten().iter().zip(b.model.params.flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{paradigm:?}: {diff}");
    }
}

#[test]
fn frozen_groups_never_move() {
    let ds = data(12);
    let mut cfg = tiny(Paradigm::Mar);
    cfg.shared_encoder = false;
    cfg.text_warmup_steps = 2;
    let mut t = Trainer::new(cfg, &ds).unwrap();
    let enc = group_values(&t, Group::Encoder);
    let codebook = t.model.vq.hash();
    for _ in 0..2 {
        t.step_once().unwrap();
    }
    let text = (group_values(&t, Group::TextEmbed), group_values(&t, Group::TextHead));
    let trunk = group_values(&t, Group::Trunk);
    for _ in 0..3 {
        t.step_once().unwrap();
    }
    assert_eq!(group_values(&t, Group::Encoder), enc);
    assert_eq!((group_values(&t, Group::TextEmbed), group_values(&t, Group::TextHead)), text);
    assert_eq!(t.model.vq.hash(), codebook);
    assert_ne!(group_values(&t, Group::Trunk), trunk);
}

#[test]
fn shared_encoder_is_updated_by_generation_losses() {
    let ds = data(12);
    for shared in [true, false] {
        let mut cfg = tiny(Paradigm::Fm);
        cfg.shared_encoder = shared;
        cfg.set_weights([1.0, 0.0, 0.0, 0.0]);
        let mut t = Trainer::new(cfg, &ds).unwrap();
        let before = group_values(&t, Group::Encoder);
        t.step_once().unwrap();
        assert_eq!(group_values(&t, Group::Encoder) != before, shared);
    }
}

#[test]
fn missing_batch_is_a_config_error() {
    let ds = data(12);
    let mut t = Trainer::new(tiny(Paradigm::Fm), &ds).unwrap();
    let w = LossWeights::new(1.0, 1.0, 1.0, 1.0);
    let batches = vec![t.make_batch(Task::Pixel, 1)];
    let err = t.train_step(&batches, &w).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("und"));
}

#[test]
fn non_finite_loss_reports_the_step() {
    let ds = data(12);
    let mut t = Trainer::new(tiny(Paradigm::Fm), &ds).unwrap();
    t.step_once().unwrap();
    let id = t.model.params.iter().find(|(_, p)| p.group == Group::GenHead).unwrap().0;
    t.model.params.value_mut(id).data[0] = f64::NAN;
    match t.step_once() {
        Err(Error::NonFinite { step, detail }) => {
            assert_eq!(step, 2);
            assert!(detail.contains("l_pixel="));
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn identical_runs_write_identical_logs() {
    let ds = data(12);
    let mut cfg = tiny(Paradigm::Ddpm);
    cfg.steps = 4;
    cfg.eval_every = 2;
    let dir = tempfile::tempdir().unwrap();
    run(&cfg, &ds, &dir.path().join("a")).unwrap();
    run(&cfg, &ds, &dir.path().join("b")).unwrap();
    for f in ["metrics.jsonl", "heldout.jsonl"] {
        let a = std::fs::read_to_string(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read_to_string(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let a = std::fs::read(dir.path().join("a/checkpoint/params.bin")).unwrap();
    let b = std::fs::read(dir.path().join("b/checkpoint/params.bin")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn metrics_lines_mark_inactive_tasks() {
    let ds = data(12);
    let mut cfg = tiny(Paradigm::Fm);
    cfg.steps = 2;
    cfg.set_weights([0.0, 0.0, 0.0, 1.0]);
    let dir = tempfile::tempdir().unwrap();
    run(&cfg, &ds, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for k in ["step", "l_und", "l_pixel", "l_depth", "l_seg", "l_total", "grad_norm"] {
            assert!(v.get(k).is_some(), "{k} missing");
        }
        assert!(v["l_pixel"].is_null() && v["l_depth"].is_null() && v["l_seg"].is_null());
        assert!(v["l_und"].is_f64());
    }
}

#[test]
fn resume_continues_the_uninterrupted_run() {
    let ds = data(12);
    let mut cfg = tiny(Paradigm::Maskgit);
    cfg.steps = 8;
    cfg.checkpoint_every = 4;
    let dir = tempfile::tempdir().unwrap();
    let full = run(&cfg, &ds, &dir.path().join("full")).unwrap();

    let mut resumed = cfg.clone();
    resumed.resume = Some(dir.path().join("full/checkpoints/step_000004").display().to_string());
    let part = run(&resumed, &ds, &dir.path().join("resumed")).unwrap();
    assert_eq!(part.reports.first().unwrap().step, 5);
    assert_eq!(&full.reports[4..], &part.reports[..]);

    let mut other = resumed.clone();
    other.lr = 1e-3;
    other.batch_size = 3;
    let err = match run(&other, &ds, &dir.path().join("bad")) {
        Err(e) => e,
        Ok(_) => panic!("mismatched resume must fail"),
    };
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("lr") && err.to_string().contains("batch_size"), "{err}");
}

/// Every active task drops below a quarter of its initial loss on a
/// 4-scene dataset. Losses are averaged over 25-step windows because the
/// diffusion losses are noisy per step.
#[test]
fn overfits_four_scenes() {
    let ds = data(4);
    let mut cfg = tiny(Paradigm::Fm);
    cfg.d = 24;
    cfg.text_warmup_steps = 2000;
    cfg.batch_size = 4;
    cfg.lr = 1e-3;
    let mut t = Trainer::new(cfg, &ds).unwrap();
    let mut reports = Vec::new();
    for _ in 0..2000 {
        reports.push(t.step_once().unwrap());
    }
    for task in Task::ALL {
        let mean = |r: &[repgen::trainer::TrainStepReport]| r.iter().map(|x| x.loss(task).unwrap()).sum::<f64>() / r.len() as f64;
        let (start, end) = (mean(&reports[..25]), mean(&reports[reports.len() - 25..]));
        assert!(end < 0.25 * start, "{task}: {start} -> {end}");
    }
}
