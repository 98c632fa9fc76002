use std::collections::BTreeSet;

use siavc_core::data::{generate_synthetic, make_split, SplitSpec};
use siavc_core::vcam::Origin;
use siavc_core::{Arm, ModelConfig, RunConfig, TrainData, Trainer};

fn tiny(seed: u64) -> RunConfig {
    RunConfig {
        num_classes: 3,
        frames: 4,
        height: 16,
        width: 16,
        model: ModelConfig { patch: [2, 4, 4], embed_dim: 16, depth: 1, heads: 2, ..ModelConfig::default() },
        total_steps: 60,
        eval_interval: 20,
        vcam_tau: 0.4,
        seed,
        ..RunConfig::default()
    }
}

fn data(budget: usize, seed: u64) -> TrainData {
    let ds = generate_synthetic(3, 6, 4, 16, 16, seed).unwrap();
    make_split(&ds, &SplitSpec { budget, seed }).unwrap()
}

#[test]
fn a_step_with_every_loss_active_moves_every_parameter_tensor() {
    let mut t = Trainer::new(tiny(1), data(6, 1)).unwrap();
    for _ in 0..60 {
        let before = t.model().params().to_vec();
        let m = t.step().unwrap();
        if [m.l_cs, m.l_align, m.l_cons, m.l_fair].iter().all(|&l| l != 0.0) {
            let after = t.model().params();
            for spec in t.model().layout().specs() {
                let r = spec.range();
                assert_ne!(&before[r.clone()], &after[r], "{} did not move", spec.name);
            }
            return;
        }
    }
    panic!("no step exercised all four losses");
}

#[test]
fn identical_configs_give_identical_metric_streams() {
    let run = || {
        let mut t = Trainer::new(tiny(2), data(6, 2)).unwrap();
        let mut out = Vec::new();
        t.run(|m| {
            out.push(m.clone());
            Ok(())
        })
        .unwrap();
        out
    };
    assert_eq!(run(), run());
}

#[test]
fn without_cross_set_augmentation_the_labeled_queue_is_the_labeled_set() {
    let d = data(6, 3);
    let truth: BTreeSet<_> = d.labeled.iter().map(|s| (s.id, s.label)).collect();
    let mut cfg = tiny(3);
    cfg.use_vcam = false;
    let mut t = Trainer::new(cfg, d).unwrap();
    for _ in 0..30 {
        assert_eq!(t.step().unwrap().vcam_promotions, 0);
    }
    let q: BTreeSet<_> = t.queues().labeled().iter().map(|e| (e.id, e.label)).collect();
    assert_eq!(q, truth);
    assert!(t.queues().labeled().iter().all(|e| e.origin == Origin::Labeled));
}

#[test]
fn fully_labeled_supervised_arm_uses_only_the_classification_loss() {
    let d = data(18, 4);
    assert!(d.unlabeled.is_empty());
    let mut cfg = tiny(4);
    Arm::Supervised.apply(&mut cfg);
    let mut t = Trainer::new(cfg, d).unwrap();
    let mut losses = Vec::new();
    while !t.is_finished() {
        let m = t.step().unwrap();
        assert_eq!((m.l_align, m.l_cons, m.l_fair), (0.0, 0.0, 0.0));
        assert_eq!(m.total, m.l_cs);
        assert_eq!(m.pseudo_acc, None);
        losses.push(m.l_cs);
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    assert!(mean(&losses[losses.len() - 10..]) < mean(&losses[..10]));
}

#[test]
fn splits_are_disjoint_and_hide_unlabeled_labels() {
    let d = data(6, 5);
    let train: BTreeSet<_> = d.labeled.iter().map(|s| s.id).chain(d.unlabeled.iter().map(|s| s.id)).collect();
    let test: BTreeSet<_> = d.test.iter().map(|s| s.id).collect();
    assert!(train.is_disjoint(&test));
    assert_eq!(train.len(), d.labeled.len() + d.unlabeled.len());
    let held: BTreeSet<_> = d.unlabeled_truth.keys().copied().collect();
    assert_eq!(held, d.unlabeled.iter().map(|s| s.id).collect());
}

#[test]
fn every_ablation_arm_is_a_config_setting() {
    for arm in Arm::ALL {
        let mut cfg = tiny(6);
        cfg.total_steps = 4;
        arm.apply(&mut cfg);
        cfg.validate().unwrap();
        let mut t = Trainer::new(cfg.clone(), data(6, 6)).unwrap();
        let m = t.step().unwrap();
        if !cfg.use_fairness {
            assert_eq!(m.l_fair, 0.0, "{}", arm.name());
        }
        if !cfg.use_vcam {
            assert_eq!(m.l_align, 0.0, "{}", arm.name());
        }
    }
    let mut cfg = RunConfig::default();
    Arm::CrFixed.apply(&mut cfg);
    assert!(!cfg.use_sat && !cfg.use_fairness && cfg.fixed_threshold == 0.95);
}
