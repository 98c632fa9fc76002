use siavc_core::data::{generate_synthetic, make_split, SplitSpec};
use siavc_core::{Arm, RunConfig, Trainer};

// The benchmark generator is only meaningful if a fully supervised model can
// solve it; this pins the difficulty the end-to-end criteria were set against.
#[test]
fn fully_labeled_oracle_solves_the_benchmark() {
    let ds = generate_synthetic(9, 20, 8, 32, 32, 7).unwrap();
    let data = make_split(&ds, &SplitSpec { budget: ds.train_len(), seed: 7 }).unwrap();
    assert!(data.unlabeled.is_empty());
    let mut cfg = RunConfig { seed: 7, total_steps: 500, labeled_batch: 16, eval_interval: 500, ..RunConfig::default() };
    Arm::Supervised.apply(&mut cfg);
    let mut t = Trainer::new(cfg, data).unwrap();
    t.run(|_| Ok(())).unwrap();
    let top1 = t.last_eval().unwrap().top1;
    assert!(top1 >= 0.95, "oracle top-1 {top1}");
}
