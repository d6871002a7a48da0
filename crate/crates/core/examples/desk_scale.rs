//! Synthetic motif task: OTKE vs mean pooling, then supervised fine-tuning.
//!
//! ```text
//! cargo run --release -p otke --example desk_scale -- [seeds] [key=value ...]
//! ```

use std::time::Instant;

use otke::config::RunConfig;
use otke::data::{generate_synthetic, SynthSpec};
use otke::train::{
    evaluate, evaluate_scores, mean_pool_dataset, train_mean_pool, train_supervised, train_unsupervised,
};

fn main() -> otke::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut cfg = RunConfig::default();
    for kv in args {
        let (k, v) = kv.split_once('=').expect("key=value");
        cfg.set(k, v)?;
    }
    let base = cfg.train_config()?;
    let start = Instant::now();
    let (mut gap, mut sup_gap) = (0.0, 0.0);
    for seed in 0..seeds {
        let spec = SynthSpec { seed, ..SynthSpec::default() };
        let data = generate_synthetic(&spec, 1000, 200, 500)?;
        let tc = otke::train::TrainConfig { seed, ..base.clone() };
        let (model, _) = train_unsupervised(&data.train, Some(&data.val), &tc)?;
        let otke_acc = evaluate(&model, &data.test, &[1])?.top1().unwrap_or(0.0);
        let (nys, cls) = train_mean_pool(&data.train, &tc)?;
        let feats = mean_pool_dataset(&nys, &data.test)?;
        let mean_acc = evaluate_scores(cls.scores(feats.view()).view(), &data.test, &[1])?.top1().unwrap_or(0.0);
        let (sup, metrics) = train_supervised(&data.train, Some(&data.val), &tc, &model, |e| {
            println!(
                "  epoch={} train_loss={:.4} val_loss={:.4} val_acc={:.4}",
                e.epoch, e.train_loss, e.val_loss, e.val_acc
            )
        })?;
        let sup_acc = evaluate(&sup, &data.test, &[1])?.top1().unwrap_or(0.0);
        println!(
            "seed={seed} otke={otke_acc:.4} mean_pool={mean_acc:.4} supervised={sup_acc:.4} best_epoch={} elapsed={:.1}s",
            metrics.best_epoch,
            start.elapsed().as_secs_f64()
        );
        gap += otke_acc - mean_acc;
        sup_gap += sup_acc - otke_acc;
    }
    println!("mean otke-mean_pool={:.4} mean supervised-otke={:.4}", gap / seeds as f64, sup_gap / seeds as f64);
    Ok(())
}
