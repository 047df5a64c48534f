//! Baseline vs single-site vs progressive attention on the synthetic set.
//!
//! Usage: ablation <data-dir> [stem] [growth] [stride] [epochs] [seeds] [k] [batch]

use std::path::PathBuf;
use std::time::Instant;

use pca_core::data::{prepare_splits, synth_dataset, LoadedSet, Protocol, SynthConfig, DEFAULT_RATIOS};
use pca_core::train::{evaluate, fit, TrainConfig};
use pca_core::{BackboneSpec, Model32};

fn main() -> pca_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "/tmp/pca-desk".into()));
    let nums: Vec<usize> = args.filter_map(|a| a.parse().ok()).collect();
    let get = |i: usize, d: usize| nums.get(i).copied().unwrap_or(d);
    let (stem, growth, stride, epochs, seeds, k) = (get(0, 8), get(1, 8), get(2, 2), get(3, 40), get(4, 3), get(5, 4));
    let batch_size = get(6, 16);
    for seed in 0..seeds as u64 {
        let data_dir = dir.join(format!("seed{seed}"));
        let manifest = synth_dataset(&SynthConfig::desk(seed), &data_dir)?;
        let splits = prepare_splits(&manifest, DEFAULT_RATIOS, seed, Protocol::SplitThenUpsample)?;
        let train = LoadedSet::load(&splits.train, 32, 32)?;
        let val = LoadedSet::load(&splits.val, 32, 32)?;
        let test = LoadedSet::load(&splits.test, 32, 32)?;
        for sites in [&[][..], &[4][..], &[2, 3, 4][..]] {
            let mut spec = BackboneSpec::toy(4).with_k(k).with_attention(sites);
            spec.stem.channels = stem;
            spec.growth_rate = growth;
            spec.stem.stride = stride;
            let model = Model32::build(&spec, seed)?;
            let cfg = TrainConfig {
                epochs,
                batch_size,
                seed,
                record_time: true,
                ..TrainConfig::default()
            };
            let start = Instant::now();
            let out = fit(model, &train, &val, &cfg)?;
            let ev = evaluate(&out.model, &test, 64, 2.0)?;
            println!(
                "seed {seed} sites {sites:?}: test macro-F1 {:.4} acc {:.4} | best epoch {:?} | {:.0}s | {}",
                ev.report.macro_avg.f1,
                ev.report.top1_accuracy,
                out.log.best_epoch,
                start.elapsed().as_secs_f64(),
                out.log.stop_reason
            );
        }
    }
    Ok(())
}
