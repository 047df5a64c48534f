//! Times one training step (forward, focal loss, backward) of the toy backbone.

use std::time::Instant;

use pca_core::{BackboneSpec, Mode, Model32, Shape, Tape32, Tensor32};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pca_core::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (stem, growth, stride) = (args.first().copied().unwrap_or(16), args.get(1).copied().unwrap_or(12), args.get(2).copied().unwrap_or(1));
    let mut spec = BackboneSpec::toy(4).with_k(4);
    spec.stem.channels = stem;
    spec.growth_rate = growth;
    spec.stem.stride = stride;
    let model = Model32::build(&spec, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor32::uniform(Shape::new(32, 32, 32, 3), 0.0, 1.0, &mut rng);
    let labels: Vec<usize> = (0..32).map(|i| i % 4).collect();
    let steps = 5;
    let start = Instant::now();
    for _ in 0..steps {
        let mut tape = Tape32::new();
        let xv = tape.constant(x.clone());
        let fp = model.forward(&mut tape, xv, Mode::Train)?;
        let loss = tape.focal_loss(fp.logits, &labels, 2.0)?;
        tape.backward(loss)?;
    }
    let per = start.elapsed().as_secs_f64() / steps as f64;
    println!(
        "params {} | {:.3} s per 32-image step | {:.2} ms per image",
        model.param_count().total,
        per,
        per * 1000.0 / 32.0
    );
    Ok(())
}
