//! The adversarial alignment loop in isolation: a discriminator learns to
//! separate two feature clouds while gradient reversal pushes a toy extractor
//! to merge them.
//!
//! ```bash
//! cargo run --release --example adversarial_alignment
//! ```

use mtda::adversarial::{
    adversarial_loss, adversarial_loss_grad, discriminate, Discriminator, Grl, LambdaSchedule,
};
use mtda::nnet::{dyn1, dyn2, normal, stream_rng, GradMap, Linear, Sgd};
use ndarray::Array2;

fn main() -> mtda::Result<()> {
    let d_in = 8;
    let d_f = 16;
    let batch = 32;
    let mut rng = stream_rng(11, "adversarial-demo");

    // toy extractor: one linear layer; source and target inputs come from
    // offset distributions
    let mut extractor = Linear::<f64>::he(d_in, d_f, &mut rng);
    let mut disc = Discriminator::<f64>::init(d_f, 13);
    let mut opt = Sgd::new(0.9, 0.0);
    let schedule = LambdaSchedule::Ramp { ceiling: 1.0 };

    let flags: Vec<u8> = (0..batch).map(|i| u8::from(i >= batch / 2)).collect();
    let steps = 400;
    for step in 0..steps {
        let inputs = Array2::from_shape_fn((batch, d_in), |(i, j)| {
            let shift = if i < batch / 2 { -1.0 } else { 1.0 };
            normal::<f64>(&mut rng) + shift * (1.0 + 0.1 * j as f64)
        });
        let lambda = schedule.value_at(step as f64 / steps as f64);
        let feats = extractor.forward(&inputs);

        // discriminator step on lambda * l_adv (features treated as constant)
        let cache = disc.forward(&feats);
        let gl = adversarial_loss_grad(&cache.scores, &flags).mapv(|g| g * lambda);
        let mut dgrads = GradMap::new();
        disc.backward(&cache, &gl, &mut dgrads);
        let mut entries = vec![
            ("disc.l1.w".to_string(), disc.l1.w.view_mut().into_dyn()),
            ("disc.l1.b".to_string(), disc.l1.b.view_mut().into_dyn()),
            ("disc.l2.w".to_string(), disc.l2.w.view_mut().into_dyn()),
            ("disc.l2.b".to_string(), disc.l2.b.view_mut().into_dyn()),
        ];
        opt.step(entries.drain(..), &dgrads, |_| 0.01);

        // extractor step through the gradient reversal layer
        let grl = Grl::new(lambda);
        let cache = disc.forward(&grl.forward(&feats));
        let gl = adversarial_loss_grad(&cache.scores, &flags);
        let mut scratch = GradMap::new();
        let gfeats = disc.backward(&cache, &gl, &mut scratch);
        let gfeats = grl.backward(&gfeats);
        let (_, egrads) = extractor.backward(&inputs, &gfeats);
        let mut grads = GradMap::new();
        grads.add("ext.w", dyn2(egrads.w));
        grads.add("ext.b", dyn1(egrads.b));
        let mut entries = vec![
            ("ext.w".to_string(), extractor.w.view_mut().into_dyn()),
            ("ext.b".to_string(), extractor.b.view_mut().into_dyn()),
        ];
        opt.step(entries.drain(..), &grads, |_| 0.01);

        if step % 100 == 0 || step == steps - 1 {
            let l = adversarial_loss(&cache.scores, &flags)?;
            let mean_gap = {
                let src = cache.scores.iter().take(batch / 2).sum::<f64>() / (batch / 2) as f64;
                let tgt = cache.scores.iter().skip(batch / 2).sum::<f64>() / (batch / 2) as f64;
                tgt - src
            };
            println!("step {step:3}: lambda {lambda:.3}  l_adv {l:.4}  score gap {mean_gap:+.4}");
        }
    }

    // after alignment the discriminator should sit near chance (scores ~0.5)
    let inputs = Array2::from_shape_fn((batch, d_in), |(i, j)| {
        let shift = if i < batch / 2 { -1.0 } else { 1.0 };
        normal::<f64>(&mut rng) + shift * (1.0 + 0.1 * j as f64)
    });
    let scores = discriminate(&disc, &extractor.forward(&inputs));
    let mean = scores.sum() / batch as f64;
    println!("final mean domain score: {mean:.3} (0.5 = aligned)");
    Ok(())
}
