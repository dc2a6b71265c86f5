//! Trains the cross-entropy baseline (CE head on the accent embedding) on
//! a synthetic corpus and scores it by argmax on held-out speakers.
//!
//!     cargo run --release --example train_ce -- [epochs] [learning_rate]

use accent_ge2e::evaluation::evaluate_argmax;
use accent_ge2e::features::{generate_synthetic, split_by_speaker, SplitSpec, SyntheticConfig};
use accent_ge2e::network::{Model, ModelConfig};
use accent_ge2e::training::{train_ce, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(30);
    let learning_rate: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1e-3);

    let data = SyntheticConfig::default();
    let records = generate_synthetic(&data)?;
    let (train, test) = split_by_speaker(&records, SplitSpec { test_speakers_per_class: 2, seed: 0 })?;
    let speakers = data.classes * data.speakers_per_class;
    let mut model = Model::new(ModelConfig::compact(data.dims, data.classes, speakers), 0)?;
    let config = TrainConfig { learning_rate, epochs, ..TrainConfig::default() };

    let history = train_ce(&train, &mut model, &config)?;
    let clipped = history.steps.iter().filter(|s| s.grad_norm > config.clip_ce).count();
    println!(
        "{} steps ({} per epoch), {clipped} clipped at {}; loss {:.4} -> {:.4}",
        history.steps.len(),
        history.steps_per_epoch,
        config.clip_ce,
        history.steps[0].loss,
        history.steps.last().map(|s| s.loss).unwrap_or(f64::NAN)
    );

    let train_eval = evaluate_argmax(&model, &train)?;
    let test_eval = evaluate_argmax(&model, &test)?;
    println!("train accuracy {:.1}%  test accuracy {:.1}%", 100.0 * train_eval.accuracy, 100.0 * test_eval.accuracy);
    let probs = model.ce_head(&test[0].features.to_tensor())?;
    println!("posterior of {} (accent {}): {:.3?}", test[0].id, test[0].accent + 1, probs.data());
    Ok(())
}
