//! Compares how much speaker identity survives in GE2E embeddings trained
//! with and without the gradient-reversed speaker branch. A linear probe is
//! fitted on half of every training speaker's utterances (frozen
//! embeddings) and scored on the other half.
//!
//!     cargo run --release --example adversarial_probe -- [lambda_sc] [epochs] [seeds]

use accent_ge2e::evaluation::{speaker_probe, ProbeConfig};
use accent_ge2e::features::{generate_synthetic, split_by_speaker, SplitSpec, SyntheticConfig};
use accent_ge2e::network::{Model, ModelConfig};
use accent_ge2e::training::{train_ge2e, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let lambda_sc: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.01);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(40);
    let seeds: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);

    let (mut plain_sum, mut adv_sum) = (0.0, 0.0);
    for seed in 0..seeds {
        let data = SyntheticConfig { seed, ..SyntheticConfig::default() };
        let records = generate_synthetic(&data)?;
        let (train, _) = split_by_speaker(&records, SplitSpec { test_speakers_per_class: 2, seed })?;
        let model_config = ModelConfig::compact(data.dims, data.classes, data.classes * data.speakers_per_class);
        let config = TrainConfig { learning_rate: 1e-3, epochs, lambda_sc, seed, ..TrainConfig::default() };
        let probe = ProbeConfig { seed, ..ProbeConfig::default() };

        let mut plain = Model::new(model_config.clone(), seed)?;
        train_ge2e(&train, &mut plain, &config, false)?;
        let mut adversarial = Model::new(model_config, seed)?;
        train_ge2e(&train, &mut adversarial, &config, true)?;

        let p = speaker_probe(&plain, &train, &probe)?;
        let a = speaker_probe(&adversarial, &train, &probe)?;
        println!("seed {seed}: probe accuracy GE2E-AC {:.1}%  GE2E-AC-A {:.1}%", 100.0 * p, 100.0 * a);
        plain_sum += p;
        adv_sum += a;
    }
    let n = seeds as f64;
    println!(
        "mean probe accuracy: GE2E-AC {:.1}%  GE2E-AC-A {:.1}%  (lambda_sc = {lambda_sc})",
        100.0 * plain_sum / n,
        100.0 * adv_sum / n
    );
    Ok(())
}
