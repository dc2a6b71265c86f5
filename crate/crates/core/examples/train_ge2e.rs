//! Trains a GE2E accent embedder on a synthetic corpus and scores it by
//! nearest centroid on held-out speakers.
//!
//!     cargo run --release --example train_ge2e -- [epochs] [learning_rate]

use std::time::Instant;

use accent_ge2e::evaluation::{build_centroids, evaluate_centroids};
use accent_ge2e::features::{generate_synthetic, split_by_speaker, LabelNames, SplitSpec, SyntheticConfig};
use accent_ge2e::network::{Model, ModelConfig};
use accent_ge2e::training::{train_ge2e, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(100);
    let learning_rate: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1e-3);

    let data = SyntheticConfig::default();
    let records = generate_synthetic(&data)?;
    let (train, test) = split_by_speaker(&records, SplitSpec { test_speakers_per_class: 2, seed: 0 })?;
    let speakers = data.classes * data.speakers_per_class;
    let mut model = Model::new(ModelConfig::compact(data.dims, data.classes, speakers), 0)?;
    let config = TrainConfig { learning_rate, epochs, ..TrainConfig::default() };

    let start = Instant::now();
    let history = train_ge2e(&train, &mut model, &config, false)?;
    let losses = history.losses();
    println!(
        "{} steps in {:.1?}; loss {:.4} -> {:.4}",
        losses.len(),
        start.elapsed(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );

    let names = LabelNames::numbered(data.classes, speakers).class_names;
    let centroids = build_centroids(&model, &train, names)?;
    let train_eval = evaluate_centroids(&model, &train, &centroids)?;
    let test_eval = evaluate_centroids(&model, &test, &centroids)?;
    println!(
        "train accuracy {:.1}%  test accuracy {:.1}%  (chance {:.1}%)",
        100.0 * train_eval.accuracy,
        100.0 * test_eval.accuracy,
        100.0 / data.classes as f64
    );
    Ok(())
}
