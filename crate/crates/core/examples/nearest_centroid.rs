//! Scores utterances by cosine similarity to accent centroids, including an
//! accent the embedder never saw in training: its centroid is built from a
//! few enrollment utterances, with no retraining.
//!
//!     cargo run --release --example nearest_centroid -- [epochs]

use accent_ge2e::evaluation::{embed_records, evaluate_centroids, predict, CentroidSet};
use accent_ge2e::features::{generate_synthetic, split_by_speaker, SplitSpec, SyntheticConfig, UtteranceRecord};
use accent_ge2e::network::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use accent_ge2e::training::{train_ge2e, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(60);

    let data = SyntheticConfig::default();
    let records = generate_synthetic(&data)?;
    let (enroll, test) = split_by_speaker(&records, SplitSpec { test_speakers_per_class: 2, seed: 0 })?;
    let unseen = data.classes - 1;
    let seen: Vec<UtteranceRecord> = enroll.iter().filter(|r| r.accent != unseen).cloned().collect();

    let speakers = data.classes * data.speakers_per_class;
    let mut model = Model::new(ModelConfig::compact(data.dims, unseen, speakers), 0)?;
    let config = TrainConfig { learning_rate: 1e-3, epochs, ..TrainConfig::default() };
    train_ge2e(&seen, &mut model, &config, false)?;

    let path = std::env::temp_dir().join("nearest_centroid_example.ckpt");
    save_checkpoint(&model, &path)?;
    let model: Model = load_checkpoint(&path)?;
    println!("trained on accents 1..={unseen}, checkpoint {}", path.display());

    let embeddings = embed_records(&model, &enroll)?;
    let labels: Vec<usize> = enroll.iter().map(|r| r.accent).collect();
    let names: Vec<String> = (1..=data.classes).map(|j| format!("accent{j}")).collect();
    let centroids = CentroidSet::from_embeddings(&embeddings, &labels, names)?;

    let eval = evaluate_centroids(&model, &test, &centroids)?;
    println!("test accuracy over {} accents: {:.1}%", data.classes, 100.0 * eval.accuracy);
    for j in 0..data.classes {
        let row = eval.confusion.row(j);
        let total: u64 = row.iter().sum();
        let tag = if j == unseen { " (unseen in training)" } else { "" };
        println!("  accent{}: {}/{} correct{tag}", j + 1, row[j], total);
    }

    let query = test.iter().find(|r| r.accent == unseen).expect("test utterance of the unseen accent");
    let p = predict(model.embed(&query.features.to_tensor())?.data(), &centroids)?;
    println!("{} -> {}", query.id, centroids.class_names[p.class]);
    Ok(())
}
