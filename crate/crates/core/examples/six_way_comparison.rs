//! Trains CE-AC, GE2E-AC and GE2E-AC-A on every feature set of a
//! comparison config and prints the accuracy table.
//!
//!     cargo run --release --example six_way_comparison -- configs/vctk_c3.toml
//!
//! Without a config it runs a small demo on two synthetic feature sets
//! written under `runs/six_way_demo/`.

use std::path::{Path, PathBuf};

use accent_ge2e::evaluation::{format_table, Method};
use accent_ge2e::experiment::{run_comparison, ComparisonConfig, FeatureSet, ModelPreset};
use accent_ge2e::features::{generate_synthetic, write_dataset, SplitSpec, SyntheticConfig};
use accent_ge2e::training::TrainConfig;

fn demo_config(root: &Path) -> Result<ComparisonConfig, Box<dyn std::error::Error>> {
    let sets = [
        ("clean", SyntheticConfig { dims: 16, noise: 0.5, ..SyntheticConfig::default() }),
        ("noisy", SyntheticConfig { dims: 24, noise: 1.5, accent_sep: 1.5, seed: 1, ..SyntheticConfig::default() }),
    ];
    let mut features = Vec::new();
    for (name, synth) in sets {
        let dir = root.join(name);
        write_dataset(&generate_synthetic(&synth)?, &dir)?;
        features.push(FeatureSet { name: name.into(), data: dir, test_data: None });
    }
    Ok(ComparisonConfig {
        output_dir: root.join("report"),
        methods: Method::ALL.to_vec(),
        split: SplitSpec { test_speakers_per_class: 2, seed: 0 },
        model: ModelPreset::Compact,
        model_seed: 0,
        train: TrainConfig { learning_rate: 1e-3, epochs: 20, lambda_sc: 0.01, ..TrainConfig::default() },
        features,
    })
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = match std::env::args().nth(1) {
        Some(path) => ComparisonConfig::load(&PathBuf::from(path))?,
        None => demo_config(Path::new("runs/six_way_demo"))?,
    };
    let output = run_comparison(&config)?;
    print!("{}", format_table(&output.results));
    println!("report: {}", output.report.csv.display());
    Ok(())
}
