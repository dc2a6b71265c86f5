//! Generates a synthetic accent corpus, writes it in the portable feature
//! format, reads it back and prints its summary.
//!
//!     cargo run --example synthetic_dataset -- [out_dir] [seed]

use std::path::PathBuf;

use accent_ge2e::features::{dataset_digest, generate_synthetic, read_dataset, split_by_speaker, write_dataset, SplitSpec, SyntheticConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/synthetic".into()));
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);

    let config = SyntheticConfig { seed, ..SyntheticConfig::default() };
    let records = generate_synthetic(&config)?;
    let manifest = write_dataset(&records, &out)?;
    println!("wrote {} utterances to {}", manifest.len(), out.display());

    let (loaded, summary) = read_dataset(&out)?;
    assert_eq!(loaded, records);
    println!(
        "{} accents, {} speakers, utterances per accent {:?}, digest {}",
        summary.num_accents,
        summary.num_speakers,
        summary.class_counts,
        dataset_digest(&out)?
    );

    let (train, test) = split_by_speaker(&loaded, SplitSpec { test_speakers_per_class: 2, seed })?;
    println!("speaker split: {} train / {} test utterances", train.len(), test.len());
    let first = &manifest[0];
    println!("first entry: {} -> {} ({}x{} f32)", first.id, first.file, first.frames, first.dims);
    Ok(())
}
