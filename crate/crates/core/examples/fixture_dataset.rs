//! Generate the synthetic fixture and index it like a real dataset.
//!
//! cargo run --release --example fixture_dataset -- [out_dir]

use dualfer::data::{generate_fixture, load_dataset, FixtureSpec, LoadOptions};

fn main() -> dualfer::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "fixture".into());
    let paths = generate_fixture(&out, &FixtureSpec::default())?;
    println!("wrote {} images under {out}", paths.len());

    let index = load_dataset(&out, &LoadOptions::default())?;
    for (name, count) in index.classes.iter().zip(index.class_counts()) {
        println!("{name:>12}: {count} images");
    }
    let first = index.load_sample(0)?;
    println!(
        "first sample: {} label {} subject {:?} shape {:?}",
        first.source_path.display(),
        first.label,
        first.subject_id,
        first.image.shape()
    );
    Ok(())
}
