//! Train on synthetic glyph words, checkpoint, and resume.
//!
//!     cargo run --release --example train_toy -- 300
//!
//! The shipped config runs 2000 steps; pass a smaller count for a quick look.

use std::path::Path;

use radicalc::trainer::{summarize, Checkpoint, TrainConfig, Trainer};

fn main() -> radicalc::Result<()> {
    let dir = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures"));
    let mut config = TrainConfig::parse(&std::fs::read_to_string(dir.join("train_toy.conf"))?)?;
    if let Some(steps) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        config.steps = steps;
    }
    let (charset, bor) = config.load_data(dir)?;

    // first half, then a save/load round trip, then the rest
    let mut trainer = Trainer::new(config, charset, &bor.to_tensor())?;
    let mut log = Vec::new();
    let mut records = trainer.run_to(trainer.config.steps / 2, &mut log)?;

    let bytes = Checkpoint::of(&trainer).to_bytes();
    println!("checkpoint after step {}: {} bytes", trainer.step, bytes.len());
    let mut trainer = Checkpoint::from_bytes(&bytes)?.into_trainer()?;
    records.extend(trainer.run(&mut log)?);

    for r in records.iter().filter(|r| r.probe_word_acc.is_some()) {
        println!(
            "step {:>5}  L {:.4}  l_o {:.4}  l_r {:.4}  acc {:.3}",
            r.step,
            r.total,
            r.l_o,
            r.l_r,
            r.probe_word_acc.unwrap_or(0.0)
        );
    }
    println!("{:#?}", summarize(&records, 0.9));

    let (word, image) = trainer.probe_set().next().expect("non-empty dataset");
    let decoded = trainer
        .decoder()
        .decode_greedy(image, &trainer.charset, trainer.model.max_decode_len)?;
    println!("decode of `{word}`: `{decoded}`");
    Ok(())
}
