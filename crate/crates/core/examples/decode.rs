//! Greedy decoding from a checkpoint, or from a briefly trained model.
//!
//!     cargo run --release --example decode -- checkpoint.rdcl word.pgm

use std::path::Path;

use radicalc::pgm::read_pgm;
use radicalc::trainer::{pad_image, Checkpoint, TrainConfig, Trainer};

fn main() -> radicalc::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let [ckpt, image] = args.as_slice() {
        let trainer = Checkpoint::load(Path::new(ckpt))?.into_trainer()?;
        let img = pad_image(&read_pgm(Path::new(image))?, trainer.model.img_width)?;
        let text = trainer
            .decoder()
            .decode_greedy(&img, &trainer.charset, trainer.model.max_decode_len)?;
        println!("{text}");
        return Ok(());
    }

    let dir = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures"));
    let mut config = TrainConfig::parse(&std::fs::read_to_string(dir.join("train_toy.conf"))?)?;
    config.steps = 200;
    let (charset, bor) = config.load_data(dir)?;
    let mut trainer = Trainer::new(config, charset, &bor.to_tensor())?;
    trainer.run(&mut std::io::sink())?;
    let dec = trainer.decoder();
    for (word, image) in trainer.probe_set().take(8) {
        let got = dec.decode_greedy(image, &trainer.charset, trainer.model.max_decode_len)?;
        println!("{word}\t{got}\t{}", if got == word { "ok" } else { "miss" });
    }
    Ok(())
}
