//! The masked character + radical loss on hand-made logits.

use radicalc::bank::{BoRMatrix, Charset};
use radicalc::loss::{hybrid_loss, latin_mask, TargetSequence};
use radicalc::tensor::{SeededRng, Tensor};

fn main() -> radicalc::Result<()> {
    let charset = Charset::new("慧心AB".chars())?;
    // 慧 and 心 share the radical in column 1; Latin and special rows stay zero.
    let bor = BoRMatrix::from_rows(vec![
        vec![1, 1, 1, 0],
        vec![0, 1, 0, 0],
        vec![0; 4],
        vec![0; 4],
        vec![0; 4],
        vec![0; 4],
        vec![0; 4],
    ]);
    let mut rng = SeededRng::new(3);
    for text in ["慧心", "AB", "慧A"] {
        let targets = TargetSequence::new(text, &charset, &bor);
        let t = targets.len();
        let y = Tensor::uniform(&[t, charset.num_classes()], 2.0, &mut rng);
        let r = Tensor::uniform(&[t, 4], 2.0, &mut rng);
        let report = hybrid_loss(&y, &r, &targets)?;
        println!(
            "{text}: mask {:?}  L = {:.4} = l_o {:.4} + l_r {:.4}",
            latin_mask(text, &charset),
            report.total,
            report.l_o,
            report.l_r
        );
    }
    Ok(())
}
