//! Word accuracy and 1-N.E.D with the non-Latin split.

use radicalc::metrics::{edit_distance, evaluate, normalize_transcript, one_minus_ned, EvalPair};

fn main() -> radicalc::Result<()> {
    println!("normalize(\"ab!c\") = {}", normalize_transcript("ab!c", false));
    println!(
        "kitten/sitting: distance {}, 1-N.E.D {:.4}",
        edit_distance("kitten", "sitting"),
        one_minus_ned("kitten", "sitting")
    );

    let pairs = vec![
        EvalPair::new("1", "慧心", "慧心"),
        EvalPair::new("2", "彗心", "慧心"),
        EvalPair::new("3", "Hello", "hello!"),
        EvalPair::new("4", "OPEN 24h", "OPEN24H"),
        EvalPair::new("5", "中国", "中国银行"),
    ];
    let report = evaluate(&pairs, false)?;
    print!("{}", report.to_table());
    let strict = evaluate(&pairs, true)?;
    println!("case-sensitive word_acc: {:.4}", strict.word_acc_all);
    Ok(())
}
