//! Build the radical bank for the desk charset and encode a few characters.
//!
//!     cargo run --example radical_bank -- 慧心A

use radicalc::bank::{build_bank, build_bor_matrix, encode_char, Charset};
use radicalc::ids::load_ids_table;

fn main() -> radicalc::Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");
    let charset = Charset::load(format!("{dir}/desk_charset.txt"))?;
    let table = load_ids_table(format!("{dir}/desk_ids.txt"))?;
    let bank = build_bank(&charset, &table)?;
    let matrix = build_bor_matrix(&charset, &bank, &table);
    println!(
        "{} characters, {} classes, D = {} radicals, matrix {:?}",
        charset.chars().len(),
        charset.num_classes(),
        bank.len(),
        matrix.shape()
    );

    let query = std::env::args().nth(1).unwrap_or_else(|| "慧心A".into());
    for c in query.chars() {
        let enc = encode_char(c, &bank, &table);
        let names: Vec<String> = enc
            .vector
            .ones()
            .map(|i| format!("{}@{i}", bank.radicals()[i]))
            .collect();
        println!("{c}: popcount {} [{}]", enc.vector.popcount(), names.join(", "));
    }
    Ok(())
}
