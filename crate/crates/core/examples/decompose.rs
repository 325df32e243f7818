//! Parse an IDS and expand a character into its bag of radicals.
//!
//!     cargo run --example decompose -- 慧

use radicalc::bank::decompose_char;
use radicalc::ids::{load_ids_table, parse_ids_str};

fn main() -> radicalc::Result<()> {
    let c = std::env::args().nth(1).and_then(|s| s.chars().next()).unwrap_or('慧');
    let table = load_ids_table(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/desk_ids.txt"))?;

    match table.first(c) {
        Some(entry) => {
            let tree = parse_ids_str(&entry.ids.to_string()).map_err(radicalc::Error::Ids)?;
            println!("{c} = {tree}  (depth {})", tree.depth());
        }
        None => println!("{c} has no entry, it is its own radical"),
    }

    let d = decompose_char(c, &table);
    let radicals: Vec<String> = d.bag.iter().map(ToString::to_string).collect();
    println!("bag of {} radicals: {}", d.bag.len(), radicals.join(" "));
    for w in &d.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
