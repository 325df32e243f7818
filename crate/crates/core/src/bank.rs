//! Bags of radicals, the radical bank, and multi-hot BoR encodings.
//!
//! A character is expanded depth-first through its first dictionary entry.
//! Every component met on the way, intermediate or atomic, joins the bag:
//!
//! ```text
//! 慧 = ⿱彗心     彗 = ⿱⿰丰丰彐     丰 = ⿻三丨     三 = ⿱一二     二 = ⿱一一
//! bag(慧) = {彗, 心, 丰, 彐, 三, 丨, 一, 二}
//! ```
//!
//! The bank is the sorted union of the bags over a charset, and a
//! character's BoR vector has a one at the bank index of each member of
//! its bag. Anything that is not a CJK ideograph maps to the zero vector.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ids::{Component, DecompositionTable, IdsNode};
use crate::tensor::Tensor;

/// CJK Unified Ideographs, base block and extensions A through I.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF
        | 0x3400..=0x4DBF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2EE5F
        | 0x30000..=0x323AF)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RadicalBag(BTreeSet<Component>);

impl RadicalBag {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, c: &Component) -> bool {
        self.0.contains(c)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Component> {
        self.0.iter()
    }
}

impl FromIterator<Component> for RadicalBag {
    fn from_iter<I: IntoIterator<Item = Component>>(iter: I) -> Self {
        RadicalBag(iter.into_iter().collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decomposition {
    pub bag: RadicalBag,
    pub warnings: Vec<String>,
}

/// Recursive bag-of-radicals expansion of `c`.
///
/// A character with no entry, or whose entry is just itself, is an atom and
/// its bag is `{c}`. A component that reappears while it is still being
/// expanded is a cycle: it is kept as an atom and a warning is recorded. If
/// the cycle runs back to `c` itself, `c` is treated as an atom.
pub fn decompose_char(c: char, table: &DecompositionTable) -> Decomposition {
    let atom = || RadicalBag(BTreeSet::from([Component::from_char(c)]));
    let Some(ids) = expandable(c, table) else {
        return Decomposition {
            bag: atom(),
            warnings: Vec::new(),
        };
    };
    let mut walk = Walk {
        table,
        bag: BTreeSet::new(),
        path: vec![c],
        expanded: HashSet::new(),
        warnings: Vec::new(),
        root_cycle: false,
    };
    walk.visit(ids);
    if walk.root_cycle {
        return Decomposition {
            bag: atom(),
            warnings: walk.warnings,
        };
    }
    Decomposition {
        bag: RadicalBag(walk.bag),
        warnings: walk.warnings,
    }
}

/// The first IDS of `c`, unless `c` is absent or listed as itself.
fn expandable(c: char, table: &DecompositionTable) -> Option<&IdsNode> {
    let ids = &table.first(c)?.ids;
    match ids {
        IdsNode::Leaf(Component::Char(x)) if *x == c => None,
        IdsNode::Leaf(_) => None,
        _ => Some(ids),
    }
}

struct Walk<'t> {
    table: &'t DecompositionTable,
    bag: BTreeSet<Component>,
    path: Vec<char>,
    expanded: HashSet<char>,
    warnings: Vec<String>,
    root_cycle: bool,
}

impl Walk<'_> {
    fn visit(&mut self, ids: &IdsNode) {
        for leaf in ids.leaves() {
            if let Some(x) = leaf.as_char() {
                if self.path.contains(&x) {
                    self.warnings.push(format!(
                        "cycle: `{x}` reached again via {}",
                        self.path.iter().collect::<String>()
                    ));
                    if x == self.path[0] {
                        self.root_cycle = true;
                    } else {
                        self.bag.insert(leaf.clone());
                    }
                    continue;
                }
                self.bag.insert(leaf.clone());
                if self.expanded.insert(x) {
                    if let Some(sub) = expandable(x, self.table) {
                        self.path.push(x);
                        self.visit(sub);
                        self.path.pop();
                    }
                }
            } else {
                self.bag.insert(leaf.clone());
            }
        }
    }
}

/// Labels of the classes appended after the characters.
pub const SPECIAL_LABELS: [&str; 3] = ["<PAD>", "<EOS>", "<UNK>"];

/// The class inventory: characters first, then PAD, EOS and UNK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Charset {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassLabel {
    Char(char),
    Pad,
    Eos,
    Unk,
}

impl Charset {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let chars: Vec<char> = chars.into_iter().collect();
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::format("charset", format!("duplicate character `{c}`")));
            }
        }
        Ok(Charset { chars, index })
    }

    /// One character per line; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut chars = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let mut it = line.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => {
                    return Err(Error::format(
                        "charset",
                        format!("line {}: expected a single character, got `{line}`", i + 1),
                    ))
                }
            }
        }
        Charset::new(chars)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::unreadable(path, e))?;
        Charset::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.chars.iter().map(|c| format!("{c}\n")).collect()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn num_classes(&self) -> usize {
        self.chars.len() + SPECIAL_LABELS.len()
    }

    pub fn pad(&self) -> usize {
        self.chars.len()
    }

    pub fn eos(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn unk(&self) -> usize {
        self.chars.len() + 2
    }

    /// Class id of `c`, falling back to UNK.
    pub fn class_of(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or_else(|| self.unk())
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn label(&self, class: usize) -> Option<ClassLabel> {
        let n = self.chars.len();
        match class {
            i if i < n => Some(ClassLabel::Char(self.chars[i])),
            i if i == n => Some(ClassLabel::Pad),
            i if i == n + 1 => Some(ClassLabel::Eos),
            i if i == n + 2 => Some(ClassLabel::Unk),
            _ => None,
        }
    }

    /// Display label for a class: the character, or `<PAD>` and friends.
    pub fn label_text(&self, class: usize) -> String {
        match self.label(class) {
            Some(ClassLabel::Char(c)) => c.to_string(),
            Some(ClassLabel::Pad) => SPECIAL_LABELS[0].into(),
            Some(ClassLabel::Eos) => SPECIAL_LABELS[1].into(),
            Some(ClassLabel::Unk) => SPECIAL_LABELS[2].into(),
            None => format!("<{class}?>"),
        }
    }
}

/// CRBank: the ordered set of distinct radicals across a charset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RadicalBank {
    radicals: Vec<Component>,
    index: HashMap<Component, usize>,
}

impl RadicalBank {
    pub fn from_radicals(radicals: impl IntoIterator<Item = Component>) -> Result<Self> {
        let set: BTreeSet<Component> = radicals.into_iter().collect();
        if set.is_empty() {
            return Err(Error::EmptyBank);
        }
        let radicals: Vec<Component> = set.into_iter().collect();
        let index = radicals.iter().enumerate().map(|(i, r)| (r.clone(), i)).collect();
        Ok(RadicalBank { radicals, index })
    }

    pub fn len(&self) -> usize {
        self.radicals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radicals.is_empty()
    }

    pub fn radicals(&self) -> &[Component] {
        &self.radicals
    }

    pub fn index_of(&self, r: &Component) -> Option<usize> {
        self.index.get(r).copied()
    }

    /// `D=<n>` header, then one radical per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("D={}\n", self.len());
        for r in &self.radicals {
            let _ = writeln!(out, "{r}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let d: usize = header
            .strip_prefix("D=")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| Error::format("bank", format!("bad header `{header}`")))?;
        let radicals = lines
            .filter(|l| !l.is_empty())
            .map(|l| Component::from_text(l).ok_or_else(|| Error::format("bank", format!("bad radical `{l}`"))))
            .collect::<Result<Vec<_>>>()?;
        let bank = RadicalBank::from_radicals(radicals)?;
        if bank.len() != d {
            return Err(Error::format(
                "bank",
                format!("header says D={d}, found {} distinct radicals", bank.len()),
            ));
        }
        Ok(bank)
    }
}

pub fn build_bank(charset: &Charset, table: &DecompositionTable) -> Result<RadicalBank> {
    let bags: Vec<RadicalBag> = charset
        .chars()
        .par_iter()
        .filter(|c| is_cjk(**c))
        .map(|&c| decompose_char(c, table).bag)
        .collect();
    if bags.is_empty() {
        return Err(Error::EmptyBank);
    }
    RadicalBank::from_radicals(bags.into_iter().flat_map(|b| b.0))
}

/// Multi-hot radical-presence vector over a bank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoRVector {
    bits: Vec<u8>,
}

impl BoRVector {
    pub fn zeros(d: usize) -> Self {
        BoRVector { bits: vec![0; d] }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b == 1).map(|(i, _)| i)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BorEncoding {
    pub vector: BoRVector,
    /// Radicals of the character that the bank does not know.
    pub missing: Vec<Component>,
}

pub fn encode_char(c: char, bank: &RadicalBank, table: &DecompositionTable) -> BorEncoding {
    let mut vector = BoRVector::zeros(bank.len());
    let mut missing = Vec::new();
    if is_cjk(c) {
        for r in decompose_char(c, table).bag.iter() {
            match bank.index_of(r) {
                Some(i) => vector.bits[i] = 1,
                None => missing.push(r.clone()),
            }
        }
    }
    BorEncoding { vector, missing }
}

/// The stacked BoR vectors of every class, shape `(num_classes, D)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoRMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl BoRMatrix {
    /// Rows of 0/1 bits; every row must have the same length.
    pub fn from_rows(rows: Vec<Vec<u8>>) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged BoR rows");
        BoRMatrix {
            rows: rows.len(),
            cols,
            bits: rows.concat(),
        }
    }

    /// Reads back a `(num_classes, D)` tensor; nonzero entries become 1.
    pub fn from_tensor(t: &Tensor) -> Self {
        let cols = t.shape().get(1).copied().unwrap_or(0);
        BoRMatrix {
            rows: t.shape()[0],
            cols,
            bits: t.data().iter().map(|&v| u8::from(v != 0.0)).collect(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_popcount(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&b| b == 1).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            vec![self.rows, self.cols],
            self.bits.iter().map(|&b| b as f64).collect(),
        )
        .expect("matrix dims match data")
    }

    /// Tab-separated rows: class label, then the D bits.
    pub fn to_tsv(&self, charset: &Charset) -> String {
        let mut out = String::new();
        for i in 0..self.rows {
            out.push_str(&charset.label_text(i));
            for b in self.row(i) {
                out.push('\t');
                out.push(if *b == 1 { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

pub fn build_bor_matrix(charset: &Charset, bank: &RadicalBank, table: &DecompositionTable) -> BoRMatrix {
    let cols = bank.len();
    let rows = charset.num_classes();
    let mut bits = vec![0u8; rows * cols];
    let encoded: Vec<BoRVector> = charset
        .chars()
        .par_iter()
        .map(|&c| encode_char(c, bank, table).vector)
        .collect();
    for (i, v) in encoded.iter().enumerate() {
        bits[i * cols..(i + 1) * cols].copy_from_slice(v.bits());
    }
    BoRMatrix { rows, cols, bits }
}

pub const BANK_FILE: &str = "bank.txt";
pub const CHARSET_FILE: &str = "charset.txt";
pub const MATRIX_FILE: &str = "bor_matrix.tsv";
pub const IDS_FILE: &str = "ids.txt";

/// Everything `radicalc encode` needs, as written by `radicalc bank build`.
pub struct BankDir {
    pub charset: Charset,
    pub bank: RadicalBank,
    pub table: DecompositionTable,
}

impl BankDir {
    pub fn write(
        dir: &Path,
        charset: &Charset,
        bank: &RadicalBank,
        ids_text: &str,
        table: &DecompositionTable,
    ) -> Result<BoRMatrix> {
        fs::create_dir_all(dir)?;
        let matrix = build_bor_matrix(charset, bank, table);
        fs::write(dir.join(BANK_FILE), bank.to_text())?;
        fs::write(dir.join(CHARSET_FILE), charset.to_text())?;
        fs::write(dir.join(MATRIX_FILE), matrix.to_tsv(charset))?;
        fs::write(dir.join(IDS_FILE), ids_text)?;
        Ok(matrix)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::unreadable(p, e))
        };
        Ok(BankDir {
            bank: RadicalBank::parse(&read(BANK_FILE)?)?,
            charset: Charset::parse(&read(CHARSET_FILE)?)?,
            table: DecompositionTable::parse(&read(IDS_FILE)?)?,
        })
    }
}
