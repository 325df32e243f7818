//! Word accuracy (symbols ignored) and 1-N.E.D over prediction files.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use unicode_general_category::{get_general_category, GeneralCategory as Gc};

use crate::bank::is_cjk;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalPair {
    pub id: String,
    pub prediction: String,
    pub ground_truth: String,
}

impl EvalPair {
    pub fn new(id: impl Into<String>, prediction: impl Into<String>, ground_truth: impl Into<String>) -> Self {
        EvalPair {
            id: id.into(),
            prediction: prediction.into(),
            ground_truth: ground_truth.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n_total: usize,
    pub n_non_latin: usize,
    pub word_acc_all: f64,
    pub word_acc_non_latin: f64,
    pub ned_all: f64,
    pub ned_non_latin: f64,
}

impl MetricsReport {
    /// Aligned two-column text table.
    pub fn to_table(&self) -> String {
        let rows = [
            ("subset", "all".to_string(), "non-latin".to_string()),
            ("samples", self.n_total.to_string(), self.n_non_latin.to_string()),
            (
                "word_acc",
                format!("{:.4}", self.word_acc_all),
                format!("{:.4}", self.word_acc_non_latin),
            ),
            (
                "1-N.E.D",
                format!("{:.4}", self.ned_all),
                format!("{:.4}", self.ned_non_latin),
            ),
        ];
        rows.iter()
            .map(|(k, a, b)| format!("{k:<10}{a:>12}{b:>12}\n"))
            .collect()
    }
}

fn is_ignored(c: char) -> bool {
    matches!(
        get_general_category(c),
        Gc::ConnectorPunctuation
            | Gc::DashPunctuation
            | Gc::OpenPunctuation
            | Gc::ClosePunctuation
            | Gc::InitialPunctuation
            | Gc::FinalPunctuation
            | Gc::OtherPunctuation
            | Gc::MathSymbol
            | Gc::CurrencySymbol
            | Gc::ModifierSymbol
            | Gc::OtherSymbol
            | Gc::SpaceSeparator
            | Gc::LineSeparator
            | Gc::ParagraphSeparator
    )
}

/// Drops punctuation, symbols and separators; lowercases unless `case_sensitive`.
pub fn normalize_transcript(s: &str, case_sensitive: bool) -> String {
    let kept = s.chars().filter(|&c| !is_ignored(c));
    if case_sensitive {
        kept.collect()
    } else {
        kept.flat_map(char::to_lowercase).collect()
    }
}

/// Levenshtein distance over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - dist / max(len)`; two empty strings score 1.
pub fn one_minus_ned(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - edit_distance(a, b) as f64 / longest as f64
}

/// Scores every pair. The non-Latin subset is the pairs whose ground truth
/// has at least one CJK character.
pub fn evaluate(pairs: &[EvalPair], case_sensitive: bool) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let scored: Vec<(bool, bool, f64)> = pairs
        .par_iter()
        .map(|p| {
            let pred = normalize_transcript(&p.prediction, case_sensitive);
            let gt = normalize_transcript(&p.ground_truth, case_sensitive);
            (
                p.ground_truth.chars().any(is_cjk),
                pred == gt,
                one_minus_ned(&pred, &gt),
            )
        })
        .collect();
    let mean = |filter: &dyn Fn(&(bool, bool, f64)) -> bool| {
        let picked: Vec<_> = scored.iter().filter(|s| filter(s)).collect();
        if picked.is_empty() {
            return (0, 0.0, 0.0);
        }
        let n = picked.len() as f64;
        let acc = picked.iter().filter(|s| s.1).count() as f64 / n;
        let ned = picked.iter().map(|s| s.2).sum::<f64>() / n;
        (picked.len(), acc, ned)
    };
    let (n_total, word_acc_all, ned_all) = mean(&|_| true);
    let (n_non_latin, word_acc_non_latin, ned_non_latin) = mean(&|s| s.0);
    Ok(MetricsReport {
        n_total,
        n_non_latin,
        word_acc_all,
        word_acc_non_latin,
        ned_all,
        ned_non_latin,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalInput {
    pub pairs: Vec<EvalPair>,
    pub warnings: Vec<String>,
}

fn parse_tsv(text: &str, what: &str) -> Result<Vec<(String, String)>> {
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let (id, transcript) = line.split_once('\t').unwrap_or((line, ""));
        if !seen.insert(id.to_string()) {
            return Err(Error::DuplicateId(format!("{id} ({what} line {})", n + 1)));
        }
        rows.push((id.to_string(), transcript.to_string()));
    }
    Ok(rows)
}

/// Joins `id<TAB>transcript` prediction and ground-truth texts on id, in
/// ground-truth order.
pub fn join_eval_text(pred: &str, gt: &str) -> Result<EvalInput> {
    let preds = parse_tsv(pred, "predictions")?;
    let gts = parse_tsv(gt, "ground truth")?;
    let gt_ids: HashSet<&str> = gts.iter().map(|(id, _)| id.as_str()).collect();
    let pred_map: HashMap<&str, &str> = preds.iter().map(|(i, t)| (i.as_str(), t.as_str())).collect();
    let mut warnings = Vec::new();
    let pairs = gts
        .iter()
        .map(|(id, truth)| {
            let prediction = pred_map.get(id.as_str()).copied().unwrap_or_else(|| {
                warnings.push(format!("no prediction for `{id}`, scoring it as empty"));
                ""
            });
            EvalPair::new(id.clone(), prediction, truth.clone())
        })
        .collect();
    for (id, _) in &preds {
        if !gt_ids.contains(id.as_str()) {
            warnings.push(format!("prediction `{id}` has no ground truth, ignored"));
        }
    }
    Ok(EvalInput { pairs, warnings })
}

pub fn load_eval_files(pred_path: &Path, gt_path: &Path) -> Result<EvalInput> {
    let pred = fs::read_to_string(pred_path).map_err(|e| Error::unreadable(pred_path, e))?;
    let gt = fs::read_to_string(gt_path).map_err(|e| Error::unreadable(gt_path, e))?;
    join_eval_text(&pred, &gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize_transcript("ab!c", false), "abc");
        assert_eq!(normalize_transcript("慧 心", false), "慧心");
        assert_eq!(normalize_transcript("", false), "");
        assert_eq!(normalize_transcript("AbC$", false), "abc");
        assert_eq!(normalize_transcript("AbC$", true), "AbC");
        assert_eq!(normalize_transcript("慧，心。", false), "慧心");
    }

    #[test]
    fn distances() {
        assert_eq!(edit_distance("abc", "abc"), 0);
        assert_eq!(edit_distance("kitten", "sitting"), 3);
        assert_eq!(edit_distance("慧", ""), 1);
        assert!((one_minus_ned("kitten", "sitting") - (1.0 - 3.0 / 7.0)).abs() < 1e-15);
        assert_eq!(one_minus_ned("a", ""), 0.0);
        assert_eq!(one_minus_ned("", ""), 1.0);
    }

    #[test]
    fn evaluate_splits_non_latin() {
        let pairs = vec![
            EvalPair::new("1", "ABC", "abc"),
            EvalPair::new("2", "慧心", "慧心"),
            EvalPair::new("3", "慧", "慧A"),
        ];
        let r = evaluate(&pairs, false).unwrap();
        assert_eq!((r.n_total, r.n_non_latin), (3, 2));
        assert!((r.word_acc_all - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.word_acc_non_latin, 0.5);
        assert!((r.ned_non_latin - 0.75).abs() < 1e-15);
        assert!(matches!(evaluate(&[], false), Err(Error::EmptyInput)));
        assert!(r.to_table().contains("non-latin"));
    }

    #[test]
    fn join_rules() {
        let j = join_eval_text("a\tx\nb\ty\nz\tq\n", "a\tx\nb\ty\nc\tw\n").unwrap();
        assert_eq!(j.pairs.len(), 3);
        assert_eq!(j.pairs[2].prediction, "");
        assert_eq!(j.warnings.len(), 2);
        assert!(matches!(join_eval_text("", "a\tx\na\ty\n"), Err(Error::DuplicateId(_))));
    }
}
