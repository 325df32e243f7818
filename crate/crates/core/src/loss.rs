//! Hybrid character/radical loss.
//!
//! `L = l_o + l_r` where `l_o` is the mean per-step cross-entropy and `l_r`
//! is the per-step mean BCE over the radical bank, averaged over the steps
//! whose target is a CJK character. Latin, digit and special steps are
//! masked out of the BCE term entirely.

use serde::Serialize;

use crate::bank::{is_cjk, BoRMatrix, Charset};
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// 1 for each CJK character the charset knows, 0 otherwise.
pub fn latin_mask(text: &str, charset: &Charset) -> Vec<u8> {
    text.chars()
        .map(|c| u8::from(is_cjk(c) && charset.contains(c)))
        .collect()
}

/// Teacher-forcing targets for one word, EOS step included.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSequence {
    pub classes: Vec<usize>,
    /// Bag-of-radicals row per step, as 0.0/1.0.
    pub radicals: Vec<Vec<f64>>,
    pub mask: Vec<u8>,
}

impl TargetSequence {
    pub fn new(text: &str, charset: &Charset, bor: &BoRMatrix) -> Self {
        let mut classes: Vec<usize> = text.chars().map(|c| charset.class_of(c)).collect();
        classes.push(charset.eos());
        let mut mask = latin_mask(text, charset);
        mask.push(0);
        let radicals = classes
            .iter()
            .map(|&k| bor.row(k).iter().map(|&b| f64::from(b)).collect())
            .collect();
        TargetSequence {
            classes,
            radicals,
            mask,
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    fn radical_steps(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLoss {
    pub ce: f64,
    /// Unmasked mean BCE; `None` on masked steps.
    pub bce: Option<f64>,
    pub mask: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossReport {
    #[serde(rename = "L")]
    pub total: f64,
    pub l_o: f64,
    pub l_r: f64,
    pub steps: Vec<StepLoss>,
    /// Steps excluded from the BCE term.
    pub masked_steps: usize,
}

impl LossReport {
    fn check(self, step: Option<u64>) -> Result<Self> {
        let finite = [self.total, self.l_o, self.l_r].iter().all(|v| v.is_finite());
        if finite {
            Ok(self)
        } else {
            Err(Error::NonFiniteLoss { step })
        }
    }
}

/// Loss nodes recorded on a tape.
#[derive(Clone, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub l_o: NodeId,
    pub l_r: NodeId,
    pub ce: Vec<NodeId>,
    pub bce: Vec<Option<NodeId>>,
}

/// Records the hybrid loss. With `use_bce` false the radical term is the
/// constant 0 and the radical head gets no gradient.
pub fn hybrid_loss_graph(
    g: &mut Graph,
    y_logits: &[NodeId],
    radical_logits: &[NodeId],
    targets: &TargetSequence,
    use_bce: bool,
) -> Result<LossNodes> {
    let steps = targets.len();
    if y_logits.len() != steps || radical_logits.len() != steps {
        return Err(Error::ShapeMismatch {
            op: "hybrid_loss",
            left: vec![y_logits.len(), radical_logits.len()],
            right: vec![steps],
        });
    }
    if steps == 0 {
        return Err(Error::EmptyInput);
    }
    let inv_t = 1.0 / steps as f64;
    let denom = targets.radical_steps().max(1) as f64;

    let mut ce = Vec::with_capacity(steps);
    let mut ce_terms = Vec::with_capacity(steps);
    let mut bce = Vec::with_capacity(steps);
    let mut bce_terms = Vec::new();
    for t in 0..steps {
        let c = g.cross_entropy(y_logits[t], targets.classes[t])?;
        ce.push(c);
        ce_terms.push(g.scale_const(c, inv_t));
        if use_bce && targets.mask[t] == 1 {
            let b = g.bce_mean(radical_logits[t], &targets.radicals[t])?;
            bce.push(Some(b));
            bce_terms.push(g.scale_const(b, 1.0 / denom));
        } else {
            bce.push(None);
        }
    }
    let l_o = g.sum(&ce_terms)?;
    let l_r = if bce_terms.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        g.sum(&bce_terms)?
    };
    let total = g.sum(&[l_o, l_r])?;
    Ok(LossNodes {
        total,
        l_o,
        l_r,
        ce,
        bce,
    })
}

/// Reads a [`LossReport`] back out of a recorded loss.
pub fn report_from_graph(g: &Graph, nodes: &LossNodes, targets: &TargetSequence) -> Result<LossReport> {
    let steps = nodes
        .ce
        .iter()
        .zip(&nodes.bce)
        .zip(&targets.mask)
        .map(|((&c, b), &m)| StepLoss {
            ce: g.value(c).item(),
            bce: b.map(|b| g.value(b).item()),
            mask: m,
        })
        .collect();
    LossReport {
        total: g.value(nodes.total).item(),
        l_o: g.value(nodes.l_o).item(),
        l_r: g.value(nodes.l_r).item(),
        steps,
        masked_steps: targets.len() - targets.radical_steps(),
    }
    .check(None)
}

/// Value-only hybrid loss over `T×C` and `T×D` logit tables.
pub fn hybrid_loss(y_logits: &Tensor, radical_logits: &Tensor, targets: &TargetSequence) -> Result<LossReport> {
    let t = targets.len();
    if y_logits.shape().len() != 2 || y_logits.shape()[0] != t {
        return Err(Error::ShapeMismatch {
            op: "hybrid_loss(y_logits)",
            left: y_logits.shape().to_vec(),
            right: vec![t],
        });
    }
    let d = targets.radicals.first().map_or(0, Vec::len);
    if radical_logits.shape() != [t, d] {
        return Err(Error::ShapeMismatch {
            op: "hybrid_loss(radical_logits)",
            left: radical_logits.shape().to_vec(),
            right: vec![t, d],
        });
    }
    let mut g = Graph::new();
    let mut ys = Vec::with_capacity(t);
    let mut rs = Vec::with_capacity(t);
    for i in 0..t {
        ys.push(g.constant(Tensor::vector(y_logits.row(i).to_vec())));
        rs.push(g.constant(Tensor::vector(radical_logits.row(i).to_vec())));
    }
    let nodes = hybrid_loss_graph(&mut g, &ys, &rs, targets, true)?;
    report_from_graph(&g, &nodes, targets)
}
