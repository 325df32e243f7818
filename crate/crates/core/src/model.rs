//! Radical-aware 2-D attention decoder.
//!
//! One decoding step, starting from the previous class `y`:
//!
//! ```text
//! o    = E_L[y]                      learnable embedding
//! r    = R[y]                        bag-of-radicals row (constant)
//! F_RE = [dropout(W_r r + w_o o) ; r]
//! h,c  = LSTM(F_RE, h, c)
//! g, α = attend(h, V)                additive attention over the H×W map
//! g_r  = W_g Σ G(α)·V                Gaussian re-masking of α
//! F    = g + g_r
//! char logits = φ(F), radical logits = φ_R(F)
//! ```
//!
//! `V` comes from a two-stage conv/pool encoder. The initial hidden state is
//! a projection of the globally pooled map; the cell state starts at zero.

use serde::{Deserialize, Serialize};

use crate::bank::Charset;
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, ParamStore, SeededRng, Tensor};

/// Floor applied to the fitted attention variances.
pub const VARIANCE_FLOOR: f64 = 1e-4;

pub mod names {
    pub const CONV1_W: &str = "enc.conv1.w";
    pub const CONV1_B: &str = "enc.conv1.b";
    pub const CONV2_W: &str = "enc.conv2.w";
    pub const CONV2_B: &str = "enc.conv2.b";
    pub const PROJ_W: &str = "enc.proj.w";
    pub const PROJ_B: &str = "enc.proj.b";
    pub const INIT_W: &str = "dec.init.w";
    pub const EMBED: &str = "cvfm.embed";
    pub const BOR: &str = "cvfm.bor";
    pub const W_R: &str = "cvfm.w_r";
    pub const W_O: &str = "cvfm.w_o";
    pub const LSTM_WX: &str = "lstm.w_x";
    pub const LSTM_WH: &str = "lstm.w_h";
    pub const LSTM_B: &str = "lstm.b";
    pub const ATTN_Q: &str = "attn.w_q";
    pub const ATTN_K: &str = "attn.w_k";
    pub const ATTN_S: &str = "attn.w_s";
    pub const GCRM_W: &str = "gcrm.w_g";
    pub const HEAD_W: &str = "head.char.w";
    pub const HEAD_B: &str = "head.char.b";
    pub const RAD_W: &str = "head.radical.w";
    pub const RAD_B: &str = "head.radical.b";
}

/// Switches that remove one ingredient at a time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Feed the plain learnable embedding to the LSTM.
    pub no_cvfm: bool,
    /// Drop the radical BCE term from the loss.
    pub no_bce: bool,
    /// Replace the radical row with zeros.
    pub re_zero: bool,
    /// Use `o` instead of `w_o · o`.
    pub no_scaler: bool,
    pub no_dropout: bool,
}

/// Which vector the two prediction heads read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadsInput {
    /// The glimpse plus its refinement.
    #[default]
    F,
    /// The raw glimpse only.
    G,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub d_hidden: usize,
    pub d_vis: usize,
    pub d_attn: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub img_height: usize,
    pub img_width: usize,
    /// Radical bank size `D`.
    pub radicals: usize,
    /// Class count `C`, specials included.
    pub classes: usize,
    pub dropout_rate: f64,
    pub max_decode_len: usize,
    pub heads_input: HeadsInput,
    pub ablation: Ablation,
}

impl ModelConfig {
    /// Small dimensions used by the gradient checks.
    pub fn toy(radicals: usize, classes: usize) -> Self {
        ModelConfig {
            d_emb: 8,
            d_hidden: 16,
            d_vis: 8,
            d_attn: 8,
            conv1_channels: 4,
            conv2_channels: 6,
            img_height: 16,
            img_width: 16,
            radicals,
            classes,
            dropout_rate: 0.1,
            max_decode_len: 8,
            heads_input: HeadsInput::F,
            ablation: Ablation::default(),
        }
    }

    pub fn feature_height(&self) -> usize {
        self.img_height / 4
    }

    pub fn feature_width(&self) -> usize {
        self.img_width / 4
    }

    pub fn lstm_input(&self) -> usize {
        if self.ablation.no_cvfm {
            self.d_emb
        } else {
            self.d_emb + self.radicals
        }
    }

    pub fn effective_dropout(&self) -> f64 {
        if self.ablation.no_dropout {
            0.0
        } else {
            self.dropout_rate
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_emb,
            self.d_hidden,
            self.d_vis,
            self.d_attn,
            self.conv1_channels,
            self.conv2_channels,
            self.radicals,
            self.classes,
            self.max_decode_len,
        ];
        if dims.contains(&0) {
            return Err(Error::format("model config", "every dimension must be positive"));
        }
        if self.img_height < 4 || self.img_width < 4 {
            return Err(Error::format("model config", "image must be at least 4×4"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::format("model config", "dropout_rate must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn training(self) -> bool {
        self == Mode::Train
    }
}

/// Fresh parameters: uniform(−a, a) with `a = 1/sqrt(fan_in)`, `w_o = 1`,
/// the PAD embedding row zeroed, and `bor` stored as a frozen buffer.
pub fn init_params(config: &ModelConfig, bor: &Tensor, seed: u64) -> Result<ParamStore> {
    use names::*;
    config.validate()?;
    if bor.shape() != [config.classes, config.radicals] {
        return Err(Error::ShapeMismatch {
            op: "init_params(bor)",
            left: bor.shape().to_vec(),
            right: vec![config.classes, config.radicals],
        });
    }
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::new();
    let mut add = |name: &str, shape: &[usize], fan_in: usize, rng: &mut SeededRng| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        store.insert(name, Tensor::uniform(shape, bound, rng));
    };
    let (c1, c2) = (config.conv1_channels, config.conv2_channels);
    let (h, a) = (config.d_hidden, config.d_attn);
    add(CONV1_W, &[c1, 1, 3, 3], 9, &mut rng);
    add(CONV1_B, &[c1], 9, &mut rng);
    add(CONV2_W, &[c2, c1, 3, 3], 9 * c1, &mut rng);
    add(CONV2_B, &[c2], 9 * c1, &mut rng);
    add(PROJ_W, &[config.d_vis, c2], c2, &mut rng);
    add(PROJ_B, &[config.d_vis], c2, &mut rng);
    add(INIT_W, &[h, config.d_vis], config.d_vis, &mut rng);
    add(EMBED, &[config.classes, config.d_emb], 1, &mut rng);
    add(W_R, &[config.d_emb, config.radicals], config.radicals, &mut rng);
    add(LSTM_WX, &[4 * h, config.lstm_input()], config.lstm_input(), &mut rng);
    add(LSTM_WH, &[4 * h, h], h, &mut rng);
    add(LSTM_B, &[4 * h], h, &mut rng);
    add(ATTN_Q, &[a, h], h, &mut rng);
    add(ATTN_K, &[a, config.d_vis], config.d_vis, &mut rng);
    add(ATTN_S, &[1, a], a, &mut rng);
    add(GCRM_W, &[config.d_vis, config.d_vis], config.d_vis, &mut rng);
    add(HEAD_W, &[config.classes, config.d_vis], config.d_vis, &mut rng);
    add(HEAD_B, &[config.classes], config.d_vis, &mut rng);
    add(RAD_W, &[config.radicals, config.d_vis], config.d_vis, &mut rng);
    add(RAD_B, &[config.radicals], config.d_vis, &mut rng);
    store.insert(W_O, Tensor::scalar(1.0));
    store.insert_frozen(BOR, bor.clone());

    // PAD is the first special class, right after the characters.
    let pad = config.classes - 3;
    let embed = store.value_mut(EMBED)?;
    let d = config.d_emb;
    embed.data_mut()[pad * d..(pad + 1) * d].fill(0.0);
    Ok(store)
}

/// Encoder output bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    /// `[d_vis, H·W]`, row-major over the grid.
    pub v: NodeId,
    /// Attention keys `W_k V`, `[d_attn, H·W]`.
    pub keys: NodeId,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h: NodeId,
    pub c: NodeId,
    pub t: usize,
    pub y_prev: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Gcrm {
    pub refined: NodeId,
    /// `[mu_row, mu_col, var_row, var_col]`.
    pub fit: NodeId,
    pub mask: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub y_logits: NodeId,
    pub radical_logits: NodeId,
    pub alpha: NodeId,
    pub fused: NodeId,
    pub gcrm: Gcrm,
    pub state: DecoderState,
}

/// A model configuration bound to its parameters.
pub struct Decoder<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a ParamStore,
}

impl<'a> Decoder<'a> {
    pub fn new(config: &'a ModelConfig, params: &'a ParamStore) -> Self {
        Decoder { config, params }
    }

    fn p(&self, g: &mut Graph, name: &str) -> Result<NodeId> {
        g.param(self.params, name)
    }

    /// Two (conv 3×3 → tanh → 2×2 mean pool) stages, then a 1×1 projection.
    pub fn toy_encode(&self, g: &mut Graph, image: &Tensor) -> Result<FeatureMap> {
        use names::*;
        let (ih, iw) = (self.config.img_height, self.config.img_width);
        if image.shape() != [1, ih, iw] {
            return Err(Error::ShapeMismatch {
                op: "toy_encode",
                left: image.shape().to_vec(),
                right: vec![1, ih, iw],
            });
        }
        let x = g.constant(image.clone());
        let (w1, b1) = (self.p(g, CONV1_W)?, self.p(g, CONV1_B)?);
        let x = g.conv3x3(x, w1, b1)?;
        let x = g.tanh(x);
        let x = g.avg_pool2(x)?;
        let (w2, b2) = (self.p(g, CONV2_W)?, self.p(g, CONV2_B)?);
        let x = g.conv3x3(x, w2, b2)?;
        let x = g.tanh(x);
        let x = g.avg_pool2(x)?;

        let shape = g.value(x).shape().to_vec();
        let (c2, fh, fw) = (shape[0], shape[1], shape[2]);
        let flat = g.reshape(x, &[c2, fh * fw])?;
        let (pw, pb) = (self.p(g, PROJ_W)?, self.p(g, PROJ_B)?);
        let v = g.matmul(pw, flat)?;
        let v = g.add_bias(v, pb)?;
        let wk = self.p(g, ATTN_K)?;
        let keys = g.matmul(wk, v)?;
        Ok(FeatureMap {
            v,
            keys,
            height: fh,
            width: fw,
        })
    }

    /// `h = W_h · mean(V)`, `c = 0`, previous symbol EOS.
    pub fn initial_state(&self, g: &mut Graph, fm: &FeatureMap) -> Result<DecoderState> {
        let pooled = g.mean_cols(fm.v)?;
        let wh = self.p(g, names::INIT_W)?;
        let h = g.matvec(wh, pooled)?;
        let c = g.constant(Tensor::zeros(&[self.config.d_hidden]));
        Ok(DecoderState {
            h,
            c,
            t: 0,
            y_prev: self.config.classes - 2,
        })
    }

    /// Character vector fusion: `[dropout(W_r r + w_o o) ; r]`.
    pub fn cvfm_fuse(&self, g: &mut Graph, y_prev: usize, mode: Mode, rng: &mut SeededRng) -> Result<NodeId> {
        use names::*;
        let cfg = self.config;
        if y_prev >= cfg.classes {
            return Err(Error::IndexOutOfRange {
                what: "previous class",
                index: y_prev,
                len: cfg.classes,
            });
        }
        let embed = self.p(g, EMBED)?;
        let o = g.row(embed, y_prev)?;
        if cfg.ablation.no_cvfm {
            return Ok(o);
        }
        let r = if cfg.ablation.re_zero {
            g.constant(Tensor::zeros(&[cfg.radicals]))
        } else {
            let bor = self.p(g, BOR)?;
            g.row(bor, y_prev)?
        };
        let wr = self.p(g, W_R)?;
        let wr_r = g.matvec(wr, r)?;
        let scaled = if cfg.ablation.no_scaler {
            o
        } else {
            let wo = self.p(g, W_O)?;
            g.scale(wo, o)?
        };
        let sum = g.add(wr_r, scaled)?;
        let (dropped, _) = g.dropout(sum, cfg.effective_dropout(), rng, mode.training())?;
        g.concat(&[dropped, r])
    }

    /// Additive attention `w_s · tanh(W_q h + W_k V[:, k])`, softmaxed over
    /// every grid cell. Returns the glimpse `Σ α_k V[:, k]` and `α`.
    pub fn attend_2d(&self, g: &mut Graph, h_prime: NodeId, fm: &FeatureMap) -> Result<(NodeId, NodeId)> {
        use names::*;
        let wq = self.p(g, ATTN_Q)?;
        let q = g.matvec(wq, h_prime)?;
        let pre = g.add_bias(fm.keys, q)?;
        let act = g.tanh(pre);
        let ws = self.p(g, ATTN_S)?;
        let scores = g.matmul(ws, act)?;
        let scores = g.reshape(scores, &[fm.height * fm.width])?;
        let alpha = g.softmax(scores);
        let glimpse = g.matvec(fm.v, alpha)?;
        Ok((glimpse, alpha))
    }

    /// Fits a diagonal Gaussian to `α` by moments, re-renders it as a
    /// normalised mask over the grid, and projects the masked read-out.
    pub fn gcrm_refine(&self, g: &mut Graph, alpha: NodeId, fm: &FeatureMap) -> Result<Gcrm> {
        let total: f64 = g.value(alpha).data().iter().sum();
        assert!(total > 0.0, "attention map has no mass");
        let fit = g.gauss_fit(alpha, fm.height, fm.width, VARIANCE_FLOOR)?;
        let logits = g.gauss_logits(fit, fm.height, fm.width)?;
        let mask = g.softmax(logits);
        let pooled = g.matvec(fm.v, mask)?;
        let wg = self.p(g, names::GCRM_W)?;
        let refined = g.matvec(wg, pooled)?;
        Ok(Gcrm { refined, fit, mask })
    }

    /// One decoding step. `teacher` supplies the next previous-symbol during
    /// teacher forcing; otherwise the argmax of the character logits is used.
    pub fn decode_step(
        &self,
        g: &mut Graph,
        state: DecoderState,
        fm: &FeatureMap,
        mode: Mode,
        rng: &mut SeededRng,
        teacher: Option<usize>,
    ) -> Result<StepOutput> {
        use names::*;
        if state.t >= self.config.max_decode_len {
            return Err(Error::IndexOutOfRange {
                what: "decode step",
                index: state.t,
                len: self.config.max_decode_len,
            });
        }
        let fused = self.cvfm_fuse(g, state.y_prev, mode, rng)?;
        let (wx, wh, b) = (self.p(g, LSTM_WX)?, self.p(g, LSTM_WH)?, self.p(g, LSTM_B)?);
        let (h, c) = g.lstm_step(fused, state.h, state.c, wx, wh, b)?;
        let (glimpse, alpha) = self.attend_2d(g, h, fm)?;
        let gcrm = self.gcrm_refine(g, alpha, fm)?;
        let features = g.add(glimpse, gcrm.refined)?;
        let head_in = match self.config.heads_input {
            HeadsInput::F => features,
            HeadsInput::G => glimpse,
        };
        let (hw, hb) = (self.p(g, HEAD_W)?, self.p(g, HEAD_B)?);
        let y_logits = g.affine(head_in, hw, hb)?;
        let (rw, rb) = (self.p(g, RAD_W)?, self.p(g, RAD_B)?);
        let radical_logits = g.affine(head_in, rw, rb)?;
        let next = teacher.unwrap_or_else(|| argmax(g.value(y_logits).data()));
        Ok(StepOutput {
            y_logits,
            radical_logits,
            alpha,
            fused,
            gcrm,
            state: DecoderState {
                h,
                c,
                t: state.t + 1,
                y_prev: next,
            },
        })
    }

    /// Teacher-forced unroll over `targets` (the last of which is EOS).
    pub fn forward_teacher(
        &self,
        g: &mut Graph,
        image: &Tensor,
        targets: &[usize],
        mode: Mode,
        rng: &mut SeededRng,
    ) -> Result<Vec<StepOutput>> {
        let fm = self.toy_encode(g, image)?;
        let mut state = self.initial_state(g, &fm)?;
        let mut steps = Vec::with_capacity(targets.len());
        for &target in targets {
            let out = self.decode_step(g, state, &fm, mode, rng, Some(target))?;
            state = out.state;
            steps.push(out);
        }
        Ok(steps)
    }

    /// Greedy eval-mode decode; stops at EOS or `max_len` steps.
    pub fn decode_greedy_ids(&self, image: &Tensor, max_len: usize) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let mut rng = SeededRng::new(0);
        let fm = self.toy_encode(&mut g, image)?;
        let mut state = self.initial_state(&mut g, &fm)?;
        let eos = self.config.classes - 2;
        let mut out = Vec::new();
        let limit = max_len.min(self.config.max_decode_len);
        while state.t < limit {
            let step = self.decode_step(&mut g, state, &fm, Mode::Eval, &mut rng, None)?;
            state = step.state;
            if state.y_prev == eos {
                break;
            }
            out.push(state.y_prev);
        }
        Ok(out)
    }

    /// Greedy decode mapped through the charset; PAD and EOS are dropped.
    pub fn decode_greedy(&self, image: &Tensor, charset: &Charset, max_len: usize) -> Result<String> {
        let ids = self.decode_greedy_ids(image, max_len)?;
        Ok(ids
            .into_iter()
            .filter_map(|id| match charset.label(id) {
                Some(crate::bank::ClassLabel::Char(c)) => Some(c),
                Some(crate::bank::ClassLabel::Unk) => Some('\u{FFFD}'),
                _ => None,
            })
            .collect())
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
