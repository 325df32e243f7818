//! Finite-difference check of the whole pipeline at toy size: encoder,
//! fusion, LSTM, attention, refinement, both heads and the hybrid loss.
//!
//! Analytic gradients come from the tape. The central differences come from
//! a separate scalar-loop forward pass ([`reference_loss`]) evaluated in
//! double-double arithmetic. Many gradients upstream of the attention query
//! are below 1e-7, where f64 rounding in the loss alone (about 2e-11 after
//! dividing by `2·eps`) would swamp them.

use std::collections::BTreeMap;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::OnceLock;

use rand::RngCore;
use rayon::prelude::*;

use crate::bank::{is_cjk, BoRMatrix, Charset};
use crate::error::Result;
use crate::loss::{hybrid_loss_graph, TargetSequence};
use crate::model::{init_params, names, Decoder, HeadsInput, Mode, ModelConfig, VARIANCE_FLOOR};
use crate::tensor::{dropout_mask, GradCheckReport, Graph, ParamStore, SeededRng, Tensor, LOGIT_CLAMP};

pub const TOY_CHARS: &str = "慧彗丰三心AB";
pub const TOY_WORD: &str = "慧A心";
pub const TOY_RADICALS: usize = 8;
pub const EPS: f64 = 1e-5;

pub struct ToyInstance {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub image: Tensor,
    pub targets: TargetSequence,
    pub dropout_seed: u64,
}

/// A random toy problem; CJK rows of the BoR matrix get random bits.
pub fn toy_instance(seed: u64) -> Result<ToyInstance> {
    toy_instance_with(seed, ModelConfig::toy(TOY_RADICALS, TOY_CHARS.chars().count() + 3))
}

/// Same as [`toy_instance`] with a caller-chosen config (for ablations).
pub fn toy_instance_with(seed: u64, config: ModelConfig) -> Result<ToyInstance> {
    let mut rng = SeededRng::new(seed);
    let charset = Charset::new(TOY_CHARS.chars())?;
    let rows = (0..charset.num_classes())
        .map(|i| match charset.chars().get(i) {
            Some(&c) if is_cjk(c) => (0..config.radicals).map(|_| u8::from(rng.bernoulli(0.4))).collect(),
            _ => vec![0; config.radicals],
        })
        .collect();
    let bor = BoRMatrix::from_rows(rows);
    let params = init_params(&config, &bor.to_tensor(), rng.next_u64())?;
    let image = blocky_image(config.img_height, config.img_width, &mut rng);
    let targets = TargetSequence::new(TOY_WORD, &charset, &bor);
    Ok(ToyInstance {
        config,
        params,
        image,
        targets,
        dropout_seed: rng.next_u64(),
    })
}

/// One random level per 4×4 cell plus a little noise, so feature-map
/// columns differ and attention has something to choose between.
fn blocky_image(h: usize, w: usize, rng: &mut SeededRng) -> Tensor {
    let (ch, cw) = (h.div_ceil(4), w.div_ceil(4));
    let levels: Vec<f64> = (0..ch * cw).map(|_| rng.uniform(-2.0, 2.0)).collect();
    let data = (0..h * w)
        .map(|k| levels[(k / w / 4) * cw + (k % w) / 4] + 0.1 * rng.normal())
        .collect();
    Tensor::from_vec(vec![1, h, w], data).expect("dims match")
}

/// Teacher-forced loss on the tape in training mode; accumulates gradients
/// into `params` and returns the loss.
pub fn toy_loss(inst: &ToyInstance, params: &mut ParamStore) -> Result<f64> {
    let mut g = Graph::new();
    let mut rng = SeededRng::new(inst.dropout_seed);
    let dec = Decoder::new(&inst.config, params);
    let steps = dec.forward_teacher(&mut g, &inst.image, &inst.targets.classes, Mode::Train, &mut rng)?;
    let y: Vec<_> = steps.iter().map(|s| s.y_logits).collect();
    let r: Vec<_> = steps.iter().map(|s| s.radical_logits).collect();
    let nodes = hybrid_loss_graph(&mut g, &y, &r, &inst.targets, !inst.config.ablation.no_bce)?;
    g.backward(nodes.total).write_to(&g, params, 1.0)?;
    Ok(g.value(nodes.total).item())
}

/// Scalar type for the reference forward pass.
pub trait Real:
    Copy
    + PartialOrd
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn of(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn tanh(self) -> Self;
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// Double-double number: an unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi)/2`,
/// giving about 32 significant digits.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

impl Dd {
    const LN2: Dd = Dd {
        hi: std::f64::consts::LN_2,
        lo: 2.319_046_813_846_299_6e-17,
    };

    pub fn new(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    fn norm(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Dd { hi, lo }
    }

    /// Exact scaling by a power of two.
    fn ldexp(self, k: i32) -> Self {
        let f = 2f64.powi(k);
        Dd {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, y: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, y.hi);
        let (t, f) = two_sum(self.lo, y.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Dd::norm(s, e + f)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, y: Dd) -> Dd {
        self + (-y)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, y: Dd) -> Dd {
        let p = self.hi * y.hi;
        let e = self.hi.mul_add(y.hi, -p);
        Dd::norm(p, e + (self.hi * y.lo + self.lo * y.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, y: Dd) -> Dd {
        let q1 = self.hi / y.hi;
        let r = self - y * Dd::new(q1);
        let q2 = r.hi / y.hi;
        let r = r - y * Dd::new(q2);
        let q3 = r.hi / y.hi;
        let (q1, q2) = quick_two_sum(q1, q2);
        Dd { hi: q1, lo: q2 } + Dd::new(q3)
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, other: &Dd) -> Option<std::cmp::Ordering> {
        (self.hi, self.lo).partial_cmp(&(other.hi, other.lo))
    }
}

/// `1/n!` for `n = 0..=13`.
fn inverse_factorials() -> &'static [Dd; 14] {
    static TABLE: OnceLock<[Dd; 14]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut out = [Dd::new(1.0); 14];
        for n in 1..14 {
            out[n] = out[n - 1] / Dd::new(n as f64);
        }
        out
    })
}

impl Real for Dd {
    fn of(x: f64) -> Self {
        Dd::new(x)
    }
    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
    // x = k·ln2 + r, then exp(r/32) by Taylor series, squared five times.
    fn exp(self) -> Self {
        if self.hi < -700.0 {
            return Dd::new(0.0);
        }
        let k = (self.hi / std::f64::consts::LN_2).round();
        let s = (self - Dd::LN2 * Dd::new(k)).ldexp(-5);
        let coeffs = inverse_factorials();
        let mut p = coeffs[coeffs.len() - 1];
        for &c in coeffs.iter().rev().skip(1) {
            p = c + s * p;
        }
        for _ in 0..5 {
            p = p * p;
        }
        p.ldexp(k as i32)
    }
    // Newton on exp from the f64 logarithm.
    fn ln(self) -> Self {
        let mut y = Dd::new(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::new(1.0);
        }
        y
    }
    fn ln_1p(self) -> Self {
        (Dd::new(1.0) + self).ln()
    }
    fn tanh(self) -> Self {
        let e = (Dd::new(-2.0) * if self.hi < 0.0 { -self } else { self }).exp();
        let t = (Dd::new(1.0) - e) / (Dd::new(1.0) + e);
        if self.hi < 0.0 {
            -t
        } else {
            t
        }
    }
}

pub type RealParams<T> = BTreeMap<String, Vec<T>>;

pub fn convert<T: Real>(store: &ParamStore) -> RealParams<T> {
    store
        .iter()
        .map(|(n, s)| (n.to_string(), s.value.data().iter().map(|&v| T::of(v)).collect()))
        .collect()
}

fn sum<T: Real>(xs: impl IntoIterator<Item = T>) -> T {
    xs.into_iter().fold(T::of(0.0), |a, b| a + b)
}

fn max<T: Real>(xs: &[T]) -> T {
    xs.iter().copied().fold(xs[0], |a, b| if b > a { b } else { a })
}

fn sigmoid<T: Real>(x: T) -> T {
    T::of(1.0) / (T::of(1.0) + (-x).exp())
}

fn softmax<T: Real>(xs: &[T]) -> Vec<T> {
    let m = max(xs);
    let e: Vec<T> = xs.iter().map(|&x| (x - m).exp()).collect();
    let s = sum(e.iter().copied());
    e.into_iter().map(|x| x / s).collect()
}

/// `w[rows, cols] · x`.
fn matvec<T: Real>(w: &[T], x: &[T]) -> Vec<T> {
    w.chunks(x.len())
        .map(|row| sum(row.iter().zip(x).map(|(&a, &b)| a * b)))
        .collect()
}

fn clamp<T: Real>(x: T) -> T {
    let c = T::of(LOGIT_CLAMP);
    if x > c {
        c
    } else if x < -c {
        -c
    } else {
        x
    }
}

/// `x[ci, h, w]` → tanh(conv) → 2×2 mean, as `[co, h/2, w/2]`.
fn conv_tanh_pool<T: Real>(x: &[T], ci: usize, h: usize, w: usize, wt: &[T], b: &[T]) -> Vec<T> {
    let co = b.len();
    let mut conv = vec![T::of(0.0); co * h * w];
    for o in 0..co {
        for r in 0..h {
            for c in 0..w {
                let mut acc = b[o];
                for i in 0..ci {
                    for kr in 0..3 {
                        for kc in 0..3 {
                            let (rr, cc) = (r + kr, c + kc);
                            if (1..=h).contains(&rr) && (1..=w).contains(&cc) {
                                acc = acc + wt[((o * ci + i) * 3 + kr) * 3 + kc] * x[(i * h + rr - 1) * w + cc - 1];
                            }
                        }
                    }
                }
                conv[(o * h + r) * w + c] = acc.tanh();
            }
        }
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(co * oh * ow);
    for o in 0..co {
        for r in 0..oh {
            for c in 0..ow {
                let at = |dr: usize, dc: usize| conv[(o * h + 2 * r + dr) * w + 2 * c + dc];
                out.push(T::of(0.25) * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)));
            }
        }
    }
    out
}

/// Encoder output `v[d][k]` and attention keys `keys[a][k]`.
pub struct RefFeatures<T> {
    v: Vec<Vec<T>>,
    keys: Vec<Vec<T>>,
}

fn reference_keys<T: Real>(cfg: &ModelConfig, p: &RealParams<T>, v: &[Vec<T>]) -> Vec<Vec<T>> {
    let wk = p[names::ATTN_K].as_slice();
    let cells = v[0].len();
    (0..cfg.d_attn)
        .map(|a| {
            (0..cells)
                .map(|k| sum((0..cfg.d_vis).map(|d| wk[a * cfg.d_vis + d] * v[d][k])))
                .collect()
        })
        .collect()
}

pub fn reference_features<T: Real>(inst: &ToyInstance, p: &RealParams<T>) -> RefFeatures<T> {
    let cfg = &inst.config;
    let get = |n: &str| p[n].as_slice();

    // encoder
    let img: Vec<T> = inst.image.data().iter().map(|&v| T::of(v)).collect();
    let (ih, iw) = (cfg.img_height, cfg.img_width);
    let x1 = conv_tanh_pool(&img, 1, ih, iw, get(names::CONV1_W), get(names::CONV1_B));
    let x2 = conv_tanh_pool(
        &x1,
        cfg.conv1_channels,
        ih / 2,
        iw / 2,
        get(names::CONV2_W),
        get(names::CONV2_B),
    );
    let (fh, fw) = (ih / 4, iw / 4);
    let cells = fh * fw;
    let c2 = cfg.conv2_channels;
    let (pw, pb) = (get(names::PROJ_W), get(names::PROJ_B));
    // v[d][k]
    let v: Vec<Vec<T>> = (0..cfg.d_vis)
        .map(|d| {
            (0..cells)
                .map(|k| pb[d] + sum((0..c2).map(|c| pw[d * c2 + c] * x2[c * cells + k])))
                .collect()
        })
        .collect();
    let keys = reference_keys(cfg, p, &v);
    RefFeatures { v, keys }
}

/// The training-mode teacher-forced loss of [`toy_loss`], written as plain
/// loops over any [`Real`].
pub fn reference_loss<T: Real>(inst: &ToyInstance, p: &RealParams<T>) -> T {
    reference_decode(inst, p, &reference_features(inst, p))
}

/// Decoder and loss on precomputed encoder features.
pub fn reference_decode<T: Real>(inst: &ToyInstance, p: &RealParams<T>, feats: &RefFeatures<T>) -> T {
    let cfg = &inst.config;
    let get = |n: &str| p[n].as_slice();
    let zero = T::of(0.0);
    let (v, keys) = (&feats.v, &feats.keys);
    let fw = cfg.feature_width();
    let cells = v[0].len();
    let read = |weights: &[T]| -> Vec<T> {
        v.iter()
            .map(|row| sum(row.iter().zip(weights).map(|(&a, &b)| a * b)))
            .collect()
    };

    let pooled: Vec<T> = v
        .iter()
        .map(|row| sum(row.iter().copied()) / T::of(cells as f64))
        .collect();
    let n = cfg.d_hidden;
    let mut h = matvec(get(names::INIT_W), &pooled);
    let mut c = vec![zero; n];
    let mut y_prev = cfg.classes - 2;
    let mut rng = SeededRng::new(inst.dropout_seed);
    let rate = cfg.effective_dropout();

    let tg = &inst.targets;
    let steps = tg.len();
    let inv_t = T::of(1.0 / steps as f64);
    let radical_steps = tg.mask.iter().filter(|&&m| m == 1).count();
    let denom = T::of(radical_steps.max(1) as f64);
    let (mut l_o, mut l_r_terms) = (Vec::new(), Vec::new());

    for t in 0..steps {
        // fusion
        let d = cfg.d_emb;
        let o = &get(names::EMBED)[y_prev * d..(y_prev + 1) * d];
        let fused: Vec<T> = if cfg.ablation.no_cvfm {
            o.to_vec()
        } else {
            let dd = cfg.radicals;
            let r: Vec<T> = if cfg.ablation.re_zero {
                vec![zero; dd]
            } else {
                get(names::BOR)[y_prev * dd..(y_prev + 1) * dd].to_vec()
            };
            let wr_r = matvec(get(names::W_R), &r);
            let wo = get(names::W_O)[0];
            let mut s: Vec<T> = wr_r
                .iter()
                .zip(o)
                .map(|(&a, &b)| if cfg.ablation.no_scaler { a + b } else { a + wo * b })
                .collect();
            if rate > 0.0 {
                let mask = dropout_mask(d, rate, &mut rng);
                s = s.iter().zip(mask.data()).map(|(&a, &m)| a * T::of(m)).collect();
            }
            s.extend(r);
            s
        };

        // LSTM
        let zx = matvec(get(names::LSTM_WX), &fused);
        let zh = matvec(get(names::LSTM_WH), &h);
        let b = get(names::LSTM_B);
        let z: Vec<T> = (0..4 * n).map(|i| zx[i] + zh[i] + b[i]).collect();
        let mut h_new = Vec::with_capacity(n);
        let mut c_new = Vec::with_capacity(n);
        for j in 0..n {
            let (gi, gf, gg, go) = (
                sigmoid(z[j]),
                sigmoid(z[n + j]),
                z[2 * n + j].tanh(),
                sigmoid(z[3 * n + j]),
            );
            let cj = gf * c[j] + gi * gg;
            c_new.push(cj);
            h_new.push(go * cj.tanh());
        }
        h = h_new;
        c = c_new;

        // attention
        let q = matvec(get(names::ATTN_Q), &h);
        let ws = get(names::ATTN_S);
        let scores: Vec<T> = (0..cells)
            .map(|k| sum((0..cfg.d_attn).map(|a| ws[a] * (keys[a][k] + q[a]).tanh())))
            .collect();
        let alpha = softmax(&scores);
        let glimpse = read(&alpha);

        // refinement
        let (mut mr, mut mc, mut sr, mut sc) = (zero, zero, zero, zero);
        for (k, &a) in alpha.iter().enumerate() {
            let (r, cc) = (T::of((k / fw) as f64), T::of((k % fw) as f64));
            mr = mr + a * r;
            mc = mc + a * cc;
            sr = sr + a * r * r;
            sc = sc + a * cc * cc;
        }
        let floor = T::of(VARIANCE_FLOOR);
        let floored = |x: T| if x > floor { x } else { floor };
        let (vr, vc) = (floored(sr - mr * mr), floored(sc - mc * mc));
        let logits: Vec<T> = (0..cells)
            .map(|k| {
                let dr = T::of((k / fw) as f64) - mr;
                let dc = T::of((k % fw) as f64) - mc;
                T::of(-0.5) * (dr * dr / vr + dc * dc / vc)
            })
            .collect();
        let mask = softmax(&logits);
        let refined = matvec(get(names::GCRM_W), &read(&mask));
        let head_in: Vec<T> = match cfg.heads_input {
            HeadsInput::F => glimpse.iter().zip(&refined).map(|(&a, &b)| a + b).collect(),
            HeadsInput::G => glimpse,
        };
        let affine = |w: &str, b: &str| -> Vec<T> {
            matvec(get(w), &head_in)
                .into_iter()
                .zip(get(b))
                .map(|(a, &b)| a + b)
                .collect()
        };
        let y_logits = affine(names::HEAD_W, names::HEAD_B);

        // loss terms
        let zs: Vec<T> = y_logits.into_iter().map(clamp).collect();
        let m = max(&zs);
        let lse = m + sum(zs.iter().map(|&z| (z - m).exp())).ln();
        l_o.push((lse - zs[tg.classes[t]]) * inv_t);
        if !cfg.ablation.no_bce && tg.mask[t] == 1 {
            let rl = affine(names::RAD_W, names::RAD_B);
            let terms = rl.into_iter().zip(&tg.radicals[t]).map(|(x, &y)| {
                let z = clamp(x);
                let pos = if z > zero { z } else { zero };
                let abs = if z > zero { z } else { -z };
                pos + (-abs).exp().ln_1p() - z * T::of(y)
            });
            let bce = sum(terms) / T::of(tg.radicals[t].len() as f64);
            l_r_terms.push(bce / denom);
        }
        y_prev = tg.classes[t];
    }
    sum(l_o) + sum(l_r_terms)
}

/// Analytic gradients from the tape against double-double central
/// differences, scored with `|a − n| / max(1e-8, |a| + |n|)`.
pub fn pipeline_grad_check_with(inst: &ToyInstance) -> Result<GradCheckReport> {
    let mut params = inst.params.clone();
    params.zero_grads();
    toy_loss(inst, &mut params)?;

    let base: RealParams<Dd> = convert(&params);
    let entries: Vec<(String, usize, f64)> = params
        .iter()
        .filter(|(_, s)| s.trainable)
        .flat_map(|(n, s)| {
            s.grad
                .data()
                .iter()
                .enumerate()
                .map(move |(i, &a)| (n.to_string(), i, a))
        })
        .collect();
    let eps = Dd::new(EPS);
    let feats = reference_features(inst, &base);
    // encoder weights move V; the key weights only move the keys
    let eval = |p: &RealParams<Dd>, name: &str| {
        if name.starts_with("enc.") {
            reference_loss(inst, p)
        } else if name == names::ATTN_K {
            let keys = reference_keys(&inst.config, p, &feats.v);
            let v = feats.v.clone();
            reference_decode(inst, p, &RefFeatures { v, keys })
        } else {
            reference_decode(inst, p, &feats)
        }
    };
    let errors: Vec<f64> = entries
        .par_iter()
        .map(|(name, i, a)| {
            let mut p = base.clone();
            let orig = p[name][*i];
            p.get_mut(name).expect("known name")[*i] = orig + eps;
            let up = eval(&p, name);
            p.get_mut(name).expect("known name")[*i] = orig - eps;
            let down = eval(&p, name);
            let numeric = ((up - down) / (eps * Dd::new(2.0))).to_f64();
            (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8)
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        entries_checked: errors.len(),
    };
    for ((name, i, _), err) in entries.iter().zip(errors) {
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((name.clone(), *i));
        }
    }
    Ok(report)
}

pub fn pipeline_grad_check(seed: u64) -> Result<GradCheckReport> {
    pipeline_grad_check_with(&toy_instance(seed)?)
}
