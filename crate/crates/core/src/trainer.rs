//! Toy-scale training on synthetic glyph words.
//!
//! Every character gets a fixed random ±1 template patch derived from a
//! template seed and its codepoint. A word image is the horizontal
//! concatenation of its templates plus Gaussian noise, zero-padded on the
//! right to the model's input width.
//!
//! Training is teacher-forced on the hybrid loss with Adam. Samples in a
//! batch run on separate tapes in parallel; their gradients are reduced in
//! batch order, so a run is bit-reproducible from its seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{build_bank, build_bor_matrix, is_cjk, BoRMatrix, Charset};
use crate::error::{Error, Result};
use crate::ids::load_ids_table;
use crate::loss::{hybrid_loss_graph, report_from_graph, TargetSequence};
use crate::model::{init_params, names, Ablation, Decoder, HeadsInput, Mode, ModelConfig};
use crate::tensor::{Graph, ParamStore, RngState, SeededRng, Tensor};

/// How synthetic words are drawn and drawn on.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub charset: Charset,
    pub template_seed: u64,
    pub patch_height: usize,
    pub patch_width: usize,
    pub words: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise_sigma: f64,
    /// Probability that a position draws from the non-CJK characters.
    pub latin_ratio: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: &str| Err(Error::format("synth spec", detail));
        if self.patch_height == 0 || self.patch_width == 0 {
            return bad("patch dimensions must be positive");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        if !(0.0..=1.0).contains(&self.latin_ratio) || self.noise_sigma < 0.0 {
            return bad("latin_ratio must lie in [0, 1] and noise_sigma must be >= 0");
        }
        if self.charset.chars().is_empty() {
            return bad("charset is empty");
        }
        Ok(())
    }

    /// The fixed ±1 template of `c`, row-major `patch_height × patch_width`.
    pub fn template(&self, c: char) -> Vec<f64> {
        let seed = self.template_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ u64::from(c);
        let mut rng = SeededRng::new(seed);
        (0..self.patch_height * self.patch_width)
            .map(|_| if rng.bernoulli(0.5) { 1.0 } else { -1.0 })
            .collect()
    }

    /// Renders `text` at its natural width `len · patch_width`.
    pub fn render(&self, text: &str, rng: &mut SeededRng) -> Tensor {
        let (ph, pw) = (self.patch_height, self.patch_width);
        let chars: Vec<char> = text.chars().collect();
        let width = chars.len() * pw;
        let mut data = vec![0.0; ph * width];
        for (k, &c) in chars.iter().enumerate() {
            let t = self.template(c);
            for r in 0..ph {
                data[r * width + k * pw..r * width + (k + 1) * pw].copy_from_slice(&t[r * pw..(r + 1) * pw]);
            }
        }
        if self.noise_sigma > 0.0 {
            for v in &mut data {
                *v += self.noise_sigma * rng.normal();
            }
        }
        Tensor::from_vec(vec![1, ph, width], data).expect("dims match")
    }

    /// Draws one word from the charset.
    pub fn word(&self, rng: &mut SeededRng) -> String {
        let (cjk, other): (Vec<char>, Vec<char>) = self.charset.chars().iter().partition(|&&c| is_cjk(c));
        let len = rng.range(self.min_len, self.max_len);
        (0..len)
            .map(|_| {
                let use_other = !other.is_empty() && (cjk.is_empty() || rng.bernoulli(self.latin_ratio));
                let pool = if use_other { &other } else { &cjk };
                pool[rng.below(pool.len())]
            })
            .collect()
    }

    /// `self.words` distinct words.
    pub fn dataset(&self, rng: &mut SeededRng) -> Result<Vec<String>> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::with_capacity(self.words);
        let mut attempts = 0;
        while out.len() < self.words {
            attempts += 1;
            if attempts > 100 * self.words.max(1) {
                return Err(Error::format("synth spec", "cannot draw enough distinct words"));
            }
            let w = self.word(rng);
            if seen.insert(w.clone()) {
                out.push(w);
            }
        }
        Ok(out)
    }
}

/// A random word and its image.
pub fn synth_sample(spec: &SynthSpec, rng: &mut SeededRng) -> (Tensor, String) {
    let word = spec.word(rng);
    (spec.render(&word, rng), word)
}

/// Zero-pads `image[1, h, w]` on the right to `width`.
pub fn pad_image(image: &Tensor, width: usize) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        [1, h, w] => (*h, *w),
        other => {
            return Err(Error::ShapeMismatch {
                op: "pad_image",
                left: other.to_vec(),
                right: vec![1, 0, width],
            })
        }
    };
    if w > width {
        return Err(Error::ShapeMismatch {
            op: "pad_image",
            left: image.shape().to_vec(),
            right: vec![1, h, width],
        });
    }
    let mut data = vec![0.0; h * width];
    for r in 0..h {
        data[r * width..r * width + w].copy_from_slice(&image.data()[r * w..(r + 1) * w]);
    }
    Tensor::from_vec(vec![1, h, width], data)
}

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .filter(|(_, s)| s.trainable)
            .map(|(n, s)| (n.to_string(), Tensor::zeros(s.value.shape())))
            .collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One update of every trainable parameter from the gradients in `params`.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (name, slot) in params.iter_mut() {
        if !slot.trainable {
            continue;
        }
        let (m, v) = match (state.m.get_mut(name), state.v.get_mut(name)) {
            (Some(m), Some(v)) => (m, v),
            _ => return Err(Error::UnknownParam(name.to_string())),
        };
        if m.shape() != slot.grad.shape() || v.shape() != slot.grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: m.shape().to_vec(),
                right: slot.grad.shape().to_vec(),
            });
        }
        let g = slot.grad.data();
        let p = slot.value.data_mut();
        for i in 0..g.len() {
            let mi = state.beta1 * m.data()[i] + (1.0 - state.beta1) * g[i];
            let vi = state.beta2 * v.data()[i] + (1.0 - state.beta2) * g[i] * g[i];
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            p[i] -= state.lr * (mi / c1) / ((vi / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Everything `train-toy` reads from its `key = value` config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine-anneal the learning rate to zero over `steps`.
    pub cosine: bool,
    pub probe_every: u64,
    /// Charset file (one character per line); relative to the config file.
    pub charset: String,
    /// Use only the first N characters of the charset file (0 = all).
    pub charset_size: usize,
    /// IDS table used to build the radical bank.
    pub ids: String,
    pub template_seed: u64,
    pub words: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub noise_sigma: f64,
    pub latin_ratio: f64,
    pub d_emb: usize,
    pub d_hidden: usize,
    pub d_vis: usize,
    pub d_attn: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub dropout: f64,
    pub heads_input: HeadsInput,
    pub no_cvfm: bool,
    pub no_bce: bool,
    pub re_zero: bool,
    pub no_scaler: bool,
    pub no_dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            cosine: false,
            probe_every: 100,
            charset: "desk_charset.txt".into(),
            charset_size: 30,
            ids: "desk_ids.txt".into(),
            template_seed: 11,
            words: 200,
            min_len: 2,
            max_len: 4,
            patch_height: 16,
            patch_width: 8,
            noise_sigma: 0.1,
            latin_ratio: 0.0,
            d_emb: 32,
            d_hidden: 64,
            d_vis: 32,
            d_attn: 32,
            conv1_channels: 8,
            conv2_channels: 16,
            dropout: 0.1,
            heads_input: HeadsInput::F,
            no_cvfm: false,
            no_bce: false,
            re_zero: false,
            no_scaler: false,
            no_dropout: false,
        }
    }
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// errors, missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = serde_json::Map::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format("train config", format!("line {}: expected key = value", n + 1)))?;
            let value = value.trim();
            let json = if let Ok(b) = value.parse::<bool>() {
                serde_json::Value::Bool(b)
            } else if let Ok(i) = value.parse::<u64>() {
                i.into()
            } else if let Ok(f) = value.parse::<f64>() {
                f.into()
            } else {
                value.into()
            };
            map.insert(key.trim().to_string(), json);
        }
        serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| Error::format("train config", e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        let mut out = String::new();
        if let serde_json::Value::Object(map) = value {
            let defaults = TrainConfig::default();
            let order = serde_json::to_value(&defaults).expect("config serialises");
            let keys: Vec<&String> = order.as_object().map(|o| o.keys().collect()).unwrap_or_default();
            for key in keys {
                let v = &map[key];
                let text = match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                out.push_str(&format!("{key} = {text}\n"));
            }
        }
        out
    }

    /// Learning rate for the update that produces step `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if !self.cosine || self.steps == 0 {
            return self.lr;
        }
        let progress = (step.saturating_sub(1) as f64 / self.steps as f64).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            no_cvfm: self.no_cvfm,
            no_bce: self.no_bce,
            re_zero: self.re_zero,
            no_scaler: self.no_scaler,
            no_dropout: self.no_dropout,
        }
    }

    pub fn model_config(&self, radicals: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            d_emb: self.d_emb,
            d_hidden: self.d_hidden,
            d_vis: self.d_vis,
            d_attn: self.d_attn,
            conv1_channels: self.conv1_channels,
            conv2_channels: self.conv2_channels,
            img_height: self.patch_height,
            img_width: self.max_len * self.patch_width,
            radicals,
            classes,
            dropout_rate: self.dropout,
            max_decode_len: self.max_len + 1,
            heads_input: self.heads_input,
            ablation: self.ablation(),
        }
    }

    /// Loads the charset and IDS table (paths relative to `base`) and builds
    /// the bag-of-radicals matrix.
    pub fn load_data(&self, base: &Path) -> Result<(Charset, BoRMatrix)> {
        let full = Charset::load(base.join(&self.charset))?;
        let charset = if self.charset_size == 0 {
            full
        } else {
            Charset::new(full.chars().iter().copied().take(self.charset_size))?
        };
        let table = load_ids_table(base.join(&self.ids))?;
        let bank = build_bank(&charset, &table)?;
        let bor = build_bor_matrix(&charset, &bank, &table);
        Ok((charset, bor))
    }

    pub fn synth_spec(&self, charset: Charset) -> SynthSpec {
        SynthSpec {
            charset,
            template_seed: self.template_seed,
            patch_height: self.patch_height,
            patch_width: self.patch_width,
            words: self.words,
            min_len: self.min_len,
            max_len: self.max_len,
            noise_sigma: self.noise_sigma,
            latin_ratio: self.latin_ratio,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(rename = "L")]
    pub total: f64,
    pub l_o: f64,
    pub l_r: f64,
    pub probe_word_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_word_acc: f64,
    /// First probed step reaching the target accuracy.
    pub reached_target_at: Option<u64>,
    pub early_l_r: f64,
    pub late_l_r: f64,
    pub l_r_reduction: f64,
}

/// Seeds drawn once from the run seed; each stream stays fixed for the run.
#[derive(Clone, Copy, Debug)]
struct Seeds {
    init: u64,
    data: u64,
    probe: u64,
    train: u64,
}

impl Seeds {
    fn derive(seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        Seeds {
            init: rng.next_u64(),
            data: rng.next_u64(),
            probe: rng.next_u64(),
            train: rng.next_u64(),
        }
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub charset: Charset,
    pub spec: SynthSpec,
    pub params: ParamStore,
    pub adam: AdamState,
    pub rng: SeededRng,
    pub step: u64,
    pub words: Vec<String>,
    bor: BoRMatrix,
    probe_images: Vec<Tensor>,
}

struct SampleOut {
    grads: Vec<(String, Tensor)>,
    total: f64,
    l_o: f64,
    l_r: f64,
}

impl Trainer {
    /// Fresh parameters for `charset` with the given bag-of-radicals matrix.
    pub fn new(config: TrainConfig, charset: Charset, bor: &Tensor) -> Result<Self> {
        let seeds = Seeds::derive(config.seed);
        let model = config.model_config(bor.shape()[1], charset.num_classes());
        let params = init_params(&model, bor, seeds.init)?;
        let adam = AdamState::new(&params, config.lr);
        Self::assemble(config, charset, params, adam, SeededRng::new(seeds.train), 0)
    }

    fn assemble(
        config: TrainConfig,
        charset: Charset,
        params: ParamStore,
        adam: AdamState,
        rng: SeededRng,
        step: u64,
    ) -> Result<Self> {
        let seeds = Seeds::derive(config.seed);
        let bor = BoRMatrix::from_tensor(params.value(names::BOR)?);
        let model = config.model_config(bor.shape().1, charset.num_classes());
        model.validate()?;
        if config.batch_size == 0 {
            return Err(Error::format("train config", "batch_size must be positive"));
        }
        let spec = config.synth_spec(charset.clone());
        spec.validate()?;
        let words = spec.dataset(&mut SeededRng::new(seeds.data))?;
        let mut probe_rng = SeededRng::new(seeds.probe);
        let probe_images = words
            .iter()
            .map(|w| pad_image(&spec.render(w, &mut probe_rng), model.img_width))
            .collect::<Result<_>>()?;
        Ok(Trainer {
            config,
            model,
            charset,
            spec,
            params,
            adam,
            rng,
            step,
            words,
            bor,
            probe_images,
        })
    }

    fn sample(&self, word: &str, seed: u64) -> Result<SampleOut> {
        let mut rng = SeededRng::new(seed);
        let image = pad_image(&self.spec.render(word, &mut rng), self.model.img_width)?;
        let targets = TargetSequence::new(word, &self.charset, &self.bor);
        let mut g = Graph::new();
        let dec = Decoder::new(&self.model, &self.params);
        let steps = dec.forward_teacher(&mut g, &image, &targets.classes, Mode::Train, &mut rng)?;
        let y: Vec<_> = steps.iter().map(|s| s.y_logits).collect();
        let r: Vec<_> = steps.iter().map(|s| s.radical_logits).collect();
        let nodes = hybrid_loss_graph(&mut g, &y, &r, &targets, !self.config.no_bce)?;
        let report = report_from_graph(&g, &nodes, &targets)?;
        let grads = g.backward(nodes.total);
        Ok(SampleOut {
            grads: grads.param_grads(&g).map(|(n, t)| (n.to_string(), t.clone())).collect(),
            total: report.total,
            l_o: report.l_o,
            l_r: report.l_r,
        })
    }

    /// One optimisation step on a fresh batch.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let b = self.config.batch_size;
        let batch: Vec<(usize, u64)> = (0..b)
            .map(|_| (self.rng.below(self.words.len()), self.rng.next_u64()))
            .collect();
        let outs: Vec<Result<SampleOut>> = batch
            .par_iter()
            .map(|&(i, seed)| self.sample(&self.words[i], seed))
            .collect();
        self.step += 1;
        self.params.zero_grads();
        let (mut total, mut l_o, mut l_r) = (0.0, 0.0, 0.0);
        let scale = 1.0 / b as f64;
        for out in outs {
            let out = out.map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step: Some(self.step) },
                other => other,
            })?;
            for (name, grad) in &out.grads {
                self.params.accumulate_grad(name, grad, scale)?;
            }
            total += out.total * scale;
            l_o += out.l_o * scale;
            l_r += out.l_r * scale;
        }
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { step: Some(self.step) });
        }
        self.adam.lr = self.config.lr_at(self.step);
        adam_step(&mut self.params, &mut self.adam)?;
        let probe_word_acc = if self.config.probe_every > 0 && self.step.is_multiple_of(self.config.probe_every) {
            Some(self.probe_accuracy()?)
        } else {
            None
        };
        Ok(StepRecord {
            step: self.step,
            total,
            l_o,
            l_r,
            probe_word_acc,
        })
    }

    /// Greedy word accuracy over the training words (fixed probe noise).
    pub fn probe_accuracy(&self) -> Result<f64> {
        let dec = Decoder::new(&self.model, &self.params);
        let hits: Vec<bool> = self
            .words
            .par_iter()
            .zip(&self.probe_images)
            .map(|(w, img)| Ok(dec.decode_greedy(img, &self.charset, self.model.max_decode_len)? == *w))
            .collect::<Result<_>>()?;
        Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
    }

    /// Runs until `self.config.steps`, writing one JSON line per step.
    pub fn run(&mut self, log: &mut dyn Write) -> Result<Vec<StepRecord>> {
        self.run_to(self.config.steps, log)
    }

    /// Runs until step `until`; the schedule still spans `config.steps`.
    pub fn run_to(&mut self, until: u64, log: &mut dyn Write) -> Result<Vec<StepRecord>> {
        let mut records = Vec::new();
        while self.step < until {
            let rec = self.train_step()?;
            serde_json::to_writer(&mut *log, &rec).map_err(|e| Error::format("training log", e.to_string()))?;
            writeln!(log)?;
            records.push(rec);
        }
        Ok(records)
    }

    /// The training words with their fixed probe renderings (padded).
    pub fn probe_set(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.words.iter().map(String::as_str).zip(&self.probe_images)
    }

    pub fn decoder(&self) -> Decoder<'_> {
        Decoder::new(&self.model, &self.params)
    }
}

/// Summary of a run for the accuracy target `target`.
pub fn summarize(records: &[StepRecord], target: f64) -> TrainSummary {
    let window = 10.min(records.len()).max(1);
    let mean = |rs: &[StepRecord]| rs.iter().map(|r| r.l_r).sum::<f64>() / rs.len().max(1) as f64;
    let early = mean(&records[..window.min(records.len())]);
    let late = mean(&records[records.len().saturating_sub(window)..]);
    let probes: Vec<(u64, f64)> = records
        .iter()
        .filter_map(|r| r.probe_word_acc.map(|a| (r.step, a)))
        .collect();
    TrainSummary {
        steps: records.last().map_or(0, |r| r.step),
        final_word_acc: probes.last().map_or(0.0, |p| p.1),
        reached_target_at: probes.iter().find(|p| p.1 >= target).map(|p| p.0),
        early_l_r: early,
        late_l_r: late,
        l_r_reduction: if early > 0.0 { 1.0 - late / early } else { 0.0 },
    }
}

const MAGIC: &[u8; 6] = b"RDCLv1";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    charset: String,
    step: u64,
    rng: RngState,
    adam_lr: f64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

/// A saved training run.
///
/// Layout: the 6 bytes `RDCLv1`, a little-endian u64 header length, the JSON
/// header, then every tensor listed in the header as raw little-endian f64
/// in header order. Adam moments are stored as tensors named `adam.m/NAME`
/// and `adam.v/NAME`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub charset: Charset,
    pub params: ParamStore,
    pub adam: AdamState,
    pub rng: RngState,
    pub step: u64,
}

impl Checkpoint {
    /// Snapshot of a trainer; gradient slots are not saved and come back zeroed.
    pub fn of(trainer: &Trainer) -> Self {
        let mut params = trainer.params.clone();
        params.zero_grads();
        Checkpoint {
            config: trainer.config.clone(),
            charset: trainer.charset.clone(),
            params,
            adam: trainer.adam.clone(),
            rng: trainer.rng.state(),
            step: trainer.step,
        }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        Trainer::assemble(
            self.config,
            self.charset,
            self.params,
            self.adam,
            SeededRng::from_state(self.rng),
            self.step,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut blobs: Vec<&Tensor> = Vec::new();
        for (name, slot) in self.params.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: slot.value.shape().to_vec(),
                trainable: slot.trainable,
            });
            blobs.push(&slot.value);
        }
        for (prefix, map) in [("adam.m/", &self.adam.m), ("adam.v/", &self.adam.v)] {
            for (name, t) in map {
                tensors.push(TensorEntry {
                    name: format!("{prefix}{name}"),
                    shape: t.shape().to_vec(),
                    trainable: false,
                });
                blobs.push(t);
            }
        }
        let header = Header {
            config: self.config.clone(),
            charset: self.charset.to_text(),
            step: self.step,
            rng: self.rng,
            adam_lr: self.adam.lr,
            adam_beta1: self.adam.beta1,
            adam_beta2: self.adam.beta2,
            adam_eps: self.adam.eps,
            adam_step: self.adam.step,
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in blobs {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::format("checkpoint", detail);
        let mut cursor = bytes;
        let mut magic = [0u8; 6];
        cursor.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != MAGIC {
            return Err(bad("missing RDCLv1 header"));
        }
        let mut len = [0u8; 8];
        cursor.read_exact(&mut len).map_err(|_| bad("truncated"))?;
        let len = u64::from_le_bytes(len) as usize;
        if cursor.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&cursor[..len]).map_err(|e| bad(&e.to_string()))?;
        let mut data = &cursor[len..];

        let mut params = ParamStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if data.len() < 8 * n {
                return Err(bad("truncated tensor data"));
            }
            let values = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            data = &data[8 * n..];
            let tensor = Tensor::from_vec(entry.shape, values)?;
            if let Some(name) = entry.name.strip_prefix("adam.m/") {
                m.insert(name.to_string(), tensor);
            } else if let Some(name) = entry.name.strip_prefix("adam.v/") {
                v.insert(name.to_string(), tensor);
            } else if entry.trainable {
                params.insert(entry.name, tensor);
            } else {
                params.insert_frozen(entry.name, tensor);
            }
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            config: header.config,
            charset: Charset::parse(&header.charset)?,
            params,
            adam: AdamState {
                lr: header.adam_lr,
                beta1: header.adam_beta1,
                beta2: header.adam_beta2,
                eps: header.adam_eps,
                step: header.adam_step,
                m,
                v,
            },
            rng: header.rng,
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::unreadable(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            steps: 6,
            batch_size: 4,
            probe_every: 3,
            words: 12,
            min_len: 1,
            max_len: 3,
            patch_height: 8,
            patch_width: 4,
            d_emb: 8,
            d_hidden: 8,
            d_vis: 8,
            d_attn: 8,
            conv1_channels: 3,
            conv2_channels: 4,
            ..TrainConfig::default()
        }
    }

    fn tiny_trainer(config: TrainConfig) -> Trainer {
        let charset = Charset::new("慧心三丰AB".chars()).unwrap();
        let rows = (0..charset.num_classes())
            .map(|i| (0..5).map(|j| u8::from(i < 4 && (i + j) % 3 == 0)).collect())
            .collect();
        let bor = BoRMatrix::from_rows(rows).to_tensor();
        Trainer::new(config, charset, &bor).unwrap()
    }

    #[test]
    fn templates_are_fixed_and_distinct() {
        let spec = tiny_config().synth_spec(Charset::new("慧心".chars()).unwrap());
        assert_eq!(spec.template('慧'), spec.template('慧'));
        let (a, b) = (spec.template('慧'), spec.template('心'));
        let differ = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        assert!(differ * 100 >= a.len());
    }

    #[test]
    fn render_width_and_determinism() {
        let mut cfg = tiny_config();
        cfg.noise_sigma = 0.0;
        let spec = cfg.synth_spec(Charset::new("慧心".chars()).unwrap());
        let a = spec.render("慧心慧", &mut SeededRng::new(1));
        let b = spec.render("慧心慧", &mut SeededRng::new(2));
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 8, 12]);
        let padded = pad_image(&a, 16).unwrap();
        assert_eq!(padded.shape(), &[1, 8, 16]);
        assert!(pad_image(&a, 10).is_err());
    }

    #[test]
    fn words_use_the_charset() {
        let cfg = tiny_config();
        let cs = Charset::new("慧心AB".chars()).unwrap();
        let mut spec = cfg.synth_spec(cs.clone());
        spec.latin_ratio = 0.5;
        let mut rng = SeededRng::new(3);
        for _ in 0..50 {
            let (img, w) = synth_sample(&spec, &mut rng);
            assert!(w.chars().all(|c| cs.contains(c)));
            assert_eq!(img.shape()[2], w.chars().count() * spec.patch_width);
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(vec![1.0, -2.0]));
        let mut s = AdamState::new(&p, 1e-3);
        adam_step(&mut p, &mut s).unwrap();
        assert_eq!(p.value("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_descends_on_square() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(1.0));
        let mut s = AdamState::new(&p, 1e-3);
        p.accumulate_grad("w", &Tensor::scalar(2.0), 1.0).unwrap();
        adam_step(&mut p, &mut s).unwrap();
        let w = p.value("w").unwrap().item();
        assert!(w * w < 1.0);
    }

    #[test]
    fn adam_matches_scalar_simulation() {
        // constant gradient: the step tends to lr
        let (lr, b1, b2, eps, g) = (1e-3, 0.9, 0.999, 1e-8, 0.37);
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(0.0));
        let mut s = AdamState::new(&p, lr);
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 0.0f64);
        let mut last = 0.0;
        for t in 1..=1000 {
            p.zero_grads();
            p.accumulate_grad("w", &Tensor::scalar(g), 1.0).unwrap();
            let before = p.value("w").unwrap().item();
            adam_step(&mut p, &mut s).unwrap();
            last = (p.value("w").unwrap().item() - before).abs();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
            assert_eq!(p.value("w").unwrap().item(), w);
        }
        assert!((last - lr).abs() / lr < 0.05);
    }

    #[test]
    fn config_round_trip_and_errors() {
        let cfg = TrainConfig::parse("# toy\nsteps = 50\nlr = 0.002\nno_cvfm = true\nheads_input = g\n").unwrap();
        assert_eq!(cfg.steps, 50);
        assert_eq!(cfg.lr, 0.002);
        assert!(cfg.no_cvfm);
        assert_eq!(cfg.heads_input, HeadsInput::G);
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("steps 5").is_err());
    }

    #[test]
    fn training_is_reproducible() {
        let mut a = tiny_trainer(tiny_config());
        let mut b = tiny_trainer(tiny_config());
        let ra = a.run(&mut Vec::new()).unwrap();
        let rb = b.run(&mut Vec::new()).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.params, b.params);
        assert!(ra[2].probe_word_acc.is_some() && ra[0].probe_word_acc.is_none());
    }

    #[test]
    fn checkpoint_resume_is_bit_identical() {
        let mut cfg = tiny_config();
        cfg.cosine = true;
        let mut straight = tiny_trainer(cfg.clone());
        straight.run(&mut Vec::new()).unwrap();
        let mut first = tiny_trainer(cfg);
        first.run_to(3, &mut Vec::new()).unwrap();
        let bytes = Checkpoint::of(&first).to_bytes();
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ckpt, Checkpoint::of(&first));
        let mut resumed = ckpt.into_trainer().unwrap();
        resumed.run(&mut Vec::new()).unwrap();
        resumed.params.zero_grads();
        straight.params.zero_grads();
        assert_eq!(resumed.params, straight.params);
        assert_eq!(resumed.adam, straight.adam);
    }

    #[test]
    fn bad_checkpoints_are_rejected() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let t = tiny_trainer(tiny_config());
        let mut bytes = Checkpoint::of(&t).to_bytes();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn ablations_train() {
        for flag in ["no_cvfm", "no_bce", "re_zero", "no_scaler", "no_dropout"] {
            let mut cfg = tiny_config();
            cfg.steps = 2;
            cfg = TrainConfig::parse(&format!("{}{flag} = true\n", cfg.to_text())).unwrap();
            let mut t = tiny_trainer(cfg);
            let recs = t.run(&mut Vec::new()).unwrap();
            assert!(recs.iter().all(|r| r.total.is_finite()));
            if flag == "no_bce" {
                assert!(recs.iter().all(|r| r.l_r == 0.0));
            }
        }
    }
}
