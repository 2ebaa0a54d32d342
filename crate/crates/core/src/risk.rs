//! Cumulative-hazard risk head, censoring, feature-level alignment and the
//! frozen tiny encoder.
//!
//! Every trainable piece has a tape-recording form (`*_tape`) used for
//! training, and a plain form that runs the same tape and reads the values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_forward, logistic, masked_bce_value, max_pool2, Bound, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{DeformationField2D, Image2D};
use crate::io::{decode_fm2d, encode_fm2d, NamedTensor};
use crate::metrics::{jacobian_map, jd_penalty, smoothness_energy, Reduction};

/// Number of yearly horizons modelled.
pub const T_MAX: usize = 5;

/// Channel-major feature map `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::dim(format!("empty feature map {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::dim(format!(
                "feature data length {} != {channels}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::dim("feature map contains non-finite values"));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    /// Single-channel map holding an image.
    pub fn from_image(image: &Image2D) -> Self {
        Self { channels: 1, height: image.height(), width: image.width(), data: image.data().to_vec() }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len() as f64
    }

    /// Global average pool, one value per channel.
    pub fn pooled(&self) -> Vec<f64> {
        let n = (self.height * self.width) as f64;
        (0..self.channels).map(|c| self.channel(c).iter().sum::<f64>() / n).collect()
    }

    pub fn to_fm2d(&self) -> Vec<u8> {
        encode_fm2d(self.channels, self.height, self.width, &self.data)
    }

    pub fn from_fm2d(bytes: &[u8]) -> Result<Self> {
        let (c, h, w, data) = decode_fm2d(bytes)?;
        Self::new(c, h, w, data)
    }

    fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!("{what}: {:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }
}

/// Yearly targets and censoring mask for one exam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalLabel {
    pub t_max: usize,
    pub y: Vec<f64>,
    pub delta: Vec<f64>,
    pub years_to_cancer: Option<u32>,
    pub followup_years: u32,
}

impl SurvivalLabel {
    pub fn new(followup_years: u32, years_to_cancer: Option<u32>, t_max: usize) -> Self {
        let y = (1..=t_max)
            .map(|t| match years_to_cancer {
                Some(ttc) if ttc as usize <= t => 1.0,
                _ => 0.0,
            })
            .collect();
        Self { t_max, y, delta: censor_mask(followup_years, years_to_cancer, t_max), years_to_cancer, followup_years }
    }

    /// Diagnosed within the modelled window.
    pub fn is_case(&self) -> bool {
        self.years_to_cancer.is_some_and(|t| t as usize <= self.t_max)
    }
}

/// δ(t) for t = 1..=t_max: observed through year t, or diagnosed within the
/// window.
pub fn censor_mask(followup_years: u32, years_to_cancer: Option<u32>, t_max: usize) -> Vec<f64> {
    let diagnosed = years_to_cancer.is_some_and(|t| t as usize <= t_max);
    (1..=t_max)
        .map(|t| if diagnosed || followup_years as usize >= t.min(t_max) { 1.0 } else { 0.0 })
        .collect()
}

/// Linear base and per-step hazard maps over a pooled feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardHead {
    pub input: usize,
    pub t_max: usize,
    /// `[1, input]`.
    pub base_weights: Vec<f64>,
    pub base_bias: f64,
    /// `[t_max, input]`.
    pub step_weights: Vec<f64>,
    pub step_bias: Vec<f64>,
}

impl HazardHead {
    pub fn zeros(input: usize, t_max: usize) -> Self {
        Self {
            input,
            t_max,
            base_weights: vec![0.0; input],
            base_bias: 0.0,
            step_weights: vec![0.0; input * t_max],
            step_bias: vec![0.0; t_max],
        }
    }

    pub fn random(input: usize, t_max: usize, rng: &mut impl Rng) -> Self {
        let s = 1.0 / (input as f64).sqrt();
        let mut u = |n: usize| (0..n).map(|_| rng.gen_range(-s..s)).collect::<Vec<_>>();
        Self {
            input,
            t_max,
            base_weights: u(input),
            base_bias: 0.0,
            step_weights: u(input * t_max),
            step_bias: u(t_max),
        }
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Self {
        let step_bias = store.get(&format!("{prefix}.step_b")).to_vec();
        let t_max = step_bias.len();
        let base_weights = store.get(&format!("{prefix}.base_w")).to_vec();
        Self {
            input: base_weights.len(),
            t_max,
            base_weights,
            base_bias: store.get(&format!("{prefix}.base_b"))[0],
            step_weights: store.get(&format!("{prefix}.step_w")).to_vec(),
            step_bias,
        }
    }

    pub fn insert_into(&self, store: &mut ParamStore, prefix: &str) {
        store.insert(&format!("{prefix}.base_w"), vec![1, self.input], self.base_weights.clone());
        store.insert(&format!("{prefix}.base_b"), vec![1], vec![self.base_bias]);
        store.insert(&format!("{prefix}.step_w"), vec![self.t_max, self.input], self.step_weights.clone());
        store.insert(&format!("{prefix}.step_b"), vec![self.t_max], self.step_bias.clone());
    }
}

/// Cumulative scores and their logistic probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskOutput {
    pub cum_score: Vec<f64>,
    pub prob: Vec<f64>,
}

impl RiskOutput {
    pub fn from_scores(cum_score: Vec<f64>) -> Self {
        let prob = cum_score.iter().map(|&s| logistic(s)).collect();
        Self { cum_score, prob }
    }
}

pub fn cumulative_probability(head: &HazardHead, f: &[f64]) -> Result<RiskOutput> {
    if f.len() != head.input {
        return Err(Error::dim(format!("feature width {} != head input {}", f.len(), head.input)));
    }
    let dot = |w: &[f64]| w.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
    let mut acc = head.base_bias + dot(&head.base_weights);
    let scores = (0..head.t_max)
        .map(|t| {
            let h = head.step_bias[t] + dot(&head.step_weights[t * head.input..(t + 1) * head.input]);
            acc += h.max(0.0);
            acc
        })
        .collect();
    Ok(RiskOutput::from_scores(scores))
}

/// Records the head on `tape`; returns `(cum_score, prob)`.
pub fn hazard_head_tape(tape: &mut Tape, p: &mut Bound, prefix: &str, x: Var) -> (Var, Var) {
    let bw = p.param(tape, &format!("{prefix}.base_w"));
    let bb = p.param(tape, &format!("{prefix}.base_b"));
    let sw = p.param(tape, &format!("{prefix}.step_w"));
    let sb = p.param(tape, &format!("{prefix}.step_b"));
    let base = tape.linear(x, bw, bb, 1);
    let steps = tape.linear(x, sw, sb, 1);
    let cum = tape.cum_hazard(base, steps);
    let prob = tape.sigmoid(cum);
    (cum, prob)
}

pub fn masked_bce(pred: &RiskOutput, label: &SurvivalLabel) -> Result<f64> {
    if pred.prob.len() != label.t_max {
        return Err(Error::dim(format!("prediction horizons {} != label {}", pred.prob.len(), label.t_max)));
    }
    Ok(masked_bce_value(&pred.prob, &label.y, &label.delta))
}

pub fn loss_feat(
    f_pri_aligned: &FeatureMap,
    f_cur: &FeatureMap,
    field: &DeformationField2D,
    alpha: f64,
    beta: f64,
    lambda: f64,
) -> Result<f64> {
    f_pri_aligned.ensure_same_shape(f_cur, "loss_feat maps")?;
    let n = f_cur.data.len() as f64;
    let mse = f_pri_aligned.data.iter().zip(&f_cur.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let reg = if beta == 0.0 { 0.0 } else { beta * (smoothness_energy(field) + lambda * jd_penalty(&jacobian_map(field))) };
    Ok(alpha * mse + reg)
}

pub fn warp_featuremap(f: &FeatureMap, field: &DeformationField2D) -> Result<FeatureMap> {
    if field.shape() != (f.height, f.width) {
        return Err(Error::dim(format!(
            "field {:?} does not match feature grid {:?}",
            field.shape(),
            (f.height, f.width)
        )));
    }
    let n = f.height * f.width;
    let mut data = Vec::with_capacity(f.data.len());
    for c in 0..f.channels {
        data.extend(crate::grid::warp_plane(&f.data[c * n..(c + 1) * n], f.height, f.width, field.u(), field.v()));
    }
    Ok(FeatureMap { data, ..*f })
}

pub fn diff_features(f_cur: &FeatureMap, f_pri_aligned: &FeatureMap) -> Result<FeatureMap> {
    f_cur.ensure_same_shape(f_pri_aligned, "diff_features")?;
    let data = f_cur.data.iter().zip(&f_pri_aligned.data).map(|(a, b)| a - b).collect();
    Ok(FeatureMap { data, ..*f_cur })
}

/// Weights for the alignment block: two 3×3 convolutions over the
/// concatenated `[current, prior]` maps, with instance norm and ReLU between.
/// The first convolution has no bias since instance norm removes it.
pub fn init_alignment_block(store: &mut ParamStore, prefix: &str, channels: usize, hidden: usize, rng: &mut impl Rng) {
    let fan_in = (2 * channels * 9) as f64;
    let s = (2.0 / fan_in).sqrt();
    let w1 = (0..hidden * 2 * channels * 9).map(|_| gaussian(rng) * s).collect();
    store.insert(&format!("{prefix}.conv1.w"), vec![hidden, 2 * channels, 3, 3], w1);
    store.insert(&format!("{prefix}.conv2.w"), vec![2, hidden, 3, 3], vec![0.0; 2 * hidden * 9]);
    store.insert(&format!("{prefix}.conv2.b"), vec![2], vec![0.0; 2]);
}

/// Records the alignment block; returns the field as `[2, h, w]` (u then v).
pub fn alignment_block_tape(tape: &mut Tape, p: &mut Bound, prefix: &str, cur: Var, pri: Var, c: usize, h: usize, w: usize) -> Var {
    let x = tape.concat(&[cur, pri]);
    let w1 = p.param(tape, &format!("{prefix}.conv1.w"));
    let hidden = tape.len(w1) / (2 * c * 9);
    let b1 = tape.leaf(vec![0.0; hidden]);
    let y = tape.conv2d(x, w1, b1, 2 * c, h, w);
    let y = tape.instance_norm(y, hidden);
    let y = tape.relu(y);
    let w2 = p.param(tape, &format!("{prefix}.conv2.w"));
    let b2 = p.param(tape, &format!("{prefix}.conv2.b"));
    tape.conv2d(y, w2, b2, hidden, h, w)
}

pub fn alignment_block(f_cur: &FeatureMap, f_pri: &FeatureMap, params: &ParamStore, prefix: &str) -> Result<DeformationField2D> {
    f_cur.ensure_same_shape(f_pri, "alignment_block inputs")?;
    let (c, h, w) = f_cur.shape();
    let mut tape = Tape::new();
    let mut p = Bound::new(params);
    let cur = tape.leaf(f_cur.data.clone());
    let pri = tape.leaf(f_pri.data.clone());
    let field = alignment_block_tape(&mut tape, &mut p, prefix, cur, pri, c, h, w);
    let v = tape.value(field);
    let n = h * w;
    DeformationField2D::new(h, w, v[..n].to_vec(), v[n..].to_vec())
}

/// Positions per month of screening gap.
pub const PE_MONTHS_PER_POSITION: f64 = 6.0;

fn sinusoid_row(pos: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|k| {
            let i = (k / 2) as f64;
            let angle = pos / 10000f64.powf(2.0 * i / dim as f64);
            if k % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Sinusoid table row at `gap_months / 6`, linearly interpolated between the
/// neighbouring integer positions.
pub fn time_positional_encoding(gap_months: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config(format!("positional encoding dim {dim} must be even and positive")));
    }
    if !(gap_months >= 0.0) || !gap_months.is_finite() {
        return Err(Error::config(format!("gap {gap_months} months must be finite and non-negative")));
    }
    let pos = gap_months / PE_MONTHS_PER_POSITION;
    let lo = pos.floor();
    let frac = pos - lo;
    let a = sinusoid_row(lo, dim);
    if frac == 0.0 {
        return Ok(a);
    }
    let b = sinusoid_row(lo + 1.0, dim);
    Ok(a.iter().zip(&b).map(|(x, y)| x * (1.0 - frac) + y * frac).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    /// Accepted for configuration completeness; inference and training here
    /// are deterministic, so only 0 is valid.
    pub dropout: f64,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!("attention dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if self.dropout != 0.0 {
            return Err(Error::config("dropout must be 0 in deterministic mode"));
        }
        Ok(())
    }
}

pub fn init_attention(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut impl Rng) {
    let d = cfg.dim;
    let ff = 2 * d;
    let mut lin = |store: &mut ParamStore, name: &str, out: usize, inp: usize| {
        let s = 1.0 / (inp as f64).sqrt();
        let w = (0..out * inp).map(|_| rng.gen_range(-s..s)).collect();
        store.insert(&format!("{prefix}.{name}.w"), vec![out, inp], w);
        store.insert(&format!("{prefix}.{name}.b"), vec![out], vec![0.0; out]);
    };
    for name in ["q", "k", "v", "o"] {
        lin(store, name, d, d);
    }
    lin(store, "ff1", ff, d);
    lin(store, "ff2", d, ff);
    for ln in ["ln1", "ln2"] {
        store.insert(&format!("{prefix}.{ln}.g"), vec![d], vec![1.0; d]);
        store.insert(&format!("{prefix}.{ln}.b"), vec![d], vec![0.0; d]);
    }
}

/// Records multi-head self-attention over `steps` rows of width `cfg.dim`.
/// Returns the output sequence and the per-head attention matrices.
pub fn temporal_self_attention_tape(
    tape: &mut Tape,
    p: &mut Bound,
    prefix: &str,
    x: Var,
    steps: usize,
    cfg: &AttentionConfig,
) -> (Var, Vec<Var>) {
    let d = cfg.dim;
    let dh = d / cfg.heads;
    let lin = |tape: &mut Tape, p: &mut Bound, name: &str, input: Var| {
        let w = p.param(tape, &format!("{prefix}.{name}.w"));
        let b = p.param(tape, &format!("{prefix}.{name}.b"));
        tape.linear(input, w, b, steps)
    };
    let q = lin(tape, p, "q", x);
    let k = lin(tape, p, "k", x);
    let v = lin(tape, p, "v", x);
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for hd in 0..cfg.heads {
        let qh = tape.slice_cols(q, steps, hd * dh, dh);
        let kh = tape.slice_cols(k, steps, hd * dh, dh);
        let vh = tape.slice_cols(v, steps, hd * dh, dh);
        let kt = tape.transpose(kh, steps, dh);
        let scores = tape.matmul(qh, kt, steps, dh, steps);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let a = tape.softmax_rows(scores, steps);
        weights.push(a);
        heads.push(tape.matmul(a, vh, steps, steps, dh));
    }
    let cat = tape.concat_cols(&heads, steps);
    let o = lin(tape, p, "o", cat);
    let r1 = tape.add(x, o);
    let g1 = p.param(tape, &format!("{prefix}.ln1.g"));
    let b1 = p.param(tape, &format!("{prefix}.ln1.b"));
    let x1 = tape.layer_norm_rows(r1, g1, b1);
    let h = lin(tape, p, "ff1", x1);
    let h = tape.relu(h);
    let f = lin(tape, p, "ff2", h);
    let r2 = tape.add(x1, f);
    let g2 = p.param(tape, &format!("{prefix}.ln2.g"));
    let b2 = p.param(tape, &format!("{prefix}.ln2.b"));
    (tape.layer_norm_rows(r2, g2, b2), weights)
}

/// Output sequence plus attention weights per head (`steps × steps`, rows
/// summing to one).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub sequence: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

pub fn temporal_self_attention(
    seq: &[Vec<f64>],
    cfg: &AttentionConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<AttentionOutput> {
    cfg.validate()?;
    if seq.is_empty() {
        return Err(Error::config("attention over an empty sequence"));
    }
    if let Some(bad) = seq.iter().find(|s| s.len() != cfg.dim) {
        return Err(Error::config(format!("sequence width {} != attention dim {}", bad.len(), cfg.dim)));
    }
    let mut tape = Tape::new();
    let mut p = Bound::new(params);
    let x = tape.leaf(seq.concat());
    let (out, weights) = temporal_self_attention_tape(&mut tape, &mut p, prefix, x, seq.len(), cfg);
    Ok(AttentionOutput {
        sequence: tape.value(out).chunks(cfg.dim).map(<[f64]>::to_vec).collect(),
        weights: weights.iter().map(|&w| tape.value(w).to_vec()).collect(),
    })
}

/// Frozen three-stage convolutional encoder (3×3 conv, ReLU, 2×2 max pool),
/// initialised from a fixed seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyEncoder {
    seed: u64,
    stages: Vec<(usize, usize, Vec<f64>, Vec<f64>)>,
}

pub const ENCODER_CHANNELS: usize = 16;
const ENCODER_WIDTHS: [usize; 4] = [1, 8, 16, ENCODER_CHANNELS];

impl TinyEncoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = ENCODER_WIDTHS
            .windows(2)
            .map(|io| {
                let (cin, cout) = (io[0], io[1]);
                let s = (2.0 / (cin * 9) as f64).sqrt();
                let w = (0..cout * cin * 9).map(|_| gaussian(&mut rng) * s).collect();
                let b = vec![0.0; cout];
                (cin, cout, w, b)
            })
            .collect();
        Self { seed, stages }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn channels(&self) -> usize {
        ENCODER_CHANNELS
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (i, (cin, cout, w, b)) in self.stages.iter().enumerate() {
            out.push(NamedTensor { name: format!("encoder.{i}.w"), shape: vec![*cout, *cin, 3, 3], data: w.clone() });
            out.push(NamedTensor { name: format!("encoder.{i}.b"), shape: vec![*cout], data: b.clone() });
        }
        out
    }
}

pub fn tiny_encoder(image: &Image2D, encoder: &TinyEncoder) -> Result<FeatureMap> {
    let (mut h, mut w) = image.shape();
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::config(format!("encoder input {h}x{w} must be divisible by 8")));
    }
    let mut x = image.data().to_vec();
    for (cin, cout, wt, b) in &encoder.stages {
        let mut y = conv_forward(&x, wt, b, *cin, *cout, h, w, 3);
        y.iter_mut().for_each(|v| *v = v.max(0.0));
        x = max_pool2(&y, *cout, h, w).0;
        h /= 2;
        w /= 2;
    }
    FeatureMap::new(ENCODER_CHANNELS, h, w, x)
}

/// Standard normal draw.
pub(crate) fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Field of `[2, h, w]` tape values as a deformation field.
pub(crate) fn field_from_planes(values: &[f64], h: usize, w: usize) -> Result<DeformationField2D> {
    let n = h * w;
    DeformationField2D::new(h, w, values[..n].to_vec(), values[n..].to_vec())
}

/// Mean reduction is the one used for field regularisation throughout.
pub const FIELD_SMOOTHNESS: Reduction = Reduction::Mean;
