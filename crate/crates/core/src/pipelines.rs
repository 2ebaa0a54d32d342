//! The six alignment strategies as end-to-end risk predictors over the
//! frozen encoder, and the training loop.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{resize_field, warp_bilinear, DeformationField2D, Image2D};
use crate::io::NamedTensor;
use crate::optim::Adam;
use crate::registrar::{register, RegistrationConfig, RegistrationResult};
use crate::risk::{
    alignment_block_tape, field_from_planes, gaussian, hazard_head_tape, init_alignment_block, init_attention,
    temporal_self_attention_tape, time_positional_encoding, tiny_encoder, warp_featuremap, AttentionConfig,
    FeatureMap, HazardHead, RiskOutput, SurvivalLabel, TinyEncoder, FIELD_SMOOTHNESS, T_MAX,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    NoAlign,
    Implicit,
    FeatAlign,
    FeatAlignReg,
    ImgAlign,
    ImgFeatAlign,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::NoAlign,
        StrategyKind::Implicit,
        StrategyKind::FeatAlign,
        StrategyKind::FeatAlignReg,
        StrategyKind::ImgAlign,
        StrategyKind::ImgFeatAlign,
    ];

    /// Lower-case CLI spelling.
    pub fn key(self) -> &'static str {
        match self {
            StrategyKind::NoAlign => "noalign",
            StrategyKind::Implicit => "implicit",
            StrategyKind::FeatAlign => "featalign",
            StrategyKind::FeatAlignReg => "featalignreg",
            StrategyKind::ImgAlign => "imgalign",
            StrategyKind::ImgFeatAlign => "imgfeatalign",
        }
    }

    pub fn uses_registration(self) -> bool {
        matches!(self, StrategyKind::ImgAlign | StrategyKind::ImgFeatAlign)
    }

    pub fn learns_alignment(self) -> bool {
        matches!(self, StrategyKind::FeatAlign | StrategyKind::FeatAlignReg)
    }

    /// Strategies whose fused input carries the difference token.
    pub fn uses_difference(self) -> bool {
        self.learns_alignment() || self.uses_registration()
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            StrategyKind::NoAlign => "NoAlign",
            StrategyKind::Implicit => "Implicit",
            StrategyKind::FeatAlign => "FeatAlign",
            StrategyKind::FeatAlignReg => "FeatAlignReg",
            StrategyKind::ImgAlign => "ImgAlign",
            StrategyKind::ImgFeatAlign => "ImgFeatAlign",
        };
        f.write_str(name)
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.key() == lower)
            .ok_or_else(|| Error::config(format!("unknown strategy {s:?}")))
    }
}

/// Breast density category, BI-RADS letters or three-level grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Density {
    A,
    B,
    C,
    D,
    Low,
    Medium,
    High,
}

impl Density {
    pub const BIRADS: [Density; 4] = [Density::A, Density::B, Density::C, Density::D];
}

impl fmt::Display for Density {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Density {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "a" | "1" => Density::A,
            "b" | "2" => Density::B,
            "c" | "3" => Density::C,
            "d" | "4" => Density::D,
            "low" => Density::Low,
            "medium" => Density::Medium,
            "high" => Density::High,
            _ => return Err(Error::config(format!("unknown density {s:?}"))),
        })
    }
}

/// A current exam with one prior of the same view.
#[derive(Debug, Clone, PartialEq)]
pub struct ExamPair {
    pub patient_id: String,
    pub exam_id: String,
    pub current: Image2D,
    pub prior: Image2D,
    pub gap_months: f64,
    pub label: SurvivalLabel,
    pub density: Option<Density>,
}

impl ExamPair {
    pub fn validate(&self) -> Result<()> {
        if !(self.gap_months > 0.0) {
            return Err(Error::config(format!("exam {}: gap {} months must be positive", self.exam_id, self.gap_months)));
        }
        if self.current.shape() != self.prior.shape() {
            return Err(Error::dim(format!(
                "exam {}: current {:?} vs prior {:?}",
                self.exam_id,
                self.current.shape(),
                self.prior.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub token_dim: usize,
    pub heads: usize,
    pub head_hidden: usize,
    pub align_hidden: usize,
    pub implicit_hidden: usize,
    pub t_max: usize,
    pub encoder_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            token_dim: 16,
            heads: 2,
            head_hidden: 32,
            align_hidden: 16,
            implicit_hidden: 16,
            t_max: T_MAX,
            encoder_seed: 17,
        }
    }
}

impl ModelConfig {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig { dim: self.token_dim, heads: self.heads, dropout: 0.0 }
    }

    fn fused_width(&self, strategy: StrategyKind) -> usize {
        if strategy.uses_difference() {
            3 * self.token_dim
        } else {
            2 * self.token_dim
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the feature MSE in the alignment loss.
    pub alpha: f64,
    /// Field regulariser weight for FeatAlignReg (FeatAlign always uses 0).
    pub beta: f64,
    pub lambda_jd: f64,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 16, lr: 1e-3, alpha: 0.1, beta: 1.0, lambda_jd: 1e-5, seed: 0, model: ModelConfig::default() }
    }
}

impl TrainConfig {
    pub fn beta_for(&self, strategy: StrategyKind) -> f64 {
        match strategy {
            StrategyKind::FeatAlignReg => self.beta,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0) || self.alpha < 0.0 || self.beta < 0.0 || self.lambda_jd < 0.0 {
            return Err(Error::config("lr must be positive and loss weights non-negative"));
        }
        self.model.attention().validate()
    }
}

/// Trainable parameters for one strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub strategy: StrategyKind,
    pub config: ModelConfig,
    pub params: ParamStore,
}

const META_PREFIX: &str = "meta.json:";

impl Model {
    pub fn new(strategy: StrategyKind, config: ModelConfig, seed: u64) -> Result<Self> {
        config.attention().validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = crate::risk::ENCODER_CHANNELS;
        let d = config.token_dim;
        match strategy {
            StrategyKind::Implicit => {
                conv_init(&mut store, "implicit.conv1", config.implicit_hidden, 2 * c, 3, &mut rng);
                conv_init(&mut store, "implicit.conv2", 2 * d, config.implicit_hidden, 3, &mut rng);
            }
            _ => {
                conv_init(&mut store, "fuse", d, c, 1, &mut rng);
                if strategy.uses_difference() {
                    conv_init(&mut store, "fuse_diff", d, c, 1, &mut rng);
                }
                if strategy.learns_alignment() {
                    init_alignment_block(&mut store, "align", c, config.align_hidden, &mut rng);
                }
            }
        }
        init_attention(&mut store, "attn", &config.attention(), &mut rng);
        for (name, width) in [("fused", config.fused_width(strategy)), ("cur", c), ("pri", c)] {
            linear_init(&mut store, &format!("{name}.hidden"), config.head_hidden, width, &mut rng);
            HazardHead::random(config.head_hidden, config.t_max, &mut rng).insert_into(&mut store, &format!("{name}.head"));
        }
        Ok(Self { strategy, config, params: store })
    }

    pub fn encoder(&self) -> TinyEncoder {
        TinyEncoder::new(self.config.encoder_seed)
    }

    /// Parameters plus a metadata entry carrying strategy and configuration.
    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let meta = serde_json::json!({ "strategy": self.strategy, "config": self.config });
        let mut out = vec![NamedTensor { name: format!("{META_PREFIX}{meta}"), shape: vec![0], data: vec![] }];
        for i in 0..self.params.len() {
            let (name, shape, data) = self.params.tensor(i);
            out.push(NamedTensor { name: name.to_string(), shape: shape.to_vec(), data: data.to_vec() });
        }
        out
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let meta = tensors
            .first()
            .and_then(|t| t.name.strip_prefix(META_PREFIX))
            .ok_or_else(|| Error::Format { format: "LAWT", reason: "missing model metadata entry".into() })?;
        #[derive(Deserialize)]
        struct Meta {
            strategy: StrategyKind,
            config: ModelConfig,
        }
        let meta: Meta = serde_json::from_str(meta)?;
        let template = Model::new(meta.strategy, meta.config, 0)?;
        let mut params = ParamStore::new();
        for t in &tensors[1..] {
            params.insert(&t.name, t.shape.clone(), t.data.clone());
        }
        if params.names() != template.params.names() {
            return Err(Error::Format { format: "LAWT", reason: format!("parameters do not match strategy {}", meta.strategy) });
        }
        for name in template.params.names() {
            if params.shape(name) != template.params.shape(name) {
                return Err(Error::Format { format: "LAWT", reason: format!("shape mismatch for {name}") });
            }
        }
        Ok(Self { strategy: meta.strategy, config: meta.config, params })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::io::write_bytes(path.as_ref(), &crate::io::encode_lawt(&self.to_tensors()))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_tensors(&crate::io::decode_lawt(&crate::io::read_bytes(path.as_ref())?)?)
    }
}

fn conv_init(store: &mut ParamStore, prefix: &str, cout: usize, cin: usize, k: usize, rng: &mut impl Rng) {
    let s = (2.0 / (cin * k * k) as f64).sqrt();
    let w = (0..cout * cin * k * k).map(|_| gaussian(rng) * s).collect();
    store.insert(&format!("{prefix}.w"), vec![cout, cin, k, k], w);
    store.insert(&format!("{prefix}.b"), vec![cout], vec![0.0; cout]);
}

fn linear_init(store: &mut ParamStore, prefix: &str, out: usize, inp: usize, rng: &mut impl Rng) {
    let s = (2.0 / inp as f64).sqrt();
    let w = (0..out * inp).map(|_| gaussian(rng) * s).collect();
    store.insert(&format!("{prefix}.w"), vec![out, inp], w);
    store.insert(&format!("{prefix}.b"), vec![out], vec![0.0; out]);
}

/// Encoder outputs (and the registration-aligned prior for Img* strategies)
/// for one pair. These are constants during training.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPair {
    pub f_cur: FeatureMap,
    pub f_pri: FeatureMap,
    pub f_pri_registered: Option<FeatureMap>,
    /// Registration field at feature resolution (ImgFeatAlign) or image
    /// resolution (ImgAlign).
    pub registration_field: Option<DeformationField2D>,
    pub gap_months: f64,
    pub label: SurvivalLabel,
}

pub fn prepare(
    strategy: StrategyKind,
    pair: &ExamPair,
    encoder: &TinyEncoder,
    registration: Option<&RegistrationResult>,
) -> Result<PreparedPair> {
    pair.validate()?;
    let f_cur = tiny_encoder(&pair.current, encoder)?;
    let f_pri = tiny_encoder(&pair.prior, encoder)?;
    let (f_pri_registered, registration_field) = match strategy {
        StrategyKind::ImgAlign | StrategyKind::ImgFeatAlign => {
            let reg = registration.ok_or_else(|| {
                Error::config(format!("strategy {strategy} needs a registration result for exam {}", pair.exam_id))
            })?;
            if reg.final_field.shape() != pair.current.shape() {
                return Err(Error::dim(format!("registration field does not match exam {}", pair.exam_id)));
            }
            if strategy == StrategyKind::ImgAlign {
                let warped = warp_bilinear(&pair.prior, &reg.final_field)?;
                (Some(tiny_encoder(&warped, encoder)?), Some(reg.final_field.clone()))
            } else {
                let field = resize_field(&reg.final_field, f_pri.height(), f_pri.width())?;
                (Some(warp_featuremap(&f_pri, &field)?), Some(field))
            }
        }
        _ => (None, None),
    };
    Ok(PreparedPair { f_cur, f_pri, f_pri_registered, registration_field, gap_months: pair.gap_months, label: pair.label.clone() })
}

/// Tape handles produced by one forward pass.
struct Forward {
    fused: (Var, Var),
    cur: (Var, Var),
    pri: (Var, Var),
    /// `(mse, smoothness, jd_penalty)` for strategies that learn a field.
    align_terms: Option<(Var, Var, Var)>,
    field: Option<Var>,
    diff: Option<Var>,
}

fn conv(tape: &mut Tape, p: &mut Bound, prefix: &str, x: Var, cin: usize, h: usize, w: usize) -> Var {
    let wv = p.param(tape, &format!("{prefix}.w"));
    let b = p.param(tape, &format!("{prefix}.b"));
    tape.conv2d(x, wv, b, cin, h, w)
}

fn dense(tape: &mut Tape, p: &mut Bound, prefix: &str, x: Var) -> Var {
    let wv = p.param(tape, &format!("{prefix}.w"));
    let b = p.param(tape, &format!("{prefix}.b"));
    tape.linear(x, wv, b, 1)
}

/// 1×1 convolution, ReLU and global max pooling into a token.
fn token(tape: &mut Tape, p: &mut Bound, prefix: &str, x: Var, c: usize, h: usize, w: usize, d: usize) -> Var {
    let y = conv(tape, p, prefix, x, c, h, w);
    let y = tape.relu(y);
    tape.global_max_pool(y, d)
}

fn head(tape: &mut Tape, p: &mut Bound, name: &str, x: Var) -> (Var, Var) {
    let hdn = dense(tape, p, &format!("{name}.hidden"), x);
    let hdn = tape.relu(hdn);
    hazard_head_tape(tape, p, &format!("{name}.head"), hdn)
}

fn forward(tape: &mut Tape, p: &mut Bound, strategy: StrategyKind, cfg: &ModelConfig, prep: &PreparedPair) -> Result<Forward> {
    let (c, h, w) = prep.f_cur.shape();
    let d = cfg.token_dim;
    let att = cfg.attention();
    let cur = tape.leaf(prep.f_cur.data().to_vec());
    let pri = tape.leaf(prep.f_pri.data().to_vec());

    let mut align_terms = None;
    let mut field = None;
    let mut diff = None;
    let fused_in = if strategy == StrategyKind::Implicit {
        let x = tape.concat(&[pri, cur]);
        let hid = cfg.implicit_hidden;
        let y = conv(tape, p, "implicit.conv1", x, 2 * c, h, w);
        let y = tape.relu(y);
        let y = tape.max_pool2(y, hid, h, w);
        let (h2, w2) = (h / 2, w / 2);
        let y = conv(tape, p, "implicit.conv2", y, hid, h2, w2);
        let y = tape.relu(y);
        let y = tape.max_pool2(y, 2 * d, h2, w2);
        let tokens = tape.global_avg_pool(y, 2 * d);
        let (out, _) = temporal_self_attention_tape(tape, p, "attn", tokens, 2, &att);
        out
    } else {
        let pri_aligned = match strategy {
            StrategyKind::FeatAlign | StrategyKind::FeatAlignReg => {
                let f = alignment_block_tape(tape, p, "align", cur, pri, c, h, w);
                field = Some(f);
                let warped = tape.warp(pri, f, c, h, w);
                let mse = tape.mse(warped, cur);
                let smooth = tape.smoothness(f, h, w, FIELD_SMOOTHNESS);
                let jd = tape.jd_penalty(f, h, w);
                align_terms = Some((mse, smooth, jd));
                warped
            }
            StrategyKind::ImgAlign | StrategyKind::ImgFeatAlign => {
                let reg = prep
                    .f_pri_registered
                    .as_ref()
                    .ok_or_else(|| Error::config(format!("strategy {strategy} used without registration features")))?;
                tape.leaf(reg.data().to_vec())
            }
            _ => pri,
        };
        let t_pri = token(tape, p, "fuse", pri_aligned, c, h, w, d);
        let t_cur = token(tape, p, "fuse", cur, c, h, w, d);
        let seq = tape.concat(&[t_pri, t_cur]);
        let (out, _) = temporal_self_attention_tape(tape, p, "attn", seq, 2, &att);
        if strategy.uses_difference() {
            let df = tape.sub(cur, pri_aligned);
            diff = Some(df);
            let t_diff = token(tape, p, "fuse_diff", df, c, h, w, d);
            let pe = tape.leaf(time_positional_encoding(prep.gap_months, d)?);
            let t_diff = tape.add(t_diff, pe);
            tape.concat(&[out, t_diff])
        } else {
            out
        }
    };
    let fused = head(tape, p, "fused", fused_in);
    let g_cur = tape.global_avg_pool(cur, c);
    let g_pri = tape.global_avg_pool(pri, c);
    let cur_out = head(tape, p, "cur", g_cur);
    let pri_out = head(tape, p, "pri", g_pri);
    Ok(Forward { fused, cur: cur_out, pri: pri_out, align_terms, field, diff })
}

/// Fused, current-only and prior-only risk, plus the feature-level field
/// that was applied (if any).
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub fused: RiskOutput,
    pub current: RiskOutput,
    pub prior: RiskOutput,
    pub feature_field: Option<DeformationField2D>,
    /// Mean absolute difference feature, when the strategy forms one.
    pub diff_mean_abs: Option<f64>,
}

fn risk_from(tape: &Tape, (cum, prob): (Var, Var)) -> RiskOutput {
    RiskOutput { cum_score: tape.value(cum).to_vec(), prob: tape.value(prob).to_vec() }
}

pub fn predict_prepared(model: &Model, prep: &PreparedPair) -> Result<Prediction> {
    let mut tape = Tape::new();
    let mut p = Bound::new(&model.params);
    let fw = forward(&mut tape, &mut p, model.strategy, &model.config, prep)?;
    let (_, h, w) = prep.f_cur.shape();
    let feature_field = match (fw.field, &prep.registration_field) {
        (Some(f), _) => Some(field_from_planes(tape.value(f), h, w)?),
        (None, Some(f)) if model.strategy == StrategyKind::ImgFeatAlign => Some(f.clone()),
        _ => None,
    };
    let diff_mean_abs = fw.diff.map(|d| {
        let v = tape.value(d);
        v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
    });
    Ok(Prediction {
        fused: risk_from(&tape, fw.fused),
        current: risk_from(&tape, fw.cur),
        prior: risk_from(&tape, fw.pri),
        feature_field,
        diff_mean_abs,
    })
}

/// Predicts for one pair. Img* strategies use `registration` when given and
/// otherwise register with `reg_cfg`.
pub fn predict(
    model: &Model,
    pair: &ExamPair,
    registration: Option<&RegistrationResult>,
    reg_cfg: Option<&RegistrationConfig>,
) -> Result<Prediction> {
    let computed;
    let registration = match (model.strategy.uses_registration(), registration, reg_cfg) {
        (true, None, Some(cfg)) => {
            computed = register(&pair.current, &pair.prior, cfg).map_err(|e| e.in_stage("registration"))?;
            Some(&computed)
        }
        (_, r, _) => r,
    };
    let prep = prepare(model.strategy, pair, &model.encoder(), registration)?;
    predict_prepared(model, &prep)
}

/// Per-sample training loss and its gradient in store order.
pub fn sample_loss_grad(model: &Model, prep: &PreparedPair, hyper: &TrainConfig) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let mut p = Bound::new(&model.params);
    let fw = forward(&mut tape, &mut p, model.strategy, &model.config, prep)?;
    let (y, delta) = (&prep.label.y, &prep.label.delta);
    let mut terms = vec![
        tape.masked_bce(fw.fused.1, y, delta),
        tape.masked_bce(fw.cur.1, y, delta),
        tape.masked_bce(fw.pri.1, y, delta),
    ];
    if let Some((mse, smooth, jd)) = fw.align_terms {
        terms.push(tape.scale(mse, hyper.alpha));
        let beta = hyper.beta_for(model.strategy);
        if beta > 0.0 {
            let jd = tape.scale(jd, hyper.lambda_jd);
            let reg = tape.add(smooth, jd);
            terms.push(tape.scale(reg, beta));
        }
    }
    let all = tape.concat(&terms);
    let total = tape.sum(all);
    let grads = tape.backward(total);
    Ok((tape.scalar(total), p.flat_grad(&grads)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean per-sample loss for each epoch, accumulated before each update.
    pub loss_curve: Vec<f64>,
    /// Mean validation loss after each epoch (empty without a validation set).
    pub val_curve: Vec<f64>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Trains from fresh parameters seeded by `hyper.seed`.
pub fn train(strategy: StrategyKind, cohort: &[PreparedPair], hyper: &TrainConfig) -> Result<TrainOutcome> {
    let model = Model::new(strategy, hyper.model, hyper.seed)?;
    train_model(model, cohort, None, hyper)
}

/// Continues training `model`; mini-batches are shuffled deterministically
/// from `hyper.seed`, and per-sample gradients are summed in batch order.
/// With a validation set the parameters from the epoch with the lowest
/// validation loss are returned, otherwise the final ones.
pub fn train_model(
    mut model: Model,
    cohort: &[PreparedPair],
    validation: Option<&[PreparedPair]>,
    hyper: &TrainConfig,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    if cohort.is_empty() {
        return Err(Error::config("training cohort is empty"));
    }
    let validation = validation.filter(|v| !v.is_empty());
    let shape = cohort[0].f_cur.shape();
    let all = cohort.iter().chain(validation.unwrap_or(&[]));
    if all.into_iter().any(|p| p.f_cur.shape() != shape || p.f_pri.shape() != shape) {
        return Err(Error::dim("training pairs have differing feature shapes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed_0f_ba7c4);
    let mut adam = Adam::new(hyper.lr);
    let mut flat = model.params.flatten();
    let mut order: Vec<usize> = (0..cohort.len()).collect();
    let mut curve = Vec::with_capacity(hyper.epochs);
    let mut val_curve = Vec::new();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let results: Vec<Result<(f64, Vec<f64>)>> =
                batch.par_iter().map(|&i| sample_loss_grad(&model, &cohort[i], hyper)).collect();
            let mut grad = vec![0.0; flat.len()];
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, g) = r?;
                batch_loss += loss;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDivergence { epoch });
            }
            epoch_loss += batch_loss;
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(&mut flat, &grad);
            model.params.set_flat(&flat);
        }
        curve.push(epoch_loss / cohort.len() as f64);
        if let Some(val) = validation {
            let v = evaluate_loss(&model, val, hyper)?;
            val_curve.push(v);
            if best.as_ref().is_none_or(|b| v < b.0) {
                best = Some((v, epoch, flat.clone()));
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params.set_flat(&params);
            epoch
        }
        None => hyper.epochs - 1,
    };
    Ok(TrainOutcome { model, loss_curve: curve, val_curve, best_epoch })
}

/// Mean per-sample loss of `model` over `cohort` without updating it.
pub fn evaluate_loss(model: &Model, cohort: &[PreparedPair], hyper: &TrainConfig) -> Result<f64> {
    let losses: Vec<Result<(f64, Vec<f64>)>> = cohort.par_iter().map(|p| sample_loss_grad(model, p, hyper)).collect();
    let mut total = 0.0;
    for r in losses {
        total += r?.0;
    }
    Ok(total / cohort.len() as f64)
}
