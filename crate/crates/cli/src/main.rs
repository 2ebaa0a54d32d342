use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use longalign::eval::{stratified_report, write_report_csv, EvalRecord, GroupKey, Metric, ReportConfig};
use longalign::grid::warp_bilinear;
use longalign::harness::experiment::{load_cohort_dir, run_experiment, write_phantom_cohort, CohortItem, CohortSource, ExperimentConfig, PairRow};
use longalign::harness::labels::{apply_scheme, read_exam_rows, split_cohort, write_labels, LabelScheme};
use longalign::harness::phantom::{phantom_registration_config, CohortConfig};
use longalign::harness::preprocess::{preprocess_image, PreprocessConfig};
use longalign::io::{load_image, read_df2d, save_png16, write_df2d};
use longalign::metrics::{jacobian_map, jacobian_std, jd_penalty, ncc, njd_percent, smoothness_energy};
use longalign::pipelines::{predict_prepared, prepare, train_model, Model, PreparedPair, StrategyKind, TrainConfig};
use longalign::registrar::{register, RegistrationConfig};
use longalign::risk::{RiskOutput, SurvivalLabel, T_MAX};

#[derive(Parser)]
#[command(name = "longalign", version, about = "Longitudinal mammogram alignment and risk prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort directory.
    Phantom(PhantomArgs),
    /// Derive time-to-cancer labels from a cohort table.
    Labels(LabelsArgs),
    /// Patient-level train/val/test split.
    Split(SplitArgs),
    /// Foreground extraction and canvas resize.
    Preprocess(PreprocessArgs),
    /// Register a moving image onto a fixed image.
    Register(RegisterArgs),
    /// Train one strategy on a cohort directory.
    Train(TrainArgs),
    /// Predict risk for a cohort directory.
    Predict(PredictArgs),
    /// Metrics with bootstrap intervals from predictions and labels.
    Evaluate(EvaluateArgs),
    /// Quality metrics of a DF2D field.
    DeformMetrics(DeformMetricsArgs),
    /// Full strategy comparison.
    Run(RunArgs),
}

/// JSON config file merged under explicit flags.
fn load_config<T: Serialize + DeserializeOwned + Default>(path: Option<&Path>, overrides: Vec<(&str, Option<Value>)>) -> Result<T> {
    load_config_over(T::default(), path, overrides)
}

fn load_config_over<T: Serialize + DeserializeOwned>(base: T, path: Option<&Path>, overrides: Vec<(&str, Option<Value>)>) -> Result<T> {
    let mut value = serde_json::to_value(base)?;
    if let Some(p) = path {
        let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
        merge(&mut value, serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?);
    }
    let mut flags = Map::new();
    for (key, v) in overrides {
        if let Some(v) = v {
            let mut obj = &mut flags;
            let parts: Vec<&str> = key.split('.').collect();
            for part in &parts[..parts.len() - 1] {
                obj = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new())).as_object_mut().unwrap();
            }
            obj.insert(parts[parts.len() - 1].to_string(), v);
        }
    }
    merge(&mut value, Value::Object(flags));
    Ok(serde_json::from_value(value)?)
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t,
    }
}

fn json<T: Serialize>(v: Option<T>) -> Option<Value> {
    v.map(|x| serde_json::to_value(x).expect("flag value serializes"))
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_exams: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    cancer_fraction: Option<f64>,
    #[arg(long)]
    max_displacement: Option<f64>,
}

fn phantom(a: PhantomArgs) -> Result<()> {
    let cfg: CohortConfig = load_config(
        a.config.as_deref(),
        vec![
            ("n_exams", json(a.n_exams)),
            ("seed", json(a.seed)),
            ("height", json(a.height)),
            ("width", json(a.width)),
            ("cancer_fraction", json(a.cancer_fraction)),
            ("max_displacement", json(a.max_displacement)),
        ],
    )?;
    let items = write_phantom_cohort(&cfg, &a.out)?;
    println!("wrote {} pairs to {}", items.len(), a.out.display());
    Ok(())
}

#[derive(Args)]
struct LabelsArgs {
    #[arg(long, value_parser = ["embed", "csaw"])]
    scheme: String,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2016)]
    final_study_year: i32,
    /// Optional CSV of excluded exams.
    #[arg(long)]
    excluded: Option<PathBuf>,
}

fn labels(a: LabelsArgs) -> Result<()> {
    let rows = read_exam_rows(&a.input)?;
    let scheme: LabelScheme = a.scheme.parse()?;
    let outcome = apply_scheme(&rows, scheme, a.final_study_year)?;
    write_labels(&a.out, &outcome)?;
    if let Some(path) = a.excluded {
        let mut w = csv::Writer::from_path(&path)?;
        for e in &outcome.excluded {
            w.serialize(e)?;
        }
        w.flush()?;
    }
    println!("{} labelled, {} excluded", outcome.labels.len(), outcome.excluded.len());
    Ok(())
}

#[derive(Args)]
struct SplitArgs {
    /// Cohort CSV with a patient_id column.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = [5u32, 2, 3])]
    ratios: Vec<u32>,
}

fn split(a: SplitArgs) -> Result<()> {
    let ratios: [u32; 3] = a.ratios.as_slice().try_into().context("--ratios needs three values")?;
    let mut rd = csv::Reader::from_path(&a.input)?;
    let col = rd.headers()?.iter().position(|h| h == "patient_id").context("input has no patient_id column")?;
    let mut ids = Vec::new();
    for rec in rd.records() {
        ids.push(rec?[col].to_string());
    }
    let parts = split_cohort(&ids, ratios, a.seed)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record(["patient_id", "split"])?;
    for (name, ids) in [("train", &parts.train), ("val", &parts.val), ("test", &parts.test)] {
        for id in ids {
            w.write_record([id.as_str(), name])?;
        }
    }
    w.flush()?;
    println!("train {} / val {} / test {}", parts.train.len(), parts.val.len(), parts.test.len());
    Ok(())
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1664)]
    width: usize,
    #[arg(long, default_value_t = 2048)]
    height: usize,
    #[arg(long, default_value_t = 0.05)]
    threshold: f64,
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let raw = load_image(&a.input)?;
    let img = preprocess_image(&raw, &PreprocessConfig { target: (a.width, a.height), threshold: a.threshold })?;
    save_png16(&a.out, &img)?;
    Ok(())
}

#[derive(Args)]
struct RegistrationFlags {
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda_jd: Option<f64>,
    #[arg(long)]
    deformable_levels: Option<usize>,
    #[arg(long)]
    affine_iters: Option<usize>,
    #[arg(long)]
    deformable_iters_per_level: Option<usize>,
    #[arg(long)]
    affine_lr: Option<f64>,
    #[arg(long)]
    deformable_lr: Option<f64>,
    #[arg(long)]
    stop_rel_tol: Option<f64>,
    #[arg(long)]
    stop_patience: Option<usize>,
    #[arg(long)]
    affine_levels: Option<usize>,
    #[arg(long)]
    reg_seed: Option<u64>,
    #[arg(long, value_parser = ["mean", "sum"])]
    smoothness_reduction: Option<String>,
}

impl RegistrationFlags {
    fn overrides(&self, prefix: &str) -> Vec<(String, Option<Value>)> {
        let k = |name: &str| format!("{prefix}{name}");
        vec![
            (k("gamma"), json(self.gamma)),
            (k("lambda_jd"), json(self.lambda_jd)),
            (k("deformable_levels"), json(self.deformable_levels)),
            (k("affine_iters"), json(self.affine_iters)),
            (k("deformable_iters_per_level"), json(self.deformable_iters_per_level)),
            (k("affine_lr"), json(self.affine_lr)),
            (k("deformable_lr"), json(self.deformable_lr)),
            (k("stop_rel_tol"), json(self.stop_rel_tol)),
            (k("stop_patience"), json(self.stop_patience)),
            (k("affine_levels"), json(self.affine_levels)),
            (k("seed"), json(self.reg_seed)),
            (k("smoothness_reduction"), json(self.smoothness_reduction.clone())),
        ]
    }
}

fn borrowed(v: &[(String, Option<Value>)]) -> Vec<(&str, Option<Value>)> {
    v.iter().map(|(k, v)| (k.as_str(), v.clone())).collect()
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    out_field: PathBuf,
    #[arg(long)]
    out_warped: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    reg: RegistrationFlags,
}

fn register_cmd(a: RegisterArgs) -> Result<()> {
    let cfg: RegistrationConfig = load_config(a.config.as_deref(), borrowed(&a.reg.overrides("")))?;
    let fixed = load_image(&a.fixed)?;
    let moving = load_image(&a.moving)?;
    let r = register(&fixed, &moving, &cfg)?;
    write_df2d(&a.out_field, &r.final_field)?;
    if let Some(p) = &a.out_warped {
        save_png16(p, &r.warped_final)?;
    }
    let q = &r.quality;
    let header = ["ncc_before", "ncc_affine", "ncc_final", "njd_percent", "jacobian_std"];
    let values = [q.ncc_before, q.ncc_affine, q.ncc_final, q.njd_percent, q.jacobian_std].map(|v| format!("{v:.6}"));
    match &a.report {
        Some(p) => {
            let mut w = csv::Writer::from_path(p)?;
            w.write_record(header)?;
            w.write_record(&values)?;
            w.flush()?;
        }
        None => println!("{}\n{}", header.join(","), values.join(",")),
    }
    Ok(())
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long = "feat-lambda-jd", id = "feat_lambda_jd")]
    lambda_jd: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainFlags {
    fn overrides(&self, prefix: &str) -> Vec<(String, Option<Value>)> {
        let k = |name: &str| format!("{prefix}{name}");
        vec![
            (k("epochs"), json(self.epochs)),
            (k("batch_size"), json(self.batch_size)),
            (k("lr"), json(self.lr)),
            (k("alpha"), json(self.alpha)),
            (k("beta"), json(self.beta)),
            (k("lambda_jd"), json(self.lambda_jd)),
            (k("seed"), json(self.seed)),
        ]
    }
}

#[derive(Args)]
struct CohortSelection {
    /// Cohort directory (cohort.csv + pairs.csv).
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

fn split_items(items: Vec<CohortItem>, seed: u64) -> Result<BTreeMap<&'static str, Vec<CohortItem>>> {
    let ids: Vec<String> = items.iter().map(|i| i.pair.patient_id.clone()).collect();
    let parts = split_cohort(&ids, [5, 2, 3], seed)?;
    let mut out: BTreeMap<&'static str, Vec<CohortItem>> = BTreeMap::new();
    for it in items {
        let name = if parts.train.binary_search(&it.pair.patient_id).is_ok() {
            "train"
        } else if parts.val.binary_search(&it.pair.patient_id).is_ok() {
            "val"
        } else {
            "test"
        };
        out.entry(name).or_default().push(it);
    }
    Ok(out)
}

fn prepare_all(strategy: StrategyKind, model: &Model, items: &[CohortItem], reg: &RegistrationConfig) -> Result<Vec<PreparedPair>> {
    let enc = model.encoder();
    items
        .iter()
        .map(|it| {
            let r = if strategy.uses_registration() { Some(register(&it.pair.current, &it.pair.prior, reg)?) } else { None };
            Ok(prepare(strategy, &it.pair, &enc, r.as_ref())?)
        })
        .collect()
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cohort: CohortSelection,
    #[arg(long)]
    strategy: StrategyKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-epoch loss CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    reg: RegistrationFlags,
}

/// `train` config file: training keys at top level plus a `registration` object.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
#[serde(default)]
struct TrainFile {
    #[serde(flatten)]
    train: TrainConfig,
    registration: RegistrationConfig,
}

impl Default for TrainFile {
    fn default() -> Self {
        Self { train: TrainConfig::default(), registration: phantom_registration_config() }
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut over = a.train.overrides("");
    over.extend(a.reg.overrides("registration."));
    let cfg: TrainFile = load_config(a.config.as_deref(), borrowed(&over))?;
    let reg = cfg.registration.clone();
    let parts = split_items(load_cohort_dir(&a.cohort.cohort)?, a.cohort.split_seed)?;
    let model = Model::new(a.strategy, cfg.train.model, cfg.train.seed)?;
    let empty = Vec::new();
    let train = prepare_all(a.strategy, &model, parts.get("train").unwrap_or(&empty), &reg)?;
    let val = prepare_all(a.strategy, &model, parts.get("val").unwrap_or(&empty), &reg)?;
    let outcome = train_model(model, &train, Some(&val), &cfg.train)?;
    outcome.model.save(&a.out)?;
    if let Some(p) = a.curve {
        let mut w = csv::Writer::from_path(&p)?;
        w.write_record(["epoch", "train_loss", "val_loss"])?;
        for (e, l) in outcome.loss_curve.iter().enumerate() {
            let v = outcome.val_curve.get(e).map_or("NA".to_string(), |v| format!("{v:.6}"));
            w.write_record([(e + 1).to_string(), format!("{l:.6}"), v])?;
        }
        w.flush()?;
    }
    println!("trained {} for {} epochs, kept epoch {}", a.strategy, outcome.loss_curve.len(), outcome.best_epoch + 1);
    Ok(())
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    cohort: CohortSelection,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Which split to predict: train, val, test or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Registration config (JSON) for Img* strategies.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    reg: RegistrationFlags,
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let reg = load_config_over(phantom_registration_config(), a.config.as_deref(), borrowed(&a.reg.overrides("")))?;
    let model = Model::load(&a.model)?;
    let items = load_cohort_dir(&a.cohort.cohort)?;
    let items = if a.split == "all" {
        items
    } else {
        let mut parts = split_items(items, a.cohort.split_seed)?;
        match a.split.as_str() {
            "train" | "val" | "test" => parts.remove(a.split.as_str()).unwrap_or_default(),
            other => bail!("unknown split '{other}'"),
        }
    };
    let prepared = prepare_all(model.strategy, &model, &items, &reg)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    let mut header = vec!["patient_id".to_string(), "exam_id".into(), "strategy".into()];
    header.extend((1..=T_MAX).map(|t| format!("p{t}")));
    header.push("head".into());
    w.write_record(&header)?;
    for (it, p) in items.iter().zip(&prepared) {
        let pred = predict_prepared(&model, p)?;
        for (name, risk) in [("fused", &pred.fused), ("current", &pred.current), ("prior", &pred.prior)] {
            let mut row = vec![it.pair.patient_id.clone(), it.pair.exam_id.clone(), model.strategy.key().to_string()];
            row.extend(risk.prob.iter().map(|v| format!("{v:.6}")));
            row.push(name.to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    /// pairs.csv of the cohort.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "strategy", value_parser = ["density", "strategy", "horizon"])]
    group_by: String,
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value = "fused")]
    head: String,
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut rd = csv::Reader::from_path(&a.labels)?;
    let mut labels = BTreeMap::new();
    for row in rd.deserialize() {
        let p: PairRow = row?;
        let density = p.density.as_deref().map(str::parse).transpose()?;
        labels.insert(p.current_exam_id.to_string(), (SurvivalLabel::new(p.followup_years, p.years_to_cancer, T_MAX), density));
    }
    let mut rd = csv::Reader::from_path(&a.predictions)?;
    let headers = rd.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).with_context(|| format!("predictions lack column {name}"));
    let (c_exam, c_strategy, c_head) = (col("exam_id")?, col("strategy")?, col("head")?);
    let c_probs: Vec<usize> = (1..=T_MAX).map(|t| col(&format!("p{t}"))).collect::<Result<_>>()?;
    let mut records = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        if rec[c_head] != *a.head {
            continue;
        }
        let (label, density) = labels.get(&rec[c_exam]).with_context(|| format!("no label for exam {}", &rec[c_exam]))?.clone();
        let prob: Vec<f64> = c_probs.iter().map(|&c| rec[c].parse::<f64>()).collect::<std::result::Result<_, _>>()?;
        records.push(EvalRecord { risk: RiskOutput { cum_score: prob.clone(), prob }, label, density, strategy: rec[c_strategy].parse()? });
    }
    let key: GroupKey = a.group_by.parse()?;
    let mut metrics = vec![Metric::CIndex];
    metrics.extend((1..=T_MAX).map(Metric::Auc));
    metrics.extend((1..=T_MAX).flat_map(|t| [Metric::Precision { t, threshold: a.threshold }, Metric::Recall { t, threshold: a.threshold }]));
    let cfg = ReportConfig { resamples: a.resamples, seed: a.seed, ..ReportConfig::default() };
    let rows = stratified_report(&records, key, &metrics, &cfg);
    write_report_csv(&rows, fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?)?;
    Ok(())
}

#[derive(Args)]
struct DeformMetricsArgs {
    #[arg(long)]
    field: PathBuf,
    /// With --moving, reports NCC between fixed and the warped moving image.
    #[arg(long, requires = "moving")]
    fixed: Option<PathBuf>,
    #[arg(long, requires = "fixed")]
    moving: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn deform_metrics(a: DeformMetricsArgs) -> Result<()> {
    let field = read_df2d(&a.field)?;
    let j = jacobian_map(&field);
    let ncc_value = match (&a.fixed, &a.moving) {
        (Some(f), Some(m)) => {
            let fixed = load_image(f)?;
            let warped = warp_bilinear(&load_image(m)?, &field)?;
            format!("{:.6}", ncc(&fixed, &warped)?)
        }
        _ => "NA".into(),
    };
    let header = ["njd_percent", "jacobian_std", "smoothness", "jd_penalty", "ncc"];
    let row = [
        format!("{:.6}", njd_percent(&j)),
        format!("{:.6}", jacobian_std(&j)),
        format!("{:.6}", smoothness_energy(&field)),
        format!("{:.6}", jd_penalty(&j)),
        ncc_value,
    ];
    match a.out {
        Some(p) => {
            let mut w = csv::Writer::from_path(&p)?;
            w.write_record(header)?;
            w.write_record(&row)?;
            w.flush()?;
        }
        None => println!("{}\n{}", header.join(","), row.join(",")),
    }
    Ok(())
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Cohort directory instead of an in-memory phantom cohort.
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<StrategyKind>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    resamples: Option<usize>,
    #[arg(long)]
    bootstrap_seed: Option<u64>,
    #[arg(long)]
    n_exams: Option<usize>,
    #[arg(long)]
    cohort_seed: Option<u64>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    reg: RegistrationFlags,
}

fn run(a: RunArgs) -> Result<()> {
    let mut over: Vec<(String, Option<Value>)> = vec![
        ("strategies".into(), json(a.strategies.clone())),
        ("seeds".into(), json(a.seeds.clone())),
        ("split_seed".into(), json(a.split_seed)),
        ("resamples".into(), json(a.resamples)),
        ("bootstrap_seed".into(), json(a.bootstrap_seed)),
    ];
    over.extend(a.train.overrides("train."));
    over.extend(a.reg.overrides("registration."));
    let mut cfg: ExperimentConfig = load_config(a.config.as_deref(), borrowed(&over))?;
    if let Some(dir) = &a.cohort {
        cfg.cohort = CohortSource::Dir(dir.clone());
    }
    if let CohortSource::Phantom(c) = &mut cfg.cohort {
        c.n_exams = a.n_exams.unwrap_or(c.n_exams);
        c.seed = a.cohort_seed.unwrap_or(c.seed);
    }
    let bundle = run_experiment(&cfg, &a.out)?;
    for s in &bundle.strategies {
        let c = s.c_index.map_or("NA".to_string(), |m| format!("{:.4} [{:.4}, {:.4}]", m.point, m.ci_low, m.ci_high));
        println!("{:<14} c-index {c}", s.strategy.to_string());
    }
    println!("reports in {}", a.out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Phantom(a) => phantom(a),
        Command::Labels(a) => labels(a),
        Command::Split(a) => split(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Register(a) => register_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::DeformMetrics(a) => deform_metrics(a),
        Command::Run(a) => run(a),
    }
}
