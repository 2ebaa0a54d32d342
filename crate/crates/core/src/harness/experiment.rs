//! Cohort files and the end-to-end strategy comparison.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::labels::{read_exam_rows, split_cohort, write_exam_rows, ExamRow, Laterality, View};
use super::phantom::{foreground_mask, generate_cohort, phantom_registration_config, CohortConfig};
use crate::error::{Error, Result};
use crate::eval::{
    bootstrap_ci, stratified_report, threshold_sweep, EvalRecord, GroupKey, Metric, MetricWithCI, ReportConfig,
    ReportRow, DEFAULT_RESAMPLES,
};
use crate::grid::{DeformationField2D, Image2D};
use crate::io::{load_image, read_df2d, save_png16, write_df2d};
use crate::metrics::{jacobian_map, jacobian_std, njd_percent};
use crate::pipelines::{
    predict_prepared, prepare, train_model, Density, ExamPair, Model, PreparedPair, StrategyKind, TrainConfig,
};
use crate::registrar::{register, RegistrationConfig, RegistrationResult};
use crate::risk::{RiskOutput, SurvivalLabel, T_MAX};

/// Per-pair sidecar written next to `cohort.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub patient_id: u64,
    pub prior_exam_id: u64,
    pub current_exam_id: u64,
    pub gap_months: f64,
    pub followup_years: u32,
    pub years_to_cancer: Option<u32>,
    pub density: Option<String>,
    pub true_field: Option<PathBuf>,
}

/// An exam pair plus the ground-truth field when it is known.
#[derive(Debug, Clone)]
pub struct CohortItem {
    pub pair: ExamPair,
    pub true_field: Option<DeformationField2D>,
}

const PHANTOM_BASE_YEAR: i32 = 2012;

/// Writes PNGs, `cohort.csv`, `pairs.csv` and ground-truth DF2D fields.
pub fn write_phantom_cohort(cfg: &CohortConfig, dir: impl AsRef<Path>) -> Result<Vec<CohortItem>> {
    let dir = dir.as_ref();
    for sub in ["images", "fields"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let cases = generate_cohort(cfg)?;
    let mut rows = Vec::with_capacity(2 * cases.len());
    let mut pairs = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        let (pid, prior_id, cur_id) = (i as u64, 2 * i as u64, 2 * i as u64 + 1);
        let years = ((case.spec.gap_months / 12.0).round() as i32).max(1);
        let density = case.pair.density.map(|d| d.to_string());
        for (eid, year, img) in [(prior_id, PHANTOM_BASE_YEAR, &case.pair.prior), (cur_id, PHANTOM_BASE_YEAR + years, &case.pair.current)] {
            let rel = PathBuf::from("images").join(format!("{eid}.png"));
            save_png16(dir.join(&rel), img)?;
            rows.push(ExamRow {
                view: View::CC,
                laterality: Laterality::L,
                image_path: rel,
                density: density.clone(),
                ..ExamRow::new(pid, eid, year)
            });
        }
        let field_rel = PathBuf::from("fields").join(format!("{pid}.df2d"));
        write_df2d(dir.join(&field_rel), &case.true_field)?;
        pairs.push(PairRow {
            patient_id: pid,
            prior_exam_id: prior_id,
            current_exam_id: cur_id,
            gap_months: case.spec.gap_months,
            followup_years: case.spec.followup_years,
            years_to_cancer: case.pair.label.years_to_cancer,
            density,
            true_field: Some(field_rel),
        });
    }
    write_exam_rows(dir.join("cohort.csv"), &rows)?;
    let mut w = csv::Writer::from_path(dir.join("pairs.csv"))?;
    for p in &pairs {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(dir.join("pairs.csv"), e))?;
    Ok(cases.into_iter().map(|c| CohortItem { pair: c.pair, true_field: Some(c.true_field) }).collect())
}

/// Reads a cohort directory written by [`write_phantom_cohort`] (or laid out
/// the same way). Pairs come back sorted by patient and exam id.
pub fn load_cohort_dir(dir: impl AsRef<Path>) -> Result<Vec<CohortItem>> {
    let dir = dir.as_ref();
    let rows = read_exam_rows(dir.join("cohort.csv"))?;
    let by_exam: BTreeMap<u64, &ExamRow> = rows.iter().map(|r| (r.exam_id, r)).collect();
    let mut rd = csv::Reader::from_path(dir.join("pairs.csv"))?;
    let mut pairs: Vec<PairRow> = rd.deserialize().collect::<std::result::Result<_, _>>()?;
    pairs.sort_by_key(|p| (p.patient_id, p.current_exam_id, p.prior_exam_id));
    pairs
        .par_iter()
        .map(|p| {
            let image = |eid: u64| -> Result<Image2D> {
                let row = by_exam.get(&eid).ok_or_else(|| Error::LabelData(format!("pair references unknown exam {eid}")))?;
                load_image(dir.join(&row.image_path))
            };
            let density = p.density.as_deref().map(str::parse::<Density>).transpose()?;
            let pair = ExamPair {
                patient_id: p.patient_id.to_string(),
                exam_id: p.current_exam_id.to_string(),
                current: image(p.current_exam_id)?,
                prior: image(p.prior_exam_id)?,
                gap_months: p.gap_months,
                label: SurvivalLabel::new(p.followup_years, p.years_to_cancer, T_MAX),
                density,
            };
            pair.validate()?;
            let true_field = p.true_field.as_ref().map(|f| read_df2d(dir.join(f))).transpose()?;
            Ok(CohortItem { pair, true_field })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CohortSource {
    Phantom(CohortConfig),
    Dir(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub cohort: CohortSource,
    pub strategies: Vec<StrategyKind>,
    /// One model per seed; predictions are averaged over seeds.
    pub seeds: Vec<u64>,
    pub split_seed: u64,
    pub split_ratios: [u32; 3],
    pub train: TrainConfig,
    pub registration: RegistrationConfig,
    pub resamples: usize,
    pub bootstrap_seed: u64,
    pub threshold: f64,
    pub min_group_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cohort: CohortSource::Phantom(CohortConfig::default()),
            strategies: StrategyKind::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            split_seed: 0,
            split_ratios: [5, 2, 3],
            train: TrainConfig { epochs: 60, ..TrainConfig::default() },
            registration: phantom_registration_config(),
            resamples: DEFAULT_RESAMPLES,
            bootstrap_seed: 0,
            threshold: 0.5,
            min_group_size: 10,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("experiment needs at least one strategy and one seed"));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegistrationRow {
    pub patient_id: String,
    pub exam_id: String,
    pub split: String,
    pub ncc_before: f64,
    pub ncc_affine: f64,
    pub ncc_final: f64,
    pub njd_percent: f64,
    pub jacobian_std: f64,
    pub epe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyResult {
    pub strategy: StrategyKind,
    pub n_test: usize,
    pub c_index: Option<MetricWithCI>,
    pub auc: Vec<Option<MetricWithCI>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeformationRow {
    pub method: StrategyKind,
    pub njd_percent: f64,
    pub jacobian_std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub strategies: Vec<StrategyResult>,
    pub deformation: Vec<DeformationRow>,
    pub registration: Vec<RegistrationRow>,
    pub files: Vec<PathBuf>,
}

impl ReportBundle {
    pub fn c_index(&self, strategy: StrategyKind) -> Option<f64> {
        self.strategies.iter().find(|s| s.strategy == strategy).and_then(|s| s.c_index.map(|m| m.point))
    }

    pub fn deformation(&self, strategy: StrategyKind) -> Option<&DeformationRow> {
        self.deformation.iter().find(|d| d.method == strategy)
    }
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

fn opt6(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), f6)
}

fn mean_risk(outputs: &[&RiskOutput]) -> RiskOutput {
    let k = outputs.len() as f64;
    let avg = |f: fn(&RiskOutput) -> &Vec<f64>| -> Vec<f64> {
        (0..f(outputs[0]).len()).map(|t| outputs.iter().map(|o| f(o)[t]).sum::<f64>() / k).collect()
    };
    RiskOutput { cum_score: avg(|o| &o.cum_score), prob: avg(|o| &o.prob) }
}

struct Writer {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Writer {
    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        self.files.push(path);
        Ok(())
    }
}

fn load_source(source: &CohortSource) -> Result<Vec<CohortItem>> {
    match source {
        CohortSource::Phantom(cfg) => Ok(generate_cohort(cfg)?
            .into_iter()
            .map(|c| CohortItem { pair: c.pair, true_field: Some(c.true_field) })
            .collect()),
        CohortSource::Dir(dir) => load_cohort_dir(dir),
    }
}

fn numeric_then_text(id: &str) -> (u64, String) {
    (id.parse().unwrap_or(u64::MAX), id.to_string())
}

/// Registers, trains, predicts and evaluates every configured strategy and
/// writes the CSV report bundle into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: impl AsRef<Path>) -> Result<ReportBundle> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut items = load_source(&cfg.cohort).map_err(|e| e.in_stage("cohort"))?;
    items.sort_by(|a, b| {
        (numeric_then_text(&a.pair.patient_id), numeric_then_text(&a.pair.exam_id))
            .cmp(&(numeric_then_text(&b.pair.patient_id), numeric_then_text(&b.pair.exam_id)))
    });
    let patients: Vec<String> = items.iter().map(|i| i.pair.patient_id.clone()).collect();
    let split = split_cohort(&patients, cfg.split_ratios, cfg.split_seed).map_err(|e| e.in_stage("split"))?;
    let part_of = |pid: &String| {
        if split.train.binary_search(pid).is_ok() {
            "train"
        } else if split.val.binary_search(pid).is_ok() {
            "val"
        } else {
            "test"
        }
    };
    let parts: Vec<&str> = items.iter().map(|i| part_of(&i.pair.patient_id)).collect();
    let idx = |name: &str| -> Vec<usize> { (0..items.len()).filter(|&i| parts[i] == name).collect() };
    let (train_idx, val_idx, test_idx) = (idx("train"), idx("val"), idx("test"));
    info!("cohort: {} pairs, split {}/{}/{}", items.len(), train_idx.len(), val_idx.len(), test_idx.len());

    let mut out = Writer { dir: out_dir.to_path_buf(), files: Vec::new() };
    let config_path = out_dir.join("config.json");
    fs::write(&config_path, serde_json::to_string_pretty(cfg)? + "\n").map_err(|e| Error::io(&config_path, e))?;
    out.files.push(config_path);

    let registrations: Option<Vec<RegistrationResult>> = if cfg.strategies.iter().any(|s| s.uses_registration()) {
        info!("registering {} pairs", items.len());
        let regs: Result<Vec<_>> = items
            .par_iter()
            .map(|it| register(&it.pair.current, &it.pair.prior, &cfg.registration))
            .collect();
        Some(regs.map_err(|e| e.in_stage("registration"))?)
    } else {
        None
    };
    let mut reg_rows = Vec::new();
    if let Some(regs) = &registrations {
        for ((it, r), part) in items.iter().zip(regs).zip(&parts) {
            let epe = match &it.true_field {
                Some(t) => Some(r.final_field.mean_endpoint_error(t, Some(&foreground_mask(&it.pair.current)))?),
                None => None,
            };
            let q = &r.quality;
            reg_rows.push(RegistrationRow {
                patient_id: it.pair.patient_id.clone(),
                exam_id: it.pair.exam_id.clone(),
                split: part.to_string(),
                ncc_before: q.ncc_before,
                ncc_affine: q.ncc_affine,
                ncc_final: q.ncc_final,
                njd_percent: q.njd_percent,
                jacobian_std: q.jacobian_std,
                epe,
            });
        }
        out.csv(
            "registration.csv",
            &["patient_id", "exam_id", "split", "ncc_before", "ncc_affine", "ncc_final", "njd_percent", "jacobian_std", "epe"],
            reg_rows.iter().map(|r| {
                vec![
                    r.patient_id.clone(),
                    r.exam_id.clone(),
                    r.split.clone(),
                    f6(r.ncc_before),
                    f6(r.ncc_affine),
                    f6(r.ncc_final),
                    f6(r.njd_percent),
                    f6(r.jacobian_std),
                    opt6(r.epe),
                ]
            }),
        )?;
    }

    let mut results = Vec::new();
    let mut deformation = Vec::new();
    let mut prediction_rows = Vec::new();
    let mut curve_rows = Vec::new();
    let mut all_records = Vec::new();
    for &strategy in &cfg.strategies {
        let stage = format!("strategy {strategy}");
        let encoder = Model::new(strategy, cfg.train.model, 0)?.encoder();
        let prepared: Result<Vec<PreparedPair>> = items
            .par_iter()
            .enumerate()
            .map(|(i, it)| prepare(strategy, &it.pair, &encoder, registrations.as_ref().map(|r| &r[i])))
            .collect();
        let prepared = prepared.map_err(|e| e.in_stage(&stage))?;
        let pick = |ix: &[usize]| ix.iter().map(|&i| prepared[i].clone()).collect::<Vec<_>>();
        let (train_set, val_set) = (pick(&train_idx), pick(&val_idx));
        let mut per_seed = Vec::new();
        let mut field_stats = Vec::new();
        for &seed in &cfg.seeds {
            info!("{strategy}: training seed {seed}");
            let hyper = TrainConfig { seed, ..cfg.train };
            let model = Model::new(strategy, hyper.model, seed)?;
            let outcome = train_model(model, &train_set, Some(&val_set), &hyper).map_err(|e| e.in_stage(&stage))?;
            for (e, tl) in outcome.loss_curve.iter().enumerate() {
                curve_rows.push(vec![
                    strategy.key().to_string(),
                    seed.to_string(),
                    (e + 1).to_string(),
                    f6(*tl),
                    opt6(outcome.val_curve.get(e).copied()),
                    (e == outcome.best_epoch).to_string(),
                ]);
            }
            let preds: Result<Vec<_>> = test_idx.par_iter().map(|&i| predict_prepared(&outcome.model, &prepared[i])).collect();
            let preds = preds.map_err(|e| e.in_stage(&stage))?;
            if strategy.learns_alignment() {
                for p in &preds {
                    if let Some(f) = &p.feature_field {
                        let j = jacobian_map(f);
                        field_stats.push((njd_percent(&j), jacobian_std(&j)));
                    }
                }
            }
            per_seed.push(preds);
        }
        if strategy.uses_registration() {
            for (k, &i) in test_idx.iter().enumerate() {
                let field = match strategy {
                    StrategyKind::ImgAlign => registrations.as_ref().map(|r| r[i].final_field.clone()),
                    _ => per_seed[0][k].feature_field.clone(),
                };
                if let Some(f) = field {
                    let j = jacobian_map(&f);
                    field_stats.push((njd_percent(&j), jacobian_std(&j)));
                }
            }
        }
        if !field_stats.is_empty() {
            let n = field_stats.len() as f64;
            deformation.push(DeformationRow {
                method: strategy,
                njd_percent: field_stats.iter().map(|s| s.0).sum::<f64>() / n,
                jacobian_std: field_stats.iter().map(|s| s.1).sum::<f64>() / n,
                n: field_stats.len(),
            });
        }

        let mut records = Vec::with_capacity(test_idx.len());
        for (k, &i) in test_idx.iter().enumerate() {
            let pair = &items[i].pair;
            let heads = [
                ("fused", mean_risk(&per_seed.iter().map(|p| &p[k].fused).collect::<Vec<_>>())),
                ("current", mean_risk(&per_seed.iter().map(|p| &p[k].current).collect::<Vec<_>>())),
                ("prior", mean_risk(&per_seed.iter().map(|p| &p[k].prior).collect::<Vec<_>>())),
            ];
            for (name, risk) in &heads {
                let mut row = vec![pair.patient_id.clone(), pair.exam_id.clone(), strategy.key().to_string()];
                row.extend(risk.prob.iter().map(|&p| f6(p)));
                row.push(name.to_string());
                prediction_rows.push(row);
            }
            records.push(EvalRecord { risk: heads[0].1.clone(), label: pair.label.clone(), density: pair.density, strategy });
        }
        let ci = |m: Metric| bootstrap_ci(&records, m, cfg.resamples, cfg.bootstrap_seed).ok();
        results.push(StrategyResult {
            strategy,
            n_test: records.len(),
            c_index: ci(Metric::CIndex),
            auc: (1..=T_MAX).map(|t| ci(Metric::Auc(t))).collect(),
        });
        all_records.extend(records);
    }

    let mut header: Vec<String> = ["strategy", "n", "c_index", "c_index_low", "c_index_high"].map(String::from).to_vec();
    for t in 1..=T_MAX {
        header.extend([format!("auc_{t}y"), format!("auc_{t}y_low"), format!("auc_{t}y_high")]);
    }
    let cells = |m: &Option<MetricWithCI>| match m {
        Some(m) => vec![f6(m.point), f6(m.ci_low), f6(m.ci_high)],
        None => vec!["NA".into(); 3],
    };
    out.csv(
        "table2.csv",
        &header.iter().map(String::as_str).collect::<Vec<_>>(),
        results.iter().map(|r| {
            let mut row = vec![r.strategy.key().to_string(), r.n_test.to_string()];
            row.extend(cells(&r.c_index));
            r.auc.iter().for_each(|a| row.extend(cells(a)));
            row
        }),
    )?;
    out.csv(
        "table4.csv",
        &["method", "njd_percent", "jacobian_std", "n"],
        deformation.iter().map(|d| vec![d.method.key().to_string(), f6(d.njd_percent), f6(d.jacobian_std), d.n.to_string()]),
    )?;
    let mut pred_header = vec!["patient_id", "exam_id", "strategy"];
    let pcols: Vec<String> = (1..=T_MAX).map(|t| format!("p{t}")).collect();
    pred_header.extend(pcols.iter().map(String::as_str));
    pred_header.push("head");
    out.csv("predictions.csv", &pred_header, prediction_rows)?;
    out.csv("training.csv", &["strategy", "seed", "epoch", "train_loss", "val_loss", "selected"], curve_rows)?;

    let report_cfg = ReportConfig {
        resamples: cfg.resamples,
        seed: cfg.bootstrap_seed,
        min_group_size: cfg.min_group_size,
        groups: Vec::new(),
    };
    let mut density_rows: Vec<(StrategyKind, ReportRow)> = Vec::new();
    let mut sweep_rows = Vec::new();
    let mut thresholds: Vec<f64> = (1..20).map(|k| k as f64 / 20.0).collect();
    thresholds.push(cfg.threshold);
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    for &strategy in &cfg.strategies {
        let recs: Vec<EvalRecord> = all_records.iter().filter(|r| r.strategy == strategy).cloned().collect();
        for row in stratified_report(&recs, GroupKey::Density, &[Metric::CIndex], &report_cfg) {
            density_rows.push((strategy, row));
        }
        for t in 1..=T_MAX {
            if let Ok(sweep) = threshold_sweep(&recs, t, &thresholds) {
                for (th, pr) in sweep {
                    sweep_rows.push(vec![strategy.key().to_string(), t.to_string(), format!("{th:.3}"), opt6(pr.precision), opt6(pr.recall)]);
                }
            }
        }
    }
    out.csv(
        "density.csv",
        &["strategy", "metric", "group", "point", "ci_low", "ci_high", "n", "note"],
        density_rows.iter().map(|(s, r)| {
            vec![s.key().to_string(), r.metric.clone(), r.group.clone(), opt6(r.point), opt6(r.ci_low), opt6(r.ci_high), r.n.to_string(), r.note.clone()]
        }),
    )?;
    out.csv("precision_recall.csv", &["strategy", "year", "threshold", "precision", "recall"], sweep_rows)?;

    Ok(ReportBundle { strategies: results, deformation, registration: reg_rows, files: out.files })
}
