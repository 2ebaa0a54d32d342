//! Exam tables, the two datasets' outcome rules and patient-level splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    CC,
    MLO,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Laterality {
    L,
    R,
}

/// One row of a cohort table.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExamRow {
    pub patient_id: u64,
    pub exam_id: u64,
    pub exam_year: i32,
    pub view: View,
    pub laterality: Laterality,
    pub image_path: PathBuf,
    pub birads: Option<u8>,
    pub severity: Option<u8>,
    pub rad_timing: Option<u8>,
    pub density: Option<String>,
}

impl ExamRow {
    pub fn new(patient_id: u64, exam_id: u64, exam_year: i32) -> Self {
        Self {
            patient_id,
            exam_id,
            exam_year,
            view: View::CC,
            laterality: Laterality::L,
            image_path: PathBuf::new(),
            birads: None,
            severity: None,
            rad_timing: None,
            density: None,
        }
    }

    fn has_embed_fields(&self) -> bool {
        self.birads.is_some() || self.severity.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelScheme {
    Embed,
    Csaw,
}

impl FromStr for LabelScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "embed" => Ok(LabelScheme::Embed),
            "csaw" | "csaw-cc" => Ok(LabelScheme::Csaw),
            other => Err(Error::config(format!("unknown label scheme '{other}'"))),
        }
    }
}

impl fmt::Display for LabelScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelScheme::Embed => "embed",
            LabelScheme::Csaw => "csaw",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamLabel {
    pub patient_id: u64,
    pub exam_id: u64,
    pub exam_year: i32,
    pub years_to_cancer: Option<u32>,
    pub is_negative: bool,
    /// Years from this exam to the patient's last exam.
    pub followup_years: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub patient_id: u64,
    pub exam_id: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelOutcome {
    pub labels: Vec<ExamLabel>,
    pub excluded: Vec<Exclusion>,
}

pub fn read_exam_rows(path: impl AsRef<Path>) -> Result<Vec<ExamRow>> {
    let path = path.as_ref();
    let mut rd = csv::Reader::from_path(path)?;
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_exam_rows(path: impl AsRef<Path>, rows: &[ExamRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

pub fn write_labels(path: impl AsRef<Path>, outcome: &LabelOutcome) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for l in &outcome.labels {
        w.serialize(l)?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

/// Rows grouped by exam, patients and exams in id order.
fn exams_by_patient(rows: &[ExamRow]) -> Result<BTreeMap<u64, BTreeMap<u64, Vec<&ExamRow>>>> {
    let mut out: BTreeMap<u64, BTreeMap<u64, Vec<&ExamRow>>> = BTreeMap::new();
    let mut owner: BTreeMap<u64, (u64, i32)> = BTreeMap::new();
    for r in rows {
        match owner.insert(r.exam_id, (r.patient_id, r.exam_year)) {
            Some(prev) if prev != (r.patient_id, r.exam_year) => {
                return Err(Error::LabelData(format!("exam {} has inconsistent patient or year", r.exam_id)));
            }
            _ => {}
        }
        out.entry(r.patient_id).or_default().entry(r.exam_id).or_default().push(r);
    }
    Ok(out)
}

fn followup(last_year: i32, exam_year: i32) -> u32 {
    (last_year - exam_year).max(0) as u32
}

fn embed_positive(r: &ExamRow) -> bool {
    r.birads == Some(6) || matches!(r.severity, Some(0) | Some(1))
}

/// BI-RADS 0 followed, for the same breast, by a BI-RADS 1 or 2 exam at most
/// one year later.
fn reclassified_benign(r: &ExamRow, patient_rows: &[&ExamRow]) -> bool {
    if r.birads != Some(0) {
        return false;
    }
    patient_rows
        .iter()
        .filter(|o| {
            o.exam_id != r.exam_id
                && o.laterality == r.laterality
                && o.exam_year >= r.exam_year
                && o.exam_year - r.exam_year <= 1
                && o.birads.is_some()
        })
        .min_by_key(|o| (o.exam_year, o.exam_id))
        .is_some_and(|o| matches!(o.birads, Some(1) | Some(2)))
}

fn embed_negative(r: &ExamRow, patient_rows: &[&ExamRow]) -> bool {
    matches!(r.birads, Some(1) | Some(2)) || reclassified_benign(r, patient_rows)
}

/// EMBED rule: BI-RADS 6 or severity 0/1 marks a positive exam, the latest
/// positive year is the cancer year and every earlier exam of that patient
/// gets the gap as its time to cancer.
pub fn embed_labels(rows: &[ExamRow]) -> Result<LabelOutcome> {
    if let Some(r) = rows.iter().find(|r| r.rad_timing.is_some()) {
        return Err(Error::LabelData(format!("exam {} carries CSAW timing in an EMBED cohort", r.exam_id)));
    }
    let mut out = LabelOutcome::default();
    for (&pid, exams) in &exams_by_patient(rows)? {
        let all: Vec<&ExamRow> = exams.values().flatten().copied().collect();
        let last_year = all.iter().map(|r| r.exam_year).max().unwrap_or(0);
        let mut positive_years = Vec::new();
        let mut exam_state = Vec::new();
        for (&eid, ex) in exams {
            let pos = ex.iter().any(|r| embed_positive(r));
            let neg = ex.iter().any(|r| embed_negative(r, &all));
            if pos && neg {
                return Err(Error::LabelData(format!("exam {eid} is both positive and negative")));
            }
            if pos {
                positive_years.push(ex[0].exam_year);
            }
            exam_state.push((eid, ex[0].exam_year, neg));
        }
        let cancer_year = positive_years.into_iter().max();
        for (eid, year, neg) in exam_state {
            let exclude = |reason: &str| Exclusion { patient_id: pid, exam_id: eid, reason: reason.into() };
            match cancer_year {
                Some(cy) if year <= cy => out.labels.push(ExamLabel {
                    patient_id: pid,
                    exam_id: eid,
                    exam_year: year,
                    years_to_cancer: Some((cy - year) as u32),
                    is_negative: false,
                    followup_years: followup(last_year, year),
                }),
                Some(_) => out.excluded.push(exclude("after diagnosis")),
                None if neg => out.labels.push(ExamLabel {
                    patient_id: pid,
                    exam_id: eid,
                    exam_year: year,
                    years_to_cancer: None,
                    is_negative: true,
                    followup_years: followup(last_year, year),
                }),
                None => out.excluded.push(exclude("neither positive nor negative")),
            }
        }
    }
    Ok(out)
}

/// CSAW-CC rule: screen-detected cancers date to the latest exam, interval
/// cancers to the year after it, capped at `final_study_year`.
pub fn csaw_labels(rows: &[ExamRow], final_study_year: i32) -> Result<LabelOutcome> {
    if let Some(r) = rows.iter().find(|r| r.has_embed_fields()) {
        return Err(Error::LabelData(format!("exam {} carries EMBED fields in a CSAW cohort", r.exam_id)));
    }
    let mut out = LabelOutcome::default();
    for (&pid, exams) in &exams_by_patient(rows)? {
        let all: Vec<&ExamRow> = exams.values().flatten().copied().collect();
        let mut timings = BTreeSet::new();
        for r in &all {
            match r.rad_timing {
                None => {}
                Some(t @ (1 | 2)) => {
                    timings.insert(t);
                }
                Some(t) => return Err(Error::LabelData(format!("exam {}: unknown rad_timing {t}", r.exam_id))),
            }
        }
        if timings.len() > 1 {
            return Err(Error::LabelData(format!("patient {pid} has both screen-detected and interval timing")));
        }
        let last_year = all.iter().map(|r| r.exam_year).max().unwrap_or(0);
        let cancer_year = timings.first().map(|&t| if t == 1 { last_year } else { (last_year + 1).min(final_study_year.max(last_year)) });
        for (&eid, ex) in exams {
            let year = ex[0].exam_year;
            out.labels.push(ExamLabel {
                patient_id: pid,
                exam_id: eid,
                exam_year: year,
                years_to_cancer: cancer_year.map(|cy| (cy - year) as u32),
                is_negative: cancer_year.is_none(),
                followup_years: followup(last_year, year),
            });
        }
    }
    Ok(out)
}

pub fn apply_scheme(rows: &[ExamRow], scheme: LabelScheme, final_study_year: i32) -> Result<LabelOutcome> {
    match scheme {
        LabelScheme::Embed => embed_labels(rows),
        LabelScheme::Csaw => csaw_labels(rows, final_study_year),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Sizes proportional to `ratios` with largest-remainder rounding; ties go
/// to the earlier part.
pub fn split_sizes(n: usize, ratios: [u32; 3]) -> Result<[usize; 3]> {
    let total: u64 = ratios.iter().map(|&r| r as u64).sum();
    if total == 0 {
        return Err(Error::config("split ratios must not all be zero"));
    }
    let exact: Vec<(u64, u64)> = ratios.iter().map(|&r| ((n as u64 * r as u64) / total, (n as u64 * r as u64) % total)).collect();
    let mut sizes = [exact[0].0 as usize, exact[1].0 as usize, exact[2].0 as usize];
    let mut order = [0usize, 1, 2];
    order.sort_by_key(|&i| std::cmp::Reverse(exact[i].1));
    let missing = n - sizes.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

/// Patient-level split. Ids are sorted and deduplicated first, so the
/// result does not depend on input order.
pub fn split_cohort<T: Ord + Clone>(patients: &[T], ratios: [u32; 3], seed: u64) -> Result<Split<T>> {
    let mut ids: Vec<T> = patients.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < 10 {
        return Err(Error::config(format!("split needs at least 10 patients, got {}", ids.len())));
    }
    let [a, b, _] = split_sizes(ids.len(), ratios)?;
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = ids.split_off(a + b);
    let val = ids.split_off(a);
    let mut parts = Split { train: ids, val, test };
    parts.train.sort();
    parts.val.sort();
    parts.test.sort();
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(pid: u64, eid: u64, year: i32) -> ExamRow {
        ExamRow::new(pid, eid, year)
    }

    #[test]
    fn largest_remainder_sizes() {
        assert_eq!(split_sizes(10, [5, 2, 3]).unwrap(), [5, 2, 3]);
        // quotas 11.5 / 4.6 / 6.9
        assert_eq!(split_sizes(23, [5, 2, 3]).unwrap(), [11, 5, 7]);
    }

    #[test]
    fn split_is_order_invariant() {
        let ids: Vec<u64> = (0..37).collect();
        let mut rev = ids.clone();
        rev.reverse();
        assert_eq!(split_cohort(&ids, [5, 2, 3], 4).unwrap(), split_cohort(&rev, [5, 2, 3], 4).unwrap());
    }

    #[test]
    fn contradictory_exam_is_rejected() {
        let mut r = row(1, 1, 2015);
        r.birads = Some(2);
        r.severity = Some(0);
        assert!(matches!(embed_labels(&[r]), Err(Error::LabelData(_))));
    }

    #[test]
    fn unknown_timing_is_rejected() {
        let mut r = row(1, 1, 2015);
        r.rad_timing = Some(3);
        assert!(matches!(csaw_labels(&[r], 2016), Err(Error::LabelData(_))));
    }
}
