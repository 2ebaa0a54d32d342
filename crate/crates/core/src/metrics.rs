//! Similarity and deformation-quality measures, plus the analytic gradients
//! the optimizers need.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ensure_same_shape, DeformationField2D, Image2D};

/// Per-pixel Jacobian determinant of the full map `p ↦ p + φ(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMap {
    pub height: usize,
    pub width: usize,
    pub det: Vec<f64>,
}

impl JacobianMap {
    /// Builds a map from raw determinant values (used by tests and fixtures).
    pub fn from_det(height: usize, width: usize, det: Vec<f64>) -> Result<Self> {
        if det.len() != height * width {
            return Err(Error::dim(format!(
                "jacobian map has {} values for a {height}x{width} grid",
                det.len()
            )));
        }
        Ok(Self { height, width, det })
    }
}

/// Registration quality summary in the before/affine/final layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformQualityReport {
    pub njd_percent: f64,
    pub jacobian_std: f64,
    pub ncc_before: f64,
    pub ncc_affine: f64,
    pub ncc_final: f64,
}

/// How the smoothness energy reduces over pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

fn centered_sums(a: &[f64], b: &[f64], mask: Option<&[bool]>) -> (f64, f64, f64, f64, f64) {
    let keep = |i: usize| mask.map_or(true, |m| m[i]);
    let mut n = 0.0;
    let (mut sa, mut sb) = (0.0, 0.0);
    for i in 0..a.len() {
        if keep(i) {
            sa += a[i];
            sb += b[i];
            n += 1.0;
        }
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        if keep(i) {
            let da = a[i] - ma;
            let db = b[i] - mb;
            sab += da * db;
            saa += da * da;
            sbb += db * db;
        }
    }
    (ma, mb, sab, saa, sbb)
}

fn is_constant(a: &[f64], mask: Option<&[bool]>) -> bool {
    let mut first = None;
    for (i, &v) in a.iter().enumerate() {
        if mask.map_or(true, |m| m[i]) {
            match first {
                None => first = Some(v),
                Some(f) if f != v => return false,
                _ => {}
            }
        }
    }
    true
}

fn ncc_slices(a: &[f64], b: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    if let Some(m) = mask {
        if m.len() != a.len() {
            return Err(Error::dim("ncc mask length differs from image size".to_string()));
        }
        if !m.iter().any(|&k| k) {
            return Err(Error::dim("ncc mask selects no pixels".to_string()));
        }
    }
    let (_, _, sab, mut saa, mut sbb) = centered_sums(a, b, mask);
    if is_constant(a, mask) {
        saa = 0.0;
    }
    if is_constant(b, mask) {
        sbb = 0.0;
    }
    if saa == 0.0 && sbb == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Global normalized cross-correlation over all pixels.
///
/// When exactly one image is constant the correlation is reported as 0.
pub fn ncc(a: &Image2D, b: &Image2D) -> Result<f64> {
    ensure_same_shape(a.shape(), b.shape(), "ncc")?;
    ncc_slices(a.data(), b.data(), None)
}

/// NCC restricted to pixels where `mask` is true.
pub fn ncc_masked(a: &Image2D, b: &Image2D, mask: &[bool]) -> Result<f64> {
    ensure_same_shape(a.shape(), b.shape(), "ncc")?;
    ncc_slices(a.data(), b.data(), Some(mask))
}

/// NCC of `fixed` against `moving` and its gradient with respect to each
/// `moving` value.
pub fn ncc_with_grad(fixed: &[f64], moving: &[f64]) -> Result<(f64, Vec<f64>)> {
    if fixed.len() != moving.len() {
        return Err(Error::dim("ncc inputs differ in length".to_string()));
    }
    let (ma, mb, sab, mut saa, mut sbb) = centered_sums(fixed, moving, None);
    if is_constant(fixed, None) {
        saa = 0.0;
    }
    if is_constant(moving, None) {
        sbb = 0.0;
    }
    if saa == 0.0 && sbb == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok((0.0, vec![0.0; fixed.len()]));
    }
    let denom = (saa * sbb).sqrt();
    let value = sab / denom;
    let grad = fixed
        .iter()
        .zip(moving)
        .map(|(&a, &b)| (a - ma) / denom - value * (b - mb) / sbb)
        .collect();
    Ok((value, grad))
}

/// Forward differences with the last row/column replicated.
struct Gradients {
    ux: Vec<f64>,
    uy: Vec<f64>,
    vx: Vec<f64>,
    vy: Vec<f64>,
}

fn diff_x(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    if w < 2 {
        return out;
    }
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w - 1 {
            out[y * w + x] = row[x + 1] - row[x];
        }
        out[y * w + w - 1] = out[y * w + w - 2];
    }
    out
}

fn diff_y(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    if h < 2 {
        return out;
    }
    for y in 0..h - 1 {
        for x in 0..w {
            out[y * w + x] = plane[(y + 1) * w + x] - plane[y * w + x];
        }
    }
    for x in 0..w {
        out[(h - 1) * w + x] = out[(h - 2) * w + x];
    }
    out
}

/// Adjoint of [`diff_x`]: accumulates `g` (per-pixel gradient wrt the
/// difference) into `acc` (gradient wrt the plane).
fn diff_x_adjoint(g: &[f64], h: usize, w: usize, acc: &mut [f64]) {
    for y in 0..h {
        let r = y * w;
        for x in 0..w.saturating_sub(1) {
            let mut gx = g[r + x];
            if x == w - 2 {
                gx += g[r + w - 1];
            }
            acc[r + x + 1] += gx;
            acc[r + x] -= gx;
        }
    }
}

fn diff_y_adjoint(g: &[f64], h: usize, w: usize, acc: &mut [f64]) {
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            let mut gy = g[y * w + x];
            if y == h - 2 {
                gy += g[(h - 1) * w + x];
            }
            acc[(y + 1) * w + x] += gy;
            acc[y * w + x] -= gy;
        }
    }
}

fn gradients(u: &[f64], v: &[f64], h: usize, w: usize) -> Gradients {
    Gradients { ux: diff_x(u, h, w), uy: diff_y(u, h, w), vx: diff_x(v, h, w), vy: diff_y(v, h, w) }
}

pub(crate) fn jacobian_det_planes(u: &[f64], v: &[f64], h: usize, w: usize) -> Vec<f64> {
    let g = gradients(u, v, h, w);
    (0..h * w).map(|i| (1.0 + g.ux[i]) * (1.0 + g.vy[i]) - g.uy[i] * g.vx[i]).collect()
}

/// `det(I + ∇φ)` at every pixel.
pub fn jacobian_map(field: &DeformationField2D) -> JacobianMap {
    let (h, w) = field.shape();
    JacobianMap { height: h, width: w, det: jacobian_det_planes(field.u(), field.v(), h, w) }
}

/// Percentage of pixels whose determinant is ≤ 0.
pub fn njd_percent(jmap: &JacobianMap) -> f64 {
    let folded = jmap.det.iter().filter(|&&d| d <= 0.0).count();
    100.0 * folded as f64 / jmap.det.len() as f64
}

/// Population standard deviation of the determinant.
pub fn jacobian_std(jmap: &JacobianMap) -> f64 {
    let n = jmap.det.len() as f64;
    let mean = jmap.det.iter().sum::<f64>() / n;
    let var = jmap.det.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    var.sqrt()
}

/// Mean negative-determinant hinge, `mean(max(0, −det))`.
pub fn jd_penalty(jmap: &JacobianMap) -> f64 {
    jmap.det.iter().map(|&d| (-d).max(0.0)).sum::<f64>() / jmap.det.len() as f64
}

pub(crate) fn smoothness_planes(u: &[f64], v: &[f64], h: usize, w: usize, reduction: Reduction) -> f64 {
    let g = gradients(u, v, h, w);
    let total: f64 = (0..h * w)
        .map(|i| g.ux[i] * g.ux[i] + g.uy[i] * g.uy[i] + g.vx[i] * g.vx[i] + g.vy[i] * g.vy[i])
        .sum();
    match reduction {
        Reduction::Mean => total / (h * w) as f64,
        Reduction::Sum => total,
    }
}

/// Mean squared forward-difference gradient, `mean(‖∇u‖² + ‖∇v‖²)`.
pub fn smoothness_energy(field: &DeformationField2D) -> f64 {
    smoothness_energy_with(field, Reduction::Mean)
}

pub fn smoothness_energy_with(field: &DeformationField2D, reduction: Reduction) -> f64 {
    let (h, w) = field.shape();
    smoothness_planes(field.u(), field.v(), h, w, reduction)
}

/// Gradient of the smoothness energy with respect to the `u` and `v` planes,
/// accumulated into `gu`/`gv` with weight `scale`.
pub(crate) fn smoothness_grad_planes(
    u: &[f64],
    v: &[f64],
    h: usize,
    w: usize,
    reduction: Reduction,
    scale: f64,
    gu: &mut [f64],
    gv: &mut [f64],
) {
    let g = gradients(u, v, h, w);
    let k = match reduction {
        Reduction::Mean => 2.0 * scale / (h * w) as f64,
        Reduction::Sum => 2.0 * scale,
    };
    let sc = |d: &[f64]| d.iter().map(|x| x * k).collect::<Vec<_>>();
    diff_x_adjoint(&sc(&g.ux), h, w, gu);
    diff_y_adjoint(&sc(&g.uy), h, w, gu);
    diff_x_adjoint(&sc(&g.vx), h, w, gv);
    diff_y_adjoint(&sc(&g.vy), h, w, gv);
}

/// Gradient of [`jd_penalty`] with respect to the field planes, scaled by
/// `scale` and accumulated into `gu`/`gv`.
pub(crate) fn jd_penalty_grad_planes(
    u: &[f64],
    v: &[f64],
    h: usize,
    w: usize,
    scale: f64,
    gu: &mut [f64],
    gv: &mut [f64],
) {
    let g = gradients(u, v, h, w);
    let n = (h * w) as f64;
    let mut gux = vec![0.0; h * w];
    let mut guy = vec![0.0; h * w];
    let mut gvx = vec![0.0; h * w];
    let mut gvy = vec![0.0; h * w];
    let mut any = false;
    for i in 0..h * w {
        let det = (1.0 + g.ux[i]) * (1.0 + g.vy[i]) - g.uy[i] * g.vx[i];
        if det < 0.0 {
            any = true;
            // d(-det)/d(.)
            let k = -scale / n;
            gux[i] = k * (1.0 + g.vy[i]);
            gvy[i] = k * (1.0 + g.ux[i]);
            guy[i] = -k * g.vx[i];
            gvx[i] = -k * g.uy[i];
        }
    }
    if !any {
        return;
    }
    diff_x_adjoint(&gux, h, w, gu);
    diff_y_adjoint(&guy, h, w, gu);
    diff_x_adjoint(&gvx, h, w, gv);
    diff_y_adjoint(&gvy, h, w, gv);
}

/// NJD and Jacobian spread for a field, with the three NCC values supplied.
pub fn quality_report(
    field: &DeformationField2D,
    ncc_before: f64,
    ncc_affine: f64,
    ncc_final: f64,
) -> DeformQualityReport {
    let jmap = jacobian_map(field);
    DeformQualityReport {
        njd_percent: njd_percent(&jmap),
        jacobian_std: jacobian_std(&jmap),
        ncc_before,
        ncc_affine,
        ncc_final,
    }
}
