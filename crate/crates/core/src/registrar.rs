//! Per-pair longitudinal registration: an affine stage followed by
//! coarse-to-fine dense refinement, both minimizing the image alignment loss
//!
//! ```text
//! L = (1 − NCC_affine) + (1 − NCC_final) + γ·(smooth(φ) + λ·JD(φ))
//! ```
//!
//! by Adam with hand-derived gradients through the bilinear warp.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::Objective;
use crate::grid::{
    affine_to_field, build_pyramid, compose_fields, ensure_same_shape, normalized_coord,
    resize_field, warp_bilinear, warp_plane, warp_with_gradient, AffineTransform2D,
    DeformationField2D, Image2D,
};
use crate::metrics::{
    jacobian_det_planes, jd_penalty_grad_planes, ncc, ncc_with_grad, quality_report,
    smoothness_grad_planes, smoothness_planes, DeformQualityReport, Reduction,
};
use crate::optim::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    /// Weight of the whole regularizer.
    pub gamma: f64,
    /// Weight of the fold penalty inside the regularizer.
    pub lambda_jd: f64,
    pub deformable_levels: usize,
    pub affine_iters: usize,
    pub deformable_iters_per_level: usize,
    /// Step size for the normalized affine parameters.
    pub affine_lr: f64,
    /// Step size in pixels at the coarsest level; halved at each finer level.
    pub deformable_lr: f64,
    /// Stop a stage once the relative loss change stays below
    /// `stop_rel_tol` for `stop_patience` consecutive iterations.
    pub stop_rel_tol: f64,
    pub stop_patience: usize,
    /// Pyramid levels (from the coarsest) used by the affine stage.
    pub affine_levels: usize,
    pub seed: u64,
    pub smoothness_reduction: Reduction,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda_jd: 1e-5,
            deformable_levels: 4,
            affine_iters: 200,
            deformable_iters_per_level: 150,
            affine_lr: 1e-2,
            deformable_lr: 0.5,
            stop_rel_tol: 1e-5,
            stop_patience: 10,
            affine_levels: 2,
            seed: 0,
            smoothness_reduction: Reduction::Mean,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::config(format!("registration config: {what}")));
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return bad("gamma must be finite and >= 0");
        }
        if !(self.lambda_jd >= 0.0) || !self.lambda_jd.is_finite() {
            return bad("lambda_jd must be finite and >= 0");
        }
        if self.deformable_levels == 0 || self.affine_levels == 0 {
            return bad("deformable_levels and affine_levels must be >= 1");
        }
        if self.affine_iters == 0 || self.deformable_iters_per_level == 0 {
            return bad("iteration budgets must be >= 1");
        }
        if !(self.affine_lr > 0.0) || !(self.deformable_lr > 0.0) {
            return bad("learning rates must be > 0");
        }
        if !(self.stop_rel_tol >= 0.0) {
            return bad("stop_rel_tol must be >= 0");
        }
        Ok(())
    }
}

/// Value of the image alignment loss and its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossTerms {
    pub total: f64,
    pub ncc_affine: f64,
    pub ncc_final: f64,
    pub smoothness: f64,
    pub jd_penalty: f64,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub affine: AffineTransform2D,
    /// Affine and deformable stages composed, on the fixed grid.
    pub final_field: DeformationField2D,
    pub warped_affine: Image2D,
    pub warped_final: Image2D,
    pub quality: DeformQualityReport,
    pub loss_trace: Vec<f64>,
    /// Index in `loss_trace` where each optimization stage begins.
    pub stage_starts: Vec<usize>,
}

fn regularizer(u: &[f64], v: &[f64], h: usize, w: usize, cfg: &RegistrationConfig) -> (f64, f64) {
    let smooth = smoothness_planes(u, v, h, w, cfg.smoothness_reduction);
    let det = jacobian_det_planes(u, v, h, w);
    let jd = det.iter().map(|&d| (-d).max(0.0)).sum::<f64>() / det.len() as f64;
    (smooth, jd)
}

/// Evaluates the image alignment loss for an already-warped pair.
pub fn loss_image(
    fixed: &Image2D,
    warped_affine: &Image2D,
    warped_final: &Image2D,
    field: &DeformationField2D,
    cfg: &RegistrationConfig,
) -> Result<LossTerms> {
    ensure_same_shape(fixed.shape(), warped_affine.shape(), "loss_image")?;
    ensure_same_shape(fixed.shape(), warped_final.shape(), "loss_image")?;
    ensure_same_shape(fixed.shape(), field.shape(), "loss_image")?;
    let ncc_affine = ncc(fixed, warped_affine)?;
    let ncc_final = ncc(fixed, warped_final)?;
    let (h, w) = field.shape();
    let (smoothness, jd_penalty) = regularizer(field.u(), field.v(), h, w, cfg);
    let total =
        (1.0 - ncc_affine) + (1.0 - ncc_final) + cfg.gamma * (smoothness + cfg.lambda_jd * jd_penalty);
    Ok(LossTerms { total, ncc_affine, ncc_final, smoothness, jd_penalty })
}

/// `1 − NCC(fixed, moving ∘ affine)` over the six affine parameters.
pub struct AffineObjective<'a> {
    pub fixed: &'a Image2D,
    pub moving: &'a Image2D,
}

impl AffineObjective<'_> {
    pub fn value_and_grad(&self, params: &[f64]) -> Result<(f64, [f64; 6])> {
        let p: [f64; 6] = params.try_into().map_err(|_| Error::dim("affine has 6 parameters"))?;
        let (h, w) = self.fixed.shape();
        let field = affine_to_field(&AffineTransform2D::from_params(&p), h, w)?;
        let (warped, gx, gy) = warp_with_gradient(self.moving, &field);
        let (value, g) = ncc_with_grad(self.fixed.data(), &warped)?;
        let sx = (w as f64 - 1.0) / 2.0;
        let sy = (h as f64 - 1.0) / 2.0;
        let mut grad = [0.0; 6];
        for y in 0..h {
            let yn = normalized_coord(y, h);
            for x in 0..w {
                let xn = normalized_coord(x, w);
                let i = y * w + x;
                // d(1 - ncc) = -g · dwarped
                let du = -g[i] * gx[i] * sx;
                let dv = -g[i] * gy[i] * sy;
                grad[0] += du * xn;
                grad[1] += du * yn;
                grad[4] += du;
                grad[2] += dv * xn;
                grad[3] += dv * yn;
                grad[5] += dv;
            }
        }
        Ok((1.0 - value, grad))
    }
}

impl Objective for AffineObjective<'_> {
    fn dim(&self) -> usize {
        6
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.value_and_grad(x).map(|r| r.0).unwrap_or(f64::NAN)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.value_and_grad(x).map(|r| r.1.to_vec()).unwrap_or_default()
    }
}

/// The dense-stage objective over a field stored as `[u..., v...]`:
/// `(1 − NCC_final) + γ·(smooth + λ·JD)`, plus the frozen affine term.
pub struct FieldObjective<'a> {
    pub fixed: &'a Image2D,
    pub moving: &'a Image2D,
    pub cfg: &'a RegistrationConfig,
    /// `1 − NCC_affine`, constant during this stage.
    pub affine_term: f64,
}

impl FieldObjective<'_> {
    pub fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (h, w) = self.fixed.shape();
        let n = h * w;
        if params.len() != 2 * n {
            return Err(Error::dim(format!("field objective expects {} parameters", 2 * n)));
        }
        let (u, v) = params.split_at(n);
        let field = DeformationField2D::new(h, w, u.to_vec(), v.to_vec())?;
        let (warped, gx, gy) = warp_with_gradient(self.moving, &field);
        let (value, g) = ncc_with_grad(self.fixed.data(), &warped)?;
        let (smooth, jd) = regularizer(u, v, h, w, self.cfg);
        let loss = self.affine_term
            + (1.0 - value)
            + self.cfg.gamma * (smooth + self.cfg.lambda_jd * jd);

        let mut grad = vec![0.0; 2 * n];
        {
            let (gu, gv) = grad.split_at_mut(n);
            for i in 0..n {
                gu[i] = -g[i] * gx[i];
                gv[i] = -g[i] * gy[i];
            }
            if self.cfg.gamma > 0.0 {
                smoothness_grad_planes(u, v, h, w, self.cfg.smoothness_reduction, self.cfg.gamma, gu, gv);
                if self.cfg.lambda_jd > 0.0 {
                    jd_penalty_grad_planes(u, v, h, w, self.cfg.gamma * self.cfg.lambda_jd, gu, gv);
                }
            }
        }
        Ok((loss, grad))
    }
}

impl Objective for FieldObjective<'_> {
    fn dim(&self) -> usize {
        2 * self.fixed.height() * self.fixed.width()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.value_and_grad(x).map(|r| r.0).unwrap_or(f64::NAN)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.value_and_grad(x).map(|r| r.1).unwrap_or_default()
    }
}

fn relative_change(prev: f64, cur: f64) -> f64 {
    (prev - cur).abs() / prev.abs().max(1e-12)
}

/// Runs Adam on `params` for at most `iters` steps and keeps the best
/// iterate. Returns the loss trace (initial value first).
fn descend(
    stage: &str,
    params: &mut [f64],
    lr: f64,
    iters: usize,
    stop: (f64, usize),
    mut eval: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<Vec<f64>> {
    let mut opt = Adam::new(lr);
    let mut trace = Vec::with_capacity(iters + 1);
    let mut best = params.to_vec();
    let mut best_loss = f64::INFINITY;
    let mut prev = f64::NAN;
    let mut calm = 0;
    let (stop_rel_tol, patience) = stop;
    for it in 0..=iters {
        let (loss, grad) = eval(params)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { stage: stage.to_string(), iteration: it });
        }
        trace.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best.copy_from_slice(params);
        }
        if it > 0 && relative_change(prev, loss) < stop_rel_tol {
            calm += 1;
        } else {
            calm = 0;
        }
        if it == iters || calm >= patience.max(1) {
            break;
        }
        prev = loss;
        opt.step(params, &grad);
    }
    params.copy_from_slice(&best);
    // The trace ends on the returned iterate.
    trace.push(best_loss);
    Ok(trace)
}

struct AffineOutcome {
    affine: AffineTransform2D,
    trace: Vec<f64>,
    stage_starts: Vec<usize>,
}

fn affine_stage(fixed: &Image2D, moving: &Image2D, cfg: &RegistrationConfig) -> Result<AffineOutcome> {
    ensure_same_shape(fixed.shape(), moving.shape(), "optimize_affine")?;
    cfg.validate()?;
    let levels = usable_levels(fixed, cfg.deformable_levels);
    let pf = build_pyramid(fixed, levels)?;
    let pm = build_pyramid(moving, levels)?;
    let schedule: Vec<usize> = (0..levels.min(cfg.affine_levels)).collect();
    let mut params = AffineTransform2D::identity().to_params();
    let mut trace = Vec::new();
    let mut stage_starts = Vec::new();
    for (k, &lvl) in schedule.iter().enumerate() {
        let obj = AffineObjective { fixed: &pf.levels[lvl], moving: &pm.levels[lvl] };
        let lr = cfg.affine_lr / (1u32 << k) as f64;
        stage_starts.push(trace.len());
        let t = descend(&format!("affine level {lvl}"), &mut params, lr, cfg.affine_iters, (cfg.stop_rel_tol, cfg.stop_patience), |p| {
            obj.value_and_grad(p).map(|(l, g)| (l, g.to_vec()))
        })?;
        trace.extend(t);
    }
    Ok(AffineOutcome { affine: AffineTransform2D::from_params(&params), trace, stage_starts })
}

/// Largest level count ≤ `requested` whose coarsest level stays ≥ 8×8.
fn usable_levels(image: &Image2D, requested: usize) -> usize {
    let (mut h, mut w) = image.shape();
    let mut levels = 1;
    while levels < requested && h.div_ceil(2) >= 8 && w.div_ceil(2) >= 8 {
        h = h.div_ceil(2);
        w = w.div_ceil(2);
        levels += 1;
    }
    levels
}

/// Affine stage: Adam on `1 − NCC` from the identity, coarsest level first.
pub fn optimize_affine(
    fixed: &Image2D,
    moving: &Image2D,
    cfg: &RegistrationConfig,
) -> Result<AffineTransform2D> {
    Ok(affine_stage(fixed, moving, cfg)?.affine)
}

struct DeformOutcome {
    field: DeformationField2D,
    trace: Vec<f64>,
    stage_starts: Vec<usize>,
}

fn deformable_stage(
    fixed: &Image2D,
    moving: &Image2D,
    cfg: &RegistrationConfig,
    affine_term: f64,
) -> Result<DeformOutcome> {
    ensure_same_shape(fixed.shape(), moving.shape(), "optimize_deformable")?;
    cfg.validate()?;
    let levels = usable_levels(fixed, cfg.deformable_levels);
    let pf = build_pyramid(fixed, levels)?;
    let pm = build_pyramid(moving, levels)?;
    let mut field = DeformationField2D::zeros(pf.levels[0].height(), pf.levels[0].width());
    let mut trace = Vec::new();
    let mut stage_starts = Vec::new();
    for lvl in 0..levels {
        let (fl, ml) = (&pf.levels[lvl], &pm.levels[lvl]);
        let (h, w) = fl.shape();
        field = resize_field(&field, h, w)?;
        let obj = FieldObjective { fixed: fl, moving: ml, cfg, affine_term };
        let (u, v) = field.into_parts();
        let mut params = u;
        params.extend(v);
        let lr = cfg.deformable_lr / (1u64 << lvl) as f64;
        stage_starts.push(trace.len());
        let t = descend(
            &format!("deformable level {lvl}"),
            &mut params,
            lr,
            cfg.deformable_iters_per_level,
            (cfg.stop_rel_tol, cfg.stop_patience),
            |p| obj.value_and_grad(p),
        )?;
        trace.extend(t);
        let v = params.split_off(h * w);
        field = DeformationField2D::new(h, w, params, v)?;
    }
    Ok(DeformOutcome { field, trace, stage_starts })
}

/// Dense coarse-to-fine refinement of an affinely pre-aligned pair.
pub fn optimize_deformable(
    fixed: &Image2D,
    moving_after_affine: &Image2D,
    cfg: &RegistrationConfig,
) -> Result<DeformationField2D> {
    Ok(deformable_stage(fixed, moving_after_affine, cfg, 0.0)?.field)
}

/// Full pipeline: affine, then dense refinement, composed into one field.
pub fn register(fixed: &Image2D, moving: &Image2D, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    ensure_same_shape(fixed.shape(), moving.shape(), "register")?;
    cfg.validate()?;
    let (h, w) = fixed.shape();
    let ncc_before = ncc(fixed, moving)?;

    let aff = affine_stage(fixed, moving, cfg).map_err(|e| e.in_stage("affine"))?;
    let affine_field = affine_to_field(&aff.affine, h, w)?;
    let warped_affine = warp_bilinear(moving, &affine_field)?;
    let ncc_affine = ncc(fixed, &warped_affine)?;

    let def = deformable_stage(fixed, &warped_affine, cfg, 1.0 - ncc_affine)
        .map_err(|e| e.in_stage("deformable"))?;
    let final_field = compose_fields(&affine_field, &def.field)?;
    let warped_final = Image2D::new(h, w, warp_plane(moving.data(), h, w, final_field.u(), final_field.v()))?;
    let ncc_final = ncc(fixed, &warped_final)?;

    let mut loss_trace = aff.trace;
    let offset = loss_trace.len();
    loss_trace.extend(def.trace);
    let mut stage_starts = aff.stage_starts;
    stage_starts.extend(def.stage_starts.iter().map(|s| s + offset));

    Ok(RegistrationResult {
        affine: aff.affine,
        quality: quality_report(&final_field, ncc_before, ncc_affine, ncc_final),
        final_field,
        warped_affine,
        warped_final,
        loss_trace,
        stage_starts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::metrics::smoothness_energy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blobs(h: usize, w: usize) -> Image2D {
        Image2D::from_fn(h, w, |x, y| {
            let (x, y) = (x as f64, y as f64);
            let a = (-((x - 0.4 * w as f64).powi(2) + (y - 0.35 * h as f64).powi(2)) / 30.0).exp();
            let b = (-((x - 0.7 * w as f64).powi(2) + (y - 0.6 * h as f64).powi(2)) / 50.0).exp();
            0.1 + 0.6 * a + 0.3 * b + 0.05 * (0.3 * x).sin() * (0.25 * y).cos()
        })
        .unwrap()
    }

    #[test]
    fn loss_image_fixtures() {
        let cfg = RegistrationConfig::default();
        let img = blobs(8, 8);
        let zero = DeformationField2D::zeros(8, 8);
        assert_eq!(loss_image(&img, &img, &img, &zero, &cfg).unwrap().total, 0.0);

        let smooth = DeformationField2D::from_fn(8, 8, |x, _| (2.0 * x as f64, 0.0)).unwrap();
        let terms = loss_image(&img, &img, &img, &smooth, &cfg).unwrap();
        assert!((terms.total - 4.0).abs() < 1e-12);
        assert_eq!(terms.jd_penalty, 0.0);

        let anti = img.map(|v| 1.0 - v).unwrap();
        let terms = loss_image(&img, &img, &anti, &zero, &cfg).unwrap();
        assert!((terms.total - 2.0).abs() < 1e-12);
    }

    /// Distance from the nearest grid line over all sample positions of an
    /// affine warp; finite differences are only meaningful when this exceeds
    /// the perturbation's reach, since bilinear sampling kinks at grid lines.
    fn min_grid_clearance(p: &[f64; 6], h: usize, w: usize) -> f64 {
        let f = affine_to_field(&AffineTransform2D::from_params(p), h, w).unwrap();
        let mut best = f64::INFINITY;
        for y in 0..h {
            for x in 0..w {
                let (u, v) = f.at(x, y);
                for c in [x as f64 + u, y as f64 + v] {
                    best = best.min((c - c.round()).abs());
                }
            }
        }
        best
    }

    #[test]
    fn affine_gradient_matches_differences() {
        let fixed = blobs(16, 16);
        let moving = warp_bilinear(&fixed, &DeformationField2D::uniform(16, 16, 0.7, -0.4)).unwrap();
        let obj = AffineObjective { fixed: &fixed, moving: &moving };
        let p = [1.001, 0.0008, -0.0006, 0.9993, 0.37 / 7.5, -0.41 / 7.5];
        // Perturbing any parameter by 1e-4 moves a sample by at most 1e-4 · 7.5 px.
        assert!(min_grid_clearance(&p, 16, 16) > 0.01);
        let dev = check_gradients(&obj, &p);
        assert!(dev < 1e-4, "deviation {dev}");
    }

    #[test]
    fn field_gradient_matches_differences() {
        let fixed = blobs(8, 8);
        let moving = blobs(8, 8).map(|v| v * v).unwrap();
        let mut cfg = RegistrationConfig::default();
        cfg.lambda_jd = 0.3;
        let obj = FieldObjective { fixed: &fixed, moving: &moving, cfg: &cfg, affine_term: 0.1 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Vec<f64> = (0..128).map(|_| rng.gen_range(-0.45..0.45)).collect();
        let dev = check_gradients(&obj, &p);
        assert!(dev < 1e-4, "deviation {dev}");
    }

    #[test]
    fn identical_pair_stays_put() {
        let img = blobs(64, 80);
        let cfg = RegistrationConfig::default();
        let a = optimize_affine(&img, &img, &cfg).unwrap();
        let id = AffineTransform2D::identity().to_params();
        for (p, q) in a.to_params().iter().zip(id) {
            assert!((p - q).abs() < 1e-3);
        }
        let r = register(&img, &img, &cfg).unwrap();
        assert!((r.quality.ncc_final - 1.0).abs() < 1e-6);
        assert_eq!(r.quality.njd_percent, 0.0);
        assert!(r.final_field.mean_magnitude() < 0.2);
    }

    #[test]
    fn stronger_regularization_gives_smoother_fields() {
        let fixed = blobs(48, 48);
        let truth = DeformationField2D::from_fn(48, 48, |x, y| {
            (2.0 * (x as f64 / 9.0).sin(), 1.5 * (y as f64 / 7.0).cos())
        })
        .unwrap();
        let moving = warp_bilinear(&fixed, &truth).unwrap();
        let mut cfg = RegistrationConfig { deformable_levels: 3, ..Default::default() };
        let soft = optimize_deformable(&fixed, &moving, &cfg).unwrap();
        cfg.gamma *= 100.0;
        let stiff = optimize_deformable(&fixed, &moving, &cfg).unwrap();
        assert!(smoothness_energy(&stiff) < smoothness_energy(&soft));
    }

    #[test]
    fn rejects_bad_config() {
        let img = blobs(16, 16);
        let cfg = RegistrationConfig { affine_iters: 0, ..Default::default() };
        assert!(matches!(register(&img, &img, &cfg), Err(Error::Config(_))));
    }
}
