//! Seeded phantom exams with known deformations and outcomes.
//!
//! A phantom is a soft-edged ellipse filled with multi-octave value noise,
//! carrying a few benign blobs and optionally a lesion. The current exam is
//! the prior scene with blobs and lesion grown, pulled through `true_field`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{warp_bilinear, DeformationField2D, Image2D};
use crate::metrics::{jacobian_map, njd_percent};
use crate::pipelines::{Density, ExamPair};
use crate::registrar::RegistrationConfig;
use crate::risk::{SurvivalLabel, T_MAX};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    /// Normalised radius: < 1 inside.
    pub fn rho(&self, x: f64, y: f64) -> f64 {
        (((x - self.cx) / self.rx).powi(2) + ((y - self.cy) / self.ry).powi(2)).sqrt()
    }

    /// True when the disk of radius `r` around `(x, y)` lies inside.
    pub fn contains_disk(&self, x: f64, y: f64, r: f64) -> bool {
        if r >= self.rx || r >= self.ry {
            return false;
        }
        let shrunk = Ellipse { rx: self.rx - r, ry: self.ry - r, ..*self };
        shrunk.rho(x, y) <= 1.0
    }
}

/// Soft disk whose radius changes by `growth` between prior and current.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: (f64, f64),
    pub radius: f64,
    pub intensity: f64,
    pub growth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub center: (f64, f64),
    pub radius: f64,
    /// Radius increase (pixels) per exam interval.
    pub growth_rate: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub patient_id: String,
    pub exam_id: String,
    pub height: usize,
    pub width: usize,
    /// Lattice spacing of the coarsest noise octave, in pixels.
    pub texture_scale: f64,
    pub texture_seed: u64,
    pub texture_amplitude: f64,
    pub tissue_level: f64,
    pub ellipse: Ellipse,
    pub benign: Vec<Blob>,
    pub lesion: Option<LesionSpec>,
    pub true_field: DeformationField2D,
    pub gap_months: f64,
    pub followup_years: u32,
    pub density: Option<Density>,
}

/// Lesions growing at least this much per interval become cancers.
pub const CANCER_GROWTH: f64 = 1.5;

/// Years to diagnosis for a lesion growth rate: faster growth, earlier
/// diagnosis, from 1 year at 5 px per interval to 5 years at 1.5 px.
pub fn years_to_cancer_for_growth(growth_rate: f64) -> Option<u32> {
    if growth_rate < CANCER_GROWTH {
        return None;
    }
    Some((6.0 - growth_rate).ceil().clamp(1.0, T_MAX as f64) as u32)
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::PhantomSpec(m));
        if self.height < 8 || self.width < 8 {
            return bad(format!("image {}x{} too small", self.height, self.width));
        }
        if self.true_field.shape() != (self.height, self.width) {
            return bad(format!("true field {:?} does not match image", self.true_field.shape()));
        }
        if !(self.texture_scale > 0.0) {
            return bad("texture scale must be positive".into());
        }
        if !(self.gap_months > 0.0) {
            return bad("gap must be positive".into());
        }
        if let Some(l) = &self.lesion {
            if !(l.radius > 0.0) {
                return bad("lesion radius must be positive".into());
            }
            let grown = l.radius + l.growth_rate.max(0.0);
            if !self.ellipse.contains_disk(l.center.0, l.center.1, grown) {
                return bad(format!("lesion at {:?} with radius {grown:.2} leaves the ellipse", l.center));
            }
        }
        if self.benign.iter().any(|b| !(b.radius > 0.0) || b.radius + b.growth <= 0.0) {
            return bad("benign blob radius must stay positive".into());
        }
        Ok(())
    }

    pub fn label(&self) -> SurvivalLabel {
        let ttc = self.lesion.and_then(|l| years_to_cancer_for_growth(l.growth_rate));
        SurvivalLabel::new(self.followup_years, ttc, T_MAX)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, octave: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(octave ^ splitmix((ix as u64) ^ splitmix(iy as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise in roughly [-1, 1].
pub fn value_noise(x: f64, y: f64, scale: f64, seed: u64, octaves: u32) -> f64 {
    let mut total = 0.0;
    let mut norm = 0.0;
    let mut amp = 1.0;
    let mut s = scale;
    for o in 0..octaves {
        let (gx, gy) = (x / s, y / s);
        let (ix, iy) = (gx.floor(), gy.floor());
        let (fx, fy) = (smoothstep(gx - ix), smoothstep(gy - iy));
        let (ix, iy) = (ix as i64, iy as i64);
        let v = |dx, dy| lattice(seed, o as u64, ix + dx, iy + dy);
        let top = v(0, 0) + (v(1, 0) - v(0, 0)) * fx;
        let bottom = v(0, 1) + (v(1, 1) - v(0, 1)) * fx;
        total += amp * (top + (bottom - top) * fy);
        norm += amp;
        amp *= 0.5;
        s *= 0.5;
    }
    total / norm
}

/// Soft disk profile: 1 inside, 0 outside, ~1.5 px transition.
fn disk(d: f64, r: f64) -> f64 {
    0.5 * (1.0 - ((d - r) / 0.75).tanh())
}

const OCTAVES: u32 = 3;

/// Renders the unwarped scene; `grown` selects current-exam radii.
pub fn render_scene(spec: &PhantomSpec, grown: bool) -> Result<Image2D> {
    let e = spec.ellipse;
    Image2D::from_fn(spec.height, spec.width, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let rho = e.rho(xf, yf);
        // soft boundary about 2 px wide
        let edge_px = (1.0 - rho) * e.rx.min(e.ry);
        let mask = 0.5 * (1.0 + (edge_px / 1.0).tanh());
        if mask < 1e-6 {
            return 0.0;
        }
        let mut v = spec.tissue_level + spec.texture_amplitude * value_noise(xf, yf, spec.texture_scale, spec.texture_seed, OCTAVES);
        for b in &spec.benign {
            let r = if grown { b.radius + b.growth } else { b.radius };
            v += b.intensity * disk(((xf - b.center.0).powi(2) + (yf - b.center.1).powi(2)).sqrt(), r);
        }
        if let Some(l) = &spec.lesion {
            let r = if grown { l.radius + l.growth_rate } else { l.radius };
            v += l.intensity * disk(((xf - l.center.0).powi(2) + (yf - l.center.1).powi(2)).sqrt(), r);
        }
        (v * mask).clamp(0.0, 1.0)
    })
}

/// Prior, current and ground-truth field for one spec.
pub fn generate_phantom_pair(spec: &PhantomSpec) -> Result<(ExamPair, DeformationField2D)> {
    spec.validate()?;
    let prior = render_scene(spec, false)?;
    let scene = render_scene(spec, true)?;
    let current = if spec.true_field.is_zero() { scene } else { warp_bilinear(&scene, &spec.true_field)? };
    let pair = ExamPair {
        patient_id: spec.patient_id.clone(),
        exam_id: spec.exam_id.clone(),
        current,
        prior,
        gap_months: spec.gap_months,
        label: spec.label(),
        density: spec.density,
    };
    Ok((pair, spec.true_field.clone()))
}

/// Registration settings used for phantom cohorts.
pub fn phantom_registration_config() -> RegistrationConfig {
    RegistrationConfig { gamma: 0.1, ..RegistrationConfig::default() }
}

/// Foreground of the current exam (where `pair.current` is non-zero).
pub fn foreground_mask(image: &Image2D) -> Vec<bool> {
    image.data().iter().map(|&v| v > 1e-3).collect()
}

/// Smooth random field: small affine about the centre plus two long-wave
/// sinusoids, scaled so the largest displacement is at most `max_disp`.
/// Shrinks until no fold remains.
pub fn random_smooth_field(height: usize, width: usize, max_disp: f64, rng: &mut impl Rng) -> Result<DeformationField2D> {
    let (cx, cy) = ((width - 1) as f64 / 2.0, (height - 1) as f64 / 2.0);
    let angle = rng.gen_range(-2.5f64..2.5).to_radians();
    let scale = 1.0 + rng.gen_range(-0.03..0.03);
    let shear = rng.gen_range(-0.015..0.015);
    let (c, s) = (angle.cos() * scale, angle.sin() * scale);
    let m = [[c - 1.0, -s + shear], [s, c - 1.0]];
    let t = (rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5));
    let waves: Vec<(f64, f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let wavelength = rng.gen_range(60.0..110.0);
            let k = std::f64::consts::TAU / wavelength;
            (k * theta.cos(), k * theta.sin(), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0))
        })
        .collect();
    let raw = DeformationField2D::from_fn(height, width, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let mut u = m[0][0] * dx + m[0][1] * dy + t.0;
        let mut v = m[1][0] * dx + m[1][1] * dy + t.1;
        for &(kx, ky, phase, au, av) in &waves {
            let arg = kx * x as f64 + ky * y as f64 + phase;
            u += au * arg.sin();
            v += av * arg.cos();
        }
        (u, v)
    })?;
    let mut k = (max_disp / raw.max_magnitude()).min(1.0);
    loop {
        let (u, v) = (raw.u().iter().map(|a| a * k).collect(), raw.v().iter().map(|a| a * k).collect());
        let field = DeformationField2D::new(height, width, u, v)?;
        if njd_percent(&jacobian_map(&field)) == 0.0 {
            return Ok(field);
        }
        k *= 0.8;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_exams: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub cancer_fraction: f64,
    /// Share of non-cancer exams carrying a slow-growing lesion.
    pub stable_lesion_fraction: f64,
    pub max_displacement: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_exams: 400,
            height: 128,
            width: 160,
            seed: 2024,
            cancer_fraction: 0.3,
            stable_lesion_fraction: 0.5,
            max_displacement: 6.0,
        }
    }
}

/// Texture amplitude and tissue level per density class.
fn density_look(d: Density) -> (f64, f64) {
    match d {
        Density::A | Density::Low => (0.05, 0.35),
        Density::B => (0.08, 0.42),
        Density::C | Density::Medium => (0.11, 0.50),
        Density::D | Density::High => (0.14, 0.58),
    }
}

/// Draws a random spec for exam `index`; each index has its own RNG stream.
pub fn random_spec(cfg: &CohortConfig, index: usize) -> Result<PhantomSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let (h, w) = (cfg.height, cfg.width);
    let (hf, wf) = (h as f64, w as f64);
    let density = match rng.gen_range(0.0..1.0) {
        p if p < 0.1 => Density::A,
        p if p < 0.5 => Density::B,
        p if p < 0.9 => Density::C,
        _ => Density::D,
    };
    let (texture_amplitude, tissue_level) = density_look(density);
    let ellipse = Ellipse {
        cx: wf / 2.0 + rng.gen_range(-4.0..4.0),
        cy: hf / 2.0 + rng.gen_range(-4.0..4.0),
        rx: wf * rng.gen_range(0.38..0.44),
        ry: hf * rng.gen_range(0.40..0.46),
    };
    let place = |rng: &mut ChaCha8Rng, r: f64| loop {
        let p = (rng.gen_range(0.0..wf), rng.gen_range(0.0..hf));
        if ellipse.contains_disk(p.0, p.1, r + 4.0) {
            break p;
        }
    };
    let n_benign = rng.gen_range(2..=5);
    let benign = (0..n_benign)
        .map(|_| {
            let radius = rng.gen_range(2.0..7.0);
            let center = place(&mut rng, radius + 0.6);
            Blob { center, radius, intensity: rng.gen_range(0.10..0.25), growth: rng.gen_range(-0.6..0.6) }
        })
        .collect();
    let is_cancer = rng.gen_bool(cfg.cancer_fraction);
    let lesion = if is_cancer {
        let radius = rng.gen_range(1.5..3.0);
        let growth_rate = rng.gen_range(CANCER_GROWTH..5.5);
        Some(LesionSpec { center: place(&mut rng, radius + growth_rate), radius, growth_rate, intensity: rng.gen_range(0.15..0.30) })
    } else if rng.gen_bool(cfg.stable_lesion_fraction) {
        let radius = rng.gen_range(1.5..6.5);
        let growth_rate = rng.gen_range(0.0..0.8);
        Some(LesionSpec { center: place(&mut rng, radius + growth_rate), radius, growth_rate, intensity: rng.gen_range(0.15..0.30) })
    } else {
        None
    };
    let ttc = lesion.and_then(|l| years_to_cancer_for_growth(l.growth_rate));
    let followup_years = match ttc {
        Some(t) => t + rng.gen_range(0..=2),
        None => rng.gen_range(1..=6),
    };
    let true_field = random_smooth_field(h, w, cfg.max_displacement, &mut rng)?;
    Ok(PhantomSpec {
        patient_id: index.to_string(),
        exam_id: (2 * index + 1).to_string(),
        height: h,
        width: w,
        texture_scale: rng.gen_range(14.0..24.0),
        texture_seed: rng.gen(),
        texture_amplitude,
        tissue_level,
        ellipse,
        benign,
        lesion,
        true_field,
        gap_months: rng.gen_range(9..=30) as f64,
        followup_years,
        density: Some(density),
    })
}

/// One generated exam pair with its spec and ground-truth field.
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub spec: PhantomSpec,
    pub pair: ExamPair,
    pub true_field: DeformationField2D,
}

pub fn generate_cohort(cfg: &CohortConfig) -> Result<Vec<PhantomCase>> {
    if cfg.n_exams == 0 || !(0.0..=1.0).contains(&cfg.cancer_fraction) || !(0.0..=1.0).contains(&cfg.stable_lesion_fraction) {
        return Err(Error::PhantomSpec("cohort needs exams and fractions in [0, 1]".into()));
    }
    (0..cfg.n_exams)
        .into_par_iter()
        .map(|i| {
            let spec = random_spec(cfg, i)?;
            let (pair, true_field) = generate_phantom_pair(&spec)?;
            Ok(PhantomCase { spec, pair, true_field })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            patient_id: "P".into(),
            exam_id: "E".into(),
            height: 32,
            width: 40,
            texture_scale: 8.0,
            texture_seed: 3,
            texture_amplitude: 0.1,
            tissue_level: 0.4,
            ellipse: Ellipse { cx: 20.0, cy: 16.0, rx: 16.0, ry: 13.0 },
            benign: vec![Blob { center: (14.0, 12.0), radius: 2.0, intensity: 0.2, growth: 0.0 }],
            lesion: Some(LesionSpec { center: (24.0, 18.0), radius: 2.0, growth_rate: 0.0, intensity: 0.2 }),
            true_field: DeformationField2D::zeros(32, 40),
            gap_months: 12.0,
            followup_years: 5,
            density: Some(Density::B),
        }
    }

    #[test]
    fn zero_field_zero_growth_is_identity() {
        let (pair, _) = generate_phantom_pair(&small_spec()).unwrap();
        assert_eq!(pair.current, pair.prior);
    }

    #[test]
    fn lesion_outside_ellipse_is_rejected() {
        let mut spec = small_spec();
        spec.lesion.as_mut().unwrap().center = (1.0, 1.0);
        assert!(matches!(generate_phantom_pair(&spec), Err(Error::PhantomSpec(_))));
    }

    #[test]
    fn growth_sets_label() {
        assert_eq!(years_to_cancer_for_growth(1.0), None);
        assert_eq!(years_to_cancer_for_growth(1.5), Some(5));
        assert_eq!(years_to_cancer_for_growth(5.2), Some(1));
        let mut spec = small_spec();
        spec.lesion.as_mut().unwrap().growth_rate = 3.0;
        assert_eq!(spec.label().years_to_cancer, Some(3));
    }

    #[test]
    fn cohort_is_seed_deterministic_and_fold_free() {
        let cfg = CohortConfig { n_exams: 6, height: 64, width: 80, ..Default::default() };
        let a = generate_cohort(&cfg).unwrap();
        let b = generate_cohort(&cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pair, y.pair);
            assert_eq!(njd_percent(&jacobian_map(&x.true_field)), 0.0);
            assert!(x.true_field.max_magnitude() <= cfg.max_displacement + 1e-9);
        }
    }
}
