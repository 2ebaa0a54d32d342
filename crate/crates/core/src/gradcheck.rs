//! Central finite-difference checks for hand-written gradients.

/// An objective with an analytic gradient.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
}

/// Closure-backed [`Objective`].
pub struct FnObjective<V, G> {
    pub dim: usize,
    pub value: V,
    pub gradient: G,
}

impl<V, G> Objective for FnObjective<V, G>
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (self.gradient)(x)
    }
}

pub const DEFAULT_STEP: f64 = 1e-4;

/// Central-difference estimate of the gradient at `x`.
pub fn numeric_gradient(objective: &dyn Objective, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = objective.value(&probe);
            probe[i] = x[i] - step;
            let down = objective.value(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Relative deviation `|a − n| / max(|a|, |n|, floor)` per coordinate.
///
/// The floor keeps coordinates whose true gradient is (near) zero from
/// dividing rounding noise by rounding noise.
pub fn relative_deviation(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Maximum relative deviation between the analytic gradient and central
/// differences with step `1e-4`.
pub fn check_gradients(objective: &dyn Objective, point: &[f64]) -> f64 {
    check_gradients_with(objective, point, DEFAULT_STEP, 1e-6)
}

pub fn check_gradients_with(objective: &dyn Objective, point: &[f64], step: f64, floor: f64) -> f64 {
    assert_eq!(point.len(), objective.dim(), "point has wrong dimension");
    let analytic = objective.gradient(point);
    let numeric = numeric_gradient(objective, point, step);
    relative_deviation(&analytic, &numeric, floor)
}
