use super::LambdaModel;

/// A scalar function of a model's parameters with an analytic gradient.
pub trait Objective {
    fn value(&self, model: &LambdaModel) -> f64;

    fn gradient(&self, model: &LambdaModel) -> Vec<f64>;

    /// Distance (in λ units) from the nearest non-differentiable point;
    /// infinite for smooth objectives.
    fn kink_distance(&self, _model: &LambdaModel) -> f64 {
        f64::INFINITY
    }
}

/// Closure-backed [`Objective`].
pub struct FnObjective<V, G> {
    pub value: V,
    pub gradient: G,
}

impl<V, G> Objective for FnObjective<V, G>
where
    V: Fn(&LambdaModel) -> f64,
    G: Fn(&LambdaModel) -> Vec<f64>,
{
    fn value(&self, model: &LambdaModel) -> f64 {
        (self.value)(model)
    }

    fn gradient(&self, model: &LambdaModel) -> Vec<f64> {
        (self.gradient)(model)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    /// Step of the five-point central stencil.
    pub step: f64,
    pub tolerance: f64,
    /// Draws closer than this to a kink are reported and not compared.
    pub kink_margin: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 5e-4,
            tolerance: 1e-4,
            kink_margin: 5e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdRow {
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub pass: bool,
    /// The draw sat on (or next to) a kink and was not compared.
    pub kink: bool,
    pub rows: Vec<FdRow>,
}

/// `|a − n| / max(|a|, |n|, 1e-6)`: relative where the gradient is
/// material, absolute below the floor.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the analytic gradient of `objective` at `model` against
/// fourth-order central differences, one coordinate at a time.
pub fn finite_difference_check(model: &LambdaModel, objective: &dyn Objective, opts: FdOptions) -> FdReport {
    if objective.kink_distance(model) < opts.kink_margin {
        return FdReport {
            max_rel_error: 0.0,
            pass: true,
            kink: true,
            rows: Vec::new(),
        };
    }
    let analytic = objective.gradient(model);
    let base = objective.value(model);
    if !base.is_finite() || analytic.len() != model.param_count() || !analytic.iter().all(|g| g.is_finite()) {
        return FdReport {
            max_rel_error: f64::INFINITY,
            pass: false,
            kink: false,
            rows: Vec::new(),
        };
    }
    let mut probe = model.clone();
    let mut rows = Vec::with_capacity(analytic.len());
    let mut max_rel: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.params()[i];
        let mut at = |k: f64| {
            probe.params_mut()[i] = orig + k * opts.step;
            objective.value(&probe)
        };
        let (p1, m1, p2, m2) = (at(1.0), at(-1.0), at(2.0), at(-2.0));
        probe.params_mut()[i] = orig;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * opts.step);
        let rel = if numeric.is_finite() {
            relative_error(a, numeric)
        } else {
            f64::INFINITY
        };
        max_rel = max_rel.max(rel);
        rows.push(FdRow {
            coordinate: i,
            analytic: a,
            numeric,
            rel_error: rel,
        });
    }
    FdReport {
        max_rel_error: max_rel,
        pass: max_rel < opts.tolerance,
        kink: false,
        rows,
    }
}
