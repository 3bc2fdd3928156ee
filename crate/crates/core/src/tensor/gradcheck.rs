use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub epsilon: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Parameters larger than this are checked on a random subsample of
    /// coordinates.
    pub max_coords_per_param: Option<usize>,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero up to rounding are compared in absolute terms.
    pub denominator_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            tolerance: 1e-4,
            max_coords_per_param: None,
            denominator_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradError {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Flat index of the worst coordinate, with its two estimates.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub params: Vec<ParamGradError>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.params.iter().map(|p| p.name.len()).max().unwrap_or(9).max(9);
        writeln!(f, "{:<width$}  {:>7}  {:>12}", "parameter", "coords", "max rel err")?;
        for p in &self.params {
            let mark = if p.max_rel_error < self.tolerance { "" } else { "  FAIL" };
            writeln!(
                f,
                "{:<width$}  {:>7}  {:>12.3e}{mark}",
                p.name, p.coords_checked, p.max_rel_error
            )?;
        }
        write!(
            f,
            "{} at tolerance {:e} (max {:.3e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.tolerance,
            self.max_rel_error()
        )
    }
}

/// Compares the gradients that `f` produces through [`Graph::backward`]
/// against central differences of its scalar output, for every parameter in
/// `params`.
///
/// `f` records a scalar function of the parameters on the supplied graph and
/// returns its output node. It must be deterministic.
pub fn grad_check<F>(params: &ParamStore, f: F, cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut work = params.clone();
    work.zero_grads();
    let mut g = Graph::new();
    let out = f(&mut g, &work)?;
    if !g.value(out).is_finite() {
        return Err(Error::Numeric {
            name: "function output".into(),
        });
    }
    g.backward(out)?;
    work.accumulate_grads(&g);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        g.value(out)
            .item()
            .ok_or_else(|| Error::Usage("gradient check needs a scalar function".into()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = Vec::with_capacity(work.len());
    for id in work.ids().collect::<Vec<_>>() {
        let name = work.name(id).to_string();
        let analytic = work.grad(id).clone();
        if !analytic.is_finite() {
            return Err(Error::Numeric { name });
        }
        let n = analytic.len();
        let coords: Vec<usize> = match cfg.max_coords_per_param {
            Some(max) if n > max => rand::seq::index::sample(&mut rng, n, max).into_vec(),
            _ => (0..n).collect(),
        };
        let mut entry = ParamGradError {
            name: name.clone(),
            max_rel_error: 0.0,
            coords_checked: coords.len(),
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &c in &coords {
            let orig = work.value(id).data()[c];
            work.value_mut(id).data_mut()[c] = orig + cfg.epsilon;
            let plus = eval(&work)?;
            work.value_mut(id).data_mut()[c] = orig - cfg.epsilon;
            let minus = eval(&work)?;
            work.value_mut(id).data_mut()[c] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric { name });
            }
            let numeric = (plus - minus) / (2.0 * cfg.epsilon);
            let a = analytic.data()[c];
            let denom = a.abs().max(numeric.abs()).max(cfg.denominator_floor);
            let rel = (a - numeric).abs() / denom;
            if rel >= entry.max_rel_error {
                entry.max_rel_error = rel;
                entry.worst_index = c;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.push(entry);
    }
    let passed = report.iter().all(|p| p.max_rel_error < cfg.tolerance);
    Ok(GradReport {
        params: report,
        tolerance: cfg.tolerance,
        passed,
    })
}
