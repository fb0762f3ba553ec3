//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::array::Tensor;
use super::graph::{Graph, Var};
use crate::error::Result;

/// Which parameter coordinates to perturb.
#[derive(Clone, Debug)]
pub enum Coords {
    All,
    /// Up to `per_tensor` random coordinates from every parameter tensor.
    Sample { per_tensor: usize, seed: u64 },
    /// The `per_tensor` coordinates of every tensor with the largest analytic
    /// gradient magnitude. Round-off in the loss bounds how small a
    /// derivative a central difference can resolve, and these coordinates
    /// sit furthest above that floor.
    Largest { per_tensor: usize },
}

/// Analytic gradients at or below this magnitude everywhere in a tensor mark
/// it as inert.
pub const INERT_GRADIENT: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over tensors with a nonzero analytic gradient.
    pub max_rel_error: f64,
    /// `(tensor index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub loss: f64,
    /// Tensors whose analytic gradient vanishes identically. Relative error
    /// against a zero is pure rounding noise, so these are judged by the
    /// absolute size of their finite differences instead.
    pub inert: Vec<usize>,
    /// Largest `|finite difference|` seen on an inert tensor.
    pub inert_max_abs: f64,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_rel_error <= rel_tol && self.inert_max_abs <= abs_tol
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Maximum relative error over paired gradient entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

fn selected(params: &[Tensor], analytic: &[Tensor], coords: &Coords) -> Vec<(usize, usize)> {
    match coords {
        Coords::All => params
            .iter()
            .enumerate()
            .flat_map(|(t, p)| (0..p.len()).map(move |j| (t, j)))
            .collect(),
        Coords::Sample { per_tensor, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut out = Vec::new();
            for (t, p) in params.iter().enumerate() {
                let take = (*per_tensor).min(p.len());
                let mut idx = sample(&mut rng, p.len(), take).into_vec();
                idx.sort_unstable();
                out.extend(idx.into_iter().map(|j| (t, j)));
            }
            out
        }
        Coords::Largest { per_tensor } => {
            let mut out = Vec::new();
            for (t, a) in analytic.iter().enumerate() {
                let mut idx: Vec<usize> = (0..a.len()).collect();
                idx.sort_by(|&x, &y| a.data()[y].abs().total_cmp(&a.data()[x].abs()).then(x.cmp(&y)));
                idx.truncate(*per_tensor);
                idx.sort_unstable();
                out.extend(idx.into_iter().map(|j| (t, j)));
            }
            out
        }
    }
}

/// Analytic gradient of `f` at `params`, together with the loss value and
/// the recorded stop-gradient values of that evaluation.
pub fn analytic_gradient<F>(params: &[Tensor], f: &F) -> Result<(f64, Vec<Tensor>, Vec<Tensor>)>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::recording();
    let vars = params.iter().map(|p| g.param(p.clone())).collect::<Result<Vec<_>>>()?;
    let loss = f(&g, &vars)?;
    let value = g.item(loss)?;
    let grads = g.backward(loss)?;
    let analytic = vars.iter().map(|&v| grads.wrt(v)).collect();
    Ok((value, analytic, g.take_recorded_stop_gradients()))
}

/// Central-difference gradient entries at the selected coordinates. Every
/// evaluation replays `frozen` stop-gradient values so the numeric
/// derivative treats stop-gradient targets as constants.
pub fn numeric_gradient<F>(
    params: &[Tensor],
    eps: f64,
    at: &[(usize, usize)],
    frozen: &[Tensor],
    f: &F,
) -> Result<Vec<f64>>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let mut work = params.to_vec();
    let eval = |work: &[Tensor]| -> Result<f64> {
        let g = Graph::replaying(frozen.to_vec());
        let vars = work.iter().map(|p| g.constant(p.clone())).collect::<Result<Vec<_>>>()?;
        let loss = f(&g, &vars)?;
        g.item(loss)
    };
    let mut out = Vec::with_capacity(at.len());
    for &(t, j) in at {
        let orig = work[t].data()[j];
        work[t].data_mut()[j] = orig + eps;
        let plus = eval(&work)?;
        work[t].data_mut()[j] = orig - eps;
        let minus = eval(&work)?;
        work[t].data_mut()[j] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar loss from parameter variables on the given graph.
pub fn finite_diff_check<F>(params: &[Tensor], eps: f64, coords: &Coords, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let (loss, analytic, frozen) = analytic_gradient(params, &f)?;
    let at = selected(params, &analytic, coords);
    let numeric = numeric_gradient(params, eps, &at, &frozen, &f)?;
    let inert: Vec<usize> = analytic
        .iter()
        .enumerate()
        .filter(|(_, a)| a.data().iter().all(|v| v.abs() <= INERT_GRADIENT))
        .map(|(t, _)| t)
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: at.len(),
        loss,
        inert,
        inert_max_abs: 0.0,
    };
    for (&(t, j), &n) in at.iter().zip(&numeric) {
        if report.inert.contains(&t) {
            report.inert_max_abs = report.inert_max_abs.max(n.abs());
            continue;
        }
        let e = relative_error(analytic[t].data()[j], n);
        if e > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst = Some((t, j));
        }
    }
    Ok(report)
}
