//! Central finite-difference checker for graph gradients (64-bit only).
//!
//! A failing element is excused only when its error is fully explained by a
//! kink crossed inside the probe interval: for a piecewise-linear crossing the
//! central-difference error equals half the gap between the two one-sided
//! differences, while a wrong analytic gradient leaves that gap near zero.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::numeric::graph::{Graph, Var};
use crate::numeric::tensor::Tensor;
use crate::rng;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, so near-zero gradients compare absolutely.
    pub floor: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, tol: 1e-6, floor: 1e-3, max_per_input: None, seed: 0 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_nonsmooth: usize,
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub failures: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Weighted sum `Σ wᵢ·outᵢ` with fixed pseudo-random weights in [-1, 1], which keeps
/// gradient magnitudes O(1) regardless of output size.
pub fn project<'g>(out: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let n = out.value().len();
    let mut r = rng::rng(seed);
    let w = (0..n).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect();
    let wv = out.graph().constant(&out.shape(), w)?;
    Ok(out.mul(wv)?.sum())
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t)).collect();
    let loss = f(&g, &vars)?;
    Ok(loss.item())
}

/// Compares backward-pass gradients with central differences for every input whose
/// `requires_grad` is set.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let analytic: Vec<Option<Vec<f64>>> = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t)).collect();
        let loss = f(&g, &vars)?;
        if !loss.item().is_finite() {
            return Err(Error::Numerical("non-finite loss in gradient check".into()));
        }
        g.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| t.requires_grad.then(|| v.grad().unwrap_or_else(|| vec![0.0; t.numel()])))
            .collect()
    };
    let f0 = evaluate(inputs, &f)?;
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    let mut pick = rng::rng(opts.seed);
    let h = opts.step;
    for (ii, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        let n = grad.len();
        let idx: Vec<usize> = match opts.max_per_input {
            Some(k) if k < n => {
                let mut v = sample(&mut pick, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for j in idx {
            let orig = work[ii].data[j];
            work[ii].data[j] = orig + h;
            let fp = evaluate(&work, &f)?;
            work[ii].data[j] = orig - h;
            let fm = evaluate(&work, &f)?;
            work[ii].data[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad[j];
            let err = (a - numeric).abs();
            let rel = err / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel <= opts.tol {
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = Some((ii, j, a, numeric));
                }
                continue;
            }
            let gap = ((fp - f0) / h - (f0 - fm) / h).abs();
            let scale = a.abs().max(numeric.abs()).max(opts.floor);
            let explained = gap > 1e-4 * scale && (err - gap / 2.0).abs() <= 0.1 * gap / 2.0 + opts.tol * scale;
            if explained {
                report.skipped_nonsmooth += 1;
                continue;
            }
            report.failures += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ii, j, a, numeric));
            }
        }
    }
    Ok(report)
}
