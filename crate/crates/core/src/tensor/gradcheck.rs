//! Central finite-difference oracle for analytic gradients.

use super::{Graph, Result, Tensor, TensorError, Var};
use crate::params::{Bound, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Denominator floor for the relative error, so that near-zero gradients
    /// are compared on an absolute scale. Round-off in a central difference
    /// is about `1e-16 * |f| / eps`, well below the default.
    pub floor: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckError {
    #[error("function is not deterministic: two identical evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Checks `d f / d x` for a single-input scalar function.
pub fn finite_diff_check<Fun>(f: Fun, x: &Tensor<f64>, opts: CheckOptions) -> Result<GradReport, CheckError>
where
    Fun: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(x), None, opts)
}

/// Checks a scalar function of several inputs. `sample`, when given, lists the
/// `(input, element)` coordinates to perturb; otherwise every element is checked.
pub fn check_many<Fun>(
    f: Fun,
    inputs: &[Tensor<f64>],
    sample: Option<&[(usize, usize)]>,
    opts: CheckOptions,
) -> Result<GradReport, CheckError>
where
    Fun: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vars)?.item())
    };

    let first = eval(inputs)?;
    let second = eval(inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(CheckError::NonDeterministic { first, second });
    }

    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&g, &vars)?;
    g.backward(loss)?;
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().map_or_else(|| vec![0.0; t.len()], |g| g.into_data()))
        .collect();

    let all: Vec<(usize, usize)>;
    let coords = match sample {
        Some(s) => s,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tol: opts.tol,
    };
    let mut work = inputs.to_vec();
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + opts.eps;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - opts.eps;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;

        let numeric = (plus - minus) / (2.0 * opts.eps);
        let analytic = grads[i][j];
        let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
        let rel = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_err || rel.is_nan() {
            report.max_rel_err = rel;
            report.worst = (i, j);
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Checks a scalar function of every trainable entry of a parameter store.
/// `sample` lists `(entry, element)` coordinates; by default every element
/// of every trainable entry is perturbed.
pub fn check_store<Fun>(
    store: &ParamStore<f64>,
    f: Fun,
    sample: Option<&[(usize, usize)]>,
    opts: CheckOptions,
) -> Result<GradReport, CheckError>
where
    Fun: for<'s, 'g> Fn(&'g Graph<f64>, &Bound<'s, 'g, f64>) -> Result<Var<'g, f64>>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::new();
        let p = s.bind(&g, true);
        Ok(f(&g, &p)?.item())
    };
    let first = eval(store)?;
    let second = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(CheckError::NonDeterministic { first, second });
    }

    let g = Graph::new();
    let p = store.bind(&g, false);
    let loss = f(&g, &p)?;
    g.backward(loss)?;
    let grads: Vec<Option<Vec<f64>>> = p.vars().iter().map(|v| v.grad().map(Tensor::into_data)).collect();

    let all: Vec<(usize, usize)>;
    let coords = match sample {
        Some(s) => s,
        None => {
            all = store
                .entries()
                .iter()
                .enumerate()
                .filter(|(_, e)| e.trainable)
                .flat_map(|(i, e)| (0..e.tensor.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tol: opts.tol,
    };
    let mut work = store.clone();
    for &(i, j) in coords {
        let orig = work.get(i).data()[j];
        work.get_mut(i).data_mut()[j] = orig + opts.eps;
        let plus = eval(&work)?;
        work.get_mut(i).data_mut()[j] = orig - opts.eps;
        let minus = eval(&work)?;
        work.get_mut(i).data_mut()[j] = orig;

        let numeric = (plus - minus) / (2.0 * opts.eps);
        let analytic = grads[i].as_ref().map_or(0.0, |g| g[j]);
        let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
        let rel = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_err || rel.is_nan() {
            report.max_rel_err = rel;
            report.worst = (i, j);
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
