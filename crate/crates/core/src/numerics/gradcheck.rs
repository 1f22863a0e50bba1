//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Elements whose analytic and numeric gradients are both below this
    /// magnitude are compared absolutely instead of relatively.
    pub magnitude_floor: f64,
    /// At most this many elements per parameter are probed (sampled by seed).
    pub max_probes: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            tolerance: 1e-4,
            magnitude_floor: 1e-8,
            max_probes: 12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupError {
    pub name: String,
    pub max_rel_err: f64,
    pub probes: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale <= floor {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares the analytic gradient of `loss` with central differences for every
/// named parameter.
pub fn check_gradients<T, F>(
    params: &[(String, Tensor<T>)],
    loss: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    check_gradients_with(params, loss, opts, |_| {})
}

/// As [`check_gradients`], with a hook that configures the analytic graph
/// (used to inject faults into backward rules).
pub fn check_gradients_with<T, F, H>(
    params: &[(String, Tensor<T>)],
    loss: F,
    opts: &GradCheckOptions,
    prepare: H,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
    H: Fn(&mut Graph<T>),
{
    let mut g = Graph::new();
    prepare(&mut g);
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let l = loss(&mut g, &vars)?;
    g.backward(l)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .zip(params)
        .map(|(&v, (_, t))| g.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); t.len()]))
        .collect();

    let eval = |p: &[(String, Tensor<T>)]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = p.iter().map(|(_, t)| g.constant(t.clone())).collect();
        let l = loss(&mut g, &vars)?;
        Ok(g.value(l).item()?.f64())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<(String, Tensor<T>)> = params.to_vec();
    let mut groups = Vec::with_capacity(params.len());
    for (pi, (name, t)) in params.iter().enumerate() {
        let n = t.len();
        let idx: Vec<usize> = if n <= opts.max_probes {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_probes).into_vec()
        };
        let mut worst = 0.0f64;
        for &e in &idx {
            let orig = t.data()[e];
            work[pi].1.data_mut()[e] = orig + T::of(opts.step);
            let plus = eval(&work)?;
            work[pi].1.data_mut()[e] = orig - T::of(opts.step);
            let minus = eval(&work)?;
            work[pi].1.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic[pi][e].f64(), numeric, opts.magnitude_floor);
            worst = worst.max(err);
        }
        groups.push(GroupError {
            name: name.clone(),
            max_rel_err: worst,
            probes: idx.len(),
        });
    }
    let passed = groups.iter().all(|g| g.max_rel_err < opts.tolerance);
    Ok(GradCheckReport {
        groups,
        tolerance: opts.tolerance,
        passed,
    })
}
