//! Central finite-difference checks against reverse-mode gradients.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward rule it checks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::random::RandomSource;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (label, flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, label: &str, index: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let err = rel_err(analytic, numeric);
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((label.to_string(), index, analytic, numeric));
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.or(self.worst.take());
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

fn scalar_of(g: &Graph, v: Var) -> f64 {
    g.value(v).sum()
}

/// Checks d(sum of f)/d(inputs) for every coordinate of every input.
pub fn check_inputs<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let loss = g.sum(out);
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(scalar_of(&g, out))
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(&g, *v)
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            report.record(&format!("input{k}"), i, analytic.data()[i], numeric);
        }
    }
    Ok(report)
}

/// Checks parameter gradients of `f` (summed to a scalar). When `per_param`
/// is set, that many randomly chosen coordinates are checked per parameter
/// tensor instead of all of them.
pub fn check_params<F>(
    store: &mut ParamStore,
    f: F,
    per_param: Option<usize>,
    rng: &mut RandomSource,
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let loss = g.sum(out);
    let grads = g.backward(loss)?;
    g.accumulate_param_grads(&grads, store);
    drop(g);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        Ok(scalar_of(&g, out))
    };

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).value.len();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < n => (0..k).map(|_| rng.index(n)).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let analytic = store.get(id).grad.data()[i];
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + step;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - step;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let label = store.get(id).name.clone();
            report.record(&label, i, analytic, numeric);
        }
    }
    Ok(report)
}
