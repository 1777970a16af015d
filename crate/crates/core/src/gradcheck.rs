//! Central finite-difference check of the summed NLL against the analytic
//! gradient, per parameter tensor.
//!
//! The default stencil is the fourth-order one,
//! `(8(f(x+ε) − f(x−ε)) − (f(x+2ε) − f(x−2ε))) / 12ε`. With the three-point
//! stencil the O(ε²) truncation term alone can exceed a 1e-4 relative
//! tolerance on near-zero gradient entries of deep models.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::Fault;
use crate::data::Batch;
use crate::model;
use crate::{Graph, ModelConfig, ParameterSet, Result};

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub epsilon: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Check at most this many evenly spaced entries per tensor.
    pub max_per_tensor: Option<usize>,
    /// Use the five-point stencil instead of the three-point one.
    pub fourth_order: bool,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            floor: 1e-4,
            max_per_tensor: None,
            fourth_order: true,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |t| t.max_rel_error)
    }
}

fn nll(params: &ParameterSet<f64>, config: &ModelConfig, batch: &Batch) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model::bind(&mut g, config, params, false)?;
    let v = model::nll_sum(&mut g, config, &bound, batch)?;
    Ok(g.values(v)[0])
}

fn analytic(params: &ParameterSet<f64>, config: &ModelConfig, batch: &Batch, fault: Option<Fault>) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    if let Some(f) = fault {
        g.inject_fault(f);
    }
    let bound = model::bind(&mut g, config, params, true)?;
    let v = model::nll_sum(&mut g, config, &bound, batch)?;
    g.backward(v)?;
    Ok(bound
        .leaves
        .iter()
        .zip(params.iter())
        .map(|(&leaf, (_, t))| g.grad(leaf).map_or_else(|| alloc::vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect())
}

fn sample(numel: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < numel => (0..m).map(|k| k * numel / m).collect(),
        _ => (0..numel).collect(),
    }
}

pub fn gradcheck(
    config: &ModelConfig,
    params: &ParameterSet<f64>,
    batch: &Batch,
    options: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let grads = analytic(params, config, batch, options.fault)?;
    let mut work = params.clone();
    let mut tensors = Vec::with_capacity(params.len());
    for (i, grad) in grads.iter().enumerate() {
        let (name, t) = params.entry(i);
        let name = String::from(name);
        let mut check = TensorCheck {
            name: name.clone(),
            checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for k in sample(t.numel(), options.max_per_tensor) {
            let original = t.values()[k];
            let eps = options.epsilon;
            let mut at = |offset: f64| -> Result<f64> {
                work.get_mut(&name).expect("present").values_mut()[k] = original + offset;
                nll(&work, config, batch)
            };
            let near = at(eps)? - at(-eps)?;
            let numeric = if options.fourth_order {
                let far = at(2.0 * eps)? - at(-2.0 * eps)?;
                (8.0 * near - far) / (12.0 * eps)
            } else {
                near / (2.0 * eps)
            };
            work.get_mut(&name).expect("present").values_mut()[k] = original;
            let err = relative_error(grad[k], numeric, options.floor);
            check.checked += 1;
            if err > check.max_rel_error || err.is_nan() {
                check.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                check.worst_index = k;
            }
        }
        tensors.push(check);
    }
    Ok(GradcheckReport { tensors })
}
