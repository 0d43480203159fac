//! Gradient computation over named parameters and the finite-difference
//! oracle used to certify it.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::graph::{BackwardMutation, Graph, Var};
use super::params::ParamSet;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Tape handles for every parameter of a [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    /// Registers every entry of `params` as a tracked leaf.
    pub fn track<T: Scalar>(g: &mut Graph<T>, params: &ParamSet<T>) -> Self {
        Self::bind(g, params, true)
    }

    /// Registers every entry as an untracked constant.
    pub fn frozen<T: Scalar>(g: &mut Graph<T>, params: &ParamSet<T>) -> Self {
        Self::bind(g, params, false)
    }

    fn bind<T: Scalar>(g: &mut Graph<T>, params: &ParamSet<T>, tracked: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if tracked {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Evaluates a tape-built loss without computing gradients.
pub fn eval_loss<T, F>(params: &ParamSet<T>, loss_fn: &F) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &Bindings) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = Bindings::frozen(&mut g, params);
    let loss = loss_fn(&mut g, &b)?;
    Ok(g.scalar(loss))
}

/// Loss value and one gradient tensor per parameter (zeros where no gradient flows).
pub fn grad<T, F>(params: &ParamSet<T>, loss_fn: F) -> Result<(T, ParamSet<T>)>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &Bindings) -> Result<Var>,
{
    grad_in(Graph::new(), params, loss_fn)
}

/// [`grad`] with one backward formula deliberately scaled.
pub fn grad_mutated<T, F>(
    params: &ParamSet<T>,
    mutation: BackwardMutation,
    loss_fn: F,
) -> Result<(T, ParamSet<T>)>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &Bindings) -> Result<Var>,
{
    grad_in(Graph::with_mutation(mutation), params, loss_fn)
}

fn grad_in<T, F>(mut g: Graph<T>, params: &ParamSet<T>, loss_fn: F) -> Result<(T, ParamSet<T>)>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &Bindings) -> Result<Var>,
{
    let b = Bindings::track(&mut g, params);
    let loss = loss_fn(&mut g, &b)?;
    let value = g.scalar(loss);
    let mut grads = g.backward(loss)?;
    let mut out = ParamSet::new();
    for (name, var) in b.iter() {
        let t = grads
            .take(*var)
            .unwrap_or_else(|| Tensor::zeros(g.shape(*var)));
        out.insert(name.clone(), t)?;
    }
    Ok((value, out))
}

/// Central differences `(f(x+ε) − f(x−ε)) / 2ε`, one scalar at a time.
///
/// Scalars are processed in parallel chunks; each estimate depends only on
/// its own two loss evaluations, so the result is independent of thread count.
pub fn finite_difference_grad<F>(
    params: &ParamSet<f64>,
    epsilon: f64,
    loss_fn: F,
) -> Result<ParamSet<f64>>
where
    F: Fn(&ParamSet<f64>) -> Result<f64> + Sync,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference epsilon must be positive, got {epsilon}"
        )));
    }
    const CHUNK: usize = 64;
    let mut out = ParamSet::new();
    for (name, tensor) in params.iter() {
        let n = tensor.numel();
        let chunks: Vec<(usize, usize)> = (0..n)
            .step_by(CHUNK)
            .map(|s| (s, (s + CHUNK).min(n)))
            .collect();
        let parts: Vec<Vec<f64>> = chunks
            .par_iter()
            .map(|&(start, end)| -> Result<Vec<f64>> {
                let mut local = params.clone();
                let mut est = Vec::with_capacity(end - start);
                for i in start..end {
                    let orig = tensor.data()[i];
                    local.get_mut(name)?.data_mut()[i] = orig + epsilon;
                    let plus = loss_fn(&local)?;
                    local.get_mut(name)?.data_mut()[i] = orig - epsilon;
                    let minus = loss_fn(&local)?;
                    local.get_mut(name)?.data_mut()[i] = orig;
                    est.push((plus - minus) / (2.0 * epsilon));
                }
                Ok(est)
            })
            .collect::<Result<_>>()?;
        let data = parts.into_iter().flatten().collect();
        out.insert(name.clone(), Tensor::new(tensor.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

/// Per-tensor and overall worst relative error `|a − b| / (|b| + 1e-8)`.
#[derive(Clone, Debug)]
pub struct GradComparison {
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub worst: Option<String>,
}

pub fn compare_grads(analytic: &ParamSet<f64>, numeric: &ParamSet<f64>) -> Result<GradComparison> {
    if !analytic.same_layout(numeric) {
        return Err(Error::dim(
            "gradients",
            "analytic and numeric layouts differ",
        ));
    }
    let mut per_tensor = Vec::new();
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    for ((name, a), (_, n)) in analytic.iter().zip(numeric.iter()) {
        let err = a
            .data()
            .iter()
            .zip(n.data())
            .map(|(&x, &y)| (x - y).abs() / (y.abs() + 1e-8))
            .fold(0.0, f64::max);
        if worst.is_none() || err > max_rel_error {
            max_rel_error = err;
            worst = Some(name.clone());
        }
        per_tensor.push((name.clone(), err));
    }
    Ok(GradComparison {
        per_tensor,
        max_rel_error,
        worst,
    })
}
