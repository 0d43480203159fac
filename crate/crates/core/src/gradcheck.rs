//! Whole-model gradient verification against central finite differences.

use std::fmt;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bootstrap::teacher_targets;
use crate::config::RunConfig;
use crate::error::Result;
use crate::masking::clone_masks;
use crate::model::{batch_loss, init_student, teacher_from_student, PreparedClip};
use crate::numerics::{
    compare_grads, eval_loss, finite_difference_grad, grad, grad_mutated, BackwardMutation,
    Bindings, Graph, ParamSet, Tensor, Var,
};

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    pub clones: usize,
    /// Scale one op's backward formula, to confirm the check can fail.
    pub mutation: Option<BackwardMutation>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            clones: 2,
            mutation: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub loss: f64,
    pub n_params: usize,
    /// Worst relative error `|a - n| / (|n| + 1e-8)` per tensor.
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub worst: Option<String>,
    pub tolerance: f64,
    /// Elements failing the relative tolerance.
    pub violations: usize,
    /// Largest `|a - n|` among the failing elements.
    pub max_violation_abs: f64,
    /// Smallest loss change a central difference can resolve: `ulp(loss) / (2 eps)`.
    pub fd_resolution: f64,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }

    /// True when every failing element differs by no more than a few
    /// difference-quotient roundoff units, i.e. the failures sit below what
    /// the numeric side can resolve rather than indicating a wrong formula.
    pub fn failures_within_roundoff(&self) -> bool {
        self.max_violation_abs <= ROUNDOFF_UNITS * self.fd_resolution
    }
}

const ROUNDOFF_UNITS: f64 = 8.0;

fn ulp(x: f64) -> f64 {
    let x = x.abs();
    f64::from_bits(x.to_bits() + 1) - x
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .per_tensor
            .iter()
            .map(|(n, _)| n.len())
            .max()
            .unwrap_or(6)
            .max(6);
        writeln!(f, "{:<width$}  max_rel_error", "tensor")?;
        for (name, err) in &self.per_tensor {
            writeln!(f, "{name:<width$}  {err:.3e}")?;
        }
        writeln!(f, "loss={:.12}", self.loss)?;
        writeln!(f, "params={}", self.n_params)?;
        writeln!(f, "max_rel_error={:.3e}", self.max_rel_error)?;
        if let Some(w) = &self.worst {
            writeln!(f, "worst={w}")?;
        }
        writeln!(f, "tolerance={:.1e}", self.tolerance)?;
        writeln!(f, "violations={}", self.violations)?;
        writeln!(f, "max_violation_abs={:.3e}", self.max_violation_abs)?;
        writeln!(f, "fd_resolution={:.3e}", self.fd_resolution)?;
        if self.violations > 0 {
            writeln!(
                f,
                "violations_within_roundoff={}",
                self.failures_within_roundoff()
            )?;
        }
        writeln!(f, "seconds={:.2}", self.elapsed.as_secs_f64())?;
        write!(f, "result={}", if self.passed() { "pass" } else { "fail" })
    }
}

/// Compares reverse-mode gradients of `loss_fn` with central differences.
pub fn check_gradients<F>(
    params: &ParamSet<f64>,
    opts: &GradcheckOptions,
    loss_fn: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &Bindings) -> Result<Var> + Sync,
{
    let start = Instant::now();
    let (loss, analytic) = match opts.mutation {
        Some(m) => grad_mutated(params, m, &loss_fn)?,
        None => grad(params, &loss_fn)?,
    };
    let numeric = finite_difference_grad(params, opts.epsilon, |q| eval_loss(q, &loss_fn))?;
    let cmp = compare_grads(&analytic, &numeric)?;
    let mut violations = 0;
    let mut max_violation_abs = 0.0f64;
    for ((_, a), (_, n)) in analytic.iter().zip(numeric.iter()) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            if (x - y).abs() / (y.abs() + 1e-8) > opts.tolerance {
                violations += 1;
                max_violation_abs = max_violation_abs.max((x - y).abs());
            }
        }
    }
    Ok(GradcheckReport {
        loss,
        n_params: params.num_scalars(),
        per_tensor: cmp.per_tensor,
        max_rel_error: cmp.max_rel_error,
        worst: cmp.worst,
        tolerance: opts.tolerance,
        violations,
        max_violation_abs,
        fd_resolution: ulp(loss) / (2.0 * opts.epsilon),
        elapsed: start.elapsed(),
    })
}

/// Full training loss of the configured model in f64, on one seeded random
/// input with `opts.clones` masks. The config's dtype is ignored.
pub fn gradcheck(cfg: &RunConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    cfg.validate()?;
    let model = cfg.model();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let student: ParamSet<f64> = init_student(&model, &mut rng)?;
    let teacher = teacher_from_student(&student);
    let spec = Tensor::randn(
        &[model.multires.input_t, model.multires.input_f],
        1.0,
        &mut rng,
    );
    let embedding = Tensor::randn(&[model.target_dim], 1.0, &mut rng);
    let (gh, gw) = model.multires.grid();
    let masks = clone_masks(&mut rng, "gradcheck", gh, gw, &cfg.mask(), opts.clones)?.masks;
    let targets = teacher_targets(&teacher, &model, &spec, cfg.normalize_targets)?;
    let clips = [PreparedClip {
        spec,
        targets,
        embedding,
        masks,
    }];
    let weights = cfg.loss_weights();
    check_gradients(&student, opts, |g, b| {
        batch_loss(g, b, &model, &weights, &clips)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loss_is_zero_on_both_sides() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::<f64>::ones(&[3, 2])).unwrap();
        let r = check_gradients(&p, &GradcheckOptions::default(), |g, _| {
            Ok(g.constant(Tensor::scalar(7.0)))
        })
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.passed());
        assert!(r.to_string().ends_with("result=pass"));
    }
}
