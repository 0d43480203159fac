//! Patch, global and representation-alignment losses and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::PatchMask;
use crate::model::ALIGN_HEAD;
use crate::numerics::{Bindings, Graph, Scalar, Var};

/// Distance used by the representation-alignment loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Mse,
    /// Cross-entropy between `softmax(target)` and `softmax(prediction)`.
    Ce,
    L1,
    Cosine,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mse => "mse",
            Self::Ce => "ce",
            Self::L1 => "l1",
            Self::Cosine => "cosine",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "ce" => Ok(Self::Ce),
            "l1" => Ok(Self::L1),
            "cosine" => Ok(Self::Cosine),
            _ => Err(Error::InvalidArgument(format!("unknown objective {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    /// 1-based transformer layer whose CLS feeds the alignment head.
    pub aligned_layer: usize,
    pub objective: Objective,
}

impl LossWeights {
    /// Defaults with the alignment taken from the last of `n_layers`.
    pub fn for_layers(n_layers: usize) -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            aligned_layer: n_layers,
            objective: Objective::Mse,
        }
    }

    pub fn violations(&self, n_layers: usize) -> Vec<String> {
        let mut v = Vec::new();
        for (name, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(l >= 0.0 && l.is_finite()) {
                v.push(format!("{name} = {l} must be finite and non-negative"));
            }
        }
        if self.aligned_layer == 0 || self.aligned_layer > n_layers {
            v.push(format!(
                "aligned_layer {} is outside [1, {n_layers}]",
                self.aligned_layer
            ));
        }
        v
    }
}

/// Mean of `(y_hat - y)^2` over masked rows and all features.
pub fn patch_loss<T: Scalar>(
    g: &mut Graph<T>,
    y_hat: Var,
    y: Var,
    mask: &PatchMask,
) -> Result<Var> {
    if g.shape(y_hat) != g.shape(y) {
        return Err(Error::dim(
            "targets",
            format!("prediction {:?} vs target {:?}", g.shape(y_hat), g.shape(y)),
        ));
    }
    if g.shape(y_hat)[0] != mask.num_patches() {
        return Err(Error::dim(
            "patches",
            format!(
                "{} rows for a {}-patch mask",
                g.shape(y_hat)[0],
                mask.num_patches()
            ),
        ));
    }
    let masked = mask.masked_positions();
    if masked.is_empty() {
        return Err(Error::DegenerateMask {
            masked: 0,
            total: mask.num_patches(),
        });
    }
    let diff = g.sub(y_hat, y)?;
    let rows = g.gather_rows(diff, &masked)?;
    let sq = g.square(rows);
    Ok(g.mean(sq))
}

/// Mean over features of `(cls_student - cls_teacher_mean)^2`.
pub fn global_loss<T: Scalar>(
    g: &mut Graph<T>,
    cls_student: Var,
    cls_teacher_mean: Var,
) -> Result<Var> {
    let diff = g.sub(cls_student, cls_teacher_mean)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Alignment head `p(c) = c W + b`, `[D] -> [D_t]`.
pub fn align_head<T: Scalar>(g: &mut Graph<T>, b: &Bindings, cls: Var) -> Result<Var> {
    let d = g.shape(cls)[0];
    let row = g.reshape(cls, &[1, d])?;
    let w = b.get(&format!("{ALIGN_HEAD}.weight"))?;
    let bias = b.get(&format!("{ALIGN_HEAD}.bias"))?;
    let out = g.linear(row, w, bias)?;
    let dt = g.shape(out)[1];
    g.reshape(out, &[dt])
}

/// Distance between a projected CLS and a target embedding.
pub fn alignment_distance<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    objective: Objective,
) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::dim(
            "target",
            format!(
                "head output {:?} vs target {:?}",
                g.shape(pred),
                g.shape(target)
            ),
        ));
    }
    match objective {
        Objective::Mse => {
            let d = g.sub(pred, target)?;
            let sq = g.square(d);
            Ok(g.mean(sq))
        }
        Objective::L1 => {
            let d = g.sub(pred, target)?;
            let a = g.abs(d);
            Ok(g.mean(a))
        }
        Objective::Cosine => g.cosine_distance(pred, target),
        Objective::Ce => g.soft_cross_entropy(pred, target),
    }
}

pub fn repr_loss<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bindings,
    cls_at_d: Var,
    target: Var,
    objective: Objective,
) -> Result<Var> {
    let pred = align_head(g, b, cls_at_d)?;
    alignment_distance(g, pred, target, objective)
}

/// Unweighted loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_p: f64,
    pub l_g: f64,
    pub l_r: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_p: f64,
    pub l_g: f64,
    pub l_r: f64,
    pub l_total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// `L_p + lambda1 * L_g + lambda2 * L_r`; a non-finite component is a divergence.
pub fn total_loss(parts: LossParts, weights: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("L_p", parts.l_p), ("L_g", parts.l_g), ("L_r", parts.l_r)] {
        if !v.is_finite() {
            return Err(Error::Divergence {
                step: 0,
                detail: format!("{name} is {v}"),
            });
        }
    }
    Ok(LossBreakdown {
        l_p: parts.l_p,
        l_g: parts.l_g,
        l_r: parts.l_r,
        l_total: parts.l_p + weights.lambda1 * parts.l_g + weights.lambda2 * parts.l_r,
        lambda1: weights.lambda1,
        lambda2: weights.lambda2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::BoolGrid;
    use crate::numerics::Tensor;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn patch_loss_examples() {
        let mut g = Graph::<f64>::new();
        let all = PatchMask::from_grid(BoolGrid::filled(2, 2, true), 1);
        let y = g.constant(t(&[4, 3], &[0.5; 12]));
        let l = patch_loss(&mut g, y, y, &all).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let yh = g.constant(t(&[4, 3], &[2.5; 12]));
        let l = patch_loss(&mut g, yh, y, &all).unwrap();
        assert_eq!(g.scalar(l), 4.0);
        let none = PatchMask::none(2, 2);
        assert!(patch_loss(&mut g, yh, y, &none).is_err());
    }

    #[test]
    fn global_loss_arithmetic() {
        let mut g = Graph::<f64>::new();
        let s = 2f64.sqrt();
        let a = g.constant(t(&[2], &[3.0 / s, 4.0 / s]));
        let z = g.constant(t(&[2], &[0.0, 0.0]));
        let l = global_loss(&mut g, a, z).unwrap();
        assert!((g.scalar(l) - 6.25).abs() < 1e-12);
    }

    #[test]
    fn alignment_distances() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t(&[3], &[1.0, -2.0, 0.5]));
        let n = g.constant(t(&[3], &[-1.0, 2.0, -0.5]));
        for obj in [Objective::Mse, Objective::L1, Objective::Cosine] {
            let l = alignment_distance(&mut g, p, p, obj).unwrap();
            assert!(g.scalar(l).abs() < 1e-12, "{obj:?}");
        }
        let l = alignment_distance(&mut g, p, n, Objective::Cosine).unwrap();
        assert!((g.scalar(l) - 2.0).abs() < 1e-12);
        let z = g.constant(t(&[3], &[0.0; 3]));
        assert!(alignment_distance(&mut g, z, p, Objective::Cosine).is_err());
    }

    #[test]
    fn ce_with_uniform_target_is_mean_negative_log_softmax() {
        let mut g = Graph::<f64>::new();
        let logits = [0.2, -1.3, 2.0, 0.7];
        let p = g.constant(t(&[4], &logits));
        let u = g.constant(t(&[4], &[5.0; 4]));
        let l = alignment_distance(&mut g, p, u, Objective::Ce).unwrap();
        let lse = logits.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        let expect = logits.iter().map(|x| lse - x).sum::<f64>() / 4.0;
        assert!((g.scalar(l) - expect).abs() < 1e-12);
    }

    #[test]
    fn total_is_weighted_sum() {
        let parts = LossParts {
            l_p: 1.0,
            l_g: 2.0,
            l_r: 3.0,
        };
        let w = LossWeights::for_layers(2);
        assert_eq!(total_loss(parts, &w).unwrap().l_total, 6.0);
        let zero = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            ..w
        };
        assert_eq!(total_loss(parts, &zero).unwrap().l_total, 1.0);
        let nan = LossParts {
            l_g: f64::NAN,
            ..parts
        };
        assert!(matches!(total_loss(nan, &w), Err(Error::Divergence { .. })));
    }

    #[test]
    fn lambda2_only_moves_the_alignment_term() {
        let parts = LossParts {
            l_p: 0.7,
            l_g: 0.2,
            l_r: 0.4,
        };
        let base = LossWeights::for_layers(2);
        let a = total_loss(
            parts,
            &LossWeights {
                lambda2: 5.0,
                ..base
            },
        )
        .unwrap();
        let b = total_loss(
            parts,
            &LossWeights {
                lambda2: 0.1,
                ..base
            },
        )
        .unwrap();
        assert!(((a.l_total - b.l_total) - 4.9 * 0.4).abs() < 1e-12);
        assert_eq!((a.l_p, a.l_g, a.l_r), (b.l_p, b.l_g, b.l_r));
    }
}
