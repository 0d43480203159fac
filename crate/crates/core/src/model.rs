//! Full student model: encoder, projector, alignment head and pad embedding,
//! plus the per-clone training loss.

use rand::Rng;
use rayon::prelude::*;

use crate::bootstrap::{merge_with_pad, projector_forward, TeacherTargets};
use crate::error::{Error, Result};
use crate::masking::PatchMask;
use crate::multires::{
    init_multires, insert_conv, insert_linear, multires_forward, position_var, MultiResConfig,
    ENCODER_PREFIX,
};
use crate::numerics::{Bindings, Graph, ParamSet, Scalar, Tensor, Var};
use crate::objective::{
    global_loss, patch_loss, repr_loss, total_loss, LossBreakdown, LossParts, LossWeights,
};
use crate::transformer::{encoder_forward, final_norm, init_transformer, TransformerConfig};

pub const PROJECTOR_PREFIX: &str = "projector.";
pub const PROJECTOR_CONVS: usize = 5;
pub const ALIGN_HEAD: &str = "align_head";
pub const PAD_EMBEDDING: &str = "pad_embedding";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub multires: MultiResConfig,
    pub transformer: TransformerConfig,
    /// Width of the external target embedding.
    pub target_dim: usize,
}

impl ModelConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.multires.violations();
        v.extend(self.transformer.violations());
        if v.is_empty() && self.multires.hidden() != self.transformer.hidden {
            v.push(format!(
                "final channel width {} differs from transformer hidden size {}",
                self.multires.hidden(),
                self.transformer.hidden
            ));
        }
        if self.transformer.hidden % 2 != 0 {
            v.push(format!(
                "hidden size {} must be even for the projector",
                self.transformer.hidden
            ));
        }
        if self.target_dim == 0 {
            v.push("target embedding width must be positive".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn hidden(&self) -> usize {
        self.transformer.hidden
    }

    pub fn encoder_param_count(&self) -> usize {
        self.multires.param_count() + self.transformer.param_count()
    }

    pub fn projector_param_count(&self) -> usize {
        let d = self.hidden();
        let h = d / 2;
        (h * d * 25 + h) + (PROJECTOR_CONVS - 1) * (h * h * 25 + h) + (h * d + d)
    }

    /// Closed-form count of every student tensor.
    pub fn param_count(&self) -> usize {
        let d = self.hidden();
        self.encoder_param_count()
            + self.projector_param_count()
            + (d * self.target_dim + self.target_dim)
            + d
    }
}

/// Freshly initialized student parameters.
pub fn init_student<T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    init_multires(&cfg.multires, rng, &mut p)?;
    init_transformer(&cfg.transformer, rng, &mut p)?;
    let d = cfg.hidden();
    let h = d / 2;
    for i in 0..PROJECTOR_CONVS {
        let c_in = if i == 0 { d } else { h };
        insert_conv(
            &mut p,
            &format!("{PROJECTOR_PREFIX}conv{i}"),
            h,
            c_in,
            5,
            rng,
        )?;
    }
    insert_linear(&mut p, &format!("{PROJECTOR_PREFIX}out"), h, d, rng)?;
    insert_linear(&mut p, ALIGN_HEAD, d, cfg.target_dim, rng)?;
    p.insert(PAD_EMBEDDING, Tensor::randn(&[d], 0.02, rng))?;
    Ok(p)
}

/// Teacher starts as a copy of the student encoder.
pub fn teacher_from_student<T: Scalar>(student: &ParamSet<T>) -> ParamSet<T> {
    student.filter_prefix(ENCODER_PREFIX)
}

/// Clip-level frozen encoder feature: final-norm of the last layer's CLS.
pub fn encode_clip<T: Scalar>(
    encoder: &ParamSet<T>,
    cfg: &ModelConfig,
    spec: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let b = Bindings::frozen(&mut g, encoder);
    let tokens = multires_forward(&mut g, &b, &cfg.multires, spec, None)?;
    let states = encoder_forward(&mut g, &b, &cfg.transformer, tokens.tokens)?;
    let cls = g.row(*states.last().expect("at least one layer"), 0)?;
    let cls = final_norm(&mut g, &b, cls)?;
    Ok(g.value(cls).clone())
}

/// Everything one clip contributes to a step.
#[derive(Clone, Debug)]
pub struct PreparedClip<T: Scalar> {
    pub spec: Tensor<T>,
    pub targets: TeacherTargets<T>,
    pub embedding: Tensor<T>,
    pub masks: Vec<PatchMask>,
}

/// Loss nodes for one masked clone.
#[derive(Clone, Copy, Debug)]
pub struct CloneLoss {
    pub total: Var,
    pub l_p: Var,
    pub l_g: Var,
    pub l_r: Var,
}

pub fn clone_loss<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bindings,
    cfg: &ModelConfig,
    weights: &LossWeights,
    clip: &PreparedClip<T>,
    mask: &PatchMask,
) -> Result<CloneLoss> {
    let n = cfg.transformer.n_layers;
    if weights.aligned_layer == 0 || weights.aligned_layer > n {
        return Err(Error::InvalidArgument(format!(
            "aligned layer {} outside [1, {n}]",
            weights.aligned_layer
        )));
    }
    let tokens = multires_forward(g, b, &cfg.multires, &clip.spec, Some(mask))?;
    let states = encoder_forward(g, b, &cfg.transformer, tokens.tokens)?;
    let last = states[n - 1];
    let kept = tokens.kept_positions.as_deref().unwrap_or(&[]);
    let pos = position_var(g, b, &cfg.multires)?;
    let pad = b.get(PAD_EMBEDDING)?;
    let (gh, gw) = cfg.multires.grid();
    let z = merge_with_pad(g, last, kept, pad, pos, gh * gw)?;
    let y_hat = projector_forward(g, b, z, gh, gw)?;
    let y = g.constant(clip.targets.y.clone());
    let l_p = patch_loss(g, y_hat, y, mask)?;
    let cls = g.row(last, 0)?;
    let c_bar = g.constant(clip.targets.c_bar.clone());
    let l_g = global_loss(g, cls, c_bar)?;
    let cls_d = g.row(states[weights.aligned_layer - 1], 0)?;
    let target = g.constant(clip.embedding.clone());
    let l_r = repr_loss(g, b, cls_d, target, weights.objective)?;
    let wg = g.scale(l_g, T::from_f64(weights.lambda1));
    let wr = g.scale(l_r, T::from_f64(weights.lambda2));
    let total = g.add(l_p, wg)?;
    let total = g.add(total, wr)?;
    Ok(CloneLoss {
        total,
        l_p,
        l_g,
        l_r,
    })
}

/// Mean loss over every (clip, clone) pair, as one graph.
pub fn batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bindings,
    cfg: &ModelConfig,
    weights: &LossWeights,
    clips: &[PreparedClip<T>],
) -> Result<Var> {
    let mut totals = Vec::new();
    for clip in clips {
        for mask in &clip.masks {
            let l = clone_loss(g, b, cfg, weights, clip, mask)?;
            totals.push(g.reshape(l.total, &[1, 1])?);
        }
    }
    if totals.is_empty() {
        return Err(Error::InvalidArgument("batch has no clones".into()));
    }
    let stacked = g.concat_rows(&totals)?;
    Ok(g.mean(stacked))
}

/// Loss breakdown and gradients averaged over every (clip, clone) pair.
///
/// Each pair is evaluated on its own tape in parallel; results are reduced
/// in pair order so the sum does not depend on scheduling.
pub fn batch_grad<T: Scalar>(
    student: &ParamSet<T>,
    cfg: &ModelConfig,
    weights: &LossWeights,
    clips: &[PreparedClip<T>],
) -> Result<(LossBreakdown, ParamSet<T>)> {
    let pairs: Vec<(&PreparedClip<T>, &PatchMask)> = clips
        .iter()
        .flat_map(|c| c.masks.iter().map(move |m| (c, m)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("batch has no clones".into()));
    }
    let results: Vec<(LossParts, ParamSet<T>)> = pairs
        .par_iter()
        .map(|&(clip, mask)| -> Result<_> {
            let mut g = Graph::new();
            let b = Bindings::track(&mut g, student);
            let l = clone_loss(&mut g, &b, cfg, weights, clip, mask)?;
            let parts = LossParts {
                l_p: g.scalar(l.l_p).as_f64(),
                l_g: g.scalar(l.l_g).as_f64(),
                l_r: g.scalar(l.l_r).as_f64(),
            };
            let mut grads = g.backward(l.total)?;
            let mut out = ParamSet::new();
            for (name, var) in b.iter() {
                let t = grads
                    .take(*var)
                    .unwrap_or_else(|| Tensor::zeros(g.shape(*var)));
                out.insert(name.clone(), t)?;
            }
            Ok((parts, out))
        })
        .collect::<Result<_>>()?;
    let n = results.len() as f64;
    let mut sum = LossParts::default();
    let mut acc = student.zeros_like();
    for (parts, grads) in &results {
        sum.l_p += parts.l_p;
        sum.l_g += parts.l_g;
        sum.l_r += parts.l_r;
        for ((_, a), (_, gr)) in acc.iter_mut().zip(grads.iter()) {
            for (x, &y) in a.data_mut().iter_mut().zip(gr.data()) {
                *x = *x + y;
            }
        }
    }
    let inv = T::from_f64(1.0 / n);
    for (_, a) in acc.iter_mut() {
        for x in a.data_mut() {
            *x = *x * inv;
        }
    }
    let mean = LossParts {
        l_p: sum.l_p / n,
        l_g: sum.l_g / n,
        l_r: sum.l_r / n,
    };
    Ok((total_loss(mean, weights)?, acc))
}
