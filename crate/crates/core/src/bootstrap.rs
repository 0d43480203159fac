//! Teacher targets, pad-embedding merge, projector and EMA teacher updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::PatchMask;
use crate::model::{ModelConfig, PAD_EMBEDDING, PROJECTOR_CONVS, PROJECTOR_PREFIX};
use crate::multires::multires_forward;
use crate::numerics::{Bindings, Graph, ParamSet, Scalar, Tensor, Var};
use crate::transformer::{encoder_forward, LayerStack, LN_EPS};

/// Detached teacher outputs for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTargets<T: Scalar> {
    /// Mean over layers of the patch tokens, `[P, D]`.
    pub y: Tensor<T>,
    /// Mean over layers of the CLS token, `[D]`.
    pub c_bar: Tensor<T>,
    pub stack: LayerStack<T>,
}

/// Averages every layer's hidden states of the unmasked clip. With
/// `normalize_targets`, each layer is layer-normalized (no affine) per token first.
pub fn teacher_targets<T: Scalar>(
    teacher: &ParamSet<T>,
    cfg: &ModelConfig,
    spec: &Tensor<T>,
    normalize_targets: bool,
) -> Result<TeacherTargets<T>> {
    let mut g = Graph::new();
    let b = Bindings::frozen(&mut g, teacher);
    let tokens = multires_forward(&mut g, &b, &cfg.multires, spec, None)?;
    let states = encoder_forward(&mut g, &b, &cfg.transformer, tokens.tokens)?;
    let mut layers = Vec::with_capacity(states.len());
    for &s in &states {
        layers.push(if normalize_targets {
            g.layer_norm(s, None, None, LN_EPS)?
        } else {
            s
        });
    }
    let (l, d) = (g.shape(layers[0])[0], g.shape(layers[0])[1]);
    let inv = 1.0 / layers.len() as f64;
    let mut acc = vec![0.0f64; l * d];
    for &v in &layers {
        for (a, x) in acc.iter_mut().zip(g.value(v).data()) {
            *a += x.as_f64();
        }
    }
    let mean: Vec<f64> = acc.iter().map(|a| a * inv).collect();
    Ok(TeacherTargets {
        y: Tensor::from_f64(vec![l - 1, d], &mean[d..])?,
        c_bar: Tensor::from_f64(vec![d], &mean[..d])?,
        stack: LayerStack {
            hidden_states: states.iter().map(|&s| g.value(s).clone()).collect(),
        },
    })
}

/// Full `[P, D]` patch sequence: kept rows carry student outputs (CLS dropped),
/// masked rows carry `pad + pos[i]`.
pub fn merge_with_pad<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    kept_positions: &[usize],
    pad: Var,
    pos: Var,
    p: usize,
) -> Result<Var> {
    let rows = g.shape(tokens)[0];
    if rows != kept_positions.len() + 1 {
        return Err(Error::dim(
            "tokens",
            format!(
                "{rows} tokens for {} kept positions plus CLS",
                kept_positions.len()
            ),
        ));
    }
    if g.shape(pos)[0] != p {
        return Err(Error::dim(
            "positions",
            format!("{} positional rows for {p} patches", g.shape(pos)[0]),
        ));
    }
    let mut seen = vec![false; p];
    for &i in kept_positions {
        if i >= p {
            return Err(Error::dim(
                "positions",
                format!("kept position {i} outside {p} patches"),
            ));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidArgument(format!(
                "duplicate kept position {i}"
            )));
        }
    }
    let base = g.broadcast_rows(pad, p)?;
    let base = g.add(base, pos)?;
    if kept_positions.is_empty() {
        return Ok(base);
    }
    let patch_rows: Vec<usize> = (1..rows).collect();
    let patches = g.gather_rows(tokens, &patch_rows)?;
    g.scatter_rows(base, patches, kept_positions)
}

/// Five 5x5 convs (GELU between them) on the `D x gh x gw` grid, then a linear `D/2 -> D`.
pub fn projector_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bindings,
    z: Var,
    gh: usize,
    gw: usize,
) -> Result<Var> {
    let (p, d) = (g.shape(z)[0], g.shape(z)[1]);
    if p != gh * gw {
        return Err(Error::dim(
            "patches",
            format!("{p} rows cannot form a {gh}x{gw} grid"),
        ));
    }
    let zt = g.transpose(z)?;
    let mut x = g.reshape(zt, &[d, gh, gw])?;
    for i in 0..PROJECTOR_CONVS {
        let w = b.get(&format!("{PROJECTOR_PREFIX}conv{i}.weight"))?;
        let bias = b.get(&format!("{PROJECTOR_PREFIX}conv{i}.bias"))?;
        x = g.conv2d(x, w, bias, 1, 2)?;
        if i + 1 < PROJECTOR_CONVS {
            x = g.gelu(x);
        }
    }
    let half = g.shape(x)[0];
    let flat = g.reshape(x, &[half, p])?;
    let rows = g.transpose(flat)?;
    let w = b.get(&format!("{PROJECTOR_PREFIX}out.weight"))?;
    let bias = b.get(&format!("{PROJECTOR_PREFIX}out.bias"))?;
    g.linear(rows, w, bias)
}

/// Pad embedding variable from bindings.
pub fn pad_var(b: &Bindings) -> Result<Var> {
    b.get(PAD_EMBEDDING)
}

/// Which side of the update the scheduled coefficient weighs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmaConvention {
    /// `teacher <- tau * teacher + (1 - tau) * student`, tau rising toward 1.
    #[default]
    Decay,
    /// `teacher <- tau * student + (1 - tau) * teacher` with the same tau schedule.
    Literal,
}

impl EmaConvention {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Decay => "decay",
            Self::Literal => "literal",
        }
    }
}

impl std::str::FromStr for EmaConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decay" => Ok(Self::Decay),
            "literal" => Ok(Self::Literal),
            _ => Err(Error::InvalidArgument(format!(
                "unknown EMA convention {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmaSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub anneal_steps: u64,
    pub step: u64,
    pub convention: EmaConvention,
}

impl EmaSchedule {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, t) in [("tau_start", self.tau_start), ("tau_end", self.tau_end)] {
            if !(t > 0.0 && t < 1.0) {
                v.push(format!("{name} = {t} is outside (0, 1)"));
            }
        }
        if self.tau_start > self.tau_end {
            v.push(format!(
                "tau_start {} exceeds tau_end {}",
                self.tau_start, self.tau_end
            ));
        }
        v
    }

    /// Scheduled coefficient: linear from `tau_start` to `tau_end`, then held.
    pub fn tau(&self) -> f64 {
        if self.anneal_steps == 0 || self.step >= self.anneal_steps {
            return self.tau_end;
        }
        let frac = self.step as f64 / self.anneal_steps as f64;
        self.tau_start + (self.tau_end - self.tau_start) * frac
    }

    /// Weight kept on the current teacher.
    pub fn decay(&self) -> f64 {
        match self.convention {
            EmaConvention::Decay => self.tau(),
            EmaConvention::Literal => 1.0 - self.tau(),
        }
    }

    /// Applies one update at the current step, then advances the step.
    pub fn update<T: Scalar>(
        &mut self,
        teacher: &mut ParamSet<T>,
        student: &ParamSet<T>,
    ) -> Result<()> {
        ema_update(teacher, student, self.decay())?;
        self.step += 1;
        Ok(())
    }
}

/// `teacher <- decay * teacher + (1 - decay) * student` for every teacher tensor,
/// computed as `teacher + (1 - decay) * (student - teacher)`.
pub fn ema_update<T: Scalar>(
    teacher: &mut ParamSet<T>,
    student: &ParamSet<T>,
    decay: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::InvalidArgument(format!(
            "EMA decay {decay} is outside [0, 1]"
        )));
    }
    for (name, t) in teacher.iter() {
        let s = student.get(name)?;
        if s.shape() != t.shape() {
            return Err(Error::dim(
                name.as_str(),
                format!("teacher {:?} vs student {:?}", t.shape(), s.shape()),
            ));
        }
    }
    let rate = T::from_f64(1.0 - decay);
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name)?;
        if decay == 0.0 {
            *t = s.clone();
            continue;
        }
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = *tv + rate * (sv - *tv);
        }
    }
    Ok(())
}

/// Student patch rows at kept positions, read back from a merged sequence.
pub fn unmerge<T: Scalar>(merged: &Tensor<T>, mask: &PatchMask) -> Vec<Vec<T>> {
    mask.kept_positions()
        .into_iter()
        .map(|i| merged.row(i).to_vec())
        .collect()
}
