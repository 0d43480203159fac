//! Multi-resolution convolutional patchification.
//!
//! Level `k` patch-embeds the previous level with kernel = stride = `r_k / r_{k-1}`,
//! runs a 1x1 / 5x5 / 1x1 conv module, and (below the final level) is brought
//! to the final grid by a strided downsample. The aligned grids are summed,
//! flattened row-major into tokens and given a CLS token.

use rand::Rng;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{interpolate_mask, PatchMask};
use crate::numerics::{Bindings, Graph, ParamSet, Scalar, Tensor, Var};

pub const ENCODER_PREFIX: &str = "encoder.";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosEmbedding {
    /// Fixed 1-D sinusoids over the flattened patch index.
    #[default]
    Sinusoidal,
    /// Trainable `[P, D]` table.
    Learned,
}

impl PosEmbedding {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sinusoidal => "sinusoidal",
            Self::Learned => "learned",
        }
    }
}

impl std::str::FromStr for PosEmbedding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoidal" => Ok(Self::Sinusoidal),
            "learned" => Ok(Self::Learned),
            _ => Err(Error::InvalidArgument(format!(
                "unknown positional embedding {s:?}"
            ))),
        }
    }
}

/// Resolutions, channels and input size of the multi-resolution block.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiResConfig {
    pub resolutions: Vec<usize>,
    pub channels: Vec<usize>,
    pub input_t: usize,
    pub input_f: usize,
    pub pos: PosEmbedding,
}

/// `D_k = D_final * r_k / r_final`, rounded to a multiple of 8 (at least 8); final level exact.
pub fn derived_channels(resolutions: &[usize], d_final: usize) -> Vec<usize> {
    let Some(&r_final) = resolutions.last() else {
        return Vec::new();
    };
    let n = resolutions.len();
    resolutions
        .iter()
        .enumerate()
        .map(|(k, &r)| {
            if k + 1 == n {
                d_final
            } else {
                let raw = d_final as f64 * r as f64 / r_final as f64;
                (((raw / 8.0).round() as usize) * 8).max(8)
            }
        })
        .collect()
}

impl MultiResConfig {
    /// Channels derived from the final width.
    pub fn with_derived_channels(
        resolutions: Vec<usize>,
        d_final: usize,
        input_t: usize,
        input_f: usize,
    ) -> Self {
        let channels = derived_channels(&resolutions, d_final);
        Self {
            resolutions,
            channels,
            input_t,
            input_f,
            pos: PosEmbedding::Sinusoidal,
        }
    }

    /// Every violated constraint, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let r = &self.resolutions;
        if r.is_empty() {
            out.push("resolutions must not be empty".to_string());
            return out;
        }
        if self.channels.len() != r.len() {
            out.push(format!(
                "{} channel widths given for {} resolutions",
                self.channels.len(),
                r.len()
            ));
        }
        if r[0] == 0 {
            out.push("resolutions must be positive".to_string());
        }
        for w in r.windows(2) {
            if w[1] <= w[0] {
                out.push(format!(
                    "resolutions must increase strictly ({} then {})",
                    w[0], w[1]
                ));
            } else if w[0] > 0 && w[1] % w[0] != 0 {
                out.push(format!("resolution {} is not a multiple of {}", w[1], w[0]));
            }
        }
        if self.channels.contains(&0) {
            out.push("channel widths must be positive".to_string());
        }
        let rf = *r.last().unwrap();
        if rf > 0 {
            if self.input_t == 0 || self.input_t % rf != 0 {
                out.push(format!(
                    "input frames {} not divisible by final resolution {rf}",
                    self.input_t
                ));
            }
            if self.input_f == 0 || self.input_f % rf != 0 {
                out.push(format!(
                    "input mel bins {} not divisible by final resolution {rf}",
                    self.input_f
                ));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn levels(&self) -> usize {
        self.resolutions.len()
    }

    pub fn hidden(&self) -> usize {
        *self.channels.last().expect("validated config has levels")
    }

    pub fn final_resolution(&self) -> usize {
        *self
            .resolutions
            .last()
            .expect("validated config has levels")
    }

    /// Final token grid `(T / r_final, F / r_final)`.
    pub fn grid(&self) -> (usize, usize) {
        let r = self.final_resolution();
        (self.input_t / r, self.input_f / r)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn level_grid(&self, k: usize) -> (usize, usize) {
        (
            self.input_t / self.resolutions[k],
            self.input_f / self.resolutions[k],
        )
    }

    /// Patch-embed stride of level `k` (`r_0 = 1`).
    pub fn patch_stride(&self, k: usize) -> usize {
        let prev = if k == 0 { 1 } else { self.resolutions[k - 1] };
        self.resolutions[k] / prev
    }

    pub fn downsample_stride(&self, k: usize) -> usize {
        self.final_resolution() / self.resolutions[k]
    }

    fn in_channels(&self, k: usize) -> usize {
        if k == 0 {
            1
        } else {
            self.channels[k - 1]
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let d = self.hidden();
        for k in 0..self.levels() {
            let (ci, c, s) = (self.in_channels(k), self.channels[k], self.patch_stride(k));
            n += c * ci * s * s + c;
            n += 2 * (c * c + c) + c * c * 25 + c;
            if k + 1 < self.levels() {
                let s = self.downsample_stride(k);
                n += d * c * s * s + d;
            }
        }
        n += d;
        if self.pos == PosEmbedding::Learned {
            n += self.num_patches() * d;
        }
        n
    }
}

fn level_name(k: usize, part: &str) -> String {
    format!("{ENCODER_PREFIX}level{k}.{part}")
}

fn xavier<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}

pub(crate) fn insert_conv<T: Scalar, R: Rng + ?Sized>(
    params: &mut ParamSet<T>,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut R,
) -> Result<()> {
    let w = xavier(&[c_out, c_in, k, k], c_in * k * k, c_out * k * k, rng);
    params.insert(format!("{name}.weight"), w)?;
    params.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]))
}

pub(crate) fn insert_linear<T: Scalar, R: Rng + ?Sized>(
    params: &mut ParamSet<T>,
    name: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut R,
) -> Result<()> {
    params.insert(
        format!("{name}.weight"),
        xavier(&[d_in, d_out], d_in, d_out, rng),
    )?;
    params.insert(format!("{name}.bias"), Tensor::zeros(&[d_out]))
}

/// Adds every multi-resolution parameter under `encoder.`.
pub fn init_multires<T: Scalar, R: Rng + ?Sized>(
    cfg: &MultiResConfig,
    rng: &mut R,
    params: &mut ParamSet<T>,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.hidden();
    for k in 0..cfg.levels() {
        let c = cfg.channels[k];
        insert_conv(
            params,
            &level_name(k, "patch"),
            c,
            cfg.in_channels(k),
            cfg.patch_stride(k),
            rng,
        )?;
        insert_conv(params, &level_name(k, "conv1"), c, c, 1, rng)?;
        insert_conv(params, &level_name(k, "conv2"), c, c, 5, rng)?;
        insert_conv(params, &level_name(k, "conv3"), c, c, 1, rng)?;
        if k + 1 < cfg.levels() {
            insert_conv(
                params,
                &level_name(k, "down"),
                d,
                c,
                cfg.downsample_stride(k),
                rng,
            )?;
        }
    }
    params.insert(
        format!("{ENCODER_PREFIX}cls"),
        Tensor::randn(&[d], 0.02, rng),
    )?;
    if cfg.pos == PosEmbedding::Learned {
        params.insert(
            format!("{ENCODER_PREFIX}pos"),
            Tensor::randn(&[cfg.num_patches(), d], 0.02, rng),
        )?;
    }
    Ok(())
}

/// `pe[p, 2i] = sin(p / 10000^(2i/D))`, `pe[p, 2i+1] = cos(...)`.
pub fn sinusoidal_positions(p: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * d];
    for pos in 0..p {
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * freq;
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Positional table `[P, D]` on the tape (a constant for sinusoids).
pub fn position_var<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bindings,
    cfg: &MultiResConfig,
) -> Result<Var> {
    match cfg.pos {
        PosEmbedding::Learned => b.get(&format!("{ENCODER_PREFIX}pos")),
        PosEmbedding::Sinusoidal => {
            let (p, d) = (cfg.num_patches(), cfg.hidden());
            Ok(g.constant(Tensor::from_f64(vec![p, d], &sinusoidal_positions(p, d))?))
        }
    }
}

fn apply_keep<T: Scalar>(g: &mut Graph<T>, x: Var, keep: Option<Var>) -> Result<Var> {
    match keep {
        Some(k) => g.mul(x, k),
        None => Ok(x),
    }
}

/// One resolution level: patch embed then conv module, with `(1 - mask)`
/// applied after the patch embed and after each conv.
pub fn resolution_block_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bindings,
    cfg: &MultiResConfig,
    k: usize,
    input: Var,
    mask_at_k: Option<&crate::masking::BoolGrid>,
) -> Result<Var> {
    let (h, w) = cfg.level_grid(k);
    let c = cfg.channels[k];
    let keep = match mask_at_k {
        Some(m) => {
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::dim(
                    "mask",
                    format!(
                        "level {k} mask is {}x{}, features are {h}x{w}",
                        m.height(),
                        m.width()
                    ),
                ));
            }
            Some(g.constant(Tensor::from_f64(vec![c, h, w], &m.keep_factors(c))?))
        }
        None => None,
    };
    let conv = |g: &mut Graph<T>, x: Var, part: &str, stride: usize, pad: usize| -> Result<Var> {
        let wv = b.get(&format!("{}.weight", level_name(k, part)))?;
        let bv = b.get(&format!("{}.bias", level_name(k, part)))?;
        g.conv2d(x, wv, bv, stride, pad)
    };
    let x = conv(g, input, "patch", cfg.patch_stride(k), 0)?;
    if g.shape(x)[1..] != [h, w] {
        return Err(Error::dim(
            "spatial",
            format!(
                "level {k} produced {:?}, expected {h}x{w}",
                &g.shape(x)[1..]
            ),
        ));
    }
    let x = apply_keep(g, x, keep)?;
    let x = conv(g, x, "conv1", 1, 0)?;
    let x = g.gelu(x);
    let x = apply_keep(g, x, keep)?;
    let x = conv(g, x, "conv2", 1, 2)?;
    let x = g.gelu(x);
    let x = apply_keep(g, x, keep)?;
    let x = conv(g, x, "conv3", 1, 0)?;
    apply_keep(g, x, keep)
}

/// Token sequence on the tape.
#[derive(Clone, Debug)]
pub struct TokenVars {
    /// `[L, D]`, row 0 is CLS.
    pub tokens: Var,
    /// Flattened grid indices of the patch rows (student path only).
    pub kept_positions: Option<Vec<usize>>,
}

/// Per-level feature grids before downsampling, then summed tokens.
pub fn multires_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bindings,
    cfg: &MultiResConfig,
    spec: &Tensor<T>,
    mask: Option<&PatchMask>,
) -> Result<TokenVars> {
    if spec.shape() != [cfg.input_t, cfg.input_f] {
        return Err(Error::dim(
            "input",
            format!(
                "spectrogram {:?} does not match configured {}x{}",
                spec.shape(),
                cfg.input_t,
                cfg.input_f
            ),
        ));
    }
    let (gh, gw) = cfg.grid();
    if let Some(m) = mask {
        if (m.grid().height(), m.grid().width()) != (gh, gw) {
            return Err(Error::dim(
                "mask",
                format!(
                    "mask is {}x{}, patch grid is {gh}x{gw}",
                    m.grid().height(),
                    m.grid().width()
                ),
            ));
        }
    }
    let mut x = g.constant(spec.clone().reshape(&[1, cfg.input_t, cfg.input_f])?);
    let mut summed: Option<Var> = None;
    let n = cfg.levels();
    for k in 0..n {
        let (h, w) = cfg.level_grid(k);
        let level_mask = match mask {
            Some(m) => Some(interpolate_mask(m.grid(), h, w)?),
            None => None,
        };
        x = resolution_block_forward(g, b, cfg, k, x, level_mask.as_ref())?;
        let aligned = if k + 1 < n {
            let wv = b.get(&format!("{}.weight", level_name(k, "down")))?;
            let bv = b.get(&format!("{}.bias", level_name(k, "down")))?;
            let s = cfg.downsample_stride(k);
            g.conv2d(x, wv, bv, s, 0)?
        } else {
            x
        };
        summed = Some(match summed {
            Some(acc) => g.add(acc, aligned)?,
            None => aligned,
        });
    }
    let d = cfg.hidden();
    let p = gh * gw;
    let flat = g.reshape(summed.expect("at least one level"), &[d, p])?;
    let patches = g.transpose(flat)?;
    let pos = position_var(g, b, cfg)?;
    let patches = g.add(patches, pos)?;
    let (patches, kept) = match mask {
        Some(m) => {
            let kept = m.kept_positions();
            if kept.is_empty() {
                return Err(Error::DegenerateMask {
                    masked: p,
                    total: p,
                });
            }
            (g.gather_rows(patches, &kept)?, Some(kept))
        }
        None => (patches, None),
    };
    let cls = b.get(&format!("{ENCODER_PREFIX}cls"))?;
    let cls = g.reshape(cls, &[1, d])?;
    let tokens = g.concat_rows(&[cls, patches])?;
    Ok(TokenVars {
        tokens,
        kept_positions: kept,
    })
}

/// Evaluated token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T: Scalar> {
    pub tokens: Tensor<T>,
    pub has_cls: bool,
    pub kept_positions: Option<Vec<usize>>,
}

/// Forward without gradients.
pub fn encode_tokens<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &MultiResConfig,
    spec: &Tensor<T>,
    mask: Option<&PatchMask>,
) -> Result<TokenSequence<T>> {
    let mut g = Graph::new();
    let b = Bindings::frozen(&mut g, params);
    let out = multires_forward(&mut g, &b, cfg, spec, mask)?;
    Ok(TokenSequence {
        tokens: g.value(out.tokens).clone(),
        has_cls: true,
        kept_positions: out.kept_positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::BoolGrid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(t: usize) -> MultiResConfig {
        MultiResConfig {
            resolutions: vec![2, 4],
            channels: vec![8, 16],
            input_t: t,
            input_f: t,
            pos: PosEmbedding::Sinusoidal,
        }
    }

    fn params(cfg: &MultiResConfig, seed: u64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        init_multires(cfg, &mut ChaCha8Rng::seed_from_u64(seed), &mut p).unwrap();
        p
    }

    fn spec(t: usize, f: usize, seed: u64) -> Tensor<f64> {
        Tensor::randn(&[t, f], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn derived_channel_rule() {
        assert_eq!(derived_channels(&[2, 4], 16), vec![8, 16]);
        assert_eq!(derived_channels(&[4, 8, 16], 768), vec![192, 384, 768]);
        assert_eq!(derived_channels(&[2, 16], 32), vec![8, 32]);
    }

    #[test]
    fn config_violations_are_listed() {
        let mut c = tiny(28);
        c.resolutions = vec![4, 6];
        let v = c.violations();
        assert!(v.iter().any(|m| m.contains("not a multiple")));
        assert!(v.iter().any(|m| m.contains("not divisible")));
    }

    #[test]
    fn token_count_for_tiny_config() {
        let cfg = tiny(32);
        let p = params(&cfg, 1);
        let out = encode_tokens(&p, &cfg, &spec(32, 32, 2), None).unwrap();
        assert_eq!(out.tokens.shape(), &[65, 16]);
    }

    #[test]
    fn student_gathers_unmasked_tokens() {
        let cfg = tiny(32);
        let p = params(&cfg, 1);
        let spec_m = crate::masking::MaskSpec {
            ratio: 0.8,
            block: 2,
            placement: Default::default(),
        };
        let m =
            crate::masking::inverse_block_mask(&mut ChaCha8Rng::seed_from_u64(5), 8, 8, &spec_m)
                .unwrap();
        assert_eq!(m.masked_count(), 51);
        let out = encode_tokens(&p, &cfg, &spec(32, 32, 2), Some(&m)).unwrap();
        assert_eq!(out.tokens.shape(), &[14, 16]);
        assert_eq!(out.kept_positions.unwrap(), m.kept_positions());
    }

    #[test]
    fn empty_mask_matches_teacher_bitwise() {
        let cfg = tiny(16);
        let p = params(&cfg, 3);
        let x = spec(16, 16, 4);
        let teacher = encode_tokens(&p, &cfg, &x, None).unwrap();
        let student = encode_tokens(&p, &cfg, &x, Some(&PatchMask::none(4, 4))).unwrap();
        assert_eq!(teacher.tokens, student.tokens);
        assert_eq!(student.kept_positions.unwrap(), (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn full_mask_zeroes_level_output() {
        let cfg = tiny(8);
        let p = params(&cfg, 3);
        let mut g = Graph::new();
        let b = Bindings::frozen(&mut g, &p);
        let x = g.constant(spec(8, 8, 1).reshape(&[1, 8, 8]).unwrap());
        let full = BoolGrid::filled(4, 4, true);
        let y = resolution_block_forward(&mut g, &b, &cfg, 0, x, Some(&full)).unwrap();
        assert_eq!(g.shape(y), &[8, 4, 4]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let none = resolution_block_forward(&mut g, &b, &cfg, 0, x, None).unwrap();
        let clear =
            resolution_block_forward(&mut g, &b, &cfg, 0, x, Some(&BoolGrid::filled(4, 4, false)))
                .unwrap();
        assert_eq!(g.value(none), g.value(clear));
    }

    #[test]
    fn param_count_matches_closed_form() {
        for pos in [PosEmbedding::Sinusoidal, PosEmbedding::Learned] {
            let cfg = MultiResConfig { pos, ..tiny(32) };
            assert_eq!(params(&cfg, 0).num_scalars(), cfg.param_count());
        }
    }
}
