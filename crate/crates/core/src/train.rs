//! Dataset preparation, the pre-training loop and run orchestration.

use std::collections::VecDeque;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{
    clip_features, corpus_stats, load_corpus, LabeledClip, MelSpectrogram, MANIFEST_FILE,
};
use crate::bootstrap::{teacher_targets, EmaSchedule};
use crate::checkpoint::{read_header, Checkpoint, RngState};
use crate::config::{RunConfig, TargetEncoder};
use crate::error::{Error, Result};
use crate::external::{
    ExternalEncoder, FileBackedEncoder, SyntheticOracleEncoder, TargetEmbedding,
};
use crate::masking::clone_masks;
use crate::model::{
    batch_grad, encode_clip, init_student, teacher_from_student, ModelConfig, PreparedClip,
};
use crate::numerics::{DType, ParamSet, Scalar, Tensor};
use crate::objective::LossBreakdown;
use crate::optimizer::OptState;
use crate::probe::{balanced_split, evaluate_probe, train_probe, EvalReport};

pub const CHECKPOINT_FILE: &str = "checkpoint.cat";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LOCK_FILE: &str = "run.lock";
const HISTORY: usize = 64;

/// Model-ready spectrograms of a labeled corpus.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub specs: Vec<MelSpectrogram>,
    /// Mean and standard deviation applied to every spectrogram, if any.
    pub input_norm: Option<(f64, f64)>,
}

impl Dataset {
    /// Features for every clip. With `normalize_input`, `norm` fixes the
    /// statistics; otherwise they are measured on this corpus.
    pub fn from_clips(
        cfg: &RunConfig,
        clips: &[LabeledClip],
        norm: Option<(f64, f64)>,
    ) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::InvalidArgument("corpus is empty".into()));
        }
        let mel = cfg.mel();
        let raw: Vec<MelSpectrogram> = clips
            .par_iter()
            .map(|c| clip_features(&c.clip, &mel, cfg.frames))
            .collect::<Result<_>>()?;
        let (specs, input_norm) = if cfg.normalize_input {
            let (mean, std) = match norm {
                Some(n) => n,
                None => corpus_stats(&raw)?,
            };
            let specs = raw
                .iter()
                .map(|s| s.normalize(mean, std))
                .collect::<Result<_>>()?;
            (specs, Some((mean, std)))
        } else {
            (raw, None)
        };
        Ok(Self {
            ids: clips.iter().map(|c| c.id.clone()).collect(),
            labels: clips.iter().map(|c| c.label).collect(),
            specs,
            input_norm,
        })
    }

    pub fn load(cfg: &RunConfig, norm: Option<(f64, f64)>) -> Result<Self> {
        let clips = load_corpus(cfg.corpus_dir.join(MANIFEST_FILE))?;
        Self::from_clips(cfg, &clips, norm)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn inputs<T: Scalar>(&self) -> Vec<Tensor<T>> {
        self.specs.iter().map(|s| s.data().cast()).collect()
    }
}

/// The external encoder selected by the configuration.
pub fn target_encoder(cfg: &RunConfig) -> Result<Box<dyn ExternalEncoder>> {
    Ok(match cfg.target_encoder {
        TargetEncoder::Oracle => Box::new(SyntheticOracleEncoder::new(
            cfg.oracle_seed,
            cfg.n_mels,
            cfg.target_dim,
        )?),
        TargetEncoder::File => Box::new(FileBackedEncoder::open(&cfg.target_file)?),
    })
}

/// One target per clip, in dataset order.
pub fn embed_dataset(
    encoder: &dyn ExternalEncoder,
    data: &Dataset,
) -> Result<Vec<TargetEmbedding>> {
    let out: Vec<TargetEmbedding> = data
        .ids
        .par_iter()
        .zip(&data.specs)
        .map(|(id, spec)| encoder.embed(id, spec))
        .collect::<Result<_>>()?;
    if let Some(e) = out.iter().find(|e| e.vector.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!(
            "target embedding of {}",
            e.clip_id
        )));
    }
    Ok(out)
}

/// Clip-level features of every clip under a frozen encoder.
pub fn encode_dataset<T: Scalar>(
    encoder: &ParamSet<T>,
    model: &ModelConfig,
    data: &Dataset,
) -> Result<Vec<Vec<f64>>> {
    data.inputs::<T>()
        .par_iter()
        .map(|x| {
            Ok(encode_clip(encoder, model, x)?
                .data()
                .iter()
                .map(|v| v.as_f64())
                .collect())
        })
        .collect()
}

/// Linear probe on a class-balanced split of `features`, scored on the held-out part.
pub fn probe_features(
    cfg: &RunConfig,
    features: &[Vec<f64>],
    labels: &[usize],
) -> Result<EvalReport> {
    let (train, test) = balanced_split(labels, cfg.probe_test_fraction, cfg.probe_seed)?;
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        (
            idx.iter().map(|&i| features[i].clone()).collect(),
            idx.iter().map(|&i| labels[i]).collect(),
        )
    };
    let (xtr, ytr) = pick(&train);
    let (xte, yte) = pick(&test);
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let head = train_probe(&xtr, &ytr, n_classes, &cfg.probe())?;
    evaluate_probe(&head, &xte, &yte)
}

/// Probe result for one checkpoint.
#[derive(Clone, Debug, Serialize)]
pub struct ProbeOutcome {
    pub step: u64,
    pub random_init: bool,
    pub report: EvalReport,
}

/// Probes the student encoder stored in a checkpoint on the corpus its
/// configuration names (or `corpus_dir`), using the checkpoint's input
/// statistics. `random_init` swaps in the run's step-0 weights as a baseline.
pub fn probe_checkpoint(
    path: &Path,
    corpus_dir: Option<&Path>,
    random_init: bool,
) -> Result<ProbeOutcome> {
    match read_header(path)?.dtype {
        DType::F32 => probe_typed::<f32>(path, corpus_dir, random_init),
        DType::F64 => probe_typed::<f64>(path, corpus_dir, random_init),
    }
}

fn probe_typed<T: Scalar>(
    path: &Path,
    corpus_dir: Option<&Path>,
    random_init: bool,
) -> Result<ProbeOutcome> {
    let ckpt = Checkpoint::<T>::load(path)?;
    let mut cfg = ckpt.config.clone();
    if let Some(dir) = corpus_dir {
        cfg.corpus_dir = dir.to_path_buf();
    }
    let data = Dataset::load(&cfg, ckpt.input_norm)?;
    if data.n_classes() < 2 {
        return Err(Error::InvalidArgument(
            "probe corpus needs at least two classes".into(),
        ));
    }
    let model = cfg.model();
    let encoder = if random_init {
        let fresh: ParamSet<T> = init_student(&model, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        teacher_from_student(&fresh)
    } else {
        teacher_from_student(&ckpt.student)
    };
    let features = encode_dataset(&encoder, &model, &data)?;
    Ok(ProbeOutcome {
        step: ckpt.step,
        random_init,
        report: probe_features(&cfg, &features, &data.labels)?,
    })
}

/// Logged once per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Steps completed, counting this one.
    pub step: u64,
    #[serde(rename = "L_p")]
    pub l_p: f64,
    #[serde(rename = "L_g")]
    pub l_g: f64,
    #[serde(rename = "L_r")]
    pub l_r: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub lr: f64,
    /// Weight the EMA update kept on the old teacher.
    pub tau: f64,
    pub wall_ms: f64,
}

fn at_step(e: Error, step: u64) -> Error {
    match e {
        Error::Divergence { detail, .. } => Error::Divergence { step, detail },
        other => other,
    }
}

pub struct Trainer<T: Scalar> {
    cfg: RunConfig,
    model: ModelConfig,
    inputs: Vec<Tensor<T>>,
    embeddings: Vec<Tensor<T>>,
    ids: Vec<String>,
    input_norm: Option<(f64, f64)>,
    pub student: ParamSet<T>,
    pub teacher: ParamSet<T>,
    pub opt: OptState<T>,
    pub ema: EmaSchedule,
    rng: ChaCha8Rng,
    step: u64,
    history: VecDeque<StepRecord>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh run: parameters and the batch/mask stream both come from `cfg.seed`.
    pub fn new(cfg: RunConfig, data: &Dataset, targets: &[TargetEmbedding]) -> Result<Self> {
        cfg.validate()?;
        let model = cfg.model();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let student = init_student(&model, &mut rng)?;
        let teacher = teacher_from_student(&student);
        let opt = OptState::new(&student, cfg.adamw());
        let ema = cfg.ema();
        Self::assemble(
            cfg, model, data, targets, student, teacher, opt, ema, rng, 0,
        )
    }

    pub fn from_checkpoint(
        ckpt: Checkpoint<T>,
        data: &Dataset,
        targets: &[TargetEmbedding],
    ) -> Result<Self> {
        ckpt.config.validate()?;
        let model = ckpt.config.model();
        let rng = ckpt.rng.restore()?;
        let fresh: ParamSet<T> = init_student(&model, &mut ChaCha8Rng::seed_from_u64(0))?;
        if !fresh.same_layout(&ckpt.student)
            || !teacher_from_student(&fresh).same_layout(&ckpt.teacher)
        {
            return Err(Error::InvalidArgument(
                "checkpoint tensors do not match its configuration".into(),
            ));
        }
        if data.input_norm != ckpt.input_norm {
            return Err(Error::InvalidArgument(
                "dataset normalization differs from the checkpoint".into(),
            ));
        }
        Self::assemble(
            ckpt.config,
            model,
            data,
            targets,
            ckpt.student,
            ckpt.teacher,
            ckpt.opt,
            ckpt.ema,
            rng,
            ckpt.step,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: RunConfig,
        model: ModelConfig,
        data: &Dataset,
        targets: &[TargetEmbedding],
        student: ParamSet<T>,
        teacher: ParamSet<T>,
        opt: OptState<T>,
        ema: EmaSchedule,
        rng: ChaCha8Rng,
        step: u64,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument(
                "training needs at least one clip".into(),
            ));
        }
        if targets.len() != data.len() {
            return Err(Error::dim(
                "targets",
                format!("{} targets for {} clips", targets.len(), data.len()),
            ));
        }
        for (t, id) in targets.iter().zip(&data.ids) {
            if &t.clip_id != id || t.dim() != cfg.target_dim {
                return Err(Error::dim(
                    "targets",
                    format!(
                        "target for {} has id {} and dim {}, expected dim {}",
                        id,
                        t.clip_id,
                        t.dim(),
                        cfg.target_dim
                    ),
                ));
            }
        }
        let want = [model.multires.input_t, model.multires.input_f];
        if let Some(s) = data
            .specs
            .iter()
            .find(|s| [s.frames(), s.mel_bins()] != want)
        {
            return Err(Error::dim(
                "input",
                format!(
                    "spectrogram is {}x{}, model expects {}x{}",
                    s.frames(),
                    s.mel_bins(),
                    want[0],
                    want[1]
                ),
            ));
        }
        Ok(Self {
            inputs: data.inputs(),
            embeddings: targets
                .iter()
                .map(|t| t.to_tensor())
                .collect::<Result<_>>()?,
            ids: data.ids.clone(),
            input_norm: data.input_norm,
            cfg,
            model,
            student,
            teacher,
            opt,
            ema,
            rng,
            step,
            history: VecDeque::with_capacity(HISTORY),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Most recent records, oldest first.
    pub fn history(&self) -> impl Iterator<Item = &StepRecord> {
        self.history.iter()
    }

    /// Sample a batch and its clone masks, take one optimizer step, then move the teacher.
    pub fn step(&mut self) -> Result<StepRecord> {
        let start = Instant::now();
        let s = self.step;
        let n_batch = self.cfg.batch_clips.min(self.inputs.len());
        let picked = sample(&mut self.rng, self.inputs.len(), n_batch).into_vec();
        let (gh, gw) = self.model.multires.grid();
        let mask_spec = self.cfg.mask();
        let masks = picked
            .iter()
            .map(|&i| {
                clone_masks(
                    &mut self.rng,
                    &self.ids[i],
                    gh,
                    gw,
                    &mask_spec,
                    self.cfg.clones,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let clips: Vec<PreparedClip<T>> = picked
            .par_iter()
            .zip(masks)
            .map(|(&i, batch)| {
                let targets = teacher_targets(
                    &self.teacher,
                    &self.model,
                    &self.inputs[i],
                    self.cfg.normalize_targets,
                )?;
                Ok(PreparedClip {
                    spec: self.inputs[i].clone(),
                    targets,
                    embedding: self.embeddings[i].clone(),
                    masks: batch.masks,
                })
            })
            .collect::<Result<_>>()?;
        let (losses, grads): (LossBreakdown, _) =
            batch_grad(&self.student, &self.model, &self.cfg.loss_weights(), &clips)
                .map_err(|e| at_step(e, s))?;
        let lr = self.cfg.lr_schedule().lr_at(s);
        self.opt
            .step(&mut self.student, &grads, lr)
            .map_err(|e| at_step(e, s))?;
        if !self.student.all_finite() {
            return Err(Error::Divergence {
                step: s,
                detail: "parameters became non-finite".into(),
            });
        }
        let tau = self.ema.decay();
        self.ema.update(&mut self.teacher, &self.student)?;
        self.step += 1;
        let record = StepRecord {
            step: self.step,
            l_p: losses.l_p,
            l_g: losses.l_g,
            l_r: losses.l_r,
            l_total: losses.l_total,
            lr,
            tau,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        if self.history.len() == HISTORY {
            self.history.pop_front();
        }
        self.history.push_back(record.clone());
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.cfg.clone(),
            step: self.step,
            student: self.student.clone(),
            teacher: self.teacher.clone(),
            opt: self.opt.clone(),
            ema: self.ema,
            rng: RngState::capture(&self.rng),
            input_norm: self.input_norm,
        }
    }
}

/// Holds the output-directory lock for the lifetime of a run.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::State(format!(
                "{} exists; another run is using {}",
                path.display(),
                dir.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    /// Continue from `output_dir/checkpoint.cat` when it exists.
    pub resume: bool,
    /// Stop after this many total steps instead of `total_steps`.
    pub stop_at: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub first_step: u64,
    pub last_step: u64,
    pub records: Vec<StepRecord>,
}

/// Runs (or resumes) pre-training, checkpointing every `checkpoint_every_steps`
/// and at the end. On divergence the last written checkpoint is left in place.
pub fn pretrain(cfg: &RunConfig, opts: &PretrainOptions) -> Result<PretrainSummary> {
    match cfg.dtype {
        DType::F32 => pretrain_typed::<f32>(cfg, opts),
        DType::F64 => pretrain_typed::<f64>(cfg, opts),
    }
}

fn pretrain_typed<T: Scalar>(cfg: &RunConfig, opts: &PretrainOptions) -> Result<PretrainSummary> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let _lock = RunLock::acquire(dir)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let metrics_path = dir.join(METRICS_FILE);

    let resumed = if opts.resume && ckpt_path.exists() {
        let ckpt = Checkpoint::<T>::load(&ckpt_path)?;
        if !same_run(&ckpt.config, cfg) {
            return Err(Error::Config(vec![
                "configuration differs from the checkpoint being resumed".to_string(),
            ]));
        }
        Some(ckpt)
    } else {
        None
    };
    let norm = resumed.as_ref().and_then(|c| c.input_norm);
    let data = Dataset::load(cfg, norm)?;
    let targets = embed_dataset(target_encoder(cfg)?.as_ref(), &data)?;
    let mut trainer = match resumed {
        Some(ckpt) => {
            truncate_metrics(&metrics_path, ckpt.step)?;
            Trainer::from_checkpoint(ckpt, &data, &targets)?
        }
        None => {
            if metrics_path.exists() {
                fs::remove_file(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
            }
            Trainer::new(cfg.clone(), &data, &targets)?
        }
    };

    let first_step = trainer.step_count();
    let end = opts.stop_at.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut records = Vec::new();
    while trainer.step_count() < end {
        let rec = trainer.step()?;
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(log, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        records.push(rec);
        if trainer.step_count() % cfg.checkpoint_every_steps == 0 {
            trainer.checkpoint().save(&ckpt_path)?;
        }
    }
    trainer.checkpoint().save(&ckpt_path)?;
    Ok(PretrainSummary {
        checkpoint: ckpt_path,
        metrics: metrics_path,
        first_step,
        last_step: trainer.step_count(),
        records,
    })
}

/// Equal apart from where the run reads and writes files.
fn same_run(a: &RunConfig, b: &RunConfig) -> bool {
    let strip = |c: &RunConfig| RunConfig {
        corpus_dir: PathBuf::new(),
        output_dir: PathBuf::new(),
        target_file: PathBuf::new(),
        ..c.clone()
    };
    strip(a) == strip(b)
}

/// Drops metric lines written after the checkpoint being resumed.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines() {
        let rec: StepRecord = serde_json::from_str(line).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        if rec.step <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(kept.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{make_synth_corpus, SynthConfig};

    fn small() -> (RunConfig, Dataset, Vec<TargetEmbedding>) {
        let cfg = RunConfig {
            batch_clips: 4,
            clones: 2,
            total_steps: 6,
            warmup_steps: 2,
            ..Default::default()
        };
        let clips = make_synth_corpus(&SynthConfig {
            n_clips: 8,
            ..Default::default()
        })
        .unwrap();
        let data = Dataset::from_clips(&cfg, &clips, None).unwrap();
        let targets = embed_dataset(target_encoder(&cfg).unwrap().as_ref(), &data).unwrap();
        (cfg, data, targets)
    }

    #[test]
    fn steps_are_finite_and_advance_state() {
        let (cfg, data, targets) = small();
        let mut t = Trainer::<f32>::new(cfg, &data, &targets).unwrap();
        let before = t.teacher.clone();
        let r = t.step().unwrap();
        assert_eq!(r.step, 1);
        assert!(r.l_total.is_finite() && r.l_p > 0.0);
        assert_eq!(r.lr, 0.0);
        assert_eq!(t.ema.step, 1);
        assert_eq!(t.opt.t, 1);
        // Zero learning rate still applies no decay and no update at step 0.
        assert_eq!(t.teacher, before);
        t.step().unwrap();
        assert_ne!(t.teacher, before);
    }

    #[test]
    fn checkpoint_resume_matches_straight_run() {
        let (cfg, data, targets) = small();
        let mut straight = Trainer::<f64>::new(cfg.clone(), &data, &targets).unwrap();
        for _ in 0..4 {
            straight.step().unwrap();
        }
        let mut first = Trainer::<f64>::new(cfg, &data, &targets).unwrap();
        first.step().unwrap();
        first.step().unwrap();
        let bytes = first.checkpoint().encode();
        let ckpt = Checkpoint::<f64>::decode(&bytes, Path::new("mem")).unwrap();
        let mut resumed = Trainer::from_checkpoint(ckpt, &data, &targets).unwrap();
        resumed.step().unwrap();
        resumed.step().unwrap();
        assert_eq!(
            resumed.checkpoint().encode(),
            straight.checkpoint().encode()
        );
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(Error::State(_))));
        drop(a);
        RunLock::acquire(dir.path()).unwrap();
    }
}
