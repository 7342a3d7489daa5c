//! Objective, optimizer, training loop and gradient checking.

pub mod ablation;
mod gradcheck;

pub use gradcheck::{check_gradients, gradcheck, CoordError, GradcheckOptions, GradcheckReport};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::metrics;
use crate::model::{Checkpoint, ConvTransformer, Moments, ParamStore, SynthesisRequest};
use crate::synthdata::FrameSequence;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean of squared differences.
    Mse,
    /// Mean over frames of the (unsquared) L2 norm of the difference.
    L2,
}

/// Pixel loss between predicted and target frames.
pub fn loss<T: Scalar>(g: &mut Graph<T>, kind: LossKind, pred: Var, target: Var) -> Result<Var> {
    match kind {
        LossKind::Mse => g.mse(pred, target),
        LossKind::L2 => g.l2_mean(pred, target),
    }
}

/// Mean squared error as a graph node.
pub fn mse_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    g.mse(pred, target)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    /// `decay_rate ^ (step / decay_every)` with a real exponent.
    Continuous,
    /// Same with the exponent floored.
    Stepwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    pub decay_rate: f64,
    pub decay_every: u64,
    pub kind: DecayKind,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            base_lr: 1e-4,
            decay_rate: 0.95,
            decay_every: 20_000,
            kind: DecayKind::Continuous,
        }
    }
}

impl Schedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        let e = step as f64 / self.decay_every.max(1) as f64;
        let e = match self.kind {
            DecayKind::Continuous => e,
            DecayKind::Stepwise => e.floor(),
        };
        self.base_lr * self.decay_rate.powf(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments, step counter and learning-rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    /// Updates applied so far.
    pub step: u64,
    pub schedule: Schedule,
    pub adam: AdamConfig,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamStore<T>, schedule: Schedule, adam: AdamConfig) -> Self {
        let zeros = |p: &ParamStore<T>| {
            let mut z = ParamStore::new();
            for (name, t) in p.iter() {
                z.insert(name, Tensor::zeros(t.shape())).expect("unique names");
            }
            z
        };
        OptimState {
            m: zeros(params),
            v: zeros(params),
            step: 0,
            schedule,
            adam,
        }
    }

    /// Learning rate of the next update.
    pub fn lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }
}

pub fn lr_at<T: Scalar>(step: u64, state: &OptimState<T>) -> f64 {
    state.schedule.lr_at(step)
}

/// One bias-corrected Adam update at `lr_at(state.step)`.
///
/// `grads[i]` belongs to the `i`-th parameter of `params`.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut OptimState<T>,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        match g {
            None => return Err(Error::MissingGrad(name.to_string())),
            Some(g) if g.shape() != p.shape() => {
                return Err(Error::ShapeMismatch {
                    op: "adam_step (gradient vs parameter)",
                    left: g.shape(),
                    right: p.shape(),
                })
            }
            _ => {}
        }
    }
    let lr = state.lr();
    let t = (state.step + 1) as f64;
    let AdamConfig { beta1, beta2, eps } = state.adam;
    let c1 = 1.0 - beta1.powf(t);
    let c2 = 1.0 - beta2.powf(t);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((_, p), g), ((_, m), (_, v))) in params.iter_mut().zip(grads).zip(moments) {
        let g = g.as_ref().expect("checked above");
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            let gi = gi.as_f64();
            let mi = beta1 * md[i].as_f64() + (1.0 - beta1) * gi;
            let vi = beta2 * vd[i].as_f64() + (1.0 - beta2) * gi * gi;
            md[i] = T::from_f64(mi);
            vd[i] = T::from_f64(vi);
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            pd[i] = T::from_f64(pd[i].as_f64() - update);
        }
    }
    state.step += 1;
    Ok(())
}

/// How training examples are cut from a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Task {
    /// The first `inputs` frames predict the next `targets`.
    Extrapolate { inputs: usize, targets: usize },
    /// A sequence of `2 * inputs + 1` frames: every second frame is an input
    /// except the middle gap, whose three interior frames are the targets.
    Interpolate { inputs: usize },
}

impl Default for Task {
    fn default() -> Self {
        Task::Extrapolate { inputs: 4, targets: 1 }
    }
}

impl Task {
    /// Frame indices of inputs and targets in a sequence of `len` frames.
    pub fn layout(&self, len: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        match *self {
            Task::Extrapolate { inputs, targets } => {
                if inputs == 0 || targets == 0 || inputs + targets > len {
                    return Err(Error::invalid(format!(
                        "cannot take {inputs} inputs and {targets} targets from {len} frames"
                    )));
                }
                Ok(((0..inputs).collect(), (inputs..inputs + targets).collect()))
            }
            Task::Interpolate { inputs } => {
                if inputs < 2 || inputs % 2 != 0 || len != 2 * inputs + 1 {
                    return Err(Error::invalid(format!(
                        "interpolation with {inputs} inputs needs an even input count and {} frames, got {len}",
                        2 * inputs + 1
                    )));
                }
                let half = inputs / 2;
                let left = (0..half).map(|k| 2 * k);
                let right = (0..half).map(|k| inputs + 2 + 2 * k);
                Ok((left.chain(right).collect(), vec![inputs - 1, inputs, inputs + 1]))
            }
        }
    }
}

/// A synthesis request with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<T> {
    pub request: SynthesisRequest<T>,
    /// `(q, 3, h, w)`.
    pub target: Tensor<T>,
}

impl<T: Scalar> Example<T> {
    pub fn from_sequence(seq: &FrameSequence, task: &Task) -> Result<Self> {
        let (inputs, targets) = task.layout(seq.len())?;
        let (frames, positions) = seq.select(&inputs);
        let (target, target_pos) = seq.select(&targets);
        let frames = frames.cast::<T>();
        let request = match task {
            Task::Extrapolate { targets, .. } => {
                let r = SynthesisRequest::extrapolate(frames, positions, *targets)?;
                if r.query_positions != target_pos {
                    // tokens need not be unit-spaced; keep the true ones
                    SynthesisRequest {
                        query_positions: target_pos,
                        ..r
                    }
                } else {
                    r
                }
            }
            Task::Interpolate { .. } => {
                let n = positions.len();
                let (a, b) = (positions[n / 2 - 1], positions[n / 2]);
                let times: Vec<f64> = target_pos.iter().map(|p| (p - a) / (b - a)).collect();
                SynthesisRequest::interpolate(frames, positions, &times)?
            }
        };
        Ok(Example {
            request,
            target: target.cast(),
        })
    }

    pub fn from_sequences(seqs: &[FrameSequence], task: &Task) -> Result<Vec<Self>> {
        seqs.iter().map(|s| Self::from_sequence(s, task)).collect()
    }
}

/// Training-loop settings; the `[train]` section of a run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub seed: u64,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    /// Sequences whose gradients are averaged per update.
    pub batch: usize,
    pub loss: LossKind,
    /// Validation metrics every this many steps (0: only at the end).
    pub eval_every: u64,
    /// Intermediate checkpoints every this many steps (0: none).
    pub checkpoint_every: u64,
    pub task: Task,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            seed: 0,
            schedule: Schedule::default(),
            adam: AdamConfig::default(),
            batch: 1,
            loss: LossKind::Mse,
            eval_every: 0,
            checkpoint_every: 0,
            task: Task::default(),
        }
    }
}

/// Dataset indices used at `step`: a fresh seeded permutation per epoch.
pub fn batch_indices(seed: u64, step: u64, batch: usize, len: usize) -> Vec<usize> {
    assert!(len > 0, "empty dataset");
    let len64 = len as u64;
    (0..batch as u64)
        .map(|b| {
            let global = step * batch as u64 + b;
            let epoch = global / len64;
            let mut perm: Vec<usize> = (0..len).collect();
            let mix = seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            perm.shuffle(&mut Xoshiro256PlusPlus::seed_from_u64(mix));
            perm[(global % len64) as usize]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the update.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub loss_kind: LossKind,
    pub records: Vec<StepRecord>,
    /// Wall-clock seconds per step. Kept out of the text report so that
    /// reports are byte-reproducible.
    pub step_seconds: Vec<f64>,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Tab-separated `step loss lr psnr ssim`, `-` for absent metrics.
    pub fn to_tsv(&self) -> String {
        let kind = match self.loss_kind {
            LossKind::Mse => "mse",
            LossKind::L2 => "l2",
        };
        let mut s = format!("# loss = {kind}\nstep\tloss\tlr\tpsnr\tssim\n");
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        for r in &self.records {
            writeln!(
                s,
                "{}\t{:.9e}\t{:.6e}\t{}\t{}",
                r.step,
                r.loss,
                r.lr,
                opt(r.psnr),
                opt(r.ssim)
            )
            .unwrap();
        }
        s
    }
}

/// Mean quality of clamped predictions over a set of examples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub mse: f64,
    pub psnr: f64,
    /// `None` for frames smaller than the SSIM window.
    pub ssim: Option<f64>,
}

pub fn evaluate<T: Scalar>(model: &ConvTransformer, params: &ParamStore<T>, set: &[Example<T>]) -> Result<EvalSummary> {
    if set.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let (mut mse, mut psnr, mut ssim) = (0.0, 0.0, 0.0);
    let s = set[0].target.shape();
    let with_ssim = s.h >= metrics::SSIM_WINDOW && s.w >= metrics::SSIM_WINDOW;
    for ex in set {
        let pred = model.predict(params, &ex.request)?;
        mse += metrics::mse(&pred, &ex.target)?;
        for i in 0..pred.shape().n {
            let (p, t) = (pred.item_at(i), ex.target.item_at(i));
            psnr += metrics::psnr(&p, &t)? / pred.shape().n as f64;
            if with_ssim {
                ssim += metrics::ssim(&p, &t)? / pred.shape().n as f64;
            }
        }
    }
    let n = set.len() as f64;
    Ok(EvalSummary {
        mse: mse / n,
        psnr: psnr / n,
        ssim: with_ssim.then_some(ssim / n),
    })
}

/// Owns the parameters and optimizer state of one training run.
pub struct Trainer<T> {
    model: ConvTransformer,
    params: ParamStore<T>,
    optim: OptimState<T>,
    config: TrainConfig,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh parameters initialized from `config.seed`.
    pub fn new(model: ConvTransformer, config: TrainConfig) -> Self {
        let params = model.init_params(config.seed);
        let optim = OptimState::new(&params, config.schedule, config.adam);
        Trainer {
            model,
            params,
            optim,
            config,
        }
    }

    /// Continues from a checkpoint, including its optimizer moments.
    pub fn from_checkpoint(ckpt: Checkpoint<T>, config: TrainConfig) -> Result<Self> {
        let model = ConvTransformer::new(ckpt.model.clone())?;
        ckpt.params.check_layout(model.layout())?;
        let mut optim = OptimState::new(&ckpt.params, config.schedule, config.adam);
        if let Some(Moments { m, v }) = ckpt.moments {
            m.check_layout(model.layout())?;
            v.check_layout(model.layout())?;
            optim.m = m;
            optim.v = v;
        } else if ckpt.step > 0 {
            return Err(Error::Checkpoint(
                "cannot resume: checkpoint has no optimizer moments".into(),
            ));
        }
        optim.step = ckpt.step;
        Ok(Trainer {
            model,
            params: ckpt.params,
            optim,
            config,
        })
    }

    pub fn model(&self) -> &ConvTransformer {
        &self.model
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn optim(&self) -> &OptimState<T> {
        &self.optim
    }

    pub fn step(&self) -> u64 {
        self.optim.step
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.config().clone(),
            step: self.optim.step,
            seed: self.config.seed,
            params: self.params.clone(),
            moments: Some(Moments {
                m: self.optim.m.clone(),
                v: self.optim.v.clone(),
            }),
        }
    }

    /// Loss and parameter gradients of one example.
    pub fn loss_and_grads(&self, ex: &Example<T>) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let out = self.model.forward(&mut g, &p, &ex.request)?;
        let target = g.constant(ex.target.clone());
        let l = loss(&mut g, self.config.loss, out.frames, target)?;
        let value = g.value(l).item().as_f64();
        g.backward(l)?;
        Ok((value, p.iter().map(|&v| g.grad(v).cloned()).collect()))
    }

    /// One update on the mean gradient of `batch`. Returns the mean loss;
    /// parameters are left untouched when it is not finite.
    pub fn train_step(&mut self, batch: &[&Example<T>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut total = 0.0;
        let mut acc: Vec<Option<Tensor<T>>> = Vec::new();
        for ex in batch {
            let (l, grads) = self.loss_and_grads(ex)?;
            total += l;
            if acc.is_empty() {
                acc = grads;
            } else {
                for (a, g) in acc.iter_mut().zip(grads) {
                    if let (Some(a), Some(g)) = (a.as_mut(), g) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x = *x + *y;
                        }
                    }
                }
            }
        }
        let mean = total / batch.len() as f64;
        if !mean.is_finite() {
            return Ok(mean);
        }
        if batch.len() > 1 {
            let k = T::from_f64(1.0 / batch.len() as f64);
            for t in acc.iter_mut().flatten() {
                t.data_mut().iter_mut().for_each(|x| *x = *x * k);
            }
        }
        adam_step(&mut self.params, &acc, &mut self.optim)?;
        Ok(mean)
    }

    /// Trains until `self.step() == until`, writing checkpoints and the
    /// report into `out_dir` when given.
    pub fn run(
        &mut self,
        train: &[Example<T>],
        val: &[Example<T>],
        until: u64,
        out_dir: Option<&Path>,
    ) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).io_context(|| format!("creating {}", dir.display()))?;
        }
        let mut report = TrainReport {
            loss_kind: self.config.loss,
            records: Vec::new(),
            step_seconds: Vec::new(),
            final_checkpoint: None,
        };
        let mut last_checkpoint = None;
        if self.step() >= until {
            if let Some(dir) = out_dir {
                let path = dir.join("final.cvtx");
                self.checkpoint().save(&path)?;
                report.final_checkpoint = Some(path);
                write_report(dir, &report)?;
            }
            return Ok(report);
        }
        while self.step() < until {
            let start = Instant::now();
            let idx = batch_indices(self.config.seed, self.step(), self.config.batch.max(1), train.len());
            let batch: Vec<&Example<T>> = idx.iter().map(|&i| &train[i]).collect();
            let lr = self.optim.lr();
            let l = self.train_step(&batch)?;
            if !l.is_finite() {
                if let Some(dir) = out_dir {
                    write_report(dir, &report)?;
                }
                return Err(Error::NonFiniteLoss {
                    step: self.step() as usize + 1,
                    last_checkpoint,
                });
            }
            let step = self.step();
            let mut rec = StepRecord {
                step,
                loss: l,
                lr,
                psnr: None,
                ssim: None,
            };
            let eval_now = !val.is_empty()
                && ((self.config.eval_every > 0 && step % self.config.eval_every == 0) || step == until);
            if eval_now {
                let s = evaluate(&self.model, &self.params, val)?;
                rec.psnr = Some(s.psnr);
                rec.ssim = s.ssim;
            }
            report.records.push(rec);
            report.step_seconds.push(start.elapsed().as_secs_f64());
            if let Some(dir) = out_dir {
                if self.config.checkpoint_every > 0 && step % self.config.checkpoint_every == 0 {
                    let path = dir.join(format!("ckpt_{step:06}.cvtx"));
                    self.checkpoint().save(&path)?;
                    last_checkpoint = Some(path);
                }
            }
        }
        if let Some(dir) = out_dir {
            let path = dir.join("final.cvtx");
            self.checkpoint().save(&path)?;
            report.final_checkpoint = Some(path);
            write_report(dir, &report)?;
        }
        Ok(report)
    }
}

fn write_report(dir: &Path, report: &TrainReport) -> Result<()> {
    let path = dir.join("report.tsv");
    std::fs::write(&path, report.to_tsv()).io_context(|| format!("writing {}", path.display()))
}

/// Trains a fresh model for `config.steps` steps.
pub fn train<T: Scalar>(
    model: ConvTransformer,
    config: TrainConfig,
    train_set: &[Example<T>],
    val_set: &[Example<T>],
    out_dir: Option<&Path>,
) -> Result<(Trainer<T>, TrainReport)> {
    let steps = config.steps;
    let mut trainer = Trainer::new(model, config);
    let report = trainer.run(train_set, val_set, steps, out_dir)?;
    Ok((trainer, report))
}

#[cfg(test)]
mod tests;
