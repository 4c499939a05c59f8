//! SGD-with-momentum training, learning-rate schedule, checkpoints and
//! parameter sweeps.
//!
//! Every random draw comes from a named substream of the configured seed:
//! `init` for weights and means, `shuffle`/`noise` indexed by epoch for
//! batching and dequantization. Resuming at an epoch boundary therefore
//! replays exactly the draws an uninterrupted run would make.

use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, TrainerState};
use crate::data::{DatasetSpec, LabeledSet, Split};
use crate::error::{Error, Result};
use crate::flow::{FlowNetwork, ImageShape, DEFAULT_CLAMP, DEFAULT_HIDDEN, DEFAULT_IMAGE_LEVELS, DEFAULT_IMAGE_TAIL_BLOCKS, DEFAULT_VECTOR_BLOCKS};
use crate::grad::{backward, GradientSet};
use crate::latent::GmmLatent;
use crate::metrics::{evaluate, EvalInputs, MetricsReport};
use crate::model::IbInn;
use crate::objective::{
    add_noise, estimate_ci_xz, loss_total, LossConfig, Objective, DEFAULT_SIGMA, DEFAULT_SMOOTHING,
};
use crate::rng::substream;

/// Loss values above this magnitude count as divergence.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    Ib,
    OnlyLy,
    ClassNll,
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ib" => Ok(LossMode::Ib),
            "only-ly" => Ok(LossMode::OnlyLy),
            "class-nll" => Ok(LossMode::ClassNll),
            _ => Err(Error::InvalidArgument(format!("unknown objective `{s}` (ib, only-ly, class-nll)"))),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Ib => "ib",
            LossMode::OnlyLy => "only-ly",
            LossMode::ClassNll => "class-nll",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: LossMode,
    pub gamma: f64,
    pub sigma: f64,
    pub smoothing: f64,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: u32,
    /// Epochs after which the learning rate is multiplied by `decay`.
    pub milestones: Vec<u32>,
    pub decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub data: DatasetSpec,
    /// Means fixed on the radius-`sqrt(d)` sphere instead of learned.
    pub hypersphere: bool,
    pub learn_prior: bool,
    pub blocks: usize,
    pub hidden: usize,
    pub clamp: f64,
    /// Treat rows as `C x H x W` images and use the multi-scale network.
    pub image: Option<ImageShape>,
    pub train_file: Option<String>,
    pub test_file: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: LossMode::Ib,
            gamma: 1.0,
            sigma: DEFAULT_SIGMA,
            smoothing: DEFAULT_SMOOTHING,
            lr: 0.07,
            momentum: 0.9,
            batch_size: 128,
            epochs: 100,
            milestones: vec![40, 70, 90],
            decay: 0.1,
            clip_norm: 50.0,
            seed: 0,
            data: DatasetSpec::default(),
            hypersphere: false,
            learn_prior: false,
            blocks: DEFAULT_VECTOR_BLOCKS,
            hidden: DEFAULT_HIDDEN,
            clamp: DEFAULT_CLAMP,
            image: None,
            train_file: None,
            test_file: None,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in the order written by
/// [`TrainConfig::to_kv`].
pub const CONFIG_KEYS: &[&str] = &[
    "objective", "gamma", "sigma", "smoothing", "lr", "momentum", "batch_size", "epochs", "milestones", "decay",
    "clip_norm", "seed", "generator", "classes", "dim", "train_size", "test_size", "levels", "hypersphere",
    "learn_prior", "blocks", "hidden", "clamp", "image", "train_file", "test_file",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::InvalidArgument(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("bad value `{value}` for `{key}` (true/false)"))),
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> Result<LossConfig> {
        let objective = match self.objective {
            LossMode::Ib => Objective::ib(self.gamma)?,
            LossMode::OnlyLy => Objective::OnlyLy,
            LossMode::ClassNll => Objective::ClassNll,
        };
        LossConfig::new(objective, self.smoothing)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config()?;
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epoch count must be >= 1".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones must be strictly increasing, got {:?}", self.milestones));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return bad(format!("milestones {:?} must be below the epoch count {}", self.milestones, self.epochs));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay factor must be in (0, 1], got {}", self.decay));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be > 0, got {}", self.sigma));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip norm must be > 0, got {}", self.clip_norm));
        }
        if self.hidden == 0 {
            return bad("hidden width must be >= 1".into());
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return bad(format!("clamp must be > 0, got {}", self.clamp));
        }
        Ok(())
    }

    /// Learning rate during `epoch` (0-based): `lr * decay^k` with `k` the
    /// number of milestones already passed.
    pub fn lr_at(&self, epoch: u32) -> f64 {
        let k = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.decay.powi(k as i32)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "objective" => self.objective = v.parse()?,
            "gamma" => self.gamma = parse(key, v)?,
            "sigma" => self.sigma = parse(key, v)?,
            "smoothing" => self.smoothing = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "milestones" => {
                self.milestones = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "decay" => self.decay = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "seed" => {
                self.seed = parse(key, v)?;
                self.data.seed = self.seed;
            }
            "generator" => self.data.parse_generator(v)?,
            "classes" => self.data.classes = parse(key, v)?,
            "dim" => self.data.dim = parse(key, v)?,
            "train_size" => self.data.train = parse(key, v)?,
            "test_size" => self.data.test = parse(key, v)?,
            "levels" => {
                let f: u32 = parse(key, v)?;
                self.data.levels = (f > 0).then_some(f);
            }
            "hypersphere" => self.hypersphere = parse_bool(key, v)?,
            "learn_prior" => self.learn_prior = parse_bool(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "clamp" => self.clamp = parse(key, v)?,
            "image" => {
                self.image = if v.is_empty() || v == "none" {
                    None
                } else {
                    let parts: Vec<usize> = v.split('x').map(|p| parse(key, p)).collect::<Result<_>>()?;
                    match parts[..] {
                        [c, h, w] => Some(ImageShape::new(c, h, w)),
                        _ => return Err(Error::InvalidArgument(format!("image shape must be CxHxW, got `{v}`"))),
                    }
                }
            }
            "train_file" => self.train_file = (!v.is_empty()).then(|| v.to_string()),
            "test_file" => self.test_file = (!v.is_empty()).then(|| v.to_string()),
            _ => return Err(Error::InvalidArgument(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("config line {}: expected `key = value`", i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::InvalidArgument(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let list = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        let values = [
            self.objective.to_string(),
            self.gamma.to_string(),
            self.sigma.to_string(),
            self.smoothing.to_string(),
            self.lr.to_string(),
            self.momentum.to_string(),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            list(&self.milestones),
            self.decay.to_string(),
            self.clip_norm.to_string(),
            self.seed.to_string(),
            self.data.generator.to_string(),
            self.data.classes.to_string(),
            self.data.dim.to_string(),
            self.data.train.to_string(),
            self.data.test.to_string(),
            self.data.levels.unwrap_or(0).to_string(),
            self.hypersphere.to_string(),
            self.learn_prior.to_string(),
            self.blocks.to_string(),
            self.hidden.to_string(),
            self.clamp.to_string(),
            self.image.map(|s| s.to_string()).unwrap_or_else(|| "none".into()),
            self.train_file.clone().unwrap_or_default(),
            self.test_file.clone().unwrap_or_default(),
        ];
        CONFIG_KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Classical momentum: `v <- m v + g`, `p <- p - lr v`. Nothing is written
/// unless every new parameter and velocity is finite; the offending block
/// index is returned otherwise.
pub fn sgd_step(
    params: &mut [&mut [f64]],
    grads: &[Vec<f64>],
    velocity: &mut [Vec<f64>],
    lr: f64,
    momentum: f64,
) -> std::result::Result<(), usize> {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter block");
    assert_eq!(params.len(), velocity.len(), "one velocity per parameter block");
    for (b, ((p, g), v)) in params.iter().zip(grads).zip(velocity.iter()).enumerate() {
        assert!(p.len() == g.len() && p.len() == v.len(), "block {b} shapes differ");
        let ok = p.iter().zip(g).zip(v).all(|((&p, &g), &v)| {
            let nv = momentum * v + g;
            nv.is_finite() && (p - lr * nv).is_finite()
        });
        if !ok {
            return Err(b);
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u32,
    pub lx: f64,
    pub ly: f64,
    pub total: f64,
    pub gamma: Option<f64>,
    pub sigma: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub const STEP_LOG_HEADER: &str = "step,epoch,lx,ly,total,gamma,sigma,lr,grad_norm";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let gamma = self.gamma.map(|g| g.to_string()).unwrap_or_else(|| "inf".into());
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.epoch, self.lx, self.ly, self.total, gamma, self.sigma, self.lr, self.grad_norm
        )
    }
}

/// Fresh, untrained model for `config` on data of width `dim` with
/// `classes` classes. Scaling layers are still at 1.
pub fn init_model(config: &TrainConfig, dim: usize, classes: usize) -> Result<IbInn> {
    let mut rng = substream(config.seed, "init", 0);
    let flow = match config.image {
        Some(shape) => {
            if shape.dim() != dim {
                return Err(Error::Shape(format!("image shape {shape} does not match data dim {dim}")));
            }
            FlowNetwork::image(shape, &DEFAULT_IMAGE_LEVELS, DEFAULT_IMAGE_TAIL_BLOCKS, config.hidden, config.clamp, &mut rng)?
        }
        None => FlowNetwork::vector(dim, config.blocks, config.hidden, config.clamp, &mut rng),
    };
    let gmm = if config.hypersphere {
        GmmLatent::on_hypersphere(classes, dim, (dim as f64).sqrt(), &mut rng)?
    } else {
        GmmLatent::init(classes, dim, &mut rng)?
    };
    IbInn::new(flow, gmm.with_learnable_prior(config.learn_prior))
}

/// Where in a run a checkpoint was emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointEvent {
    Milestone(u32),
    Final,
}

impl fmt::Display for CheckpointEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointEvent::Milestone(e) => write!(f, "epoch{e}"),
            CheckpointEvent::Final => f.write_str("final"),
        }
    }
}

pub struct Trainer {
    config: TrainConfig,
    loss: LossConfig,
    model: IbInn,
    velocity: Vec<Vec<f64>>,
    epoch: u32,
    step: u64,
    log: Vec<StepRecord>,
}

impl Trainer {
    /// New run: builds the model, then fits every scaling layer to unit
    /// output variance on the first (dequantized) batch.
    pub fn new(config: TrainConfig, train: &LabeledSet) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let mut model = init_model(&config, train.dim(), train.classes)?;
        let order = epoch_order(config.seed, 0, train.len());
        let first = &order[..config.batch_size.min(order.len())];
        let x0 = add_noise(train.x.select(Axis(0), first).view(), config.sigma, &mut substream(config.seed, "init-noise", 0))?;
        model.flow.init_scaling(x0.view())?;
        let velocity = model.param_blocks().iter().map(|(_, b)| vec![0.0; b.len()]).collect();
        let loss = config.loss_config()?;
        Ok(Self { config, loss, model, velocity, epoch: 0, step: 0, log: Vec::new() })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, checkpoint: Checkpoint) -> Result<Self> {
        config.validate()?;
        let state = checkpoint.trainer.ok_or_else(|| Error::Checkpoint("no trainer state to resume from".into()))?;
        let model = checkpoint.model;
        let shapes: Vec<usize> = model.param_blocks().iter().map(|(_, b)| b.len()).collect();
        let saved: Vec<usize> = state.velocity.iter().map(Vec::len).collect();
        if shapes != saved {
            return Err(Error::Checkpoint("momentum buffers do not match the model's parameters".into()));
        }
        let loss = config.loss_config()?;
        Ok(Self { config, loss, model, velocity: state.velocity, epoch: state.epoch, step: state.step, log: Vec::new() })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &IbInn {
        &self.model
    }

    pub fn into_model(self) -> IbInn {
        self.model
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn log(&self) -> &[StepRecord] {
        &self.log
    }

    pub fn take_log(&mut self) -> Vec<StepRecord> {
        std::mem::take(&mut self.log)
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn state(&self) -> TrainerState {
        TrainerState { epoch: self.epoch, step: self.step, velocity: self.velocity.clone() }
    }

    pub fn checkpoint(&self) -> Vec<u8> {
        checkpoint::encode(&self.model, Some(&self.state()))
    }

    /// One pass over `train` in this epoch's shuffled order. On error the
    /// model keeps its last committed parameters.
    pub fn run_epoch(&mut self, train: &LabeledSet) -> Result<()> {
        let epoch = self.epoch;
        let lr = self.config.lr_at(epoch);
        let order = epoch_order(self.config.seed, epoch, train.len());
        let mut noise = substream(self.config.seed, "noise", u64::from(epoch));
        for batch in order.chunks(self.config.batch_size) {
            let x = add_noise(train.x.select(Axis(0), batch).view(), self.config.sigma, &mut noise)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            self.train_step(x.view(), &labels, lr)?;
        }
        self.epoch += 1;
        debug!("epoch {} done, step {}", self.epoch, self.step);
        Ok(())
    }

    fn train_step(&mut self, x: ArrayView2<f64>, labels: &[usize], lr: f64) -> Result<()> {
        let step = self.step;
        let (loss, mut grads): (_, GradientSet) = backward(&self.model, x, labels, &self.loss).map_err(|e| match e {
            Error::NonFinite(what) => Error::Divergence { step, reason: format!("non-finite {what}") },
            other => other,
        })?;
        if !loss.total.is_finite() || loss.total.abs() > DIVERGENCE_THRESHOLD {
            return Err(Error::Divergence {
                step,
                reason: format!("loss {} (L_X {}, L_Y {}) exceeds {DIVERGENCE_THRESHOLD:e}", loss.total, loss.lx, loss.ly),
            });
        }
        let grad_norm = grads.clip_norm(self.config.clip_norm);
        let names: Vec<String> = grads.names().to_vec();
        let mut params = self.model.param_blocks_mut();
        sgd_step(&mut params, grads.blocks(), &mut self.velocity, lr, self.config.momentum)
            .map_err(|b| Error::NonFinite(format!("update of parameter block `{}` at step {step}", names[b])))?;
        self.log.push(StepRecord {
            step,
            epoch: self.epoch,
            lx: loss.lx,
            ly: loss.ly,
            total: loss.total,
            gamma: loss.gamma,
            sigma: self.config.sigma,
            lr,
            grad_norm,
        });
        self.step += 1;
        Ok(())
    }

    /// Trains to the configured epoch count, calling `on_checkpoint` after
    /// each milestone epoch and at the end.
    pub fn run(
        &mut self,
        train: &LabeledSet,
        mut on_checkpoint: impl FnMut(&Trainer, CheckpointEvent) -> Result<()>,
    ) -> Result<()> {
        while !self.is_done() {
            self.run_epoch(train)?;
            if self.config.milestones.contains(&self.epoch) {
                on_checkpoint(self, CheckpointEvent::Milestone(self.epoch))?;
            }
        }
        if let Some(last) = self.log.last() {
            info!("training finished: step {} L_X {:.4} L_Y {:.4}", last.step, last.lx, last.ly);
        }
        on_checkpoint(self, CheckpointEvent::Final)
    }
}

fn epoch_order(seed: u64, epoch: u32, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, "shuffle", u64::from(epoch)));
    order
}

/// Trains a model from scratch, discarding intermediate checkpoints.
pub fn train(config: TrainConfig, train_set: &LabeledSet) -> Result<(IbInn, Vec<StepRecord>)> {
    let mut trainer = Trainer::new(config, train_set)?;
    trainer.run(train_set, |_, _| Ok(()))?;
    let log = trainer.take_log();
    Ok((trainer.into_model(), log))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub gamma: Option<f64>,
    pub sigma: f64,
    /// Test `L_X` under the run's own noise level, nats per sample.
    pub test_lx: Option<f64>,
    pub test_ly: Option<f64>,
    /// Cross-information estimate `CI(X, Z)` from the test `L_X`.
    pub ci_xz: Option<f64>,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

fn sweep_run(config: &TrainConfig, split: &Split, ood: &[(String, ArrayView2<f64>)]) -> Result<(f64, f64, MetricsReport)> {
    let (model, _) = train(config.clone(), &split.train)?;
    let loss = config.loss_config()?;
    let noisy = add_noise(split.test.x.view(), config.sigma, &mut substream(config.seed, "eval-noise", 0))?;
    let b = loss_total(&model, noisy.view(), &split.test.labels, &loss)?;
    let inputs = EvalInputs {
        train_x: split.train.x.view(),
        test_x: split.test.x.view(),
        test_labels: &split.test.labels,
        levels: split.test.levels,
        ood: ood.to_vec(),
    };
    let report = evaluate(&model, &inputs, loss.objective, config.sigma, config.seed)?;
    Ok((b.lx, b.ly, report))
}

fn sweep(split: &Split, ood: &[(String, ArrayView2<f64>)], configs: Vec<TrainConfig>) -> Vec<SweepRow> {
    configs
        .into_iter()
        .map(|cfg| {
            let gamma = cfg.loss_config().ok().and_then(|l| l.objective.gamma());
            match sweep_run(&cfg, split, ood) {
                Ok((lx, ly, report)) => SweepRow {
                    gamma,
                    sigma: cfg.sigma,
                    test_lx: Some(lx),
                    test_ly: Some(ly),
                    ci_xz: Some(estimate_ci_xz(lx, split.test.dim(), cfg.sigma)),
                    metrics: Some(report),
                    error: None,
                },
                Err(e) => {
                    log::warn!("sweep run ({}, sigma {}) failed: {e}", cfg.objective, cfg.sigma);
                    SweepRow { gamma, sigma: cfg.sigma, test_lx: None, test_ly: None, ci_xz: None, metrics: None, error: Some(e.to_string()) }
                }
            }
        })
        .collect()
}

/// One run per `gamma` with shared seed and data. Failed runs are recorded
/// in their row and the sweep continues.
pub fn gamma_sweep(
    base: &TrainConfig,
    gammas: &[f64],
    split: &Split,
    ood: &[(String, ArrayView2<f64>)],
) -> Result<Vec<SweepRow>> {
    if gammas.len() < 2 {
        return Err(Error::InvalidArgument("gamma sweep needs at least 2 values".into()));
    }
    let configs = gammas
        .iter()
        .map(|&g| TrainConfig { objective: LossMode::Ib, gamma: g, ..base.clone() })
        .collect();
    Ok(sweep(split, ood, configs))
}

/// One run per noise level `sigma` with shared seed and data.
pub fn sigma_sweep(
    base: &TrainConfig,
    sigmas: &[f64],
    split: &Split,
    ood: &[(String, ArrayView2<f64>)],
) -> Result<Vec<SweepRow>> {
    if sigmas.len() < 3 {
        return Err(Error::InvalidArgument("sigma sweep needs at least 3 values".into()));
    }
    let configs = sigmas.iter().map(|&s| TrainConfig { sigma: s, ..base.clone() }).collect();
    Ok(sweep(split, ood, configs))
}

/// CSV table of sweep rows: losses, CI estimate, and the metric panels.
/// OoD columns are emitted per OoD set name found in the first good row.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let ood_names: Vec<String> = rows
        .iter()
        .find_map(|r| r.metrics.as_ref())
        .map(|m| m.ood.iter().map(|o| o.name.clone()).collect())
        .unwrap_or_default();
    let mut header =
        String::from("gamma,sigma,test_lx,test_ly,ci_xz,bits_per_dim,error_pct,ece,mce,ice,geo_mean");
    for n in &ood_names {
        header.push_str(&format!(",entropy_increase_{n},typicality_auc_{n}"));
    }
    header.push_str(",error\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = header;
    for r in rows {
        let gamma = r.gamma.map(|g| g.to_string()).unwrap_or_else(|| "inf".into());
        out.push_str(&format!("{gamma},{},{},{},{}", r.sigma, opt(r.test_lx), opt(r.test_ly), opt(r.ci_xz)));
        match &r.metrics {
            Some(m) => {
                out.push_str(&format!(
                    ",{},{},{},{},{},{}",
                    opt(m.bits_per_dim),
                    m.error_pct,
                    m.ece,
                    m.mce,
                    m.ice,
                    m.geo_mean
                ));
                for n in &ood_names {
                    match m.ood.iter().find(|o| &o.name == n) {
                        Some(o) => out.push_str(&format!(",{},{}", o.entropy_increase, o.typicality_auc)),
                        None => out.push_str(",,"),
                    }
                }
            }
            None => out.push_str(&",".repeat(6 + 2 * ood_names.len())),
        }
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        out.push_str(&format!(",{err}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_inlier, Generator};

    #[test]
    fn sgd_plain_step_and_geometric_velocity() {
        let mut p = vec![1.0, -2.0];
        let g = vec![vec![1.0, -2.0]];
        let mut v = vec![vec![0.0, 0.0]];
        sgd_step(&mut [&mut p[..]], &g, &mut v, 1.0, 0.0).unwrap();
        assert_eq!(p, vec![0.0, 0.0]);

        let mut p = [0.0];
        let mut v = vec![vec![0.0]];
        for _ in 0..400 {
            sgd_step(&mut [&mut p[..]], &[vec![1.0]], &mut v, 0.0, 0.9).unwrap();
        }
        assert!((v[0][0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_update_is_not_committed() {
        let mut p = vec![1.0, 2.0];
        let mut v = vec![vec![0.5, 0.5]];
        assert_eq!(sgd_step(&mut [&mut p[..]], &[vec![0.0, f64::NAN]], &mut v, 0.1, 0.9), Err(0));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(v, vec![vec![0.5, 0.5]]);
    }

    #[test]
    fn lr_schedule_is_exact() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.07);
        assert_eq!(cfg.lr_at(39), 0.07);
        assert_eq!(cfg.lr_at(40), 0.07 * 0.1f64.powi(1));
        assert_eq!(cfg.lr_at(70), 0.07 * 0.1f64.powi(2));
        assert_eq!(cfg.lr_at(99), 0.07 * 0.1f64.powi(3));
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        assert!(TrainConfig { milestones: vec![40, 40], ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { milestones: vec![100], ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { gamma: -1.0, ..ok }.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let text = "# toy\nobjective = only-ly\ngamma=10\nmilestones = 5, 8\nepochs = 10\ngenerator = moons-4\nlevels = 0\nimage = 1x4x4\n";
        let cfg = TrainConfig::from_kv(text).unwrap();
        assert_eq!(cfg.objective, LossMode::OnlyLy);
        assert_eq!(cfg.milestones, vec![5, 8]);
        assert_eq!(cfg.data.classes, 4);
        assert_eq!(cfg.data.levels, None);
        assert_eq!(cfg.image, Some(ImageShape::new(1, 4, 4)));
        assert_eq!(TrainConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        let err = TrainConfig::from_kv("a = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("unknown config key"), "{err}");
    }

    #[test]
    fn short_run_is_deterministic_and_resumable() {
        let mut cfg = TrainConfig { epochs: 3, milestones: vec![1], batch_size: 32, blocks: 2, hidden: 8, ..Default::default() };
        cfg.data = DatasetSpec { generator: Generator::Blobs, train: 96, test: 10, ..DatasetSpec::default() };
        let split = make_inlier(&cfg.data).unwrap();

        let mut full = Trainer::new(cfg.clone(), &split.train).unwrap();
        let mut saved = None;
        full.run(&split.train, |t, ev| {
            if ev == CheckpointEvent::Milestone(1) {
                saved = Some(t.checkpoint());
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(full.step(), 9);

        let (again, _) = train(cfg.clone(), &split.train).unwrap();
        assert_eq!(&again, full.model());

        let mut resumed = Trainer::resume(cfg, checkpoint::decode(&saved.unwrap()).unwrap()).unwrap();
        assert_eq!(resumed.epoch(), 1);
        resumed.run(&split.train, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.model(), full.model());
        assert_eq!(resumed.checkpoint(), full.checkpoint());
    }
}
