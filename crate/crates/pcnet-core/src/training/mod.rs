//! SGD training over pair batches: momentum + weight decay, per-epoch cosine
//! annealing, the pair-batch loss graph, and checkpointing.
//!
//! One exclusive trainer owns the parameters. Each batch runs on a fresh
//! single-threaded tape; parallelism lives inside the kernels, so a run is
//! bitwise deterministic for a given `(seed, config)`.

pub mod checkpoint;

use crate::attention;
use crate::data::{
    self, batch_tensor, channel_stats, AugmentPolicy, ChannelStats, Dataset,
};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalOptions, PreparedSet};
use crate::model::{
    self, ce_sum_on_tape, hinge_sum_on_tape, BackboneConfig, Model, ModelConfig, ModelVars,
};
use crate::pairing::{self, BatchSpec, Metric, PairAssignment, Strategy};
use crate::rng::stream_rng;
use crate::scalar::{Dtype, Scalar};
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::path::Path;

// ── configuration ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    Single,
    Multi,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Single => write!(f, "single"),
            Architecture::Multi => write!(f, "multi"),
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" => Ok(Architecture::Single),
            "multi" => Ok(Architecture::Multi),
            other => Err(Error::Config(format!("unknown architecture '{}'", other))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Representation {
    SelfOnly,
    MutualOnly,
    Both,
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Representation::SelfOnly => write!(f, "self"),
            Representation::MutualOnly => write!(f, "mutual"),
            Representation::Both => write!(f, "self+mutual"),
        }
    }
}

impl std::str::FromStr for Representation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "self" => Ok(Representation::SelfOnly),
            "mutual" => Ok(Representation::MutualOnly),
            "both" | "self+mutual" => Ok(Representation::Both),
            other => Err(Error::Config(format!("unknown representation '{}'", other))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    CrossEntropy,
    CrossEntropyRanking,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Objective::CrossEntropy => write!(f, "lc"),
            Objective::CrossEntropyRanking => write!(f, "lc+lr"),
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lc" => Ok(Objective::CrossEntropy),
            "lc+lr" | "lclr" => Ok(Objective::CrossEntropyRanking),
            other => Err(Error::Config(format!("unknown objective '{}'", other))),
        }
    }
}

/// Complete hyperparameter set with paper defaults; serializes to and from
/// the line-oriented `key = value` config format.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr0: f64,
    pub lr_min: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub classes_per_batch: usize,
    pub images_per_class: usize,
    pub precision: Dtype,
    pub seed: u64,
    pub architecture: Architecture,
    pub representation: Representation,
    pub objective: Objective,
    pub metric: Metric,
    pub strategy: Strategy,
    pub use_eca: bool,
    pub mutual_fc_only: bool,
    pub pairs_inter_only: bool,
    pub eval_time_eca: bool,
    pub rotate_max_deg: f64,
    pub fixed_rotation: bool,
    pub hflip: bool,
    pub vflip: bool,
    pub input_hw: (usize, usize),
    pub stage_channels: Vec<usize>,
    pub eca_k: usize,
    /// Batches per epoch; 0 derives `round(train_len / batch_size)`.
    pub iters_per_epoch: usize,
    /// Write `epoch_NNN.ckpt` every this many epochs; 0 writes only `final.ckpt`.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr0: 0.01,
            lr_min: 0.0,
            lambda: 1.0,
            epsilon: 0.05,
            classes_per_batch: 30,
            images_per_class: 6,
            precision: Dtype::F32,
            seed: 0,
            architecture: Architecture::Multi,
            representation: Representation::Both,
            objective: Objective::CrossEntropyRanking,
            metric: Metric::Euclidean,
            strategy: Strategy::SimilarSimilar,
            use_eca: true,
            mutual_fc_only: false,
            pairs_inter_only: false,
            eval_time_eca: false,
            rotate_max_deg: 30.0,
            fixed_rotation: false,
            hflip: true,
            vflip: true,
            input_hw: (64, 64),
            stage_channels: vec![16, 32, 64],
            eca_k: 5,
            iters_per_epoch: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lr0", self.lr0),
            ("lr_min", self.lr_min),
            ("lambda", self.lambda),
            ("epsilon", self.epsilon),
            ("rotate_max_deg", self.rotate_max_deg),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{} must be >= 0, got {}", name, v)));
            }
        }
        if self.objective == Objective::CrossEntropyRanking
            && (self.architecture != Architecture::Multi
                || self.representation != Representation::Both)
        {
            return Err(Error::Config(
                "the ranking objective needs the multi-branch architecture with both representations"
                    .into(),
            ));
        }
        if self.architecture == Architecture::Multi {
            BatchSpec {
                classes_per_batch: self.classes_per_batch,
                images_per_class: self.images_per_class,
                seed: self.seed,
            }
            .validate()?;
        }
        BackboneConfig {
            in_channels: 3,
            input_hw: self.input_hw,
            stage_channels: self.stage_channels.clone(),
        }
        .validate()?;
        if self.eca_k % 2 == 0 {
            return Err(Error::Config(format!(
                "eca_k must be odd, got {}",
                self.eca_k
            )));
        }
        Ok(())
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            classes_per_batch: self.classes_per_batch,
            images_per_class: self.images_per_class,
            seed: self.seed,
        }
    }

    pub fn augment_policy(&self) -> AugmentPolicy {
        AugmentPolicy {
            rotate_max_deg: self.rotate_max_deg,
            fixed_rotation: self.fixed_rotation,
            hflip: self.hflip,
            vflip: self.vflip,
            seed: self.seed,
        }
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                in_channels: 3,
                input_hw: self.input_hw,
                stage_channels: self.stage_channels.clone(),
            },
            num_classes,
            eca_k: self.eca_k,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            use_eca: self.eval_time_eca,
        }
    }

    /// Canonical `key = value` text form; `from_text` parses it back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("epochs", self.epochs.to_string());
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("lr0", self.lr0.to_string());
        kv("lr_min", self.lr_min.to_string());
        kv("lambda", self.lambda.to_string());
        kv("epsilon", self.epsilon.to_string());
        kv("classes_per_batch", self.classes_per_batch.to_string());
        kv("images_per_class", self.images_per_class.to_string());
        kv("precision", self.precision.to_string());
        kv("seed", self.seed.to_string());
        kv("architecture", self.architecture.to_string());
        kv("representation", self.representation.to_string());
        kv("objective", self.objective.to_string());
        kv("metric", self.metric.to_string());
        kv("strategy", self.strategy.to_string());
        kv("use_eca", self.use_eca.to_string());
        kv("mutual_fc_only", self.mutual_fc_only.to_string());
        kv("pairs_inter_only", self.pairs_inter_only.to_string());
        kv("eval_time_eca", self.eval_time_eca.to_string());
        kv("rotate_max_deg", self.rotate_max_deg.to_string());
        kv("fixed_rotation", self.fixed_rotation.to_string());
        kv("hflip", self.hflip.to_string());
        kv("vflip", self.vflip.to_string());
        kv("input_h", self.input_hw.0.to_string());
        kv("input_w", self.input_hw.1.to_string());
        kv(
            "stage_channels",
            self.stage_channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("eca_k", self.eca_k.to_string());
        kv("iters_per_epoch", self.iters_per_epoch.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        s
    }

    /// Applies one `key = value` assignment; unknown keys are configuration
    /// errors naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |key: &str, value: &str| {
            Error::Config(format!("invalid value '{}' for key '{}'", value, key))
        };
        match key {
            "epochs" => self.epochs = value.parse().map_err(|_| bad(key, value))?,
            "momentum" => self.momentum = value.parse().map_err(|_| bad(key, value))?,
            "weight_decay" => self.weight_decay = value.parse().map_err(|_| bad(key, value))?,
            "lr0" => self.lr0 = value.parse().map_err(|_| bad(key, value))?,
            "lr_min" => self.lr_min = value.parse().map_err(|_| bad(key, value))?,
            "lambda" => self.lambda = value.parse().map_err(|_| bad(key, value))?,
            "epsilon" => self.epsilon = value.parse().map_err(|_| bad(key, value))?,
            "classes_per_batch" => {
                self.classes_per_batch = value.parse().map_err(|_| bad(key, value))?
            }
            "images_per_class" => {
                self.images_per_class = value.parse().map_err(|_| bad(key, value))?
            }
            "precision" => {
                self.precision = match value {
                    "f32" => Dtype::F32,
                    "f64" => Dtype::F64,
                    _ => return Err(bad(key, value)),
                }
            }
            "seed" => self.seed = value.parse().map_err(|_| bad(key, value))?,
            "architecture" => self.architecture = value.parse()?,
            "representation" => self.representation = value.parse()?,
            "objective" => self.objective = value.parse()?,
            "metric" => self.metric = value.parse()?,
            "strategy" => self.strategy = value.parse()?,
            "use_eca" => self.use_eca = value.parse().map_err(|_| bad(key, value))?,
            "mutual_fc_only" => self.mutual_fc_only = value.parse().map_err(|_| bad(key, value))?,
            "pairs_inter_only" => {
                self.pairs_inter_only = value.parse().map_err(|_| bad(key, value))?
            }
            "eval_time_eca" => self.eval_time_eca = value.parse().map_err(|_| bad(key, value))?,
            "rotate_max_deg" => self.rotate_max_deg = value.parse().map_err(|_| bad(key, value))?,
            "fixed_rotation" => self.fixed_rotation = value.parse().map_err(|_| bad(key, value))?,
            "hflip" => self.hflip = value.parse().map_err(|_| bad(key, value))?,
            "vflip" => self.vflip = value.parse().map_err(|_| bad(key, value))?,
            "input_h" => self.input_hw.0 = value.parse().map_err(|_| bad(key, value))?,
            "input_w" => self.input_hw.1 = value.parse().map_err(|_| bad(key, value))?,
            "stage_channels" => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    value.split(',').map(|v| v.trim().parse()).collect();
                self.stage_channels = parsed.map_err(|_| bad(key, value))?;
            }
            "eca_k" => self.eca_k = value.parse().map_err(|_| bad(key, value))?,
            "iters_per_epoch" => {
                self.iters_per_epoch = value.parse().map_err(|_| bad(key, value))?
            }
            "checkpoint_every" => {
                self.checkpoint_every = value.parse().map_err(|_| bad(key, value))?
            }
            other => return Err(Error::Config(format!("unknown config key '{}'", other))),
        }
        Ok(())
    }

    /// Parses the line-oriented config format: `key = value`, `#` comments.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }
}

// ── optimizer ────────────────────────────────────────────────────────────

/// One SGD update: `g' = grad + weight_decay * param`, `v <- momentum * v +
/// g'`, `param <- param - lr * v`.
pub fn sgd_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &[T],
    velocity: &mut Tensor<T>,
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    if grad.len() != param.len() || velocity.len() != param.len() {
        return Err(Error::shape(
            "sgd_step",
            format!(
                "param {} vs grad {} vs velocity {}",
                param.len(),
                grad.len(),
                velocity.len()
            ),
        ));
    }
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad)
        .zip(velocity.data_mut())
    {
        let adjusted = g + weight_decay * *p;
        *v = momentum * *v + adjusted;
        *p = *p - lr * *v;
    }
    Ok(())
}

/// Cosine annealing: `lr_min + 0.5 (lr0 - lr_min) (1 + cos(pi t / T))`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("schedule length must be >= 1".into()));
    }
    if t > total {
        return Err(Error::Config(format!(
            "schedule index {} out of range 0..={}",
            t, total
        )));
    }
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

// ── trainer ──────────────────────────────────────────────────────────────

/// Named RNG streams of a training run.
pub struct Streams {
    pub sampler: ChaCha8Rng,
    pub augment: ChaCha8Rng,
    pub pairing: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Streams {
            sampler: stream_rng(seed, "sampler"),
            augment: stream_rng(seed, "augment"),
            pairing: stream_rng(seed, "pairing"),
        }
    }
}

/// Everything the trainer owns between epochs.
pub struct TrainState<T: Scalar> {
    pub config: TrainConfig,
    pub model: Model<T>,
    /// Momentum buffers, aligned with `model.parameters()` order.
    pub velocity: Vec<Tensor<T>>,
    pub epoch: usize,
    pub streams: Streams,
    pub stats: ChannelStats,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh state: parameters from the `init` stream, zero velocity,
    /// standardization statistics from the train split.
    pub fn new(config: TrainConfig, train_set: &Dataset) -> Result<Self> {
        config.validate()?;
        if T::DTYPE != config.precision {
            return Err(Error::Config(format!(
                "state precision {} does not match config precision {}",
                T::DTYPE,
                config.precision
            )));
        }
        let mut init_rng = stream_rng(config.seed, "init");
        let model = Model::init(config.model_config(train_set.num_classes()), &mut init_rng)?;
        let velocity = model
            .parameters()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        let stats = channel_stats(train_set)?;
        Ok(TrainState {
            streams: Streams::new(config.seed),
            config,
            model,
            velocity,
            epoch: 0,
            stats,
        })
    }
}

/// One metrics row per epoch; losses are means over the epoch's batches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub l_c: f64,
    pub l_r: f64,
    pub total: f64,
    pub train_acc: f64,
    pub test_oa: f64,
}

/// CSV with the schema `epoch,lr,L_c,L_r,L,train_acc,test_OA`.
pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,lr,L_c,L_r,L,train_acc,test_OA\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.lr, r.l_c, r.l_r, r.total, r.train_acc, r.test_oa
        ));
    }
    out
}

struct BatchOutcome {
    l_c: f64,
    l_r: f64,
    total: f64,
    correct: usize,
    count: usize,
}

/// Accumulated raw (unaveraged) loss sums, logged next to the means so either
/// convention can be reproduced.
#[derive(Clone, Copy, Debug, Default)]
pub struct RawLossSums {
    pub l_c: f64,
    pub l_r: f64,
    pub units: usize,
}

/// Runs one epoch: sample, select pairs, forward, backward, SGD step per
/// batch; returns the epoch metrics row (including test OA).
pub fn train_epoch<T: Scalar>(
    state: &mut TrainState<T>,
    train_set: &Dataset,
    test_set: &PreparedSet<T>,
) -> Result<EpochMetrics> {
    let config = state.config.clone();
    let lr = cosine_lr(state.epoch, config.epochs, config.lr0, config.lr_min)?;
    let labels = train_set.labels();
    let iters = if config.iters_per_epoch > 0 {
        config.iters_per_epoch
    } else {
        let bsz = match config.architecture {
            Architecture::Multi => config.batch_spec().batch_size(),
            Architecture::Single => config.batch_spec().batch_size(),
        };
        ((train_set.len() as f64 / bsz as f64).round() as usize).max(1)
    };

    let mut raw = RawLossSums::default();
    let mut sums = (0.0f64, 0.0f64, 0.0f64);
    let mut correct = 0usize;
    let mut seen = 0usize;
    for iter in 0..iters {
        let outcome = train_batch(state, train_set, &labels, lr, iter)?;
        sums.0 += outcome.l_c;
        sums.1 += outcome.l_r;
        sums.2 += outcome.total;
        correct += outcome.correct;
        seen += outcome.count;
        raw.l_c += outcome.l_c;
        raw.l_r += outcome.l_r;
        raw.units += 1;
    }

    let report = evaluation::evaluate(&state.model, test_set, &config.eval_options())?;
    state.epoch += 1;
    let n = iters as f64;
    let metrics = EpochMetrics {
        epoch: state.epoch,
        lr,
        l_c: sums.0 / n,
        l_r: sums.1 / n,
        total: sums.2 / n,
        train_acc: correct as f64 / seen.max(1) as f64,
        test_oa: report.overall_accuracy,
    };
    log::info!(
        "epoch {}: lr={:.6} L_c={:.5} L_r={:.5} L={:.5} (raw sums over {} batches: L_c={:.5} L_r={:.5}) train_acc={:.4} test_OA={:.4}",
        metrics.epoch,
        metrics.lr,
        metrics.l_c,
        metrics.l_r,
        metrics.total,
        raw.units,
        raw.l_c,
        raw.l_r,
        metrics.train_acc,
        metrics.test_oa
    );
    Ok(metrics)
}

fn train_batch<T: Scalar>(
    state: &mut TrainState<T>,
    train_set: &Dataset,
    labels: &[usize],
    lr: f64,
    iter: usize,
) -> Result<BatchOutcome> {
    let config = &state.config;
    let spec = config.batch_spec();
    let batch = pairing::sample_batch(labels, &spec, &mut state.streams.sampler)?;
    let batch_labels: Vec<usize> = batch.iter().map(|&(_, l)| l).collect();

    // Augmentation parameters draw sequentially from the augment stream; the
    // pixel work itself runs per image.
    let policy = config.augment_policy();
    let draws: Vec<data::AugmentDraw> = batch
        .iter()
        .map(|_| data::draw_augment(&policy, &mut state.streams.augment))
        .collect();
    let augmented: Vec<data::Image> = crate::parallel::map_indexed(batch.len(), |i| {
        let img = &train_set.items[batch[i].0].image;
        data::apply_augment(img, &draws[i])
    });
    let refs: Vec<&data::Image> = augmented.iter().collect();
    let images = batch_tensor::<T>(&refs, &state.stats);

    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, &state.model);
    let images_var = tape.constant(images);
    let f_maps = model::backbone_forward(&mut tape, &vars, images_var)?;
    let gap = tape.global_average_pool(f_maps)?;

    // Pair selection runs on the pooled features of the current weights,
    // extracted as plain values; the choice is discrete and no gradient
    // flows through it.
    let assignment = match config.architecture {
        Architecture::Multi => Some(pairing::select_pairs(
            tape.value(gap),
            &batch_labels,
            config.metric,
            config.strategy,
            &mut state.streams.pairing,
        )?),
        Architecture::Single => None,
    };

    let built = build_batch_loss(
        &mut tape,
        &vars,
        f_maps,
        gap,
        &batch_labels,
        assignment.as_ref(),
        config,
    )?;

    let total = tape.scalar_value(built.loss).as_f64();
    let l_c = tape.scalar_value(built.l_c).as_f64();
    let l_r = built
        .l_r
        .map(|v| tape.scalar_value(v).as_f64())
        .unwrap_or(0.0);
    if !total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss {} in epoch {} batch {} (seed {})",
            total, state.epoch, iter, config.seed
        )));
    }

    // Train accuracy from the self heads (ECA-weighted pooled features when
    // attention is enabled), mirroring the inference path most closely.
    let gap = tape.value(built.gap).clone();
    let (correct, count) = self_head_accuracy(&state.model, &gap, &batch_labels, config.use_eca)?;

    tape.backward(built.loss)?;
    for (_, param) in state.model.parameters_mut() {
        param.reset_grad();
    }
    vars.accumulate_into(&tape, &mut state.model);

    let lr_t = T::from_f64(lr);
    let momentum = T::from_f64(config.momentum);
    let wd = T::from_f64(config.weight_decay);
    let mut params = state.model.parameters_mut();
    for ((_, param), velocity) in params.iter_mut().zip(state.velocity.iter_mut()) {
        let grad: Vec<T> = param
            .grad()
            .expect("gradients populated by backward")
            .to_vec();
        sgd_step(param, &grad, velocity, lr_t, momentum, wd)?;
    }

    Ok(BatchOutcome {
        l_c,
        l_r,
        total,
        correct,
        count,
    })
}

struct BuiltLoss {
    loss: crate::tape::Var,
    l_c: crate::tape::Var,
    l_r: Option<crate::tape::Var>,
    /// Pooled backbone features of all batch images, `[B, C]`.
    gap: crate::tape::Var,
}

/// Assembles the objective on the tape from the already-recorded backbone
/// features. Features are computed once per image and shared across every
/// pair containing it; parameter gradients are the sum over pairs either way.
fn build_batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    f_maps: crate::tape::Var,
    gap: crate::tape::Var,
    batch_labels: &[usize],
    assignment: Option<&PairAssignment>,
    config: &TrainConfig,
) -> Result<BuiltLoss> {
    match config.architecture {
        Architecture::Single => {
            let pooled = if config.use_eca {
                let attended = attention::eca_apply(tape, f_maps, vars.eca_kernel)?;
                tape.global_average_pool(attended)?
            } else {
                gap
            };
            let q = model::classify(tape, vars, pooled)?;
            let ce = ce_sum_on_tape(tape, q, batch_labels)?;
            let l_c = tape.scale(ce, T::from_f64(1.0 / batch_labels.len() as f64));
            Ok(BuiltLoss {
                loss: l_c,
                l_c,
                l_r: None,
                gap,
            })
        }
        Architecture::Multi => {
            let assignment =
                assignment.ok_or_else(|| Error::Config("multi-branch needs pair selection".into()))?;
            // Fixed pair order: anchors ascending, intra pair before inter.
            let mut first = Vec::new();
            let mut second = Vec::new();
            for a in &assignment.anchors {
                if !config.pairs_inter_only {
                    first.push(a.anchor);
                    second.push(a.intra);
                }
                first.push(a.anchor);
                second.push(a.inter);
            }
            let m = first.len();
            let labels1: Vec<usize> = first.iter().map(|&i| batch_labels[i]).collect();
            let labels2: Vec<usize> = second.iter().map(|&i| batch_labels[i]).collect();

            // Self heads once per image, gathered per pair.
            let attended = attention::eca_apply(tape, f_maps, vars.eca_kernel)?;
            let f_self_all = tape.global_average_pool(attended)?;
            let q_self_all = model::classify(tape, vars, f_self_all)?;
            let q1_self = tape.gather_leading(q_self_all, first.clone())?;
            let q2_self = tape.gather_leading(q_self_all, second.clone())?;

            // Mutual heads per pair.
            let f1_maps = tape.gather_leading(f_maps, first.clone())?;
            let f2_maps = tape.gather_leading(f_maps, second.clone())?;
            let cue = attention::mutual_cue(
                tape,
                f1_maps,
                f2_maps,
                vars.mutual,
                config.mutual_fc_only,
            )?;
            let gap1 = tape.gather_leading(gap, first.clone())?;
            let gap2 = tape.gather_leading(gap, second.clone())?;
            let (f1_mut, f2_mut) = attention::mutual_representations(tape, cue, gap1, gap2)?;
            let q1_mut = model::classify(tape, vars, f1_mut)?;
            let q2_mut = model::classify(tape, vars, f2_mut)?;

            let mut ce_terms = Vec::new();
            if config.representation != Representation::MutualOnly {
                ce_terms.push(ce_sum_on_tape(tape, q1_self, &labels1)?);
                ce_terms.push(ce_sum_on_tape(tape, q2_self, &labels2)?);
            }
            if config.representation != Representation::SelfOnly {
                ce_terms.push(ce_sum_on_tape(tape, q1_mut, &labels1)?);
                ce_terms.push(ce_sum_on_tape(tape, q2_mut, &labels2)?);
            }
            let mut ce_total = ce_terms[0];
            for term in &ce_terms[1..] {
                ce_total = tape.add(ce_total, *term)?;
            }
            let l_c = tape.scale(ce_total, T::from_f64(1.0 / m as f64));

            if config.objective == Objective::CrossEntropyRanking {
                let eps = T::from_f64(config.epsilon);
                let q1_self_true = tape.gather_rows(q1_self, labels1.clone())?;
                let q1_mut_true = tape.gather_rows(q1_mut, labels1)?;
                let q2_self_true = tape.gather_rows(q2_self, labels2.clone())?;
                let q2_mut_true = tape.gather_rows(q2_mut, labels2)?;
                let h1 = hinge_sum_on_tape(tape, q1_self_true, q1_mut_true, eps)?;
                let h2 = hinge_sum_on_tape(tape, q2_self_true, q2_mut_true, eps)?;
                let h = tape.add(h1, h2)?;
                let l_r = tape.scale(h, T::from_f64(1.0 / m as f64));
                let weighted = tape.scale(l_r, T::from_f64(config.lambda));
                let loss = tape.add(l_c, weighted)?;
                Ok(BuiltLoss {
                    loss,
                    l_c,
                    l_r: Some(l_r),
                    gap,
                })
            } else {
                Ok(BuiltLoss {
                    loss: l_c,
                    l_c,
                    l_r: None,
                    gap,
                })
            }
        }
    }
}

/// Argmax accuracy of the self heads over pooled features (no gradient).
fn self_head_accuracy<T: Scalar>(
    model: &Model<T>,
    gap: &Tensor<T>,
    labels: &[usize],
    use_eca: bool,
) -> Result<(usize, usize)> {
    let pooled = if use_eca {
        // GAP commutes with the per-channel rescale, so the self feature is
        // the attention weight times the pooled feature.
        let conv = crate::ops::conv1d_rows(gap, model.eca.kernel())?;
        let a = crate::ops::sigmoid(&conv);
        crate::ops::mul(gap, &a)?
    } else {
        gap.clone()
    };
    let logits = crate::ops::affine(&pooled, &model.classifier.weight, &model.classifier.bias)?;
    let n = model.classifier.num_classes();
    let mut correct = 0;
    for (row, &label) in logits.data().chunks(n).zip(labels) {
        if evaluation::argmax_lowest(row) == label {
            correct += 1;
        }
    }
    Ok((correct, labels.len()))
}

/// Trains from `state.epoch` to `config.epochs`, evaluating each epoch and
/// checkpointing into `checkpoint_dir` when given (always `final.ckpt`, plus
/// periodic `epoch_NNN.ckpt` per `checkpoint_every`).
pub fn train<T: Scalar>(
    state: &mut TrainState<T>,
    train_set: &Dataset,
    test_set: &Dataset,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<EpochMetrics>> {
    state.config.validate()?;
    let prepared = evaluation::prepare::<T>(test_set, &state.stats)?;
    let mut rows = Vec::new();
    while state.epoch < state.config.epochs {
        let metrics = train_epoch(state, train_set, &prepared)?;
        rows.push(metrics);
        if let Some(dir) = checkpoint_dir {
            if state.config.checkpoint_every > 0 && state.epoch % state.config.checkpoint_every == 0
            {
                let path = dir.join(format!("epoch_{:03}.ckpt", state.epoch));
                checkpoint::save(state, &path)?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        checkpoint::save(state, &dir.join("final.ckpt"))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::generate_synthetic;
    use approx::assert_relative_eq;

    #[test]
    fn sgd_plain_gradient_descent() {
        let mut p = Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap();
        let mut v = Tensor::zeros(&[2]);
        sgd_step(&mut p, &[0.5, -0.5], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_relative_eq!(p.data()[0], 0.95, max_relative = 1e-15);
        assert_relative_eq!(p.data()[1], 2.05, max_relative = 1e-15);
    }

    #[test]
    fn sgd_zero_grad_is_fixed_point() {
        let mut p = Tensor::from_vec(&[2], vec![1.0f64, -3.0]).unwrap();
        let before = p.clone();
        let mut v = Tensor::zeros(&[2]);
        sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.data(), before.data());
    }

    #[test]
    fn sgd_two_step_momentum_displacement() {
        // Constant gradient g, momentum 0.9, no decay: after two steps the
        // parameter moved by lr*g*(1 + 1.9).
        let g = 0.25f64;
        let lr = 0.1f64;
        let mut p = Tensor::from_vec(&[1], vec![1.0f64]).unwrap();
        let mut v = Tensor::zeros(&[1]);
        sgd_step(&mut p, &[g], &mut v, lr, 0.9, 0.0).unwrap();
        sgd_step(&mut p, &[g], &mut v, lr, 0.9, 0.0).unwrap();
        let expect = 1.0 - lr * g * (1.0 + 1.9);
        assert!((p.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn sgd_shape_mismatch_is_rejected() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let mut v = Tensor::zeros(&[2]);
        assert!(sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert!((cosine_lr(0, 100, 0.01, 0.0).unwrap() - 0.01).abs() < 1e-12);
        assert!(cosine_lr(100, 100, 0.01, 0.0).unwrap().abs() < 1e-12);
        assert!((cosine_lr(50, 100, 0.01, 0.0).unwrap() - 0.005).abs() < 1e-12);
        assert!((cosine_lr(10, 10, 0.01, 0.002).unwrap() - 0.002).abs() < 1e-12);
        assert!(cosine_lr(11, 10, 0.01, 0.0).is_err());
    }

    #[test]
    fn cosine_schedule_is_monotone_nonincreasing() {
        let mut prev = f64::INFINITY;
        for t in 0..=40 {
            let lr = cosine_lr(t, 40, 0.01, 0.0).unwrap();
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn config_text_roundtrip() {
        let mut config = TrainConfig::default();
        config.epochs = 17;
        config.lambda = 0.8;
        config.strategy = Strategy::SimilarDifferent;
        config.metric = Metric::Cosine;
        config.stage_channels = vec![8, 16];
        config.precision = Dtype::F64;
        let text = config.to_text();
        let parsed = TrainConfig::from_text(&text).unwrap();
        assert_eq!(config, parsed);
    }

    #[test]
    fn unknown_config_key_is_named() {
        let err = TrainConfig::from_text("no_such_key = 5\n").unwrap_err();
        assert!(err.to_string().contains("no_such_key"));
    }

    #[test]
    fn ranking_objective_requires_both_representations() {
        let mut config = TrainConfig::default();
        config.representation = Representation::SelfOnly;
        assert!(config.validate().is_err());
    }

    fn smoke_config(epochs: usize) -> TrainConfig {
        let mut config = TrainConfig::default();
        config.epochs = epochs;
        config.precision = Dtype::F64;
        config.seed = 11;
        config.classes_per_batch = 4;
        config.images_per_class = 2;
        config.input_hw = (16, 16);
        config.stage_channels = vec![4, 8];
        config.iters_per_epoch = 2;
        config.rotate_max_deg = 10.0;
        config
    }

    fn smoke_data() -> (Dataset, Dataset) {
        let ds = generate_synthetic(4, 8, (16, 16), 3).unwrap();
        crate::data::split(&ds, 0.5, 3).unwrap()
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (train_set, test_set) = smoke_data();
        let mut config = smoke_config(1);
        config.lr0 = 0.0;
        config.lr_min = 0.0;
        let mut state = TrainState::<f64>::new(config, &train_set).unwrap();
        let before: Vec<Vec<f64>> = state
            .model
            .parameters()
            .iter()
            .map(|(_, t)| t.data().to_vec())
            .collect();
        train(&mut state, &train_set, &test_set, None).unwrap();
        for ((_, t), b) in state.model.parameters().iter().zip(&before) {
            assert_eq!(t.data(), b.as_slice());
        }
    }

    #[test]
    fn fixed_seed_runs_are_identical() {
        let (train_set, test_set) = smoke_data();
        let run = || {
            let mut state = TrainState::<f64>::new(smoke_config(2), &train_set).unwrap();
            train(&mut state, &train_set, &test_set, None).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_decreases_on_smoke_run() {
        let (train_set, test_set) = smoke_data();
        let mut config = smoke_config(3);
        // Plain multi-branch CE training with random pairing.
        config.lambda = 0.0;
        config.objective = Objective::CrossEntropy;
        config.strategy = Strategy::RandomRandom;
        let mut state = TrainState::<f64>::new(config, &train_set).unwrap();
        let rows = train(&mut state, &train_set, &test_set, None).unwrap();
        assert!(rows.iter().all(|r| r.total.is_finite()));
        assert!(
            rows.last().unwrap().l_c < rows.first().unwrap().l_c,
            "loss did not decrease: {:?}",
            rows.iter().map(|r| r.l_c).collect::<Vec<_>>()
        );
    }

    #[test]
    fn open_question_switches_train_cleanly() {
        // Both recorded toggles: mutual head without its ECA step, and
        // inter-class-only pairs.
        let (train_set, test_set) = smoke_data();
        for (fc_only, inter_only) in [(true, false), (false, true), (true, true)] {
            let mut config = smoke_config(1);
            config.mutual_fc_only = fc_only;
            config.pairs_inter_only = inter_only;
            let mut state = TrainState::<f64>::new(config, &train_set).unwrap();
            let rows = train(&mut state, &train_set, &test_set, None).unwrap();
            assert!(rows[0].total.is_finite());
        }
    }

    #[test]
    fn fixed_rotation_variant_trains() {
        let (train_set, test_set) = smoke_data();
        let mut config = smoke_config(1);
        config.fixed_rotation = true;
        let mut state = TrainState::<f64>::new(config, &train_set).unwrap();
        let rows = train(&mut state, &train_set, &test_set, None).unwrap();
        assert!(rows[0].total.is_finite());
    }

    #[test]
    fn single_branch_architecture_trains() {
        let (train_set, test_set) = smoke_data();
        let mut config = smoke_config(1);
        config.architecture = Architecture::Single;
        config.objective = Objective::CrossEntropy;
        let mut state = TrainState::<f64>::new(config, &train_set).unwrap();
        let rows = train(&mut state, &train_set, &test_set, None).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].total.is_finite());
        assert_eq!(rows[0].l_r, 0.0);
    }
}
