//! Losses, optimizer, learning-rate schedule and the three-phase training loop.

mod checkpoint;
mod optim;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, MAGIC, VERSION};
pub use optim::AdamW;

use crate::data::ProcessedTrial;
use crate::layers::{Ctx, BN_MOMENTUM};
use crate::model::{Batch, ForwardOutput, ModelError, MuMTAffect};
use crate::params::Group;
use crate::tensor::{Float, Graph, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint does not match the model:\n  {}", .0.join("\n  "))]
    Mismatch(Vec<String>),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(
        "non-finite loss in {phase} epoch {epoch} batch {batch}: personality {personality}, valence {valence}, arousal {arousal}"
    )]
    NonFinite {
        phase: Phase,
        epoch: usize,
        batch: usize,
        personality: f64,
        valence: f64,
        arousal: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Multitask,
    Finetune,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Pretrain, Phase::Multitask, Phase::Finetune];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Multitask => "multitask",
            Phase::Finetune => "finetune",
        }
    }

    pub fn number(self) -> usize {
        self as usize + 1
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrain" | "1" => Ok(Phase::Pretrain),
            "multitask" | "2" => Ok(Phase::Multitask),
            "finetune" | "3" => Ok(Phase::Finetune),
            other => Err(format!("unknown phase `{other}` (expected pretrain, multitask or finetune)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub alpha: f64,
    pub epochs: usize,
    pub base_lr: f64,
    pub personality_lr: f64,
    pub emotion_lr: f64,
    pub gamma: f64,
}

impl PhaseConfig {
    pub fn lr(&self, g: Group) -> f64 {
        match g {
            Group::Base => self.base_lr,
            Group::Personality => self.personality_lr,
            Group::Emotion => self.emotion_lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub valence: [f64; 3],
    pub arousal: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pretrain: PhaseConfig,
    pub multitask: PhaseConfig,
    pub finetune: PhaseConfig,
    pub patience: usize,
    pub epsilon: f64,
    pub batch_size: usize,
    /// Decoupled decay for base, personality and emotion groups.
    pub weight_decay: [f64; 3],
    /// `None` derives inverse-frequency weights from the training split.
    pub class_weights: Option<ClassWeights>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain: PhaseConfig {
                alpha: 1.0,
                epochs: 50,
                base_lr: 1e-4,
                personality_lr: 1e-4,
                emotion_lr: 1e-4,
                gamma: 0.99,
            },
            multitask: PhaseConfig {
                alpha: 0.3,
                epochs: 100,
                base_lr: 8e-4,
                personality_lr: 5e-5,
                emotion_lr: 5e-4,
                gamma: 0.95,
            },
            finetune: PhaseConfig {
                alpha: 0.1,
                epochs: 25,
                base_lr: 8e-5,
                personality_lr: 5e-6,
                emotion_lr: 5e-5,
                gamma: 0.95,
            },
            patience: 7,
            epsilon: 0.05,
            batch_size: 32,
            weight_decay: [1e-4; 3],
            class_weights: None,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn phase(&self, p: Phase) -> &PhaseConfig {
        match p {
            Phase::Pretrain => &self.pretrain,
            Phase::Multitask => &self.multitask,
            Phase::Finetune => &self.finetune,
        }
    }

    pub fn phase_mut(&mut self, p: Phase) -> &mut PhaseConfig {
        match p {
            Phase::Pretrain => &mut self.pretrain,
            Phase::Multitask => &mut self.multitask,
            Phase::Finetune => &mut self.finetune,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for p in Phase::ALL {
            let c = self.phase(p);
            if !(0.0..=1.0).contains(&c.alpha) {
                return Err(format!("{p}: alpha {} outside [0, 1]", c.alpha));
            }
            for g in Group::ALL {
                let lr = c.lr(g);
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(format!("{p}: {g} learning rate must be positive, got {lr}"));
                }
            }
            if !(c.gamma > 0.0 && c.gamma <= 1.0) {
                return Err(format!("{p}: gamma {} outside (0, 1]", c.gamma));
            }
        }
        if self.patience == 0 {
            return Err("patience must be at least 1".into());
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if self.batch_size < 2 {
            return Err("batch_size must be at least 2 (batch statistics)".into());
        }
        if self.weight_decay.iter().any(|w| !(*w >= 0.0)) {
            return Err("weight decay must be >= 0".into());
        }
        if let Some(w) = &self.class_weights {
            if w.valence.iter().chain(&w.arousal).any(|v| !(*v > 0.0)) {
                return Err("class weights must be positive".into());
            }
        }
        Ok(())
    }
}

/// Learning rate of `group` at `epoch` (0-based) within `phase`.
pub fn lr_at(phase: Phase, group: Group, epoch: usize, cfg: &TrainConfig) -> f64 {
    let c = cfg.phase(phase);
    c.lr(group) * c.gamma.powi(epoch as i32)
}

/// Mean over all entries of `max(0, |pred - target| - eps)`.
pub fn epsilon_insensitive_loss<'g, F: Float>(pred: Var<'g, F>, target: &Tensor<F>, eps: f64) -> Result<Var<'g, F>, TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::Shape {
            op: "epsilon_insensitive_loss",
            lhs: pred.shape(),
            rhs: target.shape().to_vec(),
        });
    }
    let t = pred.graph().constant(target.clone());
    pred.sub(t)?.abs()?.add_scalar(F::cst(-eps))?.relu()?.mean()
}

/// `sum_i w[y_i] * -log p(y_i) / sum_i w[y_i]`.
pub fn weighted_cross_entropy<'g, F: Float>(logits: Var<'g, F>, target: &[usize], weights: &[f64; 3]) -> Result<Var<'g, F>, TensorError> {
    let s = logits.shape();
    if s.len() != 2 || s[1] != 3 || s[0] != target.len() {
        return Err(TensorError::Shape {
            op: "weighted_cross_entropy",
            lhs: s,
            rhs: vec![target.len(), 3],
        });
    }
    if let Some(&bad) = target.iter().find(|&&c| c >= 3) {
        return Err(TensorError::Contract {
            op: "weighted_cross_entropy",
            msg: format!("class index {bad} out of range for 3 classes"),
        });
    }
    let w: Vec<F> = target.iter().map(|&c| F::cst(weights[c])).collect();
    let total: f64 = target.iter().map(|&c| weights[c]).sum();
    let picked = logits.log_softmax(1)?.gather(target)?;
    let wv = logits.graph().constant(Tensor::new(vec![target.len()], w)?);
    picked.mul(wv)?.sum()?.scale(F::cst(-1.0 / total))
}

/// Targets for one batch.
#[derive(Debug, Clone)]
pub struct Labels<F: Float> {
    pub valence: Vec<usize>,
    pub arousal: Vec<usize>,
    pub personality: Tensor<F>,
}

impl Labels<f32> {
    pub fn from_trials(trials: &[&ProcessedTrial]) -> Self {
        Self {
            valence: trials.iter().map(|t| t.valence).collect(),
            arousal: trials.iter().map(|t| t.arousal).collect(),
            personality: Tensor::new(
                vec![trials.len(), 5],
                trials.iter().flat_map(|t| t.personality).collect(),
            )
            .expect("five traits"),
        }
    }
}

pub struct LossParts<'g, F: Float> {
    pub total: Var<'g, F>,
    pub personality: f64,
    pub valence: f64,
    pub arousal: f64,
    /// Mean of the valence and arousal terms.
    pub emotion: f64,
}

/// `alpha * L_personality + (1 - alpha) * L_emotion`. A term whose weight is
/// zero is left out of the graph so it contributes no gradient at all.
pub fn combined_loss<'g, F: Float>(
    personality: Var<'g, F>,
    valence_logits: Var<'g, F>,
    arousal_logits: Var<'g, F>,
    labels: &Labels<F>,
    alpha: f64,
    eps: f64,
    weights: &ClassWeights,
) -> Result<LossParts<'g, F>, TensorError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TensorError::Contract {
            op: "combined_loss",
            msg: format!("alpha {alpha} outside [0, 1]"),
        });
    }
    let lp = epsilon_insensitive_loss(personality, &labels.personality, eps)?;
    let lv = weighted_cross_entropy(valence_logits, &labels.valence, &weights.valence)?;
    let la = weighted_cross_entropy(arousal_logits, &labels.arousal, &weights.arousal)?;
    let le = lv.add(la)?.scale(F::cst(0.5))?;
    let total = if alpha == 1.0 {
        lp
    } else if alpha == 0.0 {
        le
    } else {
        lp.scale(F::cst(alpha))?.add(le.scale(F::cst(1.0 - alpha))?)?
    };
    Ok(LossParts {
        total,
        personality: lp.item().as_f64(),
        valence: lv.item().as_f64(),
        arousal: la.item().as_f64(),
        emotion: le.item().as_f64(),
    })
}

pub fn forward_loss<'g, F: Float>(
    out: &ForwardOutput<'g, F>,
    labels: &Labels<F>,
    alpha: f64,
    eps: f64,
    weights: &ClassWeights,
) -> Result<LossParts<'g, F>, TensorError> {
    combined_loss(
        out.personality,
        out.valence_logits,
        out.arousal_logits,
        labels,
        alpha,
        eps,
        weights,
    )
}

/// Inverse class frequency on the given trials, rescaled to mean 1. A class
/// that never occurs is counted once so its weight stays finite.
pub fn class_weights(trials: &[&ProcessedTrial]) -> ClassWeights {
    let weights = |pick: &dyn Fn(&ProcessedTrial) -> usize| {
        let mut counts = [0usize; 3];
        for t in trials {
            counts[pick(t)] += 1;
        }
        let inv = counts.map(|c| 1.0 / c.max(1) as f64);
        let mean = inv.iter().sum::<f64>() / 3.0;
        inv.map(|w| w / mean)
    };
    ClassWeights {
        valence: weights(&|t| t.valence),
        arousal: weights(&|t| t.arousal),
    }
}

/// Shuffled mini-batches; a trailing batch of one trial joins the previous
/// batch because batch statistics need at least two samples.
pub fn make_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// Deterministic sub-seed for `(phase, epoch, step)`.
fn sub_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h = (h ^ p).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossSummary {
    pub total: f64,
    pub personality: f64,
    pub valence: f64,
    pub arousal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub train: LossSummary,
    pub val: LossSummary,
    /// Learning rates read back from the optimizer: base, personality, emotion.
    pub lr: [f64; 3],
}

pub const HISTORY_HEADER: &str = "phase,epoch,train_loss,train_personality,train_valence,train_arousal,val_loss,val_personality,val_valence,val_arousal,lr_base,lr_personality,lr_emotion";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:e},{:e},{:e}",
            self.phase,
            self.epoch,
            self.train.total,
            self.train.personality,
            self.train.valence,
            self.train.arousal,
            self.val.total,
            self.val.personality,
            self.val.valence,
            self.val.arousal,
            self.lr[0],
            self.lr[1],
            self.lr[2]
        )
    }
}

#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub phase: Phase,
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Forward in eval mode over `trials`, in chunks of `batch_size`.
/// Returns `(valence logits, arousal logits, personality)` stacked over all trials.
pub fn predict(model: &MuMTAffect, trials: &[&ProcessedTrial], batch_size: usize) -> Result<[Tensor<f32>; 3], TrainError> {
    if trials.is_empty() {
        return Err(TrainError::EmptySplit("prediction"));
    }
    let mut parts: [Vec<f32>; 3] = Default::default();
    for chunk in trials.chunks(batch_size.max(1)) {
        let batch = Batch::from_trials(chunk);
        let g = Graph::new();
        let p = model.params.bind(&g, true);
        let out = model.forward(&p, &mut Ctx::eval(), &batch)?;
        for (dst, v) in parts
            .iter_mut()
            .zip([out.valence_logits, out.arousal_logits, out.personality])
        {
            dst.extend_from_slice(v.value().data());
        }
    }
    let n = trials.len();
    let [v, a, p] = parts;
    Ok([
        Tensor::new(vec![n, 3], v)?,
        Tensor::new(vec![n, 3], a)?,
        Tensor::new(vec![n, 5], p)?,
    ])
}

/// Combined loss of the model on `trials` in eval mode.
pub fn evaluate_loss(
    model: &MuMTAffect,
    trials: &[&ProcessedTrial],
    alpha: f64,
    cfg: &TrainConfig,
    weights: &ClassWeights,
) -> Result<LossSummary, TrainError> {
    let [v, a, p] = predict(model, trials, cfg.batch_size)?;
    let g = Graph::new();
    let labels = Labels::from_trials(trials);
    let parts = combined_loss(g.constant(p), g.constant(v), g.constant(a), &labels, alpha, cfg.epsilon, weights)?;
    Ok(LossSummary {
        total: parts.total.item() as f64,
        personality: parts.personality,
        valence: parts.valence,
        arousal: parts.arousal,
    })
}

/// One optimizer step on `trials`. Returns the batch losses.
pub fn train_step(
    model: &mut MuMTAffect,
    opt: &mut AdamW,
    trials: &[&ProcessedTrial],
    alpha: f64,
    cfg: &TrainConfig,
    weights: &ClassWeights,
    dropout_seed: u64,
) -> Result<LossSummary, TrainError> {
    let batch = Batch::from_trials(trials);
    let labels = Labels::from_trials(trials);
    let g = Graph::new();
    let p = model.params.bind(&g, false);
    let mut ctx = Ctx::train(dropout_seed);
    let out = model.forward(&p, &mut ctx, &batch)?;
    let parts = forward_loss(&out, &labels, alpha, cfg.epsilon, weights)?;
    let summary = LossSummary {
        total: parts.total.item() as f64,
        personality: parts.personality,
        valence: parts.valence,
        arousal: parts.arousal,
    };
    if !summary.total.is_finite() {
        return Ok(summary);
    }
    g.backward_and_release(parts.total)?;
    let grads: Vec<Option<Vec<f32>>> = p.vars().iter().map(|v| v.grad().map(Tensor::into_data)).collect();
    drop(p);
    opt.step(&mut model.params, &grads);
    for u in &ctx.bn_updates {
        u.apply(&mut model.params, BN_MOMENTUM);
    }
    Ok(summary)
}

/// Called after each epoch; returning `true` stops the phase.
pub type EpochHook<'a> = dyn FnMut(&EpochRecord, &MuMTAffect) -> bool + 'a;

/// Runs one phase with early stopping on the validation combined loss.
/// The model ends up holding the best weights seen.
pub fn train_phase(
    model: &mut MuMTAffect,
    train: &[&ProcessedTrial],
    val: &[&ProcessedTrial],
    phase: Phase,
    cfg: &TrainConfig,
    weights: &ClassWeights,
    hook: &mut EpochHook<'_>,
) -> Result<PhaseOutcome, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if train.len() < 2 {
        return Err(TrainError::Config("training needs at least two trials".into()));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let pc = *cfg.phase(phase);
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best = Checkpoint::capture(model, Some(phase), 0, cfg.seed, None);
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    let ph = phase.number() as u64;

    for epoch in 0..pc.epochs {
        for g in Group::ALL {
            opt.set_lr(g, lr_at(phase, g, epoch, cfg));
        }
        let lr = Group::ALL.map(|g| opt.lr(g));
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[ph, epoch as u64]));
        let batches = make_batches(train.len(), cfg.batch_size, &mut rng);
        let mut acc = [0f64; 4];
        for (bi, idx) in batches.iter().enumerate() {
            let trials: Vec<&ProcessedTrial> = idx.iter().map(|&i| train[i]).collect();
            let seed = sub_seed(cfg.seed, &[ph, epoch as u64, bi as u64, 1]);
            let s = train_step(model, &mut opt, &trials, pc.alpha, cfg, weights, seed)?;
            if !s.total.is_finite() {
                return Err(TrainError::NonFinite {
                    phase,
                    epoch,
                    batch: bi,
                    personality: s.personality,
                    valence: s.valence,
                    arousal: s.arousal,
                });
            }
            let w = trials.len() as f64;
            for (a, v) in acc.iter_mut().zip([s.total, s.personality, s.valence, s.arousal]) {
                *a += w * v;
            }
        }
        let n = train.len() as f64;
        let train_loss = LossSummary {
            total: acc[0] / n,
            personality: acc[1] / n,
            valence: acc[2] / n,
            arousal: acc[3] / n,
        };
        let val_loss = evaluate_loss(model, val, pc.alpha, cfg, weights)?;
        if !val_loss.total.is_finite() {
            return Err(TrainError::NonFinite {
                phase,
                epoch,
                batch: usize::MAX,
                personality: val_loss.personality,
                valence: val_loss.valence,
                arousal: val_loss.arousal,
            });
        }
        let rec = EpochRecord {
            phase,
            epoch,
            train: train_loss,
            val: val_loss,
            lr,
        };
        log::debug!("{}", rec.csv_row());
        if val_loss.total < best_loss {
            best_loss = val_loss.total;
            best_epoch = epoch;
            best = Checkpoint::capture(model, Some(phase), epoch, cfg.seed, Some(best_loss));
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.push(rec);
        if hook(history.last().expect("just pushed"), model) {
            break;
        }
        if since_best >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    best.restore_into(model)?;
    Ok(PhaseOutcome {
        phase,
        best,
        best_epoch,
        best_val_loss: best_loss,
        history,
        stopped_early,
    })
}

/// Runs the listed phases in order, each starting from the previous best.
pub fn train_phases(
    model: &mut MuMTAffect,
    train: &[&ProcessedTrial],
    val: &[&ProcessedTrial],
    phases: &[Phase],
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<Vec<PhaseOutcome>, TrainError> {
    let weights = cfg.class_weights.unwrap_or_else(|| class_weights(train));
    phases
        .iter()
        .map(|&p| train_phase(model, train, val, p, cfg, &weights, hook))
        .collect()
}
