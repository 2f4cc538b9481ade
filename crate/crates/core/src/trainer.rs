//! Deterministic optimization loops: prior head, bridge pretraining and
//! preference fine-tuning, all driven by a bias-corrected Adam.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridge::NoiseSchedule;
use crate::error::{Error, Result};
use crate::objectives::{
    bridge_dpo_loss, energy_loss, pretrain_loss_masked, ContextMap, LossMask, DpoConfig, DpoSample, EnergyGrad, EnergyLossState,
    LossMode, TotalLossConfig,
};
use crate::predictor::{
    softmax_in_place, GradientBundle, ParamTables, PredictorParams, PredictorShape, PriorHeadParams,
};
use crate::rng;
use crate::sequence::Sequence;
use crate::world::{PreferencePair, WorldEntry};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `base_lr * dim^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn noam_lr(step: u64, warmup: u64, dim: usize, base_lr: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    base_lr * (dim as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Noam { warmup: u64, dim: usize },
    Constant,
}

impl LrSchedule {
    /// Learning rate for the 1-based optimizer step.
    pub fn lr(&self, base_lr: f64, step: u64) -> f64 {
        match *self {
            LrSchedule::Noam { warmup, dim } => noam_lr(step, warmup, dim, base_lr),
            LrSchedule::Constant => base_lr,
        }
    }
}

/// Adam moments for a list of flat tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_tables<P: ParamTables + ?Sized>(p: &P) -> Self {
        Self::new(p.tables().iter().map(|t| t.len()))
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort the step
/// before anything is modified.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("optimizer tables disagree with parameters"));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::shape("optimizer table size mismatch"));
        }
    }
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::numerical("non-finite gradient; optimizer step aborted"));
    }
    state.step += 1;
    let n = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(n);
    let c2 = 1.0 - ADAM_BETA2.powi(n);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// SHA-256 over the raw bits of every table, in order.
pub fn params_digest<P: ParamTables + ?Sized>(p: &P) -> String {
    let mut h = Sha256::new();
    for t in p.tables() {
        h.update((t.len() as u64).to_le_bytes());
        for v in t {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Residues per batch when pretraining, pairs per batch when fine-tuning.
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub dpo: DpoConfig,
    pub total: TotalLossConfig,
    /// Hidden width of the predictor.
    pub hidden: usize,
    /// Bridge steps `T`.
    pub steps: usize,
    /// Pretraining examples drawn per structure in each epoch.
    pub draws_per_structure: usize,
    /// Early-stopping patience in epochs; pretraining only.
    pub patience: usize,
    /// Positions scored by the pretraining loss.
    pub loss_mask: LossMask,
    /// Timestep samples per likelihood estimate in the energy term.
    pub likelihood_samples: usize,
    pub kbt_init: f64,
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        Self {
            epochs: 50,
            batch_size: 2000,
            base_lr: 1e-3,
            lr_schedule: LrSchedule::Noam { warmup: 4000, dim: 32 },
            seed: 0,
            loss_mode: LossMode::Pretrain,
            dpo: DpoConfig::default(),
            total: TotalLossConfig::default(),
            hidden: 32,
            steps: 25,
            draws_per_structure: 1,
            patience: 10,
            loss_mask: LossMask::All,
            likelihood_samples: 4,
            kbt_init: 1.0,
        }
    }

    pub fn finetune_default() -> Self {
        Self {
            epochs: 150,
            batch_size: 32,
            base_lr: 1e-5,
            lr_schedule: LrSchedule::Constant,
            loss_mode: LossMode::DpoEnergy,
            ..Self::pretrain_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 && self.loss_mode == LossMode::Pretrain {
            return Err(Error::config("pretraining needs at least one epoch"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr must be positive"));
        }
        if self.hidden == 0 || self.steps < 2 || self.draws_per_structure == 0 || self.likelihood_samples == 0 {
            return Err(Error::config("hidden, steps, draws and likelihood samples must be positive (steps >= 2)"));
        }
        if !self.kbt_init.is_finite() {
            return Err(Error::config("kbt_init must be finite"));
        }
        self.dpo.validate()?;
        self.total.validate()
    }
}

/// Per-epoch loss record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dpo_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kbt: Option<f64>,
}

fn check_finite(what: &str, epoch: usize, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::numerical(format!("{what} diverged at epoch {epoch} (loss {v})")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.05,
            seed: 0,
        }
    }
}

/// Full-batch cross-entropy of native tokens given features.
fn prior_loss(p: &PriorHeadParams, data: &[&WorldEntry], grad: Option<&mut PriorHeadParams>) -> Result<f64> {
    let k = p.alphabet;
    let total: usize = data.iter().map(|e| e.len()).sum();
    let scale = 1.0 / total as f64;
    let mut loss = 0.0;
    let mut grad = grad;
    for e in data {
        let mut logits = p.logits(&e.structure)?;
        for (i, &y) in e.native.iter().enumerate() {
            let row = &mut logits[i * k..(i + 1) * k];
            softmax_in_place(row);
            loss -= row[y].max(f64::MIN_POSITIVE).ln() * scale;
            if let Some(g) = grad.as_mut() {
                row[y] -= 1.0;
                let feats = e.structure.feature_row(i);
                for (a, &x) in feats.iter().enumerate() {
                    for c in 0..k {
                        g.weight[a * k + c] += scale * x * row[c];
                    }
                }
                for c in 0..k {
                    g.bias[c] += scale * row[c];
                }
            }
        }
    }
    Ok(loss)
}

/// Cross-entropy training of the feature-to-token prior head.
pub fn train_prior_head(data: &[&WorldEntry], cfg: &PriorConfig) -> Result<PriorHeadParams> {
    let first = data.first().ok_or_else(|| Error::domain("prior head needs training data"))?;
    let (f, k) = (first.structure.feature_width(), first.potts.alphabet());
    let mut p = PriorHeadParams::init(cfg.seed, f, k)?;
    let mut opt = OptimizerState::for_tables(&p);
    for epoch in 0..cfg.epochs {
        let mut g = PriorHeadParams::zeros(f, k);
        let loss = prior_loss(&p, data, Some(&mut g))?;
        check_finite("prior head training", epoch, loss)?;
        adam_step(&mut p.tables_mut(), &g.tables(), &mut opt, cfg.lr)?;
    }
    p.validate()?;
    Ok(p)
}

/// A structure prepared for bridge training.
#[derive(Clone, Debug)]
pub struct TrainExample<'a> {
    pub entry: &'a WorldEntry,
    pub prior: Sequence,
    pub target: Sequence,
}

impl<'a> TrainExample<'a> {
    pub fn new(entry: &'a WorldEntry, prior_head: &PriorHeadParams) -> Result<Self> {
        Ok(Self {
            entry,
            prior: crate::predictor::prior_encode(prior_head, &entry.structure)?,
            target: entry.native_seq(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Parameters of the best validation epoch.
    pub params: PredictorParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Deterministic validation loss: every step `t` once per structure.
pub fn pretrain_val_loss(
    params: &PredictorParams,
    data: &[TrainExample<'_>],
    schedule: &NoiseSchedule,
    mask: LossMask,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (n, ex) in data.iter().enumerate() {
        for t in 0..schedule.steps() {
            let s = rng::derive_path(seed, &[n as u64, t as u64]);
            total += pretrain_loss_masked(params, &ex.prior, &ex.target, &ex.entry.structure, t, schedule, s, mask, None)?;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Bridge pretraining with residue-budget batches and best-validation
/// early stopping.
pub fn pretrain(
    train: &[TrainExample<'_>],
    val: &[TrainExample<'_>],
    cfg: &TrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let first = train.first().ok_or_else(|| Error::domain("pretraining needs training data"))?;
    let shape = PredictorShape {
        hidden: cfg.hidden,
        alphabet: first.target.alphabet(),
        steps: cfg.steps,
        features: first.entry.structure.feature_width(),
    };
    let schedule = NoiseSchedule::cosine(cfg.steps)?;
    let mut params = PredictorParams::init(rng::derive_seed(cfg.seed, 0), shape)?;
    let mut opt = OptimizerState::for_tables(&params);
    let val_seed = rng::derive_seed(cfg.seed, 1);
    let val_set = if val.is_empty() { train } else { val };
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let epoch_seed = rng::derive_path(cfg.seed, &[2, epoch as u64]);
        let mut rng = rng::stream(epoch_seed);
        let mut order: Vec<usize> = (0..train.len())
            .flat_map(|i| std::iter::repeat_n(i, cfg.draws_per_structure))
            .collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        let mut cursor = 0;
        let mut draw = 0u64;
        while cursor < order.len() {
            let mut residues = 0;
            let mut batch = Vec::new();
            while cursor < order.len() && (batch.is_empty() || residues < cfg.batch_size) {
                let ex = &train[order[cursor]];
                residues += ex.target.len();
                batch.push((order[cursor], rng.gen_range(0..cfg.steps), rng::derive_seed(epoch_seed, draw)));
                cursor += 1;
                draw += 1;
            }
            let mut g = params.zeros_like();
            let mut batch_loss = 0.0;
            for &(i, t, seed) in &batch {
                let ex = &train[i];
                batch_loss += pretrain_loss_masked(
                    &params,
                    &ex.prior,
                    &ex.target,
                    &ex.entry.structure,
                    t,
                    &schedule,
                    seed,
                    cfg.loss_mask,
                    Some(&mut g),
                )?;
            }
            let inv = 1.0 / batch.len() as f64;
            g.tables_mut().into_iter().flatten().for_each(|v| *v *= inv);
            check_finite("pretraining", epoch, batch_loss)?;
            epoch_loss += batch_loss;
            lr = cfg.lr_schedule.lr(cfg.base_lr, opt.step + 1);
            adam_step(&mut params.tables_mut(), &g.tables(), &mut opt, lr)?;
        }
        let train_loss = epoch_loss / order.len() as f64;
        let val_loss = pretrain_val_loss(&params, val_set, &schedule, cfg.loss_mask, val_seed)?;
        check_finite("pretraining validation", epoch, val_loss)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: Some(val_loss),
            lr,
            dpo_loss: None,
            energy_loss: None,
            kbt: None,
        });
        if val_loss < best.0 {
            best = (val_loss, params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(PretrainOutcome {
        params: best.1,
        history,
        best_epoch: best.2,
    })
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub params: PredictorParams,
    pub kbt: f64,
    pub optimizer: OptimizerState,
    pub history: Vec<EpochRecord>,
}

/// Preference fine-tuning of a policy initialized from `reference`.
///
/// Each batch sums the preference loss of its pairs (one random step per
/// pair) and, when active, the energy term over the same pairs, and takes one
/// Adam step on the policy and `k_B T`. The reference is never modified.
pub fn dpo_finetune(
    pairs: &[PreferencePair],
    contexts: &ContextMap,
    reference: &PredictorParams,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let (w_dpo, w_energy) = cfg.loss_mode.term_weights(&cfg.total)?;
    if pairs.is_empty() {
        return Err(Error::domain("fine-tuning needs at least one preference pair"));
    }
    let schedule = NoiseSchedule::cosine(reference.shape.steps)?;
    let k = reference.shape.alphabet;
    if w_energy > 0.0 {
        let usable = pairs.iter().any(|p| {
            contexts
                .get(&p.structure_id)
                .is_some_and(|c| c.bound.num_chains() >= 2)
        });
        if !usable {
            return Err(Error::domain("energy term needs multi-chain structures"));
        }
    }
    let seqs: Vec<(Sequence, Sequence)> = pairs
        .iter()
        .map(|p| Ok((Sequence::new(p.winner.clone(), k)?, Sequence::new(p.loser.clone(), k)?)))
        .collect::<Result<_>>()?;
    let ref_digest = params_digest(reference);
    let mut params = reference.clone();
    let mut kbt = cfg.kbt_init;
    let mut opt = OptimizerState::new(params.tables().iter().map(|t| t.len()).chain([1]));
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let epoch_seed = rng::derive_path(cfg.seed, &[3, epoch as u64]);
        let mut rng = rng::stream(epoch_seed);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum_dpo, mut sum_energy, mut batches) = (0.0, 0.0, 0usize);
        let mut sum_total = 0.0;
        let mut lr = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch_seed = rng::derive_seed(epoch_seed, b as u64 + 1);
            let mut g = params.zeros_like();
            let mut g_kbt = 0.0;
            let inv = 1.0 / chunk.len() as f64;
            let mut dpo_value = 0.0;
            if w_dpo > 0.0 {
                let mut gd = params.zeros_like();
                for (j, &i) in chunk.iter().enumerate() {
                    let ctx = contexts
                        .get(&pairs[i].structure_id)
                        .ok_or_else(|| Error::domain(format!("no context for {}", pairs[i].structure_id)))?;
                    let ex = DpoSample {
                        structure: &ctx.bound,
                        prior: &ctx.prior,
                        winner: &seqs[i].0,
                        loser: &seqs[i].1,
                        t: rng.gen_range(0..schedule.steps()),
                        seed: rng::derive_seed(batch_seed, j as u64),
                    };
                    dpo_value += bridge_dpo_loss(&params, reference, &ex, &schedule, &cfg.dpo, Some(&mut gd))?;
                }
                dpo_value *= inv;
                for (dst, src) in g.tables_mut().into_iter().zip(gd.tables()) {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w_dpo * inv * s;
                    }
                }
            }
            let mut energy_value = 0.0;
            if w_energy > 0.0 {
                let batch_pairs: Vec<PreferencePair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
                let state = EnergyLossState {
                    kbt,
                    samples: cfg.likelihood_samples,
                    eval_seed: rng::derive_seed(batch_seed, 0),
                };
                let mut ge: GradientBundle = params.zeros_like();
                let mut gk = 0.0;
                energy_value = energy_loss(
                    &params,
                    &state,
                    &batch_pairs,
                    contexts,
                    &schedule,
                    Some(EnergyGrad {
                        params: &mut ge,
                        kbt: &mut gk,
                    }),
                )?;
                for (dst, src) in g.tables_mut().into_iter().zip(ge.tables()) {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w_energy * s;
                    }
                }
                g_kbt = w_energy * gk;
            }
            let total = w_dpo * dpo_value + w_energy * energy_value;
            check_finite("fine-tuning", epoch, total)?;
            sum_dpo += dpo_value;
            sum_energy += energy_value;
            sum_total += total;
            batches += 1;
            lr = cfg.lr_schedule.lr(cfg.base_lr, opt.step + 1);
            let kg = [g_kbt];
            let mut grads = g.tables();
            grads.push(&kg);
            let mut tables = params.tables_mut();
            tables.push(std::slice::from_mut(&mut kbt));
            adam_step(&mut tables, &grads, &mut opt, lr)?;
        }
        let nb = batches.max(1) as f64;
        history.push(EpochRecord {
            epoch,
            train_loss: sum_total / nb,
            val_loss: None,
            lr,
            dpo_loss: (w_dpo > 0.0).then_some(sum_dpo / nb),
            energy_loss: (w_energy > 0.0).then_some(sum_energy / nb),
            kbt: Some(kbt),
        });
    }
    if params_digest(reference) != ref_digest {
        return Err(Error::numerical("reference parameters changed during fine-tuning"));
    }
    Ok(FinetuneOutcome {
        params,
        kbt,
        optimizer: opt,
        history,
    })
}
