//! Scalar training objectives.
//!
//! Every loss follows one gradient convention: it takes an optional
//! accumulator and adds `dLoss/dtheta` into it, so the same code path serves
//! plain evaluation, finite-difference checks and training.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{forward_sample, refine_mask, reverse_step_distribution, NoiseSchedule};
use crate::error::{Error, Result};
use crate::predictor::{prior_encode, Forward, GradientBundle, PredictorParams, PriorHeadParams};
use crate::rng;
use crate::sequence::Sequence;
use crate::world::{PreferencePair, Structure, WorldEntry};

/// Floor applied to per-token log-probabilities.
pub const LOG_PROB_FLOOR: f64 = -30.0;

pub(crate) fn clamped_log(p: f64) -> (f64, bool) {
    let lp = p.ln();
    if lp < LOG_PROB_FLOOR {
        (LOG_PROB_FLOOR, true)
    } else {
        (lp, false)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn ensure_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numerical(format!("{name} evaluated to {v}")))
    }
}

/// Which positions the pretraining loss scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMask {
    /// Only positions with `z_t != y` (the refinement mask).
    #[default]
    Pending,
    /// Every position. The reverse kernel resamples finished positions from
    /// the predictor too, so it has to learn to keep them.
    All,
}

/// Reparameterized bridge loss for one example at step `t`:
/// `lambda_t * sum_i v_i * -log phi(z_t, S, t)[i, y_i]`.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_loss(
    params: &PredictorParams,
    x: &Sequence,
    y: &Sequence,
    s: &Structure,
    t: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    grad: Option<&mut GradientBundle>,
) -> Result<f64> {
    pretrain_loss_masked(params, x, y, s, t, schedule, seed, LossMask::Pending, grad)
}

/// [`pretrain_loss`] with an explicit choice of scored positions.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_loss_masked(
    params: &PredictorParams,
    x: &Sequence,
    y: &Sequence,
    s: &Structure,
    t: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    which: LossMask,
    grad: Option<&mut GradientBundle>,
) -> Result<f64> {
    if t >= schedule.steps() {
        return Err(Error::domain(format!("pretraining step {t} outside [0, T)")));
    }
    let z = forward_sample(x, y, t, schedule, seed)?;
    let mask = match which {
        LossMask::Pending => refine_mask(&z, y)?,
        LossMask::All => vec![true; y.len()],
    };
    let weight = schedule.loss_weight(t);
    if !mask.iter().any(|&v| v) {
        return Ok(0.0);
    }
    let k = y.alphabet();
    let fwd = params.forward(&z, s, t)?;
    let mut loss = 0.0;
    let mut d_logits = grad.as_ref().map(|_| vec![0.0; fwd.probs.len()]);
    for (i, (&yi, &pending)) in y.tokens().iter().zip(&mask).enumerate() {
        if !pending {
            continue;
        }
        let row = &fwd.probs[i * k..(i + 1) * k];
        let (lp, clamped) = clamped_log(row[yi]);
        loss -= weight * lp;
        if let (Some(dl), false) = (d_logits.as_mut(), clamped) {
            for c in 0..k {
                dl[i * k + c] = weight * row[c];
            }
            dl[i * k + yi] -= weight;
        }
    }
    if let (Some(g), Some(dl)) = (grad, d_logits) {
        params.backward_logits(&fwd, s, &dl, g);
    }
    ensure_finite("pretraining loss", loss)
}

/// Selector for the per-step weighting `omega(lambda_t)` of the preference
/// loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaMode {
    /// `omega = 1`.
    #[default]
    Constant,
    /// `omega = lambda_t`, the step's loss weight.
    LossWeight,
}

impl OmegaMode {
    pub fn weight(self, schedule: &NoiseSchedule, t: usize) -> f64 {
        match self {
            OmegaMode::Constant => 1.0,
            OmegaMode::LossWeight => schedule.loss_weight(t),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    /// Deviation strength; must be positive.
    pub beta_dpo: f64,
    #[serde(default)]
    pub omega: OmegaMode,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta_dpo: 0.1,
            omega: OmegaMode::Constant,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_dpo > 0.0 && self.beta_dpo.is_finite()) {
            return Err(Error::config(format!(
                "beta_dpo must be positive, got {}",
                self.beta_dpo
            )));
        }
        Ok(())
    }
}

/// One preference example at a fixed step and seed.
#[derive(Clone, Copy, Debug)]
pub struct DpoSample<'a> {
    pub structure: &'a Structure,
    /// `X = E(S)`, shared by winner and loser.
    pub prior: &'a Sequence,
    pub winner: &'a Sequence,
    pub loser: &'a Sequence,
    pub t: usize,
    pub seed: u64,
}

/// `||Y - phi||^2` over the whole `L x K` matrix.
fn squared_error(y: &Sequence, probs: &[f64]) -> f64 {
    let k = y.alphabet();
    probs
        .chunks(k)
        .zip(y.tokens())
        .map(|(row, &yi)| {
            row.iter()
                .enumerate()
                .map(|(c, &p)| {
                    let target = if c == yi { 1.0 } else { 0.0 };
                    (target - p) * (target - p)
                })
                .sum::<f64>()
        })
        .sum()
}

/// The four squared errors of one preference example plus the policy
/// forward passes needed for the backward step.
struct DpoTerms {
    errors: DpoErrors,
    z_w: Sequence,
    z_l: Sequence,
}

fn dpo_terms(
    params: &PredictorParams,
    ref_params: &PredictorParams,
    ex: &DpoSample<'_>,
    schedule: &NoiseSchedule,
) -> Result<DpoTerms> {
    if ex.t >= schedule.steps() {
        return Err(Error::domain(format!("preference step {} outside [0, T)", ex.t)));
    }
    let z_w = forward_sample(ex.prior, ex.winner, ex.t, schedule, rng::derive_seed(ex.seed, 0))?;
    let z_l = forward_sample(ex.prior, ex.loser, ex.t, schedule, rng::derive_seed(ex.seed, 1))?;
    let s = ex.structure;
    Ok(DpoTerms {
        errors: DpoErrors {
            policy_winner: squared_error(ex.winner, &params.predict(&z_w, s, ex.t)?),
            ref_winner: squared_error(ex.winner, &ref_params.predict(&z_w, s, ex.t)?),
            policy_loser: squared_error(ex.loser, &params.predict(&z_l, s, ex.t)?),
            ref_loser: squared_error(ex.loser, &ref_params.predict(&z_l, s, ex.t)?),
        },
        z_w,
        z_l,
    })
}

/// The four squared errors `||Y - phi||^2` behind one preference example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpoErrors {
    pub policy_winner: f64,
    pub ref_winner: f64,
    pub policy_loser: f64,
    pub ref_loser: f64,
}

impl DpoErrors {
    /// Argument of the log-sigmoid:
    /// `-scale * ((err_w - ref_w) - (err_l - ref_l))`.
    pub fn margin(&self, scale: f64) -> f64 {
        -scale * ((self.policy_winner - self.ref_winner) - (self.policy_loser - self.ref_loser))
    }

    /// `-log sigmoid(margin)`.
    pub fn loss(&self, scale: f64) -> f64 {
        softplus(-self.margin(scale))
    }
}

/// `beta * T * omega_t`, the factor in front of the error difference.
pub fn dpo_scale(cfg: &DpoConfig, schedule: &NoiseSchedule, t: usize) -> f64 {
    cfg.beta_dpo * schedule.steps() as f64 * cfg.omega.weight(schedule, t)
}

pub fn dpo_errors(
    params: &PredictorParams,
    ref_params: &PredictorParams,
    ex: &DpoSample<'_>,
    schedule: &NoiseSchedule,
) -> Result<DpoErrors> {
    Ok(dpo_terms(params, ref_params, ex, schedule)?.errors)
}

pub fn bridge_dpo_margin(
    params: &PredictorParams,
    ref_params: &PredictorParams,
    ex: &DpoSample<'_>,
    schedule: &NoiseSchedule,
    cfg: &DpoConfig,
) -> Result<f64> {
    cfg.validate()?;
    Ok(dpo_errors(params, ref_params, ex, schedule)?.margin(dpo_scale(cfg, schedule, ex.t)))
}

/// Preference loss `-log sigmoid(margin)` for one example. Only the policy
/// receives gradients; the reference is frozen.
pub fn bridge_dpo_loss(
    params: &PredictorParams,
    ref_params: &PredictorParams,
    ex: &DpoSample<'_>,
    schedule: &NoiseSchedule,
    cfg: &DpoConfig,
    grad: Option<&mut GradientBundle>,
) -> Result<f64> {
    cfg.validate()?;
    let e = dpo_terms(params, ref_params, ex, schedule)?;
    let scale = dpo_scale(cfg, schedule, ex.t);
    let margin = e.errors.margin(scale);
    let loss = ensure_finite("preference loss", e.errors.loss(scale))?;
    if let Some(g) = grad {
        // dL/d inner = scale * sigmoid(-margin); d err / d phi = 2 (phi - Y)
        let d_inner = scale * sigmoid(-margin);
        for (z, y, sign) in [(&e.z_w, ex.winner, 1.0), (&e.z_l, ex.loser, -1.0)] {
            let fwd = params.forward(z, ex.structure, ex.t)?;
            let k = y.alphabet();
            let mut dp = vec![0.0; fwd.probs.len()];
            for (i, &yi) in y.tokens().iter().enumerate() {
                for c in 0..k {
                    let target = if c == yi { 1.0 } else { 0.0 };
                    dp[i * k + c] = sign * d_inner * 2.0 * (fwd.probs[i * k + c] - target);
                }
            }
            params.backward(&fwd, ex.structure, &dp, g);
        }
    }
    Ok(loss)
}

/// Forward passes of one likelihood estimate, kept for the backward step.
pub struct LikelihoodTrace {
    forwards: Vec<Forward>,
    /// Which positions hit the log-probability floor, per sample.
    clamped: Vec<Vec<bool>>,
    pub value: f64,
}

/// Evaluates the likelihood estimator and keeps its activations.
#[allow(clippy::too_many_arguments)]
pub fn likelihood_trace(
    params: &PredictorParams,
    y: &Sequence,
    s: &Structure,
    prior: &Sequence,
    schedule: &NoiseSchedule,
    samples: usize,
    eval_seed: u64,
) -> Result<LikelihoodTrace> {
    if samples == 0 {
        return Err(Error::config("likelihood needs at least one timestep sample"));
    }
    let k = y.alphabet();
    let mut t_rng = rng::stream(rng::derive_seed(eval_seed, 0));
    let mut total = 0.0;
    let mut forwards = Vec::with_capacity(samples);
    let mut clamped = Vec::with_capacity(samples);
    for j in 0..samples {
        let t = t_rng.gen_range(0..schedule.steps());
        let z = forward_sample(prior, y, t, schedule, rng::derive_path(eval_seed, &[1, j as u64]))?;
        let fwd = params.forward(&z, s, t)?;
        let mut flags = Vec::with_capacity(y.len());
        for (i, &yi) in y.tokens().iter().enumerate() {
            let (lp, c) = clamped_log(fwd.probs[i * k + yi]);
            total += lp;
            flags.push(c);
        }
        forwards.push(fwd);
        clamped.push(flags);
    }
    Ok(LikelihoodTrace {
        forwards,
        clamped,
        value: ensure_finite("log-likelihood", total / samples as f64)?,
    })
}

impl LikelihoodTrace {
    /// Adds `scale * d(value)/d(theta)` into `grad`.
    pub fn backward(
        &self,
        params: &PredictorParams,
        y: &Sequence,
        s: &Structure,
        scale: f64,
        grad: &mut GradientBundle,
    ) {
        let k = y.alphabet();
        let w = scale / self.forwards.len() as f64;
        for (fwd, flags) in self.forwards.iter().zip(&self.clamped) {
            let mut dl = vec![0.0; fwd.probs.len()];
            for (i, &yi) in y.tokens().iter().enumerate() {
                if flags[i] {
                    continue;
                }
                for c in 0..k {
                    dl[i * k + c] = -w * fwd.probs[i * k + c];
                }
                dl[i * k + yi] += w;
            }
            params.backward_logits(fwd, s, &dl, grad);
        }
    }
}

/// Deterministic estimate of `log p(Y | S)`: the mean over `samples` fixed
/// timestep draws of `sum_i log phi(z_t, S, t)[i, y_i]`.
///
/// The timestep and flip draws depend only on `eval_seed`, so different
/// targets evaluated with one seed share them.
#[allow(clippy::too_many_arguments)]
pub fn model_log_likelihood(
    params: &PredictorParams,
    y: &Sequence,
    s: &Structure,
    prior: &Sequence,
    schedule: &NoiseSchedule,
    samples: usize,
    eval_seed: u64,
    grad: Option<(&mut GradientBundle, f64)>,
) -> Result<f64> {
    let trace = likelihood_trace(params, y, s, prior, schedule, samples, eval_seed)?;
    if let Some((g, scale)) = grad {
        trace.backward(params, y, s, scale, g);
    }
    Ok(trace.value)
}

/// Bound and unbound contexts of one structure with its prior sequence.
#[derive(Clone, Debug)]
pub struct PairContext {
    pub bound: Structure,
    pub unbound: Structure,
    pub prior: Sequence,
}

impl PairContext {
    pub fn new(structure: &Structure, prior: Sequence) -> Self {
        Self {
            bound: structure.clone(),
            unbound: structure.unbound(),
            prior,
        }
    }
}

pub type ContextMap = BTreeMap<String, PairContext>;

/// Contexts for every entry, with priors from the frozen prior head.
pub fn build_contexts<'a>(
    entries: impl IntoIterator<Item = &'a WorldEntry>,
    prior_head: &PriorHeadParams,
) -> Result<ContextMap> {
    entries
        .into_iter()
        .map(|e| {
            let prior = prior_encode(prior_head, &e.structure)?;
            Ok((e.structure.id().to_string(), PairContext::new(&e.structure, prior)))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyLossState {
    /// Learnable `k_B T` scale.
    pub kbt: f64,
    /// Timestep samples per likelihood estimate.
    pub samples: usize,
    pub eval_seed: u64,
}

impl Default for EnergyLossState {
    fn default() -> Self {
        Self {
            kbt: 1.0,
            samples: 4,
            eval_seed: 0,
        }
    }
}

/// Gradient sink for losses that also depend on `k_B T`.
pub struct EnergyGrad<'a> {
    pub params: &'a mut GradientBundle,
    pub kbt: &'a mut f64,
}

/// The four likelihood traces behind one ddG prediction.
struct DdgTrace<'c> {
    ctx: &'c PairContext,
    winner: Sequence,
    loser: Sequence,
    /// winner bound, winner unbound, loser bound, loser unbound
    traces: [LikelihoodTrace; 4],
    kbt: f64,
}

impl DdgTrace<'_> {
    /// `ratio(winner) - ratio(loser)`.
    fn log_ratio_gap(&self) -> f64 {
        let [wb, wu, lb, lu] = &self.traces;
        (wb.value - wu.value) - (lb.value - lu.value)
    }

    fn value(&self) -> f64 {
        -self.kbt * self.log_ratio_gap()
    }

    /// Adds `scale * d(ddG)` for parameters and `k_B T`.
    fn backward(&self, params: &PredictorParams, scale: f64, g: EnergyGrad<'_>) {
        let coef = -self.kbt * scale;
        let [wb, wu, lb, lu] = &self.traces;
        let c = self.ctx;
        wb.backward(params, &self.winner, &c.bound, coef, g.params);
        wu.backward(params, &self.winner, &c.unbound, -coef, g.params);
        lb.backward(params, &self.loser, &c.bound, -coef, g.params);
        lu.backward(params, &self.loser, &c.unbound, coef, g.params);
        *g.kbt += -self.log_ratio_gap() * scale;
    }
}

fn ddg_trace<'c>(
    params: &PredictorParams,
    pair: &PreferencePair,
    contexts: &'c ContextMap,
    schedule: &NoiseSchedule,
    state: &EnergyLossState,
) -> Result<DdgTrace<'c>> {
    let ctx = contexts
        .get(&pair.structure_id)
        .ok_or_else(|| Error::domain(format!("no context for structure {}", pair.structure_id)))?;
    if ctx.bound.num_chains() < 2 {
        return Err(Error::domain(format!(
            "structure {} has a single chain; ddG is undefined",
            pair.structure_id
        )));
    }
    let k = params.shape.alphabet;
    let winner = Sequence::new(pair.winner.clone(), k)?;
    let loser = Sequence::new(pair.loser.clone(), k)?;
    if winner.len() != ctx.bound.len() || loser.len() != ctx.bound.len() {
        return Err(Error::shape("pair sequences do not match their structure"));
    }
    let ll = |y: &Sequence, s: &Structure| {
        likelihood_trace(params, y, s, &ctx.prior, schedule, state.samples, state.eval_seed)
    };
    let traces = [
        ll(&winner, &ctx.bound)?,
        ll(&winner, &ctx.unbound)?,
        ll(&loser, &ctx.bound)?,
        ll(&loser, &ctx.unbound)?,
    ];
    Ok(DdgTrace {
        ctx,
        winner,
        loser,
        traces,
        kbt: state.kbt,
    })
}

/// Boltzmann-aligned ddG of the winner relative to the loser:
/// `-kbt * (ratio(winner) - ratio(loser))`, where `ratio(Y)` is
/// `log p(Y | bound) - log p(Y | unbound)`.
///
/// `grad`, when given, receives `scale * d(ddG)` for parameters and `k_B T`.
pub fn ddg_predict(
    params: &PredictorParams,
    pair: &PreferencePair,
    contexts: &ContextMap,
    schedule: &NoiseSchedule,
    state: &EnergyLossState,
    grad: Option<(EnergyGrad<'_>, f64)>,
) -> Result<f64> {
    let trace = ddg_trace(params, pair, contexts, schedule, state)?;
    if let Some((g, scale)) = grad {
        trace.backward(params, scale, g);
    }
    Ok(trace.value())
}

/// Mean absolute error between predicted and labelled ddG.
pub fn energy_loss(
    params: &PredictorParams,
    state: &EnergyLossState,
    pairs: &[PreferencePair],
    contexts: &ContextMap,
    schedule: &NoiseSchedule,
    mut grad: Option<EnergyGrad<'_>>,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::domain("energy loss over an empty pair set"));
    }
    let n = pairs.len() as f64;
    let mut total = 0.0;
    for pair in pairs {
        let trace = ddg_trace(params, pair, contexts, schedule, state)?;
        let residual = trace.value() - pair.ddg_label;
        total += residual.abs();
        if let Some(g) = grad.as_mut() {
            if residual != 0.0 {
                let sink = EnergyGrad {
                    params: &mut *g.params,
                    kbt: &mut *g.kbt,
                };
                trace.backward(params, residual.signum() / n, sink);
            }
        }
    }
    ensure_finite("energy loss", total / n)
}

/// Which terms a training run optimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Pretrain,
    /// Preference loss plus the weighted energy term.
    #[default]
    DpoEnergy,
    /// Preference loss alone.
    DpoOnly,
    /// Energy term alone.
    EnergyOnly,
}

impl LossMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Self::Pretrain),
            "dpo_energy" | "full" => Ok(Self::DpoEnergy),
            "dpo_only" => Ok(Self::DpoOnly),
            "energy_only" => Ok(Self::EnergyOnly),
            other => Err(Error::config(format!("unknown loss mode '{other}'"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::DpoEnergy => "dpo_energy",
            Self::DpoOnly => "dpo_only",
            Self::EnergyOnly => "energy_only",
        }
    }

    /// Weights on the preference and energy terms.
    pub fn term_weights(self, cfg: &TotalLossConfig) -> Result<(f64, f64)> {
        match self {
            Self::DpoEnergy => Ok((1.0, cfg.lambda_energy)),
            Self::DpoOnly => Ok((1.0, 0.0)),
            Self::EnergyOnly => Ok((0.0, 1.0)),
            Self::Pretrain => Err(Error::config("pretraining has no fine-tuning objective")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TotalLossConfig {
    pub lambda_energy: f64,
}

impl Default for TotalLossConfig {
    fn default() -> Self {
        Self { lambda_energy: 0.5 }
    }
}

impl TotalLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_energy >= 0.0 && self.lambda_energy.is_finite()) {
            return Err(Error::config("lambda_energy must be non-negative"));
        }
        Ok(())
    }
}

/// `dpo + lambda * energy`, or one term alone in the ablation modes.
pub fn total_loss(dpo_term: f64, energy_term: f64, cfg: &TotalLossConfig, mode: LossMode) -> Result<f64> {
    cfg.validate()?;
    let (wd, we) = mode.term_weights(cfg)?;
    let mut total = 0.0;
    if wd != 0.0 {
        total += wd * dpo_term;
    }
    if we != 0.0 {
        total += we * energy_term;
    }
    Ok(total)
}

/// Design-ranking objective `log p(Y | S) - beta_post * E(S, Y)`.
#[allow(clippy::too_many_arguments)]
pub fn posterior_score(
    params: &PredictorParams,
    y: &Sequence,
    s: &Structure,
    prior: &Sequence,
    energy_fn: impl Fn(&Sequence) -> Result<f64>,
    beta_post: f64,
    schedule: &NoiseSchedule,
    samples: usize,
    eval_seed: u64,
) -> Result<f64> {
    if beta_post.is_nan() || beta_post < 0.0 {
        return Err(Error::config("beta_post must be non-negative"));
    }
    let ll = model_log_likelihood(params, y, s, prior, schedule, samples, eval_seed, None)?;
    if beta_post == 0.0 {
        return Ok(ll);
    }
    Ok(ll - beta_post * energy_fn(y)?)
}

/// Per-step log-probabilities `log p(z_{t+1} | z_t)` of a full reverse
/// path `z_0 ..= z_T` under the learned kernel.
pub fn reverse_path_log_probs(
    params: &PredictorParams,
    s: &Structure,
    path: &[Sequence],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if path.len() != schedule.steps() + 1 {
        return Err(Error::shape(format!(
            "path has {} states, expected {}",
            path.len(),
            schedule.steps() + 1
        )));
    }
    let k = params.shape.alphabet;
    (0..schedule.steps())
        .map(|t| {
            let (z, next) = (&path[t], &path[t + 1]);
            let y_hat = params.predict(z, s, t)?;
            let beta = schedule.beta(t);
            Ok(z.tokens()
                .iter()
                .zip(next.tokens())
                .zip(y_hat.chunks(k))
                .map(|((&cur, &nxt), row)| reverse_step_distribution(cur, row, beta)[nxt].ln())
                .sum())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{ParamTables, PredictorShape};
    use crate::world::{gen_structure, StructureConfig};

    fn shape() -> PredictorShape {
        PredictorShape {
            hidden: 4,
            alphabet: 3,
            steps: 5,
            features: 3,
        }
    }

    fn structure() -> Structure {
        gen_structure(
            "s",
            &StructureConfig {
                len: 4,
                num_chains: 2,
                contact_density: 0.5,
                env_width: 1,
            },
            2,
        )
        .unwrap()
    }

    fn seq(t: &[usize]) -> Sequence {
        Sequence::new(t.to_vec(), 3).unwrap()
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert_eq!(softplus(0.0), std::f64::consts::LN_2);
        assert!((softplus(800.0) - 800.0).abs() < 1e-9);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
    }

    #[test]
    fn pretrain_loss_single_token_value() {
        // uniform 4-way prediction, one pending token, weight 1
        let sh = PredictorShape {
            hidden: 2,
            alphabet: 4,
            steps: 2,
            features: 1,
        };
        let mut p = PredictorParams::init(1, sh).unwrap();
        p.head.fill(0.0);
        let sched = NoiseSchedule::from_betas(vec![1.0, 0.0]).unwrap();
        let s = Structure::chain_only("a", 1, 1).unwrap();
        let x = Sequence::new(vec![0], 4).unwrap();
        let y = Sequence::new(vec![2], 4).unwrap();
        // t = 1: s_1 = 1 so z = x, mask = 1, lambda_1 = s_1 - s_2 = 1
        let l = pretrain_loss(&p, &x, &y, &s, 1, &sched, 0, None).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pretrain_loss_is_zero_without_pending_tokens() {
        let p = PredictorParams::init(1, shape()).unwrap();
        let sched = NoiseSchedule::cosine(5).unwrap();
        let y = seq(&[0, 1, 2, 0]);
        let l = pretrain_loss(&p, &y, &y, &structure(), 3, &sched, 5, None).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn dpo_loss_is_ln2_at_reference() {
        let p = PredictorParams::init(4, shape()).unwrap();
        let sched = NoiseSchedule::cosine(5).unwrap();
        let s = structure();
        let (x, w, l) = (seq(&[0, 0, 1, 1]), seq(&[1, 2, 0, 1]), seq(&[2, 2, 2, 0]));
        let ex = DpoSample {
            structure: &s,
            prior: &x,
            winner: &w,
            loser: &l,
            t: 2,
            seed: 9,
        };
        let loss = bridge_dpo_loss(&p, &p, &ex, &sched, &DpoConfig::default(), None).unwrap();
        assert_eq!(loss, std::f64::consts::LN_2);
        let bad = DpoConfig {
            beta_dpo: 0.0,
            ..DpoConfig::default()
        };
        assert!(bridge_dpo_loss(&p, &p, &ex, &sched, &bad, None).is_err());
    }

    #[test]
    fn log_likelihood_of_uniform_predictor() {
        let sh = PredictorShape {
            hidden: 3,
            alphabet: 20,
            steps: 5,
            features: 2,
        };
        let mut p = PredictorParams::init(2, sh).unwrap();
        p.head.fill(0.0);
        let s = Structure::chain_only("u", 10, 2).unwrap();
        let y = Sequence::new((0..10).collect(), 20).unwrap();
        let x = Sequence::new(vec![0; 10], 20).unwrap();
        let sched = NoiseSchedule::cosine(5).unwrap();
        let ll = model_log_likelihood(&p, &y, &s, &x, &sched, 4, 3, None).unwrap();
        assert!((ll + 10.0 * 20f64.ln()).abs() < 1e-9);
        assert_eq!(ll, model_log_likelihood(&p, &y, &s, &x, &sched, 4, 3, None).unwrap());
        assert!(model_log_likelihood(&p, &y, &s, &x, &sched, 0, 3, None).is_err());
    }

    #[test]
    fn total_loss_modes() {
        let cfg = TotalLossConfig::default();
        let v = total_loss(0.75, 2.0, &cfg, LossMode::DpoEnergy).unwrap();
        assert!((v - 1.75).abs() < 1e-12);
        let zero = TotalLossConfig { lambda_energy: 0.0 };
        assert_eq!(total_loss(0.75, 2.0, &zero, LossMode::DpoEnergy).unwrap(), 0.75);
        assert_eq!(total_loss(0.75, 2.0, &cfg, LossMode::DpoOnly).unwrap(), 0.75);
        assert_eq!(total_loss(0.75, 2.0, &cfg, LossMode::EnergyOnly).unwrap(), 2.0);
        assert!(total_loss(0.0, 0.0, &TotalLossConfig { lambda_energy: -1.0 }, LossMode::DpoEnergy).is_err());
    }

    #[test]
    fn loss_mode_names_round_trip() {
        for m in [LossMode::Pretrain, LossMode::DpoEnergy, LossMode::DpoOnly, LossMode::EnergyOnly] {
            assert_eq!(LossMode::parse(m.as_str()).unwrap(), m);
        }
        assert!(LossMode::parse("nope").is_err());
    }

    #[test]
    fn energy_loss_requires_pairs() {
        let p = PredictorParams::init(1, shape()).unwrap();
        let sched = NoiseSchedule::cosine(5).unwrap();
        let r = energy_loss(&p, &EnergyLossState::default(), &[], &ContextMap::new(), &sched, None);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn ddg_rejects_single_chain_structures() {
        let p = PredictorParams::init(1, shape()).unwrap();
        let sched = NoiseSchedule::cosine(5).unwrap();
        let s = Structure::chain_only("c", 4, 3).unwrap();
        let mut ctx = ContextMap::new();
        ctx.insert("c".into(), PairContext::new(&s, seq(&[0, 0, 0, 0])));
        let pair = PreferencePair {
            structure_id: "c".into(),
            winner: vec![0, 1, 2, 0],
            loser: vec![1, 1, 2, 0],
            ddg_label: -1.0,
        };
        let r = ddg_predict(&p, &pair, &ctx, &sched, &EnergyLossState::default(), None);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn posterior_score_degenerates_to_likelihood() {
        let p = PredictorParams::init(3, shape()).unwrap();
        let sched = NoiseSchedule::cosine(5).unwrap();
        let s = structure();
        let (x, y) = (seq(&[0, 0, 0, 0]), seq(&[1, 2, 0, 1]));
        let ll = model_log_likelihood(&p, &y, &s, &x, &sched, 3, 1, None).unwrap();
        let ps = posterior_score(&p, &y, &s, &x, |_| Ok(7.0), 0.0, &sched, 3, 1).unwrap();
        assert_eq!(ps, ll);
        let ps = posterior_score(&p, &y, &s, &x, |_| Ok(7.0), 0.5, &sched, 3, 1).unwrap();
        assert!((ps - (ll - 3.5)).abs() < 1e-12);
    }

    #[test]
    fn reverse_path_probabilities_sum_to_one() {
        // L = 1, K = 2, T = 3: enumerate all paths from a fixed start
        let sh = PredictorShape {
            hidden: 2,
            alphabet: 2,
            steps: 3,
            features: 1,
        };
        let p = PredictorParams::init(5, sh).unwrap();
        let s = Structure::chain_only("t", 1, 1).unwrap();
        let sched = NoiseSchedule::from_betas(vec![1.0, 0.4, 0.0]).unwrap();
        let z0 = Sequence::new(vec![0], 2).unwrap();
        let mut total = 0.0;
        for code in 0..8usize {
            let mut path = vec![z0.clone()];
            for b in 0..3 {
                path.push(Sequence::new(vec![(code >> b) & 1], 2).unwrap());
            }
            let lp: f64 = reverse_path_log_probs(&p, &s, &path, &sched).unwrap().iter().sum();
            total += lp.exp();
        }
        assert!((total - 1.0).abs() < 1e-12);
        assert!(p.all_finite());
    }
}
