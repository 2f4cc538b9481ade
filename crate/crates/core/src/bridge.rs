//! Categorical Markov bridge kernels.
//!
//! A token survives step `t` with probability `beta_t` and otherwise jumps to
//! its target token, so after `t` steps it still sits on its prior token with
//! probability `s_t = prod_{u<t} beta_u`. The schedule forces `beta_0 = 1` and
//! `beta_{T-1} = 0`, which pins `z_T` to the target.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::sequence::Sequence;
use crate::world::Structure;

/// Lower bound applied to per-step loss weights.
pub const MIN_LOSS_WEIGHT: f64 = 1e-8;

/// Per-step survival probabilities and their cumulative products.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    survival: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    betas: Vec<f64>,
}

impl TryFrom<ScheduleRepr> for NoiseSchedule {
    type Error = Error;

    fn try_from(repr: ScheduleRepr) -> Result<Self> {
        NoiseSchedule::from_betas(repr.betas)
    }
}

impl From<NoiseSchedule> for ScheduleRepr {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleRepr { betas: s.betas }
    }
}

impl NoiseSchedule {
    /// `beta_t = cos^2((t / (T-1)) * pi/2)` with the endpoints set exactly.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidSchedule(format!(
                "cosine schedule needs at least 2 steps, got {steps}"
            )));
        }
        let last = (steps - 1) as f64;
        let betas = (0..steps)
            .map(|t| match t {
                0 => 1.0,
                t if t == steps - 1 => 0.0,
                t => (t as f64 / last * FRAC_PI_2).cos().powi(2),
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Builds a schedule from explicit betas, validating the pinning
    /// endpoints and monotonicity.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        let invalid = |msg: String| Err(Error::InvalidSchedule(msg));
        if betas.len() < 2 {
            return invalid(format!("need at least 2 steps, got {}", betas.len()));
        }
        if betas[0] != 1.0 || betas[betas.len() - 1] != 0.0 {
            return invalid("schedule must start at beta=1 and end at beta=0".into());
        }
        if betas.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return invalid("betas must lie in [0, 1]".into());
        }
        if betas.windows(2).any(|w| w[1] > w[0]) {
            return invalid("betas must be non-increasing".into());
        }
        let mut survival = Vec::with_capacity(betas.len() + 1);
        survival.push(1.0);
        for b in &betas {
            let last = *survival.last().unwrap();
            survival.push(last * b);
        }
        Ok(Self { betas, survival })
    }

    /// Number of transition steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    /// `s_0 ..= s_T`.
    pub fn survival(&self) -> &[f64] {
        &self.survival
    }

    fn check_time(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::domain(format!(
                "time {t} outside [0, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Probability that a token flips exactly at step `t`, i.e.
    /// `s_t - s_{t+1}`, clamped below at [`MIN_LOSS_WEIGHT`].
    pub fn loss_weight(&self, t: usize) -> f64 {
        (self.survival[t] - self.survival[t + 1]).max(MIN_LOSS_WEIGHT)
    }
}

/// Column-stochastic `K x K` kernel `Q_t = beta_t I + (1 - beta_t) y 1^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    k: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn size(&self) -> usize {
        self.k
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.k + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.k).map(|r| self.get(r, col)).collect()
    }

    /// `Q v` for a probability (column) vector `v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.k)
            .map(|r| (0..self.k).map(|c| self.get(r, c) * v[c]).sum())
            .collect()
    }

    pub fn is_column_stochastic(&self, tol: f64) -> bool {
        self.entries.iter().all(|&e| e >= 0.0)
            && (0..self.k).all(|c| (self.column(c).iter().sum::<f64>() - 1.0).abs() <= tol)
    }
}

pub fn transition_matrix(target_token: usize, beta_t: f64, k: usize) -> Result<TransitionMatrix> {
    if !(0.0..=1.0).contains(&beta_t) {
        return Err(Error::domain(format!("beta {beta_t} outside [0, 1]")));
    }
    if target_token >= k {
        return Err(Error::domain(format!(
            "target token {target_token} outside alphabet of size {k}"
        )));
    }
    let mut entries = vec![0.0; k * k];
    for row in 0..k {
        for col in 0..k {
            let stay = if row == col { beta_t } else { 0.0 };
            let jump = if row == target_token { 1.0 - beta_t } else { 0.0 };
            entries[row * k + col] = stay + jump;
        }
    }
    Ok(TransitionMatrix { k, entries })
}

/// Closed-form `p(z_t | x, y)` for a single position.
pub fn forward_marginal(
    prior_token: usize,
    target_token: usize,
    k: usize,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    schedule.check_time(t)?;
    if prior_token >= k || target_token >= k {
        return Err(Error::domain("token outside alphabet"));
    }
    let s = schedule.survival()[t];
    let mut p = vec![0.0; k];
    p[prior_token] += s;
    p[target_token] += 1.0 - s;
    Ok(p)
}

/// Samples `z_t ~ p(z_t | x, y)` position-wise.
///
/// Each position draws one uniform `u` and keeps its prior token iff
/// `u < s_t`. The uniforms depend only on `seed` and the position, so two
/// targets sampled with the same seed share their flip pattern.
pub fn forward_sample(
    x: &Sequence,
    y: &Sequence,
    t: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Sequence> {
    x.check_same_shape(y)?;
    schedule.check_time(t)?;
    let s = schedule.survival()[t];
    let mut rng = rng::stream(seed);
    let tokens = x
        .tokens()
        .iter()
        .zip(y.tokens())
        .map(|(&xi, &yi)| {
            let u: f64 = rng.gen();
            if u < s {
                xi
            } else {
                yi
            }
        })
        .collect();
    Sequence::new(tokens, x.alphabet())
}

/// `v_t`: true where the bridge state still differs from the target.
pub fn refine_mask(z: &Sequence, y: &Sequence) -> Result<Vec<bool>> {
    z.check_same_shape(y)?;
    Ok(z.tokens().iter().zip(y.tokens()).map(|(a, b)| a != b).collect())
}

/// Anything that predicts per-position target distributions from a bridge
/// state. Output is row-major `L x K`, each row a probability vector.
pub trait Denoiser {
    fn alphabet(&self) -> usize;

    fn denoise(&self, z: &Sequence, structure: &Structure, t: usize) -> Result<Vec<f64>>;
}

/// Next-state distribution of the learned reverse kernel for one position:
/// `beta_t * onehot(z) + (1 - beta_t) * y_hat`.
pub fn reverse_step_distribution(current: usize, y_hat: &[f64], beta_t: f64) -> Vec<f64> {
    let mut p: Vec<f64> = y_hat.iter().map(|q| (1.0 - beta_t) * q).collect();
    p[current] += beta_t;
    p
}

/// Inverse-CDF categorical draw; rounding slack lands on the last
/// supported category.
pub(crate) fn sample_categorical(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &q) in p.iter().enumerate() {
        if q > 0.0 {
            last = i;
            acc += q;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Runs the learned reverse process from `prior` for `T` steps and returns
/// `z_T`.
pub fn reverse_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    structure: &Structure,
    prior: &Sequence,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Sequence> {
    if prior.len() != structure.len() || prior.alphabet() != denoiser.alphabet() {
        return Err(Error::shape(format!(
            "prior {}x{} incompatible with structure of length {} and alphabet {}",
            prior.len(),
            prior.alphabet(),
            structure.len(),
            denoiser.alphabet()
        )));
    }
    let k = prior.alphabet();
    let mut rng = rng::stream(seed);
    let mut z = prior.clone();
    for t in 0..schedule.steps() {
        let beta = schedule.beta(t);
        // beta = 1 is the identity kernel; skip the network call.
        if beta == 1.0 {
            continue;
        }
        let y_hat = denoiser.denoise(&z, structure, t)?;
        if y_hat.len() != z.len() * k {
            return Err(Error::shape("denoiser output has the wrong size"));
        }
        let next = z
            .tokens()
            .iter()
            .zip(y_hat.chunks(k))
            .map(|(&cur, row)| {
                let p = reverse_step_distribution(cur, row, beta);
                sample_categorical(&p, rng.gen())
            })
            .collect();
        z = Sequence::new(next, k)?;
    }
    Ok(z)
}
