//! Structure- and time-conditioned target predictor, the prior head, and
//! their exact reverse-mode gradients.
//!
//! Per position `i` of the bridge state `z`:
//!
//! ```text
//! h0_i = tok[z_i] + time[t] + feat_i * P
//! m_i  = mean_{j in contacts(i)} h0_j * W1          (absent without contacts)
//! h_i  = h0_i + m_i * W2 + b_agg                    (aggregation term only with contacts)
//! p_i  = softmax(h_i * H + b_head)
//! ```
//!
//! All matrices are row-major and act on row vectors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::Denoiser;
use crate::error::{Error, Result};
use crate::rng;
use crate::sequence::Sequence;
use crate::world::Structure;

/// Dimension header carried with every parameter set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorShape {
    pub hidden: usize,
    pub alphabet: usize,
    pub steps: usize,
    pub features: usize,
}

/// Anything stored as a list of flat real tables (parameters, gradients,
/// optimizer moments).
pub trait ParamTables {
    fn tables(&self) -> Vec<&[f64]>;
    fn tables_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_entries(&self) -> usize {
        self.tables().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tables().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn squared_norm(&self) -> f64 {
        self.tables().iter().flat_map(|t| t.iter()).map(|v| v * v).sum()
    }

    fn fill(&mut self, value: f64) {
        for t in self.tables_mut() {
            t.fill(value);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub shape: PredictorShape,
    /// `K x d`
    pub token_embed: Vec<f64>,
    /// `T x d`
    pub time_embed: Vec<f64>,
    /// `f x d`
    pub feature_proj: Vec<f64>,
    /// `d x d`, applied to each neighbour before averaging.
    pub agg_in: Vec<f64>,
    /// `d x d`, applied to the neighbour mean.
    pub agg_out: Vec<f64>,
    pub agg_bias: Vec<f64>,
    /// `d x K`
    pub head: Vec<f64>,
    pub head_bias: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type GradientBundle = PredictorParams;

impl ParamTables for PredictorParams {
    fn tables(&self) -> Vec<&[f64]> {
        vec![
            &self.token_embed,
            &self.time_embed,
            &self.feature_proj,
            &self.agg_in,
            &self.agg_out,
            &self.agg_bias,
            &self.head,
            &self.head_bias,
        ]
    }

    fn tables_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.token_embed,
            &mut self.time_embed,
            &mut self.feature_proj,
            &mut self.agg_in,
            &mut self.agg_out,
            &mut self.agg_bias,
            &mut self.head,
            &mut self.head_bias,
        ]
    }
}

fn uniform_table(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl PredictorParams {
    pub fn zeros(shape: PredictorShape) -> Self {
        let PredictorShape {
            hidden: d,
            alphabet: k,
            steps: t,
            features: f,
        } = shape;
        Self {
            shape,
            token_embed: vec![0.0; k * d],
            time_embed: vec![0.0; t * d],
            feature_proj: vec![0.0; f * d],
            agg_in: vec![0.0; d * d],
            agg_out: vec![0.0; d * d],
            agg_bias: vec![0.0; d],
            head: vec![0.0; d * k],
            head_bias: vec![0.0; k],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape)
    }

    /// Weights from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    pub fn init(seed: u64, shape: PredictorShape) -> Result<Self> {
        let PredictorShape {
            hidden: d,
            alphabet: k,
            steps: t,
            features: f,
        } = shape;
        if d == 0 || k == 0 || t == 0 || f == 0 {
            return Err(Error::config(format!(
                "predictor dimensions must be positive: {shape:?}"
            )));
        }
        let mut rng = rng::stream(seed);
        Ok(Self {
            shape,
            token_embed: uniform_table(&mut rng, k, d),
            time_embed: uniform_table(&mut rng, t, d),
            feature_proj: uniform_table(&mut rng, f, d),
            agg_in: uniform_table(&mut rng, d, d),
            agg_out: uniform_table(&mut rng, d, d),
            agg_bias: vec![0.0; d],
            head: uniform_table(&mut rng, d, k),
            head_bias: vec![0.0; k],
        })
    }

    /// Verifies the shape header against every table.
    pub fn validate(&self) -> Result<()> {
        let z = Self::zeros(self.shape);
        for (a, b) in self.tables().iter().zip(z.tables()) {
            if a.len() != b.len() {
                return Err(Error::shape("parameter table disagrees with its shape header"));
            }
        }
        if !self.all_finite() {
            return Err(Error::numerical("non-finite predictor parameter"));
        }
        Ok(())
    }

    fn check_inputs(&self, z: &Sequence, s: &Structure, t: usize) -> Result<()> {
        let sh = self.shape;
        if z.len() != s.len() {
            return Err(Error::shape(format!(
                "state length {} vs structure length {}",
                z.len(),
                s.len()
            )));
        }
        if z.alphabet() != sh.alphabet {
            return Err(Error::shape(format!(
                "state alphabet {} vs predictor alphabet {}",
                z.alphabet(),
                sh.alphabet
            )));
        }
        if s.feature_width() != sh.features {
            return Err(Error::shape(format!(
                "structure has {} features, predictor expects {}",
                s.feature_width(),
                sh.features
            )));
        }
        if t >= sh.steps {
            return Err(Error::shape(format!("time {t} outside [0, {})", sh.steps)));
        }
        Ok(())
    }

    /// Forward pass keeping the activations needed by [`Self::backward`].
    pub fn forward(&self, z: &Sequence, s: &Structure, t: usize) -> Result<Forward> {
        self.check_inputs(z, s, t)?;
        let PredictorShape {
            hidden: d,
            alphabet: k,
            features: f,
            ..
        } = self.shape;
        let len = z.len();

        let mut h0 = vec![0.0; len * d];
        let time = &self.time_embed[t * d..(t + 1) * d];
        for (i, &tok) in z.tokens().iter().enumerate() {
            let row = &mut h0[i * d..(i + 1) * d];
            let emb = &self.token_embed[tok * d..(tok + 1) * d];
            for a in 0..d {
                row[a] = emb[a] + time[a];
            }
            for (c, &x) in s.feature_row(i).iter().enumerate().take(f) {
                if x != 0.0 {
                    let p = &self.feature_proj[c * d..(c + 1) * d];
                    for a in 0..d {
                        row[a] += x * p[a];
                    }
                }
            }
        }

        let mut g = vec![0.0; len * d];
        for i in 0..len {
            vec_mat(&h0[i * d..(i + 1) * d], &self.agg_in, d, &mut g[i * d..(i + 1) * d]);
        }

        let mut m = vec![0.0; len * d];
        let mut h = h0.clone();
        let mut tmp = vec![0.0; d];
        for i in 0..len {
            let nb = s.neighbors(i);
            if nb.is_empty() {
                continue;
            }
            let inv = 1.0 / nb.len() as f64;
            let mi = &mut m[i * d..(i + 1) * d];
            for &j in nb {
                for a in 0..d {
                    mi[a] += g[j * d + a];
                }
            }
            for v in mi.iter_mut() {
                *v *= inv;
            }
            vec_mat(mi, &self.agg_out, d, &mut tmp);
            let hi = &mut h[i * d..(i + 1) * d];
            for a in 0..d {
                hi[a] += tmp[a] + self.agg_bias[a];
            }
        }

        let mut probs = vec![0.0; len * k];
        for i in 0..len {
            let out = &mut probs[i * k..(i + 1) * k];
            out.copy_from_slice(&self.head_bias);
            let hi = &h[i * d..(i + 1) * d];
            for a in 0..d {
                let x = hi[a];
                let w = &self.head[a * k..(a + 1) * k];
                for c in 0..k {
                    out[c] += x * w[c];
                }
            }
            softmax_in_place(out);
        }

        Ok(Forward {
            tokens: z.tokens().to_vec(),
            t,
            h0,
            m,
            h,
            probs,
        })
    }

    /// Row-major `L x K` target distributions.
    pub fn predict(&self, z: &Sequence, s: &Structure, t: usize) -> Result<Vec<f64>> {
        Ok(self.forward(z, s, t)?.probs)
    }

    /// Accumulates `dL/dtheta` into `grad` given `dL/dprobs`.
    pub fn backward(&self, fwd: &Forward, s: &Structure, d_probs: &[f64], grad: &mut GradientBundle) {
        let k = self.shape.alphabet;
        let mut d_logits = vec![0.0; d_probs.len()];
        for ((dl, dp), p) in d_logits
            .chunks_mut(k)
            .zip(d_probs.chunks(k))
            .zip(fwd.probs.chunks(k))
        {
            let dot: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
            for c in 0..k {
                dl[c] = p[c] * (dp[c] - dot);
            }
        }
        self.backward_logits(fwd, s, &d_logits, grad);
    }

    /// Accumulates `dL/dtheta` into `grad` given `dL/dlogits`.
    pub fn backward_logits(
        &self,
        fwd: &Forward,
        s: &Structure,
        d_logits: &[f64],
        grad: &mut GradientBundle,
    ) {
        let PredictorShape {
            hidden: d,
            alphabet: k,
            features: f,
            ..
        } = self.shape;
        let len = fwd.tokens.len();

        // head
        let mut dh = vec![0.0; len * d];
        for i in 0..len {
            let dl = &d_logits[i * k..(i + 1) * k];
            let hi = &fwd.h[i * d..(i + 1) * d];
            for c in 0..k {
                grad.head_bias[c] += dl[c];
            }
            let dhi = &mut dh[i * d..(i + 1) * d];
            for a in 0..d {
                let w = &self.head[a * k..(a + 1) * k];
                let gw = &mut grad.head[a * k..(a + 1) * k];
                let mut acc = 0.0;
                for c in 0..k {
                    gw[c] += hi[a] * dl[c];
                    acc += w[c] * dl[c];
                }
                dhi[a] = acc;
            }
        }

        // aggregation
        let mut dh0 = dh.clone();
        let mut dg = vec![0.0; len * d];
        let mut dm = vec![0.0; d];
        for i in 0..len {
            let nb = s.neighbors(i);
            if nb.is_empty() {
                continue;
            }
            let dhi = &dh[i * d..(i + 1) * d];
            let mi = &fwd.m[i * d..(i + 1) * d];
            for a in 0..d {
                grad.agg_bias[a] += dhi[a];
            }
            for a in 0..d {
                let w = &self.agg_out[a * d..(a + 1) * d];
                let gw = &mut grad.agg_out[a * d..(a + 1) * d];
                let mut acc = 0.0;
                for b in 0..d {
                    gw[b] += mi[a] * dhi[b];
                    acc += w[b] * dhi[b];
                }
                dm[a] = acc;
            }
            let inv = 1.0 / nb.len() as f64;
            for &j in nb {
                for a in 0..d {
                    dg[j * d + a] += dm[a] * inv;
                }
            }
        }
        for j in 0..len {
            let dgj = &dg[j * d..(j + 1) * d];
            if dgj.iter().all(|&v| v == 0.0) {
                continue;
            }
            let h0j = &fwd.h0[j * d..(j + 1) * d];
            let dh0j = &mut dh0[j * d..(j + 1) * d];
            for a in 0..d {
                let w = &self.agg_in[a * d..(a + 1) * d];
                let gw = &mut grad.agg_in[a * d..(a + 1) * d];
                let mut acc = 0.0;
                for b in 0..d {
                    gw[b] += h0j[a] * dgj[b];
                    acc += w[b] * dgj[b];
                }
                dh0j[a] += acc;
            }
        }

        // embeddings
        let t = fwd.t;
        for (i, &tok) in fwd.tokens.iter().enumerate() {
            let dh0i = &dh0[i * d..(i + 1) * d];
            for a in 0..d {
                grad.token_embed[tok * d + a] += dh0i[a];
                grad.time_embed[t * d + a] += dh0i[a];
            }
            for (c, &x) in s.feature_row(i).iter().enumerate().take(f) {
                if x != 0.0 {
                    let gp = &mut grad.feature_proj[c * d..(c + 1) * d];
                    for a in 0..d {
                        gp[a] += x * dh0i[a];
                    }
                }
            }
        }
    }
}

impl Denoiser for PredictorParams {
    fn alphabet(&self) -> usize {
        self.shape.alphabet
    }

    fn denoise(&self, z: &Sequence, structure: &Structure, t: usize) -> Result<Vec<f64>> {
        self.predict(z, structure, t)
    }
}

/// Activations of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    tokens: Vec<usize>,
    t: usize,
    h0: Vec<f64>,
    m: Vec<f64>,
    h: Vec<f64>,
    /// Row-major `L x K`.
    pub probs: Vec<f64>,
}

fn vec_mat(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    out.fill(0.0);
    for (a, &xa) in x.iter().enumerate() {
        if xa == 0.0 {
            continue;
        }
        let row = &w[a * cols..(a + 1) * cols];
        for b in 0..cols {
            out[b] += xa * row[b];
        }
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Linear map from structure features to prior-token logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorHeadParams {
    pub features: usize,
    pub alphabet: usize,
    /// `f x K`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParamTables for PriorHeadParams {
    fn tables(&self) -> Vec<&[f64]> {
        vec![&self.weight, &self.bias]
    }

    fn tables_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl PriorHeadParams {
    pub fn zeros(features: usize, alphabet: usize) -> Self {
        Self {
            features,
            alphabet,
            weight: vec![0.0; features * alphabet],
            bias: vec![0.0; alphabet],
        }
    }

    pub fn init(seed: u64, features: usize, alphabet: usize) -> Result<Self> {
        if features == 0 || alphabet == 0 {
            return Err(Error::config("prior head dimensions must be positive"));
        }
        let mut rng = rng::stream(seed);
        Ok(Self {
            features,
            alphabet,
            weight: uniform_table(&mut rng, features, alphabet),
            bias: vec![0.0; alphabet],
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.len() != self.features * self.alphabet || self.bias.len() != self.alphabet {
            return Err(Error::shape("prior head tables disagree with their header"));
        }
        if !self.all_finite() {
            return Err(Error::numerical("non-finite prior head parameter"));
        }
        Ok(())
    }

    /// Row-major `L x K` logits.
    pub fn logits(&self, s: &Structure) -> Result<Vec<f64>> {
        if s.feature_width() != self.features {
            return Err(Error::shape(format!(
                "structure has {} features, prior head expects {}",
                s.feature_width(),
                self.features
            )));
        }
        let k = self.alphabet;
        let mut out = vec![0.0; s.len() * k];
        for i in 0..s.len() {
            let row = &mut out[i * k..(i + 1) * k];
            row.copy_from_slice(&self.bias);
            vec_mat_add(s.feature_row(i), &self.weight, k, row);
        }
        Ok(out)
    }
}

fn vec_mat_add(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    for (a, &xa) in x.iter().enumerate() {
        let row = &w[a * cols..(a + 1) * cols];
        for b in 0..cols {
            out[b] += xa * row[b];
        }
    }
}

/// Deterministic prior `X = E(S)`: per-position argmax of the prior head.
pub fn prior_encode(prior: &PriorHeadParams, s: &Structure) -> Result<Sequence> {
    let logits = prior.logits(s)?;
    let tokens = logits.chunks(prior.alphabet).map(argmax).collect();
    Sequence::new(tokens, prior.alphabet)
}

/// A complete generator: frozen prior head plus bridge predictor.
#[derive(Clone, Copy, Debug)]
pub struct Designer<'a> {
    pub predictor: &'a PredictorParams,
    pub prior: &'a PriorHeadParams,
}

impl Designer<'_> {
    pub fn design(
        &self,
        s: &Structure,
        schedule: &crate::bridge::NoiseSchedule,
        seed: u64,
    ) -> Result<Sequence> {
        let x = prior_encode(self.prior, s)?;
        crate::bridge::reverse_sample(self.predictor, s, &x, schedule, seed)
    }
}

/// Exact gradient of any scalar loss written against the
/// `(params, Option<&mut grad>)` accumulation convention.
pub fn grad<F>(loss: F, params: &PredictorParams) -> Result<(f64, GradientBundle)>
where
    F: Fn(&PredictorParams, Option<&mut GradientBundle>) -> Result<f64>,
{
    let mut g = params.zeros_like();
    let value = loss(params, Some(&mut g))?;
    if !value.is_finite() {
        return Err(Error::numerical(format!("loss evaluated to {value}")));
    }
    Ok((value, g))
}

/// Largest relative error between analytic and central-difference
/// gradients, over every parameter entry. The relative error of an entry is
/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps entries whose true
/// gradient is zero from amplifying rounding noise.
pub fn gradient_check<F>(loss: F, params: &PredictorParams, h: f64, floor: f64) -> Result<f64>
where
    F: Fn(&PredictorParams, Option<&mut GradientBundle>) -> Result<f64>,
{
    let (_, analytic) = grad(&loss, params)?;
    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    for (ti, ta) in analytic.tables().iter().enumerate() {
        for (e, &a) in ta.iter().enumerate() {
            let orig = work.tables()[ti][e];
            work.tables_mut()[ti][e] = orig + h;
            let up = loss(&work, None)?;
            work.tables_mut()[ti][e] = orig - h;
            let down = loss(&work, None)?;
            work.tables_mut()[ti][e] = orig;
            let n = (up - down) / (2.0 * h);
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(floor));
        }
    }
    Ok(worst)
}
