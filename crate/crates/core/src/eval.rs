//! Evaluation metrics: perplexity, recovery, ZScore, energy tables and the
//! ddG suite.
//!
//! "Minimized" RMSE and MAE are errors after the best affine calibration
//! `a * pred + b` of the predictions (least squares and least absolute
//! deviations respectively).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bridge::NoiseSchedule;
use crate::error::{Error, Result};
use crate::objectives::model_log_likelihood;
use crate::predictor::{Designer, PredictorParams};
use crate::rng;
use crate::sequence::Sequence;
use crate::world::{potts_energy, Structure, WorldEntry};

/// Length classes, upper bounds exclusive.
pub const BUCKETS: [(&str, usize, usize); 4] = [
    ("short", 0, 100),
    ("medium", 100, 500),
    ("long", 500, 1000),
    ("full", 0, usize::MAX),
];

fn buckets_of(len: usize) -> impl Iterator<Item = &'static str> {
    BUCKETS
        .iter()
        .filter(move |(_, lo, hi)| (*lo..*hi).contains(&len))
        .map(|(name, _, _)| *name)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovery: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub n: usize,
}

/// Named scalars, length buckets and per-structure correlations.
/// Undefined metrics are absent from `scalars` and named in `missing`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scalars: BTreeMap<String, f64>,
    #[serde(default)]
    pub buckets: BTreeMap<String, BucketStats>,
    #[serde(default)]
    pub per_structure: BTreeMap<String, GroupMetrics>,
    #[serde(default)]
    pub missing: Vec<String>,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.scalars.get(name).copied()
    }

    fn put(&mut self, name: &str, v: Option<f64>) {
        match v {
            Some(x) => {
                self.scalars.insert(name.to_string(), x);
            }
            None => self.missing.push(name.to_string()),
        }
    }
}

/// One structure with its prior and native sequence.
#[derive(Clone, Copy, Debug)]
pub struct EvalItem<'a> {
    pub structure: &'a Structure,
    pub prior: &'a Sequence,
    pub native: &'a Sequence,
}

/// `exp` of the mean negative log-probability.
pub fn perplexity_from_log_probs(log_probs: &[f64]) -> Option<f64> {
    if log_probs.is_empty() {
        return None;
    }
    Some((-log_probs.iter().sum::<f64>() / log_probs.len() as f64).exp())
}

/// Token-level perplexity of the natives per length bucket, using the
/// fixed-seed likelihood estimator. Empty buckets are omitted.
pub fn perplexity(
    params: &PredictorParams,
    data: &[EvalItem<'_>],
    schedule: &NoiseSchedule,
    samples: usize,
    eval_seed: u64,
) -> Result<BTreeMap<String, f64>> {
    if data.is_empty() {
        return Err(Error::domain("perplexity over an empty dataset"));
    }
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for item in data {
        let ll = model_log_likelihood(
            params,
            item.native,
            item.structure,
            item.prior,
            schedule,
            samples,
            rng::derive_seed(eval_seed, rng::label(item.structure.id())),
            None,
        )?;
        for b in buckets_of(item.structure.len()) {
            let e = acc.entry(b.to_string()).or_default();
            e.0 += ll;
            e.1 += item.structure.len();
        }
    }
    Ok(acc
        .into_iter()
        .map(|(k, (ll, n))| (k, (-ll / n as f64).exp()))
        .collect())
}

/// Percentage of positions where `design` matches `native`.
pub fn recovery_rate(design: &Sequence, native: &Sequence) -> Result<f64> {
    design.check_same_shape(native)?;
    if native.is_empty() {
        return Err(Error::domain("recovery of an empty sequence"));
    }
    Ok(100.0 * design.matches(native) as f64 / native.len() as f64)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Median recovery per bucket from `(length, recovery)` records.
pub fn bucket_medians(records: &[(usize, f64)]) -> BTreeMap<String, f64> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &(len, r) in records {
        for b in buckets_of(len) {
            groups.entry(b.to_string()).or_default().push(r);
        }
    }
    groups
        .into_iter()
        .filter_map(|(k, v)| median(&v).map(|m| (k, m)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    /// `(structure id, designs, mean recovery %)` per structure.
    pub designs: Vec<(String, Vec<Sequence>, f64)>,
    pub medians: BTreeMap<String, f64>,
}

/// Designs `per_structure` sequences per structure and reports bucketed
/// medians of the per-structure mean recovery. Each structure's seeds are
/// derived from its id, so results do not depend on the order of `data`.
pub fn recovery(
    designer: &Designer<'_>,
    data: &[EvalItem<'_>],
    schedule: &NoiseSchedule,
    seed: u64,
    per_structure: usize,
) -> Result<RecoveryResult> {
    if data.is_empty() {
        return Err(Error::domain("recovery over an empty dataset"));
    }
    if per_structure == 0 {
        return Err(Error::config("recovery needs at least one design per structure"));
    }
    let mut designs = Vec::with_capacity(data.len());
    let mut records = Vec::with_capacity(data.len());
    for item in data {
        let id = item.structure.id();
        let base = rng::derive_seed(seed, rng::label(id));
        let mut ys = Vec::with_capacity(per_structure);
        let mut total = 0.0;
        for n in 0..per_structure {
            let y = designer.design(item.structure, schedule, rng::derive_seed(base, n as u64))?;
            total += recovery_rate(&y, item.native)?;
            ys.push(y);
        }
        let r = total / per_structure as f64;
        records.push((item.structure.len(), r));
        designs.push((id.to_string(), ys, r));
    }
    Ok(RecoveryResult {
        designs,
        medians: bucket_medians(&records),
    })
}

/// Perplexity and median recovery per length bucket, plus the `perplexity`
/// and `median_recovery` scalars of the full set.
pub fn inverse_folding_report(
    designer: &Designer<'_>,
    data: &[EvalItem<'_>],
    schedule: &NoiseSchedule,
    samples: usize,
    designs: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let ppl = perplexity(designer.predictor, data, schedule, samples, rng::derive_seed(seed, 0))?;
    let rec = recovery(designer, data, schedule, rng::derive_seed(seed, 1), designs)?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for item in data {
        for b in buckets_of(item.structure.len()) {
            *counts.entry(b).or_default() += 1;
        }
    }
    let mut report = MetricsReport::default();
    for (name, count) in counts {
        report.buckets.insert(
            name.to_string(),
            BucketStats {
                perplexity: ppl.get(name).copied(),
                recovery: rec.medians.get(name).copied(),
                count,
            },
        );
    }
    report.put("perplexity", ppl.get("full").copied());
    report.put("median_recovery", rec.medians.get("full").copied());
    Ok(report)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn population_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// `exp` of the mean over methods of the target model's standardized score.
///
/// `table[model][method]`; each method column is standardized across models
/// with the population standard deviation, and a zero-variance column
/// contributes 0.
pub fn zscore(table: &[Vec<f64>], target: usize) -> Result<f64> {
    if table.len() < 2 {
        return Err(Error::domain("ZScore needs at least two models"));
    }
    let methods = table[0].len();
    if methods == 0 || table.iter().any(|r| r.len() != methods) {
        return Err(Error::shape("ZScore table rows must have equal, non-zero length"));
    }
    if target >= table.len() {
        return Err(Error::domain(format!("target model {target} out of range")));
    }
    let mut sum = 0.0;
    for j in 0..methods {
        let col: Vec<f64> = table.iter().map(|r| r[j]).collect();
        let sd = population_std(&col);
        if sd > 0.0 {
            sum += (table[target][j] - mean(&col)) / sd;
        }
    }
    Ok((sum / methods as f64).exp())
}

/// Average (1-based) ranks; ties share the mean of their positions.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation; `None` when either vector has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

/// Least-squares `(a, b)` for `y ~ a * x + b`.
pub fn least_squares_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return (0.0, my);
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let a = sxy / sxx;
    (a, my - a * mx)
}

/// RMSE after the least-squares affine fit of `preds` to `labels`.
pub fn minimized_rmse(preds: &[f64], labels: &[f64]) -> f64 {
    let (a, b) = least_squares_fit(preds, labels);
    let sse: f64 = preds
        .iter()
        .zip(labels)
        .map(|(p, y)| (a * p + b - y).powi(2))
        .sum();
    (sse / preds.len() as f64).sqrt()
}

fn lad_at_slope(preds: &[f64], labels: &[f64], a: f64) -> (f64, f64) {
    let r: Vec<f64> = labels.iter().zip(preds).map(|(y, p)| y - a * p).collect();
    let b = median(&r).unwrap_or(0.0);
    let loss = r.iter().map(|v| (v - b).abs()).sum::<f64>() / r.len() as f64;
    (loss, b)
}

/// Least-absolute-deviation affine fit. For a fixed slope the best
/// intercept is the median residual; the remaining one-dimensional problem
/// is convex and piecewise linear with its optimum at a pairwise slope, so
/// a golden-section search over the range of pairwise slopes converges.
pub fn lad_fit(preds: &[f64], labels: &[f64]) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..preds.len() {
        for j in i + 1..preds.len() {
            let dp = preds[j] - preds[i];
            if dp != 0.0 {
                let s = (labels[j] - labels[i]) / dp;
                lo = lo.min(s);
                hi = hi.max(s);
            }
        }
    }
    if !lo.is_finite() {
        return (0.0, median(labels).unwrap_or(0.0));
    }
    let f = |a: f64| lad_at_slope(preds, labels, a).0;
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    // the optimum is a vertex; snap to the best of the bracket ends
    let best = [lo, hi, a, b, 0.5 * (a + b)]
        .into_iter()
        .min_by(|x, y| f(*x).total_cmp(&f(*y)))
        .unwrap_or(0.0);
    (best, lad_at_slope(preds, labels, best).1)
}

/// MAE after the least-absolute-deviation affine fit.
pub fn minimized_mae(preds: &[f64], labels: &[f64]) -> f64 {
    let (a, _) = lad_fit(preds, labels);
    lad_at_slope(preds, labels, a).0
}

/// Tie-aware AUROC for detecting `label < 0` with score `-pred`. `None`
/// when one class is empty.
pub fn auroc(preds: &[f64], labels: &[f64]) -> Option<f64> {
    let scores: Vec<f64> = preds.iter().map(|p| -p).collect();
    let r = ranks(&scores);
    let n_pos = labels.iter().filter(|&&y| y < 0.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let rank_sum: f64 = r.iter().zip(labels).filter(|(_, &y)| y < 0.0).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Minimum group size for per-structure correlations.
pub const MIN_GROUP: usize = 3;

/// Predictions, labels and structure ids of a ddG evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DdgPredictions {
    pub preds: Vec<f64>,
    pub labels: Vec<f64>,
    pub groups: Vec<String>,
}

/// Pearson, Spearman, minimized RMSE and MAE, AUROC, and per-structure
/// Pearson and Spearman averaged over structures with at least
/// [`MIN_GROUP`] records.
pub fn ddg_metrics(preds: &[f64], labels: &[f64], groups: &[String]) -> Result<MetricsReport> {
    if preds.len() != labels.len() || preds.len() != groups.len() {
        return Err(Error::shape("ddG vectors differ in length"));
    }
    if preds.len() < 2 {
        return Err(Error::domain("ddG metrics need at least two records"));
    }
    if preds.iter().chain(labels).any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite ddG value"));
    }
    let mut rep = MetricsReport::default();
    rep.put("pearson", pearson(preds, labels));
    rep.put("spearman", spearman(preds, labels));
    rep.put("rmse", Some(minimized_rmse(preds, labels)));
    rep.put("mae", Some(minimized_mae(preds, labels)));
    rep.put("auroc", auroc(preds, labels));
    rep.scalars.insert("n".into(), preds.len() as f64);
    let mut by_group: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((p, y), g) in preds.iter().zip(labels).zip(groups) {
        let e = by_group.entry(g.as_str()).or_default();
        e.0.push(*p);
        e.1.push(*y);
    }
    let (mut ps, mut ss, mut skipped) = (Vec::new(), Vec::new(), 0usize);
    for (g, (p, y)) in by_group {
        if p.len() < MIN_GROUP {
            skipped += 1;
            continue;
        }
        let m = GroupMetrics {
            pearson: pearson(&p, &y),
            spearman: spearman(&p, &y),
            n: p.len(),
        };
        ps.extend(m.pearson);
        ss.extend(m.spearman);
        rep.per_structure.insert(g.to_string(), m);
    }
    rep.put("per_structure_pearson", (!ps.is_empty()).then(|| mean(&ps)));
    rep.put("per_structure_spearman", (!ss.is_empty()).then(|| mean(&ss)));
    rep.scalars.insert("skipped_groups".into(), skipped as f64);
    Ok(rep)
}

/// Pools the folds' predictions and recomputes every metric on the pooled
/// vectors.
pub fn fold_aggregate(folds: &[DdgPredictions]) -> Result<MetricsReport> {
    if folds.is_empty() {
        return Err(Error::domain("no folds to aggregate"));
    }
    let mut pooled = DdgPredictions::default();
    for f in folds {
        pooled.preds.extend(&f.preds);
        pooled.labels.extend(&f.labels);
        pooled.groups.extend(f.groups.iter().cloned());
    }
    ddg_metrics(&pooled.preds, &pooled.labels, &pooled.groups)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub model: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and population standard deviation of oracle energies per model.
/// Designs are `(structure id, sequence)`.
pub fn energy_table(models: &[(String, Vec<(String, Sequence)>)], entries: &[&WorldEntry]) -> Result<Vec<EnergyRow>> {
    let lookup: BTreeMap<&str, &WorldEntry> = entries.iter().map(|e| (e.structure.id(), *e)).collect();
    models
        .iter()
        .map(|(name, designs)| {
            if designs.is_empty() {
                return Err(Error::domain(format!("model {name} has no designs")));
            }
            let energies = designs
                .iter()
                .map(|(id, y)| {
                    let e = lookup
                        .get(id.as_str())
                        .ok_or_else(|| Error::domain(format!("unknown structure id {id}")))?;
                    potts_energy(&e.structure, &e.potts, y)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(EnergyRow {
                model: name.clone(),
                mean: mean(&energies),
                std: population_std(&energies),
                n: energies.len(),
            })
        })
        .collect()
}

/// Energy table as CSV text.
pub fn energy_table_csv(rows: &[EnergyRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Mean and standard error of paired differences `a - b`.
pub fn paired_difference(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::shape("paired difference needs two equal vectors of length >= 2"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&d);
    let var = d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (d.len() - 1) as f64;
    Ok((m, (var / d.len() as f64).sqrt()))
}
