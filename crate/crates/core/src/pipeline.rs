//! The end-to-end desk-scale experiment.
//!
//! [`reproduce`] generates a world, trains the prior head and the reference
//! predictor, builds preference pairs, fine-tunes the full model and both
//! ablations, and evaluates energy, recovery and ddG ranking on held-out
//! structures. Every random choice is derived from one seed, so two runs with
//! the same configuration write byte-identical artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bridge::NoiseSchedule;
use crate::error::{Error, Result};
use crate::eval::{self, ddg_metrics, paired_difference, recovery, EvalItem};
use crate::io::{self, Checkpoint};
use crate::objectives::{build_contexts, ddg_predict, ContextMap, EnergyLossState, LossMode};
use crate::predictor::{Designer, PredictorParams, PriorHeadParams};
use crate::prefs::{build_pairs, split_by_structure, PairingConfig, Split};
use crate::rng;
use crate::sequence::Sequence;
use crate::trainer::{
    dpo_finetune, params_digest, pretrain, train_prior_head, LrSchedule, PriorConfig, TrainConfig, TrainExample,
};
use crate::world::{gen_world, potts_energy, PreferencePair, World, WorldConfig, WorldEntry};

/// Fine-tuning modes evaluated by [`reproduce`], full model first.
pub const MODES: [LossMode; 3] = [LossMode::DpoEnergy, LossMode::DpoOnly, LossMode::EnergyOnly];

pub const SMOKE_THRESHOLD: f64 = 98.0;
pub const SPEARMAN_THRESHOLD: f64 = 0.5;
pub const AUROC_THRESHOLD: f64 = 0.7;
pub const RECOVERY_TOLERANCE: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproduceConfig {
    pub seed: u64,
    pub world: WorldConfig,
    /// `(train, validation, test)` structure fractions.
    pub split: (f64, f64, f64),
    pub prior: PriorConfig,
    pub pretrain: TrainConfig,
    pub pairing: PairingConfig,
    pub finetune: TrainConfig,
    pub smoke_prior: PriorConfig,
    pub smoke_pretrain: TrainConfig,
    /// Likelihood samples per ddG evaluation.
    pub eval_samples: usize,
    /// Reverse-sampled designs per held-out structure.
    pub designs_per_structure: usize,
}

impl Default for ReproduceConfig {
    fn default() -> Self {
        let pretrain = TrainConfig {
            epochs: 60,
            base_lr: 3e-3,
            lr_schedule: LrSchedule::Constant,
            hidden: 16,
            draws_per_structure: 8,
            ..TrainConfig::pretrain_default()
        };
        Self {
            seed: 7,
            world: WorldConfig::default(),
            split: (0.5, 4.0 / 60.0, 26.0 / 60.0),
            prior: PriorConfig::default(),
            pretrain,
            pairing: PairingConfig::default(),
            finetune: TrainConfig {
                epochs: 20,
                base_lr: 1e-3,
                hidden: 16,
                ..TrainConfig::finetune_default()
            },
            smoke_prior: PriorConfig::default(),
            smoke_pretrain: TrainConfig {
                epochs: 200,
                base_lr: 1e-2,
                draws_per_structure: 16,
                patience: 200,
                ..pretrain
            },
            eval_samples: 4,
            designs_per_structure: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmokeSummary {
    pub structure_id: String,
    pub len: usize,
    pub recovery: f64,
    pub pass: bool,
}

/// Held-out evaluation of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub mode: String,
    pub kbt: f64,
    pub params_digest: String,
    pub recovery_median: f64,
    pub energy_mean: f64,
    /// Mean and standard error of `energy(model) - energy(reference)`,
    /// paired by structure.
    pub energy_diff_mean: f64,
    pub energy_diff_se: f64,
    pub ddg: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u32,
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproduceReport {
    pub config: ReproduceConfig,
    pub smoke: SmokeSummary,
    pub split: Split,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub pretrain_best_epoch: usize,
    pub reference: ModelSummary,
    pub models: BTreeMap<String, ModelSummary>,
    pub criteria: Vec<CriterionResult>,
}

impl ReproduceReport {
    pub fn model(&self, mode: LossMode) -> Result<&ModelSummary> {
        self.models
            .get(mode.as_str())
            .ok_or_else(|| Error::domain(format!("report has no {} model", mode.as_str())))
    }

    pub fn all_pass(&self) -> bool {
        self.smoke.pass && self.criteria.iter().all(|c| c.pass)
    }
}

/// Overfits the prior head and a predictor on one structure and reports the
/// recovery of a single reverse-sampled design.
pub fn overfit_smoke(entry: &WorldEntry, prior: &PriorConfig, cfg: &TrainConfig, seed: u64) -> Result<SmokeSummary> {
    let head = train_prior_head(&[entry], prior)?;
    let ex = TrainExample::new(entry, &head)?;
    let out = pretrain(std::slice::from_ref(&ex), &[], cfg)?;
    let schedule = NoiseSchedule::cosine(cfg.steps)?;
    let designer = Designer {
        predictor: &out.params,
        prior: &head,
    };
    let design = designer.design(&entry.structure, &schedule, seed)?;
    let recovery = eval::recovery_rate(&design, &ex.target)?;
    Ok(SmokeSummary {
        structure_id: entry.structure.id().to_string(),
        len: entry.len(),
        recovery,
        pass: recovery >= SMOKE_THRESHOLD,
    })
}

/// `(mutant, native)` pairs labelled with the mutant's oracle binding ddG.
pub fn heldout_ddg_pairs(entries: &[&WorldEntry]) -> Vec<PreferencePair> {
    entries
        .iter()
        .flat_map(|e| {
            e.mutants.iter().map(|m| PreferencePair {
                structure_id: m.structure_id.clone(),
                winner: m.tokens.clone(),
                loser: e.native.clone(),
                ddg_label: m.score,
            })
        })
        .collect()
}

/// Predicted ddG for every pair, with labels and structure groups.
pub fn predict_ddg(
    params: &PredictorParams,
    kbt: f64,
    pairs: &[PreferencePair],
    contexts: &ContextMap,
    samples: usize,
    eval_seed: u64,
) -> Result<eval::DdgPredictions> {
    let schedule = NoiseSchedule::cosine(params.shape.steps)?;
    let state = EnergyLossState {
        kbt,
        samples,
        eval_seed,
    };
    let preds = pairs
        .iter()
        .map(|p| ddg_predict(params, p, contexts, &schedule, &state, None))
        .collect::<Result<_>>()?;
    Ok(eval::DdgPredictions {
        preds,
        labels: pairs.iter().map(|p| p.ddg_label).collect(),
        groups: pairs.iter().map(|p| p.structure_id.clone()).collect(),
    })
}

/// Designs of one held-out structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSet {
    pub structure_id: String,
    pub designs: Vec<Vec<usize>>,
    /// Mean recovery of the designs, in percent.
    pub recovery: f64,
}

/// Raw held-out outputs of one model, written next to the report.
struct Evaluation {
    /// Mean design energy per held-out structure.
    energies: Vec<f64>,
    designs: Vec<DesignSet>,
    ddg: eval::DdgPredictions,
}

impl Evaluation {
    fn write(&self, dir: &Path, name: &str) -> Result<()> {
        io::write_jsonl(&self.designs, &dir.join(format!("{name}_designs.jsonl")))?;
        io::write_json(&self.ddg, &dir.join(format!("{name}_ddg.json")))
    }
}

struct Evaluator<'a> {
    prior: &'a PriorHeadParams,
    test: &'a [&'a WorldEntry],
    items: Vec<EvalItem<'a>>,
    heldout: Vec<PreferencePair>,
    contexts: &'a ContextMap,
    samples: usize,
    designs: usize,
    seed: u64,
}

impl Evaluator<'_> {
    fn energies(&self, params: &PredictorParams) -> Result<(f64, Vec<f64>, Vec<DesignSet>)> {
        let schedule = NoiseSchedule::cosine(params.shape.steps)?;
        let designer = Designer {
            predictor: params,
            prior: self.prior,
        };
        let rec = recovery(&designer, &self.items, &schedule, rng::derive_seed(self.seed, 0), self.designs)?;
        // mean oracle energy of each structure's designs
        let energies = rec
            .designs
            .iter()
            .zip(self.test)
            .map(|((_, ys, _), e)| {
                let total = ys
                    .iter()
                    .map(|y| potts_energy(&e.structure, &e.potts, y))
                    .sum::<Result<f64>>()?;
                Ok(total / ys.len() as f64)
            })
            .collect::<Result<Vec<_>>>()?;
        let designs = rec
            .designs
            .into_iter()
            .map(|(structure_id, ys, recovery)| DesignSet {
                structure_id,
                designs: ys.into_iter().map(Sequence::into_tokens).collect(),
                recovery,
            })
            .collect();
        Ok((rec.medians["full"], energies, designs))
    }

    fn summarize(
        &self,
        mode: &str,
        params: &PredictorParams,
        kbt: f64,
        reference: Option<&[f64]>,
    ) -> Result<(ModelSummary, Evaluation)> {
        let (recovery_median, energies, designs) = self.energies(params)?;
        let (energy_diff_mean, energy_diff_se) = match reference {
            Some(r) => paired_difference(&energies, r)?,
            None => (0.0, 0.0),
        };
        let d = predict_ddg(params, kbt, &self.heldout, self.contexts, self.samples, rng::derive_seed(self.seed, 1))?;
        let report = ddg_metrics(&d.preds, &d.labels, &d.groups)?;
        let summary = ModelSummary {
            mode: mode.to_string(),
            kbt,
            params_digest: params_digest(params),
            recovery_median,
            energy_mean: energies.iter().sum::<f64>() / energies.len() as f64,
            energy_diff_mean,
            energy_diff_se,
            ddg: report.scalars,
        };
        Ok((
            summary,
            Evaluation {
                energies,
                designs,
                ddg: d,
            },
        ))
    }
}

fn checkpoint(
    predictor: Option<&PredictorParams>,
    prior: &PriorHeadParams,
    kbt: f64,
    config: serde_json::Value,
) -> Result<Checkpoint> {
    let schedule = match predictor {
        Some(p) => Some(NoiseSchedule::cosine(p.shape.steps)?),
        None => None,
    };
    Ok(Checkpoint {
        predictor: predictor.cloned(),
        prior: Some(prior.clone()),
        kbt,
        optimizer: None,
        schedule,
        config,
    })
}

fn criteria(reference: &ModelSummary, models: &BTreeMap<String, ModelSummary>) -> Result<Vec<CriterionResult>> {
    let get = |m: LossMode| {
        models
            .get(m.as_str())
            .ok_or_else(|| Error::domain(format!("missing {} model", m.as_str())))
    };
    let (full, dpo_only, energy_only) = (get(LossMode::DpoEnergy)?, get(LossMode::DpoOnly)?, get(LossMode::EnergyOnly)?);
    let stat = |m: &ModelSummary, k: &str| m.ddg.get(k).copied().unwrap_or(f64::NAN);
    let improvement = -full.energy_diff_mean;
    let rec_gap = (full.recovery_median - reference.recovery_median).abs();
    let (sp, au, sp_ablation) = (stat(full, "spearman"), stat(full, "auroc"), stat(dpo_only, "spearman"));
    Ok(vec![
        CriterionResult {
            id: 5,
            name: "energy direction".into(),
            pass: improvement > 2.0 * full.energy_diff_se,
            detail: format!(
                "mean energy {:.4} vs reference {:.4}; improvement {improvement:.4}, 2*se {:.4}",
                full.energy_mean,
                reference.energy_mean,
                2.0 * full.energy_diff_se
            ),
        },
        CriterionResult {
            id: 6,
            name: "recovery preservation".into(),
            pass: rec_gap <= RECOVERY_TOLERANCE,
            detail: format!(
                "median recovery {:.4} vs reference {:.4}; gap {rec_gap:.4} (max {RECOVERY_TOLERANCE})",
                full.recovery_median, reference.recovery_median
            ),
        },
        CriterionResult {
            id: 7,
            name: "ddG ranking".into(),
            pass: sp >= SPEARMAN_THRESHOLD && au >= AUROC_THRESHOLD && sp_ablation < sp,
            detail: format!(
                "spearman {sp:.4} (min {SPEARMAN_THRESHOLD}), auroc {au:.4} (min {AUROC_THRESHOLD}), \
                 dpo_only spearman {sp_ablation:.4}"
            ),
        },
        CriterionResult {
            id: 8,
            name: "ablation recovery".into(),
            pass: energy_only.recovery_median < full.recovery_median,
            detail: format!(
                "energy_only recovery {:.4} vs full {:.4}",
                energy_only.recovery_median, full.recovery_median
            ),
        },
    ])
}

fn examples<'a>(set: &[&'a WorldEntry], prior: &PriorHeadParams) -> Result<Vec<TrainExample<'a>>> {
    set.iter().map(|e| TrainExample::new(e, prior)).collect()
}

/// Runs the whole experiment. When `out` is given, the world, split, pairs,
/// checkpoints and report are written there.
pub fn reproduce(cfg: &ReproduceConfig, out: Option<&Path>) -> Result<ReproduceReport> {
    let seed = cfg.seed;
    if cfg.pretrain.hidden != cfg.finetune.hidden || cfg.pretrain.steps != cfg.finetune.steps {
        return Err(Error::config("pretrain and finetune must agree on hidden width and steps"));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let world: World = gen_world(&cfg.world, rng::derive_seed(seed, 0))?;
    let split = split_by_structure(&world.ids(), cfg.split, rng::derive_seed(seed, 1))?;
    let (train, val, test) = (world.subset(&split.train)?, world.subset(&split.val)?, world.subset(&split.test)?);

    // smoke test on the shortest training structure
    let smallest = train
        .iter()
        .min_by_key(|e| (e.len(), e.structure.id()))
        .ok_or_else(|| Error::domain("empty training split"))?;
    let smoke = overfit_smoke(
        smallest,
        &PriorConfig {
            seed: rng::derive_seed(seed, 2),
            ..cfg.smoke_prior
        },
        &TrainConfig {
            seed: rng::derive_seed(seed, 3),
            ..cfg.smoke_pretrain
        },
        rng::derive_seed(seed, 4),
    )?;

    let prior = train_prior_head(
        &train,
        &PriorConfig {
            seed: rng::derive_seed(seed, 5),
            ..cfg.prior
        },
    )?;
    let (train_x, val_x, test_x) = (examples(&train, &prior)?, examples(&val, &prior)?, examples(&test, &prior)?);
    let pre_cfg = TrainConfig {
        seed: rng::derive_seed(seed, 6),
        ..cfg.pretrain
    };
    let pre = pretrain(&train_x, &val_x, &pre_cfg)?;
    let reference = pre.params;
    let ref_digest = params_digest(&reference);

    let records: Vec<_> = train.iter().flat_map(|e| e.mutants.iter().cloned()).collect();
    let pairs = build_pairs(
        &records,
        &PairingConfig {
            seed: rng::derive_seed(seed, 7),
            ..cfg.pairing
        },
    )?;
    let contexts = build_contexts(world.entries.iter(), &prior)?;

    let evaluator = Evaluator {
        prior: &prior,
        test: &test,
        items: test_x
            .iter()
            .map(|x| EvalItem {
                structure: &x.entry.structure,
                prior: &x.prior,
                native: &x.target,
            })
            .collect(),
        heldout: heldout_ddg_pairs(&test),
        contexts: &contexts,
        samples: cfg.eval_samples,
        designs: cfg.designs_per_structure,
        seed: rng::derive_seed(seed, 8),
    };
    let (ref_summary, ref_eval) = evaluator.summarize("reference", &reference, cfg.finetune.kbt_init, None)?;

    if let Some(dir) = out {
        io::write_world(&world, &dir.join("world.jsonl"))?;
        io::write_json(&split, &dir.join("split.json"))?;
        io::write_pairs(&pairs, &dir.join("pairs.jsonl"))?;
        io::write_json(&pre.history, &dir.join("pretrain_history.json"))?;
        let c = checkpoint(Some(&reference), &prior, cfg.finetune.kbt_init, serde_json::to_value(pre_cfg)?)?;
        io::save_checkpoint(&c, &dir.join("reference.ckpt.json"))?;
        ref_eval.write(dir, "reference")?;
    }

    let mut models = BTreeMap::new();
    for mode in MODES {
        let ft_cfg = TrainConfig {
            seed: rng::derive_seed(seed, 9),
            loss_mode: mode,
            ..cfg.finetune
        };
        let ft = dpo_finetune(&pairs, &contexts, &reference, &ft_cfg)?;
        let (summary, evaluation) = evaluator.summarize(mode.as_str(), &ft.params, ft.kbt, Some(&ref_eval.energies))?;
        if let Some(dir) = out {
            let mut c = checkpoint(Some(&ft.params), &prior, ft.kbt, serde_json::to_value(ft_cfg)?)?;
            c.optimizer = Some(ft.optimizer);
            io::save_checkpoint(&c, &dir.join(format!("{}.ckpt.json", mode.as_str())))?;
            io::write_json(&ft.history, &dir.join(format!("{}_history.json", mode.as_str())))?;
            evaluation.write(dir, mode.as_str())?;
        }
        models.insert(mode.as_str().to_string(), summary);
    }
    if params_digest(&reference) != ref_digest {
        return Err(Error::numerical("reference parameters changed during fine-tuning"));
    }

    let report = ReproduceReport {
        config: cfg.clone(),
        smoke,
        split,
        train_pairs: pairs.len(),
        heldout_pairs: evaluator.heldout.len(),
        pretrain_best_epoch: pre.best_epoch,
        criteria: criteria(&ref_summary, &models)?,
        reference: ref_summary,
        models,
    };
    if let Some(dir) = out {
        io::write_json(&report, &dir.join("report.json"))?;
    }
    Ok(report)
}
