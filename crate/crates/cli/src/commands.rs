use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use bridgefold::bridge::NoiseSchedule;
use bridgefold::eval::{self, EvalItem};
use bridgefold::io::{self, Checkpoint};
use bridgefold::objectives::{build_contexts, LossMode};
use bridgefold::pipeline::{self, ReproduceConfig};
use bridgefold::predictor::Designer;
use bridgefold::prefs::{self, PairingConfig, Split};
use bridgefold::trainer::{self, PriorConfig, TrainConfig, TrainExample};
use bridgefold::world::{self, World, WorldConfig, WorldEntry};
use bridgefold::{rng, Error, Result, Sequence};
use serde::Serialize;
use serde_json::Value;

use crate::config::{self, Flags};
use crate::{Cli, Command, Part, Selection};

struct Ctx {
    seed: Option<u64>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    quiet: bool,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("this command needs --out".into()))
    }

    /// Writes JSON to `--out`, or to stdout without it.
    fn emit<T: Serialize>(&self, value: &T) -> Result<()> {
        match &self.out {
            Some(p) => io::write_json(value, p),
            None => {
                let text = serde_json::to_string_pretty(value)?;
                // a closed pipe (`| head`) is not an error
                match writeln!(std::io::stdout().lock(), "{text}") {
                    Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io(e)),
                    _ => Ok(()),
                }
            }
        }
    }

    fn train_config(&self, defaults: TrainConfig, flags: Flags) -> Result<TrainConfig> {
        let flags = flags.set("seed", self.seed);
        config::resolve(defaults, self.config.as_deref(), flags.into_map())
    }
}

fn select<'w>(world: &'w World, sel: &Selection, default: Part) -> Result<Vec<&'w WorldEntry>> {
    let Some(path) = &sel.split else {
        return match sel.part {
            None | Some(Part::All) => Ok(world.entries.iter().collect()),
            Some(_) => Err(Error::Config("--part needs --split".into())),
        };
    };
    let split: Split = io::read_json(path)?;
    let ids = match sel.part.unwrap_or(default) {
        Part::Train => split.train,
        Part::Val => split.val,
        Part::Test => split.test,
        Part::All => world.ids(),
    };
    world.subset(&ids)
}

fn parse_range(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("length range must look like 20..60, got '{s}'"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let lo = a.trim().parse().map_err(|_| bad())?;
    let hi = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
    Ok((lo, hi))
}

fn parse_fractions(s: &str) -> Result<(f64, f64, f64)> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("bad split fractions '{s}': {e}")))?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::Config(format!("need three split fractions, got '{s}'"))),
    }
}

fn examples<'a>(entries: &[&'a WorldEntry], ckpt: &Checkpoint) -> Result<Vec<TrainExample<'a>>> {
    let prior = ckpt.prior()?;
    entries.iter().map(|e| TrainExample::new(e, prior)).collect()
}

fn config_value<T: Serialize>(cfg: &T) -> Result<Value> {
    Ok(serde_json::to_value(cfg)?)
}

#[derive(Serialize)]
struct DesignRecord {
    structure_id: String,
    sample: usize,
    tokens: Vec<usize>,
    sequence: Option<String>,
    recovery: f64,
    energy: f64,
}

#[derive(Serialize)]
struct EnergyReport {
    rows: Vec<eval::EnergyRow>,
    /// Across (total energy, binding energy); lower is better.
    zscore: BTreeMap<String, f64>,
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        seed: cli.seed,
        config: cli.config,
        out: cli.out,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::GenWorld {
            structures,
            lengths,
            chains,
            alphabet,
            contact_density,
            mutants,
            max_mutations,
            split_out,
            split_fractions,
        } => {
            let (len_min, len_max) = parse_range(&lengths)?;
            let cfg = WorldConfig {
                structures,
                len_min,
                len_max,
                num_chains: chains,
                alphabet,
                contact_density,
                mutants_per_structure: mutants,
                max_mutations,
                ..WorldConfig::default()
            };
            let out = ctx.out()?;
            let w = world::gen_world(&cfg, ctx.seed())?;
            io::write_world(&w, out)?;
            ctx.log(format!("wrote {} structures to {}", w.entries.len(), out.display()));
            if let Some(path) = split_out {
                let split = prefs::split_by_structure(&w.ids(), parse_fractions(&split_fractions)?, ctx.seed())?;
                io::write_json(&split, &path)?;
                ctx.log(format!(
                    "split {}/{}/{} written to {}",
                    split.train.len(),
                    split.val.len(),
                    split.test.len(),
                    path.display()
                ));
            }
            Ok(())
        }
        Command::TrainPrior {
            world,
            select: sel,
            epochs,
            lr,
        } => {
            let out = ctx.out()?;
            let w = io::read_world(&world)?;
            let data = select(&w, &sel, Part::Train)?;
            let cfg = PriorConfig {
                epochs,
                lr,
                seed: ctx.seed(),
            };
            let head = trainer::train_prior_head(&data, &cfg)?;
            let recs: Vec<f64> = data
                .iter()
                .map(|e| eval::recovery_rate(&bridgefold::predictor::prior_encode(&head, &e.structure)?, &e.native_seq()))
                .collect::<Result<_>>()?;
            ctx.log(format!("prior median recovery {:.2}%", eval::median(&recs).unwrap_or(f64::NAN)));
            let ckpt = Checkpoint {
                predictor: None,
                prior: Some(head),
                kbt: 1.0,
                optimizer: None,
                schedule: None,
                config: config_value(&cfg)?,
            };
            io::save_checkpoint(&ckpt, out)
        }
        Command::Pretrain {
            world,
            prior,
            select: sel,
            epochs,
            lr,
            hidden,
            batch_size,
            draws,
        } => {
            let out = ctx.out()?;
            let cfg = ctx.train_config(
                ReproduceConfig::default().pretrain,
                Flags::default()
                    .set("epochs", epochs)
                    .set("base_lr", lr)
                    .set("hidden", hidden)
                    .set("batch_size", batch_size)
                    .set("draws_per_structure", draws),
            )?;
            let w = io::read_world(&world)?;
            let prior_ckpt = io::load_checkpoint(&prior)?;
            let train = select(&w, &sel, Part::Train)?;
            let val = match &sel.split {
                Some(_) => select(
                    &w,
                    &Selection {
                        split: sel.split.clone(),
                        part: Some(Part::Val),
                    },
                    Part::Val,
                )?,
                None => Vec::new(),
            };
            let (tx, vx) = (examples(&train, &prior_ckpt)?, examples(&val, &prior_ckpt)?);
            let outcome = trainer::pretrain(&tx, &vx, &cfg)?;
            let last = outcome.history.last().map(|h| h.train_loss).unwrap_or(f64::NAN);
            ctx.log(format!(
                "pretrained {} epochs, best epoch {}, final train loss {last:.4}",
                outcome.history.len(),
                outcome.best_epoch
            ));
            let ckpt = Checkpoint {
                schedule: Some(NoiseSchedule::cosine(cfg.steps)?),
                predictor: Some(outcome.params),
                prior: Some(prior_ckpt.prior()?.clone()),
                kbt: cfg.kbt_init,
                optimizer: None,
                config: config_value(&cfg)?,
            };
            io::save_checkpoint(&ckpt, out)
        }
        Command::MakePrefs {
            world,
            scores,
            select: sel,
            top_frac,
            bottom_frac,
            pairs_per_structure,
        } => {
            let out = ctx.out()?;
            let records = match (world, scores) {
                (_, Some(path)) => io::load_external_scores(&path)?,
                (Some(path), None) => {
                    let w = io::read_world(&path)?;
                    select(&w, &sel, Part::Train)?
                        .iter()
                        .flat_map(|e| e.mutants.iter().cloned())
                        .collect()
                }
                (None, None) => return Err(Error::Config("make-prefs needs --world or --scores".into())),
            };
            let cfg = PairingConfig {
                top_frac,
                bottom_frac,
                pairs_per_structure,
                seed: ctx.seed(),
            };
            let pairs = prefs::build_pairs(&records, &cfg)?;
            io::write_pairs(&pairs, out)?;
            ctx.log(format!("wrote {} pairs to {}", pairs.len(), out.display()));
            Ok(())
        }
        Command::Finetune {
            world,
            pairs,
            reference,
            mode,
            epochs,
            lr,
            batch_size,
            beta_dpo,
            lambda_energy,
        } => {
            let out = ctx.out()?;
            let mode = LossMode::parse(&mode)?;
            if mode == LossMode::Pretrain {
                return Err(Error::Config("finetune needs a preference mode".into()));
            }
            let cfg = ctx.train_config(
                ReproduceConfig::default().finetune,
                Flags::default()
                    .set("loss_mode", Some(mode.as_str()))
                    .set("epochs", epochs)
                    .set("base_lr", lr)
                    .set("batch_size", batch_size)
                    .set("beta_dpo", beta_dpo)
                    .set("lambda_energy", lambda_energy),
            )?;
            let w = io::read_world(&world)?;
            let pairs = io::read_pairs(&pairs, Some(&w))?;
            let ref_ckpt = io::load_checkpoint(&reference)?;
            let (ref_params, prior) = (ref_ckpt.predictor()?, ref_ckpt.prior()?);
            let ids: std::collections::BTreeSet<&str> = pairs.iter().map(|p| p.structure_id.as_str()).collect();
            let contexts = build_contexts(w.entries.iter().filter(|e| ids.contains(e.structure.id())), prior)?;
            let cfg = TrainConfig {
                hidden: ref_params.shape.hidden,
                steps: ref_params.shape.steps,
                ..cfg
            };
            let ft = trainer::dpo_finetune(&pairs, &contexts, ref_params, &cfg)?;
            let last = ft.history.last();
            ctx.log(format!(
                "fine-tuned ({}) {} epochs on {} pairs; final loss {:.4}, kbt {:.4}",
                mode.as_str(),
                ft.history.len(),
                pairs.len(),
                last.map(|h| h.train_loss).unwrap_or(f64::NAN),
                ft.kbt
            ));
            let ckpt = Checkpoint {
                predictor: Some(ft.params),
                prior: Some(prior.clone()),
                kbt: ft.kbt,
                optimizer: Some(ft.optimizer),
                schedule: Some(ref_ckpt.schedule()?),
                config: config_value(&cfg)?,
            };
            io::save_checkpoint(&ckpt, out)
        }
        Command::Sample {
            world,
            checkpoint,
            select: sel,
            samples,
        } => {
            let out = ctx.out()?;
            let w = io::read_world(&world)?;
            let ckpt = io::load_checkpoint(&checkpoint)?;
            let designer = Designer {
                predictor: ckpt.predictor()?,
                prior: ckpt.prior()?,
            };
            let schedule = ckpt.schedule()?;
            let mut records = Vec::new();
            for e in select(&w, &sel, Part::Test)? {
                let native = e.native_seq();
                for n in 0..samples {
                    let seed = rng::derive_path(ctx.seed(), &[rng::label(e.structure.id()), n as u64]);
                    let y: Sequence = designer.design(&e.structure, &schedule, seed)?;
                    records.push(DesignRecord {
                        structure_id: e.structure.id().to_string(),
                        sample: n,
                        sequence: (y.alphabet() == bridgefold::sequence::AMINO_ACIDS.len())
                            .then(|| y.to_letters())
                            .flatten(),
                        recovery: eval::recovery_rate(&y, &native)?,
                        energy: world::potts_energy(&e.structure, &e.potts, &y)?,
                        tokens: y.into_tokens(),
                    });
                }
            }
            io::write_jsonl(&records, out)?;
            ctx.log(format!("wrote {} designs to {}", records.len(), out.display()));
            Ok(())
        }
        Command::EvalIf {
            world,
            checkpoint,
            select: sel,
            likelihood_samples,
            designs,
        } => {
            let w = io::read_world(&world)?;
            let ckpt = io::load_checkpoint(&checkpoint)?;
            let (params, prior) = (ckpt.predictor()?, ckpt.prior()?);
            let schedule = ckpt.schedule()?;
            let entries = select(&w, &sel, Part::Test)?;
            let xs = entries
                .iter()
                .map(|e| TrainExample::new(e, prior))
                .collect::<Result<Vec<_>>>()?;
            let items: Vec<EvalItem> = xs
                .iter()
                .map(|x| EvalItem {
                    structure: &x.entry.structure,
                    prior: &x.prior,
                    native: &x.target,
                })
                .collect();
            let designer = Designer {
                predictor: params,
                prior,
            };
            let report = eval::inverse_folding_report(&designer, &items, &schedule, likelihood_samples, designs, ctx.seed())?;
            ctx.log(format!(
                "perplexity {:.4}, median recovery {:.2}%",
                report.get("perplexity").unwrap_or(f64::NAN),
                report.get("median_recovery").unwrap_or(f64::NAN)
            ));
            ctx.emit(&report)
        }
        Command::EvalDdg {
            world,
            checkpoint,
            pairs,
            select: sel,
            likelihood_samples,
        } => {
            let w = io::read_world(&world)?;
            let ckpt = io::load_checkpoint(&checkpoint)?;
            let entries = select(&w, &sel, Part::Test)?;
            let pairs = match pairs {
                Some(p) => io::read_pairs(&p, Some(&w))?,
                None => pipeline::heldout_ddg_pairs(&entries),
            };
            let contexts = build_contexts(entries.iter().copied(), ckpt.prior()?)?;
            let d = pipeline::predict_ddg(
                ckpt.predictor()?,
                ckpt.kbt,
                &pairs,
                &contexts,
                likelihood_samples,
                rng::derive_seed(ctx.seed(), 1),
            )?;
            let report = eval::ddg_metrics(&d.preds, &d.labels, &d.groups)?;
            ctx.log(format!(
                "{} pairs: spearman {:.4}, auroc {:.4}",
                d.preds.len(),
                report.get("spearman").unwrap_or(f64::NAN),
                report.get("auroc").unwrap_or(f64::NAN)
            ));
            ctx.emit(&report)
        }
        Command::EvalEnergy {
            world,
            models,
            select: sel,
            csv,
        } => {
            let w = io::read_world(&world)?;
            let entries = select(&w, &sel, Part::Test)?;
            let mut sets = Vec::new();
            let mut binding = Vec::new();
            for spec in &models {
                let (name, path) = spec
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--model expects NAME=CHECKPOINT, got '{spec}'")))?;
                let ckpt = io::load_checkpoint(Path::new(path))?;
                let designer = Designer {
                    predictor: ckpt.predictor()?,
                    prior: ckpt.prior()?,
                };
                let schedule = ckpt.schedule()?;
                let mut designs = Vec::new();
                let mut bind = 0.0;
                for e in &entries {
                    let seed = rng::derive_seed(ctx.seed(), rng::label(e.structure.id()));
                    let y = designer.design(&e.structure, &schedule, seed)?;
                    bind += world::binding_energy(&e.structure, &e.potts, &y)?;
                    designs.push((e.structure.id().to_string(), y));
                }
                binding.push(bind / entries.len().max(1) as f64);
                sets.push((name.to_string(), designs));
            }
            let rows = eval::energy_table(&sets, &entries)?;
            let mut zscore = BTreeMap::new();
            if rows.len() >= 2 {
                let table: Vec<Vec<f64>> = rows.iter().zip(&binding).map(|(r, b)| vec![r.mean, *b]).collect();
                for (i, r) in rows.iter().enumerate() {
                    zscore.insert(r.model.clone(), eval::zscore(&table, i)?);
                }
            }
            if let Some(path) = csv {
                std::fs::write(path, eval::energy_table_csv(&rows)?)?;
            }
            for r in &rows {
                ctx.log(format!("{}: mean energy {:.4} (std {:.4}, n {})", r.model, r.mean, r.std, r.n));
            }
            ctx.emit(&EnergyReport { rows, zscore })
        }
        Command::Reproduce { preset } => {
            let out = ctx.out()?;
            let mut cfg = match preset {
                Some(p) => io::read_json(&p).map_err(|e| Error::Config(format!("preset: {e}")))?,
                None => ReproduceConfig::default(),
            };
            if let Some(s) = ctx.seed {
                cfg.seed = s;
            }
            if ctx.config.is_some() {
                cfg.finetune = ctx.train_config(cfg.finetune, Flags::default())?;
            }
            let report = pipeline::reproduce(&cfg, Some(out))?;
            ctx.log(format!(
                "smoke test: {} ({:.2}% on {})",
                if report.smoke.pass { "pass" } else { "FAIL" },
                report.smoke.recovery,
                report.smoke.structure_id
            ));
            for c in &report.criteria {
                ctx.log(format!(
                    "criterion {} {}: {} ({})",
                    c.id,
                    c.name,
                    if c.pass { "pass" } else { "FAIL" },
                    c.detail
                ));
            }
            ctx.log(format!("report written to {}", out.join("report.json").display()));
            Ok(())
        }
    }
}
