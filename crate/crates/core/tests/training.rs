use bridgefold::objectives::{build_contexts, LossMode};
use bridgefold::pipeline::{overfit_smoke, SMOKE_THRESHOLD};
use bridgefold::predictor::{prior_encode, ParamTables};
use bridgefold::prefs::{build_pairs, PairingConfig};
use bridgefold::trainer::{
    dpo_finetune, params_digest, pretrain, train_prior_head, LrSchedule, PriorConfig, TrainConfig, TrainExample,
};
use bridgefold::world::{gen_world, World, WorldConfig};

fn world(len: usize, structures: usize) -> World {
    let cfg = WorldConfig {
        structures,
        len_min: len,
        len_max: len,
        alphabet: 5,
        contact_density: 0.3,
        anneal_steps_per_residue: 50,
        mutants_per_structure: 12,
        ..WorldConfig::default()
    };
    gen_world(&cfg, 3).unwrap()
}

fn small_pretrain(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 40,
        base_lr: 1e-2,
        lr_schedule: LrSchedule::Constant,
        hidden: 6,
        steps: 6,
        draws_per_structure: 2,
        seed,
        ..TrainConfig::pretrain_default()
    }
}

#[test]
fn prior_head_memorizes_a_short_native() {
    let w = world(8, 1);
    let e = &w.entries[0];
    let head = train_prior_head(&[e], &PriorConfig { epochs: 1500, lr: 0.05, seed: 1 }).unwrap();
    assert_eq!(prior_encode(&head, &e.structure).unwrap().tokens(), &e.native[..]);
}

#[test]
fn bridge_overfits_one_structure() {
    let w = world(10, 1);
    let cfg = TrainConfig {
        epochs: 150,
        draws_per_structure: 16,
        patience: 150,
        ..small_pretrain(2)
    };
    let smoke = overfit_smoke(&w.entries[0], &PriorConfig { seed: 4, ..Default::default() }, &cfg, 5).unwrap();
    assert!(smoke.recovery >= SMOKE_THRESHOLD, "recovery {}", smoke.recovery);
}

#[test]
fn pretraining_is_reproducible() {
    let w = world(9, 3);
    let refs: Vec<_> = w.entries.iter().collect();
    let head = train_prior_head(&refs, &PriorConfig { epochs: 20, ..Default::default() }).unwrap();
    let ex: Vec<_> = refs.iter().map(|e| TrainExample::new(e, &head).unwrap()).collect();
    let a = pretrain(&ex[..2], &ex[2..], &small_pretrain(9)).unwrap();
    let b = pretrain(&ex[..2], &ex[2..], &small_pretrain(9)).unwrap();
    assert_eq!(params_digest(&a.params), params_digest(&b.params));
    assert_eq!(a.history, b.history);
    let c = pretrain(&ex[..2], &ex[2..], &small_pretrain(10)).unwrap();
    assert_ne!(params_digest(&a.params), params_digest(&c.params));
}

struct Setup {
    world: World,
    head: bridgefold::predictor::PriorHeadParams,
    reference: bridgefold::predictor::PredictorParams,
}

fn setup() -> Setup {
    let world = world(10, 3);
    let refs: Vec<_> = world.entries.iter().collect();
    let head = train_prior_head(&refs, &PriorConfig { epochs: 20, ..Default::default() }).unwrap();
    let ex: Vec<_> = refs.iter().map(|e| TrainExample::new(e, &head).unwrap()).collect();
    let reference = pretrain(&ex, &[], &small_pretrain(1)).unwrap().params;
    Setup { world, head, reference }
}

fn finetune_cfg(mode: LossMode, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        base_lr: 1e-2,
        loss_mode: mode,
        likelihood_samples: 2,
        kbt_init: 0.7,
        ..TrainConfig::finetune_default()
    }
}

#[test]
fn finetuning_modes_behave() {
    let s = setup();
    let records: Vec<_> = s.world.entries.iter().flat_map(|e| e.mutants.clone()).collect();
    let pairs = build_pairs(&records, &PairingConfig { pairs_per_structure: 4, ..Default::default() }).unwrap();
    let ctx = build_contexts(&s.world.entries, &s.head).unwrap();
    let before = params_digest(&s.reference);

    let dpo = dpo_finetune(&pairs, &ctx, &s.reference, &finetune_cfg(LossMode::DpoOnly, 2)).unwrap();
    assert_eq!(dpo.kbt, 0.7);
    assert_ne!(params_digest(&dpo.params), before);
    assert!(dpo.history.iter().all(|r| r.energy_loss.is_none() || r.energy_loss == Some(0.0)));

    let full = dpo_finetune(&pairs, &ctx, &s.reference, &finetune_cfg(LossMode::DpoEnergy, 2)).unwrap();
    assert_ne!(full.kbt, 0.7);
    assert!(full.params.all_finite());

    let none = dpo_finetune(&pairs, &ctx, &s.reference, &finetune_cfg(LossMode::DpoEnergy, 0)).unwrap();
    assert_eq!(none.params, s.reference);
    assert_eq!(none.kbt, 0.7);

    assert_eq!(params_digest(&s.reference), before);
    let again = dpo_finetune(&pairs, &ctx, &s.reference, &finetune_cfg(LossMode::DpoEnergy, 2)).unwrap();
    assert_eq!(params_digest(&again.params), params_digest(&full.params));
}
