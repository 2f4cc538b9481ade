use bridgefold::bridge::NoiseSchedule;
use bridgefold::objectives::{
    bridge_dpo_loss, build_contexts, ddg_predict, energy_loss, model_log_likelihood, pretrain_loss, pretrain_loss_masked, ContextMap,
    DpoConfig, DpoSample, EnergyGrad, EnergyLossState, LossMask, OmegaMode, TotalLossConfig,
};
use bridgefold::predictor::{gradient_check, GradientBundle, PredictorParams, PredictorShape, PriorHeadParams};
use bridgefold::world::{gen_structure, PottsModel, PreferencePair, Structure, StructureConfig, WorldEntry};
use bridgefold::{Result, Sequence};

const H: f64 = 1e-4;
const FLOOR: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn shape() -> PredictorShape {
    PredictorShape {
        hidden: 4,
        alphabet: 3,
        steps: 5,
        features: 5,
    }
}

fn structure(id: &str, seed: u64) -> Structure {
    gen_structure(
        id,
        &StructureConfig {
            len: 3,
            num_chains: 2,
            contact_density: 1.0,
            env_width: 3,
        },
        seed,
    )
    .unwrap()
}

fn seq(t: &[usize]) -> Sequence {
    Sequence::new(t.to_vec(), 3).unwrap()
}

fn contexts(s: &Structure) -> ContextMap {
    let entry = WorldEntry {
        structure: s.clone(),
        potts: PottsModel::from_environment(s, 3, vec![0.0; 9]).unwrap(),
        native: vec![0; 3],
        mutants: vec![],
    };
    let mut head = PriorHeadParams::init(4, 5, 3).unwrap();
    head.bias = vec![0.1, -0.2, 0.3];
    build_contexts([&entry], &head).unwrap()
}

fn pairs() -> Vec<PreferencePair> {
    vec![
        PreferencePair {
            structure_id: "g".into(),
            winner: vec![0, 1, 2],
            loser: vec![2, 2, 0],
            ddg_label: -1.5,
        },
        PreferencePair {
            structure_id: "g".into(),
            winner: vec![1, 1, 0],
            loser: vec![0, 2, 1],
            ddg_label: 0.7,
        },
    ]
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::cosine(5).unwrap()
}

#[test]
fn pretrain_loss_gradient() {
    let p = PredictorParams::init(3, shape()).unwrap();
    let s = structure("g", 1);
    let (x, y) = (seq(&[0, 0, 0]), seq(&[1, 2, 1]));
    let sched = schedule();
    for t in [1, 2, 3] {
        let loss = |q: &PredictorParams, g: Option<&mut GradientBundle>| pretrain_loss(q, &x, &y, &s, t, &sched, 7, g);
        assert!(loss(&p, None).unwrap() > 0.0);
        let err = gradient_check(loss, &p, H, FLOOR).unwrap();
        assert!(err <= TOL, "t={t} err={err}");
    }
}

#[test]
fn all_position_loss_gradient() {
    let p = PredictorParams::init(8, shape()).unwrap();
    let s = structure("g", 2);
    // x and y agree at position 1, which only the full mask scores
    let (x, y) = (seq(&[0, 2, 0]), seq(&[1, 2, 1]));
    let sched = schedule();
    for t in [0, 2, 4] {
        let loss = |q: &PredictorParams, g: Option<&mut GradientBundle>| {
            pretrain_loss_masked(q, &x, &y, &s, t, &sched, 3, LossMask::All, g)
        };
        let pending = pretrain_loss_masked(&p, &x, &y, &s, t, &sched, 3, LossMask::Pending, None).unwrap();
        assert!(loss(&p, None).unwrap() > pending);
        let err = gradient_check(loss, &p, H, FLOOR).unwrap();
        assert!(err <= TOL, "t={t} err={err}");
    }
}

#[test]
fn dpo_loss_gradient_away_from_reference() {
    let reference = PredictorParams::init(3, shape()).unwrap();
    let p = PredictorParams::init(9, shape()).unwrap();
    let s = structure("g", 1);
    let (x, w, l) = (seq(&[0, 1, 0]), seq(&[1, 2, 1]), seq(&[2, 2, 0]));
    let sched = schedule();
    for omega in [OmegaMode::Constant, OmegaMode::LossWeight] {
        let cfg = DpoConfig { beta_dpo: 0.1, omega };
        let loss = |q: &PredictorParams, g: Option<&mut GradientBundle>| {
            let ex = DpoSample {
                structure: &s,
                prior: &x,
                winner: &w,
                loser: &l,
                t: 3,
                seed: 5,
            };
            bridge_dpo_loss(q, &reference, &ex, &sched, &cfg, g)
        };
        let err = gradient_check(loss, &p, H, FLOOR).unwrap();
        assert!(err <= TOL, "{omega:?} err={err}");
    }
}

#[test]
fn likelihood_gradient() {
    let p = PredictorParams::init(3, shape()).unwrap();
    let s = structure("g", 1);
    let (x, y) = (seq(&[0, 1, 0]), seq(&[1, 2, 1]));
    let sched = schedule();
    let loss = |q: &PredictorParams, g: Option<&mut GradientBundle>| {
        model_log_likelihood(q, &y, &s, &x, &sched, 4, 3, g.map(|g| (g, 0.7)))
            .map(|v| 0.7 * v)
    };
    assert!(gradient_check(loss, &p, H, FLOOR).unwrap() <= TOL);
}

fn energy_with_grad(
    q: &PredictorParams,
    kbt: f64,
    ctx: &ContextMap,
    g: Option<&mut GradientBundle>,
    g_kbt: &mut f64,
) -> Result<f64> {
    let state = EnergyLossState {
        kbt,
        samples: 3,
        eval_seed: 2,
    };
    let sink = g.map(|params| EnergyGrad { params, kbt: g_kbt });
    energy_loss(q, &state, &pairs(), ctx, &schedule(), sink)
}

#[test]
fn energy_loss_gradient_including_kbt() {
    let p = PredictorParams::init(3, shape()).unwrap();
    let s = structure("g", 1);
    let ctx = contexts(&s);
    let kbt = 1.3;
    let loss = |q: &PredictorParams, g: Option<&mut GradientBundle>| {
        let mut gk = 0.0;
        energy_with_grad(q, kbt, &ctx, g, &mut gk)
    };
    assert!(gradient_check(loss, &p, H, FLOOR).unwrap() <= TOL);

    let mut g = p.zeros_like();
    let mut gk = 0.0;
    energy_with_grad(&p, kbt, &ctx, Some(&mut g), &mut gk).unwrap();
    let up = energy_with_grad(&p, kbt + H, &ctx, None, &mut 0.0).unwrap();
    let down = energy_with_grad(&p, kbt - H, &ctx, None, &mut 0.0).unwrap();
    let numeric = (up - down) / (2.0 * H);
    assert!((gk - numeric).abs() / gk.abs().max(numeric.abs()).max(FLOOR) <= TOL);
}

#[test]
fn ddg_gradient_is_scaled() {
    let p = PredictorParams::init(5, shape()).unwrap();
    let s = structure("g", 1);
    let ctx = contexts(&s);
    let state = EnergyLossState {
        kbt: 0.8,
        samples: 2,
        eval_seed: 4,
    };
    let pair = &pairs()[0];
    let loss = |q: &PredictorParams, g: Option<&mut GradientBundle>| {
        let mut gk = 0.0;
        let sink = g.map(|params| (EnergyGrad { params, kbt: &mut gk }, -2.0));
        ddg_predict(q, pair, &ctx, &schedule(), &state, sink).map(|v| -2.0 * v)
    };
    assert!(gradient_check(loss, &p, H, FLOOR).unwrap() <= TOL);
}

#[test]
fn total_loss_gradient() {
    let reference = PredictorParams::init(3, shape()).unwrap();
    let p = PredictorParams::init(8, shape()).unwrap();
    let s = structure("g", 1);
    let ctx = contexts(&s);
    let total = TotalLossConfig::default();
    let cfg = DpoConfig::default();
    let sched = schedule();
    let (w, l) = (seq(&[0, 1, 2]), seq(&[2, 2, 0]));
    let prior = ctx["g"].prior.clone();
    let loss = |q: &PredictorParams, g: Option<&mut GradientBundle>| -> Result<f64> {
        let ex = DpoSample {
            structure: &s,
            prior: &prior,
            winner: &w,
            loser: &l,
            t: 2,
            seed: 1,
        };
        match g {
            Some(g) => {
                let dpo = bridge_dpo_loss(q, &reference, &ex, &sched, &cfg, Some(&mut *g))?;
                let mut ge = q.zeros_like();
                let energy = energy_with_grad(q, 1.0, &ctx, Some(&mut ge), &mut 0.0)?;
                for (dst, src) in bridgefold::predictor::ParamTables::tables_mut(g)
                    .into_iter()
                    .zip(bridgefold::predictor::ParamTables::tables(&ge))
                {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += total.lambda_energy * s;
                    }
                }
                Ok(dpo + total.lambda_energy * energy)
            }
            None => {
                let dpo = bridge_dpo_loss(q, &reference, &ex, &sched, &cfg, None)?;
                let energy = energy_with_grad(q, 1.0, &ctx, None, &mut 0.0)?;
                bridgefold::objectives::total_loss(dpo, energy, &total, bridgefold::objectives::LossMode::DpoEnergy)
            }
        }
    };
    assert!(gradient_check(loss, &p, H, FLOOR).unwrap() <= TOL);
}
