use bridgefold::bridge::{forward_marginal, forward_sample, reverse_sample, transition_matrix, Denoiser, NoiseSchedule};
use bridgefold::eval::{auroc, lad_fit, least_squares_fit, minimized_rmse, pearson, ranks, spearman, zscore};
use bridgefold::objectives::{
    bridge_dpo_loss, bridge_dpo_margin, build_contexts, ddg_predict, model_log_likelihood, DpoConfig, DpoSample, EnergyLossState,
    OmegaMode,
    softplus,
};
use bridgefold::predictor::{PredictorParams, PredictorShape, PriorHeadParams};
use bridgefold::prefs::{build_pairs, kfold_by_structure, split_by_structure, PairingConfig};
use bridgefold::world::{gen_structure, MutantRecord, PottsModel, PreferencePair, Structure, StructureConfig, WorldEntry};
use bridgefold::{Result, Sequence};
use proptest::prelude::*;

fn structure(len: usize, seed: u64) -> Structure {
    gen_structure(
        "p",
        &StructureConfig {
            len,
            num_chains: 2,
            contact_density: 0.5,
            env_width: 3,
        },
        seed,
    )
    .unwrap()
}

fn shape(k: usize) -> PredictorShape {
    PredictorShape {
        hidden: 4,
        alphabet: k,
        steps: 6,
        features: 5,
    }
}

fn tokens(len: usize, k: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..k, len)
}

struct Fixed(Vec<usize>, usize);

impl Denoiser for Fixed {
    fn alphabet(&self) -> usize {
        self.1
    }

    fn denoise(&self, _: &Sequence, _: &Structure, _: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.0.len() * self.1];
        for (i, &t) in self.0.iter().enumerate() {
            out[i * self.1 + t] = 1.0;
        }
        Ok(out)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transition_matrices_are_column_stochastic(k in 2usize..8, target in 0usize..8, beta in 0.0f64..=1.0) {
        let target = target % k;
        let q = transition_matrix(target, beta, k).unwrap();
        prop_assert!(q.is_column_stochastic(1e-12));
    }

    #[test]
    fn marginals_sum_to_one(k in 2usize..6, x in 0usize..6, y in 0usize..6, steps in 2usize..30, t in 0usize..30) {
        let sched = NoiseSchedule::cosine(steps).unwrap();
        let t = t % (steps + 1);
        let p = forward_marginal(x % k, y % k, k, t, &sched).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn forward_samples_stay_on_the_bridge(x in tokens(6, 4), y in tokens(6, 4), t in 0usize..8, seed: u64) {
        let sched = NoiseSchedule::cosine(7).unwrap();
        let (x, y) = (Sequence::new(x, 4).unwrap(), Sequence::new(y, 4).unwrap());
        let z = forward_sample(&x, &y, t, &sched, seed).unwrap();
        for i in 0..6 {
            let zi = z.tokens()[i];
            prop_assert!(zi == x.tokens()[i] || zi == y.tokens()[i]);
        }
        prop_assert_eq!(forward_sample(&x, &y, 7, &sched, seed).unwrap(), y);
    }

    #[test]
    fn one_hot_denoiser_pins_the_reverse_process(target in tokens(5, 3), prior in tokens(5, 3), seed: u64) {
        let s = Structure::chain_only("r", 5, 1).unwrap();
        let sched = NoiseSchedule::cosine(5).unwrap();
        let prior = Sequence::new(prior, 3).unwrap();
        let z = reverse_sample(&Fixed(target.clone(), 3), &s, &prior, &sched, seed).unwrap();
        prop_assert_eq!(z.tokens(), &target[..]);
    }

    #[test]
    fn dpo_at_reference_is_ln2(pseed: u64, w in tokens(5, 3), l in tokens(5, 3), x in tokens(5, 3), t in 0usize..6, seed: u64, lossw: bool) {
        let s = structure(5, 3);
        let p = PredictorParams::init(pseed, shape(3)).unwrap();
        let sched = NoiseSchedule::cosine(6).unwrap();
        let (w, l, x) = (Sequence::new(w, 3).unwrap(), Sequence::new(l, 3).unwrap(), Sequence::new(x, 3).unwrap());
        let ex = DpoSample { structure: &s, prior: &x, winner: &w, loser: &l, t, seed };
        let omega = if lossw { OmegaMode::LossWeight } else { OmegaMode::Constant };
        let cfg = DpoConfig { beta_dpo: 0.1, omega };
        let v = bridge_dpo_loss(&p, &p, &ex, &sched, &cfg, None).unwrap();
        prop_assert!((v - std::f64::consts::LN_2).abs() <= 1e-12);
    }

    #[test]
    fn swapping_policy_and_reference_negates_the_margin(a: u64, b: u64, w in tokens(5, 3), l in tokens(5, 3), t in 0usize..6, seed: u64) {
        let s = structure(5, 4);
        let (p, r) = (PredictorParams::init(a, shape(3)).unwrap(), PredictorParams::init(b, shape(3)).unwrap());
        let sched = NoiseSchedule::cosine(6).unwrap();
        let x = Sequence::new(vec![0; 5], 3).unwrap();
        let (w, l) = (Sequence::new(w, 3).unwrap(), Sequence::new(l, 3).unwrap());
        let cfg = DpoConfig::default();
        let ex = DpoSample { structure: &s, prior: &x, winner: &w, loser: &l, t, seed };
        let m1 = bridge_dpo_margin(&p, &r, &ex, &sched, &cfg).unwrap();
        let m2 = bridge_dpo_margin(&r, &p, &ex, &sched, &cfg).unwrap();
        prop_assert_eq!(m1, -m2);
        let loss = bridge_dpo_loss(&p, &r, &ex, &sched, &cfg, None).unwrap();
        prop_assert!((loss - softplus(-m1)).abs() <= 1e-12);
    }

    #[test]
    fn ddg_of_identical_sequences_is_zero(pseed: u64, y in tokens(6, 3), kbt in -3.0f64..3.0, samples in 1usize..4, eval_seed: u64) {
        let s = structure(6, 9);
        let entry = WorldEntry {
            potts: PottsModel::from_environment(&s, 3, vec![0.0; 9]).unwrap(),
            structure: s,
            native: vec![0; 6],
            mutants: vec![],
        };
        let head = PriorHeadParams::init(1, 5, 3).unwrap();
        let ctx = build_contexts([&entry], &head).unwrap();
        let p = PredictorParams::init(pseed, shape(3)).unwrap();
        let sched = NoiseSchedule::cosine(6).unwrap();
        let pair = PreferencePair { structure_id: "p".into(), winner: y.clone(), loser: y, ddg_label: 0.0 };
        let state = EnergyLossState { kbt, samples, eval_seed };
        prop_assert_eq!(ddg_predict(&p, &pair, &ctx, &sched, &state, None).unwrap(), 0.0);
    }

    #[test]
    fn ddg_is_four_likelihoods(pseed: u64, w in tokens(6, 3), l in tokens(6, 3), kbt in 0.1f64..3.0, eval_seed: u64) {
        let s = structure(6, 11);
        let entry = WorldEntry {
            potts: PottsModel::from_environment(&s, 3, vec![0.0; 9]).unwrap(),
            structure: s,
            native: vec![0; 6],
            mutants: vec![],
        };
        let head = PriorHeadParams::init(2, 5, 3).unwrap();
        let ctx = build_contexts([&entry], &head).unwrap();
        let c = &ctx["p"];
        let p = PredictorParams::init(pseed, shape(3)).unwrap();
        let sched = NoiseSchedule::cosine(6).unwrap();
        let pair = PreferencePair { structure_id: "p".into(), winner: w.clone(), loser: l.clone(), ddg_label: 0.0 };
        let state = EnergyLossState { kbt, samples: 3, eval_seed };
        let pred = ddg_predict(&p, &pair, &ctx, &sched, &state, None).unwrap();
        let ll = |y: &[usize], st: &Structure| {
            model_log_likelihood(&p, &Sequence::new(y.to_vec(), 3).unwrap(), st, &c.prior, &sched, 3, eval_seed, None).unwrap()
        };
        let direct = -kbt * ((ll(&w, &c.bound) - ll(&w, &c.unbound)) - (ll(&l, &c.bound) - ll(&l, &c.unbound)));
        prop_assert!((pred - direct).abs() <= 1e-12 * direct.abs().max(1.0));
    }

    #[test]
    fn spearman_is_pearson_of_ranks(x in prop::collection::vec(-5i32..5, 3..12), y in prop::collection::vec(-5i32..5, 3..12)) {
        let n = x.len().min(y.len());
        let x: Vec<f64> = x[..n].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = y[..n].iter().map(|&v| v as f64).collect();
        prop_assert_eq!(spearman(&x, &y), pearson(&ranks(&x), &ranks(&y)));
    }

    #[test]
    fn minimized_rmse_is_affine_invariant(p in prop::collection::vec(-10.0f64..10.0, 3..10), a in 0.1f64..5.0, b in -5.0f64..5.0, flip: bool) {
        let labels: Vec<f64> = p.iter().enumerate().map(|(i, v)| v.sin() * 3.0 + i as f64).collect();
        let a = if flip { -a } else { a };
        let q: Vec<f64> = p.iter().map(|v| a * v + b).collect();
        let (r1, r2) = (minimized_rmse(&p, &labels), minimized_rmse(&q, &labels));
        prop_assert!((r1 - r2).abs() <= 1e-8 * r1.max(1.0));
        let raw = (p.iter().zip(&labels).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / p.len() as f64).sqrt();
        prop_assert!(r1 <= raw + 1e-12);
        let (sa, sb) = least_squares_fit(&p, &labels);
        prop_assert!(sa.is_finite() && sb.is_finite());
        let (la, lb) = lad_fit(&p, &labels);
        prop_assert!(la.is_finite() && lb.is_finite());
    }

    #[test]
    fn auroc_complement_symmetry(p in prop::collection::vec(-3i32..3, 2..12), l in prop::collection::vec(-3i32..3, 2..12)) {
        let n = p.len().min(l.len());
        let p: Vec<f64> = p[..n].iter().map(|&v| v as f64).collect();
        let l: Vec<f64> = l[..n].iter().map(|&v| v as f64).collect();
        let neg: Vec<f64> = p.iter().map(|v| -v).collect();
        match (auroc(&p, &l), auroc(&neg, &l)) {
            (Some(a), Some(b)) => prop_assert!((a + b - 1.0).abs() <= 1e-12),
            (None, None) => {}
            other => prop_assert!(false, "inconsistent {:?}", other),
        }
    }

    #[test]
    fn zscore_of_the_column_mean_is_one(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..6)) {
        let mut table = rows.clone();
        let means: Vec<f64> = (0..3).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64).collect();
        table.push(means);
        // appending the mean row keeps every column mean unchanged
        let z = zscore(&table, table.len() - 1).unwrap();
        prop_assert!((z - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn pairs_are_strict_and_from_the_pools(scores in prop::collection::vec(-20i32..20, 2..40), seed: u64, per in 1usize..30) {
        let recs: Vec<MutantRecord> = scores.iter().enumerate().map(|(i, &s)| MutantRecord {
            structure_id: "a".into(), tokens: vec![i], score: s as f64, ddg_vs_native: s as f64,
        }).collect();
        let cfg = PairingConfig { top_frac: 0.3, bottom_frac: 0.3, pairs_per_structure: per, seed };
        let pairs = build_pairs(&recs, &cfg).unwrap();
        prop_assert!(pairs.len() <= per);
        let mut sorted = scores.clone();
        sorted.sort();
        let n = sorted.len();
        let top = ((0.3 * n as f64) - 1e-9).ceil() as usize;
        for p in &pairs {
            let (w, l) = (scores[p.winner[0]] as f64, scores[p.loser[0]] as f64);
            prop_assert!(w < l);
            prop_assert_eq!(p.ddg_label, w - l);
            prop_assert!(w <= sorted[top - 1] as f64 && l >= sorted[n - top] as f64);
        }
        prop_assert_eq!(pairs, build_pairs(&recs, &cfg).unwrap());
    }

    #[test]
    fn splits_partition_the_ids(n in 3usize..80, seed: u64, k in 2usize..6) {
        let ids: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
        let s = split_by_structure(&ids, (0.6, 0.2, 0.2), seed).unwrap();
        let mut all: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        all.sort();
        let mut expected = ids.clone();
        expected.sort();
        prop_assert_eq!(all, expected.clone());
        prop_assert_eq!(s.val.len(), (n / 5).max(1));
        prop_assert_eq!(s.test.len(), (n / 5).max(1));
        prop_assert!(!s.train.is_empty());
        if k <= n {
            let folds = kfold_by_structure(&ids, k, seed).unwrap();
            let mut all: Vec<String> = folds.concat();
            all.sort();
            prop_assert_eq!(all, expected);
            let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
