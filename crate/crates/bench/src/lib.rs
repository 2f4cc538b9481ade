//! Shared fixtures for the benchmarks.

use bridgefold::bridge::NoiseSchedule;
use bridgefold::objectives::{build_contexts, ContextMap};
use bridgefold::predictor::{PredictorParams, PredictorShape, PriorHeadParams};
use bridgefold::prefs::{build_pairs, PairingConfig};
use bridgefold::world::{gen_world, PreferencePair, World, WorldConfig};

/// One pipeline-sized world (20 letters, 2 chains) with a random reference
/// and policy of the default hidden width.
pub struct Fixture {
    pub world: World,
    pub head: PriorHeadParams,
    pub reference: PredictorParams,
    pub policy: PredictorParams,
    pub schedule: NoiseSchedule,
    pub contexts: ContextMap,
    pub pairs: Vec<PreferencePair>,
}

impl Fixture {
    pub fn new(structures: usize, len: usize) -> Self {
        let cfg = WorldConfig {
            structures,
            len_min: len,
            len_max: len,
            anneal_steps_per_residue: 50,
            mutants_per_structure: 40,
            ..WorldConfig::default()
        };
        let world = gen_world(&cfg, 1).expect("world");
        let features = world.entries[0].structure.feature_width();
        let head = PriorHeadParams::init(2, features, cfg.alphabet).expect("prior head");
        let shape = PredictorShape {
            hidden: 16,
            alphabet: cfg.alphabet,
            steps: 25,
            features,
        };
        let contexts = build_contexts(world.entries.iter(), &head).expect("contexts");
        let records: Vec<_> = world.entries.iter().flat_map(|e| e.mutants.clone()).collect();
        let pairs = build_pairs(&records, &PairingConfig::default()).expect("pairs");
        Self {
            reference: PredictorParams::init(3, shape).expect("reference"),
            policy: PredictorParams::init(4, shape).expect("policy"),
            schedule: NoiseSchedule::cosine(shape.steps).expect("schedule"),
            world,
            head,
            contexts,
            pairs,
        }
    }
}
