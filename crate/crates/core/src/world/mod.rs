//! Synthetic inverse-folding world.
//!
//! Structures carry a contact map and per-position environment channels; an
//! exact Potts model over those contacts is the energy oracle. Natives are
//! annealed energy minima and mutant libraries are scored against them.

mod potts;
mod structure;

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use potts::{binding_ddg_true, binding_energy, native_sequence, potts_energy, Coupling, PottsModel};
pub use structure::{
    chain_spans, gen_structure, Structure, StructureConfig, CHAIN_CHANNEL, DEGREE_CHANNEL, ENV_OFFSET,
};

use crate::error::{Error, Result};
use crate::rng;
use crate::sequence::Sequence;

/// A scored variant of a native sequence. Lower scores are better.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MutantRecord {
    pub structure_id: String,
    pub tokens: Vec<usize>,
    /// Oracle score; binding ddG for complexes, energy difference otherwise.
    pub score: f64,
    pub ddg_vs_native: f64,
}

/// A `(winner, loser)` pair for one structure. The winner has the strictly
/// lower score, and `ddg_label = score(winner) - score(loser)` is the ddG of
/// the winner relative to the loser (always negative).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub structure_id: String,
    pub winner: Vec<usize>,
    pub loser: Vec<usize>,
    pub ddg_label: f64,
}

/// Random 1..=`max_mutations` substitutions of the native, deduplicated and
/// never equal to the native itself. On complexes the substituted positions
/// are drawn from the interface.
pub fn make_mutant_library(
    structure: &Structure,
    potts: &PottsModel,
    native: &Sequence,
    n_mutants: usize,
    max_mutations: usize,
    seed: u64,
) -> Result<Vec<MutantRecord>> {
    if n_mutants < 2 {
        return Err(Error::config("a mutant library needs at least 2 records"));
    }
    if max_mutations == 0 {
        return Err(Error::config("max_mutations must be at least 1"));
    }
    let k = native.alphabet();
    if k < 2 {
        return Err(Error::config("alphabet too small to mutate"));
    }
    let complex = structure.num_chains() >= 2;
    let mut sites = if complex { structure.interface() } else { Vec::new() };
    if sites.is_empty() {
        sites = (0..native.len()).collect();
    }
    let max_mutations = max_mutations.min(sites.len());
    let mut rng = rng::stream(seed);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut out = Vec::with_capacity(n_mutants);
    let native_energy = potts.energy(native)?;
    let mut attempts = 0;
    while out.len() < n_mutants {
        attempts += 1;
        if attempts > 100 * n_mutants {
            return Err(Error::config(format!(
                "could not draw {n_mutants} distinct mutants for {}",
                structure.id()
            )));
        }
        let count = rng.gen_range(1..=max_mutations);
        let mut tokens = native.tokens().to_vec();
        for idx in sample(&mut rng, sites.len(), count).into_iter() {
            let pos = sites[idx];
            let mut a = rng.gen_range(0..k - 1);
            if a >= tokens[pos] {
                a += 1;
            }
            tokens[pos] = a;
        }
        if !seen.insert(tokens.clone()) {
            continue;
        }
        let mutant = Sequence::new(tokens, k)?;
        let score = if complex {
            binding_ddg_true(structure, potts, &mutant, native)?
        } else {
            potts.energy(&mutant)? - native_energy
        };
        out.push(MutantRecord {
            structure_id: structure.id().to_string(),
            tokens: mutant.into_tokens(),
            score,
            ddg_vs_native: score,
        });
    }
    Ok(out)
}

/// One structure with its oracle, native sequence and mutant library.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldEntry {
    pub structure: Structure,
    pub potts: PottsModel,
    pub native: Vec<usize>,
    pub mutants: Vec<MutantRecord>,
}

impl WorldEntry {
    pub fn native_seq(&self) -> Sequence {
        Sequence::new(self.native.clone(), self.potts.alphabet()).expect("validated native")
    }

    pub fn len(&self) -> usize {
        self.structure.len()
    }

    pub fn is_empty(&self) -> bool {
        self.structure.is_empty()
    }

    /// Checks the cross-references between structure, oracle and sequences.
    pub fn validate(&self) -> Result<()> {
        self.potts.check_against(&self.structure)?;
        let k = self.potts.alphabet();
        Sequence::new(self.native.clone(), k)?.check_same_shape(&Sequence::new(
            vec![0; self.structure.len()],
            k,
        )?)?;
        for m in &self.mutants {
            if m.structure_id != self.structure.id() {
                return Err(Error::domain(format!(
                    "mutant of {} stored under {}",
                    m.structure_id,
                    self.structure.id()
                )));
            }
            if m.tokens.len() != self.structure.len() {
                return Err(Error::shape("mutant length differs from structure"));
            }
            Sequence::new(m.tokens.clone(), k)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub structures: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub num_chains: usize,
    pub alphabet: usize,
    pub contact_density: f64,
    /// Multiplier on the shared `U[-1, 1]` coupling table.
    pub coupling_scale: f64,
    /// Annealing steps per residue when deriving natives.
    pub anneal_steps_per_residue: usize,
    pub mutants_per_structure: usize,
    pub max_mutations: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            structures: 60,
            len_min: 20,
            len_max: 60,
            num_chains: 2,
            alphabet: 20,
            contact_density: 0.1,
            coupling_scale: 1.0,
            anneal_steps_per_residue: 400,
            mutants_per_structure: 120,
            max_mutations: 3,
        }
    }
}

/// A collection of entries keyed by structure id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct World {
    pub entries: Vec<WorldEntry>,
}

impl World {
    pub fn get(&self, id: &str) -> Option<&WorldEntry> {
        self.entries.iter().find(|e| e.structure.id() == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.structure.id().to_string()).collect()
    }

    pub fn alphabet(&self) -> Option<usize> {
        self.entries.first().map(|e| e.potts.alphabet())
    }

    /// Entries whose ids are in `ids`, in the order of `ids`.
    pub fn subset(&self, ids: &[String]) -> Result<Vec<&WorldEntry>> {
        ids.iter()
            .map(|id| {
                self.get(id)
                    .ok_or_else(|| Error::domain(format!("unknown structure id {id}")))
            })
            .collect()
    }
}

/// Symmetric `K x K` table with entries from `U[-1, 1]`.
pub fn shared_coupling_table(k: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed);
    let mut t = vec![0.0; k * k];
    for a in 0..k {
        for b in a..k {
            let v = rng.gen_range(-1.0..=1.0);
            t[a * k + b] = v;
            t[b * k + a] = v;
        }
    }
    t
}

/// Generates a full world. All structures share one coupling table so the
/// energy landscape has structure a model can learn across proteins.
pub fn gen_world(cfg: &WorldConfig, seed: u64) -> Result<World> {
    if cfg.structures == 0 {
        return Err(Error::config("world needs at least one structure"));
    }
    if cfg.len_min < 2 || cfg.len_min > cfg.len_max {
        return Err(Error::config(format!(
            "invalid length range {}..{}",
            cfg.len_min, cfg.len_max
        )));
    }
    if !(cfg.coupling_scale.is_finite() && cfg.coupling_scale >= 0.0) {
        return Err(Error::config("coupling_scale must be finite and non-negative"));
    }
    let table: Vec<f64> = shared_coupling_table(cfg.alphabet, rng::derive_seed(seed, 0))
        .into_iter()
        .map(|v| v * cfg.coupling_scale)
        .collect();
    let mut len_rng = rng::stream(rng::derive_seed(seed, 1));
    let mut entries = Vec::with_capacity(cfg.structures);
    for n in 0..cfg.structures {
        let len = len_rng.gen_range(cfg.len_min..=cfg.len_max);
        let id = format!("s{n:03}");
        let base = rng::derive_path(seed, &[2, n as u64]);
        let scfg = StructureConfig {
            len,
            num_chains: cfg.num_chains,
            contact_density: cfg.contact_density,
            env_width: cfg.alphabet,
        };
        let structure = gen_structure(&id, &scfg, rng::derive_seed(base, 0))?;
        let potts = PottsModel::from_environment(&structure, cfg.alphabet, table.clone())?;
        let steps = (cfg.anneal_steps_per_residue * len).max(1);
        let native = native_sequence(&structure, &potts, steps, rng::derive_seed(base, 1))?;
        let mutants = make_mutant_library(
            &structure,
            &potts,
            &native,
            cfg.mutants_per_structure,
            cfg.max_mutations,
            rng::derive_seed(base, 2),
        )?;
        entries.push(WorldEntry {
            structure,
            potts,
            native: native.into_tokens(),
            mutants,
        });
    }
    Ok(World { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> WorldConfig {
        WorldConfig {
            structures: 3,
            len_min: 10,
            len_max: 16,
            num_chains: 2,
            alphabet: 5,
            contact_density: 0.2,
            coupling_scale: 1.0,
            anneal_steps_per_residue: 50,
            mutants_per_structure: 12,
            max_mutations: 2,
        }
    }

    #[test]
    fn world_is_reproducible_and_valid() {
        let a = gen_world(&small_cfg(), 3).unwrap();
        let b = gen_world(&small_cfg(), 3).unwrap();
        assert_eq!(a, b);
        for e in &a.entries {
            e.validate().unwrap();
            assert!((10..=16).contains(&e.len()));
        }
    }

    #[test]
    fn single_substitution_library() {
        let w = gen_world(&small_cfg(), 1).unwrap();
        let e = &w.entries[0];
        let native = e.native_seq();
        let lib = make_mutant_library(&e.structure, &e.potts, &native, 10, 1, 4).unwrap();
        assert_eq!(lib.len(), 10);
        let mut seen = HashSet::new();
        for m in &lib {
            let diff = m.tokens.iter().zip(native.tokens()).filter(|(a, b)| a != b).count();
            assert_eq!(diff, 1);
            assert!(seen.insert(m.tokens.clone()));
            let y = Sequence::new(m.tokens.clone(), 5).unwrap();
            let ddg = binding_ddg_true(&e.structure, &e.potts, &y, &native).unwrap();
            assert_eq!(m.score, ddg);
        }
    }

    #[test]
    fn single_chain_library_scores_energy_differences() {
        let s = Structure::chain_only("c", 6, 2 + 3).unwrap();
        let p = PottsModel::from_environment(&s, 3, shared_coupling_table(3, 1)).unwrap();
        let native = native_sequence(&s, &p, 300, 2).unwrap();
        let lib = make_mutant_library(&s, &p, &native, 8, 2, 3).unwrap();
        for m in &lib {
            let y = Sequence::new(m.tokens.clone(), 3).unwrap();
            let d = p.energy(&y).unwrap() - p.energy(&native).unwrap();
            assert!((m.score - d).abs() < 1e-12);
            assert_ne!(m.tokens, native.tokens());
        }
    }

    #[test]
    fn library_errors() {
        let s = Structure::chain_only("c", 4, 3).unwrap();
        let p = PottsModel::from_environment(&s, 1, vec![0.0]).unwrap();
        let native = Sequence::new(vec![0; 4], 1).unwrap();
        assert!(matches!(
            make_mutant_library(&s, &p, &native, 5, 1, 0),
            Err(Error::Config(_))
        ));
        assert!(make_mutant_library(&s, &p, &native, 1, 1, 0).is_err());
    }

    #[test]
    fn shared_table_is_symmetric() {
        let t = shared_coupling_table(4, 2);
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(t[a * 4 + b], t[b * 4 + a]);
                assert!(t[a * 4 + b].abs() <= 1.0);
            }
        }
    }
}
