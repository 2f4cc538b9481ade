use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Feature channel holding the chain index.
pub const CHAIN_CHANNEL: usize = 0;
/// Feature channel holding the scaled contact degree.
pub const DEGREE_CHANNEL: usize = 1;
/// First per-position environment channel.
pub const ENV_OFFSET: usize = 2;

const DEGREE_SCALE: f64 = 0.25;

/// Desk-scale backbone surrogate: chains, a symmetric contact map and
/// per-position features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StructureRepr", into = "StructureRepr")]
pub struct Structure {
    id: String,
    chain_of: Vec<usize>,
    contacts: Vec<(usize, usize)>,
    features: Vec<f64>,
    feature_width: usize,
    neighbors: Vec<Vec<usize>>,
}

/// On-disk layout: contacts as sorted `(i, j)` pairs with `i < j`,
/// features as one row per position.
#[derive(Serialize, Deserialize)]
struct StructureRepr {
    id: String,
    #[serde(rename = "L")]
    len: usize,
    chains: Vec<usize>,
    contacts: Vec<(usize, usize)>,
    features: Vec<Vec<f64>>,
}

impl TryFrom<StructureRepr> for Structure {
    type Error = Error;

    fn try_from(r: StructureRepr) -> Result<Self> {
        if r.chains.len() != r.len {
            return Err(Error::shape(format!(
                "structure {}: L={} but {} chain labels",
                r.id,
                r.len,
                r.chains.len()
            )));
        }
        Structure::new(r.id, r.chains, r.contacts, r.features)
    }
}

impl From<Structure> for StructureRepr {
    fn from(s: Structure) -> Self {
        let features = s
            .features
            .chunks(s.feature_width.max(1))
            .take(s.len())
            .map(<[f64]>::to_vec)
            .collect();
        StructureRepr {
            len: s.len(),
            id: s.id,
            chains: s.chain_of,
            contacts: s.contacts,
            features,
        }
    }
}

impl Structure {
    pub fn new(
        id: impl Into<String>,
        chain_of: Vec<usize>,
        contacts: Vec<(usize, usize)>,
        features: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let id = id.into();
        let len = chain_of.len();
        if len == 0 {
            return Err(Error::shape(format!("structure {id} is empty")));
        }
        // chain labels must be contiguous runs 0, 1, 2, ...
        let mut expected = 0;
        for (i, &c) in chain_of.iter().enumerate() {
            if i == 0 && c != 0 || i > 0 && c != chain_of[i - 1] && c != expected + 1 {
                return Err(Error::domain(format!(
                    "structure {id}: chain labels must be contiguous from 0"
                )));
            }
            expected = c;
        }
        if features.len() != len {
            return Err(Error::shape(format!(
                "structure {id}: {} feature rows for length {len}",
                features.len()
            )));
        }
        let feature_width = features[0].len();
        if features.iter().any(|r| r.len() != feature_width) {
            return Err(Error::shape(format!("structure {id}: ragged feature rows")));
        }
        let features: Vec<f64> = features.into_iter().flatten().collect();
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain(format!("structure {id}: non-finite feature")));
        }
        let mut contacts: Vec<(usize, usize)> = contacts
            .into_iter()
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        contacts.sort_unstable();
        contacts.dedup();
        if let Some(&(i, j)) = contacts.iter().find(|&&(i, j)| i == j || j >= len) {
            return Err(Error::domain(format!(
                "structure {id}: invalid contact ({i}, {j})"
            )));
        }
        let mut neighbors = vec![Vec::new(); len];
        for &(i, j) in &contacts {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        Ok(Self {
            id,
            chain_of,
            contacts,
            features,
            feature_width,
            neighbors,
        })
    }

    /// A single backbone path per chain with zero features; handy for tests.
    pub fn chain_only(id: &str, len: usize, feature_width: usize) -> Result<Self> {
        let contacts = (1..len).map(|i| (i - 1, i)).collect();
        Self::new(id, vec![0; len], contacts, vec![vec![0.0; feature_width]; len])
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.chain_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chain_of.is_empty()
    }

    pub fn chain_of(&self) -> &[usize] {
        &self.chain_of
    }

    pub fn num_chains(&self) -> usize {
        self.chain_of.last().map_or(0, |c| c + 1)
    }

    pub fn contacts(&self) -> &[(usize, usize)] {
        &self.contacts
    }

    pub fn has_contact(&self, i: usize, j: usize) -> bool {
        self.contacts.binary_search(&(i.min(j), i.max(j))).is_ok()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn is_inter_chain(&self, i: usize, j: usize) -> bool {
        self.chain_of[i] != self.chain_of[j]
    }

    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    /// Row-major `L x f` feature matrix.
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_width..(i + 1) * self.feature_width]
    }

    /// Positions with at least one inter-chain contact.
    pub fn interface(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.neighbors[i].iter().any(|&j| self.is_inter_chain(i, j)))
            .collect()
    }

    /// The unbound context: same positions and features, inter-chain
    /// contacts removed.
    pub fn unbound(&self) -> Structure {
        let contacts = self
            .contacts
            .iter()
            .copied()
            .filter(|&(i, j)| !self.is_inter_chain(i, j))
            .collect::<Vec<_>>();
        let mut neighbors = vec![Vec::new(); self.len()];
        for &(i, j) in &contacts {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        Structure {
            id: self.id.clone(),
            chain_of: self.chain_of.clone(),
            contacts,
            features: self.features.clone(),
            feature_width: self.feature_width,
            neighbors,
        }
    }

    /// Replaces the chain labels, keeping contacts and features.
    pub fn with_chains(&self, chain_of: Vec<usize>) -> Result<Structure> {
        let rows = self
            .features
            .chunks(self.feature_width)
            .map(<[f64]>::to_vec)
            .collect();
        Structure::new(self.id.clone(), chain_of, self.contacts.clone(), rows)
    }
}

/// Parameters of [`gen_structure`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureConfig {
    pub len: usize,
    pub num_chains: usize,
    /// Target fraction of all position pairs that are in contact.
    pub contact_density: f64,
    /// Number of environment channels appended to the features.
    pub env_width: usize,
}

/// Contiguous chain spans of near-equal length, earlier chains taking the
/// remainder.
pub fn chain_spans(len: usize, num_chains: usize) -> Vec<usize> {
    let base = len / num_chains;
    let extra = len % num_chains;
    (0..num_chains)
        .flat_map(|c| std::iter::repeat_n(c, base + usize::from(c < extra)))
        .collect()
}

/// Generates a random structure: backbone path within each chain plus
/// uniformly drawn extra contacts up to the requested density, with
/// environment channels drawn from `U[-0.5, 0.5]`.
pub fn gen_structure(id: &str, cfg: &StructureConfig, seed: u64) -> Result<Structure> {
    let len = cfg.len;
    if len < 2 {
        return Err(Error::config(format!("structure length {len} < 2")));
    }
    if cfg.num_chains == 0 || cfg.num_chains > len {
        return Err(Error::config(format!(
            "{} chains impossible for length {len}",
            cfg.num_chains
        )));
    }
    if !(cfg.contact_density > 0.0 && cfg.contact_density <= 1.0) {
        return Err(Error::config(format!(
            "contact density {} outside (0, 1]",
            cfg.contact_density
        )));
    }
    let chain_of = chain_spans(len, cfg.num_chains);
    let mut rng = rng::stream(seed);

    let mut contacts: Vec<(usize, usize)> = (1..len)
        .filter(|&i| chain_of[i] == chain_of[i - 1])
        .map(|i| (i - 1, i))
        .collect();
    let total_pairs = len * (len - 1) / 2;
    let target = ((cfg.contact_density * total_pairs as f64).round() as usize).min(total_pairs);
    if target > contacts.len() {
        let mut candidates: Vec<(usize, usize)> = (0..len)
            .flat_map(|i| (i + 1..len).map(move |j| (i, j)))
            .filter(|&(i, j)| !(j == i + 1 && chain_of[i] == chain_of[j]))
            .collect();
        candidates.shuffle(&mut rng);
        let need = target - contacts.len();
        contacts.extend(candidates.into_iter().take(need));
    }

    let mut degree = vec![0usize; len];
    for &(i, j) in &contacts {
        degree[i] += 1;
        degree[j] += 1;
    }
    let features = (0..len)
        .map(|i| {
            let mut row = Vec::with_capacity(ENV_OFFSET + cfg.env_width);
            row.push(chain_of[i] as f64);
            row.push(degree[i] as f64 * DEGREE_SCALE);
            row.extend((0..cfg.env_width).map(|_| rng.gen_range(-0.5..=0.5)));
            row
        })
        .collect();
    Structure::new(id, chain_of, contacts, features)
}
