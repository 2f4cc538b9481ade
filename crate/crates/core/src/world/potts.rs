use rand::Rng;
use serde::{Deserialize, Serialize};

use super::structure::{Structure, ENV_OFFSET};
use crate::error::{Error, Result};
use crate::rng;
use crate::sequence::Sequence;

/// One pairwise term: contact `(i, j)` with `i < j` scored by
/// `tables[table][y_i * K + y_j]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub i: usize,
    pub j: usize,
    pub table: usize,
}

/// Pairwise Potts energy `sum_i h_i(y_i) + sum_(i<j in contacts) J_ij(y_i, y_j)`.
///
/// Couplings reference a shared list of `K x K` tables so a world where
/// many contacts share one table stays compact on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PottsRepr", into = "PottsRepr")]
pub struct PottsModel {
    k: usize,
    /// Row-major `L x K`.
    h: Vec<f64>,
    tables: Vec<Vec<f64>>,
    couplings: Vec<Coupling>,
}

/// On-disk form: fields as `L` rows, couplings as sparse `(i, j, table)`
/// triples into a list of shared tables.
#[derive(Serialize, Deserialize)]
struct PottsRepr {
    #[serde(rename = "K")]
    k: usize,
    h: Vec<Vec<f64>>,
    #[serde(rename = "J")]
    j: SparseCouplings,
}

#[derive(Serialize, Deserialize)]
struct SparseCouplings {
    tables: Vec<Vec<f64>>,
    contacts: Vec<(usize, usize, usize)>,
}

impl TryFrom<PottsRepr> for PottsModel {
    type Error = Error;

    fn try_from(r: PottsRepr) -> Result<Self> {
        if r.h.iter().any(|row| row.len() != r.k) {
            return Err(Error::shape("field row length differs from K"));
        }
        let couplings = r
            .j
            .contacts
            .into_iter()
            .map(|(i, j, table)| Coupling { i, j, table })
            .collect();
        Self::new(r.k, r.h.concat(), r.j.tables, couplings)
    }
}

impl From<PottsModel> for PottsRepr {
    fn from(p: PottsModel) -> Self {
        let k = p.k;
        Self {
            k,
            h: p.h.chunks(k.max(1)).map(<[f64]>::to_vec).collect(),
            j: SparseCouplings {
                tables: p.tables,
                contacts: p.couplings.iter().map(|c| (c.i, c.j, c.table)).collect(),
            },
        }
    }
}

impl PottsModel {
    pub fn new(
        k: usize,
        h: Vec<f64>,
        tables: Vec<Vec<f64>>,
        mut couplings: Vec<Coupling>,
    ) -> Result<Self> {
        if k == 0 || !h.len().is_multiple_of(k) {
            return Err(Error::shape("field table is not L x K"));
        }
        if tables.iter().any(|t| t.len() != k * k) {
            return Err(Error::shape("coupling table is not K x K"));
        }
        if h.iter().chain(tables.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite Potts parameter"));
        }
        let len = h.len() / k;
        for c in &couplings {
            if c.i >= c.j || c.j >= len || c.table >= tables.len() {
                return Err(Error::domain(format!(
                    "invalid coupling ({}, {}) -> table {}",
                    c.i, c.j, c.table
                )));
            }
        }
        couplings.sort_by_key(|c| (c.i, c.j));
        if couplings.windows(2).any(|w| (w[0].i, w[0].j) == (w[1].i, w[1].j)) {
            return Err(Error::domain("duplicate coupling"));
        }
        Ok(Self {
            k,
            h,
            tables,
            couplings,
        })
    }

    /// Fields read from the structure's environment channels, one shared
    /// coupling table on every contact.
    pub fn from_environment(structure: &Structure, k: usize, table: Vec<f64>) -> Result<Self> {
        if structure.feature_width() < ENV_OFFSET + k {
            return Err(Error::shape(format!(
                "structure {} has {} feature channels, need {}",
                structure.id(),
                structure.feature_width(),
                ENV_OFFSET + k
            )));
        }
        let h = (0..structure.len())
            .flat_map(|i| structure.feature_row(i)[ENV_OFFSET..ENV_OFFSET + k].to_vec())
            .collect();
        let couplings = structure
            .contacts()
            .iter()
            .map(|&(i, j)| Coupling { i, j, table: 0 })
            .collect();
        Self::new(k, h, vec![table], couplings)
    }

    pub fn alphabet(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.h.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn field(&self, i: usize, a: usize) -> f64 {
        self.h[i * self.k + a]
    }

    pub fn couplings(&self) -> &[Coupling] {
        &self.couplings
    }

    pub fn tables(&self) -> &[Vec<f64>] {
        &self.tables
    }

    pub fn coupling(&self, c: &Coupling, a: usize, b: usize) -> f64 {
        self.tables[c.table][a * self.k + b]
    }

    /// Checks that couplings sit exactly on the structure's contacts.
    pub fn check_against(&self, structure: &Structure) -> Result<()> {
        if self.len() != structure.len() {
            return Err(Error::shape(format!(
                "Potts model of length {} for structure {} of length {}",
                self.len(),
                structure.id(),
                structure.len()
            )));
        }
        let pairs: Vec<(usize, usize)> = self.couplings.iter().map(|c| (c.i, c.j)).collect();
        if pairs != structure.contacts() {
            return Err(Error::domain(format!(
                "Potts couplings do not match the contacts of {}",
                structure.id()
            )));
        }
        Ok(())
    }

    fn check_seq(&self, y: &Sequence) -> Result<()> {
        if y.len() != self.len() || y.alphabet() != self.k {
            return Err(Error::shape(format!(
                "sequence {}x{} vs Potts model {}x{}",
                y.len(),
                y.alphabet(),
                self.len(),
                self.k
            )));
        }
        Ok(())
    }

    /// Energy with only the couplings accepted by `keep`.
    pub fn energy_with(&self, y: &Sequence, keep: impl Fn(&Coupling) -> bool) -> Result<f64> {
        self.check_seq(y)?;
        let t = y.tokens();
        let fields: f64 = t.iter().enumerate().map(|(i, &a)| self.field(i, a)).sum();
        let pairs: f64 = self
            .couplings
            .iter()
            .filter(|c| keep(c))
            .map(|c| self.coupling(c, t[c.i], t[c.j]))
            .sum();
        Ok(fields + pairs)
    }

    pub fn energy(&self, y: &Sequence) -> Result<f64> {
        self.energy_with(y, |_| true)
    }

    /// Energy change from setting position `i` to token `a`.
    fn flip_delta(&self, tokens: &[usize], adjacency: &[Vec<(usize, usize)>], i: usize, a: usize) -> f64 {
        let old = tokens[i];
        let mut d = self.field(i, a) - self.field(i, old);
        for &(ci, other) in &adjacency[i] {
            let c = &self.couplings[ci];
            let b = tokens[other];
            d += if c.i == i {
                self.coupling(c, a, b) - self.coupling(c, old, b)
            } else {
                self.coupling(c, b, a) - self.coupling(c, b, old)
            };
        }
        d
    }

    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.len()];
        for (ci, c) in self.couplings.iter().enumerate() {
            adj[c.i].push((ci, c.j));
            adj[c.j].push((ci, c.i));
        }
        adj
    }
}

/// Oracle energy `E(S, Y)`.
pub fn potts_energy(structure: &Structure, potts: &PottsModel, y: &Sequence) -> Result<f64> {
    if potts.len() != structure.len() {
        return Err(Error::shape("Potts model and structure lengths differ"));
    }
    potts.energy(y)
}

/// Binding free energy `E_full(Y) - E_intra(Y)`: the inter-chain couplings.
pub fn binding_energy(structure: &Structure, potts: &PottsModel, y: &Sequence) -> Result<f64> {
    if structure.num_chains() < 2 {
        return Err(Error::domain(format!(
            "structure {} has a single chain; no bound/unbound split",
            structure.id()
        )));
    }
    let full = potts.energy(y)?;
    let intra = potts.energy_with(y, |c| !structure.is_inter_chain(c.i, c.j))?;
    Ok(full - intra)
}

/// Ground-truth `ddG = dG(Y_mut) - dG(Y_wt)`.
pub fn binding_ddg_true(
    structure: &Structure,
    potts: &PottsModel,
    y_mut: &Sequence,
    y_wt: &Sequence,
) -> Result<f64> {
    Ok(binding_energy(structure, potts, y_mut)? - binding_energy(structure, potts, y_wt)?)
}

const ANNEAL_START: f64 = 2.0;
const ANNEAL_END: f64 = 0.01;

/// Simulated annealing over single-token substitutions with geometric
/// cooling from 2.0 to 0.01. Returns the lowest-energy sequence visited.
pub fn native_sequence(
    structure: &Structure,
    potts: &PottsModel,
    anneal_steps: usize,
    seed: u64,
) -> Result<Sequence> {
    if anneal_steps == 0 {
        return Err(Error::config("anneal_steps must be at least 1"));
    }
    potts.check_against(structure)?;
    let k = potts.alphabet();
    let len = potts.len();
    let adjacency = potts.adjacency();
    let mut rng = rng::stream(seed);

    let mut tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..k)).collect();
    let mut energy = potts.energy(&Sequence::new(tokens.clone(), k)?)?;
    let mut best = (energy, tokens.clone());
    if k == 1 {
        return Sequence::new(tokens, k);
    }
    let cooling = if anneal_steps > 1 {
        (ANNEAL_END / ANNEAL_START).powf(1.0 / (anneal_steps - 1) as f64)
    } else {
        1.0
    };
    let mut temperature = ANNEAL_START;
    for _ in 0..anneal_steps {
        let i = rng.gen_range(0..len);
        // uniform over the k-1 other tokens
        let mut a = rng.gen_range(0..k - 1);
        if a >= tokens[i] {
            a += 1;
        }
        let d = potts.flip_delta(&tokens, &adjacency, i, a);
        let u: f64 = rng.gen();
        if d <= 0.0 || u < (-d / temperature).exp() {
            tokens[i] = a;
            energy += d;
            if energy < best.0 {
                best = (energy, tokens.clone());
            }
        }
        temperature *= cooling;
    }
    // greedy polish: single flips until no improvement
    let mut tokens = best.1;
    loop {
        let mut improved = false;
        for i in 0..len {
            for a in 0..k {
                if a != tokens[i] && potts.flip_delta(&tokens, &adjacency, i, a) < -1e-12 {
                    tokens[i] = a;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    Sequence::new(tokens, k)
}
