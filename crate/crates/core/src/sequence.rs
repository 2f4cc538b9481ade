//! Token sequences and the amino-acid alphabet.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-letter amino-acid codes in alphabetical order; a letter's position
/// is its token index.
pub const AMINO_ACIDS: &str = "ACDEFGHIKLMNPQRSTVWY";

/// A discrete sequence over an alphabet of `alphabet` symbols.
///
/// Used for the structure-derived prior, the native target and every
/// intermediate bridge state. The one-hot matrix is derived on demand.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sequence {
    tokens: Vec<usize>,
    alphabet: usize,
}

impl Sequence {
    pub fn new(tokens: Vec<usize>, alphabet: usize) -> Result<Self> {
        if alphabet == 0 {
            return Err(Error::domain("alphabet size must be positive"));
        }
        if let Some((i, &t)) = tokens.iter().enumerate().find(|(_, &t)| t >= alphabet) {
            return Err(Error::domain(format!(
                "token {t} at position {i} outside alphabet of size {alphabet}"
            )));
        }
        Ok(Self { tokens, alphabet })
    }

    /// Parses a one-letter amino-acid string.
    pub fn from_letters(letters: &str) -> Result<Self> {
        let tokens = letters
            .chars()
            .map(|c| {
                AMINO_ACIDS
                    .find(c.to_ascii_uppercase())
                    .ok_or_else(|| Error::domain(format!("unknown residue letter '{c}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(tokens, AMINO_ACIDS.len())
    }

    pub fn to_letters(&self) -> Option<String> {
        let letters = AMINO_ACIDS.as_bytes();
        self.tokens
            .iter()
            .map(|&t| letters.get(t).map(|&b| b as char))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<usize> {
        self.tokens
    }

    /// Row-major `L x K` one-hot matrix.
    pub fn one_hot(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.tokens.len() * self.alphabet];
        for (i, &t) in self.tokens.iter().enumerate() {
            out[i * self.alphabet + t] = 1.0;
        }
        out
    }

    pub fn check_same_shape(&self, other: &Sequence) -> Result<()> {
        if self.len() != other.len() || self.alphabet != other.alphabet {
            return Err(Error::shape(format!(
                "sequence shapes differ: {}x{} vs {}x{}",
                self.len(),
                self.alphabet,
                other.len(),
                other.alphabet
            )));
        }
        Ok(())
    }

    /// Number of positions where the two sequences agree.
    pub fn matches(&self, other: &Sequence) -> usize {
        self.tokens
            .iter()
            .zip(&other.tokens)
            .filter(|(a, b)| a == b)
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn letters_map_to_alphabetical_indices() {
        let s = Sequence::from_letters("ACDE").unwrap();
        assert_eq!(s.tokens(), &[0, 1, 2, 3]);
        assert_eq!(s.to_letters().unwrap(), "ACDE");
        assert!(Sequence::from_letters("AXB").is_err());
    }

    #[test]
    fn one_hot_rows_sum_to_one() {
        let s = Sequence::new(vec![2, 0, 1], 3).unwrap();
        let m = s.one_hot();
        for row in m.chunks(3) {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
        assert_eq!(m, vec![0., 0., 1., 1., 0., 0., 0., 1., 0.]);
    }

    #[test]
    fn rejects_out_of_range_tokens() {
        assert!(Sequence::new(vec![0, 3], 3).is_err());
        assert!(Sequence::new(vec![0], 0).is_err());
    }
}
