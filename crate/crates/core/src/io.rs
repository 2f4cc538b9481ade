//! Persistence: checkpoints, JSONL datasets and external score tables.
//!
//! Checkpoints are one JSON document `{"version", "sha256", "payload"}`
//! where the hash covers the exact payload bytes. Floats are written in
//! shortest round-trip form, so `load(save(x)) == x` bit for bit.
//!
//! Token indices follow the fixed alphabet
//! [`AMINO_ACIDS`](crate::sequence::AMINO_ACIDS) = `ACDEFGHIKLMNPQRSTVWY`.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use crate::bridge::NoiseSchedule;
use crate::error::{Error, Result};
use crate::predictor::{PredictorParams, PriorHeadParams};
use crate::sequence::Sequence;
use crate::trainer::OptimizerState;
use crate::world::{MutantRecord, PreferencePair, World, WorldEntry};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub predictor: Option<PredictorParams>,
    pub prior: Option<PriorHeadParams>,
    pub kbt: f64,
    pub optimizer: Option<OptimizerState>,
    pub schedule: Option<NoiseSchedule>,
    /// Free-form echo of the configuration that produced the checkpoint.
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn predictor(&self) -> Result<&PredictorParams> {
        self.predictor
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint has no predictor".into()))
    }

    pub fn prior(&self) -> Result<&PriorHeadParams> {
        self.prior
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint has no prior head".into()))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        match &self.schedule {
            Some(s) => Ok(s.clone()),
            None => NoiseSchedule::cosine(self.predictor()?.shape.steps),
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(p) = &self.predictor {
            p.validate()?;
        }
        if let Some(p) = &self.prior {
            p.validate()?;
        }
        if !self.kbt.is_finite() {
            return Err(Error::Numerical("non-finite kbt".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct EnvelopeOut<'a> {
    version: u32,
    sha256: String,
    payload: &'a RawValue,
}

#[derive(Deserialize)]
struct EnvelopeIn {
    version: u32,
    sha256: String,
    payload: Box<RawValue>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

/// Serialized checkpoint text; identical inputs give identical bytes.
pub fn checkpoint_to_string(ckpt: &Checkpoint) -> Result<String> {
    ckpt.validate()?;
    let payload = serde_json::to_string(ckpt)?;
    let raw = RawValue::from_string(payload)?;
    Ok(serde_json::to_string(&EnvelopeOut {
        version: CHECKPOINT_VERSION,
        sha256: sha256_hex(raw.get().as_bytes()),
        payload: &raw,
    })?)
}

pub fn checkpoint_from_str(text: &str) -> Result<Checkpoint> {
    let env: EnvelopeIn =
        serde_json::from_str(text).map_err(|e| Error::Corruption(format!("unreadable checkpoint: {e}")))?;
    if env.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: env.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let payload = env.payload.get();
    if sha256_hex(payload.as_bytes()) != env.sha256 {
        return Err(Error::Corruption("checkpoint hash does not match its payload".into()));
    }
    let ckpt: Checkpoint = serde_json::from_str(payload)
        .map_err(|e| Error::Corruption(format!("checkpoint payload does not parse: {e}")))?;
    ckpt.validate()?;
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let text = checkpoint_to_string(ckpt)?;
    create_parent(path)?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_str(&fs::read_to_string(path)?)
}

/// Writes any serializable value as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Data {
        line: e.line(),
        msg: e.to_string(),
    })
}

pub fn write_jsonl<'a, T: Serialize + 'a>(items: impl IntoIterator<Item = &'a T>, path: &Path) -> Result<()> {
    create_parent(path)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses non-blank lines, tagging failures with their 1-based line number.
/// `check` runs on every item.
pub fn read_jsonl<T, F>(path: &Path, mut check: F) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(&T) -> Result<()>,
{
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let data_err = |msg: String| Error::Data { line: n + 1, msg };
        let item: T = serde_json::from_str(&line).map_err(|e| data_err(e.to_string()))?;
        check(&item).map_err(|e| data_err(e.to_string()))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_world(world: &World, path: &Path) -> Result<()> {
    write_jsonl(&world.entries, path)
}

/// Reads and validates a world file: every entry is internally consistent,
/// ids are unique and all entries share one alphabet.
pub fn read_world(path: &Path) -> Result<World> {
    let mut ids = BTreeSet::new();
    let mut alphabet = None;
    let entries = read_jsonl(path, |e: &WorldEntry| {
        e.validate()?;
        if !ids.insert(e.structure.id().to_string()) {
            return Err(Error::Domain(format!("duplicate structure id {}", e.structure.id())));
        }
        let k = e.potts.alphabet();
        if *alphabet.get_or_insert(k) != k {
            return Err(Error::Domain(format!("alphabet {k} differs from earlier entries")));
        }
        Ok(())
    })?;
    if entries.is_empty() {
        return Err(Error::Data {
            line: 0,
            msg: "world file has no entries".into(),
        });
    }
    Ok(World { entries })
}

pub fn write_pairs(pairs: &[PreferencePair], path: &Path) -> Result<()> {
    write_jsonl(pairs, path)
}

/// Reads a pair file; with a world, every pair must reference one of its
/// structures with in-range tokens of the right length.
pub fn read_pairs(path: &Path, world: Option<&World>) -> Result<Vec<PreferencePair>> {
    read_jsonl(path, |p: &PreferencePair| {
        if !p.ddg_label.is_finite() {
            return Err(Error::Domain("non-finite ddg_label".into()));
        }
        if let Some(w) = world {
            let e = w
                .get(&p.structure_id)
                .ok_or_else(|| Error::Domain(format!("unknown structure id {}", p.structure_id)))?;
            let k = e.potts.alphabet();
            for y in [&p.winner, &p.loser] {
                if y.len() != e.len() {
                    return Err(Error::Shape(format!("sequence length {} vs structure {}", y.len(), e.len())));
                }
                Sequence::new(y.clone(), k)?;
            }
        }
        Ok(())
    })
}

/// One row of an external score table.
#[derive(Debug, Deserialize)]
struct ScoreRow {
    structure_id: String,
    #[serde(default)]
    tokens: Option<TokenField>,
    #[serde(default)]
    sequence: Option<String>,
    score: f64,
    #[serde(default)]
    higher_is_better: bool,
}

/// Tokens as a JSON array or, in CSV, a space- or comma-separated list.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum TokenField {
    List(Vec<usize>),
    Text(String),
}

fn row_to_record(row: ScoreRow) -> Result<MutantRecord> {
    let tokens = match (row.tokens, row.sequence) {
        (Some(TokenField::List(t)), _) => t,
        (Some(TokenField::Text(t)), _) if !t.trim().is_empty() => t
            .split([' ', ',', ';'])
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>().map_err(|e| Error::Domain(format!("bad token '{s}': {e}"))))
            .collect::<Result<_>>()?,
        (_, Some(seq)) if !seq.trim().is_empty() => Sequence::from_letters(seq.trim())?.into_tokens(),
        _ => return Err(Error::Domain("row has neither tokens nor sequence".into())),
    };
    if !row.score.is_finite() {
        return Err(Error::Domain("non-finite score".into()));
    }
    let score = if row.higher_is_better { -row.score } else { row.score };
    Ok(MutantRecord {
        structure_id: row.structure_id,
        tokens,
        score,
        ddg_vs_native: score,
    })
}

/// Loads an external scored-mutant table (CSV, or JSONL for any other
/// extension). Columns: `structure_id`, `tokens` or `sequence`, `score`,
/// `higher_is_better`. Higher-is-better scores are negated so that lower is
/// always better.
pub fn load_external_scores(path: &Path) -> Result<Vec<MutantRecord>> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if !is_csv {
        let rows = read_jsonl(path, |_: &ScoreRow| Ok(()))?;
        return rows
            .into_iter()
            .enumerate()
            .map(|(n, r)| {
                row_to_record(r).map_err(|e| Error::Data {
                    line: n + 1,
                    msg: e.to_string(),
                })
            })
            .collect();
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| Error::Data {
        line: 1,
        msg: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (n, row) in reader.deserialize::<ScoreRow>().enumerate() {
        // header is line 1
        let line = n + 2;
        let row = row.map_err(|e| Error::Data {
            line: e.position().map_or(line, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        out.push(row_to_record(row).map_err(|e| Error::Data {
            line,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct ScoreRowOut<'a> {
    structure_id: &'a str,
    tokens: String,
    score: f64,
    higher_is_better: bool,
}

/// Writes records in the external table format (lower is better), as CSV
/// when the extension is `.csv` and JSONL otherwise.
pub fn write_external_scores(records: &[MutantRecord], path: &Path) -> Result<()> {
    create_parent(path)?;
    let rows = records.iter().map(|r| ScoreRowOut {
        structure_id: &r.structure_id,
        tokens: r.tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
        score: r.score,
        higher_is_better: false,
    });
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for row in rows {
            w.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
        Ok(())
    } else {
        let rows: Vec<serde_json::Value> = records
            .iter()
            .map(|r| {
                serde_json::json!({
                    "structure_id": r.structure_id,
                    "tokens": r.tokens,
                    "score": r.score,
                    "higher_is_better": false,
                })
            })
            .collect();
        write_jsonl(&rows, path)
    }
}
