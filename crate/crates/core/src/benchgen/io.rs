//! On-disk layout of a benchmark directory:
//!
//! * `manifest.toml`: parameters, seed, step ranges, checksum
//! * `features.bin`: little-endian `f64`, one row per sample, row-major
//! * `index.tsv`: `sample identity camera role step kept`, one line per row
//! * `pairs.tsv`: verification pairs as indices into the test pool

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{
    Benchmark, BenchmarkManifest, IdentitySample, RetrievalSet, Role, StepDataset, TestSet,
    VerificationPair,
};
use crate::error::{CrlError, Result};

pub const FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.toml";
const FEATURES: &str = "features.bin";
const INDEX: &str = "index.tsv";
const PAIRS: &str = "pairs.tsv";
const INDEX_HEADER: &str = "sample\tidentity\tcamera\trole\tstep\tkept";

struct Encoded {
    features: Vec<u8>,
    index: String,
    pairs: String,
}

/// Marks which pool entries survive in `kept`, a subsequence of the pool
/// entries with the given role.
fn kept_flags(pool: &[IdentitySample], kept: &[IdentitySample], role: Role, flags: &mut [bool]) {
    let mut next = kept.iter().peekable();
    for (i, s) in pool.iter().enumerate() {
        if s.role != role {
            continue;
        }
        if next.peek().is_some_and(|k| *k == s) {
            flags[i] = true;
            next.next();
        }
    }
}

fn encode(b: &Benchmark) -> Encoded {
    let mut features = Vec::new();
    let mut index = String::from(INDEX_HEADER);
    index.push('\n');
    let mut row = 0usize;
    let mut push = |s: &IdentitySample, step: Option<usize>, kept: bool, features: &mut Vec<u8>| {
        for v in &s.features {
            features.extend_from_slice(&v.to_le_bytes());
        }
        let step = step.map_or_else(|| "-".to_string(), |t| t.to_string());
        index.push_str(&format!(
            "{row}\t{}\t{}\t{}\t{step}\t{}\n",
            s.identity,
            s.camera,
            s.role,
            u8::from(kept)
        ));
        row += 1;
    };
    let val_step: BTreeMap<usize, usize> = b
        .manifest
        .steps
        .iter()
        .flat_map(|m| m.validation_identities.iter().map(move |&id| (id, m.step)))
        .collect();
    for st in &b.steps {
        for s in &st.samples {
            push(s, Some(st.step), true, &mut features);
        }
    }
    for s in &b.probe_old {
        push(s, Some(0), true, &mut features);
    }
    for s in b.validation.query.iter().chain(&b.validation.gallery) {
        push(s, val_step.get(&s.identity).copied(), true, &mut features);
    }
    let mut flags = vec![false; b.test.pool.len()];
    kept_flags(&b.test.pool, &b.test.retrieval.query, Role::Query, &mut flags);
    kept_flags(&b.test.pool, &b.test.retrieval.gallery, Role::Gallery, &mut flags);
    for (s, &k) in b.test.pool.iter().zip(&flags) {
        push(s, None, k, &mut features);
    }
    let mut pairs = String::from("a\tb\tgenuine\n");
    for p in &b.test.pairs {
        pairs.push_str(&format!("{}\t{}\t{}\n", p.a, p.b, u8::from(p.genuine)));
    }
    Encoded {
        features,
        index,
        pairs,
    }
}

fn digest(e: &Encoded) -> String {
    let mut h = Sha256::new();
    for part in [&e.features[..], e.index.as_bytes(), e.pairs.as_bytes()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    hex::encode(h.finalize())
}

pub(super) fn checksum(b: &Benchmark) -> String {
    digest(&encode(b))
}

/// Writes the benchmark into `dir`, creating it if needed.
pub fn save(bench: &Benchmark, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let enc = encode(bench);
    let mut manifest = bench.manifest.clone();
    manifest.checksum = digest(&enc);
    let text = toml::to_string(&manifest)
        .map_err(|e| CrlError::Config(format!("cannot serialize manifest: {e}")))?;
    fs::write(dir.join(FEATURES), &enc.features)?;
    fs::write(dir.join(INDEX), &enc.index)?;
    fs::write(dir.join(PAIRS), &enc.pairs)?;
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> CrlError {
    CrlError::Corruption(msg.into())
}

fn field<T: std::str::FromStr>(cols: &[&str], k: usize, line: usize) -> Result<T> {
    cols.get(k)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| corrupt(format!("bad field {k} on index line {line}")))
}

/// Reads a benchmark written by [`save`], verifying version and checksum.
pub fn load(dir: &Path) -> Result<Benchmark> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let version: u32 = toml::from_str::<toml::Table>(&text)
        .map_err(|e| corrupt(format!("unreadable manifest: {e}")))?
        .get("format_version")
        .and_then(|v| v.as_integer())
        .and_then(|v| u32::try_from(v).ok())
        .ok_or_else(|| corrupt("manifest has no format_version"))?;
    if version != FORMAT_VERSION {
        return Err(CrlError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: BenchmarkManifest =
        toml::from_str(&text).map_err(|e| corrupt(format!("invalid manifest: {e}")))?;
    let enc = Encoded {
        features: fs::read(dir.join(FEATURES))?,
        index: fs::read_to_string(dir.join(INDEX))?,
        pairs: fs::read_to_string(dir.join(PAIRS))?,
    };
    if digest(&enc) != manifest.checksum {
        return Err(corrupt("checksum mismatch"));
    }
    decode(manifest, &enc)
}

fn decode(manifest: BenchmarkManifest, enc: &Encoded) -> Result<Benchmark> {
    let dim = manifest.params.input_dim;
    let mut lines = enc.index.lines();
    if lines.next() != Some(INDEX_HEADER) {
        return Err(corrupt("index header"));
    }
    let rows: Vec<&str> = lines.collect();
    if enc.features.len() != rows.len() * dim * 8 {
        return Err(corrupt(format!(
            "feature file has {} bytes, expected {}",
            enc.features.len(),
            rows.len() * dim * 8
        )));
    }
    let mut steps: Vec<StepDataset> = manifest
        .steps
        .iter()
        .map(|m| StepDataset {
            step: m.step,
            samples: Vec::new(),
            class_range: (m.class_start, m.class_end),
        })
        .collect();
    let mut probe_old = Vec::new();
    let mut validation = RetrievalSet::default();
    let mut pool = Vec::new();
    let mut retrieval = RetrievalSet::default();
    for (k, line) in rows.iter().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 || field::<usize>(&cols, 0, k)? != k {
            return Err(corrupt(format!("index line {k}")));
        }
        let features = enc.features[k * dim * 8..(k + 1) * dim * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let role: Role = cols[3].parse()?;
        let s = IdentitySample {
            features,
            identity: field(&cols, 1, k)?,
            camera: field(&cols, 2, k)?,
            role,
        };
        let kept = cols[5] == "1";
        match role {
            Role::Train => {
                let t: usize = field(&cols, 4, k)?;
                steps
                    .get_mut(t)
                    .ok_or_else(|| corrupt(format!("step {t} out of range")))?
                    .samples
                    .push(s);
            }
            Role::ProbeOld => probe_old.push(s),
            Role::ValQuery => validation.query.push(s),
            Role::ValGallery => validation.gallery.push(s),
            Role::Query | Role::Gallery => {
                if kept {
                    if role == Role::Query {
                        retrieval.query.push(s.clone());
                    } else {
                        retrieval.gallery.push(s.clone());
                    }
                }
                pool.push(s);
            }
        }
    }
    let mut plines = enc.pairs.lines();
    if plines.next() != Some("a\tb\tgenuine") {
        return Err(corrupt("pairs header"));
    }
    let mut pairs = Vec::new();
    for (k, line) in plines.enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        let p = VerificationPair {
            a: field(&cols, 0, k)?,
            b: field(&cols, 1, k)?,
            genuine: field::<u8>(&cols, 2, k)? == 1,
        };
        if p.a >= pool.len() || p.b >= pool.len() {
            return Err(corrupt(format!("pair {k} out of range")));
        }
        pairs.push(p);
    }
    Ok(Benchmark {
        manifest,
        steps,
        test: TestSet {
            pool,
            retrieval,
            pairs,
        },
        validation,
        probe_old,
    })
}
