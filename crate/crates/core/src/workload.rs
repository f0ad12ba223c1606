//! Synthetic dataset generation with skewed (Zipf) key popularity, plus
//! line-delimited dataset file I/O.
//!
//! Key id `k` is drawn with probability proportional to `1/(k+1)^s`, so id 0 is
//! the rank-1 (hottest) key. The skew is what makes consecutive batches share
//! keys and dual-buffer synchronization consequential.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prf::Prf;
use crate::types::{Sample, SparseKey};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub vocab_size: u64,
    pub num_samples: u64,
    pub keys_per_sample: usize,
    /// Zipf exponent s >= 0; 0 is uniform.
    pub zipf_skew: f64,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("dataset I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.num_samples == 0 {
            return Err(WorkloadError::InvalidConfig {
                field: "num_samples",
                reason: "must be > 0".into(),
            });
        }
        if self.keys_per_sample == 0 {
            return Err(WorkloadError::InvalidConfig {
                field: "keys_per_sample",
                reason: "must be > 0".into(),
            });
        }
        if self.keys_per_sample as u64 > self.vocab_size {
            return Err(WorkloadError::InvalidConfig {
                field: "keys_per_sample",
                reason: format!(
                    "{} exceeds vocab_size {}",
                    self.keys_per_sample, self.vocab_size
                ),
            });
        }
        if !self.zipf_skew.is_finite() || self.zipf_skew < 0.0 {
            return Err(WorkloadError::InvalidConfig {
                field: "zipf_skew",
                reason: "must be >= 0".into(),
            });
        }
        Ok(())
    }
}

/// Inverse-CDF sampler over key ids `[0, vocab)` with `p(k) ~ 1/(k+1)^s`.
struct ZipfTable {
    cumulative: Vec<f64>,
}

impl ZipfTable {
    fn new(vocab: u64, skew: f64) -> Self {
        let mut cumulative = Vec::with_capacity(vocab as usize);
        let mut acc = 0.0f64;
        for k in 0..vocab {
            acc += 1.0 / ((k + 1) as f64).powf(skew);
            cumulative.push(acc);
        }
        Self { cumulative }
    }

    fn sample(&self, unit: f64) -> u64 {
        let total = *self.cumulative.last().expect("non-empty vocab");
        let target = unit * total;
        // unit < 1, but `unit * total` may round up to `total`; clamp into range.
        (self.cumulative.partition_point(|&c| c <= target) as u64)
            .min(self.cumulative.len() as u64 - 1)
    }
}

/// Deterministic dataset generation: each sample is a pure function of
/// `(seed, sample_id)`, so parallel generation would be index-deterministic.
///
/// Keys are drawn without replacement by repeated rejection, labels are fair
/// Bernoulli draws.
pub fn gen_dataset(cfg: &WorkloadConfig) -> Result<Vec<Sample>, WorkloadError> {
    cfg.validate()?;
    let prf = Prf::new(cfg.seed);
    let table = ZipfTable::new(cfg.vocab_size, cfg.zipf_skew);
    let mut samples = Vec::with_capacity(cfg.num_samples as usize);
    for sample_id in 0..cfg.num_samples {
        let mut keys: Vec<SparseKey> = Vec::with_capacity(cfg.keys_per_sample);
        let mut attempt = 0u64;
        while keys.len() < cfg.keys_per_sample {
            let unit = prf.uniform("sample", &[sample_id, attempt], 0.0, 1.0);
            attempt += 1;
            let key = SparseKey(table.sample(unit));
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.sort_unstable();
        let label = u8::from(prf.bernoulli("label", &[sample_id]));
        samples.push(Sample {
            sample_id,
            keys,
            label,
        });
    }
    Ok(samples)
}

/// Wire form of one dataset line.
#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: u64,
    label: u8,
    keys: Vec<u64>,
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<(), WorkloadError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    for s in samples {
        let rec = SampleRecord {
            id: s.sample_id,
            label: s.label,
            keys: s.keys.iter().map(|k| k.0).collect(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>, WorkloadError> {
    let reader = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| WorkloadError::Parse {
            line: line_no,
            reason: e.to_string(),
        })?;
        let parse_err = |reason: String| WorkloadError::Parse {
            line: line_no,
            reason,
        };
        if rec.label > 1 {
            return Err(parse_err(format!("label {} not in {{0,1}}", rec.label)));
        }
        if rec.keys.is_empty() {
            return Err(parse_err("empty key list".into()));
        }
        if !rec.keys.windows(2).all(|w| w[0] < w[1]) {
            return Err(parse_err(
                "keys not strictly ascending (duplicate or out of order)".into(),
            ));
        }
        if !seen_ids.insert(rec.id) {
            return Err(parse_err(format!("duplicate sample id {}", rec.id)));
        }
        samples.push(Sample {
            sample_id: rec.id,
            keys: rec.keys.into_iter().map(SparseKey).collect(),
            label: rec.label,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(vocab: u64, n: u64, kps: usize, skew: f64, seed: u64) -> WorkloadConfig {
        WorkloadConfig {
            vocab_size: vocab,
            num_samples: n,
            keys_per_sample: kps,
            zipf_skew: skew,
            seed,
        }
    }

    fn key_counts(samples: &[Sample], vocab: u64) -> Vec<u64> {
        let mut counts = vec![0u64; vocab as usize];
        for s in samples {
            for k in &s.keys {
                counts[k.0 as usize] += 1;
            }
        }
        counts
    }

    #[test]
    fn rejects_keys_per_sample_over_vocab() {
        let err = gen_dataset(&cfg(4, 10, 5, 0.0, 1)).unwrap_err();
        assert!(matches!(
            err,
            WorkloadError::InvalidConfig {
                field: "keys_per_sample",
                ..
            }
        ));
    }

    #[test]
    fn samples_are_canonical_and_in_vocab() {
        let samples = gen_dataset(&cfg(50, 200, 6, 1.0, 3)).unwrap();
        assert_eq!(samples.len(), 200);
        for s in &samples {
            assert!(s.is_canonical());
            assert_eq!(s.keys.len(), 6);
            assert!(s.keys.iter().all(|k| k.0 < 50));
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let a = gen_dataset(&cfg(100, 500, 4, 1.2, 42)).unwrap();
        let b = gen_dataset(&cfg(100, 500, 4, 1.2, 42)).unwrap();
        assert_eq!(a, b);
        let c = gen_dataset(&cfg(100, 500, 4, 1.2, 43)).unwrap();
        assert_ne!(a, c);
    }

    // Frequency-count oracle: with s=0 the marginal key distribution is
    // uniform; max/min empirical frequency ratio stays under 1.2.
    #[test]
    fn zero_skew_is_near_uniform() {
        let samples = gen_dataset(&cfg(100, 100_000, 4, 0.0, 7)).unwrap();
        let counts = key_counts(&samples, 100);
        let max = *counts.iter().max().unwrap() as f64;
        let min = *counts.iter().min().unwrap() as f64;
        assert!(min > 0.0);
        assert!(max / min < 1.2, "max/min ratio {} too large", max / min);
    }

    // Frequency-count oracle: under skew the rank-1 key (id 0) beats rank-100 (id 99).
    #[test]
    fn skew_orders_rank_frequencies() {
        let samples = gen_dataset(&cfg(10_000, 20_000, 4, 1.2, 5)).unwrap();
        let counts = key_counts(&samples, 10_000);
        assert!(
            counts[0] > counts[99],
            "rank-1 count {} not above rank-100 count {}",
            counts[0],
            counts[99]
        );
    }

    #[test]
    fn top_key_frequency_monotone_in_skew() {
        let mut prev = 0u64;
        for (i, skew) in [0.0, 0.6, 1.2].into_iter().enumerate() {
            let samples = gen_dataset(&cfg(1_000, 100_000, 2, skew, 11)).unwrap();
            let counts = key_counts(&samples, 1_000);
            let top = *counts.iter().max().unwrap();
            assert!(
                top >= prev,
                "skew step {i}: top frequency {top} dropped below {prev}"
            );
            prev = top;
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = std::env::temp_dir().join(format!("nestpipe-wl-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("data.jsonl");
        let samples = gen_dataset(&cfg(64, 100, 3, 0.8, 9)).unwrap();
        write_dataset(&path, &samples).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(samples, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn empty_file_reads_empty() {
        let dir = std::env::temp_dir().join(format!("nestpipe-wl-empty-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_dataset(&path).unwrap().is_empty());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn duplicate_keys_rejected_with_line_number() {
        let dir = std::env::temp_dir().join(format!("nestpipe-wl-dup-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"id\":0,\"label\":1,\"keys\":[1,2]}\n{\"id\":1,\"label\":0,\"keys\":[3,3]}\n",
        )
        .unwrap();
        match read_dataset(&path).unwrap_err() {
            WorkloadError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
