//! Generated expert datasets and their on-disk format.
//!
//! A dataset file starts with a text header of `key value` lines ending at
//! a line `end`, followed by a little-endian binary payload:
//!
//! ```text
//! DIFFACT-DATASET
//! version 1
//! episodes 1000
//! horizon 8
//! action_dims 7
//! context_len 4
//! seed 7
//! tokenizer_sha256 <hex>
//! config_bytes <n>
//! tokenizer_bytes <n>
//! end
//! <config json><tokenizer json>
//! per episode: u64 task_id, u64 seed, f64 start[2], f64 target[2],
//!              u32 context[context_len], f64 expert[horizon * action_dims]
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BenchConfig, TaskSpec};
use crate::codec::{fit_bins_with_layout, DimLayout, TokenId, TokenizerSpec};
use crate::model::BatchItem;
use crate::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "DIFFACT-DATASET";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task: TaskSpec,
    pub context: Vec<TokenId>,
    /// `H` rows of `D_act` continuous actions.
    pub expert: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: BenchConfig,
    pub seed: u64,
    pub episodes: Vec<EpisodeRecord>,
    pub tokenizer: TokenizerSpec,
}

/// Samples `n_tasks` tasks, records the expert chunk of each and fits the
/// tokenizer on all generated actions. x and y get quantile bins, the unused
/// rotation dimensions fixed bins over `[-1, 1]` (they are constant, so
/// quantiles would collapse), and the last dimension is the binary gripper.
pub fn generate_dataset(n_tasks: usize, seed: u64, config: &BenchConfig) -> Result<Dataset> {
    config.validate()?;
    if n_tasks == 0 {
        return Err(Error::Validation("n_tasks must be at least 1".into()));
    }
    let episodes: Vec<EpisodeRecord> = (0..n_tasks as u64)
        .map(|id| {
            let task = TaskSpec::sample(id, seed, config);
            EpisodeRecord {
                context: task.context_tokens(config),
                expert: task.expert_chunk(config),
                task,
            }
        })
        .collect();
    let columns: Vec<Vec<f64>> = (0..config.action_dims)
        .map(|d| episodes.iter().flat_map(|e| e.expert.iter().map(move |r| r[d])).collect())
        .collect();
    let layout: Vec<DimLayout> = (0..config.action_dims)
        .map(|d| match d {
            0 | 1 => DimLayout::Quantile,
            d if d == config.gripper_dim() => DimLayout::Binary,
            _ => DimLayout::Uniform { lo: -1.0, hi: 1.0 },
        })
        .collect();
    let tokenizer = fit_bins_with_layout(&columns, config.num_bins, &layout)?;
    Ok(Dataset {
        config: config.clone(),
        seed,
        episodes,
        tokenizer,
    })
}

impl Dataset {
    pub fn train_episodes(&self) -> Vec<&EpisodeRecord> {
        let f = self.config.held_out_fraction;
        self.episodes.iter().filter(|e| !e.task.is_held_out(f)).collect()
    }

    pub fn held_out_episodes(&self) -> Vec<&EpisodeRecord> {
        let f = self.config.held_out_fraction;
        self.episodes.iter().filter(|e| e.task.is_held_out(f)).collect()
    }

    pub fn held_out_tasks(&self) -> Vec<TaskSpec> {
        self.held_out_episodes().into_iter().map(|e| e.task.clone()).collect()
    }

    /// Tokenized training split.
    pub fn batch_items(&self) -> Result<Vec<BatchItem>> {
        self.train_episodes()
            .into_iter()
            .map(|e| {
                Ok(BatchItem {
                    context: e.context.clone(),
                    target: self.tokenizer.tokenize_chunk(&e.expert)?,
                })
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.config)?;
        let tokenizer = self.tokenizer.to_json()?.into_bytes();
        let header = format!(
            "{MAGIC}\nversion {DATASET_FORMAT_VERSION}\nepisodes {}\nhorizon {}\naction_dims {}\n\
             context_len {}\nseed {}\ntokenizer_sha256 {}\nconfig_bytes {}\ntokenizer_bytes {}\nend\n",
            self.episodes.len(),
            self.config.horizon,
            self.config.action_dims,
            self.config.context_len(),
            self.seed,
            self.tokenizer.checksum(),
            config.len(),
            tokenizer.len(),
        );
        let mut out = header.into_bytes();
        out.extend_from_slice(&config);
        out.extend_from_slice(&tokenizer);
        for e in &self.episodes {
            out.extend_from_slice(&e.task.task_id.to_le_bytes());
            out.extend_from_slice(&e.task.seed.to_le_bytes());
            for v in e.task.start.iter().chain(&e.task.target) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for t in &e.context {
                out.extend_from_slice(&t.to_le_bytes());
            }
            for v in e.expert.iter().flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut header = BTreeMap::new();
        let mut at = 0;
        let mut first = true;
        loop {
            let end = bytes[at..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Format("dataset header is not terminated".into()))?;
            let line = std::str::from_utf8(&bytes[at..at + end])
                .map_err(|_| Error::Format("dataset header is not UTF-8".into()))?;
            at += end + 1;
            if first {
                if line != MAGIC {
                    return Err(Error::Format("not a dataset file".into()));
                }
                first = false;
                continue;
            }
            if line == "end" {
                break;
            }
            let (key, value) = line
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("bad header line {line:?}")))?;
            header.insert(key.to_string(), value.to_string());
        }
        let field = |key: &str| -> Result<u64> {
            header
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("header field {key} missing or invalid")))
        };
        if field("version")? != DATASET_FORMAT_VERSION as u64 {
            return Err(Error::Format(format!("unsupported dataset version {}", field("version")?)));
        }
        let mut r = Cursor { bytes, at };
        let config: BenchConfig = serde_json::from_slice(r.take(field("config_bytes")? as usize)?)?;
        let tokenizer_text = std::str::from_utf8(r.take(field("tokenizer_bytes")? as usize)?)
            .map_err(|_| Error::Format("tokenizer is not UTF-8".into()))?;
        let tokenizer = TokenizerSpec::from_json(tokenizer_text)?;
        if Some(&tokenizer.checksum()) != header.get("tokenizer_sha256") {
            return Err(Error::Format("tokenizer checksum does not match the header".into()));
        }
        let (h, d, c) = (config.horizon, config.action_dims, config.context_len());
        if field("horizon")? as usize != h || field("action_dims")? as usize != d || field("context_len")? as usize != c
        {
            return Err(Error::Format("header shape disagrees with the embedded config".into()));
        }
        let count = field("episodes")? as usize;
        let mut episodes = Vec::with_capacity(count);
        for _ in 0..count {
            let task_id = r.u64()?;
            let seed = r.u64()?;
            let start = [r.f64()?, r.f64()?];
            let target = [r.f64()?, r.f64()?];
            let context = (0..c).map(|_| r.u32()).collect::<Result<_>>()?;
            let expert = (0..h)
                .map(|_| (0..d).map(|_| r.f64()).collect::<Result<Vec<_>>>())
                .collect::<Result<_>>()?;
            episodes.push(EpisodeRecord {
                task: TaskSpec {
                    task_id,
                    seed,
                    start,
                    target,
                },
                context,
                expert,
            });
        }
        if r.at != bytes.len() {
            return Err(Error::Format("trailing bytes after the last episode".into()));
        }
        Ok(Self {
            config,
            seed: field("seed")?,
            episodes,
            tokenizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Format("dataset truncated".into()));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchConfig {
        BenchConfig {
            num_bins: 16,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let cfg = small();
        let a = generate_dataset(50, 9, &cfg).unwrap().to_bytes().unwrap();
        let b = generate_dataset(50, 9, &cfg).unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(50, 10, &cfg).unwrap().to_bytes().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        let data = generate_dataset(30, 2, &small()).unwrap();
        data.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), data);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let data = generate_dataset(20, 2, &small()).unwrap();
        let bytes = data.to_bytes().unwrap();
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Dataset::from_bytes(&extra).is_err());
        assert!(Dataset::from_bytes(b"something else\n").is_err());
    }

    #[test]
    fn tokenized_expert_rows_are_within_a_bin() {
        let data = generate_dataset(300, 1, &BenchConfig::default()).unwrap();
        let items = data.batch_items().unwrap();
        assert_eq!(items.len(), data.train_episodes().len());
        assert!(items.iter().all(|i| i.target.len() == 56));
        // Gripper and rotation tokens are constant across the dataset.
        let first = &items[0].target.tokens;
        for item in &items {
            for step in 0..8 {
                for d in 2..7 {
                    assert_eq!(item.target.tokens[step * 7 + d], first[d]);
                }
            }
        }
    }
}
