//! Lookup-table posterior model over tiny `(L, K)`.

use rand::Rng as _;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::codec::TokenId;
use crate::decoder::ScoringMode;
use crate::model::{PosteriorMatrix, PosteriorModel};
use crate::rng::seeded;
use crate::{Error, Result};

pub const MAX_TABULATED_LEN: usize = 4;
pub const MAX_TABULATED_CLASSES: usize = 3;

/// Posterior rows for every `(context, state)` pair, where a state is any
/// assignment of `{0..K-1, MASK}` to the `L` positions. A `None` entry is
/// a deliberate gap and fails lookups with [`Error::Coverage`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabulatedModel {
    pub chunk_len: usize,
    pub num_classes: usize,
    pub contexts: usize,
    pub table: Vec<Option<Vec<Vec<f64>>>>,
}

impl TabulatedModel {
    fn states(chunk_len: usize, num_classes: usize) -> usize {
        (num_classes + 1).pow(chunk_len as u32)
    }

    fn check_shape(chunk_len: usize, num_classes: usize, contexts: usize) -> Result<()> {
        if !(1..=MAX_TABULATED_LEN).contains(&chunk_len)
            || !(1..=MAX_TABULATED_CLASSES).contains(&num_classes)
            || contexts == 0
        {
            return Err(Error::Validation(format!(
                "tabulated models need 1 <= L <= {MAX_TABULATED_LEN}, 1 <= K <= {MAX_TABULATED_CLASSES} and a context; \
                 got L={chunk_len}, K={num_classes}, contexts={contexts}"
            )));
        }
        Ok(())
    }

    /// State `i` decoded as base-`(K+1)` digits, position 0 least significant.
    pub fn state_tokens(&self, index: usize) -> Vec<TokenId> {
        let base = self.num_classes + 1;
        let mut rest = index;
        (0..self.chunk_len)
            .map(|_| {
                let digit = rest % base;
                rest /= base;
                digit as TokenId
            })
            .collect()
    }

    pub fn index(&self, context: usize, tokens: &[TokenId]) -> usize {
        let base = self.num_classes + 1;
        let state = tokens.iter().rev().fold(0, |acc, &t| acc * base + t as usize);
        context * Self::states(self.chunk_len, self.num_classes) + state
    }

    /// Fills the table with `rows(context, state)`.
    pub fn from_fn(
        chunk_len: usize,
        num_classes: usize,
        contexts: usize,
        mut rows: impl FnMut(usize, &[TokenId]) -> Vec<Vec<f64>>,
    ) -> Result<Self> {
        Self::check_shape(chunk_len, num_classes, contexts)?;
        let states = Self::states(chunk_len, num_classes);
        let mut model = Self {
            chunk_len,
            num_classes,
            contexts,
            table: Vec::with_capacity(contexts * states),
        };
        for c in 0..contexts {
            for s in 0..states {
                let entry = rows(c, &model.state_tokens(s));
                model.table.push(Some(entry));
            }
        }
        model.validate()?;
        Ok(model)
    }

    /// Seeded random table. Some rows are uniform and some have a two-way
    /// tie for the top class so tie-breaking paths get exercised.
    pub fn random(chunk_len: usize, num_classes: usize, contexts: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        Self::from_fn(chunk_len, num_classes, contexts, |_, _| {
            (0..chunk_len)
                .map(|_| {
                    let roll: f64 = rng.random();
                    if roll < 0.1 {
                        vec![1.0 / num_classes as f64; num_classes]
                    } else if roll < 0.2 && num_classes >= 2 {
                        let top = rng.random_range(0.34..0.5);
                        let mut row = vec![(1.0 - 2.0 * top) / (num_classes - 2).max(1) as f64; num_classes];
                        row[0] = top;
                        row[1] = top;
                        if num_classes == 2 {
                            row = vec![0.5, 0.5];
                        }
                        row
                    } else {
                        let w: Vec<f64> = (0..num_classes).map(|_| Exp1.sample(&mut rng)).collect();
                        let total: f64 = w.iter().sum();
                        w.iter().map(|x| x / total).collect()
                    }
                })
                .collect()
        })
    }

    pub fn validate(&self) -> Result<()> {
        Self::check_shape(self.chunk_len, self.num_classes, self.contexts)?;
        let expected = self.contexts * Self::states(self.chunk_len, self.num_classes);
        if self.table.len() != expected {
            return Err(Error::Coverage(format!(
                "table has {} entries, expected {expected}",
                self.table.len()
            )));
        }
        for rows in self.table.iter().flatten() {
            PosteriorMatrix::from_rows(rows.clone())?;
            if rows.len() != self.chunk_len || rows.iter().any(|r| r.len() != self.num_classes) {
                return Err(Error::Validation("table entry has the wrong shape".into()));
            }
        }
        Ok(())
    }

    /// Removes one entry so coverage failures can be tested.
    pub fn clear_entry(&mut self, context: usize, tokens: &[TokenId]) {
        let i = self.index(context, tokens);
        self.table[i] = None;
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }
}

impl PosteriorModel for TabulatedModel {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    fn context_len(&self) -> usize {
        1
    }

    fn posteriors(&self, context: &[TokenId], actions: &[TokenId]) -> Result<PosteriorMatrix> {
        if context.len() != 1 || context[0] as usize >= self.contexts {
            return Err(Error::Validation(format!("context {context:?} not in table")));
        }
        if actions.len() != self.chunk_len || actions.iter().any(|&t| t as usize > self.num_classes) {
            return Err(Error::Validation(format!("action state {actions:?} not in table")));
        }
        match &self.table[self.index(context[0] as usize, actions)] {
            Some(rows) => PosteriorMatrix::from_rows(rows.clone()),
            None => Err(Error::Coverage(format!(
                "no table entry for context {} and state {actions:?}",
                context[0]
            ))),
        }
    }
}

/// A replayable fuzz case: the model is regenerated from its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabulatedCase {
    pub seed: u64,
    pub chunk_len: usize,
    pub num_classes: usize,
    pub contexts: usize,
    pub rounds: usize,
    pub scoring: ScoringMode,
}

impl TabulatedCase {
    pub fn model(&self) -> Result<TabulatedModel> {
        TabulatedModel::random(self.chunk_len, self.num_classes, self.contexts, self.seed)
    }

    /// `count` cases spanning the allowed `(L, K)` grid and a few round counts.
    pub fn generate(count: usize, seed: u64) -> Vec<Self> {
        let mut rng = seeded(seed);
        (0..count)
            .map(|i| TabulatedCase {
                seed: rng.random(),
                chunk_len: rng.random_range(1..=MAX_TABULATED_LEN),
                num_classes: rng.random_range(2..=MAX_TABULATED_CLASSES),
                contexts: rng.random_range(1..=3),
                rounds: rng.random_range(1..=6),
                scoring: if i % 3 == 2 {
                    ScoringMode::ConfidenceGap
                } else {
                    ScoringMode::MaxConfidence
                },
            })
            .collect()
    }
}
