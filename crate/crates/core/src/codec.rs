//! Continuous <-> discrete action conversion.
//!
//! Every continuous dimension is split into `num_bins` quantile bins anchored
//! at the 1st and 99th percentiles of the fitting data. The gripper dimension
//! is a binary token with a fixed threshold at 0.5. Token ids share one
//! vocabulary of size `K = num_bins`, and the extra id `K` is `MASK`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rng::sha256_hex;
use crate::{Error, Result};

pub type TokenId = u32;

pub const TOKENIZER_FORMAT_VERSION: u32 = 1;

/// Lower and upper percentile anchors of quantile binning.
pub const LOW_PERCENTILE: f64 = 0.01;
pub const HIGH_PERCENTILE: f64 = 0.99;

/// Decision threshold of the binary gripper token.
pub const GRIPPER_THRESHOLD: f64 = 0.5;

/// How one action dimension is binned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DimBinning {
    /// Edges at equally spaced quantiles between the percentile anchors.
    Quantile { edges: Vec<f64>, centers: Vec<f64> },
    /// Equal-width bins over a fixed range; used for dimensions whose data
    /// carries no spread (e.g. unused rotation channels).
    Uniform { edges: Vec<f64>, centers: Vec<f64> },
    /// Two bins split at [`GRIPPER_THRESHOLD`], decoded to exactly 0.0 / 1.0.
    Binary,
}

impl DimBinning {
    pub fn bin_count(&self) -> usize {
        match self {
            DimBinning::Quantile { centers, .. } | DimBinning::Uniform { centers, .. } => {
                centers.len()
            }
            DimBinning::Binary => 2,
        }
    }

    /// Bin boundaries; the binary dimension reports `{-inf, 0.5, +inf}`.
    pub fn edges(&self) -> Vec<f64> {
        match self {
            DimBinning::Quantile { edges, .. } | DimBinning::Uniform { edges, .. } => {
                edges.clone()
            }
            DimBinning::Binary => vec![f64::NEG_INFINITY, GRIPPER_THRESHOLD, f64::INFINITY],
        }
    }

    pub fn centers(&self) -> Vec<f64> {
        match self {
            DimBinning::Quantile { centers, .. } | DimBinning::Uniform { centers, .. } => {
                centers.clone()
            }
            DimBinning::Binary => vec![0.0, 1.0],
        }
    }

    /// Maps a value to the bin whose half-open interval `[lo, hi)` holds it,
    /// clipping out-of-range values to the first or last bin.
    pub fn bin_of(&self, value: f64) -> usize {
        match self {
            DimBinning::Quantile { edges, .. } | DimBinning::Uniform { edges, .. } => {
                let bins = edges.len() - 1;
                edges[1..bins].partition_point(|&e| e <= value)
            }
            DimBinning::Binary => usize::from(value >= GRIPPER_THRESHOLD),
        }
    }

    pub fn center_of(&self, bin: usize) -> f64 {
        match self {
            DimBinning::Quantile { centers, .. } | DimBinning::Uniform { centers, .. } => {
                centers[bin]
            }
            DimBinning::Binary => {
                if bin == 0 {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }

    /// Widest bin of this dimension (1.0 for the binary dimension).
    pub fn max_bin_width(&self) -> f64 {
        match self {
            DimBinning::Quantile { edges, .. } | DimBinning::Uniform { edges, .. } => edges
                .windows(2)
                .map(|w| w[1] - w[0])
                .fold(0.0, f64::max),
            DimBinning::Binary => 1.0,
        }
    }
}

/// Requested treatment of a dimension when fitting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DimLayout {
    Quantile,
    Binary,
    Uniform { lo: f64, hi: f64 },
}

/// Per-dimension binning that defines the continuous <-> token mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub version: u32,
    /// Token vocabulary size `K`; also the bin count of continuous dimensions.
    pub num_bins: usize,
    pub dims: usize,
    pub gripper_dim: Option<usize>,
    /// Records how the percentile anchors were obtained.
    pub fit_scope: String,
    pub bins: Vec<DimBinning>,
}

impl TokenizerSpec {
    pub fn mask_id(&self) -> TokenId {
        self.num_bins as TokenId
    }

    pub fn vocab_size(&self) -> usize {
        self.num_bins + 1
    }

    pub fn edges(&self, dim: usize) -> Vec<f64> {
        self.bins[dim].edges()
    }

    pub fn centers(&self, dim: usize) -> Vec<f64> {
        self.bins[dim].centers()
    }

    /// Checks the ordering invariants of every dimension.
    pub fn validate(&self) -> Result<()> {
        if self.version != TOKENIZER_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported tokenizer version {}",
                self.version
            )));
        }
        if self.bins.len() != self.dims {
            return Err(Error::Validation(format!(
                "tokenizer has {} dimension entries, expected {}",
                self.bins.len(),
                self.dims
            )));
        }
        if self.num_bins < 2 {
            return Err(Error::Validation("num_bins must be at least 2".into()));
        }
        for (d, bin) in self.bins.iter().enumerate() {
            let is_gripper = self.gripper_dim == Some(d);
            if is_gripper != matches!(bin, DimBinning::Binary) {
                return Err(Error::Validation(format!(
                    "dimension {d}: binary binning must coincide with the gripper dimension"
                )));
            }
            if bin.bin_count() > self.num_bins {
                return Err(Error::Validation(format!(
                    "dimension {d} has {} bins but the vocabulary holds {}",
                    bin.bin_count(),
                    self.num_bins
                )));
            }
            let edges = bin.edges();
            let centers = bin.centers();
            if edges.len() != centers.len() + 1 {
                return Err(Error::Validation(format!(
                    "dimension {d}: {} edges for {} centers",
                    edges.len(),
                    centers.len()
                )));
            }
            for (i, c) in centers.iter().enumerate() {
                if !(edges[i] < edges[i + 1]) {
                    return Err(Error::Validation(format!(
                        "dimension {d}: edges not strictly increasing at {i}"
                    )));
                }
                if !(edges[i] < *c && *c < edges[i + 1]) {
                    return Err(Error::Validation(format!(
                        "dimension {d}: center {i} outside its bin"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Tokenizes an `H x D` matrix given as `H` rows.
    pub fn tokenize_chunk(&self, rows: &[Vec<f64>]) -> Result<ActionChunk> {
        let mut tokens = Vec::with_capacity(rows.len() * self.dims);
        for (h, row) in rows.iter().enumerate() {
            if row.len() != self.dims {
                return Err(Error::Validation(format!(
                    "row {h} has {} values, tokenizer expects {}",
                    row.len(),
                    self.dims
                )));
            }
            for (d, &value) in row.iter().enumerate() {
                if !value.is_finite() {
                    return Err(Error::Validation(format!(
                        "non-finite action value at step {h}, dim {d}"
                    )));
                }
                tokens.push(self.bins[d].bin_of(value) as TokenId);
            }
        }
        ActionChunk::new(tokens, rows.len(), self.dims, self.num_bins)
    }

    pub fn detokenize_chunk(&self, chunk: &ActionChunk) -> Result<Vec<Vec<f64>>> {
        if chunk.dims != self.dims || chunk.num_classes != self.num_bins {
            return Err(Error::Validation(format!(
                "chunk layout (dims {}, K {}) does not match tokenizer (dims {}, K {})",
                chunk.dims, chunk.num_classes, self.dims, self.num_bins
            )));
        }
        if let Some(position) = chunk.first_mask() {
            return Err(Error::IncompleteChunk { position });
        }
        chunk
            .tokens
            .chunks(self.dims)
            .map(|step| {
                step.iter()
                    .enumerate()
                    .map(|(d, &tok)| {
                        let bin = tok as usize;
                        // The model predicts over all K classes everywhere;
                        // any nonzero gripper class reads as closed.
                        let binary = matches!(self.bins[d], DimBinning::Binary);
                        if !binary && bin >= self.bins[d].bin_count() {
                            return Err(Error::Validation(format!(
                                "token {tok} out of range for dimension {d}"
                            )));
                        }
                        Ok(self.bins[d].center_of(bin))
                    })
                    .collect()
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: TokenizerSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// SHA-256 of the canonical serialized form.
    pub fn checksum(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("tokenizer serializes").as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn quantile_binning(samples: &[f64], num_bins: usize, dim: usize) -> Result<DimBinning> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < num_bins {
        return Err(Error::DegenerateData(format!(
            "dimension {dim} has {} distinct samples, need at least {num_bins}",
            distinct.len()
        )));
    }
    let span = HIGH_PERCENTILE - LOW_PERCENTILE;
    let edges: Vec<f64> = (0..=num_bins)
        .map(|j| percentile_sorted(&sorted, LOW_PERCENTILE + span * j as f64 / num_bins as f64))
        .collect();
    if edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::DegenerateData(format!(
            "dimension {dim}: quantile edges collapse (too many tied samples)"
        )));
    }
    let centers = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    Ok(DimBinning::Quantile { edges, centers })
}

fn uniform_binning(lo: f64, hi: f64, num_bins: usize) -> Result<DimBinning> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Validation(format!("invalid uniform range [{lo}, {hi}]")));
    }
    let width = (hi - lo) / num_bins as f64;
    let edges: Vec<f64> = (0..=num_bins).map(|j| lo + width * j as f64).collect();
    let centers = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    Ok(DimBinning::Uniform { edges, centers })
}

/// Fits quantile bins on every dimension except `gripper_dim`, which becomes
/// the binary token.
pub fn fit_bins(
    samples: &[Vec<f64>],
    num_bins: usize,
    gripper_dim: Option<usize>,
) -> Result<TokenizerSpec> {
    let layout: Vec<DimLayout> = (0..samples.len())
        .map(|d| {
            if Some(d) == gripper_dim {
                DimLayout::Binary
            } else {
                DimLayout::Quantile
            }
        })
        .collect();
    fit_bins_with_layout(samples, num_bins, &layout)
}

/// Like [`fit_bins`] with an explicit treatment per dimension.
pub fn fit_bins_with_layout(
    samples: &[Vec<f64>],
    num_bins: usize,
    layout: &[DimLayout],
) -> Result<TokenizerSpec> {
    if num_bins < 2 {
        return Err(Error::Validation("num_bins must be at least 2".into()));
    }
    if samples.len() != layout.len() {
        return Err(Error::Validation(format!(
            "{} sample columns for {} layout entries",
            samples.len(),
            layout.len()
        )));
    }
    if layout.iter().filter(|l| matches!(l, DimLayout::Binary)).count() > 1 {
        return Err(Error::Validation("at most one binary gripper dimension".into()));
    }
    let mut bins = Vec::with_capacity(layout.len());
    let mut gripper_dim = None;
    for (d, (column, kind)) in samples.iter().zip(layout).enumerate() {
        if let Some(bad) = column.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite sample at index {bad} of dimension {d}"
            )));
        }
        bins.push(match *kind {
            DimLayout::Quantile => quantile_binning(column, num_bins, d)?,
            DimLayout::Uniform { lo, hi } => uniform_binning(lo, hi, num_bins)?,
            DimLayout::Binary => {
                gripper_dim = Some(d);
                DimBinning::Binary
            }
        });
    }
    let spec = TokenizerSpec {
        version: TOKENIZER_FORMAT_VERSION,
        num_bins,
        dims: layout.len(),
        gripper_dim,
        fit_scope: "per-dataset".to_string(),
        bins,
    };
    spec.validate()?;
    Ok(spec)
}

/// A fixed-length chunk of `H * D` action tokens; `MASK` is id `num_classes`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionChunk {
    pub tokens: Vec<TokenId>,
    pub horizon: usize,
    pub dims: usize,
    /// `K`, the number of real action classes.
    pub num_classes: usize,
}

impl ActionChunk {
    pub fn new(
        tokens: Vec<TokenId>,
        horizon: usize,
        dims: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if tokens.len() != horizon * dims {
            return Err(Error::Validation(format!(
                "chunk has {} tokens, expected H*D = {}",
                tokens.len(),
                horizon * dims
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize > num_classes) {
            return Err(Error::Validation(format!(
                "token {bad} outside vocabulary of size {}",
                num_classes + 1
            )));
        }
        Ok(Self {
            tokens,
            horizon,
            dims,
            num_classes,
        })
    }

    /// A chunk with every position set to `MASK`.
    pub fn fully_masked(horizon: usize, dims: usize, num_classes: usize) -> Self {
        Self {
            tokens: vec![num_classes as TokenId; horizon * dims],
            horizon,
            dims,
            num_classes,
        }
    }

    pub fn mask_id(&self) -> TokenId {
        self.num_classes as TokenId
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.tokens[i] == self.mask_id()
    }

    pub fn first_mask(&self) -> Option<usize> {
        let mask = self.mask_id();
        self.tokens.iter().position(|&t| t == mask)
    }

    pub fn mask_count(&self) -> usize {
        let mask = self.mask_id();
        self.tokens.iter().filter(|&&t| t == mask).count()
    }
}
