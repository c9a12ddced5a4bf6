//! Discrete-diffusion decoding of robot action chunks.
//!
//! Continuous control chunks are binned into a token vocabulary extended with
//! a `MASK` symbol. A small bidirectional transformer is trained to recover
//! masked tokens, and chunks are decoded from an all-`MASK` start by a fixed
//! number of parallel refinement rounds that commit the most confident
//! positions first and can revert unreliable commitments.
//!
//! Module map:
//!
//! - [`codec`]: quantile binning and chunk (de)tokenization.
//! - [`schedule`]: mask-ratio, temperature and threshold schedules.
//! - [`diffusion`]: forward masking process and the masked cross-entropy loss.
//! - [`model`]: the transformer policy with hand-written backpropagation.
//! - [`decoder`]: adaptive refinement decoding with secondary re-masking.
//! - [`oracle`]: brute-force references and the left-to-right baseline.
//! - [`bench`]: synthetic reaching tasks, evaluation and ablation grids.

pub mod bench;
pub mod codec;
pub mod decoder;
pub mod diffusion;
mod error;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod schedule;
pub mod verify;

pub use codec::{ActionChunk, TokenId, TokenizerSpec};
pub use decoder::{decode, DecodeConfig, DecodeTrace, RemaskFlags, ScoringMode};
pub use error::{Error, Result};
pub use model::{ModelConfig, PolicyModel, PosteriorMatrix, PosteriorModel};
pub use schedule::{MaskSchedule, ScheduleKind, TemperatureMode, ThresholdSchedule};
