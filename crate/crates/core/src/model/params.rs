//! Flat parameter storage with named tensor views.

use serde::{Deserialize, Serialize};

use super::ModelConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of one transformer block's tensors inside the flat buffer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockOffsets {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub context_embed: usize,
    pub action_embed: usize,
    pub position_embed: usize,
    /// `condition_slots x context_vocab x d` slot embeddings added to action
    /// inputs; absent when `condition_slots` is zero.
    pub condition_embed: Option<usize>,
    pub blocks: Vec<BlockOffsets>,
    pub final_gain: usize,
    pub final_bias: usize,
    pub head_weight: usize,
    pub head_bias: usize,
    pub total: usize,
}

struct Builder {
    tensors: Vec<TensorSpec>,
    next: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize]) -> usize {
        let offset = self.next;
        let spec = TensorSpec {
            name,
            shape: shape.to_vec(),
            offset,
        };
        self.next += spec.len();
        self.tensors.push(spec);
        offset
    }
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let d = config.embed_dim;
        let f = config.ff_dim;
        let mut b = Builder {
            tensors: Vec::new(),
            next: 0,
        };
        let context_embed = b.add("embed.context".into(), &[config.context_vocab, d]);
        let action_embed = b.add("embed.action".into(), &[config.vocab_size(), d]);
        let position_embed = b.add("embed.position".into(), &[config.seq_len(), d]);
        let condition_embed = (config.condition_slots > 0).then(|| {
            b.add(
                "embed.condition".into(),
                &[config.condition_slots * config.context_vocab, d],
            )
        });
        let blocks = (0..config.layers)
            .map(|l| {
                let p = |name: &str| format!("layers.{l}.{name}");
                BlockOffsets {
                    ln1_gain: b.add(p("ln1.gain"), &[d]),
                    ln1_bias: b.add(p("ln1.bias"), &[d]),
                    wq: b.add(p("attn.wq"), &[d, d]),
                    bq: b.add(p("attn.bq"), &[d]),
                    wk: b.add(p("attn.wk"), &[d, d]),
                    bk: b.add(p("attn.bk"), &[d]),
                    wv: b.add(p("attn.wv"), &[d, d]),
                    bv: b.add(p("attn.bv"), &[d]),
                    wo: b.add(p("attn.wo"), &[d, d]),
                    bo: b.add(p("attn.bo"), &[d]),
                    ln2_gain: b.add(p("ln2.gain"), &[d]),
                    ln2_bias: b.add(p("ln2.bias"), &[d]),
                    w1: b.add(p("ff.w1"), &[d, f]),
                    b1: b.add(p("ff.b1"), &[f]),
                    w2: b.add(p("ff.w2"), &[f, d]),
                    b2: b.add(p("ff.b2"), &[d]),
                }
            })
            .collect();
        let final_gain = b.add("final_ln.gain".into(), &[d]);
        let final_bias = b.add("final_ln.bias".into(), &[d]);
        let head_weight = b.add("head.weight".into(), &[d, config.num_classes]);
        let head_bias = b.add("head.bias".into(), &[config.num_classes]);
        Layout {
            total: b.next,
            tensors: b.tensors,
            context_embed,
            action_embed,
            position_embed,
            condition_embed,
            blocks,
            final_gain,
            final_bias,
            head_weight,
            head_bias,
        }
    }
}
