//! Small post-norm transformer encoder that stands in for a pretrained
//! language model. Adapters and the fusion layer hook into it through the
//! [`Attachment`] trait, which may replace the output of every block.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Array4, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::compute::{
    dropout, normal_init, xavier_init, Graph, Mode, ParamId, ParamStore, RngSeed, Var,
};
use crate::error::{DamError, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_ID: usize = 2;
pub const CLS_TOKEN: &str = "[CLS]";
const RESERVED: [&str; 3] = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN];
pub const ENCODER_GROUP: &str = "encoder";

const LN_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub dropout_p: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 2000,
            hidden_dim: 64,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 128,
            max_seq_len: 32,
            dropout_p: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(DamError::Config(format!("encoder.{name} must be positive")));
            }
        }
        if self.vocab_size <= CLS_ID {
            return Err(DamError::Config("encoder.vocab_size must leave room for reserved ids".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(DamError::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(DamError::Config(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// Token inventory with reserved padding, unknown and pooling entries at
/// ids 0, 1 and 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(DamError::Data(format!(
                "vocabulary must start with {PAD_TOKEN}, {UNK_TOKEN} and {CLS_TOKEN}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(DamError::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Builds a vocabulary from whitespace-tokenized, lowercased texts. The
    /// most frequent words are kept, ties broken alphabetically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in t.split_whitespace() {
                *counts.entry(w.to_lowercase()).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|t| t.to_string()).collect();
        tokens.extend(
            words
                .into_iter()
                .take(max_size.saturating_sub(RESERVED.len()))
                .map(|(w, _)| w),
        );
        Vocab::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| DamError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| DamError::io(path, e))?;
        Vocab::from_tokens(s.lines().map(str::to_string).collect())
    }
}

/// `[CLS]` followed by the lowercased whitespace tokens, padded or truncated
/// to `max_seq_len`.
pub fn tokenize(text: &str, vocab: &Vocab, max_seq_len: usize) -> Vec<usize> {
    let mut ids = vec![CLS_ID];
    ids.extend(
        text.split_whitespace()
            .take(max_seq_len.saturating_sub(1))
            .map(|w| vocab.id(&w.to_lowercase())),
    );
    if ids.len() == 1 {
        log::warn!("empty text tokenized to the pooling token only");
    }
    ids.truncate(max_seq_len);
    ids.resize(max_seq_len, PAD_ID);
    ids
}

/// Flattened token ids with per-example valid lengths. Padding is trimmed to
/// the longest example in the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    pub lens: Vec<usize>,
}

impl TokenBatch {
    /// From token sequences and binary masks. Masks must be a prefix of ones.
    pub fn new(tokens: &[Vec<usize>], masks: &[Vec<u8>]) -> Result<Self> {
        if tokens.is_empty() {
            return Err(DamError::Input("empty batch".into()));
        }
        if tokens.len() != masks.len() {
            return Err(DamError::Input(format!(
                "{} sequences but {} masks",
                tokens.len(),
                masks.len()
            )));
        }
        let mut lens = Vec::with_capacity(tokens.len());
        for (i, (t, m)) in tokens.iter().zip(masks).enumerate() {
            if t.len() != m.len() {
                return Err(DamError::Input(format!("mask length differs from sequence {i}")));
            }
            let len = m.iter().take_while(|&&x| x == 1).count();
            if m[len..].iter().any(|&x| x != 0) {
                return Err(DamError::Input(format!(
                    "mask of sequence {i} is not a contiguous prefix"
                )));
            }
            lens.push(len);
        }
        let seq = lens.iter().copied().max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(tokens.len() * seq);
        for t in tokens {
            let mut row: Vec<usize> = t.iter().copied().take(seq).collect();
            row.resize(seq, PAD_ID);
            ids.extend(row);
        }
        Ok(TokenBatch {
            ids,
            batch: tokens.len(),
            seq,
            lens,
        })
    }

    /// From padded sequences, masking every trailing pad.
    pub fn from_padded(tokens: &[Vec<usize>]) -> Result<Self> {
        let masks: Vec<Vec<u8>> = tokens
            .iter()
            .map(|t| {
                let len = t.len() - t.iter().rev().take_while(|&&x| x == PAD_ID).count();
                (0..t.len()).map(|i| u8::from(i < len)).collect()
            })
            .collect();
        Self::new(tokens, &masks)
    }

    pub fn first_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.seq).collect()
    }
}

/// Shape of the flattened stream seen by attachments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamShape {
    pub batch: usize,
    pub seq: usize,
}

/// Hook that may replace the output `u` of each transformer block.
pub trait Attachment {
    fn attach(
        &self,
        g: &mut Graph<f32>,
        store: &ParamStore,
        layer: usize,
        u: Var,
        shape: StreamShape,
        mode: &mut Mode<'_>,
    ) -> Result<Var>;
}

/// Output of a differentiable encoding: per-layer streams and the pooled
/// first-position vector `z`.
#[derive(Clone, Debug)]
pub struct EncodedVars {
    pub hidden: Vec<Var>,
    pub pooled: Var,
    pub shape: StreamShape,
}

/// Materialized encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    /// One `(batch * seq, hidden)` matrix per layer.
    pub hidden_states: Vec<Array2<f32>>,
    pub pooled: Array2<f32>,
    pub batch: usize,
    pub seq: usize,
}

impl EncodedBatch {
    pub fn from_vars(g: &Graph<f32>, vars: &EncodedVars) -> Self {
        EncodedBatch {
            hidden_states: vars.hidden.iter().map(|&v| g.value(v).clone()).collect(),
            pooled: g.value(vars.pooled).clone(),
            batch: vars.shape.batch,
            seq: vars.shape.seq,
        }
    }

    /// `(num_layers, batch, seq, hidden)` view of the hidden states.
    pub fn stacked(&self) -> Array4<f32> {
        let hidden = self.pooled.ncols();
        let mut out = Array4::zeros((self.hidden_states.len(), self.batch, self.seq, hidden));
        for (l, h) in self.hidden_states.iter().enumerate() {
            for b in 0..self.batch {
                for s in 0..self.seq {
                    out.slice_mut(ndarray::s![l, b, s, ..])
                        .assign(&h.row(b * self.seq + s));
                }
            }
        }
        out
    }

    pub fn hidden_state(&self, layer: usize, example: usize, position: usize) -> ArrayView1<'_, f32> {
        self.hidden_states[layer].row(example * self.seq + position)
    }
}

#[derive(Clone, Debug)]
struct BlockParams {
    q_w: ParamId,
    q_b: ParamId,
    k_w: ParamId,
    k_b: ParamId,
    v_w: ParamId,
    v_b: ParamId,
    o_w: ParamId,
    o_b: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ffn1_w: ParamId,
    ffn1_b: ParamId,
    ffn2_w: ParamId,
    ffn2_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Handles to the encoder's parameters, all in the `encoder` group.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    word_emb: ParamId,
    pos_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    blocks: Vec<BlockParams>,
}

impl Encoder {
    /// Registers freshly initialized encoder weights in `store`. The group
    /// starts frozen.
    pub fn new(config: EncoderConfig, store: &mut ParamStore, seed: RngSeed) -> Result<Self> {
        config.validate()?;
        let mut rng = seed.derive("encoder").rng();
        let gi = store.add_group(ENCODER_GROUP)?;
        let h = config.hidden_dim;
        let f = config.ffn_dim;
        let word_emb = store.add(gi, "embeddings.word", normal_init(config.vocab_size, h, 1.0, &mut rng));
        let pos_emb = store.add(
            gi,
            "embeddings.position",
            normal_init(config.max_seq_len, h, 0.1, &mut rng),
        );
        let emb_ln_g = store.add(gi, "embeddings.ln.gamma", Array2::ones((1, h)));
        let emb_ln_b = store.add(gi, "embeddings.ln.beta", Array2::zeros((1, h)));
        let mut blocks = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let mut lin = |name: &str, fan_in: usize, fan_out: usize| {
                let w = store.add(gi, &format!("layer{l}.{name}.weight"), xavier_init(fan_in, fan_out, &mut rng));
                let b = store.add(gi, &format!("layer{l}.{name}.bias"), Array2::zeros((1, fan_out)));
                (w, b)
            };
            let (q_w, q_b) = lin("attn.query", h, h);
            let (k_w, k_b) = lin("attn.key", h, h);
            let (v_w, v_b) = lin("attn.value", h, h);
            let (o_w, o_b) = lin("attn.output", h, h);
            let (ffn1_w, ffn1_b) = lin("ffn.intermediate", h, f);
            let (ffn2_w, ffn2_b) = lin("ffn.output", f, h);
            let ln1_g = store.add(gi, &format!("layer{l}.ln1.gamma"), Array2::ones((1, h)));
            let ln1_b = store.add(gi, &format!("layer{l}.ln1.beta"), Array2::zeros((1, h)));
            let ln2_g = store.add(gi, &format!("layer{l}.ln2.gamma"), Array2::ones((1, h)));
            let ln2_b = store.add(gi, &format!("layer{l}.ln2.beta"), Array2::zeros((1, h)));
            blocks.push(BlockParams {
                q_w,
                q_b,
                k_w,
                k_b,
                v_w,
                v_b,
                o_w,
                o_b,
                ln1_g,
                ln1_b,
                ffn1_w,
                ffn1_b,
                ffn2_w,
                ffn2_b,
                ln2_g,
                ln2_b,
            });
        }
        Ok(Encoder {
            config,
            word_emb,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            blocks,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Differentiable forward pass. When an attachment is given, the output
    /// of every block is replaced by the attachment's output before it feeds
    /// the next block.
    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        store: &ParamStore,
        batch: &TokenBatch,
        attachment: Option<&dyn Attachment>,
        mode: &mut Mode<'_>,
    ) -> Result<EncodedVars> {
        let cfg = &self.config;
        if batch.seq > cfg.max_seq_len {
            return Err(DamError::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq, cfg.max_seq_len
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(DamError::Input(format!(
                "token id {bad} outside vocabulary of size {}",
                cfg.vocab_size
            )));
        }
        let shape = StreamShape {
            batch: batch.batch,
            seq: batch.seq,
        };
        let p = |g: &mut Graph<f32>, id: ParamId| g.param(store, id);
        let word = p(g, self.word_emb);
        let pos = p(g, self.pos_emb);
        let tok = g.gather(word, batch.ids.clone())?;
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
        let pe = g.gather(pos, positions)?;
        let x = g.add(tok, pe)?;
        let (lg, lb) = (p(g, self.emb_ln_g), p(g, self.emb_ln_b));
        let x = g.layer_norm(x, lg, lb, LN_EPS)?;
        let mut x = dropout(g, x, cfg.dropout_p, mode);

        let mut hidden = Vec::with_capacity(self.blocks.len());
        for (l, blk) in self.blocks.iter().enumerate() {
            let lin = |g: &mut Graph<f32>, x: Var, w: ParamId, b: ParamId| -> Result<Var> {
                let (w, b) = (g.param(store, w), g.param(store, b));
                g.linear(x, w, Some(b))
            };
            let q = lin(g, x, blk.q_w, blk.q_b)?;
            let k = lin(g, x, blk.k_w, blk.k_b)?;
            let v = lin(g, x, blk.v_w, blk.v_b)?;
            let a = g.self_attention(q, k, v, batch.batch, cfg.num_heads, &batch.lens)?;
            let o = lin(g, a, blk.o_w, blk.o_b)?;
            let o = dropout(g, o, cfg.dropout_p, mode);
            let r = g.add(x, o)?;
            let (g1, b1) = (g.param(store, blk.ln1_g), g.param(store, blk.ln1_b));
            let x1 = g.layer_norm(r, g1, b1, LN_EPS)?;
            let f = lin(g, x1, blk.ffn1_w, blk.ffn1_b)?;
            let f = g.gelu(f);
            let f = lin(g, f, blk.ffn2_w, blk.ffn2_b)?;
            let f = dropout(g, f, cfg.dropout_p, mode);
            let r = g.add(x1, f)?;
            let (g2, b2) = (g.param(store, blk.ln2_g), g.param(store, blk.ln2_b));
            let mut u = g.layer_norm(r, g2, b2, LN_EPS)?;
            if let Some(att) = attachment {
                u = att.attach(g, store, l, u, shape, mode)?;
            }
            hidden.push(u);
            x = u;
        }
        let pooled = g.select_rows(x, batch.first_rows())?;
        Ok(EncodedVars {
            hidden,
            pooled,
            shape,
        })
    }

    /// Evaluation-mode encoding of a batch, materialized.
    pub fn encode(
        &self,
        store: &ParamStore,
        batch: &TokenBatch,
        attachment: Option<&dyn Attachment>,
    ) -> Result<EncodedBatch> {
        let mut g = Graph::new();
        let vars = self.forward(&mut g, store, batch, attachment, &mut Mode::Eval)?;
        Ok(EncodedBatch::from_vars(&g, &vars))
    }
}
