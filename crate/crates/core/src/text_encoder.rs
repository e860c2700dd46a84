//! Query encoder: whitespace tokens over a closed vocabulary, sinusoidal
//! positions, post-norm transformer layers, and the `<ENC>` slot as the
//! sentence embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normal, ParamId, ParamSet, Session};
use crate::tensor::{Element, Tensor, Var};

pub const ENC: usize = 0;
pub const UNK: usize = 1;
pub const PAD: usize = 2;

const LN_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

const GRAMMAR_WORDS: [&str; 13] = [
    "the", "all", "red", "green", "blue", "circle", "circles", "square", "squares", "triangle",
    "triangles", "shape", "shapes",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut tokens: Vec<String> = ["<ENC>", "<UNK>", "<PAD>"].map(String::from).to_vec();
        tokens.extend(GRAMMAR_WORDS.iter().map(|w| w.to_string()));
        Vocabulary { tokens }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Case-insensitive lookup; unknown words map to `<UNK>`.
    pub fn id(&self, word: &str) -> usize {
        let w = word.to_lowercase();
        self.tokens.iter().position(|t| *t == w).unwrap_or(UNK)
    }
}

/// Token ids starting with `<ENC>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Right-pad to `len` with `<PAD>`; returns the ids and the key mask
    /// (true for real tokens).
    pub fn padded(&self, len: usize) -> (Vec<usize>, Vec<bool>) {
        let mut ids = self.ids.clone();
        let mut mask = vec![true; ids.len()];
        ids.resize(len.max(ids.len()), PAD);
        mask.resize(ids.len(), false);
        (ids, mask)
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let mut ids = vec![ENC];
    ids.extend(text.split_whitespace().map(|w| vocab.id(w)));
    ids.truncate(max_len.max(1));
    TokenSequence { ids }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            embed_dim: 64,
            heads: 2,
            layers: 1,
            ffn_dim: 128,
            max_len: 8,
        }
    }
}

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(...)`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * dim];
    for p in 0..len {
        for i in 0..dim {
            let freq = 10000f64.powf((i - i % 2) as f64 / dim as f64);
            let angle = p as f64 / freq;
            pe[p * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn new<T: Element, R: Rng + ?Sized>(
        name: &str,
        din: usize,
        dout: usize,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: params.add(
                format!("{name}.weight"),
                normal(rng, &[din, dout], (1.0 / din as f64).sqrt()),
                true,
            ),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(vec![dout]), false),
        }
    }

    fn apply<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        s.graph.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    fn new<T: Element>(name: &str, dim: usize, params: &mut ParamSet<T>) -> Self {
        LayerNorm {
            gamma: params.add(format!("{name}.gamma"), Tensor::full(vec![dim], T::one()), false),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(vec![dim]), false),
        }
    }

    fn apply<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        s.graph.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm1: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    norm2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    cfg: TextEncoderConfig,
    vocab_size: usize,
    embedding: ParamId,
    layers: Vec<EncoderLayer>,
}

impl TextEncoder {
    pub fn new<T: Element, R: Rng + ?Sized>(
        cfg: &TextEncoderConfig,
        vocab_size: usize,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.embed_dim;
        if cfg.heads == 0 || !d.is_multiple_of(cfg.heads) {
            return Err(Error::InvalidArgument(format!(
                "text width {d} is not divisible by {} heads",
                cfg.heads
            )));
        }
        let embedding = params.add("text.embedding", normal(rng, &[vocab_size, d], 1.0), true);
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("text.layer{i}");
                EncoderLayer {
                    q: Linear::new(&format!("{p}.q"), d, d, params, rng),
                    k: Linear::new(&format!("{p}.k"), d, d, params, rng),
                    v: Linear::new(&format!("{p}.v"), d, d, params, rng),
                    out: Linear::new(&format!("{p}.out"), d, d, params, rng),
                    norm1: LayerNorm::new(&format!("{p}.norm1"), d, params),
                    ffn1: Linear::new(&format!("{p}.ffn1"), d, cfg.ffn_dim, params, rng),
                    ffn2: Linear::new(&format!("{p}.ffn2"), cfg.ffn_dim, d, params, rng),
                    norm2: LayerNorm::new(&format!("{p}.norm2"), d, params),
                }
            })
            .collect();
        Ok(TextEncoder {
            cfg: cfg.clone(),
            vocab_size,
            embedding,
            layers,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    /// Hidden states `[L, d_t]` after every layer. `key_mask[j] == false`
    /// hides position `j` from attention.
    pub fn hidden_states<T: Element>(
        &self,
        s: &mut Session<'_, T>,
        ids: &[usize],
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside a vocabulary of {}",
                self.vocab_size
            )));
        }
        let d = self.cfg.embed_dim;
        let table = s.param(self.embedding);
        let emb = s.graph.gather_rows(table, ids)?;
        let pe = s.input(Tensor::from_f64(vec![ids.len(), d], &sinusoidal_positions(ids.len(), d))?);
        let mut x = s.graph.add(emb, pe)?;
        for layer in &self.layers {
            let q = layer.q.apply(s, x)?;
            let k = layer.k.apply(s, x)?;
            let v = layer.v.apply(s, x)?;
            let attn = s.graph.attention(q, k, v, self.cfg.heads, key_mask)?;
            let attn = layer.out.apply(s, attn)?;
            let x1 = s.graph.add(x, attn)?;
            let x1 = layer.norm1.apply(s, x1)?;
            let h = layer.ffn1.apply(s, x1)?;
            let h = s.graph.relu(h);
            let h = layer.ffn2.apply(s, h)?;
            let x2 = s.graph.add(x1, h)?;
            x = layer.norm2.apply(s, x2)?;
        }
        Ok(x)
    }

    /// `[1, d_t]` unit-norm embedding taken from the `<ENC>` position.
    pub fn encode<T: Element>(&self, s: &mut Session<'_, T>, tokens: &TokenSequence) -> Result<Var> {
        self.encode_masked(s, tokens.ids(), None)
    }

    pub fn encode_masked<T: Element>(
        &self,
        s: &mut Session<'_, T>,
        ids: &[usize],
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let h = self.hidden_states(s, ids, key_mask)?;
        let enc = s.graph.gather_rows(h, &[0])?;
        Ok(s.graph.l2_normalize(enc, L2_EPS))
    }
}
