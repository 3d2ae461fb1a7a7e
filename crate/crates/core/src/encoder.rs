//! Cross-alignment sentence-pair encoder.
//!
//! Pipeline per pair: embedding lookup → fusion gate → shared BiLSTM →
//! dot-product cross attention → enhancement `[x̄; x̃; x̄−x̃; x̄⊙x̃]` →
//! ReLU projection → composition BiLSTM. The result is one feature row per
//! token for each sentence, which the routing layer consumes. The same
//! module also carries the pooling classifier used as the non-routing
//! baseline.

use std::path::Path;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BiLstm, FeedForward, Linear};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::vocab::{Vocabulary, PAD};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    premise: Vec<usize>,
    hypothesis: Vec<usize>,
}

impl SentencePair {
    pub fn new(premise: Vec<usize>, hypothesis: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if premise.is_empty() {
            return Err(Error::Empty("premise"));
        }
        if hypothesis.is_empty() {
            return Err(Error::Empty("hypothesis"));
        }
        if let Some(&bad) = premise.iter().chain(&hypothesis).find(|&&i| i >= vocab_size) {
            return Err(Error::Index {
                index: bad,
                len: vocab_size,
            });
        }
        Ok(SentencePair { premise, hypothesis })
    }

    pub fn premise(&self) -> &[usize] {
        &self.premise
    }

    pub fn hypothesis(&self) -> &[usize] {
        &self.hypothesis
    }

    pub fn swapped(&self) -> SentencePair {
        SentencePair {
            premise: self.hypothesis.clone(),
            hypothesis: self.premise.clone(),
        }
    }
}

/// Per-token features `s_p: [m × d_low]`, `s_h: [n × d_low]`.
#[derive(Clone, Copy, Debug)]
pub struct EncodedPair<'g> {
    pub s_p: Var<'g>,
    pub s_h: Var<'g>,
}

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
}

/// Looks up both sentences in `table`; PAD rows come back as zeros.
pub fn embed<'g>(g: &'g Graph, table: Var<'g>, pair: &SentencePair) -> Result<(Var<'g>, Var<'g>)> {
    let rows = |ids: &[usize]| -> Vec<Option<usize>> { ids.iter().map(|&i| (i != PAD).then_some(i)).collect() };
    Ok((
        g.gather(table, &rows(&pair.premise))?,
        g.gather(table, &rows(&pair.hypothesis))?,
    ))
}

/// `x̄ = g(x)·f(x) + (1 − g(x))·x` with a sigmoid gate and a ReLU transform.
#[derive(Clone, Debug)]
pub struct FusionGate {
    pub gate: Linear,
    pub transform: Linear,
}

impl FusionGate {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, name: &str, dim: usize) -> Result<Self> {
        Ok(FusionGate {
            gate: Linear::new(store, rng, &format!("{name}.gate"), dim, dim)?,
            transform: Linear::new(store, rng, &format!("{name}.transform"), dim, dim)?,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>, dropout: f64) -> Result<Var<'g>> {
        let xin = g.dropout(x, dropout);
        let gate = self.gate.forward(g, store, xin)?.sigmoid()?;
        let f = self.transform.forward(g, store, xin)?.relu()?;
        let carry = gate.affine(-1.0, 1.0)?.mul(x)?;
        gate.mul(f)?.add(carry)
    }
}

/// Soft alignments between the two sentences.
#[derive(Clone, Copy, Debug)]
pub struct Alignment<'g> {
    /// `x̃^P`, premise rows attended over the hypothesis.
    pub premise: Var<'g>,
    /// `x̃^H`, hypothesis rows attended over the premise.
    pub hypothesis: Var<'g>,
    /// `[m × n]`, rows sum to one.
    pub premise_attention: Var<'g>,
    /// `[n × m]`, rows sum to one.
    pub hypothesis_attention: Var<'g>,
}

/// Dot-product cross attention with `e_ij = x_p_i · x_h_j`.
pub fn cross_align<'g>(x_p: Var<'g>, x_h: Var<'g>) -> Result<Alignment<'g>> {
    let (dp, dh) = (x_p.shape()[1], x_h.shape()[1]);
    if dp != dh {
        return Err(Error::Shape {
            op: "cross_align",
            left: x_p.shape(),
            right: x_h.shape(),
        });
    }
    let e = x_p.matmul(x_h.transpose()?)?;
    let premise_attention = e.softmax(1)?;
    let hypothesis_attention = e.transpose()?.softmax(1)?;
    Ok(Alignment {
        premise: premise_attention.matmul(x_h)?,
        hypothesis: hypothesis_attention.matmul(x_p)?,
        premise_attention,
        hypothesis_attention,
    })
}

/// `[x̄; x̃; x̄ − x̃; x̄ ⊙ x̃]` per token.
pub fn enhance<'g>(bar: Var<'g>, tilde: Var<'g>) -> Result<Var<'g>> {
    let g = bar.graph();
    g.concat_cols(&[bar, tilde, bar.sub(tilde)?, bar.mul(tilde)?])
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub embedding: ParamId,
    pub fusion: FusionGate,
    pub context: BiLstm,
    pub projection: Linear,
    pub composition: BiLstm,
    pub dropout: f64,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, cfg: &EncoderConfig) -> Result<Self> {
        let a = 3f64.sqrt();
        let mut table = rng.uniform_tensor(&[cfg.vocab_size, cfg.embedding_dim], -a, a);
        table.data_mut()[..cfg.embedding_dim].fill(0.0);
        let embedding = store.add("encoder.embedding", table)?;
        let fusion = FusionGate::new(store, rng, "encoder.fusion", cfg.embedding_dim)?;
        let context = BiLstm::new(store, rng, "encoder.context", cfg.embedding_dim, cfg.hidden)?;
        let d = context.output_dim();
        let projection = Linear::new(store, rng, "encoder.projection", 4 * d, cfg.hidden)?;
        let composition = BiLstm::new(store, rng, "encoder.composition", cfg.hidden, cfg.hidden)?;
        Ok(Encoder {
            embedding,
            fusion,
            context,
            projection,
            composition,
            dropout: cfg.dropout,
        })
    }

    /// Feature width of the encoder output (`2 × hidden`).
    pub fn output_dim(&self) -> usize {
        self.composition.output_dim()
    }

    pub fn context_encode<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        self.context.forward(g, store, g.dropout(x, self.dropout))
    }

    pub fn compose<'g>(&self, g: &'g Graph, store: &ParamStore, m: Var<'g>) -> Result<Var<'g>> {
        let projected = self
            .projection
            .forward(g, store, g.dropout(m, self.dropout))?
            .relu()?;
        self.composition.forward(g, store, g.dropout(projected, self.dropout))
    }

    pub fn encode_pair<'g>(&self, g: &'g Graph, store: &ParamStore, pair: &SentencePair) -> Result<EncodedPair<'g>> {
        let table = g.param(store, self.embedding);
        let (e_p, e_h) = embed(g, table, pair)?;
        let x_p = self.fusion.forward(g, store, e_p, self.dropout)?;
        let x_h = self.fusion.forward(g, store, e_h, self.dropout)?;
        let bar_p = self.context_encode(g, store, x_p)?;
        let bar_h = self.context_encode(g, store, x_h)?;
        let aligned = cross_align(bar_p, bar_h)?;
        let m_p = enhance(bar_p, aligned.premise)?;
        let m_h = enhance(bar_h, aligned.hypothesis)?;
        Ok(EncodedPair {
            s_p: self.compose(g, store, m_p)?,
            s_h: self.compose(g, store, m_h)?,
        })
    }
}

/// Max- and mean-pooling classifier over the encoded pair.
#[derive(Clone, Debug)]
pub struct BaselineHead {
    pub mlp: FeedForward,
    /// Label embeddings as columns, `[hidden × 3]`.
    pub labels: ParamId,
}

impl BaselineHead {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, d_low: usize, hidden: usize) -> Result<Self> {
        Ok(BaselineHead {
            mlp: FeedForward::new(store, rng, "baseline.mlp", 4 * d_low, hidden, hidden)?,
            labels: store.add("baseline.label_embedding", rng.xavier(hidden, 3))?,
        })
    }

    /// Logits `E_lᵀ v` with `v = f([max_p; avg_p; max_h; avg_h])`, shape `[1 × 3]`.
    pub fn logits<'g>(&self, g: &'g Graph, store: &ParamStore, enc: &EncodedPair<'g>, dropout: f64) -> Result<Var<'g>> {
        let pooled = g.concat_cols(&[
            enc.s_p.max_rows()?,
            enc.s_p.mean_rows()?,
            enc.s_h.max_rows()?,
            enc.s_h.mean_rows()?,
        ])?;
        let v = self.mlp.forward(g, store, pooled, dropout)?;
        v.matmul(g.param(store, self.labels))
    }
}

/// Fills embedding rows from a whitespace-separated text file
/// (`token v1 … ve` per line). Tokens absent from `vocab` are skipped.
/// Returns the number of rows replaced.
pub fn load_pretrained(path: &Path, vocab: &Vocabulary, store: &mut ParamStore, table: ParamId, freeze: bool) -> Result<usize> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dim = store.value(table).cols();
    let mut replaced = 0;
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e: std::num::ParseFloatError| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        if values.len() != dim {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        if let Some(id) = vocab.get(token).filter(|&id| id != PAD) {
            let t = &mut store.get_mut(table).value;
            t.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
            replaced += 1;
        }
    }
    if !store.value(table).is_finite() {
        return Err(Error::NonFinite { op: "load_pretrained" });
    }
    store.set_trainable(table, !freeze);
    Ok(replaced)
}

/// Convenience for tests and tools: an embedding table as a plain tensor.
pub fn embedding_rows(store: &ParamStore, table: ParamId, ids: &[usize]) -> Tensor {
    let t = store.value(table);
    let d = t.cols();
    let mut out = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        out.extend_from_slice(t.row_slice(i));
    }
    Tensor::raw(vec![ids.len(), d], out)
}
