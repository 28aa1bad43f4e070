//! Listwise reranker over injected passage embeddings.
//!
//! Input layout: `[instruction; query; e_1 .. e_n; query anchor; eos]`. The
//! passage slots hold encoder outputs verbatim (plus positions); everything
//! else goes through the token table. After causal contextualization each
//! passage is represented by `h_i + e_i` and scored by its cosine with the
//! hidden state at the eos slot. Nothing is decoded.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{BoundTransformer, Transformer, TransformerConfig};
use crate::tensor::Tensor;

/// Tokens generated by the scoring path. Scoring is a single cosine per
/// passage, so this is zero by construction.
pub const GENERATED_TOKENS: u64 = 0;

/// Which terms make up the fused passage representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fusion {
    /// Add the encoder embedding `e_i`.
    pub residual: bool,
    /// Add the reranker hidden state `h_i`.
    pub hidden_state: bool,
}

impl Default for Fusion {
    fn default() -> Self {
        Self {
            residual: true,
            hidden_state: true,
        }
    }
}

impl Fusion {
    pub fn validate(&self) -> Result<()> {
        if !self.residual && !self.hidden_state {
            return Err(Error::Config(
                "residual and hidden_state cannot both be disabled".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerankerConfig {
    pub transformer: TransformerConfig,
    pub fusion: Fusion,
    /// Add positional embeddings at passage slots too.
    pub positional_at_passages: bool,
}

/// Token ids surrounding the passage slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub instruction: Vec<usize>,
    pub query: Vec<usize>,
    pub anchor: Vec<usize>,
    pub eos: usize,
}

impl Prompt {
    /// The anchor repeats the query.
    pub fn new(vocab: &Vocabulary, query: &[usize]) -> Self {
        Self {
            instruction: vocab.instruction_ids().to_vec(),
            query: query.to_vec(),
            anchor: query.to_vec(),
            eos: vocab.eos_id(),
        }
    }

    pub fn sequence_len(&self, n: usize) -> usize {
        self.instruction.len() + self.query.len() + n + self.anchor.len() + 1
    }
}

/// An assembled reranker input on a graph.
#[derive(Debug, Clone)]
pub struct RerankInput {
    /// `[T, d]` embedded sequence, positions included.
    pub x: Var,
    pub passage_positions: Range<usize>,
    pub eos_position: usize,
    pub n: usize,
}

/// Graph handles produced by one reranker forward pass.
#[derive(Debug, Clone)]
pub struct ScoredList {
    pub input: RerankInput,
    pub hidden: Vec<Var>,
    pub fused: Vec<Var>,
    pub h_eos: Var,
    pub scores: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankerModel {
    config: RerankerConfig,
    net: Transformer,
}

impl RerankerModel {
    pub fn new<R: Rng + ?Sized>(config: RerankerConfig, rng: &mut R) -> Result<Self> {
        config.fusion.validate()?;
        let net = Transformer::new(config.transformer.clone(), rng)?;
        Ok(Self { config, net })
    }

    pub fn config(&self) -> &RerankerConfig {
        &self.config
    }

    pub fn set_fusion(&mut self, fusion: Fusion) -> Result<()> {
        fusion.validate()?;
        self.config.fusion = fusion;
        Ok(())
    }

    pub fn net(&self) -> &Transformer {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Transformer {
        &mut self.net
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundReranker {
        self.wrap(self.net.bind(g, trainable))
    }

    pub fn bind_vars(&self, vars: &[Var]) -> BoundReranker {
        self.wrap(self.net.bind_vars(vars))
    }

    fn wrap(&self, net: BoundTransformer) -> BoundReranker {
        BoundReranker {
            net,
            fusion: self.config.fusion,
            positional_at_passages: self.config.positional_at_passages,
        }
    }
}

/// Combines the contextualized state and the encoder embedding.
pub fn fuse_residual(g: &mut Graph, hidden: Var, embedding: Var, fusion: Fusion) -> Result<Var> {
    fusion.validate()?;
    match (fusion.hidden_state, fusion.residual) {
        (true, true) => g.add(hidden, embedding),
        (true, false) => Ok(hidden),
        (false, true) => {
            if g.shape(hidden) != g.shape(embedding) {
                return Err(Error::shape(
                    "fuse_residual",
                    format!("{:?} vs {:?}", g.shape(hidden), g.shape(embedding)),
                ));
            }
            Ok(embedding)
        }
        (false, false) => unreachable!(),
    }
}

/// Cosine of each fused representation against the eos state.
pub fn score(g: &mut Graph, h_eos: Var, fused: &[Var]) -> Result<Vec<Var>> {
    fused.iter().map(|r| g.cosine_sim(h_eos, *r)).collect()
}

/// Indices sorted by score descending; ties keep input order.
pub fn stable_argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// A reranker whose parameters live on a graph.
#[derive(Debug, Clone)]
pub struct BoundReranker {
    net: BoundTransformer,
    fusion: Fusion,
    positional_at_passages: bool,
}

impl BoundReranker {
    pub fn params(&self) -> Vec<Var> {
        self.net.vars()
    }

    pub fn fusion(&self) -> Fusion {
        self.fusion
    }

    /// Builds the embedded input sequence around the passage embeddings.
    pub fn assemble_input(&self, g: &mut Graph, prompt: &Prompt, passages: &[Var]) -> Result<RerankInput> {
        let n = passages.len();
        if n == 0 {
            return Err(Error::InvalidArgument("at least one passage is required".into()));
        }
        let d = self.net.dim();
        for (i, p) in passages.iter().enumerate() {
            if g.value(*p).len() != d {
                return Err(Error::shape(
                    "assemble_input",
                    format!("passage {i} has shape {:?}, expected [{d}]", g.shape(*p)),
                ));
            }
        }
        let total = prompt.sequence_len(n);
        if total > self.net.max_len() {
            return Err(Error::InvalidArgument(format!(
                "{n} passages need {total} positions, reranker budget is {}",
                self.net.max_len()
            )));
        }

        let head: Vec<usize> = prompt.instruction.iter().chain(&prompt.query).copied().collect();
        let tail: Vec<usize> = prompt.anchor.iter().copied().chain([prompt.eos]).collect();
        let mut parts = Vec::with_capacity(n + 2);
        if !head.is_empty() {
            parts.push(self.net.embed_tokens(g, &head)?);
        }
        for p in passages {
            parts.push(g.reshape(*p, vec![1, d])?);
        }
        parts.push(self.net.embed_tokens(g, &tail)?);
        let seq = g.concat_rows(&parts)?;

        let start = head.len();
        let mut pos = self.net.positions(g, 0, total)?;
        if !self.positional_at_passages {
            let mut keep = Tensor::full(&[total, d], 1.0);
            keep.data_mut()[start * d..(start + n) * d].fill(0.0);
            let keep = g.constant(keep);
            pos = g.mul(pos, keep)?;
        }
        let x = g.add(seq, pos)?;
        Ok(RerankInput {
            x,
            passage_positions: start..start + n,
            eos_position: total - 1,
            n,
        })
    }

    /// Final-layer hidden states `[T, d]` under causal attention.
    pub fn contextualize(&self, g: &mut Graph, input: &RerankInput) -> Result<Var> {
        self.net.forward_embedded(g, input.x)
    }

    /// Assemble, contextualize, fuse and score.
    pub fn forward(&self, g: &mut Graph, prompt: &Prompt, passages: &[Var]) -> Result<ScoredList> {
        let input = self.assemble_input(g, prompt, passages)?;
        let h = self.contextualize(g, &input)?;
        let h_eos = g.row(h, input.eos_position)?;
        let mut hidden = Vec::with_capacity(input.n);
        let mut fused = Vec::with_capacity(input.n);
        for (slot, e) in input.passage_positions.clone().zip(passages) {
            let hp = g.row(h, slot)?;
            hidden.push(hp);
            fused.push(fuse_residual(g, hp, *e, self.fusion)?);
        }
        let scores = score(g, h_eos, &fused)?;
        Ok(ScoredList {
            input,
            hidden,
            fused,
            h_eos,
            scores,
        })
    }
}
