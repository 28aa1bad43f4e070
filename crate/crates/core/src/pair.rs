//! The encoder/reranker pair, its checkpoint format and single-pass reranking.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::TransformerConfig;
use crate::reranker::{stable_argsort_desc, Fusion, Prompt, RerankerConfig, RerankerModel, GENERATED_TOKENS};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"EMBRCKPT";

/// Shared architecture settings for both models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub encoder_max_len: usize,
    pub reranker_max_len: usize,
    pub norm_eps: f64,
    pub init_std: f64,
    pub normalize_embeddings: bool,
    pub append_eos: bool,
    pub positional_at_passages: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            encoder_max_len: 64,
            reranker_max_len: 160,
            norm_eps: 1e-6,
            init_std: 0.02,
            normalize_embeddings: false,
            append_eos: true,
            positional_at_passages: true,
        }
    }
}

impl ModelConfig {
    fn transformer(&self, vocab_size: usize, max_len: usize) -> TransformerConfig {
        TransformerConfig {
            vocab_size,
            dim: self.dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            max_len,
            norm_eps: self.norm_eps,
            init_std: self.init_std,
        }
    }

    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            transformer: self.transformer(vocab_size, self.encoder_max_len),
            normalize_output: self.normalize_embeddings,
            append_eos: self.append_eos,
        }
    }

    pub fn reranker(&self, vocab_size: usize, fusion: Fusion) -> RerankerConfig {
        RerankerConfig {
            transformer: self.transformer(vocab_size, self.reranker_max_len),
            fusion,
            positional_at_passages: self.positional_at_passages,
        }
    }
}

/// Counters measured on one reranking call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankStats {
    /// Distinct candidate passages ranked.
    pub passages: u64,
    /// Passage slots fed through the reranker, summed over forward passes.
    pub processed_passage_tokens: u64,
    pub generated_tokens: u64,
    pub forward_passes: u64,
}

impl RerankStats {
    pub fn merge(&mut self, other: &RerankStats) {
        self.processed_passage_tokens += other.processed_passage_tokens;
        self.generated_tokens += other.generated_tokens;
        self.forward_passes += other.forward_passes;
    }
}

/// Values produced by one single-pass reranking call.
#[derive(Debug, Clone)]
pub struct RerankOutput {
    pub embeddings: Vec<Tensor>,
    pub hidden: Vec<Tensor>,
    pub fused: Vec<Tensor>,
    pub h_eos: Tensor,
    pub scores: Vec<f64>,
    pub permutation: Vec<usize>,
    pub stats: RerankStats,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairMeta {
    encoder: EncoderConfig,
    reranker: RerankerConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    pub encoder: EncoderModel,
    pub reranker: RerankerModel,
}

impl ModelPair {
    /// Deterministic initialisation from `seed`.
    pub fn new(cfg: &ModelConfig, vocab_size: usize, fusion: Fusion, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderModel::new(cfg.encoder(vocab_size), &mut rng)?;
        let reranker = RerankerModel::new(cfg.reranker(vocab_size, fusion), &mut rng)?;
        Self::from_parts(encoder, reranker)
    }

    pub fn from_parts(encoder: EncoderModel, reranker: RerankerModel) -> Result<Self> {
        if encoder.dim() != reranker.config().transformer.dim {
            return Err(Error::Config(format!(
                "encoder dim {} differs from reranker dim {}",
                encoder.dim(),
                reranker.config().transformer.dim
            )));
        }
        Ok(Self { encoder, reranker })
    }

    pub fn encoder_checksum(&self) -> String {
        let names = self.encoder.net().param_names();
        checkpoint::checksum(names.iter().map(String::as_str).zip(self.encoder.net().params()))
    }

    pub fn reranker_checksum(&self) -> String {
        let names = self.reranker.net().param_names();
        checkpoint::checksum(names.iter().map(String::as_str).zip(self.reranker.net().params()))
    }

    /// Encode every candidate, then one reranker pass over all of them.
    pub fn rerank(&self, prompt: &Prompt, docs: &[&[usize]]) -> Result<RerankOutput> {
        if docs.is_empty() {
            return Err(Error::InvalidArgument("nothing to rerank".into()));
        }
        let mut g = Graph::new();
        let enc = self.encoder.bind(&mut g, false);
        let rer = self.reranker.bind(&mut g, false);
        let embeddings = docs
            .iter()
            .enumerate()
            .map(|(i, d)| enc.encode(&mut g, d).map_err(|e| Error::InvalidArgument(format!("document {i}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let out = rer.forward(&mut g, prompt, &embeddings)?;
        let scores: Vec<f64> = out.scores.iter().map(|s| g.value(*s).item()).collect();
        let permutation = stable_argsort_desc(&scores);
        let take = |vs: &[crate::graph::Var]| vs.iter().map(|v| g.value(*v).clone()).collect::<Vec<_>>();
        Ok(RerankOutput {
            embeddings: take(&embeddings),
            hidden: take(&out.hidden),
            fused: take(&out.fused),
            h_eos: g.value(out.h_eos).clone(),
            stats: RerankStats {
                passages: docs.len() as u64,
                processed_passage_tokens: out.input.passage_positions.len() as u64,
                generated_tokens: GENERATED_TOKENS,
                forward_passes: 1,
            },
            scores,
            permutation,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&PairMeta {
            encoder: self.encoder.config().clone(),
            reranker: self.reranker.config().clone(),
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        let mut named = Vec::new();
        for (n, t) in self.encoder.net().param_names().into_iter().zip(self.encoder.net().params()) {
            named.push((format!("encoder.{n}"), t));
        }
        for (n, t) in self.reranker.net().param_names().into_iter().zip(self.reranker.net().params()) {
            named.push((format!("reranker.{n}"), t));
        }
        checkpoint::write(path, MAGIC, &meta, &named)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = checkpoint::read(path, MAGIC)?;
        let meta: PairMeta = serde_json::from_str(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut encoder = EncoderModel::new(meta.encoder, &mut rng)?;
        let mut reranker = RerankerModel::new(meta.reranker, &mut rng)?;
        let (mut enc_t, mut rer_t) = (Vec::new(), Vec::new());
        let enc_names = encoder.net().param_names();
        let rer_names = reranker.net().param_names();
        for (name, t) in tensors {
            if let Some(n) = name.strip_prefix("encoder.") {
                if enc_names.get(enc_t.len()).map(String::as_str) != Some(n) {
                    return Err(Error::Format(format!("unexpected tensor {name}")));
                }
                enc_t.push(t);
            } else if let Some(n) = name.strip_prefix("reranker.") {
                if rer_names.get(rer_t.len()).map(String::as_str) != Some(n) {
                    return Err(Error::Format(format!("unexpected tensor {name}")));
                }
                rer_t.push(t);
            } else {
                return Err(Error::Format(format!("unexpected tensor {name}")));
            }
        }
        encoder.net_mut().load_params(enc_t)?;
        reranker.net_mut().load_params(rer_t)?;
        Self::from_parts(encoder, reranker)
    }
}
