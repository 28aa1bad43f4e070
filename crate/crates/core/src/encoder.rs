//! Passage and query encoder: a causal transformer whose hidden state at the
//! final token is the embedding. No projection head follows it.
//!
//! By default an end-of-sequence token is appended before encoding, so the
//! pooled position is always the same summary token rather than whatever
//! word happens to come last.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::EOS_ID;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{BoundTransformer, Transformer, TransformerConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub transformer: TransformerConfig,
    /// Rescale embeddings to unit root-mean-square before use.
    pub normalize_output: bool,
    /// Append the end-of-sequence token before pooling.
    #[serde(default = "default_true")]
    pub append_eos: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    net: Transformer,
}

impl EncoderModel {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let net = Transformer::new(config.transformer.clone(), rng)?;
        Ok(Self { config, net })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.transformer.dim
    }

    pub fn net(&self) -> &Transformer {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Transformer {
        &mut self.net
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundEncoder {
        let net = self.net.bind(g, trainable);
        self.wrap(g, net)
    }

    pub fn bind_vars(&self, g: &mut Graph, vars: &[Var]) -> BoundEncoder {
        let net = self.net.bind_vars(vars);
        self.wrap(g, net)
    }

    fn wrap(&self, g: &mut Graph, net: BoundTransformer) -> BoundEncoder {
        let unit = self
            .config
            .normalize_output
            .then(|| g.constant(Tensor::full(&[self.dim()], 1.0)));
        BoundEncoder {
            net,
            unit,
            eps: self.config.transformer.norm_eps,
            append_eos: self.config.append_eos,
        }
    }

    pub fn encode_passage(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let enc = self.bind(&mut g, false);
        let e = enc.encode(&mut g, tokens)?;
        Ok(g.value(e).clone())
    }

    /// Queries go through the same network and pooling as passages.
    pub fn encode_query(&self, tokens: &[usize]) -> Result<Tensor> {
        self.encode_passage(tokens)
    }

    /// Encodes each passage independently on one shared tape.
    pub fn batch_encode(&self, passages: &[&[usize]]) -> Result<Vec<Tensor>> {
        if passages.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let enc = self.bind(&mut g, false);
        passages
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let e = enc.encode(&mut g, p).map_err(|err| {
                    Error::InvalidArgument(format!("passage {i}: {err}"))
                })?;
                Ok(g.value(e).clone())
            })
            .collect()
    }
}

/// An encoder whose parameters live on a graph.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    net: BoundTransformer,
    unit: Option<Var>,
    eps: f64,
    append_eos: bool,
}

impl BoundEncoder {
    pub fn params(&self) -> Vec<Var> {
        self.net.vars()
    }

    /// Final-position hidden state, shape `[d]`.
    pub fn encode(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("cannot encode an empty token sequence".into()));
        }
        let limit = self.net.max_len() - usize::from(self.append_eos);
        if tokens.len() > limit {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} tokens exceeds encoder limit {limit}",
                tokens.len()
            )));
        }
        let ids: Vec<usize> = if self.append_eos {
            tokens.iter().copied().chain([EOS_ID]).collect()
        } else {
            tokens.to_vec()
        };
        let h = self.net.forward_tokens(g, &ids)?;
        let last = g.row(h, ids.len() - 1)?;
        match self.unit {
            Some(w) => g.rms_norm(last, w, self.eps),
            None => Ok(last),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::vecops;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(normalize: bool) -> EncoderModel {
        model_with(normalize, false)
    }

    fn model_with(normalize: bool, append_eos: bool) -> EncoderModel {
        let cfg = EncoderConfig {
            transformer: TransformerConfig {
                vocab_size: 20,
                dim: 8,
                n_layers: 2,
                n_heads: 2,
                ffn_dim: 16,
                max_len: 12,
                norm_eps: 1e-6,
                init_std: 0.3,
            },
            normalize_output: normalize,
            append_eos,
        };
        EncoderModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    #[test]
    fn fixed_dimension_and_determinism() {
        let m = model(false);
        let a = m.encode_passage(&[3, 4, 5]).unwrap();
        let b = m.encode_passage(&[3, 4, 5]).unwrap();
        assert_eq!(a.shape(), &[8]);
        assert_eq!(a, b);
        assert_eq!(m.encode_passage(&[7]).unwrap().shape(), &[8]);
    }

    #[test]
    fn appended_eos_is_the_pooled_position() {
        let plain = model_with(false, false);
        let with = model_with(false, true);
        assert_eq!(with.encode_passage(&[3, 4]).unwrap(), plain.encode_passage(&[3, 4, EOS_ID]).unwrap());
        assert!(with.encode_passage(&[3; 12]).is_err());
        assert!(with.encode_passage(&[3; 11]).is_ok());
        assert_ne!(with.encode_passage(&[3]).unwrap(), with.encode_passage(&[4]).unwrap());
    }

    #[test]
    fn distinct_single_tokens_differ() {
        let m = model(false);
        assert_ne!(m.encode_passage(&[3]).unwrap(), m.encode_passage(&[4]).unwrap());
    }

    #[test]
    fn rejects_empty_and_overlong() {
        let m = model(false);
        assert!(m.encode_passage(&[]).is_err());
        assert!(m.encode_passage(&[3; 13]).is_err());
        assert!(m.encode_passage(&[3; 12]).is_ok());
    }

    #[test]
    fn query_and_passage_share_the_network() {
        let m = model(false);
        let q = m.encode_query(&[5, 6]).unwrap();
        let p = m.encode_passage(&[5, 6]).unwrap();
        assert!((vecops::cosine(q.data(), p.data()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_matches_single_calls() {
        let m = model(false);
        assert!(m.batch_encode(&[]).unwrap().is_empty());
        let passages: Vec<Vec<usize>> = (0..10).map(|i| (0..=(i % 5)).map(|j| 3 + (i + j) % 15).collect()).collect();
        let refs: Vec<&[usize]> = passages.iter().map(Vec::as_slice).collect();
        let batch = m.batch_encode(&refs).unwrap();
        for (p, b) in refs.iter().zip(&batch) {
            assert_eq!(&m.encode_passage(p).unwrap(), b);
        }
        assert_eq!(m.batch_encode(&refs[..1]).unwrap()[0], batch[0]);
    }

    #[test]
    fn batch_error_names_index() {
        let m = model(false);
        let err = m.batch_encode(&[&[3], &[]]).unwrap_err().to_string();
        assert!(err.contains("passage 1"), "{err}");
    }

    #[test]
    fn normalized_output_has_unit_rms() {
        let m = model(true);
        let e = m.encode_passage(&[3, 9]).unwrap();
        let rms = (e.data().iter().map(|v| v * v).sum::<f64>() / 8.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-5);
    }
}
