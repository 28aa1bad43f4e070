//! Pre-norm causal transformer shared by the encoder and the reranker.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Positional table size; the longest sequence the model accepts.
    pub max_len: usize,
    pub norm_eps: f64,
    /// Standard deviation of token and positional embedding initialisation.
    pub init_std: f64,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.dim == 0 || self.max_len == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("transformer sizes must be positive".into()));
        }
        if self.n_heads == 0 || !self.dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by n_heads {}",
                self.dim, self.n_heads
            )));
        }
        if self.norm_eps <= 0.0 || self.init_std <= 0.0 {
            return Err(Error::Config("norm_eps and init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    attn_norm: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ffn_norm: Tensor,
    w_gate: Tensor,
    w_up: Tensor,
    w_down: Tensor,
}

const LAYER_PARAMS: [&str; 9] = [
    "attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down",
];

impl Layer {
    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// Weights of a decoder-only transformer with learned absolute positions,
/// RMS-normalised pre-norm blocks and a SwiGLU feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    config: TransformerConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    layers: Vec<Layer>,
    final_norm: Tensor,
}

impl Transformer {
    pub fn new<R: Rng + ?Sized>(config: TransformerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let f = config.ffn_dim;
        let proj = 1.0 / (d as f64).sqrt();
        let out_scale = 1.0 / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let tok_emb = Tensor::randn(&[config.vocab_size, d], config.init_std, rng);
        let pos_emb = Tensor::randn(&[config.max_len, d], config.init_std, rng);
        let layers = (0..config.n_layers)
            .map(|_| Layer {
                attn_norm: Tensor::full(&[d], 1.0),
                wq: Tensor::randn(&[d, d], proj, rng),
                wk: Tensor::randn(&[d, d], proj, rng),
                wv: Tensor::randn(&[d, d], proj, rng),
                wo: Tensor::randn(&[d, d], proj * out_scale, rng),
                ffn_norm: Tensor::full(&[d], 1.0),
                w_gate: Tensor::randn(&[d, f], proj, rng),
                w_up: Tensor::randn(&[d, f], proj, rng),
                w_down: Tensor::randn(&[f, d], out_scale / (f as f64).sqrt(), rng),
            })
            .collect();
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            final_norm: Tensor::full(&[d], 1.0),
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    /// Parameter names in binding order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for i in 0..self.layers.len() {
            names.extend(LAYER_PARAMS.iter().map(|p| format!("layers.{i}.{p}")));
        }
        names.push("final_norm".to_string());
        names
    }

    /// All parameters in binding order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.push(&self.final_norm);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Replaces all parameters; shapes must match the current ones.
    pub fn load_params(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.iter_mut().zip(&tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter shape {:?} does not match {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            *slot = t;
        }
        Ok(())
    }

    /// Registers every parameter as a leaf on `g`.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> BoundTransformer {
        let vars: Vec<Var> = self.params().into_iter().map(|t| g.leaf(t.clone(), requires_grad)).collect();
        self.bind_vars(&vars)
    }

    /// Builds a bound view from leaves already on a graph, in [`Self::params`] order.
    pub fn bind_vars(&self, vars: &[Var]) -> BoundTransformer {
        assert_eq!(vars.len(), self.params().len(), "parameter count mismatch");
        let layers = vars[2..vars.len() - 1]
            .chunks(LAYER_PARAMS.len())
            .map(|c| BoundLayer {
                attn_norm: c[0],
                wq: c[1],
                wk: c[2],
                wv: c[3],
                wo: c[4],
                ffn_norm: c[5],
                w_gate: c[6],
                w_up: c[7],
                w_down: c[8],
            })
            .collect();
        BoundTransformer {
            tok_emb: vars[0],
            pos_emb: vars[1],
            layers,
            final_norm: vars[vars.len() - 1],
            n_heads: self.config.n_heads,
            head_dim: self.config.head_dim(),
            dim: self.config.dim,
            max_len: self.config.max_len,
            eps: self.config.norm_eps,
        }
    }
}

#[derive(Debug, Clone)]
struct BoundLayer {
    attn_norm: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ffn_norm: Var,
    w_gate: Var,
    w_up: Var,
    w_down: Var,
}

/// A [`Transformer`] whose parameters live on a particular [`Graph`].
#[derive(Debug, Clone)]
pub struct BoundTransformer {
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<BoundLayer>,
    final_norm: Var,
    n_heads: usize,
    head_dim: usize,
    dim: usize,
    max_len: usize,
    eps: f64,
}

impl BoundTransformer {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend([
                l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w_gate, l.w_up, l.w_down,
            ]);
        }
        out.push(self.final_norm);
        out
    }

    /// Token-embedding rows for `ids`, `[len, d]`.
    pub fn embed_tokens(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        g.embedding(self.tok_emb, ids)
    }

    /// Positional rows `start..start + len`, `[len, d]`.
    pub fn positions(&self, g: &mut Graph, start: usize, len: usize) -> Result<Var> {
        if start + len > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} positions exceeds the model budget of {}",
                start + len,
                self.max_len
            )));
        }
        g.slice_rows(self.pos_emb, start, len)
    }

    /// Runs every block and the final norm over an already embedded
    /// sequence `[T, d]`, returning `[T, d]` hidden states.
    pub fn forward_embedded(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            let xn = g.rms_norm(h, layer.attn_norm, self.eps)?;
            let q = g.matmul(xn, layer.wq)?;
            let k = g.matmul(xn, layer.wk)?;
            let v = g.matmul(xn, layer.wv)?;
            let mut heads = Vec::with_capacity(self.n_heads);
            for head in 0..self.n_heads {
                let off = head * self.head_dim;
                let qh = g.slice_cols(q, off, self.head_dim)?;
                let kh = g.slice_cols(k, off, self.head_dim)?;
                let vh = g.slice_cols(v, off, self.head_dim)?;
                heads.push(g.causal_attention(qh, kh, vh)?);
            }
            let att = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let att = g.matmul(att, layer.wo)?;
            h = g.add(h, att)?;

            let hn = g.rms_norm(h, layer.ffn_norm, self.eps)?;
            let gate = g.matmul(hn, layer.w_gate)?;
            let gate = g.silu(gate)?;
            let up = g.matmul(hn, layer.w_up)?;
            let act = g.mul(gate, up)?;
            let down = g.matmul(act, layer.w_down)?;
            h = g.add(h, down)?;
        }
        g.rms_norm(h, self.final_norm, self.eps)
    }

    /// Token embeddings plus positions, then the full stack.
    pub fn forward_tokens(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let tok = self.embed_tokens(g, ids)?;
        let pos = self.positions(g, 0, ids.len())?;
        let x = g.add(tok, pos)?;
        self.forward_embedded(g, x)
    }
}
