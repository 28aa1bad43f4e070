//! Contrastive and pairwise losses, the optimizer and the two-stage schedule
//! that trains encoder and reranker jointly.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::data::{Corpus, Dataset, Query, RankingSample, Vocabulary};
use crate::encoder::BoundEncoder;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::pair::ModelPair;
use crate::reranker::{BoundReranker, Fusion, Prompt};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub lambda: f64,
    pub encoder_loss_enabled: bool,
    pub residual_enabled: bool,
    pub hidden_state_enabled: bool,
    pub encoder_trainable: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau1: 0.05,
            tau2: 0.05,
            lambda: 0.1,
            encoder_loss_enabled: true,
            residual_enabled: true,
            hidden_state_enabled: true,
            encoder_trainable: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > 0.0 && self.tau2 > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        self.fusion().validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn fusion(&self) -> Fusion {
        Fusion {
            residual: self.residual_enabled,
            hidden_state: self.hidden_state_enabled,
        }
    }

    /// Effective weight of the contrastive term.
    pub fn infonce_weight(&self) -> f64 {
        if self.encoder_loss_enabled {
            self.lambda
        } else {
            0.0
        }
    }
}

/// Contrastive loss for one query from precomputed similarities, evaluated
/// as `ln(1 + Σ exp((s⁻ − s⁺) / τ))` so that well-separated cases keep their
/// relative precision.
pub fn infonce_from_similarities(g: &mut Graph, pos: Var, negs: &[Var], tau1: f64) -> Result<Var> {
    let mut logits = vec![g.constant(Tensor::scalar(0.0))];
    for n in negs {
        let d = g.sub(*n, pos)?;
        logits.push(g.scale(d, 1.0 / tau1)?);
    }
    let stacked = g.stack(&logits)?;
    g.logsumexp(stacked)
}

/// One query's contrastive loss over cosine similarities of embeddings.
pub fn infonce_term(g: &mut Graph, query: Var, positive: Var, negatives: &[Var], tau1: f64) -> Result<Var> {
    let pos = g.cosine_sim(query, positive)?;
    let negs = negatives
        .iter()
        .map(|n| g.cosine_sim(query, *n))
        .collect::<Result<Vec<_>>>()?;
    infonce_from_similarities(g, pos, &negs, tau1)
}

/// Batch mean of [`infonce_term`]. Items are `(query, positive, negatives)`.
pub fn infonce_loss(g: &mut Graph, items: &[(Var, Var, Vec<Var>)], tau1: f64) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let terms = items
        .iter()
        .map(|(q, p, n)| infonce_term(g, *q, *p, n, tau1))
        .collect::<Result<Vec<_>>>()?;
    let s = g.stack(&terms)?;
    g.mean(s)
}

/// Pairwise logistic loss for one list, summed over pairs with `r_j < r_k`.
pub fn ranknet_term(g: &mut Graph, scores: &[Var], labels: &[u32], tau2: f64) -> Result<Var> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut terms = Vec::new();
    for j in 0..labels.len() {
        for k in 0..labels.len() {
            if labels[j] < labels[k] {
                let diff = g.sub(scores[k], scores[j])?;
                let z = g.scale(diff, 1.0 / tau2)?;
                terms.push(g.softplus(z)?);
            }
        }
    }
    if terms.is_empty() {
        return Err(Error::Degenerate {
            op: "ranknet_loss",
            detail: "no strictly ordered candidate pair".into(),
        });
    }
    let s = g.stack(&terms)?;
    g.sum(s)
}

/// Sum of per-list pair losses divided by the number of lists.
pub fn ranknet_loss(g: &mut Graph, lists: &[(Vec<Var>, Vec<u32>)], tau2: f64) -> Result<Var> {
    if lists.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let terms = lists
        .iter()
        .map(|(s, l)| ranknet_term(g, s, l, tau2))
        .collect::<Result<Vec<_>>>()?;
    let s = g.stack(&terms)?;
    g.mean(s)
}

pub fn combined_loss(g: &mut Graph, infonce: Var, ranknet: Var, lambda: f64) -> Result<Var> {
    let w = g.scale(infonce, lambda)?;
    g.add(w, ranknet)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: OptimizerConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument("parameter/gradient count mismatch".into()));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *x -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * *x);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 8,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Supplied by the caller, never read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub skip_stage1: bool,
    pub skip_stage2: bool,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stage1: StageConfig { epochs: 8, ..StageConfig::default() },
            stage2: StageConfig { epochs: 1, ..StageConfig::default() },
            skip_stage1: false,
            skip_stage2: false,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// One optimizer step as recorded in the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub stage: String,
    pub infonce: f64,
    pub infonce_weight: f64,
    pub ranknet: f64,
    pub combined: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub dataset: String,
    pub dataset_sha256: String,
    pub samples: usize,
    pub epochs: usize,
    pub steps: usize,
    pub encoder_checksum: String,
    pub reranker_checksum: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stages: Vec<StageSummary>,
    pub trace: Vec<TraceRecord>,
}

impl TrainReport {
    pub fn trace_jsonl(&self) -> String {
        self.trace
            .iter()
            .map(|r| serde_json::to_string(r).expect("trace record serializes") + "\n")
            .collect()
    }
}

/// Loss values for a batch, as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub infonce: f64,
    pub ranknet: f64,
    pub combined: f64,
}

/// Which part of the objective to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Combined,
    InfoNce,
    RankNet,
}

/// Gradients for every parameter, in `params()` order of each model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub encoder: Vec<Vec<f64>>,
    pub reranker: Vec<Vec<f64>>,
}

/// Resolves sample ids to token sequences.
pub struct SampleSource<'a> {
    pub vocab: &'a Vocabulary,
    pub corpus: &'a Corpus,
    queries: HashMap<&'a str, &'a Query>,
}

impl<'a> SampleSource<'a> {
    pub fn new(vocab: &'a Vocabulary, corpus: &'a Corpus, queries: impl IntoIterator<Item = &'a Query>) -> Self {
        Self {
            vocab,
            corpus,
            queries: queries.into_iter().map(|q| (q.qid.as_str(), q)).collect(),
        }
    }

    pub fn from_dataset(d: &'a Dataset) -> Self {
        Self::new(&d.vocab, &d.corpus, d.train_queries.iter().chain(&d.eval_queries))
    }

    fn query(&self, qid: &str) -> Result<&'a Query> {
        self.queries
            .get(qid)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown query {qid}")))
    }

    fn doc(&self, doc_id: &str) -> Result<&'a [usize]> {
        self.corpus
            .by_id(doc_id)
            .map(|d| d.tokens.as_slice())
            .ok_or_else(|| Error::Data(format!("unknown document {doc_id}")))
    }
}

struct SampleGraph {
    infonce: Var,
    ranknet: Var,
}

/// Forward pass for one sample on `g`: unscaled InfoNCE and RankNet terms.
fn sample_forward(
    g: &mut Graph,
    enc: &BoundEncoder,
    rer: &BoundReranker,
    src: &SampleSource,
    s: &RankingSample,
    loss: &LossConfig,
) -> Result<SampleGraph> {
    let q = src.query(&s.qid)?;
    let qe = enc.encode(g, &q.tokens)?;
    let embs = s
        .candidates
        .iter()
        .map(|c| enc.encode(g, src.doc(&c.doc_id)?))
        .collect::<Result<Vec<_>>>()?;
    // candidates tied with the positive are not contrasted against it
    let pos_label = s.candidates[s.positive].rank_label;
    let negs: Vec<Var> = s
        .negatives()
        .filter(|&i| s.candidates[i].rank_label > pos_label)
        .map(|i| embs[i])
        .collect();
    let infonce = infonce_term(g, qe, embs[s.positive], &negs, loss.tau1)?;
    let prompt = Prompt::new(src.vocab, &q.tokens);
    let out = rer.forward(g, &prompt, &embs)?;
    let labels: Vec<u32> = s.candidates.iter().map(|c| c.rank_label).collect();
    let ranknet = ranknet_term(g, &out.scores, &labels, loss.tau2)?;
    Ok(SampleGraph { infonce, ranknet })
}

struct SampleResult {
    infonce: f64,
    ranknet: f64,
    combined: f64,
    encoder: Vec<Option<Vec<f64>>>,
    reranker: Vec<Option<Vec<f64>>>,
}

/// Loss and gradients of one sample's share (`1/n`) of the batch objective.
fn sample_backward(
    pair: &ModelPair,
    src: &SampleSource,
    s: &RankingSample,
    loss: &LossConfig,
    n: usize,
    term: LossTerm,
    encoder_grads: bool,
) -> Result<SampleResult> {
    let mut g = Graph::new();
    let enc = pair.encoder.bind(&mut g, encoder_grads);
    let rer = pair.reranker.bind(&mut g, true);
    let sg = sample_forward(&mut g, &enc, &rer, src, s, loss)?;
    let inv = 1.0 / n as f64;
    let w = loss.infonce_weight();
    let r = g.scale(sg.ranknet, inv)?;
    let i = g.scale(sg.infonce, inv)?;
    let c = if w > 0.0 {
        let wi = g.scale(sg.infonce, w * inv)?;
        g.add(wi, r)?
    } else {
        r
    };
    let target = match term {
        LossTerm::Combined => c,
        LossTerm::InfoNce => i,
        LossTerm::RankNet => r,
    };
    let (iv, rv, cv) = (g.value(i).item(), g.value(r).item(), g.value(c).item());
    let (ev, rvars) = (enc.params(), rer.params());
    let mut grads = g.backward(target)?;
    Ok(SampleResult {
        infonce: iv,
        ranknet: rv,
        combined: cv,
        encoder: ev.iter().map(|v| grads.take(*v)).collect(),
        reranker: rvars.iter().map(|v| grads.take(*v)).collect(),
    })
}

fn accumulate(acc: &mut [Vec<f64>], part: Vec<Option<Vec<f64>>>) {
    for (a, p) in acc.iter_mut().zip(part) {
        if let Some(p) = p {
            a.iter_mut().zip(p).for_each(|(x, y)| *x += y);
        }
    }
}

fn zero_grads(t: &crate::model::Transformer) -> Vec<Vec<f64>> {
    t.params().iter().map(|p| vec![0.0; p.len()]).collect()
}

fn batch_gradients(
    pair: &ModelPair,
    src: &SampleSource,
    batch: &[&RankingSample],
    loss: &LossConfig,
    term: LossTerm,
    encoder_grads: bool,
) -> Result<(BatchLoss, ParamGrads)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut grads = ParamGrads {
        encoder: zero_grads(pair.encoder.net()),
        reranker: zero_grads(pair.reranker.net()),
    };
    let mut totals = BatchLoss {
        infonce: 0.0,
        ranknet: 0.0,
        combined: 0.0,
    };
    for s in batch {
        let r = sample_backward(pair, src, s, loss, batch.len(), term, encoder_grads)
            .map_err(|e| Error::Data(format!("sample for query {}: {e}", s.qid)))?;
        totals.infonce += r.infonce;
        totals.ranknet += r.ranknet;
        totals.combined += r.combined;
        accumulate(&mut grads.encoder, r.encoder);
        accumulate(&mut grads.reranker, r.reranker);
    }
    Ok((totals, grads))
}

/// Batch loss without updating anything.
pub fn evaluate_loss(pair: &ModelPair, src: &SampleSource, batch: &[&RankingSample], loss: &LossConfig) -> Result<BatchLoss> {
    loss.validate()?;
    let mut totals = BatchLoss {
        infonce: 0.0,
        ranknet: 0.0,
        combined: 0.0,
    };
    let inv = 1.0 / batch.len() as f64;
    for s in batch {
        let mut g = Graph::new();
        let enc = pair.encoder.bind(&mut g, false);
        let rer = pair.reranker.bind(&mut g, false);
        let sg = sample_forward(&mut g, &enc, &rer, src, s, loss)?;
        let (i, r) = (g.value(sg.infonce).item(), g.value(sg.ranknet).item());
        totals.infonce += i * inv;
        totals.ranknet += r * inv;
        totals.combined += (loss.infonce_weight() * i + r) * inv;
    }
    Ok(totals)
}

/// Gradients of one objective term over a batch, for every parameter of both
/// models. The reranker uses its configured fusion.
pub fn loss_gradients(
    pair: &ModelPair,
    src: &SampleSource,
    batch: &[&RankingSample],
    loss: &LossConfig,
    term: LossTerm,
) -> Result<ParamGrads> {
    loss.validate()?;
    batch_gradients(pair, src, batch, loss, term, true).map(|(_, g)| g)
}

/// Runs `epochs` passes over `samples` and appends to `report`.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    pair: &mut ModelPair,
    src: &SampleSource,
    samples: &[RankingSample],
    stage_name: &str,
    stage: &StageConfig,
    loss: &LossConfig,
    opt: &OptimizerConfig,
    seed: u64,
    report: &mut TrainReport,
) -> Result<()> {
    loss.validate()?;
    if stage.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("{stage_name}: no training samples")));
    }
    pair.reranker.set_fusion(loss.fusion())?;
    let mut adam = Adam::new(*opt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut steps = 0;
    for _ in 0..stage.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(stage.batch_size) {
            let batch: Vec<&RankingSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (bl, grads) = batch_gradients(pair, src, &batch, loss, LossTerm::Combined, loss.encoder_trainable)?;
            if !bl.combined.is_finite() {
                return Err(Error::Diverged {
                    step: report.trace.len(),
                    value: bl.combined,
                });
            }
            let mut flat: Vec<Vec<f64>> = Vec::new();
            if loss.encoder_trainable {
                flat.extend(grads.encoder);
            }
            flat.extend(grads.reranker);
            let grad_norm = clip_global_norm(&mut flat, opt.clip_norm);
            if !grad_norm.is_finite() {
                return Err(Error::Diverged {
                    step: report.trace.len(),
                    value: grad_norm,
                });
            }
            let mut params: Vec<&mut Tensor> = Vec::new();
            if loss.encoder_trainable {
                params.extend(pair.encoder.net_mut().params_mut());
            }
            params.extend(pair.reranker.net_mut().params_mut());
            adam.step(&mut params, &flat, stage.lr)?;
            report.trace.push(TraceRecord {
                step: report.trace.len(),
                stage: stage_name.to_string(),
                infonce: bl.infonce,
                infonce_weight: loss.infonce_weight(),
                ranknet: bl.ranknet,
                combined: bl.combined,
                grad_norm,
            });
            steps += 1;
        }
    }
    report.stages.push(StageSummary {
        stage: stage_name.to_string(),
        dataset: String::new(),
        dataset_sha256: samples_sha256(samples),
        samples: samples.len(),
        epochs: stage.epochs,
        steps,
        encoder_checksum: pair.encoder_checksum(),
        reranker_checksum: pair.reranker_checksum(),
    });
    Ok(())
}

pub fn samples_sha256(samples: &[RankingSample]) -> String {
    let mut bytes = Vec::new();
    for s in samples {
        bytes.extend(serde_json::to_vec(s).expect("sample serializes"));
        bytes.push(b'\n');
    }
    sha256_hex(&bytes)
}

/// Coarse stage on `stage1`, then fine stage on `stage2`, each optional.
/// When `checkpoint_dir` is given the pair is saved after each stage.
pub fn run_dual_stage(
    pair: &mut ModelPair,
    data: &Dataset,
    cfg: &TrainConfig,
    loss: &LossConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    let src = SampleSource::from_dataset(data);
    let mut report = TrainReport::default();
    let stages = [
        ("stage1", crate::data::STAGE1_FILE, &data.stage1, &cfg.stage1, cfg.skip_stage1),
        ("stage2", crate::data::STAGE2_FILE, &data.stage2, &cfg.stage2, cfg.skip_stage2),
    ];
    for (i, (name, file, samples, stage, skip)) in stages.into_iter().enumerate() {
        if skip {
            continue;
        }
        train_stage(
            pair,
            &src,
            samples,
            name,
            stage,
            loss,
            &cfg.optimizer,
            cfg.seed.wrapping_add(i as u64 + 1),
            &mut report,
        )?;
        report.stages.last_mut().unwrap().dataset = file.to_string();
        if let Some(dir) = checkpoint_dir {
            pair.save(&dir.join(format!("{name}.ckpt")))?;
        }
    }
    Ok(report)
}
