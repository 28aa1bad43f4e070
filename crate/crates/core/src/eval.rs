//! nDCG@k, efficiency accounting, and the input-ordering and ablation
//! experiment harnesses.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Qrels};
use crate::error::{Error, Result};
use crate::pair::{ModelConfig, ModelPair, RerankStats};
use crate::reranker::Fusion;
use crate::retrieval::{end_to_end, rerank_candidates, InvertedIndex, PipelineConfig};
use crate::run::{Run, RunList};
use crate::training::{run_dual_stage, LossConfig, TrainConfig, TrainReport};

/// nDCG@k for one ranked list with exponential gain `2^g − 1` and
/// `log2(rank + 1)` discount. `None` when the query has no relevant document.
pub fn ndcg_at_k(list: &RunList, qrels: &Qrels, k: usize) -> Result<Option<f64>> {
    if k == 0 {
        return Err(Error::InvalidArgument("cutoff k must be at least 1".into()));
    }
    let judged = qrels
        .query(&list.qid)
        .ok_or_else(|| Error::Data(format!("run references unknown query {}", list.qid)))?;
    let gain = |g: u32| 2f64.powi(g as i32) - 1.0;
    let discount = |i: usize| (i as f64 + 2.0).log2();
    let mut ideal: Vec<u32> = judged.values().copied().filter(|g| *g > 0).collect();
    if ideal.is_empty() {
        return Ok(None);
    }
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, g)| gain(*g) / discount(i)).sum();
    let dcg: f64 = list
        .entries
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, e)| gain(qrels.grade(&list.qid, &e.doc_id)) / discount(i))
        .sum();
    Ok(Some(dcg / idcg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NdcgSummary {
    pub k: usize,
    pub mean: f64,
    pub evaluated: usize,
    /// Queries without any relevant document, left out of the mean.
    pub excluded: usize,
    pub per_query: Vec<(String, f64)>,
}

pub fn evaluate_run(run: &Run, qrels: &Qrels, k: usize) -> Result<NdcgSummary> {
    let mut per_query = Vec::new();
    let mut excluded = 0;
    for list in &run.lists {
        match ndcg_at_k(list, qrels, k)? {
            Some(v) => per_query.push((list.qid.clone(), v)),
            None => excluded += 1,
        }
    }
    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|(_, v)| v).sum::<f64>() / per_query.len() as f64
    };
    Ok(NdcgSummary {
        k,
        mean,
        evaluated: per_query.len(),
        excluded,
        per_query,
    })
}

/// Aggregated reranker counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub passages: u64,
    pub processed_passage_tokens: u64,
    pub avg_tokens_per_passage: f64,
    pub generated_tokens: u64,
    pub forward_passes: u64,
    pub per_query: Vec<(String, RerankStats)>,
}

impl EfficiencyReport {
    pub fn from_stats(per_query: &[(String, RerankStats)]) -> Self {
        let mut total = RerankStats::default();
        for (_, s) in per_query {
            total.passages += s.passages;
            total.merge(s);
        }
        let avg = if total.passages == 0 {
            0.0
        } else {
            total.processed_passage_tokens as f64 / total.passages as f64
        };
        Self {
            passages: total.passages,
            processed_passage_tokens: total.processed_passage_tokens,
            avg_tokens_per_passage: avg,
            generated_tokens: total.generated_tokens,
            forward_passes: total.forward_passes,
            per_query: per_query.to_vec(),
        }
    }

    /// Per-query means, the form in which the counters are usually reported.
    pub fn per_query_mean(&self) -> (f64, f64, f64) {
        let q = self.per_query.len().max(1) as f64;
        (
            self.processed_passage_tokens as f64 / q,
            self.avg_tokens_per_passage,
            self.generated_tokens as f64 / q,
        )
    }
}

/// Left-aligned first column, right-aligned others.
pub fn format_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut width: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate().take(cols) {
            width[i] = width[i].max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            if i == 0 {
                s.push_str(&format!("{c:<w$}", w = width[0]));
            } else {
                s.push_str(&format!("  {c:>w$}", w = width[i]));
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(headers.to_vec());
    out.push_str(&line(width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ordering {
    Original,
    Inverse,
    Random,
}

impl Ordering {
    pub const ALL: [Ordering; 3] = [Ordering::Original, Ordering::Inverse, Ordering::Random];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Original => "original",
            Self::Inverse => "inverse",
            Self::Random => "random",
        }
    }

    /// Reorders `items`; `rng` is only drawn from for [`Ordering::Random`].
    pub fn apply<T: Clone>(&self, items: &[T], rng: &mut ChaCha8Rng) -> Vec<T> {
        let mut v = items.to_vec();
        match self {
            Self::Original => {}
            Self::Inverse => v.reverse(),
            Self::Random => v.shuffle(rng),
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingRow {
    pub ordering: Ordering,
    pub ndcg: f64,
    pub run: Vec<(String, Vec<String>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    pub seed: u64,
    pub rows: Vec<OrderingRow>,
}

impl OrderingReport {
    pub fn to_text(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| vec![r.ordering.name().to_string(), format!("{:.4}", r.ndcg)])
            .collect();
        format!("input ordering (random seed {})\n{}", self.seed, format_table(&["ordering", "nDCG@10"], &rows))
    }
}

/// Reranks each first-stage list under `ordering` and returns the reranked run.
pub fn rerank_ordered(
    pair: &ModelPair,
    data: &Dataset,
    first_stage: &Run,
    cfg: &PipelineConfig,
    ordering: Ordering,
    seed: u64,
) -> Result<(Run, Vec<(String, RerankStats)>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = Run::new(format!("rerank-{}", ordering.name()));
    let mut stats = Vec::new();
    for list in &first_stage.lists {
        let q = data
            .query(&list.qid)
            .ok_or_else(|| Error::Data(format!("unknown query {}", list.qid)))?;
        let docs = list
            .entries
            .iter()
            .map(|e| {
                data.corpus
                    .by_id(&e.doc_id)
                    .ok_or_else(|| Error::Data(format!("unknown document {}", e.doc_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let docs = ordering.apply(&docs, &mut rng);
        let (rl, st) = rerank_candidates(pair, &data.vocab, q, &docs, cfg.window)?;
        run.lists.push(rl);
        stats.push((list.qid.clone(), st));
    }
    Ok((run, stats))
}

/// Same models and candidate sets under original, inverse and random input
/// order.
pub fn ordering_experiment(
    pair: &ModelPair,
    data: &Dataset,
    first_stage: &Run,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<OrderingReport> {
    let mut rows = Vec::new();
    for o in Ordering::ALL {
        let (run, _) = rerank_ordered(pair, data, first_stage, cfg, o, seed)?;
        let ndcg = evaluate_run(&run, &data.qrels, 10)?.mean;
        rows.push(OrderingRow {
            ordering: o,
            ndcg,
            run: run
                .lists
                .iter()
                .map(|l| (l.qid.clone(), l.doc_ids().iter().map(|s| s.to_string()).collect()))
                .collect(),
        });
    }
    Ok(OrderingReport { seed, rows })
}

/// The full model and its single-switch variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoStage1,
    NoStage2,
    NoHiddenState,
    NoResidual,
    NoEncoderSft,
    NoEncoderLoss,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoStage1,
        Variant::NoStage2,
        Variant::NoHiddenState,
        Variant::NoResidual,
        Variant::NoEncoderSft,
        Variant::NoEncoderLoss,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Self::Full => "full model",
            Self::NoStage1 => "w/o 1st stage",
            Self::NoStage2 => "w/o 2nd stage",
            Self::NoHiddenState => "w/o hidden state",
            Self::NoResidual => "w/o residual connection",
            Self::NoEncoderSft => "w/o encoder training",
            Self::NoEncoderLoss => "w/o encoder loss",
        }
    }

    /// Flips exactly one switch relative to the base configuration.
    pub fn apply(&self, train: &mut TrainConfig, loss: &mut LossConfig) {
        match self {
            Self::Full => {}
            Self::NoStage1 => train.skip_stage1 = true,
            Self::NoStage2 => train.skip_stage2 = true,
            Self::NoHiddenState => loss.hidden_state_enabled = false,
            Self::NoResidual => loss.residual_enabled = false,
            Self::NoEncoderSft => loss.encoder_trainable = false,
            Self::NoEncoderLoss => loss.encoder_loss_enabled = false,
        }
    }
}

/// Everything needed to train one model pair and evaluate it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSetup {
    pub model: ModelConfig,
    pub init_seed: u64,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub pair: ModelPair,
    pub report: TrainReport,
    pub first_stage: Run,
    pub reranked: Run,
    pub first_stage_ndcg: NdcgSummary,
    pub reranked_ndcg: NdcgSummary,
    pub efficiency: EfficiencyReport,
}

/// Fresh initialisation, dual-stage training, then retrieval and reranking
/// of the evaluation queries.
pub fn train_and_evaluate(data: &Dataset, bm25: &InvertedIndex, setup: &ExperimentSetup) -> Result<ExperimentOutcome> {
    let fusion = Fusion {
        residual: setup.loss.residual_enabled,
        hidden_state: setup.loss.hidden_state_enabled,
    };
    let mut pair = ModelPair::new(&setup.model, data.vocab.len(), fusion, setup.init_seed)?;
    let report = run_dual_stage(&mut pair, data, &setup.train, &setup.loss, None)?;
    evaluate_pair(pair, report, data, bm25, &setup.pipeline)
}

pub fn evaluate_pair(
    pair: ModelPair,
    report: TrainReport,
    data: &Dataset,
    bm25: &InvertedIndex,
    pipeline: &PipelineConfig,
) -> Result<ExperimentOutcome> {
    let dense = match pipeline.mode {
        crate::retrieval::RetrievalMode::Bm25 => None,
        _ => Some(crate::retrieval::DenseIndex::build(&pair.encoder, &pair.encoder_checksum(), &data.corpus)?),
    };
    let out = end_to_end(&pair, &data.vocab, &data.corpus, &data.eval_queries, bm25, dense.as_ref(), pipeline)?;
    Ok(ExperimentOutcome {
        first_stage_ndcg: evaluate_run(&out.first_stage, &data.qrels, 10)?,
        reranked_ndcg: evaluate_run(&out.reranked, &data.qrels, 10)?,
        efficiency: EfficiencyReport::from_stats(&out.stats),
        first_stage: out.first_stage,
        reranked: out.reranked,
        pair,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub baseline: bool,
    pub ndcg: f64,
    pub encoder_checksum: String,
    pub reranker_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub first_stage_ndcg: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let mut rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let delta = r.ndcg - self.rows[0].ndcg;
                vec![
                    format!("{}{}", r.label, if r.baseline { " (baseline)" } else { "" }),
                    format!("{:.4}", r.ndcg),
                    if r.baseline { "-".into() } else { format!("{delta:+.4}") },
                ]
            })
            .collect();
        rows.push(vec!["first stage only".into(), format!("{:.4}", self.first_stage_ndcg), "-".into()]);
        format_table(&["variant", "nDCG@10", "delta"], &rows)
    }
}

/// Trains and evaluates each variant from the same initialisation.
pub fn ablation_suite(
    data: &Dataset,
    bm25: &InvertedIndex,
    base: &ExperimentSetup,
    variants: &[Variant],
    mut on_variant: impl FnMut(Variant, &ExperimentOutcome) -> Result<()>,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    let mut first_stage_ndcg = 0.0;
    for v in variants {
        let mut setup = base.clone();
        v.apply(&mut setup.train, &mut setup.loss);
        let out = train_and_evaluate(data, bm25, &setup)?;
        first_stage_ndcg = out.first_stage_ndcg.mean;
        on_variant(*v, &out)?;
        rows.push(AblationRow {
            variant: *v,
            label: v.label().to_string(),
            baseline: *v == Variant::Full,
            ndcg: out.reranked_ndcg.mean,
            encoder_checksum: out.pair.encoder_checksum(),
            reranker_checksum: out.pair.reranker_checksum(),
        });
    }
    Ok(AblationReport { first_stage_ndcg, rows })
}
