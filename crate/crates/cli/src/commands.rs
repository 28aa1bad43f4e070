use std::path::Path;

use embrank_core::config::ExperimentConfig;
use embrank_core::data::{generate_synthetic, Dataset, Query};
use embrank_core::eval::{
    ablation_suite, evaluate_run, format_table, ordering_experiment, rerank_ordered, EfficiencyReport, Ordering,
    Variant,
};
use embrank_core::pair::ModelPair;
use embrank_core::retrieval::{
    corpus_sha256, end_to_end, retrieve, DenseIndex, InvertedIndex, PipelineConfig, RetrievalMode, Window,
};
use embrank_core::run::Run;
use embrank_core::training::{run_dual_stage, samples_sha256};
use embrank_core::{Error, Result};
use serde_json::json;

use crate::output::{RunDir, CHECKPOINT_DIR, FIRST_STAGE_FILE, MODEL_FILE, RUN_FILE};
use crate::QuerySet;

pub const BM25_FILE: &str = "bm25.idx";
pub const DENSE_FILE: &str = "dense.idx";

fn short(checksum: &str) -> &str {
    &checksum[..checksum.len().min(16)]
}

fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    Dataset::load(&cfg.paths.data)
}

fn load_bm25(cfg: &ExperimentConfig, data: &Dataset) -> Result<InvertedIndex> {
    let path = cfg.paths.index.join(BM25_FILE);
    let idx = InvertedIndex::load(&path)?;
    if idx.corpus_sha256() != corpus_sha256(&data.corpus) {
        return Err(Error::Config(format!(
            "{} was built from a different corpus; rerun build-index",
            path.display()
        )));
    }
    Ok(idx)
}

fn load_pair(cfg: &ExperimentConfig) -> Result<ModelPair> {
    ModelPair::load(&cfg.paths.model)
}

/// The stored dense index when it matches the model, otherwise a fresh one.
/// `None` for BM25-only retrieval.
fn dense_for(cfg: &ExperimentConfig, data: &Dataset, pair: &ModelPair) -> Result<Option<DenseIndex>> {
    if cfg.rerank.mode == RetrievalMode::Bm25 {
        return Ok(None);
    }
    let path = cfg.paths.index.join(DENSE_FILE);
    if path.exists() {
        let idx = DenseIndex::load(&path)?;
        if idx.encoder_checksum() != pair.encoder_checksum() || idx.corpus_sha256() != corpus_sha256(&data.corpus) {
            return Err(Error::Config(format!(
                "{} does not match the model or corpus; rerun build-index --dense",
                path.display()
            )));
        }
        return Ok(Some(idx));
    }
    DenseIndex::build(&pair.encoder, &pair.encoder_checksum(), &data.corpus).map(Some)
}

fn first_stage(
    queries: &[Query],
    bm25: &InvertedIndex,
    dense: Option<&DenseIndex>,
    pair: &ModelPair,
    pipeline: &PipelineConfig,
) -> Result<Run> {
    let mut run = Run::new(pipeline.mode.to_string());
    for q in queries {
        run.lists.push(retrieve(q, bm25, dense.map(|d| (d, &pair.encoder)), pipeline)?);
    }
    Ok(run)
}

fn window_label(w: Option<Window>) -> String {
    match w {
        None => "single pass".into(),
        Some(w) => format!("window {}/{}", w.size, w.stride),
    }
}

pub fn gen_data(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    let data = generate_synthetic(cfg.seed, &cfg.data)?;
    data.save(dir.path())?;
    let corpus = corpus_sha256(&data.corpus);
    let rows = vec![
        vec!["documents".into(), data.corpus.len().to_string()],
        vec!["vocabulary".into(), data.vocab.len().to_string()],
        vec!["train queries".into(), data.train_queries.len().to_string()],
        vec!["eval queries".into(), data.eval_queries.len().to_string()],
        vec!["stage1 samples".into(), data.stage1.len().to_string()],
        vec!["stage2 samples".into(), data.stage2.len().to_string()],
        vec!["corpus sha256".into(), short(&corpus).to_string()],
    ];
    dir.report(&format!("synthetic data (seed {})\n{}", cfg.seed, format_table(&["item", "value"], &rows)))?;
    dir.metrics(&[json!({
        "kind": "dataset",
        "seed": cfg.seed,
        "documents": data.corpus.len(),
        "vocabulary": data.vocab.len(),
        "train_queries": data.train_queries.len(),
        "eval_queries": data.eval_queries.len(),
        "stage1_samples": data.stage1.len(),
        "stage2_samples": data.stage2.len(),
        "corpus_sha256": corpus,
        "stage1_sha256": samples_sha256(&data.stage1),
        "stage2_sha256": samples_sha256(&data.stage2),
    })])
}

pub fn build_index(cfg: &ExperimentConfig, dir: &RunDir, dense: bool) -> Result<()> {
    let data = load_data(cfg)?;
    let bm25 = InvertedIndex::build(&data.corpus, cfg.bm25)?;
    bm25.save(&dir.join(BM25_FILE))?;
    let mut text = format!(
        "bm25 index: {} documents, avgdl {:.4}, k1 {}, b {}\n",
        bm25.len(),
        bm25.avgdl(),
        cfg.bm25.k1,
        cfg.bm25.b
    );
    let mut records = vec![json!({
        "kind": "bm25",
        "documents": bm25.len(),
        "avgdl": bm25.avgdl(),
        "corpus_sha256": bm25.corpus_sha256(),
    })];
    if dense {
        let pair = load_pair(cfg)?;
        let idx = DenseIndex::build(&pair.encoder, &pair.encoder_checksum(), &data.corpus)?;
        idx.save(&dir.join(DENSE_FILE))?;
        text.push_str(&format!(
            "dense index: {} documents, encoder {}\n",
            idx.len(),
            short(idx.encoder_checksum())
        ));
        records.push(json!({
            "kind": "dense",
            "documents": idx.len(),
            "encoder_checksum": idx.encoder_checksum(),
        }));
    }
    dir.report(&text)?;
    dir.metrics(&records)
}

pub fn train(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    let data = load_data(cfg)?;
    let mut pair = ModelPair::new(&cfg.model, data.vocab.len(), cfg.loss.fusion(), cfg.seed)?;
    let ckpt = dir.join(CHECKPOINT_DIR);
    let report = run_dual_stage(&mut pair, &data, &cfg.train_config(), &cfg.loss, Some(&ckpt))?;
    pair.save(&ckpt.join(MODEL_FILE))?;

    let rows: Vec<Vec<String>> = report
        .stages
        .iter()
        .map(|s| {
            let last = report.trace.iter().rev().find(|r| r.stage == s.stage);
            vec![
                s.stage.clone(),
                s.samples.to_string(),
                s.epochs.to_string(),
                s.steps.to_string(),
                last.map_or("-".into(), |r| format!("{:.4}", r.combined)),
                short(&s.encoder_checksum).to_string(),
                short(&s.reranker_checksum).to_string(),
            ]
        })
        .collect();
    let text = format!(
        "dual-stage training (seed {})\n{}final encoder {}\nfinal reranker {}\n",
        cfg.seed,
        format_table(
            &["stage", "samples", "epochs", "steps", "last loss", "encoder", "reranker"],
            &rows
        ),
        pair.encoder_checksum(),
        pair.reranker_checksum()
    );
    dir.report(&text)?;
    let mut records: Vec<serde_json::Value> = Vec::new();
    for r in &report.trace {
        let mut v = serde_json::to_value(r).map_err(|e| Error::Format(e.to_string()))?;
        v["kind"] = json!("step");
        records.push(v);
    }
    for s in &report.stages {
        let mut v = serde_json::to_value(s).map_err(|e| Error::Format(e.to_string()))?;
        v["kind"] = json!("stage");
        records.push(v);
    }
    dir.metrics(&records)
}

pub fn rerank(cfg: &ExperimentConfig, dir: &RunDir, set: QuerySet) -> Result<()> {
    let data = load_data(cfg)?;
    let bm25 = load_bm25(cfg, &data)?;
    let pair = load_pair(cfg)?;
    let dense = dense_for(cfg, &data, &pair)?;
    let queries = match set {
        QuerySet::Train => &data.train_queries,
        QuerySet::Eval => &data.eval_queries,
    };
    let pipeline = cfg.rerank.pipeline();
    let out = end_to_end(&pair, &data.vocab, &data.corpus, queries, &bm25, dense.as_ref(), &pipeline)?;
    out.first_stage.save(&dir.join(FIRST_STAGE_FILE))?;
    out.reranked.save(&dir.join(RUN_FILE))?;
    let eff = EfficiencyReport::from_stats(&out.stats);
    let (proc, avg, gen) = eff.per_query_mean();
    dir.report(&format!(
        "reranked {} queries, {} first stage depth {}, {}\nper query: #Proc {proc:.2}, Avg. L_p {avg:.4}, #Gen {gen:.2}\n",
        queries.len(),
        pipeline.mode,
        pipeline.depth,
        window_label(pipeline.window)
    ))?;
    let records: Vec<_> = out
        .stats
        .iter()
        .map(|(q, s)| json!({"kind": "query", "qid": q, "stats": s}))
        .collect();
    dir.metrics(&records)
}

pub fn evaluate(cfg: &ExperimentConfig, dir: &RunDir, run_path: &Path, k: usize) -> Result<()> {
    let data = load_data(cfg)?;
    let run = Run::load(run_path)?;
    let s = evaluate_run(&run, &data.qrels, k)?;
    let rows: Vec<Vec<String>> = s
        .per_query
        .iter()
        .map(|(q, v)| vec![q.clone(), format!("{v:.4}")])
        .collect();
    dir.report(&format!(
        "nDCG@{k} {:.4} over {} queries ({} without relevant documents excluded)\n{}",
        s.mean,
        s.evaluated,
        s.excluded,
        format_table(&["query", &format!("nDCG@{k}")], &rows)
    ))?;
    let mut records: Vec<_> = s
        .per_query
        .iter()
        .map(|(q, v)| json!({"kind": "query", "qid": q, "ndcg": v}))
        .collect();
    records.push(json!({"kind": "summary", "k": k, "ndcg": s.mean, "evaluated": s.evaluated, "excluded": s.excluded}));
    dir.metrics(&records)
}

pub fn end_to_end_cmd(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    let data = load_data(cfg)?;
    let bm25 = load_bm25(cfg, &data)?;
    let pair = load_pair(cfg)?;
    let dense = dense_for(cfg, &data, &pair)?;
    let pipeline = cfg.rerank.pipeline();
    let out = end_to_end(&pair, &data.vocab, &data.corpus, &data.eval_queries, &bm25, dense.as_ref(), &pipeline)?;
    out.first_stage.save(&dir.join(FIRST_STAGE_FILE))?;
    out.reranked.save(&dir.join(RUN_FILE))?;
    let fs = evaluate_run(&out.first_stage, &data.qrels, 10)?;
    let rr = evaluate_run(&out.reranked, &data.qrels, 10)?;
    let eff = EfficiencyReport::from_stats(&out.stats);
    let (proc, avg, gen) = eff.per_query_mean();
    let rows = vec![
        vec![format!("{} first stage", pipeline.mode), format!("{:.4}", fs.mean)],
        vec![format!("reranked ({})", window_label(pipeline.window)), format!("{:.4}", rr.mean)],
    ];
    dir.report(&format!(
        "{} evaluation queries, depth {}\n{}gain {:+.4}\nper query: #Proc {proc:.2}, Avg. L_p {avg:.4}, #Gen {gen:.2}\n",
        data.eval_queries.len(),
        pipeline.depth,
        format_table(&["run", "nDCG@10"], &rows),
        rr.mean - fs.mean
    ))?;
    let mut records: Vec<_> = fs
        .per_query
        .iter()
        .zip(&rr.per_query)
        .map(|((q, a), (_, b))| json!({"kind": "query", "qid": q, "first_stage_ndcg": a, "reranked_ndcg": b}))
        .collect();
    records.push(json!({
        "kind": "summary",
        "mode": pipeline.mode,
        "first_stage_ndcg": fs.mean,
        "reranked_ndcg": rr.mean,
        "processed_passages": eff.processed_passage_tokens,
        "avg_tokens_per_passage": eff.avg_tokens_per_passage,
        "generated_tokens": eff.generated_tokens,
        "encoder_checksum": pair.encoder_checksum(),
        "reranker_checksum": pair.reranker_checksum(),
    }));
    dir.metrics(&records)
}

fn variant_name(v: Variant) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|x| x.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn parse_variants(names: &[String]) -> Result<Vec<Variant>> {
    if names.is_empty() {
        return Ok(Variant::ALL.to_vec());
    }
    let mut out = vec![Variant::Full];
    for n in names {
        let v = serde_json::from_value::<Variant>(json!(n)).map_err(|_| {
            let known: Vec<String> = Variant::ALL.iter().map(|v| variant_name(*v)).collect();
            Error::Config(format!("unknown variant {n:?} (one of {})", known.join(", ")))
        })?;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    Ok(out)
}

pub fn ablate(cfg: &ExperimentConfig, dir: &RunDir, names: &[String]) -> Result<()> {
    let variants = parse_variants(names)?;
    let data = load_data(cfg)?;
    let bm25 = load_bm25(cfg, &data)?;
    let ckpt = dir.join(CHECKPOINT_DIR);
    let report = ablation_suite(&data, &bm25, &cfg.setup(), &variants, |v, out| {
        let name = variant_name(v);
        out.pair.save(&ckpt.join(format!("{name}.ckpt")))?;
        let file = if v == Variant::Full { RUN_FILE.to_string() } else { format!("run.{name}.trec") };
        out.reranked.save(&dir.join(&file))
    })?;
    dir.report(&format!("ablations (seed {})\n{}", cfg.seed, report.to_text()))?;
    let mut records: Vec<_> = report
        .rows
        .iter()
        .map(|r| json!({"kind": "variant", "variant": variant_name(r.variant), "ndcg": r.ndcg,
            "encoder_checksum": r.encoder_checksum, "reranker_checksum": r.reranker_checksum}))
        .collect();
    records.push(json!({"kind": "first_stage", "ndcg": report.first_stage_ndcg}));
    dir.metrics(&records)
}

pub fn efficiency(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    let data = load_data(cfg)?;
    let bm25 = load_bm25(cfg, &data)?;
    let pair = load_pair(cfg)?;
    let dense = dense_for(cfg, &data, &pair)?;
    let pipeline = cfg.rerank.pipeline();
    let first = first_stage(&data.eval_queries, &bm25, dense.as_ref(), &pair, &pipeline)?;
    let windowed = pipeline.window.unwrap_or_default();
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for window in [None, Some(windowed)] {
        let setting = PipelineConfig { window, ..pipeline };
        let (_, stats) = rerank_ordered(&pair, &data, &first, &setting, Ordering::Original, cfg.seed)?;
        let eff = EfficiencyReport::from_stats(&stats);
        let (proc, avg, gen) = eff.per_query_mean();
        let q = stats.len().max(1) as f64;
        rows.push(vec![
            window_label(window),
            format!("{:.2}", eff.passages as f64 / q),
            format!("{proc:.2}"),
            format!("{avg:.4}"),
            format!("{gen:.2}"),
            format!("{:.2}", eff.forward_passes as f64 / q),
        ]);
        records.push(json!({
            "kind": "setting",
            "setting": window_label(window),
            "queries": stats.len(),
            "passages": eff.passages,
            "processed_passages": eff.processed_passage_tokens,
            "avg_tokens_per_passage": eff.avg_tokens_per_passage,
            "generated_tokens": eff.generated_tokens,
            "forward_passes": eff.forward_passes,
        }));
    }
    dir.report(&format!(
        "reranking cost per query, {} candidates from {}\n{}",
        pipeline.depth,
        pipeline.mode,
        format_table(&["setting", "candidates", "#Proc", "Avg. L_p", "#Gen", "passes"], &rows)
    ))?;
    dir.metrics(&records)
}

pub fn order_exp(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    let data = load_data(cfg)?;
    let bm25 = load_bm25(cfg, &data)?;
    let pair = load_pair(cfg)?;
    let dense = dense_for(cfg, &data, &pair)?;
    let pipeline = cfg.rerank.pipeline();
    let first = first_stage(&data.eval_queries, &bm25, dense.as_ref(), &pair, &pipeline)?;
    let report = ordering_experiment(&pair, &data, &first, &pipeline, cfg.seed)?;
    let mut records = Vec::new();
    for row in &report.rows {
        let valid = row.run.iter().all(|(qid, ids)| {
            let mut got = ids.clone();
            got.sort();
            let mut want: Vec<String> = first
                .get(qid)
                .map(|l| l.doc_ids().iter().map(|s| s.to_string()).collect())
                .unwrap_or_default();
            want.sort();
            got == want
        });
        records.push(json!({"kind": "ordering", "ordering": row.ordering.name(), "ndcg": row.ndcg, "valid_permutations": valid}));
    }
    dir.report(&report.to_text())?;
    dir.metrics(&records)
}
