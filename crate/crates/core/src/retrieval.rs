//! First-stage retrieval (BM25 and dense), reciprocal rank fusion and
//! sliding-window reranking.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{Corpus, Document, Query, Vocabulary};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::pair::{ModelPair, RerankStats};
use crate::reranker::Prompt;
use crate::run::{Run, RunEntry, RunList};
use crate::tensor::{vecops, Tensor};

const BM25_MAGIC: &[u8; 8] = b"EMBRBM25";
const DENSE_MAGIC: &[u8; 8] = b"EMBRDENS";

/// SHA-256 over document ids and token ids.
pub fn corpus_sha256(corpus: &Corpus) -> String {
    let mut bytes = Vec::new();
    for d in corpus.docs() {
        bytes.extend(d.doc_id.as_bytes());
        bytes.push(0);
        for t in &d.tokens {
            bytes.extend((*t as u64).to_le_bytes());
        }
        bytes.push(b'\n');
    }
    checkpoint::sha256_hex(&bytes)
}

/// Sorts by score descending, then doc id ascending.
fn rank_entries(mut entries: Vec<RunEntry>) -> Vec<RunEntry> {
    entries.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
    entries
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexMeta {
    corpus_sha256: String,
    doc_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bm25: Option<Bm25Params>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    encoder_checksum: Option<String>,
}

fn as_f64(xs: impl IntoIterator<Item = usize>) -> Vec<f64> {
    xs.into_iter().map(|x| x as f64).collect()
}

fn column(t: &Tensor) -> Vec<usize> {
    t.data().iter().map(|x| *x as usize).collect()
}

fn tensor_of(v: Vec<f64>) -> Result<Tensor> {
    // Zero-length tensors are not representable; pad with a sentinel.
    if v.is_empty() {
        return Tensor::vector(vec![-1.0]);
    }
    Tensor::vector(v)
}

fn untensor(t: &Tensor) -> Vec<usize> {
    if t.data() == [-1.0] {
        return Vec::new();
    }
    column(t)
}

/// Term-at-a-time BM25 over token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    params: Bm25Params,
    /// term → (doc position, term frequency), sorted by doc position
    postings: BTreeMap<usize, Vec<(usize, usize)>>,
    doc_lens: Vec<usize>,
    doc_ids: Vec<String>,
    avgdl: f64,
    corpus_sha256: String,
}

impl InvertedIndex {
    pub fn build(corpus: &Corpus, params: Bm25Params) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Data("cannot index an empty corpus".into()));
        }
        let mut postings: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        let mut doc_lens = Vec::with_capacity(corpus.len());
        for (i, d) in corpus.docs().iter().enumerate() {
            let mut tf: BTreeMap<usize, usize> = BTreeMap::new();
            for t in &d.tokens {
                *tf.entry(*t).or_default() += 1;
            }
            for (t, c) in tf {
                postings.entry(t).or_default().push((i, c));
            }
            doc_lens.push(d.tokens.len());
        }
        let avgdl = doc_lens.iter().sum::<usize>() as f64 / doc_lens.len() as f64;
        Ok(Self {
            params,
            postings,
            doc_lens,
            doc_ids: corpus.docs().iter().map(|d| d.doc_id.clone()).collect(),
            avgdl,
            corpus_sha256: corpus_sha256(corpus),
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn corpus_sha256(&self) -> &str {
        &self.corpus_sha256
    }

    pub fn idf(&self, term: usize) -> f64 {
        let n = self.len() as f64;
        let df = self.postings.get(&term).map_or(0, Vec::len) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 score of every document; repeated query terms count once.
    pub fn score_all(&self, query: &[usize]) -> Vec<f64> {
        let Bm25Params { k1, b } = self.params;
        let mut scores = vec![0.0; self.len()];
        let terms: BTreeSet<usize> = query.iter().copied().collect();
        for t in terms {
            let Some(plist) = self.postings.get(&t) else {
                continue;
            };
            let idf = self.idf(t);
            for &(d, tf) in plist {
                let tf = tf as f64;
                let norm = k1 * (1.0 - b + b * self.doc_lens[d] as f64 / self.avgdl);
                scores[d] += idf * tf * (k1 + 1.0) / (tf + norm);
            }
        }
        scores
    }

    /// Top `k` documents; ties by doc id.
    pub fn search(&self, qid: &str, query: &[usize], k: usize) -> RunList {
        if query.is_empty() || k == 0 {
            return RunList::new(qid, Vec::new());
        }
        let entries = self
            .score_all(query)
            .into_iter()
            .zip(&self.doc_ids)
            .map(|(score, id)| RunEntry {
                doc_id: id.clone(),
                score,
            })
            .collect();
        let mut entries = rank_entries(entries);
        entries.truncate(k);
        RunList::new(qid, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = IndexMeta {
            corpus_sha256: self.corpus_sha256.clone(),
            doc_ids: self.doc_ids.clone(),
            bm25: Some(self.params),
            encoder_checksum: None,
        };
        let meta = serde_json::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let (mut terms, mut offsets, mut docs, mut tfs) = (Vec::new(), vec![0], Vec::new(), Vec::new());
        for (t, plist) in &self.postings {
            terms.push(*t);
            for (d, tf) in plist {
                docs.push(*d);
                tfs.push(*tf);
            }
            offsets.push(docs.len());
        }
        let tensors = [
            ("doc_lens", tensor_of(as_f64(self.doc_lens.iter().copied()))?),
            ("terms", tensor_of(as_f64(terms))?),
            ("offsets", tensor_of(as_f64(offsets))?),
            ("docs", tensor_of(as_f64(docs))?),
            ("tfs", tensor_of(as_f64(tfs))?),
        ];
        let named: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.to_string(), t)).collect();
        checkpoint::write(path, BM25_MAGIC, &meta, &named)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = checkpoint::read(path, BM25_MAGIC)?;
        let meta: IndexMeta = serde_json::from_str(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let get = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| untensor(t))
                .ok_or_else(|| Error::Format(format!("{}: missing {name}", path.display())))
        };
        let (doc_lens, terms, offsets, docs, tfs) = (get("doc_lens")?, get("terms")?, get("offsets")?, get("docs")?, get("tfs")?);
        if doc_lens.len() != meta.doc_ids.len() || offsets.len() != terms.len() + 1 || docs.len() != tfs.len() {
            return Err(Error::Format(format!("{}: inconsistent index", path.display())));
        }
        let mut postings = BTreeMap::new();
        for (i, t) in terms.iter().enumerate() {
            let plist = (offsets[i]..offsets[i + 1]).map(|j| (docs[j], tfs[j])).collect();
            postings.insert(*t, plist);
        }
        let avgdl = doc_lens.iter().sum::<usize>() as f64 / doc_lens.len() as f64;
        Ok(Self {
            params: meta.bm25.unwrap_or_default(),
            postings,
            doc_lens,
            doc_ids: meta.doc_ids,
            avgdl,
            corpus_sha256: meta.corpus_sha256,
        })
    }
}

/// Exact cosine search over encoder embeddings of every document.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    doc_ids: Vec<String>,
    dim: usize,
    embeddings: Vec<f64>,
    corpus_sha256: String,
    encoder_checksum: String,
}

impl DenseIndex {
    pub fn build(encoder: &EncoderModel, encoder_checksum: &str, corpus: &Corpus) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Data("cannot index an empty corpus".into()));
        }
        let dim = encoder.dim();
        let mut embeddings = Vec::with_capacity(corpus.len() * dim);
        for chunk in corpus.docs().chunks(64) {
            let toks: Vec<&[usize]> = chunk.iter().map(|d| d.tokens.as_slice()).collect();
            for e in encoder.batch_encode(&toks)? {
                embeddings.extend_from_slice(e.data());
            }
        }
        Ok(Self {
            doc_ids: corpus.docs().iter().map(|d| d.doc_id.clone()).collect(),
            dim,
            embeddings,
            corpus_sha256: corpus_sha256(corpus),
            encoder_checksum: encoder_checksum.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn encoder_checksum(&self) -> &str {
        &self.encoder_checksum
    }

    pub fn corpus_sha256(&self) -> &str {
        &self.corpus_sha256
    }

    /// Zero-norm stored rows score 0.
    pub fn search(&self, qid: &str, query: &[f64], k: usize) -> Result<RunList> {
        if query.len() != self.dim {
            return Err(Error::shape("dense_search", format!("query has {} dims, index has {}", query.len(), self.dim)));
        }
        if vecops::norm(query) == 0.0 {
            return Err(Error::degenerate("dense_search", "zero-norm query embedding"));
        }
        let entries = (0..self.len())
            .map(|i| RunEntry {
                doc_id: self.doc_ids[i].clone(),
                score: vecops::cosine(query, self.row(i)).unwrap_or(0.0),
            })
            .collect();
        let mut entries = rank_entries(entries);
        entries.truncate(k);
        Ok(RunList::new(qid, entries))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = IndexMeta {
            corpus_sha256: self.corpus_sha256.clone(),
            doc_ids: self.doc_ids.clone(),
            bm25: None,
            encoder_checksum: Some(self.encoder_checksum.clone()),
        };
        let meta = serde_json::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let t = Tensor::matrix(self.len(), self.dim, self.embeddings.clone())?;
        checkpoint::write(path, DENSE_MAGIC, &meta, &[("embeddings".to_string(), &t)])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, mut tensors) = checkpoint::read(path, DENSE_MAGIC)?;
        let meta: IndexMeta = serde_json::from_str(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let Some((_, t)) = tensors.pop().filter(|(n, _)| n == "embeddings") else {
            return Err(Error::Format(format!("{}: missing embeddings", path.display())));
        };
        let (n, dim) = t.dims2("dense_index")?;
        if n != meta.doc_ids.len() {
            return Err(Error::Format(format!("{}: {n} rows for {} ids", path.display(), meta.doc_ids.len())));
        }
        Ok(Self {
            doc_ids: meta.doc_ids,
            dim,
            embeddings: t.into_data(),
            corpus_sha256: meta.corpus_sha256,
            encoder_checksum: meta.encoder_checksum.unwrap_or_default(),
        })
    }
}

/// Reciprocal rank fusion: `Σ 1 / (K + rank)` over the runs containing a
/// document. Ties by doc id.
pub fn rrf_fuse(a: &RunList, b: &RunList, k: u32) -> RunList {
    let mut scores: HashMap<&str, f64> = HashMap::new();
    for list in [a, b] {
        for (i, e) in list.entries.iter().enumerate() {
            *scores.entry(e.doc_id.as_str()).or_default() += 1.0 / (k as f64 + (i + 1) as f64);
        }
    }
    let entries = scores
        .into_iter()
        .map(|(d, score)| RunEntry {
            doc_id: d.to_string(),
            score,
        })
        .collect();
    RunList::new(a.qid.clone(), rank_entries(entries))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub size: usize,
    pub stride: usize,
}

impl Default for Window {
    fn default() -> Self {
        Self { size: 20, stride: 10 }
    }
}

impl Window {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.size {
            return Err(Error::Config(format!(
                "window stride must satisfy 1 <= stride <= size, got size {} stride {}",
                self.size, self.stride
            )));
        }
        Ok(())
    }

    /// Window ranges for `n` candidates, tail first. The last window is
    /// clamped at the head so every position is covered.
    pub fn ranges(&self, n: usize) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut end = n;
        let mut start = n.saturating_sub(self.size);
        loop {
            out.push(start..end);
            if start == 0 {
                break;
            }
            end -= self.stride;
            start = start.saturating_sub(self.stride);
        }
        out
    }
}

/// Reranks `candidates` in their given order. With a single window the
/// output carries the reranker's cosine scores; with several windows the
/// scores are rank-derived (`n − i`) so that the list stays sorted.
pub fn rerank_candidates(
    pair: &ModelPair,
    vocab: &Vocabulary,
    query: &Query,
    candidates: &[&Document],
    window: Option<Window>,
) -> Result<(RunList, RerankStats)> {
    let n = candidates.len();
    if n == 0 {
        return Ok((RunList::new(query.qid.clone(), Vec::new()), RerankStats::default()));
    }
    let prompt = Prompt::new(vocab, &query.tokens);
    let budget = pair.reranker.config().transformer.max_len;
    let ranges = match window {
        Some(w) => {
            w.validate()?;
            if prompt.sequence_len(w.size.min(n)) > budget {
                return Err(Error::Config(format!(
                    "window of {} passages exceeds reranker budget {budget}",
                    w.size
                )));
            }
            w.ranges(n)
        }
        None => vec![0..n],
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut scores = vec![0.0; n];
    let mut stats = RerankStats {
        passages: n as u64,
        ..RerankStats::default()
    };
    for r in &ranges {
        let slice: Vec<usize> = order[r.clone()].to_vec();
        let toks: Vec<&[usize]> = slice.iter().map(|&i| candidates[i].tokens.as_slice()).collect();
        let out = pair.rerank(&prompt, &toks)?;
        stats.merge(&out.stats);
        for (dst, &p) in order[r.clone()].iter_mut().zip(&out.permutation) {
            *dst = slice[p];
        }
        for (p, &i) in slice.iter().enumerate() {
            scores[i] = out.scores[p];
        }
    }
    let single = ranges.len() == 1;
    let entries = order
        .iter()
        .enumerate()
        .map(|(rank, &i)| RunEntry {
            doc_id: candidates[i].doc_id.clone(),
            score: if single { scores[i] } else { (n - rank) as f64 },
        })
        .collect();
    Ok((RunList::new(query.qid.clone(), entries), stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    Bm25,
    Dense,
    Rrf,
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bm25 => "bm25",
            Self::Dense => "dense",
            Self::Rrf => "rrf",
        })
    }
}

impl FromStr for RetrievalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bm25" => Ok(Self::Bm25),
            "dense" => Ok(Self::Dense),
            "rrf" => Ok(Self::Rrf),
            other => Err(Error::Config(format!("unknown retrieval mode {other:?} (bm25, dense, rrf)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub mode: RetrievalMode,
    pub depth: usize,
    pub rrf_k: u32,
    /// `None` reranks all candidates in a single pass.
    pub window: Option<Window>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: RetrievalMode::Bm25,
            depth: 100,
            rrf_k: 60,
            window: Some(Window::default()),
        }
    }
}

/// First-stage retrieval for one query.
pub fn retrieve(
    query: &Query,
    bm25: &InvertedIndex,
    dense: Option<(&DenseIndex, &EncoderModel)>,
    cfg: &PipelineConfig,
) -> Result<RunList> {
    let dense_run = || -> Result<RunList> {
        let (index, enc) = dense.ok_or_else(|| Error::Config(format!("{} retrieval needs a dense index", cfg.mode)))?;
        let q = enc.encode_query(&query.tokens)?;
        index.search(&query.qid, q.data(), cfg.depth)
    };
    match cfg.mode {
        RetrievalMode::Bm25 => Ok(bm25.search(&query.qid, &query.tokens, cfg.depth)),
        RetrievalMode::Dense => dense_run(),
        RetrievalMode::Rrf => {
            let a = bm25.search(&query.qid, &query.tokens, cfg.depth);
            let b = dense_run()?;
            let mut fused = rrf_fuse(&a, &b, cfg.rrf_k);
            fused.truncate(cfg.depth);
            Ok(fused)
        }
    }
}

/// First-stage and reranked runs over a query set.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub first_stage: Run,
    pub reranked: Run,
    pub stats: Vec<(String, RerankStats)>,
}

/// Retrieve then rerank every query. Run tags record the retrieval mode.
pub fn end_to_end(
    pair: &ModelPair,
    vocab: &Vocabulary,
    corpus: &Corpus,
    queries: &[Query],
    bm25: &InvertedIndex,
    dense: Option<&DenseIndex>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    let mut first_stage = Run::new(cfg.mode.to_string());
    let mut reranked = Run::new(format!("{}+rerank", cfg.mode));
    let mut stats = Vec::with_capacity(queries.len());
    for q in queries {
        let list = retrieve(q, bm25, dense.map(|d| (d, &pair.encoder)), cfg)?;
        let docs = list
            .entries
            .iter()
            .map(|e| {
                corpus
                    .by_id(&e.doc_id)
                    .ok_or_else(|| Error::Data(format!("retrieved unknown document {}", e.doc_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let (rr, st) = rerank_candidates(pair, vocab, q, &docs, cfg.window)?;
        first_stage.lists.push(list);
        reranked.lists.push(rr);
        stats.push((q.qid.clone(), st));
    }
    Ok(PipelineOutput {
        first_stage,
        reranked,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(id: &str, tokens: Vec<usize>) -> Document {
        Document {
            doc_id: id.into(),
            text: String::new(),
            tokens,
        }
    }

    fn toy() -> Corpus {
        Corpus::new(vec![
            doc("a", vec![10, 11, 10]),
            doc("b", vec![11, 12]),
            doc("c", vec![12, 13, 14, 15]),
        ])
        .unwrap()
    }

    #[test]
    fn bm25_hand_computed() {
        let idx = InvertedIndex::build(&toy(), Bm25Params::default()).unwrap();
        // avgdl = 3, N = 3
        let (k1, b, avgdl) = (1.2, 0.75, 3.0);
        let idf = |df: f64| (1.0f64 + (3.0 - df + 0.5) / (df + 0.5)).ln();
        let term = |tf: f64, len: f64, df: f64| idf(df) * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len / avgdl));
        let s = idx.score_all(&[10, 12]);
        assert!((s[0] - term(2.0, 3.0, 1.0)).abs() < 1e-9);
        assert!((s[1] - term(1.0, 2.0, 2.0)).abs() < 1e-9);
        assert!((s[2] - term(1.0, 4.0, 2.0)).abs() < 1e-9);
        // hand values
        assert!((idf(1.0) - (1.0f64 + 2.5 / 1.5).ln()).abs() < 1e-15);
        assert!((s[0] - 0.980829253011726 * 2.0 * 2.2 / 3.2).abs() < 1e-9);
        let run = idx.search("q", &[10, 12], 10);
        assert_eq!(run.doc_ids(), vec!["a", "b", "c"]);
    }

    #[test]
    fn bm25_edge_cases() {
        let idx = InvertedIndex::build(&toy(), Bm25Params::default()).unwrap();
        assert!(idx.score_all(&[99]).iter().all(|s| *s == 0.0));
        assert!(idx.search("q", &[], 5).is_empty());
        // absent term ties resolve by doc id
        assert_eq!(idx.search("q", &[99], 2).doc_ids(), vec!["a", "b"]);
        let one = InvertedIndex::build(&Corpus::new(vec![doc("z", vec![4])]).unwrap(), Bm25Params::default()).unwrap();
        assert_eq!(one.search("q", &[4], 3).doc_ids(), vec!["z"]);
    }

    #[test]
    fn bm25_persistence() {
        let idx = InvertedIndex::build(&toy(), Bm25Params::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bm25.idx");
        idx.save(&p).unwrap();
        assert_eq!(InvertedIndex::load(&p).unwrap(), idx);
    }

    #[test]
    fn rrf_constants() {
        let a = RunList::new("q", vec![RunEntry { doc_id: "x".into(), score: 9.0 }, RunEntry { doc_id: "y".into(), score: 1.0 }]);
        let b = RunList::new(
            "q",
            vec![
                RunEntry { doc_id: "x".into(), score: 5.0 },
                RunEntry { doc_id: "u".into(), score: 4.0 },
                RunEntry { doc_id: "z".into(), score: 3.0 },
            ],
        );
        let f = rrf_fuse(&a, &b, 60);
        assert_eq!(f.entries[0].doc_id, "x");
        assert_eq!(f.entries[0].score, 1.0 / 61.0 + 1.0 / 61.0);
        assert!((f.entries[0].score - 0.0327869).abs() < 1e-7);
        let z = f.entries.iter().find(|e| e.doc_id == "z").unwrap();
        assert_eq!(z.score, 1.0 / 63.0);
        // y and u tie at 1/62; doc id decides
        assert_eq!(f.doc_ids(), vec!["x", "u", "y", "z"]);
    }

    #[test]
    fn window_ranges() {
        let w = Window::default();
        let r = w.ranges(100);
        assert_eq!(r.len(), 9);
        assert_eq!(r[0], 80..100);
        assert_eq!(r[8], 0..20);
        assert_eq!(w.ranges(15), vec![0..15]);
        assert_eq!(w.ranges(20), vec![0..20]);
        let part = Window { size: 10, stride: 10 }.ranges(30);
        assert_eq!(part, vec![20..30, 10..20, 0..10]);
        assert_eq!(w.ranges(25), vec![5..25, 0..15]);
        assert!(Window { size: 5, stride: 6 }.validate().is_err());
        assert!(Window { size: 5, stride: 0 }.validate().is_err());
    }

    #[test]
    fn mode_parsing() {
        for m in [RetrievalMode::Bm25, RetrievalMode::Dense, RetrievalMode::Rrf] {
            assert_eq!(m.to_string().parse::<RetrievalMode>().unwrap(), m);
        }
        assert!("bm26".parse::<RetrievalMode>().is_err());
    }

    fn random_run(ids: &[usize]) -> RunList {
        RunList::new(
            "q",
            ids.iter()
                .enumerate()
                .map(|(i, d)| RunEntry {
                    doc_id: format!("d{d:02}"),
                    score: -(i as f64),
                })
                .collect(),
        )
    }

    proptest! {
        #[test]
        fn rrf_matches_naive_oracle(
            a in Just((0..20usize).collect::<Vec<_>>()).prop_shuffle(),
            b in Just((0..20usize).collect::<Vec<_>>()).prop_shuffle(),
            la in 0usize..20, lb in 0usize..20,
        ) {
            let ra = random_run(&a[..la]);
            let rb = random_run(&b[..lb]);
            let fused = rrf_fuse(&ra, &rb, 60);
            // naive: scan every doc id, look up ranks linearly
            let mut naive: Vec<(f64, String)> = Vec::new();
            for d in 0..20 {
                let id = format!("d{d:02}");
                let mut s = 0.0;
                let mut seen = false;
                for r in [&ra, &rb] {
                    if let Some(pos) = r.entries.iter().position(|e| e.doc_id == id) {
                        s += 1.0 / (60.0 + pos as f64 + 1.0);
                        seen = true;
                    }
                }
                if seen {
                    naive.push((s, id));
                }
            }
            naive.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
            prop_assert_eq!(fused.len(), naive.len());
            for (e, (s, id)) in fused.entries.iter().zip(&naive) {
                prop_assert_eq!(&e.doc_id, id);
                prop_assert_eq!(e.score, *s);
            }
            let swapped = rrf_fuse(&rb, &ra, 60);
            prop_assert_eq!(swapped.doc_ids(), fused.doc_ids());
        }
    }
}
