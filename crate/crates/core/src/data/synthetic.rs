//! Seeded topic-model corpus with graded queries and training samples.
//!
//! Every document is written from one latent topic. Topics are grouped into
//! clusters of near-topics that share a pool of cluster words, and each
//! topic's documents borrow some words from an unrelated partner topic.
//! Queries are written mostly in per-topic synonyms that documents rarely
//! use, so term overlap is an imperfect guide to relevance while the topic
//! structure remains learnable from training data.
//!
//! Grades: same topic is 2, a near-topic document is 1, the rest 0.

use std::collections::{BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, Document, Qrels, Query};
use super::sample::{rank_labels_from_grades, Candidate, RankingSample};
use super::vocab::Vocabulary;
use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_topics: usize,
    pub topics_per_cluster: usize,
    pub n_docs: usize,
    /// Training queries.
    pub n_queries: usize,
    pub n_eval_queries: usize,
    /// Probability that a stage-1 training grade is moved by one step.
    pub grade_noise: f64,
    /// Share of own-topic words at or above which an on-topic document is
    /// graded 3 rather than 2.
    pub high_overlap: f64,
    pub topic_words: usize,
    /// Query-side words per topic that documents rarely use.
    pub synonym_words: usize,
    pub cluster_words: usize,
    pub background_words: usize,
    pub doc_len_min: usize,
    pub doc_len_max: usize,
    pub topic_word_prob: f64,
    pub cluster_word_prob: f64,
    /// Per-token probability of a word borrowed from an unrelated topic.
    pub distractor_prob: f64,
    /// Fraction of topic-word draws in documents that use a synonym.
    pub synonym_doc_prob: f64,
    /// Probability that a query also carries a document-side topic word.
    pub query_topic_word_prob: f64,
    pub query_cluster_word_prob: f64,
    pub query_background_prob: f64,
    pub stage1_candidates: usize,
    pub stage1_per_query: usize,
    /// Lexical pool depth from which stage-1 candidates are drawn.
    pub stage1_pool: usize,
    pub stage2_negatives: usize,
    /// Stage-2 negatives taken from the top of the lexical pool; the rest
    /// are random off-topic documents.
    pub stage2_hard_negatives: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_topics: 16,
            topics_per_cluster: 2,
            n_docs: 600,
            n_queries: 400,
            n_eval_queries: 10,
            grade_noise: 0.1,
            high_overlap: 0.45,
            topic_words: 24,
            synonym_words: 3,
            cluster_words: 10,
            background_words: 150,
            doc_len_min: 18,
            doc_len_max: 30,
            topic_word_prob: 0.35,
            cluster_word_prob: 0.2,
            distractor_prob: 0.1,
            synonym_doc_prob: 0.02,
            query_topic_word_prob: 0.3,
            query_cluster_word_prob: 0.7,
            query_background_prob: 0.5,
            stage1_candidates: 20,
            stage1_per_query: 1,
            stage1_pool: 60,
            stage2_negatives: 15,
            stage2_hard_negatives: 10,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_topics", self.n_topics),
            ("topics_per_cluster", self.topics_per_cluster),
            ("n_docs", self.n_docs),
            ("n_queries", self.n_queries),
            ("n_eval_queries", self.n_eval_queries),
            ("synonym_words", self.synonym_words),
            ("cluster_words", self.cluster_words),
            ("background_words", self.background_words),
            ("doc_len_min", self.doc_len_min),
            ("stage1_candidates", self.stage1_candidates),
            ("stage1_per_query", self.stage1_per_query),
            ("stage2_negatives", self.stage2_negatives),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("data.{name} must be at least 1")));
        }
        if self.topic_words < 2 {
            return Err(Error::Config("data.topic_words must be at least 2".into()));
        }
        if self.doc_len_min < 2 || self.doc_len_max < self.doc_len_min {
            return Err(Error::Config("data.doc_len_min/doc_len_max out of order".into()));
        }
        let probs = [
            self.grade_noise,
            self.high_overlap,
            self.topic_word_prob,
            self.cluster_word_prob,
            self.distractor_prob,
            self.synonym_doc_prob,
            self.query_topic_word_prob,
            self.query_cluster_word_prob,
            self.query_background_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p))
            || self.topic_word_prob + self.cluster_word_prob + self.distractor_prob > 1.0
        {
            return Err(Error::Config("data word/noise probabilities out of range".into()));
        }
        if self.stage2_hard_negatives > self.stage2_negatives {
            return Err(Error::Config("data.stage2_hard_negatives exceeds data.stage2_negatives".into()));
        }
        if self.n_docs < self.n_topics {
            return Err(Error::Config(format!(
                "n_docs {} cannot cover {} topics",
                self.n_docs, self.n_topics
            )));
        }
        Ok(())
    }

    fn cluster_of(&self, topic: usize) -> usize {
        topic / self.topics_per_cluster
    }

    fn n_clusters(&self) -> usize {
        self.n_topics.div_ceil(self.topics_per_cluster)
    }

    /// A topic in a different cluster whose words leak into this topic's
    /// documents, or `None` with a single cluster.
    fn partner(&self, topic: usize) -> Option<usize> {
        let nc = self.n_clusters();
        if nc < 2 {
            return None;
        }
        let shift = (nc / 2).max(1) * self.topics_per_cluster;
        let p = (topic + shift) % self.n_topics;
        (self.cluster_of(p) != self.cluster_of(topic)).then_some(p)
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// `count` distinct three-syllable pseudo-words.
fn pseudo_words(count: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let syllables: Vec<String> = CONSONANTS
        .iter()
        .flat_map(|c| VOWELS.iter().map(move |v| format!("{}{}", *c as char, *v as char)))
        .collect();
    let space = syllables.len().pow(3);
    let mut picked = BTreeSet::new();
    let mut order = Vec::with_capacity(count);
    while order.len() < count {
        let i = rng.random_range(0..space);
        if picked.insert(i) {
            order.push(i);
        }
    }
    let n = syllables.len();
    order
        .into_iter()
        .map(|i| format!("{}{}{}", syllables[i / (n * n)], syllables[(i / n) % n], syllables[i % n]))
        .collect()
}

struct Lexicon {
    topic: Vec<Vec<String>>,
    synonyms: Vec<Vec<String>>,
    cluster: Vec<Vec<String>>,
    background: Vec<String>,
}

struct SynthDoc {
    topic: usize,
    words: Vec<String>,
    /// Fraction of words drawn from the document's own topic or its synonyms.
    topic_share: f64,
}

const MAX_GRADE: u32 = 3;

fn grade(cfg: &SyntheticConfig, query_topic: usize, d: &SynthDoc) -> u32 {
    if d.topic == query_topic {
        if d.topic_share >= cfg.high_overlap {
            3
        } else {
            2
        }
    } else if cfg.cluster_of(d.topic) == cfg.cluster_of(query_topic) {
        1
    } else {
        0
    }
}

fn noisy(grade: u32, p: f64, rng: &mut ChaCha8Rng) -> u32 {
    if rng.random_bool(p) {
        if grade == 0 || (grade < MAX_GRADE && rng.random_bool(0.5)) {
            grade + 1
        } else {
            grade - 1
        }
    } else {
        grade
    }
}

/// Builds a sample from `(doc index, grade)` pairs. The candidate order is
/// shuffled; the positive is the best label, ties broken by doc id.
fn make_sample(qid: &str, picked: Vec<(usize, u32)>, docs: &[Document], rng: &mut ChaCha8Rng) -> Option<RankingSample> {
    let mut picked = picked;
    picked.shuffle(rng);
    let grades: Vec<u32> = picked.iter().map(|p| p.1).collect();
    let labels = rank_labels_from_grades(&grades);
    let candidates: Vec<Candidate> = picked
        .iter()
        .zip(&labels)
        .map(|(&(d, g), &r)| Candidate {
            doc_id: docs[d].doc_id.clone(),
            rank_label: r,
            grade: g,
        })
        .collect();
    let positive = (0..candidates.len())
        .min_by(|&a, &b| {
            (candidates[a].rank_label, &candidates[a].doc_id).cmp(&(candidates[b].rank_label, &candidates[b].doc_id))
        })
        .unwrap();
    let sample = RankingSample {
        qid: qid.to_string(),
        candidates,
        positive,
    };
    (!sample.ordered_pairs().is_empty()).then_some(sample)
}

/// Draws up to `n` distinct items from `pool`, skipping anything in `used`.
fn draw(pool: &[usize], n: usize, used: &mut HashSet<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let free: Vec<usize> = pool.iter().copied().filter(|d| !used.contains(d)).collect();
    let out: Vec<usize> = free.choose_multiple(rng, n.min(free.len())).copied().collect();
    used.extend(&out);
    out
}

/// Documents ordered by the number of distinct query words they contain,
/// ties in random order: a crude stand-in for a first-stage retriever.
fn lexical_pool(query: &[String], doc_sets: &[HashSet<&str>], depth: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let q: BTreeSet<&str> = query.iter().map(String::as_str).collect();
    let mut order: Vec<usize> = (0..doc_sets.len()).collect();
    order.shuffle(rng);
    let overlap = |d: usize| q.iter().filter(|w| doc_sets[d].contains(*w)).count();
    order.sort_by_key(|&d| std::cmp::Reverse(overlap(d)));
    order.truncate(depth);
    order
}

/// Generates a complete dataset. Identical seeds give identical output.
pub fn generate_synthetic(seed: u64, cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_clusters = cfg.n_clusters();

    let total_words = cfg.n_topics * (cfg.topic_words + cfg.synonym_words)
        + n_clusters * cfg.cluster_words
        + cfg.background_words;
    let mut words = pseudo_words(total_words, &mut rng).into_iter();
    let mut take = |n: usize| -> Vec<String> { words.by_ref().take(n).collect() };
    let lex = Lexicon {
        topic: (0..cfg.n_topics).map(|_| take(cfg.topic_words)).collect(),
        synonyms: (0..cfg.n_topics).map(|_| take(cfg.synonym_words)).collect(),
        cluster: (0..n_clusters).map(|_| take(cfg.cluster_words)).collect(),
        background: take(cfg.background_words),
    };

    // balanced topic assignment in shuffled order
    let mut topics: Vec<usize> = (0..cfg.n_docs).map(|i| i % cfg.n_topics).collect();
    topics.shuffle(&mut rng);
    let mut by_topic: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_topics];
    let synth_docs: Vec<SynthDoc> = topics
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            by_topic[t].push(i);
            let len = rng.random_range(cfg.doc_len_min..=cfg.doc_len_max);
            let tw = &lex.topic[t];
            let cw = &lex.cluster[cfg.cluster_of(t)];
            let partner = cfg.partner(t);
            let mut w: Vec<String> = tw.choose_multiple(&mut rng, 2).cloned().collect();
            while w.len() < len {
                let u: f64 = rng.random();
                let pool = if u < cfg.topic_word_prob {
                    if rng.random_bool(cfg.synonym_doc_prob) {
                        &lex.synonyms[t]
                    } else {
                        tw
                    }
                } else if u < cfg.topic_word_prob + cfg.cluster_word_prob {
                    cw
                } else if u < cfg.topic_word_prob + cfg.cluster_word_prob + cfg.distractor_prob {
                    partner.map_or(&lex.background, |p| &lex.topic[p])
                } else {
                    &lex.background
                };
                w.push(pool.choose(&mut rng).unwrap().clone());
            }
            w.shuffle(&mut rng);
            let own = w.iter().filter(|x| tw.contains(x) || lex.synonyms[t].contains(x)).count();
            let topic_share = own as f64 / w.len() as f64;
            SynthDoc { topic: t, words: w, topic_share }
        })
        .collect();

    for t in 0..cfg.n_topics {
        let others = cfg.n_docs - by_topic[t].len();
        if others < cfg.stage2_negatives {
            return Err(Error::Data(format!(
                "n_docs {} leaves only {others} off-topic documents for topic {t}; {} negatives needed",
                cfg.n_docs, cfg.stage2_negatives
            )));
        }
    }
    if cfg.n_docs < cfg.stage1_candidates {
        return Err(Error::Data(format!(
            "n_docs {} is smaller than stage1_candidates {}",
            cfg.n_docs, cfg.stage1_candidates
        )));
    }

    // queries: one or two synonyms, optionally a document-side topic word, a
    // cluster word and a background word
    let n_q = cfg.n_queries + cfg.n_eval_queries;
    let synth_queries: Vec<(usize, Vec<String>)> = (0..n_q)
        .map(|_| {
            let topic = rng.random_range(0..cfg.n_topics);
            let n_syn = if rng.random_bool(0.5) { 1 } else { 2 };
            let mut words: Vec<String> = lex.synonyms[topic].choose_multiple(&mut rng, n_syn).cloned().collect();
            if rng.random_bool(cfg.query_topic_word_prob) {
                words.push(lex.topic[topic].choose(&mut rng).unwrap().clone());
            }
            if rng.random_bool(cfg.query_cluster_word_prob) {
                words.push(lex.cluster[cfg.cluster_of(topic)].choose(&mut rng).unwrap().clone());
            }
            if rng.random_bool(cfg.query_background_prob) {
                words.push(lex.background.choose(&mut rng).unwrap().clone());
            }
            words.shuffle(&mut rng);
            (topic, words)
        })
        .collect();

    let doc_texts: Vec<String> = synth_docs.iter().map(|d| d.words.join(" ")).collect();
    let query_texts: Vec<String> = synth_queries.iter().map(|q| q.1.join(" ")).collect();
    let vocab = Vocabulary::build(doc_texts.iter().chain(&query_texts).map(String::as_str));
    let docs: Vec<Document> = doc_texts
        .iter()
        .enumerate()
        .map(|(i, text)| Document {
            doc_id: format!("d{i:05}"),
            text: text.clone(),
            tokens: vocab.tokenize(text),
        })
        .collect();
    let doc_sets: Vec<HashSet<&str>> = synth_docs
        .iter()
        .map(|d| d.words.iter().map(String::as_str).collect())
        .collect();

    let mut qrels = Qrels::new();
    let mut queries = Vec::with_capacity(n_q);
    let mut grades: Vec<Vec<u32>> = Vec::with_capacity(n_q);
    for (i, (topic, _)) in synth_queries.iter().enumerate() {
        let qid = if i < cfg.n_queries {
            format!("train{i:05}")
        } else {
            format!("eval{:04}", i - cfg.n_queries)
        };
        let g: Vec<u32> = synth_docs.iter().map(|d| grade(cfg, *topic, d)).collect();
        for (d, &gr) in docs.iter().zip(&g) {
            if gr > 0 {
                qrels.insert(&qid, &d.doc_id, gr);
            }
        }
        grades.push(g);
        queries.push(Query {
            qid,
            tokens: vocab.tokenize(&query_texts[i]),
            text: query_texts[i].clone(),
        });
    }

    let mut stage1 = Vec::new();
    let mut stage2 = Vec::new();
    let all_docs: Vec<usize> = (0..cfg.n_docs).collect();
    for (qi, (topic, qwords)) in synth_queries.iter().enumerate().take(cfg.n_queries) {
        let qid = &queries[qi].qid;
        let g = &grades[qi];
        let pool = lexical_pool(qwords, &doc_sets, cfg.stage1_pool.max(cfg.stage1_candidates), &mut rng);
        let on_topic = &by_topic[*topic];

        for _ in 0..cfg.stage1_per_query {
            let mut picked: Vec<usize> = pool.choose_multiple(&mut rng, cfg.stage1_candidates).copied().collect();
            if !picked.iter().any(|d| synth_docs[*d].topic == *topic) {
                let extra = *on_topic.choose(&mut rng).unwrap();
                *picked.last_mut().unwrap() = extra;
            }
            let labelled = picked
                .into_iter()
                .map(|d| (d, noisy(g[d], cfg.grade_noise, &mut rng)))
                .collect();
            if let Some(s) = make_sample(qid, labelled, &docs, &mut rng) {
                stage1.push(s);
            }
        }

        let pooled_on_topic: Vec<usize> = pool.iter().copied().filter(|d| synth_docs[*d].topic == *topic).collect();
        let positive = *pooled_on_topic.choose(&mut rng).unwrap_or_else(|| on_topic.choose(&mut rng).unwrap());
        let off_topic: Vec<usize> = all_docs.iter().copied().filter(|d| synth_docs[*d].topic != *topic).collect();
        let mut used = HashSet::from([positive]);
        let mut picked = vec![positive];
        for &d in pool.iter().filter(|d| synth_docs[**d].topic != *topic) {
            if picked.len() > cfg.stage2_hard_negatives {
                break;
            }
            used.insert(d);
            picked.push(d);
        }
        let rest = cfg.stage2_negatives + 1 - picked.len();
        picked.extend(draw(&off_topic, rest, &mut used, &mut rng));
        let labelled = picked.into_iter().map(|d| (d, g[d])).collect();
        if let Some(s) = make_sample(qid, labelled, &docs, &mut rng) {
            stage2.push(s);
        }
    }

    let corpus = Corpus::new(docs)?;
    let eval_queries = queries.split_off(cfg.n_queries);
    Ok(Dataset {
        vocab,
        corpus,
        train_queries: queries,
        eval_queries,
        qrels,
        stage1,
        stage2,
    })
}
