//! Tokenization, corpus and judgment I/O, training samples and the
//! synthetic data generator.

mod corpus;
mod sample;
mod synthetic;
mod vocab;

use std::path::Path;

pub use corpus::{
    load_corpus, load_queries, load_raw_corpus, load_raw_queries, save_corpus, save_queries, Corpus, Document,
    Qrels, Query, RawDoc,
};
pub use sample::{load_samples, rank_labels_from_grades, save_samples, Candidate, RankingSample};
pub use synthetic::{generate_synthetic, SyntheticConfig};
pub use vocab::{split_words, Vocabulary, EOS, EOS_ID, INSTRUCTION, PAD, PAD_ID, UNK, UNK_ID};

use crate::error::{Error, Result};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const TRAIN_QUERIES_FILE: &str = "queries.tsv";
pub const EVAL_QUERIES_FILE: &str = "eval_queries.tsv";
pub const QRELS_FILE: &str = "qrels.txt";
pub const STAGE1_FILE: &str = "stage1.jsonl";
pub const STAGE2_FILE: &str = "stage2.jsonl";

/// Everything needed to train and evaluate: corpus, queries, judgments and
/// the two training-sample sets.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub corpus: Corpus,
    pub train_queries: Vec<Query>,
    pub eval_queries: Vec<Query>,
    pub qrels: Qrels,
    pub stage1: Vec<RankingSample>,
    pub stage2: Vec<RankingSample>,
}

impl Dataset {
    pub fn query(&self, qid: &str) -> Option<&Query> {
        self.train_queries
            .iter()
            .chain(&self.eval_queries)
            .find(|q| q.qid == qid)
    }

    /// Rejects samples that break the positive/negative partition or point
    /// at unknown queries or documents.
    pub fn validate(&self) -> Result<()> {
        for s in self.stage1.iter().chain(&self.stage2) {
            if !self.train_queries.iter().any(|q| q.qid == s.qid) {
                return Err(Error::Data(format!("sample references unknown query {}", s.qid)));
            }
            s.validate(&self.corpus)?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        save_corpus(&self.corpus, &dir.join(CORPUS_FILE))?;
        save_queries(&self.train_queries, &dir.join(TRAIN_QUERIES_FILE))?;
        save_queries(&self.eval_queries, &dir.join(EVAL_QUERIES_FILE))?;
        self.qrels.save(&dir.join(QRELS_FILE))?;
        save_samples(&self.stage1, &dir.join(STAGE1_FILE))?;
        save_samples(&self.stage2, &dir.join(STAGE2_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let corpus = load_corpus(&dir.join(CORPUS_FILE), &vocab)?;
        let ds = Self {
            train_queries: load_queries(&dir.join(TRAIN_QUERIES_FILE), &vocab)?,
            eval_queries: load_queries(&dir.join(EVAL_QUERIES_FILE), &vocab)?,
            qrels: Qrels::load(&dir.join(QRELS_FILE))?,
            stage1: load_samples(&dir.join(STAGE1_FILE))?,
            stage2: load_samples(&dir.join(STAGE2_FILE))?,
            vocab,
            corpus,
        };
        ds.validate()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let cfg = SyntheticConfig {
            n_topics: 4,
            n_docs: 60,
            n_queries: 5,
            n_eval_queries: 2,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic(9, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.corpus.docs(), ds.corpus.docs());
        assert_eq!(back.train_queries, ds.train_queries);
        assert_eq!(back.eval_queries, ds.eval_queries);
        assert_eq!(back.qrels, ds.qrels);
        assert_eq!(back.stage1, ds.stage1);
        assert_eq!(back.stage2, ds.stage2);
    }
}
