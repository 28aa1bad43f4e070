//! Ranked result lists and the TREC run format.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::reranker::stable_argsort_desc;

#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub doc_id: String,
    pub score: f64,
}

/// Documents for one query, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RunList {
    pub qid: String,
    pub entries: Vec<RunEntry>,
}

impl RunList {
    pub fn new(qid: impl Into<String>, entries: Vec<RunEntry>) -> Self {
        Self {
            qid: qid.into(),
            entries,
        }
    }

    /// Sorts by score descending, ties kept in input order.
    pub fn from_scores(qid: impl Into<String>, doc_ids: &[String], scores: &[f64]) -> Self {
        let entries = stable_argsort_desc(scores)
            .into_iter()
            .map(|i| RunEntry {
                doc_id: doc_ids[i].clone(),
                score: scores[i],
            })
            .collect();
        Self::new(qid, entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn doc_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.doc_id.as_str()).collect()
    }

    /// 1-based rank of a document.
    pub fn rank_of(&self, doc_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.doc_id == doc_id).map(|p| p + 1)
    }

    pub fn is_sorted(&self) -> bool {
        self.entries.windows(2).all(|w| w[0].score >= w[1].score)
    }

    pub fn truncate(&mut self, k: usize) {
        self.entries.truncate(k);
    }
}

/// A run over several queries, tagged with the system name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Run {
    pub tag: String,
    pub lists: Vec<RunList>,
}

impl Run {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            lists: Vec::new(),
        }
    }

    pub fn get(&self, qid: &str) -> Option<&RunList> {
        self.lists.iter().find(|l| l.qid == qid)
    }

    /// `qid Q0 docid rank score tag`, scores with six decimals.
    pub fn to_trec(&self) -> String {
        let mut out = String::new();
        for list in &self.lists {
            for (i, e) in list.entries.iter().enumerate() {
                out.push_str(&format!(
                    "{} Q0 {} {} {:.6} {}\n",
                    list.qid,
                    e.doc_id,
                    i + 1,
                    e.score,
                    self.tag
                ));
            }
        }
        out
    }

    /// Queries keep first-appearance order; entries are ordered by the rank column.
    pub fn parse_trec(text: &str, path: &Path) -> Result<Self> {
        let mut tag: Option<String> = None;
        let mut order: Vec<String> = Vec::new();
        let mut rows: HashMap<String, Vec<(usize, RunEntry)>> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.into(),
                line: i + 1,
                msg,
            };
            let cols: Vec<&str> = line.split_whitespace().collect();
            let [qid, _, doc_id, rank, score, run_tag] = cols.as_slice() else {
                return Err(err(format!("expected 6 columns, found {}", cols.len())));
            };
            let rank: usize = rank.parse().map_err(|_| err(format!("bad rank {rank:?}")))?;
            let score: f64 = score.parse().map_err(|_| err(format!("bad score {score:?}")))?;
            match &tag {
                None => tag = Some(run_tag.to_string()),
                Some(t) if t != run_tag => return Err(err(format!("mixed run tags {t} and {run_tag}"))),
                _ => {}
            }
            if !rows.contains_key(*qid) {
                order.push(qid.to_string());
            }
            rows.entry(qid.to_string()).or_default().push((
                rank,
                RunEntry {
                    doc_id: doc_id.to_string(),
                    score,
                },
            ));
        }
        let lists = order
            .into_iter()
            .map(|qid| {
                let mut r = rows.remove(&qid).unwrap();
                r.sort_by_key(|(rank, _)| *rank);
                RunList::new(qid, r.into_iter().map(|(_, e)| e).collect())
            })
            .collect();
        Ok(Self {
            tag: tag.unwrap_or_default(),
            lists,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_trec()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_trec(&text, path)
    }
}
