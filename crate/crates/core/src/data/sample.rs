use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub doc_id: String,
    /// Smaller is more relevant; equal labels are ties.
    pub rank_label: u32,
    /// Relevance on the 0-3 scale.
    pub grade: u32,
}

/// One training instance: a query with graded candidates, exactly one of
/// which is the designated positive. All other candidates are negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankingSample {
    pub qid: String,
    pub candidates: Vec<Candidate>,
    pub positive: usize,
}

/// Dense rank of each grade under descending order: the best grade gets 0,
/// equal grades share a label.
pub fn rank_labels_from_grades(grades: &[u32]) -> Vec<u32> {
    let mut distinct: Vec<u32> = grades.to_vec();
    distinct.sort_unstable_by(|a, b| b.cmp(a));
    distinct.dedup();
    grades
        .iter()
        .map(|g| distinct.iter().position(|d| d == g).unwrap() as u32)
        .collect()
}

impl RankingSample {
    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.candidates.len()).filter(move |&i| i != self.positive)
    }

    /// `(j, k)` index pairs with `r_j < r_k`; tied labels are skipped.
    pub fn ordered_pairs(&self) -> Vec<(usize, usize)> {
        let c = &self.candidates;
        let mut pairs = Vec::new();
        for j in 0..c.len() {
            for k in 0..c.len() {
                if c[j].rank_label < c[k].rank_label {
                    pairs.push((j, k));
                }
            }
        }
        pairs
    }

    /// Checks the positive/negative partition and corpus references.
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        let fail = |msg: String| Err(Error::Data(format!("sample for {}: {msg}", self.qid)));
        if self.candidates.len() < 2 {
            return fail("fewer than two candidates".into());
        }
        let Some(pos) = self.candidates.get(self.positive) else {
            return fail(format!("positive index {} out of range", self.positive));
        };
        if self.candidates.iter().any(|c| c.rank_label < pos.rank_label) {
            return fail("a negative outranks the designated positive".into());
        }
        let mut seen = HashSet::new();
        for c in &self.candidates {
            if corpus.position(&c.doc_id).is_none() {
                return fail(format!("unknown doc_id {}", c.doc_id));
            }
            if !seen.insert(c.doc_id.as_str()) {
                return fail(format!("doc_id {} listed twice", c.doc_id));
            }
            if c.grade > 3 {
                return fail(format!("grade {} outside 0-3", c.grade));
            }
        }
        if self.ordered_pairs().is_empty() {
            return fail("no strictly ordered candidate pair".into());
        }
        Ok(())
    }
}

pub fn save_samples(samples: &[RankingSample], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s).map_err(|e| Error::Format(e.to_string()))?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_samples(path: &Path) -> Result<Vec<RankingSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.into(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
