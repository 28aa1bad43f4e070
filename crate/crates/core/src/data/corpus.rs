use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{Error, Result};

/// A passage with its tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub qid: String,
    pub text: String,
    pub tokens: Vec<usize>,
}

/// Raw `(id, text)` record as stored in a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDoc {
    pub id: String,
    pub text: String,
}

/// Documents with unique ids, addressable by position or id.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if d.tokens.is_empty() {
                return Err(Error::Data(format!("document {} has no tokens", d.doc_id)));
            }
            if by_id.insert(d.doc_id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate doc_id {}", d.doc_id)));
            }
        }
        Ok(Self { docs, by_id })
    }

    pub fn from_raw(raw: &[RawDoc], vocab: &Vocabulary) -> Result<Self> {
        let docs = raw
            .iter()
            .map(|r| Document {
                doc_id: r.id.clone(),
                text: r.text.clone(),
                tokens: vocab.tokenize(&r.text),
            })
            .collect();
        Self::new(docs)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, i: usize) -> &Document {
        &self.docs[i]
    }

    pub fn position(&self, doc_id: &str) -> Option<usize> {
        self.by_id.get(doc_id).copied()
    }

    pub fn by_id(&self, doc_id: &str) -> Option<&Document> {
        self.position(doc_id).map(|i| &self.docs[i])
    }

    pub fn raw(&self) -> Vec<RawDoc> {
        self.docs
            .iter()
            .map(|d| RawDoc {
                id: d.doc_id.clone(),
                text: d.text.clone(),
            })
            .collect()
    }
}

/// Graded relevance judgments; absent pairs are grade 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, qid: &str, doc_id: &str, grade: u32) {
        self.judgments
            .entry(qid.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade);
    }

    pub fn grade(&self, qid: &str, doc_id: &str) -> u32 {
        self.judgments
            .get(qid)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn contains_query(&self, qid: &str) -> bool {
        self.judgments.contains_key(qid)
    }

    pub fn query(&self, qid: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(qid)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn relevant_count(&self, qid: &str) -> usize {
        self.judgments
            .get(qid)
            .map_or(0, |m| m.values().filter(|&&g| g > 0).count())
    }

    /// TREC 4-column text: `qid 0 docid grade`.
    pub fn to_trec(&self) -> String {
        let mut out = String::new();
        for (q, docs) in &self.judgments {
            for (d, g) in docs {
                out.push_str(&format!("{q} 0 {d} {g}\n"));
            }
        }
        out
    }

    pub fn parse_trec(text: &str, path: &Path) -> Result<Self> {
        let mut qrels = Self::new();
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
            let [qid, _, doc_id, grade] = cols.as_slice() else {
                return Err(err(format!("expected 4 columns, found {}", cols.len())));
            };
            let grade: i64 = grade.parse().map_err(|_| err(format!("bad grade {grade:?}")))?;
            if grade < 0 {
                return Err(err(format!("negative grade {grade}")));
            }
            qrels.insert(qid, doc_id, grade as u32);
        }
        Ok(qrels)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_trec(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_trec()).map_err(|e| Error::io(path, e))
    }
}

/// Reads `{"id": ..., "text": ...}` records, one per line.
pub fn load_raw_corpus(path: &Path) -> Result<Vec<RawDoc>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawDoc = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.into(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if let Some(prev) = seen.insert(rec.id.clone(), i + 1) {
            return Err(Error::Parse {
                path: path.into(),
                line: i + 1,
                msg: format!("duplicate doc_id {} (first on line {prev})", rec.id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path, vocab: &Vocabulary) -> Result<Corpus> {
    Corpus::from_raw(&load_raw_corpus(path)?, vocab)
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in corpus.raw() {
        serde_json::to_writer(&mut buf, &r).map_err(|e| Error::Format(e.to_string()))?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads `qid<TAB>text` lines.
pub fn load_raw_queries(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((qid, q)) = line.split_once('\t') else {
            return Err(Error::Parse {
                path: path.into(),
                line: i + 1,
                msg: "expected qid<TAB>text".into(),
            });
        };
        out.push((qid.to_string(), q.to_string()));
    }
    Ok(out)
}

pub fn load_queries(path: &Path, vocab: &Vocabulary) -> Result<Vec<Query>> {
    Ok(load_raw_queries(path)?
        .into_iter()
        .map(|(qid, text)| Query {
            tokens: vocab.tokenize(&text),
            qid,
            text,
        })
        .collect())
}

pub fn save_queries(queries: &[Query], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for q in queries {
        writeln!(f, "{}\t{}", q.qid, q.text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
