//! TextBench: link-prediction triplets with short entity labels.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::KnowledgeGraph;
use crate::label::token_count;

pub const MAX_ENTITY_TOKENS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TextTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextBenchSplit {
    pub train: Vec<TextTriple>,
    pub test: Vec<TextTriple>,
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    pub seed: u64,
}

/// Number of training items for an 85:15 split of `n`.
pub fn train_size(n: usize) -> usize {
    (n * 85 + 50) / 100
}

/// Keeps triplets whose head and tail have at most three whitespace tokens,
/// orders them by label, shuffles with `seed` and splits 85:15.
pub fn export_textbench(graph: &KnowledgeGraph, seed: u64) -> Result<TextBenchSplit> {
    let mut triples: Vec<TextTriple> = graph
        .triplets()
        .filter_map(|t| {
            let head = &graph.entity(&t.head)?.label;
            let tail = &graph.entity(&t.tail)?.label;
            let relation = &graph.relation(&t.relation)?.label;
            (token_count(head) <= MAX_ENTITY_TOKENS && token_count(tail) <= MAX_ENTITY_TOKENS).then(
                || TextTriple {
                    head: head.clone(),
                    relation: relation.clone(),
                    tail: tail.clone(),
                },
            )
        })
        .collect();
    if triples.is_empty() {
        return Err(Error::EmptyAfterFilter);
    }
    triples.sort();
    triples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = triples.split_off(train_size(triples.len()));
    let train = triples;
    let mut entities = BTreeSet::new();
    let mut relations = BTreeSet::new();
    for t in train.iter().chain(&test) {
        entities.insert(t.head.clone());
        entities.insert(t.tail.clone());
        relations.insert(t.relation.clone());
    }
    Ok(TextBenchSplit {
        train,
        test,
        entities: entities.into_iter().collect(),
        relations: relations.into_iter().collect(),
        seed,
    })
}

pub fn to_tsv(triples: &[TextTriple]) -> String {
    triples
        .iter()
        .map(|t| format!("{}\t{}\t{}\n", t.head, t.relation, t.tail))
        .collect()
}

pub fn parse_tsv(text: &str) -> Result<Vec<TextTriple>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            match f.as_slice() {
                [h, r, t] => Ok(TextTriple {
                    head: h.to_string(),
                    relation: r.to_string(),
                    tail: t.to_string(),
                }),
                _ => Err(Error::Parse(format!("line {}: expected 3 tab-separated fields", i + 1))),
            }
        })
        .collect()
}

pub fn read_tsv(path: &Path) -> Result<Vec<TextTriple>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

impl TextBenchSplit {
    /// Writes `train.tsv`, `test.tsv`, `entities.txt` and `relations.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lines = |v: &[String]| v.iter().map(|s| format!("{s}\n")).collect::<String>();
        for (name, body) in [
            ("train.tsv", to_tsv(&self.train)),
            ("test.tsv", to_tsv(&self.test)),
            ("entities.txt", lines(&self.entities)),
            ("relations.txt", lines(&self.relations)),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path, seed: u64) -> Result<Self> {
        let train = read_tsv(&dir.join("train.tsv"))?;
        let test = read_tsv(&dir.join("test.tsv"))?;
        let list = |name: &str| -> Result<Vec<String>> {
            let path = dir.join(name);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Ok(text.lines().filter(|l| !l.is_empty()).map(String::from).collect())
        };
        Ok(Self {
            train,
            test,
            entities: list("entities.txt")?,
            relations: list("relations.txt")?,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Kind, Provenance};

    fn graph(n: usize, long_tail: bool) -> KnowledgeGraph {
        let mut g = KnowledgeGraph::new();
        let r = g.define_relation("Have", Kind::Visual).unwrap();
        for i in 0..n {
            let h = g.upsert_entity(&format!("animal {i}"), Kind::Visual).unwrap();
            let t = g.upsert_entity(&format!("part {i}"), Kind::Visual).unwrap();
            g.insert_triplet(&h, &r, &t, Provenance::LlmExtracted, None).unwrap();
        }
        if long_tail {
            let h = g.upsert_entity("ibex", Kind::Visual).unwrap();
            let t = g.upsert_entity("very long curved horn", Kind::Visual).unwrap();
            g.insert_triplet(&h, &r, &t, Provenance::LlmExtracted, None).unwrap();
        }
        g
    }

    #[test]
    fn token_rule_and_ratio() {
        let s = export_textbench(&graph(100, true), 7).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (85, 15));
        assert!(!s.entities.contains(&"very long curved horn".to_string()));
        let train: BTreeSet<_> = s.train.iter().collect();
        assert!(s.test.iter().all(|t| !train.contains(t)));
        for n in 1..60 {
            let s = export_textbench(&graph(n, false), 1).unwrap();
            let exact = n as f64 * 0.85;
            assert!((s.train.len() as f64 - exact).abs() <= 1.0);
        }
    }

    #[test]
    fn deterministic_files() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        export_textbench(&graph(40, false), 3).unwrap().write(&a).unwrap();
        export_textbench(&graph(40, false), 3).unwrap().write(&b).unwrap();
        for f in ["train.tsv", "test.tsv", "entities.txt", "relations.txt"] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        }
        let back = TextBenchSplit::read(&a, 3).unwrap();
        assert_eq!(back, export_textbench(&graph(40, false), 3).unwrap());
        let other = export_textbench(&graph(40, false), 4).unwrap();
        assert_ne!(other.train, back.train);
    }

    #[test]
    fn empty_after_filter() {
        let mut g = KnowledgeGraph::new();
        let r = g.define_relation("Have", Kind::Visual).unwrap();
        let h = g.upsert_entity("a b c d", Kind::Visual).unwrap();
        let t = g.upsert_entity("x", Kind::Visual).unwrap();
        g.insert_triplet(&h, &r, &t, Provenance::Manual, None).unwrap();
        assert!(matches!(export_textbench(&g, 0), Err(Error::EmptyAfterFilter)));
    }
}
