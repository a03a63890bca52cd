//! Retrieval-augmented VQA benchmark: question generation per triplet, one
//! relevant plus three distractor knowledge sets per item, and two-stage
//! (answer, re-answer with knowledge) scoring.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::stream_rng;
use crate::error::{Error, Result};
use crate::graph::{EntityId, ImageId, Kind, KnowledgeGraph, Triplet, TripletId};
use crate::label::normalize;
use crate::persistence::MediaManifest;
use crate::provider::{with_retries, RetryPolicy, TextProvider};
use crate::query::{category_entries, render_phrase};
use crate::region::parse_yes_no;
use crate::schema::RelationSchema;

pub const CONTEXT_SETS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaItem {
    pub id: String,
    pub image: ImageId,
    pub question: String,
    pub answer: String,
    pub kind: Kind,
    /// Four knowledge sets, exactly one of them about the depicted category.
    pub context_sets: Vec<Vec<String>>,
    pub relevant_index: usize,
    pub seed: u64,
    pub triplet: TripletId,
}

#[derive(Debug, Clone)]
pub struct VqaConfig {
    pub seed: u64,
    /// Triplets sampled per category.
    pub per_category: usize,
    pub retry: RetryPolicy,
    pub concurrency: usize,
}

impl Default for VqaConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            per_category: 5,
            retry: RetryPolicy::default(),
            concurrency: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VqaBuild {
    pub items: Vec<VqaItem>,
    /// Skipped triplets with the reason.
    pub rejected: Vec<(TripletId, String)>,
}

#[derive(Deserialize)]
struct GeneratedQa {
    question: String,
    answer: String,
}

/// Question used when no provider is configured.
pub fn template_question(schema: &RelationSchema, relation: &str) -> String {
    let noun = schema
        .get(relation)
        .and_then(|d| d.question.clone())
        .unwrap_or_else(|| relation.to_lowercase());
    format!("Which {noun} does the animal in the image have?")
}

fn generation_prompt(phrase: &str, noun: &str, answer: &str) -> String {
    format!(
        "Write one question about the {noun} of the animal shown in an image. \
         The answer must be \"{answer}\". Do not mention the animal's name.\n\
         Fact: {phrase}\n\
         Reply with JSON: {{\"question\": \"...\", \"answer\": \"...\"}}"
    )
}

/// True when `question` mentions the category label or one of its aliases.
pub fn mentions_category(question: &str, names: &[String]) -> bool {
    let q = normalize(question);
    names.iter().any(|n| !n.is_empty() && q.contains(n.as_str()))
}

struct Plan<'a> {
    category: &'a EntityId,
    triplet: &'a Triplet,
    image: ImageId,
    sets: Vec<Vec<String>>,
    relevant_index: usize,
}

/// Builds VQA items for every category root that has images and triplets.
/// All random choices are drawn up front from seeded streams, so the output
/// depends only on the graph, the seed and provider answers.
pub fn build_vqa_benchmark(
    graph: &KnowledgeGraph,
    schema: &RelationSchema,
    manifest: &MediaManifest,
    provider: Option<&dyn TextProvider>,
    config: &VqaConfig,
) -> Result<VqaBuild> {
    let mut knowledge: BTreeMap<&str, (&EntityId, Vec<String>)> = BTreeMap::new();
    for (label, id) in graph.roots() {
        let entries = category_entries(graph, schema, id)?;
        if !entries.is_empty() {
            knowledge.insert(label, (id, entries.into_iter().map(|e| e.text).collect()));
        }
    }
    if knowledge.len() < CONTEXT_SETS {
        return Err(Error::ConstraintViolation(format!(
            "VQA needs at least {CONTEXT_SETS} categories with knowledge, found {}",
            knowledge.len()
        )));
    }
    let labels: Vec<&str> = knowledge.keys().copied().collect();
    let mut plans = Vec::new();
    for &label in &labels {
        let (id, _) = &knowledge[label];
        let images: Vec<ImageId> = manifest.images_of(label).iter().map(|e| e.image.clone()).collect();
        if images.is_empty() {
            continue;
        }
        let mut rng = stream_rng(config.seed, &format!("vqa:{label}"));
        let mut triplets: Vec<&Triplet> = graph.triplets().filter(|t| t.head == **id).collect();
        triplets.shuffle(&mut rng);
        triplets.truncate(config.per_category);
        for t in triplets {
            let image = images.choose(&mut rng).expect("non-empty").clone();
            let others: Vec<&str> = labels.iter().copied().filter(|l| *l != label).collect();
            let mut chosen: Vec<&str> = others
                .choose_multiple(&mut rng, CONTEXT_SETS - 1)
                .copied()
                .collect();
            chosen.push(label);
            chosen.shuffle(&mut rng);
            let relevant_index = chosen.iter().position(|l| *l == label).expect("pushed");
            plans.push(Plan {
                category: id,
                triplet: t,
                image,
                sets: chosen.iter().map(|l| knowledge[l].1.clone()).collect(),
                relevant_index,
            });
        }
    }

    let generate = |p: &Plan| -> Result<(String, String)> {
        let relation = &graph.relation(&p.triplet.relation).expect("valid").label;
        let gold = graph.entity(&p.triplet.tail).expect("valid").label.clone();
        match provider {
            None => Ok((template_question(schema, relation), gold)),
            Some(llm) => {
                let phrase = render_phrase(graph, schema, std::slice::from_ref(&p.triplet.id))?;
                let noun = schema
                    .get(relation)
                    .and_then(|d| d.question.clone())
                    .unwrap_or_else(|| relation.to_lowercase());
                let prompt = generation_prompt(&phrase, &noun, &gold);
                let (raw, _) = with_retries(config.retry, || llm.complete(&prompt, 256))?;
                let qa: GeneratedQa = serde_json::from_str(raw.trim()).map_err(|e| Error::ProviderMalformed {
                    raw: raw.clone(),
                    reason: e.to_string(),
                })?;
                Ok((qa.question.trim().to_string(), qa.answer.trim().to_string()))
            }
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.concurrency.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let generated: Vec<Result<(String, String)>> = pool.install(|| {
        use rayon::prelude::*;
        plans.par_iter().map(generate).collect()
    });

    let mut build = VqaBuild::default();
    for (p, qa) in plans.into_iter().zip(generated) {
        let (question, answer) = match qa {
            Ok(qa) => qa,
            Err(e @ Error::ProviderUnavailable { .. }) => return Err(e),
            Err(e) => {
                build.rejected.push((p.triplet.id.clone(), e.to_string()));
                continue;
            }
        };
        let entity = graph.entity(p.category).expect("root");
        let mut names = vec![entity.label.clone()];
        names.extend(entity.aliases.iter().cloned());
        if mentions_category(&question, &names) {
            log::warn!("question for {} names the category: {question}", p.triplet.id);
            build.rejected.push((p.triplet.id.clone(), "question names the category".into()));
            continue;
        }
        if question.is_empty() || answer.is_empty() {
            build.rejected.push((p.triplet.id.clone(), "empty question or answer".into()));
            continue;
        }
        build.items.push(VqaItem {
            id: format!("vqa-{:04}", build.items.len()),
            image: p.image,
            question,
            answer,
            kind: graph.triplet_kind(p.triplet).expect("valid"),
            context_sets: p.sets,
            relevant_index: p.relevant_index,
            seed: config.seed,
            triplet: p.triplet.id.clone(),
        });
    }
    Ok(build)
}

pub fn to_jsonl(items: &[VqaItem]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| Error::Parse(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<VqaItem>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::CorruptRecord {
                file: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Decides whether an answer to an item is correct.
pub trait Grader: Sync {
    fn grade(&self, item: &VqaItem, answer: &str) -> Result<bool>;
}

/// Lower-cased, punctuation-stripped, whitespace-collapsed text.
pub fn normalize_answer(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    normalize(&cleaned)
}

pub struct ExactMatch;

impl Grader for ExactMatch {
    fn grade(&self, item: &VqaItem, answer: &str) -> Result<bool> {
        Ok(normalize_answer(answer) == normalize_answer(&item.answer))
    }
}

/// Asks a language model whether the answer matches the gold answer; the
/// reply must start with yes or no.
pub struct Judge<'a> {
    pub provider: &'a dyn TextProvider,
    pub retry: RetryPolicy,
}

impl Grader for Judge<'_> {
    fn grade(&self, item: &VqaItem, answer: &str) -> Result<bool> {
        let prompt = format!(
            "Question: {}\nReference answer: {}\nCandidate answer: {}\n\
             Does the candidate answer mean the same as the reference? Reply yes or no.",
            item.question, item.answer, answer
        );
        let (raw, _) = with_retries(self.retry, || self.provider.complete(&prompt, 8))?;
        parse_yes_no(&raw).ok_or(Error::UnparseableAnswer(raw))
    }
}

/// Accuracy (percent) over visual, non-visual and all items; `None` when a
/// group is empty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCells {
    pub visual: Option<f64>,
    pub non_visual: Option<f64>,
    pub all: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VqaScores {
    pub without_kb: AccuracyCells,
    pub with_kb: AccuracyCells,
}

fn cells(items: &[VqaItem], correct: &[bool]) -> AccuracyCells {
    let pct = |filter: &dyn Fn(&VqaItem) -> bool| {
        let (mut n, mut ok) = (0usize, 0usize);
        for (item, &c) in items.iter().zip(correct) {
            if filter(item) {
                n += 1;
                ok += usize::from(c);
            }
        }
        (n > 0).then(|| 100.0 * ok as f64 / n as f64)
    };
    AccuracyCells {
        visual: pct(&|i| i.kind == Kind::Visual),
        non_visual: pct(&|i| i.kind == Kind::NonVisual),
        all: pct(&|_| true),
    }
}

/// Grades first answers (no knowledge) and re-answers (with the four
/// context sets) and reports the six accuracy cells.
pub fn score_vqa_run(
    items: &[VqaItem],
    first: &[String],
    re_answers: &[String],
    grader: &dyn Grader,
) -> Result<VqaScores> {
    if first.len() != items.len() || re_answers.len() != items.len() {
        return Err(Error::LengthMismatch(format!(
            "{} items, {} first answers, {} re-answers",
            items.len(),
            first.len(),
            re_answers.len()
        )));
    }
    let grade = |answers: &[String]| -> Result<Vec<bool>> {
        items
            .iter()
            .zip(answers)
            .map(|(i, a)| grader.grade(i, a))
            .collect()
    };
    Ok(VqaScores {
        without_kb: cells(items, &grade(first)?),
        with_kb: cells(items, &grade(re_answers)?),
    })
}
