//! Knowledge rendering and selection: triplets and two-hop chains become
//! phrases, non-discriminative phrases are filtered out, the phrases closest
//! to a support set form a category's knowledge ensemble, and ensembles score
//! images for zero-shot recognition. Also assembles audience-specific
//! caption contexts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::embed_batched;
use crate::error::{Error, Result};
use crate::graph::{EntityId, Kind, KnowledgeGraph, Provenance, Triplet, TripletId};
use crate::label::normalize;
use crate::provider::{cosine, Embedder, RetryPolicy};
use crate::schema::{RelationRole, RelationSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    /// The bare category name.
    Name,
    Visual,
    NonVisual,
    Chain,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub category: EntityId,
    pub text: String,
    pub sources: Vec<TripletId>,
    pub kind: EntryKind,
}

fn fill(template: &str, head: &str, tail: &str) -> String {
    template.replace("{h}", head).replace("{t}", tail)
}

fn endpoint_labels<'a>(graph: &'a KnowledgeGraph, t: &Triplet) -> Result<(&'a str, &'a str, &'a str)> {
    let head = graph
        .entity(&t.head)
        .ok_or_else(|| Error::DanglingReference(t.head.to_string()))?;
    let tail = graph
        .entity(&t.tail)
        .ok_or_else(|| Error::DanglingReference(t.tail.to_string()))?;
    let rel = graph
        .relation(&t.relation)
        .ok_or_else(|| Error::DanglingReference(t.relation.to_string()))?;
    Ok((&head.label, &rel.label, &tail.label))
}

/// Renders one triplet, or a head-to-tail path of triplets, as a phrase.
///
/// A single triplet uses its relation template (`{h} has {t}`); relations
/// without one fall back to `<head> <relation> <tail>`. In a path, every hop
/// after the first is rendered with its relation's modifier template
/// (`{t} {h}` gives "long tail") and substituted for the tail of the
/// previous hop, so cat-Have-tail + tail-PartLength-long reads
/// "cat has long tail".
pub fn render_phrase(graph: &KnowledgeGraph, schema: &RelationSchema, path: &[TripletId]) -> Result<String> {
    let triplets: Vec<&Triplet> = path
        .iter()
        .map(|id| graph.triplet(id).ok_or_else(|| Error::UnknownId(id.to_string())))
        .collect::<Result<_>>()?;
    let Some((first, rest)) = triplets.split_first() else {
        return Err(Error::ConstraintViolation("empty path".into()));
    };
    for w in triplets.windows(2) {
        if w[0].tail != w[1].head {
            return Err(Error::ConstraintViolation(format!(
                "triplets {} and {} do not form a path",
                w[0].id, w[1].id
            )));
        }
    }
    // the innermost description is built from the last hop backwards
    let mut tail_phrase: Option<String> = None;
    for t in rest.iter().rev() {
        let (h, r, tail) = endpoint_labels(graph, t)?;
        let tail = tail_phrase.take().unwrap_or_else(|| tail.to_string());
        let def = schema.get(r);
        tail_phrase = Some(match def.and_then(|d| d.modifier.as_deref()) {
            Some(m) => fill(m, h, &tail),
            None => format!("{h} {} {tail}", r.to_lowercase()),
        });
    }
    let (h, r, tail) = endpoint_labels(graph, first)?;
    let tail = tail_phrase.unwrap_or_else(|| tail.to_string());
    Ok(match schema.get(r).and_then(|d| d.template.as_deref()) {
        Some(t) => fill(t, h, &tail),
        None => format!("{h} {r} {tail}"),
    })
}

fn documents(t: &Triplet) -> BTreeSet<&str> {
    t.source_refs.iter().map(|s| s.document.as_str()).collect()
}

/// Every length-2 path `category -r1-> m -r2-> t` where `m` is a visual
/// entity other than the category and both hops were extracted from a
/// common document (parts are shared nodes, so this keeps one animal's
/// "long tail" off another animal's tail). Sorted by phrase.
pub fn concatenate_chains(
    graph: &KnowledgeGraph,
    schema: &RelationSchema,
    category: &EntityId,
) -> Result<Vec<KnowledgeEntry>> {
    let mut by_head: BTreeMap<&EntityId, Vec<&Triplet>> = BTreeMap::new();
    for t in graph.triplets() {
        by_head.entry(&t.head).or_default().push(t);
    }
    let mut out = Vec::new();
    for first in by_head.get(category).into_iter().flatten() {
        let middle = &first.tail;
        if middle == category {
            continue;
        }
        if graph.entity(middle).map(|e| e.kind) != Some(Kind::Visual) {
            continue;
        }
        let first_docs = documents(first);
        for second in by_head.get(middle).into_iter().flatten() {
            if second.tail == *category || second.tail == *middle {
                continue;
            }
            if first_docs.is_disjoint(&documents(second)) {
                continue;
            }
            let sources = vec![first.id.clone(), second.id.clone()];
            out.push(KnowledgeEntry {
                category: category.clone(),
                text: render_phrase(graph, schema, &sources)?,
                sources,
                kind: EntryKind::Chain,
            });
        }
    }
    out.sort();
    Ok(out)
}

/// One entry per triplet headed by the category plus every chain, sorted by
/// kind then phrase, with duplicate phrases removed.
pub fn category_entries(
    graph: &KnowledgeGraph,
    schema: &RelationSchema,
    category: &EntityId,
) -> Result<Vec<KnowledgeEntry>> {
    if graph.entity(category).is_none() {
        return Err(Error::UnknownCategory(category.to_string()));
    }
    let mut out = Vec::new();
    for t in graph.triplets().filter(|t| t.head == *category) {
        let kind = match graph.triplet_kind(t) {
            Some(Kind::Visual) => EntryKind::Visual,
            _ => EntryKind::NonVisual,
        };
        out.push(KnowledgeEntry {
            category: category.clone(),
            text: render_phrase(graph, schema, std::slice::from_ref(&t.id))?,
            sources: vec![t.id.clone()],
            kind,
        });
    }
    out.extend(concatenate_chains(graph, schema, category)?);
    out.sort_by(|a, b| (a.kind, &a.text).cmp(&(b.kind, &b.text)));
    let mut seen = BTreeSet::new();
    out.retain(|e| seen.insert(e.text.clone()));
    Ok(out)
}

/// Other categories sharing a `BelongTo` tail with `category`.
pub fn siblings_by_belong_to(graph: &KnowledgeGraph, category: &EntityId) -> Vec<EntityId> {
    let Some(belong) = graph.find_relation("BelongTo") else {
        return Vec::new();
    };
    let groups: BTreeSet<&EntityId> = graph
        .triplets()
        .filter(|t| t.head == *category && t.relation == belong.id)
        .map(|t| &t.tail)
        .collect();
    let roots: BTreeSet<&EntityId> = graph.roots().values().collect();
    graph
        .triplets()
        .filter(|t| t.relation == belong.id && groups.contains(&t.tail))
        .map(|t| &t.head)
        .filter(|h| *h != category && roots.contains(h))
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// What an entry says independently of its category: relation and tail
/// label for each hop, with the middle label for chains.
fn signature(graph: &KnowledgeGraph, entry: &KnowledgeEntry) -> Option<Vec<String>> {
    let mut sig = Vec::new();
    for (i, id) in entry.sources.iter().enumerate() {
        let t = graph.triplet(id)?;
        let (_, r, tail) = endpoint_labels(graph, t).ok()?;
        if i > 0 {
            sig.push("/".into());
        }
        sig.push(normalize(r));
        sig.push(tail.to_string());
    }
    Some(sig)
}

pub const DEFAULT_SIBLING_FRACTION: f64 = 0.5;

/// Drops entries built on inherited triplets, and entries whose signature
/// (relation and tail label per hop) occurs in at least `fraction` of the
/// sibling categories. The name entry is never dropped.
pub fn filter_discriminative(
    graph: &KnowledgeGraph,
    schema: &RelationSchema,
    entries: &[KnowledgeEntry],
    siblings: &[EntityId],
    fraction: f64,
) -> Result<Vec<KnowledgeEntry>> {
    let mut sibling_sigs: Vec<BTreeSet<Vec<String>>> = Vec::new();
    for s in siblings {
        let sigs = category_entries(graph, schema, s)?
            .iter()
            .filter_map(|e| signature(graph, e))
            .collect();
        sibling_sigs.push(sigs);
    }
    let mut out = Vec::new();
    for e in entries {
        if e.kind == EntryKind::Name {
            out.push(e.clone());
            continue;
        }
        let inherited = e.sources.iter().any(|id| {
            graph
                .triplet(id)
                .is_some_and(|t| t.provenance.contains(&Provenance::Inherited))
        });
        if inherited {
            continue;
        }
        if !sibling_sigs.is_empty() {
            if let Some(sig) = signature(graph, e) {
                let hits = sibling_sigs.iter().filter(|s| s.contains(&sig)).count();
                if hits > 0 && hits as f64 >= fraction * sibling_sigs.len() as f64 {
                    continue;
                }
            }
        }
        out.push(e.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryKnowledgeSet {
    pub category: EntityId,
    pub category_label: String,
    /// Name entry first, then the selected entries by descending score.
    pub entries: Vec<KnowledgeEntry>,
    /// Mean support-set similarity per entry, aligned with `entries`.
    pub scores: Vec<f64>,
    /// Text embeddings aligned with `entries`.
    pub vectors: Vec<Vec<f64>>,
    pub includes_category_name: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct EnsembleConfig {
    pub k: usize,
    pub batch_size: usize,
    pub concurrency: usize,
    pub retry: RetryPolicy,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            k: 10,
            batch_size: 64,
            concurrency: 4,
            retry: RetryPolicy::default(),
        }
    }
}

fn mean_similarity(v: &[f64], support: &[Vec<f64>]) -> Result<f64> {
    let mut sum = 0.0;
    for s in support {
        if s.len() != v.len() {
            return Err(Error::DimensionMismatch {
                expected: v.len(),
                found: s.len(),
            });
        }
        sum += cosine(v, s);
    }
    Ok(sum / support.len() as f64)
}

/// Sort order for scored items: descending score, then ascending key.
fn by_score_then_key<K: Ord>(a: &(f64, K), b: &(f64, K)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
}

/// Keeps the `k` entries whose embeddings are closest on average to the
/// support-set vectors (ties broken by phrase), preceded by the category
/// name entry.
pub fn select_knowledge_ensemble(
    category: &EntityId,
    category_label: &str,
    entries: &[KnowledgeEntry],
    support: &[Vec<f64>],
    embedder: &dyn Embedder,
    config: &EnsembleConfig,
) -> Result<CategoryKnowledgeSet> {
    if config.k == 0 {
        return Err(Error::InvalidConfig("ensemble size k must be >= 1".into()));
    }
    if support.is_empty() {
        return Err(Error::ConstraintViolation(format!(
            "no support vectors for {category_label}"
        )));
    }
    let name = KnowledgeEntry {
        category: category.clone(),
        text: normalize(category_label),
        sources: Vec::new(),
        kind: EntryKind::Name,
    };
    let mut candidates: Vec<&KnowledgeEntry> = Vec::new();
    let mut seen = BTreeSet::from([name.text.clone()]);
    for e in entries.iter().filter(|e| e.kind != EntryKind::Name) {
        if seen.insert(e.text.clone()) {
            candidates.push(e);
        }
    }
    let texts: Vec<String> = std::iter::once(&name)
        .chain(candidates.iter().copied())
        .map(|e| e.text.clone())
        .collect();
    let vectors = embed_batched(embedder, &texts, config.batch_size, config.concurrency, config.retry)?;
    let mut scored: Vec<(f64, (&str, usize))> = Vec::new();
    for (i, e) in candidates.iter().enumerate() {
        let s = mean_similarity(&vectors[i + 1], support)?;
        scored.push((s, (e.text.as_str(), i)));
    }
    scored.sort_by(by_score_then_key);
    scored.truncate(config.k);

    let mut set = CategoryKnowledgeSet {
        category: category.clone(),
        category_label: name.text.clone(),
        scores: vec![mean_similarity(&vectors[0], support)?],
        vectors: vec![vectors[0].clone()],
        entries: vec![name],
        includes_category_name: true,
    };
    for (s, (_, i)) in scored {
        set.entries.push(candidates[i].clone());
        set.scores.push(s);
        set.vectors.push(vectors[i + 1].clone());
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

/// Aggregated similarity of an image to one knowledge set.
pub fn category_score(image: &[f64], set: &CategoryKnowledgeSet, agg: Aggregation) -> Result<f64> {
    if set.vectors.is_empty() {
        return Err(Error::ConstraintViolation(format!(
            "knowledge set of {} is empty",
            set.category_label
        )));
    }
    let mut sims = Vec::with_capacity(set.vectors.len());
    for v in &set.vectors {
        if v.len() != image.len() {
            return Err(Error::DimensionMismatch {
                expected: image.len(),
                found: v.len(),
            });
        }
        sims.push(cosine(image, v));
    }
    Ok(match agg {
        Aggregation::Mean => sims.iter().sum::<f64>() / sims.len() as f64,
        Aggregation::Max => sims.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Categories ranked by descending score, ties by label.
pub fn rank_categories(scores: Vec<(String, f64)>) -> Vec<(String, f64)> {
    let mut keyed: Vec<(f64, String)> = scores.into_iter().map(|(c, s)| (s, c)).collect();
    keyed.sort_by(by_score_then_key);
    keyed.into_iter().map(|(s, c)| (c, s)).collect()
}

pub fn zero_shot_classify(
    image: &[f64],
    sets: &[CategoryKnowledgeSet],
    agg: Aggregation,
) -> Result<Vec<(String, f64)>> {
    let scores = sets
        .iter()
        .map(|s| Ok((s.category_label.clone(), category_score(image, s, agg)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_categories(scores))
}

/// Reads a vector file: first line is the dimension, then one
/// `id v1 v2 ...` line per vector (whitespace or comma separated).
pub fn read_vector_file(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_vectors(&text).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_vectors(text: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let dim: usize = lines
        .next()
        .ok_or_else(|| Error::Parse("missing dimension header".into()))?
        .trim()
        .parse()
        .map_err(|e| Error::Parse(format!("dimension header: {e}")))?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut fields = line.split(|c: char| c.is_whitespace() || c == ',').filter(|f| !f.is_empty());
        let id = fields.next().expect("non-empty line").to_string();
        let v: Vec<f64> = fields
            .map(|f| f.parse::<f32>().map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("vector line {}: {e}", i + 2)))?;
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: v.len(),
            });
        }
        out.push((id, v));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Audience {
    Child,
    General,
    Expert,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionProfiles {
    pub child_max: usize,
    /// Relations a child profile puts first.
    pub child_relations: Vec<String>,
    pub general_max: usize,
}

impl Default for CaptionProfiles {
    fn default() -> Self {
        Self {
            child_max: 5,
            child_relations: vec!["Color".into(), "Have".into(), "Num".into()],
            general_max: 8,
        }
    }
}

fn first_relation<'a>(graph: &'a KnowledgeGraph, e: &KnowledgeEntry) -> Option<&'a str> {
    let t = graph.triplet(e.sources.first()?)?;
    graph.relation(&t.relation).map(|r| r.label.as_str())
}

fn is_visual(e: &KnowledgeEntry) -> bool {
    matches!(e.kind, EntryKind::Visual | EntryKind::Chain)
}

/// Knowledge handed to a captioner for one category and audience.
///
/// * Child: visual entries on the child relations first, then other visual
///   entries, then the rest; at most `child_max`.
/// * General: visual and habitat entries interleaved, at most `general_max`.
/// * Expert: every entry, General's selection first.
pub fn caption_context(
    graph: &KnowledgeGraph,
    schema: &RelationSchema,
    category_label: &str,
    audience: Audience,
    profiles: &CaptionProfiles,
) -> Result<Vec<KnowledgeEntry>> {
    let category = graph
        .root_for(category_label)
        .ok_or_else(|| Error::UnknownCategory(category_label.to_string()))?
        .clone();
    let entries = category_entries(graph, schema, &category)?;
    let child_rels: BTreeSet<String> = profiles.child_relations.iter().map(|r| normalize(r)).collect();
    let role = |e: &KnowledgeEntry| {
        first_relation(graph, e)
            .and_then(|r| schema.get(r))
            .map(|d| d.role)
    };
    match audience {
        Audience::Child => {
            let rank = |e: &KnowledgeEntry| {
                let child_rel = first_relation(graph, e).is_some_and(|r| child_rels.contains(&normalize(r)));
                match (is_visual(e), child_rel) {
                    (true, true) => 0,
                    (true, false) => 1,
                    _ => 2,
                }
            };
            let mut ranked: Vec<(u8, KnowledgeEntry)> = entries.into_iter().map(|e| (rank(&e), e)).collect();
            ranked.sort_by(|a, b| (a.0, &a.1.text).cmp(&(b.0, &b.1.text)));
            Ok(ranked.into_iter().take(profiles.child_max).map(|(_, e)| e).collect())
        }
        Audience::General | Audience::Expert => {
            let (visual, rest): (Vec<_>, Vec<_>) = entries.into_iter().partition(is_visual);
            let (habitat, rest): (Vec<_>, Vec<_>) =
                rest.into_iter().partition(|e| role(e) == Some(RelationRole::Habitat));
            let mut general = Vec::new();
            let (mut vi, mut hi) = (visual.iter(), habitat.iter());
            loop {
                let before = general.len();
                general.extend(vi.next().cloned());
                general.extend(hi.next().cloned());
                if general.len() == before {
                    break;
                }
            }
            if audience == Audience::General {
                general.truncate(profiles.general_max);
                return Ok(general);
            }
            Ok(general.into_iter().chain(rest).collect())
        }
    }
}
