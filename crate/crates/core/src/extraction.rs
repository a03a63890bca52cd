//! Text-source extraction: segmentation, provider-mediated triplet
//! extraction under a fixed relation schema, visual-entity harvesting and
//! per-document graph assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::graph::{ConnectivityReport, Kind, KnowledgeGraph, Provenance, SourceRef};
use crate::label::normalize;
use crate::provider::{with_retries, RetryPolicy, TextProvider};
use crate::schema::{RelationRole, RelationSchema};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    /// Topic animal; becomes the root of the document graph.
    pub category_label: String,
    pub body: String,
    /// Supercategory whose part template applies (e.g. "mammal").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supercategory: Option<String>,
}

/// Reads every `*.json` document in `dir`, sorted by file name.
pub fn load_documents(dir: &Path) -> Result<Vec<Document>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Parse(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// One paragraph of a document. `separator` is the exact blank-line run that
/// followed it, so concatenating `text + separator` over all segments gives
/// the body back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub document: String,
    pub index: usize,
    pub text: String,
    pub separator: String,
}

pub fn reconstruct(segments: &[Segment]) -> String {
    segments
        .iter()
        .flat_map(|s| [s.text.as_str(), s.separator.as_str()])
        .collect()
}

/// Splits the body on blank-line paragraph boundaries.
pub fn segment_document(doc: &Document) -> Result<Vec<Segment>> {
    if doc.body.trim().is_empty() {
        return Err(Error::EmptyDocument(doc.id.clone()));
    }
    let sep = Regex::new(r"\n(?:[ \t\r]*\n)+").expect("valid regex");
    let mut segments: Vec<Segment> = Vec::new();
    let mut pending = String::new();
    let mut last = 0;
    let push = |text: String, separator: &str, segments: &mut Vec<Segment>| {
        segments.push(Segment {
            document: doc.id.clone(),
            index: segments.len(),
            text,
            separator: separator.to_string(),
        });
    };
    for m in sep.find_iter(&doc.body) {
        let piece = &doc.body[last..m.start()];
        last = m.end();
        if piece.trim().is_empty() {
            // leading blank run: fold into the next paragraph
            pending.push_str(piece);
            pending.push_str(m.as_str());
            continue;
        }
        let text = std::mem::take(&mut pending) + piece;
        push(text, m.as_str(), &mut segments);
    }
    let tail = &doc.body[last..];
    if tail.trim().is_empty() {
        if let Some(s) = segments.last_mut() {
            s.separator.push_str(tail);
        }
    } else {
        let text = std::mem::take(&mut pending) + tail;
        push(text, "", &mut segments);
    }
    Ok(segments)
}

/// Structurally valid entry of the wire format, before schema checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireEntry {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub kind: Kind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    ParseFailure,
    EmptyLabel,
    UnknownRelation,
    KindMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// The offending entry as it appeared on the wire.
    pub entry: String,
    pub reason: RejectReason,
}

/// Accepted triplet with schema-resolved relation label and kind.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TripletDraft {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub kind: Kind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParsedExtraction {
    pub accepted: Vec<TripletDraft>,
    pub rejected: Vec<Rejection>,
}

fn parse_kind(text: &str) -> Option<Kind> {
    match text.trim().to_ascii_lowercase().as_str() {
        "visual" => Some(Kind::Visual),
        "non-visual" => Some(Kind::NonVisual),
        _ => None,
    }
}

/// Splits a response into structurally valid entries and per-entry parse
/// failures. `Err` means the response is not a JSON array at all.
pub fn parse_wire(raw: &str) -> std::result::Result<(Vec<WireEntry>, Vec<Rejection>), String> {
    let value: Value = serde_json::from_str(raw.trim()).map_err(|e| e.to_string())?;
    let Value::Array(items) = value else {
        return Err("response is not a JSON array".into());
    };
    let mut entries = Vec::new();
    let mut rejected = Vec::new();
    for item in items {
        let fields: Option<Vec<&str>> = item
            .as_array()
            .filter(|a| a.len() == 4)
            .and_then(|a| a.iter().map(Value::as_str).collect());
        let parsed = fields.and_then(|f| {
            parse_kind(f[3]).map(|kind| WireEntry {
                head: f[0].to_string(),
                relation: f[1].to_string(),
                tail: f[2].to_string(),
                kind,
            })
        });
        match parsed {
            Some(e) => entries.push(e),
            None => rejected.push(Rejection {
                entry: item.to_string(),
                reason: RejectReason::ParseFailure,
            }),
        }
    }
    Ok((entries, rejected))
}

/// Schema check of wire entries: the relation must belong to the schema and
/// the claimed kind must agree with the schema kind.
pub fn check_entries(
    entries: &[WireEntry],
    schema: &RelationSchema,
) -> (Vec<TripletDraft>, Vec<Rejection>) {
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for e in entries {
        let wire = || {
            serde_json::to_string(&[
                e.head.as_str(),
                e.relation.as_str(),
                e.tail.as_str(),
                match e.kind {
                    Kind::Visual => "visual",
                    Kind::NonVisual => "non-visual",
                },
            ])
            .expect("strings serialize")
        };
        let head = normalize(&e.head);
        let tail = normalize(&e.tail);
        if head.is_empty() || tail.is_empty() || normalize(&e.relation).is_empty() {
            rejected.push(Rejection {
                entry: wire(),
                reason: RejectReason::EmptyLabel,
            });
            continue;
        }
        let Some(def) = schema.get(&e.relation) else {
            rejected.push(Rejection {
                entry: wire(),
                reason: RejectReason::UnknownRelation,
            });
            continue;
        };
        if def.kind != e.kind {
            rejected.push(Rejection {
                entry: wire(),
                reason: RejectReason::KindMismatch,
            });
            continue;
        }
        accepted.push(TripletDraft {
            head,
            relation: def.label.clone(),
            tail,
            kind: def.kind,
        });
    }
    (accepted, rejected)
}

/// Parses one raw provider response against the relation schema. Never
/// fails; every problem becomes a rejected entry.
pub fn parse_extraction_response(raw: &str, schema: &RelationSchema) -> ParsedExtraction {
    match parse_wire(raw) {
        Ok((entries, mut rejected)) => {
            let (accepted, schema_rejected) = check_entries(&entries, schema);
            rejected.extend(schema_rejected);
            ParsedExtraction { accepted, rejected }
        }
        Err(_) => ParsedExtraction {
            accepted: Vec::new(),
            rejected: vec![Rejection {
                entry: raw.to_string(),
                reason: RejectReason::ParseFailure,
            }],
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub segment: String,
    pub response: Vec<[String; 4]>,
}

/// Versioned few-shot example set shipped alongside the relation schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSet {
    pub id: String,
    pub schema_version: u32,
    pub examples: Vec<FewShotExample>,
}

impl FewShotSet {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))
    }
}

pub fn build_prompt(segment: &Segment, schema: &RelationSchema, few_shot: &FewShotSet) -> String {
    let mut p = String::new();
    p.push_str("Extract knowledge triplets about the animal from the text.\n");
    p.push_str(
        "Answer with a single JSON array of [head, relation, tail, kind] arrays, \
         where kind is \"visual\" or \"non-visual\".\n",
    );
    p.push_str(&format!("Relations (schema v{}):\n", schema.version));
    p.push_str(&schema.prompt_listing());
    for ex in &few_shot.examples {
        p.push_str("\nText:\n");
        p.push_str(&ex.segment);
        p.push_str("\nAnswer:\n");
        p.push_str(&serde_json::to_string(&ex.response).expect("strings serialize"));
        p.push('\n');
    }
    p.push_str("\nText:\n");
    p.push_str(&segment.text);
    p.push_str("\nAnswer:\n");
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractionConfig {
    pub max_tokens: u32,
    pub retry: RetryPolicy,
    /// Maximum provider calls in flight.
    pub concurrency: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            max_tokens: 1024,
            retry: RetryPolicy::default(),
            concurrency: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExtractionResponse {
    pub raw: String,
    pub entries: Vec<WireEntry>,
    pub malformed: Vec<Rejection>,
    pub attempts: u32,
}

pub fn extract_segment(
    segment: &Segment,
    provider: &dyn TextProvider,
    schema: &RelationSchema,
    few_shot: &FewShotSet,
    config: &ExtractionConfig,
) -> Result<ExtractionResponse> {
    let prompt = build_prompt(segment, schema, few_shot);
    let (raw, attempts) =
        with_retries(config.retry, || provider.complete(&prompt, config.max_tokens))?;
    match parse_wire(&raw) {
        Ok((entries, malformed)) => Ok(ExtractionResponse {
            raw,
            entries,
            malformed,
            attempts,
        }),
        Err(reason) => Err(Error::ProviderMalformed { raw, reason }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HarvestTag {
    Animal,
    Part,
}

/// Visual entities harvested from one document, keyed by normalized label.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarvestSet {
    pub document: String,
    pub entities: BTreeMap<String, HarvestTag>,
}

impl HarvestSet {
    pub fn parts(&self) -> impl Iterator<Item = &str> {
        self.entities
            .iter()
            .filter(|(_, t)| **t == HarvestTag::Part)
            .map(|(l, _)| l.as_str())
    }
}

/// Animals are the root and both ends of taxonomy triplets; parts are tails
/// of visual part-relation triplets. Animal wins when both rules fire.
pub fn harvest_visual_entities(
    document: &str,
    root_label: &str,
    accepted: &[TripletDraft],
    schema: &RelationSchema,
) -> HarvestSet {
    let root = normalize(root_label);
    let mut entities = BTreeMap::new();
    for t in accepted {
        let Some(def) = schema.get(&t.relation) else {
            continue;
        };
        let (head, tail) = (normalize(&t.head), normalize(&t.tail));
        for label in [&head, &tail] {
            if *label == root {
                entities.insert(label.clone(), HarvestTag::Animal);
            }
        }
        match def.role {
            RelationRole::Taxonomy => {
                entities.insert(head, HarvestTag::Animal);
                entities.insert(tail, HarvestTag::Animal);
            }
            RelationRole::Part if def.kind == Kind::Visual => {
                entities.entry(tail).or_insert(HarvestTag::Part);
            }
            _ => {}
        }
    }
    HarvestSet {
        document: document.to_string(),
        entities,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocumentAssembly {
    pub graph: KnowledgeGraph,
    pub connectivity: ConnectivityReport,
    pub harvest: HarvestSet,
}

/// Builds the document graph from all segments' accepted triplets and checks
/// that it is connected to the root. Unreachable entities are reported, not
/// linked.
pub fn assemble_document_graph(
    doc: &Document,
    schema: &RelationSchema,
    per_segment: &[(usize, Vec<TripletDraft>)],
) -> Result<DocumentAssembly> {
    let all: Vec<TripletDraft> = per_segment
        .iter()
        .flat_map(|(_, ts)| ts.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let harvest = harvest_visual_entities(&doc.id, &doc.category_label, &all, schema);
    let mut graph = KnowledgeGraph::new();
    schema.install(&mut graph)?;
    let root = graph.upsert_entity(&doc.category_label, Kind::Visual)?;
    graph.set_root(&doc.category_label, &root)?;
    let kind_of = |label: &str| {
        if harvest.entities.contains_key(label) {
            Kind::Visual
        } else {
            Kind::NonVisual
        }
    };
    // Entities first, so kinds do not depend on segment order.
    for t in &all {
        for label in [&t.head, &t.tail] {
            graph.resolve_entity(label, kind_of(label))?;
        }
    }
    let mut ordered: Vec<&(usize, Vec<TripletDraft>)> = per_segment.iter().collect();
    ordered.sort_by_key(|(i, _)| *i);
    for (index, drafts) in ordered {
        for t in drafts {
            let head = graph.resolve_entity(&t.head, kind_of(&t.head))?;
            let tail = graph.resolve_entity(&t.tail, kind_of(&t.tail))?;
            let relation = graph.define_relation(&t.relation, t.kind)?;
            graph.insert_triplet(
                &head,
                &relation,
                &tail,
                Provenance::LlmExtracted,
                Some(SourceRef {
                    document: doc.id.clone(),
                    segment: *index,
                }),
            )?;
        }
    }
    let connectivity = graph.validate_connectivity(&root)?;
    Ok(DocumentAssembly {
        graph,
        connectivity,
        harvest,
    })
}

/// Outcome of extracting one document.
#[derive(Debug, Clone)]
pub struct DocumentExtraction {
    pub document: Document,
    pub segments: Vec<Segment>,
    pub responses: Vec<Result<ExtractionResponse, String>>,
    pub rejected: Vec<(usize, Rejection)>,
    pub assembly: DocumentAssembly,
}

/// Segments and extracts every document with at most `config.concurrency`
/// provider calls in flight, then assembles each document graph. Segments
/// whose provider call fails are recorded and skipped.
pub fn extract_documents(
    docs: &[Document],
    provider: &dyn TextProvider,
    schema: &RelationSchema,
    few_shot: &FewShotSet,
    config: &ExtractionConfig,
) -> Result<Vec<DocumentExtraction>> {
    use rayon::prelude::*;

    let segmented: Vec<(usize, Vec<Segment>)> = docs
        .iter()
        .enumerate()
        .map(|(i, d)| segment_document(d).map(|s| (i, s)))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, &Segment)> = segmented
        .iter()
        .flat_map(|(i, segs)| segs.iter().map(move |s| (*i, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.concurrency.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let responses: Vec<Result<ExtractionResponse>> = pool.install(|| {
        jobs.par_iter()
            .map(|(_, seg)| extract_segment(seg, provider, schema, few_shot, config))
            .collect()
    });

    let mut by_doc: BTreeMap<usize, Vec<(usize, Result<ExtractionResponse>)>> = BTreeMap::new();
    for ((doc_idx, seg), resp) in jobs.iter().zip(responses) {
        by_doc.entry(*doc_idx).or_default().push((seg.index, resp));
    }
    let mut out = Vec::with_capacity(docs.len());
    for (doc_idx, segments) in segmented {
        let doc = &docs[doc_idx];
        let mut per_segment = Vec::new();
        let mut rejected = Vec::new();
        let mut responses = Vec::new();
        for (seg_idx, resp) in by_doc.remove(&doc_idx).unwrap_or_default() {
            match resp {
                Ok(r) => {
                    let (accepted, schema_rejected) = check_entries(&r.entries, schema);
                    rejected.extend(r.malformed.iter().cloned().map(|x| (seg_idx, x)));
                    rejected.extend(schema_rejected.into_iter().map(|x| (seg_idx, x)));
                    per_segment.push((seg_idx, accepted));
                    responses.push(Ok(r));
                }
                Err(e) => {
                    log::warn!("document {} segment {seg_idx}: {e}", doc.id);
                    responses.push(Err(e.to_string()));
                }
            }
        }
        let assembly = assemble_document_graph(doc, schema, &per_segment)?;
        out.push(DocumentExtraction {
            document: doc.clone(),
            segments,
            responses,
            rejected,
            assembly,
        });
    }
    Ok(out)
}
