//! Expert review loop: a queue of pending triplets, regions and merge
//! proposals, an append-only decision journal, and application of the
//! decisions to the graph.
//!
//! On disk a review directory holds `queue.jsonl` (items in creation order)
//! and `decisions.jsonl` (one record per decision). Item state is never
//! stored in the queue file; it is rebuilt by replaying the journal.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::alignment::{apply_merge, MergeProposal, MergeStatus};
use crate::error::{Error, Result};
use crate::graph::{EntityId, Kind, KnowledgeGraph, Provenance, RegionAnnotation, SourceRef, TripletId, VerifyState};

pub const QUEUE_FILE: &str = "queue.jsonl";
pub const JOURNAL_FILE: &str = "decisions.jsonl";
pub const MAX_PAGE_SIZE: usize = 500;
pub const DEFAULT_SPOT_CHECK_RATE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Triplet,
    Region,
    Merge,
}

impl ItemKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "triplet" => Ok(ItemKind::Triplet),
            "region" => Ok(ItemKind::Region),
            "merge" => Ok(ItemKind::Merge),
            other => Err(Error::InvalidConfig(format!("unknown review kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemState {
    Pending,
    Approved,
    Rejected,
    Edited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Triplet {
        triplet: TripletId,
        head: String,
        relation: String,
        tail: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source: Option<String>,
    },
    Region {
        annotation: RegionAnnotation,
        width: u32,
        height: u32,
    },
    Merge {
        proposal: MergeProposal,
    },
}

impl Payload {
    pub fn kind(&self) -> ItemKind {
        match self {
            Payload::Triplet { .. } => ItemKind::Triplet,
            Payload::Region { .. } => ItemKind::Region,
            Payload::Merge { .. } => ItemKind::Merge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: u64,
    pub kind: ItemKind,
    pub payload: Payload,
    pub state: ItemState,
    /// Corrected payload of an edited item.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited: Option<Payload>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decided_by: Option<String>,
    /// Unix seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decided_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "payload", rename_all = "snake_case")]
pub enum Decision {
    Approve,
    Reject,
    Edit(Payload),
}

/// One line of the decision journal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub item: u64,
    #[serde(flatten)]
    pub decision: Decision,
    pub reviewer: String,
    pub at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Page {
    pub items: Vec<ReviewItem>,
    pub total: usize,
    pub page: usize,
    pub page_size: usize,
}

/// In-memory queue plus journal. With a directory attached, enqueues and
/// decisions are appended to disk before they take effect in memory.
#[derive(Debug, Clone, Default)]
pub struct ReviewQueue {
    items: Vec<ReviewItem>,
    journal: Vec<DecisionRecord>,
    dir: Option<PathBuf>,
}

fn append_line(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut line = serde_json::to_string(value).map_err(|e| Error::Parse(e.to_string()))?;
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
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

fn check_edit(original: &Payload, edited: &Payload) -> Result<()> {
    match (original, edited) {
        (Payload::Region { width, height, .. }, Payload::Region { annotation, .. }) => annotation
            .check_bounds(*width, *height)
            .map_err(|e| Error::InvalidEdit(e.to_string())),
        (Payload::Triplet { .. }, Payload::Triplet { head, relation, tail, .. }) => {
            if [head, relation, tail].iter().any(|s| s.trim().is_empty()) {
                Err(Error::InvalidEdit("edited triplet has an empty element".into()))
            } else {
                Ok(())
            }
        }
        (Payload::Merge { .. }, Payload::Merge { .. }) => {
            Err(Error::InvalidEdit("merge proposals can only be approved or rejected".into()))
        }
        _ => Err(Error::InvalidEdit("edited payload is of a different kind".into())),
    }
}

impl ReviewQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens (or creates) a review directory and replays its journal.
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let items: Vec<ReviewItem> = read_lines(&dir.join(QUEUE_FILE))?;
        let mut queue = Self {
            items: Vec::with_capacity(items.len()),
            journal: Vec::new(),
            dir: None,
        };
        for mut item in items {
            if item.id != queue.items.len() as u64 {
                return Err(Error::CorruptRecord {
                    file: dir.join(QUEUE_FILE).display().to_string(),
                    line: queue.items.len() + 1,
                    reason: format!("item id {} out of sequence", item.id),
                });
            }
            item.state = ItemState::Pending;
            item.edited = None;
            item.decided_by = None;
            item.decided_at = None;
            queue.items.push(item);
        }
        for record in read_lines::<DecisionRecord>(&dir.join(JOURNAL_FILE))? {
            queue.apply_record(record)?;
        }
        queue.dir = Some(dir.to_path_buf());
        Ok(queue)
    }

    pub fn items(&self) -> &[ReviewItem] {
        &self.items
    }

    pub fn journal(&self) -> &[DecisionRecord] {
        &self.journal
    }

    pub fn get(&self, id: u64) -> Option<&ReviewItem> {
        self.items.get(id as usize)
    }

    /// Adds an item unless an item with an equal payload already exists;
    /// returns the id either way.
    pub fn enqueue(&mut self, payload: Payload) -> Result<u64> {
        if let Some(existing) = self.items.iter().find(|i| i.payload == payload) {
            return Ok(existing.id);
        }
        let item = ReviewItem {
            id: self.items.len() as u64,
            kind: payload.kind(),
            payload,
            state: ItemState::Pending,
            edited: None,
            decided_by: None,
            decided_at: None,
        };
        if let Some(dir) = &self.dir {
            append_line(&dir.join(QUEUE_FILE), &item)?;
        }
        self.items.push(item);
        Ok(self.items.len() as u64 - 1)
    }

    pub fn enqueue_triplet(&mut self, graph: &KnowledgeGraph, id: &TripletId, source: Option<String>) -> Result<u64> {
        let t = graph.triplet(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
        let label = |e: &EntityId| graph.entity(e).map(|x| x.label.clone()).unwrap_or_default();
        let relation = graph.relation(&t.relation).map(|r| r.label.clone()).unwrap_or_default();
        self.enqueue(Payload::Triplet {
            triplet: id.clone(),
            head: label(&t.head),
            relation,
            tail: label(&t.tail),
            source,
        })
    }

    pub fn enqueue_region(&mut self, annotation: RegionAnnotation, width: u32, height: u32) -> Result<u64> {
        self.enqueue(Payload::Region {
            annotation,
            width,
            height,
        })
    }

    pub fn enqueue_merge(&mut self, proposal: MergeProposal) -> Result<u64> {
        self.enqueue(Payload::Merge { proposal })
    }

    pub fn pending_count(&self, kind: Option<ItemKind>) -> usize {
        self.items
            .iter()
            .filter(|i| i.state == ItemState::Pending && kind.is_none_or(|k| i.kind == k))
            .count()
    }

    /// Zero-based page of pending items in creation order.
    pub fn list_pending(&self, kind: Option<ItemKind>, page: usize, page_size: usize) -> Result<Page> {
        if !(1..=MAX_PAGE_SIZE).contains(&page_size) {
            return Err(Error::InvalidConfig(format!(
                "page_size must be in 1..={MAX_PAGE_SIZE}, got {page_size}"
            )));
        }
        let pending: Vec<&ReviewItem> = self
            .items
            .iter()
            .filter(|i| i.state == ItemState::Pending && kind.is_none_or(|k| i.kind == k))
            .collect();
        Ok(Page {
            total: pending.len(),
            items: pending
                .into_iter()
                .skip(page.saturating_mul(page_size))
                .take(page_size)
                .cloned()
                .collect(),
            page,
            page_size,
        })
    }

    fn validate(&self, record: &DecisionRecord) -> Result<()> {
        let item = self
            .items
            .get(record.item as usize)
            .ok_or_else(|| Error::UnknownItem(record.item.to_string()))?;
        if item.state != ItemState::Pending {
            return Err(Error::AlreadyDecided(record.item.to_string()));
        }
        if let Decision::Edit(p) = &record.decision {
            check_edit(&item.payload, p)?;
        }
        Ok(())
    }

    fn apply_record(&mut self, record: DecisionRecord) -> Result<()> {
        self.validate(&record)?;
        let item = &mut self.items[record.item as usize];
        match &record.decision {
            Decision::Approve => item.state = ItemState::Approved,
            Decision::Reject => item.state = ItemState::Rejected,
            Decision::Edit(p) => {
                item.state = ItemState::Edited;
                item.edited = Some(p.clone());
            }
        }
        item.decided_by = Some(record.reviewer.clone());
        item.decided_at = Some(record.at);
        self.journal.push(record);
        Ok(())
    }

    /// Decides a pending item; the journal line is written before the
    /// in-memory state changes.
    pub fn record_decision(&mut self, item: u64, decision: Decision, reviewer: &str, at: u64) -> Result<&ReviewItem> {
        let record = DecisionRecord {
            item,
            decision,
            reviewer: reviewer.to_string(),
            at,
        };
        self.validate(&record)?;
        if let Some(dir) = &self.dir {
            append_line(&dir.join(JOURNAL_FILE), &record)?;
        }
        self.apply_record(record)?;
        Ok(&self.items[item as usize])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ApplyReport {
    pub regions_added: usize,
    pub regions_upgraded: usize,
    pub regions_removed: usize,
    pub triplets_verified: usize,
    pub triplets_edited: usize,
    pub triplets_removed: usize,
    pub merges_applied: usize,
    /// Decisions whose target no longer exists (e.g. removed by a merge).
    pub stale: usize,
}

impl ApplyReport {
    pub fn changes(&self) -> usize {
        self.regions_added
            + self.regions_upgraded
            + self.regions_removed
            + self.triplets_verified
            + self.triplets_edited
            + self.triplets_removed
            + self.merges_applied
    }
}

fn entity_by_label(graph: &KnowledgeGraph, label: &str) -> Option<EntityId> {
    graph.find_entity(label).map(|e| e.id.clone())
}

fn apply_region(graph: &mut KnowledgeGraph, annotation: &RegionAnnotation, approve: bool, report: &mut ApplyReport) -> Result<()> {
    if !approve {
        let ids: Vec<EntityId> = graph.entities().map(|e| e.id.clone()).collect();
        for id in ids {
            let e = graph.entity_mut(&id).expect("listed");
            let before = e.groundings.len();
            e.groundings.retain(|g| !(g.same_area(annotation) && g.label == annotation.label));
            report.regions_removed += before - e.groundings.len();
        }
        return Ok(());
    }
    let id = graph.resolve_entity(&annotation.label, Kind::Visual)?;
    let entity = graph.entity_mut(&id).expect("just resolved");
    if let Some(g) = entity.groundings.iter_mut().find(|g| g.same_area(annotation)) {
        if g.verified != VerifyState::ExpertApproved {
            g.verified = VerifyState::ExpertApproved;
            report.regions_upgraded += 1;
        }
        return Ok(());
    }
    let mut a = annotation.clone();
    a.verified = VerifyState::ExpertApproved;
    a.label = entity.label.clone();
    if graph.add_entity_grounding(&id, a)? {
        report.regions_added += 1;
    }
    Ok(())
}

/// Applies every decided item to the graph. Running it again on the same
/// queue changes nothing.
pub fn apply_decisions(graph: &mut KnowledgeGraph, queue: &ReviewQueue) -> Result<ApplyReport> {
    let mut report = ApplyReport::default();
    for item in queue.items() {
        match (item.state, &item.payload) {
            (ItemState::Pending, _) => {}
            (state, Payload::Region { annotation, .. }) => {
                let target = match (&item.edited, state) {
                    (Some(Payload::Region { annotation: edited, .. }), ItemState::Edited) => {
                        // the edit replaces the original area
                        apply_region(graph, annotation, false, &mut report)?;
                        edited
                    }
                    _ => annotation,
                };
                apply_region(graph, target, state != ItemState::Rejected, &mut report)?;
            }
            (state, Payload::Triplet { triplet, .. }) => match state {
                ItemState::Approved => match graph.triplet(triplet) {
                    Some(t) if t.provenance.contains(&Provenance::Manual) => {}
                    Some(_) => {
                        graph.add_provenance(triplet, Provenance::Manual)?;
                        report.triplets_verified += 1;
                    }
                    None => report.stale += 1,
                },
                ItemState::Rejected => {
                    if graph.remove_triplet(triplet).is_some() {
                        report.triplets_removed += 1;
                    }
                }
                ItemState::Edited => {
                    let Some(Payload::Triplet { head, relation, tail, .. }) = &item.edited else {
                        continue;
                    };
                    let old = graph.remove_triplet(triplet);
                    let (h, t) = match (entity_by_label(graph, head), entity_by_label(graph, tail)) {
                        (Some(h), Some(t)) => (h, t),
                        (h, t) => {
                            let kind = graph
                                .find_relation(relation)
                                .map(|r| r.kind)
                                .unwrap_or(Kind::NonVisual);
                            let h = match h {
                                Some(h) => h,
                                None => graph.resolve_entity(head, Kind::NonVisual)?,
                            };
                            let t = match t {
                                Some(t) => t,
                                None => graph.resolve_entity(tail, kind)?,
                            };
                            (h, t)
                        }
                    };
                    let r = graph
                        .find_relation(relation)
                        .map(|r| r.id.clone())
                        .ok_or_else(|| Error::InvalidEdit(format!("unknown relation `{relation}`")))?;
                    let refs: Vec<SourceRef> = old.iter().flat_map(|o| o.source_refs.iter().cloned()).collect();
                    let mut provenance: Vec<Provenance> = old.iter().flat_map(|o| o.provenance.iter().copied()).collect();
                    provenance.push(Provenance::Manual);
                    let new_id = TripletId::for_key(&h, &r, &t);
                    let existed = graph
                        .triplet(&new_id)
                        .is_some_and(|x| x.provenance.contains(&Provenance::Manual));
                    graph.insert_triplet_with(&h, &r, &t, provenance, refs)?;
                    if old.is_some() || !existed {
                        report.triplets_edited += 1;
                    }
                }
                ItemState::Pending => {}
            },
            (state, Payload::Merge { proposal }) => {
                if state != ItemState::Approved {
                    continue;
                }
                let live = graph.entity(&proposal.survivor).is_some() && graph.entity(&proposal.absorbed).is_some();
                if !live {
                    continue;
                }
                let mut p = proposal.clone();
                p.status = MergeStatus::Proposed;
                apply_merge(graph, &mut p)?;
                report.merges_applied += 1;
            }
        }
    }
    Ok(report)
}

/// Deterministically samples `rate` of the auto-verified annotations (at
/// least one when any exist) for expert spot checks.
pub fn spot_check_sample(annotations: &[RegionAnnotation], rate: f64, seed: u64) -> Vec<RegionAnnotation> {
    let auto: Vec<&RegionAnnotation> = annotations
        .iter()
        .filter(|a| a.verified == VerifyState::AutoVerified)
        .collect();
    if auto.is_empty() || rate <= 0.0 {
        return Vec::new();
    }
    let n = ((auto.len() as f64 * rate.min(1.0)).ceil() as usize).max(1);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<(usize, &RegionAnnotation)> = auto
        .iter()
        .copied()
        .enumerate()
        .collect::<Vec<_>>()
        .choose_multiple(&mut rng, n)
        .copied()
        .collect();
    picked.sort_by_key(|(i, _)| *i);
    picked.into_iter().map(|(_, a)| a.clone()).collect()
}

/// Kind tally of decided items, as reported by the service.
pub fn decision_tally(queue: &ReviewQueue) -> BTreeMap<(ItemKind, String), usize> {
    let mut out = BTreeMap::new();
    for item in queue.items() {
        let state = format!("{:?}", item.state).to_lowercase();
        *out.entry((item.kind, state)).or_default() += 1;
    }
    out
}
