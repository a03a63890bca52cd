//! Multi-modal alignment and completion: attaching media to categories by
//! name, inheriting trivial parts, proposing and applying similarity merges,
//! and grounding visual relations on the union of head and tail regions.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    EntityId, ImageId, Kind, KnowledgeGraph, Provenance, RegionAnnotation, TripletId, VerifyState,
};
use crate::mask::BinaryMask;
use crate::persistence::{full_image_grounding, MediaManifest};
use crate::provider::{
    cosine, with_retries, Embedder, HttpEmbedder, HttpEndpoint, ProviderError, ProviderResult,
    RetryPolicy,
};
use crate::region::PartHierarchy;

/// Label of the part relation used for inherited triplets.
pub const HAVE: &str = "Have";

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AlignReport {
    pub attached: usize,
    /// Rows whose image was already grounded on the category.
    pub already_present: usize,
    pub per_category: BTreeMap<String, usize>,
    pub unmatched: Vec<ImageId>,
}

/// Attaches each manifest image to the category entity whose label or alias
/// equals the row's normalized category label.
pub fn align_media_by_name(
    graph: &mut KnowledgeGraph,
    manifest: &MediaManifest,
) -> Result<AlignReport> {
    let categories: BTreeSet<EntityId> = graph.roots().values().cloned().collect();
    let mut report = AlignReport::default();
    for row in manifest.entries() {
        let target = graph
            .find_entity(&row.category_label)
            .filter(|e| categories.contains(&e.id) && e.kind == Kind::Visual)
            .map(|e| (e.id.clone(), e.label.clone()));
        let Some((id, label)) = target else {
            report.unmatched.push(row.image.clone());
            continue;
        };
        if graph.add_entity_grounding(&id, full_image_grounding(row, &label))? {
            report.attached += 1;
            *report.per_category.entry(label).or_default() += 1;
        } else {
            report.already_present += 1;
        }
    }
    Ok(report)
}

/// Inserts `[animal]-Have-[part]` for every hierarchy part that has
/// groundings on images of that animal but no such triplet yet. Returns the
/// created triplet ids; a second run returns nothing.
pub fn inherit_trivial_parts(
    graph: &mut KnowledgeGraph,
    hierarchies: &[PartHierarchy],
) -> Result<Vec<TripletId>> {
    let have = graph.define_relation(HAVE, Kind::Visual)?;
    let mut created = Vec::new();
    for h in hierarchies {
        if graph.entity(&h.category).is_none() {
            return Err(Error::UnknownRoot(h.category_label.clone()));
        }
        for part in h.part_labels() {
            let Some(entity) = graph.find_entity(part) else {
                continue;
            };
            let grounded = entity
                .groundings
                .iter()
                .any(|g| g.category.as_deref() == Some(h.category_label.as_str()));
            if !grounded || entity.id == h.category {
                continue;
            }
            let part_id = entity.id.clone();
            if graph.find_triplet(&h.category, &have, &part_id).is_some() {
                continue;
            }
            created.push(graph.insert_triplet(
                &h.category,
                &have,
                &part_id,
                Provenance::Inherited,
                None,
            )?);
        }
    }
    Ok(created)
}

/// Connection settings of an embedding service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingProviderConfig {
    pub endpoint: String,
    pub model: String,
    pub dimension: usize,
    /// Whether the service already returns unit-norm vectors.
    #[serde(default)]
    pub unit_norm: bool,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    30
}

impl EmbeddingProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(Error::InvalidConfig("embedding dimension must be > 0".into()));
        }
        if self.endpoint.trim().is_empty() {
            return Err(Error::InvalidConfig("embedding endpoint is empty".into()));
        }
        Ok(())
    }

    pub fn connect(&self, token: Option<String>) -> Result<CheckedEmbedder<HttpEmbedder>> {
        self.validate()?;
        let endpoint = HttpEndpoint::new(
            &self.endpoint,
            &self.model,
            Duration::from_secs(self.timeout_secs),
            token,
        )?;
        Ok(CheckedEmbedder {
            inner: HttpEmbedder(endpoint),
            dimension: self.dimension,
            normalize: !self.unit_norm,
        })
    }
}

/// Wraps an embedder, rejecting vectors of the wrong dimension and
/// optionally L2-normalizing them.
pub struct CheckedEmbedder<E> {
    pub inner: E,
    pub dimension: usize,
    pub normalize: bool,
}

impl<E: Embedder> Embedder for CheckedEmbedder<E> {
    fn embed(&self, texts: &[String]) -> ProviderResult<Vec<Vec<f64>>> {
        let mut vectors = self.inner.embed(texts)?;
        for v in &mut vectors {
            if v.len() != self.dimension {
                return Err(ProviderError::Malformed(format!(
                    "vector of length {}, expected {}",
                    v.len(),
                    self.dimension
                )));
            }
            if self.normalize {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|x| *x /= norm);
                }
            }
        }
        Ok(vectors)
    }
}

/// Embeds `texts` in batches, at most `concurrency` batches in flight.
pub fn embed_batched(
    embedder: &dyn Embedder,
    texts: &[String],
    batch_size: usize,
    concurrency: usize,
    retry: RetryPolicy,
) -> Result<Vec<Vec<f64>>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let batches: Vec<Result<Vec<Vec<f64>>>> = pool.install(|| {
        texts
            .par_chunks(batch_size.max(1))
            .map(|chunk| {
                let (vectors, _) = with_retries(retry, || embedder.embed(chunk))?;
                if vectors.len() != chunk.len() {
                    return Err(Error::ProviderMalformed {
                        raw: format!("{} vectors", vectors.len()),
                        reason: format!("expected {}", chunk.len()),
                    });
                }
                Ok(vectors)
            })
            .collect()
    });
    let mut out = Vec::with_capacity(texts.len());
    for b in batches {
        out.extend(b?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeStatus {
    Proposed,
    Applied,
    Vetoed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeProposal {
    pub survivor: EntityId,
    pub absorbed: EntityId,
    pub survivor_label: String,
    pub absorbed_label: String,
    pub similarity: f64,
    pub status: MergeStatus,
}

#[derive(Debug, Clone, Copy)]
pub struct MergeConfig {
    pub threshold: f64,
    pub batch_size: usize,
    pub concurrency: usize,
    pub retry: RetryPolicy,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            threshold: 0.85,
            batch_size: 64,
            concurrency: 4,
            retry: RetryPolicy::default(),
        }
    }
}

/// Proposes a merge for every same-kind entity pair whose label embeddings
/// have cosine similarity at or above the threshold. The survivor is the
/// lexicographically smaller label. Proposals are sorted by
/// (survivor label, absorbed label) and never applied here.
pub fn merge_similar_entities(
    graph: &KnowledgeGraph,
    embedder: &dyn Embedder,
    config: &MergeConfig,
) -> Result<Vec<MergeProposal>> {
    if !(config.threshold > 0.0 && config.threshold <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "merge threshold {} outside (0, 1]",
            config.threshold
        )));
    }
    let mut entities: Vec<(&str, &EntityId, Kind)> = graph
        .entities()
        .map(|e| (e.label.as_str(), &e.id, e.kind))
        .collect();
    entities.sort();
    let labels: Vec<String> = entities.iter().map(|(l, _, _)| l.to_string()).collect();
    let vectors = embed_batched(
        embedder,
        &labels,
        config.batch_size,
        config.concurrency,
        config.retry,
    )?;
    let mut proposals = Vec::new();
    for i in 0..entities.len() {
        for j in i + 1..entities.len() {
            let (li, idi, ki) = entities[i];
            let (lj, idj, kj) = entities[j];
            if ki != kj {
                continue;
            }
            let sim = cosine(&vectors[i], &vectors[j]).clamp(-1.0, 1.0);
            if sim >= config.threshold {
                // labels are sorted, so i holds the smaller one
                proposals.push(MergeProposal {
                    survivor: idi.clone(),
                    absorbed: idj.clone(),
                    survivor_label: li.to_string(),
                    absorbed_label: lj.to_string(),
                    similarity: sim,
                    status: MergeStatus::Proposed,
                });
            }
        }
    }
    Ok(proposals)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MergeOutcome {
    pub repointed: usize,
    /// Repointed triplets that coincided with an existing one.
    pub deduplicated: usize,
    /// Triplets between the two merged entities, dropped as self-loops.
    pub dropped_self_loops: usize,
    /// Absorbed groundings whose image and area the survivor already had.
    pub duplicate_groundings: usize,
}

/// Folds `absorbed` into `survivor`: triplets are re-pointed, groundings
/// appended (identical image-and-area pairs collapse into one), the absorbed label and aliases become aliases of
/// the survivor, and category roots follow.
pub fn apply_merge(graph: &mut KnowledgeGraph, proposal: &mut MergeProposal) -> Result<MergeOutcome> {
    if proposal.status != MergeStatus::Proposed {
        return Err(Error::ConstraintViolation(format!(
            "merge {} <- {} is {:?}",
            proposal.survivor_label, proposal.absorbed_label, proposal.status
        )));
    }
    if proposal.survivor == proposal.absorbed {
        return Err(Error::ConstraintViolation("cannot merge an entity into itself".into()));
    }
    let survivor_kind = graph
        .entity(&proposal.survivor)
        .ok_or_else(|| Error::UnknownId(proposal.survivor.to_string()))?
        .kind;
    let absorbed_kind = graph
        .entity(&proposal.absorbed)
        .ok_or_else(|| Error::UnknownId(proposal.absorbed.to_string()))?
        .kind;
    if survivor_kind != absorbed_kind {
        return Err(Error::ConstraintViolation(format!(
            "cannot merge {absorbed_kind:?} {} into {survivor_kind:?} {}",
            proposal.absorbed_label, proposal.survivor_label
        )));
    }

    let mut outcome = MergeOutcome::default();
    let touching: Vec<TripletId> = graph
        .triplets()
        .filter(|t| t.head == proposal.absorbed || t.tail == proposal.absorbed)
        .map(|t| t.id.clone())
        .collect();
    let swap = |id: &EntityId| {
        if *id == proposal.absorbed {
            proposal.survivor.clone()
        } else {
            id.clone()
        }
    };
    for id in touching {
        let old = graph.remove_triplet(&id).expect("listed above");
        let head = swap(&old.head);
        let tail = swap(&old.tail);
        if head == tail {
            outcome.dropped_self_loops += 1;
            continue;
        }
        if graph.find_triplet(&head, &old.relation, &tail).is_some() {
            outcome.deduplicated += 1;
        }
        let new_id =
            graph.insert_triplet_with(&head, &old.relation, &tail, old.provenance, old.source_refs)?;
        graph
            .triplet_mut(&new_id)
            .expect("just inserted")
            .groundings
            .extend(old.groundings);
        outcome.repointed += 1;
    }

    let absorbed = graph
        .remove_entity(&proposal.absorbed)
        .expect("checked above");
    graph.repoint_roots(&proposal.absorbed, &proposal.survivor);
    let survivor = graph.entity_mut(&proposal.survivor).expect("checked above");
    let label = survivor.label.clone();
    for mut g in absorbed.groundings {
        if survivor.groundings.iter().any(|s| s.same_area(&g)) {
            outcome.duplicate_groundings += 1;
            continue;
        }
        g.label = label.clone();
        survivor.groundings.push(g);
    }
    for alias in std::iter::once(absorbed.label).chain(absorbed.aliases) {
        graph.add_alias(&proposal.survivor, &alias)?;
    }
    proposal.status = MergeStatus::Applied;
    Ok(outcome)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RelationGroundingReport {
    /// Visual triplets that received at least one new grounding.
    pub triplets_grounded: usize,
    pub groundings_created: usize,
    /// Created groundings carrying a pixel-mask union.
    pub with_mask: usize,
}

fn regions_by_image(groundings: &[RegionAnnotation]) -> BTreeMap<&ImageId, Vec<&RegionAnnotation>> {
    let mut map: BTreeMap<&ImageId, Vec<&RegionAnnotation>> = BTreeMap::new();
    for g in groundings.iter().filter(|g| g.verified != VerifyState::Rejected) {
        map.entry(&g.image).or_default().push(g);
    }
    map
}

/// Area covered by several regions of one image: the tight rectangle around
/// all boxes and, when every region has a mask, the pixelwise OR of masks.
pub fn union_region(regions: &[&RegionAnnotation]) -> Result<(crate::mask::BBox, Option<BinaryMask>)> {
    let first = regions
        .first()
        .ok_or_else(|| Error::ConstraintViolation("union of no regions".into()))?;
    let rect = regions[1..]
        .iter()
        .fold(first.bbox, |acc, r| acc.union_rect(&r.bbox));
    let mut mask: Option<BinaryMask> = None;
    for r in regions {
        let Some(rle) = &r.mask else {
            return Ok((rect, None));
        };
        let m = rle.decode()?;
        mask = Some(match mask {
            None => m,
            Some(acc) => acc.union(&m)?,
        });
    }
    Ok((rect, mask))
}

/// For every visual triplet whose head and tail are both grounded on the same
/// image, adds one relation grounding per image covering both regions.
pub fn ground_visual_relations(graph: &mut KnowledgeGraph) -> Result<RelationGroundingReport> {
    let mut pending: Vec<(TripletId, RegionAnnotation)> = Vec::new();
    for t in graph.triplets() {
        if graph.triplet_kind(t) != Some(Kind::Visual) {
            continue;
        }
        let (Some(head), Some(tail)) = (graph.entity(&t.head), graph.entity(&t.tail)) else {
            continue;
        };
        let relation = graph.relation(&t.relation).expect("kind resolved");
        let heads = regions_by_image(&head.groundings);
        let tails = regions_by_image(&tail.groundings);
        for (image, hs) in &heads {
            let Some(ts) = tails.get(image) else { continue };
            let all: Vec<&RegionAnnotation> = hs.iter().chain(ts).copied().collect();
            let (rect, mask) = union_region(&all)?;
            let verified = if all.iter().all(|g| g.verified == VerifyState::ExpertApproved) {
                VerifyState::ExpertApproved
            } else {
                VerifyState::AutoVerified
            };
            pending.push((
                t.id.clone(),
                RegionAnnotation {
                    image: (*image).clone(),
                    bbox: rect,
                    mask: mask.map(|m| m.encode()),
                    label: format!("{} {} {}", head.label, relation.label, tail.label),
                    verified,
                    score: None,
                    category: hs[0].category.clone().or_else(|| ts[0].category.clone()),
                },
            ));
        }
    }
    let mut report = RelationGroundingReport::default();
    let mut touched = BTreeSet::new();
    for (id, ann) in pending {
        let has_mask = ann.mask.is_some();
        if graph.add_triplet_grounding(&id, ann)? {
            report.groundings_created += 1;
            report.with_mask += usize::from(has_mask);
            touched.insert(id);
        }
    }
    report.triplets_grounded = touched.len();
    Ok(report)
}
