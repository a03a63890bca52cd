//! The triplet store: entities, relations, triplets and their region-level
//! groundings, plus the structural traversals used by extraction and review.
//!
//! Identifiers are derived from normalized labels (entities, relations) or
//! from the `(head, relation, tail)` key (triplets), so two graphs built from
//! the same content in any order carry identical ids.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::label::normalize;
use crate::mask::{BBox, RleMask};

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(raw: impl Into<String>) -> Self {
                Self(raw.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

string_id!(EntityId);
string_id!(RelationId);
string_id!(TripletId);
string_id!(ImageId);

impl EntityId {
    pub fn for_label(label: &str) -> Self {
        Self(format!("e:{}", normalize(label)))
    }
}

impl RelationId {
    pub fn for_label(label: &str) -> Self {
        Self(format!("r:{}", normalize(label)))
    }
}

impl TripletId {
    pub fn for_key(head: &EntityId, relation: &RelationId, tail: &EntityId) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(head.as_str().as_bytes());
        hasher.update([0u8]);
        hasher.update(relation.as_str().as_bytes());
        hasher.update([0u8]);
        hasher.update(tail.as_str().as_bytes());
        let digest = hasher.finalize();
        Self(format!("t:{}", hex::encode(&digest[..8])))
    }
}

/// Visual / non-visual partition of entities and relations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Visual,
    NonVisual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SeedAnnotation,
    LlmExtracted,
    Inherited,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyState {
    Unreviewed,
    AutoVerified,
    ExpertApproved,
    Rejected,
}

impl VerifyState {
    pub fn is_accepted(self) -> bool {
        matches!(self, VerifyState::AutoVerified | VerifyState::ExpertApproved)
    }
}

/// Document and segment a triplet was extracted from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SourceRef {
    pub document: String,
    pub segment: usize,
}

/// An image plus the area of it showing an entity or relation instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAnnotation {
    pub image: ImageId,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<RleMask>,
    pub label: String,
    pub verified: VerifyState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// Normalized label of the category (animal) the image depicts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl RegionAnnotation {
    pub fn new(image: ImageId, bbox: BBox, label: impl Into<String>) -> Self {
        Self {
            image,
            bbox,
            mask: None,
            label: label.into(),
            verified: VerifyState::Unreviewed,
            score: None,
            category: None,
        }
    }

    /// Same image and same area (box and mask).
    pub fn same_area(&self, other: &RegionAnnotation) -> bool {
        self.image == other.image && self.bbox == other.bbox && self.mask == other.mask
    }

    /// Box inside the image and, when present, the mask's set pixels inside
    /// the box grown by two pixels.
    pub fn check_bounds(&self, width: u32, height: u32) -> Result<()> {
        if !self.bbox.is_valid_in(width, height) {
            return Err(Error::ConstraintViolation(format!(
                "box {:?} outside {width}x{height} image {}",
                self.bbox, self.image
            )));
        }
        if let Some(rle) = &self.mask {
            if rle.width != width || rle.height != height {
                return Err(Error::ConstraintViolation(format!(
                    "mask is {}x{}, image {} is {width}x{height}",
                    rle.width, rle.height, self.image
                )));
            }
            if let Some(rect) = rle.decode()?.bounding_rect() {
                if !self.bbox.expand(2.0).contains_rect(&rect) {
                    return Err(Error::ConstraintViolation(format!(
                        "mask extends beyond box on image {}",
                        self.image
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub label: String,
    pub kind: Kind,
    #[serde(default)]
    pub groundings: Vec<RegionAnnotation>,
    #[serde(default)]
    pub aliases: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub id: RelationId,
    pub label: String,
    pub kind: Kind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub id: TripletId,
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
    pub provenance: BTreeSet<Provenance>,
    #[serde(default)]
    pub source_refs: BTreeSet<SourceRef>,
    #[serde(default)]
    pub groundings: Vec<RegionAnnotation>,
}

/// Triplets and entities reached by a bounded traversal, in discovery order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Subgraph {
    pub entities: Vec<EntityId>,
    pub triplets: Vec<TripletId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConnectivityReport {
    pub root: EntityId,
    pub unreachable: Vec<EntityId>,
}

impl ConnectivityReport {
    pub fn is_connected(&self) -> bool {
        self.unreachable.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeGraph {
    entities: BTreeMap<EntityId, Entity>,
    relations: BTreeMap<RelationId, Relation>,
    triplets: BTreeMap<TripletId, Triplet>,
    roots: BTreeMap<String, EntityId>,
    aliases: BTreeMap<String, EntityId>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn relations(&self) -> impl Iterator<Item = &Relation> {
        self.relations.values()
    }

    pub fn triplets(&self) -> impl Iterator<Item = &Triplet> {
        self.triplets.values()
    }

    pub fn roots(&self) -> &BTreeMap<String, EntityId> {
        &self.roots
    }

    pub fn entity(&self, id: &EntityId) -> Option<&Entity> {
        self.entities.get(id)
    }

    pub fn relation(&self, id: &RelationId) -> Option<&Relation> {
        self.relations.get(id)
    }

    pub fn triplet(&self, id: &TripletId) -> Option<&Triplet> {
        self.triplets.get(id)
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn triplet_count(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty() && self.relations.is_empty() && self.triplets.is_empty()
    }

    /// Entity whose normalized label or alias equals `label`.
    pub fn find_entity(&self, label: &str) -> Option<&Entity> {
        let norm = normalize(label);
        self.entities
            .get(&EntityId::for_label(&norm))
            .or_else(|| self.aliases.get(&norm).and_then(|id| self.entities.get(id)))
    }

    pub fn find_relation(&self, label: &str) -> Option<&Relation> {
        self.relations.get(&RelationId::for_label(label))
    }

    pub fn find_triplet(
        &self,
        head: &EntityId,
        relation: &RelationId,
        tail: &EntityId,
    ) -> Option<&Triplet> {
        self.triplets.get(&TripletId::for_key(head, relation, tail))
    }

    /// Triplet's relation kind; `None` if the relation is missing.
    pub fn triplet_kind(&self, triplet: &Triplet) -> Option<Kind> {
        self.relations.get(&triplet.relation).map(|r| r.kind)
    }

    /// Returns the id of the entity with this normalized label (or alias),
    /// inserting it when absent.
    pub fn upsert_entity(&mut self, label: &str, kind: Kind) -> Result<EntityId> {
        let norm = normalize(label);
        if norm.is_empty() {
            return Err(Error::EmptyLabel);
        }
        if let Some(existing) = self.find_entity(&norm) {
            if existing.kind != kind {
                return Err(Error::KindConflict {
                    label: norm,
                    existing: existing.kind,
                });
            }
            return Ok(existing.id.clone());
        }
        let id = EntityId::for_label(&norm);
        self.entities.insert(
            id.clone(),
            Entity {
                id: id.clone(),
                label: norm,
                kind,
                groundings: Vec::new(),
                aliases: BTreeSet::new(),
            },
        );
        Ok(id)
    }

    /// Like [`upsert_entity`](Self::upsert_entity) but reconciles kinds
    /// instead of failing: a visual request promotes an existing ungrounded
    /// non-visual entity, a non-visual request reuses a visual one.
    pub fn resolve_entity(&mut self, label: &str, kind: Kind) -> Result<EntityId> {
        match self.upsert_entity(label, kind) {
            Err(Error::KindConflict { label, existing }) => {
                let id = self
                    .find_entity(&label)
                    .map(|e| e.id.clone())
                    .expect("conflicting entity exists");
                if existing == Kind::NonVisual && kind == Kind::Visual {
                    if let Some(e) = self.entities.get_mut(&id) {
                        e.kind = Kind::Visual;
                    }
                }
                Ok(id)
            }
            other => other,
        }
    }

    /// Registers a relation; its kind is fixed once defined.
    pub fn define_relation(&mut self, label: &str, kind: Kind) -> Result<RelationId> {
        let trimmed = label.trim();
        if trimmed.is_empty() {
            return Err(Error::EmptyLabel);
        }
        let id = RelationId::for_label(trimmed);
        if let Some(existing) = self.relations.get(&id) {
            if existing.kind != kind {
                return Err(Error::KindConflict {
                    label: existing.label.clone(),
                    existing: existing.kind,
                });
            }
            return Ok(id);
        }
        self.relations.insert(
            id.clone(),
            Relation {
                id: id.clone(),
                label: trimmed.to_string(),
                kind,
            },
        );
        Ok(id)
    }

    /// Inserts `(head, relation, tail)`; on duplicates the stored triplet
    /// absorbs the new provenance and source reference.
    pub fn insert_triplet(
        &mut self,
        head: &EntityId,
        relation: &RelationId,
        tail: &EntityId,
        provenance: Provenance,
        source_ref: Option<SourceRef>,
    ) -> Result<TripletId> {
        self.insert_triplet_with(
            head,
            relation,
            tail,
            std::iter::once(provenance),
            source_ref,
        )
    }

    pub(crate) fn insert_triplet_with(
        &mut self,
        head: &EntityId,
        relation: &RelationId,
        tail: &EntityId,
        provenance: impl IntoIterator<Item = Provenance>,
        source_refs: impl IntoIterator<Item = SourceRef>,
    ) -> Result<TripletId> {
        for id in [head, tail] {
            if !self.entities.contains_key(id) {
                return Err(Error::DanglingReference(format!("entity {id}")));
            }
        }
        if !self.relations.contains_key(relation) {
            return Err(Error::DanglingReference(format!("relation {relation}")));
        }
        let id = TripletId::for_key(head, relation, tail);
        let triplet = self.triplets.entry(id.clone()).or_insert_with(|| Triplet {
            id: id.clone(),
            head: head.clone(),
            relation: relation.clone(),
            tail: tail.clone(),
            provenance: BTreeSet::new(),
            source_refs: BTreeSet::new(),
            groundings: Vec::new(),
        });
        triplet.provenance.extend(provenance);
        triplet.source_refs.extend(source_refs);
        Ok(id)
    }

    pub fn remove_triplet(&mut self, id: &TripletId) -> Option<Triplet> {
        self.triplets.remove(id)
    }

    pub fn add_provenance(&mut self, id: &TripletId, provenance: Provenance) -> Result<bool> {
        let t = self
            .triplets
            .get_mut(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))?;
        Ok(t.provenance.insert(provenance))
    }

    /// Adds a grounding to a visual entity. Returns `false` if an annotation
    /// with the same image and area is already present.
    pub fn add_entity_grounding(
        &mut self,
        id: &EntityId,
        annotation: RegionAnnotation,
    ) -> Result<bool> {
        let entity = self
            .entities
            .get_mut(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))?;
        if entity.kind != Kind::Visual {
            return Err(Error::ConstraintViolation(format!(
                "non-visual entity {id} cannot carry groundings"
            )));
        }
        if entity.groundings.iter().any(|g| g.same_area(&annotation)) {
            return Ok(false);
        }
        entity.groundings.push(annotation);
        Ok(true)
    }

    pub fn add_triplet_grounding(
        &mut self,
        id: &TripletId,
        annotation: RegionAnnotation,
    ) -> Result<bool> {
        let triplet = self
            .triplets
            .get(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))?;
        if self.triplet_kind(triplet) != Some(Kind::Visual) {
            return Err(Error::ConstraintViolation(format!(
                "triplet {id} has a non-visual relation and cannot carry groundings"
            )));
        }
        let triplet = self.triplets.get_mut(id).expect("checked above");
        if triplet.groundings.iter().any(|g| g.same_area(&annotation)) {
            return Ok(false);
        }
        triplet.groundings.push(annotation);
        Ok(true)
    }

    pub fn add_alias(&mut self, id: &EntityId, alias: &str) -> Result<()> {
        let norm = normalize(alias);
        if norm.is_empty() {
            return Err(Error::EmptyLabel);
        }
        let entity = self
            .entities
            .get_mut(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))?;
        if entity.label != norm {
            entity.aliases.insert(norm.clone());
            self.aliases.insert(norm, id.clone());
        }
        Ok(())
    }

    /// Marks `entity` as the root node of the document graph of `category`.
    pub fn set_root(&mut self, category: &str, entity: &EntityId) -> Result<()> {
        if !self.entities.contains_key(entity) {
            return Err(Error::DanglingReference(format!("entity {entity}")));
        }
        self.roots.insert(normalize(category), entity.clone());
        Ok(())
    }

    pub fn root_for(&self, category: &str) -> Option<&EntityId> {
        self.roots.get(&normalize(category))
    }

    pub(crate) fn entity_mut(&mut self, id: &EntityId) -> Option<&mut Entity> {
        self.entities.get_mut(id)
    }

    pub(crate) fn triplet_mut(&mut self, id: &TripletId) -> Option<&mut Triplet> {
        self.triplets.get_mut(id)
    }

    pub(crate) fn remove_entity(&mut self, id: &EntityId) -> Option<Entity> {
        let removed = self.entities.remove(id)?;
        self.aliases.retain(|_, target| target != id);
        self.roots.retain(|_, target| target != id);
        Some(removed)
    }

    pub(crate) fn repoint_roots(&mut self, from: &EntityId, to: &EntityId) {
        for target in self.roots.values_mut() {
            if target == from {
                *target = to.clone();
            }
        }
    }

    /// Inserts a fully formed entity, as read back from an archive.
    pub(crate) fn restore_entity(&mut self, entity: Entity) {
        for alias in &entity.aliases {
            self.aliases.insert(alias.clone(), entity.id.clone());
        }
        self.entities.insert(entity.id.clone(), entity);
    }

    pub(crate) fn restore_relation(&mut self, relation: Relation) {
        self.relations.insert(relation.id.clone(), relation);
    }

    pub(crate) fn restore_triplet(&mut self, triplet: Triplet) {
        self.triplets.insert(triplet.id.clone(), triplet);
    }

    pub(crate) fn restore_root(&mut self, category: String, entity: EntityId) {
        self.roots.insert(category, entity);
    }

    /// Undirected adjacency: neighbor and connecting triplet, sorted by
    /// neighbor id then triplet id.
    fn adjacency(&self) -> BTreeMap<&EntityId, Vec<(&EntityId, &TripletId)>> {
        let mut adj: BTreeMap<&EntityId, Vec<(&EntityId, &TripletId)>> = BTreeMap::new();
        for t in self.triplets.values() {
            adj.entry(&t.head).or_default().push((&t.tail, &t.id));
            if t.head != t.tail {
                adj.entry(&t.tail).or_default().push((&t.head, &t.id));
            }
        }
        for list in adj.values_mut() {
            list.sort();
        }
        adj
    }

    /// Breadth-first traversal from `root` over undirected edges; a triplet
    /// is included when one endpoint lies fewer than `max_hops` hops away.
    pub fn category_subgraph(&self, root: &EntityId, max_hops: usize) -> Result<Subgraph> {
        if !self.entities.contains_key(root) {
            return Err(Error::UnknownRoot(root.to_string()));
        }
        let adj = self.adjacency();
        let mut dist: BTreeMap<&EntityId, usize> = BTreeMap::new();
        let mut seen_triplets = BTreeSet::new();
        let mut out = Subgraph::default();
        let mut queue = VecDeque::new();
        dist.insert(root, 0);
        out.entities.push(root.clone());
        queue.push_back(root);
        while let Some(node) = queue.pop_front() {
            let d = dist[node];
            if d >= max_hops {
                continue;
            }
            for &(next, tid) in adj.get(node).map(Vec::as_slice).unwrap_or_default() {
                if seen_triplets.insert(tid) {
                    out.triplets.push(tid.clone());
                }
                if !dist.contains_key(next) {
                    dist.insert(next, d + 1);
                    out.entities.push(next.clone());
                    queue.push_back(next);
                }
            }
        }
        Ok(out)
    }

    /// Entities of this graph that no undirected path connects to `root`.
    pub fn validate_connectivity(&self, root: &EntityId) -> Result<ConnectivityReport> {
        let reachable: BTreeSet<EntityId> = self
            .category_subgraph(root, usize::MAX)?
            .entities
            .into_iter()
            .collect();
        let unreachable = self
            .entities
            .keys()
            .filter(|id| !reachable.contains(*id))
            .cloned()
            .collect();
        Ok(ConnectivityReport {
            root: root.clone(),
            unreachable,
        })
    }

    /// Unions `other` into `self`, reconciling entity kinds with
    /// [`resolve_entity`](Self::resolve_entity).
    pub fn merge_from(&mut self, other: &KnowledgeGraph) -> Result<()> {
        for r in other.relations.values() {
            self.define_relation(&r.label, r.kind)?;
        }
        let mut mapping = BTreeMap::new();
        for e in other.entities.values() {
            let id = self.resolve_entity(&e.label, e.kind)?;
            for alias in &e.aliases {
                self.add_alias(&id, alias)?;
            }
            for g in &e.groundings {
                self.add_entity_grounding(&id, g.clone())?;
            }
            mapping.insert(e.id.clone(), id);
        }
        for t in other.triplets.values() {
            let relation = other
                .relations
                .get(&t.relation)
                .ok_or_else(|| Error::DanglingReference(format!("relation {}", t.relation)))?;
            let rid = RelationId::for_label(&relation.label);
            let id = self.insert_triplet_with(
                &mapping[&t.head],
                &rid,
                &mapping[&t.tail],
                t.provenance.iter().copied(),
                t.source_refs.iter().cloned(),
            )?;
            for g in &t.groundings {
                self.add_triplet_grounding(&id, g.clone())?;
            }
        }
        for (category, root) in &other.roots {
            self.roots.insert(category.clone(), mapping[root].clone());
        }
        Ok(())
    }

    /// Full-scan integrity audit.
    pub fn audit(&self) -> Result<()> {
        for (id, t) in &self.triplets {
            if id != &t.id || TripletId::for_key(&t.head, &t.relation, &t.tail) != t.id {
                return Err(Error::ConstraintViolation(format!(
                    "triplet {id} does not match its key"
                )));
            }
            for e in [&t.head, &t.tail] {
                if !self.entities.contains_key(e) {
                    return Err(Error::DanglingReference(format!("triplet {id} -> entity {e}")));
                }
            }
            let relation = self.relations.get(&t.relation).ok_or_else(|| {
                Error::DanglingReference(format!("triplet {id} -> relation {}", t.relation))
            })?;
            if !t.groundings.is_empty() && relation.kind != Kind::Visual {
                return Err(Error::ConstraintViolation(format!(
                    "non-visual triplet {id} carries groundings"
                )));
            }
        }
        for (id, e) in &self.entities {
            if id != &e.id {
                return Err(Error::ConstraintViolation(format!("entity {id} id mismatch")));
            }
            if e.kind == Kind::NonVisual && !e.groundings.is_empty() {
                return Err(Error::ConstraintViolation(format!(
                    "non-visual entity {id} carries groundings"
                )));
            }
            for (i, g) in e.groundings.iter().enumerate() {
                if e.groundings[..i].iter().any(|p| p.same_area(g)) {
                    return Err(Error::ConstraintViolation(format!(
                        "entity {id} has duplicate groundings"
                    )));
                }
            }
        }
        for (alias, id) in &self.aliases {
            if !self.entities.get(id).is_some_and(|e| e.aliases.contains(alias)) {
                return Err(Error::DanglingReference(format!("alias {alias} -> {id}")));
            }
        }
        for (category, id) in &self.roots {
            if !self.entities.contains_key(id) {
                return Err(Error::DanglingReference(format!("root {category} -> {id}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain_graph() -> (KnowledgeGraph, EntityId, EntityId, EntityId, RelationId) {
        let mut g = KnowledgeGraph::new();
        let a = g.upsert_entity("A", Kind::Visual).unwrap();
        let b = g.upsert_entity("B", Kind::Visual).unwrap();
        let c = g.upsert_entity("C", Kind::Visual).unwrap();
        let r = g.define_relation("r", Kind::Visual).unwrap();
        g.insert_triplet(&a, &r, &b, Provenance::Manual, None).unwrap();
        g.insert_triplet(&b, &r, &c, Provenance::Manual, None).unwrap();
        (g, a, b, c, r)
    }

    #[test]
    fn upsert_is_idempotent_and_normalizes() {
        let mut g = KnowledgeGraph::new();
        let a = g.upsert_entity("cat", Kind::Visual).unwrap();
        assert_eq!(g.upsert_entity("cat", Kind::Visual).unwrap(), a);
        assert_eq!(g.upsert_entity("Cat ", Kind::Visual).unwrap(), a);
        // brute-force scan: exactly one entity carries the label
        assert_eq!(g.entities().filter(|e| e.label == "cat").count(), 1);
        assert!(matches!(g.upsert_entity("", Kind::Visual), Err(Error::EmptyLabel)));
        assert!(matches!(
            g.upsert_entity("CAT", Kind::NonVisual),
            Err(Error::KindConflict { .. })
        ));
    }

    #[test]
    fn resolve_promotes_non_visual() {
        let mut g = KnowledgeGraph::new();
        let id = g.upsert_entity("fish", Kind::NonVisual).unwrap();
        assert_eq!(g.resolve_entity("fish", Kind::Visual).unwrap(), id);
        assert_eq!(g.entity(&id).unwrap().kind, Kind::Visual);
        assert_eq!(g.resolve_entity("fish", Kind::NonVisual).unwrap(), id);
        assert_eq!(g.entity(&id).unwrap().kind, Kind::Visual);
    }

    #[test]
    fn triplet_dedup_and_provenance_union() {
        let mut g = KnowledgeGraph::new();
        let cat = g.upsert_entity("cat", Kind::Visual).unwrap();
        let tail = g.upsert_entity("tail", Kind::Visual).unwrap();
        let have = g.define_relation("Have", Kind::Visual).unwrap();
        let t1 = g
            .insert_triplet(&cat, &have, &tail, Provenance::SeedAnnotation, None)
            .unwrap();
        let t2 = g
            .insert_triplet(&cat, &have, &tail, Provenance::LlmExtracted, None)
            .unwrap();
        assert_eq!(t1, t2);
        assert_eq!(g.triplet_count(), 1);
        let prov: Vec<_> = g.triplet(&t1).unwrap().provenance.iter().copied().collect();
        assert_eq!(prov, vec![Provenance::SeedAnnotation, Provenance::LlmExtracted]);

        let ghost = EntityId::new("e:ghost");
        assert!(matches!(
            g.insert_triplet(&cat, &have, &ghost, Provenance::Manual, None),
            Err(Error::DanglingReference(_))
        ));
    }

    #[test]
    fn groundings_only_on_visual_relations() {
        let mut g = KnowledgeGraph::new();
        let cat = g.upsert_entity("cat", Kind::Visual).unwrap();
        let fish = g.upsert_entity("fish", Kind::Visual).unwrap();
        let eat = g.define_relation("Eat", Kind::NonVisual).unwrap();
        let t = g.insert_triplet(&cat, &eat, &fish, Provenance::Manual, None).unwrap();
        let ann = RegionAnnotation::new("img".into(), BBox::new(0.0, 0.0, 1.0, 1.0), "eat");
        assert!(g.add_triplet_grounding(&t, ann).is_err());
        g.audit().unwrap();
    }

    #[test]
    fn subgraph_hop_bounds() {
        let (g, a, b, _, _) = chain_graph();
        let zero = g.category_subgraph(&a, 0).unwrap();
        assert!(zero.triplets.is_empty());
        assert_eq!(zero.entities, vec![a.clone()]);
        let one = g.category_subgraph(&a, 1).unwrap();
        assert_eq!(one.triplets.len(), 1);
        let t = g.triplet(&one.triplets[0]).unwrap();
        assert_eq!((&t.head, &t.tail), (&a, &b));
        assert!(matches!(
            g.category_subgraph(&EntityId::new("e:none"), 1),
            Err(Error::UnknownRoot(_))
        ));
    }

    #[test]
    fn connectivity_reports_isolated_nodes() {
        let mut g = KnowledgeGraph::new();
        let root = g.upsert_entity("root", Kind::Visual).unwrap();
        let r = g.define_relation("Have", Kind::Visual).unwrap();
        for name in ["b", "c", "d"] {
            let id = g.upsert_entity(name, Kind::Visual).unwrap();
            g.insert_triplet(&root, &r, &id, Provenance::Manual, None).unwrap();
        }
        assert!(g.validate_connectivity(&root).unwrap().is_connected());
        let e = g.upsert_entity("e", Kind::Visual).unwrap();
        assert_eq!(g.validate_connectivity(&root).unwrap().unreachable, vec![e]);
    }

    fn random_graph(seed: u64, nodes: usize, edges: usize) -> KnowledgeGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = KnowledgeGraph::new();
        let ids: Vec<_> = (0..nodes)
            .map(|i| g.upsert_entity(&format!("n{i}"), Kind::Visual).unwrap())
            .collect();
        let r = g.define_relation("r", Kind::NonVisual).unwrap();
        for _ in 0..edges {
            let h = &ids[rng.random_range(0..nodes)];
            let t = &ids[rng.random_range(0..nodes)];
            g.insert_triplet(h, &r, t, Provenance::Manual, None).unwrap();
        }
        g
    }

    // Independent BFS over an edge list, ignoring the graph's adjacency code.
    fn oracle_component(g: &KnowledgeGraph, root: &EntityId) -> BTreeSet<EntityId> {
        let edges: Vec<(EntityId, EntityId)> = g
            .triplets()
            .map(|t| (t.head.clone(), t.tail.clone()))
            .collect();
        let mut seen = BTreeSet::from([root.clone()]);
        loop {
            let before = seen.len();
            for (h, t) in &edges {
                if seen.contains(h) || seen.contains(t) {
                    seen.insert(h.clone());
                    seen.insert(t.clone());
                }
            }
            if seen.len() == before {
                return seen;
            }
        }
    }

    #[test]
    fn full_depth_subgraph_equals_component() {
        for seed in 0..20 {
            let g = random_graph(seed, 10, 8);
            for root in g.entities().map(|e| e.id.clone()).collect::<Vec<_>>() {
                let sub = g.category_subgraph(&root, 10).unwrap();
                let got: BTreeSet<_> = sub.entities.into_iter().collect();
                assert_eq!(got, oracle_component(&g, &root));
            }
        }
    }

    #[test]
    fn connectivity_matches_bfs_complement() {
        for seed in 0..10 {
            let g = random_graph(100 + seed, 30, 25);
            let root = EntityId::for_label("n0");
            let comp = oracle_component(&g, &root);
            let expected: Vec<_> = g
                .entities()
                .map(|e| e.id.clone())
                .filter(|id| !comp.contains(id))
                .collect();
            assert_eq!(g.validate_connectivity(&root).unwrap().unreachable, expected);
        }
    }

    proptest! {
        #[test]
        fn subgraphs_are_monotone_in_hops(seed in 0u64..500, k in 0usize..6) {
            let g = random_graph(seed, 12, 14);
            let root = EntityId::for_label("n0");
            let small = g.category_subgraph(&root, k).unwrap();
            let large = g.category_subgraph(&root, k + 1).unwrap();
            let large_t: BTreeSet<_> = large.triplets.iter().collect();
            let large_e: BTreeSet<_> = large.entities.iter().collect();
            prop_assert!(small.triplets.iter().all(|t| large_t.contains(t)));
            prop_assert!(small.entities.iter().all(|e| large_e.contains(e)));
        }

        #[test]
        fn operations_preserve_integrity(seed in 0u64..500) {
            let mut g = random_graph(seed, 8, 12);
            let other = random_graph(seed + 1, 8, 12);
            g.merge_from(&other).unwrap();
            prop_assert!(g.audit().is_ok());
        }
    }
}
