//! Versioned on-disk archive of the knowledge base and its media manifest.
//!
//! Layout of a KB directory:
//!
//! ```text
//! meta.json          format_version, record counts, checksum (lowercase hex)
//! entities.jsonl     one entity per line, sorted by id
//! relations.jsonl
//! triplets.jsonl
//! manifest.jsonl     media manifest, sorted by image id
//! annotations.jsonl  groundings of entities and triplets, sorted by owner
//! ```
//!
//! The checksum is SHA-256 over the five data files concatenated in the order
//! above, so equal graphs always produce identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{
    Entity, EntityId, ImageId, Kind, KnowledgeGraph, Provenance, RegionAnnotation, Relation,
    RelationId, SourceRef, Triplet, TripletId, VerifyState,
};
use crate::label::normalize;
use crate::mask::BBox;
use crate::FORMAT_VERSION;

pub const DATA_FILES: [&str; 5] = [
    "entities.jsonl",
    "relations.jsonl",
    "triplets.jsonl",
    "manifest.jsonl",
    "annotations.jsonl",
];
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MediaSource {
    AwA2,
    ImageNet,
    #[serde(rename = "iNaturalist")]
    INaturalist,
    OpenImages,
    Web,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaManifestEntry {
    pub image: ImageId,
    pub category_label: String,
    pub source: MediaSource,
    pub uri: String,
    pub width: u32,
    pub height: u32,
}

/// Images known to the knowledge base, keyed by id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MediaManifest {
    entries: BTreeMap<ImageId, MediaManifestEntry>,
}

impl MediaManifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entry: MediaManifestEntry) -> Result<()> {
        if entry.width == 0 || entry.height == 0 {
            return Err(Error::Parse(format!("image {} has zero extent", entry.image)));
        }
        if let Some(existing) = self.entries.get(&entry.image) {
            if existing != &entry {
                return Err(Error::Parse(format!(
                    "image id {} listed twice with different data",
                    entry.image
                )));
            }
        }
        self.entries.insert(entry.image.clone(), entry);
        Ok(())
    }

    pub fn get(&self, id: &ImageId) -> Option<&MediaManifestEntry> {
        self.entries.get(id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &MediaManifestEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Images whose normalized category label equals `category`, by id.
    pub fn images_of(&self, category: &str) -> Vec<&MediaManifestEntry> {
        let norm = normalize(category);
        self.entries
            .values()
            .filter(|e| normalize(&e.category_label) == norm)
            .collect()
    }
}

/// Config hash and seed of the run that produced an archive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Producer {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub format_version: u32,
    pub counts: BTreeMap<String, usize>,
    pub checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub producer: Option<Producer>,
}

#[derive(Serialize, Deserialize)]
struct EntityRecord {
    id: EntityId,
    label: String,
    kind: Kind,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    aliases: BTreeSet<String>,
    /// Categories whose document graph is rooted at this entity.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    root_of: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TripletRecord {
    id: TripletId,
    head: EntityId,
    relation: RelationId,
    tail: EntityId,
    provenance: BTreeSet<Provenance>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    source_refs: BTreeSet<SourceRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum OwnerKind {
    Entity,
    Triplet,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    owner_kind: OwnerKind,
    owner: String,
    index: usize,
    #[serde(flatten)]
    annotation: RegionAnnotation,
}

fn to_lines<T: Serialize>(records: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, &r).map_err(|e| Error::Parse(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

fn checksum_of(files: &[Vec<u8>]) -> String {
    let mut hasher = Sha256::new();
    for f in files {
        hasher.update(f);
    }
    hex::encode(hasher.finalize())
}

/// Serializes the five data files, in [`DATA_FILES`] order.
fn encode(graph: &KnowledgeGraph, manifest: &MediaManifest) -> Result<(Vec<Vec<u8>>, Vec<usize>)> {
    let mut roots_by_entity: BTreeMap<&EntityId, Vec<String>> = BTreeMap::new();
    for (category, id) in graph.roots() {
        roots_by_entity.entry(id).or_default().push(category.clone());
    }
    let entities: Vec<_> = graph
        .entities()
        .map(|e| EntityRecord {
            id: e.id.clone(),
            label: e.label.clone(),
            kind: e.kind,
            aliases: e.aliases.clone(),
            root_of: roots_by_entity.get(&e.id).cloned().unwrap_or_default(),
        })
        .collect();
    let relations: Vec<_> = graph.relations().cloned().collect();
    let triplets: Vec<_> = graph
        .triplets()
        .map(|t| TripletRecord {
            id: t.id.clone(),
            head: t.head.clone(),
            relation: t.relation.clone(),
            tail: t.tail.clone(),
            provenance: t.provenance.clone(),
            source_refs: t.source_refs.clone(),
        })
        .collect();
    let media: Vec<_> = manifest.entries().cloned().collect();
    let mut annotations = Vec::new();
    for e in graph.entities() {
        for (index, a) in e.groundings.iter().enumerate() {
            annotations.push(AnnotationRecord {
                owner_kind: OwnerKind::Entity,
                owner: e.id.to_string(),
                index,
                annotation: a.clone(),
            });
        }
    }
    for t in graph.triplets() {
        for (index, a) in t.groundings.iter().enumerate() {
            annotations.push(AnnotationRecord {
                owner_kind: OwnerKind::Triplet,
                owner: t.id.to_string(),
                index,
                annotation: a.clone(),
            });
        }
    }
    let counts = vec![
        entities.len(),
        relations.len(),
        triplets.len(),
        media.len(),
        annotations.len(),
    ];
    let files = vec![
        to_lines(entities)?,
        to_lines(relations)?,
        to_lines(triplets)?,
        to_lines(media)?,
        to_lines(annotations)?,
    ];
    Ok((files, counts))
}

/// Checksum `save_kb` would write for this content, without touching disk.
pub fn content_checksum(graph: &KnowledgeGraph, manifest: &MediaManifest) -> Result<String> {
    Ok(checksum_of(&encode(graph, manifest)?.0))
}

pub fn save_kb(graph: &KnowledgeGraph, manifest: &MediaManifest, dir: &Path) -> Result<String> {
    save_kb_with(graph, manifest, dir, None)
}

/// Writes the archive; returns the checksum recorded in `meta.json`.
pub fn save_kb_with(
    graph: &KnowledgeGraph,
    manifest: &MediaManifest,
    dir: &Path,
    producer: Option<Producer>,
) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (files, counts) = encode(graph, manifest)?;
    let checksum = checksum_of(&files);
    for (name, bytes) in DATA_FILES.iter().zip(&files) {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let meta = Meta {
        format_version: FORMAT_VERSION,
        counts: DATA_FILES
            .iter()
            .map(|f| f.trim_end_matches(".jsonl").to_string())
            .zip(counts)
            .collect(),
        checksum: checksum.clone(),
        producer,
    };
    let mut meta_bytes =
        serde_json::to_vec_pretty(&meta).map_err(|e| Error::Parse(e.to_string()))?;
    meta_bytes.push(b'\n');
    let path = dir.join(META_FILE);
    fs::write(&path, meta_bytes).map_err(|e| Error::io(&path, e))?;
    Ok(checksum)
}

pub fn read_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::CorruptRecord {
        file: META_FILE.into(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    if meta.format_version > FORMAT_VERSION || meta.format_version == 0 {
        return Err(Error::UnsupportedVersion {
            found: meta.format_version,
            supported: FORMAT_VERSION,
        });
    }
    Ok(meta)
}

fn parse_lines<T: for<'de> Deserialize<'de>>(file: &str, bytes: &[u8]) -> Result<Vec<T>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::CorruptRecord {
        file: file.into(),
        line: 0,
        reason: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in text.split_terminator('\n').enumerate() {
        let record = serde_json::from_str(line).map_err(|e| Error::CorruptRecord {
            file: file.into(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Reads an archive written by [`save_kb`], verifying version, record syntax,
/// cross-file references and checksum.
pub fn load_kb(dir: &Path) -> Result<(KnowledgeGraph, MediaManifest)> {
    let meta = read_meta(dir)?;
    let mut files = Vec::with_capacity(DATA_FILES.len());
    for name in DATA_FILES {
        let path = dir.join(name);
        files.push(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    let entities: Vec<EntityRecord> = parse_lines(DATA_FILES[0], &files[0])?;
    let relations: Vec<Relation> = parse_lines(DATA_FILES[1], &files[1])?;
    let triplets: Vec<TripletRecord> = parse_lines(DATA_FILES[2], &files[2])?;
    let media: Vec<MediaManifestEntry> = parse_lines(DATA_FILES[3], &files[3])?;
    let annotations: Vec<AnnotationRecord> = parse_lines(DATA_FILES[4], &files[4])?;

    if checksum_of(&files) != meta.checksum {
        return Err(Error::CorruptRecord {
            file: META_FILE.into(),
            line: 0,
            reason: "checksum does not match data files".into(),
        });
    }

    let mut manifest = MediaManifest::new();
    for (i, m) in media.into_iter().enumerate() {
        manifest.insert(m).map_err(|e| Error::CorruptRecord {
            file: DATA_FILES[3].into(),
            line: i + 1,
            reason: e.to_string(),
        })?;
    }

    let mut graph = KnowledgeGraph::new();
    for r in relations {
        graph.restore_relation(r);
    }
    for e in entities {
        for category in &e.root_of {
            graph.restore_root(category.clone(), e.id.clone());
        }
        graph.restore_entity(Entity {
            id: e.id,
            label: e.label,
            kind: e.kind,
            groundings: Vec::new(),
            aliases: e.aliases,
        });
    }
    for t in triplets {
        graph.restore_triplet(Triplet {
            id: t.id,
            head: t.head,
            relation: t.relation,
            tail: t.tail,
            provenance: t.provenance,
            source_refs: t.source_refs,
            groundings: Vec::new(),
        });
    }
    for (i, a) in annotations.into_iter().enumerate() {
        let line = i + 1;
        if manifest.get(&a.annotation.image).is_none() {
            return Err(Error::DanglingReference(format!(
                "{} line {line}: unknown image {}",
                DATA_FILES[4], a.annotation.image
            )));
        }
        let target = match a.owner_kind {
            OwnerKind::Entity => graph
                .entity_mut(&EntityId::new(a.owner.clone()))
                .map(|e| &mut e.groundings),
            OwnerKind::Triplet => graph
                .triplet_mut(&TripletId::new(a.owner.clone()))
                .map(|t| &mut t.groundings),
        };
        let target = target.ok_or_else(|| {
            Error::DanglingReference(format!(
                "{} line {line}: unknown owner {}",
                DATA_FILES[4], a.owner
            ))
        })?;
        target.push(a.annotation);
    }
    graph.audit()?;
    Ok((graph, manifest))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ImportReport {
    pub rows: usize,
    pub matched: usize,
    pub attached: usize,
    pub unmatched: Vec<MediaManifestEntry>,
}

/// Whole-image grounding of a category entity.
pub fn full_image_grounding(entry: &MediaManifestEntry, label: &str) -> RegionAnnotation {
    RegionAnnotation {
        image: entry.image.clone(),
        bbox: BBox::new(0.0, 0.0, f64::from(entry.width), f64::from(entry.height)),
        mask: None,
        label: label.to_string(),
        verified: VerifyState::AutoVerified,
        score: None,
        category: Some(label.to_string()),
    }
}

pub fn parse_manifest_rows(text: &str) -> Result<Vec<MediaManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Parse(format!("manifest line {}: {e}", i + 1)))
        })
        .collect()
}

/// Adds manifest rows to `manifest` and attaches every row whose category
/// label names an existing visual entity as a whole-image grounding.
/// Unmatched rows stay in the manifest and are listed in the report.
pub fn import_media_manifest(
    graph: &mut KnowledgeGraph,
    manifest: &mut MediaManifest,
    manifest_file: &Path,
) -> Result<ImportReport> {
    let text = fs::read_to_string(manifest_file).map_err(|e| Error::io(manifest_file, e))?;
    let rows = parse_manifest_rows(&text)?;
    import_rows(graph, manifest, rows)
}

pub fn import_rows(
    graph: &mut KnowledgeGraph,
    manifest: &mut MediaManifest,
    rows: Vec<MediaManifestEntry>,
) -> Result<ImportReport> {
    let mut report = ImportReport {
        rows: rows.len(),
        ..ImportReport::default()
    };
    for row in rows {
        manifest.insert(row.clone())?;
        let target = graph
            .find_entity(&row.category_label)
            .filter(|e| e.kind == Kind::Visual)
            .map(|e| (e.id.clone(), e.label.clone()));
        match target {
            Some((id, label)) => {
                report.matched += 1;
                if graph.add_entity_grounding(&id, full_image_grounding(&row, &label))? {
                    report.attached += 1;
                }
            }
            None => report.unmatched.push(row),
        }
    }
    Ok(report)
}
