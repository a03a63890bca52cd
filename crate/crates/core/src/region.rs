//! Image-source extraction: part hierarchies, provider-mediated part
//! detection, yes/no verification, box-to-mask conversion and ingestion of
//! verified regions into visual entities.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::HarvestSet;
use crate::graph::{EntityId, ImageId, Kind, KnowledgeGraph, RegionAnnotation, VerifyState};
use crate::label::normalize;
use crate::mask::{BBox, RleMask};
use crate::persistence::{MediaManifest, MediaManifestEntry};
use crate::provider::{with_retries, Detector, RetryPolicy, Segmenter, Verifier};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeOrigin {
    /// The animal itself.
    Root,
    SupercategoryTemplate,
    DocumentHarvest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartNode {
    pub label: String,
    pub parent: Option<usize>,
    pub origin: NodeOrigin,
    /// Several instances per image are expected (legs, ears).
    #[serde(default)]
    pub repeatable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplatePart {
    pub label: String,
    /// Parent part; `None` attaches to the animal root.
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub repeatable: bool,
}

/// Part tree shared by every animal of a supercategory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartTemplate {
    pub supercategory: String,
    pub parts: Vec<TemplatePart>,
}

pub fn load_templates(path: &Path) -> Result<BTreeMap<String, PartTemplate>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let list: Vec<PartTemplate> =
        serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    Ok(list
        .into_iter()
        .map(|t| (normalize(&t.supercategory), t))
        .collect())
}

/// Per-category part tree; node 0 is the animal, nodes are stored
/// breadth-first with children sorted by label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartHierarchy {
    pub category: EntityId,
    pub category_label: String,
    pub nodes: Vec<PartNode>,
}

impl PartHierarchy {
    /// Labels of all parts (the root excluded).
    pub fn part_labels(&self) -> BTreeSet<&str> {
        self.nodes[1..].iter().map(|n| n.label.as_str()).collect()
    }

    pub fn node(&self, label: &str) -> Option<&PartNode> {
        let norm = normalize(label);
        self.nodes.iter().find(|n| n.label == norm)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.node(label).is_some()
    }

    pub fn children(&self, index: usize) -> impl Iterator<Item = &PartNode> {
        self.nodes.iter().filter(move |n| n.parent == Some(index))
    }

    pub fn repeatable_labels(&self) -> BTreeSet<String> {
        self.nodes
            .iter()
            .filter(|n| n.repeatable)
            .map(|n| n.label.clone())
            .collect()
    }
}

/// Copies the supercategory template and adds every harvested part missing
/// from it as a child of the root.
pub fn build_part_hierarchy(
    category: &EntityId,
    category_label: &str,
    template: &PartTemplate,
    harvest: &HarvestSet,
) -> Result<PartHierarchy> {
    let root_label = normalize(category_label);
    // label -> (parent label, repeatable, origin)
    let mut spec: BTreeMap<String, (Option<String>, bool, NodeOrigin)> = BTreeMap::new();
    for p in &template.parts {
        let label = normalize(&p.label);
        if label.is_empty() {
            return Err(Error::InvalidTemplate("empty part label".into()));
        }
        if label == root_label {
            continue;
        }
        let parent = p.parent.as_deref().map(normalize).filter(|l| *l != root_label);
        if spec
            .insert(label.clone(), (parent, p.repeatable, NodeOrigin::SupercategoryTemplate))
            .is_some()
        {
            return Err(Error::InvalidTemplate(format!("part `{label}` listed twice")));
        }
    }
    for (label, (parent, _, _)) in &spec {
        if let Some(parent) = parent {
            if !spec.contains_key(parent) {
                return Err(Error::InvalidTemplate(format!(
                    "part `{label}` has unknown parent `{parent}`"
                )));
            }
        }
    }
    // cycle check: walk each chain of parents
    for start in spec.keys() {
        let mut seen = BTreeSet::new();
        let mut cur = Some(start.clone());
        while let Some(label) = cur {
            if !seen.insert(label.clone()) {
                return Err(Error::CyclicTemplate(label));
            }
            cur = spec[&label].0.clone();
        }
    }
    for part in harvest.parts() {
        let label = normalize(part);
        if label != root_label {
            spec.entry(label)
                .or_insert((None, false, NodeOrigin::DocumentHarvest));
        }
    }

    let mut children: BTreeMap<Option<String>, Vec<String>> = BTreeMap::new();
    for (label, (parent, _, _)) in &spec {
        children.entry(parent.clone()).or_default().push(label.clone());
    }
    let mut nodes = vec![PartNode {
        label: root_label,
        parent: None,
        origin: NodeOrigin::Root,
        repeatable: false,
    }];
    let mut queue = VecDeque::from([(None::<String>, 0usize)]);
    while let Some((key, index)) = queue.pop_front() {
        for child in children.get(&key).into_iter().flatten() {
            let (_, repeatable, origin) = spec[child];
            nodes.push(PartNode {
                label: child.clone(),
                parent: Some(index),
                origin,
                repeatable,
            });
            queue.push_back((Some(child.clone()), nodes.len() - 1));
        }
    }
    Ok(PartHierarchy {
        category: category.clone(),
        category_label: nodes[0].label.clone(),
        nodes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedBox {
    pub label: String,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub image: ImageId,
    pub boxes: Vec<DetectedBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionConfig {
    pub score_floor: f64,
    /// Labels allowed several instances per image; these go through
    /// non-maximum suppression, every other label keeps its best box.
    pub repeatable: BTreeSet<String>,
    pub nms_iou: f64,
    pub retry: RetryPolicy,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            score_floor: 0.30,
            repeatable: BTreeSet::new(),
            nms_iou: 0.5,
            retry: RetryPolicy::default(),
        }
    }
}

fn box_order(a: &DetectedBox, b: &DetectedBox) -> std::cmp::Ordering {
    a.label
        .cmp(&b.label)
        .then(b.score.total_cmp(&a.score))
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
}

/// Queries the detector for `labels` on one image, clamps boxes to the image,
/// applies the score floor and per-label deduplication, and returns boxes
/// sorted by label, descending score, then position.
pub fn detect_parts(
    image: &MediaManifestEntry,
    labels: &[String],
    detector: &dyn Detector,
    config: &DetectionConfig,
) -> Result<DetectionResult> {
    let queried: Vec<String> = labels
        .iter()
        .map(|l| normalize(l))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|l| !l.is_empty())
        .collect();
    if queried.is_empty() {
        return Err(Error::ConstraintViolation("detection needs at least one label".into()));
    }
    let (raw, _) = with_retries(config.retry, || detector.detect(&image.uri, &queried))?;
    let mut candidates: BTreeMap<String, Vec<DetectedBox>> = BTreeMap::new();
    for r in raw {
        if !r.score.is_finite() || !(0.0..=1.0).contains(&r.score) {
            return Err(Error::ProviderMalformed {
                raw: format!("{r:?}"),
                reason: "score outside [0, 1]".into(),
            });
        }
        let label = normalize(&r.label);
        if !queried.contains(&label) || r.score < config.score_floor {
            continue;
        }
        if let Some(bbox) = r.bbox().clamp_to(image.width, image.height) {
            candidates.entry(label.clone()).or_default().push(DetectedBox {
                label,
                bbox,
                score: r.score,
            });
        }
    }
    let mut boxes = Vec::new();
    for (label, mut group) in candidates {
        group.sort_by(box_order);
        if config.repeatable.contains(&label) {
            let mut kept: Vec<DetectedBox> = Vec::new();
            for b in group {
                if kept.iter().all(|k| k.bbox.iou(&b.bbox) <= config.nms_iou) {
                    kept.push(b);
                }
            }
            boxes.extend(kept);
        } else {
            boxes.extend(group.into_iter().next());
        }
    }
    boxes.sort_by(box_order);
    Ok(DetectionResult {
        image: image.image.clone(),
        boxes,
    })
}

pub const DEFAULT_VERIFY_TEMPLATE: &str =
    "Does the outlined region show the {label} of a {category}? Answer yes or no.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationVerdict {
    pub image: ImageId,
    pub label: String,
    pub bbox: BBox,
    pub verdict: bool,
    pub raw: String,
}

/// Leading word of the answer, case-insensitive: `yes` or `no`.
pub fn parse_yes_no(answer: &str) -> Option<bool> {
    let word: String = answer
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Asks the verifier whether the boxed region shows the annotated part and
/// updates the annotation state accordingly. An unparseable answer leaves
/// the annotation unreviewed.
pub fn verify_region(
    annotation: &mut RegionAnnotation,
    category_label: &str,
    image_uri: &str,
    verifier: &dyn Verifier,
    template: &str,
    retry: RetryPolicy,
) -> Result<VerificationVerdict> {
    let question = template
        .replace("{label}", &annotation.label)
        .replace("{category}", category_label);
    let (raw, _) = with_retries(retry, || verifier.ask(image_uri, &annotation.bbox, &question))?;
    let verdict = parse_yes_no(&raw).ok_or_else(|| Error::UnparseableAnswer(raw.clone()))?;
    annotation.verified = if verdict {
        VerifyState::AutoVerified
    } else {
        VerifyState::Rejected
    };
    Ok(VerificationVerdict {
        image: annotation.image.clone(),
        label: annotation.label.clone(),
        bbox: annotation.bbox,
        verdict,
        raw,
    })
}

/// Box-prompted segmentation; the returned mask is clipped to the box grown
/// by two pixels.
pub fn box_to_mask(
    image: &MediaManifestEntry,
    bbox: &BBox,
    segmenter: &dyn Segmenter,
    retry: RetryPolicy,
) -> Result<RleMask> {
    if !bbox.is_valid_in(image.width, image.height) {
        return Err(Error::ConstraintViolation(format!(
            "box {bbox:?} outside image {}",
            image.image
        )));
    }
    let (rle, _) = with_retries(retry, || {
        segmenter.segment(&image.uri, bbox, image.width, image.height)
    })?;
    if rle.width != image.width || rle.height != image.height {
        return Err(Error::ProviderMalformed {
            raw: format!("{}x{} mask", rle.width, rle.height),
            reason: format!("image is {}x{}", image.width, image.height),
        });
    }
    let mut mask = rle.decode().map_err(|e| Error::ProviderMalformed {
        raw: format!("{:?}", rle.counts),
        reason: e.to_string(),
    })?;
    mask.clip_to(&bbox.expand(2.0));
    if mask.area() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(mask.encode())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub ingested: usize,
    pub duplicates: usize,
    /// Annotations that were not verified or approved.
    pub skipped: usize,
    pub per_label: BTreeMap<String, usize>,
    /// Labels outside the hierarchy; routed to review.
    pub unknown: Vec<RegionAnnotation>,
}

/// Attaches one accepted annotation to the visual entity named by its label.
/// Returns `false` for a duplicate grounding.
pub fn ingest_annotation(
    graph: &mut KnowledgeGraph,
    hierarchy: &PartHierarchy,
    mut annotation: RegionAnnotation,
) -> Result<bool> {
    if !annotation.verified.is_accepted() {
        return Err(Error::ConstraintViolation(format!(
            "annotation on {} is {:?}",
            annotation.image, annotation.verified
        )));
    }
    let label = normalize(&annotation.label);
    if !hierarchy.contains(&label) {
        return Err(Error::UnknownPartLabel {
            category: hierarchy.category_label.clone(),
            label,
        });
    }
    let id = graph.resolve_entity(&label, Kind::Visual)?;
    annotation.label = graph.entity(&id).expect("just resolved").label.clone();
    annotation.category = Some(hierarchy.category_label.clone());
    graph.add_entity_grounding(&id, annotation)
}

pub fn ingest_annotations(
    graph: &mut KnowledgeGraph,
    hierarchy: &PartHierarchy,
    annotations: impl IntoIterator<Item = RegionAnnotation>,
) -> Result<IngestReport> {
    let mut report = IngestReport::default();
    for a in annotations {
        if !a.verified.is_accepted() {
            report.skipped += 1;
            continue;
        }
        let label = normalize(&a.label);
        match ingest_annotation(graph, hierarchy, a.clone()) {
            Ok(true) => {
                report.ingested += 1;
                *report.per_label.entry(label).or_default() += 1;
            }
            Ok(false) => report.duplicates += 1,
            Err(Error::UnknownPartLabel { .. }) => report.unknown.push(a),
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

/// First `cap` images of the category by id.
pub fn select_images<'a>(
    manifest: &'a MediaManifest,
    category: &str,
    cap: usize,
) -> Vec<&'a MediaManifestEntry> {
    let mut images = manifest.images_of(category);
    images.truncate(cap);
    images
}

#[derive(Debug, Clone)]
pub struct AnnotateConfig {
    pub detection: DetectionConfig,
    pub verify_template: String,
    pub images_per_category: usize,
    pub concurrency: usize,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        Self {
            detection: DetectionConfig::default(),
            verify_template: DEFAULT_VERIFY_TEMPLATE.to_string(),
            images_per_category: 300,
            concurrency: 4,
        }
    }
}

/// Annotations produced for one image, split by verification outcome.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageAnnotations {
    pub image: Option<ImageId>,
    pub verified: Vec<RegionAnnotation>,
    pub rejected: Vec<RegionAnnotation>,
    pub unreviewed: Vec<RegionAnnotation>,
    pub failures: Vec<String>,
}

/// Detect, segment and verify every hierarchy part on one image.
pub fn annotate_image(
    hierarchy: &PartHierarchy,
    image: &MediaManifestEntry,
    detector: &dyn Detector,
    segmenter: &dyn Segmenter,
    verifier: &dyn Verifier,
    config: &AnnotateConfig,
) -> ImageAnnotations {
    let mut out = ImageAnnotations {
        image: Some(image.image.clone()),
        ..Default::default()
    };
    let labels: Vec<String> = hierarchy.part_labels().into_iter().map(String::from).collect();
    if labels.is_empty() {
        return out;
    }
    let mut detection_cfg = config.detection.clone();
    detection_cfg.repeatable.extend(hierarchy.repeatable_labels());
    let detected = match detect_parts(image, &labels, detector, &detection_cfg) {
        Ok(d) => d,
        Err(e) => {
            out.failures.push(e.to_string());
            return out;
        }
    };
    for b in detected.boxes {
        let mut ann = RegionAnnotation::new(image.image.clone(), b.bbox, b.label);
        ann.score = Some(b.score);
        ann.category = Some(hierarchy.category_label.clone());
        match box_to_mask(image, &b.bbox, segmenter, config.detection.retry) {
            Ok(mask) => ann.mask = Some(mask),
            Err(Error::EmptyMask) => {}
            Err(e) => out.failures.push(e.to_string()),
        }
        match verify_region(
            &mut ann,
            &hierarchy.category_label,
            &image.uri,
            verifier,
            &config.verify_template,
            config.detection.retry,
        ) {
            Ok(v) if v.verdict => out.verified.push(ann),
            Ok(_) => out.rejected.push(ann),
            Err(Error::UnparseableAnswer(_)) => out.unreviewed.push(ann),
            Err(e) => {
                out.failures.push(e.to_string());
                out.unreviewed.push(ann);
            }
        }
    }
    out
}

/// Runs [`annotate_image`] over the category's selected images with bounded
/// concurrency; results are in image-id order.
pub fn annotate_category(
    hierarchy: &PartHierarchy,
    manifest: &MediaManifest,
    detector: &dyn Detector,
    segmenter: &dyn Segmenter,
    verifier: &dyn Verifier,
    config: &AnnotateConfig,
) -> Result<Vec<ImageAnnotations>> {
    use rayon::prelude::*;
    let images = select_images(manifest, &hierarchy.category_label, config.images_per_category);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.concurrency.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(pool.install(|| {
        images
            .par_iter()
            .map(|img| annotate_image(hierarchy, img, detector, segmenter, verifier, config))
            .collect()
    }))
}

/// Expert-approved part groundings as a COCO file: the training set handed to
/// detector fine-tuning.
pub fn export_seed_training_set(
    graph: &KnowledgeGraph,
    manifest: &MediaManifest,
) -> Result<crate::coco::CocoDataset> {
    let roots: BTreeSet<&EntityId> = graph.roots().values().collect();
    let approved = |g: &RegionAnnotation| g.verified == VerifyState::ExpertApproved;
    let parts: Vec<_> = graph
        .entities()
        .filter(|e| !roots.contains(&e.id) && e.groundings.iter().any(approved))
        .collect();
    let labels: BTreeSet<String> = parts.iter().map(|e| e.label.clone()).collect();
    let images: BTreeSet<ImageId> = parts
        .iter()
        .flat_map(|e| e.groundings.iter())
        .filter(|g| approved(g))
        .map(|g| g.image.clone())
        .collect();
    crate::coco::CocoDataset::from_groundings(graph, manifest, &images, &labels, approved)
}
