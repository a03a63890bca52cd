//! PartBench: per-category 80:20 image splits of accepted part annotations,
//! exported as COCO-style files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::stream_rng;
use crate::coco::CocoDataset;
use crate::error::{Error, Result};
use crate::graph::{EntityId, ImageId, KnowledgeGraph, RegionAnnotation};
use crate::label::normalize;
use crate::persistence::MediaManifest;

pub const MIN_IMAGES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartBenchSplit {
    pub categories: Vec<String>,
    pub part_labels: Vec<String>,
    pub train_images: Vec<ImageId>,
    pub test_images: Vec<ImageId>,
    pub seed: u64,
    #[serde(skip)]
    pub train: CocoDataset,
    #[serde(skip)]
    pub test: CocoDataset,
}

/// Number of training images for an 80:20 split of `n`.
pub fn train_size(n: usize) -> usize {
    (n * 80 + 50) / 100
}

fn accepted(g: &RegionAnnotation) -> bool {
    g.verified.is_accepted()
}

/// Splits the annotated images of each category 80:20 (seeded per category)
/// and exports the accepted part annotations of each split. `categories`
/// restricts the export; by default every category root is used. Parts are
/// non-root entities with accepted groundings on the selected images.
pub fn export_partbench(
    graph: &KnowledgeGraph,
    manifest: &MediaManifest,
    categories: Option<&[String]>,
    seed: u64,
) -> Result<PartBenchSplit> {
    let roots: BTreeSet<&EntityId> = graph.roots().values().collect();
    let selected: Vec<String> = match categories {
        Some(list) => {
            let mut out = BTreeSet::new();
            for c in list {
                let norm = normalize(c);
                if graph.root_for(&norm).is_none() {
                    return Err(Error::UnknownCategory(c.clone()));
                }
                out.insert(norm);
            }
            out.into_iter().collect()
        }
        None => graph.roots().keys().cloned().collect(),
    };
    let parts: Vec<_> = graph
        .entities()
        .filter(|e| !roots.contains(&e.id))
        .collect();
    let mut train_images = BTreeSet::new();
    let mut test_images = BTreeSet::new();
    let mut labels = BTreeSet::new();
    for category in &selected {
        let mut images: Vec<&ImageId> = parts
            .iter()
            .flat_map(|e| e.groundings.iter())
            .filter(|g| accepted(g) && g.category.as_deref() == Some(category.as_str()))
            .map(|g| &g.image)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if images.len() < MIN_IMAGES {
            return Err(Error::InsufficientImages {
                category: category.clone(),
                found: images.len(),
                needed: MIN_IMAGES,
            });
        }
        images.shuffle(&mut stream_rng(seed, category));
        let cut = train_size(images.len());
        train_images.extend(images[..cut].iter().map(|&i| i.clone()));
        test_images.extend(images[cut..].iter().map(|&i| i.clone()));
        for e in &parts {
            if e.groundings
                .iter()
                .any(|g| accepted(g) && g.category.as_deref() == Some(category.as_str()))
            {
                labels.insert(e.label.clone());
            }
        }
    }
    let train = CocoDataset::from_groundings(graph, manifest, &train_images, &labels, accepted)?;
    let test = CocoDataset::from_groundings(graph, manifest, &test_images, &labels, accepted)?;
    Ok(PartBenchSplit {
        categories: selected,
        part_labels: labels.into_iter().collect(),
        train_images: train_images.into_iter().collect(),
        test_images: test_images.into_iter().collect(),
        seed,
        train,
        test,
    })
}

impl PartBenchSplit {
    /// Writes `train.json`, `test.json` (COCO) and `split.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.save(&dir.join("train.json"))?;
        self.test.save(&dir.join("test.json"))?;
        let path = dir.join("split.json");
        let mut body = serde_json::to_vec_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        body.push(b'\n');
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
    }

    /// Annotation count per (animal, part label) in one split file.
    pub fn annotation_counts(coco: &CocoDataset) -> BTreeMap<(String, String), usize> {
        let animals: BTreeMap<u64, &str> = coco.images.iter().map(|i| (i.id, i.animal.as_str())).collect();
        let names: BTreeMap<u64, &str> = coco.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
        let mut out = BTreeMap::new();
        for a in &coco.annotations {
            let key = (animals[&a.image_id].to_string(), names[&a.category_id].to_string());
            *out.entry(key).or_default() += 1;
        }
        out
    }
}
