//! COCO-style annotation files for region import/export and PartBench.
//!
//! Segmentations use COCO's uncompressed RLE (`{"size": [h, w], "counts":
//! [...]}`), which runs over column-major pixel order; conversion from the
//! row-major masks used everywhere else happens here.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ImageId, KnowledgeGraph, RegionAnnotation, VerifyState};
use crate::mask::{BBox, BinaryMask, RleMask};
use crate::persistence::MediaManifest;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    /// Knowledge-base image id.
    pub image_key: String,
    /// Animal category depicted.
    #[serde(default)]
    pub animal: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoRle {
    /// `[height, width]`.
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub area: f64,
    pub iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<CocoRle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub categories: Vec<CocoCategory>,
    pub annotations: Vec<CocoAnnotation>,
}

/// Row-major mask to COCO column-major RLE.
pub fn to_coco_rle(mask: &BinaryMask) -> CocoRle {
    let (w, h) = (mask.width(), mask.height());
    let mut transposed = BinaryMask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                transposed.set(y, x, true);
            }
        }
    }
    CocoRle {
        size: [h, w],
        counts: transposed.encode().counts,
    }
}

pub fn from_coco_rle(rle: &CocoRle) -> Result<BinaryMask> {
    let [h, w] = rle.size;
    let transposed = RleMask {
        width: h,
        height: w,
        counts: rle.counts.clone(),
    }
    .decode()?;
    let mut mask = BinaryMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if transposed.get(y, x) {
                mask.set(x, y, true);
            }
        }
    }
    Ok(mask)
}

impl CocoDataset {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(self).map_err(|e| Error::Parse(e.to_string()))?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Builds a dataset from groundings: images are the given image ids
    /// (sorted), categories are `labels` (ids follow their sorted order, so
    /// two files built with the same labels agree), annotations every
    /// grounding of a labelled entity on those images for which
    /// `keep(annotation)` holds.
    pub fn from_groundings(
        graph: &KnowledgeGraph,
        manifest: &MediaManifest,
        images: &BTreeSet<ImageId>,
        labels: &BTreeSet<String>,
        keep: impl Fn(&RegionAnnotation) -> bool,
    ) -> Result<Self> {
        let mut selected: Vec<(&str, &RegionAnnotation)> = graph
            .entities()
            .filter(|e| labels.contains(&e.label))
            .flat_map(|e| e.groundings.iter().map(move |g| (e.label.as_str(), g)))
            .filter(|(_, g)| images.contains(&g.image) && keep(g))
            .collect();
        selected.sort_by(|a, b| {
            (&a.1.image, a.0)
                .cmp(&(&b.1.image, b.0))
                .then(a.1.bbox.x.total_cmp(&b.1.bbox.x))
                .then(a.1.bbox.y.total_cmp(&b.1.bbox.y))
                .then(a.1.bbox.w.total_cmp(&b.1.bbox.w))
                .then(a.1.bbox.h.total_cmp(&b.1.bbox.h))
        });
        let categories: Vec<CocoCategory> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| CocoCategory {
                id: i as u64 + 1,
                name: l.to_string(),
            })
            .collect();
        let cat_ids: BTreeMap<&str, u64> = labels.iter().map(String::as_str).zip(1u64..).collect();
        let mut image_ids = BTreeMap::new();
        let mut coco_images = Vec::new();
        for (i, img) in images.iter().enumerate() {
            let entry = manifest
                .get(img)
                .ok_or_else(|| Error::DanglingReference(format!("image {img}")))?;
            image_ids.insert(img.clone(), i as u64 + 1);
            coco_images.push(CocoImage {
                id: i as u64 + 1,
                file_name: entry.uri.clone(),
                width: entry.width,
                height: entry.height,
                image_key: img.to_string(),
                animal: entry.category_label.clone(),
            });
        }
        let mut annotations = Vec::new();
        for (i, (label, g)) in selected.iter().enumerate() {
            let segmentation = g.mask.as_ref().map(|m| m.decode()).transpose()?;
            annotations.push(CocoAnnotation {
                id: i as u64 + 1,
                image_id: image_ids[&g.image],
                category_id: cat_ids[label],
                bbox: [g.bbox.x, g.bbox.y, g.bbox.w, g.bbox.h],
                area: segmentation
                    .as_ref()
                    .map(|m| m.area() as f64)
                    .unwrap_or_else(|| g.bbox.area()),
                iscrowd: 0,
                segmentation: segmentation.as_ref().map(to_coco_rle),
                score: g.score,
            });
        }
        Ok(Self {
            images: coco_images,
            categories,
            annotations,
        })
    }

    /// Region annotations in this file with the given verification state,
    /// keyed by knowledge-base image id.
    pub fn to_region_annotations(&self, state: VerifyState) -> Result<Vec<RegionAnnotation>> {
        let images: BTreeMap<u64, &CocoImage> = self.images.iter().map(|i| (i.id, i)).collect();
        let cats: BTreeMap<u64, &str> = self
            .categories
            .iter()
            .map(|c| (c.id, c.name.as_str()))
            .collect();
        self.annotations
            .iter()
            .map(|a| {
                let img = images.get(&a.image_id).ok_or_else(|| {
                    Error::DanglingReference(format!("annotation {} image {}", a.id, a.image_id))
                })?;
                let label = cats.get(&a.category_id).ok_or_else(|| {
                    Error::DanglingReference(format!(
                        "annotation {} category {}",
                        a.id, a.category_id
                    ))
                })?;
                let mask = a
                    .segmentation
                    .as_ref()
                    .map(|s| from_coco_rle(s).map(|m| m.encode()))
                    .transpose()?;
                Ok(RegionAnnotation {
                    image: ImageId::new(img.image_key.clone()),
                    bbox: BBox::new(a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]),
                    mask,
                    label: label.to_string(),
                    verified: state,
                    score: a.score,
                    category: (!img.animal.is_empty()).then(|| img.animal.clone()),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn coco_rle_is_column_major() {
        // 2 wide, 1 high, right pixel set: column-major order is (0,0), (1,0)
        let mut m = BinaryMask::new(2, 2);
        m.set(1, 0, true);
        let rle = to_coco_rle(&m);
        assert_eq!(rle.size, [2, 2]);
        // column 0: two zeros; column 1: one, zero
        assert_eq!(rle.counts, vec![2, 1, 1]);
    }

    proptest! {
        #[test]
        fn coco_rle_round_trip(
            (w, h, bits) in (1u32..12, 1u32..12).prop_flat_map(|(w, h)| {
                (Just(w), Just(h), proptest::collection::vec(any::<bool>(), (w * h) as usize))
            })
        ) {
            let m = BinaryMask::from_data(w, h, bits).unwrap();
            prop_assert_eq!(from_coco_rle(&to_coco_rle(&m)).unwrap(), m);
        }
    }
}
