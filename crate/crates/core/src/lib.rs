//! Construction, alignment, querying and benchmarking of an object-level
//! multi-modal knowledge base.
//!
//! Triplets carry textual labels; visual entities and visual relations carry
//! region-level groundings (an image plus a box and optional mask). All model
//! inference (LLM extraction, detection, segmentation, verification,
//! embedding) goes through the provider traits in [`provider`], each of which
//! has an HTTP client and a deterministic stub.

pub mod alignment;
pub mod benchmarks;
pub mod coco;
pub mod error;
pub mod extraction;
pub mod graph;
pub mod kge;
pub mod label;
pub mod mask;
pub mod persistence;
pub mod pipeline;
pub mod provider;
pub mod query;
pub mod region;
pub mod review;
pub mod schema;

pub use error::{Error, Result};
pub use graph::{
    Entity, EntityId, ImageId, Kind, KnowledgeGraph, Provenance, RegionAnnotation,
    Relation, RelationId, SourceRef, Subgraph, Triplet, TripletId, VerifyState,
};
pub use mask::{BBox, BinaryMask, RleMask};
pub use persistence::{MediaManifest, MediaManifestEntry, MediaSource};
pub use schema::RelationSchema;

/// On-disk format version written by every archive and HTTP response.
pub const FORMAT_VERSION: u32 = 1;
