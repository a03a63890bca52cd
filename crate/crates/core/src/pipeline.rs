//! Stage orchestration over one knowledge-base directory.
//!
//! Layout below `kb_dir` (besides the archive files written by
//! [`crate::persistence`]):
//!
//! ```text
//! extract/harvest.jsonl     per-document harvest and supercategory
//! extract/rejections.jsonl  rejected provider entries
//! review/                   review queue and decision journal
//! benchmarks/textbench/     TextBench split
//! benchmarks/partbench/     PartBench split
//! benchmarks/vqa/           VQA items
//! embeddings/<model>.bin    trained embeddings (+ .vocab.json)
//! reports/NNNN-<stage>.json one report per stage run, never overwritten
//! ```
//!
//! Every output directory gets a `provenance.json` with the config hash and
//! seed of the run that wrote it.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{
    align_media_by_name, ground_visual_relations, inherit_trivial_parts, merge_similar_entities,
    EmbeddingProviderConfig, MergeConfig,
};
use crate::benchmarks::kgc::RankMetrics;
use crate::benchmarks::partbench::export_partbench;
use crate::benchmarks::segmentation::{instance_ap, merge_instances, semantic_seg_metrics, Instance, SemanticSample};
use crate::benchmarks::textbench::{export_textbench, TextBenchSplit};
use crate::benchmarks::vqa::{build_vqa_benchmark, to_jsonl, VqaConfig};
use crate::coco::CocoDataset;
use crate::error::{Error, Result};
use crate::extraction::{extract_documents, load_documents, ExtractionConfig, FewShotSet, HarvestSet};
use crate::graph::{KnowledgeGraph, VerifyState};
use crate::kge::{evaluate_link_prediction, train_model, EmbeddingModel, IndexedSplit, Loss, ModelKind, Optimizer, TrainConfig};
use crate::mask::BinaryMask;
use crate::persistence::{load_kb, parse_manifest_rows, save_kb_with, MediaManifest, Producer, META_FILE};
use crate::provider::{
    BoxEchoSegmenter, Detector, Embedder, HashEmbedder, HttpDetector, HttpEndpoint, HttpSegmenter,
    HttpTextProvider, HttpVerifier, RetryPolicy, Segmenter, StubDetector, StubTextProvider,
    StubVerifier, TextProvider, Verifier,
};
use crate::query::{
    category_entries, filter_discriminative, read_vector_file, select_knowledge_ensemble,
    siblings_by_belong_to, zero_shot_classify, Aggregation, EnsembleConfig,
};
use crate::region::{annotate_category, build_part_hierarchy, ingest_annotations, load_templates, AnnotateConfig, PartHierarchy};
use crate::review::{apply_decisions, spot_check_sample, ReviewQueue};
use crate::schema::RelationSchema;
use crate::FORMAT_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Extract,
    Annotate,
    Align,
    Apply,
    ExportText,
    ExportPart,
    BuildVqa,
    TrainEmbed,
    EvalKgc,
    EvalSeg,
    Zsl,
    Serve,
}

impl Stage {
    pub const ALL: [Stage; 12] = [
        Stage::Extract,
        Stage::Annotate,
        Stage::Align,
        Stage::Apply,
        Stage::ExportText,
        Stage::ExportPart,
        Stage::BuildVqa,
        Stage::TrainEmbed,
        Stage::EvalKgc,
        Stage::EvalSeg,
        Stage::Zsl,
        Stage::Serve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Extract => "extract",
            Stage::Annotate => "annotate",
            Stage::Align => "align",
            Stage::Apply => "apply",
            Stage::ExportText => "export-text",
            Stage::ExportPart => "export-part",
            Stage::BuildVqa => "build-vqa",
            Stage::TrainEmbed => "train-embed",
            Stage::EvalKgc => "eval-kgc",
            Stage::EvalSeg => "eval-seg",
            Stage::Zsl => "zsl",
            Stage::Serve => "serve",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown stage `{name}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    /// Canned answers from a fixture file (none: the built-in default).
    Stub {
        #[serde(default)]
        fixture: Option<PathBuf>,
        #[serde(default)]
        default: Option<String>,
    },
    Http {
        endpoint: String,
        model: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        /// Environment variable holding the bearer token.
        #[serde(default)]
        token_env: Option<String>,
        /// Embedders only.
        #[serde(default)]
        dimension: Option<usize>,
        #[serde(default)]
        unit_norm: bool,
    },
    /// Segmenter that fills the prompt box.
    BoxEcho,
    /// Offline feature-hashing embedder.
    Hash { dimension: usize },
}

fn default_timeout() -> u64 {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvidersConfig {
    #[serde(default = "stub")]
    pub llm: ProviderConfig,
    #[serde(default = "stub")]
    pub detector: ProviderConfig,
    #[serde(default = "box_echo")]
    pub segmenter: ProviderConfig,
    #[serde(default = "stub")]
    pub verifier: ProviderConfig,
    #[serde(default = "hash")]
    pub embedder: ProviderConfig,
}

fn stub() -> ProviderConfig {
    ProviderConfig::Stub {
        fixture: None,
        default: None,
    }
}

fn box_echo() -> ProviderConfig {
    ProviderConfig::BoxEcho
}

fn hash() -> ProviderConfig {
    ProviderConfig::Hash { dimension: 64 }
}

impl Default for ProvidersConfig {
    fn default() -> Self {
        Self {
            llm: stub(),
            detector: stub(),
            segmenter: box_echo(),
            verifier: stub(),
            embedder: hash(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub merge_similarity: f64,
    pub detection_score: f64,
    pub spot_check_rate: f64,
    pub sibling_fraction: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            merge_similarity: 0.85,
            detection_score: 0.30,
            spot_check_rate: crate::review::DEFAULT_SPOT_CHECK_RATE,
            sibling_fraction: crate::query::DEFAULT_SIBLING_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Limits {
    pub concurrency: usize,
    pub max_retries: u32,
    pub retry_delay_ms: u64,
    pub images_per_category: usize,
    pub vqa_per_category: usize,
    pub ensemble_size: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            concurrency: 4,
            max_retries: 3,
            retry_delay_ms: 500,
            images_per_category: 300,
            vqa_per_category: 5,
            ensemble_size: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    pub model: ModelKind,
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub negatives: usize,
    pub batch_size: usize,
    pub loss: Loss,
    pub optimizer: Optimizer,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            model: ModelKind::RotatE,
            dim: 64,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            margin: t.margin,
            negatives: t.negatives,
            batch_size: t.batch_size,
            loss: t.loss,
            optimizer: t.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZslConfig {
    /// `label v1 v2 ...` rows: support vectors per category (underscores in
    /// the label stand for spaces).
    pub support_vectors: PathBuf,
    /// `image_id v1 v2 ...` rows: images to classify.
    pub image_vectors: PathBuf,
    #[serde(default)]
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSegConfig {
    /// COCO file of scored predictions against the PartBench test split.
    pub predictions: PathBuf,
}

/// Declarative pipeline configuration, read from a TOML file. Relative paths
/// are resolved against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub kb_dir: PathBuf,
    pub documents: PathBuf,
    pub schema: PathBuf,
    pub few_shot: PathBuf,
    #[serde(default)]
    pub part_templates: Option<PathBuf>,
    #[serde(default)]
    pub media_manifest: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub providers: ProvidersConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub limits: Limits,
    #[serde(default)]
    pub embed: EmbedConfig,
    #[serde(default)]
    pub zsl: Option<ZslConfig>,
    #[serde(default)]
    pub eval_seg: Option<EvalSegConfig>,
    /// Stages switched off for `run_enabled`; all default to on.
    #[serde(default)]
    pub stages: BTreeMap<Stage, bool>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let cfg = Self::from_toml(&text, &base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn kb_dir(&self) -> PathBuf {
        self.resolve(&self.kb_dir)
    }

    fn referenced_files(&self) -> Vec<&Path> {
        let mut out: Vec<&Path> = vec![&self.documents, &self.schema, &self.few_shot];
        out.extend(self.part_templates.as_deref());
        out.extend(self.media_manifest.as_deref());
        let p = &self.providers;
        for c in [&p.llm, &p.detector, &p.segmenter, &p.verifier, &p.embedder] {
            if let ProviderConfig::Stub { fixture: Some(f), .. } = c {
                out.push(f);
            }
        }
        if let Some(z) = &self.zsl {
            out.push(&z.support_vectors);
            out.push(&z.image_vectors);
        }
        if let Some(e) = &self.eval_seg {
            out.push(&e.predictions);
        }
        out
    }

    /// Every referenced input exists and the numeric knobs are in range.
    pub fn validate(&self) -> Result<()> {
        for f in self.referenced_files() {
            let path = self.resolve(f);
            if !path.exists() {
                return Err(Error::InvalidConfig(format!("{} does not exist", path.display())));
            }
        }
        let t = &self.thresholds;
        if !(t.merge_similarity > 0.0 && t.merge_similarity <= 1.0) {
            return Err(Error::InvalidConfig("merge_similarity must be in (0, 1]".into()));
        }
        for (name, v) in [
            ("detection_score", t.detection_score),
            ("spot_check_rate", t.spot_check_rate),
            ("sibling_fraction", t.sibling_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1]")));
            }
        }
        if self.limits.concurrency == 0 || self.limits.ensemble_size == 0 {
            return Err(Error::InvalidConfig("concurrency and ensemble_size must be >= 1".into()));
        }
        self.train_config().validate()
    }

    /// SHA-256 over the canonical JSON form of the configuration, without
    /// `kb_dir`: the same settings give the same hash wherever the KB lives.
    /// Secrets never appear in the file.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("kb_dir");
        }
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn enabled(&self, stage: Stage) -> bool {
        self.stages.get(&stage).copied().unwrap_or(true)
    }

    pub fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.limits.max_retries,
            base_delay: Duration::from_millis(self.limits.retry_delay_ms),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let e = &self.embed;
        TrainConfig {
            learning_rate: e.learning_rate,
            margin: e.margin,
            negatives: e.negatives,
            batch_size: e.batch_size,
            epochs: e.epochs,
            loss: e.loss,
            optimizer: e.optimizer,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    fn endpoint(&self, name: &str, c: &ProviderConfig) -> Result<HttpEndpoint> {
        let ProviderConfig::Http {
            endpoint,
            model,
            timeout_secs,
            token_env,
            ..
        } = c
        else {
            unreachable!("endpoint() called on a non-http provider")
        };
        HttpEndpoint::new(endpoint, model, Duration::from_secs(*timeout_secs), provider_token(name, token_env.as_deref()))
    }

    fn wrong_kind(name: &str, c: &ProviderConfig) -> Error {
        Error::InvalidConfig(format!("provider kind {c:?} cannot serve as {name}"))
    }

    pub fn text_provider(&self) -> Result<Box<dyn TextProvider>> {
        match &self.providers.llm {
            ProviderConfig::Stub { fixture, default } => {
                let mut stub = match fixture {
                    Some(f) => StubTextProvider::from_fixture(&self.resolve(f))?,
                    None => StubTextProvider::always("[]"),
                };
                if let Some(d) = default {
                    stub = stub.with_default(d.clone());
                }
                Ok(Box::new(stub))
            }
            c @ ProviderConfig::Http { .. } => Ok(Box::new(HttpTextProvider(self.endpoint("llm", c)?))),
            c => Err(Self::wrong_kind("llm", c)),
        }
    }

    pub fn detector(&self) -> Result<Box<dyn Detector>> {
        match &self.providers.detector {
            ProviderConfig::Stub { fixture, .. } => Ok(Box::new(match fixture {
                Some(f) => StubDetector::from_fixture(&self.resolve(f))?,
                None => StubDetector::new(Vec::new()),
            })),
            c @ ProviderConfig::Http { .. } => Ok(Box::new(HttpDetector(self.endpoint("detector", c)?))),
            c => Err(Self::wrong_kind("detector", c)),
        }
    }

    pub fn segmenter(&self) -> Result<Box<dyn Segmenter>> {
        match &self.providers.segmenter {
            ProviderConfig::BoxEcho => Ok(Box::new(BoxEchoSegmenter)),
            c @ ProviderConfig::Http { .. } => Ok(Box::new(HttpSegmenter(self.endpoint("segmenter", c)?))),
            c => Err(Self::wrong_kind("segmenter", c)),
        }
    }

    pub fn verifier(&self) -> Result<Box<dyn Verifier>> {
        match &self.providers.verifier {
            ProviderConfig::Stub { fixture, default } => Ok(Box::new(match fixture {
                Some(f) => StubVerifier::from_fixture(&self.resolve(f))?,
                None => StubVerifier::new(BTreeMap::new(), default.clone().unwrap_or_else(|| "yes".into())),
            })),
            c @ ProviderConfig::Http { .. } => Ok(Box::new(HttpVerifier(self.endpoint("verifier", c)?))),
            c => Err(Self::wrong_kind("verifier", c)),
        }
    }

    pub fn embedder(&self) -> Result<Box<dyn Embedder>> {
        match &self.providers.embedder {
            ProviderConfig::Hash { dimension } => Ok(Box::new(HashEmbedder::new(*dimension))),
            ProviderConfig::Http {
                endpoint,
                model,
                timeout_secs,
                token_env,
                dimension,
                unit_norm,
            } => {
                let cfg = EmbeddingProviderConfig {
                    endpoint: endpoint.clone(),
                    model: model.clone(),
                    dimension: dimension
                        .ok_or_else(|| Error::InvalidConfig("http embedder needs `dimension`".into()))?,
                    unit_norm: *unit_norm,
                    timeout_secs: *timeout_secs,
                };
                Ok(Box::new(cfg.connect(provider_token("embedder", token_env.as_deref()))?))
            }
            c => Err(Self::wrong_kind("embedder", c)),
        }
    }
}

/// Token from `token_env`, or `VISKNOW_<NAME>_TOKEN` when unset.
pub fn provider_token(name: &str, token_env: Option<&str>) -> Option<String> {
    let var = token_env
        .map(String::from)
        .unwrap_or_else(|| format!("VISKNOW_{}_TOKEN", name.to_ascii_uppercase()));
    std::env::var(var).ok().filter(|t| !t.is_empty())
}

/// Machine-readable record of one stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub format_version: u32,
    pub stage: Stage,
    pub seed: u64,
    pub config_hash: String,
    /// Unix seconds.
    pub started_at: u64,
    pub duration_ms: u64,
    pub counts: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub metrics: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_path: Option<PathBuf>,
}

/// Removes the lockfile when dropped.
pub struct KbLock {
    path: PathBuf,
}

pub const LOCK_FILE: &str = ".lock";

impl KbLock {
    pub fn acquire(kb_dir: &Path) -> Result<Self> {
        fs::create_dir_all(kb_dir).map_err(|e| Error::io(kb_dir, e))?;
        let path = kb_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::ConstraintViolation(format!(
                "{} is locked by another stage ({})",
                kb_dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for KbLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HarvestRecord {
    document: String,
    category_label: String,
    #[serde(default)]
    supercategory: Option<String>,
    harvest: HarvestSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: Stage,
    pub config_hash: String,
    pub seed: u64,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut body = serde_json::to_vec_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    body.push(b'\n');
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut body = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut body, r).map_err(|e| Error::Parse(e.to_string()))?;
        body.push(b'\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite(format!("{what} ({} not found)", path.display())))
    }
}

/// Paths of the artifacts inside a KB directory.
pub struct KbPaths {
    pub root: PathBuf,
}

impl KbPaths {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }
    pub fn meta(&self) -> PathBuf {
        self.root.join(META_FILE)
    }
    pub fn harvest(&self) -> PathBuf {
        self.root.join("extract").join("harvest.jsonl")
    }
    pub fn rejections(&self) -> PathBuf {
        self.root.join("extract").join("rejections.jsonl")
    }
    pub fn review(&self) -> PathBuf {
        self.root.join("review")
    }
    pub fn textbench(&self) -> PathBuf {
        self.root.join("benchmarks").join("textbench")
    }
    pub fn partbench(&self) -> PathBuf {
        self.root.join("benchmarks").join("partbench")
    }
    pub fn vqa(&self) -> PathBuf {
        self.root.join("benchmarks").join("vqa")
    }
    pub fn checkpoint(&self, kind: ModelKind) -> PathBuf {
        self.root
            .join("embeddings")
            .join(format!("{}.bin", format!("{kind:?}").to_lowercase()))
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    kb: KbPaths,
    hash: String,
    counts: BTreeMap<String, usize>,
    outputs: Vec<String>,
    metrics: serde_json::Value,
}

impl Run<'_> {
    fn count(&mut self, key: &str, n: usize) {
        self.counts.insert(key.to_string(), n);
    }

    fn output(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.kb.root).unwrap_or(path);
        self.outputs.push(rel.display().to_string());
    }

    fn provenance(&mut self, stage: Stage, dir: &Path) -> Result<()> {
        write_json(
            &dir.join("provenance.json"),
            &Provenance {
                stage,
                config_hash: self.hash.clone(),
                seed: self.cfg.seed,
            },
        )
    }

    fn load(&self) -> Result<(KnowledgeGraph, MediaManifest)> {
        require(&self.kb.meta(), "a knowledge base; run `extract` first")?;
        load_kb(&self.kb.root)
    }

    fn save(&mut self, graph: &KnowledgeGraph, manifest: &MediaManifest) -> Result<()> {
        graph.audit()?;
        let checksum = save_kb_with(
            graph,
            manifest,
            &self.kb.root,
            Some(Producer {
                config_hash: self.hash.clone(),
                seed: self.cfg.seed,
            }),
        )?;
        self.count("entities", graph.entity_count());
        self.count("triplets", graph.triplet_count());
        self.count("images", manifest.len());
        self.metrics = serde_json::json!({ "checksum": checksum });
        let meta = self.kb.meta();
        self.output(&meta);
        Ok(())
    }

    fn schema(&self) -> Result<RelationSchema> {
        RelationSchema::load(&self.cfg.resolve(&self.cfg.schema))
    }

    fn manifest_rows(&self) -> Result<MediaManifest> {
        let mut manifest = MediaManifest::new();
        if let Some(p) = &self.cfg.media_manifest {
            let path = self.cfg.resolve(p);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            for row in parse_manifest_rows(&text)? {
                manifest.insert(row)?;
            }
        }
        Ok(manifest)
    }

    fn hierarchies(&self, graph: &KnowledgeGraph) -> Result<Vec<PartHierarchy>> {
        let Some(tpath) = &self.cfg.part_templates else {
            return Ok(Vec::new());
        };
        let templates = load_templates(&self.cfg.resolve(tpath))?;
        let harvest_path = self.kb.harvest();
        require(&harvest_path, "extraction harvest; run `extract` first")?;
        let records: Vec<HarvestRecord> = crate::provider::read_jsonl(&harvest_path)?;
        let mut out = Vec::new();
        for r in records {
            let Some(sup) = &r.supercategory else { continue };
            let Some(template) = templates.get(&crate::label::normalize(sup)) else {
                log::warn!("no part template for supercategory `{sup}`");
                continue;
            };
            let Some(root) = graph.roots().get(&crate::label::normalize(&r.category_label)).cloned() else {
                continue;
            };
            out.push(build_part_hierarchy(&root, &r.category_label, template, &r.harvest)?);
        }
        Ok(out)
    }

    fn extract(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let docs = load_documents(&cfg.resolve(&cfg.documents))?;
        let schema = self.schema()?;
        let few_shot = FewShotSet::load(&cfg.resolve(&cfg.few_shot))?;
        let provider = cfg.text_provider()?;
        let ecfg = ExtractionConfig {
            retry: cfg.retry(),
            concurrency: cfg.limits.concurrency,
            ..ExtractionConfig::default()
        };
        let results = extract_documents(&docs, provider.as_ref(), &schema, &few_shot, &ecfg)?;
        let mut graph = KnowledgeGraph::new();
        schema.install(&mut graph)?;
        let mut harvest = Vec::new();
        let mut rejections = Vec::new();
        let mut failed_segments = 0;
        let mut unreachable = 0;
        for r in &results {
            graph.merge_from(&r.assembly.graph)?;
            failed_segments += r.responses.iter().filter(|x| x.is_err()).count();
            unreachable += r.assembly.connectivity.unreachable.len();
            for (segment, rej) in &r.rejected {
                rejections.push(serde_json::json!({
                    "document": r.document.id,
                    "segment": segment,
                    "entry": rej.entry,
                    "reason": rej.reason,
                }));
            }
            harvest.push(HarvestRecord {
                document: r.document.id.clone(),
                category_label: r.document.category_label.clone(),
                supercategory: r.document.supercategory.clone(),
                harvest: r.assembly.harvest.clone(),
            });
        }
        let manifest = self.manifest_rows()?;
        write_jsonl(&self.kb.harvest(), &harvest)?;
        write_jsonl(&self.kb.rejections(), &rejections)?;
        let (h, rj) = (self.kb.harvest(), self.kb.rejections());
        self.output(&h);
        self.output(&rj);
        self.provenance(Stage::Extract, &self.kb.root.join("extract"))?;
        self.count("documents", docs.len());
        self.count("segments", results.iter().map(|r| r.segments.len()).sum());
        self.count("failed_segments", failed_segments);
        self.count("rejected_entries", rejections.len());
        self.count("unreachable_entities", unreachable);
        self.save(&graph, &manifest)
    }

    fn annotate(&mut self) -> Result<()> {
        let (mut graph, manifest) = self.load()?;
        if self.cfg.part_templates.is_none() {
            return Err(Error::MissingPrerequisite("`part_templates` is not configured".into()));
        }
        let hierarchies = self.hierarchies(&graph)?;
        let (detector, segmenter, verifier) = (self.cfg.detector()?, self.cfg.segmenter()?, self.cfg.verifier()?);
        let mut acfg = AnnotateConfig {
            images_per_category: self.cfg.limits.images_per_category,
            concurrency: self.cfg.limits.concurrency,
            ..AnnotateConfig::default()
        };
        acfg.detection.score_floor = self.cfg.thresholds.detection_score;
        acfg.detection.retry = self.cfg.retry();
        let mut queue = ReviewQueue::open(&self.kb.review())?;
        let dims: BTreeMap<_, _> = manifest.entries().map(|e| (e.image.clone(), (e.width, e.height))).collect();
        let (mut ingested, mut queued, mut failures, mut verified_total) = (0, 0, 0, 0);
        for h in &hierarchies {
            let results = annotate_category(h, &manifest, detector.as_ref(), segmenter.as_ref(), verifier.as_ref(), &acfg)?;
            let verified: Vec<_> = results.iter().flat_map(|r| r.verified.iter().cloned()).collect();
            verified_total += verified.len();
            let report = ingest_annotations(&mut graph, h, verified.clone())?;
            ingested += report.ingested;
            let mut to_review: Vec<_> = results.iter().flat_map(|r| r.unreviewed.iter().cloned()).collect();
            to_review.extend(report.unknown);
            to_review.extend(spot_check_sample(&verified, self.cfg.thresholds.spot_check_rate, self.cfg.seed));
            for a in to_review {
                let (w, hgt) = dims[&a.image];
                queue.enqueue_region(a, w, hgt)?;
                queued += 1;
            }
            failures += results.iter().map(|r| r.failures.len()).sum::<usize>();
        }
        self.count("categories", hierarchies.len());
        self.count("verified", verified_total);
        self.count("ingested", ingested);
        self.count("queued_for_review", queued);
        self.count("provider_failures", failures);
        self.save(&graph, &manifest)
    }

    fn align(&mut self) -> Result<()> {
        let (mut graph, manifest) = self.load()?;
        let media = align_media_by_name(&mut graph, &manifest)?;
        let hierarchies = self.hierarchies(&graph)?;
        let inherited = inherit_trivial_parts(&mut graph, &hierarchies)?;
        let embedder = self.cfg.embedder()?;
        let mcfg = MergeConfig {
            threshold: self.cfg.thresholds.merge_similarity,
            concurrency: self.cfg.limits.concurrency,
            retry: self.cfg.retry(),
            ..MergeConfig::default()
        };
        let proposals = merge_similar_entities(&graph, embedder.as_ref(), &mcfg)?;
        let mut queue = ReviewQueue::open(&self.kb.review())?;
        for p in &proposals {
            queue.enqueue_merge(p.clone())?;
        }
        let grounded = ground_visual_relations(&mut graph)?;
        self.count("media_attached", media.attached);
        self.count("media_unmatched", media.unmatched.len());
        self.count("inherited_triplets", inherited.len());
        self.count("merge_proposals", proposals.len());
        self.count("relation_groundings", grounded.groundings_created);
        self.save(&graph, &manifest)
    }

    fn apply(&mut self) -> Result<()> {
        let (mut graph, manifest) = self.load()?;
        let queue = ReviewQueue::open(&self.kb.review())?;
        let report = apply_decisions(&mut graph, &queue)?;
        self.count("changes", report.changes());
        self.count("regions_added", report.regions_added);
        self.count("regions_removed", report.regions_removed);
        self.count("triplets_verified", report.triplets_verified);
        self.count("triplets_removed", report.triplets_removed);
        self.count("merges_applied", report.merges_applied);
        self.count("pending", queue.pending_count(None));
        self.save(&graph, &manifest)
    }

    fn export_text(&mut self) -> Result<()> {
        let (graph, _) = self.load()?;
        let split = export_textbench(&graph, self.cfg.seed)?;
        let dir = self.kb.textbench();
        split.write(&dir)?;
        self.provenance(Stage::ExportText, &dir)?;
        self.count("train", split.train.len());
        self.count("test", split.test.len());
        self.count("entities", split.entities.len());
        self.count("relations", split.relations.len());
        self.output(&dir);
        Ok(())
    }

    fn export_part(&mut self) -> Result<()> {
        let (graph, manifest) = self.load()?;
        let split = export_partbench(&graph, &manifest, None, self.cfg.seed)?;
        let dir = self.kb.partbench();
        split.write(&dir)?;
        self.provenance(Stage::ExportPart, &dir)?;
        self.count("categories", split.categories.len());
        self.count("train_images", split.train_images.len());
        self.count("test_images", split.test_images.len());
        self.count("train_annotations", split.train.annotations.len());
        self.count("test_annotations", split.test.annotations.len());
        self.output(&dir);
        Ok(())
    }

    fn build_vqa(&mut self) -> Result<()> {
        let (graph, manifest) = self.load()?;
        let schema = self.schema()?;
        // canned stub answers are extraction fixtures; questions then come
        // from the relation templates
        let provider = match self.cfg.providers.llm {
            ProviderConfig::Http { .. } => Some(self.cfg.text_provider()?),
            _ => None,
        };
        let vcfg = VqaConfig {
            seed: self.cfg.seed,
            per_category: self.cfg.limits.vqa_per_category,
            retry: self.cfg.retry(),
            concurrency: self.cfg.limits.concurrency,
        };
        let build = build_vqa_benchmark(&graph, &schema, &manifest, provider.as_deref(), &vcfg)?;
        let dir = self.kb.vqa();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("vqa.jsonl");
        fs::write(&path, to_jsonl(&build.items)?).map_err(|e| Error::io(&path, e))?;
        self.provenance(Stage::BuildVqa, &dir)?;
        self.count("items", build.items.len());
        self.count("rejected", build.rejected.len());
        self.output(&path);
        Ok(())
    }

    fn textbench(&self) -> Result<IndexedSplit> {
        let dir = self.kb.textbench();
        require(&dir.join("train.tsv"), "a TextBench split; run `export-text` first")?;
        IndexedSplit::from_textbench(&TextBenchSplit::read(&dir, self.cfg.seed)?)
    }

    fn train_embed(&mut self) -> Result<()> {
        let split = self.textbench()?;
        let tcfg = self.cfg.train_config();
        let started = Instant::now();
        let (model, log) = train_model(self.cfg.embed.model, self.cfg.embed.dim, &split, &tcfg)?;
        let path = self.kb.checkpoint(self.cfg.embed.model);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        model.save(&path, &split.vocab)?;
        self.provenance(Stage::TrainEmbed, path.parent().expect("has parent"))?;
        self.count("epochs", log.len());
        self.count("train_triples", split.train.len());
        self.metrics = serde_json::json!({
            "final_loss": log.last().map(|l| l.loss),
            "train_seconds": started.elapsed().as_secs_f64(),
        });
        self.output(&path);
        Ok(())
    }

    fn eval_kgc(&mut self) -> Result<()> {
        let split = self.textbench()?;
        let path = self.kb.checkpoint(self.cfg.embed.model);
        require(&path, "a trained embedding; run `train-embed` first")?;
        let (model, vocab) = EmbeddingModel::load(&path)?;
        if vocab != split.vocab {
            return Err(Error::VocabMismatch(format!(
                "{} was trained on a different vocabulary",
                path.display()
            )));
        }
        let raw: RankMetrics = evaluate_link_prediction(&model, &split, false)?;
        let filtered = evaluate_link_prediction(&model, &split, true)?;
        self.count("queries", filtered.queries);
        self.metrics = serde_json::json!({ "model": self.cfg.embed.model, "raw": raw, "filtered": filtered });
        Ok(())
    }

    fn eval_seg(&mut self) -> Result<()> {
        let gold_path = self.kb.partbench().join("test.json");
        require(&gold_path, "a PartBench split; run `export-part` first")?;
        let pcfg = self
            .cfg
            .eval_seg
            .as_ref()
            .ok_or_else(|| Error::MissingPrerequisite("`[eval_seg] predictions` is not configured".into()))?;
        let gold = CocoDataset::load(&gold_path)?;
        let pred = CocoDataset::load(&self.cfg.resolve(&pcfg.predictions))?;
        let dims: BTreeMap<String, (u32, u32)> = gold
            .images
            .iter()
            .map(|i| (i.image_key.clone(), (i.width, i.height)))
            .collect();
        let to_instances = |coco: &CocoDataset| -> Result<Vec<Instance>> {
            coco.to_region_annotations(VerifyState::Unreviewed)?
                .into_iter()
                .map(|a| {
                    let mask = match &a.mask {
                        Some(m) => Some(m.decode()?),
                        None => dims
                            .get(a.image.as_str())
                            .map(|&(w, h)| BinaryMask::from_box(w, h, &a.bbox)),
                    };
                    Ok(Instance {
                        image: a.image,
                        label: a.label,
                        bbox: a.bbox,
                        mask,
                        score: a.score.unwrap_or(1.0),
                    })
                })
                .collect()
        };
        let (gold_inst, pred_inst) = (to_instances(&gold)?, to_instances(&pred)?);
        let ap = instance_ap(&pred_inst, &gold_inst)?;
        let mut samples = Vec::new();
        for (image, &(w, h)) in &dims {
            let merged = |list: &[Instance]| {
                merge_instances(
                    w,
                    h,
                    list.iter()
                        .filter(|i| i.image.as_str() == image)
                        .filter_map(|i| i.mask.as_ref().map(|m| (i.label.as_str(), m))),
                )
            };
            samples.push(SemanticSample {
                width: w,
                height: h,
                pred: merged(&pred_inst)?,
                gold: merged(&gold_inst)?,
            });
        }
        let parts: Vec<String> = gold.categories.iter().map(|c| c.name.clone()).collect();
        let seg = semantic_seg_metrics(&samples, &parts)?;
        self.count("gold_instances", gold_inst.len());
        self.count("predictions", pred_inst.len());
        self.metrics = serde_json::json!({ "instance": ap, "semantic": seg });
        Ok(())
    }

    fn zsl(&mut self) -> Result<()> {
        let (graph, manifest) = self.load()?;
        let zcfg = self
            .cfg
            .zsl
            .as_ref()
            .ok_or_else(|| Error::MissingPrerequisite("`[zsl]` vectors are not configured".into()))?;
        let schema = self.schema()?;
        let embedder = self.cfg.embedder()?;
        let support = read_vector_file(&self.cfg.resolve(&zcfg.support_vectors))?;
        let images = read_vector_file(&self.cfg.resolve(&zcfg.image_vectors))?;
        let ecfg = EnsembleConfig {
            k: self.cfg.limits.ensemble_size,
            concurrency: self.cfg.limits.concurrency,
            retry: self.cfg.retry(),
            ..EnsembleConfig::default()
        };
        let mut sets = Vec::new();
        for (label, id) in graph.roots() {
            let vectors: Vec<Vec<f64>> = support
                .iter()
                .filter(|(l, _)| crate::label::normalize(&l.replace('_', " ")) == *label)
                .map(|(_, v)| v.clone())
                .collect();
            if vectors.is_empty() {
                log::warn!("no support vectors for `{label}`; category skipped");
                continue;
            }
            let entries = category_entries(&graph, &schema, id)?;
            let siblings = siblings_by_belong_to(&graph, id);
            let entries = filter_discriminative(&graph, &schema, &entries, &siblings, self.cfg.thresholds.sibling_fraction)?;
            sets.push(select_knowledge_ensemble(id, label, &entries, &vectors, embedder.as_ref(), &ecfg)?);
        }
        if sets.is_empty() {
            return Err(Error::MissingPrerequisite("no category has support vectors".into()));
        }
        let mut predictions = Vec::new();
        let (mut correct, mut labelled) = (0, 0);
        for (image, v) in &images {
            let ranked = zero_shot_classify(v, &sets, zcfg.aggregation)?;
            let top = ranked.first().map(|(l, _)| l.clone()).unwrap_or_default();
            let gold = manifest
                .get(&crate::graph::ImageId::new(image.clone()))
                .map(|e| crate::label::normalize(&e.category_label));
            if let Some(g) = &gold {
                labelled += 1;
                correct += usize::from(*g == top);
            }
            predictions.push(serde_json::json!({ "image": image, "prediction": top, "gold": gold, "ranking": ranked }));
        }
        let path = self.kb.root.join("zsl").join("predictions.jsonl");
        write_jsonl(&path, &predictions)?;
        self.provenance(Stage::Zsl, path.parent().expect("has parent"))?;
        self.count("categories", sets.len());
        self.count("images", images.len());
        self.metrics = serde_json::json!({
            "top1": (labelled > 0).then(|| 100.0 * correct as f64 / labelled as f64),
            "labelled": labelled,
        });
        self.output(&path);
        Ok(())
    }
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn next_report_path(dir: &Path, stage: Stage) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.count();
    let mut i = n;
    loop {
        let p = dir.join(format!("{i:04}-{}.json", stage.name()));
        if !p.exists() {
            return Ok(p);
        }
        i += 1;
    }
}

/// Runs one stage under the KB lock and writes its report. `Serve` is
/// provided by the command-line front end and is rejected here.
pub fn run_stage(config: &PipelineConfig, stage: Stage) -> Result<StageReport> {
    if stage == Stage::Serve {
        return Err(Error::InvalidConfig("`serve` is run by the command-line front end".into()));
    }
    config.validate()?;
    let kb = KbPaths::new(config.kb_dir());
    let _lock = KbLock::acquire(&kb.root)?;
    let started_at = now_secs();
    let clock = Instant::now();
    let mut run = Run {
        cfg: config,
        hash: config.config_hash(),
        kb,
        counts: BTreeMap::new(),
        outputs: Vec::new(),
        metrics: serde_json::Value::Null,
    };
    match stage {
        Stage::Extract => run.extract(),
        Stage::Annotate => run.annotate(),
        Stage::Align => run.align(),
        Stage::Apply => run.apply(),
        Stage::ExportText => run.export_text(),
        Stage::ExportPart => run.export_part(),
        Stage::BuildVqa => run.build_vqa(),
        Stage::TrainEmbed => run.train_embed(),
        Stage::EvalKgc => run.eval_kgc(),
        Stage::EvalSeg => run.eval_seg(),
        Stage::Zsl => run.zsl(),
        Stage::Serve => unreachable!(),
    }?;
    let path = next_report_path(&run.kb.reports(), stage)?;
    let mut report = StageReport {
        format_version: FORMAT_VERSION,
        stage,
        seed: config.seed,
        config_hash: run.hash,
        started_at,
        duration_ms: clock.elapsed().as_millis() as u64,
        counts: run.counts,
        outputs: run.outputs,
        metrics: run.metrics,
        report_path: None,
    };
    write_json(&path, &report)?;
    report.report_path = Some(path);
    Ok(report)
}

/// The stages `run_enabled` executes, in pipeline order.
pub const DEFAULT_SEQUENCE: [Stage; 6] = [
    Stage::Extract,
    Stage::Annotate,
    Stage::Align,
    Stage::Apply,
    Stage::ExportText,
    Stage::ExportPart,
];

/// Runs the enabled stages of [`DEFAULT_SEQUENCE`] in order.
pub fn run_enabled(config: &PipelineConfig) -> Result<Vec<StageReport>> {
    DEFAULT_SEQUENCE
        .into_iter()
        .filter(|s| config.enabled(*s))
        .map(|s| run_stage(config, s))
        .collect()
}

