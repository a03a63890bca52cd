//! Knowledge-graph embedding baselines for link prediction: TransE,
//! DistMult, ComplEx and RotatE with analytic gradients, margin-ranking and
//! self-adversarial losses, SGD/Adagrad, filtered negative sampling,
//! evaluation through [`crate::benchmarks::kgc`] and binary checkpoints.
//!
//! Complex-valued tables (ComplEx entities and relations, RotatE entities)
//! store interleaved `(re, im)` pairs. RotatE relations store one phase per
//! dimension, kept in `(-pi, pi]`, so their modulus is 1 by construction.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchmarks::kgc::{rank_metrics, KnownTriples, QueryMode, RankMetrics, RankQuery};
use crate::benchmarks::textbench::{TextBenchSplit, TextTriple};
use crate::error::{Error, Result};

pub type Triple = (usize, usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    TransE,
    DistMult,
    ComplEx,
    RotatE,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::TransE,
        ModelKind::DistMult,
        ModelKind::ComplEx,
        ModelKind::RotatE,
    ];

    fn code(self) -> u8 {
        match self {
            ModelKind::TransE => 1,
            ModelKind::DistMult => 2,
            ModelKind::ComplEx => 3,
            ModelKind::RotatE => 4,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "transe" => Ok(ModelKind::TransE),
            "distmult" => Ok(ModelKind::DistMult),
            "complex" => Ok(ModelKind::ComplEx),
            "rotate" => Ok(ModelKind::RotatE),
            other => Err(Error::InvalidConfig(format!("unknown model kind `{other}`"))),
        }
    }

    pub fn distance_based(self) -> bool {
        matches!(self, ModelKind::TransE | ModelKind::RotatE)
    }

    fn complex_entities(self) -> bool {
        matches!(self, ModelKind::ComplEx | ModelKind::RotatE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub kind: ModelKind,
    pub dim: usize,
    pub n_entities: usize,
    pub n_relations: usize,
    pub seed: u64,
    pub entities: Vec<f64>,
    pub relations: Vec<f64>,
}

/// Maps a phase into `(-pi, pi]`.
pub fn wrap_phase(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// Uniform tables in `[-6/sqrt(dim), 6/sqrt(dim)]`; RotatE phases uniform
/// in `(-pi, pi]`.
pub fn init_embedding_model(
    kind: ModelKind,
    dim: usize,
    n_entities: usize,
    n_relations: usize,
    seed: u64,
) -> Result<EmbeddingModel> {
    if dim == 0 {
        return Err(Error::InvalidConfig("embedding dimension must be > 0".into()));
    }
    let mut model = EmbeddingModel {
        kind,
        dim,
        n_entities,
        n_relations,
        seed,
        entities: Vec::new(),
        relations: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 6.0 / (dim as f64).sqrt();
    model.entities = (0..n_entities * model.ent_width())
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    model.relations = (0..n_relations * model.rel_width())
        .map(|_| {
            if kind == ModelKind::RotatE {
                wrap_phase(rng.random_range(-PI..=PI))
            } else {
                rng.random_range(-bound..=bound)
            }
        })
        .collect();
    Ok(model)
}

/// Gradient of a scalar with respect to the rows it touches.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    pub entities: BTreeMap<usize, Vec<f64>>,
    pub relations: BTreeMap<usize, Vec<f64>>,
}

impl Gradient {
    fn add(map: &mut BTreeMap<usize, Vec<f64>>, row: usize, width: usize, g: &[f64], scale: f64) {
        let slot = map.entry(row).or_insert_with(|| vec![0.0; width]);
        for (s, v) in slot.iter_mut().zip(g) {
            *s += scale * v;
        }
    }

    pub fn norm(&self) -> f64 {
        self.entities
            .values()
            .chain(self.relations.values())
            .flatten()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Derivatives of one score with respect to the head, relation and tail rows.
pub struct ScoreGrad {
    pub head: Vec<f64>,
    pub relation: Vec<f64>,
    pub tail: Vec<f64>,
}

impl EmbeddingModel {
    pub fn ent_width(&self) -> usize {
        if self.kind.complex_entities() {
            2 * self.dim
        } else {
            self.dim
        }
    }

    pub fn rel_width(&self) -> usize {
        if self.kind == ModelKind::ComplEx {
            2 * self.dim
        } else {
            self.dim
        }
    }

    pub fn entity(&self, e: usize) -> &[f64] {
        let w = self.ent_width();
        &self.entities[e * w..(e + 1) * w]
    }

    pub fn relation(&self, r: usize) -> &[f64] {
        let w = self.rel_width();
        &self.relations[r * w..(r + 1) * w]
    }

    fn check(&self, h: usize, r: usize, t: usize) -> Result<()> {
        if h >= self.n_entities {
            return Err(Error::UnknownId(format!("entity {h}")));
        }
        if t >= self.n_entities {
            return Err(Error::UnknownId(format!("entity {t}")));
        }
        if r >= self.n_relations {
            return Err(Error::UnknownId(format!("relation {r}")));
        }
        Ok(())
    }

    /// Plausibility of `(h, r, t)`; higher is better.
    pub fn score_triplet(&self, h: usize, r: usize, t: usize) -> Result<f64> {
        self.check(h, r, t)?;
        Ok(self.score(h, r, t))
    }

    pub(crate) fn score(&self, h: usize, r: usize, t: usize) -> f64 {
        let (eh, er, et) = (self.entity(h), self.relation(r), self.entity(t));
        match self.kind {
            ModelKind::TransE => -eh
                .iter()
                .zip(er)
                .zip(et)
                .map(|((a, b), c)| (a + b - c).powi(2))
                .sum::<f64>()
                .sqrt(),
            ModelKind::DistMult => eh.iter().zip(er).zip(et).map(|((a, b), c)| a * b * c).sum(),
            ModelKind::ComplEx => (0..self.dim)
                .map(|i| {
                    let (a, b) = (eh[2 * i], eh[2 * i + 1]);
                    let (c, d) = (er[2 * i], er[2 * i + 1]);
                    let (e, f) = (et[2 * i], et[2 * i + 1]);
                    (a * c - b * d) * e + (a * d + b * c) * f
                })
                .sum(),
            ModelKind::RotatE => -(0..self.dim)
                .map(|i| {
                    let (a, b) = (eh[2 * i], eh[2 * i + 1]);
                    let (s, c) = er[i].sin_cos();
                    let (e, f) = (et[2 * i], et[2 * i + 1]);
                    (a * c - b * s - e).powi(2) + (a * s + b * c - f).powi(2)
                })
                .sum::<f64>()
                .sqrt(),
        }
    }

    /// Analytic derivative of the score. Where the distance-based scores are
    /// not differentiable (zero distance) the zero subgradient is returned.
    pub fn score_grad(&self, h: usize, r: usize, t: usize) -> ScoreGrad {
        let (eh, er, et) = (self.entity(h), self.relation(r), self.entity(t));
        let mut g = ScoreGrad {
            head: vec![0.0; eh.len()],
            relation: vec![0.0; er.len()],
            tail: vec![0.0; et.len()],
        };
        match self.kind {
            ModelKind::TransE => {
                let d: Vec<f64> = (0..self.dim).map(|i| eh[i] + er[i] - et[i]).collect();
                let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    for (i, di) in d.iter().enumerate() {
                        g.head[i] = -di / n;
                        g.relation[i] = -di / n;
                        g.tail[i] = di / n;
                    }
                }
            }
            ModelKind::DistMult => {
                for i in 0..self.dim {
                    g.head[i] = er[i] * et[i];
                    g.relation[i] = eh[i] * et[i];
                    g.tail[i] = eh[i] * er[i];
                }
            }
            ModelKind::ComplEx => {
                for i in 0..self.dim {
                    let (a, b) = (eh[2 * i], eh[2 * i + 1]);
                    let (c, d) = (er[2 * i], er[2 * i + 1]);
                    let (e, f) = (et[2 * i], et[2 * i + 1]);
                    g.head[2 * i] = c * e + d * f;
                    g.head[2 * i + 1] = c * f - d * e;
                    g.relation[2 * i] = a * e + b * f;
                    g.relation[2 * i + 1] = a * f - b * e;
                    g.tail[2 * i] = a * c - b * d;
                    g.tail[2 * i + 1] = a * d + b * c;
                }
            }
            ModelKind::RotatE => {
                let mut uv = Vec::with_capacity(self.dim);
                let mut sq = 0.0;
                for i in 0..self.dim {
                    let (a, b) = (eh[2 * i], eh[2 * i + 1]);
                    let (s, c) = er[i].sin_cos();
                    let u = a * c - b * s - et[2 * i];
                    let v = a * s + b * c - et[2 * i + 1];
                    sq += u * u + v * v;
                    uv.push((u, v, s, c));
                }
                let n = sq.sqrt();
                if n > 0.0 {
                    for (i, &(u, v, s, c)) in uv.iter().enumerate() {
                        let (a, b) = (eh[2 * i], eh[2 * i + 1]);
                        g.head[2 * i] = -(u * c + v * s) / n;
                        g.head[2 * i + 1] = -(v * c - u * s) / n;
                        g.relation[i] = -(u * (-a * s - b * c) + v * (a * c - b * s)) / n;
                        g.tail[2 * i] = u / n;
                        g.tail[2 * i + 1] = v / n;
                    }
                }
            }
        }
        g
    }

    fn accumulate(&self, grad: &mut Gradient, (h, r, t): Triple, scale: f64) {
        if scale == 0.0 {
            return;
        }
        let sg = self.score_grad(h, r, t);
        let (ew, rw) = (self.ent_width(), self.rel_width());
        Gradient::add(&mut grad.entities, h, ew, &sg.head, scale);
        Gradient::add(&mut grad.relations, r, rw, &sg.relation, scale);
        Gradient::add(&mut grad.entities, t, ew, &sg.tail, scale);
    }

    pub fn is_finite(&self) -> bool {
        self.entities.iter().chain(&self.relations).all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    MarginRanking,
    SelfAdversarialSoftplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adagrad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub margin: f64,
    pub negatives: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: Loss,
    pub optimizer: Optimizer,
    /// Temperature of the self-adversarial negative weights.
    pub adversarial_temperature: f64,
    /// Entity rows of the distance models are projected onto this L2 ball
    /// after every update; `None` disables the constraint.
    pub entity_max_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            margin: 6.0,
            negatives: 16,
            batch_size: 1,
            epochs: 200,
            loss: Loss::SelfAdversarialSoftplus,
            optimizer: Optimizer::Adagrad,
            adversarial_temperature: 1.0,
            entity_max_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.margin >= 0.0
            && self.negatives > 0
            && self.batch_size > 0
            && self.adversarial_temperature >= 0.0;
        if positive {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid training config {self:?}")))
        }
    }
}

fn project_to_ball(row: &mut [f64], max_norm: f64) {
    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > max_norm {
        row.iter_mut().for_each(|x| *x *= max_norm / n);
    }
}

/// A positive triple with its sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub positive: Triple,
    pub negatives: Vec<Triple>,
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of `temperature * scores`; treated as constants by the gradient.
pub fn adversarial_weights(scores: &[f64], temperature: f64) -> Vec<f64> {
    let max = scores
        .iter()
        .map(|s| temperature * s)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (temperature * s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Mean loss over the samples and its gradient.
///
/// * margin ranking: mean over negatives of `max(0, margin - s(pos) + s(neg))`
/// * self-adversarial: `softplus(-(margin + s(pos))) + sum_j w_j softplus(margin + s(neg_j))`
///   with `w = softmax(temperature * s(neg))` held constant.
pub fn loss_and_gradient(model: &EmbeddingModel, samples: &[Sample], config: &TrainConfig) -> (f64, Gradient) {
    let mut grad = Gradient::default();
    let mut total = 0.0;
    let b = samples.len().max(1) as f64;
    let g = config.margin;
    for s in samples {
        let (h, r, t) = s.positive;
        let sp = model.score(h, r, t);
        let sn: Vec<f64> = s.negatives.iter().map(|&(h, r, t)| model.score(h, r, t)).collect();
        match config.loss {
            Loss::MarginRanking => {
                if sn.is_empty() {
                    continue;
                }
                let k = sn.len() as f64;
                let mut d_pos = 0.0;
                for (neg, &sv) in s.negatives.iter().zip(&sn) {
                    let m = g - sp + sv;
                    if m > 0.0 {
                        total += m / (k * b);
                        d_pos -= 1.0 / (k * b);
                        model.accumulate(&mut grad, *neg, 1.0 / (k * b));
                    }
                }
                model.accumulate(&mut grad, s.positive, d_pos);
            }
            Loss::SelfAdversarialSoftplus => {
                total += softplus(-(g + sp)) / b;
                model.accumulate(&mut grad, s.positive, -sigmoid(-(g + sp)) / b);
                let w = adversarial_weights(&sn, config.adversarial_temperature);
                for ((neg, &sv), wj) in s.negatives.iter().zip(&sn).zip(w) {
                    total += wj * softplus(g + sv) / b;
                    model.accumulate(&mut grad, *neg, wj * sigmoid(g + sv) / b);
                }
            }
        }
    }
    (total, grad)
}

/// Optimizer state plus the model being trained; updates are applied by a
/// single writer in sample order.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: EmbeddingModel,
    pub config: TrainConfig,
    entity_accum: Vec<f64>,
    relation_accum: Vec<f64>,
    rng: ChaCha8Rng,
}

const MAX_NEGATIVE_ATTEMPTS: usize = 64;

impl Trainer {
    pub fn new(mut model: EmbeddingModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if let Some(m) = config.entity_max_norm.filter(|_| model.kind.distance_based()) {
            let w = model.ent_width();
            model.entities.chunks_mut(w).for_each(|row| project_to_ball(row, m));
        }
        Ok(Self {
            entity_accum: vec![0.0; model.entities.len()],
            relation_accum: vec![0.0; model.relations.len()],
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
        })
    }

    /// Corrupts head or tail (fair coin) with a uniform entity, rejecting
    /// corruptions that are known positives.
    pub fn sample_negatives(&mut self, positive: Triple, known: &KnownTriples) -> Vec<Triple> {
        let (h, r, t) = positive;
        let n = self.model.n_entities;
        let mut out = Vec::with_capacity(self.config.negatives);
        for _ in 0..self.config.negatives {
            for _ in 0..MAX_NEGATIVE_ATTEMPTS {
                let e = self.rng.random_range(0..n);
                let cand = if self.rng.random_bool(0.5) { (e, r, t) } else { (h, r, e) };
                if !known.contains(&cand) {
                    out.push(cand);
                    break;
                }
            }
        }
        out
    }

    pub fn apply(&mut self, grad: &Gradient) {
        let lr = self.config.learning_rate;
        let adagrad = self.config.optimizer == Optimizer::Adagrad;
        let update = |params: &mut [f64], accum: &mut [f64], g: &[f64]| {
            for ((p, a), &gi) in params.iter_mut().zip(accum.iter_mut()).zip(g) {
                if adagrad {
                    *a += gi * gi;
                    *p -= lr * gi / (a.sqrt() + 1e-10);
                } else {
                    *p -= lr * gi;
                }
            }
        };
        let (ew, rw) = (self.model.ent_width(), self.model.rel_width());
        let max_norm = self.config.entity_max_norm.filter(|_| self.model.kind.distance_based());
        for (&row, g) in &grad.entities {
            let span = row * ew..(row + 1) * ew;
            update(&mut self.model.entities[span.clone()], &mut self.entity_accum[span.clone()], g);
            if let Some(m) = max_norm {
                project_to_ball(&mut self.model.entities[span], m);
            }
        }
        for (&row, g) in &grad.relations {
            let span = row * rw..(row + 1) * rw;
            update(&mut self.model.relations[span.clone()], &mut self.relation_accum[span.clone()], g);
            if self.model.kind == ModelKind::RotatE {
                for p in &mut self.model.relations[span] {
                    *p = wrap_phase(*p);
                }
            }
        }
    }

    /// One optimizer update on `batch`; returns the batch mean loss.
    pub fn train_step(&mut self, batch: &[Triple], known: &KnownTriples) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::ConstraintViolation("empty training batch".into()));
        }
        let samples: Vec<Sample> = batch
            .iter()
            .map(|&p| Sample {
                positive: p,
                negatives: self.sample_negatives(p, known),
            })
            .collect();
        let (loss, grad) = loss_and_gradient(&self.model, &samples, &self.config);
        self.apply(&grad);
        if !loss.is_finite() || !self.model.is_finite() {
            return Err(Error::ConstraintViolation("training diverged (non-finite values)".into()));
        }
        Ok(loss)
    }

    /// Shuffled pass over `train`; returns the mean batch loss.
    pub fn train_epoch(&mut self, train: &[Triple], known: &KnownTriples) -> Result<f64> {
        let mut order = train.to_vec();
        order.shuffle(&mut self.rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(self.config.batch_size) {
            sum += self.train_step(batch, known)?;
            batches += 1;
        }
        Ok(sum / batches.max(1) as f64)
    }
}

/// Entity and relation vocabularies with index lookup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub entities: Vec<String>,
    pub relations: Vec<String>,
}

impl Vocab {
    fn index(list: &[String]) -> BTreeMap<&str, usize> {
        list.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }

    pub fn encode(&self, triples: &[TextTriple]) -> Result<Vec<Triple>> {
        let (e, r) = (Self::index(&self.entities), Self::index(&self.relations));
        triples
            .iter()
            .map(|t| {
                let get = |m: &BTreeMap<&str, usize>, k: &str| {
                    m.get(k)
                        .copied()
                        .ok_or_else(|| Error::VocabMismatch(format!("`{k}` not in vocabulary")))
                };
                Ok((get(&e, &t.head)?, get(&r, &t.relation)?, get(&e, &t.tail)?))
            })
            .collect()
    }
}

/// A TextBench split in index form.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedSplit {
    pub vocab: Vocab,
    pub train: Vec<Triple>,
    pub test: Vec<Triple>,
}

impl IndexedSplit {
    pub fn from_textbench(split: &TextBenchSplit) -> Result<Self> {
        let vocab = Vocab {
            entities: split.entities.clone(),
            relations: split.relations.clone(),
        };
        Ok(Self {
            train: vocab.encode(&split.train)?,
            test: vocab.encode(&split.test)?,
            vocab,
        })
    }

    /// Every triple of the split, used for filtering.
    pub fn known(&self) -> KnownTriples {
        self.train.iter().chain(&self.test).copied().collect::<HashSet<_>>()
    }
}

/// Head and tail prediction queries for every test triple, scored over the
/// whole entity vocabulary and pooled.
pub fn link_prediction_queries(model: &EmbeddingModel, test: &[Triple]) -> Vec<RankQuery> {
    use rayon::prelude::*;
    test.par_iter()
        .flat_map_iter(|&(h, r, t)| {
            let n = model.n_entities;
            let heads: Vec<f64> = (0..n).map(|c| model.score(c, r, t)).collect();
            let tails: Vec<f64> = (0..n).map(|c| model.score(h, r, c)).collect();
            [
                RankQuery {
                    mode: QueryMode::HeadPrediction,
                    relation: r,
                    anchor: t,
                    gold: h,
                    scores: heads,
                },
                RankQuery {
                    mode: QueryMode::TailPrediction,
                    relation: r,
                    anchor: h,
                    gold: t,
                    scores: tails,
                },
            ]
        })
        .collect()
}

pub fn evaluate_link_prediction(
    model: &EmbeddingModel,
    split: &IndexedSplit,
    filtered: bool,
) -> Result<RankMetrics> {
    if split.vocab.entities.len() != model.n_entities || split.vocab.relations.len() != model.n_relations {
        return Err(Error::VocabMismatch(format!(
            "model has {} entities / {} relations, split has {} / {}",
            model.n_entities,
            model.n_relations,
            split.vocab.entities.len(),
            split.vocab.relations.len()
        )));
    }
    for &(h, r, t) in &split.test {
        model.check(h, r, t).map_err(|e| Error::VocabMismatch(e.to_string()))?;
    }
    let queries = link_prediction_queries(model, &split.test);
    rank_metrics(&queries, filtered, &split.known())
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
}

/// Initializes and trains a model on `split.train` for `config.epochs`.
pub fn train_model(
    kind: ModelKind,
    dim: usize,
    split: &IndexedSplit,
    config: &TrainConfig,
) -> Result<(EmbeddingModel, Vec<EpochLog>)> {
    let model = init_embedding_model(
        kind,
        dim,
        split.vocab.entities.len(),
        split.vocab.relations.len(),
        config.seed,
    )?;
    let mut trainer = Trainer::new(model, *config)?;
    // only training triples are known during training; test triples must
    // stay eligible as negatives or the filter would leak them
    let known: KnownTriples = split.train.iter().copied().collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let loss = trainer.train_epoch(&split.train, &known)?;
        log.push(EpochLog { epoch, loss });
    }
    Ok((trainer.model, log))
}

const MAGIC: &[u8; 4] = b"VKGE";
const CHECKPOINT_VERSION: u32 = 1;

/// Path of the vocabulary file written next to a checkpoint.
pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".vocab.json");
    PathBuf::from(name)
}

impl EmbeddingModel {
    /// Header (magic, version, kind, dim, vocabulary sizes, seed) followed by
    /// the entity and relation tables as little-endian f64.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u8(self.kind.code())?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u64::<LittleEndian>(self.n_entities as u64)?;
        w.write_u64::<LittleEndian>(self.n_relations as u64)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        for &x in self.entities.iter().chain(&self.relations) {
            w.write_f64::<LittleEndian>(x)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read, source: &str) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptRecord {
            file: source.to_string(),
            line: 0,
            reason,
        };
        let io = |e: std::io::Error| corrupt(e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(corrupt("not an embedding checkpoint".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let code = r.read_u8().map_err(io)?;
        let kind = ModelKind::from_code(code).ok_or_else(|| corrupt(format!("unknown model code {code}")))?;
        let dim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let n_entities = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let n_relations = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let seed = r.read_u64::<LittleEndian>().map_err(io)?;
        let mut model = EmbeddingModel {
            kind,
            dim,
            n_entities,
            n_relations,
            seed,
            entities: Vec::new(),
            relations: Vec::new(),
        };
        let read_table = |r: &mut dyn Read, len: usize| -> Result<Vec<f64>> {
            (0..len)
                .map(|_| r.read_f64::<LittleEndian>().map_err(io))
                .collect()
        };
        model.entities = read_table(&mut r, n_entities * model.ent_width())?;
        model.relations = read_table(&mut r, n_relations * model.rel_width())?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", rest.len())));
        }
        if !model.is_finite() {
            return Err(corrupt("non-finite parameter".into()));
        }
        Ok(model)
    }

    /// Writes the checkpoint and its vocabulary sidecar.
    pub fn save(&self, path: &Path, vocab: &Vocab) -> Result<()> {
        if vocab.entities.len() != self.n_entities || vocab.relations.len() != self.n_relations {
            return Err(Error::VocabMismatch("vocabulary sizes differ from the model".into()));
        }
        let mut bytes = Vec::new();
        self.write_to(&mut bytes).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let vp = vocab_path(path);
        let json = serde_json::to_vec_pretty(vocab).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(&vp, json).map_err(|e| Error::io(&vp, e))
    }

    pub fn load(path: &Path) -> Result<(Self, Vocab)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let model = Self::read_from(bytes.as_slice(), &path.display().to_string())?;
        let vp = vocab_path(path);
        let text = std::fs::read_to_string(&vp).map_err(|e| Error::io(&vp, e))?;
        let vocab: Vocab = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        if vocab.entities.len() != model.n_entities || vocab.relations.len() != model.n_relations {
            return Err(Error::VocabMismatch(format!(
                "{} does not match its vocabulary file",
                path.display()
            )));
        }
        Ok((model, vocab))
    }
}

/// The synthetic graph used to sanity-check training: `n` entities on a
/// cycle with a successor relation, its inverse, and its square.
pub fn cyclic_toy_graph(n_entities: usize) -> Vec<TextTriple> {
    let n = n_entities as i64;
    let mut out = Vec::new();
    for (name, step) in [("next", 1i64), ("prev", -1), ("next2", 2)] {
        for i in 0..n {
            out.push(TextTriple {
                head: format!("e{i:02}"),
                relation: name.to_string(),
                tail: format!("e{:02}", (i + step).rem_euclid(n)),
            });
        }
    }
    out
}

/// Shuffles the toy graph with `seed` and holds out 15% for testing.
pub fn toy_split(n_entities: usize, seed: u64) -> TextBenchSplit {
    let mut triples = cyclic_toy_graph(n_entities);
    triples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = triples.split_off(crate::benchmarks::textbench::train_size(triples.len()));
    let mut entities: Vec<String> = (0..n_entities).map(|i| format!("e{i:02}")).collect();
    entities.sort();
    let mut relations: Vec<String> = triples.iter().chain(&test).map(|t| t.relation.clone()).collect();
    relations.sort();
    relations.dedup();
    TextBenchSplit {
        train: triples,
        test,
        entities,
        relations,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_embedding_model(ModelKind::TransE, 8, 10, 3, 7).unwrap();
        let b = init_embedding_model(ModelKind::TransE, 8, 10, 3, 7).unwrap();
        assert_eq!(a, b);
        let bound = 6.0 / 8f64.sqrt();
        assert!(a.entities.iter().chain(&a.relations).all(|x| x.abs() <= bound));
        assert!(init_embedding_model(ModelKind::TransE, 0, 10, 3, 7).is_err());
        let r = init_embedding_model(ModelKind::RotatE, 4, 5, 2, 1).unwrap();
        assert!(r.relations.iter().all(|p| *p > -PI && *p <= PI));
        assert_eq!(r.entities.len(), 5 * 8);
    }

    #[test]
    fn transe_identity_and_distmult_reduction() {
        let mut m = init_embedding_model(ModelKind::TransE, 3, 2, 1, 0).unwrap();
        m.entities = vec![1.0, 2.0, 3.0, 1.5, 1.0, 3.5];
        m.relations = vec![0.5, -1.0, 0.5];
        assert_eq!(m.score_triplet(0, 0, 1).unwrap(), 0.0);
        assert!(m.score_triplet(1, 0, 0).unwrap() < 0.0);

        let mut d = init_embedding_model(ModelKind::DistMult, 3, 2, 1, 0).unwrap();
        d.relations = vec![1.0; 3];
        let dot: f64 = d.entity(0).iter().zip(d.entity(1)).map(|(a, b)| a * b).sum();
        assert!((d.score_triplet(0, 0, 1).unwrap() - dot).abs() < 1e-12);
        assert!(matches!(d.score_triplet(0, 0, 2), Err(Error::UnknownId(_))));
    }

    #[test]
    fn margin_loss_forced_values() {
        let mut m = init_embedding_model(ModelKind::DistMult, 2, 3, 1, 0).unwrap();
        m.entities = vec![1.0, 1.0, 1.0, 1.0, 0.5, 0.0];
        m.relations = vec![1.0, 1.0];
        // s(0,0,1) = 2, s(0,0,2) = 0.5
        let sample = Sample {
            positive: (0, 0, 1),
            negatives: vec![(0, 0, 2)],
        };
        let cfg = TrainConfig {
            loss: Loss::MarginRanking,
            margin: 2.0,
            ..Default::default()
        };
        let (loss, _) = loss_and_gradient(&m, std::slice::from_ref(&sample), &cfg);
        assert!((loss - (2.0f64 - 1.5).max(0.0)).abs() < 1e-12);
        // equal scores at zero margin: no loss, no gradient
        let tie = Sample {
            positive: (0, 0, 1),
            negatives: vec![(0, 0, 1)],
        };
        let zero = TrainConfig { margin: 0.0, ..cfg };
        let (loss, grad) = loss_and_gradient(&m, &[tie], &zero);
        assert_eq!(loss, 0.0);
        assert_eq!(grad.norm(), 0.0);
    }

    #[test]
    fn rotate_phases_stay_wrapped() {
        let idx = IndexedSplit::from_textbench(&toy_split(6, 0)).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            learning_rate: 0.5,
            optimizer: Optimizer::Sgd,
            ..Default::default()
        };
        let (m, _) = train_model(ModelKind::RotatE, 4, &idx, &cfg).unwrap();
        assert!(m.relations.iter().all(|p| *p > -PI && *p <= PI));
        assert!(m.is_finite());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let m = init_embedding_model(ModelKind::ComplEx, 3, 4, 2, 9).unwrap();
        let vocab = Vocab {
            entities: (0..4).map(|i| format!("e{i}")).collect(),
            relations: vec!["a".into(), "b".into()],
        };
        m.save(&path, &vocab).unwrap();
        let (back, v) = EmbeddingModel::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(v, vocab);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        assert!(EmbeddingModel::read_from(bytes.as_slice(), "x").is_err());
        bytes.truncate(20);
        assert!(EmbeddingModel::read_from(bytes.as_slice(), "x").is_err());
    }

    #[test]
    fn negatives_avoid_known_positives() {
        let m = init_embedding_model(ModelKind::TransE, 2, 5, 1, 0).unwrap();
        let cfg = TrainConfig {
            negatives: 200,
            ..Default::default()
        };
        let mut t = Trainer::new(m, cfg).unwrap();
        let known: KnownTriples = [(0, 0, 1), (0, 0, 2), (3, 0, 1)].into_iter().collect();
        let negs = t.sample_negatives((0, 0, 1), &known);
        assert_eq!(negs.len(), 200);
        assert!(negs.iter().all(|n| !known.contains(n)));
        assert!(negs.iter().all(|&(h, r, tl)| r == 0 && (h == 0 || tl == 1)));
    }

    #[test]
    fn untrained_model_ranks_like_chance() {
        // expected MRR of a uniformly random rank over n candidates is H(n)/n
        let n = 50;
        let harmonic: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
        let expected = 100.0 * harmonic / n as f64;
        let mut split = toy_split(n, 0);
        split.test.append(&mut split.train);
        let idx = IndexedSplit::from_textbench(&split).unwrap();
        let mut total = 0.0;
        for seed in 0..20 {
            let m = init_embedding_model(ModelKind::DistMult, 16, n, 3, seed).unwrap();
            total += evaluate_link_prediction(&m, &idx, false).unwrap().mrr;
        }
        let mean = total / 20.0;
        assert!((mean - expected).abs() < 0.35 * expected, "{mean} vs {expected}");
    }

    fn loss_at(m: &EmbeddingModel, samples: &[Sample], cfg: &TrainConfig) -> f64 {
        loss_and_gradient(m, samples, cfg).0
    }

    #[test]
    fn gradients_match_finite_differences_with_uniform_weights() {
        // temperature 0 makes the adversarial weights constant, so the
        // library loss itself is the function being differentiated
        let samples: Vec<Sample> = (0..5)
            .map(|i| Sample {
                positive: (i, i % 2, (i + 1) % 6),
                negatives: vec![(i, i % 2, (i + 3) % 6), ((i + 2) % 6, i % 2, (i + 1) % 6)],
            })
            .collect();
        for kind in ModelKind::ALL {
            for loss in [Loss::MarginRanking, Loss::SelfAdversarialSoftplus] {
                let m = init_embedding_model(kind, 4, 6, 2, 11).unwrap();
                let cfg = TrainConfig {
                    loss,
                    margin: 1.0,
                    adversarial_temperature: 0.0,
                    ..Default::default()
                };
                let (_, g) = loss_and_gradient(&m, &samples, &cfg);
                let (mut diff, mut norm) = (0.0f64, 0.0f64);
                let eps = 1e-6;
                for (table, width) in [(0, m.ent_width()), (1, m.rel_width())] {
                    let len = if table == 0 { m.entities.len() } else { m.relations.len() };
                    for i in 0..len {
                        let mut p = m.clone();
                        let mut q = m.clone();
                        if table == 0 {
                            p.entities[i] += eps;
                            q.entities[i] -= eps;
                        } else {
                            p.relations[i] += eps;
                            q.relations[i] -= eps;
                        }
                        let fd = (loss_at(&p, &samples, &cfg) - loss_at(&q, &samples, &cfg)) / (2.0 * eps);
                        let rows = if table == 0 { &g.entities } else { &g.relations };
                        let an = rows.get(&(i / width)).map_or(0.0, |r| r[i % width]);
                        diff += (fd - an).powi(2);
                        norm += an * an;
                    }
                }
                let rel = diff.sqrt() / norm.sqrt().max(1e-12);
                assert!(rel < 1e-5, "{kind:?} {loss:?}: {rel}");
            }
        }
    }

    #[test]
    fn small_steps_reduce_loss_on_a_fixed_batch() {
        let idx = IndexedSplit::from_textbench(&toy_split(8, 2)).unwrap();
        for kind in ModelKind::ALL {
            let m = init_embedding_model(kind, 8, 8, 3, 5).unwrap();
            let cfg = TrainConfig {
                learning_rate: 1e-3,
                optimizer: Optimizer::Sgd,
                ..Default::default()
            };
            let mut trainer = Trainer::new(m, cfg).unwrap();
            let known: KnownTriples = idx.train.iter().copied().collect();
            let batch: Vec<Triple> = idx.train.iter().take(5).copied().collect();
            let samples: Vec<Sample> = batch
                .iter()
                .map(|&p| Sample {
                    positive: p,
                    negatives: trainer.sample_negatives(p, &known),
                })
                .collect();
            let start = loss_at(&trainer.model, &samples, &cfg);
            let mut losses = vec![start];
            for _ in 0..50 {
                let (_, g) = loss_and_gradient(&trainer.model, &samples, &cfg);
                trainer.apply(&g);
                losses.push(loss_at(&trainer.model, &samples, &cfg));
            }
            // least-squares slope over the 50 steps
            let n = losses.len() as f64;
            let mx = (n - 1.0) / 2.0;
            let my = losses.iter().sum::<f64>() / n;
            let slope = losses
                .iter()
                .enumerate()
                .map(|(i, y)| (i as f64 - mx) * (y - my))
                .sum::<f64>()
                / losses.iter().enumerate().map(|(i, _)| (i as f64 - mx).powi(2)).sum::<f64>();
            assert!(slope <= 0.0, "{kind:?} slope {slope}");
            assert!(losses[50] <= start);
        }
    }

    #[test]
    fn rotate_unit_modulus_and_transe_bound() {
        let m = init_embedding_model(ModelKind::RotatE, 5, 4, 2, 3).unwrap();
        for &theta in &m.relations {
            let (s, c) = theta.sin_cos();
            assert!(((s * s + c * c).sqrt() - 1.0).abs() < 1e-12);
        }
        let t = init_embedding_model(ModelKind::TransE, 5, 4, 2, 3).unwrap();
        for h in 0..4 {
            for tl in 0..4 {
                assert!(t.score_triplet(h, 1, tl).unwrap() <= 0.0);
            }
        }
    }

    #[test]
    fn vocabulary_mismatch_is_rejected() {
        let idx = IndexedSplit::from_textbench(&toy_split(8, 0)).unwrap();
        let m = init_embedding_model(ModelKind::TransE, 4, 7, 3, 0).unwrap();
        assert!(matches!(evaluate_link_prediction(&m, &idx, true), Err(Error::VocabMismatch(_))));
    }
}
