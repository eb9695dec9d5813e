//! Synthetic multi-domain universe, frozen paired teacher, offline target
//! cache and the round-robin batch scheduler.
//!
//! A universe is a three-level Gaussian hierarchy: domain centers, class
//! centers around them and samples around the class centers. Class offsets can
//! be confined to a random low-rank subspace per domain, which is what makes a
//! domain "fine-grained": retrieval needs the encoder to pick out that subspace
//! from isotropic noise, and what is learned on train classes transfers to the
//! unseen test classes of the same domain.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{forward_batch, init_params, EmbeddingVector, EncoderConfig, ParameterVector};
use crate::error::{Error, Result};
use crate::losses::StepKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniverseConfig {
    pub num_domains: usize,
    pub classes_per_domain: usize,
    /// Fraction of each domain's classes on the training side; the rest are test classes.
    pub train_class_fraction: f64,
    /// Fraction of the training-side classes held out for validation retrieval.
    pub val_class_fraction: f64,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub sigma_domain: f64,
    pub sigma_class: f64,
    pub sigma_noise: f64,
    /// Width of the block of input features owned by each domain; 0 puts every
    /// domain in the full input space.
    pub domain_block_dim: usize,
    /// Input features used by every domain, placed after the domain blocks.
    /// Only meaningful with `domain_block_dim > 0`.
    pub shared_block_dim: usize,
    /// Rank of each domain's class-offset subspace; 0 means isotropic offsets.
    pub class_subspace_dim: usize,
    pub seed: u64,
    /// Fraction of each evaluation class's samples placed on the query side.
    pub query_fraction: f64,
    /// Domains standing in for generic data; the first is "generic A", the second "generic B".
    pub generic_domain_ids: Vec<usize>,
    pub teacher_seed: u64,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        UniverseConfig {
            num_domains: 5,
            classes_per_domain: 120,
            train_class_fraction: 0.5,
            val_class_fraction: 0.2,
            samples_per_class: 25,
            input_dim: 80,
            sigma_domain: 0.5,
            sigma_class: 1.0,
            sigma_noise: 0.5,
            domain_block_dim: 12,
            shared_block_dim: 20,
            class_subspace_dim: 8,
            seed: 0,
            query_fraction: 0.5,
            generic_domain_ids: vec![0, 1],
            teacher_seed: 1,
        }
    }
}

impl UniverseConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.num_domains < 2 {
            return bad("num_domains must be >= 2".into());
        }
        if self.input_dim == 0 || self.samples_per_class < 2 {
            return bad("input_dim must be >= 1 and samples_per_class >= 2".into());
        }
        for (name, v) in [
            ("train_class_fraction", self.train_class_fraction),
            ("query_fraction", self.query_fraction),
            ("val_class_fraction", self.val_class_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        for (name, v) in [("sigma_domain", self.sigma_domain), ("sigma_class", self.sigma_class)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.sigma_noise >= 0.0 && self.sigma_noise.is_finite()) {
            return bad(format!("sigma_noise must be >= 0, got {}", self.sigma_noise));
        }
        if self.domain_block_dim == 0 && self.shared_block_dim > 0 {
            return bad("shared_block_dim requires domain_block_dim > 0".into());
        }
        if self.domain_block_dim * self.num_domains + self.shared_block_dim > self.input_dim {
            return bad("domain and shared blocks exceed input_dim".into());
        }
        if self.class_subspace_dim > self.domain_width() {
            return bad("class_subspace_dim exceeds the per-domain input width".into());
        }
        if self.generic_domain_ids.is_empty() {
            return bad("at least one generic domain is required".into());
        }
        let unique: HashSet<_> = self.generic_domain_ids.iter().collect();
        if unique.len() != self.generic_domain_ids.len()
            || self.generic_domain_ids.iter().any(|&d| d >= self.num_domains)
        {
            return bad("generic_domain_ids must be distinct valid domain ids".into());
        }
        if unique.len() >= self.num_domains {
            return bad("generic domains must leave at least one fine-tuning domain".into());
        }
        let (train, val, test) = self.class_counts();
        if train == 0 || val == 0 || test == 0 {
            return bad(format!(
                "class split leaves an empty side (train {train}, val {val}, test {test})"
            ));
        }
        Ok(())
    }

    /// `(trained, validation, test)` class counts per domain.
    pub fn class_counts(&self) -> (usize, usize, usize) {
        let c = self.classes_per_domain;
        let train_side = ((c as f64 * self.train_class_fraction).round() as usize).min(c);
        let val = (train_side as f64 * self.val_class_fraction).round() as usize;
        let val = val.min(train_side);
        (train_side - val, val, c - train_side)
    }

    /// Number of input features a single domain's samples occupy.
    pub fn domain_width(&self) -> usize {
        if self.domain_block_dim == 0 {
            self.input_dim
        } else {
            self.domain_block_dim + self.shared_block_dim
        }
    }

    /// Domains that are not generic, i.e. fine-tuning candidates.
    pub fn fine_grained_domains(&self) -> Vec<usize> {
        (0..self.num_domains).filter(|d| !self.generic_domain_ids.contains(d)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValQuery,
    ValIndex,
    TestQuery,
    TestIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub x: Vec<f64>,
    pub domain_id: usize,
    /// Unique across domains.
    pub class_id: u64,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct SyntheticUniverse {
    pub config: UniverseConfig,
    samples: Vec<Sample>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            g * scale
        })
        .collect()
}

fn orthonormal_basis(rng: &mut ChaCha8Rng, dim: usize, rank: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v = gaussian_vec(rng, dim, 1.0);
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(b).for_each(|(a, b)| *a -= proj * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
        }
    }
    basis
}

fn eval_split_sizes(n: usize, query_fraction: f64) -> usize {
    ((n as f64 * query_fraction).round() as usize).clamp(1, n - 1)
}

pub fn generate_universe(config: &UniverseConfig) -> Result<SyntheticUniverse> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.domain_width();
    let c = config.classes_per_domain;
    let (n_train, n_val, _) = config.class_counts();
    let mut samples = Vec::with_capacity(config.num_domains * c * config.samples_per_class);

    let shared_start = config.domain_block_dim * config.num_domains;
    for d in 0..config.num_domains {
        let columns: Vec<usize> = if config.domain_block_dim == 0 {
            (0..dim).collect()
        } else {
            let own = d * config.domain_block_dim..(d + 1) * config.domain_block_dim;
            own.chain(shared_start..shared_start + config.shared_block_dim).collect()
        };
        let center = gaussian_vec(&mut rng, dim, config.sigma_domain);
        let basis = match config.class_subspace_dim {
            0 => None,
            r => Some(orthonormal_basis(&mut rng, dim, r)),
        };
        let mut roles: Vec<usize> = (0..c).collect();
        roles.shuffle(&mut rng);
        let mut role_of = vec![Split::TestQuery; c];
        for (rank, &class) in roles.iter().enumerate() {
            role_of[class] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::ValQuery
            } else {
                Split::TestQuery
            };
        }

        for (class, &role) in role_of.iter().enumerate() {
            let class_id = (d * c + class) as u64;
            let offset = match &basis {
                None => gaussian_vec(&mut rng, dim, config.sigma_class),
                Some(basis) => {
                    let z = gaussian_vec(&mut rng, basis.len(), config.sigma_class);
                    let mut o = vec![0.0; dim];
                    for (b, zi) in basis.iter().zip(&z) {
                        o.iter_mut().zip(b).for_each(|(o, b)| *o += zi * b);
                    }
                    o
                }
            };
            let n = config.samples_per_class;
            let mut splits = vec![role; n];
            if role != Split::Train {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                let n_query = eval_split_sizes(n, config.query_fraction);
                let (q, i) = match role {
                    Split::ValQuery => (Split::ValQuery, Split::ValIndex),
                    _ => (Split::TestQuery, Split::TestIndex),
                };
                for (rank, &s) in order.iter().enumerate() {
                    splits[s] = if rank < n_query { q } else { i };
                }
            }
            for split in splits {
                let noise = gaussian_vec(&mut rng, dim, config.sigma_noise);
                let mut x = vec![0.0; config.input_dim];
                for (j, &col) in columns.iter().enumerate() {
                    x[col] = center[j] + offset[j] + noise[j];
                }
                samples.push(Sample {
                    id: samples.len() as u64,
                    x,
                    domain_id: d,
                    class_id,
                    split,
                });
            }
        }
    }
    Ok(SyntheticUniverse { config: config.clone(), samples })
}

impl SyntheticUniverse {
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Sample ids equal their position.
    pub fn sample(&self, id: u64) -> &Sample {
        &self.samples[id as usize]
    }

    pub fn select(&self, domain: usize, splits: &[Split]) -> Vec<&Sample> {
        self.samples
            .iter()
            .filter(|s| s.domain_id == domain && splits.contains(&s.split))
            .collect()
    }

    pub fn inputs(&self, ids: &[u64]) -> Array2<f64> {
        let dim = self.config.input_dim;
        let mut out = Array2::zeros((ids.len(), dim));
        for (mut row, &id) in out.outer_iter_mut().zip(ids) {
            row.assign(&ndarray::ArrayView1::from(&self.sample(id).x[..]));
        }
        out
    }

    /// Sorted ids of the classes trained on in `domain`.
    pub fn train_classes(&self, domain: usize) -> Vec<u64> {
        let mut classes: Vec<u64> = self
            .select(domain, &[Split::Train])
            .iter()
            .map(|s| s.class_id)
            .collect();
        classes.sort_unstable();
        classes.dedup();
        classes
    }

    pub fn generic_a(&self) -> usize {
        self.config.generic_domain_ids[0]
    }
}

/// Frozen paired-modality encoder: parameters depend only on the teacher seed.
#[derive(Debug, Clone)]
pub struct Teacher {
    config: EncoderConfig,
    params: ParameterVector,
}

impl Teacher {
    pub fn new(teacher_seed: u64, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let config = config.with_seed(teacher_seed);
        let params = init_params(&config);
        Ok(Teacher { config, params })
    }

    pub fn embed_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        forward_batch(&self.params, &self.config, x)
    }
}

pub fn teacher_embed(teacher_seed: u64, config: &EncoderConfig, x: &[f64]) -> Result<EmbeddingVector> {
    let teacher = Teacher::new(teacher_seed, config)?;
    crate::encoder::forward(&teacher.params, &teacher.config, x)
}

/// First 8 bytes (little-endian) of the SHA-256 of the parameter bytes.
pub fn params_digest(params: &ParameterVector) -> u64 {
    let mut hasher = Sha256::new();
    for v in params.as_slice() {
        hasher.update(v.to_le_bytes());
    }
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest has 32 bytes"))
}

/// Embeddings of the pretrained encoder, computed once before fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetEmbeddingCache {
    pub ids: Vec<u64>,
    pub targets: Array2<f64>,
    pub source_checkpoint_digest: u64,
}

const TARGETS_MAGIC: &[u8; 8] = b"INFTGT01";

impl TargetEmbeddingCache {
    /// Row of each id.
    pub fn row_index(&self) -> HashMap<u64, usize> {
        self.ids.iter().enumerate().map(|(row, &id)| (id, row)).collect()
    }

    /// `targets.bin`: magic, u64 count, u32 D, u64 digest, then count x (u64 id, D x f64).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TARGETS_MAGIC)?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        w.write_all(&(self.targets.ncols() as u32).to_le_bytes())?;
        w.write_all(&self.source_checkpoint_digest.to_le_bytes())?;
        for (id, row) in self.ids.iter().zip(self.targets.outer_iter()) {
            w.write_all(&id.to_le_bytes())?;
            for v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        if &word != TARGETS_MAGIC {
            return Err(Error::Format("targets file: bad magic".into()));
        }
        r.read_exact(&mut word)?;
        let count = u64::from_le_bytes(word) as usize;
        let mut half = [0u8; 4];
        r.read_exact(&mut half)?;
        let dim = u32::from_le_bytes(half) as usize;
        r.read_exact(&mut word)?;
        let digest = u64::from_le_bytes(word);
        let mut ids = Vec::with_capacity(count);
        let mut values = Vec::with_capacity(count * dim);
        for _ in 0..count {
            r.read_exact(&mut word)?;
            ids.push(u64::from_le_bytes(word));
            for _ in 0..dim {
                r.read_exact(&mut word)?;
                values.push(f64::from_le_bytes(word));
            }
        }
        let targets = Array2::from_shape_vec((count, dim), values)
            .map_err(|e| Error::Format(format!("targets file: {e}")))?;
        let mut seen = HashSet::with_capacity(count);
        if let Some(&dup) = ids.iter().find(|&&id| !seen.insert(id)) {
            return Err(Error::DuplicateId(dup));
        }
        Ok(TargetEmbeddingCache { ids, targets, source_checkpoint_digest: digest })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Embeds `samples` with `params`; rows follow the order of `samples`.
pub fn extract_targets(
    params: &ParameterVector,
    config: &EncoderConfig,
    samples: &[&Sample],
) -> Result<TargetEmbeddingCache> {
    let ids: Vec<u64> = samples.iter().map(|s| s.id).collect();
    let mut seen = HashSet::with_capacity(ids.len());
    if let Some(&dup) = ids.iter().find(|&&id| !seen.insert(id)) {
        return Err(Error::DuplicateId(dup));
    }
    let mut x = Array2::zeros((samples.len(), config.input_dim));
    for (mut row, s) in x.outer_iter_mut().zip(samples) {
        if s.x.len() != config.input_dim {
            return Err(Error::ShapeMismatch(format!("sample {} has wrong input width", s.id)));
        }
        row.assign(&ndarray::ArrayView1::from(&s.x[..]));
    }
    let targets = forward_batch(params, config, x.view()).map_err(|e| match e {
        Error::DegenerateEmbedding { row, norm } => Error::DegenerateSample { id: ids[row], norm },
        other => other,
    })?;
    Ok(TargetEmbeddingCache { ids, targets, source_checkpoint_digest: params_digest(params) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledBatch {
    pub kind: StepKind,
    pub ids: Vec<u64>,
}

/// One epoch of strictly alternating domain / generic batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSchedule {
    pub epoch_seed: u64,
    pub batches: Vec<ScheduledBatch>,
}

const GENERIC_STREAM_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Round-robin interleaving of a labeled domain set with a generic set.
///
/// Epoch `e` shuffles the domain side with seed `seed + e` and cuts it into
/// `ceil(n / B)` batches; each domain batch is followed by a generic batch of
/// size `B` drawn from an independent stream that reshuffles on wraparound.
pub struct RoundRobinScheduler {
    domain: Vec<u64>,
    generic: Vec<u64>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    generic_rng: ChaCha8Rng,
    generic_order: Vec<u64>,
    generic_cursor: usize,
}

impl RoundRobinScheduler {
    pub fn new(domain: Vec<u64>, generic: Vec<u64>, batch_size: usize, seed: u64) -> Result<Self> {
        if domain.is_empty() {
            return Err(Error::EmptyDataset("domain training set".into()));
        }
        if generic.is_empty() {
            return Err(Error::EmptyDataset("generic set".into()));
        }
        if batch_size == 0 {
            return Err(Error::ConfigInvalid("batch size must be >= 1".into()));
        }
        let generic_order = generic.clone();
        Ok(RoundRobinScheduler {
            domain,
            generic,
            batch_size,
            seed,
            epoch: 0,
            generic_rng: ChaCha8Rng::seed_from_u64(seed ^ GENERIC_STREAM_SALT),
            generic_order,
            generic_cursor: usize::MAX,
        })
    }

    fn next_generic(&mut self) -> u64 {
        if self.generic_cursor >= self.generic_order.len() {
            self.generic_order.clone_from(&self.generic);
            self.generic_order.shuffle(&mut self.generic_rng);
            self.generic_cursor = 0;
        }
        let id = self.generic_order[self.generic_cursor];
        self.generic_cursor += 1;
        id
    }

    pub fn next_epoch(&mut self) -> BatchSchedule {
        let epoch_seed = self.seed.wrapping_add(self.epoch);
        self.epoch += 1;
        let mut order = self.domain.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut batches = Vec::with_capacity(2 * order.len().div_ceil(self.batch_size));
        for chunk in order.chunks(self.batch_size) {
            batches.push(ScheduledBatch { kind: StepKind::Domain, ids: chunk.to_vec() });
            let ids = (0..self.batch_size).map(|_| self.next_generic()).collect();
            batches.push(ScheduledBatch { kind: StepKind::Generic, ids });
        }
        BatchSchedule { epoch_seed, batches }
    }
}

/// A single epoch schedule starting from a fresh generic stream.
pub fn round_robin_batches(
    domain_train: &[u64],
    generic_train: &[u64],
    batch_size: usize,
    epoch_seed: u64,
) -> Result<BatchSchedule> {
    let mut s =
        RoundRobinScheduler::new(domain_train.to_vec(), generic_train.to_vec(), batch_size, epoch_seed)?;
    Ok(s.next_epoch())
}
