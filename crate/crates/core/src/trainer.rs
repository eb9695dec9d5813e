//! Pretraining, prototype initialization, the interleaved fine-tuning loop,
//! weight interpolation and checkpoint files.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{params_digest, RoundRobinScheduler, Sample, Split, SyntheticUniverse, TargetEmbeddingCache, Teacher};
use crate::encoder::{
    backward_trace, check_len, forward_batch, forward_trace, gather_rows, init_params, EncoderConfig,
    ParameterVector,
};
use crate::error::{Error, Result};
use crate::losses::{domain_loss, embed_reg_loss, total_loss, Prototypes, RegWeights, StepInputs, StepKind};
use crate::metrics::{composite_score, map_at_k, RetrievalSplit};

/// Retrieval cutoff used for every mAP in the lab.
pub const MAP_K: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr_backbone: f64,
    pub lr_prototypes: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr_backbone: 3e-3,
            lr_prototypes: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 128,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::ConfigInvalid("batch_size must be >= 1".into()));
        }
        if !(self.lr_backbone >= 0.0 && self.lr_prototypes >= 0.0) {
            return Err(Error::ConfigInvalid("learning rates must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::ConfigInvalid("adam betas must lie in [0, 1) and epsilon > 0".into()));
        }
        Ok(())
    }
}

/// Adam moments of one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    config: &OptimizerConfig,
) -> Result<()> {
    check_len(params.len(), grads.len())?;
    check_len(params.len(), state.m.len())?;
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    state.step += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    Ok(())
}

/// Optimizer state for one parameter group, Adam or plain SGD.
#[derive(Debug, Clone)]
pub struct GroupOptimizer {
    config: OptimizerConfig,
    lr: f64,
    adam: AdamState,
}

impl GroupOptimizer {
    pub fn new(config: &OptimizerConfig, lr: f64, len: usize) -> Self {
        GroupOptimizer { config: config.clone(), lr, adam: AdamState::new(len) }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        match self.config.kind {
            OptimizerKind::Adam => adam_step(&mut self.adam, params, grads, self.lr, &self.config),
            OptimizerKind::Sgd => {
                check_len(params.len(), grads.len())?;
                if grads.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFiniteGradient);
                }
                params.iter_mut().zip(grads).for_each(|(p, g)| *p -= self.lr * g);
                Ok(())
            }
        }
    }
}

/// Embeds `samples` and returns one unit-norm prototype per class in `classes`:
/// the embedding of the member sample closest to the class mean embedding
/// (lowest sample id on ties).
pub fn init_prototypes(
    theta_pre: &ParameterVector,
    config: &EncoderConfig,
    samples: &[&Sample],
    classes: &[u64],
) -> Result<Prototypes> {
    let ids: Vec<u64> = samples.iter().map(|s| s.id).collect();
    let class_ids: Vec<u64> = samples.iter().map(|s| s.class_id).collect();
    let x = stack_inputs(samples, config.input_dim)?;
    prototypes_from_inputs(theta_pre, config, &ids, x.view(), &class_ids, classes)
}

fn prototypes_from_inputs(
    theta_pre: &ParameterVector,
    config: &EncoderConfig,
    ids: &[u64],
    x: ArrayView2<f64>,
    class_ids: &[u64],
    classes: &[u64],
) -> Result<Prototypes> {
    let emb = forward_batch(theta_pre, config, x)?;
    let mut members: HashMap<u64, Vec<usize>> = HashMap::new();
    for (row, &c) in class_ids.iter().enumerate() {
        members.entry(c).or_default().push(row);
    }
    let mut rows = Array2::zeros((classes.len(), config.embed_dim));
    for (mut proto, &class) in rows.outer_iter_mut().zip(classes) {
        let mut group = members.get(&class).cloned().ok_or(Error::EmptyClass(class))?;
        group.sort_by_key(|&r| ids[r]);
        let mut mean = ndarray::Array1::zeros(config.embed_dim);
        for &r in &group {
            mean += &emb.row(r);
        }
        mean /= group.len() as f64;
        let mut best = group[0];
        let mut best_sim = f64::NEG_INFINITY;
        for &r in &group {
            let sim = emb.row(r).dot(&mean);
            if sim > best_sim {
                best = r;
                best_sim = sim;
            }
        }
        proto.assign(&emb.row(best));
    }
    Prototypes::from_rows(rows)
}

fn stack_inputs(samples: &[&Sample], dim: usize) -> Result<Array2<f64>> {
    let mut x = Array2::zeros((samples.len(), dim));
    for (mut row, s) in x.outer_iter_mut().zip(samples) {
        if s.x.len() != dim {
            return Err(Error::ShapeMismatch(format!("sample {} has wrong input width", s.id)));
        }
        row.assign(&ndarray::ArrayView1::from(&s.x[..]));
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Weight of the alignment term pulling embeddings toward the frozen teacher.
    pub align_weight: f64,
    pub logit_scale: f64,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            align_weight: 1.0,
            logit_scale: 16.0,
            seed: 3,
            optimizer: OptimizerConfig { lr_backbone: 3e-3, lr_prototypes: 3e-2, ..OptimizerConfig::default() },
        }
    }
}

/// Synthesizes the "pretrained" checkpoint: cosine-classifier training on the
/// train classes of every domain except `target_domain`, plus
/// `align_weight * ||f(x) - g(x)||^2` toward the frozen teacher `g`.
pub fn pretrain(
    universe: &SyntheticUniverse,
    teacher: &Teacher,
    target_domain: usize,
    encoder: &EncoderConfig,
    config: &PretrainConfig,
) -> Result<ParameterVector> {
    encoder.validate()?;
    config.optimizer.validate()?;
    if config.align_weight.is_nan() || config.align_weight < 0.0 {
        return Err(Error::ConfigInvalid("align_weight must be >= 0".into()));
    }
    if encoder.input_dim != universe.config.input_dim {
        return Err(Error::ConfigInvalid("encoder input_dim differs from the universe".into()));
    }
    let samples: Vec<&Sample> = universe
        .samples()
        .iter()
        .filter(|s| s.domain_id != target_domain && s.split == Split::Train)
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptyDataset("pretraining set".into()));
    }
    let mut classes: Vec<u64> = samples.iter().map(|s| s.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let label_of: HashMap<u64, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    let mut theta = init_params(encoder);
    if config.epochs == 0 {
        return Ok(theta);
    }
    let mut prototypes = init_prototypes(&theta, encoder, &samples, &classes)?;
    let x_all = stack_inputs(&samples, encoder.input_dim)?;
    let teacher_all = teacher.embed_batch(x_all.view())?;
    let labels_all: Vec<usize> = samples.iter().map(|s| label_of[&s.class_id]).collect();

    let opt = &config.optimizer;
    let mut backbone_opt = GroupOptimizer::new(opt, opt.lr_backbone, theta.len());
    let mut proto_opt = GroupOptimizer::new(opt, opt.lr_prototypes, prototypes.as_slice().len());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64)));
        for rows in order.chunks(opt.batch_size) {
            step += 1;
            let x = gather_rows(x_all.view(), rows);
            let labels: Vec<usize> = rows.iter().map(|&r| labels_all[r]).collect();
            let trace = forward_trace(&theta, encoder, x.view())?;
            let dl = domain_loss(trace.embeddings.view(), &labels, &prototypes, config.logit_scale)?;
            let mut upstream = dl.grad_embeddings;
            let mut loss = dl.loss;
            if config.align_weight > 0.0 {
                let targets = gather_rows(teacher_all.view(), rows);
                let (align, grad) = embed_reg_loss(trace.embeddings.view(), targets.view())?;
                upstream.scaled_add(config.align_weight, &grad);
                loss += config.align_weight * align;
            }
            if !loss.is_finite() {
                return Err(Error::Divergence { step, what: "pretraining loss".into() });
            }
            let grad = backward_trace(&theta, encoder, &trace, upstream.view())?;
            backbone_opt.step(theta.as_mut_slice(), grad.as_slice())?;
            proto_opt.step(
                prototypes.as_mut_slice(),
                dl.grad_prototypes.as_slice().expect("standard layout"),
            )?;
            prototypes.renormalize()?;
        }
    }
    if !theta.is_finite() {
        return Err(Error::Divergence { step, what: "non-finite pretrained parameters".into() });
    }
    Ok(theta)
}

/// Source of the inputs used on generic (distillation) steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetSource {
    GenericA,
    GenericB,
    InDomain,
}

impl TargetSource {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetSource::GenericA => "generic-a",
            TargetSource::GenericB => "generic-b",
            TargetSource::InDomain => "in-domain",
        }
    }
}

impl std::str::FromStr for TargetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generic-a" => Ok(TargetSource::GenericA),
            "generic-b" => Ok(TargetSource::GenericB),
            "in-domain" => Ok(TargetSource::InDomain),
            other => Err(Error::ConfigInvalid(format!("unknown target source '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lambda_emb: f64,
    pub lambda_theta: f64,
    pub logit_scale: f64,
    pub target_source: TargetSource,
    /// Evaluation period in schedule steps (domain and generic batches both count).
    pub eval_every: usize,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lambda_emb: 0.0,
            lambda_theta: 0.0,
            logit_scale: 16.0,
            target_source: TargetSource::GenericA,
            eval_every: 12,
            max_steps: 240,
            seed: 4,
        }
    }
}

impl FinetuneConfig {
    pub fn weights(&self) -> RegWeights {
        RegWeights {
            lambda_emb: self.lambda_emb,
            lambda_theta: self.lambda_theta,
            logit_scale: self.logit_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if self.eval_every == 0 || self.max_steps < self.eval_every {
            return Err(Error::ConfigInvalid("need eval_every >= 1 and max_steps >= eval_every".into()));
        }
        Ok(())
    }
}

/// Embedded query/index sides for one validation or test retrieval set.
#[derive(Debug, Clone)]
pub struct EvalSet {
    query_x: Array2<f64>,
    query_labels: Vec<u64>,
    query_ids: Vec<u64>,
    index_x: Array2<f64>,
    index_labels: Vec<u64>,
    index_ids: Vec<u64>,
}

impl EvalSet {
    pub fn new(universe: &SyntheticUniverse, domain: usize, query: Split, index: Split) -> Result<Self> {
        let q = universe.select(domain, &[query]);
        let i = universe.select(domain, &[index]);
        let dim = universe.config.input_dim;
        Ok(EvalSet {
            query_x: stack_inputs(&q, dim)?,
            query_labels: q.iter().map(|s| s.class_id).collect(),
            query_ids: q.iter().map(|s| s.id).collect(),
            index_x: stack_inputs(&i, dim)?,
            index_labels: i.iter().map(|s| s.class_id).collect(),
            index_ids: i.iter().map(|s| s.id).collect(),
        })
    }

    pub fn map_at_k(&self, params: &ParameterVector, config: &EncoderConfig, k: usize) -> Result<f64> {
        let split = RetrievalSplit {
            query_embeddings: forward_batch(params, config, self.query_x.view())?,
            query_labels: self.query_labels.clone(),
            query_ids: self.query_ids.clone(),
            index_embeddings: forward_batch(params, config, self.index_x.view())?,
            index_labels: self.index_labels.clone(),
            index_ids: self.index_ids.clone(),
        };
        Ok(map_at_k(&split, k)?.map_at_k)
    }
}

/// Composite validation: in-domain val classes of the target domain and the
/// held-out val classes of generic domain A.
#[derive(Debug, Clone)]
pub struct Validator {
    in_domain: EvalSet,
    out_of_domain: EvalSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValScores {
    pub in_domain: f64,
    pub ood: f64,
    pub composite: f64,
}

impl Validator {
    pub fn new(universe: &SyntheticUniverse, target_domain: usize) -> Result<Self> {
        Ok(Validator {
            in_domain: EvalSet::new(universe, target_domain, Split::ValQuery, Split::ValIndex)?,
            out_of_domain: EvalSet::new(universe, universe.generic_a(), Split::ValQuery, Split::ValIndex)?,
        })
    }

    pub fn score(&self, params: &ParameterVector, config: &EncoderConfig) -> Result<ValScores> {
        let in_domain = self.in_domain.map_at_k(params, config, MAP_K)?;
        let ood = self.out_of_domain.map_at_k(params, config, MAP_K)?;
        Ok(ValScores { in_domain, ood, composite: composite_score(in_domain, ood) })
    }
}

/// Everything a fine-tuning run needs besides the pretrained weights and cache.
#[derive(Debug, Clone)]
pub struct FinetuneTask {
    pub encoder: EncoderConfig,
    pub target_domain: usize,
    pub classes: Vec<u64>,
    domain_ids: Vec<u64>,
    domain_x: Array2<f64>,
    domain_labels: Vec<usize>,
    generic_ids: Vec<u64>,
    generic_x: Array2<f64>,
    pub validator: Validator,
}

impl FinetuneTask {
    pub fn new(
        universe: &SyntheticUniverse,
        encoder: &EncoderConfig,
        target_domain: usize,
        source: TargetSource,
    ) -> Result<Self> {
        encoder.validate()?;
        if target_domain >= universe.config.num_domains {
            return Err(Error::ConfigInvalid(format!("target domain {target_domain} does not exist")));
        }
        let domain = universe.select(target_domain, &[Split::Train]);
        let classes = universe.train_classes(target_domain);
        let label_of: HashMap<u64, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let generic = generic_samples(universe, target_domain, source)?;
        Ok(FinetuneTask {
            encoder: encoder.clone(),
            target_domain,
            domain_ids: domain.iter().map(|s| s.id).collect(),
            domain_x: stack_inputs(&domain, encoder.input_dim)?,
            domain_labels: domain.iter().map(|s| label_of[&s.class_id]).collect(),
            classes,
            generic_ids: generic.iter().map(|s| s.id).collect(),
            generic_x: stack_inputs(&generic, encoder.input_dim)?,
            validator: Validator::new(universe, target_domain)?,
        })
    }

    /// Number of domain batches per epoch.
    pub fn domain_batches(&self, batch_size: usize) -> usize {
        self.domain_ids.len().div_ceil(batch_size)
    }

    pub fn generic_ids(&self) -> &[u64] {
        &self.generic_ids
    }
}

/// Inputs of the generic (distillation) steps for a given source.
pub fn generic_samples(
    universe: &SyntheticUniverse,
    target_domain: usize,
    source: TargetSource,
) -> Result<Vec<&Sample>> {
    let generic = &universe.config.generic_domain_ids;
    let domain = match source {
        TargetSource::GenericA => generic[0],
        TargetSource::GenericB => *generic
            .get(1)
            .ok_or_else(|| Error::ConfigInvalid("target source generic-b needs two generic domains".into()))?,
        TargetSource::InDomain => target_domain,
    };
    Ok(universe.select(domain, &[Split::Train]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub in_domain: f64,
    pub ood: f64,
    pub composite: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterVector,
    pub prototypes: Prototypes,
    pub step: usize,
    pub composite_val: f64,
    pub in_domain_val: f64,
    pub ood_val: f64,
    /// Digest of the pretrained parameters the run started from.
    pub pretrained_digest: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub step: usize,
    pub composite_val: f64,
    pub in_domain_val: f64,
    pub ood_val: f64,
}

impl Checkpoint {
    pub fn summary(&self) -> CheckpointSummary {
        CheckpointSummary {
            step: self.step,
            composite_val: self.composite_val,
            in_domain_val: self.in_domain_val,
            ood_val: self.ood_val,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Highest composite validation score, earliest step on ties.
    pub best: Checkpoint,
    pub history: Vec<HistoryRow>,
    pub final_params: ParameterVector,
}

/// Interleaved fine-tuning with both anchors and composite-validation checkpoint selection.
pub fn finetune(
    theta_pre: &ParameterVector,
    task: &FinetuneTask,
    cache: &TargetEmbeddingCache,
    config: &FinetuneConfig,
    optimizer: &OptimizerConfig,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    optimizer.validate()?;
    let encoder = &task.encoder;
    theta_pre.check_for(encoder)?;
    let expected = params_digest(theta_pre);
    if cache.source_checkpoint_digest != expected {
        return Err(Error::CacheMismatch { expected, actual: cache.source_checkpoint_digest });
    }
    let cache_rows = cache.row_index();
    let target_rows: HashMap<u64, usize> = task
        .generic_ids
        .iter()
        .map(|id| {
            cache_rows.get(id).map(|&r| (*id, r)).ok_or_else(|| {
                Error::ConfigInvalid(format!("target cache lacks generic sample {id}"))
            })
        })
        .collect::<Result<_>>()?;
    let domain_pos: HashMap<u64, usize> =
        task.domain_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let generic_pos: HashMap<u64, usize> =
        task.generic_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let weights = config.weights();
    let generic_active = weights.lambda_emb != 0.0 || weights.lambda_theta != 0.0;
    let mut theta = theta_pre.clone();
    let domain_classes: Vec<u64> = task.domain_labels.iter().map(|&l| task.classes[l]).collect();
    let mut prototypes = prototypes_from_inputs(
        theta_pre,
        encoder,
        &task.domain_ids,
        task.domain_x.view(),
        &domain_classes,
        &task.classes,
    )?;

    let mut backbone_opt = GroupOptimizer::new(optimizer, optimizer.lr_backbone, theta.len());
    let mut proto_opt = GroupOptimizer::new(optimizer, optimizer.lr_prototypes, prototypes.as_slice().len());
    let mut scheduler = RoundRobinScheduler::new(
        task.domain_ids.clone(),
        task.generic_ids.clone(),
        optimizer.batch_size,
        config.seed,
    )?;

    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut step = 0;
    while step < config.max_steps {
        let schedule = scheduler.next_epoch();
        for batch in &schedule.batches {
            if step == config.max_steps {
                break;
            }
            step += 1;
            match batch.kind {
                StepKind::Domain => {
                    let rows: Vec<usize> = batch.ids.iter().map(|id| domain_pos[id]).collect();
                    let x = gather_rows(task.domain_x.view(), &rows);
                    let labels: Vec<usize> = rows.iter().map(|&r| task.domain_labels[r]).collect();
                    let inputs = StepInputs::Domain { x: x.view(), labels: &labels, prototypes: &prototypes };
                    let out = total_loss(encoder, &theta, theta_pre, &inputs, &weights)?;
                    check_finite(out.loss, step)?;
                    let grad_p = out.grad_prototypes.expect("domain step yields prototype gradient");
                    backbone_opt.step(theta.as_mut_slice(), out.grad_params.as_slice())?;
                    proto_opt.step(prototypes.as_mut_slice(), grad_p.as_slice().expect("standard layout"))?;
                    prototypes.renormalize()?;
                }
                StepKind::Generic if generic_active => {
                    let rows: Vec<usize> = batch.ids.iter().map(|id| generic_pos[id]).collect();
                    let x = gather_rows(task.generic_x.view(), &rows);
                    let t_rows: Vec<usize> = batch.ids.iter().map(|id| target_rows[id]).collect();
                    let targets = gather_rows(cache.targets.view(), &t_rows);
                    let inputs = StepInputs::Generic { x: x.view(), targets: targets.view() };
                    let out = total_loss(encoder, &theta, theta_pre, &inputs, &weights)?;
                    check_finite(out.loss, step)?;
                    backbone_opt.step(theta.as_mut_slice(), out.grad_params.as_slice())?;
                }
                // Both weights off: the generic step is a no-op, optimizer state included.
                StepKind::Generic => {}
            }
            if step % config.eval_every == 0 || step == config.max_steps {
                let scores = task.validator.score(&theta, encoder)?;
                history.push(HistoryRow {
                    step,
                    in_domain: scores.in_domain,
                    ood: scores.ood,
                    composite: scores.composite,
                });
                if best.as_ref().is_none_or(|b| scores.composite > b.composite_val) {
                    best = Some(Checkpoint {
                        params: theta.clone(),
                        prototypes: prototypes.clone(),
                        step,
                        composite_val: scores.composite,
                        in_domain_val: scores.in_domain,
                        ood_val: scores.ood,
                        pretrained_digest: expected,
                    });
                }
            }
        }
    }
    Ok(FinetuneOutcome {
        best: best.expect("max_steps >= eval_every guarantees an evaluation"),
        history,
        final_params: theta,
    })
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, what: format!("loss {loss}") })
    }
}

/// `(1 - alpha) * theta_pre + alpha * theta_ft`, elementwise.
pub fn wise_ft(theta_pre: &ParameterVector, theta_ft: &ParameterVector, alpha: f64) -> Result<ParameterVector> {
    check_len(theta_pre.len(), theta_ft.len())?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    // Endpoints are exact copies, signed zeros included.
    if alpha == 0.0 {
        return Ok(theta_pre.clone());
    }
    if alpha == 1.0 {
        return Ok(theta_ft.clone());
    }
    Ok(ParameterVector::new(
        theta_pre
            .as_slice()
            .iter()
            .zip(theta_ft.as_slice())
            .map(|(p, f)| (1.0 - alpha) * p + alpha * f)
            .collect(),
    ))
}

pub fn write_history<W: std::io::Write>(w: W, history: &[HistoryRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in history {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_history<R: std::io::Read>(r: R) -> Result<Vec<HistoryRow>> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes `config.json`, `params.bin`, `prototypes.bin` and `history.csv` into `dir`.
pub fn save_checkpoint_dir<C: Serialize>(
    dir: &Path,
    config: &C,
    checkpoint: &Checkpoint,
    history: &[HistoryRow],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)?)?;
    checkpoint.params.save(&dir.join("params.bin"))?;
    checkpoint
        .prototypes
        .write_to(std::io::BufWriter::new(std::fs::File::create(dir.join("prototypes.bin"))?))?;
    write_history(std::fs::File::create(dir.join("history.csv"))?, history)
}

pub fn load_checkpoint_dir(dir: &Path) -> Result<(ParameterVector, Prototypes, Vec<HistoryRow>)> {
    let params = ParameterVector::load(&dir.join("params.bin"))?;
    let prototypes =
        Prototypes::read_from(std::io::BufReader::new(std::fs::File::open(dir.join("prototypes.bin"))?))?;
    let history = read_history(std::fs::File::open(dir.join("history.csv"))?)?;
    Ok((params, prototypes, history))
}

/// Validation scores of arbitrary parameters, e.g. interpolated weights.
pub fn validate_params(task: &FinetuneTask, params: &ParameterVector) -> Result<ValScores> {
    task.validator.score(params, &task.encoder)
}
