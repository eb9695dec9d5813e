//! Experiment orchestration: pretrained checkpoint and caches shared across
//! trials, the leave-one-out evaluation suite, grid search, single-axis
//! sweeps, baseline presets and table reports.
//!
//! Seed derivation: an experiment seed `s` expands to universe seed `s`,
//! teacher seed `s + 1`, encoder init seed `s + 2`, pretraining shuffle seed
//! `s + 3` and fine-tuning schedule seed `s + 4`. Every grid cell uses the
//! same fine-tuning seed, so cells differ only in their weights and adding
//! cells never changes existing ones.

use std::collections::HashMap;
use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    extract_targets, generate_universe, Split, SyntheticUniverse, TargetEmbeddingCache, Teacher, UniverseConfig,
};
use crate::encoder::{forward_batch, Activation, EncoderConfig, ParameterVector};
use crate::error::{Error, Result};
use crate::metrics::{composite_score, recall_at_1_paired};
use crate::trainer::{
    finetune, generic_samples, pretrain, validate_params, wise_ft, CheckpointSummary, EvalSet, FinetuneConfig,
    FinetuneOutcome, FinetuneTask, HistoryRow, OptimizerConfig, PretrainConfig, TargetSource, MAP_K,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lambda_emb_values: Vec<f64>,
    pub lambda_theta_values: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lambda_emb_values: vec![1e2, 1e3, 1e4, 1e5],
            lambda_theta_values: vec![1e3, 1e4, 1e5, 1e6],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_emb_values.is_empty() || self.lambda_theta_values.is_empty() {
            return Err(Error::ConfigInvalid("grid axes must be non-empty".into()));
        }
        let all = self.lambda_emb_values.iter().chain(&self.lambda_theta_values);
        if all.clone().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::ConfigInvalid("grid values must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Cells ordered by `(lambda_emb, lambda_theta)`.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        let mut emb = self.lambda_emb_values.clone();
        let mut theta = self.lambda_theta_values.clone();
        emb.sort_by(f64::total_cmp);
        emb.dedup();
        theta.sort_by(f64::total_cmp);
        theta.dedup();
        emb.iter().flat_map(|&e| theta.iter().map(move |&t| (e, t))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub universe: UniverseConfig,
    pub encoder: EncoderConfig,
    /// Fine-grained domain that is fine-tuned on; excluded from pretraining.
    pub target_domain: usize,
    pub pretrain: PretrainConfig,
    pub optimizer: OptimizerConfig,
    /// Base fine-tuning settings; trials override the weights and target source.
    pub finetune: FinetuneConfig,
    pub grid: GridSpec,
    pub wise_alphas: Vec<f64>,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let universe = UniverseConfig::default();
        let encoder = EncoderConfig {
            input_dim: universe.input_dim,
            hidden_dims: vec![512, 512],
            embed_dim: 32,
            activation: Activation::Gelu,
            init_seed: 0,
            init_scale: 1.0,
        };
        let optimizer = OptimizerConfig::default();
        let mut cfg = ExperimentConfig {
            seed: 0,
            target_domain: universe.fine_grained_domains()[0],
            universe,
            encoder,
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            optimizer,
            grid: GridSpec::default(),
            wise_alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            workers: 1,
        };
        cfg.reseed(0);
        cfg.finetune.eval_every = cfg.domain_epoch_steps();
        cfg
    }
}

impl ExperimentConfig {
    /// Applies the seed-derivation scheme to every component.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.universe.seed = seed;
        self.universe.teacher_seed = seed.wrapping_add(1);
        self.encoder.init_seed = seed.wrapping_add(2);
        self.pretrain.seed = seed.wrapping_add(3);
        self.finetune.seed = seed.wrapping_add(4);
    }

    /// Schedule steps (domain plus generic) in one pass over the target domain's train set.
    pub fn domain_epoch_steps(&self) -> usize {
        let (n_train, _, _) = self.universe.class_counts();
        2 * (n_train * self.universe.samples_per_class).div_ceil(self.optimizer.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.universe.validate()?;
        self.encoder.validate()?;
        self.optimizer.validate()?;
        self.finetune.validate()?;
        self.grid.validate()?;
        if self.encoder.input_dim != self.universe.input_dim {
            return Err(Error::ConfigInvalid("encoder input_dim must equal universe input_dim".into()));
        }
        if !self.universe.fine_grained_domains().contains(&self.target_domain) {
            return Err(Error::ConfigInvalid(format!(
                "target domain {} is not a fine-grained domain",
                self.target_domain
            )));
        }
        if self.workers == 0 {
            return Err(Error::ConfigInvalid("workers must be >= 1".into()));
        }
        if self.wise_alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::AlphaOutOfRange(
                *self.wise_alphas.iter().find(|a| !(0.0..=1.0).contains(*a)).expect("found above"),
            ));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub domain: usize,
    pub map_at_20: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedScore {
    pub domain: usize,
    /// Encoder embeddings as queries against teacher embeddings.
    pub encoder_to_teacher: f64,
    pub teacher_to_encoder: f64,
}

/// Test-time evaluation block; all scores are fractions in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBlock {
    pub in_domain: f64,
    pub ood_per_domain: Vec<DomainScore>,
    pub ood_img_avg: f64,
    pub paired: Vec<PairedScore>,
    pub paired_avg: f64,
    /// Mean of the image-image and paired out-of-domain averages.
    pub ood_overall: f64,
    pub in_out_avg: f64,
}

/// Test retrieval sets and frozen teacher embeddings, built once per universe.
#[derive(Debug, Clone)]
pub struct Evaluator {
    encoder: EncoderConfig,
    target_domain: usize,
    test_sets: Vec<(usize, EvalSet)>,
    paired: Vec<(usize, Array2<f64>, Array2<f64>)>,
}

impl Evaluator {
    pub fn new(
        universe: &SyntheticUniverse,
        teacher: &Teacher,
        encoder: &EncoderConfig,
        target_domain: usize,
    ) -> Result<Self> {
        let test_sets = (0..universe.config.num_domains)
            .map(|d| Ok((d, EvalSet::new(universe, d, Split::TestQuery, Split::TestIndex)?)))
            .collect::<Result<Vec<_>>>()?;
        let paired = universe
            .config
            .generic_domain_ids
            .iter()
            .map(|&d| {
                let ids: Vec<u64> = universe
                    .select(d, &[Split::TestQuery, Split::TestIndex])
                    .iter()
                    .map(|s| s.id)
                    .collect();
                let x = universe.inputs(&ids);
                let t = teacher.embed_batch(x.view())?;
                Ok((d, x, t))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Evaluator { encoder: encoder.clone(), target_domain, test_sets, paired })
    }

    pub fn evaluate(&self, params: &ParameterVector) -> Result<EvalBlock> {
        let mut in_domain = None;
        let mut ood_per_domain = Vec::new();
        for (d, set) in &self.test_sets {
            let score = set.map_at_k(params, &self.encoder, MAP_K)?;
            if *d == self.target_domain {
                in_domain = Some(score);
            } else {
                ood_per_domain.push(DomainScore { domain: *d, map_at_20: score });
            }
        }
        let in_domain = in_domain.ok_or_else(|| Error::ConfigInvalid("target domain missing".into()))?;
        let ood_img_avg =
            ood_per_domain.iter().map(|s| s.map_at_20).sum::<f64>() / ood_per_domain.len() as f64;
        let mut paired = Vec::new();
        for (d, x, teacher) in &self.paired {
            let emb = forward_batch(params, &self.encoder, x.view())?;
            paired.push(PairedScore {
                domain: *d,
                encoder_to_teacher: recall_at_1_paired(emb.view(), teacher.view())?,
                teacher_to_encoder: recall_at_1_paired(teacher.view(), emb.view())?,
            });
        }
        let paired_avg = paired.iter().map(|p| p.encoder_to_teacher + p.teacher_to_encoder).sum::<f64>()
            / (2 * paired.len()) as f64;
        let ood_overall = composite_score(ood_img_avg, paired_avg);
        Ok(EvalBlock {
            in_domain,
            ood_per_domain,
            ood_img_avg,
            paired,
            paired_avg,
            ood_overall,
            in_out_avg: composite_score(in_domain, ood_overall),
        })
    }
}

/// Leave-one-out evaluation of `params` with `target_domain` as the in-domain side.
pub fn evaluate_suite(
    params: &ParameterVector,
    universe: &SyntheticUniverse,
    teacher: &Teacher,
    encoder: &EncoderConfig,
    target_domain: usize,
) -> Result<EvalBlock> {
    Evaluator::new(universe, teacher, encoder, target_domain)?.evaluate(params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub label: String,
    pub lambda_emb: f64,
    pub lambda_theta: f64,
    pub target_source: TargetSource,
    pub best: CheckpointSummary,
    /// Validation scores at the last evaluated step.
    pub last: HistoryRow,
    pub evaluation: EvalBlock,
}

/// Shared state of an experiment: universe, teacher, pretrained weights and target caches.
pub struct Lab {
    pub config: ExperimentConfig,
    pub universe: SyntheticUniverse,
    pub teacher: Teacher,
    pub theta_pre: ParameterVector,
    pub evaluator: Evaluator,
    tasks: HashMap<TargetSource, (FinetuneTask, TargetEmbeddingCache)>,
}

pub struct TrialRun {
    pub result: TrialResult,
    pub outcome: FinetuneOutcome,
}

impl Lab {
    /// Generates the universe and pretrains from scratch.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let universe = generate_universe(&config.universe)?;
        let teacher = Teacher::new(config.universe.teacher_seed, &config.encoder)?;
        let theta_pre = pretrain(&universe, &teacher, config.target_domain, &config.encoder, &config.pretrain)?;
        Self::assemble(config, universe, teacher, theta_pre)
    }

    /// Reuses an existing pretrained checkpoint.
    pub fn with_pretrained(config: ExperimentConfig, theta_pre: ParameterVector) -> Result<Self> {
        config.validate()?;
        theta_pre.check_for(&config.encoder)?;
        let universe = generate_universe(&config.universe)?;
        let teacher = Teacher::new(config.universe.teacher_seed, &config.encoder)?;
        Self::assemble(config, universe, teacher, theta_pre)
    }

    fn assemble(
        config: ExperimentConfig,
        universe: SyntheticUniverse,
        teacher: Teacher,
        theta_pre: ParameterVector,
    ) -> Result<Self> {
        let mut sources = vec![TargetSource::GenericA, TargetSource::InDomain];
        if config.universe.generic_domain_ids.len() > 1 {
            sources.push(TargetSource::GenericB);
        }
        let mut tasks = HashMap::new();
        for source in sources {
            let task = FinetuneTask::new(&universe, &config.encoder, config.target_domain, source)?;
            let samples = generic_samples(&universe, config.target_domain, source)?;
            let cache = extract_targets(&theta_pre, &config.encoder, &samples)?;
            tasks.insert(source, (task, cache));
        }
        let evaluator = Evaluator::new(&universe, &teacher, &config.encoder, config.target_domain)?;
        Ok(Lab { config, universe, teacher, theta_pre, evaluator, tasks })
    }

    pub fn task(&self, source: TargetSource) -> Result<&FinetuneTask> {
        Ok(&self.entry(source)?.0)
    }

    pub fn cache(&self, source: TargetSource) -> Result<&TargetEmbeddingCache> {
        Ok(&self.entry(source)?.1)
    }

    fn entry(&self, source: TargetSource) -> Result<&(FinetuneTask, TargetEmbeddingCache)> {
        self.tasks
            .get(&source)
            .ok_or_else(|| Error::ConfigInvalid(format!("target source {} unavailable", source.as_str())))
    }

    /// Evaluation of the pretrained weights; the reference for every delta.
    pub fn reference(&self) -> Result<EvalBlock> {
        self.evaluator.evaluate(&self.theta_pre)
    }

    pub fn finetune_config(&self, lambda_emb: f64, lambda_theta: f64, source: TargetSource) -> FinetuneConfig {
        FinetuneConfig { lambda_emb, lambda_theta, target_source: source, ..self.config.finetune.clone() }
    }

    pub fn run_trial(&self, label: &str, config: &FinetuneConfig) -> Result<TrialRun> {
        let (task, cache) = self.entry(config.target_source)?;
        let outcome = finetune(&self.theta_pre, task, cache, config, &self.config.optimizer)?;
        let evaluation = self.evaluator.evaluate(&outcome.best.params)?;
        Ok(TrialRun {
            result: TrialResult {
                label: label.to_string(),
                lambda_emb: config.lambda_emb,
                lambda_theta: config.lambda_theta,
                target_source: config.target_source,
                best: outcome.best.summary(),
                last: outcome.history.last().cloned().expect("finetune logs at least the final step"),
                evaluation,
            },
            outcome,
        })
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| Error::ConfigInvalid(format!("worker pool: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub lambda_emb: f64,
    pub lambda_theta: f64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub winner: TrialResult,
    /// Successful cells ordered by `(lambda_emb, lambda_theta)`.
    pub all: Vec<TrialResult>,
    pub failures: Vec<CellFailure>,
}

/// Index of the highest best-checkpoint composite; the earliest entry wins ties.
pub fn select_winner(results: &[TrialResult]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in results.iter().enumerate() {
        if best.is_none_or(|b| r.best.composite_val > results[b].best.composite_val) {
            best = Some(i);
        }
    }
    best
}

pub fn grid_search(lab: &Lab, spec: &GridSpec, source: TargetSource, label: &str) -> Result<GridOutcome> {
    spec.validate()?;
    let cells = spec.cells();
    let runs: Vec<(f64, f64, Result<TrialResult>)> = lab.pool()?.install(|| {
        cells
            .par_iter()
            .map(|&(e, t)| {
                let cfg = lab.finetune_config(e, t, source);
                (e, t, lab.run_trial(label, &cfg).map(|run| run.result))
            })
            .collect()
    });
    let mut all = Vec::new();
    let mut failures = Vec::new();
    let mut first_error = None;
    for (lambda_emb, lambda_theta, run) in runs {
        match run {
            Ok(r) => all.push(r),
            Err(e) => {
                failures.push(CellFailure { lambda_emb, lambda_theta, error: e.to_string() });
                first_error.get_or_insert(e);
            }
        }
    }
    let Some(w) = select_winner(&all) else {
        return Err(first_error.expect("empty grid rejected by validate"));
    };
    Ok(GridOutcome { winner: all[w].clone(), all, failures })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    LambdaEmb,
    LambdaTheta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub in_domain: f64,
    pub ood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub axis: SweepAxis,
    pub value: f64,
    /// Starts with the pretrained model at step 0.
    pub points: Vec<CurvePoint>,
    /// `||theta_final - theta_pre|| / ||theta_pre||`.
    pub final_relative_distance: f64,
}

/// One regularizer at a time, the other weight fixed at zero.
pub fn sweep(lab: &Lab, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepCurve>> {
    let task = lab.task(TargetSource::GenericA)?;
    let start = validate_params(task, &lab.theta_pre)?;
    let origin = CurvePoint { step: 0, in_domain: start.in_domain, ood: start.ood };
    let pre_norm = lab.theta_pre.norm();
    lab.pool()?.install(|| {
        values
            .par_iter()
            .map(|&value| {
                let (e, t) = match axis {
                    SweepAxis::LambdaEmb => (value, 0.0),
                    SweepAxis::LambdaTheta => (0.0, value),
                };
                let cfg = lab.finetune_config(e, t, TargetSource::GenericA);
                let (task, cache) = lab.entry(TargetSource::GenericA)?;
                let outcome = finetune(&lab.theta_pre, task, cache, &cfg, &lab.config.optimizer)?;
                let mut points = vec![origin.clone()];
                points.extend(outcome.history.iter().map(|h| CurvePoint {
                    step: h.step,
                    in_domain: h.in_domain,
                    ood: h.ood,
                }));
                Ok(SweepCurve {
                    axis,
                    value,
                    points,
                    final_relative_distance: outcome.final_params.distance(&lab.theta_pre)? / pre_norm,
                })
            })
            .collect()
    })
}

pub fn write_curves<W: Write>(w: W, curves: &[SweepCurve]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        axis: SweepAxis,
        value: f64,
        step: usize,
        in_domain: f64,
        ood: f64,
    }
    let mut out = csv::Writer::from_writer(w);
    for c in curves {
        for p in &c.points {
            out.serialize(Row { axis: c.axis, value: c.value, step: p.step, in_domain: p.in_domain, ood: p.ood })?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Named baseline configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Standard,
    L2spOnly,
    EmbedOnlyGeneric,
    EmbedOnlyIndomain,
    WiseFt,
    Ours,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Standard,
        Preset::L2spOnly,
        Preset::EmbedOnlyGeneric,
        Preset::EmbedOnlyIndomain,
        Preset::WiseFt,
        Preset::Ours,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Standard => "standard",
            Preset::L2spOnly => "l2sp-only",
            Preset::EmbedOnlyGeneric => "embed-only-generic",
            Preset::EmbedOnlyIndomain => "embed-only-indomain",
            Preset::WiseFt => "wise-ft",
            Preset::Ours => "ours",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetOutcome {
    pub preset: Preset,
    /// Chosen by composite validation among `trials`.
    pub selected: TrialResult,
    pub trials: Vec<TrialResult>,
}

fn grid_preset(lab: &Lab, preset: Preset, spec: GridSpec, source: TargetSource) -> Result<PresetOutcome> {
    let g = grid_search(lab, &spec, source, preset.name())?;
    Ok(PresetOutcome { preset, selected: g.winner, trials: g.all })
}

/// WiSE-FT over `alphas`, interpolating the backbone of a standard fine-tuning run.
pub fn wise_ft_preset(lab: &Lab, standard: &TrialRun, alphas: &[f64]) -> Result<PresetOutcome> {
    let task = lab.task(TargetSource::GenericA)?;
    let theta_ft = &standard.outcome.best.params;
    let mut trials = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let params = wise_ft(&lab.theta_pre, theta_ft, alpha)?;
        let val = validate_params(task, &params)?;
        trials.push(TrialResult {
            label: format!("wise-ft (a={alpha})"),
            lambda_emb: 0.0,
            lambda_theta: 0.0,
            target_source: TargetSource::GenericA,
            best: CheckpointSummary {
                step: standard.outcome.best.step,
                composite_val: val.composite,
                in_domain_val: val.in_domain,
                ood_val: val.ood,
            },
            last: HistoryRow {
                step: standard.outcome.best.step,
                in_domain: val.in_domain,
                ood: val.ood,
                composite: val.composite,
            },
            evaluation: lab.evaluator.evaluate(&params)?,
        });
    }
    let w = select_winner(&trials).ok_or_else(|| Error::ConfigInvalid("no WiSE-FT alphas".into()))?;
    Ok(PresetOutcome { preset: Preset::WiseFt, selected: trials[w].clone(), trials })
}

pub fn run_preset(lab: &Lab, preset: Preset) -> Result<PresetOutcome> {
    let grid = &lab.config.grid;
    let zero = vec![0.0];
    match preset {
        Preset::Standard | Preset::WiseFt => {
            let cfg = lab.finetune_config(0.0, 0.0, TargetSource::GenericA);
            let run = lab.run_trial(Preset::Standard.name(), &cfg)?;
            if preset == Preset::WiseFt {
                return wise_ft_preset(lab, &run, &lab.config.wise_alphas);
            }
            Ok(PresetOutcome { preset, selected: run.result.clone(), trials: vec![run.result] })
        }
        Preset::L2spOnly => grid_preset(
            lab,
            preset,
            GridSpec { lambda_emb_values: zero, lambda_theta_values: grid.lambda_theta_values.clone() },
            TargetSource::GenericA,
        ),
        Preset::EmbedOnlyGeneric => grid_preset(
            lab,
            preset,
            GridSpec { lambda_emb_values: grid.lambda_emb_values.clone(), lambda_theta_values: zero },
            TargetSource::GenericA,
        ),
        Preset::EmbedOnlyIndomain => grid_preset(
            lab,
            preset,
            GridSpec { lambda_emb_values: grid.lambda_emb_values.clone(), lambda_theta_values: zero },
            TargetSource::InDomain,
        ),
        Preset::Ours => grid_preset(lab, preset, grid.clone(), TargetSource::GenericA),
    }
}

/// Runs all six presets; the WiSE-FT preset reuses the standard run.
pub fn run_all_presets(lab: &Lab) -> Result<Vec<PresetOutcome>> {
    let cfg = lab.finetune_config(0.0, 0.0, TargetSource::GenericA);
    let standard = lab.run_trial(Preset::Standard.name(), &cfg)?;
    let mut out = vec![PresetOutcome {
        preset: Preset::Standard,
        selected: standard.result.clone(),
        trials: vec![standard.result.clone()],
    }];
    for preset in [Preset::L2spOnly, Preset::EmbedOnlyGeneric, Preset::EmbedOnlyIndomain] {
        out.push(run_preset(lab, preset)?);
    }
    out.push(wise_ft_preset(lab, &standard, &lab.config.wise_alphas)?);
    out.push(run_preset(lab, Preset::Ours)?);
    Ok(out)
}

/// Contents of a `results.json` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub reference: Option<EvalBlock>,
    pub trials: Vec<TrialResult>,
}

impl RunResults {
    pub fn report(&self) -> Result<Report> {
        report(&self.trials, self.reference.as_ref())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// `config.json` of a fine-tuning checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub finetune: FinetuneConfig,
    pub best: CheckpointSummary,
    pub pretrained_digest: u64,
}

/// A score in points (x100) with its difference to the pretrained reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreCell {
    pub value: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub lambda_emb: f64,
    pub lambda_theta: f64,
    pub in_domain: ScoreCell,
    pub ood_img_avg: ScoreCell,
    pub paired_avg: ScoreCell,
    pub in_out_avg: ScoreCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub reference: ReportRow,
    pub rows: Vec<ReportRow>,
}

fn points(v: f64) -> f64 {
    100.0 * v
}

fn row_for(method: &str, lambda_emb: f64, lambda_theta: f64, e: &EvalBlock, r: &EvalBlock) -> ReportRow {
    let cell = |v: f64, rv: f64| ScoreCell { value: points(v), delta: points(v) - points(rv) };
    ReportRow {
        method: method.to_string(),
        lambda_emb,
        lambda_theta,
        in_domain: cell(e.in_domain, r.in_domain),
        ood_img_avg: cell(e.ood_img_avg, r.ood_img_avg),
        paired_avg: cell(e.paired_avg, r.paired_avg),
        in_out_avg: cell(e.in_out_avg, r.in_out_avg),
    }
}

/// Table rows with absolute values and deltas to the pretrained reference.
pub fn report(results: &[TrialResult], reference: Option<&EvalBlock>) -> Result<Report> {
    let reference = reference.ok_or(Error::MissingReference)?;
    Ok(Report {
        reference: row_for("pretrained", 0.0, 0.0, reference, reference),
        rows: results
            .iter()
            .map(|t| row_for(&t.label, t.lambda_emb, t.lambda_theta, &t.evaluation, reference))
            .collect(),
    })
}

fn fmt_delta(d: f64) -> String {
    let s = format!("{d:+.1}");
    if s == "-0.0" {
        "+0.0".to_string()
    } else {
        s
    }
}

fn fmt_weight(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v:e}")
    }
}

impl Report {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| Method | (lambda_emb, lambda_theta) | In-Domain | OOD Average | Paired R@1 Average | In-Out Avg. |\n\
             |---|---|---|---|---|---|\n",
        );
        let r = &self.reference;
        s.push_str(&format!(
            "| {} | - | {:.1} | {:.1} | {:.1} | {:.1} |\n",
            r.method, r.in_domain.value, r.ood_img_avg.value, r.paired_avg.value, r.in_out_avg.value
        ));
        for row in &self.rows {
            let cell = |c: &ScoreCell| format!("{:.1} ({})", c.value, fmt_delta(c.delta));
            s.push_str(&format!(
                "| {} | ({}, {}) | {} | {} | {} | {} |\n",
                row.method,
                fmt_weight(row.lambda_emb),
                fmt_weight(row.lambda_theta),
                cell(&row.in_domain),
                cell(&row.ood_img_avg),
                cell(&row.paired_avg),
                cell(&row.in_out_avg),
            ));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
