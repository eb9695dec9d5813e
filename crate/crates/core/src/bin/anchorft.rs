use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use anchorft::data::{extract_targets, generate_universe, params_digest, Split, TargetEmbeddingCache, Teacher};
use anchorft::harness::{
    grid_search, run_all_presets, run_preset, sweep, write_curves, CheckpointMeta, Evaluator, ExperimentConfig, Lab,
    Preset, RunResults, SweepAxis, TrialResult,
};
use anchorft::trainer::{
    finetune, generic_samples, load_checkpoint_dir, pretrain, save_checkpoint_dir, validate_params, wise_ft,
    FinetuneTask, HistoryRow, TargetSource,
};
use anchorft::{Error, ParameterVector, Result};

#[derive(Parser)]
#[command(name = "anchorft", version, about = "Fine-tune synthetic embedding encoders without forgetting")]
struct Cli {
    /// Experiment config (JSON). Defaults to OUT/experiment.json when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory shared by all pipeline stages.
    #[arg(long, global = true, default_value = "anchorft-out")]
    out: PathBuf,
    /// Experiment seed; expands to every component seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for grid cells and sweep values.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the effective experiment config and print universe statistics.
    GenData,
    /// Pretrain the encoder on all non-target domains.
    Pretrain,
    /// Embed the generic inputs with the pretrained encoder and cache them.
    ExtractTargets {
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value = "generic-a")]
        target_source: TargetSource,
    },
    /// Fine-tune once with fixed regularization weights.
    Finetune {
        #[arg(long)]
        lambda_emb: Option<f64>,
        #[arg(long)]
        lambda_theta: Option<f64>,
        #[arg(long)]
        target_source: Option<TargetSource>,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// Run the regularization grid, or a named baseline preset.
    GridSearch {
        #[arg(long, value_enum, default_value = "ours")]
        preset: PresetArg,
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Vary one regularization weight with the other fixed at zero.
    Sweep {
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Interpolate pretrained and fine-tuned weights.
    WiseFt {
        /// Fixed interpolation weight; without it the configured alphas are searched.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Evaluate a fine-tuning checkpoint on the test suite.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Render a results file as Markdown and JSON tables.
    Report {
        #[arg(long)]
        results: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    LambdaEmb,
    LambdaTheta,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Standard,
    L2spOnly,
    EmbedOnlyGeneric,
    EmbedOnlyIndomain,
    WiseFt,
    Ours,
    All,
}

impl PresetArg {
    fn preset(self) -> Option<Preset> {
        match self {
            PresetArg::Standard => Some(Preset::Standard),
            PresetArg::L2spOnly => Some(Preset::L2spOnly),
            PresetArg::EmbedOnlyGeneric => Some(Preset::EmbedOnlyGeneric),
            PresetArg::EmbedOnlyIndomain => Some(Preset::EmbedOnlyIndomain),
            PresetArg::WiseFt => Some(Preset::WiseFt),
            PresetArg::Ours => Some(Preset::Ours),
            PresetArg::All => None,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let default_path = cli.out.join("experiment.json");
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if default_path.exists() => ExperimentConfig::load(&default_path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pretrained_path(out: &Path) -> PathBuf {
    out.join("pretrained").join("params.bin")
}

fn targets_path(out: &Path, source: TargetSource) -> PathBuf {
    out.join(format!("targets-{}.bin", source.as_str()))
}

fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.to_path_buf())
}

/// Pretrained weights from `--params`, the output directory, or a fresh pretraining run.
fn load_pretrained(cfg: &ExperimentConfig, out: &Path, params: Option<&Path>) -> Result<ParameterVector> {
    let path = params.map(Path::to_path_buf).unwrap_or_else(|| pretrained_path(out));
    if params.is_some() || path.exists() {
        let theta = ParameterVector::load(&path)?;
        theta.check_for(&cfg.encoder)?;
        return Ok(theta);
    }
    eprintln!("no pretrained checkpoint at {}; pretraining", path.display());
    let universe = generate_universe(&cfg.universe)?;
    let teacher = Teacher::new(cfg.universe.teacher_seed, &cfg.encoder)?;
    pretrain(&universe, &teacher, cfg.target_domain, &cfg.encoder, &cfg.pretrain)
}

fn write_results(dir: &Path, results: &RunResults) -> Result<()> {
    results.save(&dir.join("results.json"))?;
    fs::write(dir.join("report.md"), results.report()?.to_markdown())?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let out = &cli.out;
    match &cli.command {
        Command::GenData => {
            let cfg = load_config(cli)?;
            let universe = generate_universe(&cfg.universe)?;
            ensure_dir(out)?;
            fs::write(out.join("experiment.json"), serde_json::to_string_pretty(&cfg)?)?;
            fs::write(out.join("universe.json"), serde_json::to_string_pretty(&cfg.universe)?)?;
            let (train, val, test) = cfg.universe.class_counts();
            println!("classes per domain: {train} train, {val} validation, {test} test");
            for d in 0..cfg.universe.num_domains {
                let role = if cfg.universe.generic_domain_ids.contains(&d) {
                    "generic"
                } else if d == cfg.target_domain {
                    "target"
                } else {
                    "fine-grained"
                };
                let count = |splits: &[Split]| universe.select(d, splits).len();
                println!(
                    "domain {d} ({role}): {} train, {} validation, {} test samples",
                    count(&[Split::Train]),
                    count(&[Split::ValQuery, Split::ValIndex]),
                    count(&[Split::TestQuery, Split::TestIndex]),
                );
            }
        }
        Command::Pretrain => {
            let cfg = load_config(cli)?;
            let universe = generate_universe(&cfg.universe)?;
            let teacher = Teacher::new(cfg.universe.teacher_seed, &cfg.encoder)?;
            let theta = pretrain(&universe, &teacher, cfg.target_domain, &cfg.encoder, &cfg.pretrain)?;
            let dir = ensure_dir(&out.join("pretrained"))?;
            theta.save(&dir.join("params.bin"))?;
            fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
            println!("pretrained {} parameters, digest {:016x}", theta.len(), params_digest(&theta));
        }
        Command::ExtractTargets { params, target_source } => {
            let cfg = load_config(cli)?;
            let theta = load_pretrained(&cfg, out, params.as_deref())?;
            let universe = generate_universe(&cfg.universe)?;
            let samples = generic_samples(&universe, cfg.target_domain, *target_source)?;
            let cache = extract_targets(&theta, &cfg.encoder, &samples)?;
            ensure_dir(out)?;
            let path = targets_path(out, *target_source);
            cache.save(&path)?;
            println!("cached {} targets in {}", cache.ids.len(), path.display());
        }
        Command::Finetune { lambda_emb, lambda_theta, target_source, params, targets } => {
            let cfg = load_config(cli)?;
            let mut ft = cfg.finetune.clone();
            if let Some(v) = lambda_emb {
                ft.lambda_emb = *v;
            }
            if let Some(v) = lambda_theta {
                ft.lambda_theta = *v;
            }
            if let Some(s) = target_source {
                ft.target_source = *s;
            }
            ft.validate()?;
            let theta = load_pretrained(&cfg, out, params.as_deref())?;
            let universe = generate_universe(&cfg.universe)?;
            let task = FinetuneTask::new(&universe, &cfg.encoder, cfg.target_domain, ft.target_source)?;
            let cache_path = targets.clone().unwrap_or_else(|| targets_path(out, ft.target_source));
            let cache = TargetEmbeddingCache::load(&cache_path)?;
            let outcome = finetune(&theta, &task, &cache, &ft, &cfg.optimizer)?;
            let meta = CheckpointMeta {
                finetune: ft,
                best: outcome.best.summary(),
                pretrained_digest: outcome.best.pretrained_digest,
            };
            save_checkpoint_dir(&out.join("finetune"), &meta, &outcome.best, &outcome.history)?;
            println!(
                "best step {} composite {:.4} (in-domain {:.4}, ood {:.4})",
                meta.best.step, meta.best.composite_val, meta.best.in_domain_val, meta.best.ood_val
            );
        }
        Command::GridSearch { preset, params } => {
            let cfg = load_config(cli)?;
            let theta = load_pretrained(&cfg, out, params.as_deref())?;
            let lab = Lab::with_pretrained(cfg, theta)?;
            let reference = Some(lab.reference()?);
            let dir = ensure_dir(&out.join("grid-search"))?;
            let trials = match preset.preset() {
                Some(Preset::Ours) => {
                    let g = grid_search(&lab, &lab.config.grid, TargetSource::GenericA, Preset::Ours.name())?;
                    for f in &g.failures {
                        eprintln!("cell ({:e}, {:e}) failed: {}", f.lambda_emb, f.lambda_theta, f.error);
                    }
                    println!("winner: ({:e}, {:e})", g.winner.lambda_emb, g.winner.lambda_theta);
                    g.all
                }
                Some(p) => {
                    let outcome = run_preset(&lab, p)?;
                    println!("{} selected: {}", p.name(), outcome.selected.label);
                    outcome.trials
                }
                None => {
                    let outcomes = run_all_presets(&lab)?;
                    fs::write(dir.join("presets.json"), serde_json::to_string_pretty(&outcomes)?)?;
                    outcomes
                        .into_iter()
                        .map(|o| TrialResult { label: o.preset.name().to_string(), ..o.selected })
                        .collect()
                }
            };
            let results = RunResults { reference, trials };
            write_results(&dir, &results)?;
            print!("{}", results.report()?.to_markdown());
        }
        Command::Sweep { axis, values, params } => {
            let cfg = load_config(cli)?;
            let theta = load_pretrained(&cfg, out, params.as_deref())?;
            let lab = Lab::with_pretrained(cfg, theta)?;
            let axis = match axis {
                AxisArg::LambdaEmb => SweepAxis::LambdaEmb,
                AxisArg::LambdaTheta => SweepAxis::LambdaTheta,
            };
            let curves = sweep(&lab, axis, values)?;
            let dir = ensure_dir(&out.join("sweep"))?;
            write_curves(fs::File::create(dir.join("curves.csv"))?, &curves)?;
            for c in &curves {
                let last = c.points.last().expect("curve has the pretrained point");
                println!(
                    "{:e}: final in-domain {:.4}, ood {:.4}, relative distance {:.4}",
                    c.value, last.in_domain, last.ood, c.final_relative_distance
                );
            }
        }
        Command::WiseFt { alpha, checkpoint, params } => {
            let cfg = load_config(cli)?;
            let theta_pre = load_pretrained(&cfg, out, params.as_deref())?;
            let ckpt_dir = checkpoint.clone().unwrap_or_else(|| out.join("finetune"));
            let (theta_ft, _, history) = load_checkpoint_dir(&ckpt_dir)?;
            let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(ckpt_dir.join("config.json"))?)?;
            let alphas = match alpha {
                Some(a) => vec![*a],
                None => cfg.wise_alphas.clone(),
            };
            let lab = Lab::with_pretrained(cfg, theta_pre)?;
            let task = lab.task(TargetSource::GenericA)?;
            let mut trials = Vec::new();
            let mut best: Option<(f64, ParameterVector)> = None;
            for a in alphas {
                let mixed = wise_ft(&lab.theta_pre, &theta_ft, a)?;
                let val = validate_params(task, &mixed)?;
                trials.push(TrialResult {
                    label: format!("wise-ft (a={a})"),
                    lambda_emb: meta.finetune.lambda_emb,
                    lambda_theta: meta.finetune.lambda_theta,
                    target_source: meta.finetune.target_source,
                    best: anchorft::trainer::CheckpointSummary {
                        step: meta.best.step,
                        composite_val: val.composite,
                        in_domain_val: val.in_domain,
                        ood_val: val.ood,
                    },
                    last: history.last().cloned().unwrap_or(HistoryRow {
                        step: meta.best.step,
                        in_domain: val.in_domain,
                        ood: val.ood,
                        composite: val.composite,
                    }),
                    evaluation: lab.evaluator.evaluate(&mixed)?,
                });
                if best.as_ref().is_none_or(|(c, _)| val.composite > *c) {
                    best = Some((val.composite, mixed));
                }
            }
            let dir = ensure_dir(&out.join("wise-ft"))?;
            let (_, params) = best.ok_or_else(|| Error::ConfigInvalid("no interpolation weights".into()))?;
            params.save(&dir.join("params.bin"))?;
            write_results(&dir, &RunResults { reference: Some(lab.reference()?), trials })?;
            println!("wrote {}", dir.display());
        }
        Command::Evaluate { checkpoint, params } => {
            let cfg = load_config(cli)?;
            let theta_pre = load_pretrained(&cfg, out, params.as_deref())?;
            let ckpt_dir = checkpoint.clone().unwrap_or_else(|| out.join("finetune"));
            let (theta, _, history) = load_checkpoint_dir(&ckpt_dir)?;
            let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(ckpt_dir.join("config.json"))?)?;
            if meta.pretrained_digest != params_digest(&theta_pre) {
                return Err(Error::CacheMismatch {
                    expected: params_digest(&theta_pre),
                    actual: meta.pretrained_digest,
                });
            }
            let universe = generate_universe(&cfg.universe)?;
            let teacher = Teacher::new(cfg.universe.teacher_seed, &cfg.encoder)?;
            let evaluator = Evaluator::new(&universe, &teacher, &cfg.encoder, cfg.target_domain)?;
            let trial = TrialResult {
                label: "finetune".into(),
                lambda_emb: meta.finetune.lambda_emb,
                lambda_theta: meta.finetune.lambda_theta,
                target_source: meta.finetune.target_source,
                best: meta.best,
                last: history.last().cloned().ok_or_else(|| Error::Format("empty history".into()))?,
                evaluation: evaluator.evaluate(&theta)?,
            };
            let results = RunResults { reference: Some(evaluator.evaluate(&theta_pre)?), trials: vec![trial] };
            write_results(ensure_dir(out)?.as_path(), &results)?;
            print!("{}", results.report()?.to_markdown());
        }
        Command::Report { results } => {
            let report = RunResults::load(results)?.report()?;
            let dir = results.parent().unwrap_or(Path::new("."));
            fs::write(dir.join("report.md"), report.to_markdown())?;
            fs::write(dir.join("report.json"), report.to_json()?)?;
            print!("{}", report.to_markdown());
        }
    }
    Ok(())
}
