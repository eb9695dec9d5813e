//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Usage: `cargo test -p anchorft --test acceptance [-- <ids...> [--strict]]`.
//! Without `--strict` (or `ANCHORFT_ACCEPTANCE_STRICT=1`) failures are reported
//! but the process exits 0, so `cargo test --workspace` still covers the rest.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use anchorft::encoder::{backward, forward_batch, init_params};
use anchorft::harness::{
    grid_search, run_preset, sweep, wise_ft_preset, EvalBlock, GridOutcome, Lab, Preset, SweepAxis, TrialRun,
};
use anchorft::losses::{StepInputs, TotalLoss};
use anchorft::metrics::average_precision_at_k;
use anchorft::trainer::validate_params;
use anchorft::{
    domain_loss, embed_reg_loss, finetune, map_at_k, param_reg_loss, total_loss, wise_ft, Activation,
    EncoderConfig, ExperimentConfig, ParameterVector, Prototypes, RegWeights, RetrievalSplit, TargetSource,
};
use common::{brute_force_map, rng, small_experiment, unit_rows};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// Gradient fidelity

const FD_STEP: f64 = 1e-5;
const FD_TOLERANCE: f64 = 1e-5;

/// Relative error whose denominator never drops below the rounding noise of a
/// central difference, about `4 eps |L| / h`, scaled by the tolerance. Below
/// that magnitude the comparison is effectively absolute.
fn relative_error(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let noise = 4.0 * f64::EPSILON * loss.abs() / FD_STEP;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(noise / FD_TOLERANCE)
}

fn central_difference(theta: &ParameterVector, i: usize, f: &dyn Fn(&ParameterVector) -> f64) -> f64 {
    let mut plus = theta.clone();
    plus.as_mut_slice()[i] += FD_STEP;
    let mut minus = theta.clone();
    minus.as_mut_slice()[i] -= FD_STEP;
    (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
}

struct GradCheck {
    name: &'static str,
    worst: f64,
    coordinates: usize,
}

impl GradCheck {
    fn new(name: &'static str) -> Self {
        GradCheck { name, worst: 0.0, coordinates: 0 }
    }

    fn compare(&mut self, theta: &ParameterVector, analytic: &[f64], f: &dyn Fn(&ParameterVector) -> f64) {
        let loss = f(theta);
        for (i, &a) in analytic.iter().enumerate() {
            let n = central_difference(theta, i, f);
            self.worst = self.worst.max(relative_error(a, n, loss));
            self.coordinates += 1;
        }
    }
}

fn gradient_fidelity() -> Outcome {
    let mut checks = [
        GradCheck::new("L_domain"),
        GradCheck::new("L_params"),
        GradCheck::new("L_emb"),
        GradCheck::new("L_total"),
    ];
    let mut rng = rng(101);
    let start = Instant::now();
    for trial in 0..20u64 {
        let cfg = EncoderConfig {
            input_dim: 8,
            hidden_dims: vec![16],
            embed_dim: 8,
            activation: if trial % 2 == 0 { Activation::Gelu } else { Activation::Tanh },
            init_seed: 500 + trial,
            init_scale: 1.0,
        };
        let theta = init_params(&cfg);
        let noise: Vec<f64> = (0..theta.len()).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut theta_pre = theta.clone();
        ok(theta_pre.add_scaled(1.0, &ParameterVector::new(noise)))?;
        let batch = 6;
        let x = Array2::from_shape_fn((batch, 8), |_| rng.sample::<f64, _>(StandardNormal));
        let classes = 5;
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        let prototypes = ok(Prototypes::from_rows(unit_rows(&mut rng, classes, 8)))?;
        let targets = unit_rows(&mut rng, batch, 8);
        let scale = 16.0;

        let emb = ok(forward_batch(&theta, &cfg, x.view()))?;
        let dl = ok(domain_loss(emb.view(), &labels, &prototypes, scale))?;
        let g = ok(backward(&theta, &cfg, x.view(), dl.grad_embeddings.view()))?;
        let f_domain = |t: &ParameterVector| {
            let e = forward_batch(t, &cfg, x.view()).expect("forward");
            domain_loss(e.view(), &labels, &prototypes, scale).expect("loss").loss
        };
        checks[0].compare(&theta, g.as_slice(), &f_domain);

        let (_, gp) = ok(param_reg_loss(&theta, &theta_pre))?;
        let f_params = |t: &ParameterVector| param_reg_loss(t, &theta_pre).expect("loss").0;
        checks[1].compare(&theta, gp.as_slice(), &f_params);

        let (_, ge) = ok(embed_reg_loss(emb.view(), targets.view()))?;
        let g = ok(backward(&theta, &cfg, x.view(), ge.view()))?;
        let f_emb = |t: &ParameterVector| {
            let e = forward_batch(t, &cfg, x.view()).expect("forward");
            embed_reg_loss(e.view(), targets.view()).expect("loss").0
        };
        checks[2].compare(&theta, g.as_slice(), &f_emb);

        let weights = RegWeights { lambda_emb: 3.0, lambda_theta: 50.0, logit_scale: scale };
        let steps = [
            StepInputs::Domain { x: x.view(), labels: &labels, prototypes: &prototypes },
            StepInputs::Generic { x: x.view(), targets: targets.view() },
        ];
        for inputs in &steps {
            let out: TotalLoss = ok(total_loss(&cfg, &theta, &theta_pre, inputs, &weights))?;
            let f_total =
                |t: &ParameterVector| total_loss(&cfg, t, &theta_pre, inputs, &weights).expect("loss").loss;
            checks[3].compare(&theta, out.grad_params.as_slice(), &f_total);
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let detail: Vec<String> =
        checks.iter().map(|c| format!("{} max rel {:.2e} over {}", c.name, c.worst, c.coordinates)).collect();
    let detail = format!("{}; {elapsed:.1}s", detail.join(", "));
    for c in &checks {
        ensure!(c.coordinates >= 100 && c.worst < FD_TOLERANCE, "{detail}");
    }
    ensure!(elapsed < 60.0, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------------------
// Loss identities

fn loss_identities() -> Outcome {
    let mut rng = rng(202);
    let theta = ParameterVector::new((0..50).map(|_| rng.sample(StandardNormal)).collect());
    let (lp, _) = ok(param_reg_loss(&theta, &theta))?;
    ensure!(lp == 0.0, "L_params(theta, theta) = {lp}");

    let f = unit_rows(&mut rng, 7, 5);
    let (le, _) = ok(embed_reg_loss(f.view(), f.view()))?;
    ensure!(le == 0.0, "L_emb(f, f) = {le}");

    let one = ok(Prototypes::from_rows(unit_rows(&mut rng, 1, 5)))?;
    let l1 = ok(domain_loss(f.view(), &[0; 7], &one, 16.0))?.loss;
    ensure!(l1 == 0.0, "K=1 L_domain = {l1}");

    let k = 9;
    let same = ok(Prototypes::from_rows(Array2::from_shape_fn((k, 5), |(_, j)| (j + 1) as f64)))?;
    let labels: Vec<usize> = (0..7).map(|i| i % k).collect();
    let lu = ok(domain_loss(f.view(), &labels, &same, 16.0))?.loss;
    let uniform_err = (lu - (k as f64).ln()).abs();
    ensure!(uniform_err <= 1e-9, "uniform logits: |L - ln K| = {uniform_err:e}");

    let neg = f.mapv(|v| -v);
    let (la, _) = ok(embed_reg_loss(f.view(), neg.view()))?;
    let antipodal_err = (la - 4.0).abs();
    ensure!(antipodal_err <= 1e-12, "antipodal L_emb = {la}");
    Ok(format!("uniform err {uniform_err:.1e}, antipodal err {antipodal_err:.1e}"))
}

// ---------------------------------------------------------------------------
// Metric oracle

fn random_split(rng: &mut rand_chacha::ChaCha8Rng) -> RetrievalSplit {
    let q = rng.random_range(1..=50);
    let i = rng.random_range(1..=200);
    let classes = rng.random_range(1..=10u64);
    let dim = rng.random_range(2..=6);
    let lattice = rng.random_bool(0.5);
    let mut embed = |rows: usize| {
        if lattice {
            // Small integer vectors: exact dot products and many ties.
            Array2::from_shape_fn((rows, dim), |_| rng.random_range(-1i32..=1) as f64)
        } else {
            unit_rows(rng, rows, dim)
        }
    };
    let query_embeddings = embed(q);
    let index_embeddings = embed(i);
    let mut index_ids: Vec<u64> = (0..i as u64).map(|v| v * 3 + 1).collect();
    index_ids.shuffle(rng);
    RetrievalSplit {
        query_embeddings,
        query_labels: (0..q).map(|_| rng.random_range(0..classes)).collect(),
        query_ids: (0..q as u64).map(|v| 10_000 + v).collect(),
        index_embeddings,
        index_labels: (0..i).map(|_| rng.random_range(0..classes)).collect(),
        index_ids,
    }
}

fn metric_oracle() -> Outcome {
    let hand = ok(average_precision_at_k(&[true, false, true], 2, 3))?;
    ensure!((hand - 0.833333).abs() < 1e-6, "hand case AP = {hand}");

    let mut rng = rng(303);
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for n in 0..200 {
        let split = random_split(&mut rng);
        let k = if n % 2 == 0 { 5 } else { 20 };
        let oracle = brute_force_map(
            &split.query_embeddings,
            &split.query_labels,
            &split.index_embeddings,
            &split.index_labels,
            &split.index_ids,
            k,
        );
        match (map_at_k(&split, k), oracle) {
            (Ok(r), Some(o)) => {
                worst = worst.max((r.map_at_k - o).abs());
                compared += 1;
            }
            (Err(_), None) => {}
            (got, want) => return Err(format!("instance {n}: metric {got:?} vs oracle {want:?}")),
        }
    }
    ensure!(worst <= 1e-12, "max |mAP - oracle| = {worst:e}");
    Ok(format!("hand AP {hand:.6}, {compared} instances, max diff {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// WiSE-FT

fn bits(p: &ParameterVector) -> Vec<u64> {
    p.as_slice().iter().map(|v| v.to_bits()).collect()
}

fn wise_ft_checks() -> Outcome {
    let pre = ParameterVector::new(vec![0.0, 2.0, -4.0, 1.0, -0.0, 1e-300]);
    let ft = ParameterVector::new(vec![2.0, 4.0, 0.0, 3.0, 0.0, -7.5]);
    ensure!(bits(&ok(wise_ft(&pre, &ft, 0.0))?) == bits(&pre), "alpha 0 is not theta_pre bitwise");
    ensure!(bits(&ok(wise_ft(&pre, &ft, 1.0))?) == bits(&ft), "alpha 1 is not theta_ft bitwise");
    let mid = ok(wise_ft(
        &ParameterVector::new(vec![0.0, 2.0, -4.0, 1.0]),
        &ParameterVector::new(vec![2.0, 4.0, 0.0, 3.0]),
        0.5,
    ))?;
    ensure!(mid.as_slice() == [1.0, 3.0, -2.0, 2.0], "midpoint {:?}", mid.as_slice());

    let mut rng = rng(404);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..64);
        let a = ParameterVector::new((0..n).map(|_| rng.sample(StandardNormal)).collect());
        let b = ParameterVector::new((0..n).map(|_| rng.sample(StandardNormal)).collect());
        let alpha: f64 = rng.random();
        let x = ok(wise_ft(&a, &b, alpha))?;
        let y = ok(wise_ft(&a, &b, 1.0 - alpha))?;
        for i in 0..n {
            let lhs = x.as_slice()[i] + y.as_slice()[i];
            let rhs = a.as_slice()[i] + b.as_slice()[i];
            worst = worst.max((lhs - rhs).abs());
        }
    }
    ensure!(worst <= 1e-12, "affinity error {worst:e}");
    Ok(format!("endpoints bitwise, midpoint exact, affinity err {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// Determinism

fn cli(out: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_anchorft"))
        .arg("--out")
        .arg(out)
        .args(["--seed", "17"])
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        status.status.success(),
        "anchorft {args:?} failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );
    Ok(())
}

fn determinism() -> Outcome {
    let mut files = Vec::new();
    for _ in 0..2 {
        let dir = ok(tempfile::tempdir())?;
        for args in [
            &["pretrain"][..],
            &["extract-targets"],
            &["finetune", "--lambda-emb", "100", "--lambda-theta", "1000"],
            &["evaluate"],
        ] {
            cli(dir.path(), args)?;
        }
        let history = ok(std::fs::read(dir.path().join("finetune/history.csv")))?;
        let results = ok(std::fs::read(dir.path().join("results.json")))?;
        files.push((history, results));
    }
    ensure!(files[0].0 == files[1].0, "history.csv differs between runs");
    ensure!(files[0].1 == files[1].1, "results.json differs between runs");
    Ok(format!("history.csv {} bytes, results.json {} bytes identical", files[0].0.len(), files[0].1.len()))
}

// ---------------------------------------------------------------------------
// Selection

fn selection() -> Outcome {
    let mut rng = rng(606);
    for n in 0..10 {
        let mut cfg = small_experiment(rng.random_range(0..1000));
        cfg.finetune.eval_every = rng.random_range(2..10);
        cfg.finetune.max_steps = rng.random_range(cfg.finetune.eval_every..60);
        let lab = ok(Lab::prepare(cfg))?;
        let lambda_emb = [0.0, 1.0, 100.0][rng.random_range(0..3)];
        let lambda_theta = [0.0, 10.0, 1e4][rng.random_range(0..3)];
        let ft = lab.finetune_config(lambda_emb, lambda_theta, TargetSource::GenericA);
        let outcome = ok(finetune(
            &lab.theta_pre,
            ok(lab.task(TargetSource::GenericA))?,
            ok(lab.cache(TargetSource::GenericA))?,
            &ft,
            &lab.config.optimizer,
        ))?;
        let mut first_max = &outcome.history[0];
        for row in &outcome.history {
            if row.composite > first_max.composite {
                first_max = row;
            }
        }
        ensure!(
            outcome.best.step == first_max.step && outcome.best.composite_val == first_max.composite,
            "config {n}: best step {} ({}) vs history max step {} ({})",
            outcome.best.step,
            outcome.best.composite_val,
            first_max.step,
            first_max.composite
        );
        let recheck = ok(validate_params(ok(lab.task(TargetSource::GenericA))?, &outcome.best.params))?;
        ensure!(recheck.composite == outcome.best.composite_val, "config {n}: stored params do not reproduce");
    }
    Ok("10 configs, checkpoint = first history maximum".into())
}

// ---------------------------------------------------------------------------
// Default-universe study shared by the remaining criteria

struct Study {
    lab: Lab,
    reference: EvalBlock,
    standard: TrialRun,
    ours: GridOutcome,
    grid_seconds: f64,
}

fn workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn study() -> &'static Study {
    static STUDY: OnceLock<Study> = OnceLock::new();
    STUDY.get_or_init(|| {
        let cfg = ExperimentConfig { workers: workers(), ..ExperimentConfig::default() };
        let lab = Lab::prepare(cfg).expect("pretraining");
        let reference = lab.reference().expect("reference evaluation");
        let standard = lab
            .run_trial("standard", &lab.finetune_config(0.0, 0.0, TargetSource::GenericA))
            .expect("standard fine-tuning");
        let start = Instant::now();
        let ours = grid_search(&lab, &lab.config.grid, TargetSource::GenericA, "ours").expect("grid");
        let grid_seconds = start.elapsed().as_secs_f64();
        Study { lab, reference, standard, ours, grid_seconds }
    })
}

fn points(v: f64) -> f64 {
    100.0 * v
}

fn forgetting() -> Outcome {
    let s = study();
    let std = &s.standard.result.evaluation;
    let gain = points(std.in_domain - s.reference.in_domain);
    let ood_drop = points(s.reference.ood_img_avg - std.ood_img_avg);
    let paired_drop = points(s.reference.paired_avg - std.paired_avg);
    let detail = format!("in-domain {gain:+.1}, OOD drop {ood_drop:.1}, paired drop {paired_drop:.1}");
    ensure!(gain >= 10.0 && ood_drop >= 5.0 && paired_drop >= 5.0, "{detail}");
    Ok(detail)
}

fn retention() -> Outcome {
    let s = study();
    let w = &s.ours.winner;
    let e = &w.evaluation;
    let std = &s.standard.result.evaluation;
    let std_gain = points(std.in_domain - s.reference.in_domain);
    let gain = points(e.in_domain - s.reference.in_domain);
    let ood_drop = points(s.reference.ood_img_avg - e.ood_img_avg);
    let paired_drop = points(s.reference.paired_avg - e.paired_avg);
    let detail = format!(
        "winner ({:e}, {:e}): in-domain {gain:+.1} ({:.0}% of {std_gain:+.1}), OOD drop {ood_drop:.1}, \
         paired drop {paired_drop:.1}, In-Out {:.1} vs standard {:.1}, grid {:.0}s",
        w.lambda_emb,
        w.lambda_theta,
        100.0 * gain / std_gain,
        points(e.in_out_avg),
        points(std.in_out_avg),
        s.grid_seconds
    );
    ensure!(
        ood_drop <= 2.0
            && paired_drop <= 2.0
            && gain >= 0.7 * std_gain
            && e.in_out_avg > std.in_out_avg
            && s.grid_seconds < 1800.0,
        "{detail}"
    );
    Ok(detail)
}

fn sweep_checks() -> Outcome {
    let lab = &study().lab;
    let emb = ok(sweep(lab, SweepAxis::LambdaEmb, &[0.0, 1e5]))?;
    let theta = ok(sweep(lab, SweepAxis::LambdaTheta, &[0.0, 1e6]))?;
    let last = |c: &anchorft::harness::SweepCurve| c.points.last().cloned().expect("curve points");
    let (off, on) = (last(&emb[0]), last(&emb[1]));
    let (free, anchored) = (&theta[0], &theta[1]);
    let detail = format!(
        "lambda_emb 1e5 vs 0: OOD {:.3} vs {:.3}, in-domain {:.3} vs {:.3}; \
         relative distance at lambda_theta 1e6 {:.4}, at 0 {:.4}",
        on.ood,
        off.ood,
        on.in_domain,
        off.in_domain,
        anchored.final_relative_distance,
        free.final_relative_distance
    );
    ensure!(
        on.ood > off.ood
            && on.in_domain < off.in_domain
            && anchored.final_relative_distance <= 0.01
            && free.final_relative_distance > 0.01,
        "{detail}"
    );
    Ok(detail)
}

fn presets() -> Outcome {
    let s = study();
    let lab = &s.lab;
    let mut rows = vec![(Preset::Standard, s.standard.result.clone())];
    for preset in [Preset::L2spOnly, Preset::EmbedOnlyGeneric, Preset::EmbedOnlyIndomain] {
        rows.push((preset, ok(run_preset(lab, preset))?.selected));
    }
    rows.push((Preset::WiseFt, ok(wise_ft_preset(lab, &s.standard, &lab.config.wise_alphas))?.selected));
    rows.push((Preset::Ours, s.ours.winner.clone()));
    let score = |p: Preset| rows.iter().find(|(q, _)| *q == p).map(|(_, r)| points(r.evaluation.in_out_avg));
    let ours = score(Preset::Ours).expect("ours row");
    let detail: Vec<String> =
        rows.iter().map(|(p, r)| format!("{} {:.1}", p.name(), points(r.evaluation.in_out_avg))).collect();
    let detail = detail.join(", ");
    for p in [Preset::L2spOnly, Preset::EmbedOnlyGeneric, Preset::EmbedOnlyIndomain] {
        let other = score(p).expect("baseline row");
        ensure!(ours >= other - 0.5, "ours below {}: {detail}", p.name());
    }
    Ok(detail)
}

// ---------------------------------------------------------------------------

struct Criterion {
    id: u32,
    name: &'static str,
    run: fn() -> Outcome,
}

const CRITERIA: [Criterion; 10] = [
    Criterion { id: 1, name: "gradient fidelity", run: gradient_fidelity },
    Criterion { id: 2, name: "loss identities", run: loss_identities },
    Criterion { id: 3, name: "metric oracle", run: metric_oracle },
    Criterion { id: 4, name: "wise-ft interpolation", run: wise_ft_checks },
    Criterion { id: 5, name: "determinism", run: determinism },
    Criterion { id: 6, name: "checkpoint selection", run: selection },
    Criterion { id: 7, name: "forgetting under standard fine-tuning", run: forgetting },
    Criterion { id: 8, name: "retention of the grid winner", run: retention },
    Criterion { id: 9, name: "single-regularizer sweeps", run: sweep_checks },
    Criterion { id: 10, name: "baseline presets", run: presets },
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let strict = args.iter().any(|a| a == "--strict")
        || std::env::var("ANCHORFT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let selected: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    // `cargo test -- --list` reaches every test binary; there is nothing to list here.
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{}] {}: {detail} ({secs:.1}s)", c.id, c.name),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {}: {detail} ({secs:.1}s)", c.id, c.name);
            }
        }
    }
    if failed > 0 && strict {
        std::process::exit(1);
    }
}
