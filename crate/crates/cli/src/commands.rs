//! The five subcommands. Each is a pure function of (resolved config, input
//! files, seed) to output bytes under `--out`.

use std::fs;
use std::path::Path;

use sinkhorn_guidance::data::{flatten_points, gauss8_centers, sample_dataset, Dataset};
use sinkhorn_guidance::denoiser::{train, DenoiserParams};
use sinkhorn_guidance::guidance::{asag_sample, scale_sweep, GuidanceTrace};
use sinkhorn_guidance::metrics::{energy_distance, mode_coverage};
use sinkhorn_guidance::sinkhorn::plan_entropy;
use sinkhorn_guidance::{Rng, Tensor};

use crate::checkpoint::{self, TrainMeta};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::files::{self, Stamp};

pub const CHECKPOINT_DIR: &str = "checkpoint";

fn ensure_out(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::Input(format!("output dir {}: {e}", out.display())))
}

/// Approximate mode centers for each dataset, used by coverage metrics.
fn dataset_centers(ds: Dataset) -> Vec<[f64; 2]> {
    match ds {
        Dataset::Gauss8 => gauss8_centers(),
        // centers of the 8 occupied cells of the 4x4 board over [-4, 4]^2
        Dataset::Checkerboard => (0..4)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .filter(|(r, c)| (r + c) % 2 == 0)
            .map(|(r, c)| [-3.0 + 2.0 * c as f64, -3.0 + 2.0 * r as f64])
            .collect(),
        Dataset::SwissRoll | Dataset::Gauss1 => vec![[0.0, 0.0]],
    }
}

/// Regenerate the analytic ground-truth cloud for evaluation.
fn reference_cloud(cfg: &RunConfig) -> CliResult<Tensor> {
    let ds = cfg.dataset()?;
    let mut rng = Rng::new(cfg.eval.reference_seed);
    let examples = sample_dataset(ds, cfg.eval.reference_examples, cfg.model.n_tokens, &mut rng);
    Ok(flatten_points(&examples))
}

/// Train on freshly drawn data and write `checkpoint/` plus `loss.csv`.
/// One seeded stream drives data draw, initialization, and optimization, so
/// identical (config, seed) reruns are byte-identical.
pub fn cmd_train(cfg: &RunConfig, seed: u64, out: &Path) -> CliResult<()> {
    ensure_out(out)?;
    let ds = cfg.dataset()?;
    let model = cfg.model_config()?;
    let sched = cfg.schedule()?;
    let tc = cfg.train_config();

    let mut rng = Rng::new(seed);
    let dataset = sample_dataset(ds, cfg.data.train_examples, model.n_tokens, &mut rng);
    let mut params = DenoiserParams::init(model, &mut rng)?;
    let curve = train(&mut params, &dataset, &sched, &mut rng, &tc)?;

    let hash = cfg.hash();
    let stamp = Stamp {
        config_hash: &hash,
        seed,
    };
    files::write_loss_csv(&out.join("loss.csv"), &curve, stamp)?;
    let meta = TrainMeta {
        dataset: ds.name().into(),
        steps: curve.len(),
        final_loss: *curve.last().expect("nonempty curve"),
        seed,
        config_hash: hash.clone(),
    };
    checkpoint::save(&out.join(CHECKPOINT_DIR), &params, &meta)?;
    println!(
        "trained {} steps on {}: loss {:.4} -> {:.4}; checkpoint at {}",
        curve.len(),
        ds.name(),
        curve.first().expect("nonempty curve"),
        meta.final_loss,
        out.join(CHECKPOINT_DIR).display()
    );
    Ok(())
}

/// Guided sampling from a checkpoint: writes `samples.csv` and `trace.jsonl`.
pub fn cmd_sample(
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
    checkpoint_dir: &Path,
) -> CliResult<(Vec<Tensor>, GuidanceTrace)> {
    ensure_out(out)?;
    let (params, _) = checkpoint::load(checkpoint_dir)?;
    let sched = cfg.schedule()?;
    let spec = cfg.guidance_spec(&params.config)?;
    let (samples, trace) = asag_sample(
        &params,
        &sched,
        &spec,
        cfg.guidance.class,
        cfg.sample.steps,
        cfg.sample.chains,
        &Rng::new(seed),
    )?;

    let hash = cfg.hash();
    let stamp = Stamp {
        config_hash: &hash,
        seed,
    };
    files::write_samples_csv(&out.join("samples.csv"), &samples, stamp)?;
    files::write_trace_jsonl(&out.join("trace.jsonl"), &trace, stamp)?;
    println!(
        "sampled {} chains x {} tokens ({} method, s={}) into {}",
        samples.len(),
        params.config.n_tokens,
        spec.method.name(),
        spec.s,
        out.join("samples.csv").display()
    );
    Ok((samples, trace))
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct EvalOutput {
    pub config_hash: String,
    pub seed: u64,
    pub energy_distance: f64,
    pub mode_coverage: f64,
    pub mean_plan_entropy: f64,
}

/// Score a samples file against freshly generated ground truth; writes
/// `metrics.json`. A trace file, when given, contributes the mean perturbed
/// plan entropy (otherwise reported as 0).
pub fn cmd_eval(
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
    samples_path: &Path,
    trace_path: Option<&Path>,
) -> CliResult<EvalOutput> {
    ensure_out(out)?;
    let cloud = files::read_samples_csv(samples_path)?;
    let reference = reference_cloud(cfg)?;
    let centers = dataset_centers(cfg.dataset()?);

    let mean_plan_entropy = match trace_path {
        Some(p) => mean_trace_entropy(p)?,
        None => 0.0,
    };
    let report = EvalOutput {
        config_hash: cfg.hash(),
        seed,
        energy_distance: energy_distance(&cloud, &reference)?,
        mode_coverage: mode_coverage(&cloud, &centers, cfg.eval.coverage_radius)?,
        mean_plan_entropy,
    };
    if !report.energy_distance.is_finite() || !report.mode_coverage.is_finite() {
        return Err(CliError::Numerical("non-finite metric".into()));
    }
    files::write_json(&out.join("metrics.json"), &report)?;
    println!(
        "energy_distance {:.6} mode_coverage {:.3} -> {}",
        report.energy_distance,
        report.mode_coverage,
        out.join("metrics.json").display()
    );
    Ok(report)
}

fn mean_trace_entropy(path: &Path) -> CliResult<f64> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("trace {}: {e}", path.display())))?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| {
            CliError::Input(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        if let Some(h) = v.get("mean_row_entropy").and_then(|x| x.as_f64()) {
            sum += h;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct PlanDiagnostics {
    pub config_hash: String,
    pub seed: u64,
    pub mode: String,
    pub lambda: f64,
    pub eps_max: f64,
    pub iterations: usize,
    pub residual: f64,
    pub entropy: f64,
    pub converged: bool,
}

/// Solve one transport plan from Q/K matrix files; writes `plan.csv` and
/// `plan.json`.
pub fn cmd_plan(
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
    q_path: &Path,
    k_path: &Path,
    adversarial: bool,
) -> CliResult<PlanDiagnostics> {
    ensure_out(out)?;
    let q = files::read_matrix_csv(q_path)?;
    let k = files::read_matrix_csv(k_path)?;
    if q.shape != k.shape {
        return Err(CliError::Input(format!(
            "Q {:?} and K {:?} shapes differ",
            q.shape, k.shape
        )));
    }
    let scfg = cfg.sinkhorn_config(q.cols());
    let plan = sinkhorn_guidance::attention::head_plan(&q, &k, adversarial, &scfg)?;

    let hash = cfg.hash();
    let stamp = Stamp {
        config_hash: &hash,
        seed,
    };
    files::write_matrix_csv(&out.join("plan.csv"), &plan.plan, stamp)?;
    let diag = PlanDiagnostics {
        config_hash: hash.clone(),
        seed,
        mode: if adversarial {
            "adversarial".into()
        } else {
            "similarity".into()
        },
        lambda: scfg.lambda,
        eps_max: scfg.eps_max,
        iterations: plan.iterations,
        residual: plan.residual,
        entropy: plan_entropy(&plan)?,
        converged: plan.converged,
    };
    files::write_json(&out.join("plan.json"), &diag)?;
    println!(
        "{} plan: {} iterations, residual {:.3e}, entropy {:.6}",
        diag.mode, diag.iterations, diag.residual, diag.entropy
    );
    Ok(diag)
}

/// Guidance-scale sweep against the analytic reference; writes `sweep.csv`.
pub fn cmd_sweep(cfg: &RunConfig, seed: u64, out: &Path, checkpoint_dir: &Path) -> CliResult<()> {
    ensure_out(out)?;
    let (params, _) = checkpoint::load(checkpoint_dir)?;
    let sched = cfg.schedule()?;
    let spec = cfg.guidance_spec(&params.config)?;
    let reference = reference_cloud(cfg)?;
    let centers = dataset_centers(cfg.dataset()?);
    let rows = scale_sweep(
        &params,
        &sched,
        &spec,
        &cfg.sweep.scales,
        cfg.guidance.class,
        cfg.sample.steps,
        cfg.sample.chains,
        &Rng::new(seed),
        &reference,
        &centers,
        cfg.eval.coverage_radius,
    )?;
    let hash = cfg.hash();
    files::write_sweep_csv(
        &out.join("sweep.csv"),
        &rows,
        Stamp {
            config_hash: &hash,
            seed,
        },
    )?;
    println!(
        "swept {} scales -> {}",
        rows.len(),
        out.join("sweep.csv").display()
    );
    Ok(())
}
