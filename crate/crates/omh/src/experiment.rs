//! Experiment orchestration: single runs with their artifact files, sweep
//! expansion across config axes, checkpoint save/load, evaluation of saved
//! runs, and heatmap export.
//!
//! A run directory contains everything needed to reproduce and inspect it:
//!
//! ```text
//! config.cfg        canonical config (reparseable)
//! manifest.txt      step / seed / config hash
//! training_log.csv  per-step loss breakdown
//! metrics.csv       per-eval-point accuracy and mIoU rows
//! plans_report.csv  per-pair transport convergence report
//! heatmaps/         Z, A, A_reordered per adjacent pair (PGM + CSV)
//! checkpoint/       one CSV per parameter tensor
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::hierarchy::{
    apply_permutation, reorder_hierarchy, ClusterHead, HierarchyError, HierarchyStack,
};
use crate::linalg::{cosine_sim_plus, DenseMatrix, LinalgError};
use crate::optim::{
    evaluate_state, train, EvalRecord, Projector, StepRecord, TrainError, TrainState,
};
use crate::synthdata::{generate, SynthError};
use crate::transport::TransportError;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{0}")]
    State(String),
}

impl RunError {
    /// Process exit code: 1 for configuration problems, 2 for runtime ones.
    /// An unreadable config file counts as runtime (the flags were fine, the
    /// filesystem was not).
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(ConfigError::Io(_)) => 2,
            RunError::Config(_) => 1,
            _ => 2,
        }
    }
}

pub struct RunArtifacts {
    pub dir: PathBuf,
    pub history: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub heatmap_files: Vec<PathBuf>,
    pub state: TrainState,
}

/// Trains under `config` and writes the full artifact set to
/// `config.output_dir`.
pub fn run(config: &ExperimentConfig) -> Result<RunArtifacts, RunError> {
    config.validate()?;
    let dir = PathBuf::from(&config.output_dir);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.cfg"), config.format())?;

    let data = generate(&config.synthetic_params(), config.data_seed)?;
    let outcome = train(config, &data)?;
    let mut state = outcome.state;

    write_training_log(&dir.join("training_log.csv"), config.depth, &outcome.history)?;
    write_metrics(&dir.join("metrics.csv"), &config.run_id, &outcome.evals)?;

    // Final plans from the trained heads, for the report and the figures.
    state.stack.build_plans(&config.sinkhorn_settings())?;
    write_plans_report(&dir.join("plans_report.csv"), &state.stack)?;
    let heatmap_files = export_heatmaps(&state.stack, &dir.join("heatmaps"))?;
    write_checkpoint(&state, &dir.join("checkpoint"))?;
    write_manifest(&dir.join("manifest.txt"), config, state.step)?;

    Ok(RunArtifacts { dir, history: outcome.history, evals: outcome.evals, heatmap_files, state })
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn write_training_log(path: &Path, depth: usize, history: &[StepRecord]) -> io::Result<()> {
    let mut out = String::from("step,loss_base");
    for i in 0..depth {
        let _ = write!(out, ",loss_cluster_{i}");
    }
    for i in 0..depth.saturating_sub(1) {
        let _ = write!(out, ",loss_match_{i}_{}", i + 1);
    }
    out.push_str(",loss_total\n");
    for r in history {
        let _ = write!(out, "{},{}", r.step, fmt_f64(r.base));
        for v in &r.cluster {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        for v in &r.matching {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        let _ = writeln!(out, ",{}", fmt_f64(r.total));
    }
    fs::write(path, out)
}

fn write_metrics(path: &Path, run_id: &str, evals: &[EvalRecord]) -> io::Result<()> {
    let mut out = String::from("run_id,step,level,target,accuracy,miou\n");
    for r in evals {
        let _ = writeln!(
            out,
            "{run_id},{},{},{},{},{}",
            r.step,
            r.level,
            r.target.as_str(),
            fmt_f64(r.accuracy),
            fmt_f64(r.miou)
        );
    }
    fs::write(path, out)
}

fn write_plans_report(path: &Path, stack: &HierarchyStack) -> io::Result<()> {
    let mut out = String::from("pair,temperature,iterations,violation,entropy\n");
    for (i, plan) in stack.plans.iter().enumerate() {
        let _ = writeln!(out, "{i}_{},{}", i + 1, plan.report_csv_line());
    }
    fs::write(path, out)
}

fn write_manifest(path: &Path, config: &ExperimentConfig, step: usize) -> io::Result<()> {
    let text = format!(
        "step = {step}\nseed = {}\nconfig_hash = {}\ndeterminism = {}\n",
        config.seed,
        config.hash(),
        config.determinism
    );
    fs::write(path, text)
}

/// Plain-text 8-bit PGM (P2), entries scaled so the matrix maximum maps to
/// 255. An all-zero matrix exports as all black.
pub fn write_pgm(m: &DenseMatrix, path: &Path) -> io::Result<()> {
    let max = m.max_value().max(0.0);
    let mut out = String::new();
    let _ = writeln!(out, "P2");
    let _ = writeln!(out, "{} {}", m.cols(), m.rows());
    let _ = writeln!(out, "255");
    for r in 0..m.rows() {
        let line: Vec<String> = m
            .row(r)
            .iter()
            .map(|&v| {
                let scaled =
                    if max > 0.0 { (v.max(0.0) / max * 255.0).round() as i64 } else { 0 };
                scaled.clamp(0, 255).to_string()
            })
            .collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    fs::write(path, out)
}

/// Exports, per adjacent level pair, the center affinity `Z`, the transport
/// plan `A`, and the row/column-reordered plan, each as PGM and CSV.
/// Requires plans to have been built.
pub fn export_heatmaps(stack: &HierarchyStack, dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    if stack.depth() > 1 && stack.plans.len() != stack.depth() - 1 {
        return Err(RunError::State(format!(
            "{} plans for depth {}; build plans before exporting",
            stack.plans.len(),
            stack.depth()
        )));
    }
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (i, plan) in stack.plans.iter().enumerate() {
        let j = i + 1;
        let z = cosine_sim_plus(&stack.heads[i].centers, &stack.heads[j].centers)?;
        let (row_perm, col_perm) = reorder_hierarchy(plan);
        let reordered = apply_permutation(&plan.plan, &row_perm, &col_perm);
        for (tag, matrix) in [("Z", &z), ("A", &plan.plan), ("A_reordered", &reordered)] {
            let pgm = dir.join(format!("pair_{i}_{j}_{tag}.pgm"));
            write_pgm(matrix, &pgm)?;
            let csv = dir.join(format!("pair_{i}_{j}_{tag}.csv"));
            matrix.write_csv(&csv)?;
            files.push(pgm);
            files.push(csv);
        }
    }
    Ok(files)
}

fn write_checkpoint(state: &TrainState, dir: &Path) -> Result<(), RunError> {
    fs::create_dir_all(dir)?;
    state.projector.w1.write_csv(&dir.join("projector_w1.csv"))?;
    state.projector.b1.write_csv(&dir.join("projector_b1.csv"))?;
    state.projector.w2.write_csv(&dir.join("projector_w2.csv"))?;
    state.projector.b2.write_csv(&dir.join("projector_b2.csv"))?;
    for (i, head) in state.stack.heads.iter().enumerate() {
        head.centers.write_csv(&dir.join(format!("head_{i}.csv")))?;
    }
    Ok(())
}

/// Loads the projector and heads saved by a run. Plans are not stored; they
/// are cheap to rebuild from the heads.
pub fn load_checkpoint(
    run_dir: &Path,
) -> Result<(ExperimentConfig, Projector, HierarchyStack), RunError> {
    let config = ExperimentConfig::from_file(&run_dir.join("config.cfg"))?;
    let dir = run_dir.join("checkpoint");
    let projector = Projector {
        w1: DenseMatrix::read_csv(&dir.join("projector_w1.csv"))?,
        b1: DenseMatrix::read_csv(&dir.join("projector_b1.csv"))?,
        w2: DenseMatrix::read_csv(&dir.join("projector_w2.csv"))?,
        b2: DenseMatrix::read_csv(&dir.join("projector_b2.csv"))?,
    };
    let mut heads = Vec::with_capacity(config.depth);
    for level in 0..config.depth {
        let centers = DenseMatrix::read_csv(&dir.join(format!("head_{level}.csv")))?;
        heads.push(ClusterHead::new(level, centers)?);
    }
    let stack = HierarchyStack::new(config.hierarchy_config(), heads)?;
    Ok((config, projector, stack))
}

/// Re-evaluates a saved run against its (regenerated) dataset and writes
/// `eval_metrics.csv` next to the checkpoint.
pub fn evaluate_run(run_dir: &Path) -> Result<Vec<EvalRecord>, RunError> {
    let (config, projector, stack) = load_checkpoint(run_dir)?;
    let data = generate(&config.synthetic_params(), config.data_seed)?;
    let step = read_manifest_step(&run_dir.join("manifest.txt")).unwrap_or(config.steps);
    let mut rows = evaluate_state(&projector, &stack, &data)?;
    for row in &mut rows {
        row.step = step;
    }
    write_metrics(&run_dir.join("eval_metrics.csv"), &config.run_id, &rows)?;
    Ok(rows)
}

fn read_manifest_step(path: &Path) -> Option<usize> {
    let text = fs::read_to_string(path).ok()?;
    for line in text.lines() {
        if let Some((key, value)) = line.split_once('=') {
            if key.trim() == "step" {
                return value.trim().parse().ok();
            }
        }
    }
    None
}

/// Rebuilds plans from a saved checkpoint and exports its heatmaps (to
/// `out`, defaulting to the run's own `heatmaps/`).
pub fn export_run(run_dir: &Path, out: Option<&Path>) -> Result<Vec<PathBuf>, RunError> {
    let (config, _projector, mut stack) = load_checkpoint(run_dir)?;
    stack.build_plans(&config.sinkhorn_settings())?;
    let target = out.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("heatmaps"));
    export_heatmaps(&stack, &target)
}

/// One expanded sweep run: axis assignments plus the outcome.
pub struct SweepOutcome {
    pub name: String,
    pub dir: PathBuf,
    pub result: Result<(), String>,
}

/// Expands the Cartesian product of the sweep axes and runs each combination
/// in its own directory (named after the swept values) on its own thread.
/// Per-run determinism is unaffected: each run is single-threaded.
pub fn sweep(
    base: &ExperimentConfig,
    axes: &[(String, Vec<String>)],
) -> Result<Vec<SweepOutcome>, RunError> {
    if axes.is_empty() {
        return Err(ConfigError::Invalid("sweep requires at least one axis".into()).into());
    }
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (field, values) in axes {
        let mut next = Vec::with_capacity(combos.len() * values.len());
        for combo in &combos {
            for value in values {
                let mut c = combo.clone();
                c.push((field.clone(), value.clone()));
                next.push(c);
            }
        }
        combos = next;
    }

    let root = PathBuf::from(&base.output_dir);
    fs::create_dir_all(&root)?;

    let mut configs = Vec::with_capacity(combos.len());
    for combo in &combos {
        let name: Vec<String> =
            combo.iter().map(|(f, v)| format!("{f}_{}", sanitize(v))).collect();
        let name = name.join("__");
        let mut config = base.clone();
        config.sweep_axes.clear();
        for (field, value) in combo {
            config.set(field, value)?;
        }
        config.output_dir = root.join(&name).to_string_lossy().into_owned();
        config.run_id = name.clone();
        config.validate()?;
        configs.push((name, config));
    }

    let mut outcomes = Vec::with_capacity(configs.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .map(|(name, config)| {
                let handle = scope.spawn(move || run(config).map(|_| ()).map_err(|e| e.to_string()));
                (name.clone(), PathBuf::from(&config.output_dir), handle)
            })
            .collect();
        for (name, dir, handle) in handles {
            let result = handle.join().unwrap_or_else(|_| Err("worker panicked".into()));
            outcomes.push(SweepOutcome { name, dir, result });
        }
    });

    let mut summary = String::from("run,dir,status\n");
    for o in &outcomes {
        let status = match &o.result {
            Ok(()) => "ok".to_string(),
            Err(e) => format!("error: {}", e.replace(',', ";")),
        };
        let _ = writeln!(summary, "{},{},{status}", o.name, o.dir.display());
    }
    fs::write(root.join("sweep_summary.csv"), summary)?;
    Ok(outcomes)
}

fn sanitize(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// Named ablation presets mirroring the sweep tables: hierarchy depth,
/// expansion factor, and transport temperature.
pub fn preset_axes(name: &str) -> Option<Vec<(String, Vec<String>)>> {
    let axis = |field: &str, values: &[&str]| {
        vec![(field.to_string(), values.iter().map(|v| v.to_string()).collect())]
    };
    match name {
        "tab5-levels" => Some(axis("depth", &["1", "2", "3", "4"])),
        "tab6-expansion" => Some(axis("expansion", &["1", "1.5", "2", "3"])),
        "tab7-temperature" => Some(axis("ot_temperature", &["0.02", "0.05", "0.10"])),
        _ => None,
    }
}
