//! `depthgate`: train and analyze conditional-depth transformers from the
//! command line.
//!
//! The output directory is `--out` when given, else `$DEPTHGATE_OUT`, else
//! `./out`. Configs are preset names (see `matrix --help`) or TOML files
//! with the same fields the run snapshot echoes into `config.json`.

mod curves;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use curves::{rolling_mean, write_curve_csv, SeriesSet};
use depthgate::checkpoint;
use depthgate::data::{synth_corpus, Corpus};
use depthgate::experiments::{matrix_runs, ExperimentConfig, MAIN_GRID, MAIN_SEEDS, PRESET_NAMES};
use depthgate::metrics::{aggregate_seeds, paired_summary_deltas, SeedAggregate};
use depthgate::selfcheck::{
    check_derangements, check_gradients, check_oracle, check_proxy_arithmetic,
    check_st_forward_identity, check_summary_fidelity, check_zero_init_identity,
};
use depthgate::tensor::Scalar;
use depthgate::trainer::{
    pretrain_backbone, read_log, run_experiment, BackboneSource, LogLine, RunSummary,
};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Grad-norm smoothing window for exported curves, in steps.
const ROLLING_WINDOW: usize = 200;

#[derive(Parser)]
#[command(name = "depthgate", version, about = "conditional-depth transformer training lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a dense backbone and save it as a reusable checkpoint.
    Pretrain(PretrainArgs),
    /// Execute one experiment: gate training over a frozen backbone.
    Run(RunArgs),
    /// Execute a grid of experiments sharing one pretrained backbone.
    Matrix(MatrixArgs),
    /// Aggregate run summaries into a per-config table with seed stats.
    Summarize(SummarizeArgs),
    /// Emit per-metric CSVs with per-seed columns plus mean/std.
    ExportCurves(ExportArgs),
    /// Run the built-in gradient and invariant checks.
    Check(CheckArgs),
    /// Generate a synthetic byte-level corpus file.
    Synth(SynthArgs),
}

#[derive(Copy, Clone, PartialEq, ValueEnum)]
enum Dtype {
    F64,
    F32,
}

#[derive(Args)]
struct PretrainArgs {
    /// Preset name or TOML config path.
    #[arg(long)]
    config: String,
    /// UTF-8 text corpus, tokenized as bytes.
    #[arg(long, default_value = "data/sample.txt")]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = Dtype::F64)]
    dtype: Dtype,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Preset name or TOML config path.
    #[arg(long)]
    config: String,
    #[arg(long, default_value = "data/sample.txt")]
    corpus: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Reuse a pretrained backbone checkpoint instead of pretraining inline.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Override the controller-phase step count; the optimizer schedule
    /// (total and warmup steps) rescales to match.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long, value_enum, default_value_t = Dtype::F64)]
    dtype: Dtype,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MatrixArgs {
    /// Comma-separated preset names; default is the full experiment grid
    /// (8 presets x 3 seeds, costmatch x 1, two b25 presets x 2).
    #[arg(long, value_delimiter = ',')]
    experiments: Option<Vec<String>>,
    /// Comma-separated seeds; without --experiments this applies to the
    /// eight main-grid presets.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, default_value = "data/sample.txt")]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = Dtype::F64)]
    dtype: Dtype,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SummarizeArgs {
    /// Directory holding the run directories (default: output directory).
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Also write the aggregate table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Directory holding the run directories (default: output directory).
    #[arg(long)]
    dir: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// Acceptance-sized sample counts (slower).
    #[arg(long)]
    full: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1_200_000)]
    bytes: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    path: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Run(a) => cmd_run(a),
        Cmd::Matrix(a) => cmd_matrix(a),
        Cmd::Summarize(a) => cmd_summarize(a),
        Cmd::ExportCurves(a) => cmd_export_curves(a),
        Cmd::Check(a) => cmd_check(a),
        Cmd::Synth(a) => cmd_synth(a),
    }
}

fn resolve_out(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("DEPTHGATE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// A preset name, or a path to a TOML file with the full config.
fn load_config(spec: &str) -> Result<ExperimentConfig> {
    let path = Path::new(spec);
    if path.extension().is_some_and(|e| e == "toml") || path.exists() {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    } else {
        Ok(ExperimentConfig::preset(spec)?)
    }
}

// ── pretrain ────────────────────────────────────────────────────────────────

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let out = resolve_out(a.out);
    std::fs::create_dir_all(&out)
        .with_context(|| format!("cannot create {}", out.display()))?;
    let corpus = Corpus::load(&a.corpus, cfg.val_fraction, cfg.pretrain_seed)?;
    let path = out.join("backbone.ckpt");
    let t = Instant::now();
    match a.dtype {
        Dtype::F64 => pretrain_to::<f64>(&cfg, &corpus, &path)?,
        Dtype::F32 => pretrain_to::<f32>(&cfg, &corpus, &path)?,
    }
    println!(
        "wrote {} after {} dense steps in {:.1?}",
        path.display(),
        cfg.pretrain_steps,
        t.elapsed()
    );
    Ok(())
}

fn pretrain_to<S: Scalar>(cfg: &ExperimentConfig, corpus: &Corpus, path: &Path) -> Result<()> {
    let store = pretrain_backbone::<S>(cfg, corpus)?;
    checkpoint::save(&store, path)?;
    Ok(())
}

// ── run ─────────────────────────────────────────────────────────────────────

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.steps {
        cfg.steps = s;
        cfg.optim.total_steps = s;
        cfg.optim.warmup_steps = (s / 20).max(1);
    }
    if let Some(s) = a.pretrain_steps {
        cfg.pretrain_steps = s;
    }
    if let Some(e) = a.eval_every {
        cfg.eval_every = e;
    }
    let out = resolve_out(a.out);
    let corpus = Corpus::load(&a.corpus, cfg.val_fraction, cfg.pretrain_seed)?;
    let source = match &a.backbone {
        Some(p) => BackboneSource::Checkpoint(p),
        None => BackboneSource::PretrainInline,
    };
    let t = Instant::now();
    let s = match a.dtype {
        Dtype::F64 => run_experiment::<f64>(&cfg, a.seed, &corpus, &out, source)?,
        Dtype::F32 => run_experiment::<f32>(&cfg, a.seed, &corpus, &out, source)?,
    };
    println!(
        "{}-s{} done in {:.1?}: endpoint eval LM {:.4}, best {:.4}, train/full {:.3}, infer/full {:.3}",
        cfg.name,
        a.seed,
        t.elapsed(),
        s.endpoint_eval_lm,
        s.best_eval_lm,
        s.compute_vs_full_measured,
        s.infer_vs_full
    );
    Ok(())
}

// ── matrix ──────────────────────────────────────────────────────────────────

fn cmd_matrix(a: MatrixArgs) -> Result<()> {
    let plan: Vec<(String, u64)> = match (&a.experiments, &a.seeds) {
        (None, None) => matrix_runs(),
        (names, seeds) => {
            let names: Vec<String> = match names {
                Some(n) => n.clone(),
                None => MAIN_GRID.iter().map(|s| s.to_string()).collect(),
            };
            let seeds = seeds.clone().unwrap_or_else(|| MAIN_SEEDS.to_vec());
            names
                .iter()
                .flat_map(|n| seeds.iter().map(move |&s| (n.clone(), s)))
                .collect()
        }
    };

    let mut configs: BTreeMap<String, ExperimentConfig> = BTreeMap::new();
    for (name, _) in &plan {
        if !configs.contains_key(name) {
            configs.insert(name.clone(), load_config(name)?);
        }
    }
    let first = configs.values().next().expect("nonempty plan");
    for c in configs.values() {
        ensure!(
            c.model == first.model
                && c.pretrain_steps == first.pretrain_steps
                && c.pretrain_seed == first.pretrain_seed
                && c.batch_size == first.batch_size
                && c.optim == first.optim
                && c.val_fraction == first.val_fraction,
            "preset {} cannot share a backbone with {}: pre-phase settings differ",
            c.name,
            first.name
        );
    }

    let out = resolve_out(a.out);
    std::fs::create_dir_all(&out)
        .with_context(|| format!("cannot create {}", out.display()))?;
    let corpus = Corpus::load(&a.corpus, first.val_fraction, first.pretrain_seed)?;

    let ckpt = out.join("backbone.ckpt");
    if ckpt.exists() {
        println!("reusing backbone {}", ckpt.display());
    } else {
        let t = Instant::now();
        match a.dtype {
            Dtype::F64 => pretrain_to::<f64>(first, &corpus, &ckpt)?,
            Dtype::F32 => pretrain_to::<f32>(first, &corpus, &ckpt)?,
        }
        println!(
            "pretrained backbone ({} steps) in {:.1?} -> {}",
            first.pretrain_steps,
            t.elapsed(),
            ckpt.display()
        );
    }

    let total = plan.len();
    for (i, (name, seed)) in plan.iter().enumerate() {
        let cfg = &configs[name];
        if out.join(format!("{name}-s{seed}")).join("summary.json").exists() {
            println!("[{}/{total}] {name}-s{seed}: summary exists, skipping", i + 1);
            continue;
        }
        let t = Instant::now();
        let src = BackboneSource::Checkpoint(&ckpt);
        let s = match a.dtype {
            Dtype::F64 => run_experiment::<f64>(cfg, *seed, &corpus, &out, src)?,
            Dtype::F32 => run_experiment::<f32>(cfg, *seed, &corpus, &out, src)?,
        };
        println!(
            "[{}/{total}] {name}-s{seed}: endpoint {:.4}, best {:.4} ({:.1?})",
            i + 1,
            s.endpoint_eval_lm,
            s.best_eval_lm,
            t.elapsed()
        );
    }
    println!("matrix complete: {total} runs in {}", out.display());
    Ok(())
}

// ── summarize ───────────────────────────────────────────────────────────────

fn preset_rank(name: &str) -> usize {
    PRESET_NAMES.iter().position(|p| *p == name).unwrap_or(PRESET_NAMES.len())
}

/// All summaries under `dir`, grouped by config name in grid order.
fn scan_summaries(dir: &Path) -> Result<Vec<Vec<RunSummary>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path().join("summary.json")))
        .filter(|p| p.exists())
        .collect();
    paths.sort();
    let mut groups: BTreeMap<(usize, String), Vec<RunSummary>> = BTreeMap::new();
    for p in paths {
        let text = std::fs::read_to_string(&p)
            .with_context(|| format!("cannot read {}", p.display()))?;
        let s: RunSummary = serde_json::from_str(&text)
            .with_context(|| format!("cannot parse {}", p.display()))?;
        let key = (preset_rank(&s.config.name), s.config.name.clone());
        groups.entry(key).or_default().push(s);
    }
    let mut out: Vec<Vec<RunSummary>> = groups.into_values().collect();
    for g in &mut out {
        g.sort_by_key(|s| s.seed);
    }
    Ok(out)
}

fn fmt_hits(agg: &SeedAggregate) -> String {
    if agg.hits.is_empty() {
        return "-".into();
    }
    agg.hits
        .iter()
        .map(|h| match h.mean_step {
            Some(step) => format!("{}@{step:.0}", h.hit_count),
            None => "-".into(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn print_table(aggs: &[SeedAggregate]) {
    println!(
        "{:<13} {:>2}  {:<17} {:<17} {:>10} {:>10} {:>9} {:>9}  {}",
        "config", "n", "endpoint", "best", "train/full", "infer/full", "qf-qc-l2", "score-var",
        "hits"
    );
    for a in aggs {
        println!(
            "{:<13} {:>2}  {:<17} {:<17} {:>10.3} {:>10.3} {:>9.2e} {:>9.2e}  {}",
            a.name,
            a.seeds.len(),
            format!("{:.4} \u{b1}{:.4}", a.endpoint_eval_lm.mean, a.endpoint_eval_lm.std),
            format!("{:.4} \u{b1}{:.4}", a.best_eval_lm.mean, a.best_eval_lm.std),
            a.compute_vs_full_measured.mean,
            a.infer_vs_full,
            a.final_diag_qf_qc_l2.mean,
            a.final_diag_util_score_var.mean,
            fmt_hits(a)
        );
    }
}

/// (baseline, challenger) pairs whose seed-matched deltas are worth a line.
const PAIRS: &[(&str, &str)] = &[
    ("g1-base", "g3"),
    ("g3", "a1"),
    ("g3", "a2"),
    ("g3", "a3-g3"),
    ("g1-base", "a3-g1"),
    ("g1-base", "g1-costmatch"),
    ("g1-b25", "g3-b25"),
];

fn print_paired(groups: &[Vec<RunSummary>]) {
    let by_name = |n: &str| groups.iter().find(|g| g[0].config.name == n);
    let mut header = false;
    for (base, chal) in PAIRS {
        let (Some(b), Some(c)) = (by_name(base), by_name(chal)) else { continue };
        let Ok(d) = paired_summary_deltas(c, b, |s| s.endpoint_eval_lm) else { continue };
        if !header {
            println!("\npaired endpoint deltas (challenger - baseline; negative favors challenger)");
            header = true;
        }
        println!(
            "  {base:<13} -> {chal:<13} {:+.4} mean, {}/{} seeds same sign",
            d.mean,
            d.consistent,
            d.deltas.len()
        );
    }
}

fn write_summary_csv(path: &Path, aggs: &[SeedAggregate]) -> Result<()> {
    let mut text = String::from(
        "config,n_seeds,endpoint_mean,endpoint_std,best_mean,best_std,avg_half_mean,avg_half_std,\
         avg_full_mean,avg_full_std,grad_norm_mean,grad_norm_std,qf_qc_l2_mean,qf_qc_l2_std,\
         score_var_mean,score_var_std,train_vs_full_mean,train_vs_full_std,infer_vs_full",
    );
    let n_thr = aggs.iter().map(|a| a.hits.len()).max().unwrap_or(0);
    for i in 0..n_thr {
        text.push_str(&format!(",hit{i}_count,hit{i}_mean_step"));
    }
    text.push('\n');
    for a in aggs {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            a.name,
            a.seeds.len(),
            a.endpoint_eval_lm.mean,
            a.endpoint_eval_lm.std,
            a.best_eval_lm.mean,
            a.best_eval_lm.std,
            a.avg_lm_first_half.mean,
            a.avg_lm_first_half.std,
            a.avg_lm_full.mean,
            a.avg_lm_full.std,
            a.grad_norm_mean.mean,
            a.grad_norm_mean.std,
            a.final_diag_qf_qc_l2.mean,
            a.final_diag_qf_qc_l2.std,
            a.final_diag_util_score_var.mean,
            a.final_diag_util_score_var.std,
            a.compute_vs_full_measured.mean,
            a.compute_vs_full_measured.std,
            a.infer_vs_full,
        ));
        for i in 0..n_thr {
            match a.hits.get(i) {
                Some(h) => text.push_str(&format!(
                    ",{},{}",
                    h.hit_count,
                    h.mean_step.map_or(String::new(), |s| s.to_string())
                )),
                None => text.push_str(",,"),
            }
        }
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn cmd_summarize(a: SummarizeArgs) -> Result<()> {
    let dir = a.dir.unwrap_or_else(|| resolve_out(None));
    let groups = scan_summaries(&dir)?;
    ensure!(!groups.is_empty(), "no run summaries under {}", dir.display());
    let aggs: Vec<SeedAggregate> = groups
        .iter()
        .map(|g| aggregate_seeds(g))
        .collect::<Result<_, _>>()?;
    print_table(&aggs);
    print_paired(&groups);
    if let Some(p) = a.csv {
        write_summary_csv(&p, &aggs)?;
        println!("\nwrote {}", p.display());
    }
    Ok(())
}

// ── export-curves ───────────────────────────────────────────────────────────

struct RunCurves {
    seed: u64,
    steps: Vec<usize>,
    lm: Vec<f64>,
    grad: Vec<f64>,
    gate: Vec<f64>,
    eval_steps: Vec<usize>,
    eval: Vec<f64>,
}

fn curves_of(seed: u64, lines: &[LogLine]) -> RunCurves {
    let mut c = RunCurves {
        seed,
        steps: vec![],
        lm: vec![],
        grad: vec![],
        gate: vec![],
        eval_steps: vec![],
        eval: vec![],
    };
    for line in lines {
        match line {
            LogLine::Step(s) => {
                c.steps.push(s.step);
                c.lm.push(s.lm_loss);
                c.grad.push(s.grad_norm);
                let layers = s.mean_gate_prob.len().max(1) as f64;
                c.gate.push(s.mean_gate_prob.iter().sum::<f64>() / layers);
            }
            LogLine::Eval(e) => {
                c.eval_steps.push(e.step);
                c.eval.push(e.eval_lm_loss);
            }
        }
    }
    c
}

fn series(
    runs: &[RunCurves],
    axis: fn(&RunCurves) -> &[usize],
    values: impl Fn(&RunCurves) -> Vec<f64>,
) -> Result<SeriesSet> {
    let steps = axis(&runs[0]).to_vec();
    for r in runs {
        ensure!(
            axis(r) == steps.as_slice(),
            "seed {} logged a different step axis; curves need aligned runs",
            r.seed
        );
    }
    Ok(SeriesSet { steps, by_seed: runs.iter().map(|r| (r.seed, values(r))).collect() })
}

fn cmd_export_curves(a: ExportArgs) -> Result<()> {
    let dir = a.dir.unwrap_or_else(|| resolve_out(None));
    let mut run_dirs: Vec<PathBuf> = std::fs::read_dir(&dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("config.json").exists() && p.join("log.jsonl").exists())
        .collect();
    run_dirs.sort();
    ensure!(!run_dirs.is_empty(), "no run logs under {}", dir.display());

    let mut groups: BTreeMap<(usize, String), Vec<RunCurves>> = BTreeMap::new();
    for rd in run_dirs {
        let snap: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(rd.join("config.json"))?)
                .with_context(|| format!("cannot parse {}/config.json", rd.display()))?;
        let name = snap["config"]["name"]
            .as_str()
            .with_context(|| format!("{}/config.json has no config.name", rd.display()))?
            .to_string();
        let seed = snap["seed"]
            .as_u64()
            .with_context(|| format!("{}/config.json has no seed", rd.display()))?;
        let lines = read_log(&rd.join("log.jsonl"))?;
        groups
            .entry((preset_rank(&name), name))
            .or_default()
            .push(curves_of(seed, &lines));
    }

    let curve_dir = dir.join("curves");
    std::fs::create_dir_all(&curve_dir)
        .with_context(|| format!("cannot create {}", curve_dir.display()))?;
    let mut written = 0;
    for ((_, name), mut runs) in groups {
        runs.sort_by_key(|r| r.seed);
        let eval = series(&runs, |r| &r.eval_steps, |r| r.eval.clone())?;
        write_curve_csv(&curve_dir, &name, "eval_lm", &eval)?;
        let lm = series(&runs, |r| &r.steps, |r| r.lm.clone())?;
        write_curve_csv(&curve_dir, &name, "lm_loss", &lm)?;
        let grad = series(&runs, |r| &r.steps, |r| rolling_mean(&r.grad, ROLLING_WINDOW))?;
        write_curve_csv(&curve_dir, &name, "grad_norm", &grad)?;
        let gate = series(&runs, |r| &r.steps, |r| r.gate.clone())?;
        write_curve_csv(&curve_dir, &name, "mean_gate_prob", &gate)?;
        written += 4;
    }
    println!("wrote {written} CSVs to {}", curve_dir.display());
    Ok(())
}

// ── check ───────────────────────────────────────────────────────────────────

fn cmd_check(a: CheckArgs) -> Result<()> {
    let (n_grad, n_st, n_zero, n_der) =
        if a.full { (20, 100, 25, 100_000) } else { (6, 30, 10, 20_000) };
    let reports = [
        check_gradients(n_grad, 2024),
        check_st_forward_identity(n_st, 2025),
        check_zero_init_identity(n_zero, 2026),
        check_proxy_arithmetic(),
        check_oracle(2027),
        check_derangements(n_der, 2028),
        check_summary_fidelity(),
    ];
    let mut failed = 0;
    for r in &reports {
        println!("{} {:<22} {}", if r.passed { "ok  " } else { "FAIL" }, r.name, r.detail);
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", reports.len());
    }
    println!("all {} checks passed", reports.len());
    Ok(())
}

// ── synth ───────────────────────────────────────────────────────────────────

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let text = synth_corpus(a.bytes, a.seed);
    if let Some(parent) = a.path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("cannot create {}", parent.display()))?;
        }
    }
    std::fs::write(&a.path, &text)
        .with_context(|| format!("cannot write {}", a.path.display()))?;
    println!("wrote {} ({} bytes, seed {})", a.path.display(), text.len(), a.seed);
    Ok(())
}
