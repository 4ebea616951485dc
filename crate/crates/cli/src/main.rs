//! `projfold` command-line front-end.
//!
//! Exit codes: 0 on success, 1 when a verified property fails (theorem
//! violation, merge deviation above tolerance), 2 on usage or input errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use projfold::analysis::{check_verdicts, sweep_report, verify_theorems};
use projfold::compress::{
    compress_checkpoint, magnitude_select, optimal_fold, plan_layer, write_compressed, CompressConfig,
    FoldOptions, MagnitudeCriterion, Method, RankMode,
};
use projfold::matrixio::load_checkpoint;
use projfold::toynet::{
    fold_equivalence_check, local_lipschitz_estimate, loss_perturbation, mse_loss, prune_equivalence_check,
    EvalBatch, ToyMlp,
};
use projfold::Error;

/// Largest tolerated output gap between a folded net and its merged form.
const EQUIVALENCE_TOL: f64 = 1e-9;

#[derive(Parser)]
#[command(
    name = "projfold",
    version,
    about = "Calibration-free pruning and folding of weight checkpoints"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress every (layer, successor) pair of a checkpoint
    Compress {
        #[command(flatten)]
        io: IoArgs,
        /// Fraction of rows kept per layer, in (0, 1]
        #[arg(long)]
        ratio: f64,
        #[arg(long, value_enum, default_value_t = MethodArg::Fold)]
        method: MethodArg,
        #[arg(long, value_enum, default_value_t = RankModeArg::Matched)]
        rank_mode: RankModeArg,
        #[command(flatten)]
        fold: FoldArgs,
    },
    /// Write per-rank error reports, one CSV per layer
    Sweep {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        fold: FoldArgs,
    },
    /// Check the pruning/folding error chain at every rank of every layer
    Verify {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        fold: FoldArgs,
    },
    /// Fold and prune a seeded toy network and report equivalence and loss changes
    Demo {
        /// Layer widths, input first: d,h1,...,c
        #[arg(long, default_value = "16,32,32,4")]
        dims: String,
        /// Rows kept in the first hidden layer (default: half its width)
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = CriterionArg::L2)]
        criterion: CriterionArg,
    },
}

#[derive(Args)]
struct IoArgs {
    /// Checkpoint manifest (JSON)
    #[arg(long)]
    input: PathBuf,
    /// Output directory (default: next to the manifest)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FoldArgs {
    #[arg(long, value_enum, default_value_t = CriterionArg::L2)]
    criterion: CriterionArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Exhaustive k-means (layers of at most 12 rows)
    #[arg(long)]
    exact: bool,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    #[arg(long, default_value_t = projfold::clustering::DEFAULT_MAX_SWEEPS)]
    max_sweeps: usize,
}

impl FoldArgs {
    fn options(&self) -> Result<FoldOptions, Error> {
        if self.restarts == 0 || self.max_sweeps == 0 {
            return Err(Error::InvalidValue(
                "--restarts and --max-sweeps must be at least 1".into(),
            ));
        }
        Ok(FoldOptions {
            seed: self.seed,
            exact: self.exact,
            max_sweeps: self.max_sweeps,
            restarts: self.restarts,
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Mag1,
    Mag2,
    Fold,
    SingletonFold,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Mag1 => Method::Mag1,
            MethodArg::Mag2 => Method::Mag2,
            MethodArg::Fold => Method::Fold,
            MethodArg::SingletonFold => Method::SingletonFold,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    L1,
    L2,
}

impl From<CriterionArg> for MagnitudeCriterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::L1 => MagnitudeCriterion::L1,
            CriterionArg::L2 => MagnitudeCriterion::L2,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RankModeArg {
    Matched,
    TheoremSlack,
}

impl From<RankModeArg> for RankMode {
    fn from(r: RankModeArg) -> Self {
        match r {
            RankModeArg::Matched => RankMode::Matched,
            RankModeArg::TheoremSlack => RankMode::TheoremSlack,
        }
    }
}

/// Outcome of a command that ran to completion.
enum Outcome {
    Ok,
    PropertyFailed,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Compress {
            io,
            ratio,
            method,
            rank_mode,
            fold,
        } => cmd_compress(&io, ratio, method.into(), rank_mode.into(), &fold),
        Command::Sweep { io, fold } => cmd_sweep(&io, &fold),
        Command::Verify { input, fold } => cmd_verify(&input, &fold),
        Command::Demo {
            dims,
            k,
            seed,
            criterion,
        } => cmd_demo(&dims, k, seed, criterion.into()),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::PropertyFailed) => ExitCode::from(1),
        Err(e @ Error::TheoremViolation { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn default_out(input: &Path, name: &str) -> PathBuf {
    input.parent().unwrap_or_else(|| Path::new(".")).join(name)
}

fn cmd_compress(
    io: &IoArgs,
    ratio: f64,
    method: Method,
    rank_mode: RankMode,
    fold: &FoldArgs,
) -> Result<Outcome, Error> {
    let cfg = CompressConfig {
        ratio,
        method,
        criterion: fold.criterion.into(),
        rank_mode,
        fold: fold.options()?,
    };
    cfg.validate()?;
    let ckpt = load_checkpoint(&io.input)?;
    let (out, meta) = compress_checkpoint(&ckpt, &cfg)?;
    let dir = io
        .out
        .clone()
        .unwrap_or_else(|| default_out(&io.input, "compressed"));
    write_compressed(&out, &meta, &dir)?;

    let width = meta
        .per_layer
        .iter()
        .map(|r| r.name.len())
        .max()
        .unwrap_or(5)
        .max(5);
    println!(
        "{:<width$}  {:>11}  {:>8}  {:>12}",
        "layer", "rows", "mode", "error"
    );
    for r in &meta.per_layer {
        let mode = match r.mode {
            projfold::compress::CompressionMode::Pruned => "pruned",
            projfold::compress::CompressionMode::Folded => "folded",
        };
        println!(
            "{:<width$}  {:>11}  {:>8}  {:>12.6e}",
            r.name,
            format!("{}->{}", r.m, r.k),
            mode,
            r.error_sq.sqrt()
        );
    }
    println!("wrote {}", dir.display());
    Ok(Outcome::Ok)
}

/// Layer names may contain path separators; keep file names flat.
fn csv_name(layer: &str) -> String {
    let stem: String = layer
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{stem}.csv")
}

fn cmd_sweep(io: &IoArgs, fold: &FoldArgs) -> Result<Outcome, Error> {
    let opts = fold.options()?;
    let ckpt = load_checkpoint(&io.input)?;
    let dir = io.out.clone().unwrap_or_else(|| default_out(&io.input, "sweep"));
    let mut reports = Vec::with_capacity(ckpt.layers.len());
    for layer in &ckpt.layers {
        reports.push(sweep_report(
            &layer.name,
            &layer.weights,
            fold.criterion.into(),
            &opts,
        )?);
    }
    std::fs::create_dir_all(&dir).map_err(|source| Error::Write {
        path: dir.clone(),
        source,
    })?;
    let mut all_ok = true;
    for report in &reports {
        let path = dir.join(csv_name(&report.layer));
        report.write_csv(&path)?;
        let ok = report.chain_holds();
        all_ok &= ok;
        println!(
            "{}: {} ranks, chain {} -> {}",
            report.layer,
            report.records.len(),
            if ok { "ok" } else { "VIOLATED" },
            path.display()
        );
    }
    Ok(if all_ok {
        Outcome::Ok
    } else {
        Outcome::PropertyFailed
    })
}

fn cmd_verify(input: &Path, fold: &FoldArgs) -> Result<Outcome, Error> {
    let opts = fold.options()?;
    let crit: MagnitudeCriterion = fold.criterion.into();
    let ckpt = load_checkpoint(input)?;
    let mut failures = 0;
    for layer in &ckpt.layers {
        let verdicts = verify_theorems(&layer.weights, crit, &opts)?;
        let bad: Vec<_> = verdicts.iter().filter(|v| !v.holds()).collect();
        if bad.is_empty() {
            println!("{}: {} ranks ok", layer.name, verdicts.len());
            continue;
        }
        failures += bad.len();
        for v in bad {
            println!(
                "{}: k_p={} FAILED prune={:.17e} singleton={:.17e} optfold={:.17e}",
                layer.name, v.k_p, v.err_prune_sq, v.err_singleton_sq, v.err_optfold_sq
            );
        }
        if let Err(e) = check_verdicts(&layer.name, &verdicts) {
            eprintln!("{e}");
        }
    }
    if failures > 0 {
        println!("{failures} violated verdict(s)");
        return Ok(Outcome::PropertyFailed);
    }
    println!("all verdicts hold");
    Ok(Outcome::Ok)
}

fn parse_dims(s: &str) -> Result<Vec<usize>, Error> {
    let dims = s
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Error::InvalidValue(format!("--dims '{s}': {e}")))?;
    if dims.len() < 3 || dims.contains(&0) {
        return Err(Error::InvalidValue(format!(
            "--dims '{s}': need at least three positive widths (input, hidden, output)"
        )));
    }
    Ok(dims)
}

fn cmd_demo(dims: &str, k: Option<usize>, seed: u64, crit: MagnitudeCriterion) -> Result<Outcome, Error> {
    let dims = parse_dims(dims)?;
    let hidden = dims[1];
    let k = k.unwrap_or(hidden.div_ceil(2));
    if k == 0 || k > hidden {
        return Err(Error::InvalidValue(format!(
            "--k must lie in [1, {hidden}], got {k}"
        )));
    }
    let net = ToyMlp::random(&dims, seed)?;
    let batch = EvalBatch::random(64, dims[0], *dims.last().unwrap(), 1.0, seed.wrapping_add(1))?;
    let w = &net.layers()[0];
    let opts = FoldOptions {
        seed,
        ..FoldOptions::default()
    };

    let fold = optimal_fold(w, k, &opts)?;
    let fold_dev = fold_equivalence_check(&net, 0, &fold.assignment, &batch.inputs)?;
    let sel = magnitude_select(w, k, crit)?;
    let prune_dev = prune_equivalence_check(&net, 0, &sel, &batch.inputs)?;

    println!("net {:?}, seed {seed}, layer 0 rows {hidden} -> {k}", dims);
    println!("fold merge deviation:  {fold_dev:.3e}");
    println!("prune drop deviation:  {prune_dev:.3e}");
    println!("base loss: {:.6e}", mse_loss(&net, &batch)?);
    println!(
        "{:<15} {:>12} {:>12} {:>12}",
        "method", "param_dist", "loss_delta", "ratio"
    );
    let mut worst_ratio = 0.0_f64;
    let mut min_dist = f64::INFINITY;
    for method in [Method::Mag1, Method::Mag2, Method::Fold, Method::SingletonFold] {
        let plan = plan_layer(w, method, k, crit, RankMode::Matched, &opts)?;
        let p = loss_perturbation(&net, 0, &plan.mapping, &batch)?;
        let ratio = if p.param_dist > 0.0 {
            p.loss_delta / p.param_dist
        } else {
            0.0
        };
        if p.param_dist > 0.0 {
            worst_ratio = worst_ratio.max(ratio);
            min_dist = min_dist.min(p.param_dist);
        }
        println!(
            "{:<15} {:>12.4e} {:>12.4e} {:>12.4e}",
            method.to_string(),
            p.param_dist,
            p.loss_delta,
            ratio
        );
    }
    if min_dist.is_finite() {
        let kappa = local_lipschitz_estimate(&net, 0, &batch, min_dist, 32, seed.wrapping_add(2))?;
        println!("sampled local Lipschitz estimate at radius {min_dist:.3e}: {kappa:.4e}");
        println!("largest observed loss_delta/param_dist: {worst_ratio:.4e}");
    }

    if fold_dev > EQUIVALENCE_TOL || prune_dev > EQUIVALENCE_TOL {
        eprintln!("merge deviation exceeds {EQUIVALENCE_TOL:e}");
        return Ok(Outcome::PropertyFailed);
    }
    Ok(Outcome::Ok)
}
