use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dmprune_core::allocator::{brute_force_allocate, dp_allocate, uniform_allocate};
use dmprune_core::distortion::curves_to_csv;
use dmprune_core::dmb::{self, Bundle};
use dmprune_core::pipeline::{
    allocation_layers, compute_curves, pareto_sweep, run_prune_with, sweep_to_csv, CurveCache, PruneContext,
};
use dmprune_core::refnet::{self, FinetuneConfig, LambdaWeights, RefNet, RefNetSpec};
use dmprune_core::verify::{run_suite, VerifyInputs};
use dmprune_core::{Budget, CurveMethod, DeltaMode, Error, FisherMode, Kappa, PruneConfig};

const MODEL_FILE: &str = "model.dmb";
const CALIB_FILE: &str = "calib.dmb";
const GRADS_FILE: &str = "grads.dmb";
const CURVES_FILE: &str = "curves.csv";
const ALLOCATION_FILE: &str = "allocation.json";
const PRUNED_FILE: &str = "pruned.dmb";
const REPORT_FILE: &str = "report.json";
const SWEEP_FILE: &str = "sweep.csv";
const VERIFY_FILE: &str = "verify.json";

#[derive(Parser, Debug)]
#[command(name = "dmprune", version, about = "Distortion-minimizing post-training weight pruning")]
struct Cli {
    /// Working directory for inputs and outputs.
    #[arg(long, global = true, default_value = "dmprune-out")]
    dir: PathBuf,
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Report zero stage timings so outputs are byte-reproducible.
    #[arg(long, global = true)]
    no_timestamps: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded reference network and a calibration set.
    DemoExport {
        #[arg(long, default_value_t = 32)]
        samples: usize,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        calib: Option<PathBuf>,
    },
    /// Per-sample and averaged gradients of the scalarized output.
    Grad {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        lambda_b: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda_c: f64,
    },
    /// Per-layer distortion curves as CSV.
    Curves {
        #[command(flatten)]
        inputs: StageInputs,
        #[command(flatten)]
        curve: CurveArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Layerwise sparsity allocation as JSON.
    Allocate {
        #[command(flatten)]
        inputs: StageInputs,
        #[command(flatten)]
        curve: CurveArgs,
        #[command(flatten)]
        budget: BudgetArgs,
        #[arg(long, value_enum, default_value_t = SolverArg::Dp)]
        solver: SolverArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prune the model and write the pruned bundle plus a report.
    Prune {
        #[command(flatten)]
        inputs: StageInputs,
        #[command(flatten)]
        curve: CurveArgs,
        #[command(flatten)]
        budget: BudgetArgs,
        /// Calibration set for measured distortion and finetuning.
        #[arg(long)]
        calib: Option<PathBuf>,
        /// Self-distillation epochs after masking (reference network only).
        #[arg(long, default_value_t = 0)]
        finetune_epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        finetune_lr: f64,
        #[arg(long)]
        diagnostics: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Measured output distortion between a dense and a pruned reference network.
    Eval {
        #[arg(long)]
        dense: Option<PathBuf>,
        #[arg(long)]
        pruned: Option<PathBuf>,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        lambda_b: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda_c: f64,
    },
    /// Distortion against FLOPs ratio over several budgets.
    Sweep {
        #[command(flatten)]
        inputs: StageInputs,
        #[command(flatten)]
        curve: CurveArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.9, 0.7, 0.5, 0.3])]
        ratios: Vec<f64>,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle suite against the bundles in the working directory.
    Verify {
        #[command(flatten)]
        inputs: StageInputs,
        #[command(flatten)]
        curve: CurveArgs,
        #[command(flatten)]
        budget: BudgetArgs,
        #[arg(long)]
        calib: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct StageInputs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    grads: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CurveArgs {
    /// Grid steps per layer curve.
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, value_enum, default_value_t = DeltaModeArg::Squared)]
    delta_mode: DeltaModeArg,
    /// Fisher dampening: `auto` or a nonnegative number.
    #[arg(long, default_value = "auto", value_parser = parse_kappa)]
    kappa: Kappa,
    #[arg(long, value_enum, default_value_t = FisherArg::Auto)]
    fisher: FisherArg,
    #[arg(long, value_enum, default_value_t = MethodArg::Incremental)]
    method: MethodArg,
    /// Skip the on-disk curve cache.
    #[arg(long)]
    no_cache: bool,
}

#[derive(Args, Debug)]
struct BudgetArgs {
    /// Keep at most this fraction of prunable FLOPs (default 0.5).
    #[arg(long, conflicts_with = "prune_count")]
    flops_ratio: Option<f64>,
    /// Prune at least this many weights in total.
    #[arg(long)]
    prune_count: Option<usize>,
    /// FLOPs per budget unit (default: derived from the layer costs).
    #[arg(long, requires = "flops_ratio")]
    quantum: Option<f64>,
}

impl BudgetArgs {
    fn budget(&self) -> Budget {
        match (self.prune_count, self.flops_ratio) {
            (Some(t), _) => Budget::PruneCount(t),
            (None, ratio) => Budget::FlopsRatio {
                ratio: ratio.unwrap_or(0.5),
                quantum: self.quantum,
            },
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum DeltaModeArg {
    Squared,
    Abs,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FisherArg {
    Auto,
    Dense,
    Factor,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MethodArg {
    Incremental,
    Direct,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SolverArg {
    Dp,
    BruteForce,
    Uniform,
}

fn parse_kappa(s: &str) -> Result<Kappa, String> {
    if s == "auto" {
        return Ok(Kappa::Auto);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(Kappa::Value(v)),
        _ => Err(format!("expected `auto` or a nonnegative number, got `{s}`")),
    }
}

enum Failure {
    Usage(String),
    Data(String),
    Verification,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) => Failure::Usage(m),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) => f.write_str(m),
            Failure::Verification => f.write_str("verification failed"),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

struct Ctx {
    dir: PathBuf,
    seed: u64,
    record_timings: bool,
}

impl Ctx {
    fn path(&self, explicit: &Option<PathBuf>, default: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.dir.join(default))
    }

    fn cache(&self, args: &CurveArgs) -> Option<CurveCache> {
        (!args.no_cache).then(|| CurveCache::from_env_or(self.dir.join("cache")))
    }

    fn config(&self, curve: &CurveArgs, budget: Budget) -> PruneConfig {
        PruneConfig {
            k: curve.k,
            budget,
            delta_mode: match curve.delta_mode {
                DeltaModeArg::Squared => DeltaMode::Squared,
                DeltaModeArg::Abs => DeltaMode::Abs,
            },
            kappa: curve.kappa,
            fisher_mode: match curve.fisher {
                FisherArg::Auto => FisherMode::Auto,
                FisherArg::Dense => FisherMode::Dense,
                FisherArg::Factor => FisherMode::Factor,
            },
            curve_method: match curve.method {
                MethodArg::Incremental => CurveMethod::Incremental,
                MethodArg::Direct => CurveMethod::Direct,
            },
            seed: self.seed,
            record_timings: self.record_timings,
            ..PruneConfig::default()
        }
    }
}

fn require(path: &Path, what: &str) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Data(format!("missing {what}: {}", path.display())))
    }
}

fn load_model(path: &Path) -> CliResult<dmprune_core::ModelBundle> {
    require(path, "model bundle")?;
    Ok(dmb::load_model(path)?)
}

fn load_grads(path: &Path) -> CliResult<dmprune_core::GradientBundle> {
    require(path, "gradient bundle")?;
    Ok(dmb::load_gradients(path)?)
}

fn load_calib(path: &Path) -> CliResult<dmprune_core::CalibrationSet> {
    require(path, "calibration set")?;
    Ok(dmb::load_calibration(path)?)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::Data(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Failure::Data(e.to_string()))
}

fn run(cli: Cli) -> CliResult {
    let ctx = Ctx {
        dir: cli.dir,
        seed: cli.seed,
        record_timings: !cli.no_timestamps,
    };
    match cli.command {
        Command::DemoExport { samples, model, calib } => {
            let spec = RefNetSpec::desk_default(ctx.seed);
            let net = RefNet::init(spec.clone())?;
            let set = refnet::synth_calibration(&spec, samples, ctx.seed.wrapping_add(1))?;
            let (mp, cp) = (ctx.path(&model, MODEL_FILE), ctx.path(&calib, CALIB_FILE));
            fs::create_dir_all(&ctx.dir).map_err(|e| Failure::Data(format!("{}: {e}", ctx.dir.display())))?;
            dmb::save_bundle(&Bundle::Model(refnet::to_bundle(&net)?), &mp)?;
            dmb::save_bundle(&Bundle::Calibration(set), &cp)?;
            println!("wrote {} and {}", mp.display(), cp.display());
        }
        Command::Grad {
            model,
            calib,
            out,
            lambda_b,
            lambda_c,
        } => {
            let bundle = load_model(&ctx.path(&model, MODEL_FILE))?;
            let set = load_calib(&ctx.path(&calib, CALIB_FILE))?;
            let net = refnet::from_bundle(&bundle)?;
            let lambda = LambdaWeights::new(lambda_b, lambda_c)?;
            let grads = refnet::build_gradient_bundle(&net, &set, lambda)?;
            let path = ctx.path(&out, GRADS_FILE);
            dmb::save_bundle(&Bundle::Gradient(grads), &path)?;
            println!("wrote {}", path.display());
        }
        Command::Curves { inputs, curve, out } => {
            let model = load_model(&ctx.path(&inputs.model, MODEL_FILE))?;
            let grads = load_grads(&ctx.path(&inputs.grads, GRADS_FILE))?;
            let config = ctx.config(&curve, Budget::flops_ratio(1.0));
            let curves = compute_curves(&model, &grads, &config, ctx.cache(&curve).as_ref())?;
            let raw: Vec<_> = curves.into_iter().map(|c| c.curve).collect();
            let path = ctx.path(&out, CURVES_FILE);
            write(&path, curves_to_csv(&raw))?;
            println!("wrote {}", path.display());
        }
        Command::Allocate {
            inputs,
            curve,
            budget,
            solver,
            out,
        } => {
            let model = load_model(&ctx.path(&inputs.model, MODEL_FILE))?;
            let grads = load_grads(&ctx.path(&inputs.grads, GRADS_FILE))?;
            let config = ctx.config(&curve, budget.budget());
            let curves = compute_curves(&model, &grads, &config, ctx.cache(&curve).as_ref())?;
            let layers = allocation_layers(&curves);
            let result = match solver {
                SolverArg::Dp => dp_allocate(&layers, config.budget)?,
                SolverArg::BruteForce => brute_force_allocate(&layers, config.budget)?,
                SolverArg::Uniform => uniform_allocate(&layers, config.budget)?,
            };
            let path = ctx.path(&out, ALLOCATION_FILE);
            write(&path, to_json(&result)?)?;
            println!(
                "wrote {} (total_delta {:e}, achieved FLOPs ratio {:.6})",
                path.display(),
                result.total_delta,
                result.achieved_flops_ratio
            );
        }
        Command::Prune {
            inputs,
            curve,
            budget,
            calib,
            finetune_epochs,
            finetune_lr,
            diagnostics,
            out,
            report,
        } => {
            let model = load_model(&ctx.path(&inputs.model, MODEL_FILE))?;
            let grads = load_grads(&ctx.path(&inputs.grads, GRADS_FILE))?;
            let set = match &calib {
                Some(p) => Some(load_calib(p)?),
                None => {
                    let p = ctx.dir.join(CALIB_FILE);
                    p.is_file().then(|| dmb::load_calibration(&p)).transpose()?
                }
            };
            let mut config = ctx.config(&curve, budget.budget());
            config.diagnostics = diagnostics;
            if finetune_epochs > 0 {
                config.finetune = Some(FinetuneConfig {
                    epochs: finetune_epochs,
                    learning_rate: finetune_lr,
                    lambda: LambdaWeights::new(grads.lambda_used.0, grads.lambda_used.1)?,
                    ..FinetuneConfig::default()
                });
            }
            let cache = ctx.cache(&curve);
            let outcome = run_prune_with(
                &model,
                &grads,
                &config,
                PruneContext {
                    calibration: set.as_ref(),
                    cache: cache.as_ref(),
                },
            )?;
            let (bp, rp) = (ctx.path(&out, PRUNED_FILE), ctx.path(&report, REPORT_FILE));
            dmb::save_bundle(&Bundle::Model(outcome.pruned), &bp)?;
            write(&rp, outcome.report.to_json()?)?;
            println!(
                "wrote {} and {} (FLOPs ratio {:.6})",
                bp.display(),
                rp.display(),
                outcome.report.flops.ratio
            );
        }
        Command::Eval {
            dense,
            pruned,
            calib,
            lambda_b,
            lambda_c,
        } => {
            let d = refnet::from_bundle(&load_model(&ctx.path(&dense, MODEL_FILE))?)?;
            let p = refnet::from_bundle(&load_model(&ctx.path(&pruned, PRUNED_FILE))?)?;
            let set = load_calib(&ctx.path(&calib, CALIB_FILE))?;
            let value = refnet::true_distortion(&d, &p, &set, LambdaWeights::new(lambda_b, lambda_c)?)?;
            print!("{}", to_json(&serde_json::json!({ "true_distortion": value }))?);
        }
        Command::Sweep {
            inputs,
            curve,
            ratios,
            calib,
            out,
        } => {
            let model = load_model(&ctx.path(&inputs.model, MODEL_FILE))?;
            let grads = load_grads(&ctx.path(&inputs.grads, GRADS_FILE))?;
            let set = match &calib {
                Some(p) => Some(load_calib(p)?),
                None => {
                    let p = ctx.dir.join(CALIB_FILE);
                    p.is_file().then(|| dmb::load_calibration(&p)).transpose()?
                }
            };
            let config = ctx.config(&curve, Budget::flops_ratio(1.0));
            let cache = ctx.cache(&curve);
            let rows = pareto_sweep(
                &model,
                &grads,
                &ratios,
                &config,
                PruneContext {
                    calibration: set.as_ref(),
                    cache: cache.as_ref(),
                },
            )?;
            let path = ctx.path(&out, SWEEP_FILE);
            write(&path, sweep_to_csv(&rows))?;
            println!("wrote {}", path.display());
        }
        Command::Verify {
            inputs,
            curve,
            budget,
            calib,
        } => {
            let model = load_model(&ctx.path(&inputs.model, MODEL_FILE))?;
            let gp = ctx.path(&inputs.grads, GRADS_FILE);
            let grads = match (inputs.grads.is_some(), gp.is_file()) {
                (true, _) | (false, true) => Some(load_grads(&gp)?),
                (false, false) => {
                    let set = load_calib(&ctx.path(&calib, CALIB_FILE))?;
                    let net = refnet::from_bundle(&model)?;
                    Some(refnet::build_gradient_bundle(&net, &set, LambdaWeights::default())?)
                }
            };
            let cp = ctx.path(&calib, CALIB_FILE);
            let set = if calib.is_some() || cp.is_file() {
                Some(load_calib(&cp)?)
            } else {
                None
            };
            let config = ctx.config(&curve, budget.budget());
            let report = run_suite(&VerifyInputs {
                model: &model,
                grads: grads.as_ref(),
                calibration: set.as_ref(),
                config: &config,
                seed: ctx.seed,
            });
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            write(&ctx.dir.join(VERIFY_FILE), to_json(&report)?)?;
            if !report.passed() {
                return Err(Failure::Verification);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(match f {
                Failure::Usage(_) => 1,
                Failure::Data(_) => 2,
                Failure::Verification => 3,
            })
        }
    }
}
