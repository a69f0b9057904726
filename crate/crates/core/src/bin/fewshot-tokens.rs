//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use fewshot_tokens::encoder::{encode, PatchProjector, RawImage};
use fewshot_tokens::eval::{episode_rng, evaluate, sample_episode, EvalConfig, EvalReport};
use fewshot_tokens::heatmap::{render_importance, write_heatmaps};
use fewshot_tokens::similarity::{accuracy, predict, ImportanceWeights};
use fewshot_tokens::{gradcheck, io, optimize_importance, ClassifierConfig, Error, Execution};

const USAGE: u8 = 1;
const DATA: u8 = 2;
const NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "fewshot-tokens",
    version,
    about = "Few-shot classification with token importance reweighting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Encode a directory of PGM/PPM images into a token file with the toy patch encoder
    Encode(EncodeArgs),
    /// Evaluate mean accuracy and 95% confidence interval over sampled episodes
    Eval(EvalArgs),
    /// Classify the queries of one sampled episode and optionally write heatmaps
    Classify(ClassifyArgs),
    /// Compare the analytic support-loss gradient with finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct EncodeArgs {
    /// Directory of binary PGM (P5) / PPM (P6) images, read in file-name order
    #[arg(long)]
    images: PathBuf,
    /// Patch side length in pixels
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    patch_size: u64,
    /// Token dimension
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    dim: u64,
    /// Seed of the random projection
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output token file
    #[arg(long)]
    out: PathBuf,
    /// JSON file with flag values; command-line flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EpisodeArgs {
    /// Dataset manifest (JSON)
    #[arg(long)]
    manifest: PathBuf,
    /// Classes per episode
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(2..))]
    n_way: u64,
    /// Support images per class
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    k_shot: u64,
    /// Query images per class
    #[arg(long, default_value_t = 15)]
    n_query: u64,
    /// Inner-loop SGD steps
    #[arg(long, default_value_t = ClassifierConfig::DEFAULT_STEPS)]
    steps: usize,
    /// Inner-loop learning rate
    #[arg(long, default_value_t = ClassifierConfig::DEFAULT_LR, value_parser = positive_f64)]
    lr: f64,
    /// Similarity temperature [default: 1/sqrt(D) from the manifest]
    #[arg(long, value_parser = positive_f64)]
    tau: Option<f64>,
    /// Odd local mask window for 1-shot episodes; ignored when k-shot > 1 [default: 5]
    #[arg(long, value_parser = odd_window)]
    mask_window: Option<usize>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct EvalArgs {
    #[command(flatten)]
    episode: EpisodeArgs,
    /// Number of episodes
    #[arg(long, default_value_t = EvalConfig::DEFAULT_EPISODES, value_parser = at_least_one)]
    episodes: usize,
    /// Base seed; episode i uses stream i
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated step counts evaluated on identical episodes, e.g. "0,5,10,15,20" [default: none]
    #[arg(long, value_parser = parse_sweep)]
    sweep: Option<Sweep>,
    /// Report JSON path; with --sweep each entry gets a `_steps{T}` suffix [default: none]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-episode accuracy CSV path, suffixed like --out [default: none]
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Worker threads [default: available parallelism]
    #[arg(long, value_parser = at_least_one)]
    jobs: Option<usize>,
    /// Record wall time per episode in the report (makes reports non-reproducible)
    #[arg(long)]
    timing: bool,
    /// JSON file with flag values; command-line flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct ClassifyArgs {
    #[command(flatten)]
    episode: EpisodeArgs,
    /// Seed of the sampled episode
    #[arg(long, default_value_t = 0)]
    episode_seed: u64,
    /// Directory for importance heatmaps `{episode}_{class}_{shot}.pgm` [default: none]
    #[arg(long)]
    heatmaps: Option<PathBuf>,
    /// Pixels per heatmap cell
    #[arg(long, default_value_t = 8, value_parser = at_least_one)]
    scale: usize,
    /// JSON file with flag values; command-line flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct GradcheckArgs {
    /// Seed of the random episodes
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of random episodes
    #[arg(long, default_value_t = 20, value_parser = at_least_one)]
    trials: usize,
    /// Scales the analytic gradient to exercise the failure path
    #[arg(long, hide = true)]
    inject_fault: Option<f64>,
    /// JSON file with flag values; command-line flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(x) if x.is_finite() && x > 0.0 => Ok(x),
        _ => Err(format!("expected a positive number, got `{s}`")),
    }
}

fn at_least_one(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(x) if x >= 1 => Ok(x),
        _ => Err(format!("expected an integer >= 1, got `{s}`")),
    }
}

fn odd_window(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(x) if x % 2 == 1 => Ok(x),
        _ => Err(format!("expected an odd integer >= 1, got `{s}`")),
    }
}

#[derive(Debug, Clone)]
struct Sweep(Vec<usize>);

fn parse_sweep(s: &str) -> Result<Sweep, String> {
    let steps = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| format!("invalid step count `{t}`"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if steps.is_empty() {
        return Err("empty sweep".into());
    }
    Ok(Sweep(steps))
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            _ if e.is_numerical() => NUMERICAL,
            Error::InvalidConfig(_) => USAGE,
            _ => DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: USAGE,
        message: message.into(),
    }
}

/// Inserts flags from `--config FILE` right after the subcommand name, so
/// that flags given on the command line, which come later, win.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, Failure> {
    let strs: Vec<String> = args
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let mut path = None;
    for (i, a) in strs.iter().enumerate() {
        if a == "--config" {
            path = strs.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| usage(format!("cannot read config {path}: {e}")))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {path}: {e}")))?;
    let Value::Object(map) = value else {
        return Err(usage(format!("config {path} must be a JSON object")));
    };
    let mut extra = Vec::new();
    for (key, value) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag == "--config" {
            continue;
        }
        match value {
            Value::Bool(true) => extra.push(flag),
            Value::Bool(false) | Value::Null => {}
            Value::Number(n) => extra.extend([flag, n.to_string()]),
            Value::String(s) => extra.extend([flag, s]),
            Value::Array(items) => {
                let joined = items
                    .iter()
                    .map(|v| {
                        v.as_str()
                            .map(str::to_string)
                            .unwrap_or_else(|| v.to_string())
                    })
                    .collect::<Vec<_>>()
                    .join(",");
                extra.extend([flag, joined]);
            }
            Value::Object(_) => {
                return Err(usage(format!("config key `{key}` has a nested object")))
            }
        }
    }
    let sub = strs
        .iter()
        .position(|a| matches!(a.as_str(), "encode" | "eval" | "classify" | "gradcheck"))
        .ok_or_else(|| usage("--config needs a subcommand"))?;
    let mut out: Vec<OsString> = args[..=sub].to_vec();
    out.extend(extra.into_iter().map(OsString::from));
    out.extend(args[sub + 1..].iter().cloned());
    Ok(out)
}

fn classifier_config(args: &EpisodeArgs, dim: usize) -> ClassifierConfig {
    let defaults = ClassifierConfig::for_dim(dim);
    if args.k_shot > 1 && args.mask_window.is_some() {
        eprintln!(
            "warning: --mask-window only applies to 1-shot episodes; ignoring it for k-shot {}",
            args.k_shot
        );
    }
    ClassifierConfig {
        tau: args.tau.unwrap_or(defaults.tau),
        lr: args.lr,
        steps: args.steps,
        mask_window: args.mask_window.unwrap_or(defaults.mask_window),
        similarity: defaults.similarity,
    }
}

fn run_encode(args: EncodeArgs) -> Result<(), Failure> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(&args.images)
        .map_err(|e| Failure {
            code: DATA,
            message: format!("cannot read {}: {e}", args.images.display()),
        })?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension().and_then(|e| e.to_str()).is_some_and(|e| {
                    matches!(e.to_ascii_lowercase().as_str(), "pgm" | "ppm" | "pnm")
                })
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure {
            code: DATA,
            message: format!("no PGM/PPM images in {}", args.images.display()),
        });
    }
    let images = files
        .iter()
        .map(|p| RawImage::from_pnm_file(p))
        .collect::<Result<Vec<_>, _>>()?;
    let first = &images[0];
    if let Some((i, _)) = images.iter().enumerate().find(|(_, img)| {
        (img.height(), img.width(), img.channels())
            != (first.height(), first.width(), first.channels())
    }) {
        return Err(Failure {
            code: DATA,
            message: format!(
                "{} differs in size or channels from {}",
                files[i].display(),
                files[0].display()
            ),
        });
    }
    let proj = PatchProjector::from_seed(
        args.patch_size as usize,
        first.channels(),
        args.dim as usize,
        args.seed,
    )?;
    let grids = images
        .iter()
        .zip(&files)
        .map(|(img, path)| {
            let id = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            encode(img, &proj, id).map_err(|e| Failure {
                code: DATA,
                message: format!("{}: {e}", path.display()),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    io::write_tokens(&grids, &args.out)?;
    let shape = grids[0].shape();
    println!("num_images={} L={} D={}", grids.len(), shape.len, shape.dim);
    Ok(())
}

fn suffixed(path: &Path, steps: usize, sweep: bool) -> PathBuf {
    if !sweep {
        return path.to_path_buf();
    }
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}_steps{steps}.{}", ext.to_string_lossy()),
        None => format!("{stem}_steps{steps}"),
    };
    path.with_file_name(name)
}

fn run_eval(args: EvalArgs) -> Result<(), Failure> {
    let dataset = io::load_dataset(&args.episode.manifest)?;
    let classifier = classifier_config(&args.episode, dataset.shape().dim);
    let cfg = EvalConfig {
        n_way: args.episode.n_way as usize,
        k_shot: args.episode.k_shot as usize,
        n_query: args.episode.n_query as usize,
        episodes: args.episodes,
        seed: args.seed,
        classifier,
        steps_sweep: args.sweep.as_ref().map(|s| s.0.clone()),
    };
    cfg.validate()?;
    let reports = with_jobs(args.jobs, || evaluate(&dataset, &cfg, Execution::Parallel))??;
    let sweep = args.sweep.is_some();
    for report in reports {
        let steps = report.config.classifier.steps;
        println!(
            "steps {steps}: mean accuracy {:.3} ± {:.3} over {} episodes",
            report.mean, report.ci95, report.episodes
        );
        if let Some(ms) = report.wall_ms_per_episode {
            eprintln!("steps {steps}: {ms:.2} ms per episode");
        }
        let report = EvalReport {
            wall_ms_per_episode: report.wall_ms_per_episode.filter(|_| args.timing),
            ..report
        };
        if let Some(out) = &args.out {
            io::write_report(&suffixed(out, steps, sweep), &report)?;
        }
        if let Some(csv) = &args.csv {
            io::write_accuracy_csv(&suffixed(csv, steps, sweep), &report)?;
        }
    }
    Ok(())
}

#[cfg(feature = "parallel")]
fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Failure> {
    let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| usage(format!("cannot start {jobs} workers: {e}")))?;
    Ok(pool.install(f))
}

#[cfg(not(feature = "parallel"))]
fn with_jobs<T: Send>(_jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Failure> {
    Ok(f())
}

fn run_classify(args: ClassifyArgs) -> Result<(), Failure> {
    let dataset = io::load_dataset(&args.episode.manifest)?;
    let cfg = classifier_config(&args.episode, dataset.shape().dim);
    cfg.validate()?;
    let mut rng = episode_rng(args.episode_seed, 0);
    let episode = sample_episode(
        &dataset,
        args.episode.n_way as usize,
        args.episode.k_shot as usize,
        args.episode.n_query as usize,
        &mut rng,
    )?;
    let v = if cfg.steps == 0 {
        ImportanceWeights::zeros(episode.num_support_tokens())
    } else {
        let trace = optimize_importance(&episode, &cfg)?;
        println!(
            "support loss {:.6} -> {:.6} after {} steps",
            trace.losses[0],
            trace.losses[trace.losses.len() - 1],
            trace.steps_taken
        );
        trace.v_final
    };
    let predictions = predict(&episode, &v, &cfg)?;
    for (i, (pred, (grid, label))) in predictions.iter().zip(episode.queries()).enumerate() {
        let probs = pred
            .probs
            .iter()
            .map(|p| format!("{p:.4}"))
            .collect::<Vec<_>>()
            .join(", ");
        println!(
            "query {i} [{}] true {label} predicted {} probs [{probs}]",
            grid.image_id(),
            pred.predicted
        );
    }
    println!("accuracy {:.4}", accuracy(&episode, &predictions));
    if let Some(dir) = &args.heatmaps {
        let maps = render_importance(&v, &episode, args.scale)?;
        let written = write_heatmaps(dir, &args.episode_seed.to_string(), &maps)?;
        println!("wrote {} heatmaps to {}", written.len(), dir.display());
    }
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<(), Failure> {
    let report = gradcheck::run(args.seed, args.trials, args.inject_fault)?;
    let max = report.max_rel_error();
    println!(
        "max relative gradient error {max:.6e} over {} trials",
        report.trials.len()
    );
    if report.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: NUMERICAL,
            message: format!(
                "gradient check failed: {max:.6e} >= {:e}",
                gradcheck::TOLERANCE
            ),
        })
    }
}

fn main() -> ExitCode {
    let result = expand_config(std::env::args_os().collect()).and_then(|args| {
        let cli = match Cli::try_parse_from(args) {
            Ok(cli) => cli,
            Err(e) => {
                let _ = e.print();
                return Err(Failure {
                    code: if e.use_stderr() { USAGE } else { 0 },
                    message: String::new(),
                });
            }
        };
        match cli.command {
            Command::Encode(a) => run_encode(a),
            Command::Eval(a) => run_eval(a),
            Command::Classify(a) => run_classify(a),
            Command::Gradcheck(a) => run_gradcheck(a),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("error: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}
