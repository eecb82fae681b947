//! Command-line front end: `validate`, `generate`, `sweep`, `inspect`.
//!
//! Exit codes: 0 ok, 1 validation/config/usage, 2 I/O, 3 runtime.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::Value;

use crate::bridge::bridge_engine;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::orchestrator::{Engine, StoryRun};
use crate::rundir::RunDirWriter;
use crate::sar::SarMode;
use crate::script::{parse_script, parse_script_unchecked, validate_script, StoryScript};

#[derive(Debug, Parser)]
#[command(name = "narrablend", version, about = "Multi-segment latent story generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a script; diagnostics go to stderr.
    Validate {
        #[arg(long)]
        script: PathBuf,
    },
    /// Generate a story into a run directory.
    Generate(RunArgs),
    /// Run a parameter grid, one run directory per point.
    Sweep(SweepArgs),
    /// Summarize an existing run directory.
    Inspect {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
enum BackboneKind {
    #[default]
    Toy,
    Bridge,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    script: PathBuf,
    /// JSON config document; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_dipw: bool,
    #[arg(long)]
    no_twb: bool,
    #[arg(long)]
    no_sar: bool,
    #[arg(long, value_enum, default_value_t = BackboneKind::Toy)]
    backbone: BackboneKind,
    #[arg(long, value_name = "ADDR")]
    bridge_endpoint: Option<String>,
}

/// Named on/off combination of the three mechanisms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    Full,
    NoDipw,
    NoTwb,
    NoSar,
    None,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoDipw => "no-dipw",
            Ablation::NoTwb => "no-twb",
            Ablation::NoSar => "no-sar",
            Ablation::None => "none",
        }
    }

    /// Switches mechanisms off; never switches one back on.
    pub fn apply(self, cfg: &mut RunConfig) {
        match self {
            Ablation::Full => {}
            Ablation::NoDipw => cfg.dipw.enabled = false,
            Ablation::NoTwb => cfg.blend.enabled = false,
            Ablation::NoSar => cfg.sar.enabled = false,
            Ablation::None => {
                cfg.dipw.enabled = false;
                cfg.blend.enabled = false;
                cfg.sar.enabled = false;
            }
        }
    }
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',')]
    gamma: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    tau: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    decay_base: Vec<f64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_sar_mode)]
    sar_mode: Vec<SarMode>,
    #[arg(long, value_enum, value_delimiter = ',')]
    ablation: Vec<Ablation>,
}

fn parse_sar_mode(s: &str) -> std::result::Result<SarMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("NB_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Validate { script } => cmd_validate(&script),
        Command::Generate(args) => cmd_generate(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Inspect { run } => cmd_inspect(&run),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            report(&e);
            e.exit_code()
        }
    }
}

fn report(e: &Error) {
    match e {
        Error::Validation(diags) => {
            for d in diags {
                eprintln!("{d}");
            }
        }
        other => eprintln!("error: {other}"),
    }
}

// Writes to stdout, ignoring a closed pipe (e.g. `| head`).
fn emit(line: impl std::fmt::Display) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn load_script(path: &Path) -> Result<StoryScript> {
    parse_script(&read_bytes(path)?)
}

fn cmd_validate(path: &Path) -> Result<i32> {
    let script = parse_script_unchecked(&read_bytes(path)?)?;
    let report = validate_script(&script);
    for n in &report.notes {
        log::info!("{n}");
    }
    if report.is_valid() {
        Ok(0)
    } else {
        Err(Error::Validation(report.errors))
    }
}

/// Built-in defaults, overridden by the config file, overridden by flags.
fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    if args.no_dipw {
        cfg.dipw.enabled = false;
    }
    if args.no_twb {
        cfg.blend.enabled = false;
    }
    if args.no_sar {
        cfg.sar.enabled = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn build_engine(args: &RunArgs, cfg: RunConfig) -> Result<Engine> {
    match (args.backbone, &args.bridge_endpoint) {
        (BackboneKind::Toy, None) => Engine::toy(cfg),
        (BackboneKind::Toy, Some(_)) => Err(Error::argument("--bridge-endpoint requires --backbone bridge")),
        (BackboneKind::Bridge, Some(ep)) => bridge_engine(cfg, ep),
        (BackboneKind::Bridge, None) => Err(Error::argument("--backbone bridge requires --bridge-endpoint")),
    }
}

/// Generates into `out`, flushing each segment as it completes. On failure
/// the aggregate files still describe the completed prefix.
fn execute(engine: &Engine, script: &StoryScript, out: &Path) -> Result<StoryRun> {
    let writer = RunDirWriter::create(out)?;
    let seed = engine.config().backbone.seed;
    let outcome = engine.run_story_with(script, |seg| writer.write_segment(&seg.latents, seed));
    let failed = outcome.failure.as_ref().map(|e| match e {
        Error::Segment { index, .. } => (*index, e),
        other => (0, other),
    });
    writer.finish(&outcome.run, failed)?;
    match outcome.failure {
        Some(e) => Err(e),
        None => Ok(outcome.run),
    }
}

/// `segment=k steps=S alpha_final=<a> boundary_disc=<d>` per segment;
/// `boundary_disc` is `NA` for the first segment.
pub fn summary_lines(run: &StoryRun) -> Vec<String> {
    run.schedules
        .iter()
        .enumerate()
        .map(|(i, sched)| {
            let alpha = sched.records.last().map_or(f64::NAN, |r| r.alpha_action);
            let disc = match i.checked_sub(1) {
                Some(b) => format!("{:.6}", run.metrics.boundary_discontinuity[b]),
                None => "NA".to_string(),
            };
            format!(
                "segment={} steps={} alpha_final={alpha:.6} boundary_disc={disc}",
                sched.segment,
                sched.records.len()
            )
        })
        .collect()
}

fn cmd_generate(args: &RunArgs) -> Result<i32> {
    let script = load_script(&args.script)?;
    let cfg = resolve_config(args)?;
    let engine = build_engine(args, cfg)?;
    let run = execute(&engine, &script, &args.out)?;
    for line in summary_lines(&run) {
        emit(line);
    }
    Ok(0)
}

#[derive(Clone, Debug)]
struct SweepPoint {
    gamma: f64,
    tau: f64,
    decay_base: f64,
    sar_mode: SarMode,
    ablation: Ablation,
    config: RunConfig,
}

fn or_base<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

fn sweep_points(args: &SweepArgs, base: &RunConfig) -> Result<Vec<SweepPoint>> {
    let gammas = or_base(&args.gamma, base.blend.gamma);
    let taus = or_base(&args.tau, base.dipw.tau);
    let bases = or_base(&args.decay_base, base.blend.decay_base);
    let modes = or_base(&args.sar_mode, base.sar.mode);
    let ablations = or_base(&args.ablation, Ablation::Full);
    let mut points = Vec::new();
    for &gamma in &gammas {
        for &tau in &taus {
            for &decay_base in &bases {
                for &sar_mode in &modes {
                    for &ablation in &ablations {
                        let mut config = base.clone();
                        config.blend.gamma = gamma;
                        config.dipw.tau = tau;
                        config.blend.decay_base = decay_base;
                        config.sar.mode = sar_mode;
                        ablation.apply(&mut config);
                        config.validate()?;
                        points.push(SweepPoint {
                            gamma,
                            tau,
                            decay_base,
                            sar_mode,
                            ablation,
                            config,
                        });
                    }
                }
            }
        }
    }
    Ok(points)
}

pub const SWEEP_SUMMARY_HEADER: &str = "point,gamma,tau,decay_base,sar_mode,ablation,segments,mean_boundary_disc,mean_intra_smoothness,mean_abs_alpha_dev,status";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Mean of `|α_action - 0.5|` over every recorded step.
pub fn mean_abs_alpha_deviation(run: &StoryRun) -> Option<f64> {
    let devs: Vec<f64> = run
        .schedules
        .iter()
        .flat_map(|s| s.records.iter().map(|r| (r.alpha_action - 0.5).abs()))
        .collect();
    (!devs.is_empty()).then(|| devs.iter().sum::<f64>() / devs.len() as f64)
}

fn cmd_sweep(args: &SweepArgs) -> Result<i32> {
    let script = load_script(&args.run.script)?;
    let base = resolve_config(&args.run)?;
    let points = sweep_points(args, &base)?;
    fs::create_dir_all(&args.run.out).map_err(|e| Error::io(&args.run.out, e))?;

    let run_point = |(i, p): (usize, &SweepPoint)| -> (Result<StoryRun>, PathBuf) {
        let dir = args.run.out.join(format!("point_{i:03}"));
        let result = build_engine(&args.run, p.config.clone()).and_then(|engine| execute(&engine, &script, &dir));
        (result, dir)
    };
    // Toy points are independent and run in parallel; bridge points share
    // one server and run in order.
    let results: Vec<(Result<StoryRun>, PathBuf)> = match args.run.backbone {
        BackboneKind::Toy => points.par_iter().enumerate().map(run_point).collect(),
        BackboneKind::Bridge => points.iter().enumerate().map(run_point).collect(),
    };

    let mut csv = String::new();
    writeln!(csv, "{SWEEP_SUMMARY_HEADER}").unwrap();
    let mut worst = 0;
    for (i, (p, (result, dir))) in points.iter().zip(&results).enumerate() {
        let (segments, disc, smooth, dev, status) = match result {
            Ok(run) => (
                run.segments.len(),
                run.metrics.mean_boundary_discontinuity(),
                run.metrics.mean_intra_smoothness(),
                mean_abs_alpha_deviation(run),
                "ok".to_string(),
            ),
            Err(e) => {
                eprintln!("point {i} ({}): {e}", dir.display());
                worst = worst.max(e.exit_code());
                (0, None, None, None, format!("failed:exit{}", e.exit_code()))
            }
        };
        writeln!(
            csv,
            "{i},{},{},{},{},{},{segments},{},{},{},{status}",
            p.gamma,
            p.tau,
            p.decay_base,
            p.sar_mode.as_str(),
            p.ablation.as_str(),
            opt(disc),
            opt(smooth),
            opt(dev)
        )
        .unwrap();
    }
    let path = args.run.out.join("sweep_summary.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    emit(format_args!("points={} summary={}", points.len(), path.display()));
    Ok(worst)
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        offset: 0,
        message: format!("{}: {e}", path.display()),
    })
}

fn cmd_inspect(dir: &Path) -> Result<i32> {
    let manifest = read_json(&dir.join("run.json"))?;
    let plans = read_json(&dir.join("blend_plans.json"))?;
    let metrics = read_json(&dir.join("metrics.json"))?;
    let csv_path = dir.join("weights.csv");
    let csv = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;

    emit(format_args!(
        "story={} seed={} backbone={} status={}",
        manifest["story_id"].as_str().unwrap_or("?"),
        manifest["seed"],
        manifest["backbone"].as_str().unwrap_or("?"),
        manifest["status"]
    ));

    // Per segment: step count, first/last α_action, dominance switches.
    let mut rows: Vec<(u64, usize, f64, f64, usize, String)> = Vec::new();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let (Some(seg), Some(alpha), Some(dom)) = (
            cols.first().and_then(|s| s.parse::<u64>().ok()),
            cols.get(11).and_then(|s| s.parse::<f64>().ok()),
            cols.get(12),
        ) else {
            return Err(Error::Parse {
                offset: 0,
                message: format!("{}: malformed row `{line}`", csv_path.display()),
            });
        };
        match rows.last_mut() {
            Some(r) if r.0 == seg => {
                r.1 += 1;
                r.3 = alpha;
                if r.5 != *dom {
                    r.4 += 1;
                    r.5 = dom.to_string();
                }
            }
            _ => rows.push((seg, 1, alpha, alpha, 0, dom.to_string())),
        }
    }
    for (seg, steps, first, last, switches, _) in &rows {
        emit(format_args!(
            "segment={seg} steps={steps} alpha_action_first={first:.6} alpha_action_final={last:.6} dominant_switches={switches}"
        ));
    }
    for p in plans.as_array().into_iter().flatten() {
        emit(format_args!(
            "boundary segment={} twb_mode={} gamma={} gamma_effective={} S_A={}",
            p["segment"],
            p["twb_mode"].as_str().unwrap_or("?"),
            p["gamma"],
            p["gamma_effective"],
            p.get("S_A").map_or("NA".to_string(), Value::to_string)
        ));
    }
    if let Some(d) = metrics["boundary_discontinuity"].as_array() {
        let vals: Vec<String> = d.iter().map(Value::to_string).collect();
        emit(format_args!("boundary_discontinuity=[{}]", vals.join(",")));
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("narrablend").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn generate_flags_parse() {
        let cli = parse(&[
            "generate", "--script", "s.json", "--out", "o", "--seed", "7", "--no-dipw", "--no-twb", "--no-sar",
            "--backbone", "bridge", "--bridge-endpoint", "127.0.0.1:9",
        ]);
        let Command::Generate(a) = cli.command else { panic!() };
        assert_eq!(a.seed, Some(7));
        assert!(a.no_dipw && a.no_twb && a.no_sar);
        assert_eq!(a.backbone, BackboneKind::Bridge);
        assert_eq!(a.bridge_endpoint.as_deref(), Some("127.0.0.1:9"));
    }

    #[test]
    fn sweep_grid_is_cartesian() {
        let cli = parse(&[
            "sweep", "--script", "s", "--out", "o", "--gamma", "0,0.25", "--tau", "0.5,1,2",
            "--ablation", "full,no-twb",
        ]);
        let Command::Sweep(a) = cli.command else { panic!() };
        let pts = sweep_points(&a, &RunConfig::default()).unwrap();
        assert_eq!(pts.len(), 12);
        assert_eq!((pts[0].gamma, pts[0].tau, pts[0].ablation), (0.0, 0.5, Ablation::Full));
        assert_eq!(pts[1].ablation, Ablation::NoTwb);
        assert!(!pts[1].config.blend.enabled);
    }

    #[test]
    fn sweep_rejects_out_of_range_point() {
        let cli = parse(&["sweep", "--script", "s", "--out", "o", "--gamma", "0.2,0.7"]);
        let Command::Sweep(a) = cli.command else { panic!() };
        match sweep_points(&a, &RunConfig::default()) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "blend.gamma"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ablation_none_disables_all() {
        let mut c = RunConfig::default();
        Ablation::None.apply(&mut c);
        assert!(!c.dipw.enabled && !c.blend.enabled && !c.sar.enabled);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["narrablend", "generate"]), 1);
        assert_eq!(run(["narrablend", "frobnicate"]), 1);
        assert_eq!(run(["narrablend", "--help"]), 0);
    }
}
