//! Command line driver: configuration-driven experiments, checks, audits and
//! golden files.
//!
//! Exit codes: 0 on success, 1 on any validation or runtime error, 2 on a
//! golden mismatch. Errors are reported as one JSON object on stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::approx::{approx_error_report, discrete_convolution, partition_of_unity};
use crate::bbm::{energy_bracket, sandwich_report};
use crate::config::{field_from_expr, parse_config, ExperimentConfig};
use crate::energy::{riesz_rp, EnergyDensity, ScalarField};
use crate::error::{BbmError, Result};
use crate::golden::{sha256_hex, GoldenRecord};
use crate::mollifier::{fmt_num, limit_admissibility};
use crate::regularity::{doubling_constant, poincare_constant, strong_doubling_constant, RegularityReport};
use crate::space::MetricMeasureSpace;

#[derive(Debug, Parser)]
#[command(name = "bbmlab", version, about = "Nonlocal functionals on finite metric measure spaces")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Args)]
struct OutArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory, overriding the one in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the configured space and print a summary.
    Space {
        #[command(subcommand)]
        action: SpaceAction,
    },
    /// Empirical regularity constants.
    Check {
        #[command(subcommand)]
        kind: CheckKind,
    },
    /// Admissibility audit of the configured families.
    Mollifier {
        #[command(subcommand)]
        action: MollifierAction,
    },
    /// Energy bracket of the configured map.
    Energy {
        #[command(subcommand)]
        action: EnergyAction,
    },
    /// Run every section of an experiment and write its outputs.
    Run(OutArgs),
    /// Record or compare golden results.
    Golden {
        #[command(subcommand)]
        action: GoldenAction,
    },
}

#[derive(Debug, Subcommand)]
enum SpaceAction {
    /// Build the space and print its size, resolution and diameter.
    Build(ConfigArg),
}

#[derive(Debug, Args)]
struct CheckArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Largest radius examined.
    #[arg(long = "R")]
    big_r: f64,
}

#[derive(Debug, Subcommand)]
enum CheckKind {
    /// Doubling constant over the domain.
    Doubling(CheckArgs),
    /// Strong doubling constant over the domain.
    StrongDoubling(CheckArgs),
    /// Poincaré constant for the configured test functions.
    Poincare {
        #[command(flatten)]
        args: CheckArgs,
        /// Dilation factor of the outer ball.
        #[arg(long, default_value_t = 2.0)]
        lambda: f64,
        /// Scale of `lip_h`; twice the minimal separation when absent.
        #[arg(long)]
        h: Option<f64>,
    },
}

#[derive(Debug, Subcommand)]
enum MollifierAction {
    /// Lower and upper sums, envelopes and decay for each family.
    Audit(OutArgs),
}

#[derive(Debug, Subcommand)]
enum EnergyAction {
    /// Lower and upper energy of the configured map.
    Estimate(ConfigArg),
}

#[derive(Debug, Subcommand)]
enum GoldenAction {
    /// Run the experiment and write its golden file.
    Record(OutArgs),
    /// Run the experiment and compare against its golden file.
    Compare(OutArgs),
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code. `BBMLAB_THREADS` caps the worker count.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            report_error("usage", &e.to_string(), &[]);
            return 1;
        }
    };
    let pool = match thread_pool() {
        Ok(p) => p,
        Err(e) => {
            report(&e);
            return 1;
        }
    };
    let outcome = pool.install(|| dispatch(cli.command));
    match outcome {
        Ok(Outcome::Done(v)) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            0
        }
        Ok(Outcome::Mismatch(v)) => {
            eprintln!("{}", serde_json::to_string(&v).expect("json"));
            2
        }
        Err(e) => {
            report(&e);
            1
        }
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("BBMLAB_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| BbmError::Config(vec![format!("BBMLAB_THREADS must be a positive integer, got {v:?}")]))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| BbmError::InvalidArgument(e.to_string()))
}

fn report(e: &BbmError) {
    let kind = match e {
        BbmError::Config(_) => "config",
        BbmError::Io(_) => "io",
        BbmError::Json(_) => "json",
        BbmError::Csv(_) => "csv",
        BbmError::Resolution { .. } => "resolution",
        _ => "invalid",
    };
    let violations = match e {
        BbmError::Config(v) => v.clone(),
        _ => Vec::new(),
    };
    report_error(kind, &e.to_string(), &violations);
}

fn report_error(kind: &str, message: &str, violations: &[String]) {
    eprintln!("{}", json!({"error": kind, "message": message, "violations": violations}));
}

enum Outcome {
    Done(Value),
    Mismatch(Value),
}

/// A parsed config with the paths derived from its location.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    pub name: String,
    pub golden: PathBuf,
}

impl Experiment {
    pub fn load(path: &Path, out: Option<&Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let config = parse_config(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("experiment").to_string();
        let (dir, name, golden) = match &config.output {
            Some(o) => (base.join(&o.dir), o.name.clone(), o.golden.as_ref().map(|g| base.join(g))),
            None => (base.join("out"), stem, None),
        };
        let golden = golden.unwrap_or_else(|| base.join("golden").join(format!("{name}.golden.json")));
        Ok(Experiment { config, out_dir: out.map(Path::to_path_buf).unwrap_or(dir), name, golden })
    }
}

/// Everything one `run` produces.
pub struct RunOutput {
    pub record: GoldenRecord,
    /// `(file name, content)`
    pub files: Vec<(String, String)>,
    pub summary: Value,
}

fn key(prefix: &str, parts: &[f64]) -> String {
    let inner: Vec<String> = parts.iter().map(|&v| fmt_num(v)).collect();
    format!("{prefix}[{}]", inner.join(","))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

/// Runs every configured section.
pub fn run_pipeline(cfg: &ExperimentConfig, name: &str) -> Result<RunOutput> {
    let space = cfg.build_space()?;
    let domain = cfg.domain(&space)?;
    let map = cfg.build_map(&space)?;
    let mut record = GoldenRecord::new(sha256_hex(cfg.to_json().as_bytes()));
    let mut files = Vec::new();
    let mut summary = serde_json::Map::new();
    summary.insert("atoms".into(), json!(space.len()));

    if cfg.runs_sandwich() {
        let f = map.as_ref().expect("validated");
        let family = cfg.build_family()?.expect("validated");
        let rep = sandwich_report(&space, &domain, f, &family, cfg.p, &cfg.delta_schedule()?, &cfg.energy_args(&space, &domain)?)?;
        for row in &rep.rows {
            record.insert(key("run.functional", &[row.delta]), row.functional);
            record.insert(key("run.tail", &[row.delta]), row.tail);
            record.insert(key("run.tail_supremum", &[row.delta]), row.tail_supremum.value);
        }
        record.insert("run.liminf", rep.liminf_est);
        record.insert("run.limsup", rep.limsup_est);
        record.insert("run.energy.lower", rep.energy.lower);
        record.insert("run.energy.upper", rep.energy.upper);
        record.insert("run.lower_ratio", rep.lower_ratio);
        record.insert("run.upper_ratio", rep.upper_ratio);
        let csv = rep.to_csv()?;
        let file = format!("{name}.run.csv");
        record.insert_csv(&file, &csv);
        files.push((file, csv));
        let value = to_json(&rep)?;
        files.push((format!("{name}.run.json"), pretty(&value)));
        summary.insert("run".into(), value);
    }

    if let Some((families, args, v)) = cfg.admissibility_args(&space)? {
        let mut reports = Vec::new();
        for (i, family) in families.iter().enumerate() {
            let rep = limit_admissibility(&space, family, &v, &args)?;
            let prefix = format!("admissibility.{i}");
            record.insert(format!("{prefix}.i_lower"), rep.i_lower);
            record.insert(format!("{prefix}.i_upper"), rep.i_upper);
            record.insert(format!("{prefix}.c_minus"), rep.c_minus);
            record.insert(format!("{prefix}.c_plus"), rep.c_plus);
            for (r, d) in args.radius_schedule.iter().zip(&rep.decay_by_radius) {
                record.insert(key(&format!("{prefix}.decay"), &[*r]), *d);
            }
            let csv = rep.to_csv()?;
            let file = format!("{name}.admissibility.{i}.csv");
            record.insert_csv(&file, &csv);
            files.push((file, csv));
            reports.push(to_json(&rep)?);
        }
        let value = Value::Array(reports);
        files.push((format!("{name}.admissibility.json"), pretty(&value)));
        summary.insert("admissibility".into(), value);
    }

    if let Some(c) = &cfg.checks {
        let mut out = Vec::new();
        for &r in &c.doubling {
            let rep = doubling_constant(&space, &domain, r, &c.radii)?;
            record.insert(key("check.doubling", &[r]), rep.constant);
            out.push(check_json(&rep, r)?);
        }
        for &r in &c.strong_doubling {
            let rep = strong_doubling_constant(&space, &domain, r, &c.radii)?;
            record.insert(key("check.strong_doubling", &[r]), rep.constant);
            out.push(check_json(&rep, r)?);
        }
        if let Some(pc) = &c.poincare {
            let tests = poincare_tests(cfg, &space, &pc.tests)?;
            let rep = poincare_constant(&space, &domain, pc.big_r, pc.lambda, cfg.p, &tests, pc.h, &c.radii)?;
            record.insert(key("check.poincare", &[pc.big_r]), rep.constant);
            out.push(check_json(&rep, pc.big_r)?);
        }
        let value = Value::Array(out);
        files.push((format!("{name}.checks.json"), pretty(&value)));
        summary.insert("checks".into(), value);
    }

    if let Some(a) = &cfg.approximation {
        let mut out = serde_json::Map::new();
        if let Some(r) = a.partition_radius {
            let pou = partition_of_unity(&space, &domain, r)?;
            let near = space.enlarge(&domain, r / 16.0);
            let sums: Vec<f64> = near.iter().map(|x| pou.sum_at(x)).collect();
            let lo = sums.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let overlap = pou.overlap(&space) as f64;
            let lip_r = pou.max_lip(&space) * r;
            record.insert("approx.partition.centers", pou.centers.len() as f64);
            record.insert("approx.partition.sum_min", lo);
            record.insert("approx.partition.sum_max", hi);
            record.insert("approx.partition.overlap", overlap);
            record.insert("approx.partition.lip_r", lip_r);
            out.insert(
                "partition".into(),
                json!({"r": r, "centers": pou.centers.len(), "sum_min": lo, "sum_max": hi, "overlap": overlap, "lip_r": lip_r}),
            );
        }
        if let Some(r) = a.convolution_radius {
            let u = scalar_map(cfg, &space)?;
            let conv = discrete_convolution(&space, &domain, r, &u)?;
            let mut probes = Vec::new();
            for &x in &a.probes {
                if x >= space.len() {
                    return Err(BbmError::InvalidArgument(format!("probe atom {x} out of range")));
                }
                record.insert(format!("approx.convolution.u[{x}]"), conv.output[x]);
                probes.push(json!({"atom": x, "value": conv.output[x]}));
            }
            let consts = approx_error_report(&space, &domain, r, &u, cfg.p)?;
            record.insert("approx.c0", consts.c0);
            record.insert("approx.c1", consts.c1);
            out.insert(
                "convolution".into(),
                json!({"r": r, "probes": probes, "flagged": conv.flagged.len(), "constants": to_json(&consts)?}),
            );
        }
        let value = Value::Object(out);
        files.push((format!("{name}.approx.json"), pretty(&value)));
        summary.insert("approximation".into(), value);
    }

    if let Some(rz) = &cfg.riesz {
        let g = field_from_expr(&space, &rz.density)?;
        let e = EnergyDensity(g.iter().zip(space.weights()).map(|(a, w)| a * w).collect());
        let mut out = Vec::new();
        for &(x, r) in &rz.points {
            if x >= space.len() {
                return Err(BbmError::InvalidArgument(format!("riesz atom {x} out of range")));
            }
            let v = riesz_rp(&space, &e, x, r, rz.tol)?;
            record.insert(format!("riesz[{x},{}]", fmt_num(r)), v);
            out.push(json!({"atom": x, "r": r, "value": v}));
        }
        let value = Value::Array(out);
        files.push((format!("{name}.riesz.json"), pretty(&value)));
        summary.insert("riesz".into(), value);
    }

    Ok(RunOutput { record, files, summary: Value::Object(summary) })
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json");
    s.push('\n');
    s
}

fn check_json(rep: &RegularityReport, big_r: f64) -> Result<Value> {
    let mut v = to_json(rep)?;
    v["R"] = json!(big_r);
    Ok(v)
}

fn scalar_map(cfg: &ExperimentConfig, space: &MetricMeasureSpace) -> Result<ScalarField> {
    cfg.build_map(space)?
        .and_then(|m| m.scalar_values())
        .ok_or_else(|| BbmError::Config(vec!["a scalar map is required".into()]))
}

fn poincare_tests(cfg: &ExperimentConfig, space: &MetricMeasureSpace, exprs: &[String]) -> Result<Vec<ScalarField>> {
    if exprs.is_empty() {
        Ok(vec![scalar_map(cfg, space)?])
    } else {
        exprs.iter().map(|e| field_from_expr(space, e)).collect()
    }
}

fn write_outputs(dir: &Path, files: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, content) in files {
        fs::write(dir.join(name), content)?;
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Space { action: SpaceAction::Build(a) } => {
            let exp = Experiment::load(&a.config, None)?;
            let s = exp.config.build_space()?;
            Ok(Outcome::Done(json!({
                "atoms": s.len(),
                "h_min": s.h_min(),
                "diameter": s.diameter(),
                "total_mass": s.total_mass(),
            })))
        }
        Command::Check { kind } => {
            let (a, which) = match &kind {
                CheckKind::Doubling(a) => (a, 0),
                CheckKind::StrongDoubling(a) => (a, 1),
                CheckKind::Poincare { args, .. } => (args, 2),
            };
            let exp = Experiment::load(&a.config.config, None)?;
            let cfg = &exp.config;
            let s = cfg.build_space()?;
            let dom = cfg.domain(&s)?;
            let sel = cfg.checks.as_ref().map(|c| c.radii.clone()).unwrap_or_default();
            let rep = match (which, &kind) {
                (0, _) => doubling_constant(&s, &dom, a.big_r, &sel)?,
                (1, _) => strong_doubling_constant(&s, &dom, a.big_r, &sel)?,
                (_, CheckKind::Poincare { lambda, h, .. }) => {
                    let exprs = cfg.checks.as_ref().and_then(|c| c.poincare.as_ref()).map(|p| p.tests.clone()).unwrap_or_default();
                    let tests = poincare_tests(cfg, &s, &exprs)?;
                    let h = h.unwrap_or(2.0 * s.h_min());
                    poincare_constant(&s, &dom, a.big_r, *lambda, cfg.p, &tests, h, &sel)?
                }
                _ => unreachable!(),
            };
            Ok(Outcome::Done(check_json(&rep, a.big_r)?))
        }
        Command::Mollifier { action: MollifierAction::Audit(a) } => {
            let exp = Experiment::load(&a.config.config, a.out.as_deref())?;
            let s = exp.config.build_space()?;
            let (families, args, v) = exp
                .config
                .admissibility_args(&s)?
                .ok_or_else(|| BbmError::Config(vec!["config has no admissibility section".into()]))?;
            let mut files = Vec::new();
            let mut reports = Vec::new();
            for (i, family) in families.iter().enumerate() {
                let rep = limit_admissibility(&s, family, &v, &args)?;
                files.push((format!("{}.admissibility.{i}.csv", exp.name), rep.to_csv()?));
                reports.push(to_json(&rep)?);
            }
            write_outputs(&exp.out_dir, &files)?;
            Ok(Outcome::Done(Value::Array(reports)))
        }
        Command::Energy { action: EnergyAction::Estimate(a) } => {
            let exp = Experiment::load(&a.config, None)?;
            let cfg = &exp.config;
            let s = cfg.build_space()?;
            let dom = cfg.domain(&s)?;
            let f = cfg.build_map(&s)?.ok_or_else(|| BbmError::Config(vec!["config has no map".into()]))?;
            let (est, scalar, flags) = energy_bracket(&s, &dom, &f, cfg.p, &cfg.energy_args(&s, &dom)?)?;
            let mut v = to_json(&est)?;
            v["scalar"] = to_json(&scalar)?;
            v["flags"] = json!(flags);
            Ok(Outcome::Done(v))
        }
        Command::Run(a) => {
            let exp = Experiment::load(&a.config.config, a.out.as_deref())?;
            let out = run_pipeline(&exp.config, &exp.name)?;
            write_outputs(&exp.out_dir, &out.files)?;
            let files: Vec<String> = out.files.iter().map(|(f, _)| exp.out_dir.join(f).display().to_string()).collect();
            Ok(Outcome::Done(json!({"outputs": files, "values": out.record.values})))
        }
        Command::Golden { action } => {
            let (a, compare) = match &action {
                GoldenAction::Record(a) => (a, false),
                GoldenAction::Compare(a) => (a, true),
            };
            let exp = Experiment::load(&a.config.config, a.out.as_deref())?;
            let out = run_pipeline(&exp.config, &exp.name)?;
            write_outputs(&exp.out_dir, &out.files)?;
            let path = exp.golden.display().to_string();
            if compare {
                let old: GoldenRecord = serde_json::from_str(&fs::read_to_string(&exp.golden)?)?;
                let diffs = old.compare(&out.record);
                if diffs.is_empty() {
                    Ok(Outcome::Done(json!({"status": "match", "golden": path, "entries": old.values.len()})))
                } else {
                    Ok(Outcome::Mismatch(json!({"error": "golden mismatch", "golden": path, "differences": diffs})))
                }
            } else {
                if let Some(dir) = exp.golden.parent() {
                    fs::create_dir_all(dir)?;
                }
                let mut text = serde_json::to_string_pretty(&out.record)?;
                text.push('\n');
                fs::write(&exp.golden, text)?;
                Ok(Outcome::Done(json!({"status": "recorded", "golden": path, "entries": out.record.values.len()})))
            }
        }
    }
}
