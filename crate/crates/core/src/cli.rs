//! The `stripbp` command line.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 a model
//! assumption does not hold, 4 a computation did not converge.

use std::ffi::OsString;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{load_model, ConfigError};
use crate::criteria::{
    global_extinction_criterion, partial_extinction_criterion, theorem_4_6_check, CriteriaError,
    CriterionReport, Verdict,
};
use crate::extinction::{
    q_global, q_of_a, q_partial, ExtinctionError, ExtinctionVector, DEFAULT_REPORT_LEVELS,
    DEFAULT_TOL,
};
use crate::fixedpoints::{
    affine_segment_check, s0_scan_marked, ExtinctionMarks, FixedPointError, DEFAULT_DEPTH,
};
use crate::model::{Model, ModelError, PhaseSet, TypeId};
use crate::montecarlo::{
    run_trials, Classification, Estimate, MonteCarloError, TrialConfig, MAX_CENSORED_FRACTION,
    MIN_TRIALS,
};
use crate::output::{extinction_csv, fmt_sig17, scan_svg, sweep_svg, write_json, Csv};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ASSUMPTION: i32 = 3;
pub const EXIT_NONCONVERGENCE: i32 = 4;

/// Smallest fraction of sweep points that must succeed for exit code 0.
pub const SWEEP_MIN_SUCCESS: f64 = 0.9;
/// Root values closer than this count as the same vector in a sweep's census.
pub const DISTINCT_TOL: f64 = 1e-6;

const DEFAULT_CRITERIA_LEVELS: usize = 400;
const DEFAULT_CHECK_LEVELS: usize = 200;

#[derive(Parser, Debug)]
#[command(
    name = "stripbp",
    version,
    about = "Extinction probabilities of branching processes on a strip"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Model configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for output artifacts.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Level count: criterion horizon, scan depth, or reported levels.
    #[arg(long, global = true)]
    levels: Option<usize>,
    #[arg(long, global = true, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads.
    #[arg(long, global = true, env = "STRIPBP_JOBS")]
    jobs: Option<usize>,
    /// Type reported as a scalar, written `level:phase`.
    #[arg(long, global = true, default_value = "0:1")]
    root: TypeArg,
}

#[derive(Args, Debug, Clone)]
struct TargetArgs {
    /// global, partial, A<i>, or custom.
    #[arg(long, default_value = "global")]
    target: String,
    /// Phases of a custom target, comma separated.
    #[arg(long, value_delimiter = ',')]
    phases: Vec<usize>,
    /// Extra types `level:phase` of a custom target.
    #[arg(long, value_delimiter = ',')]
    include: Vec<TypeArg>,
    /// Types `level:phase` removed from the phases of a custom target.
    #[arg(long, value_delimiter = ',')]
    exclude: Vec<TypeArg>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Partial and global extinction criteria.
    Criteria,
    /// One extinction probability vector.
    Extinction {
        #[command(flatten)]
        target: TargetArgs,
    },
    /// Root values of several vectors over a parameter range.
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long)]
        lo: f64,
        #[arg(long)]
        hi: f64,
        #[arg(long, default_value_t = 41)]
        steps: usize,
        #[arg(long, value_delimiter = ',', default_value = "global,A1,A2,partial")]
        targets: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        phases: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        include: Vec<TypeArg>,
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<TypeArg>,
    },
    /// Level-0 projection scan of the fixed-point set.
    Scan {
        /// Lattice spacing, as a decimal or a fraction like `1/256`.
        #[arg(long, default_value = "1/256")]
        h: Spacing,
    },
    /// Monte Carlo estimate of an extinction probability.
    Simulate {
        #[command(flatten)]
        target: TargetArgs,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 2000)]
        max_generations: usize,
        #[arg(long, default_value_t = 1e6)]
        max_population: f64,
        #[arg(long, default_value_t = 200)]
        quiet_generations: usize,
    },
    /// Local isomorphism and the sufficient conditions for distinct vectors.
    Check {
        /// Target phase sets; defaults to every single phase.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct TypeArg(TypeId);

impl FromStr for TypeArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (l, p) = s
            .split_once(':')
            .ok_or_else(|| format!("expected level:phase, got {s}"))?;
        let level = l
            .trim()
            .parse()
            .map_err(|e| format!("bad level in {s}: {e}"))?;
        let phase = p
            .trim()
            .parse()
            .map_err(|e| format!("bad phase in {s}: {e}"))?;
        Ok(Self(TypeId::new(level, phase)))
    }
}

#[derive(Clone, Copy, Debug)]
struct Spacing(f64);

impl FromStr for Spacing {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let h = match s.split_once('/') {
            Some((n, d)) => {
                let n: f64 = n.trim().parse().map_err(|e| format!("{e}"))?;
                let d: f64 = d.trim().parse().map_err(|e| format!("{e}"))?;
                n / d
            }
            None => s.trim().parse().map_err(|e| format!("{e}"))?,
        };
        if !(h > 0.0 && h <= 1.0) {
            return Err(format!("spacing must lie in (0, 1], got {h}"));
        }
        Ok(Self(h))
    }
}

/// An error carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::usage(format!("i/o error: {e}"))
    }
}

impl From<CriteriaError> for Failure {
    fn from(e: CriteriaError) -> Self {
        let code = match e {
            CriteriaError::InvalidTarget(_) => EXIT_USAGE,
            _ => EXIT_ASSUMPTION,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ExtinctionError> for Failure {
    fn from(e: ExtinctionError) -> Self {
        let code = match e {
            ExtinctionError::InvalidTruncation(_) => EXIT_USAGE,
            _ => EXIT_NONCONVERGENCE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<FixedPointError> for Failure {
    fn from(e: FixedPointError) -> Self {
        let code = match &e {
            FixedPointError::Extinction(inner) => return inner.clone().into(),
            FixedPointError::SolveFailed { .. } => EXIT_NONCONVERGENCE,
            FixedPointError::ShortInput { .. } => EXIT_USAGE,
            _ => EXIT_ASSUMPTION,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<MonteCarloError> for Failure {
    fn from(e: MonteCarloError) -> Self {
        let code = match e {
            MonteCarloError::TooCensored { .. } => EXIT_NONCONVERGENCE,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let pool = match cli.global.jobs {
        Some(0) => {
            eprintln!("error: --jobs must be positive");
            return EXIT_USAGE;
        }
        Some(j) => rayon::ThreadPoolBuilder::new().num_threads(j).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_USAGE;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

struct Context<'a> {
    model: Model,
    global: &'a GlobalArgs,
}

impl Context<'_> {
    fn out_path(&self, name: &str) -> Result<PathBuf, Failure> {
        std::fs::create_dir_all(&self.global.out)?;
        Ok(self.global.out.join(name))
    }

    fn root(&self) -> Result<TypeId, Failure> {
        let t = self.global.root.0;
        if t.phase == 0 || t.phase > self.model.d() {
            return Err(Failure::usage(format!(
                "root {t} has no phase in 1..={}",
                self.model.d()
            )));
        }
        Ok(t)
    }

    /// Levels on which ladders are compared; always covers the root.
    fn report_levels(&self) -> Result<usize, Failure> {
        let report = self.global.levels.unwrap_or(DEFAULT_REPORT_LEVELS);
        Ok(report.max(self.root()?.level))
    }

    fn tol(&self) -> Result<f64, Failure> {
        let tol = self.global.tol;
        if !(tol > 0.0 && tol < 1.0) {
            return Err(Failure::usage(format!(
                "--tol must lie in (0, 1), got {tol}"
            )));
        }
        Ok(tol)
    }
}

fn dispatch(cli: &Cli) -> CmdResult {
    let path = cli
        .global
        .config
        .as_deref()
        .ok_or_else(|| Failure::usage("--config is required"))?;
    let ctx = Context {
        model: load_model(path)?,
        global: &cli.global,
    };
    match &cli.command {
        Command::Criteria => cmd_criteria(&ctx),
        Command::Extinction { target } => cmd_extinction(&ctx, target),
        Command::Sweep {
            param,
            lo,
            hi,
            steps,
            targets,
            phases,
            include,
            exclude,
        } => {
            let custom = TargetArgs {
                target: "custom".into(),
                phases: phases.clone(),
                include: include.clone(),
                exclude: exclude.clone(),
            };
            cmd_sweep(&ctx, param, *lo, *hi, *steps, targets, &custom)
        }
        Command::Scan { h } => cmd_scan(&ctx, h.0),
        Command::Simulate {
            target,
            trials,
            max_generations,
            max_population,
            quiet_generations,
        } => {
            let cfg = TrialConfig {
                root: ctx.root()?,
                max_generations: *max_generations,
                max_population: *max_population,
                quiet_generations: *quiet_generations,
                seed: ctx.global.seed,
            };
            cmd_simulate(&ctx, target, *trials, &cfg)
        }
        Command::Check { targets } => cmd_check(&ctx, targets),
    }
}

/// What an extinction computation is about.
#[derive(Clone, Debug)]
enum Target {
    Global,
    Partial,
    Set(PhaseSet),
}

fn resolve_target(name: &str, d: usize, custom: &TargetArgs) -> Result<Target, Failure> {
    let lower = name.trim().to_ascii_lowercase();
    match lower.as_str() {
        "global" => Ok(Target::Global),
        "partial" => Ok(Target::Partial),
        "custom" => {
            let set = PhaseSet::new(
                d,
                custom.phases.iter().copied(),
                custom.include.iter().map(|t| t.0),
                custom.exclude.iter().map(|t| t.0),
            )?;
            Ok(Target::Set(set))
        }
        _ => {
            let phase = lower
                .strip_prefix('a')
                .and_then(|p| p.parse::<usize>().ok())
                .ok_or_else(|| Failure::usage(format!("unknown target {name}")))?;
            if phase == 0 || phase > d {
                return Err(Failure::usage(format!(
                    "target {name} has no phase in 1..={d}"
                )));
            }
            Ok(Target::Set(PhaseSet::phases_of([phase])))
        }
    }
}

fn compute(
    model: &Model,
    target: &Target,
    tol: f64,
    report: usize,
) -> Result<ExtinctionVector, ExtinctionError> {
    match target {
        Target::Global => q_global(model, tol, report),
        Target::Partial => q_partial(model, tol, report),
        Target::Set(set) => q_of_a(model, set, tol, report),
    }
}

fn model_json(model: &Model) -> serde_json::Value {
    json!({"name": model.name(), "d": model.d(), "params": model.params()})
}

fn print_json(value: &impl Serialize) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("serializable")
    );
}

fn cmd_criteria(ctx: &Context) -> CmdResult {
    let k = ctx.global.levels.unwrap_or(DEFAULT_CRITERIA_LEVELS);
    let partial = partial_extinction_criterion(&ctx.model, k)?;
    let global: Option<CriterionReport> = if partial.verdict == Verdict::Fails {
        None
    } else {
        Some(global_extinction_criterion(&ctx.model, k)?)
    };
    let summary = match (&partial.verdict, global.as_ref().map(|g| g.verdict)) {
        (Verdict::Fails, _) => "partial extinction obstructed: q_partial < 1",
        (_, Some(Verdict::Holds)) => "no obstruction to K; series divergent: q = 1",
        (_, Some(Verdict::Fails)) => "no obstruction to K; series convergent: q < 1",
        _ => "no obstruction to K; global criterion inconclusive",
    };
    let report = json!({
        "model": model_json(&ctx.model),
        "levels": k,
        "partial": partial,
        "global": global,
        "summary": summary,
    });
    write_json(&ctx.out_path("criteria.json")?, &report)?;
    print_json(&report);
    Ok(())
}

fn cmd_extinction(ctx: &Context, args: &TargetArgs) -> CmdResult {
    let target = resolve_target(&args.target, ctx.model.d(), args)?;
    let report = ctx.report_levels()?;
    let result = compute(&ctx.model, &target, ctx.tol()?, report);
    let (vector, failure) = match result {
        Ok(v) => (v, None),
        Err(ExtinctionError::NonConvergence {
            level,
            change,
            last,
        }) => {
            let e = ExtinctionError::NonConvergence {
                level,
                change,
                last: last.clone(),
            };
            (*last, Some(Failure::from(e)))
        }
        Err(e) => return Err(e.into()),
    };
    extinction_csv(&vector, report).write(&ctx.out_path("extinction.csv")?)?;
    let meta = json!({
        "model": model_json(&ctx.model),
        "target": args.target,
        "set": vector.target.to_string(),
        "root": ctx.root()?.to_string(),
        "root_value": vector.get(ctx.root()?),
        "window": vector.window,
        "path": vector.path,
        "residual": vector.residual,
        "converged": vector.converged,
        "last_change": vector.last_change,
        "monotonicity_violation": vector.monotonicity_violation,
        "ladder": vector.ladder,
        "tol": ctx.global.tol,
    });
    write_json(&ctx.out_path("extinction.json")?, &meta)?;
    print_json(&meta);
    failure.map_or(Ok(()), Err)
}

/// Number of clusters of values at mutual distance below [`DISTINCT_TOL`].
fn distinct_count(values: &[f64]) -> usize {
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    let mut count = 0;
    let mut last = f64::NEG_INFINITY;
    for v in sorted {
        if v - last >= DISTINCT_TOL {
            count += 1;
        }
        last = v;
    }
    count
}

fn sanitize(message: &str) -> String {
    message.replace([',', '\n', '"'], ";")
}

fn cmd_sweep(
    ctx: &Context,
    param: &str,
    lo: f64,
    hi: f64,
    steps: usize,
    target_names: &[String],
    custom: &TargetArgs,
) -> CmdResult {
    if !(lo <= hi) || steps == 0 {
        return Err(Failure::usage("sweep needs lo <= hi and steps >= 1"));
    }
    if !ctx.model.params().contains_key(param) {
        return Err(ModelError::UnknownParameter(param.to_string()).into());
    }
    let targets = target_names
        .iter()
        .map(|n| resolve_target(n, ctx.model.d(), custom))
        .collect::<Result<Vec<_>, _>>()?;
    let tol = ctx.tol()?;
    let root = ctx.root()?;
    let xs: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let report = ctx.report_levels()?;
    let rows: Vec<(Vec<f64>, String)> = xs
        .par_iter()
        .map(|&x| {
            let model = match ctx.model.with_param(param, x) {
                Ok(m) => m,
                Err(e) => return (vec![f64::NAN; targets.len()], sanitize(&e.to_string())),
            };
            let mut values = Vec::with_capacity(targets.len());
            let mut status = String::from("ok");
            for t in &targets {
                match compute(&model, t, tol, report) {
                    Ok(v) => values.push(v.get(root)),
                    Err(e) => {
                        values.push(f64::NAN);
                        status = sanitize(&e.to_string());
                    }
                }
            }
            (values, status)
        })
        .collect();

    let mut header = vec![param.to_string()];
    header.extend(target_names.iter().cloned());
    header.extend(["distinct".to_string(), "status".to_string()]);
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&header_refs);
    for (x, (values, status)) in xs.iter().zip(&rows) {
        let mut fields = vec![fmt_sig17(*x)];
        fields.extend(values.iter().map(|&v| fmt_sig17(v)));
        fields.push(distinct_count(values).to_string());
        fields.push(status.clone());
        csv.row(fields);
    }
    csv.write(&ctx.out_path("sweep.csv")?)?;
    let series: Vec<(String, Vec<f64>)> = target_names
        .iter()
        .enumerate()
        .map(|(j, name)| (name.clone(), rows.iter().map(|(v, _)| v[j]).collect()))
        .collect();
    std::fs::write(ctx.out_path("sweep.svg")?, sweep_svg(&xs, &series))?;
    print!("{}", csv.as_str());

    let ok = rows.iter().filter(|(_, s)| s == "ok").count();
    if (ok as f64) < SWEEP_MIN_SUCCESS * steps as f64 {
        return Err(Failure {
            code: EXIT_NONCONVERGENCE,
            message: format!("only {ok} of {steps} sweep points succeeded"),
        });
    }
    Ok(())
}

fn cmd_scan(ctx: &Context, h: f64) -> CmdResult {
    let depth = ctx.global.levels.unwrap_or(DEFAULT_DEPTH);
    if ctx.model.d() != 2 {
        return Err(FixedPointError::NotTwoPhase(ctx.model.d()).into());
    }
    let tol = ctx.tol()?;
    let marks = ExtinctionMarks::compute(&ctx.model, tol, 10)?;
    let grid = s0_scan_marked(&ctx.model, h, depth, &marks)?;

    let mut csv = Csv::new(&["s1", "s2", "member"]);
    for i1 in 0..grid.n {
        for i2 in 0..grid.n {
            csv.row([
                fmt_sig17(grid.coord(i1)),
                fmt_sig17(grid.coord(i2)),
                u8::from(grid.member_at(i1, i2)).to_string(),
            ]);
        }
    }
    csv.write(&ctx.out_path("scan.csv")?)?;
    std::fs::write(ctx.out_path("scan.svg")?, scan_svg(&grid))?;

    let q = &marks.global;
    let box_area = (1.0 - q.get(TypeId::new(0, 1))) * (1.0 - q.get(TypeId::new(0, 2)));
    let segment = if ctx.model.local_isomorphism_check(depth.min(50)).holds {
        let seg = affine_segment_check(&ctx.model, &marks.global, &marks.partial, 21, depth)?;
        let on_boundary: Vec<bool> = seg
            .points
            .iter()
            .map(|p| grid.on_boundary(p.value, p.value, 1.0))
            .collect();
        Some(json!({"report": seg, "on_boundary": on_boundary}))
    } else {
        None
    };
    let distinct = {
        let labelled = marks.labelled();
        let mut reps: Vec<&ExtinctionVector> = Vec::new();
        for (_, v) in labelled {
            if reps.iter().all(|r| r.distance(v, 10) >= DISTINCT_TOL) {
                reps.push(v);
            }
        }
        reps.len()
    };
    let summary = json!({
        "model": model_json(&ctx.model),
        "h": grid.h,
        "n": grid.n,
        "depth": grid.depth,
        "area": grid.area(),
        "area_relative_to_box": if box_area > 0.0 { grid.area() / box_area } else { f64::NAN },
        "marked": grid.marked,
        "distinct_vectors": distinct,
        "segment": segment,
    });
    write_json(&ctx.out_path("scan.json")?, &summary)?;
    print_json(&json!({
        "area": grid.area(),
        "marked": grid.marked,
        "distinct_vectors": distinct,
    }));
    Ok(())
}

fn cmd_simulate(ctx: &Context, args: &TargetArgs, trials: usize, cfg: &TrialConfig) -> CmdResult {
    let set = match resolve_target(&args.target, ctx.model.d(), args)? {
        Target::Global => PhaseSet::all(ctx.model.d()),
        Target::Partial => return Err(Failure::usage(
            "partial extinction has no finite-trial classification; simulate a finite set instead",
        )),
        Target::Set(s) => s,
    };
    cfg.validate()?;
    if trials == 0 {
        return Err(MonteCarloError::TooFewTrials(0).into());
    }
    let outcomes = run_trials(&ctx.model, &set, cfg, trials);
    let mut csv = Csv::new(&[
        "trial_id",
        "seed",
        "classification",
        "generations",
        "peak_pop",
    ]);
    for o in &outcomes {
        csv.row([
            o.trial_id.to_string(),
            cfg.seed.to_string(),
            o.classification.as_str().to_string(),
            o.generations_run.to_string(),
            fmt_sig17(o.peak_population),
        ]);
    }
    csv.write(&ctx.out_path("trials.csv")?)?;
    let estimate = Estimate::from_outcomes(&outcomes);
    let certified = estimate_check(trials, &estimate);
    let summary = json!({
        "model": model_json(&ctx.model),
        "target": args.target,
        "set": set.to_string(),
        "config": cfg,
        "estimate": estimate,
        "certified": certified.is_ok(),
    });
    write_json(&ctx.out_path("simulate.json")?, &summary)?;
    print_json(&summary);
    certified
}

/// Applies the trial-count and censoring rules of [`estimate_q`] to a finished batch.
fn estimate_check(trials: usize, estimate: &Estimate) -> CmdResult {
    if trials < MIN_TRIALS {
        return Err(MonteCarloError::TooFewTrials(trials).into());
    }
    if estimate.censored_fraction > MAX_CENSORED_FRACTION {
        return Err(MonteCarloError::TooCensored {
            censored: estimate.count(Classification::Censored),
            trials,
            estimate: Box::new(estimate.clone()),
        }
        .into());
    }
    Ok(())
}

fn cmd_check(ctx: &Context, names: &[String]) -> CmdResult {
    let k = ctx.global.levels.unwrap_or(DEFAULT_CHECK_LEVELS);
    let d = ctx.model.d();
    let names: Vec<String> = if names.is_empty() {
        (1..=d).map(|i| format!("A{i}")).collect()
    } else {
        names.to_vec()
    };
    let iso = ctx.model.local_isomorphism_check(k);
    let mut checks = Vec::new();
    for name in &names {
        let set = match resolve_target(
            name,
            d,
            &TargetArgs {
                target: name.clone(),
                phases: Vec::new(),
                include: Vec::new(),
                exclude: Vec::new(),
            },
        )? {
            Target::Set(s) => s,
            _ => {
                return Err(Failure::usage(format!(
                    "check needs a phase set, got {name}"
                )))
            }
        };
        let report = theorem_4_6_check(&ctx.model, &set, k)?;
        checks.push(json!({"target": name, "report": report}));
    }
    let out = json!({
        "model": model_json(&ctx.model),
        "levels": k,
        "local_isomorphism": iso,
        "sufficient_conditions": checks,
    });
    write_json(&ctx.out_path("check.json")?, &out)?;
    print_json(&out);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_types_and_spacings() {
        assert_eq!("3:2".parse::<TypeArg>().unwrap().0, TypeId::new(3, 2));
        assert!("3".parse::<TypeArg>().is_err());
        assert_eq!("1/256".parse::<Spacing>().unwrap().0, 1.0 / 256.0);
        assert_eq!("0.5".parse::<Spacing>().unwrap().0, 0.5);
        assert!("0".parse::<Spacing>().is_err());
    }

    #[test]
    fn resolves_targets() {
        let none = TargetArgs {
            target: String::new(),
            phases: vec![],
            include: vec![],
            exclude: vec![],
        };
        assert!(matches!(
            resolve_target("global", 2, &none),
            Ok(Target::Global)
        ));
        assert!(matches!(resolve_target("A2", 2, &none), Ok(Target::Set(_))));
        assert!(resolve_target("A3", 2, &none).is_err());
        assert!(resolve_target("nonsense", 2, &none).is_err());
    }

    #[test]
    fn counts_clusters() {
        assert_eq!(distinct_count(&[0.5, 0.5 + 1e-9, 0.7, f64::NAN]), 2);
        assert_eq!(distinct_count(&[]), 0);
    }
}
