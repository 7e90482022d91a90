use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ladderwalk_core::hitting::{DEFAULT_MAX_DEPTH, DEFAULT_TOL};
use ladderwalk_core::simulator::DEFAULT_STEP_CAP;
use ladderwalk_core::{
    decompose, exit_probabilities, expected_t1, hit_from_below, oracle, replica_seed, run_ensemble,
    run_horizon, run_to_ladder, tally_ensemble, velocity_with, verify_identity, BranchingModel,
    EnvLaw, EnvSpec, Environment, Error, RatioEstimate, SiteLaw, VelocityOptions, WalkPath,
};
use serde_json::{json, Value};

mod output;
mod wald;

use output::{num, Format, Output, Table};

const TYPE_LABELS: [&str; 9] = ["A1", "A2", "A3", "B1", "B2", "B3", "C1", "C2", "C3"];

#[derive(Parser)]
#[command(
    name = "ladderwalk",
    version,
    about = "Ladder times, exit probabilities and velocity of walks with jumps in {-2,-1,1,2}"
)]
struct Cli {
    /// Print JSON instead of CSV.
    #[arg(long, global = true, conflicts_with = "csv")]
    json: bool,
    /// Print CSV (the default for tabular commands).
    #[arg(long, global = true)]
    csv: bool,
    /// Worker threads; the LADDERWALK_WORKERS variable takes precedence.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
#[group(required = true, multiple = false)]
struct EnvSource {
    /// Environment file (JSON).
    #[arg(long, value_name = "FILE")]
    env: Option<PathBuf>,
    /// Homogeneous environment given inline as q2,q1,p1,p2.
    #[arg(long, value_name = "Q2,Q1,P1,P2", value_parser = parse_law, allow_hyphen_values = true)]
    law: Option<SiteLaw>,
}

#[derive(Args, Clone)]
#[group(required = true, multiple = false)]
struct LawSource {
    /// Environment-law file (JSON, kind homogeneous or iid).
    #[arg(long, value_name = "FILE")]
    env_law: Option<PathBuf>,
    /// Point mass at q2,q1,p1,p2.
    #[arg(long, value_name = "Q2,Q1,P1,P2", value_parser = parse_law, allow_hyphen_values = true)]
    law: Option<SiteLaw>,
}

#[derive(Subcommand)]
enum Command {
    /// Exit probabilities of [a+1, b-1] at b and b+1 by the transfer-matrix sweep.
    Exit {
        #[command(flatten)]
        source: EnvSource,
        #[arg(long, allow_hyphen_values = true)]
        a: i64,
        #[arg(long, allow_hyphen_values = true)]
        b: i64,
        /// Only this starting site.
        #[arg(long, allow_hyphen_values = true)]
        start: Option<i64>,
    },
    /// First entrance of (i, ∞) at i+1 and i+2 from k, in the limit a → -∞.
    Hit {
        #[command(flatten)]
        source: EnvSource,
        #[arg(long, allow_hyphen_values = true)]
        k: i64,
        #[arg(long, allow_hyphen_values = true)]
        i: i64,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = DEFAULT_MAX_DEPTH)]
        max_depth: usize,
    },
    /// Exit probabilities by a direct linear solve.
    OracleExit {
        #[command(flatten)]
        source: EnvSource,
        #[arg(long, allow_hyphen_values = true)]
        a: i64,
        #[arg(long, allow_hyphen_values = true)]
        b: i64,
        #[arg(long, allow_hyphen_values = true)]
        start: Option<i64>,
    },
    /// Expected exit times by a direct linear solve.
    OracleTime {
        #[command(flatten)]
        source: EnvSource,
        #[arg(long, allow_hyphen_values = true)]
        a: i64,
        #[arg(long, allow_hyphen_values = true)]
        b: i64,
        #[arg(long, allow_hyphen_values = true)]
        start: Option<i64>,
        /// Restrict to exits at this absorbing site: E[T; X_T = target].
        #[arg(long, allow_hyphen_values = true)]
        target: Option<i64>,
    },
    /// Expected ladder time E[T_1] from the branching series.
    T1 {
        #[command(flatten)]
        source: EnvSource,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = 100_000_000)]
        max_levels: usize,
    },
    /// Mean offspring matrix of the excursion process at one level.
    MeanMatrix {
        #[command(flatten)]
        source: EnvSource,
        #[arg(long, allow_hyphen_values = true, default_value_t = 0)]
        level: i64,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
    },
    /// Monte Carlo ensemble of ladder times, or one long trajectory with --horizon.
    Simulate {
        #[command(flatten)]
        source: EnvSource,
        #[arg(long, default_value_t = 10_000)]
        replicas: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_STEP_CAP)]
        cap: u64,
        /// Run a single walk for this many steps instead.
        #[arg(long)]
        horizon: Option<u64>,
        /// Write each replica's positions as one whitespace-separated line.
        #[arg(long, value_name = "FILE")]
        dump_paths: Option<PathBuf>,
    },
    /// Excursion tallies of simulated paths and the ladder-time identity check.
    Decompose {
        #[command(flatten)]
        source: EnvSource,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        replicas: u64,
        /// Levels 0, -1, … reported.
        #[arg(long, default_value_t = 4)]
        levels: usize,
        #[arg(long, default_value_t = DEFAULT_STEP_CAP)]
        cap: u64,
        /// Stop at the first path violating the identity.
        #[arg(long)]
        fail_fast: bool,
    },
    /// Limiting velocity from the invariant density of the environment seen from the walk.
    Velocity {
        #[command(flatten)]
        source: LawSource,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Numerator factor reported as v_p.
        #[arg(long, value_enum, default_value_t = Factor::Drift)]
        factor: Factor,
        /// Shifts averaged per environment draw.
        #[arg(long, default_value_t = ladderwalk_core::rwre::DEFAULT_WINDOW)]
        window: usize,
        /// Extra levels on each side of the window.
        #[arg(long, default_value_t = ladderwalk_core::rwre::DEFAULT_MARGIN)]
        margin: usize,
    },
    /// Recompute the reference overshoot table by two independent routes.
    WaldTable {
        /// Also write the table to this file.
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Factor {
    Drift,
    Abs,
}

/// Bad input rather than a failed computation.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn read_spec(path: &Path) -> anyhow::Result<EnvSpec> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    EnvSpec::from_json(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn parse_law(s: &str) -> Result<SiteLaw, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if v.len() != 4 {
        return Err(format!(
            "expected four comma-separated probabilities, got {}",
            v.len()
        ));
    }
    SiteLaw::new(v[0], v[1], v[2], v[3]).map_err(|e| e.to_string())
}

impl EnvSource {
    fn load(&self) -> anyhow::Result<Environment> {
        match (&self.env, &self.law) {
            (Some(path), None) => {
                Environment::from_spec(&read_spec(path)?).map_err(|e| usage(e.to_string()))
            }
            (None, Some(law)) => Ok(Environment::homogeneous(*law)),
            _ => Err(usage("give exactly one of --env and --law")),
        }
    }
}

impl LawSource {
    fn load(&self) -> anyhow::Result<EnvLaw> {
        match (&self.env_law, &self.law) {
            (Some(path), None) => Ok(EnvLaw::from_spec(&read_spec(path)?)
                .map_err(|e| usage(e.to_string()))?
                .0),
            (None, Some(law)) => Ok(EnvLaw::PointMass(*law)),
            _ => Err(usage("give exactly one of --env-law and --law")),
        }
    }
}

fn workers(flag: usize) -> anyhow::Result<usize> {
    match std::env::var("LADDERWALK_WORKERS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("LADDERWALK_WORKERS={v} is not a worker count"))),
        Err(_) => Ok(flag),
    }
}

fn check_tol(tol: f64) -> anyhow::Result<()> {
    if tol.is_finite() && tol > 0.0 {
        Ok(())
    } else {
        Err(usage(format!("tolerance {tol} must be positive")))
    }
}

fn starts(a: i64, b: i64, start: Option<i64>) -> anyhow::Result<Vec<i64>> {
    if b < a + 2 {
        return Err(usage(format!("interval [{a}+1, {b}-1] is empty")));
    }
    match start {
        Some(k) if k <= a || k >= b => {
            Err(usage(format!("start {k} is not in [{}, {}]", a + 1, b - 1)))
        }
        Some(k) => Ok(vec![k]),
        None => Ok((a + 1..b).collect()),
    }
}

/// A command's result: output plus whether the command's own check passed.
struct Run {
    output: Output,
    ok: bool,
}

impl From<Table> for Run {
    fn from(t: Table) -> Self {
        Run {
            output: t.into(),
            ok: true,
        }
    }
}

fn run(cmd: Command, workers: usize) -> anyhow::Result<Run> {
    match cmd {
        Command::Exit {
            source,
            a,
            b,
            start,
        } => {
            let env = source.load()?;
            let ks = starts(a, b, start)?;
            let table = exit_probabilities(&env, a, b)?;
            let mut out = Table::new(&["start", "target", "probability", "depth", "converged"]);
            for k in ks {
                for target in [b, b + 1] {
                    out.push(vec![
                        k.into(),
                        target.into(),
                        num(table.prob(k, target)),
                        (b - a).into(),
                        true.into(),
                    ]);
                }
            }
            Ok(out.into())
        }
        Command::Hit {
            source,
            k,
            i,
            tol,
            max_depth,
        } => {
            check_tol(tol)?;
            let env = source.load()?;
            let h = hit_from_below(&env, k, i, tol, max_depth)?;
            let mut out = Table::new(&["start", "target", "probability", "depth", "converged"]);
            out.push(vec![
                k.into(),
                (i + 1).into(),
                num(h.f1),
                h.depth.into(),
                h.converged.into(),
            ]);
            out.push(vec![
                k.into(),
                (i + 2).into(),
                num(h.f2),
                h.depth.into(),
                h.converged.into(),
            ]);
            Ok(out.into())
        }
        Command::OracleExit {
            source,
            a,
            b,
            start,
        } => {
            let env = source.load()?;
            let ks = starts(a, b, start)?;
            let sys = oracle::AbsorbingSystem::new(&env, a, b)?;
            let m = sys.exit_matrix()?;
            let mut out = Table::new(&["start", "target", "probability", "depth", "converged"]);
            for k in ks {
                let r = (k - a - 1) as usize;
                for (c, target) in [a - 1, a, b, b + 1].into_iter().enumerate() {
                    out.push(vec![
                        k.into(),
                        target.into(),
                        num(m[(r, c)]),
                        (b - a).into(),
                        true.into(),
                    ]);
                }
            }
            Ok(out.into())
        }
        Command::OracleTime {
            source,
            a,
            b,
            start,
            target,
        } => {
            let env = source.load()?;
            let ks = starts(a, b, start)?;
            if let Some(t) = target {
                if ![a - 1, a, b, b + 1].contains(&t) {
                    return Err(usage(format!(
                        "target {t} is not one of {}, {a}, {b}, {}",
                        a - 1,
                        b + 1
                    )));
                }
            }
            let sys = oracle::AbsorbingSystem::new(&env, a, b)?;
            let times = match target {
                Some(t) => sys.exit_times_on(t)?,
                None => sys.exit_times()?,
            };
            let mut out = Table::new(&["start", "target", "expected_time"]);
            for k in ks {
                let t = target.map_or(Value::Null, Value::from);
                out.push(vec![k.into(), t, num(times[(k - a - 1) as usize])]);
            }
            Ok(out.into())
        }
        Command::T1 {
            source,
            tol,
            max_levels,
        } => {
            check_tol(tol)?;
            let env = source.load()?;
            let s = expected_t1(&env, tol, max_levels)?;
            if !s.converged {
                eprintln!("warning: series not converged after {} levels", s.levels);
            }
            let mut out = Table::new(&["expected_t1", "levels", "last_term", "converged"]);
            out.push(vec![
                num(s.value),
                s.levels.into(),
                num(s.last_term),
                s.converged.into(),
            ]);
            Ok(Run {
                output: out.into(),
                ok: s.converged,
            })
        }
        Command::MeanMatrix { source, level, tol } => {
            check_tol(tol)?;
            let env = source.load()?;
            let model = BranchingModel::build(&env, level, level, tol, DEFAULT_MAX_DEPTH)?;
            let m = model.level(level).mean_matrix();
            let mut cols = vec!["parent"];
            cols.extend(TYPE_LABELS);
            let mut out = Table::new(&cols);
            for (p, row) in m.rows.iter().enumerate() {
                let mut cells = vec![Value::from(TYPE_LABELS[p])];
                cells.extend(row.iter().map(|&x| num(x)));
                out.push(cells);
            }
            let doc = json!({
                "level": level,
                "labels": TYPE_LABELS,
                "rows": m.rows.iter().map(|r| r.iter().map(|&x| num(x)).collect::<Vec<_>>()).collect::<Vec<_>>(),
            });
            Ok(Run {
                output: Output {
                    table: out,
                    document: Some(doc),
                },
                ok: true,
            })
        }
        Command::Simulate {
            source,
            replicas,
            seed,
            cap,
            horizon,
            dump_paths,
        } => {
            let env = source.load()?;
            if let Some(n) = horizon {
                let h = run_horizon(&env, seed, n);
                let mut out = Table::new(&[
                    "steps",
                    "final_position",
                    "drift",
                    "min_position",
                    "max_position",
                ]);
                out.push(vec![
                    h.steps.into(),
                    h.final_position.into(),
                    num(h.drift),
                    h.min_position.into(),
                    h.max_position.into(),
                ]);
                return Ok(out.into());
            }
            if replicas == 0 {
                return Err(usage("--replicas must be positive"));
            }
            if let Some(path) = dump_paths {
                dump(&env, seed, replicas, cap, &path)?;
            }
            let s = run_ensemble(&env, seed, replicas, workers, cap);
            if s.bias_warning {
                eprintln!(
                    "warning: {} of {} paths reached the step cap; moments are biased",
                    s.abandoned, s.replicas
                );
            }
            let mut out = Table::new(&[
                "replicas",
                "stopped",
                "abandoned",
                "t1_mean",
                "t1_variance",
                "t1_std_error",
                "overshoot_mean",
                "overshoot_variance",
                "overshoot_std_error",
                "overshoot_1",
                "overshoot_2",
                "bias_warning",
            ]);
            out.push(vec![
                s.replicas.into(),
                s.stopped.into(),
                s.abandoned.into(),
                num(s.t1.mean),
                num(s.t1.variance),
                num(s.t1.std_error),
                num(s.overshoot.mean),
                num(s.overshoot.variance),
                num(s.overshoot.std_error),
                s.overshoot_hist[0].into(),
                s.overshoot_hist[1].into(),
                s.bias_warning.into(),
            ]);
            Ok(out.into())
        }
        Command::Decompose {
            source,
            seed,
            replicas,
            levels,
            cap,
            fail_fast,
        } => {
            let env = source.load()?;
            if replicas == 0 {
                return Err(usage("--replicas must be positive"));
            }
            if fail_fast {
                first_violation(&env, seed, replicas, cap)?;
            }
            let s = tally_ensemble(&env, seed, replicas, workers, cap, levels);
            let mut cols = vec!["level"];
            cols.extend(TYPE_LABELS);
            cols.extend(["paths", "identity_failures"]);
            let mut out = Table::new(&cols);
            let mut imm = vec![Value::from(1)];
            imm.extend(s.immigration.iter().map(|m| num(m.mean)));
            imm.extend(std::iter::repeat_n(num(0.0), 6));
            imm.extend([s.stopped.into(), s.identity_failures.into()]);
            out.push(imm);
            for (j, t) in s.tallies.iter().enumerate() {
                let mut row = vec![Value::from(-(j as i64))];
                row.extend(t.iter().map(|m| num(m.mean)));
                row.extend([s.stopped.into(), s.identity_failures.into()]);
                out.push(row);
            }
            if s.identity_failures > 0 {
                eprintln!(
                    "error: {} of {} paths violate the ladder-time identity",
                    s.identity_failures, s.stopped
                );
            }
            Ok(Run {
                output: out.into(),
                ok: s.identity_failures == 0,
            })
        }
        Command::Velocity {
            source,
            samples,
            tol,
            seed,
            factor,
            window,
            margin,
        } => {
            check_tol(tol)?;
            if samples == 0 || window == 0 {
                return Err(usage("--samples and --window must be positive"));
            }
            let law = source.load()?;
            let opts = VelocityOptions {
                window,
                margin,
                workers,
            };
            let r = velocity_with(&law, samples, tol, seed, &opts)?;
            if r.divergent_fraction > 0.0 {
                eprintln!(
                    "warning: {:.3} of the environment draws did not converge and were excluded",
                    r.divergent_fraction
                );
            }
            let chosen = match factor {
                Factor::Drift => &r.drift,
                Factor::Abs => &r.abs,
            };
            let mut out = Table::new(&[
                "variant",
                "value",
                "std_error",
                "numerator",
                "numerator_se",
                "denominator",
                "denominator_se",
            ]);
            for (name, e) in [("drift", &r.drift), ("abs", &r.abs), ("ladder", &r.ladder)] {
                out.push(vec![
                    name.into(),
                    num(e.value),
                    num(e.std_error),
                    num(e.numerator),
                    num(e.numerator_se),
                    num(e.denominator),
                    num(e.denominator_se),
                ]);
            }
            let doc = json!({
                "factor": match factor { Factor::Drift => "drift", Factor::Abs => "abs" },
                "v_p": num(chosen.value),
                "std_error": num(chosen.std_error),
                "drift": ratio_json(&r.drift),
                "abs": ratio_json(&r.abs),
                "ladder": ratio_json(&r.ladder),
                "samples": r.samples,
                "converged_samples": r.converged_samples,
                "divergent_fraction": num(r.divergent_fraction),
                "window": r.window,
                "margin": r.margin,
                "tol": num(r.tol),
            });
            Ok(Run {
                output: Output {
                    table: out,
                    document: Some(doc),
                },
                ok: true,
            })
        }
        Command::WaldTable { output } => {
            let w = wald::run();
            for d in &w.diagnostics {
                eprintln!("{d}");
            }
            if let Some(path) = output {
                let mut f = BufWriter::new(
                    fs::File::create(&path).with_context(|| path.display().to_string())?,
                );
                w.table.write_csv(&mut f)?;
                f.flush()?;
            }
            Ok(Run {
                output: w.table.into(),
                ok: w.all_ok,
            })
        }
    }
}

fn ratio_json(e: &RatioEstimate) -> Value {
    json!({
        "value": num(e.value),
        "std_error": num(e.std_error),
        "numerator": num(e.numerator),
        "numerator_se": num(e.numerator_se),
        "denominator": num(e.denominator),
        "denominator_se": num(e.denominator_se),
    })
}

fn dump(env: &Environment, seed: u64, replicas: u64, cap: u64, path: &Path) -> anyhow::Result<()> {
    let mut f = BufWriter::new(fs::File::create(path).with_context(|| path.display().to_string())?);
    for r in 0..replicas {
        let p = match run_to_ladder(env, replica_seed(seed, r), cap) {
            Ok(p) => p,
            Err(Error::CapReached(p)) => *p,
            Err(e) => return Err(e.into()),
        };
        let line: Vec<String> = p.positions.iter().map(i64::to_string).collect();
        writeln!(f, "{}", line.join(" "))?;
    }
    f.flush()?;
    Ok(())
}

/// Checks replicas in order and fails on the first identity violation.
fn first_violation(env: &Environment, seed: u64, replicas: u64, cap: u64) -> anyhow::Result<()> {
    for r in 0..replicas {
        let path: WalkPath = match run_to_ladder(env, replica_seed(seed, r), cap) {
            Ok(p) => p,
            Err(Error::CapReached(_)) => continue,
            Err(e) => return Err(e.into()),
        };
        let dec = decompose(&path)?;
        let report = verify_identity(&dec, &path);
        if !report.holds {
            bail!(
                "replica {r} violates the identity: T1 = {}, weighted tally sum = {}, D/V sum = {}, first discrepant level {:?}",
                report.t1,
                report.weighted_total,
                report.dv_total,
                report.first_discrepant_level
            );
        }
    }
    Ok(())
}

fn default_format(cmd: &Command) -> Format {
    match cmd {
        Command::Velocity { .. } | Command::MeanMatrix { .. } => Format::Json,
        _ => Format::Csv,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let format = if cli.json {
        Format::Json
    } else if cli.csv {
        Format::Csv
    } else {
        default_format(&cli.command)
    };
    let result = workers(cli.workers).and_then(|w| run(cli.command, w.max(1)));
    match result {
        Ok(r) => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            if let Err(e) = r.output.write(format, &mut lock).and_then(|_| lock.flush()) {
                if e.kind() != io::ErrorKind::BrokenPipe {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            }
            if r.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn starts_checks_interval() {
        assert_eq!(starts(0, 3, None).unwrap(), vec![1, 2]);
        assert!(starts(0, 1, None).is_err());
        assert!(starts(0, 3, Some(3)).is_err());
    }
}
