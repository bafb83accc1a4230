use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use dynkin::chaos::{chaos_gap_experiment, ChaosConfig};
use dynkin::coefficients::{validate_assumptions, CoefficientSet};
use dynkin::estimates::check_k_bound;
use dynkin::game::StoppingRule;
use dynkin::lattice::{Backend, NoiseLattice};
use dynkin::meanfield::{check_contraction_condition, fixed_point, mean_field_value_and_saddle, write_flow_csv, MeanFieldSolution};
use dynkin::particles::{particle_saddles, solve_particle_system, ParticleConfig};
use dynkin::scenarios::ScenarioRegistry;
use dynkin::Error;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, RunConfig, EXPERIMENTS};

/// Environment variable overriding the output directory of the config.
pub const OUT_ENV: &str = "DYNKIN_OUT";
pub const DEFAULT_OUT: &str = "out";

/// Tolerance of the exact node-wise invariants.
const EXACT_TOL: f64 = 1e-9;
/// Standard errors allowed in the sampled saddle checks.
const SADDLE_SE: f64 = 2.0;
const VALIDATION_PROBES: usize = 512;

pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const INVARIANT: i32 = 3;
    pub const NO_CONVERGENCE: i32 = 4;
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    /// Hard checks decide the exit code; soft ones are statistical and only
    /// reported.
    pub hard: bool,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    fn hard(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            hard: true,
            passed: value <= tolerance,
            value,
            tolerance,
        }
    }

    fn soft(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            hard: false,
            ..Self::hard(name, value, tolerance)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    InvariantFailure,
    NoConvergence,
    Error,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentRecord {
    pub name: String,
    pub status: Status,
    pub files: Vec<String>,
    pub checks: Vec<Check>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub config_copy: String,
    pub tool_version: String,
    pub scenario: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub experiments: Vec<ExperimentRecord>,
    pub hard_invariants_passed: bool,
    pub exit_code: i32,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
}

pub struct RunRequest<'a> {
    pub config_path: &'a Path,
    pub out: Option<PathBuf>,
    pub only: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Reads, parses and checks a config; returns it with its raw bytes.
pub fn load_config(path: &Path, registry: &ScenarioRegistry) -> Result<(RunConfig, Vec<u8>), ConfigError> {
    let raw = fs::read(path).map_err(ConfigError::Io)?;
    let text = std::str::from_utf8(&raw).map_err(|e| ConfigError::Invalid(format!("config is not UTF-8: {e}")))?;
    let cfg = RunConfig::parse(text)?;
    cfg.check(registry)?;
    Ok((cfg, raw))
}

/// `--out`, then the environment, then the config, then `out`.
pub fn output_dir(cli: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    cli.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

struct Writer {
    dir: PathBuf,
    hash8: String,
}

impl Writer {
    fn name(&self, stem: &str, ext: &str) -> String {
        format!("{stem}_{}.{ext}", self.hash8)
    }

    fn csv(&self, stem: &str, files: &mut Vec<String>, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> std::io::Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.put(self.name(stem, "csv"), &buf, files)
    }

    fn json(&self, stem: &str, files: &mut Vec<String>, value: &impl Serialize) -> std::io::Result<()> {
        let mut buf = serde_json::to_vec_pretty(value).map_err(std::io::Error::other)?;
        buf.push(b'\n');
        self.put(self.name(stem, "json"), &buf, files)
    }

    fn put(&self, name: String, bytes: &[u8], files: &mut Vec<String>) -> std::io::Result<()> {
        fs::write(self.dir.join(&name), bytes)?;
        files.push(name);
        Ok(())
    }
}

#[derive(Debug)]
enum Failure {
    Model(Error),
    Io(std::io::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Model(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e)
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Model(e) => write!(f, "{e}"),
            Failure::Io(e) => write!(f, "output error: {e}"),
        }
    }
}

struct Context<'a> {
    cfg: &'a RunConfig,
    c: CoefficientSet,
    lattice: NoiseLattice,
    out: Writer,
}

/// Stopping nodes of a rule: reachable stops on a tree, the first stop of
/// every path otherwise.
fn stop_rows(rule: &StoppingRule, lattice: &NoiseLattice) -> Vec<(usize, usize)> {
    let mut rows = Vec::new();
    match lattice.tree() {
        Some(tree) => {
            let mut live = vec![0usize];
            for (m, row) in rule.stop.iter().enumerate() {
                let mut next = Vec::new();
                for &i in &live {
                    if row[i] {
                        rows.push((m, i));
                    } else {
                        next.extend(tree.children(i));
                    }
                }
                live = next;
            }
        }
        None => {
            for j in 0..lattice.len(lattice.steps()) {
                if let Some(m) = (0..rule.stop.len()).find(|&m| rule.stop[m][j]) {
                    rows.push((m, j));
                }
            }
        }
    }
    rows
}

fn write_saddle(out: &mut Vec<u8>, rules: &[(&str, &StoppingRule)], lattice: &NoiseLattice) -> std::io::Result<()> {
    use std::io::Write;
    writeln!(out, "player,m,t,node")?;
    for (player, rule) in rules {
        for (m, i) in stop_rows(rule, lattice) {
            writeln!(out, "{player},{m},{:?},{i}", lattice.grid().time(m))?;
        }
    }
    Ok(())
}

fn run_validate(ctx: &mut Context<'_>, rec: &mut ExperimentRecord) -> Result<(), Failure> {
    let seed = ctx.cfg.lattice.seed.unwrap_or(0);
    let report = validate_assumptions(&ctx.c, &ctx.lattice, VALIDATION_PROBES, seed);
    for ch in &report.checks {
        rec.checks.push(Check {
            name: format!("assumption:{}", ch.name),
            hard: true,
            passed: ch.passed,
            value: ch.measured,
            tolerance: ch.declared.unwrap_or(0.0),
        });
    }
    let l = ctx.c.lipschitz;
    let cond = check_contraction_condition(l.gamma1, l.gamma2, l.kappa1, l.kappa2, ctx.c.p);
    rec.checks.push(Check {
        name: "contraction_condition".into(),
        hard: false,
        passed: cond.ok,
        value: cond.lhs,
        tolerance: cond.threshold,
    });
    ctx.out.json(
        "validate",
        &mut rec.files,
        &json!({ "checks": report.checks, "contraction_condition": cond }),
    )?;
    Ok(())
}

fn meanfield_checks(ctx: &Context<'_>, mf: &MeanFieldSolution, rec: &mut ExperimentRecord) -> Result<serde_json::Value, Failure> {
    let res = mf.sol.invariant_residuals();
    rec.checks.push(Check::hard("drbsde_invariants", res.max(), EXACT_TOL));
    rec.checks
        .push(Check::hard("fixed_point_residual", mf.final_residual(), mf.config.tol));
    let k_bound = match ctx.lattice.backend() {
        Backend::Tree => {
            let k = check_k_bound(&ctx.lattice, &mf.sol, &ctx.c)?;
            rec.checks.push(Check::hard("k_bound_margin", -k.margin(), 0.0));
            Some(k)
        }
        Backend::Paths => None,
    };
    Ok(json!({
        "summary": mf.summary(),
        "solution": mf.sol.summary(&ctx.lattice),
        "k_bound": k_bound,
    }))
}

fn run_meanfield(ctx: &mut Context<'_>, rec: &mut ExperimentRecord) -> Result<(), Failure> {
    let mf = fixed_point(&ctx.lattice, &ctx.c, &ctx.cfg.fixed_point, &ctx.cfg.solver)?;
    let body = meanfield_checks(ctx, &mf, rec)?;
    ctx.out.json("meanfield", &mut rec.files, &body)?;
    let lattice = &ctx.lattice;
    ctx.out.csv("meanfield", &mut rec.files, |b| write_flow_csv(lattice, &mf.flow, b))?;
    Ok(())
}

fn run_game(ctx: &mut Context<'_>, rec: &mut ExperimentRecord) -> Result<(), Failure> {
    let g = &ctx.cfg.game;
    let (_, tau, sigma, report) =
        mean_field_value_and_saddle(&ctx.lattice, &ctx.c, &ctx.cfg.fixed_point, &ctx.cfg.solver, g.samples, g.seed)?;
    if let Some(s) = &report.saddle {
        rec.checks.push(Check::hard("saddle_tau_gain", s.max_tau_gain, EXACT_TOL));
        rec.checks.push(Check::hard("saddle_sigma_gain", s.max_sigma_gain, EXACT_TOL));
    }
    if let (Some(up), Some(lo)) = (report.brute_force_upper, report.brute_force_lower) {
        let gap = (up - report.value).abs().max((lo - report.value).abs());
        rec.checks.push(Check::hard("brute_force_value_gap", gap, 1e-10));
    }
    ctx.out.json("game", &mut rec.files, &report)?;
    let lattice = &ctx.lattice;
    ctx.out.csv("saddle", &mut rec.files, |b| {
        write_saddle(b, &[("tau", &tau), ("sigma", &sigma)], lattice)
    })?;
    Ok(())
}

fn run_particles(ctx: &mut Context<'_>, rec: &mut ExperimentRecord) -> Result<(), Failure> {
    let p = ctx.cfg.particles.as_ref().expect("checked");
    let cfg = ParticleConfig {
        n: p.n,
        paths: p.paths,
        seed: p.seed.expect("checked"),
        fixed_point: ctx.cfg.fixed_point,
        solver: ctx.cfg.solver,
    };
    let grid = *ctx.lattice.grid();
    let sol = solve_particle_system(grid, ctx.lattice.jumps(), &ctx.c, &cfg, None)?;
    rec.checks
        .push(Check::hard("drbsde_invariants", sol.max_invariant_residual(), EXACT_TOL));
    rec.checks.push(Check::hard(
        "fixed_point_residual",
        sol.residuals.last().copied().unwrap_or(0.0),
        cfg.fixed_point.tol,
    ));
    let saddles = particle_saddles(&sol, &ctx.c, &cfg.solver, p.saddle_samples, cfg.seed)?;
    let worst = saddles.iter().map(|(_, _, r)| r.worst_gain_in_se).fold(f64::NEG_INFINITY, f64::max);
    rec.checks.push(Check::soft("particle_saddle_gain_se", worst, SADDLE_SE));
    let reports: Vec<_> = saddles.iter().map(|(_, _, r)| r).collect();
    ctx.out.json(
        "particles",
        &mut rec.files,
        &json!({ "summary": sol.summary(), "saddles": reports }),
    )?;
    ctx.out.csv("particles", &mut rec.files, |b| sol.write_csv(b))?;
    ctx.out.csv("particle_saddle", &mut rec.files, |b| {
        use std::io::Write;
        writeln!(b, "particle,value,value_se,max_tau_gain,max_sigma_gain,worst_gain_in_se,deviations")?;
        for r in &reports {
            writeln!(
                b,
                "{},{:?},{:?},{:?},{:?},{:?},{}",
                r.particle, r.value, r.value_se, r.max_tau_gain, r.max_sigma_gain, r.worst_gain_in_se, r.deviations
            )?;
        }
        Ok(())
    })?;
    Ok(())
}

fn run_chaos(ctx: &mut Context<'_>, rec: &mut ExperimentRecord) -> Result<(), Failure> {
    let ch = ctx.cfg.chaos.as_ref().expect("checked");
    let cfg = ChaosConfig {
        paths: ch.paths,
        n_ref: ch.n_ref,
        fixed_point: ctx.cfg.fixed_point,
        solver: ctx.cfg.solver,
        pair_step: ch.pair_step,
    };
    let grid = *ctx.lattice.grid();
    let report = chaos_gap_experiment(grid, ctx.lattice.jumps(), &ctx.c, &ch.n_grid, &ch.seeds, &cfg)?;
    let (w, g) = (report.w_hat_trend(), report.g_trend());
    for (name, t) in [("w_hat_trend", &w), ("g_trend", &g)] {
        rec.checks.push(Check {
            name: name.into(),
            hard: false,
            passed: t.holds(),
            value: t.values.last().copied().unwrap_or(f64::NAN),
            tolerance: 0.5 * t.values.first().copied().unwrap_or(f64::NAN),
        });
    }
    ctx.out.json(
        "chaos",
        &mut rec.files,
        &json!({ "report": report, "w_hat_trend": w, "g_trend": g }),
    )?;
    ctx.out.csv("chaos", &mut rec.files, |b| report.write_csv(b))?;
    ctx.out.csv("chaos_plot", &mut rec.files, |b| report.write_plot_csv(b))?;
    Ok(())
}

fn classify(e: &Failure) -> Status {
    match e {
        Failure::Model(Error::NoConvergence { .. }) => Status::NoConvergence,
        _ => Status::Error,
    }
}

/// Runs the selected experiments and writes every output plus the manifest.
/// Config problems surface as `Err`; everything after that is reported in
/// the manifest.
pub fn run(req: RunRequest<'_>, registry: &ScenarioRegistry) -> Result<RunOutcome, ConfigError> {
    let started = unix_now();
    let (mut cfg, raw) = load_config(req.config_path, registry)?;
    if let Some(only) = &req.only {
        if !EXPERIMENTS.contains(&only.as_str()) {
            return Err(ConfigError::Invalid(format!(
                "unknown experiment `{only}`, expected one of {EXPERIMENTS:?}"
            )));
        }
        cfg.experiments = vec![only.clone()];
        cfg.check(registry)?;
    }
    let c = registry.build(&cfg.scenario, &cfg.params)?;
    let lattice = cfg.lattice.build()?;
    let hash = sha256_hex(&raw);
    let hash8 = hash[..8].to_string();
    let dir = output_dir(req.out, &cfg);
    fs::create_dir_all(&dir).map_err(ConfigError::Io)?;
    let config_copy = format!("config_{hash8}.json");
    fs::write(dir.join(&config_copy), &raw).map_err(ConfigError::Io)?;

    let mut ctx = Context {
        cfg: &cfg,
        c,
        lattice,
        out: Writer {
            dir: dir.clone(),
            hash8: hash8.clone(),
        },
    };
    let mut records = Vec::new();
    for name in EXPERIMENTS.iter().filter(|e| cfg.wants(e)) {
        let mut rec = ExperimentRecord {
            name: name.to_string(),
            status: Status::Ok,
            files: Vec::new(),
            checks: Vec::new(),
            error: None,
        };
        let result = match *name {
            "validate" => run_validate(&mut ctx, &mut rec),
            "meanfield" => run_meanfield(&mut ctx, &mut rec),
            "game" => run_game(&mut ctx, &mut rec),
            "particles" => run_particles(&mut ctx, &mut rec),
            "chaos" => run_chaos(&mut ctx, &mut rec),
            _ => unreachable!("checked against EXPERIMENTS"),
        };
        match result {
            Ok(()) if rec.checks.iter().any(|c| c.hard && !c.passed) => rec.status = Status::InvariantFailure,
            Ok(()) => {}
            Err(e) => {
                rec.status = classify(&e);
                rec.error = Some(e.to_string());
            }
        }
        records.push(rec);
    }

    let exit_code = if records.iter().any(|r| r.status == Status::NoConvergence) {
        exit::NO_CONVERGENCE
    } else if records.iter().any(|r| r.status != Status::Ok) {
        exit::INVARIANT
    } else {
        exit::OK
    };
    let manifest = RunManifest {
        config_hash: hash,
        config_copy,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        scenario: cfg.scenario.clone(),
        started_unix: started,
        finished_unix: unix_now(),
        hard_invariants_passed: records.iter().all(|r| r.checks.iter().all(|c| !c.hard || c.passed)),
        experiments: records,
        exit_code,
    };
    let manifest_path = dir.join(format!("manifest_{hash8}.json"));
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    fs::write(&manifest_path, bytes).map_err(ConfigError::Io)?;
    Ok(RunOutcome {
        exit_code,
        manifest,
        manifest_path,
    })
}
