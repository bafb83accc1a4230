//! Interacting particle system: `n` copies of the DRBSDE, each on its own
//! noise, coupled through the empirical measure of their values.
//!
//! Every particle is solved by backward induction on its own path ensemble.
//! Scenario `j` of the system is path `j` of every particle's ensemble, so
//! the empirical measure `L_n` is a random measure indexed by `(m, j)`. The
//! system is solved by Picard iteration on `L_n`.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSet;
use crate::drbsde::{f_expectation, fmt, solve_window, DrbsdeSolution, LawView, PathwiseLaw, SolverOptions};
use crate::error::{Error, Result};
use crate::game::{extract_saddle, stop_region, ObstacleField, StoppingRule};
use crate::lattice::{sample_paths_with_offset, JumpSpec, NodeState, NoiseLattice, TimeGrid};
use crate::meanfield::FixedPointConfig;
use crate::measure::{wasserstein_p, MeasureSlice};

/// Terminal value `ξ^{i,n}` of particle `i` given its own terminal state.
pub type TerminalFn = Arc<dyn Fn(usize, &NodeState<'_>) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParticleConfig {
    pub n: usize,
    /// Paths per particle (number of scenarios).
    pub paths: usize,
    pub seed: u64,
    /// Outer iteration settings; the mode and window are ignored.
    pub fixed_point: FixedPointConfig,
    pub solver: SolverOptions,
}

impl Default for ParticleConfig {
    fn default() -> Self {
        Self {
            n: 8,
            paths: 512,
            seed: 0,
            fixed_point: FixedPointConfig::default(),
            solver: SolverOptions::default(),
        }
    }
}

/// Noise copy `label` of a particle system: ChaCha streams
/// `label * paths .. (label + 1) * paths` of the seed.
pub fn noise_copy(grid: TimeGrid, jumps: &JumpSpec, paths: usize, seed: u64, label: usize) -> Result<NoiseLattice> {
    sample_paths_with_offset(grid, jumps.clone(), paths, seed, (label * paths) as u64)
}

#[derive(Debug, Clone)]
pub struct ParticleSystemSolution {
    pub n: usize,
    /// Noise copy used by each particle.
    pub labels: Vec<usize>,
    pub lattices: Vec<NoiseLattice>,
    pub sols: Vec<DrbsdeSolution>,
    /// Empirical measure per step and scenario at which `sols` were computed.
    pub law: PathwiseLaw,
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ParticleSummary {
    pub n: usize,
    pub paths: usize,
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub roots: Vec<f64>,
    pub root_se: Vec<f64>,
    pub max_invariant_residual: f64,
    pub warnings: Vec<String>,
}

impl ParticleSystemSolution {
    /// `Y^{i,n}_0` averaged over scenarios.
    pub fn roots(&self) -> Vec<f64> {
        self.sols.iter().zip(&self.lattices).map(|(s, l)| s.root_mean(l)).collect()
    }

    pub fn root_se(&self) -> Vec<f64> {
        self.sols.iter().map(|s| s.root_se).collect()
    }

    /// Mean `(K1_T, K2_T)` of particle `i`.
    pub fn k_totals(&self, i: usize) -> (f64, f64) {
        let s = &self.sols[i];
        let m = s.end;
        let n = s.k1[m].len() as f64;
        (s.k1[m].iter().sum::<f64>() / n, s.k2[m].iter().sum::<f64>() / n)
    }

    pub fn paths(&self) -> usize {
        self.lattices[0].len(0)
    }

    pub fn max_invariant_residual(&self) -> f64 {
        self.sols.iter().map(|s| s.invariant_residuals().max()).fold(0.0, f64::max)
    }

    pub fn summary(&self) -> ParticleSummary {
        ParticleSummary {
            n: self.n,
            paths: self.paths(),
            iterations: self.iterations,
            residuals: self.residuals.clone(),
            roots: self.roots(),
            root_se: self.root_se(),
            max_invariant_residual: self.max_invariant_residual(),
            warnings: self.warnings.clone(),
        }
    }

    /// One row per particle: `particle,label,root,root_se,k1_total,k2_total`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "particle,label,root,root_se,k1_total,k2_total")?;
        for (i, root) in self.roots().into_iter().enumerate() {
            let (k1, k2) = self.k_totals(i);
            writeln!(
                out,
                "{i},{},{},{},{},{}",
                self.labels[i],
                fmt(root),
                fmt(self.sols[i].root_se),
                fmt(k1),
                fmt(k2)
            )?;
        }
        Ok(())
    }
}

fn empirical(values: &[Vec<Vec<f64>>], m: usize, j: usize) -> MeasureSlice {
    MeasureSlice::uniform(values.iter().map(|y| y[m][j]).collect()).expect("n >= 1")
}

/// Solves the system with particle `i` on noise copy `i`.
pub fn solve_particle_system(
    grid: TimeGrid,
    jumps: &JumpSpec,
    c: &CoefficientSet,
    cfg: &ParticleConfig,
    terminal: Option<&TerminalFn>,
) -> Result<ParticleSystemSolution> {
    let labels: Vec<usize> = (0..cfg.n).collect();
    solve_particle_system_labeled(grid, jumps, c, cfg, terminal, &labels)
}

/// Solves the system with particle `i` on noise copy `labels[i]` and with
/// terminal index `labels[i]`.
pub fn solve_particle_system_labeled(
    grid: TimeGrid,
    jumps: &JumpSpec,
    c: &CoefficientSet,
    cfg: &ParticleConfig,
    terminal: Option<&TerminalFn>,
    labels: &[usize],
) -> Result<ParticleSystemSolution> {
    let n = cfg.n;
    if n == 0 {
        return Err(Error::InvalidParam("particle count must be at least 1".into()));
    }
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: n,
        });
    }
    let fp = &cfg.fixed_point;
    fp.validate(grid.horizon())?;
    let steps = grid.steps();
    let lattices: Vec<NoiseLattice> = labels
        .iter()
        .map(|&l| noise_copy(grid, jumps, cfg.paths, cfg.seed, l))
        .collect::<Result<_>>()?;
    let s = cfg.paths;

    let xi: Vec<Vec<f64>> = lattices
        .iter()
        .zip(labels)
        .map(|(lat, &label)| {
            (0..s)
                .map(|j| {
                    let st = lat.state(steps, j);
                    match terminal {
                        Some(f) => f(label, &st),
                        None => c.xi(&st),
                    }
                })
                .collect()
        })
        .collect();

    // L_n at maturity is known up front; the sandwich is checked against it
    let terminal_law: Vec<MeasureSlice> = (0..s)
        .map(|j| MeasureSlice::uniform(xi.iter().map(|x| x[j]).collect()).expect("n >= 1"))
        .collect();
    for (i, lat) in lattices.iter().enumerate() {
        for j in 0..s {
            let st = lat.state(steps, j);
            let v = xi[i][j];
            let (lo, hi) = (c.h1(&st, v, &terminal_law[j]), c.h2(&st, v, &terminal_law[j]));
            if !(lo <= v + 1e-12 && v <= hi + 1e-12) {
                return Err(Error::InvalidTerminal {
                    particle: i,
                    value: v,
                    lower: lo,
                    upper: hi,
                });
            }
        }
    }

    let mut slices: Vec<Vec<MeasureSlice>> = (0..steps).map(|_| vec![MeasureSlice::dirac(fp.init); s]).collect();
    slices.push(terminal_law);
    let mut law = PathwiseLaw { slices };
    let mut prev: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut residuals = Vec::new();
    let mut warnings = Vec::new();
    if fp.damping < 1.0 {
        warnings.push(format!("damped iteration with weight {}", fp.damping));
    }

    for it in 0..=fp.max_iter {
        let sols: Vec<DrbsdeSolution> = lattices
            .par_iter()
            .zip(&xi)
            .map(|(lat, x)| solve_window(lat, c, &law, &cfg.solver, 0, steps, Some(x)))
            .collect::<Result<_>>()?;
        let values: Vec<Vec<Vec<f64>>> = if prev.is_empty() || fp.damping >= 1.0 {
            sols.iter().map(|s| s.y.clone()).collect()
        } else {
            sols.iter()
                .zip(&prev)
                .map(|(s, p)| {
                    s.y.iter()
                        .zip(p)
                        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| fp.damping * x + (1.0 - fp.damping) * y).collect())
                        .collect()
                })
                .collect()
        };
        let next: Vec<Vec<MeasureSlice>> = (0..=steps)
            .into_par_iter()
            .map(|m| (0..s).map(|j| empirical(&values, m, j)).collect())
            .collect();
        let r = (0..=steps)
            .into_par_iter()
            .map(|m| {
                (0..s)
                    .map(|j| wasserstein_p(&law.slices[m][j], &next[m][j], c.p).unwrap_or(f64::INFINITY))
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max);
        residuals.push(r);
        if r <= fp.tol {
            return Ok(ParticleSystemSolution {
                n,
                labels: labels.to_vec(),
                lattices,
                sols,
                law,
                iterations: it,
                residuals,
                warnings,
            });
        }
        law = PathwiseLaw { slices: next };
        prev = values;
    }
    Err(Error::NoConvergence {
        iterations: fp.max_iter,
        last: *residuals.last().unwrap(),
        history: residuals,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ExchangeabilityReport {
    pub permutation: Vec<usize>,
    pub exact: bool,
    /// Largest `|Y^{π(i)}| - relabelled Y^i|` over all particles and nodes.
    pub max_abs_diff: f64,
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::LengthMismatch {
            left: perm.len(),
            right: n,
        });
    }
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::InvalidParam(format!("{perm:?} is not a permutation of 0..{n}")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Solves once with identity labels and once with `labels = π`, and
/// compares particle `i` of the second run with particle `π(i)` of the
/// first, bit for bit, on every component of the solution.
pub fn exchangeability_check(
    grid: TimeGrid,
    jumps: &JumpSpec,
    c: &CoefficientSet,
    cfg: &ParticleConfig,
    terminal: Option<&TerminalFn>,
    perm: &[usize],
) -> Result<ExchangeabilityReport> {
    check_permutation(perm, cfg.n)?;
    let base = solve_particle_system(grid, jumps, c, cfg, terminal)?;
    let moved = solve_particle_system_labeled(grid, jumps, c, cfg, terminal, perm)?;
    let mut exact = true;
    let mut max_abs_diff: f64 = 0.0;
    for (i, &p) in perm.iter().enumerate() {
        let (a, b) = (&moved.sols[i], &base.sols[p]);
        for (x, y) in [(&a.y, &b.y), (&a.z, &b.z), (&a.u, &b.u), (&a.k1, &b.k1), (&a.k2, &b.k2)] {
            for (rx, ry) in x.iter().zip(y) {
                for (u, v) in rx.iter().zip(ry) {
                    exact &= u.to_bits() == v.to_bits();
                    max_abs_diff = max_abs_diff.max((u - v).abs());
                }
            }
        }
    }
    Ok(ExchangeabilityReport {
        permutation: perm.to_vec(),
        exact,
        max_abs_diff,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ParticleSaddleReport {
    pub particle: usize,
    pub value: f64,
    pub value_se: f64,
    /// `max_τ' J(τ', σ*) - J(τ*, σ*)`.
    pub max_tau_gain: f64,
    /// `J(τ*, σ*) - min_σ' J(τ*, σ')`.
    pub max_sigma_gain: f64,
    /// Largest gain measured in standard errors of the difference.
    pub worst_gain_in_se: f64,
    pub deviations: usize,
}

impl ParticleSaddleReport {
    /// No deviation gains more than `k` standard errors.
    pub fn holds(&self, k: f64) -> bool {
        self.worst_gain_in_se <= k
    }
}

#[allow(clippy::too_many_arguments)]
fn path_payoff(
    lattice: &NoiseLattice,
    c: &CoefficientSet,
    law: &dyn LawView,
    obs: &ObstacleField,
    xi: &[f64],
    tau: &StoppingRule,
    sigma: &StoppingRule,
    opts: &SolverOptions,
) -> Result<(f64, f64)> {
    let region = stop_region(tau, sigma, obs, xi);
    let s = f_expectation(lattice, c, law, &region, opts)?;
    Ok((s.root_mean(lattice), s.root_se))
}

/// Adapted deviations of one particle: deterministic times, never stopping,
/// near-hitting bands of both obstacles, Brownian level crossings and
/// `samples` randomized rules.
fn deviations(lattice: &NoiseLattice, sol: &DrbsdeSolution, samples: usize, rng: &mut ChaCha8Rng) -> Vec<StoppingRule> {
    let steps = sol.end;
    let len = |m: usize| lattice.len(m);
    let mut out = vec![StoppingRule::at_maturity(steps, len)];
    for m0 in 0..steps {
        out.push(StoppingRule::from_fn(steps, len, |m, _| m == m0));
    }
    for eps in [0.01, 0.05, 0.1, 0.25] {
        out.push(StoppingRule::from_fn(steps, len, |m, i| sol.y[m][i] - sol.h1[m][i] <= eps));
        out.push(StoppingRule::from_fn(steps, len, |m, i| sol.h2[m][i] - sol.y[m][i] <= eps));
    }
    let sq = lattice.grid().horizon().sqrt();
    for b in [0.25, 0.5, 1.0] {
        out.push(StoppingRule::from_fn(steps, len, |m, i| lattice.state(m, i).brownian >= b * sq));
        out.push(StoppingRule::from_fn(steps, len, |m, i| lattice.state(m, i).brownian <= -b * sq));
    }
    for _ in 0..samples {
        let q: f64 = rng.random_range(0.0..0.5);
        out.push(StoppingRule::from_fn(steps, len, |_, _| rng.random_bool(q)));
    }
    out
}

/// Hitting-time saddles of every particle at the converged `L_n`, checked
/// against sampled adapted deviations with Monte Carlo payoffs on the
/// particle's own paths.
pub fn particle_saddles(
    sol: &ParticleSystemSolution,
    c: &CoefficientSet,
    opts: &SolverOptions,
    samples: usize,
    seed: u64,
) -> Result<Vec<(StoppingRule, StoppingRule, ParticleSaddleReport)>> {
    (0..sol.n)
        .into_par_iter()
        .map(|i| {
            let lat = &sol.lattices[i];
            let s = &sol.sols[i];
            let (tau, sigma) = extract_saddle(s);
            let obs = ObstacleField::from_solution(s);
            let xi = &s.y[s.end];
            let pay = |t: &StoppingRule, g: &StoppingRule| path_payoff(lat, c, &sol.law, &obs, xi, t, g, opts);
            let (value, value_se) = pay(&tau, &sigma)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let devs = deviations(lat, s, samples, &mut rng);
            let mut max_tau_gain = f64::NEG_INFINITY;
            let mut max_sigma_gain = f64::NEG_INFINITY;
            let mut worst = f64::NEG_INFINITY;
            for d in &devs {
                let (up, se_up) = pay(d, &sigma)?;
                let (down, se_down) = pay(&tau, d)?;
                let g_tau = up - value;
                let g_sigma = value - down;
                max_tau_gain = max_tau_gain.max(g_tau);
                max_sigma_gain = max_sigma_gain.max(g_sigma);
                let scale = |se: f64| (value_se.powi(2) + se.powi(2)).sqrt().max(1e-12);
                worst = worst.max(g_tau / scale(se_up)).max(g_sigma / scale(se_down));
            }
            let report = ParticleSaddleReport {
                particle: i,
                value,
                value_se,
                max_tau_gain,
                max_sigma_gain,
                worst_gain_in_se: worst,
                deviations: 2 * devs.len(),
            };
            Ok((tau, sigma, report))
        })
        .collect()
}
