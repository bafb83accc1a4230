//! Propagation-of-chaos experiments: the interacting particle system
//! against i.i.d. copies of the mean-field solution driven by the same
//! noise, and empirical measures against the mean-field law.

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSet;
use crate::drbsde::{fmt, solve_window, DrbsdeSolution, SolverOptions};
use crate::error::{Error, Result};
use crate::lattice::{sample_paths_with_offset, JumpSpec, NoiseLattice, TimeGrid};
use crate::meanfield::{check_chaos_condition, fixed_point, ConditionCheck, FixedPointConfig, MeanFieldSolution};
use crate::measure::{wasserstein2_planar, wasserstein_pp, MeasureFlow, MeasureSlice};
use crate::particles::{solve_particle_system, ParticleConfig, ParticleSystemSolution};

/// Stream offset of the reference ensemble, far beyond any particle's.
pub const REFERENCE_OFFSET: u64 = 1 << 48;
/// Scenarios used by the two-particle joint-law statistic.
pub const PAIR_SAMPLES: usize = 200;

/// Frozen-law solutions on the particles' own noise and terminal values.
pub fn iid_copies(
    flow: &MeasureFlow,
    particles: &ParticleSystemSolution,
    c: &CoefficientSet,
    opts: &SolverOptions,
) -> Result<Vec<DrbsdeSolution>> {
    particles
        .lattices
        .par_iter()
        .zip(&particles.sols)
        .map(|(lat, s)| solve_window(lat, c, flow, opts, 0, s.end, Some(&s.y[s.end])))
        .collect()
}

fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LlnRow {
    pub n: usize,
    pub estimate: f64,
    pub se: f64,
}

/// `E[max_m W_p^p(L_n[Y_m], P_{Y_m})]` for `n` copies drawn without
/// replacement from the reference ensemble, one draw per seed.
pub fn lln_experiment(mf: &MeanFieldSolution, lattice: &NoiseLattice, n_grid: &[usize], seeds: &[u64], p: f64) -> Result<Vec<LlnRow>> {
    let total = lattice.len(0);
    if seeds.is_empty() {
        return Err(Error::InvalidParam("at least one seed is required".into()));
    }
    let reference = mf.sol.flow(lattice);
    n_grid
        .iter()
        .map(|&n| {
            if n == 0 || n > total {
                return Err(Error::InvalidParam(format!("n = {n} outside 1..={total}")));
            }
            let per_seed: Vec<f64> = seeds
                .par_iter()
                .map(|&seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let idx = sample(&mut rng, total, n).into_vec();
                    (0..=lattice.steps())
                        .map(|m| {
                            let draw = MeasureSlice::uniform(idx.iter().map(|&j| mf.sol.y[m][j]).collect())?;
                            wasserstein_pp(&draw, reference.slice(m), p)
                        })
                        .try_fold(0.0f64, |acc, w| w.map(|w| acc.max(w)))
                })
                .collect::<Result<_>>()?;
            let (estimate, se) = mean_se(&per_seed);
            Ok(LlnRow { n, estimate, se })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsReport {
    pub statistic: f64,
    pub p_value: f64,
    /// Not rejected at the 1% level.
    pub passes: bool,
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic distribution.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    let (na, nb) = (x.len() as f64, y.len() as f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = (na * nb / (na + nb)).sqrt();
    let lambda = (ne + 0.12 + 0.11 / ne) * d;
    let p_value = kolmogorov_tail(lambda);
    Ok(KsReport {
        statistic: d,
        p_value,
        passes: p_value > 0.01,
    })
}

fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// KS check that the copies' values at `(step, scenario 0)` are draws from
/// the reference marginal.
pub fn iid_ks_check(copies: &[DrbsdeSolution], reference: &MeasureSlice, step: usize) -> Result<KsReport> {
    let draws: Vec<f64> = copies.iter().map(|s| s.y[step][0]).collect();
    ks_two_sample(&draws, reference.values())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChaosConfig {
    /// Scenarios per particle.
    pub paths: usize,
    /// Reference ensemble size; defaults to `max(64 n_max, paths)`.
    pub n_ref: Option<usize>,
    pub fixed_point: FixedPointConfig,
    pub solver: SolverOptions,
    /// Step of the two-particle joint-law statistic.
    pub pair_step: usize,
}

impl Default for ChaosConfig {
    fn default() -> Self {
        Self {
            paths: 256,
            n_ref: None,
            fixed_point: FixedPointConfig::default(),
            solver: SolverOptions::default(),
            pair_step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChaosRow {
    pub n: usize,
    pub seed: u64,
    /// Scenario mean of `max_m W_p^p(L_n[Y_m], P_{Y_m})`.
    pub w_hat: f64,
    pub w_hat_se: f64,
    /// `max_m` of the mean of `|Y^{i,n}_m - Y^i_m|^p`.
    pub g: f64,
    pub g_se: f64,
    /// Same for `W = K1 - K2`.
    pub w_component: f64,
    /// `W_2` between the joint laws of the first two particles and of the
    /// first two copies; absent for `n = 1`.
    pub pair_w2: Option<f64>,
    pub iterations: usize,
    /// Per step: scenario means of `W_p^p`, `|ΔY|^p` and `|ΔW|^p`.
    pub w_pp_by_step: Vec<f64>,
    pub y_gap_by_step: Vec<f64>,
    pub w_gap_by_step: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChaosAggregate {
    pub n: usize,
    pub w_hat: f64,
    pub w_hat_se: f64,
    pub g: f64,
    pub g_se: f64,
    pub w_component: f64,
    pub pair_w2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendCheck {
    pub values: Vec<f64>,
    pub se: Vec<f64>,
    /// Each value is at most the previous plus two combined standard errors.
    pub non_increasing: bool,
    /// Last value at most half the first.
    pub halved: bool,
}

impl TrendCheck {
    pub fn holds(&self) -> bool {
        self.non_increasing && self.halved
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChaosReport {
    pub scenario: String,
    pub n_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub paths: usize,
    pub n_ref: usize,
    pub p: f64,
    pub degree: usize,
    pub chaos_condition: ConditionCheck,
    /// The smallness condition fails, so convergence is not guaranteed.
    pub exploratory: bool,
    pub rows: Vec<ChaosRow>,
    pub aggregates: Vec<ChaosAggregate>,
}

impl ChaosReport {
    fn trend(&self, pick: impl Fn(&ChaosAggregate) -> (f64, f64)) -> TrendCheck {
        let (values, se): (Vec<f64>, Vec<f64>) = self.aggregates.iter().map(pick).unzip();
        let non_increasing = values
            .windows(2)
            .zip(se.windows(2))
            .all(|(v, s)| v[1] <= v[0] + 2.0 * (s[0].powi(2) + s[1].powi(2)).sqrt());
        let halved = match (values.first(), values.last()) {
            (Some(a), Some(b)) => *b <= 0.5 * a,
            _ => false,
        };
        TrendCheck {
            values,
            se,
            non_increasing,
            halved,
        }
    }

    pub fn w_hat_trend(&self) -> TrendCheck {
        self.trend(|a| (a.w_hat, a.w_hat_se))
    }

    pub fn g_trend(&self) -> TrendCheck {
        self.trend(|a| (a.g, a.g_se))
    }

    /// Long format: `n,seed,step,metric,value`; `step` is `sup` for the
    /// maxima over steps.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "n,seed,step,metric,value")?;
        for r in &self.rows {
            for (name, v) in [("w_pp", &r.w_pp_by_step), ("y_gap", &r.y_gap_by_step), ("w_gap", &r.w_gap_by_step)] {
                for (m, x) in v.iter().enumerate() {
                    writeln!(out, "{},{},{m},{name},{}", r.n, r.seed, fmt(*x))?;
                }
            }
            let mut sup = vec![
                ("w_hat", r.w_hat),
                ("w_hat_se", r.w_hat_se),
                ("g", r.g),
                ("g_se", r.g_se),
                ("w_component", r.w_component),
            ];
            if let Some(w) = r.pair_w2 {
                sup.push(("pair_w2", w));
            }
            for (name, v) in sup {
                writeln!(out, "{},{},sup,{name},{}", r.n, r.seed, fmt(v))?;
            }
        }
        Ok(())
    }

    /// Seed-averaged metrics against `n` with logarithms for log-log plots.
    pub fn write_plot_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "n,log_n,metric,value,se,log_value")?;
        for a in &self.aggregates {
            let ln = (a.n as f64).ln();
            let mut rows = vec![
                ("w_hat", a.w_hat, a.w_hat_se),
                ("g", a.g, a.g_se),
                ("w_component", a.w_component, 0.0),
            ];
            if let Some(w) = a.pair_w2 {
                rows.push(("pair_w2", w, 0.0));
            }
            for (name, v, se) in rows {
                writeln!(out, "{},{},{name},{},{},{}", a.n, fmt(ln), fmt(v), fmt(se), fmt(v.ln()))?;
            }
        }
        Ok(())
    }
}

/// Mean-field reference flow on `n_ref` paths of the reference streams.
pub fn reference_solution(
    grid: TimeGrid,
    jumps: &JumpSpec,
    c: &CoefficientSet,
    n_ref: usize,
    seed: u64,
    cfg: &FixedPointConfig,
    opts: &SolverOptions,
) -> Result<(NoiseLattice, MeanFieldSolution)> {
    let lattice = sample_paths_with_offset(grid, jumps.clone(), n_ref, seed, REFERENCE_OFFSET)?;
    let mf = fixed_point(&lattice, c, cfg, opts)?;
    Ok((lattice, mf))
}

fn gap_by_step(
    a: &[DrbsdeSolution],
    b: &[DrbsdeSolution],
    steps: usize,
    p: f64,
    field: impl Fn(&DrbsdeSolution, usize) -> Vec<f64>,
) -> Vec<Vec<f64>> {
    // [m][j]: particle mean of |a - b|^p
    let n = a.len() as f64;
    (0..=steps)
        .map(|m| {
            let mut acc: Vec<f64> = Vec::new();
            for (x, y) in a.iter().zip(b) {
                let (u, v) = (field(x, m), field(y, m));
                if acc.is_empty() {
                    acc = vec![0.0; u.len()];
                }
                for (s, (p1, p2)) in acc.iter_mut().zip(u.iter().zip(&v)) {
                    *s += (p1 - p2).abs().powf(p) / n;
                }
            }
            acc
        })
        .collect()
}

fn sup_of_means(by: &[Vec<f64>]) -> (f64, f64, Vec<f64>) {
    let means: Vec<(f64, f64)> = by.iter().map(|v| mean_se(v)).collect();
    let best = means
        .iter()
        .copied()
        .fold((f64::NEG_INFINITY, 0.0), |a, x| if x.0 > a.0 { x } else { a });
    (best.0, best.1, means.iter().map(|x| x.0).collect())
}

/// One particle-system run of size `n` against its i.i.d. copies.
pub fn chaos_run(
    grid: TimeGrid,
    jumps: &JumpSpec,
    c: &CoefficientSet,
    reference: &MeasureFlow,
    n: usize,
    seed: u64,
    cfg: &ChaosConfig,
) -> Result<ChaosRow> {
    let pcfg = ParticleConfig {
        n,
        paths: cfg.paths,
        seed,
        fixed_point: cfg.fixed_point,
        solver: cfg.solver,
    };
    let sys = solve_particle_system(grid, jumps, c, &pcfg, None)?;
    let copies = iid_copies(reference, &sys, c, &cfg.solver)?;
    let steps = grid.steps();
    let s = cfg.paths;
    let p = c.p;

    // per scenario: max over steps of W_p^p(L_n, P)
    let w_by: Vec<Vec<f64>> = (0..=steps)
        .into_par_iter()
        .map(|m| {
            (0..s)
                .map(|j| {
                    let l = MeasureSlice::uniform(sys.sols.iter().map(|x| x.y[m][j]).collect())?;
                    wasserstein_pp(&l, reference.slice(m), p)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let sup_per_scenario: Vec<f64> = (0..s).map(|j| (0..=steps).map(|m| w_by[m][j]).fold(0.0, f64::max)).collect();
    let (w_hat, w_hat_se) = mean_se(&sup_per_scenario);
    let w_pp_by_step = w_by.iter().map(|v| mean_se(v).0).collect();

    let y_by = gap_by_step(&sys.sols, &copies, steps, p, |x, m| x.y[m].clone());
    let (g, g_se, y_gap_by_step) = sup_of_means(&y_by);
    let wk_by = gap_by_step(&sys.sols, &copies, steps, p, |x, m| x.w(m));
    let (w_component, _, w_gap_by_step) = sup_of_means(&wk_by);

    let pair_w2 = if n >= 2 {
        let k = s.min(PAIR_SAMPLES);
        let m = cfg.pair_step.min(steps);
        let a: Vec<(f64, f64)> = (0..k).map(|j| (sys.sols[0].y[m][j], sys.sols[1].y[m][j])).collect();
        let b: Vec<(f64, f64)> = (0..k).map(|j| (copies[0].y[m][j], copies[1].y[m][j])).collect();
        Some(wasserstein2_planar(&a, &b)?)
    } else {
        None
    };

    Ok(ChaosRow {
        n,
        seed,
        w_hat,
        w_hat_se,
        g,
        g_se,
        w_component,
        pair_w2,
        iterations: sys.iterations,
        w_pp_by_step,
        y_gap_by_step,
        w_gap_by_step,
    })
}

/// For every seed: converge the mean-field flow on the reference ensemble,
/// then run the particle system and its i.i.d. copies for every `n`.
pub fn chaos_gap_experiment(
    grid: TimeGrid,
    jumps: &JumpSpec,
    c: &CoefficientSet,
    n_grid: &[usize],
    seeds: &[u64],
    cfg: &ChaosConfig,
) -> Result<ChaosReport> {
    if n_grid.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidParam(
            "chaos experiment needs a non-empty n-grid and seed list".into(),
        ));
    }
    let n_max = *n_grid.iter().max().unwrap();
    let n_ref = cfg.n_ref.unwrap_or((64 * n_max).max(cfg.paths));
    let l = c.lipschitz;
    let chaos_condition = check_chaos_condition(l.gamma1, l.gamma2, l.kappa1, l.kappa2, c.p);
    let mut rows = Vec::with_capacity(n_grid.len() * seeds.len());
    for &seed in seeds {
        let (_, mf) = reference_solution(grid, jumps, c, n_ref, seed, &cfg.fixed_point, &cfg.solver)?;
        let reference = mf.flow.clone();
        for &n in n_grid {
            rows.push(chaos_run(grid, jumps, c, &reference, n, seed, cfg)?);
        }
    }
    let k = seeds.len() as f64;
    let aggregates = n_grid
        .iter()
        .map(|&n| {
            let rs: Vec<&ChaosRow> = rows.iter().filter(|r| r.n == n).collect();
            let avg = |f: &dyn Fn(&ChaosRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / k;
            let comb = |f: &dyn Fn(&ChaosRow) -> f64| rs.iter().map(|r| f(r).powi(2)).sum::<f64>().sqrt() / k;
            ChaosAggregate {
                n,
                w_hat: avg(&|r| r.w_hat),
                w_hat_se: comb(&|r| r.w_hat_se),
                g: avg(&|r| r.g),
                g_se: comb(&|r| r.g_se),
                w_component: avg(&|r| r.w_component),
                pair_w2: if n >= 2 { Some(avg(&|r| r.pair_w2.unwrap_or(0.0))) } else { None },
            }
        })
        .collect();
    Ok(ChaosReport {
        scenario: c.name.clone(),
        n_grid: n_grid.to_vec(),
        seeds: seeds.to_vec(),
        paths: cfg.paths,
        n_ref,
        p: c.p,
        degree: cfg.solver.degree,
        exploratory: !chaos_condition.ok,
        chaos_condition,
        rows,
        aggregates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{chaos_meanfield, mean_ode, trivial, ChaosParams, MeanOdeParams, TrivialParams};

    fn grid() -> TimeGrid {
        TimeGrid::new(1.0, 4).unwrap()
    }

    #[test]
    fn ks_identical_and_shifted() {
        let a: Vec<f64> = (0..200).map(|i| i as f64 / 200.0).collect();
        let same = ks_two_sample(&a, &a).unwrap();
        assert_eq!(same.statistic, 0.0);
        assert!(same.passes);
        let b: Vec<f64> = a.iter().map(|x| x + 0.5).collect();
        let far = ks_two_sample(&a, &b).unwrap();
        assert!((far.statistic - 0.5).abs() <= 0.01);
        assert!(!far.passes);
    }

    #[test]
    fn kolmogorov_tail_reference_points() {
        // P(K > 1.36) ≈ 0.05, P(K > 1.63) ≈ 0.01
        assert!((kolmogorov_tail(1.358) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_tail(1.628) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn law_free_gap_is_zero() {
        let c = trivial(&TrivialParams {
            scale: 1.0,
            jump_loading: 0.3,
        });
        let jumps = JumpSpec::new(vec![1.0], vec![0.5]).unwrap();
        let cfg = ChaosConfig {
            paths: 64,
            ..Default::default()
        };
        let r = chaos_gap_experiment(grid(), &jumps, &c, &[2, 4], &[1], &cfg).unwrap();
        for row in &r.rows {
            assert_eq!(row.g, 0.0);
            assert_eq!(row.w_component, 0.0);
            assert_eq!(row.pair_w2, Some(0.0));
        }
    }

    #[test]
    fn deterministic_values_have_zero_lln_error() {
        let c = mean_ode(&MeanOdeParams { terminal: 1.0 });
        let (lat, mf) = reference_solution(grid(), &JumpSpec::none(), &c, 64, 2, &Default::default(), &Default::default()).unwrap();
        let t = lln_experiment(&mf, &lat, &[1, 4, 64], &[1, 2], 2.0).unwrap();
        assert!(t.iter().all(|r| r.estimate < 1e-20));
    }

    #[test]
    fn whole_ensemble_is_the_reference() {
        let c = chaos_meanfield(&ChaosParams::default()).unwrap();
        let (lat, mf) = reference_solution(grid(), &JumpSpec::none(), &c, 128, 2, &Default::default(), &Default::default()).unwrap();
        let t = lln_experiment(&mf, &lat, &[4, 128], &[1, 2, 3], 2.0).unwrap();
        assert!(t[0].estimate > 0.0);
        assert!(t[1].estimate < 1e-20);
    }

    #[test]
    fn reports_are_reproducible() {
        let c = chaos_meanfield(&ChaosParams::default()).unwrap();
        let cfg = ChaosConfig {
            paths: 64,
            ..Default::default()
        };
        let run = || {
            let r = chaos_gap_experiment(grid(), &JumpSpec::none(), &c, &[2, 8], &[5], &cfg).unwrap();
            let mut buf = Vec::new();
            r.write_csv(&mut buf).unwrap();
            buf
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn trend_rules() {
        let mk = |v: &[f64]| ChaosReport {
            scenario: String::new(),
            n_grid: vec![],
            seeds: vec![],
            paths: 0,
            n_ref: 0,
            p: 2.0,
            degree: 0,
            chaos_condition: check_chaos_condition(0.0, 0.0, 0.0, 0.0, 2.0),
            exploratory: false,
            rows: vec![],
            aggregates: v
                .iter()
                .map(|&g| ChaosAggregate {
                    n: 1,
                    w_hat: g,
                    w_hat_se: 0.01,
                    g,
                    g_se: 0.01,
                    w_component: 0.0,
                    pair_w2: None,
                })
                .collect(),
        };
        assert!(mk(&[1.0, 0.5, 0.51, 0.2]).g_trend().holds());
        assert!(!mk(&[1.0, 0.5, 0.6, 0.2]).g_trend().non_increasing);
        assert!(!mk(&[1.0, 0.9, 0.8, 0.7]).g_trend().halved);
    }
}
