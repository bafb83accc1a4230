//! Mean-field fixed point: solve the DRBSDE at a frozen law flow, replace
//! the flow by the law of the solution, repeat.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSet;
use crate::drbsde::{fmt, solve_frozen, solve_window, DrbsdeSolution, SolverOptions};
use crate::error::{Error, Result};
use crate::game::{brute_force_values, extract_saddle, verify_saddle, FrozenGame, ObstacleField, SaddleReport, StoppingRule};
use crate::lattice::{Backend, NoiseLattice};
use crate::measure::{wasserstein_p, MeasureFlow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedPointMode {
    Global,
    WindowedPasting,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixedPointConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub mode: FixedPointMode,
    /// Window length, windowed mode only.
    pub window: Option<f64>,
    /// Weight of the new iterate, in `(0, 1]`.
    pub damping: f64,
    /// Location of the Dirac initial flow.
    pub init: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
            mode: FixedPointMode::Global,
            window: None,
            damping: 1.0,
            init: 0.0,
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self, horizon: f64) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParam("fixed-point tolerance must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidParam(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParam("max_iter must be at least 1".into()));
        }
        if self.mode == FixedPointMode::WindowedPasting {
            match self.window {
                Some(d) if d > 0.0 && d <= horizon * (1.0 + 1e-12) => {}
                other => {
                    return Err(Error::InvalidParam(format!(
                        "windowed mode needs a window in (0, {horizon}], got {other:?}"
                    )))
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionCheck {
    pub lhs: f64,
    pub threshold: f64,
    pub ok: bool,
}

/// `γ1^p + γ2^p + κ1^p + κ2^p < 2^{3 - 5p/2}` (strict).
pub fn check_contraction_condition(g1: f64, g2: f64, k1: f64, k2: f64, p: f64) -> ConditionCheck {
    let lhs = g1.powf(p) + g2.powf(p) + k1.powf(p) + k2.powf(p);
    let threshold = 2f64.powf(3.0 - 2.5 * p);
    ConditionCheck {
        lhs,
        threshold,
        ok: lhs < threshold,
    }
}

/// `2^{p/2 - 1} 7^{p-1} (γ1^p + γ2^p + κ1^p + κ2^p) < 1` (strict).
pub fn check_chaos_condition(g1: f64, g2: f64, k1: f64, k2: f64, p: f64) -> ConditionCheck {
    let sum = g1.powf(p) + g2.powf(p) + k1.powf(p) + k2.powf(p);
    let lhs = 2f64.powf(p / 2.0 - 1.0) * 7f64.powf(p - 1.0) * sum;
    ConditionCheck {
        lhs,
        threshold: 1.0,
        ok: lhs < 1.0,
    }
}

/// Solves at `flow_in` and returns the law of the solution with it.
pub fn apply_psi(
    lattice: &NoiseLattice,
    c: &CoefficientSet,
    flow_in: &MeasureFlow,
    opts: &SolverOptions,
) -> Result<(MeasureFlow, DrbsdeSolution)> {
    check_flow(lattice, flow_in)?;
    let sol = solve_frozen(lattice, c, flow_in, opts)?;
    Ok((sol.flow(lattice), sol))
}

fn check_flow(lattice: &NoiseLattice, flow: &MeasureFlow) -> Result<()> {
    if flow.steps() != lattice.steps() {
        return Err(Error::LengthMismatch {
            left: flow.steps() + 1,
            right: lattice.steps() + 1,
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct MeanFieldSolution {
    /// Law flow at which `sol` was computed.
    pub flow: MeasureFlow,
    pub sol: DrbsdeSolution,
    pub iterations: usize,
    /// `sup_m W_p` between consecutive flows, one entry per update.
    pub residuals: Vec<f64>,
    pub config: FixedPointConfig,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MeanFieldSummary {
    pub root: f64,
    pub root_se: f64,
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub mode: FixedPointMode,
    pub damping: f64,
    pub damped: bool,
    pub warnings: Vec<String>,
}

impl MeanFieldSolution {
    pub fn root(&self) -> f64 {
        self.sol.root()
    }

    pub fn final_residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(0.0)
    }

    pub fn summary(&self) -> MeanFieldSummary {
        MeanFieldSummary {
            root: self.root(),
            root_se: self.sol.root_se,
            iterations: self.iterations,
            residuals: self.residuals.clone(),
            mode: self.config.mode,
            damping: self.config.damping,
            damped: self.config.damping < 1.0,
            warnings: self.warnings.clone(),
        }
    }
}

/// Quantile table of a flow: `m, t, mean, q05, q25, q50, q75, q95`.
pub fn write_flow_csv(lattice: &NoiseLattice, flow: &MeasureFlow, mut out: impl Write) -> std::io::Result<()> {
    const QS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];
    writeln!(out, "m,t,mean,q05,q25,q50,q75,q95")?;
    for (m, s) in flow.slices().iter().enumerate() {
        let qs: Vec<String> = QS.iter().map(|&q| fmt(s.quantile(q))).collect();
        writeln!(out, "{m},{},{},{}", fmt(lattice.grid().time(m)), fmt(s.mean()), qs.join(","))?;
    }
    Ok(())
}

fn sup_distance_on(a: &MeasureFlow, b: &MeasureFlow, steps: std::ops::RangeInclusive<usize>, p: f64) -> f64 {
    steps
        .map(|m| wasserstein_p(a.slice(m), b.slice(m), p).unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max)
}

fn blend(prev: &[Vec<f64>], new: &[Vec<f64>], d: f64, range: std::ops::RangeInclusive<usize>) -> Vec<Vec<f64>> {
    let mut out = prev.to_vec();
    for m in range {
        out[m] = if d >= 1.0 || prev[m].is_empty() {
            new[m].clone()
        } else {
            prev[m].iter().zip(&new[m]).map(|(a, b)| (1.0 - d) * a + d * b).collect()
        };
    }
    out
}

/// Picard iteration on the law flow, started at a Dirac flow.
///
/// Damping acts on the value process: the next flow is the law of
/// `(1 - d) Y_prev + d Y_new`. In windowed mode the last window is
/// converged first with `ξ` as terminal data; each earlier window then uses
/// the converged node values at its right end, and a final full solve is
/// run at the pasted flow.
pub fn fixed_point(lattice: &NoiseLattice, c: &CoefficientSet, cfg: &FixedPointConfig, opts: &SolverOptions) -> Result<MeanFieldSolution> {
    cfg.validate(lattice.grid().horizon())?;
    let l = c.lipschitz;
    let mut warnings = Vec::new();
    let chk = check_contraction_condition(l.gamma1, l.gamma2, l.kappa1, l.kappa2, c.p);
    if !chk.ok {
        warnings.push(format!(
            "contraction condition fails: {:.6} >= {:.6}; convergence is not guaranteed",
            chk.lhs, chk.threshold
        ));
    }
    if cfg.damping < 1.0 {
        warnings.push(format!("damped iteration with weight {}", cfg.damping));
    }
    match cfg.mode {
        FixedPointMode::Global => global(lattice, c, cfg, opts, warnings),
        FixedPointMode::WindowedPasting => windowed(lattice, c, cfg, opts, warnings),
    }
}

fn global(
    lattice: &NoiseLattice,
    c: &CoefficientSet,
    cfg: &FixedPointConfig,
    opts: &SolverOptions,
    warnings: Vec<String>,
) -> Result<MeanFieldSolution> {
    let steps = lattice.steps();
    let mut flow = MeasureFlow::dirac(steps, cfg.init);
    let mut y_prev: Vec<Vec<f64>> = vec![Vec::new(); steps + 1];
    let mut residuals = Vec::new();
    for it in 0..=cfg.max_iter {
        let sol = solve_frozen(lattice, c, &flow, opts)?;
        let y = blend(&y_prev, &sol.y, cfg.damping, 0..=steps);
        let next = flow_of(lattice, &y);
        let r = sup_distance_on(&flow, &next, 0..=steps, c.p);
        residuals.push(r);
        if r <= cfg.tol {
            return Ok(MeanFieldSolution {
                flow,
                sol,
                iterations: it,
                residuals,
                config: *cfg,
                warnings,
            });
        }
        flow = next;
        y_prev = y;
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_iter,
        last: *residuals.last().unwrap(),
        history: residuals,
    })
}

fn flow_of(lattice: &NoiseLattice, y: &[Vec<f64>]) -> MeasureFlow {
    MeasureFlow::new(y.iter().enumerate().map(|(m, v)| lattice.law_of(m, v)).collect()).expect("one slice per step")
}

fn windowed(
    lattice: &NoiseLattice,
    c: &CoefficientSet,
    cfg: &FixedPointConfig,
    opts: &SolverOptions,
    mut warnings: Vec<String>,
) -> Result<MeanFieldSolution> {
    let steps = lattice.steps();
    let dt = lattice.grid().dt();
    let delta = cfg.window.expect("validated");
    let per = ((delta / dt).round() as usize).clamp(1, steps);
    let mut bounds = vec![steps];
    while *bounds.last().unwrap() > 0 {
        let b = *bounds.last().unwrap();
        bounds.push(b.saturating_sub(per));
    }
    // pasted values; steps not yet converged hold the initial Dirac location
    let mut y: Vec<Vec<f64>> = (0..=steps).map(|m| vec![cfg.init; lattice.len(m)]).collect();
    let mut flow = MeasureFlow::dirac(steps, cfg.init);
    let mut residuals = Vec::new();
    let mut total = 0usize;

    for w in bounds.windows(2) {
        let (b, a) = (w[0], w[1]);
        let terminal = if b == steps { None } else { Some(y[b].clone()) };
        let mut converged = false;
        let mut prev: Vec<Vec<f64>> = vec![Vec::new(); steps + 1];
        for _ in 0..=cfg.max_iter {
            let sol = solve_window(lattice, c, &flow, opts, a, b, terminal.as_deref())?;
            let upd = blend(&prev, &sol.y, cfg.damping, a..=b);
            let mut slices: Vec<_> = flow.slices().to_vec();
            for m in a..=b {
                slices[m] = lattice.law_of(m, &upd[m]);
            }
            let next = MeasureFlow::new(slices)?;
            let r = sup_distance_on(&flow, &next, a..=b, c.p);
            residuals.push(r);
            total += 1;
            flow = next;
            y[a..=b].clone_from_slice(&upd[a..=b]);
            prev = upd;
            if r <= cfg.tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NoConvergence {
                iterations: total,
                last: *residuals.last().unwrap(),
                history: residuals,
            });
        }
    }
    let sol = solve_frozen(lattice, c, &flow, opts)?;
    let check = sup_distance_on(&flow, &sol.flow(lattice), 0..=steps, c.p);
    if check > 10.0 * cfg.tol {
        warnings.push(format!("pasted flow differs from its image by {check:e}"));
    }
    residuals.push(check);
    Ok(MeanFieldSolution {
        flow,
        sol,
        iterations: total,
        residuals,
        config: *cfg,
        warnings,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MeanFieldGameReport {
    pub value: f64,
    pub saddle: Option<SaddleReport>,
    pub brute_force_upper: Option<f64>,
    pub brute_force_lower: Option<f64>,
    pub skipped: Vec<String>,
}

/// Converges the flow, then extracts the hitting-time saddle and checks it
/// (and, when the tree is small enough, the exhaustive game value) at the
/// converged flow.
pub fn mean_field_value_and_saddle(
    lattice: &NoiseLattice,
    c: &CoefficientSet,
    cfg: &FixedPointConfig,
    opts: &SolverOptions,
    samples: usize,
    seed: u64,
) -> Result<(MeanFieldSolution, StoppingRule, StoppingRule, MeanFieldGameReport)> {
    let mf = fixed_point(lattice, c, cfg, opts)?;
    let (tau, sigma) = extract_saddle(&mf.sol);
    let mut report = MeanFieldGameReport {
        value: mf.root(),
        saddle: None,
        brute_force_upper: None,
        brute_force_lower: None,
        skipped: Vec::new(),
    };
    if lattice.backend() == Backend::Tree {
        let game = FrozenGame::new(lattice, c, &mf.flow, *opts)?;
        let obs = ObstacleField::from_solution(&mf.sol);
        report.saddle = Some(verify_saddle(&game, &obs, &tau, &sigma, samples, seed)?);
        match brute_force_values(c, &mf.flow, lattice, opts) {
            Ok(g) => {
                report.brute_force_upper = Some(g.upper_root());
                report.brute_force_lower = Some(g.lower_root());
            }
            Err(Error::TooLarge(msg)) => report.skipped.push(format!("brute force: {msg}")),
            Err(e) => return Err(e),
        }
    } else {
        report
            .skipped
            .push("saddle and brute-force checks need the tree backend; use the particle sampler".into());
    }
    Ok((mf, tau, sigma, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_tree, sample_paths, JumpSpec, TimeGrid};
    use crate::scenarios::{binding_lower, chaos_meanfield, mean_ode, BindingLowerParams, ChaosParams, MeanOdeParams};

    #[test]
    fn contraction_threshold() {
        let z = check_contraction_condition(0.0, 0.0, 0.0, 0.0, 2.0);
        assert_eq!((z.lhs, z.threshold, z.ok), (0.0, 0.25, true));
        let b = check_contraction_condition(0.25, 0.25, 0.25, 0.25, 2.0);
        assert_eq!(b.lhs, 0.25);
        assert!(!b.ok);
        let s = check_contraction_condition(0.3, 0.0, 0.0, 0.0, 2.0);
        assert!((s.lhs - 0.09).abs() < 1e-15 && s.ok);
    }

    #[test]
    fn chaos_threshold() {
        assert!(check_chaos_condition(0.0, 0.0, 0.0, 0.0, 2.0).ok);
        let h = check_chaos_condition((1.0f64 / 14.0).sqrt(), 0.0, 0.0, 0.0, 2.0);
        assert!((h.lhs - 0.5).abs() < 1e-12 && h.ok);
        let e = check_chaos_condition((1.0f64 / 7.0).sqrt(), 0.0, 0.0, 0.0, 2.0);
        assert!((e.lhs - 1.0).abs() < 1e-12);
        let b = check_chaos_condition(0.5, 0.5, 0.0, 0.0, 2.0);
        assert!(!b.ok);
    }

    #[test]
    fn law_independent_coefficients_converge_at_once() {
        let l = build_tree(TimeGrid::new(1.0, 3).unwrap(), JumpSpec::none()).unwrap();
        let c = crate::scenarios::trivial(&Default::default());
        let mf = fixed_point(&l, &c, &FixedPointConfig::default(), &SolverOptions::default()).unwrap();
        assert_eq!(mf.iterations, 1);
        assert_eq!(mf.final_residual(), 0.0);
    }

    #[test]
    fn mean_shifted_lower_obstacle() {
        let l = build_tree(TimeGrid::new(1.0, 1).unwrap(), JumpSpec::none()).unwrap();
        let c = binding_lower(&BindingLowerParams {
            mean_coupling: 0.1,
            ..Default::default()
        })
        .unwrap();
        let (mf, tau, sigma, rep) =
            mean_field_value_and_saddle(&l, &c, &FixedPointConfig::default(), &SolverOptions::default(), 0, 0).unwrap();
        assert!((mf.root() - 5.0 / 9.0).abs() < 1e-9);
        assert!(tau.stops_at(0, 0));
        assert!(!sigma.stops_at(0, 0));
        assert!(rep.saddle.unwrap().holds(1e-9));
        assert!((rep.brute_force_upper.unwrap() - 5.0 / 9.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic_value_has_dirac_flow() {
        let l = build_tree(TimeGrid::new(1.0, 3).unwrap(), JumpSpec::new(vec![1.0], vec![0.5]).unwrap()).unwrap();
        let c = mean_ode(&MeanOdeParams { terminal: 2.0 });
        let flow = MeasureFlow::dirac(3, 0.3);
        let (out, _) = apply_psi(&l, &c, &flow, &SolverOptions::default()).unwrap();
        for s in out.slices() {
            assert!(s.max() - s.min() < 1e-14);
        }
        assert!(out.slice(3).values().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn ode_value_from_paths() {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let l = sample_paths(grid, JumpSpec::none(), 32, 3).unwrap();
        let c = mean_ode(&MeanOdeParams { terminal: 1.5 });
        let mf = fixed_point(&l, &c, &FixedPointConfig::default(), &SolverOptions::default()).unwrap();
        let discrete = 1.5 * (1.0 - grid.dt()).powi(-64);
        assert!((mf.root() - discrete).abs() < 1e-8);
    }

    #[test]
    fn windowed_matches_global() {
        let l = build_tree(TimeGrid::new(1.0, 4).unwrap(), JumpSpec::new(vec![0.5], vec![0.5]).unwrap()).unwrap();
        let c = chaos_meanfield(&ChaosParams::default()).unwrap();
        let opts = SolverOptions::default();
        let g = fixed_point(&l, &c, &FixedPointConfig::default(), &opts).unwrap();
        let w = fixed_point(
            &l,
            &c,
            &FixedPointConfig {
                mode: FixedPointMode::WindowedPasting,
                window: Some(0.5),
                ..Default::default()
            },
            &opts,
        )
        .unwrap();
        assert!((g.root() - w.root()).abs() <= 2e-10, "{} vs {}", g.root(), w.root());
    }

    #[test]
    fn damping_is_flagged() {
        let l = build_tree(TimeGrid::new(1.0, 2).unwrap(), JumpSpec::none()).unwrap();
        let c = chaos_meanfield(&ChaosParams::default()).unwrap();
        let cfg = FixedPointConfig {
            damping: 0.5,
            ..Default::default()
        };
        let d = fixed_point(&l, &c, &cfg, &SolverOptions::default()).unwrap();
        let u = fixed_point(&l, &c, &FixedPointConfig::default(), &SolverOptions::default()).unwrap();
        assert!(d.summary().damped);
        assert!((d.root() - u.root()).abs() < 1e-8);
    }

    #[test]
    fn invalid_configs() {
        let bad = FixedPointConfig {
            damping: 0.0,
            ..Default::default()
        };
        assert!(bad.validate(1.0).is_err());
        let w = FixedPointConfig {
            mode: FixedPointMode::WindowedPasting,
            window: Some(2.0),
            ..Default::default()
        };
        assert!(w.validate(1.0).is_err());
    }

    #[test]
    fn no_convergence_reports_history() {
        let l = build_tree(TimeGrid::new(1.0, 2).unwrap(), JumpSpec::new(vec![1.0], vec![0.5]).unwrap()).unwrap();
        let c = chaos_meanfield(&ChaosParams::default()).unwrap();
        let cfg = FixedPointConfig {
            max_iter: 1,
            tol: 1e-15,
            ..Default::default()
        };
        match fixed_point(&l, &c, &cfg, &SolverOptions::default()) {
            Err(Error::NoConvergence { history, .. }) => assert_eq!(history.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
