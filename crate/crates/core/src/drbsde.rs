//! Doubly reflected BSDE with jumps at a frozen law, solved by backward
//! induction with an implicit-in-`y`, explicit-in-`(z, u)` step and an
//! implicit clamp between the obstacles.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientSet, DriverInput};
use crate::error::{Error, Result};
use crate::lattice::{Backend, NodeState, NoiseLattice};
use crate::measure::{MeasureFlow, MeasureSlice};

/// Law seen by the coefficients at node / path `i` of step `m`.
pub trait LawView: Sync {
    fn law(&self, m: usize, i: usize) -> &MeasureSlice;
}

impl LawView for MeasureFlow {
    fn law(&self, m: usize, _i: usize) -> &MeasureSlice {
        self.slice(m)
    }
}

/// One law per step and per path, for couplings whose measure argument is
/// itself random (empirical measures of interacting particles).
#[derive(Debug, Clone)]
pub struct PathwiseLaw {
    /// `[m][j]`.
    pub slices: Vec<Vec<MeasureSlice>>,
}

impl LawView for PathwiseLaw {
    fn law(&self, m: usize, i: usize) -> &MeasureSlice {
        &self.slices[m][i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Total polynomial degree of the regression basis (paths backend).
    pub degree: usize,
    pub implicit_tol: f64,
    pub max_implicit_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            degree: 2,
            implicit_tol: 1e-12,
            max_implicit_iter: 200,
        }
    }
}

/// Solution on steps `start..=end`; vectors for steps outside the window
/// are empty. Per-step quantities (`z`, `u`, increments) live on `start..end`.
#[derive(Debug, Clone, Serialize)]
pub struct DrbsdeSolution {
    pub start: usize,
    pub end: usize,
    pub marks: usize,
    pub dt: f64,
    pub y: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    /// `len * marks`, row-major per node.
    pub u: Vec<Vec<f64>>,
    pub dk1: Vec<Vec<f64>>,
    pub dk2: Vec<Vec<f64>>,
    /// Cumulative reflections with `K(start) = 0`.
    pub k1: Vec<Vec<f64>>,
    pub k2: Vec<Vec<f64>>,
    /// `E[Y_{m+1} | F_m]`.
    pub cond_mean: Vec<Vec<f64>>,
    /// Driver value used in the step.
    pub driver: Vec<Vec<f64>>,
    /// Unreflected continuation value.
    pub cont: Vec<Vec<f64>>,
    /// Obstacles evaluated at the solution.
    pub h1: Vec<Vec<f64>>,
    pub h2: Vec<Vec<f64>>,
    /// Regression degree used per step (0 on trees).
    pub degrees: Vec<usize>,
    /// Monte Carlo standard error of `Y_start` (0 on trees).
    pub root_se: f64,
}

impl DrbsdeSolution {
    pub fn root(&self) -> f64 {
        self.y[self.start][0]
    }

    /// Probability-weighted mean of `Y_start`.
    pub fn root_mean(&self, lattice: &NoiseLattice) -> f64 {
        let w = lattice.weights(self.start);
        self.y[self.start].iter().zip(&w).map(|(a, b)| a * b).sum()
    }

    pub fn u_at(&self, m: usize, i: usize) -> &[f64] {
        &self.u[m][i * self.marks..(i + 1) * self.marks]
    }

    /// `W = K1 - K2` at step `m`.
    pub fn w(&self, m: usize) -> Vec<f64> {
        self.k1[m].iter().zip(&self.k2[m]).map(|(a, b)| a - b).collect()
    }

    /// Marginal law of `Y` per step (full solutions only).
    pub fn flow(&self, lattice: &NoiseLattice) -> MeasureFlow {
        let slices = (0..=self.end).map(|m| lattice.law_of(m, &self.y[m])).collect();
        MeasureFlow::new(slices).expect("one slice per step")
    }

    pub fn invariant_residuals(&self) -> InvariantResiduals {
        let mut r = InvariantResiduals::default();
        for m in self.start..=self.end {
            for (i, &y) in self.y[m].iter().enumerate() {
                let (lo, hi) = (self.h1[m][i], self.h2[m][i]);
                r.sandwich = r.sandwich.max(lo - y).max(y - hi);
                if m < self.end {
                    let (a, b) = (self.dk1[m][i], self.dk2[m][i]);
                    r.skorokhod_lower = r.skorokhod_lower.max((a * (y - lo)).abs());
                    r.skorokhod_upper = r.skorokhod_upper.max((b * (hi - y)).abs());
                    r.singularity = r.singularity.max(a.min(b));
                    r.negative_increment = r.negative_increment.max(-a).max(-b);
                    let rebuilt = self.cond_mean[m][i] + self.driver[m][i] * self.dt + a - b;
                    r.identity = r.identity.max((y - rebuilt).abs());
                }
            }
        }
        r
    }

    /// One row per node / path and step: `m, node, t, brownian, jumps_k...,
    /// y, z, u_k..., k1, k2`. Per-step columns are empty at the last step.
    pub fn write_csv(&self, lattice: &NoiseLattice, mut out: impl Write) -> std::io::Result<()> {
        let k = self.marks;
        let mut header = vec!["m".to_string(), "node".into(), "t".into(), "brownian".into()];
        header.extend((0..k).map(|j| format!("jumps_{j}")));
        header.extend(["y".into(), "z".into()]);
        header.extend((0..k).map(|j| format!("u_{j}")));
        header.extend(["k1".into(), "k2".into()]);
        writeln!(out, "{}", header.join(","))?;
        for m in self.start..=self.end {
            for i in 0..self.y[m].len() {
                let st = lattice.state(m, i);
                let mut row = vec![m.to_string(), i.to_string(), fmt(st.t), fmt(st.brownian)];
                row.extend(st.jumps.iter().map(|c| c.to_string()));
                row.push(fmt(self.y[m][i]));
                if m < self.end {
                    row.push(fmt(self.z[m][i]));
                    row.extend(self.u_at(m, i).iter().map(|&v| fmt(v)));
                } else {
                    row.extend(std::iter::repeat_n(String::new(), 1 + k));
                }
                row.push(fmt(self.k1[m][i]));
                row.push(fmt(self.k2[m][i]));
                writeln!(out, "{}", row.join(","))?;
            }
        }
        Ok(())
    }

    pub fn summary(&self, lattice: &NoiseLattice) -> SolutionSummary {
        let last = self.end;
        let w = lattice.weights(last);
        let mean_of = |v: &[f64]| v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        SolutionSummary {
            root: self.root(),
            root_mean: self.root_mean(lattice),
            root_se: self.root_se,
            mean_k1_total: mean_of(&self.k1[last]),
            mean_k2_total: mean_of(&self.k2[last]),
            residuals: self.invariant_residuals(),
        }
    }
}

/// Shortest round-trip decimal representation.
pub(crate) fn fmt(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct InvariantResiduals {
    /// `max (h1 - Y)+ ∨ (Y - h2)+`.
    pub sandwich: f64,
    /// `max |ΔK1 (Y - h1)|`.
    pub skorokhod_lower: f64,
    /// `max |ΔK2 (h2 - Y)|`.
    pub skorokhod_upper: f64,
    /// `max min(ΔK1, ΔK2)`.
    pub singularity: f64,
    pub negative_increment: f64,
    /// One-step identity `Y = E[Y'] + f dt + ΔK1 - ΔK2`.
    pub identity: f64,
}

impl InvariantResiduals {
    pub fn max(&self) -> f64 {
        [
            self.sandwich,
            self.skorokhod_lower,
            self.skorokhod_upper,
            self.singularity,
            self.negative_increment,
            self.identity,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolutionSummary {
    pub root: f64,
    pub root_mean: f64,
    pub root_se: f64,
    pub mean_k1_total: f64,
    pub mean_k2_total: f64,
    pub residuals: InvariantResiduals,
}

/// Stop region and payoff for an unreflected evaluation. `stop[m][i]` marks
/// the nodes where the payoff `payoff[m][i]` is collected; every node of
/// the last step stops.
#[derive(Debug, Clone)]
pub struct StopRegion {
    pub stop: Vec<Vec<bool>>,
    pub payoff: Vec<Vec<f64>>,
}

enum Mode<'a> {
    Reflected,
    Stopped(&'a StopRegion),
}

/// Solves `x = mean + f(t, x, z, u, μ) dt` by fixed-point iteration.
/// Returns `(x, f)` with `x = mean + f dt` exactly.
#[allow(clippy::too_many_arguments)]
pub fn implicit_continuation(
    c: &CoefficientSet,
    t: f64,
    mean: f64,
    z: f64,
    u: &[f64],
    u_agg: f64,
    law: &MeasureSlice,
    dt: f64,
    opts: &SolverOptions,
) -> Result<(f64, f64)> {
    let mut x = mean;
    let mut change = f64::INFINITY;
    for _ in 0..opts.max_implicit_iter {
        let f = c.f(&DriverInput { t, y: x, z, u, u_agg, law });
        let next = mean + f * dt;
        change = (next - x).abs();
        x = next;
        if change <= opts.implicit_tol * x.abs().max(1.0) {
            return Ok((x, f));
        }
        if !change.is_finite() {
            break;
        }
    }
    Err(Error::ImplicitDiverge {
        iterations: opts.max_implicit_iter,
        last_change: change,
    })
}

/// Finds `y = median(h1(t, y, μ), cont, h2(t, y, μ))` by fixed-point
/// iteration; returns `(y, ΔK1, ΔK2)`.
pub fn clamp_implicit(
    cont: f64,
    state: &NodeState<'_>,
    law: &MeasureSlice,
    c: &CoefficientSet,
    opts: &SolverOptions,
) -> Result<(f64, f64, f64)> {
    clamp_at(cont, state, law, c, opts, 0, 0)
}

fn clamp_at(
    cont: f64,
    state: &NodeState<'_>,
    law: &MeasureSlice,
    c: &CoefficientSet,
    opts: &SolverOptions,
    step: usize,
    node: usize,
) -> Result<(f64, f64, f64)> {
    let mut y = cont;
    let mut change = f64::INFINITY;
    for _ in 0..opts.max_implicit_iter {
        let lo = c.h1(state, y, law);
        let hi = c.h2(state, y, law);
        if lo > hi {
            return Err(Error::ObstacleCross {
                step,
                node,
                lower: lo,
                upper: hi,
            });
        }
        let next = cont.max(lo).min(hi);
        change = (next - y).abs();
        y = next;
        if change <= opts.implicit_tol * y.abs().max(1.0) {
            return Ok((y, (y - cont).max(0.0), (cont - y).max(0.0)));
        }
        if !change.is_finite() {
            break;
        }
    }
    Err(Error::ImplicitDiverge {
        iterations: opts.max_implicit_iter,
        last_change: change,
    })
}

/// Full backward solve with `Y_T = ξ`.
pub fn solve_frozen(lattice: &NoiseLattice, c: &CoefficientSet, law: &dyn LawView, opts: &SolverOptions) -> Result<DrbsdeSolution> {
    solve_window(lattice, c, law, opts, 0, lattice.steps(), None)
}

/// Backward solve on steps `start..=end`. The terminal data at `end` is `ξ`
/// when `end` is the last step and `terminal` is `None`; otherwise it is the
/// given node-wise vector.
pub fn solve_window(
    lattice: &NoiseLattice,
    c: &CoefficientSet,
    law: &dyn LawView,
    opts: &SolverOptions,
    start: usize,
    end: usize,
    terminal: Option<&[f64]>,
) -> Result<DrbsdeSolution> {
    backward(lattice, c, law, opts, start, end, terminal, Mode::Reflected)
}

/// Conditional f-expectation of the payoff collected on a stop region.
pub fn f_expectation(
    lattice: &NoiseLattice,
    c: &CoefficientSet,
    law: &dyn LawView,
    region: &StopRegion,
    opts: &SolverOptions,
) -> Result<DrbsdeSolution> {
    let m = lattice.steps();
    if region.stop.len() != m + 1 || region.payoff.len() != m + 1 {
        return Err(Error::LengthMismatch {
            left: region.stop.len(),
            right: m + 1,
        });
    }
    backward(lattice, c, law, opts, 0, m, Some(&region.payoff[m]), Mode::Stopped(region))
}

struct NodeOut {
    y: f64,
    dk1: f64,
    dk2: f64,
    cont: f64,
    f: f64,
    h1: f64,
    h2: f64,
}

#[allow(clippy::too_many_arguments)]
fn backward(
    lattice: &NoiseLattice,
    c: &CoefficientSet,
    law: &dyn LawView,
    opts: &SolverOptions,
    start: usize,
    end: usize,
    terminal: Option<&[f64]>,
    mode: Mode<'_>,
) -> Result<DrbsdeSolution> {
    let steps = lattice.steps();
    if start > end || end > steps {
        return Err(Error::InvalidGrid(format!("window {start}..={end} outside 0..={steps}")));
    }
    let k = lattice.jumps().len();
    let dt = lattice.grid().dt();
    let empty = || vec![Vec::new(); steps + 1];
    let mut sol = DrbsdeSolution {
        start,
        end,
        marks: k,
        dt,
        y: empty(),
        z: empty(),
        u: empty(),
        dk1: empty(),
        dk2: empty(),
        k1: empty(),
        k2: empty(),
        cond_mean: empty(),
        driver: empty(),
        cont: empty(),
        h1: empty(),
        h2: empty(),
        degrees: vec![0; steps + 1],
        root_se: 0.0,
    };

    let n_end = lattice.len(end);
    let y_end: Vec<f64> = match terminal {
        Some(v) => {
            if v.len() != n_end {
                return Err(Error::LengthMismatch {
                    left: v.len(),
                    right: n_end,
                });
            }
            v.to_vec()
        }
        None => (0..n_end).map(|i| c.xi(&lattice.state(end, i))).collect(),
    };
    let (h1_end, h2_end): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Reflected => (0..n_end)
            .map(|i| {
                let st = lattice.state(end, i);
                let l = law.law(end, i);
                (c.h1(&st, y_end[i], l), c.h2(&st, y_end[i], l))
            })
            .unzip(),
        Mode::Stopped(_) => (vec![f64::NEG_INFINITY; n_end], vec![f64::INFINITY; n_end]),
    };
    sol.y[end] = y_end;
    sol.h1[end] = h1_end;
    sol.h2[end] = h2_end;

    for m in (start..end).rev() {
        let proj = lattice.project_adaptive(m, &sol.y[m + 1], opts.degree)?;
        sol.degrees[m] = proj.degree;
        let t = lattice.grid().time(m);
        let n = lattice.len(m);
        let jumps = lattice.jumps();
        let outs: Vec<NodeOut> = (0..n)
            .into_par_iter()
            .map(|i| {
                let st = lattice.state(m, i);
                let l = law.law(m, i);
                let u = proj.u_at(i);
                let (cont, f) = implicit_continuation(c, t, proj.mean[i], proj.z[i], u, jumps.aggregate(u), l, dt, opts)?;
                match mode {
                    Mode::Reflected => {
                        let (y, dk1, dk2) = clamp_at(cont, &st, l, c, opts, m, i)?;
                        Ok(NodeOut {
                            y,
                            dk1,
                            dk2,
                            cont,
                            f,
                            h1: c.h1(&st, y, l),
                            h2: c.h2(&st, y, l),
                        })
                    }
                    Mode::Stopped(region) => {
                        let y = if region.stop[m][i] { region.payoff[m][i] } else { cont };
                        Ok(NodeOut {
                            y,
                            dk1: 0.0,
                            dk2: 0.0,
                            cont: if region.stop[m][i] { y } else { cont },
                            f: if region.stop[m][i] { 0.0 } else { f },
                            h1: f64::NEG_INFINITY,
                            h2: f64::INFINITY,
                        })
                    }
                }
            })
            .collect::<Result<_>>()?;
        if let Mode::Stopped(region) = mode {
            // stopped nodes: the identity is Y = payoff by definition
            sol.cond_mean[m] = outs
                .iter()
                .zip(&proj.mean)
                .enumerate()
                .map(|(i, (o, &e))| if region.stop[m][i] { o.y } else { e })
                .collect();
        } else {
            sol.cond_mean[m] = proj.mean.clone();
        }
        sol.z[m] = proj.z;
        sol.u[m] = proj.u;
        sol.y[m] = outs.iter().map(|o| o.y).collect();
        sol.dk1[m] = outs.iter().map(|o| o.dk1).collect();
        sol.dk2[m] = outs.iter().map(|o| o.dk2).collect();
        sol.cont[m] = outs.iter().map(|o| o.cont).collect();
        sol.driver[m] = outs.iter().map(|o| o.f).collect();
        sol.h1[m] = outs.iter().map(|o| o.h1).collect();
        sol.h2[m] = outs.iter().map(|o| o.h2).collect();
    }

    // cumulative reflections, K(start) = 0
    sol.k1[start] = vec![0.0; lattice.len(start)];
    sol.k2[start] = vec![0.0; lattice.len(start)];
    for m in start..end {
        let n = lattice.len(m + 1);
        let (k1, k2): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|i| {
                let p = lattice.parent(i);
                (sol.k1[m][p] + sol.dk1[m][p], sol.k2[m][p] + sol.dk2[m][p])
            })
            .unzip();
        sol.k1[m + 1] = k1;
        sol.k2[m + 1] = k2;
    }

    if lattice.backend() == Backend::Paths && start < end {
        let next = &sol.y[start + 1];
        let n = next.len() as f64;
        let f_dt: Vec<f64> = sol.driver[start].iter().map(|f| f * dt).collect();
        let samples: Vec<f64> = next.iter().zip(&f_dt).map(|(a, b)| a + b).collect();
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        sol.root_se = (var / n).sqrt();
    }
    Ok(sol)
}
