//! Node-wise evaluation of the L^p a priori estimate for BSDEs and of the
//! moment bound on the reflection processes, on the tree backend.

use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientSet, DriverInput};
use crate::drbsde::{DrbsdeSolution, LawView};
use crate::error::{Error, Result};
use crate::lattice::{NoiseLattice, Tree};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateParams {
    pub beta: f64,
    pub eta: f64,
    pub p: f64,
}

impl EstimateParams {
    /// Largest admissible `η = 1/C²` and the matching `β = 2C + 3/η`
    /// (`η = 1` when `C = 0`).
    pub fn for_lipschitz(c: f64, p: f64) -> Self {
        let eta = if c > 0.0 { 1.0 / (c * c) } else { 1.0 };
        Self {
            beta: 2.0 * c + 3.0 / eta,
            eta,
            p,
        }
    }

    pub fn validate(&self, c: f64) -> Result<()> {
        if !(self.p >= 2.0) {
            return Err(Error::InvalidParam(format!("p must be >= 2, got {}", self.p)));
        }
        if !(self.eta > 0.0) || (c > 0.0 && self.eta > 1.0 / (c * c) * (1.0 + 1e-12)) {
            return Err(Error::InvalidParam(format!("eta = {} exceeds 1/C^2", self.eta)));
        }
        if self.beta < 2.0 * c + 3.0 / self.eta - 1e-12 {
            return Err(Error::InvalidParam(format!("beta = {} is below 2C + 3/eta", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AprioriReport {
    /// `max (lhs - rhs)+` over all nodes.
    pub max_violation: f64,
    /// `max_violation / dt`.
    pub slack_constant: f64,
    /// Largest left-hand side seen.
    pub max_lhs: f64,
    pub nodes: usize,
}

/// Conditional expectation of a terminal-node quantity at every level.
fn backward_means(tree: &Tree, terminal: Vec<f64>, steps: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); steps + 1];
    out[steps] = terminal;
    for m in (0..steps).rev() {
        let n = tree.probabilities(m).len();
        out[m] = (0..n)
            .map(|i| tree.children(i).zip(tree.branches()).map(|(c, b)| b.prob * out[m + 1][c]).sum())
            .collect();
    }
    out
}

/// Maps the terminal node `leaf` to its ancestor at step `m`.
fn ancestor(tree: &Tree, leaf: usize, steps: usize, m: usize) -> usize {
    let mut i = leaf;
    for _ in m..steps {
        i = tree.parent(i);
    }
    i
}

/// Compares `|e^{βt} δY_t|^p` with
/// `2^{p/2-1} (E[|e^{βT} δξ|^p | F_t] + η^p E[(Σ_{s≥t} |e^{βs} δf_s|² dt)^{p/2} | F_t])`
/// at every node, where `δf` is the driver gap evaluated along the second
/// solution. Both solutions must be unreflected and on the full horizon.
#[allow(clippy::too_many_arguments)]
pub fn check_apriori_estimate(
    lattice: &NoiseLattice,
    sol1: &DrbsdeSolution,
    sol2: &DrbsdeSolution,
    c1: &CoefficientSet,
    c2: &CoefficientSet,
    law: &dyn LawView,
    ep: &EstimateParams,
) -> Result<AprioriReport> {
    let tree = lattice.require_tree("the a priori estimate check")?;
    ep.validate(c1.lipschitz.c_f)?;
    let steps = lattice.steps();
    let grid = lattice.grid();
    let dt = grid.dt();
    let jumps = lattice.jumps();
    let p = ep.p;
    let disc = |m: usize| (ep.beta * grid.time(m)).exp();

    // δf along the second solution
    let mut df = vec![Vec::new(); steps];
    for (m, row) in df.iter_mut().enumerate() {
        *row = (0..lattice.len(m))
            .map(|i| {
                let u = sol2.u_at(m, i);
                let input = DriverInput {
                    t: grid.time(m),
                    y: sol2.cont[m][i],
                    z: sol2.z[m][i],
                    u,
                    u_agg: jumps.aggregate(u),
                    law: law.law(m, i),
                };
                c1.f(&input) - c2.f(&input)
            })
            .collect();
    }

    let xi_term: Vec<f64> = sol1.y[steps]
        .iter()
        .zip(&sol2.y[steps])
        .map(|(a, b)| (disc(steps) * (a - b)).abs().powf(p))
        .collect();
    let xi_cond = backward_means(tree, xi_term, steps);

    let leaves = lattice.len(steps);
    let mut report = AprioriReport {
        max_violation: 0.0,
        slack_constant: 0.0,
        max_lhs: 0.0,
        nodes: 0,
    };
    for (m, xi_m) in xi_cond.iter().enumerate() {
        let term: Vec<f64> = (0..leaves)
            .map(|leaf| {
                let s: f64 = (m..steps)
                    .map(|j| {
                        let i = ancestor(tree, leaf, steps, j);
                        (disc(j) * df[j][i]).powi(2) * dt
                    })
                    .sum();
                s.powf(p / 2.0)
            })
            .collect();
        let f_cond = &backward_means(tree, term, steps)[m];
        for i in 0..lattice.len(m) {
            let lhs = (disc(m) * (sol1.y[m][i] - sol2.y[m][i])).abs().powf(p);
            let rhs = 2f64.powf(p / 2.0 - 1.0) * (xi_m[i] + ep.eta.powf(p) * f_cond[i]);
            report.max_violation = report.max_violation.max(lhs - rhs);
            report.max_lhs = report.max_lhs.max(lhs);
            report.nodes += 1;
        }
    }
    report.slack_constant = report.max_violation / dt;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KBoundReport {
    /// `E[(K1_T)^p]`.
    pub lhs1: f64,
    /// `p^p E[sup_t Θ1(t)^p]`.
    pub rhs1: f64,
    pub lhs2: f64,
    pub rhs2: f64,
}

impl KBoundReport {
    pub fn margin(&self) -> f64 {
        (self.rhs1 - self.lhs1).min(self.rhs2 - self.lhs2)
    }

    pub fn holds(&self) -> bool {
        self.margin() >= 0.0
    }
}

/// Evaluates `E[(K^i_T)^p] ≤ p^p E[sup_t Θ_i(t)^p]` exactly on the tree.
///
/// The Mokobodzki pair is the Doob decomposition of `X = S′`:
/// `θ1(m) = E[X_T⁺ + Σ_{j≥m} D_j⁻ | F_m]`, `θ2(m) = E[X_T⁻ + Σ_{j≥m} D_j⁺ | F_m]`
/// with `D_j = E[X_{j+1} | F_j] − X_j`, so that `θ1 − θ2 = S′ ∈ [h1, h2]`.
pub fn check_k_bound(lattice: &NoiseLattice, sol: &DrbsdeSolution, c: &CoefficientSet) -> Result<KBoundReport> {
    let tree = lattice.require_tree("the reflection moment bound")?;
    if sol.start != 0 || sol.end != lattice.steps() {
        return Err(Error::InvalidParam("the reflection bound needs a full-horizon solution".into()));
    }
    let steps = lattice.steps();
    let dt = lattice.grid().dt();
    let p = c.p;

    let x: Vec<Vec<f64>> = (0..=steps)
        .map(|m| (0..lattice.len(m)).map(|i| (c.cap)(&lattice.state(m, i))).collect())
        .collect();

    // accumulate the drift parts backward: a(m) = E[a(m+1) | F_m] + D_m^∓
    let mut a_plus: Vec<Vec<f64>> = vec![Vec::new(); steps + 1];
    let mut a_minus: Vec<Vec<f64>> = vec![Vec::new(); steps + 1];
    a_plus[steps] = x[steps].iter().map(|v| v.max(0.0)).collect();
    a_minus[steps] = x[steps].iter().map(|v| (-v).max(0.0)).collect();
    // conditional expectations of ξ∓ and of the running driver parts
    let mut xi_minus = vec![Vec::new(); steps + 1];
    let mut xi_plus = vec![Vec::new(); steps + 1];
    xi_minus[steps] = sol.y[steps].iter().map(|v| (-v).max(0.0)).collect();
    xi_plus[steps] = sol.y[steps].iter().map(|v| v.max(0.0)).collect();
    let mut fm = vec![Vec::new(); steps + 1];
    let mut fp = vec![Vec::new(); steps + 1];
    fm[steps] = vec![0.0; lattice.len(steps)];
    fp[steps] = vec![0.0; lattice.len(steps)];

    let cond = |m: usize, next: &[f64]| -> Vec<f64> {
        (0..lattice.len(m))
            .map(|i| tree.children(i).zip(tree.branches()).map(|(ch, b)| b.prob * next[ch]).sum())
            .collect()
    };
    for m in (0..steps).rev() {
        let ex = cond(m, &x[m + 1]);
        let d: Vec<f64> = ex.iter().zip(&x[m]).map(|(e, v)| e - v).collect();
        a_plus[m] = cond(m, &a_plus[m + 1]).iter().zip(&d).map(|(a, dj)| a + (-dj).max(0.0)).collect();
        a_minus[m] = cond(m, &a_minus[m + 1]).iter().zip(&d).map(|(a, dj)| a + dj.max(0.0)).collect();
        xi_minus[m] = cond(m, &xi_minus[m + 1]);
        xi_plus[m] = cond(m, &xi_plus[m + 1]);
        fm[m] = cond(m, &fm[m + 1])
            .iter()
            .zip(&sol.driver[m])
            .map(|(a, f)| a + (-f).max(0.0) * dt)
            .collect();
        fp[m] = cond(m, &fp[m + 1])
            .iter()
            .zip(&sol.driver[m])
            .map(|(a, f)| a + f.max(0.0) * dt)
            .collect();
    }

    let theta = |m: usize, i: usize, lower: bool| -> f64 {
        let (th, xi, f) = if lower {
            (a_plus[m][i], xi_minus[m][i], fm[m][i])
        } else {
            (a_minus[m][i], xi_plus[m][i], fp[m][i])
        };
        if m < steps {
            th + xi + f
        } else {
            f
        }
    };

    // running maxima along each root-to-leaf path
    let mut sup1 = vec![theta(0, 0, true)];
    let mut sup2 = vec![theta(0, 0, false)];
    for m in 1..=steps {
        let n = lattice.len(m);
        let (s1, s2): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|i| {
                let par = tree.parent(i);
                (sup1[par].max(theta(m, i, true)), sup2[par].max(theta(m, i, false)))
            })
            .unzip();
        sup1 = s1;
        sup2 = s2;
    }
    let w = tree.probabilities(steps);
    let e = |v: &[f64]| -> f64 { v.iter().zip(w).map(|(a, b)| a.powf(p) * b).sum() };
    let pp = p.powf(p);
    Ok(KBoundReport {
        lhs1: e(&sol.k1[steps]),
        rhs1: pp * e(&sup1),
        lhs2: e(&sol.k2[steps]),
        rhs2: pp * e(&sup2),
    })
}
