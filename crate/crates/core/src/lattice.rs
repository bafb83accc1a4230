//! Discrete-time noise: a Brownian branch (±√dt) crossed with a finite set
//! of jump marks.
//!
//! Two backends share one interface. The tree backend is a full
//! (non-recombining) event tree: every node is a path prefix, so conditional
//! expectations are exact and adapted stopping rules are plain per-node
//! decisions. The path backend is a seeded Monte Carlo ensemble whose
//! conditional expectations are least-squares regressions on polynomial
//! features of the path state.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::MeasureSlice;

/// Upper bound on tree nodes; larger trees are rejected with `TooLarge`.
pub const MAX_TREE_NODES: usize = 6_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(Error::InvalidGrid("steps must be at least 1".into()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidGrid(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Time of grid point `m`; the last point is the horizon itself.
    pub fn time(&self, m: usize) -> f64 {
        if m >= self.steps {
            self.horizon
        } else {
            m as f64 * self.dt()
        }
    }
}

/// Finite mark set with per-mark intensities (a discretised Lévy measure).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JumpSpec {
    pub marks: Vec<f64>,
    pub intensities: Vec<f64>,
}

impl JumpSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(marks: Vec<f64>, intensities: Vec<f64>) -> Result<Self> {
        if marks.len() != intensities.len() {
            return Err(Error::LengthMismatch {
                left: marks.len(),
                right: intensities.len(),
            });
        }
        if intensities.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidIntensity {
                total: intensities.iter().sum(),
            });
        }
        Ok(Self { marks, intensities })
    }

    pub fn len(&self) -> usize {
        self.marks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }

    pub fn total_intensity(&self) -> f64 {
        self.intensities.iter().sum()
    }

    pub fn validate_for(&self, grid: &TimeGrid) -> Result<()> {
        if self.marks.len() != self.intensities.len() {
            return Err(Error::LengthMismatch {
                left: self.marks.len(),
                right: self.intensities.len(),
            });
        }
        let total = self.total_intensity() * grid.dt();
        if self.intensities.iter().any(|l| !(l.is_finite() && *l >= 0.0)) || !(total < 1.0) {
            return Err(Error::InvalidIntensity { total });
        }
        Ok(())
    }

    /// `ν`-weighted aggregate `Σ_k λ_k u_k`.
    pub fn aggregate(&self, u: &[f64]) -> f64 {
        self.intensities.iter().zip(u).map(|(l, v)| l * v).sum()
    }

    /// `|u|_ν = (Σ_k λ_k u_k²)^{1/2}`.
    pub fn nu_norm(&self, u: &[f64]) -> f64 {
        self.intensities.iter().zip(u).map(|(l, v)| l * v * v).sum::<f64>().sqrt()
    }
}

/// State of the driving noise at one node (tree) or one path-step (ensemble).
#[derive(Debug, Clone, Copy)]
pub struct NodeState<'a> {
    pub t: f64,
    pub horizon: f64,
    pub brownian: f64,
    pub jumps: &'a [u32],
    pub marks: &'a [f64],
}

impl NodeState<'_> {
    /// Compound jump level `Σ_k e_k N_k`.
    pub fn compound(&self) -> f64 {
        self.jumps.iter().zip(self.marks).map(|(&n, e)| n as f64 * e).sum()
    }

    pub fn jump_count(&self) -> u32 {
        self.jumps.iter().sum()
    }

    pub fn is_terminal(&self) -> bool {
        self.t >= self.horizon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Tree,
    Paths,
}

/// One outcome of a single time step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Branch {
    pub prob: f64,
    pub db: f64,
    pub mark: Option<usize>,
}

/// The per-step outcome set shared by every tree node: `{+√dt, −√dt}` crossed
/// with `{no jump, jump with mark k}`.
pub fn step_branches(grid: &TimeGrid, jumps: &JumpSpec) -> Vec<Branch> {
    let dt = grid.dt();
    let sq = dt.sqrt();
    let stay = 0.5 * (1.0 - jumps.total_intensity() * dt);
    let mut out = Vec::with_capacity(2 * (1 + jumps.len()));
    for db in [sq, -sq] {
        out.push(Branch {
            prob: stay,
            db,
            mark: None,
        });
    }
    for (k, l) in jumps.intensities.iter().enumerate() {
        for db in [sq, -sq] {
            out.push(Branch {
                prob: 0.5 * l * dt,
                db,
                mark: Some(k),
            });
        }
    }
    out
}

#[derive(Debug, Clone)]
struct TreeLevel {
    prob: Vec<f64>,
    brownian: Vec<f64>,
    jumps: Vec<u32>,
}

/// Full event tree. Node `i` at step `m` has children
/// `i * branching .. (i + 1) * branching` at step `m + 1`.
#[derive(Debug, Clone)]
pub struct Tree {
    branches: Vec<Branch>,
    levels: Vec<TreeLevel>,
}

impl Tree {
    pub fn branching(&self) -> usize {
        self.branches.len()
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn node_probability(&self, m: usize, i: usize) -> f64 {
        self.levels[m].prob[i]
    }

    pub fn probabilities(&self, m: usize) -> &[f64] {
        &self.levels[m].prob
    }

    pub fn children(&self, i: usize) -> std::ops::Range<usize> {
        let b = self.branching();
        i * b..(i + 1) * b
    }

    pub fn parent(&self, i: usize) -> usize {
        i / self.branching()
    }

    pub fn total_nodes(&self) -> usize {
        self.levels.iter().map(|l| l.prob.len()).sum()
    }
}

/// Seeded ensemble of i.i.d. discrete paths.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    n_paths: usize,
    seed: u64,
    stream_offset: u64,
    /// Brownian increment from step m to m+1, stored `m * n_paths + j`.
    db: Vec<f64>,
    /// Mark index (k + 1) of the jump in step m -> m+1, 0 when none.
    mark: Vec<u16>,
    /// Brownian level at step m, `(M + 1) * n_paths`.
    brownian: Vec<f64>,
    /// Cumulative jump counts per mark, `(M + 1) * n_paths * K`.
    jumps: Vec<u32>,
}

impl PathEnsemble {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_offset(&self) -> u64 {
        self.stream_offset
    }

    pub fn increment(&self, m: usize, j: usize) -> f64 {
        self.db[m * self.n_paths + j]
    }

    /// Mark of the jump in step `m -> m + 1` along path `j`, if any.
    pub fn jump_mark(&self, m: usize, j: usize) -> Option<usize> {
        match self.mark[m * self.n_paths + j] {
            0 => None,
            k => Some(k as usize - 1),
        }
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Tree(Tree),
    Paths(PathEnsemble),
}

/// Discrete driver: time grid, mark set and one of the two backends.
#[derive(Debug, Clone)]
pub struct NoiseLattice {
    grid: TimeGrid,
    jumps: JumpSpec,
    kind: Kind,
}

/// Martingale projection of a next-step value vector: conditional mean, the
/// Brownian loading `Z` and the per-mark jump loadings `U`.
#[derive(Debug, Clone)]
pub struct Projection {
    pub mean: Vec<f64>,
    pub z: Vec<f64>,
    /// `len * K`, row-major per node.
    pub u: Vec<f64>,
    pub marks: usize,
    /// Regression degree actually used (tree: 0).
    pub degree: usize,
}

impl Projection {
    pub fn u_at(&self, i: usize) -> &[f64] {
        &self.u[i * self.marks..(i + 1) * self.marks]
    }
}

pub fn build_tree(grid: TimeGrid, jumps: JumpSpec) -> Result<NoiseLattice> {
    jumps.validate_for(&grid)?;
    let branches = step_branches(&grid, &jumps);
    let b = branches.len();
    let k = jumps.len();
    let mut total = 0usize;
    let mut width = 1usize;
    for _ in 0..=grid.steps() {
        total = total.saturating_add(width);
        width = width.saturating_mul(b);
    }
    if total > MAX_TREE_NODES {
        return Err(Error::TooLarge(format!(
            "tree with branching {b} and {} steps has {total} nodes (cap {MAX_TREE_NODES})",
            grid.steps()
        )));
    }
    let mut levels = Vec::with_capacity(grid.steps() + 1);
    levels.push(TreeLevel {
        prob: vec![1.0],
        brownian: vec![0.0],
        jumps: vec![0; k],
    });
    for m in 0..grid.steps() {
        let prev = &levels[m];
        let n = prev.prob.len();
        let mut next = TreeLevel {
            prob: Vec::with_capacity(n * b),
            brownian: Vec::with_capacity(n * b),
            jumps: Vec::with_capacity(n * b * k),
        };
        for i in 0..n {
            for br in &branches {
                next.prob.push(prev.prob[i] * br.prob);
                next.brownian.push(prev.brownian[i] + br.db);
                let base = &prev.jumps[i * k..(i + 1) * k];
                for (kk, &c) in base.iter().enumerate() {
                    next.jumps.push(c + u32::from(br.mark == Some(kk)));
                }
            }
        }
        levels.push(next);
    }
    Ok(NoiseLattice {
        grid,
        jumps,
        kind: Kind::Tree(Tree { branches, levels }),
    })
}

pub fn sample_paths(grid: TimeGrid, jumps: JumpSpec, n_paths: usize, seed: u64) -> Result<NoiseLattice> {
    sample_paths_with_offset(grid, jumps, n_paths, seed, 0)
}

/// Path `j` draws from ChaCha stream `stream_offset + j` of `seed`, so the
/// ensemble does not depend on how the work is chunked, and disjoint offsets
/// give independent ensembles under one master seed.
pub fn sample_paths_with_offset(grid: TimeGrid, jumps: JumpSpec, n_paths: usize, seed: u64, stream_offset: u64) -> Result<NoiseLattice> {
    jumps.validate_for(&grid)?;
    if n_paths < 1 {
        return Err(Error::InvalidParam("n_paths must be at least 1".into()));
    }
    let steps = grid.steps();
    let k = jumps.len();
    let dt = grid.dt();
    let sq = dt.sqrt();
    let cumulative: Vec<f64> = jumps
        .intensities
        .iter()
        .scan(0.0, |acc, l| {
            *acc += l * dt;
            Some(*acc)
        })
        .collect();

    let per_path: Vec<(Vec<f64>, Vec<u16>)> = (0..n_paths)
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_offset + j as u64);
            let mut db = Vec::with_capacity(steps);
            let mut mk = Vec::with_capacity(steps);
            for _ in 0..steps {
                let up: bool = rng.random();
                let draw: f64 = rng.random();
                db.push(if up { sq } else { -sq });
                let mark = cumulative.iter().position(|&c| draw < c);
                mk.push(mark.map_or(0, |m| m as u16 + 1));
            }
            (db, mk)
        })
        .collect();

    let mut db = vec![0.0; steps * n_paths];
    let mut mark = vec![0u16; steps * n_paths];
    let mut brownian = vec![0.0; (steps + 1) * n_paths];
    let mut counts = vec![0u32; (steps + 1) * n_paths * k];
    for (j, (pdb, pmk)) in per_path.iter().enumerate() {
        for m in 0..steps {
            db[m * n_paths + j] = pdb[m];
            mark[m * n_paths + j] = pmk[m];
            brownian[(m + 1) * n_paths + j] = brownian[m * n_paths + j] + pdb[m];
            for kk in 0..k {
                let prev = counts[(m * n_paths + j) * k + kk];
                counts[((m + 1) * n_paths + j) * k + kk] = prev + u32::from(pmk[m] as usize == kk + 1);
            }
        }
    }
    Ok(NoiseLattice {
        grid,
        jumps,
        kind: Kind::Paths(PathEnsemble {
            n_paths,
            seed,
            stream_offset,
            db,
            mark,
            brownian,
            jumps: counts,
        }),
    })
}

impl NoiseLattice {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn jumps(&self) -> &JumpSpec {
        &self.jumps
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn backend(&self) -> Backend {
        match self.kind {
            Kind::Tree(_) => Backend::Tree,
            Kind::Paths(_) => Backend::Paths,
        }
    }

    pub fn tree(&self) -> Option<&Tree> {
        match &self.kind {
            Kind::Tree(t) => Some(t),
            Kind::Paths(_) => None,
        }
    }

    pub fn paths(&self) -> Option<&PathEnsemble> {
        match &self.kind {
            Kind::Paths(p) => Some(p),
            Kind::Tree(_) => None,
        }
    }

    pub fn require_tree(&self, what: &'static str) -> Result<&Tree> {
        self.tree().ok_or(Error::BackendUnsupported(what))
    }

    /// Number of nodes (tree) or paths (ensemble) at step `m`.
    pub fn len(&self, m: usize) -> usize {
        match &self.kind {
            Kind::Tree(t) => t.levels[m].prob.len(),
            Kind::Paths(p) => p.n_paths,
        }
    }

    pub fn state(&self, m: usize, i: usize) -> NodeState<'_> {
        let k = self.jumps.len();
        let t = self.grid.time(m);
        match &self.kind {
            Kind::Tree(tree) => {
                let lvl = &tree.levels[m];
                NodeState {
                    t,
                    horizon: self.grid.horizon(),
                    brownian: lvl.brownian[i],
                    jumps: &lvl.jumps[i * k..(i + 1) * k],
                    marks: &self.jumps.marks,
                }
            }
            Kind::Paths(p) => {
                let idx = m * p.n_paths + i;
                NodeState {
                    t,
                    horizon: self.grid.horizon(),
                    brownian: p.brownian[idx],
                    jumps: &p.jumps[idx * k..(idx + 1) * k],
                    marks: &self.jumps.marks,
                }
            }
        }
    }

    /// Probability weight of each node / path at step `m`.
    pub fn weights(&self, m: usize) -> Vec<f64> {
        match &self.kind {
            Kind::Tree(t) => t.levels[m].prob.clone(),
            Kind::Paths(p) => vec![1.0 / p.n_paths as f64; p.n_paths],
        }
    }

    /// Index at step `m - 1` of the predecessor of node / path `i` at step `m`.
    pub fn parent(&self, i: usize) -> usize {
        match &self.kind {
            Kind::Tree(t) => t.parent(i),
            Kind::Paths(_) => i,
        }
    }

    /// Marginal law of a value vector at step `m`.
    pub fn law_of(&self, m: usize, values: &[f64]) -> MeasureSlice {
        match &self.kind {
            Kind::Tree(t) => MeasureSlice::weighted(values.to_vec(), t.levels[m].prob.clone()).expect("tree level has at least one node"),
            Kind::Paths(_) => MeasureSlice::uniform(values.to_vec()).expect("ensemble has at least one path"),
        }
    }

    /// `E[next | F_m]` at every node / path of step `m`.
    pub fn conditional_expectation(&self, m: usize, next: &[f64], degree: usize) -> Result<Vec<f64>> {
        Ok(self.project(m, next, degree)?.mean)
    }

    /// Exact branch averages on the tree; regression on the path ensemble.
    pub fn project(&self, m: usize, next: &[f64], degree: usize) -> Result<Projection> {
        match &self.kind {
            Kind::Tree(t) => Ok(self.project_tree(t, m, next)),
            Kind::Paths(p) => self.project_paths(p, m, next, degree),
        }
    }

    /// Regression projection that lowers the polynomial degree until the
    /// normal equations are well posed (early steps carry few distinct
    /// states). Identical to [`project`](Self::project) on trees.
    pub fn project_adaptive(&self, m: usize, next: &[f64], degree: usize) -> Result<Projection> {
        let mut d = degree;
        loop {
            match self.project(m, next, d) {
                Err(Error::SingularRegression { .. }) if d > 0 => d -= 1,
                other => return other,
            }
        }
    }

    fn project_tree(&self, tree: &Tree, m: usize, next: &[f64]) -> Projection {
        let n = tree.levels[m].prob.len();
        let k = self.jumps.len();
        let dt = self.grid.dt();
        let mut mean = vec![0.0; n];
        let mut z = vec![0.0; n];
        let mut u = vec![0.0; n * k];
        for i in 0..n {
            let kids = &next[tree.children(i)];
            let (mi, zi, ui) = project_branches(&tree.branches, &self.jumps, dt, kids);
            mean[i] = mi;
            z[i] = zi;
            u[i * k..(i + 1) * k].copy_from_slice(&ui);
        }
        Projection {
            mean,
            z,
            u,
            marks: k,
            degree: 0,
        }
    }

    fn project_paths(&self, p: &PathEnsemble, m: usize, next: &[f64], degree: usize) -> Result<Projection> {
        let n = p.n_paths;
        let k = self.jumps.len();
        let dt = self.grid.dt();
        let exps = monomials(1 + k, degree);
        let scale = self.grid.horizon().sqrt();
        let mut design = DMatrix::<f64>::zeros(n, exps.len());
        for j in 0..n {
            let st = self.state(m, j);
            let mut vars = Vec::with_capacity(1 + k);
            vars.push(st.brownian / scale);
            vars.extend(st.jumps.iter().map(|&c| c as f64));
            for (c, e) in exps.iter().enumerate() {
                design[(j, c)] = e.iter().zip(&vars).map(|(&pw, v)| v.powi(pw as i32)).product();
            }
        }

        // targets: mean, Z, then one per mark
        let mut targets = DMatrix::<f64>::zeros(n, 2 + k);
        for j in 0..n {
            let v = next[j];
            targets[(j, 0)] = v;
            targets[(j, 1)] = v * p.increment(m, j) / dt;
            let jm = p.jump_mark(m, j);
            for kk in 0..k {
                let l = self.jumps.intensities[kk] * dt;
                targets[(j, 2 + kk)] = if l > 0.0 {
                    v * (f64::from(u8::from(jm == Some(kk))) - l) / l
                } else {
                    0.0
                };
            }
        }
        let coef = least_squares(&design, &targets).ok_or(Error::SingularRegression { step: m, degree })?;
        let fitted = &design * coef;
        let mut u = vec![0.0; n * k];
        for j in 0..n {
            for kk in 0..k {
                u[j * k + kk] = fitted[(j, 2 + kk)];
            }
        }
        Ok(Projection {
            mean: fitted.column(0).iter().copied().collect(),
            z: fitted.column(1).iter().copied().collect(),
            u,
            marks: k,
            degree,
        })
    }
}

/// Conditional mean, `Z` and `U` of one node from its children's values.
pub fn project_branches(branches: &[Branch], jumps: &JumpSpec, dt: f64, kids: &[f64]) -> (f64, f64, Vec<f64>) {
    let k = jumps.len();
    let mut mean = 0.0;
    let mut z = 0.0;
    let mut u = vec![0.0; k];
    for (br, &v) in branches.iter().zip(kids) {
        mean += br.prob * v;
        z += br.prob * v * br.db;
        for (kk, uk) in u.iter_mut().enumerate() {
            let l = jumps.intensities[kk] * dt;
            let ind = f64::from(u8::from(br.mark == Some(kk)));
            *uk += br.prob * v * (ind - l);
        }
    }
    z /= dt;
    for (kk, uk) in u.iter_mut().enumerate() {
        let l = jumps.intensities[kk] * dt;
        *uk = if l > 0.0 { *uk / l } else { 0.0 };
    }
    (mean, z, u)
}

/// Exponent vectors of all monomials in `vars` variables with total degree
/// at most `degree`, graded order.
pub fn monomials(vars: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for total in 0..=degree {
        let mut cur = vec![0u32; vars];
        fill(&mut out, &mut cur, 0, total as u32);
    }
    out
}

fn fill(out: &mut Vec<Vec<u32>>, cur: &mut [u32], pos: usize, left: u32) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.to_vec());
        cur[pos] = 0;
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e;
        fill(out, cur, pos + 1, left - e);
    }
    cur[pos] = 0;
}

/// Column-equilibrated normal equations solved by Cholesky. Returns `None`
/// when the scaled Gram matrix has a pivot below `1e-10` (rank deficiency).
fn least_squares(design: &DMatrix<f64>, targets: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let gram = design.transpose() * design;
    let cols = gram.nrows();
    let mut scale = DVector::<f64>::zeros(cols);
    for c in 0..cols {
        let d = gram[(c, c)];
        if !(d > 0.0) {
            return None;
        }
        scale[c] = 1.0 / d.sqrt();
    }
    let scaled = DMatrix::from_fn(cols, cols, |r, c| gram[(r, c)] * scale[r] * scale[c]);
    let chol = scaled.clone().cholesky()?;
    if chol.l_dirty().diagonal().iter().any(|&d| d * d < 1e-10) {
        return None;
    }
    let mut rhs = design.transpose() * targets;
    for r in 0..cols {
        for c in 0..rhs.ncols() {
            rhs[(r, c)] *= scale[r];
        }
    }
    let mut sol = chol.solve(&rhs);
    for r in 0..cols {
        for c in 0..sol.ncols() {
            sol[(r, c)] *= scale[r];
        }
    }
    Some(sol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(t: f64, m: usize) -> TimeGrid {
        TimeGrid::new(t, m).unwrap()
    }

    #[test]
    fn single_step_binomial_tree() {
        let lat = build_tree(grid(1.0, 1), JumpSpec::none()).unwrap();
        let tree = lat.tree().unwrap();
        assert_eq!(tree.branching(), 2);
        assert_eq!(lat.len(1), 2);
        assert_eq!(tree.probabilities(1), &[0.5, 0.5]);
        assert_eq!(lat.state(1, 0).brownian, 1.0);
        assert_eq!(lat.state(1, 1).brownian, -1.0);
    }

    #[test]
    fn one_mark_branch_probabilities() {
        let jumps = JumpSpec::new(vec![1.0], vec![0.2]).unwrap();
        let lat = build_tree(grid(1.0, 1), jumps).unwrap();
        let p = lat.tree().unwrap().probabilities(1);
        let expected = [0.4, 0.4, 0.1, 0.1];
        assert_eq!(p.len(), 4);
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn intensity_at_boundary_is_rejected() {
        let jumps = JumpSpec::new(vec![1.0], vec![2.0]).unwrap();
        let err = build_tree(grid(1.0, 2), jumps.clone()).unwrap_err();
        assert!(matches!(err, Error::InvalidIntensity { .. }));
        let err = sample_paths(grid(1.0, 2), jumps, 10, 1).unwrap_err();
        assert!(matches!(err, Error::InvalidIntensity { .. }));
    }

    #[test]
    fn zero_steps_is_invalid() {
        assert!(matches!(TimeGrid::new(1.0, 0), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn grid_spacing_recovers_horizon() {
        for (t, m) in [(1.0, 3), (0.7, 64), (2.5, 7)] {
            let g = grid(t, m);
            assert!((g.dt() * m as f64 - t).abs() <= f64::EPSILON * t);
            assert_eq!(g.time(m), t);
        }
    }

    #[test]
    fn tree_probabilities_sum_to_one() {
        let jumps = JumpSpec::new(vec![0.5, -1.0], vec![0.3, 0.6]).unwrap();
        let lat = build_tree(grid(1.0, 3), jumps).unwrap();
        for m in 0..=3 {
            let s: f64 = lat.weights(m).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(lat.weights(m).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn tree_conditional_expectation_of_constant_and_increment() {
        let jumps = JumpSpec::new(vec![1.0], vec![0.2]).unwrap();
        let lat = build_tree(grid(1.0, 2), jumps).unwrap();
        let ones = vec![3.5; lat.len(2)];
        assert!(lat
            .conditional_expectation(1, &ones, 0)
            .unwrap()
            .iter()
            .all(|v| (v - 3.5).abs() < 1e-14));
        let tree = lat.tree().unwrap();
        let inc: Vec<f64> = (0..lat.len(2))
            .map(|j| lat.state(2, j).brownian - lat.state(1, tree.parent(j)).brownian)
            .collect();
        assert!(lat.conditional_expectation(1, &inc, 0).unwrap().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn tree_jump_indicator_expectation() {
        let jumps = JumpSpec::new(vec![1.0], vec![0.2]).unwrap();
        let lat = build_tree(grid(1.0, 1), jumps).unwrap();
        let ind: Vec<f64> = (0..lat.len(1)).map(|j| lat.state(1, j).jumps[0] as f64).collect();
        let e = lat.conditional_expectation(0, &ind, 0).unwrap();
        assert!((e[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn compensated_jump_has_zero_conditional_mean() {
        let jumps = JumpSpec::new(vec![1.0, 2.0], vec![0.4, 0.9]).unwrap();
        let lat = build_tree(grid(1.0, 3), jumps.clone()).unwrap();
        let dt = lat.grid().dt();
        let tree = lat.tree().unwrap();
        for m in 0..3 {
            for k in 0..2 {
                let comp: Vec<f64> = (0..lat.len(m + 1))
                    .map(|j| {
                        let now = lat.state(m + 1, j).jumps[k] as f64;
                        let before = lat.state(m, tree.parent(j)).jumps[k] as f64;
                        now - before - jumps.intensities[k] * dt
                    })
                    .collect();
                let e = lat.conditional_expectation(m, &comp, 0).unwrap();
                assert!(e.iter().all(|v| v.abs() <= 1e-12));
            }
        }
    }

    #[test]
    fn paths_are_reproducible_and_chunk_free() {
        let jumps = JumpSpec::new(vec![1.0], vec![0.5]).unwrap();
        let a = sample_paths(grid(1.0, 4), jumps.clone(), 300, 42).unwrap();
        let b = sample_paths(grid(1.0, 4), jumps.clone(), 300, 42).unwrap();
        let pa = a.paths().unwrap();
        let pb = b.paths().unwrap();
        assert_eq!(pa.db, pb.db);
        assert_eq!(pa.mark, pb.mark);
        // a path's stream is independent of the ensemble size
        let c = sample_paths(grid(1.0, 4), jumps, 50, 42).unwrap();
        let pc = c.paths().unwrap();
        for m in 0..4 {
            for j in 0..50 {
                assert_eq!(pa.increment(m, j), pc.increment(m, j));
                assert_eq!(pa.jump_mark(m, j), pc.jump_mark(m, j));
            }
        }
    }

    #[test]
    fn no_marks_means_no_jumps() {
        let lat = sample_paths(grid(1.0, 5), JumpSpec::none(), 200, 3).unwrap();
        let p = lat.paths().unwrap();
        assert!(p.mark.iter().all(|&k| k == 0));
        assert!((0..=5).all(|m| (0..200).all(|j| lat.state(m, j).jumps.is_empty())));
    }

    #[test]
    fn brownian_increment_mean_within_clt_band() {
        let n = 100_000;
        let lat = sample_paths(grid(1.0, 1), JumpSpec::none(), n, 7).unwrap();
        let p = lat.paths().unwrap();
        let mean: f64 = (0..n).map(|j| p.increment(0, j)).sum::<f64>() / n as f64;
        let dt = 1.0;
        assert!(mean.abs() <= 4.0 * (dt / n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn jump_frequency_within_clt_band() {
        let n = 50_000;
        let jumps = JumpSpec::new(vec![1.0, -1.0], vec![0.8, 1.6]).unwrap();
        let lat = sample_paths(grid(1.0, 4), jumps.clone(), n, 9).unwrap();
        let p = lat.paths().unwrap();
        let dt = 0.25;
        for k in 0..2 {
            let q = jumps.intensities[k] * dt;
            let hits = (0..n).filter(|&j| p.jump_mark(0, j) == Some(k)).count() as f64 / n as f64;
            assert!((hits - q).abs() <= 4.0 * (q * (1.0 - q) / n as f64).sqrt());
        }
    }

    #[test]
    fn regression_is_exact_on_representable_targets() {
        let jumps = JumpSpec::new(vec![1.0], vec![0.5]).unwrap();
        let lat = sample_paths(grid(1.0, 3), jumps, 2000, 11).unwrap();
        let consts = vec![2.25; 2000];
        let e = lat.project_adaptive(1, &consts, 2).unwrap();
        assert!(e.mean.iter().all(|v| (v - 2.25).abs() < 1e-10));
        // a function of the current state is its own conditional expectation
        let own: Vec<f64> = (0..2000)
            .map(|j| {
                let s = lat.state(2, j);
                1.0 + s.brownian - 0.5 * s.jumps[0] as f64
            })
            .collect();
        let e = lat.project_adaptive(2, &own, 2).unwrap();
        for j in 0..2000 {
            let s = lat.state(2, j);
            assert!((e.mean[j] - (1.0 + s.brownian - 0.5 * s.jumps[0] as f64)).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_basis_reports_singular_regression() {
        let lat = sample_paths(grid(1.0, 2), JumpSpec::none(), 100, 5).unwrap();
        let v = vec![1.0; 100];
        // at step 0 every path shares one state: only constants are identifiable
        let err = lat.project(0, &v, 1).unwrap_err();
        assert!(matches!(err, Error::SingularRegression { step: 0, .. }));
        assert_eq!(lat.project_adaptive(0, &v, 2).unwrap().degree, 0);
    }

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(1, 2).len(), 3);
        assert_eq!(monomials(2, 2).len(), 6);
        assert_eq!(monomials(3, 0), vec![vec![0, 0, 0]]);
    }
}
