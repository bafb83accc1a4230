//! Exact solve of a small interacting system on the product tree of the
//! particles' individual trees, where every conditional expectation is
//! taken on the joint filtration.

use serde::Serialize;

use crate::coefficients::CoefficientSet;
use crate::drbsde::{clamp_implicit, implicit_continuation, SolverOptions};
use crate::error::{Error, Result};
use crate::game::{brute_force_game, verify_saddle, GameResult, GameTree, ObstacleField, SaddleReport, StoppingRule, HIT_TOL};
use crate::lattice::{build_tree, project_branches, JumpSpec, NodeState, NoiseLattice, TimeGrid};
use crate::measure::MeasureSlice;
use crate::particles::TerminalFn;

/// Largest number of joint nodes at maturity.
pub const MAX_JOINT_NODES: usize = 1 << 18;

#[derive(Debug, Clone)]
pub struct JointTreeSolution {
    pub n: usize,
    /// Individual tree shared by all particles.
    pub lattice: NoiseLattice,
    /// `[m][J]`: individual node of each particle at joint node `J`.
    pub index: Vec<Vec<Vec<usize>>>,
    /// `[k][m][J]`.
    pub y: Vec<Vec<Vec<f64>>>,
    pub cont: Vec<Vec<Vec<f64>>>,
    pub dk1: Vec<Vec<Vec<f64>>>,
    pub dk2: Vec<Vec<Vec<f64>>>,
    pub h1: Vec<Vec<Vec<f64>>>,
    pub h2: Vec<Vec<Vec<f64>>>,
    /// Empirical measure of the particles' values, `[m][J]`.
    pub law: Vec<Vec<MeasureSlice>>,
}

impl JointTreeSolution {
    pub fn root(&self, k: usize) -> f64 {
        self.y[k][0][0]
    }

    pub fn roots(&self) -> Vec<f64> {
        (0..self.n).map(|k| self.root(k)).collect()
    }

    pub fn steps(&self) -> usize {
        self.lattice.steps()
    }

    /// Branching of the joint tree.
    pub fn branching(&self) -> usize {
        self.lattice.tree().expect("tree").branching().pow(self.n as u32)
    }

    pub fn state(&self, k: usize, m: usize, j: usize) -> NodeState<'_> {
        self.lattice.state(m, self.index[m][j][k])
    }

    /// Largest Skorokhod / singularity / sandwich residual over particles.
    pub fn max_invariant_residual(&self) -> f64 {
        let mut r: f64 = 0.0;
        for k in 0..self.n {
            for m in 0..=self.steps() {
                for (j, &y) in self.y[k][m].iter().enumerate() {
                    r = r.max((self.h1[k][m][j] - y).max(y - self.h2[k][m][j]));
                    if m < self.steps() {
                        let (a, b) = (self.dk1[k][m][j], self.dk2[k][m][j]);
                        r = r.max((a * (y - self.h1[k][m][j])).abs());
                        r = r.max((b * (self.h2[k][m][j] - y)).abs());
                        r = r.max(a.min(b));
                    }
                }
            }
        }
        r
    }
}

/// Coupled backward induction for `n <= 2` particles: at every joint node
/// the values of all particles solve a fixed point through their empirical
/// measure, each particle taking its own implicit step and clamp.
pub fn joint_tree_oracle(
    grid: TimeGrid,
    jumps: &JumpSpec,
    c: &CoefficientSet,
    n: usize,
    terminal: Option<&TerminalFn>,
    opts: &SolverOptions,
) -> Result<JointTreeSolution> {
    if !(1..=2).contains(&n) {
        return Err(Error::InvalidParam(format!("the joint oracle supports 1 or 2 particles, got {n}")));
    }
    let lattice = build_tree(grid, jumps.clone())?;
    let tree = lattice.tree().expect("tree");
    let b = tree.branching();
    let steps = grid.steps();
    let bn = b.pow(n as u32);
    let last = (bn as f64).powi(steps as i32);
    if last > MAX_JOINT_NODES as f64 {
        return Err(Error::TooLarge(format!(
            "joint tree has {last} nodes at maturity, cap is {MAX_JOINT_NODES}"
        )));
    }

    let mut index: Vec<Vec<Vec<usize>>> = vec![vec![vec![0; n]]];
    for m in 0..steps {
        let mut next = Vec::with_capacity(index[m].len() * bn);
        for parent in &index[m] {
            for child in 0..bn {
                let mut rest = child;
                let mut digits = vec![0; n];
                for k in (0..n).rev() {
                    digits[k] = rest % b;
                    rest /= b;
                }
                next.push(parent.iter().zip(&digits).map(|(&i, &d)| i * b + d).collect());
            }
        }
        index.push(next);
    }

    let dt = grid.dt();
    let empty = || -> Vec<Vec<Vec<f64>>> { (0..n).map(|_| vec![Vec::new(); steps + 1]).collect() };
    let (mut y, mut cont, mut dk1, mut dk2, mut h1, mut h2) = (empty(), empty(), empty(), empty(), empty(), empty());
    let mut law: Vec<Vec<MeasureSlice>> = vec![Vec::new(); steps + 1];

    let len_t = index[steps].len();
    for k in 0..n {
        y[k][steps] = (0..len_t)
            .map(|j| {
                let st = lattice.state(steps, index[steps][j][k]);
                match terminal {
                    Some(f) => f(k, &st),
                    None => c.xi(&st),
                }
            })
            .collect();
    }
    law[steps] = (0..len_t)
        .map(|j| MeasureSlice::uniform((0..n).map(|k| y[k][steps][j]).collect()).expect("n >= 1"))
        .collect();
    for k in 0..n {
        let (lo, hi): (Vec<f64>, Vec<f64>) = (0..len_t)
            .map(|j| {
                let st = lattice.state(steps, index[steps][j][k]);
                let v = y[k][steps][j];
                (c.h1(&st, v, &law[steps][j]), c.h2(&st, v, &law[steps][j]))
            })
            .unzip();
        for j in 0..len_t {
            let v = y[k][steps][j];
            if !(lo[j] <= v + 1e-12 && v <= hi[j] + 1e-12) {
                return Err(Error::InvalidTerminal {
                    particle: k,
                    value: v,
                    lower: lo[j],
                    upper: hi[j],
                });
            }
        }
        h1[k][steps] = lo;
        h2[k][steps] = hi;
    }

    for m in (0..steps).rev() {
        let t = grid.time(m);
        let len = index[m].len();
        for k in 0..n {
            for v in [
                &mut y[k][m],
                &mut cont[k][m],
                &mut dk1[k][m],
                &mut dk2[k][m],
                &mut h1[k][m],
                &mut h2[k][m],
            ] {
                *v = vec![0.0; len];
            }
        }
        law[m] = Vec::with_capacity(len);
        for j in 0..len {
            let kids: Vec<Vec<f64>> = (0..n).map(|k| y[k][m + 1][j * bn..(j + 1) * bn].to_vec()).collect();
            let proj: Vec<(f64, f64, Vec<f64>)> = (0..n)
                .map(|k| own_projection(tree.branches(), jumps, dt, &kids[k], k, n, b))
                .collect();
            let states: Vec<NodeState<'_>> = (0..n).map(|k| lattice.state(m, index[m][j][k])).collect();
            let node = node_fixed_point(c, t, dt, jumps, &proj, &states, opts)?;
            for (k, out) in node.iter().enumerate() {
                y[k][m][j] = out.y;
                cont[k][m][j] = out.cont;
                dk1[k][m][j] = out.dk1;
                dk2[k][m][j] = out.dk2;
            }
            let l = MeasureSlice::uniform(node.iter().map(|o| o.y).collect()).expect("n >= 1");
            for k in 0..n {
                h1[k][m][j] = c.h1(&states[k], y[k][m][j], &l);
                h2[k][m][j] = c.h2(&states[k], y[k][m][j], &l);
            }
            law[m].push(l);
        }
    }

    Ok(JointTreeSolution {
        n,
        lattice,
        index,
        y,
        cont,
        dk1,
        dk2,
        h1,
        h2,
        law,
    })
}

/// Averages the joint children over the other particles' branches and
/// projects on particle `k`'s own branch set.
fn own_projection(
    branches: &[crate::lattice::Branch],
    jumps: &JumpSpec,
    dt: f64,
    kids: &[f64],
    k: usize,
    n: usize,
    b: usize,
) -> (f64, f64, Vec<f64>) {
    let mut own = vec![0.0; b];
    for (c, &v) in kids.iter().enumerate() {
        let mut rest = c;
        let mut digits = vec![0; n];
        for kk in (0..n).rev() {
            digits[kk] = rest % b;
            rest /= b;
        }
        let w: f64 = (0..n).filter(|&o| o != k).map(|o| branches[digits[o]].prob).product();
        own[digits[k]] += w * v;
    }
    project_branches(branches, jumps, dt, &own)
}

struct NodeValue {
    y: f64,
    cont: f64,
    dk1: f64,
    dk2: f64,
}

fn node_fixed_point(
    c: &CoefficientSet,
    t: f64,
    dt: f64,
    jumps: &JumpSpec,
    proj: &[(f64, f64, Vec<f64>)],
    states: &[NodeState<'_>],
    opts: &SolverOptions,
) -> Result<Vec<NodeValue>> {
    let n = proj.len();
    let map = |x: &[f64]| -> Result<Vec<NodeValue>> {
        let l = MeasureSlice::uniform(x.to_vec()).expect("n >= 1");
        (0..n)
            .map(|k| {
                let (mean, z, u) = &proj[k];
                let (cont, _) = implicit_continuation(c, t, *mean, *z, u, jumps.aggregate(u), &l, dt, opts)?;
                let (y, dk1, dk2) = clamp_implicit(cont, &states[k], &l, c, opts)?;
                Ok(NodeValue { y, cont, dk1, dk2 })
            })
            .collect()
    };
    let mut change = f64::INFINITY;
    // plain iteration first, then a damped retry
    for (damping, rounds) in [(1.0, opts.max_implicit_iter), (0.5, 4 * opts.max_implicit_iter)] {
        let mut x: Vec<f64> = proj.iter().map(|p| p.0).collect();
        for _ in 0..rounds {
            let out = map(&x)?;
            change = out.iter().zip(&x).map(|(o, v)| (o.y - v).abs()).fold(0.0, f64::max);
            if change <= opts.implicit_tol {
                return Ok(out);
            }
            x = out.iter().zip(&x).map(|(o, v)| damping * o.y + (1.0 - damping) * v).collect();
        }
    }
    Err(Error::ImplicitDiverge {
        iterations: 5 * opts.max_implicit_iter,
        last_change: change,
    })
}

/// Game of particle `k` on the joint tree with the empirical measure and
/// the other particles frozen at the oracle solution.
pub struct JointParticleGame<'a> {
    pub sol: &'a JointTreeSolution,
    pub c: &'a CoefficientSet,
    pub k: usize,
    pub opts: SolverOptions,
}

impl GameTree for JointParticleGame<'_> {
    fn steps(&self) -> usize {
        self.sol.steps()
    }

    fn branching(&self) -> usize {
        self.sol.branching()
    }

    fn len(&self, m: usize) -> usize {
        self.sol.index[m].len()
    }

    fn step(&self, m: usize, j: usize, kids: &[f64]) -> Result<f64> {
        let tree = self.sol.lattice.tree().expect("tree");
        let jumps = self.sol.lattice.jumps();
        let dt = self.sol.lattice.grid().dt();
        let (mean, z, u) = own_projection(tree.branches(), jumps, dt, kids, self.k, self.sol.n, tree.branching());
        let t = self.sol.lattice.grid().time(m);
        let (x, _) = implicit_continuation(self.c, t, mean, z, &u, jumps.aggregate(&u), &self.sol.law[m][j], dt, &self.opts)?;
        Ok(x)
    }

    fn lower(&self, m: usize, j: usize, y: f64) -> f64 {
        self.c.h1(&self.sol.state(self.k, m, j), y, &self.sol.law[m][j])
    }

    fn upper(&self, m: usize, j: usize, y: f64) -> f64 {
        self.c.h2(&self.sol.state(self.k, m, j), y, &self.sol.law[m][j])
    }

    fn terminal(&self, j: usize) -> f64 {
        self.sol.y[self.k][self.sol.steps()][j]
    }
}

/// Exhaustive game values of every particle on the joint filtration.
pub fn joint_game_values(sol: &JointTreeSolution, c: &CoefficientSet, opts: &SolverOptions) -> Result<Vec<GameResult>> {
    (0..sol.n)
        .map(|k| brute_force_game(&JointParticleGame { sol, c, k, opts: *opts }))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct JointSaddle {
    pub particle: usize,
    pub tau: StoppingRule,
    pub sigma: StoppingRule,
    pub report: SaddleReport,
}

/// Hitting-time saddles of every particle, verified against joint-filtration
/// deviations (exhaustive when the rule space is small).
pub fn joint_saddles(
    sol: &JointTreeSolution,
    c: &CoefficientSet,
    opts: &SolverOptions,
    samples: usize,
    seed: u64,
) -> Result<Vec<JointSaddle>> {
    (0..sol.n)
        .map(|k| {
            let game = JointParticleGame { sol, c, k, opts: *opts };
            let steps = sol.steps();
            let len = |m: usize| sol.index[m].len();
            let tau = StoppingRule::from_fn(steps, len, |m, j| (sol.y[k][m][j] - sol.h1[k][m][j]).abs() <= HIT_TOL);
            let sigma = StoppingRule::from_fn(steps, len, |m, j| (sol.y[k][m][j] - sol.h2[k][m][j]).abs() <= HIT_TOL);
            let obs = ObstacleField {
                lower: sol.h1[k].clone(),
                upper: sol.h2[k].clone(),
            };
            let report = verify_saddle(&game, &obs, &tau, &sigma, samples, seed)?;
            Ok(JointSaddle {
                particle: k,
                tau,
                sigma,
                report,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drbsde::solve_frozen;
    use crate::measure::MeasureFlow;
    use crate::scenarios::{binding_lower, chaos_meanfield, trivial, BindingLowerParams, ChaosParams, TrivialParams};
    use std::sync::Arc;

    fn swap(sol: &JointTreeSolution, m: usize, j: usize) -> usize {
        let want = [sol.index[m][j][1], sol.index[m][j][0]];
        sol.index[m].iter().position(|v| v[..] == want).unwrap()
    }

    #[test]
    fn swapping_particles_swaps_values() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let jumps = JumpSpec::new(vec![0.5], vec![0.5]).unwrap();
        let c = chaos_meanfield(&ChaosParams::default()).unwrap();
        let sol = joint_tree_oracle(grid, &jumps, &c, 2, None, &SolverOptions::default()).unwrap();
        for m in 0..=2 {
            for j in 0..sol.index[m].len() {
                let s = swap(&sol, m, j);
                assert!((sol.y[0][m][j] - sol.y[1][m][s]).abs() < 1e-13);
            }
        }
        assert!((sol.root(0) - sol.root(1)).abs() < 1e-13);
    }

    #[test]
    fn identical_constant_terminals_give_identical_values() {
        let grid = TimeGrid::new(1.0, 3).unwrap();
        let c = chaos_meanfield(&ChaosParams::default()).unwrap();
        let xi: TerminalFn = Arc::new(|_, _| 0.7);
        let sol = joint_tree_oracle(grid, &JumpSpec::none(), &c, 2, Some(&xi), &SolverOptions::default()).unwrap();
        for m in 0..=3 {
            assert_eq!(sol.y[0][m], sol.y[1][m]);
        }
    }

    #[test]
    fn law_free_system_matches_single_solves() {
        let grid = TimeGrid::new(1.0, 3).unwrap();
        let jumps = JumpSpec::new(vec![1.0], vec![0.3]).unwrap();
        let c = trivial(&TrivialParams {
            scale: 1.0,
            jump_loading: 0.4,
        });
        let sol = joint_tree_oracle(grid, &jumps, &c, 2, None, &SolverOptions::default()).unwrap();
        let single = solve_frozen(&sol.lattice, &c, &MeasureFlow::dirac(3, 0.0), &SolverOptions::default()).unwrap();
        for k in 0..2 {
            for m in 0..=3 {
                for j in 0..sol.index[m].len() {
                    let i = sol.index[m][j][k];
                    assert!((sol.y[k][m][j] - single.y[m][i]).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn game_values_equal_system_values() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let c = binding_lower(&BindingLowerParams {
            mean_coupling: 0.2,
            level: 0.1,
            ..Default::default()
        })
        .unwrap();
        let opts = SolverOptions::default();
        let sol = joint_tree_oracle(grid, &JumpSpec::none(), &c, 2, None, &opts).unwrap();
        assert!(sol.max_invariant_residual() < 1e-12);
        let games = joint_game_values(&sol, &c, &opts).unwrap();
        for (k, g) in games.iter().enumerate() {
            assert!((g.upper_root() - sol.root(k)).abs() < 1e-10);
            assert!((g.lower_root() - sol.root(k)).abs() < 1e-10);
        }
        for s in joint_saddles(&sol, &c, &opts, 0, 0).unwrap() {
            assert!(s.report.exhaustive);
            assert!(s.report.holds(1e-10), "{:?}", s.report);
        }
    }

    #[test]
    fn single_particle_is_self_coupled() {
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let c = binding_lower(&BindingLowerParams {
            mean_coupling: 0.1,
            ..Default::default()
        })
        .unwrap();
        let sol = joint_tree_oracle(grid, &JumpSpec::none(), &c, 1, None, &SolverOptions::default()).unwrap();
        assert!((sol.root(0) - 5.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn size_limits() {
        let c = trivial(&TrivialParams::default());
        let opts = SolverOptions::default();
        assert!(joint_tree_oracle(TimeGrid::new(1.0, 2).unwrap(), &JumpSpec::none(), &c, 3, None, &opts).is_err());
        let jumps = JumpSpec::new(vec![1.0, 2.0], vec![0.1, 0.1]).unwrap();
        assert!(matches!(
            joint_tree_oracle(TimeGrid::new(1.0, 4).unwrap(), &jumps, &c, 2, None, &opts),
            Err(Error::TooLarge(_))
        ));
    }
}
