//! Zero-sum Dynkin games on small trees: exhaustive evaluation of stopping
//! rule pairs, saddle extraction from a DRBSDE solution and deviation
//! checks.
//!
//! The maximizer chooses `τ` and receives the lower obstacle when it stops
//! first (ties included); the minimizer chooses `σ` and pays the upper
//! obstacle when it stops strictly first; `ξ` is paid when neither stops
//! before maturity.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::CoefficientSet;
use crate::drbsde::{f_expectation, implicit_continuation, DrbsdeSolution, LawView, SolverOptions, StopRegion};
use crate::error::{Error, Result};
use crate::lattice::{project_branches, NoiseLattice};

/// Largest number of strategies per player at the root.
pub const MAX_STRATEGIES: usize = 2000;
/// Rule count up to which saddle verification enumerates every deviation.
pub const EXHAUSTIVE_RULES: usize = 1 << 16;
/// Tolerance for detecting `Y = h`.
pub const HIT_TOL: f64 = 1e-9;

/// A full non-recombining tree on which a game can be played: node `i` at
/// step `m` has children `i*B..(i+1)*B` at step `m + 1`.
pub trait GameTree: Sync {
    fn steps(&self) -> usize;
    fn branching(&self) -> usize;
    fn len(&self, m: usize) -> usize;
    /// Unreflected one-step f-expectation from the children's values.
    fn step(&self, m: usize, i: usize, kids: &[f64]) -> Result<f64>;
    fn lower(&self, m: usize, i: usize, y: f64) -> f64;
    fn upper(&self, m: usize, i: usize, y: f64) -> f64;
    fn terminal(&self, i: usize) -> f64;
}

/// Game on a tree lattice with the law frozen.
pub struct FrozenGame<'a> {
    pub lattice: &'a NoiseLattice,
    pub c: &'a CoefficientSet,
    pub law: &'a dyn LawView,
    pub opts: SolverOptions,
    branching: usize,
}

impl<'a> FrozenGame<'a> {
    pub fn new(lattice: &'a NoiseLattice, c: &'a CoefficientSet, law: &'a dyn LawView, opts: SolverOptions) -> Result<Self> {
        let branching = lattice.require_tree("brute-force game evaluation")?.branching();
        Ok(Self {
            lattice,
            c,
            law,
            opts,
            branching,
        })
    }
}

impl GameTree for FrozenGame<'_> {
    fn steps(&self) -> usize {
        self.lattice.steps()
    }

    fn branching(&self) -> usize {
        self.branching
    }

    fn len(&self, m: usize) -> usize {
        self.lattice.len(m)
    }

    fn step(&self, m: usize, i: usize, kids: &[f64]) -> Result<f64> {
        let tree = self.lattice.tree().expect("checked at construction");
        let jumps = self.lattice.jumps();
        let dt = self.lattice.grid().dt();
        let (mean, z, u) = project_branches(tree.branches(), jumps, dt, kids);
        let t = self.lattice.grid().time(m);
        let (x, _) = implicit_continuation(self.c, t, mean, z, &u, jumps.aggregate(&u), self.law.law(m, i), dt, &self.opts)?;
        Ok(x)
    }

    fn lower(&self, m: usize, i: usize, y: f64) -> f64 {
        self.c.h1(&self.lattice.state(m, i), y, self.law.law(m, i))
    }

    fn upper(&self, m: usize, i: usize, y: f64) -> f64 {
        self.c.h2(&self.lattice.state(m, i), y, self.law.law(m, i))
    }

    fn terminal(&self, i: usize) -> f64 {
        self.c.xi(&self.lattice.state(self.lattice.steps(), i))
    }
}

/// Stop/continue decision per node; the last step always stops.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoppingRule {
    pub stop: Vec<Vec<bool>>,
}

impl StoppingRule {
    pub fn from_fn(steps: usize, len: impl Fn(usize) -> usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let stop = (0..=steps).map(|m| (0..len(m)).map(|i| m == steps || f(m, i)).collect()).collect();
        Self { stop }
    }

    /// Stops only at maturity.
    pub fn at_maturity(steps: usize, len: impl Fn(usize) -> usize) -> Self {
        Self::from_fn(steps, len, |_, _| false)
    }

    pub fn steps(&self) -> usize {
        self.stop.len() - 1
    }

    pub fn stops_at(&self, m: usize, i: usize) -> bool {
        self.stop[m][i]
    }

    /// Stopping step along the path through node `i` at step `m`, given the
    /// parent map; `None` if the rule has not stopped by step `m`.
    pub fn stopped_by(&self, m: usize, i: usize, parent: impl Fn(usize) -> usize) -> Option<usize> {
        let mut path = vec![i];
        for _ in 0..m {
            let last = *path.last().unwrap();
            path.push(parent(last));
        }
        path.reverse();
        (0..=m).find(|&k| self.stop[k][path[k]])
    }

    /// `m, node` rows of the stopping nodes that can actually be reached.
    pub fn write_csv(&self, branching: usize, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "m,node")?;
        let mut live = vec![0usize];
        for (m, row) in self.stop.iter().enumerate() {
            let mut next = Vec::new();
            for &i in &live {
                if row[i] {
                    writeln!(out, "{m},{i}")?;
                } else {
                    next.extend(i * branching..(i + 1) * branching);
                }
            }
            live = next;
        }
        Ok(())
    }
}

/// Obstacle values per node.
#[derive(Debug, Clone)]
pub struct ObstacleField {
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
}

impl ObstacleField {
    pub fn from_solution(sol: &DrbsdeSolution) -> Self {
        Self {
            lower: sol.h1.clone(),
            upper: sol.h2.clone(),
        }
    }

    /// Obstacles of `game` evaluated at a reference process.
    pub fn at<G: GameTree + ?Sized>(game: &G, y: &[Vec<f64>]) -> Self {
        let steps = game.steps();
        let mut lower = Vec::with_capacity(steps + 1);
        let mut upper = Vec::with_capacity(steps + 1);
        for (m, row) in y.iter().enumerate() {
            lower.push(row.iter().enumerate().map(|(i, &v)| game.lower(m, i, v)).collect());
            upper.push(row.iter().enumerate().map(|(i, &v)| game.upper(m, i, v)).collect());
        }
        Self { lower, upper }
    }
}

pub(crate) fn stop_region(tau: &StoppingRule, sigma: &StoppingRule, obs: &ObstacleField, xi: &[f64]) -> StopRegion {
    let steps = tau.steps();
    let mut stop = Vec::with_capacity(steps + 1);
    let mut payoff = Vec::with_capacity(steps + 1);
    for m in 0..=steps {
        let n = tau.stop[m].len();
        let mut s = vec![false; n];
        let mut p = vec![0.0; n];
        for i in 0..n {
            if m == steps {
                s[i] = true;
                p[i] = xi[i];
            } else if tau.stop[m][i] {
                s[i] = true;
                p[i] = obs.lower[m][i];
            } else if sigma.stop[m][i] {
                s[i] = true;
                p[i] = obs.upper[m][i];
            }
        }
        stop.push(s);
        payoff.push(p);
    }
    StopRegion { stop, payoff }
}

/// Root f-expectation of the stopped payoff of `(τ, σ)` on a lattice.
pub fn payoff(
    tau: &StoppingRule,
    sigma: &StoppingRule,
    c: &CoefficientSet,
    law: &dyn LawView,
    lattice: &NoiseLattice,
    obs: &ObstacleField,
    opts: &SolverOptions,
) -> Result<f64> {
    lattice.require_tree("payoff evaluation")?;
    let steps = lattice.steps();
    let xi: Vec<f64> = (0..lattice.len(steps)).map(|i| c.xi(&lattice.state(steps, i))).collect();
    let region = stop_region(tau, sigma, obs, &xi);
    Ok(f_expectation(lattice, c, law, &region, opts)?.root())
}

/// Root value of `(τ, σ)` on any game tree.
pub fn evaluate_pair<G: GameTree + ?Sized>(game: &G, obs: &ObstacleField, tau: &StoppingRule, sigma: &StoppingRule) -> Result<f64> {
    let steps = game.steps();
    let b = game.branching();
    let mut next: Vec<f64> = (0..game.len(steps)).map(|i| game.terminal(i)).collect();
    for m in (0..steps).rev() {
        let mut cur = Vec::with_capacity(game.len(m));
        for i in 0..game.len(m) {
            let v = if tau.stop[m][i] {
                obs.lower[m][i]
            } else if sigma.stop[m][i] {
                obs.upper[m][i]
            } else {
                game.step(m, i, &next[i * b..(i + 1) * b])?
            };
            cur.push(v);
        }
        next = cur;
    }
    Ok(next[0])
}

#[derive(Debug, Clone, Serialize)]
pub struct GameResult {
    /// `min_σ max_τ` per node.
    pub upper: Vec<Vec<f64>>,
    /// `max_τ min_σ` per node.
    pub lower: Vec<Vec<f64>>,
    pub tau_star: Option<StoppingRule>,
    pub sigma_star: Option<StoppingRule>,
    /// Pure strategies per player at the root.
    pub root_strategies: usize,
    /// Outer iterations needed to settle solution-dependent obstacles.
    pub iterations: usize,
    pub convention: &'static str,
}

impl GameResult {
    pub fn upper_root(&self) -> f64 {
        self.upper[0][0]
    }

    pub fn lower_root(&self) -> f64 {
        self.lower[0][0]
    }
}

pub const CONVENTION: &str =
    "tau (maximizer) stopping first or tied before T receives h1; sigma (minimizer) stopping strictly first pays h2; xi at T";

/// Strategy counts per height: `S(0) = 1`, `S(r) = 1 + S(r-1)^B`.
pub fn strategy_counts(steps: usize, branching: usize) -> Result<Vec<usize>> {
    let mut s = vec![1usize];
    for r in 1..=steps {
        let prev = s[r - 1] as f64;
        let next = 1.0 + prev.powi(branching as i32);
        if next > MAX_STRATEGIES as f64 {
            return Err(Error::TooLarge(format!(
                "{next:e} pure stopping rules per player at height {r} (branching {branching}); limit {MAX_STRATEGIES}"
            )));
        }
        s.push(next as usize);
    }
    Ok(s)
}

/// Payoff matrices for all rule pairs, level by level, with fixed obstacles.
/// Returns per-node `(upper, lower)` values and the root matrix.
type Enumerated = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>);

fn enumerate<G: GameTree + ?Sized>(game: &G, obs: &ObstacleField, counts: &[usize]) -> Result<Enumerated> {
    let steps = game.steps();
    let b = game.branching();
    let mut upper = vec![Vec::new(); steps + 1];
    let mut lower = vec![Vec::new(); steps + 1];
    let xi: Vec<f64> = (0..game.len(steps)).map(|i| game.terminal(i)).collect();
    upper[steps] = xi.clone();
    lower[steps] = xi.clone();
    let mut child_mats: Vec<Vec<f64>> = xi.into_iter().map(|v| vec![v]).collect();

    for m in (0..steps).rev() {
        let sc = counts[steps - m - 1];
        let s = counts[steps - m];
        let mats: Vec<Vec<f64>> = (0..game.len(m))
            .map(|i| {
                let kids = &child_mats[i * b..(i + 1) * b];
                let (lo, hi) = (obs.lower[m][i], obs.upper[m][i]);
                let mut mat = vec![0.0; s * s];
                mat.par_chunks_mut(s).enumerate().try_for_each(|(a, row)| -> Result<()> {
                    let mut ka = vec![0usize; b];
                    let mut kb = vec![0usize; b];
                    let mut vals = vec![0.0; b];
                    decode(a, sc, &mut ka);
                    for (bb, cell) in row.iter_mut().enumerate() {
                        *cell = if a == 0 {
                            lo
                        } else if bb == 0 {
                            hi
                        } else {
                            decode(bb, sc, &mut kb);
                            for c in 0..b {
                                vals[c] = kids[c][ka[c] * sc + kb[c]];
                            }
                            game.step(m, i, &vals)?
                        };
                    }
                    Ok(())
                })?;
                Ok(mat)
            })
            .collect::<Result<_>>()?;
        upper[m] = mats.iter().map(|mat| minimax(mat, s)).collect();
        lower[m] = mats.iter().map(|mat| maximin(mat, s)).collect();
        child_mats = mats;
    }
    Ok((upper, lower, child_mats.pop().expect("root")))
}

/// Child strategy indices of a continuing strategy `a ≥ 1`.
fn decode(a: usize, base: usize, out: &mut [usize]) {
    if a == 0 {
        return;
    }
    let mut r = a - 1;
    for o in out.iter_mut() {
        *o = r % base;
        r /= base;
    }
}

fn minimax(mat: &[f64], s: usize) -> f64 {
    (0..s)
        .map(|b| (0..s).map(|a| mat[a * s + b]).fold(f64::NEG_INFINITY, f64::max))
        .fold(f64::INFINITY, f64::min)
}

fn maximin(mat: &[f64], s: usize) -> f64 {
    mat.chunks(s)
        .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
        .fold(f64::NEG_INFINITY, f64::max)
}

fn argmaximin(mat: &[f64], s: usize) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (a, row) in mat.chunks(s).enumerate() {
        let v = row.iter().copied().fold(f64::INFINITY, f64::min);
        if v > best.0 {
            best = (v, a);
        }
    }
    best.1
}

fn argminimax(mat: &[f64], s: usize) -> usize {
    let mut best = (f64::INFINITY, 0);
    for b in 0..s {
        let v = (0..s).map(|a| mat[a * s + b]).fold(f64::NEG_INFINITY, f64::max);
        if v < best.0 {
            best = (v, b);
        }
    }
    best.1
}

/// Expands a root strategy index into a stopping rule.
fn expand<G: GameTree + ?Sized>(game: &G, counts: &[usize], root: usize) -> StoppingRule {
    let steps = game.steps();
    let b = game.branching();
    let mut stop: Vec<Vec<bool>> = (0..=steps).map(|m| vec![m == steps; game.len(m)]).collect();
    let mut live = vec![(0usize, root)];
    for (m, row) in stop.iter_mut().enumerate().take(steps) {
        let sc = counts[steps - m - 1];
        let mut next = Vec::new();
        let mut kids = vec![0usize; b];
        for &(i, a) in &live {
            if a == 0 {
                row[i] = true;
            } else {
                decode(a, sc, &mut kids);
                next.extend(kids.iter().enumerate().map(|(c, &k)| (i * b + c, k)));
            }
        }
        live = next;
    }
    StoppingRule { stop }
}

/// Exhaustive upper and lower values on a game tree.
///
/// Obstacles that depend on the value are handled by an outer fixed point:
/// each player's value is recomputed with obstacles evaluated at the
/// previous iterate, separately for the upper and the lower value.
pub fn brute_force_game<G: GameTree + ?Sized>(game: &G) -> Result<GameResult> {
    let steps = game.steps();
    let counts = strategy_counts(steps, game.branching())?;
    let s = counts[steps];
    let zero: Vec<Vec<f64>> = (0..=steps).map(|m| vec![0.0; game.len(m)]).collect();

    let mut iterations = 0;
    let mut solve = |pick_upper: bool| -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut y = zero.clone();
        let mut history = Vec::new();
        for it in 1..=200 {
            let obs = ObstacleField::at(game, &y);
            let (up, lo, root) = enumerate(game, &obs, &counts)?;
            let v = if pick_upper { up } else { lo };
            let change = v
                .iter()
                .flatten()
                .zip(y.iter().flatten())
                .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
                .fold(0.0, f64::max);
            history.push(change);
            y = v;
            iterations = iterations.max(it);
            if change <= 1e-14 {
                return Ok((y, root));
            }
        }
        Err(Error::NoConvergence {
            iterations: 200,
            last: *history.last().unwrap_or(&f64::NAN),
            history,
        })
    };
    let (upper, root_up) = solve(true)?;
    let (lower, root_lo) = solve(false)?;
    let tau = expand(game, &counts, argmaximin(&root_lo, s));
    let sigma = expand(game, &counts, argminimax(&root_up, s));
    Ok(GameResult {
        upper,
        lower,
        tau_star: Some(tau),
        sigma_star: Some(sigma),
        root_strategies: s,
        iterations,
        convention: CONVENTION,
    })
}

/// Exhaustive game values on a tree lattice with the law frozen.
pub fn brute_force_values(c: &CoefficientSet, law: &dyn LawView, lattice: &NoiseLattice, opts: &SolverOptions) -> Result<GameResult> {
    let game = FrozenGame::new(lattice, c, law, *opts)?;
    brute_force_game(&game)
}

/// Hitting rules of the lower and upper obstacle along a solution.
pub fn extract_saddle(sol: &DrbsdeSolution) -> (StoppingRule, StoppingRule) {
    let steps = sol.end;
    let len = |m: usize| sol.y[m].len();
    let tau = StoppingRule::from_fn(steps, len, |m, i| (sol.y[m][i] - sol.h1[m][i]).abs() <= HIT_TOL);
    let sigma = StoppingRule::from_fn(steps, len, |m, i| (sol.y[m][i] - sol.h2[m][i]).abs() <= HIT_TOL);
    (tau, sigma)
}

#[derive(Debug, Clone, Serialize)]
pub struct SaddleReport {
    pub value: f64,
    /// `max_τ payoff(τ, σ*) - value`; nonpositive at a saddle.
    pub max_tau_gain: f64,
    /// `value - min_σ payoff(τ*, σ)`; nonpositive at a saddle.
    pub max_sigma_gain: f64,
    pub deviations: usize,
    pub exhaustive: bool,
}

impl SaddleReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.max_tau_gain <= tol && self.max_sigma_gain <= tol
    }
}

/// Number of nodes strictly before maturity.
fn decision_nodes<G: GameTree + ?Sized>(game: &G) -> usize {
    (0..game.steps()).map(|m| game.len(m)).sum()
}

fn rule_from_bits<G: GameTree + ?Sized>(game: &G, bits: u64) -> StoppingRule {
    let mut k = 0;
    let steps = game.steps();
    let mut stop = Vec::with_capacity(steps + 1);
    for m in 0..=steps {
        let row: Vec<bool> = (0..game.len(m))
            .map(|_| {
                if m == steps {
                    true
                } else {
                    let s = bits >> k & 1 == 1;
                    k += 1;
                    s
                }
            })
            .collect();
        stop.push(row);
    }
    StoppingRule { stop }
}

/// Checks the saddle inequalities against every unilateral deviation when
/// the rule space is small, otherwise against `samples` random rules and
/// all single-node flips of the candidates.
pub fn verify_saddle<G: GameTree + ?Sized>(
    game: &G,
    obs: &ObstacleField,
    tau: &StoppingRule,
    sigma: &StoppingRule,
    samples: usize,
    seed: u64,
) -> Result<SaddleReport> {
    let value = evaluate_pair(game, obs, tau, sigma)?;
    let nodes = decision_nodes(game);
    let exhaustive = nodes < 64 && (1u64 << nodes) as usize <= EXHAUSTIVE_RULES;
    let candidates: Vec<StoppingRule> = if exhaustive {
        (0..1u64 << nodes).map(|bits| rule_from_bits(game, bits)).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps = game.steps();
        let mut out = Vec::with_capacity(samples + 2 * nodes);
        for _ in 0..samples {
            let q: f64 = rng.random_range(0.0..0.6);
            out.push(StoppingRule::from_fn(steps, |m| game.len(m), |_, _| rng.random_bool(q)));
        }
        for base in [tau, sigma] {
            for m in 0..steps {
                for i in 0..game.len(m) {
                    let mut r = base.clone();
                    r.stop[m][i] = !r.stop[m][i];
                    out.push(r);
                }
            }
        }
        out
    };
    let gains: Vec<(f64, f64)> = candidates
        .par_iter()
        .map(|r| -> Result<(f64, f64)> {
            let up = evaluate_pair(game, obs, r, sigma)? - value;
            let down = value - evaluate_pair(game, obs, tau, r)?;
            Ok((up, down))
        })
        .collect::<Result<_>>()?;
    let max_tau_gain = gains.iter().map(|g| g.0).fold(f64::NEG_INFINITY, f64::max);
    let max_sigma_gain = gains.iter().map(|g| g.1).fold(f64::NEG_INFINITY, f64::max);
    Ok(SaddleReport {
        value,
        max_tau_gain,
        max_sigma_gain,
        deviations: candidates.len(),
        exhaustive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drbsde::solve_frozen;
    use crate::lattice::{build_tree, JumpSpec, TimeGrid};
    use crate::measure::MeasureFlow;
    use crate::scenarios::{binding_lower, BindingLowerParams};

    fn tree(m: usize, jumps: JumpSpec) -> NoiseLattice {
        build_tree(TimeGrid::new(1.0, m).unwrap(), jumps).unwrap()
    }

    #[test]
    fn strategy_counts_recursion() {
        assert_eq!(strategy_counts(4, 2).unwrap(), vec![1, 2, 5, 26, 677]);
        assert_eq!(strategy_counts(2, 4).unwrap(), vec![1, 2, 17]);
        assert!(matches!(strategy_counts(3, 4), Err(Error::TooLarge(_))));
        assert!(matches!(strategy_counts(5, 2), Err(Error::TooLarge(_))));
    }

    #[test]
    fn four_pairs_of_the_one_step_game() {
        let l = tree(1, JumpSpec::none());
        let c = binding_lower(&BindingLowerParams::default()).unwrap();
        let flow = MeasureFlow::dirac(1, 0.0);
        let opts = SolverOptions::default();
        let sol = solve_frozen(&l, &c, &flow, &opts).unwrap();
        let obs = ObstacleField::from_solution(&sol);
        let len = |m: usize| l.len(m);
        let root = StoppingRule::from_fn(1, len, |m, _| m == 0);
        let late = StoppingRule::at_maturity(1, len);
        let pay = |a: &StoppingRule, b: &StoppingRule| payoff(a, b, &c, &flow, &l, &obs, &opts).unwrap();
        assert_eq!(pay(&root, &root), 0.5);
        assert_eq!(pay(&root, &late), 0.5);
        assert_eq!(pay(&late, &root), 10.0);
        assert_eq!(pay(&late, &late), 0.0);
        let game = FrozenGame::new(&l, &c, &flow, opts).unwrap();
        assert_eq!(evaluate_pair(&game, &obs, &late, &root).unwrap(), 10.0);
    }

    #[test]
    fn one_step_binding_lower_values() {
        let l = tree(1, JumpSpec::none());
        let c = binding_lower(&BindingLowerParams::default()).unwrap();
        let flow = MeasureFlow::dirac(1, 0.0);
        let r = brute_force_values(&c, &flow, &l, &SolverOptions::default()).unwrap();
        assert_eq!(r.upper_root(), 0.5);
        assert_eq!(r.lower_root(), 0.5);
        let tau = r.tau_star.unwrap();
        assert!(tau.stops_at(0, 0));
    }

    #[test]
    fn inactive_obstacles_give_expected_terminal() {
        let l = tree(3, JumpSpec::none());
        let c = crate::scenarios::trivial(&Default::default());
        let flow = MeasureFlow::dirac(3, 0.0);
        let r = brute_force_values(&c, &flow, &l, &SolverOptions::default()).unwrap();
        assert!(r.upper_root().abs() < 1e-14);
        assert!(r.lower_root().abs() < 1e-14);
        let sol = solve_frozen(&l, &c, &flow, &SolverOptions::default()).unwrap();
        let (tau, sigma) = extract_saddle(&sol);
        for m in 0..3 {
            assert!(tau.stop[m].iter().chain(&sigma.stop[m]).all(|s| !s));
        }
    }

    #[test]
    fn value_matches_backward_induction_with_jumps() {
        let l = tree(2, JumpSpec::new(vec![1.0], vec![0.8]).unwrap());
        let c = CoefficientSet::new("r")
            .with_driver(|a| 0.2 - 0.3 * a.y + 0.1 * a.z + 0.2 * a.u_agg)
            .with_lower_core(|_, y, _| 0.05 + 0.2 * y)
            .with_upper_core(|_, y, _| 0.3 - 0.1 * y)
            .with_floor(|st| 0.4 * (2.0 * st.brownian + st.compound()).sin())
            .with_cap(|st| 0.4 * (2.0 * st.brownian + st.compound()).sin() + 0.1)
            .with_terminal(|st| {
                let s = 0.4 * (2.0 * st.brownian + st.compound()).sin();
                (st.brownian + st.compound()).clamp(s, s + 0.1)
            });
        let flow = MeasureFlow::dirac(2, 0.0);
        let opts = SolverOptions::default();
        let sol = solve_frozen(&l, &c, &flow, &opts).unwrap();
        let r = brute_force_values(&c, &flow, &l, &opts).unwrap();
        for m in 0..=2 {
            for i in 0..l.len(m) {
                assert!((r.upper[m][i] - sol.y[m][i]).abs() < 1e-10);
                assert!((r.lower[m][i] - sol.y[m][i]).abs() < 1e-10);
            }
        }
        let game = FrozenGame::new(&l, &c, &flow, opts).unwrap();
        let obs = ObstacleField::from_solution(&sol);
        let (tau, sigma) = extract_saddle(&sol);
        let rep = verify_saddle(&game, &obs, &tau, &sigma, 0, 0).unwrap();
        assert!(rep.exhaustive);
        assert!((rep.value - sol.root()).abs() < 1e-12);
        assert!(rep.holds(1e-10), "{rep:?}");
        let pay = payoff(&tau, &sigma, &c, &flow, &l, &obs, &opts).unwrap();
        assert!((pay - rep.value).abs() < 1e-14);
    }

    #[test]
    fn ties_pay_the_lower_obstacle() {
        let l = tree(2, JumpSpec::none());
        let c = CoefficientSet::new("tie")
            .with_lower_core(|_, _, _| -1.0)
            .with_upper_core(|_, _, _| 1.0)
            .with_floor(|_| 0.0)
            .with_cap(|_| 0.0);
        let flow = MeasureFlow::dirac(2, 0.0);
        let sol = solve_frozen(&l, &c, &flow, &SolverOptions::default()).unwrap();
        let obs = ObstacleField::from_solution(&sol);
        let len = |m: usize| l.len(m);
        let both = StoppingRule::from_fn(2, len, |m, _| m == 0);
        let game = FrozenGame::new(&l, &c, &flow, SolverOptions::default()).unwrap();
        assert_eq!(evaluate_pair(&game, &obs, &both, &both).unwrap(), -1.0);
    }

    #[test]
    fn rule_csv_lists_reachable_stops() {
        let l = tree(2, JumpSpec::none());
        let r = StoppingRule::from_fn(2, |m| l.len(m), |m, i| m == 1 && i == 0);
        let mut buf = Vec::new();
        r.write_csv(2, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "m,node\n1,0\n2,2\n2,3\n");
    }

    #[test]
    fn stopped_by_follows_the_path() {
        let r = StoppingRule {
            stop: vec![vec![false], vec![true, false], vec![true; 4]],
        };
        assert_eq!(r.stopped_by(2, 1, |i| i / 2), Some(1));
        assert_eq!(r.stopped_by(2, 3, |i| i / 2), Some(2));
        assert_eq!(r.stopped_by(0, 0, |i| i / 2), None);
    }
}
