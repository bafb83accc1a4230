//! Game data: driver, obstacle cores with their floor/cap processes,
//! terminal map and the declared Lipschitz constants, plus an empirical
//! audit of those declarations.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{NodeState, NoiseLattice};
use crate::measure::{wasserstein_p, MeasureSlice};

/// Arguments of the driver at one node.
#[derive(Debug, Clone, Copy)]
pub struct DriverInput<'a> {
    pub t: f64,
    pub y: f64,
    pub z: f64,
    /// Per-mark jump loadings `U(e_k)`.
    pub u: &'a [f64],
    /// `Σ_k λ_k U(e_k)`.
    pub u_agg: f64,
    pub law: &'a MeasureSlice,
}

pub type DriverFn = Arc<dyn Fn(&DriverInput<'_>) -> f64 + Send + Sync>;
/// `(t, y, μ) ↦ h̃(t, y, μ)`.
pub type CoreFn = Arc<dyn Fn(f64, f64, &MeasureSlice) -> f64 + Send + Sync>;
/// Deterministic function of time and node state (`S`, `S′`, `ξ`).
pub type StateFn = Arc<dyn Fn(&NodeState<'_>) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Lipschitz {
    pub c_f: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub kappa1: f64,
    pub kappa2: f64,
}

/// `(f, h̃1, h̃2, S, S′, ξ)` with `h1 = h̃1 ∧ S` and `h2 = h̃2 ∨ S′`.
#[derive(Clone)]
pub struct CoefficientSet {
    pub name: String,
    pub driver: DriverFn,
    pub lower_core: CoreFn,
    pub upper_core: CoreFn,
    pub floor: StateFn,
    pub cap: StateFn,
    pub terminal: StateFn,
    pub lipschitz: Lipschitz,
    /// Moment order used for `W_p` in couplings and flow distances.
    pub p: f64,
    /// Declares the jump-comparison condition on the driver.
    pub comparison_ok: bool,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("name", &self.name)
            .field("lipschitz", &self.lipschitz)
            .field("p", &self.p)
            .field("comparison_ok", &self.comparison_ok)
            .finish_non_exhaustive()
    }
}

/// Magnitude used for obstacles that should never bind.
pub const WIDE: f64 = 1e6;

impl CoefficientSet {
    /// Zero driver, zero terminal value and obstacles at `∓WIDE`.
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            driver: Arc::new(|_| 0.0),
            lower_core: Arc::new(|_, _, _| -WIDE),
            upper_core: Arc::new(|_, _, _| WIDE),
            floor: Arc::new(|_| 0.0),
            cap: Arc::new(|_| 0.0),
            terminal: Arc::new(|_| 0.0),
            lipschitz: Lipschitz::default(),
            p: 2.0,
            comparison_ok: true,
        }
    }

    pub fn with_driver(mut self, f: impl Fn(&DriverInput<'_>) -> f64 + Send + Sync + 'static) -> Self {
        self.driver = Arc::new(f);
        self
    }

    pub fn with_lower_core(mut self, h: impl Fn(f64, f64, &MeasureSlice) -> f64 + Send + Sync + 'static) -> Self {
        self.lower_core = Arc::new(h);
        self
    }

    pub fn with_upper_core(mut self, h: impl Fn(f64, f64, &MeasureSlice) -> f64 + Send + Sync + 'static) -> Self {
        self.upper_core = Arc::new(h);
        self
    }

    pub fn with_floor(mut self, s: impl Fn(&NodeState<'_>) -> f64 + Send + Sync + 'static) -> Self {
        self.floor = Arc::new(s);
        self
    }

    pub fn with_cap(mut self, s: impl Fn(&NodeState<'_>) -> f64 + Send + Sync + 'static) -> Self {
        self.cap = Arc::new(s);
        self
    }

    pub fn with_terminal(mut self, xi: impl Fn(&NodeState<'_>) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal = Arc::new(xi);
        self
    }

    pub fn with_lipschitz(mut self, l: Lipschitz) -> Self {
        self.lipschitz = l;
        self
    }

    pub fn with_p(mut self, p: f64) -> Self {
        self.p = p;
        self
    }

    pub fn f(&self, input: &DriverInput<'_>) -> f64 {
        (self.driver)(input)
    }

    /// Lower obstacle `h1 = h̃1 ∧ S`.
    pub fn h1(&self, state: &NodeState<'_>, y: f64, law: &MeasureSlice) -> f64 {
        (self.lower_core)(state.t, y, law).min((self.floor)(state))
    }

    /// Upper obstacle `h2 = h̃2 ∨ S′`.
    pub fn h2(&self, state: &NodeState<'_>, y: f64, law: &MeasureSlice) -> f64 {
        (self.upper_core)(state.t, y, law).max((self.cap)(state))
    }

    pub fn xi(&self, state: &NodeState<'_>) -> f64 {
        (self.terminal)(state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Largest ratio (Lipschitz checks) or worst violation (ordering checks).
    pub measured: f64,
    pub declared: Option<f64>,
    pub witness: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

const LIP_SLACK: f64 = 1.01;

fn random_law(rng: &mut ChaCha8Rng) -> MeasureSlice {
    let n = rng.random_range(1..=5);
    let values: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    MeasureSlice::weighted(values, raw.iter().map(|w| w / s).collect()).expect("nonempty")
}

struct RatioTracker {
    name: &'static str,
    declared: f64,
    worst: f64,
    witness: Option<String>,
}

impl RatioTracker {
    fn new(name: &'static str, declared: f64) -> Self {
        Self {
            name,
            declared,
            worst: 0.0,
            witness: None,
        }
    }

    fn observe(&mut self, num: f64, den: f64, describe: impl FnOnce() -> String) {
        if den <= 1e-12 {
            return;
        }
        let r = num / den;
        if r > self.worst {
            self.worst = r;
            self.witness = Some(describe());
        }
    }

    fn finish(self) -> CheckResult {
        let passed = self.worst <= self.declared * LIP_SLACK + 1e-9;
        CheckResult {
            name: self.name.into(),
            passed,
            measured: self.worst,
            declared: Some(self.declared),
            witness: if passed { None } else { self.witness },
        }
    }
}

/// Audits the structural and Lipschitz assumptions on randomized probes.
///
/// `S ≤ S′` is checked at every lattice node and the terminal sandwich at
/// every terminal node; the ordering `h1 ≤ S ≤ S′ ≤ h2` and the declared
/// Lipschitz constants (1% tolerance) are checked on `probe_count` random
/// probes. Deterministic in `seed`.
pub fn validate_assumptions(c: &CoefficientSet, lattice: &NoiseLattice, probe_count: usize, seed: u64) -> ValidationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = lattice.steps();
    let lip = c.lipschitz;
    let marks = lattice.jumps().len();
    let mut checks = Vec::new();

    // S ≤ S′ on the lattice
    let mut worst = 0.0f64;
    let mut witness = None;
    for m in 0..=steps {
        for i in 0..lattice.len(m) {
            let st = lattice.state(m, i);
            let gap = (c.floor)(&st) - (c.cap)(&st);
            if gap > worst {
                worst = gap;
                witness = Some(format!("step {m}, node {i}: S - S' = {gap:e}"));
            }
        }
    }
    checks.push(CheckResult {
        name: "floor_below_cap".into(),
        passed: worst <= 0.0,
        measured: worst,
        declared: None,
        witness,
    });

    let mut order_worst = 0.0f64;
    let mut order_witness = None;
    let mut h1y = RatioTracker::new("lower_core_lipschitz_y", lip.gamma1);
    let mut h1m = RatioTracker::new("lower_core_lipschitz_law", lip.gamma2);
    let mut h2y = RatioTracker::new("upper_core_lipschitz_y", lip.kappa1);
    let mut h2m = RatioTracker::new("upper_core_lipschitz_law", lip.kappa2);
    let mut fl = RatioTracker::new("driver_lipschitz", lip.c_f);

    for _ in 0..probe_count.max(1) {
        let m = rng.random_range(0..=steps);
        let i = rng.random_range(0..lattice.len(m));
        let st = lattice.state(m, i);
        let t = st.t;
        let y1: f64 = rng.random_range(-4.0..4.0);
        let y2: f64 = rng.random_range(-4.0..4.0);
        let mu1 = random_law(&mut rng);
        let mu2 = random_law(&mut rng);
        let w = wasserstein_p(&mu1, &mu2, c.p).unwrap_or(0.0);

        let (lo, s, sp, hi) = (c.h1(&st, y1, &mu1), (c.floor)(&st), (c.cap)(&st), c.h2(&st, y1, &mu1));
        let v = (lo - s).max(s - sp).max(sp - hi);
        if v > order_worst {
            order_worst = v;
            order_witness = Some(format!("t={t}, node {i}, y={y1}: h1={lo}, S={s}, S'={sp}, h2={hi}"));
        }

        let l1 = &c.lower_core;
        let u1 = &c.upper_core;
        h1y.observe((l1(t, y1, &mu1) - l1(t, y2, &mu1)).abs(), (y1 - y2).abs(), || {
            format!("t={t}, y1={y1}, y2={y2}")
        });
        h1m.observe((l1(t, y1, &mu1) - l1(t, y1, &mu2)).abs(), w, || format!("t={t}, y={y1}, W_p={w}"));
        h2y.observe((u1(t, y1, &mu1) - u1(t, y2, &mu1)).abs(), (y1 - y2).abs(), || {
            format!("t={t}, y1={y1}, y2={y2}")
        });
        h2m.observe((u1(t, y1, &mu1) - u1(t, y1, &mu2)).abs(), w, || format!("t={t}, y={y1}, W_p={w}"));

        let z1: f64 = rng.random_range(-3.0..3.0);
        let z2: f64 = rng.random_range(-3.0..3.0);
        let ua: Vec<f64> = (0..marks).map(|_| rng.random_range(-3.0..3.0)).collect();
        let ub: Vec<f64> = (0..marks).map(|_| rng.random_range(-3.0..3.0)).collect();
        let jumps = lattice.jumps();
        let fa = c.f(&DriverInput {
            t,
            y: y1,
            z: z1,
            u: &ua,
            u_agg: jumps.aggregate(&ua),
            law: &mu1,
        });
        let fb = c.f(&DriverInput {
            t,
            y: y2,
            z: z2,
            u: &ub,
            u_agg: jumps.aggregate(&ub),
            law: &mu2,
        });
        let du: Vec<f64> = ua.iter().zip(&ub).map(|(a, b)| a - b).collect();
        let den = (y1 - y2).abs() + (z1 - z2).abs() + jumps.nu_norm(&du) + w;
        fl.observe((fa - fb).abs(), den, || format!("t={t}, y=({y1},{y2}), z=({z1},{z2}), W_p={w}"));
    }
    checks.push(CheckResult {
        name: "obstacle_order".into(),
        passed: order_worst <= 1e-12,
        measured: order_worst,
        declared: None,
        witness: order_witness,
    });
    checks.extend([h1y.finish(), h1m.finish(), h2y.finish(), h2m.finish(), fl.finish()]);

    // terminal sandwich h1(T, ξ, P_ξ) ≤ ξ ≤ h2(T, ξ, P_ξ)
    let xi: Vec<f64> = (0..lattice.len(steps)).map(|i| c.xi(&lattice.state(steps, i))).collect();
    let law = lattice.law_of(steps, &xi);
    let mut worst = 0.0f64;
    let mut witness = None;
    for (i, &x) in xi.iter().enumerate() {
        let st = lattice.state(steps, i);
        let v = (c.h1(&st, x, &law) - x).max(x - c.h2(&st, x, &law));
        if v > worst {
            worst = v;
            witness = Some(format!("terminal node {i}: xi={x}"));
        }
    }
    checks.push(CheckResult {
        name: "terminal_sandwich".into(),
        passed: worst <= 1e-12,
        measured: worst,
        declared: None,
        witness,
    });
    ValidationReport { checks }
}

/// Piecewise-linear deterministic function of time (constant extrapolation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeFunction {
    Constant(f64),
    Table(Vec<(f64, f64)>),
}

impl TimeFunction {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            TimeFunction::Constant(v) => *v,
            TimeFunction::Table(pts) => {
                let Some(first) = pts.first() else { return 0.0 };
                if t <= first.0 {
                    return first.1;
                }
                for w in pts.windows(2) {
                    let (a, b) = (w[0], w[1]);
                    if t <= b.0 {
                        let s = if b.0 > a.0 { (t - a.0) / (b.0 - a.0) } else { 1.0 };
                        return a.1 + s * (b.1 - a.1);
                    }
                }
                pts.last().unwrap().1
            }
        }
    }

    fn breakpoints(&self) -> Vec<f64> {
        match self {
            TimeFunction::Constant(_) => vec![0.0],
            TimeFunction::Table(pts) => pts.iter().map(|p| p.0).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub intercept: f64,
    pub slope: f64,
}

impl Affine {
    pub const ZERO: Affine = Affine {
        intercept: 0.0,
        slope: 0.0,
    };

    pub fn at(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

/// Benchmark portfolio `S_t = level + drift·t + vol·B_t + jump_loading·Σ e_k N_k`
/// and reference level `S′_t = S_t + spread`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub level: f64,
    pub drift: f64,
    pub vol: f64,
    pub jump_loading: f64,
    pub spread: f64,
}

impl Benchmark {
    pub fn floor(&self, st: &NodeState<'_>) -> f64 {
        self.level + self.drift * st.t + self.vol * st.brownian + self.jump_loading * st.compound()
    }

    pub fn cap(&self, st: &NodeState<'_>) -> f64 {
        self.floor(st) + self.spread
    }
}

/// Prospective-reserve game of a representative life-insurance contract:
/// withdrawal-option driver, guarantee/bonus lower barrier and allocated
/// bonus upper barrier, all coupled to the mean reserve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InsuranceScenario {
    pub alpha: TimeFunction,
    pub beta: TimeFunction,
    pub theta: TimeFunction,
    pub delta: TimeFunction,
    /// Guarantee level `u`.
    pub guarantee: f64,
    /// Bonus fraction in `(0, 1)`.
    pub bonus: f64,
    /// Management fee `c1(y)`.
    pub fee: Affine,
    /// Individual bonus scheme `c2(y)`.
    pub individual_bonus: Affine,
    /// Pool-average bonus scheme `c3(ȳ)`.
    pub pool_bonus: Affine,
    pub benchmark: Benchmark,
    /// Terminal reserve before clamping into `[S_T, S′_T]`: `level + vol·B_T`.
    pub terminal_level: f64,
    pub terminal_vol: f64,
    pub p: f64,
}

impl Default for InsuranceScenario {
    fn default() -> Self {
        Self {
            alpha: TimeFunction::Constant(0.05),
            beta: TimeFunction::Constant(0.1),
            theta: TimeFunction::Constant(0.0),
            delta: TimeFunction::Constant(0.03),
            guarantee: 1.0,
            bonus: 0.3,
            fee: Affine {
                intercept: 0.0,
                slope: 0.02,
            },
            individual_bonus: Affine {
                intercept: 0.45,
                slope: 0.1,
            },
            pool_bonus: Affine {
                intercept: 0.7,
                slope: 0.1,
            },
            benchmark: Benchmark {
                level: 1.0,
                drift: 0.0,
                vol: 0.25,
                jump_loading: 0.1,
                spread: 0.3,
            },
            terminal_level: 1.1,
            terminal_vol: 0.4,
            p: 2.0,
        }
    }
}

pub fn make_insurance_scenario(params: &InsuranceScenario) -> Result<CoefficientSet> {
    if !(params.bonus > 0.0 && params.bonus < 1.0) {
        return Err(Error::InvalidParam(format!(
            "bonus fraction must lie in (0, 1), got {}",
            params.bonus
        )));
    }
    if !(params.p >= 2.0) {
        return Err(Error::InvalidParam(format!("moment order must be >= 2, got {}", params.p)));
    }
    if params.benchmark.spread < 0.0 {
        return Err(Error::InvalidParam("benchmark spread must be nonnegative".into()));
    }
    let mut times: Vec<f64> = [&params.beta, &params.delta].iter().flat_map(|f| f.breakpoints()).collect();
    times.sort_by(f64::total_cmp);
    let slope_sum = times
        .iter()
        .map(|&t| params.delta.at(t).abs() + params.beta.at(t).abs())
        .fold(0.0, f64::max);
    let lipschitz = Lipschitz {
        c_f: slope_sum * 2.0,
        gamma1: params.fee.slope.abs(),
        gamma2: params.bonus,
        kappa1: params.individual_bonus.slope.abs(),
        kappa2: params.pool_bonus.slope.abs(),
    };

    let (alpha, beta, theta, delta) = (
        params.alpha.clone(),
        params.beta.clone(),
        params.theta.clone(),
        params.delta.clone(),
    );
    let (u, bonus, fee, ib, pb, bench) = (
        params.guarantee,
        params.bonus,
        params.fee,
        params.individual_bonus,
        params.pool_bonus,
        params.benchmark,
    );
    let (tl, tv) = (params.terminal_level, params.terminal_vol);
    Ok(CoefficientSet::new("insurance")
        .with_driver(move |a| {
            let t = a.t;
            alpha.at(t) - delta.at(t) * a.y + beta.at(t) * theta.at(t).max(a.y - a.law.mean())
        })
        .with_lower_core(move |_, y, law| u - fee.at(y) + bonus * (law.mean() - u).max(0.0))
        .with_upper_core(move |_, y, law| ib.at(y) + pb.at(law.mean()))
        .with_floor(move |st| bench.floor(st))
        .with_cap(move |st| bench.cap(st))
        .with_terminal(move |st| (tl + tv * st.brownian).clamp(bench.floor(st), bench.cap(st)))
        .with_lipschitz(lipschitz)
        .with_p(params.p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_tree, JumpSpec, TimeGrid};

    fn small_tree() -> NoiseLattice {
        build_tree(TimeGrid::new(1.0, 3).unwrap(), JumpSpec::new(vec![1.0], vec![0.5]).unwrap()).unwrap()
    }

    #[test]
    fn constant_obstacles_pass_with_zero_ratios() {
        let c = CoefficientSet::new("flat")
            .with_lower_core(|_, _, _| -10.0)
            .with_upper_core(|_, _, _| 10.0)
            .with_floor(|_| -5.0)
            .with_cap(|_| 5.0);
        let r = validate_assumptions(&c, &small_tree(), 200, 1);
        assert!(r.passed(), "{r:?}");
        for name in [
            "lower_core_lipschitz_y",
            "lower_core_lipschitz_law",
            "upper_core_lipschitz_y",
            "upper_core_lipschitz_law",
            "driver_lipschitz",
        ] {
            assert_eq!(r.check(name).unwrap().measured, 0.0);
        }
    }

    #[test]
    fn understated_lipschitz_constant_is_caught() {
        let c = CoefficientSet::new("steep")
            .with_lower_core(|_, y, _| 2.0 * y)
            .with_floor(|_| 100.0)
            .with_cap(|_| 100.0)
            .with_upper_core(|_, _, _| 200.0)
            .with_terminal(|_| 0.0)
            .with_lipschitz(Lipschitz {
                gamma1: 0.1,
                ..Lipschitz::default()
            });
        let r = validate_assumptions(&c, &small_tree(), 50, 3);
        let chk = r.check("lower_core_lipschitz_y").unwrap();
        assert!(!chk.passed);
        assert!((chk.measured - 2.0).abs() < 1e-9);
        assert!(chk.witness.is_some());
    }

    #[test]
    fn crossing_floor_is_reported() {
        let c = CoefficientSet::new("bad").with_floor(|st| st.brownian).with_cap(|_| 0.0);
        let r = validate_assumptions(&c, &small_tree(), 10, 1);
        assert!(!r.check("floor_below_cap").unwrap().passed);
    }

    #[test]
    fn terminal_outside_obstacles_is_reported() {
        let c = CoefficientSet::new("bad")
            .with_lower_core(|_, _, _| 1.0)
            .with_floor(|_| 1.0)
            .with_cap(|_| 1.0)
            .with_terminal(|_| 0.0);
        let r = validate_assumptions(&c, &small_tree(), 10, 1);
        assert!(!r.check("terminal_sandwich").unwrap().passed);
    }

    #[test]
    fn validation_is_deterministic() {
        let c = make_insurance_scenario(&InsuranceScenario::default()).unwrap();
        let a = validate_assumptions(&c, &small_tree(), 300, 17);
        let b = validate_assumptions(&c, &small_tree(), 300, 17);
        assert_eq!(a, b);
    }

    #[test]
    fn default_insurance_validates() {
        let c = make_insurance_scenario(&InsuranceScenario::default()).unwrap();
        let r = validate_assumptions(&c, &small_tree(), 2000, 5);
        assert!(r.passed(), "{r:#?}");
    }

    #[test]
    fn degenerate_insurance_reduces_to_guarantee() {
        let params = InsuranceScenario {
            alpha: TimeFunction::Constant(0.0),
            beta: TimeFunction::Constant(0.0),
            delta: TimeFunction::Constant(0.0),
            fee: Affine::ZERO,
            individual_bonus: Affine::ZERO,
            pool_bonus: Affine::ZERO,
            ..InsuranceScenario::default()
        };
        let c = make_insurance_scenario(&params).unwrap();
        let law = MeasureSlice::uniform(vec![1.0, 2.0]).unwrap();
        let f = c.f(&DriverInput {
            t: 0.3,
            y: 7.0,
            z: 1.0,
            u: &[],
            u_agg: 0.0,
            law: &law,
        });
        assert_eq!(f, 0.0);
        let expected = params.guarantee + params.bonus * (1.5 - params.guarantee);
        assert!(((c.lower_core)(0.3, 7.0, &law) - expected).abs() < 1e-15);
        assert_eq!((c.upper_core)(0.3, 7.0, &law), 0.0);
    }

    #[test]
    fn withdrawal_driver_hand_value() {
        let params = InsuranceScenario {
            alpha: TimeFunction::Constant(0.0),
            beta: TimeFunction::Constant(1.0),
            theta: TimeFunction::Constant(0.0),
            delta: TimeFunction::Constant(0.0),
            ..InsuranceScenario::default()
        };
        let c = make_insurance_scenario(&params).unwrap();
        let law = MeasureSlice::dirac(1.0);
        let f = c.f(&DriverInput {
            t: 0.0,
            y: 2.0,
            z: 0.0,
            u: &[],
            u_agg: 0.0,
            law: &law,
        });
        assert_eq!(f, 1.0);
    }

    #[test]
    fn bonus_fraction_must_be_proper() {
        for b in [0.0, 1.0, 1.5] {
            let p = InsuranceScenario {
                bonus: b,
                ..InsuranceScenario::default()
            };
            assert!(matches!(make_insurance_scenario(&p), Err(Error::InvalidParam(_))));
        }
    }

    #[test]
    fn time_function_table() {
        let f = TimeFunction::Table(vec![(0.0, 1.0), (1.0, 3.0)]);
        assert_eq!(f.at(-1.0), 1.0);
        assert_eq!(f.at(0.5), 2.0);
        assert_eq!(f.at(2.0), 3.0);
    }
}
