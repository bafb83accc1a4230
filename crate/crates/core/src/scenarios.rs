//! Named coefficient sets. Built-ins take their parameters from a JSON
//! object; custom builders can be registered at runtime.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::coefficients::{make_insurance_scenario, CoefficientSet, Lipschitz, WIDE};
use crate::error::{Error, Result};

pub type ScenarioBuilder = Arc<dyn Fn(&Value) -> Result<CoefficientSet> + Send + Sync>;

#[derive(Clone)]
struct Entry {
    description: String,
    builder: ScenarioBuilder,
}

#[derive(Clone)]
pub struct ScenarioRegistry {
    entries: BTreeMap<String, Entry>,
}

impl Default for ScenarioRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

fn parse<T: DeserializeOwned + Default>(params: &Value) -> Result<T> {
    if params.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(params.clone()).map_err(|e| Error::InvalidParam(e.to_string()))
}

impl ScenarioRegistry {
    pub fn with_builtins() -> Self {
        let mut r = Self { entries: BTreeMap::new() };
        r.register(
            "trivial",
            "zero driver, terminal value tied to the Brownian path, obstacles never bind",
            |v| Ok(trivial(&parse(v)?)),
        );
        r.register(
            "binding_lower",
            "zero driver, terminal B_T, flat lower obstacle (optionally mean-shifted) that binds before T",
            |v| binding_lower(&parse(v)?),
        );
        r.register(
            "mean_ode",
            "driver equal to the mean of the law, constant terminal value, obstacles never bind",
            |v| Ok(mean_ode(&parse(v)?)),
        );
        r.register(
            "insurance",
            "participating life-insurance reserve with withdrawal option and mean-dependent bonus barriers",
            |v| make_insurance_scenario(&parse(v)?),
        );
        r.register(
            "chaos_meanfield",
            "mean-coupled driver and obstacles with jumps, inside the propagation-of-chaos regime",
            |v| chaos_meanfield(&parse(v)?),
        );
        r
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        description: impl Into<String>,
        builder: impl Fn(&Value) -> Result<CoefficientSet> + Send + Sync + 'static,
    ) {
        self.entries.insert(
            name.into(),
            Entry {
                description: description.into(),
                builder: Arc::new(builder),
            },
        );
    }

    pub fn build(&self, name: &str, params: &Value) -> Result<CoefficientSet> {
        let e = self.entries.get(name).ok_or_else(|| Error::UnknownScenario(name.into()))?;
        (e.builder)(params)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// `(name, description)` sorted by name.
    pub fn list(&self) -> Vec<(String, String)> {
        self.entries.iter().map(|(k, e)| (k.clone(), e.description.clone())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrivialParams {
    pub scale: f64,
    pub jump_loading: f64,
}

impl Default for TrivialParams {
    fn default() -> Self {
        Self {
            scale: 1.0,
            jump_loading: 0.0,
        }
    }
}

pub fn trivial(p: &TrivialParams) -> CoefficientSet {
    let p = *p;
    CoefficientSet::new("trivial")
        .with_lower_core(|_, _, _| -50.0)
        .with_upper_core(|_, _, _| 50.0)
        .with_terminal(move |st| (p.scale * st.brownian + p.jump_loading * st.compound()).clamp(-40.0, 40.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BindingLowerParams {
    pub level: f64,
    pub mean_coupling: f64,
    pub upper: f64,
}

impl Default for BindingLowerParams {
    fn default() -> Self {
        Self {
            level: 0.5,
            mean_coupling: 0.0,
            upper: 10.0,
        }
    }
}

/// `f = 0`, `ξ = B_T` (clipped inside the upper obstacle), lower obstacle
/// `level + mean_coupling·mean(μ)` before `T`, upper obstacle `upper`.
pub fn binding_lower(p: &BindingLowerParams) -> Result<CoefficientSet> {
    if !(p.upper > 1.0) {
        return Err(Error::InvalidParam("binding_lower needs upper > 1".into()));
    }
    let p = *p;
    let big = p.upper;
    Ok(CoefficientSet::new("binding_lower")
        .with_lower_core(move |_, _, law| p.level + p.mean_coupling * law.mean())
        .with_upper_core(move |_, _, _| big)
        .with_floor(move |st| if st.is_terminal() { -big } else { big })
        .with_cap(move |_| big)
        .with_terminal(move |st| st.brownian.clamp(1.0 - big, big - 1.0))
        .with_lipschitz(Lipschitz {
            gamma2: p.mean_coupling.abs(),
            ..Lipschitz::default()
        }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeanOdeParams {
    pub terminal: f64,
}

impl Default for MeanOdeParams {
    fn default() -> Self {
        Self { terminal: 1.0 }
    }
}

/// `f = mean(μ)`, `ξ ≡ c`: the value solves `y′ = −y` backward, `Y_0 = c e^T`.
pub fn mean_ode(p: &MeanOdeParams) -> CoefficientSet {
    let c = p.terminal;
    CoefficientSet::new("mean_ode")
        .with_driver(|a| a.law.mean())
        .with_lower_core(|_, _, _| -WIDE)
        .with_upper_core(|_, _, _| WIDE)
        .with_terminal(move |_| c)
        .with_lipschitz(Lipschitz {
            c_f: 1.0,
            ..Lipschitz::default()
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChaosParams {
    /// Driver `a·mean(μ) − b·y`.
    pub mean_weight: f64,
    pub decay: f64,
    /// `h̃1 = lower + lower_coupling·mean(μ)`.
    pub lower: f64,
    pub lower_coupling: f64,
    /// `h̃2 = upper + upper_coupling·mean(μ)`.
    pub upper: f64,
    pub upper_coupling: f64,
    /// `ξ = B_T + jump_loading·Σ e_k N_k`.
    pub jump_loading: f64,
    pub p: f64,
}

impl Default for ChaosParams {
    fn default() -> Self {
        Self {
            mean_weight: 0.5,
            decay: 0.2,
            lower: -0.8,
            lower_coupling: 0.3,
            upper: 1.2,
            upper_coupling: 0.2,
            jump_loading: 0.5,
            p: 2.0,
        }
    }
}

pub fn chaos_meanfield(p: &ChaosParams) -> Result<CoefficientSet> {
    if !(p.p >= 2.0) {
        return Err(Error::InvalidParam(format!("moment order must be >= 2, got {}", p.p)));
    }
    let p = *p;
    Ok(CoefficientSet::new("chaos_meanfield")
        .with_driver(move |a| p.mean_weight * a.law.mean() - p.decay * a.y)
        .with_lower_core(move |_, _, law| p.lower + p.lower_coupling * law.mean())
        .with_upper_core(move |_, _, law| p.upper + p.upper_coupling * law.mean())
        .with_floor(|st| if st.is_terminal() { -100.0 } else { 0.0 })
        .with_cap(|st| if st.is_terminal() { 100.0 } else { 0.0 })
        .with_terminal(move |st| st.brownian + p.jump_loading * st.compound())
        .with_lipschitz(Lipschitz {
            c_f: p.mean_weight.abs() + p.decay.abs(),
            gamma1: 0.0,
            gamma2: p.lower_coupling.abs(),
            kappa1: 0.0,
            kappa2: p.upper_coupling.abs(),
        })
        .with_p(p.p))
}
