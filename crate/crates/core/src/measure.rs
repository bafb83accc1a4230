//! Finite weighted samples representing marginal laws, and the transport
//! distances between them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A probability measure on ℝ given by finitely many weighted atoms.
///
/// Atoms are kept sorted by value, so every statistic is computed in a
/// canonical order and does not depend on how the sample was listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSlice")]
pub struct MeasureSlice {
    values: Vec<f64>,
    weights: Vec<f64>,
    /// Cached, coefficients read it once per node.
    #[serde(skip)]
    mean: f64,
}

#[derive(Deserialize)]
struct RawSlice {
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl TryFrom<RawSlice> for MeasureSlice {
    type Error = Error;

    fn try_from(r: RawSlice) -> Result<Self> {
        Self::weighted(r.values, r.weights)
    }
}

impl MeasureSlice {
    fn sorted(values: Vec<f64>, weights: Vec<f64>) -> Self {
        let mean = values.iter().zip(&weights).map(|(v, w)| v * w).sum();
        Self { values, weights, mean }
    }

    pub fn weighted(values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySample);
        }
        if values.len() != weights.len() {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: weights.len(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidParam("weights must be finite and nonnegative".into()));
        }
        let mut pairs: Vec<(f64, f64)> = values.into_iter().zip(weights).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParam(format!("weights sum to {total}, expected 1")));
        }
        let (values, weights) = pairs.into_iter().unzip();
        Ok(Self::sorted(values, weights))
    }

    /// Empirical measure `L_n[x] = (1/n) Σ δ_{x_j}`.
    pub fn uniform(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySample);
        }
        let w = 1.0 / values.len() as f64;
        let mut values = values;
        values.sort_by(f64::total_cmp);
        let weights = vec![w; values.len()];
        Ok(Self::sorted(values, weights))
    }

    pub fn dirac(x: f64) -> Self {
        Self::sorted(vec![x], vec![1.0])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// `∫ |x|^p μ(dx)`.
    pub fn abs_moment(&self, p: f64) -> f64 {
        self.values.iter().zip(&self.weights).map(|(v, w)| w * v.abs().powf(p)).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.values.iter().zip(&self.weights).map(|(v, w)| w * (v - m).powi(2)).sum()
    }

    /// Left-continuous quantile `F⁻¹(q)`.
    pub fn quantile(&self, q: f64) -> f64 {
        let mut acc = 0.0;
        for (v, w) in self.values.iter().zip(&self.weights) {
            acc += w;
            if acc >= q - 1e-15 {
                return *v;
            }
        }
        *self.values.last().unwrap()
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        *self.values.last().unwrap()
    }
}

/// One slice per grid point `0..=M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureFlow {
    slices: Vec<MeasureSlice>,
}

impl MeasureFlow {
    pub fn new(slices: Vec<MeasureSlice>) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::EmptySample);
        }
        Ok(Self { slices })
    }

    /// The flow `δ_x` at every grid point.
    pub fn dirac(steps: usize, x: f64) -> Self {
        Self {
            slices: vec![MeasureSlice::dirac(x); steps + 1],
        }
    }

    pub fn slice(&self, m: usize) -> &MeasureSlice {
        &self.slices[m]
    }

    pub fn slices(&self) -> &[MeasureSlice] {
        &self.slices
    }

    pub fn steps(&self) -> usize {
        self.slices.len() - 1
    }

    pub fn means(&self) -> Vec<f64> {
        self.slices.iter().map(MeasureSlice::mean).collect()
    }

    /// `max_m W_p(self_m, other_m)`.
    pub fn sup_distance(&self, other: &MeasureFlow, p: f64) -> f64 {
        self.slices
            .iter()
            .zip(&other.slices)
            .map(|(a, b)| wasserstein_p(a, b, p).unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }
}

/// Exact one-dimensional `W_p` by the quantile coupling: the two weight
/// grids are merged and `|F_a⁻¹ − F_b⁻¹|^p` is integrated piecewise.
pub fn wasserstein_p(a: &MeasureSlice, b: &MeasureSlice, p: f64) -> Result<f64> {
    Ok(wasserstein_pp(a, b, p)?.powf(1.0 / p))
}

/// `W_p^p(a, b)`.
pub fn wasserstein_pp(a: &MeasureSlice, b: &MeasureSlice, p: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    if !(p >= 1.0) {
        return Err(Error::InvalidParam(format!("Wasserstein order must be >= 1, got {p}")));
    }
    let (mut i, mut j) = (0usize, 0usize);
    let (mut ra, mut rb) = (a.weights[0], b.weights[0]);
    let mut total = 0.0;
    loop {
        let step = ra.min(rb);
        if step > 0.0 {
            total += step * (a.values[i] - b.values[j]).abs().powf(p);
        }
        ra -= step;
        rb -= step;
        let adv_a = ra <= 1e-15;
        let adv_b = rb <= 1e-15;
        if adv_a {
            i += 1;
            if i == a.len() {
                break;
            }
            ra += a.weights[i];
        }
        if adv_b {
            j += 1;
            if j == b.len() {
                break;
            }
            rb += b.weights[j];
        }
    }
    Ok(total)
}

/// Coupling bound between two empirical measures of equal size: the sorted
/// coupling never costs more than the index coupling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CouplingCheck {
    pub w: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub fn check_coupling_inequality(x: &[f64], y: &[f64], p: f64) -> Result<CouplingCheck> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::EmptySample);
    }
    let n = x.len() as f64;
    let w = wasserstein_pp(&MeasureSlice::uniform(x.to_vec())?, &MeasureSlice::uniform(y.to_vec())?, p)?;
    let rhs = x.iter().zip(y).map(|(a, b)| (a - b).abs().powf(p)).sum::<f64>() / n;
    Ok(CouplingCheck {
        w,
        rhs,
        holds: w <= rhs * (1.0 + 1e-12) + 1e-12,
    })
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method,
/// O(n³)). Returns the optimal total cost and the column assigned to each row.
pub fn assignment(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let n = cost.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    // 1-based potentials formulation
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut matched = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut rows = vec![0usize; n];
    for j in 1..=n {
        rows[matched[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| cost[i][rows[i]]).sum();
    (total, rows)
}

/// `W_2` between two equal-size uniform empirical measures on ℝ².
pub fn wasserstein2_planar(a: &[(f64, f64)], b: &[(f64, f64)]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptySample);
    }
    let cost: Vec<Vec<f64>> = a
        .iter()
        .map(|p| b.iter().map(|q| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).collect())
        .collect();
    let (total, _) = assignment(&cost);
    Ok((total / a.len() as f64).sqrt())
}
