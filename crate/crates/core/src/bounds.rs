//! Closed-form error-probability bounds for flat and two-level policies
//! acting on noisy value estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub sigma: f64,
    /// Horizon in steps.
    pub t: f64,
    /// Subgoal step.
    pub k: f64,
    pub rho_flat: f64,
    pub rho_high: f64,
    pub rho_low: f64,
}

impl BoundParams {
    /// Shared correlation `rho` and `k = ⌈√T⌉`.
    pub fn with_sqrt_k(sigma: f64, t: f64, rho: f64) -> Self {
        Self {
            sigma,
            t,
            k: t.sqrt().ceil(),
            rho_flat: rho,
            rho_high: rho,
            rho_low: rho,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) {
            return Err(Error::InvalidConfig("sigma must be non-negative".into()));
        }
        if !(self.k >= 1.0 && self.k <= self.t) {
            return Err(Error::InvalidConfig(format!(
                "need 1 ≤ k ≤ T, got k={} T={}",
                self.k, self.t
            )));
        }
        for r in [self.rho_flat, self.rho_high, self.rho_low] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidConfig(format!(
                    "correlation {r} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// A bound value; `degenerate` marks a term taken at its limit because
/// its spread was zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub value: f64,
    pub degenerate: bool,
}

impl Bound {
    fn plus(self, o: Bound) -> Bound {
        Bound {
            value: self.value + o.value,
            degenerate: self.degenerate || o.degenerate,
        }
    }
}

/// `Φ(−num / (σ·√spread))`, with the zero-spread limit `Φ(−∞) = 0`.
fn term(num: f64, sigma: f64, spread: f64) -> Bound {
    let den = sigma * spread.max(0.0).sqrt();
    if den == 0.0 {
        return Bound {
            value: 0.0,
            degenerate: true,
        };
    }
    Bound {
        value: std_normal_cdf(-num / den),
        degenerate: false,
    }
}

pub fn bound_quasi_flat(p: &BoundParams) -> Result<Bound> {
    p.validate()?;
    Ok(term(2f64.sqrt(), p.sigma, p.t * (1.0 - p.rho_flat)))
}

pub fn bound_quasi_hier(p: &BoundParams) -> Result<Bound> {
    p.validate()?;
    let s2 = 2f64.sqrt();
    Ok(term(s2 * p.k, p.sigma, p.t * (1.0 - p.rho_high)).plus(term(
        s2,
        p.sigma,
        p.k * (1.0 - p.rho_low),
    )))
}

pub fn bound_flat_unprojected(p: &BoundParams) -> Result<Bound> {
    p.validate()?;
    Ok(term(2f64.sqrt(), p.sigma, p.t * p.t + 1.0))
}

pub fn bound_hier_unprojected(p: &BoundParams) -> Result<Bound> {
    p.validate()?;
    let s2 = 2f64.sqrt();
    Ok(term(s2 * p.k, p.sigma, p.t * p.t + p.k * p.k).plus(term(s2, p.sigma, p.k * p.k + 1.0)))
}

/// Quasimetric high level with an unprojected low level.
pub fn bound_eik_hiqrl(p: &BoundParams) -> Result<Bound> {
    p.validate()?;
    let s2 = 2f64.sqrt();
    Ok(term(s2 * p.k, p.sigma, p.t * (1.0 - p.rho_high)).plus(term(s2, p.sigma, p.k * p.k + 1.0)))
}

pub const BOUND_NAMES: [&str; 5] = [
    "quasi_flat",
    "quasi_hier",
    "flat_unprojected",
    "hier_unprojected",
    "eik_hiqrl",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub t: f64,
    pub k: f64,
    /// In [`BOUND_NAMES`] order.
    pub values: [f64; 5],
}

pub fn all_bounds(p: &BoundParams) -> Result<[f64; 5]> {
    Ok([
        bound_quasi_flat(p)?.value,
        bound_quasi_hier(p)?.value,
        bound_flat_unprojected(p)?.value,
        bound_hier_unprojected(p)?.value,
        bound_eik_hiqrl(p)?.value,
    ])
}

/// Sweep over horizons with `k = ⌈√T⌉` and a shared correlation.
pub fn compare_bounds(horizons: &[f64], sigma: f64, rho: f64) -> Result<Vec<BoundRow>> {
    horizons
        .iter()
        .map(|&t| {
            let p = BoundParams::with_sqrt_k(sigma, t, rho);
            Ok(BoundRow {
                t,
                k: p.k,
                values: all_bounds(&p)?,
            })
        })
        .collect()
}

/// `n` horizons spaced evenly in log-scale over `[lo, hi]`, rounded to integers.
pub fn log_horizons(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo.round()],
        _ => (0..n)
            .map(|i| {
                (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64)
                    .exp()
                    .round()
            })
            .collect(),
    }
}

/// The sweep behind the flat-versus-hierarchical comparison figure.
pub fn fig8_sweep() -> Vec<BoundRow> {
    compare_bounds(&log_horizons(10.0, 1e4, 61), 1.0, 0.01).expect("preset parameters are valid")
}

pub fn bounds_csv(rows: &[BoundRow]) -> String {
    let mut out = format!("T,k,{}\n", BOUND_NAMES.join(","));
    for r in rows {
        out.push_str(&format!("{},{}", r.t, r.k));
        for v in r.values {
            out.push_str(&format!(",{v:.12e}"));
        }
        out.push('\n');
    }
    out
}
