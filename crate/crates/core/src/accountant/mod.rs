//! Moments accountant for the sampled Gaussian mechanism.
//!
//! One round releases a sensitivity-1 sum over a Poisson(`q`) sample of
//! users plus `N(0, z^2)` noise. Per round and per order `lambda` the
//! accountant bounds the log-moment of the privacy loss by
//!
//! ```text
//! alpha(lambda) = log max( E_{x~mu0}[(mu0/mu)^lambda], E_{x~mu}[(mu/mu0)^lambda] )
//! ```
//!
//! with `mu0 = N(0, z^2)`, `mu1 = N(1, z^2)` and `mu = (1-q) mu0 + q mu1`.
//! Log-moments add across rounds, and `(eps, delta)` follows from the tail
//! bound `eps = min_lambda (alpha_total(lambda) + log(1/delta)) / lambda`.

mod quadrature;

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use quadrature::{integrate, Estimate};

/// Orders `1..=32`.
pub const DEFAULT_MAX_ORDER: u32 = 32;
const ABS_TOL: f64 = 1e-14;
const REL_TOL: f64 = 1e-12;
const MAX_INTERVALS: usize = 4000;

/// Round counts reported in the classic privacy table: `10^0 .. 10^6`.
pub const TABLE_CHECKPOINTS: [u64; 7] = [1, 10, 100, 1_000, 10_000, 100_000, 1_000_000];

/// `log(1 + q (e^u - 1)) = log(mu(x) / mu0(x))` with `u = (2x - 1) / (2 z^2)`.
fn log_mixture_ratio(q: f64, u: f64) -> f64 {
    let excess = q * libm::expm1(u);
    // log1p loses digits as its argument approaches -1 (q near 1, u << 0)
    if u <= 30.0 && excess >= -0.5 {
        libm::log1p(excess)
    } else {
        // log((1 - q) + q e^u) as a log-sum-exp
        let a = libm::log1p(-q);
        let b = libm::log(q) + u;
        let m = a.max(b);
        m + libm::log(libm::exp(a - m) + libm::exp(b - m))
    }
}

/// `mu0(x) * (exp(t) - 1)`, accurate for both tiny and huge `t`.
fn weighted_excess(log_density: f64, t: f64) -> f64 {
    if t < 1.0 {
        libm::exp(log_density) * libm::expm1(t)
    } else {
        libm::exp(log_density + t) - libm::exp(log_density)
    }
}

/// Which expectation of the privacy-loss moment to integrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expectation {
    /// `E_{mu0}[(mu0/mu)^lambda]`
    Null,
    /// `E_{mu}[(mu/mu0)^lambda]`, integrated as `E_{mu0}[(mu/mu0)^(lambda+1)]`
    Mixture,
}

fn check_args(q: f64, z: f64, lambda: u32) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::config(format!("sampling probability must lie in (0, 1], got {q}")));
    }
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::config(format!("noise scale z must be positive, got {z}")));
    }
    if lambda == 0 {
        return Err(Error::config("moment order must be at least 1"));
    }
    Ok(())
}

// Above this log-peak the moment is integrated with the peak factored out.
const LOG_SCALE_THRESHOLD: f64 = 300.0;
const PEAK_SCAN_POINTS: usize = 4001;

/// `log E` for the requested expectation, by adaptive quadrature.
///
/// Small moments are integrated as `E - 1` so that tiny sampling rates keep
/// full relative precision; large ones are integrated in log space relative
/// to the integrand's peak so that `E` itself may exceed `f64::MAX`.
pub fn log_expectation(q: f64, z: f64, lambda: u32, which: Expectation) -> Result<f64> {
    check_args(q, z, lambda)?;
    let l = f64::from(lambda);
    let two_var = 2.0 * z * z;
    let log_norm = libm::log(z * libm::sqrt(2.0 * core::f64::consts::PI));
    let (sign, power) = match which {
        Expectation::Null => (-1.0, l),
        Expectation::Mixture => (1.0, l + 1.0),
    };
    let log_density = |x: f64| -x * x / two_var - log_norm;
    let exponent = |x: f64| power * sign * log_mixture_ratio(q, (2.0 * x - 1.0) / two_var);

    // The integrands concentrate near 0, 1, -lambda and lambda + 1 with width z.
    let half_width = (1.0 + z * (l + 20.0)).max(l + 1.0 + 20.0 * z);
    let centers = [-l, 0.0, 0.5, 1.0, l + 1.0];
    let mut knots: Vec<f64> = centers
        .iter()
        .flat_map(|&c| [-8.0, -3.0, -1.0, 0.0, 1.0, 3.0, 8.0].map(|m| c + m * z))
        .chain([-half_width, half_width])
        .filter(|k| k.abs() <= half_width)
        .collect();
    knots.sort_by(f64::total_cmp);
    knots.dedup();

    let step = 2.0 * half_width / (PEAK_SCAN_POINTS - 1) as f64;
    let peak = (0..PEAK_SCAN_POINTS)
        .map(|i| -half_width + step * i as f64)
        .chain(knots.iter().copied())
        .map(|x| log_density(x) + exponent(x))
        .fold(f64::NEG_INFINITY, f64::max);

    let fail = |est: Estimate| Error::Integration {
        lambda,
        q,
        z,
        error_estimate: est.error,
        intervals: est.intervals,
    };

    if peak < LOG_SCALE_THRESHOLD {
        let est = integrate(
            |x| weighted_excess(log_density(x), exponent(x)),
            &knots,
            ABS_TOL,
            REL_TOL,
            MAX_INTERVALS,
        );
        if !est.converged {
            return Err(fail(est));
        }
        Ok(libm::log1p(est.value))
    } else {
        // exponents of size |peak| carry absolute rounding error ~ eps * peak
        let rel_tol = REL_TOL.max(16.0 * f64::EPSILON * peak);
        let est = integrate(
            |x| libm::exp(log_density(x) + exponent(x) - peak),
            &knots,
            0.0,
            rel_tol,
            MAX_INTERVALS,
        );
        if !est.converged || !(est.value > 0.0) {
            return Err(fail(est));
        }
        Ok(peak + libm::log(est.value))
    }
}

/// Per-round log-moment `alpha(lambda)` of the sampled Gaussian mechanism.
pub fn log_moment(q: f64, z: f64, lambda: u32) -> Result<f64> {
    let null = log_expectation(q, z, lambda, Expectation::Null)?;
    let mixture = log_expectation(q, z, lambda, Expectation::Mixture)?;
    Ok(null.max(mixture).max(0.0))
}

/// Rounds spent at one noise scale, with the per-round log-moment for each order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spending {
    pub z: f64,
    pub rounds: u64,
    pub per_round: Vec<f64>,
}

/// Tracks privacy loss across rounds at a fixed sampling probability.
///
/// Spending is stored as integer round counts per distinct `z`, so the
/// accumulated log-moments depend only on the totals, never on how the
/// rounds were batched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentsAccountant {
    q: f64,
    orders: Vec<u32>,
    spendings: Vec<Spending>,
}

impl MomentsAccountant {
    pub fn new(q: f64) -> Result<Self> {
        Self::with_orders(q, (1..=DEFAULT_MAX_ORDER).collect())
    }

    pub fn with_orders(q: f64, orders: Vec<u32>) -> Result<Self> {
        check_args(q, 1.0, 1)?;
        if orders.is_empty() || orders.contains(&0) {
            return Err(Error::config("moment orders must be a non-empty list of positive integers"));
        }
        Ok(MomentsAccountant {
            q,
            orders,
            spendings: Vec::new(),
        })
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    pub fn spendings(&self) -> &[Spending] {
        &self.spendings
    }

    pub fn total_rounds(&self) -> u64 {
        self.spendings.iter().map(|s| s.rounds).sum()
    }

    /// Records `rounds` invocations of the mechanism at noise scale `z`.
    pub fn accum_priv_spending(&mut self, z: f64, rounds: u64) -> Result<()> {
        if rounds == 0 {
            return Ok(());
        }
        if let Some(s) = self.spendings.iter_mut().find(|s| s.z.to_bits() == z.to_bits()) {
            s.rounds += rounds;
            return Ok(());
        }
        let per_round = self
            .orders
            .iter()
            .map(|&l| log_moment(self.q, z, l))
            .collect::<Result<Vec<_>>>()?;
        self.spendings.push(Spending { z, rounds, per_round });
        Ok(())
    }

    /// Accumulated `alpha(lambda)` for each configured order.
    pub fn log_moments(&self) -> Vec<f64> {
        let mut total = alloc::vec![0.0; self.orders.len()];
        for s in &self.spendings {
            for (t, a) in total.iter_mut().zip(&s.per_round) {
                *t += s.rounds as f64 * a;
            }
        }
        total
    }

    /// Smallest `eps` such that the spending so far is `(eps, delta)`-DP.
    pub fn get_privacy_spent(&self, delta: f64) -> Result<f64> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::config(format!("delta must lie in (0, 1), got {delta}")));
        }
        if self.spendings.is_empty() {
            return Ok(0.0);
        }
        let log_inv_delta = -libm::log(delta);
        Ok(self
            .orders
            .iter()
            .zip(self.log_moments())
            .map(|(&l, a)| (a + log_inv_delta) / f64::from(l))
            .fold(f64::INFINITY, f64::min))
    }
}

/// `delta = K^-1.1`, the convention used when tabulating guarantees by population size.
pub fn table_delta(users: u64) -> f64 {
    libm::pow(users as f64, -1.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    /// Population size `K`.
    pub users: u64,
    /// Expected users per round `C~ = qK`.
    pub expected_users: u64,
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub users: u64,
    pub expected_users: u64,
    pub z: f64,
    pub rounds: u64,
    pub delta: f64,
    pub epsilon: f64,
}

/// Epsilon at each round checkpoint for each `(K, C~, z)` row, with
/// `q = C~/K` and `delta = K^-1.1`.
pub fn build_privacy_table(rows: &[TableRow], checkpoints: &[u64]) -> Result<Vec<TableEntry>> {
    let mut checkpoints = checkpoints.to_vec();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    let mut out = Vec::with_capacity(rows.len() * checkpoints.len());
    for row in rows {
        if row.expected_users == 0 || row.expected_users > row.users {
            return Err(Error::config(format!(
                "expected users per round ({}) must lie in 1..=K ({})",
                row.expected_users, row.users
            )));
        }
        let q = row.expected_users as f64 / row.users as f64;
        let delta = table_delta(row.users);
        let mut acc = MomentsAccountant::new(q)?;
        let mut done = 0;
        for &rounds in &checkpoints {
            acc.accum_priv_spending(row.z, rounds - done)?;
            done = rounds;
            out.push(TableEntry {
                users: row.users,
                expected_users: row.expected_users,
                z: row.z,
                rounds,
                delta,
                epsilon: acc.get_privacy_spent(delta)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `E_mu[(mu/mu0)^l] = sum_i C(l+1, i) (1-q)^(l+1-i) q^i exp((i^2 - i) / (2 z^2))`,
    /// a positive-term expansion that shares no code with the quadrature.
    fn mixture_moment_by_binomial(q: f64, z: f64, l: u32) -> f64 {
        let n = l + 1;
        let mut log_binom = 0.0f64;
        let mut terms = std::vec::Vec::new();
        for i in 0..=n {
            let fi = f64::from(i);
            let log_q_part = if i == 0 { 0.0 } else { fi * libm::log(q) };
            let log_rest = if n == i { 0.0 } else { f64::from(n - i) * libm::log1p(-q) };
            terms.push(log_binom + log_q_part + log_rest + (fi * fi - fi) / (2.0 * z * z));
            log_binom += libm::log(f64::from(n - i) / (fi + 1.0));
        }
        let m = terms.iter().copied().filter(|t| t.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        m + libm::log(terms.iter().map(|t| libm::exp(t - m)).sum::<f64>())
    }

    // log E_null and log E_mixture from 40-digit mpmath quadrature.
    #[allow(clippy::excessive_precision)]
    const FROZEN: [(f64, f64, u32, f64, f64); 6] = [
        (0.01, 1.0, 1, 0.000_160_222_649_818_553_62, 0.000_171_813_422_074_547_94),
        (0.01, 1.0, 8, 0.005_067_157_158_292_310_1, 0.014_253_296_347_064_086),
        (0.001, 1.0, 32, 0.000_836_624_113_292_543_75, 300.044_075_794_006_98),
        (0.05, 0.8, 4, 0.043_769_722_644_067_419, 1.241_474_316_904_101_9),
        (0.3, 2.0, 16, 1.760_879_999_623_321_6, 14.324_893_305_449_337),
        (1e-6, 1.0, 20, 3.608_177_336_244_226_1e-10, 3.608_577_137_446_456_4e-10),
    ];

    #[test]
    fn quadrature_matches_high_precision_values() {
        for (q, z, l, null, mixture) in FROZEN {
            let got_null = log_expectation(q, z, l, Expectation::Null).unwrap();
            let got_mix = log_expectation(q, z, l, Expectation::Mixture).unwrap();
            assert!((got_null - null).abs() <= 1e-10 * null.abs().max(1e-4), "null {q} {z} {l}: {got_null} vs {null}");
            assert!((got_mix - mixture).abs() <= 1e-10 * mixture.abs().max(1e-4), "mix {q} {z} {l}: {got_mix} vs {mixture}");
        }
    }

    #[test]
    fn mixture_expectation_matches_binomial_expansion() {
        for &q in &[1e-4, 1e-3, 0.01, 0.1, 0.5, 1.0] {
            for &z in &[0.7, 1.0, 1.5, 3.0] {
                for l in [1, 2, 5, 11, 24, 32] {
                    let quad = log_expectation(q, z, l, Expectation::Mixture).unwrap();
                    let oracle = mixture_moment_by_binomial(q, z, l);
                    let tol = 1e-9 * oracle.abs() + 1e-13;
                    assert!((quad - oracle).abs() <= tol, "q={q} z={z} l={l}: {quad} vs {oracle}");
                }
            }
        }
    }

    #[test]
    fn unsampled_mechanism_has_closed_form() {
        for &z in &[0.5, 1.0, 2.0, 4.0] {
            for l in 1..=32 {
                let expected = f64::from(l * (l + 1)) / (2.0 * z * z);
                let got = log_moment(1.0, z, l).unwrap();
                assert!((got - expected).abs() <= 1e-10 * expected, "z={z} l={l}: {got} vs {expected}");
            }
            assert!((log_moment(1.0, z, 1).unwrap() - 1.0 / (z * z)).abs() < 1e-12);
        }
    }

    #[test]
    fn vanishing_sampling_rate_has_vanishing_moment() {
        for l in [1, 8, 32] {
            let a = log_moment(1e-12, 1.0, l).unwrap();
            assert!((0.0..1e-15).contains(&a), "{a}");
        }
    }

    #[test]
    fn bad_arguments_are_rejected() {
        assert!(log_moment(0.0, 1.0, 1).is_err());
        assert!(log_moment(1.5, 1.0, 1).is_err());
        assert!(log_moment(0.1, 0.0, 1).is_err());
        assert!(log_moment(0.1, 1.0, 0).is_err());
        assert!(MomentsAccountant::new(0.1).unwrap().get_privacy_spent(1.0).is_err());
    }

    #[test]
    fn fresh_accountant_spends_nothing() {
        let acc = MomentsAccountant::new(0.01).unwrap();
        assert_eq!(acc.get_privacy_spent(1e-5).unwrap(), 0.0);
        let mut acc2 = acc.clone();
        acc2.accum_priv_spending(1.0, 0).unwrap();
        assert_eq!(acc2, acc);
    }

    #[test]
    fn composition_is_exactly_additive() {
        let mut split = MomentsAccountant::new(0.01).unwrap();
        split.accum_priv_spending(1.0, 10).unwrap();
        split.accum_priv_spending(1.0, 90).unwrap();
        let mut once = MomentsAccountant::new(0.01).unwrap();
        once.accum_priv_spending(1.0, 100).unwrap();
        assert_eq!(split.log_moments(), once.log_moments());

        let single = MomentsAccountant::new(0.01).map(|mut a| {
            a.accum_priv_spending(1.0, 1).unwrap();
            a.log_moments()
        });
        for (total, one) in once.log_moments().iter().zip(single.unwrap()) {
            assert_eq!(*total, 100.0 * one);
        }
    }

    #[test]
    fn first_table_row_single_round() {
        let mut acc = MomentsAccountant::new(1e-3).unwrap();
        acc.accum_priv_spending(1.0, 1).unwrap();
        let eps = acc.get_privacy_spent(libm::pow(10.0, -5.5)).unwrap();
        assert!((eps - 0.97).abs() <= 0.02, "{eps}");
    }

    #[test]
    fn table_rejects_oversized_samples() {
        let row = TableRow {
            users: 10,
            expected_users: 20,
            z: 1.0,
        };
        assert!(build_privacy_table(&[row], &[1]).is_err());
    }

    #[test]
    fn tiny_noise_scales_still_integrate() {
        let mut last = 0.0;
        for l in 1..=32 {
            let a = log_moment(0.1, 0.001, l).unwrap();
            assert!(a.is_finite() && a > last, "lambda {l}: {a}");
            last = a;
        }
        // nearly noiseless, so the moment is enormous
        assert!(log_moment(0.1, 0.001, 1).unwrap() > 1e5);
    }
}
