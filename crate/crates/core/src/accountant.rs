//! Rényi-DP accounting for the sampled Gaussian mechanism.
//!
//! Each local round releases a clipped gradient sum of Poisson-subsampled
//! records with Gaussian noise. Its RDP cost at integer order `α` is
//! `log(A_α) / (α - 1)` with
//!
//! ```text
//! A_α = Σ_{k=0}^{α} C(α,k) (1-q)^{α-k} q^k exp((k² - k) / (2σ²))
//! ```
//!
//! Costs compose additively per order, and the accumulated RDP curve is
//! converted to an `(ε, δ)` guarantee by minimizing
//! `rdp(α) + log(1/δ) / (α - 1)` over the order grid.
//!
//! The sum is evaluated in log-space. Because the binomial weights sum to one
//! and the `k = 0, 1` exponents vanish, `A_α - 1` is a sum of strictly
//! positive terms, which keeps the result accurate even when `A_α` is within
//! a few ulps of one (small `q`, large `σ`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default `δ` for the DP conversion.
pub const DEFAULT_DELTA: f64 = 1e-5;

/// Smallest and largest order of the default grid.
pub const DEFAULT_MIN_ORDER: u32 = 2;
pub const DEFAULT_MAX_ORDER: u32 = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AccountantError {
    #[error("invalid RDP order {0}; orders must be integers >= 2")]
    InvalidOrder(u32),
    #[error("invalid order grid: {0}")]
    InvalidGrid(String),
    #[error("invalid round cost (q = {q}, sigma = {sigma}); need 0 <= q <= 1 and sigma > 0")]
    InvalidCost { q: f64, sigma: f64 },
    #[error("RDP at order {order} is not representable for q = {q}, sigma = {sigma}")]
    Overflow { order: u32, q: f64, sigma: f64 },
    #[error("delta must lie in (0, 1), got {0}")]
    InvalidDelta(f64),
    #[error("no usable RDP order left in the ledger")]
    NoUsableOrder,
    #[error("round cost is zero at every order; the number of rounds is unbounded")]
    UnboundedRounds,
    #[error("ledger grids differ")]
    GridMismatch,
}

pub type Result<T, E = AccountantError> = std::result::Result<T, E>;

/// Strictly increasing set of integer RDP orders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct RdpOrderGrid {
    orders: Vec<u32>,
}

impl RdpOrderGrid {
    pub fn new(orders: Vec<u32>) -> Result<Self> {
        if orders.is_empty() {
            return Err(AccountantError::InvalidGrid("grid is empty".into()));
        }
        if let Some(&bad) = orders.iter().find(|&&a| a < 2) {
            return Err(AccountantError::InvalidOrder(bad));
        }
        if orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AccountantError::InvalidGrid(
                "orders must be strictly increasing".into(),
            ));
        }
        Ok(Self { orders })
    }

    /// Inclusive integer range `lo..=hi`.
    pub fn range(lo: u32, hi: u32) -> Result<Self> {
        Self::new((lo..=hi).collect())
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }
}

impl Default for RdpOrderGrid {
    fn default() -> Self {
        Self {
            orders: (DEFAULT_MIN_ORDER..=DEFAULT_MAX_ORDER).collect(),
        }
    }
}

impl TryFrom<Vec<u32>> for RdpOrderGrid {
    type Error = AccountantError;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RdpOrderGrid> for Vec<u32> {
    fn from(g: RdpOrderGrid) -> Self {
        g.orders
    }
}

/// Sampling ratio and noise multiplier of one sampled-Gaussian release.
///
/// `q = 0` is accepted as a degenerate zero-cost input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundCost {
    q: f64,
    sigma: f64,
}

impl RoundCost {
    pub fn new(q: f64, sigma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&q) || !(sigma > 0.0) || !sigma.is_finite() {
            return Err(AccountantError::InvalidCost { q, sigma });
        }
        Ok(Self { q, sigma })
    }

    /// Cost of a lot of expected size `lot_size` drawn from `dataset_size`
    /// records; the ratio saturates at one.
    pub fn from_lot(lot_size: usize, dataset_size: usize, sigma: f64) -> Result<Self> {
        let q = if dataset_size == 0 {
            1.0
        } else {
            (lot_size as f64 / dataset_size as f64).min(1.0)
        };
        Self::new(q, sigma)
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// RDP cost of a single sampled-Gaussian round at `order`.
pub fn sgm_rdp(cost: RoundCost, order: u32) -> Result<f64> {
    if order < 2 {
        return Err(AccountantError::InvalidOrder(order));
    }
    // Re-validate: the fields are private but a deserialized value may be bad.
    let RoundCost { q, sigma } = RoundCost::new(cost.q, cost.sigma)?;
    let overflow = || AccountantError::Overflow { order, q, sigma };
    let a = f64::from(order);
    let two_var = 2.0 * sigma * sigma;

    if q == 0.0 {
        return Ok(0.0);
    }
    if q == 1.0 {
        // Plain Gaussian mechanism: only the k = α term survives.
        let rdp = a / two_var;
        return if rdp.is_finite() { Ok(rdp) } else { Err(overflow()) };
    }

    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let mut terms = Vec::with_capacity(order as usize - 1);
    for k in 2..=order {
        let kf = f64::from(k);
        let x = (kf * kf - kf) / two_var;
        let t = ln_binomial(order, k) + (a - kf) * log_1mq + kf * log_q + ln_expm1(x);
        if t.is_nan() {
            return Err(overflow());
        }
        terms.push(t);
    }
    let log_excess = log_sum_exp(&terms);
    let log_a = softplus(log_excess);
    let rdp = log_a / (a - 1.0);
    if rdp.is_finite() && rdp >= 0.0 {
        Ok(rdp)
    } else {
        Err(overflow())
    }
}

/// `ln C(n, k)`, exact in integer arithmetic while the coefficient fits in
/// a `u128`.
fn ln_binomial(n: u32, k: u32) -> f64 {
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 1..=u128::from(k) {
        // c * (n - k + i) / i stays integral at every step.
        match c.checked_mul(u128::from(n - k) + i) {
            Some(v) => c = v / i,
            None => return ln_binomial_sum(n, k),
        }
    }
    (c as f64).ln()
}

fn ln_binomial_sum(n: u32, k: u32) -> f64 {
    (1..=k)
        .map(|i| f64::from(n - k + i).ln() - f64::from(i).ln())
        .sum()
}

/// `ln(exp(x) - 1)` for `x >= 0`.
fn ln_expm1(x: f64) -> f64 {
    if x > 40.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

/// `ln(1 + exp(y))`.
fn softplus(y: f64) -> f64 {
    if y > 0.0 {
        y + (-y).exp().ln_1p()
    } else {
        y.exp().ln_1p()
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    let sum: f64 = terms.iter().map(|&t| (t - max).exp()).sum();
    max + sum.ln()
}

/// Compensated running sum (Neumaier), so that composing many identical
/// rounds stays within an ulp of the exact product.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
struct Compensated {
    sum: f64,
    comp: f64,
}

impl Compensated {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Accumulated RDP curve of one client.
///
/// Orders whose per-round cost was not representable are dropped from the
/// minimization for the rest of the ledger's life.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    grid: RdpOrderGrid,
    rdp: Vec<Option<Compensated>>,
    rounds: u64,
}

impl PrivacyLedger {
    pub fn new(grid: RdpOrderGrid) -> Self {
        let rdp = vec![Some(Compensated::default()); grid.len()];
        Self {
            grid,
            rdp,
            rounds: 0,
        }
    }

    pub fn grid(&self) -> &RdpOrderGrid {
        &self.grid
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    /// Accumulated RDP per order; `None` marks an unusable order.
    pub fn rdp_eps(&self) -> Vec<Option<f64>> {
        self.rdp.iter().map(|c| c.map(|c| c.value())).collect()
    }

    /// Accumulated RDP at `order`, if the order is in the grid and usable.
    pub fn rdp_at(&self, order: u32) -> Option<f64> {
        let i = self.grid.orders().binary_search(&order).ok()?;
        self.rdp[i].map(|c| c.value())
    }

    /// Composes one more round into the ledger in place.
    pub fn record(&mut self, cost: RoundCost) -> Result<()> {
        let mut next = self.rdp.clone();
        for (slot, &order) in next.iter_mut().zip(self.grid.orders()) {
            if let Some(acc) = slot {
                match sgm_rdp(cost, order) {
                    Ok(v) => acc.add(v),
                    Err(AccountantError::Overflow { .. }) => *slot = None,
                    Err(e) => return Err(e),
                }
            }
        }
        self.rdp = next;
        self.rounds += 1;
        Ok(())
    }

    /// Composes `n` identical rounds at once, adding `n · rdp` per order.
    pub fn record_rounds(&mut self, cost: RoundCost, n: u64) -> Result<()> {
        let mut next = self.rdp.clone();
        for (slot, &order) in next.iter_mut().zip(self.grid.orders()) {
            if let Some(acc) = slot {
                match sgm_rdp(cost, order) {
                    Ok(v) => acc.add(v * n as f64),
                    Err(AccountantError::Overflow { .. }) => *slot = None,
                    Err(e) => return Err(e),
                }
            }
        }
        self.rdp = next;
        self.rounds += n;
        Ok(())
    }

    pub fn to_dp(&self, delta: f64) -> Result<DpGuarantee> {
        to_dp(self, delta)
    }
}

impl Default for PrivacyLedger {
    fn default() -> Self {
        Self::new(RdpOrderGrid::default())
    }
}

/// Returns a new ledger with `cost` composed into it.
pub fn accumulate(ledger: &PrivacyLedger, cost: RoundCost) -> Result<PrivacyLedger> {
    let mut next = ledger.clone();
    next.record(cost)?;
    Ok(next)
}

/// `(ε, δ)` guarantee and the order attaining it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpGuarantee {
    pub epsilon: f64,
    pub delta: f64,
    pub best_order: u32,
}

/// Converts the RDP curve to `(ε, δ)`-DP, minimizing over usable orders.
/// Ties go to the smallest order.
pub fn to_dp(ledger: &PrivacyLedger, delta: f64) -> Result<DpGuarantee> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AccountantError::InvalidDelta(delta));
    }
    let log_inv_delta = (1.0 / delta).ln();
    let mut best: Option<(f64, u32)> = None;
    for (slot, &order) in ledger.rdp.iter().zip(ledger.grid.orders()) {
        let Some(acc) = slot else { continue };
        let eps = acc.value() + log_inv_delta / f64::from(order - 1);
        if best.is_none_or(|(b, _)| eps < b) {
            best = Some((eps, order));
        }
    }
    let (epsilon, best_order) = best.ok_or(AccountantError::NoUsableOrder)?;
    Ok(DpGuarantee {
        epsilon,
        delta,
        best_order,
    })
}

/// Largest `T` such that `T` identical rounds of `cost` stay within
/// `budget`. Returns 0 when even the first round exceeds it.
pub fn rounds_until_budget(
    cost: RoundCost,
    delta: f64,
    budget: f64,
    grid: &RdpOrderGrid,
) -> Result<u64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AccountantError::InvalidDelta(delta));
    }
    let log_inv_delta = (1.0 / delta).ln();
    let mut per_order = Vec::with_capacity(grid.len());
    for &order in grid.orders() {
        match sgm_rdp(cost, order) {
            Ok(r) => per_order.push((r, log_inv_delta / f64::from(order - 1))),
            Err(AccountantError::Overflow { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if per_order.is_empty() {
        return Err(AccountantError::NoUsableOrder);
    }
    let eps_after = |t: u64| {
        per_order
            .iter()
            .map(|&(r, c)| t as f64 * r + c)
            .fold(f64::INFINITY, f64::min)
    };

    if eps_after(0) > budget {
        return Ok(0);
    }
    if per_order.iter().any(|&(r, c)| r == 0.0 && c <= budget) {
        return Err(AccountantError::UnboundedRounds);
    }
    // Closed-form candidate per order, then nudge it against the exact test.
    let mut t = per_order
        .iter()
        .filter(|&&(_, c)| c <= budget)
        .map(|&(r, c)| ((budget - c) / r).floor())
        .fold(0.0, f64::max) as u64;
    while eps_after(t + 1) <= budget {
        t += 1;
    }
    while t > 0 && eps_after(t) > budget {
        t -= 1;
    }
    Ok(t)
}
