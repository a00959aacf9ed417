//! Shared test helpers: an arbitrary-precision accountant oracle and a
//! finite-difference gradient check.
#![allow(dead_code)]

pub mod checks;
pub mod scenarios;

use adapfl_core::smallmodel::{Example, Mlp, Model};
use astro_float::{BigFloat, Consts, RoundingMode};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// 256-bit mantissa, about 77 significant decimal digits.
pub const PREC: usize = 256;
const RM: RoundingMode = RoundingMode::ToEven;

pub struct Oracle {
    cc: Consts,
}

impl Default for Oracle {
    fn default() -> Self {
        Self::new()
    }
}

impl Oracle {
    pub fn new() -> Self {
        Self {
            cc: Consts::new().expect("astro-float constants"),
        }
    }

    pub fn big(&self, x: f64) -> BigFloat {
        BigFloat::from_f64(x, PREC)
    }

    pub fn int(&self, x: u64) -> BigFloat {
        BigFloat::from_u64(x, PREC)
    }

    pub fn ln(&mut self, x: &BigFloat) -> BigFloat {
        x.ln(PREC, RM, &mut self.cc)
    }

    pub fn exp(&mut self, x: &BigFloat) -> BigFloat {
        x.exp(PREC, RM, &mut self.cc)
    }

    /// `ln A_α` by direct summation over `k = 0..=α` of
    /// `C(α,k) (1−q)^(α−k) q^k exp((k²−k)/(2σ²))`.
    pub fn ln_a(&mut self, q: f64, sigma: f64, order: u32) -> BigFloat {
        let qb = self.big(q);
        let one = self.int(1);
        let p = one.sub(&qb, PREC, RM);
        let s = self.big(sigma);
        let two_var = s.mul(&s, PREC, RM).mul(&self.int(2), PREC, RM);
        let mut total = self.int(0);
        let mut binom = self.int(1);
        for k in 0..=u64::from(order) {
            if k > 0 {
                binom = binom
                    .mul(&self.int(u64::from(order) - k + 1), PREC, RM)
                    .div(&self.int(k), PREC, RM);
            }
            let mut term = binom.clone();
            for _ in 0..k {
                term = term.mul(&qb, PREC, RM);
            }
            for _ in 0..(u64::from(order) - k) {
                term = term.mul(&p, PREC, RM);
            }
            let expo = self.int(k * k - k).div(&two_var, PREC, RM);
            term = term.mul(&self.exp(&expo), PREC, RM);
            total = total.add(&term, PREC, RM);
        }
        self.ln(&total)
    }

    /// Single-round RDP at `order`.
    pub fn rdp(&mut self, q: f64, sigma: f64, order: u32) -> BigFloat {
        self.ln_a(q, sigma, order)
            .div(&self.int(u64::from(order) - 1), PREC, RM)
    }

    /// `min_α rdp[α] + ln(1/δ)/(α−1)` and the smallest minimizing order.
    pub fn to_dp(&mut self, rdp: &[BigFloat], orders: &[u32], delta: f64) -> (BigFloat, u32) {
        let log_inv_delta = self.ln(&self.int(1).div(&self.big(delta), PREC, RM));
        let mut best: Option<(BigFloat, u32)> = None;
        for (r, &a) in rdp.iter().zip(orders) {
            let eps = r.add(
                &log_inv_delta.div(&self.int(u64::from(a) - 1), PREC, RM),
                PREC,
                RM,
            );
            let better = match &best {
                None => true,
                Some((b, _)) => eps < *b,
            };
            if better {
                best = Some((eps, a));
            }
        }
        best.expect("nonempty grid")
    }

    /// Smallest `T` with ε(T) > `budget` for identical rounds, found by
    /// composing one round at a time; also returns ε(T−1).
    pub fn first_round_over(
        &mut self,
        q: f64,
        sigma: f64,
        delta: f64,
        budget: f64,
        orders: &[u32],
    ) -> (u64, f64) {
        let per_round: Vec<BigFloat> = orders.iter().map(|&a| self.rdp(q, sigma, a)).collect();
        let mut acc: Vec<BigFloat> = orders.iter().map(|_| self.int(0)).collect();
        let budget = self.big(budget);
        let mut prev = self.to_dp(&acc, orders, delta).0;
        for t in 1u64.. {
            for (a, r) in acc.iter_mut().zip(&per_round) {
                *a = a.add(r, PREC, RM);
            }
            let eps = self.to_dp(&acc, orders, delta).0;
            if eps > budget {
                return (t, to_f64(&prev));
            }
            prev = eps;
        }
        unreachable!()
    }
}

pub fn to_f64(x: &BigFloat) -> f64 {
    format!("{x}").parse().expect("decimal BigFloat")
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        ((got - want) / want).abs()
    }
}

/// Central-difference check of `example_gradient` at a random point.
///
/// Parameters are the model's initialization plus N(0, 0.5²) jitter and the
/// example has features in [-1, 1]. For models with ReLU units the example
/// is redrawn until every hidden pre-activation is at least 1e-3 away from
/// the kink. Every coordinate must satisfy
/// `|fd - g| <= 1e-5 * max(|fd|, |g|) + 1e-7`.
pub fn fd_check(model: &dyn Model, kinks: Option<&Mlp>, rng: &mut ChaCha8Rng) -> Result<(), String> {
    const H: f64 = 1e-6;
    let mut params = model.init_params(rng);
    for v in params.values_mut() {
        *v += 0.5 * rng.sample::<f64, _>(StandardNormal);
    }
    let ex = loop {
        let features: Vec<f64> = (0..model.input_dim())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let ex = Example::new(features, rng.random_range(0..model.num_classes()));
        let clear = match kinks {
            Some(mlp) => mlp
                .pre_activations(&params, &ex.features)
                .map_err(|e| e.to_string())?
                .iter()
                .all(|z| z.abs() >= 1e-3),
            None => true,
        };
        if clear {
            break ex;
        }
    };
    let (grad, loss) = model.example_gradient(&params, &ex).map_err(|e| e.to_string())?;
    let base = model.loss(&params, &ex).map_err(|e| e.to_string())?;
    if loss != base {
        return Err(format!("reported loss {loss} differs from loss() {base}"));
    }
    for i in 0..params.len() {
        let mut plus = params.clone();
        plus.values_mut()[i] += H;
        let mut minus = params.clone();
        minus.values_mut()[i] -= H;
        let fd = (model.loss(&plus, &ex).map_err(|e| e.to_string())?
            - model.loss(&minus, &ex).map_err(|e| e.to_string())?)
            / (2.0 * H);
        let g = grad.values()[i];
        if (fd - g).abs() > 1e-5 * fd.abs().max(g.abs()) + 1e-7 {
            return Err(format!("coordinate {i}: analytic {g}, finite difference {fd}"));
        }
    }
    Ok(())
}
