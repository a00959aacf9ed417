//! Seeded property loops shared by the integration tests and the acceptance
//! runner. Each returns the number of cases checked or the first failure.

use std::sync::Arc;

use adapfl_core::dpcore::{
    clip, clipped_sum, next_threshold, noisy_mean, ClipConfig, ClipState, GaussianSampler,
};
use adapfl_core::scheduler::{SigmaState, WINDOW};
use adapfl_core::smallmodel::{LayerShape, ParamShape, ParamVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Outcome = Result<usize, String>;

fn shape(n: usize) -> Arc<ParamShape> {
    Arc::new(ParamShape::new(vec![LayerShape::new("g", vec![n])]))
}

fn random_vector(rng: &mut ChaCha8Rng, shape: &Arc<ParamShape>) -> ParamVector {
    // Log-uniform scale between 1e-6 and 1e6.
    let scale = 10f64.powf(rng.random_range(-6.0..6.0));
    let v = (0..shape.len())
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    ParamVector::new(v, shape.clone()).unwrap()
}

fn random_threshold(rng: &mut ChaCha8Rng) -> f64 {
    10f64.powf(rng.random_range(-4.0..4.0))
}

/// Output norm ≤ C (1 + 1e-12); inputs already within C come back unchanged.
pub fn clip_bound(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let s = shape(rng.random_range(1..40));
        let g = random_vector(&mut rng, &s);
        let c = random_threshold(&mut rng);
        let out = clip(&g, c).map_err(|e| e.to_string())?;
        let n = out.norm_l2();
        if n > c * (1.0 + 1e-12) {
            return Err(format!("case {case}: clipped norm {n} exceeds {c}"));
        }
        if g.norm_l2() <= c && out != g {
            return Err(format!("case {case}: in-bound gradient was modified"));
        }
        if clip(&out, c).map_err(|e| e.to_string())? != out {
            return Err(format!("case {case}: clip is not idempotent"));
        }
    }
    Ok(cases)
}

/// With σ = 0 the noisy mean is exactly the clipped sum divided by L.
pub fn zero_sigma_exact(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let s = shape(rng.random_range(1..20));
        let c = random_threshold(&mut rng);
        let n = rng.random_range(0..12);
        let lot: Vec<ParamVector> = (0..n)
            .map(|_| clip(&random_vector(&mut rng, &s), c).unwrap())
            .collect();
        let l = rng.random_range(1..30usize);
        let mut noise = GaussianSampler::new(rng.random());
        let got = noisy_mean(&lot, &s, c, 0.0, l, &mut noise).map_err(|e| e.to_string())?;
        for (i, &v) in got.values().iter().enumerate() {
            let mut sum = 0.0;
            for g in &lot {
                sum += g.values()[i];
            }
            if v != sum / l as f64 {
                return Err(format!("case {case}: coordinate {i} is {v}, want {}", sum / l as f64));
            }
        }
    }
    Ok(cases)
}

/// The next threshold never drops below the configured floor.
pub fn threshold_floor(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let floor = 10f64.powf(rng.random_range(-8.0..1.0));
        let cfg = ClipConfig::new(10f64.powf(rng.random_range(-3.0..1.0)), floor).unwrap();
        let state = ClipState {
            threshold: random_threshold(&mut rng),
            previous_sigma: 1.0,
        };
        let norms: Vec<f64> = (0..rng.random_range(0..50))
            .map(|_| rng.random_range(0.0..10.0))
            .collect();
        let sigma_prev = rng.random_range(0.0..8.0);
        let l = rng.random_range(1..100);
        let mut noise = GaussianSampler::new(rng.random());
        let next = next_threshold(&norms, &state, &cfg, sigma_prev, l, &mut noise)
            .map_err(|e| e.to_string())?;
        if !(next.threshold >= floor) {
            return Err(format!("case {case}: threshold {} below floor {floor}", next.threshold));
        }
    }
    Ok(cases)
}

/// Same noise draw, factor `a` versus factor 1: the threshold scales by `a`
/// exactly whenever neither result is floored.
pub fn threshold_linear(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    while checked < cases {
        let a = 10f64.powf(rng.random_range(-3.0..2.0));
        let floor = 1e-300;
        let unit = ClipConfig::new(1.0, floor).unwrap();
        let scaled = ClipConfig::new(a, floor).unwrap();
        let state = ClipState {
            threshold: random_threshold(&mut rng),
            previous_sigma: 1.0,
        };
        let norms: Vec<f64> = (0..rng.random_range(1..50))
            .map(|_| rng.random_range(0.0..10.0))
            .collect();
        let sigma_prev = rng.random_range(0.0..8.0);
        let l = rng.random_range(1..100);
        let noise = GaussianSampler::new(rng.random());
        let n1 = next_threshold(&norms, &state, &unit, sigma_prev, l, &mut noise.clone())
            .map_err(|e| e.to_string())?;
        let na = next_threshold(&norms, &state, &scaled, sigma_prev, l, &mut noise.clone())
            .map_err(|e| e.to_string())?;
        if n1.threshold <= floor || na.threshold <= floor {
            continue;
        }
        if na.threshold != a * n1.threshold {
            return Err(format!(
                "case {checked}: factor {a} gave {}, want {}",
                na.threshold,
                a * n1.threshold
            ));
        }
        checked += 1;
    }
    Ok(cases)
}

/// Replacing one example moves the clipped sum by at most 2C, adding or
/// removing one moves it by at most C, and opposite over-long gradients
/// reach 2C.
pub fn sensitivity(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let s = shape(rng.random_range(1..20));
        let c = random_threshold(&mut rng);
        let tol = c * (1.0 + 1e-9);
        let n = rng.random_range(1..12);
        let mut lot: Vec<ParamVector> = (0..n)
            .map(|_| clip(&random_vector(&mut rng, &s), c).unwrap())
            .collect();
        let sum = clipped_sum(&lot, &s, c).map_err(|e| e.to_string())?;
        let j = rng.random_range(0..n);
        lot[j] = clip(&random_vector(&mut rng, &s), c).unwrap();
        let replaced = clipped_sum(&lot, &s, c).map_err(|e| e.to_string())?;
        let d = distance(&sum, &replaced);
        if d > 2.0 * tol {
            return Err(format!("case {case}: replacement moved the sum by {d} > 2C = {}", 2.0 * c));
        }
        lot.remove(j);
        let removed = clipped_sum(&lot, &s, c).map_err(|e| e.to_string())?;
        let d = distance(&replaced, &removed);
        if d > tol {
            return Err(format!("case {case}: removal moved the sum by {d} > C = {c}"));
        }

        let mut g = random_vector(&mut rng, &s);
        let norm = g.norm_l2();
        g.scale(10.0 * c / norm);
        let mut neg = g.clone();
        neg.scale(-1.0);
        let d = distance(&clip(&g, c).unwrap(), &clip(&neg, c).unwrap());
        if (d - 2.0 * c).abs() > 1e-9 * c {
            return Err(format!("case {case}: opposite pair distance {d}, want {}", 2.0 * c));
        }
    }
    Ok(cases)
}

fn distance(a: &ParamVector, b: &ParamVector) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Random loss sequence with plenty of ties and runs.
fn loss_sequence(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let len = rng.random_range(0..40);
    let mut level: f64 = rng.random_range(1.0..10.0);
    (0..len)
        .map(|_| {
            match rng.random_range(0..4) {
                0 => {}
                1 => level += rng.random_range(0.0..1.0),
                _ => level -= rng.random_range(0.0..1.0),
            }
            // Coarse grid so equal values actually occur.
            (level * 8.0).round() / 8.0
        })
        .collect()
}

/// Scheduler decisions agree with a from-scratch window scan after every
/// loss, and sigma equals `sigma0 · β · β · …` bit for bit.
pub fn scheduler_rescan(sequences: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..sequences {
        let sigma0 = rng.random_range(0.5..8.0);
        let beta = rng.random_range(0.5..0.99999);
        let losses = loss_sequence(&mut rng);
        let mut state = SigmaState::new(sigma0, beta).unwrap();
        let mut decays = 0u64;
        for t in 0..losses.len() {
            let fired = state.observe_loss(losses[t]).map_err(|e| e.to_string())?;
            let mut hist = vec![f64::INFINITY; WINDOW - 1];
            hist.extend_from_slice(&losses[..=t]);
            let w = &hist[hist.len() - WINDOW..];
            let want = w[0] > w[1] && w[1] > w[2] && w[2] > w[3];
            if fired != want {
                return Err(format!("sequence {case} step {t}: fired {fired}, scan says {want}"));
            }
            decays += u64::from(want);
        }
        let mut expect = sigma0;
        for _ in 0..decays {
            expect *= beta;
        }
        if state.decay_count() != decays || state.current_sigma().to_bits() != expect.to_bits() {
            return Err(format!(
                "sequence {case}: sigma {} after {} decays, want {expect} after {decays}",
                state.current_sigma(),
                state.decay_count()
            ));
        }
    }
    Ok(sequences)
}
