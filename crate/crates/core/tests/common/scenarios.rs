//! End-to-end scenarios shared by the federation tests and the acceptance
//! runner.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use adapfl_core::accountant::{PrivacyLedger, RdpOrderGrid, RoundCost};
use adapfl_core::datasets::{synth, Partition};
use adapfl_core::experiment::{self, ExperimentConfig};
use adapfl_core::federation::{
    self, server_stream, Budget, ClipMode, FederationConfig, NoiseMode, RoundRecord,
};
use adapfl_core::smallmodel::{evaluate, Mlp, Model, OptimizerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One client holding the whole training set with `L = |D|`, no noise and
/// a clip threshold no gradient reaches, against plain full-batch Adam from
/// the same initialization. Returns the largest per-round gap in
/// validation loss together with the federated records.
pub fn degenerate_gap(rounds: usize, seed: u64) -> Result<(f64, Vec<RoundRecord>), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = synth(3, 6, 40, 3.0, &mut rng);
    let validation = synth(3, 6, 20, 3.0, &mut rng);
    let n = train.len();
    let model = Arc::new(Mlp::new(6, 8, 3));
    let opt = OptimizerConfig::adam(0.01);
    let cfg = FederationConfig {
        lot_size: n,
        clip: ClipMode::Constant { threshold: 1e12 },
        noise: NoiseMode::Constant { sigma: 0.0 },
        budget: Budget {
            epsilon: f64::INFINITY,
            delta: 1e-5,
        },
        rounds: rounds as u64,
        seed,
        optimizer: opt,
        grid: RdpOrderGrid::default(),
    };
    let partition = Partition {
        clients: vec![(0..n).collect()],
    };
    let out = federation::run(
        cfg,
        model.clone(),
        Arc::new(train.clone()),
        &partition,
        validation.clone(),
        validation.clone(),
    )
    .map_err(|e| e.to_string())?;
    if out.records.len() != rounds {
        return Err(format!("{} records for {rounds} rounds", out.records.len()));
    }

    let mut params = model.init_params(&mut server_stream(seed));
    let (b1, b2, eps, lr) = (opt.beta1, opt.beta2, opt.eps, opt.learning_rate);
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut gap = 0.0f64;
    for (t, rec) in out.records.iter().enumerate() {
        if rec.clients[0].realized_lot != n {
            return Err(format!("round {t}: lot of {} instead of {n}", rec.clients[0].realized_lot));
        }
        let mut mean = vec![0.0; params.len()];
        for ex in &train.examples {
            let (g, _) = model.example_gradient(&params, ex).map_err(|e| e.to_string())?;
            for (a, b) in mean.iter_mut().zip(g.values()) {
                *a += b;
            }
        }
        let step = t as i32 + 1;
        for i in 0..params.len() {
            let g = mean[i] / n as f64;
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / (1.0 - b1.powi(step));
            let v_hat = v[i] / (1.0 - b2.powi(step));
            params.values_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        let central = evaluate(model.as_ref(), &params, &validation.examples)
            .map_err(|e| e.to_string())?
            .loss;
        gap = gap.max((central - rec.val_loss).abs());
    }
    Ok((gap, out.records))
}

/// Per-client `(q, sigma)` history from a record stream, replayed through a
/// fresh ledger at every row. Returns the number of rows checked.
pub fn replay_records(
    records: &[RoundRecord],
    grid: &RdpOrderGrid,
    budget: f64,
    delta: f64,
) -> Result<usize, String> {
    let rows: Vec<LedgerRow> = records
        .iter()
        .flat_map(|r| {
            r.clients.iter().map(move |c| LedgerRow {
                round: r.round,
                client_id: c.client_id,
                q: c.q,
                sigma: c.sigma,
                eps_dp: c.eps_dp,
            })
        })
        .collect();
    replay_rows(&rows, grid, budget, delta)
}

#[derive(Debug, Clone, serde::Deserialize)]
pub struct LedgerRow {
    pub round: u64,
    pub client_id: usize,
    pub q: f64,
    pub sigma: f64,
    pub eps_dp: f64,
}

/// Replays each client's rows through one fresh ledger, checking the running
/// epsilon after every round, then confirms the full history once more with
/// `federation::replay_epsilon`.
pub fn replay_rows(
    rows: &[LedgerRow],
    grid: &RdpOrderGrid,
    budget: f64,
    delta: f64,
) -> Result<usize, String> {
    let mut ledgers: BTreeMap<usize, (PrivacyLedger, Vec<(f64, f64)>, f64)> = BTreeMap::new();
    for row in rows {
        let (ledger, history, last) = ledgers
            .entry(row.client_id)
            .or_insert_with(|| (PrivacyLedger::new(grid.clone()), Vec::new(), 0.0));
        history.push((row.q, row.sigma));
        // A noiseless round has no finite guarantee.
        let replayed = if *last == f64::INFINITY || row.sigma == 0.0 {
            f64::INFINITY
        } else {
            let cost = RoundCost::new(row.q, row.sigma).map_err(|e| e.to_string())?;
            ledger.record(cost).map_err(|e| e.to_string())?;
            ledger.to_dp(delta).map_err(|e| e.to_string())?.epsilon
        };
        if !same_eps(replayed, row.eps_dp) {
            return Err(format!(
                "round {} client {}: eps {} but replay gives {replayed}",
                row.round, row.client_id, row.eps_dp
            ));
        }
        if row.eps_dp > budget {
            return Err(format!(
                "round {} client {}: eps {} over budget {budget}",
                row.round, row.client_id, row.eps_dp
            ));
        }
        *last = row.eps_dp;
    }
    for (id, (_, history, last)) in &ledgers {
        let full = federation::replay_epsilon(history, grid, delta).map_err(|e| e.to_string())?;
        if !same_eps(full, *last) {
            return Err(format!("client {id}: full replay gives {full}, last row {last}"));
        }
    }
    Ok(rows.len())
}

fn same_eps(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-12
}

pub fn read_ledger_csv(path: &Path) -> Result<Vec<LedgerRow>, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    r.deserialize().map(|row| row.map_err(|e| e.to_string())).collect()
}

/// Desk-scale experiment: two separable blobs in 20 dimensions, 500 per
/// class, four clients with `L = 25`, adaptive clipping and noise, ε = 8.
pub fn desk_config(seed: u64, out: &Path) -> ExperimentConfig {
    let overrides: Vec<(String, String)> = [
        ("seed", seed.to_string()),
        ("rounds", "100000".into()),
        ("lot_size", "25".into()),
        ("output_dir", out.display().to_string()),
        ("data.source", "synth".into()),
        ("data.classes", "2".into()),
        ("data.dim", "20".into()),
        ("data.per_class", "500".into()),
        ("data.test_per_class", "500".into()),
        ("data.separation", "6".into()),
        ("partition.clients", "4".into()),
        ("partition.shards", "20".into()),
        ("partition.shards_per_client", "5".into()),
        ("model.kind", "logistic".into()),
        ("clip.mode", "adaptive".into()),
        ("clip.factor", "1.0".into()),
        ("noise.mode", "adaptive".into()),
        ("noise.sigma0", "2".into()),
        ("noise.beta", "0.999".into()),
        ("privacy.epsilon", "8".into()),
        ("privacy.delta", "1e-5".into()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    experiment::parse_config_str("", &overrides).expect("desk config")
}

/// Every metrics row: eps within budget and sigma never increasing down the
/// file. Returns the row count.
pub fn check_metrics_csv(path: &Path, budget: f64) -> Result<usize, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let headers = r.headers().map_err(|e| e.to_string())?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| format!("missing column {name}"))
    };
    let (eps_i, sigma_i) = (col("eps_dp")?, col("sigma")?);
    let mut last_sigma = f64::INFINITY;
    let mut n = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let eps: f64 = rec[eps_i].parse().map_err(|_| "bad eps".to_string())?;
        let sigma: f64 = rec[sigma_i].parse().map_err(|_| "bad sigma".to_string())?;
        if eps > budget {
            return Err(format!("row {n}: eps {eps} over budget"));
        }
        if sigma > last_sigma {
            return Err(format!("row {n}: sigma rose to {sigma}"));
        }
        last_sigma = sigma;
        n += 1;
    }
    Ok(n)
}
