//! Losses, mini-batch gradient descent, and temperature selection on a
//! validation set.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fairdiv::{IntegralAllocation, ValuationProfile};
use crate::matrix::Matrix;
use crate::metrics::hamming_distance;
use crate::model::{agent_features, forward_with_features, nrr_infer, NrrParams};
use crate::rng::RngStream;
use crate::soft::Temperature;

/// `(1/m) * sum_j -sum_i A_ij * ln(max(Â_ij, 1e-12))`.
///
/// `target` must have one-hot columns.
pub fn cross_entropy_alloc_loss(g: &mut Graph, target: &Matrix, pred: Tensor) -> Result<Tensor> {
    if target.shape() != g.shape(pred) {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_alloc_loss",
            left: target.shape(),
            right: g.shape(pred),
        });
    }
    IntegralAllocation::from_matrix(target)?;
    let m = target.cols() as f64;
    let logp = g.ln_clamped(pred);
    let a = g.constant(target.clone());
    let picked = g.mul(a, logp)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / m))
}

/// `(1/n) * sum_i sum_i' max(0, v_i(Â_i') - v_i(Â_i))` with fractional
/// bundle values `v_i(Â_i') = sum_j Â_i'j * V_ij`.
pub fn envy_penalty(g: &mut Graph, profile: &ValuationProfile, pred: Tensor) -> Result<Tensor> {
    let (n, m) = (profile.agents(), profile.goods());
    if g.shape(pred) != (n, m) {
        return Err(Error::ShapeMismatch {
            op: "envy_penalty",
            left: (n, m),
            right: g.shape(pred),
        });
    }
    let v = g.constant(profile.matrix().clone());
    let pred_t = g.transpose(pred);
    let cross = g.matmul(v, pred_t)?;
    let own = g.mul(v, pred)?;
    let own = g.row_sum(own);
    let own = g.broadcast(own, n, n)?;
    let gap = g.sub(cross, own)?;
    let envy = g.relu(gap);
    let total = g.sum(envy);
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Cross-entropy plus `lambda` times the envy penalty.
pub fn combined_loss(
    g: &mut Graph,
    target: &Matrix,
    pred: Tensor,
    profile: &ValuationProfile,
    lambda: f64,
) -> Result<Tensor> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    let ce = cross_entropy_alloc_loss(g, target, pred)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    let envy = envy_penalty(g, profile, pred)?;
    let envy = g.scale(envy, lambda);
    g.add(ce, envy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub tau_grid: Vec<f64>,
    pub tau_prime_grid: Vec<f64>,
    pub seed: u64,
    pub rank: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            learning_rate: 0.05,
            lambda: 0.0,
            tau_grid: vec![1.0, 0.1, 0.01],
            tau_prime_grid: vec![1.0, 0.1, 0.01],
            seed: 0,
            rank: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("invalid lambda {}", self.lambda)));
        }
        if self.tau_grid.is_empty() || self.tau_prime_grid.is_empty() {
            return Err(Error::invalid("temperature grids must be non-empty"));
        }
        for &t in self.tau_grid.iter().chain(&self.tau_prime_grid) {
            Temperature::new(t)?;
        }
        if self.rank == 0 {
            return Err(Error::invalid("rank must be at least 1"));
        }
        Ok(())
    }

    /// The `(tau, tau')` grid product, `tau` varying slowest.
    pub fn candidates(&self) -> Vec<(f64, f64)> {
        self.tau_grid
            .iter()
            .flat_map(|&t| self.tau_prime_grid.iter().map(move |&tp| (t, tp)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub tau: f64,
    pub tau_prime: f64,
    /// Mean per-sample training loss of each epoch.
    pub train_loss: Vec<f64>,
    /// Mean validation HD after each epoch.
    pub val_hd: Vec<f64>,
    /// Parameters became non-finite.
    pub diverged: bool,
    /// Left out of selection: diverged, or the loss did not go down.
    pub excluded: bool,
}

impl CandidateReport {
    pub fn final_val_hd(&self) -> Option<f64> {
        self.val_hd.last().copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub n: usize,
    pub m: usize,
    pub candidates: Vec<CandidateReport>,
    pub selected: usize,
    pub selected_tau: f64,
    pub selected_tau_prime: f64,
    pub selected_val_hd: f64,
    /// Where the selected parameters were saved, filled in by the caller.
    pub checkpoint: Option<String>,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Loss curve with one row per candidate and epoch.
    pub fn write_loss_curve<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["epoch", "candidate_tau", "candidate_tau_prime", "train_loss", "val_hd"])
            .map_err(io)?;
        for c in &self.candidates {
            for (e, (loss, hd)) in c.train_loss.iter().zip(&c.val_hd).enumerate() {
                w.write_record([
                    (e + 1).to_string(),
                    c.tau.to_string(),
                    c.tau_prime.to_string(),
                    loss.to_string(),
                    hd.to_string(),
                ])
                .map_err(io)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn check_sets(train: &Dataset, val: &Dataset, rank: usize) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    for (name, ds) in [("training", train), ("validation", val)] {
        for (k, s) in ds.samples.iter().enumerate() {
            if s.profile.agents() != train.agents() || s.profile.goods() != ds.goods() {
                return Err(Error::InvalidSample {
                    sample: k,
                    reason: format!("{name} profile shape differs from the set"),
                });
            }
        }
    }
    if val.agents() != train.agents() {
        return Err(Error::ShapeMismatch {
            op: "train",
            left: (train.agents(), train.goods()),
            right: (val.agents(), val.goods()),
        });
    }
    if rank > train.agents().min(train.goods()) {
        return Err(Error::invalid(format!(
            "rank {rank} exceeds min(n, m) = {}",
            train.agents().min(train.goods())
        )));
    }
    Ok(())
}

/// Mean HD of `nrr_infer` against the labels of `data`.
pub fn mean_hd(params: &NrrParams, data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for s in &data.samples {
        total += hamming_distance(&s.allocation, &nrr_infer(&s.profile, params)?)?;
    }
    Ok(total / data.len() as f64)
}

struct Prepared<'a> {
    profile: &'a ValuationProfile,
    target: Matrix,
    features: Matrix,
}

/// Mean combined loss of one batch; the graph is left ready for `backward`.
fn batch_loss(
    g: &mut Graph,
    batch: &[&Prepared],
    params: &NrrParams,
    weights: &[Tensor],
    lambda: f64,
) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for p in batch {
        let pred = forward_with_features(g, p.profile, &p.features, params, weights)?;
        let loss = combined_loss(g, &p.target, pred, p.profile, lambda)?;
        total = Some(match total {
            None => loss,
            Some(t) => g.add(t, loss)?,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("empty batch"))?;
    Ok(g.scale(total, 1.0 / batch.len() as f64))
}

/// One gradient-descent step on `batch`; returns the pre-step batch loss.
fn sgd_step(
    params: &mut NrrParams,
    batch: &[&Prepared],
    learning_rate: f64,
    lambda: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let weights = params.register(&mut g);
    let loss = batch_loss(&mut g, batch, params, &weights, lambda)?;
    let value = g.value(loss).get(0, 0);
    g.backward(loss)?;
    let updated: Vec<Matrix> = weights
        .iter()
        .map(|&w| {
            let mut m = g.value(w).clone();
            if let Some(grad) = g.grad(w) {
                m.axpy(-learning_rate, grad);
            }
            m
        })
        .collect();
    *params = params.with_tensors(&updated)?;
    Ok(value)
}

/// Loss on `batch` before and after a single gradient step.
pub fn step_once(
    params: &NrrParams,
    batch: &[(&ValuationProfile, &IntegralAllocation)],
    learning_rate: f64,
    lambda: f64,
) -> Result<(f64, f64, NrrParams)> {
    let prepared: Vec<Prepared> = batch
        .iter()
        .map(|&(profile, a)| {
            Ok(Prepared {
                profile,
                target: a.to_matrix(),
                features: agent_features(profile, params.rank)?,
            })
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Prepared> = prepared.iter().collect();
    let mut next = params.clone();
    let before = sgd_step(&mut next, &refs, learning_rate, lambda)?;
    let mut g = Graph::new();
    let weights = next.register(&mut g);
    let after = batch_loss(&mut g, &refs, &next, &weights, lambda)?;
    let after = g.value(after).get(0, 0);
    Ok((before, after, next))
}

fn params_finite(p: &NrrParams) -> bool {
    p.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
}

fn train_candidate(
    index: usize,
    tau: f64,
    tau_prime: f64,
    prepared: &[Prepared],
    val: &Dataset,
    config: &TrainConfig,
) -> Result<(NrrParams, CandidateReport)> {
    let mut params = NrrParams::init(
        config.rank,
        Temperature::new(tau)?,
        Temperature::new(tau_prime)?,
        config.seed,
    )?;
    let mut rng = RngStream::derive(config.seed, index as u64);
    let mut idx: Vec<usize> = (0..prepared.len()).collect();
    let mut report = CandidateReport {
        tau,
        tau_prime,
        train_loss: Vec::with_capacity(config.epochs),
        val_hd: Vec::with_capacity(config.epochs),
        diverged: false,
        excluded: false,
    };
    for epoch in 0..config.epochs {
        rng.shuffle(&mut idx);
        let mut total = 0.0;
        for chunk in idx.chunks(config.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&k| &prepared[k]).collect();
            total += sgd_step(&mut params, &batch, config.learning_rate, config.lambda)? * chunk.len() as f64;
            if !params_finite(&params) {
                report.diverged = true;
                break;
            }
        }
        if report.diverged {
            log::warn!("candidate tau={tau} tau'={tau_prime} diverged in epoch {}", epoch + 1);
            break;
        }
        report.train_loss.push(total / prepared.len() as f64);
        report.val_hd.push(mean_hd(&params, val)?);
        log::debug!(
            "tau={tau} tau'={tau_prime} epoch {}: loss {:.6} val hd {:.6}",
            epoch + 1,
            report.train_loss[epoch],
            report.val_hd[epoch]
        );
    }
    let stalled = match (report.train_loss.first(), report.train_loss.last()) {
        (Some(first), Some(last)) => config.epochs >= 2 && !(last < first),
        _ => true,
    };
    report.excluded = report.diverged || stalled;
    Ok((params, report))
}

/// Trains one model per `(tau, tau')` pair and keeps the one with the lowest
/// final validation HD among those whose training loss went down (first in
/// grid order on ties). With a single epoch there is no trend to check and
/// every finite candidate is eligible.
pub fn train(train: &Dataset, val: &Dataset, config: &TrainConfig) -> Result<(NrrParams, TrainReport)> {
    config.validate()?;
    check_sets(train, val, config.rank)?;
    let prepared: Vec<Prepared> = train
        .samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                profile: &s.profile,
                target: s.allocation.to_matrix(),
                features: agent_features(&s.profile, config.rank)?,
            })
        })
        .collect::<Result<_>>()?;

    let grid = config.candidates();
    let results: Vec<(NrrParams, CandidateReport)> = grid
        .par_iter()
        .enumerate()
        .map(|(k, &(tau, tau_prime))| train_candidate(k, tau, tau_prime, &prepared, val, config))
        .collect::<Result<_>>()?;

    let mut best: Option<(usize, f64)> = None;
    for (k, (_, r)) in results.iter().enumerate() {
        if r.excluded {
            continue;
        }
        let hd = r.final_val_hd().expect("non-excluded candidates finished every epoch");
        if best.is_none_or(|(_, b)| hd < b) {
            best = Some((k, hd));
        }
    }
    let (selected, selected_val_hd) = best.ok_or(Error::NoViableCandidate)?;
    let (mut params_all, candidates): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let params = params_all.swap_remove(selected);
    let report = TrainReport {
        config: config.clone(),
        n: train.agents(),
        m: train.goods(),
        selected,
        selected_tau: candidates[selected].tau,
        selected_tau_prime: candidates[selected].tau_prime,
        selected_val_hd,
        candidates,
        checkpoint: None,
    };
    Ok((params, report))
}
