//! Evaluation of predicted allocations against MUW labels.

use std::io::Write;

use serde::Serialize;

use crate::data::{Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::fairdiv::{
    allocation_welfare, is_ef1, muw_allocation, round_robin, round_robin_induced, AgentPermutation,
    IntegralAllocation, ValuationProfile,
};
use crate::model::{nrr_order, NrrParams};

/// `(1 / 2m) * sum_ij |A_ij - Â_ij|`, in `[0, 1]`.
pub fn hamming_distance(target: &IntegralAllocation, pred: &IntegralAllocation) -> Result<f64> {
    if target.agents() != pred.agents() || target.goods() != pred.goods() {
        return Err(Error::ShapeMismatch {
            op: "hamming_distance",
            left: (target.agents(), target.goods()),
            right: (pred.agents(), pred.goods()),
        });
    }
    let differing = target
        .owners()
        .iter()
        .zip(pred.owners())
        .filter(|(a, b)| a != b)
        .count();
    // each reassigned good flips two matrix entries
    Ok((2 * differing) as f64 / (2 * target.goods()) as f64)
}

/// Fraction of predictions that are EF1.
pub fn ef1_ratio(profiles: &[ValuationProfile], preds: &[IntegralAllocation]) -> Result<f64> {
    if profiles.is_empty() || profiles.len() != preds.len() {
        return Err(Error::invalid(format!(
            "need equally long non-empty lists, got {} profiles and {} predictions",
            profiles.len(),
            preds.len()
        )));
    }
    let mut hits = 0;
    for (v, a) in profiles.iter().zip(preds) {
        if is_ef1(v, a)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / profiles.len() as f64)
}

/// `1 - UW(V, Â) / MUW(V)`.
pub fn uw_loss(profile: &ValuationProfile, pred: &IntegralAllocation) -> Result<f64> {
    let best = allocation_welfare(profile, &muw_allocation(profile))?;
    if best <= 0.0 {
        return Err(Error::invalid("maximum welfare is zero; welfare loss is undefined"));
    }
    Ok(1.0 - allocation_welfare(profile, pred)? / best)
}

/// Agents by descending mean valuation, earlier agent first on ties.
pub fn mean_valuation_order(profile: &ValuationProfile) -> AgentPermutation {
    let m = profile.goods() as f64;
    let means: Vec<f64> = (0..profile.agents())
        .map(|i| profile.row(i).iter().sum::<f64>() / m)
        .collect();
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&i, &j| means[j].total_cmp(&means[i]));
    AgentPermutation::from_order(order).expect("argsort is a permutation")
}

/// Kendall's tau-a between two strict orders of the same agents.
pub fn kendall_tau(a: &AgentPermutation, b: &AgentPermutation) -> Result<f64> {
    let n = a.len();
    if n != b.len() {
        return Err(Error::invalid(format!("orders of length {n} and {}", b.len())));
    }
    if n < 2 {
        return Err(Error::invalid("Kendall's tau needs at least two agents"));
    }
    let (pa, pb) = (a.positions(), b.positions());
    let mut score: i64 = 0;
    for x in 0..n {
        for y in x + 1..n {
            let sa = (pa[x] as i64 - pa[y] as i64).signum();
            let sb = (pb[x] as i64 - pb[y] as i64).signum();
            score += sa * sb;
        }
    }
    Ok(score as f64 / (n * (n - 1) / 2) as f64)
}

/// `(x, y)` pairs, 1-based: the agent at rank `x` of `reference` sits at
/// rank `y` of `learned`.
pub fn rank_pairs(reference: &AgentPermutation, learned: &AgentPermutation) -> Vec<(usize, usize)> {
    reference
        .order()
        .iter()
        .enumerate()
        .map(|(x, &agent)| (x + 1, learned.position_of(agent) + 1))
        .collect()
}

/// An allocation rule under evaluation.
pub trait Mechanism {
    fn name(&self) -> &str;

    /// The allocation, plus the agent order used when the rule has one.
    fn run(&self, profile: &ValuationProfile) -> Result<(IntegralAllocation, Option<AgentPermutation>)>;
}

pub struct RoundRobin;

impl Mechanism for RoundRobin {
    fn name(&self) -> &str {
        "rr"
    }

    fn run(&self, profile: &ValuationProfile) -> Result<(IntegralAllocation, Option<AgentPermutation>)> {
        Ok((
            round_robin(profile),
            Some(AgentPermutation::identity(profile.agents())),
        ))
    }
}

pub struct MaxWelfare;

impl Mechanism for MaxWelfare {
    fn name(&self) -> &str {
        "muw"
    }

    fn run(&self, profile: &ValuationProfile) -> Result<(IntegralAllocation, Option<AgentPermutation>)> {
        Ok((muw_allocation(profile), None))
    }
}

pub struct NeuralRr(pub NrrParams);

impl Mechanism for NeuralRr {
    fn name(&self) -> &str {
        "nrr"
    }

    fn run(&self, profile: &ValuationProfile) -> Result<(IntegralAllocation, Option<AgentPermutation>)> {
        let order = nrr_order(profile, &self.0)?;
        Ok((round_robin_induced(profile, &order)?, Some(order)))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub model: String,
    pub meta: DatasetMeta,
    pub hd: Vec<f64>,
    pub hd_mean: f64,
    pub ef1: Vec<bool>,
    pub ef1_ratio: f64,
    pub uwloss: Vec<f64>,
    pub uwloss_mean: f64,
    /// Kendall's tau of the model's order against the mean-valuation order.
    pub kendall_tau: Option<Vec<f64>>,
    pub kendall_tau_mean: Option<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn evaluate(model: &dyn Mechanism, dataset: &Dataset) -> Result<EvalSummary> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let mut hd = Vec::with_capacity(dataset.len());
    let mut ef1 = Vec::with_capacity(dataset.len());
    let mut uwloss = Vec::with_capacity(dataset.len());
    let mut taus = Vec::with_capacity(dataset.len());
    let mut has_order = dataset.agents() >= 2;
    for (k, s) in dataset.samples.iter().enumerate() {
        let (pred, order) = model.run(&s.profile)?;
        if pred.agents() != s.profile.agents() || pred.goods() != s.profile.goods() {
            return Err(Error::InvalidSample {
                sample: k,
                reason: format!(
                    "model {} returned a {}x{} allocation",
                    model.name(),
                    pred.agents(),
                    pred.goods()
                ),
            });
        }
        hd.push(hamming_distance(&s.allocation, &pred)?);
        ef1.push(is_ef1(&s.profile, &pred)?);
        uwloss.push(uw_loss(&s.profile, &pred)?);
        match order {
            Some(o) if has_order => taus.push(kendall_tau(&o, &mean_valuation_order(&s.profile))?),
            _ => has_order = false,
        }
    }
    let ef1_ratio = ef1.iter().filter(|&&b| b).count() as f64 / ef1.len() as f64;
    let (kendall_tau, kendall_tau_mean) = if has_order {
        let m = mean(&taus);
        (Some(taus), Some(m))
    } else {
        (None, None)
    };
    Ok(EvalSummary {
        model: model.name().to_string(),
        meta: dataset.meta.clone(),
        hd_mean: mean(&hd),
        hd,
        ef1,
        ef1_ratio,
        uwloss_mean: mean(&uwloss),
        uwloss,
        kendall_tau,
        kendall_tau_mean,
    })
}

pub const CSV_HEADER: [&str; 8] = ["model", "n", "m", "sample_index", "hd", "ef1", "uwloss", "kendall_tau"];

/// Per-sample rows for each summary followed by its aggregate row, whose
/// `sample_index` is `mean` and whose `ef1` column holds the EF1 ratio.
pub fn write_csv<W: Write>(out: W, summaries: &[EvalSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(io)?;
    for s in summaries {
        let (n, m) = (s.meta.n.to_string(), s.meta.m.to_string());
        for k in 0..s.hd.len() {
            let tau = s.kendall_tau.as_ref().map_or(String::new(), |t| t[k].to_string());
            w.write_record([
                s.model.as_str(),
                &n,
                &m,
                &k.to_string(),
                &s.hd[k].to_string(),
                if s.ef1[k] { "1" } else { "0" },
                &s.uwloss[k].to_string(),
                &tau,
            ])
            .map_err(io)?;
        }
        w.write_record([
            s.model.as_str(),
            &n,
            &m,
            "mean",
            &s.hd_mean.to_string(),
            &s.ef1_ratio.to_string(),
            &s.uwloss_mean.to_string(),
            &s.kendall_tau_mean.map_or(String::new(), |t| t.to_string()),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
