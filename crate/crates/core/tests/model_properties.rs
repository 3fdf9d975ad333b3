mod common;

use common::uniform_profile;
use nrr_core::data::{generate_dataset, sample_profile, Labeler};
use nrr_core::model::{hard_order, nrr_forward_train, tie_break_values};
use nrr_core::training::step_once;
use nrr_core::{nrr_infer, train, Graph, NrrParams, RngStream, Temperature, TrainConfig};
use proptest::prelude::*;

fn t(x: f64) -> Temperature {
    Temperature::new(x).unwrap()
}

fn forward(v: &nrr_core::ValuationProfile, params: &NrrParams) -> nrr_core::Matrix {
    let mut g = Graph::new();
    let w = params.register(&mut g);
    let out = nrr_forward_train(&mut g, v, params, &w).unwrap();
    g.value(out).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn training_output_columns_are_distributions(seed: u64, n in 2usize..8, m in 2usize..12, ti in 0usize..3) {
        let v = uniform_profile(&mut RngStream::new(seed), n, m);
        let tau = t([1.0, 0.1, 0.01][ti]);
        let params = NrrParams::init(2.min(n).min(m), tau, tau, seed).unwrap();
        let out = forward(&v, &params);
        prop_assert!(out.as_slice().iter().all(|&x| x >= 0.0));
        let cols = out.col_sums();
        prop_assert!(cols.as_slice().iter().all(|&c| (c - 1.0).abs() < 1e-9));
    }

    #[test]
    fn tie_break_is_injective(raw in proptest::collection::vec(0i32..4, 1..12)) {
        let a: Vec<f64> = raw.iter().map(|&x| x as f64 * 0.5).collect();
        let mut b = tie_break_values(&a);
        b.sort_by(f64::total_cmp);
        prop_assert!(b.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn hard_order_leads_with_the_top_score(raw in proptest::collection::vec(-5i32..5, 1..12)) {
        let a: Vec<f64> = raw.iter().map(|&x| x as f64).collect();
        let top = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let first = hard_order(&a).agent_at(0);
        prop_assert_eq!(a[first], top);
        // among tied maxima the latest index wins
        prop_assert!(a[first + 1..].iter().all(|&x| x < top));
    }
}

fn agreement_rate(profile: impl Fn(&mut RngStream, usize, usize) -> nrr_core::ValuationProfile) -> f64 {
    let cold = t(1e-3);
    let (mut agree, mut total) = (0usize, 0usize);
    for seed in 0..100u64 {
        let mut rng = RngStream::new(seed);
        let (n, m) = [(3, 6), (5, 5), (4, 8), (5, 10), (15, 15)][seed as usize % 5];
        let v = profile(&mut rng, n, m);
        let params = NrrParams::init(3, cold, cold, seed).unwrap();
        let soft = forward(&v, &params);
        let hard = nrr_infer(&v, &params).unwrap();
        for j in 0..m {
            let best = (0..n).fold(0, |b, i| if soft.get(i, j) > soft.get(b, j) { i } else { b });
            agree += (best == hard.owner(j)) as usize;
            total += 1;
        }
    }
    agree as f64 / total as f64
}

#[test]
fn soft_and_hard_agree_at_low_temperature() {
    let rate = agreement_rate(common::separated_profile);
    assert!(rate >= 0.95, "agreement {rate}");
}

/// Same check on the near-tied low-rank training distribution, whose
/// within-row gaps (about 0.002) are only twice the temperature.
#[test]
#[ignore = "fails: low-rank rows are too close for tau = 1e-3 to separate (about 34% agreement)"]
fn soft_and_hard_agree_at_low_temperature_on_lowrank_data() {
    let rate = agreement_rate(|rng, n, m| sample_profile(n, m, rng).unwrap());
    assert!(rate >= 0.95, "agreement {rate}");
}

#[test]
fn small_steps_do_not_increase_the_batch_loss() {
    let data = generate_dataset(15, 5, 80, 4, Labeler::Muw).unwrap();
    for (k, batch) in data.samples.chunks(4).enumerate() {
        let pairs: Vec<_> = batch.iter().map(|s| (&s.profile, &s.allocation)).collect();
        for (tau, tau_prime) in [(1.0, 1.0), (0.1, 0.1)] {
            let params = NrrParams::init(3, t(tau), t(tau_prime), k as u64).unwrap();
            let (before, after, _) = step_once(&params, &pairs, 1e-3, 0.0).unwrap();
            // rounding allowance for steps whose gradient is numerically zero
            assert!(after <= before + 1e-12 * before.abs().max(1.0), "batch {k}: {before} -> {after}");
        }
    }
}

#[test]
fn training_is_deterministic() {
    let train_set = generate_dataset(6, 4, 12, 1, Labeler::Muw).unwrap();
    let val_set = generate_dataset(6, 4, 6, 2, Labeler::Muw).unwrap();
    let config = TrainConfig {
        epochs: 3,
        tau_grid: vec![1.0, 0.1],
        tau_prime_grid: vec![1.0, 0.1],
        seed: 9,
        ..TrainConfig::default()
    };
    let (p1, r1) = train(&train_set, &val_set, &config).unwrap();
    let (p2, r2) = train(&train_set, &val_set, &config).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(r1, r2);
    assert_eq!(r1.to_json().unwrap(), r2.to_json().unwrap());
    assert_eq!(r1.candidates.len(), 4);
    let best = r1.candidates[r1.selected].final_val_hd().unwrap();
    for c in r1.candidates.iter().filter(|c| !c.excluded) {
        assert!(best <= c.final_val_hd().unwrap());
    }
}
