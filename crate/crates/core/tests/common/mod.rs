#![allow(dead_code)]

use nrr_core::{IntegralAllocation, Matrix, RngStream, ValuationProfile};

pub fn uniform_profile(rng: &mut RngStream, n: usize, m: usize) -> ValuationProfile {
    let data = (0..n * m).map(|_| rng.unit()).collect();
    ValuationProfile::new(Matrix::from_vec(n, m, data).unwrap()).unwrap()
}

/// Rows whose sorted entries are at least 0.05 apart.
pub fn separated_profile(rng: &mut RngStream, n: usize, m: usize) -> ValuationProfile {
    let mut v = Matrix::zeros(n, m);
    for i in 0..n {
        let mut level = rng.unit();
        let mut row: Vec<f64> = (0..m)
            .map(|_| {
                level += 0.05 + 0.05 * rng.unit();
                level
            })
            .collect();
        rng.shuffle(&mut row);
        for (j, x) in row.into_iter().enumerate() {
            v.set(i, j, x);
        }
    }
    ValuationProfile::new(v).unwrap()
}

/// Every assignment of `m` goods to `n` agents.
pub fn all_allocations(n: usize, m: usize) -> Vec<IntegralAllocation> {
    let total = n.pow(m as u32);
    (0..total)
        .map(|mut code| {
            let owner = (0..m)
                .map(|_| {
                    let o = code % n;
                    code /= n;
                    o
                })
                .collect();
            IntegralAllocation::from_owners(n, owner).unwrap()
        })
        .collect()
}

pub fn welfare(v: &ValuationProfile, a: &IntegralAllocation) -> f64 {
    a.owners().iter().enumerate().map(|(j, &i)| v.value(i, j)).sum()
}

/// Welfare-maximizing allocation by enumeration; first maximum wins.
pub fn brute_force_muw(v: &ValuationProfile) -> IntegralAllocation {
    let mut best: Option<(f64, IntegralAllocation)> = None;
    for a in all_allocations(v.agents(), v.goods()) {
        let w = welfare(v, &a);
        if best.as_ref().is_none_or(|(b, _)| w > *b) {
            best = Some((w, a));
        }
    }
    best.unwrap().1
}
