//! Exact fair-division primitives for additive valuations.
//!
//! Agents and goods are 0-based throughout the API. Orders are written
//! first-to-last: `order[p]` is the agent picking at position `p`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{argmax, Matrix};

/// Slack used when comparing bundle values, so that sums of the same
/// goods taken in a different order do not register as envy.
const VALUE_EPS: f64 = 1e-12;

/// `n x m` matrix of nonnegative agent-by-good values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct ValuationProfile {
    values: Matrix,
}

impl ValuationProfile {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::invalid("a profile needs at least one agent and one good"));
        }
        if let Some(x) = values.as_slice().iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(Error::invalid(format!(
                "valuations must be finite and nonnegative, found {x}"
            )));
        }
        Ok(Self { values })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    #[inline]
    pub fn agents(&self) -> usize {
        self.values.rows()
    }

    #[inline]
    pub fn goods(&self) -> usize {
        self.values.cols()
    }

    #[inline]
    pub fn value(&self, agent: usize, good: usize) -> f64 {
        self.values.get(agent, good)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.values
    }

    pub fn row(&self, agent: usize) -> &[f64] {
        self.values.row(agent)
    }

    /// Profile whose row `p` is this profile's row `perm.agent_at(p)`.
    pub fn permuted(&self, perm: &AgentPermutation) -> Self {
        let rows: Vec<&[f64]> = perm.order().iter().map(|&a| self.row(a)).collect();
        Self {
            values: Matrix::from_rows(&rows).expect("rows share a width"),
        }
    }

    /// `v_i(S)`, the additive value of `bundle` to `agent`.
    pub fn bundle_value(&self, agent: usize, bundle: &[usize]) -> Result<f64> {
        if agent >= self.agents() {
            return Err(Error::invalid(format!(
                "agent {agent} out of range for {} agents",
                self.agents()
            )));
        }
        if let Some(&g) = bundle.iter().find(|&&g| g >= self.goods()) {
            return Err(Error::invalid(format!(
                "good {g} out of range for {} goods",
                self.goods()
            )));
        }
        Ok(bundle.iter().map(|&g| self.value(agent, g)).sum())
    }
}

impl TryFrom<Vec<Vec<f64>>> for ValuationProfile {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<ValuationProfile> for Vec<Vec<f64>> {
    fn from(p: ValuationProfile) -> Self {
        p.values.to_rows()
    }
}

/// A partition of the goods among agents, stored as the owner of each good.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IntegralAllocation {
    agents: usize,
    owner: Vec<usize>,
}

impl IntegralAllocation {
    pub fn from_owners(agents: usize, owner: Vec<usize>) -> Result<Self> {
        if let Some((g, &a)) = owner.iter().enumerate().find(|(_, &a)| a >= agents) {
            return Err(Error::invalid(format!(
                "good {g} assigned to agent {a}, but there are {agents} agents"
            )));
        }
        Ok(Self { agents, owner })
    }

    /// Parses a binary `n x m` matrix; every column must contain exactly one 1.
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        let mut owner = Vec::with_capacity(m.cols());
        for j in 0..m.cols() {
            let mut found = None;
            for i in 0..m.rows() {
                match m.get(i, j) {
                    x if x == 0.0 => {}
                    x if x == 1.0 && found.is_none() => found = Some(i),
                    x if x == 1.0 => {
                        return Err(Error::invalid(format!("good {j} is assigned more than once")))
                    }
                    x => return Err(Error::invalid(format!("entry ({i}, {j}) = {x} is not binary"))),
                }
            }
            owner.push(found.ok_or_else(|| Error::invalid(format!("good {j} is unassigned")))?);
        }
        Ok(Self {
            agents: m.rows(),
            owner,
        })
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn goods(&self) -> usize {
        self.owner.len()
    }

    pub fn owner(&self, good: usize) -> usize {
        self.owner[good]
    }

    pub fn owners(&self) -> &[usize] {
        &self.owner
    }

    /// Goods held by `agent`, ascending.
    pub fn bundle(&self, agent: usize) -> Vec<usize> {
        self.owner
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == agent)
            .map(|(g, _)| g)
            .collect()
    }

    pub fn bundles(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.agents];
        for (g, &a) in self.owner.iter().enumerate() {
            out[a].push(g);
        }
        out
    }

    pub fn to_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.agents, self.owner.len());
        for (g, &a) in self.owner.iter().enumerate() {
            m.set(a, g, 1.0);
        }
        m
    }
}

/// A bijection between agents and picking positions.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AgentPermutation {
    /// `position[agent]`
    position: Vec<usize>,
    /// `order[position]`, the inverse of `position`
    order: Vec<usize>,
}

impl AgentPermutation {
    pub fn identity(n: usize) -> Self {
        Self {
            position: (0..n).collect(),
            order: (0..n).collect(),
        }
    }

    /// From the picking order, first to last.
    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let position = invert(&order).ok_or_else(|| Error::InvalidPermutation(order.clone()))?;
        Ok(Self { position, order })
    }

    /// From each agent's position.
    pub fn from_positions(position: Vec<usize>) -> Result<Self> {
        let order = invert(&position).ok_or_else(|| Error::InvalidPermutation(position.clone()))?;
        Ok(Self { position, order })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn positions(&self) -> &[usize] {
        &self.position
    }

    pub fn position_of(&self, agent: usize) -> usize {
        self.position[agent]
    }

    pub fn agent_at(&self, position: usize) -> usize {
        self.order[position]
    }

    /// `P` with `P[p][order[p]] = 1`, so `(P V)` row `p` is `V` row `order[p]`.
    pub fn matrix(&self) -> Matrix {
        let n = self.len();
        let mut p = Matrix::zeros(n, n);
        for (pos, &agent) in self.order.iter().enumerate() {
            p.set(pos, agent, 1.0);
        }
        p
    }
}

fn invert(perm: &[usize]) -> Option<Vec<usize>> {
    let n = perm.len();
    let mut inv = vec![usize::MAX; n];
    for (i, &p) in perm.iter().enumerate() {
        if p >= n || inv[p] != usize::MAX {
            return None;
        }
        inv[p] = i;
    }
    Some(inv)
}

/// Round Robin with agents picking in index order.
///
/// Runs `ceil(m / n)` rounds; each agent takes its most valued remaining
/// good (earliest good on ties) until the goods run out.
pub fn round_robin(profile: &ValuationProfile) -> IntegralAllocation {
    pick_in_order(profile, &AgentPermutation::identity(profile.agents()))
}

/// Round Robin run on the agents in `perm`'s order, reported against the
/// original agent indices.
pub fn round_robin_induced(
    profile: &ValuationProfile,
    perm: &AgentPermutation,
) -> Result<IntegralAllocation> {
    if perm.len() != profile.agents() {
        return Err(Error::invalid(format!(
            "permutation of length {} for {} agents",
            perm.len(),
            profile.agents()
        )));
    }
    Ok(pick_in_order(profile, perm))
}

fn pick_in_order(profile: &ValuationProfile, perm: &AgentPermutation) -> IntegralAllocation {
    let (n, m) = (profile.agents(), profile.goods());
    let mut owner = vec![usize::MAX; m];
    let mut remaining = m;
    'rounds: for _ in 0..m.div_ceil(n) {
        for &agent in perm.order() {
            if remaining == 0 {
                break 'rounds;
            }
            let row = profile.row(agent);
            let mut best: Option<usize> = None;
            for g in (0..m).filter(|&g| owner[g] == usize::MAX) {
                if best.is_none_or(|b| row[g] > row[b]) {
                    best = Some(g);
                }
            }
            let g = best.expect("goods remain");
            owner[g] = agent;
            remaining -= 1;
        }
    }
    IntegralAllocation { agents: n, owner }
}

fn check_shapes(profile: &ValuationProfile, alloc: &IntegralAllocation) -> Result<()> {
    if profile.agents() != alloc.agents() || profile.goods() != alloc.goods() {
        return Err(Error::invalid(format!(
            "profile is {}x{} but allocation is {}x{}",
            profile.agents(),
            profile.goods(),
            alloc.agents(),
            alloc.goods()
        )));
    }
    Ok(())
}

/// `values[i][j] = v_i(A_j)`.
fn bundle_value_table(profile: &ValuationProfile, alloc: &IntegralAllocation) -> Vec<Vec<f64>> {
    let n = profile.agents();
    let mut table = vec![vec![0.0; n]; n];
    for (g, &owner) in alloc.owners().iter().enumerate() {
        for (i, row) in table.iter_mut().enumerate() {
            row[owner] += profile.value(i, g);
        }
    }
    table
}

fn dominates(own: f64, other: f64) -> bool {
    own + VALUE_EPS * 1f64.max(own.abs()).max(other.abs()) >= other
}

/// Envy-freeness: every agent weakly prefers its own bundle.
pub fn is_ef(profile: &ValuationProfile, alloc: &IntegralAllocation) -> Result<bool> {
    check_shapes(profile, alloc)?;
    let table = bundle_value_table(profile, alloc);
    Ok(table
        .iter()
        .enumerate()
        .all(|(i, row)| row.iter().all(|&other| dominates(row[i], other))))
}

/// EF1: any envy disappears after removing a single good from the envied
/// bundle. Under additive valuations it suffices to remove the envied
/// bundle's good that the envious agent values most.
pub fn is_ef1(profile: &ValuationProfile, alloc: &IntegralAllocation) -> Result<bool> {
    check_shapes(profile, alloc)?;
    let n = profile.agents();
    let table = bundle_value_table(profile, alloc);
    // best[i][j] = max over goods g in A_j of v_i(g)
    let mut best = vec![vec![0.0_f64; n]; n];
    for (g, &owner) in alloc.owners().iter().enumerate() {
        for (i, row) in best.iter_mut().enumerate() {
            row[owner] = row[owner].max(profile.value(i, g));
        }
    }
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            if !dominates(table[i][i], table[i][j] - best[i][j]) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// EF1 by trying every single-good removal. Slower cross-check of [`is_ef1`].
pub fn is_ef1_exhaustive(profile: &ValuationProfile, alloc: &IntegralAllocation) -> Result<bool> {
    check_shapes(profile, alloc)?;
    let bundles = alloc.bundles();
    for i in 0..profile.agents() {
        let own = profile.bundle_value(i, &bundles[i])?;
        for (j, other) in bundles.iter().enumerate() {
            if i == j {
                continue;
            }
            let whole = profile.bundle_value(i, other)?;
            if dominates(own, whole) {
                continue;
            }
            let rescued = other.iter().any(|&o| {
                let rest: Vec<usize> = other.iter().copied().filter(|&g| g != o).collect();
                dominates(own, profile.bundle_value(i, &rest).unwrap_or(f64::INFINITY))
            });
            if !rescued {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// `UW(V, A) = sum_ij A_ij V_ij`; `alloc` may be fractional.
pub fn utilitarian_welfare(profile: &ValuationProfile, alloc: &Matrix) -> Result<f64> {
    if alloc.shape() != profile.matrix().shape() {
        return Err(Error::ShapeMismatch {
            op: "utilitarian_welfare",
            left: profile.matrix().shape(),
            right: alloc.shape(),
        });
    }
    Ok(alloc
        .as_slice()
        .iter()
        .zip(profile.matrix().as_slice())
        .map(|(a, v)| a * v)
        .sum())
}

/// Welfare of an integral allocation.
pub fn allocation_welfare(profile: &ValuationProfile, alloc: &IntegralAllocation) -> Result<f64> {
    check_shapes(profile, alloc)?;
    Ok(alloc
        .owners()
        .iter()
        .enumerate()
        .map(|(g, &a)| profile.value(a, g))
        .sum())
}

/// Maximum utilitarian welfare allocation. With additive valuations the
/// objective separates per good, so each good goes to the agent valuing it
/// most (earliest agent on ties).
pub fn muw_allocation(profile: &ValuationProfile) -> IntegralAllocation {
    let v = profile.matrix();
    let owner = (0..profile.goods())
        .map(|g| {
            let column: Vec<f64> = (0..profile.agents()).map(|i| v.get(i, g)).collect();
            argmax(&column)
        })
        .collect();
    IntegralAllocation {
        agents: profile.agents(),
        owner,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn table1() -> ValuationProfile {
        ValuationProfile::from_rows(&[
            [1.0, 0.0, 3.0, 2.0],
            [3.0, 2.0, 1.0, 0.0],
            [4.0, 3.0, 2.0, 1.0],
        ])
        .unwrap()
    }

    fn bundles(alloc: &IntegralAllocation) -> Vec<Vec<usize>> {
        alloc.bundles()
    }

    #[test]
    fn bundle_values_table1() {
        let v = table1();
        // goods {3,4} / {1,2} in 1-based notation
        assert_eq!(v.bundle_value(0, &[2, 3]).unwrap(), 5.0);
        assert_eq!(v.bundle_value(2, &[0, 1]).unwrap(), 7.0);
        assert_eq!(v.bundle_value(1, &[]).unwrap(), 0.0);
        assert!(v.bundle_value(3, &[0]).is_err());
        assert!(v.bundle_value(0, &[4]).is_err());
    }

    #[test]
    fn round_robin_table1() {
        let a = round_robin(&table1());
        assert_eq!(bundles(&a), vec![vec![2, 3], vec![0], vec![1]]);
    }

    #[test]
    fn round_robin_induced_table1() {
        let perm = AgentPermutation::from_order(vec![2, 0, 1]).unwrap();
        let a = round_robin_induced(&table1(), &perm).unwrap();
        assert_eq!(bundles(&a), vec![vec![2], vec![1], vec![0, 3]]);
    }

    #[test]
    fn round_robin_small_cases() {
        let v = ValuationProfile::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        assert_eq!(round_robin(&v).owners(), &[0, 1]);
        let rev = AgentPermutation::from_order(vec![1, 0]).unwrap();
        assert_eq!(round_robin_induced(&v, &rev).unwrap().owners(), &[0, 1]);

        let single = ValuationProfile::from_rows(&[[0.3, 0.1, 0.7]]).unwrap();
        assert_eq!(round_robin(&single).owners(), &[0, 0, 0]);
    }

    #[test]
    fn more_agents_than_goods() {
        let v = ValuationProfile::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        let a = round_robin(&v);
        assert_eq!(a.owners(), &[0]);
        assert!(is_ef1(&v, &a).unwrap());
    }

    #[test]
    fn ties_pick_earliest_good() {
        let v = ValuationProfile::from_rows(&[[1.0, 1.0, 1.0]]).unwrap();
        let perm = AgentPermutation::identity(1);
        assert_eq!(round_robin_induced(&v, &perm).unwrap().owners(), &[0, 0, 0]);
        let v = ValuationProfile::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert_eq!(round_robin(&v).owners(), &[0, 1]);
    }

    #[test]
    fn invalid_permutations_rejected() {
        assert!(AgentPermutation::from_order(vec![0, 0]).is_err());
        assert!(AgentPermutation::from_order(vec![0, 2]).is_err());
        let perm = AgentPermutation::identity(2);
        assert!(round_robin_induced(&table1(), &perm).is_err());
    }

    #[test]
    fn permutation_matrix_reorders_rows() {
        let v = table1();
        let perm = AgentPermutation::from_order(vec![2, 0, 1]).unwrap();
        let pv = perm.matrix().matmul(v.matrix());
        assert_eq!(&pv, v.permuted(&perm).matrix());
        assert_eq!(perm.position_of(2), 0);
        assert_eq!(perm.matrix().transpose().matmul(&pv), *v.matrix());
    }

    #[test]
    fn ef_examples() {
        let v = ValuationProfile::from_rows(&[[1.0], [1.0]]).unwrap();
        let a = IntegralAllocation::from_owners(2, vec![0]).unwrap();
        assert!(!is_ef(&v, &a).unwrap());
        assert!(is_ef1(&v, &a).unwrap());

        let single = ValuationProfile::from_rows(&[[4.0, 2.0]]).unwrap();
        assert!(is_ef(&single, &round_robin(&single)).unwrap());

        let t = table1();
        let rr = round_robin(&t);
        assert!(!is_ef(&t, &rr).unwrap());
        assert!(is_ef1(&t, &rr).unwrap());
    }

    #[test]
    fn ef1_violation() {
        let v = ValuationProfile::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let a = IntegralAllocation::from_owners(2, vec![0, 0]).unwrap();
        assert!(!is_ef1(&v, &a).unwrap());
        assert!(!is_ef1_exhaustive(&v, &a).unwrap());
    }

    #[test]
    fn welfare_examples() {
        let t = table1();
        let rr = round_robin(&t);
        assert_eq!(utilitarian_welfare(&t, &rr.to_matrix()).unwrap(), 11.0);
        assert_eq!(allocation_welfare(&t, &rr).unwrap(), 11.0);
        let muw = muw_allocation(&t);
        assert_eq!(utilitarian_welfare(&t, &muw.to_matrix()).unwrap(), 12.0);
        assert_eq!(utilitarian_welfare(&t, &Matrix::zeros(3, 4)).unwrap(), 0.0);
    }

    #[test]
    fn muw_examples() {
        let t = table1();
        assert_eq!(muw_allocation(&t).bundles(), vec![vec![2, 3], vec![], vec![0, 1]]);
        let tie = ValuationProfile::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert_eq!(muw_allocation(&tie).owners(), &[0, 0]);
        let single = ValuationProfile::from_rows(&[[0.5, 0.2]]).unwrap();
        assert_eq!(muw_allocation(&single).owners(), &[0, 0]);
    }

    #[test]
    fn allocation_matrix_parsing() {
        let good = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(IntegralAllocation::from_matrix(&good).unwrap().owners(), &[0, 1]);
        let doubled = Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0]]).unwrap();
        assert!(IntegralAllocation::from_matrix(&doubled).is_err());
        let empty = Matrix::from_rows(&[[0.0], [0.0]]).unwrap();
        assert!(IntegralAllocation::from_matrix(&empty).is_err());
        let frac = Matrix::from_rows(&[[0.5], [0.5]]).unwrap();
        assert!(IntegralAllocation::from_matrix(&frac).is_err());
    }

    #[test]
    fn negative_values_rejected() {
        assert!(ValuationProfile::from_rows(&[[1.0, -0.1]]).is_err());
        assert!(ValuationProfile::from_rows(&[[f64::NAN]]).is_err());
        let empty: [[f64; 0]; 1] = [[]];
        assert!(ValuationProfile::from_rows(&empty).is_err());
    }
}
