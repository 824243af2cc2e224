//! Group fairness of a selection policy: demographic parity, expected
//! marginal contribution (EMC) and EMC-conditioned equality of opportunity.
//!
//! Group rates use the policy's probabilities `p_i`, not sampled actions, so
//! penalties are deterministic given a batch and differentiable in `p`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::policy::{Policy, SelectionProbabilities};
use crate::rng::SimRng;
use crate::sampling::{OutcomeSampler, PopulationSampler};
use crate::types::{ActionVector, FeatureMatrix, OutcomeMatrix};
use crate::utility::{Estimate, SampleCounts, UtilityConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    WeightedSum,
    Max,
}

impl CombineMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CombineMode::WeightedSum => "weighted_sum",
            CombineMode::Max => "max",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FairnessConfig {
    /// Tolerance `ε` below which a gap costs nothing.
    pub epsilon: f64,
    /// EMC qualification threshold; `None` means "use the admission cost".
    pub tau: Option<f64>,
    pub lambda_dem: f64,
    pub lambda_eq: f64,
    pub combine: CombineMode,
    pub emc_samples: SampleCounts,
}

impl Default for FairnessConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            tau: None,
            lambda_dem: 1.0,
            lambda_eq: 1.0,
            combine: CombineMode::WeightedSum,
            emc_samples: SampleCounts::default(),
        }
    }
}

impl FairnessConfig {
    pub fn validated(self) -> Result<Self> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("fairness epsilon must be ≥ 0, got {}", self.epsilon)));
        }
        if !(self.lambda_dem >= 0.0 && self.lambda_eq >= 0.0) {
            return Err(Error::InvalidConfig("fairness weights must be non-negative".into()));
        }
        if let Some(t) = self.tau {
            if !t.is_finite() {
                return Err(Error::InvalidConfig("tau must be finite".into()));
            }
        }
        self.emc_samples.validated()?;
        Ok(self)
    }

    /// `τ`, defaulting to the admission cost `c`.
    pub fn tau_for(&self, cost: f64) -> f64 {
        self.tau.unwrap_or(cost)
    }
}

/// Largest pairwise gap in mean probability across groups, over the rows in `mask`.
#[derive(Debug, Clone, PartialEq)]
struct GroupGap {
    rates: Vec<Option<f64>>,
    counts: Vec<usize>,
    /// `(high, low, gap)` of the widest pair, when at least two groups are present.
    widest: Option<(usize, usize, f64)>,
}

fn group_gap(p: &[f64], groups: &[u32], group_count: usize, mask: Option<&[bool]>, what: &str) -> GroupGap {
    let mut sums = vec![0.0; group_count];
    let mut counts = vec![0usize; group_count];
    for (i, (&pi, &g)) in p.iter().zip(groups).enumerate() {
        if mask.is_none_or(|m| m[i]) {
            sums[g as usize] += pi;
            counts[g as usize] += 1;
        }
    }
    let rates: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    let missing = counts.iter().filter(|&&c| c == 0).count();
    if missing > 0 && group_count > 1 {
        warn!("{missing} group(s) have no {what} in this batch and are left out of the comparison");
    }
    let mut hi: Option<usize> = None;
    let mut lo: Option<usize> = None;
    for (g, r) in rates.iter().enumerate() {
        if let Some(r) = *r {
            if hi.is_none_or(|h| r > rates[h].unwrap()) {
                hi = Some(g);
            }
            if lo.is_none_or(|l| r < rates[l].unwrap()) {
                lo = Some(g);
            }
        }
    }
    let present = rates.iter().filter(|r| r.is_some()).count();
    let widest = match (hi, lo) {
        (Some(h), Some(l)) if present >= 2 => Some((h, l, rates[h].unwrap() - rates[l].unwrap())),
        _ => None,
    };
    GroupGap { rates, counts, widest }
}

fn hinge(gap: &GroupGap, epsilon: f64) -> f64 {
    gap.widest.map_or(0.0, |(_, _, g)| (g - epsilon).max(0.0))
}

/// `∂ hinge / ∂ p_i` for the widest pair (zero when the hinge is inactive).
fn hinge_gradient(gap: &GroupGap, groups: &[u32], mask: Option<&[bool]>, epsilon: f64) -> Vec<f64> {
    let mut out = vec![0.0; groups.len()];
    if let Some((h, l, g)) = gap.widest {
        if g > epsilon && h != l {
            let wh = 1.0 / gap.counts[h] as f64;
            let wl = 1.0 / gap.counts[l] as f64;
            for (i, &gi) in groups.iter().enumerate() {
                if mask.is_some_and(|m| !m[i]) {
                    continue;
                }
                if gi as usize == h {
                    out[i] = wh;
                } else if gi as usize == l {
                    out[i] = -wl;
                }
            }
        }
    }
    out
}

fn check(p: &[f64], groups: &[u32], group_count: usize) -> Result<()> {
    ensure_dims("group labels", p.len(), groups.len())?;
    if let Some(&g) = groups.iter().find(|&&g| g as usize >= group_count) {
        return Err(Error::Schema(format!("group label {g} outside label set of size {group_count}")));
    }
    Ok(())
}

/// `P_dem = max(0, max_{g1,g2} |p̄_{g1} − p̄_{g2}| − ε)`. Groups absent from the
/// batch are skipped; with fewer than two groups present the penalty is 0.
pub fn demographic_parity_penalty(p: &SelectionProbabilities, groups: &[u32], group_count: usize, epsilon: f64) -> Result<f64> {
    check(p.as_slice(), groups, group_count)?;
    Ok(hinge(&group_gap(p.as_slice(), groups, group_count, None, "members"), epsilon))
}

/// `P_eq`: the demographic-parity gap restricted to candidates with `EMC_i ≥ τ`.
pub fn equality_of_opportunity_penalty(
    p: &SelectionProbabilities,
    groups: &[u32],
    group_count: usize,
    emc: &[f64],
    tau: f64,
    epsilon: f64,
) -> Result<f64> {
    check(p.as_slice(), groups, group_count)?;
    ensure_dims("EMC vector", p.len(), emc.len())?;
    let mask: Vec<bool> = emc.iter().map(|&e| e >= tau).collect();
    Ok(hinge(&group_gap(p.as_slice(), groups, group_count, Some(&mask), "qualified candidates"), epsilon))
}

/// Weighted sum `λ_dem P_dem + λ_eq P_eq`, or `max(P_dem, P_eq)`.
pub fn combine_penalties(p_dem: f64, p_eq: f64, cfg: &FairnessConfig) -> f64 {
    match cfg.combine {
        CombineMode::WeightedSum => cfg.lambda_dem * p_dem + cfg.lambda_eq * p_eq,
        CombineMode::Max => p_dem.max(p_eq),
    }
}

/// Penalties of one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    /// Mean `p_i` per group; `None` for groups absent from the batch.
    pub group_rates: Vec<Option<f64>>,
    pub p_dem: f64,
    pub p_eq: f64,
    pub p_overall: f64,
    pub emc: Option<Vec<f64>>,
}

/// Evaluates every penalty and, alongside, `∂P_overall/∂p_i`.
pub fn fairness_with_gradient(
    p: &SelectionProbabilities,
    groups: &[u32],
    group_count: usize,
    emc: &[f64],
    cost: f64,
    cfg: &FairnessConfig,
) -> Result<(FairnessReport, Vec<f64>)> {
    check(p.as_slice(), groups, group_count)?;
    ensure_dims("EMC vector", p.len(), emc.len())?;
    let ps = p.as_slice();
    let tau = cfg.tau_for(cost);
    let dem = group_gap(ps, groups, group_count, None, "members");
    let mask: Vec<bool> = emc.iter().map(|&e| e >= tau).collect();
    let eq = group_gap(ps, groups, group_count, Some(&mask), "qualified candidates");
    let p_dem = hinge(&dem, cfg.epsilon);
    let p_eq = hinge(&eq, cfg.epsilon);
    let p_overall = combine_penalties(p_dem, p_eq, cfg);
    let g_dem = hinge_gradient(&dem, groups, None, cfg.epsilon);
    let g_eq = hinge_gradient(&eq, groups, Some(&mask), cfg.epsilon);
    let grad = match cfg.combine {
        CombineMode::WeightedSum => g_dem
            .iter()
            .zip(&g_eq)
            .map(|(a, b)| cfg.lambda_dem * a + cfg.lambda_eq * b)
            .collect(),
        CombineMode::Max if p_dem >= p_eq => g_dem,
        CombineMode::Max => g_eq,
    };
    let report = FairnessReport {
        group_rates: dem.rates,
        p_dem,
        p_eq,
        p_overall,
        emc: Some(emc.to_vec()),
    };
    Ok((report, grad))
}

pub fn fairness_report(
    p: &SelectionProbabilities,
    groups: &[u32],
    group_count: usize,
    emc: &[f64],
    cost: f64,
    cfg: &FairnessConfig,
) -> Result<FairnessReport> {
    fairness_with_gradient(p, groups, group_count, emc, cost, cfg).map(|(r, _)| r)
}

/// `u(a with a_i := 1, y) − u(a with a_i := 0, y)` for every `i`, from the
/// selection's course sums in `O(nK)`.
pub fn marginal_contributions(a: &ActionVector, y: &OutcomeMatrix, cfg: &UtilityConfig) -> Result<Vec<f64>> {
    ensure_dims("marginal rows", a.len(), y.rows())?;
    ensure_dims("marginal courses", cfg.courses, y.courses())?;
    let sums = crate::utility::course_sums(a, y);
    let selected = a.selected();
    let mut out = Vec::with_capacity(a.len());
    let mut with = vec![0.0; sums.len()];
    let mut without = vec![0.0; sums.len()];
    for i in 0..a.len() {
        let row = y.row(i);
        let own = if a.get(i) { 1.0 } else { 0.0 };
        for k in 0..sums.len() {
            without[k] = sums[k] - own * row[k];
            with[k] = without[k] + row[k];
        }
        let base = selected - usize::from(a.get(i));
        out.push(cfg.from_sums(&with, base + 1) - cfg.from_sums(&without, base));
    }
    Ok(out)
}

/// Per-candidate EMC of a batch, averaged over sampled `(a, y)` pairs drawn
/// under the current policy.
pub fn batch_emc(samples: &[(ActionVector, OutcomeMatrix)], cfg: &UtilityConfig) -> Result<Vec<f64>> {
    let first = samples.first().ok_or_else(|| Error::InvalidConfig("batch EMC needs at least one sample".into()))?;
    let mut acc = vec![0.0; first.0.len()];
    for (a, y) in samples {
        for (s, v) in acc.iter_mut().zip(marginal_contributions(a, y, cfg)?) {
            *s += v;
        }
    }
    let m = samples.len() as f64;
    Ok(acc.into_iter().map(|v| v / m).collect())
}

/// Monte Carlo EMC of one candidate under a fixed policy: the candidate is
/// appended to each sampled pool, co-candidates are selected by the policy,
/// and both arms share the same outcome draw.
///
/// The standard error is taken over pools when `n_x > 1` and over selections otherwise.
#[allow(clippy::too_many_arguments)]
pub fn emc(
    features: &[f64],
    group: u32,
    policy: &Policy,
    population: &dyn PopulationSampler,
    outcomes: &dyn OutcomeSampler,
    counts: SampleCounts,
    cfg: &UtilityConfig,
    rng: &mut SimRng,
) -> Result<Estimate> {
    let counts = counts.validated()?;
    let mut per_pool = Vec::with_capacity(counts.n_x);
    let mut per_action = Vec::with_capacity(counts.n_x * counts.n_a);
    for _ in 0..counts.n_x {
        let mut x: FeatureMatrix = population.sample_population(rng)?;
        x.push_row(features, group)?;
        let i = x.rows() - 1;
        let p = policy.accept_prob(&x)?;
        let mut pool_total = 0.0;
        for _ in 0..counts.n_a {
            let mut a = p.sample(rng);
            let mut total = 0.0;
            for _ in 0..counts.n_y {
                let y = outcomes.sample_outcomes(&x, rng)?;
                a.set(i, true);
                let with = crate::utility::utility(&a, &y, cfg)?;
                a.set(i, false);
                let without = crate::utility::utility(&a, &y, cfg)?;
                total += with - without;
            }
            let v = total / counts.n_y as f64;
            pool_total += v;
            per_action.push(v);
        }
        per_pool.push(pool_total / counts.n_a as f64);
    }
    let mut est = if counts.n_x > 1 {
        Estimate::from_samples(&per_pool)
    } else {
        Estimate::from_samples(&per_action)
    };
    est.samples = per_action.len();
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::OutcomeScale;

    fn probs(v: &[f64]) -> SelectionProbabilities {
        SelectionProbabilities::new(v.to_vec()).unwrap()
    }

    #[test]
    fn parity_arithmetic() {
        let p = probs(&[0.8, 0.8, 0.6, 0.6]);
        let g = [0, 0, 1, 1];
        assert!((demographic_parity_penalty(&p, &g, 2, 0.0).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(demographic_parity_penalty(&p, &g, 2, 0.25).unwrap(), 0.0);
        assert_eq!(demographic_parity_penalty(&probs(&[0.3, 0.3]), &[0, 1], 2, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn absent_group_is_skipped() {
        let p = probs(&[0.9, 0.1, 0.5]);
        assert!((demographic_parity_penalty(&p, &[0, 0, 2], 3, 0.0).unwrap() - 0.0).abs() < 1e-12);
        assert_eq!(demographic_parity_penalty(&p, &[1, 1, 1], 3, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn opportunity_conditions_on_emc() {
        let p = probs(&[0.9, 0.1, 0.5, 0.99]);
        let g = [0, 0, 1, 1];
        let emc = [1.0, -1.0, 1.0, -1.0];
        assert!((equality_of_opportunity_penalty(&p, &g, 2, &emc, 0.0, 0.1).unwrap() - 0.3).abs() < 1e-12);
        let all = [1.0; 4];
        assert_eq!(
            equality_of_opportunity_penalty(&p, &g, 2, &all, 0.0, 0.0).unwrap(),
            demographic_parity_penalty(&p, &g, 2, 0.0).unwrap()
        );
    }

    #[test]
    fn combination_modes() {
        let mut cfg = FairnessConfig::default();
        assert!((combine_penalties(0.2, 0.1, &cfg) - 0.3).abs() < 1e-12);
        cfg.combine = CombineMode::Max;
        assert_eq!(combine_penalties(0.2, 0.1, &cfg), 0.2);
        cfg.combine = CombineMode::WeightedSum;
        cfg.lambda_dem = 0.0;
        cfg.lambda_eq = 0.0;
        assert_eq!(combine_penalties(0.2, 0.1, &cfg), 0.0);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let base = [0.7, 0.2, 0.55, 0.4, 0.35, 0.9];
        let g = [0, 0, 1, 1, 2, 2];
        let emc = [0.3, 0.05, 0.2, -0.1, 0.4, 0.3];
        let cfg = FairnessConfig {
            epsilon: 0.02,
            lambda_dem: 0.7,
            lambda_eq: 1.3,
            ..FairnessConfig::default()
        };
        let (_, grad) = fairness_with_gradient(&probs(&base), &g, 3, &emc, 0.1, &cfg).unwrap();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut up = base;
            up[i] += h;
            let mut dn = base;
            dn[i] -= h;
            let f = |v: &[f64]| fairness_report(&probs(v), &g, 3, &emc, 0.1, &cfg).unwrap().p_overall;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6, "coordinate {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn marginal_contribution_matches_direct_utility() {
        let cfg = UtilityConfig::new(0.05).unwrap();
        let y = OutcomeMatrix::new(3, 3, vec![0.5, 0.2, 0.9, 0.0, 0.0, 0.0, 1.0, 0.3, 0.4], OutcomeScale::Normalized).unwrap();
        let a = ActionVector::from_bits(&[1, 0, 1]).unwrap();
        let got = marginal_contributions(&a, &y, &cfg).unwrap();
        for (i, g) in got.iter().enumerate() {
            let mut on = a.clone();
            on.set(i, true);
            let mut off = a.clone();
            off.set(i, false);
            let want = crate::utility::utility(&on, &y, &cfg).unwrap() - crate::utility::utility(&off, &y, &cfg).unwrap();
            assert!((g - want).abs() < 1e-12);
        }
        assert!((got[1] + 0.05).abs() < 1e-12);
    }
}
