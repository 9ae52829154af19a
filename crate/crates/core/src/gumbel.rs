//! Gumbel perturbation, hard and relaxed top-K subset sampling.
//!
//! Perturbing log-importances `w_h` with i.i.d. standard Gumbel noise and
//! keeping the `K` largest entries samples a `K`-subset without
//! replacement. The relaxed version replaces each argmax round with a
//! temperature softmax and suppresses already-chosen mass with
//! `r <- r + log(1 - g)` between rounds; summing the rounds gives a
//! differentiable `K`-hot gate vector.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use rand::distributions::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Level of `1 - g` below which a round counts as saturated.
pub const SATURATION_FLOOR: f64 = 1e-12;

/// Log-importance weights `w`; the importance of head `h` is `exp(w_h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceWeights {
    w: Vec<f64>,
}

impl ImportanceWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Domain("importance weights must be nonempty".into()));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("importance weights".into()));
        }
        Ok(ImportanceWeights { w })
    }

    /// Builds weights from strictly positive importances `iota = exp(w)`.
    pub fn from_importance(iota: &[f64]) -> Result<Self> {
        if iota.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain("importance scores must be positive and finite".into()));
        }
        ImportanceWeights::new(iota.iter().map(|v| v.ln()).collect())
    }

    pub fn logits(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn importance(&self) -> Vec<f64> {
        self.w.iter().map(|v| v.exp()).collect()
    }

    /// Normalizer `Z = sum_h exp(w_h)`.
    pub fn total(&self) -> f64 {
        self.w.iter().map(|v| v.exp()).sum()
    }

    /// `w + noise`.
    pub fn perturb(&self, noise: &GumbelNoise) -> Result<Vec<f64>> {
        if noise.0.len() != self.w.len() {
            return Err(Error::Dimension(format!(
                "{} weights vs {} noise draws",
                self.w.len(),
                noise.0.len()
            )));
        }
        Ok(self.w.iter().zip(&noise.0).map(|(a, b)| a + b).collect())
    }
}

/// Standard Gumbel(0, 1) draws, one per head.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelNoise(pub Vec<f64>);

impl GumbelNoise {
    pub fn zeros(h: usize) -> Self {
        GumbelNoise(vec![0.0; h])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// `-log(-log U)` with `U` uniform on the open interval (0, 1).
pub fn sample_gumbel<R: Rng + ?Sized>(h: usize, rng: &mut R) -> Result<GumbelNoise> {
    if h == 0 {
        return Err(Error::Domain("cannot sample Gumbel noise for zero heads".into()));
    }
    Ok(GumbelNoise(
        (0..h)
            .map(|_| {
                let u: f64 = rng.sample(Open01);
                -(-u.ln()).ln()
            })
            .collect(),
    ))
}

/// Index of the largest perturbed logit; ties go to the lowest index.
pub fn gumbel_argmax(w: &ImportanceWeights, noise: &GumbelNoise) -> Result<usize> {
    let r = w.perturb(noise)?;
    let mut best = 0;
    for (i, &v) in r.iter().enumerate().skip(1) {
        if v > r[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Binary keep/prune vector over the flat head index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeadMask {
    bits: Vec<bool>,
}

impl HeadMask {
    pub fn new(bits: Vec<bool>) -> Self {
        HeadMask { bits }
    }

    pub fn all(h: usize) -> Self {
        HeadMask { bits: vec![true; h] }
    }

    pub fn none(h: usize) -> Self {
        HeadMask { bits: vec![false; h] }
    }

    pub fn from_indices(h: usize, kept: &[usize]) -> Result<Self> {
        let mut bits = vec![false; h];
        for &i in kept {
            if i >= h {
                return Err(Error::Dimension(format!("head {i} out of range {h}")));
            }
            bits[i] = true;
        }
        Ok(HeadMask { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Number of kept heads.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_kept(&self, h: usize) -> bool {
        self.bits[h]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn set(&mut self, h: usize, keep: bool) {
        self.bits[h] = keep;
    }

    pub fn kept(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    pub fn as_gates(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::Format(format!("invalid mask character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(HeadMask::new)
    }

    /// Size of the set intersection with `other`.
    pub fn overlap(&self, other: &HeadMask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }
}

/// Indices of the `k` largest values, in descending value order; ties go to
/// the lowest index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn check_k(k: usize, h: usize) -> Result<()> {
    if k < 1 || k > h {
        return Err(Error::Domain(format!("subset size {k} outside [1, {h}]")));
    }
    Ok(())
}

/// Mask of the `k` largest perturbed logits.
pub fn hard_top_k(r: &[f64], k: usize) -> Result<HeadMask> {
    check_k(k, r.len())?;
    HeadMask::from_indices(r.len(), &top_k_indices(r, k))
}

/// Relaxed K-hot gate vector with its per-round one-hot relaxations.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector {
    pub gates: Vec<f64>,
    pub k: usize,
    pub rounds: Vec<Vec<f64>>,
    /// Set when some `1 - g` fell to [`SATURATION_FLOOR`] or below.
    pub saturated: bool,
}

impl GateVector {
    pub fn sum(&self) -> f64 {
        self.gates.iter().sum()
    }

    pub fn max_gate(&self) -> f64 {
        self.gates.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Tape handles produced by [`soft_top_k_node`].
#[derive(Debug, Clone)]
pub struct SoftTopK {
    pub gates: NodeId,
    pub rounds: Vec<NodeId>,
    pub saturated: bool,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `softmax(r / tau)` recorded on `tape`; `r` is a `[H]` node.
pub fn gumbel_softmax_node(tape: &mut Tape, r: NodeId, tau: f64) -> Result<NodeId> {
    check_tau(tau)?;
    let scaled = tape.scale(r, 1.0 / tau)?;
    tape.softmax(scaled, 0)
}

/// Differentiable soft top-K of the `[H]` perturbed-logit node `r`.
pub fn soft_top_k_node(tape: &mut Tape, r: NodeId, k: usize, tau: f64) -> Result<SoftTopK> {
    let h = tape.value(r).len();
    if tape.shape(r).len() != 1 {
        return Err(Error::Dimension(format!("soft top-K expects a vector, got {:?}", tape.shape(r))));
    }
    check_k(k, h)?;
    check_tau(tau)?;
    let mut rounds = Vec::with_capacity(k);
    let mut saturated = false;
    let mut logits = r;
    let mut total: Option<NodeId> = None;
    for round in 0..k {
        let scaled = tape.scale(logits, 1.0 / tau)?;
        let g = tape.softmax(scaled, 0)?;
        rounds.push(g);
        total = Some(match total {
            None => g,
            Some(t) => tape.add(t, g)?,
        });
        if round + 1 < k {
            // log(1 - g) in log-sum-exp form: a floor on 1 - g would cap the
            // suppression and let a head whose lead exceeds -log(floor) be
            // picked again at small temperatures.
            let suppress = tape.log_one_minus_softmax(scaled)?;
            saturated |= tape.data(suppress).iter().any(|&v| v <= SATURATION_FLOOR.ln());
            logits = tape.add(logits, suppress)?;
        }
    }
    Ok(SoftTopK { gates: total.expect("k >= 1"), rounds, saturated })
}

/// Relaxed single-head selection `softmax(r / tau)`.
pub fn gumbel_softmax(r: &[f64], tau: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let rid = tape.constant(Tensor::vector(r.to_vec())?)?;
    let g = gumbel_softmax_node(&mut tape, rid, tau)?;
    Ok(tape.data(g).to_vec())
}

/// Value-only soft top-K.
pub fn soft_top_k(r: &[f64], k: usize, tau: f64) -> Result<GateVector> {
    let mut tape = Tape::new();
    let rid = tape.constant(Tensor::vector(r.to_vec())?)?;
    let out = soft_top_k_node(&mut tape, rid, k, tau)?;
    Ok(GateVector {
        gates: tape.data(out.gates).to_vec(),
        k,
        rounds: out.rounds.iter().map(|&n| tape.data(n).to_vec()).collect(),
        saturated: out.saturated,
    })
}

/// Largest subset size accepted by [`subset_probability_oracle`].
pub const ORACLE_MAX_K: usize = 8;

/// Exact probability that Gumbel top-K returns the set `subset`, by summing
/// the sequential-draw probability over every ordering of the set.
pub fn subset_probability_oracle(w: &ImportanceWeights, subset: &[usize]) -> Result<f64> {
    let k = subset.len();
    if k > ORACLE_MAX_K {
        return Err(Error::Domain(format!(
            "subset of size {k} exceeds the enumeration limit {ORACLE_MAX_K}"
        )));
    }
    check_k(k, w.len())?;
    let mut seen = vec![false; w.len()];
    for &j in subset {
        if j >= w.len() || seen[j] {
            return Err(Error::Domain(format!("invalid or repeated head {j} in subset")));
        }
        seen[j] = true;
    }
    let iota = w.importance();
    let z = w.total();
    let members: Vec<f64> = subset.iter().map(|&j| iota[j]).collect();
    let mut used = vec![false; k];
    Ok(ordered_sum(&members, &mut used, z, 0))
}

fn ordered_sum(members: &[f64], used: &mut [bool], remaining: f64, depth: usize) -> f64 {
    if depth == members.len() {
        return 1.0;
    }
    let mut total = 0.0;
    for i in 0..members.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        total += members[i] / remaining * ordered_sum(members, used, remaining - members[i], depth + 1);
        used[i] = false;
    }
    total
}

/// Log-linear cool-down from `tau_ini` to `tau_end` over `n_cooldown` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub tau_ini: f64,
    pub tau_end: f64,
    pub n_cooldown: u64,
}

impl TemperatureSchedule {
    pub fn new(tau_ini: f64, tau_end: f64, n_cooldown: u64) -> Result<Self> {
        let s = TemperatureSchedule { tau_ini, tau_end, n_cooldown };
        s.validate()?;
        Ok(s)
    }

    /// Fixed temperature (no annealing).
    pub fn constant(tau: f64) -> Result<Self> {
        TemperatureSchedule::new(tau, tau, 1)
    }

    /// Joint-pruning values for the 12-layer encoder setting.
    pub fn encoder_default() -> Self {
        TemperatureSchedule { tau_ini: 1000.0, tau_end: 1e-8, n_cooldown: 25_000 }
    }

    /// Joint-pruning values for the encoder-decoder setting.
    pub fn seq2seq_default() -> Self {
        TemperatureSchedule { tau_ini: 0.1, tau_end: 1e-8, n_cooldown: 15_000 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_end > 0.0) || !(self.tau_ini >= self.tau_end) || !self.tau_ini.is_finite() {
            return Err(Error::Domain(format!(
                "schedule needs tau_ini >= tau_end > 0, got {} and {}",
                self.tau_ini, self.tau_end
            )));
        }
        if self.n_cooldown == 0 {
            return Err(Error::Domain("n_cooldown must be positive".into()));
        }
        Ok(())
    }

    pub fn temperature_at(&self, n: u64) -> f64 {
        if n == 0 {
            return self.tau_ini;
        }
        if n >= self.n_cooldown {
            return self.tau_end;
        }
        let frac = n as f64 / self.n_cooldown as f64;
        let (li, le) = (self.tau_ini.ln(), self.tau_end.ln());
        (li - frac * (li - le)).exp()
    }

    /// Same endpoints with the cool-down rescaled to `n_cooldown` steps.
    pub fn with_cooldown(&self, n_cooldown: u64) -> Self {
        TemperatureSchedule { n_cooldown: n_cooldown.max(1), ..*self }
    }
}

pub fn temperature_at(schedule: &TemperatureSchedule, n: u64) -> f64 {
    schedule.temperature_at(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn gumbel_noise_is_deterministic_per_seed() {
        let a = sample_gumbel(7, &mut seeded(3)).unwrap();
        let b = sample_gumbel(7, &mut seeded(3)).unwrap();
        assert_eq!(a, b);
        assert!(sample_gumbel(0, &mut seeded(3)).is_err());
    }

    #[test]
    fn gumbel_moments() {
        let noise = sample_gumbel(1_000_000, &mut seeded(11)).unwrap();
        let n = noise.0.len() as f64;
        let mean = noise.0.iter().sum::<f64>() / n;
        let var = noise.0.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // Euler-Mascheroni constant and pi^2 / 6.
        assert!((mean - 0.577_215_664_9).abs() < 0.01, "mean {mean}");
        assert!((var - std::f64::consts::PI.powi(2) / 6.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn argmax_cases() {
        let w = ImportanceWeights::new(vec![10.0, 0.0, 0.0]).unwrap();
        assert_eq!(gumbel_argmax(&w, &GumbelNoise::zeros(3)).unwrap(), 0);
        let single = ImportanceWeights::new(vec![-3.0]).unwrap();
        for seed in 0..10 {
            let n = sample_gumbel(1, &mut seeded(seed)).unwrap();
            assert_eq!(gumbel_argmax(&single, &n).unwrap(), 0);
        }
        let tie = ImportanceWeights::new(vec![1.0, 1.0]).unwrap();
        assert_eq!(gumbel_argmax(&tie, &GumbelNoise::zeros(2)).unwrap(), 0);
        assert!(gumbel_argmax(&tie, &GumbelNoise::zeros(3)).is_err());
    }

    #[test]
    fn argmax_frequencies_follow_importance() {
        let w = ImportanceWeights::from_importance(&[1.0, 2.0, 3.0]).unwrap();
        let mut rng = seeded(5);
        let mut counts = [0usize; 3];
        let draws = 200_000;
        for _ in 0..draws {
            let n = sample_gumbel(3, &mut rng).unwrap();
            counts[gumbel_argmax(&w, &n).unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((*c as f64 / draws as f64 - p).abs() < 0.01);
        }
    }

    #[test]
    fn gumbel_softmax_examples() {
        assert_eq!(gumbel_softmax(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        let g = gumbel_softmax(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((g[0] - 2.0 / 3.0).abs() < 1e-15 && (g[1] - 1.0 / 3.0).abs() < 1e-15);
        let g = gumbel_softmax(&[1.0, 0.5, -0.2], 1e-6).unwrap();
        for (a, b) in g.iter().zip([1.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(gumbel_softmax(&[1.0], 0.0).is_err());
        assert!(gumbel_softmax(&[1.0], -1.0).is_err());
    }

    #[test]
    fn hard_top_k_examples() {
        assert_eq!(hard_top_k(&[3.0, 1.0, 2.0], 2).unwrap().kept(), vec![0, 2]);
        assert_eq!(hard_top_k(&[3.0, 1.0, 2.0], 3).unwrap().count(), 3);
        assert_eq!(hard_top_k(&[1.0, 1.0, 1.0], 1).unwrap().kept(), vec![0]);
        assert!(hard_top_k(&[1.0, 2.0], 3).is_err());
        assert!(hard_top_k(&[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn oracle_examples() {
        let w = ImportanceWeights::from_importance(&[1.0, 2.0, 3.0]).unwrap();
        // Enumerated by hand: (2/6)(3/4) + (3/6)(2/3).
        let p = subset_probability_oracle(&w, &[1, 2]).unwrap();
        assert!((p - 7.0 / 12.0).abs() < 1e-15);
        let p1 = subset_probability_oracle(&w, &[1]).unwrap();
        assert!((p1 - 2.0 / 6.0).abs() < 1e-15);
        let full = subset_probability_oracle(&w, &[0, 1, 2]).unwrap();
        assert!((full - 1.0).abs() < 1e-15);
        let big = ImportanceWeights::new(vec![0.0; 10]).unwrap();
        assert!(subset_probability_oracle(&big, &(0..9).collect::<Vec<_>>()).is_err());
        assert!(subset_probability_oracle(&w, &[1, 1]).is_err());
    }

    #[test]
    fn oracle_sums_to_one_over_subsets() {
        let w = ImportanceWeights::new(vec![0.3, -0.2, 1.1, 0.0, 0.7]).unwrap();
        let mut total = 0.0;
        for a in 0..5 {
            for b in a + 1..5 {
                total += subset_probability_oracle(&w, &[a, b]).unwrap();
            }
        }
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn soft_top_k_examples() {
        let g = soft_top_k(&[0.7; 4], 2, 3.0).unwrap();
        for v in &g.gates {
            assert!((v - 0.5).abs() < 1e-15);
        }
        // Round 1: [1/2, 1/4, 1/4]; round 2 logits ln2 + ln(1/2) = 0 and
        // ln(3/4) twice, giving [1/(1 + 3/2), 3/4 / 5/2, 3/4 / 5/2].
        let g = soft_top_k(&[2f64.ln(), 0.0, 0.0], 2, 1.0).unwrap();
        let expect_rounds = [[0.5, 0.25, 0.25], [0.4, 0.3, 0.3]];
        for (round, expect) in g.rounds.iter().zip(expect_rounds) {
            for (a, b) in round.iter().zip(expect) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        for (a, b) in g.gates.iter().zip([0.9, 0.55, 0.55]) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!((g.sum() - 2.0).abs() < 1e-12);

        let r = [3.0, 2.0, 1.0, 0.0];
        let g = soft_top_k(&r, 2, 1e-6).unwrap();
        let hard = hard_top_k(&r, 2).unwrap().as_gates();
        for (a, b) in g.gates.iter().zip(hard) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(g.saturated);
    }

    #[test]
    fn no_head_is_picked_twice_at_tiny_temperature() {
        // A lead far beyond -ln(1e-12) must still be suppressed after its round.
        let r = [125.0, 6.8, 5.3, -2.0, 0.0];
        let g = soft_top_k(&r, 3, 1e-8).unwrap();
        assert_eq!(g.gates, vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(g.saturated);
        assert!((g.sum() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn soft_top_1_matches_gumbel_softmax_exactly() {
        let r = [0.3, -1.2, 2.5, 0.0];
        for tau in [0.1, 1.0, 7.0] {
            assert_eq!(soft_top_k(&r, 1, tau).unwrap().gates, gumbel_softmax(&r, tau).unwrap());
        }
    }

    #[test]
    fn schedule_values() {
        let s = TemperatureSchedule::encoder_default();
        assert_eq!(s.temperature_at(0), 1000.0);
        assert_eq!(s.temperature_at(25_000), 1e-8);
        assert_eq!(s.temperature_at(40_000), 1e-8);
        let mid = s.temperature_at(12_500);
        assert!((mid - 10f64.powf(-2.5)).abs() < 1e-12);
        assert!(TemperatureSchedule::new(1e-3, 1.0, 10).is_err());
        assert!(TemperatureSchedule::new(1.0, 0.0, 10).is_err());
        assert!(TemperatureSchedule::new(1.0, 0.5, 0).is_err());
    }

    #[test]
    fn mask_bit_string() {
        let m = HeadMask::from_indices(5, &[0, 3]).unwrap();
        assert_eq!(m.to_bit_string(), "10010");
        assert_eq!(HeadMask::from_bit_string("10010").unwrap(), m);
        assert!(HeadMask::from_bit_string("10x").is_err());
    }
}
