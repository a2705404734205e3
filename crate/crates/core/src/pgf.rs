//! Offspring laws and their generating-function arithmetic.
//!
//! A supercritical law `f` with extinction probability `q` splits into two
//! pieces. Vertices with an infinite line of descent (the backbone) carry the
//! joint law of (total children, surviving children) conditioned on at least
//! one surviving child. Vertices whose line dies out (traps) reproduce with
//! the subcritical law read off `h(s) = f(qs)/q`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities must sum to one within this absolute tolerance.
pub const NORMALIZATION_TOL: f64 = 1e-12;
const FIXED_POINT_TOL: f64 = 1e-14;
const TIE_TOLERANCE: f64 = 1e-9;
const FIXED_POINT_MAX_ITER: usize = 1_000_000;

/// Inverse-CDF lookup. Returns the first index whose cumulative mass exceeds `u`.
///
/// `cdf` must be non-decreasing. A `u` past the last entry (possible only
/// through rounding in the cumulative sums) maps to the last index.
pub fn sample_discrete(cdf: &[f64], u: f64) -> usize {
    let idx = cdf.partition_point(|&c| c <= u);
    idx.min(cdf.len().saturating_sub(1))
}

fn cumulative<I: IntoIterator<Item = f64>>(probs: I) -> Vec<f64> {
    let mut acc = 0.0;
    probs
        .into_iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect()
}

/// Finite-support offspring distribution `{p_k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffspringLaw {
    /// (k, p_k) with p_k > 0, sorted by k.
    atoms: Vec<(u32, f64)>,
    cdf: Vec<f64>,
}

impl OffspringLaw {
    pub fn new<I: IntoIterator<Item = (u32, f64)>>(pairs: I) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (k, p) in pairs {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidLaw(format!("probability {p} for k={k} is not a non-negative number")));
            }
            if map.insert(k, p).is_some() {
                return Err(Error::InvalidLaw(format!("duplicate atom k={k}")));
            }
        }
        let total: f64 = map.values().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidLaw(format!(
                "probabilities sum to {total}, not 1 (normalization violated)"
            )));
        }
        let atoms: Vec<(u32, f64)> = map.into_iter().filter(|&(_, p)| p > 0.0).collect();
        let cdf = cumulative(atoms.iter().map(|&(_, p)| p));
        Ok(Self { atoms, cdf })
    }

    /// The degenerate law putting all mass on `k`.
    pub fn point(k: u32) -> Self {
        Self {
            atoms: vec![(k, 1.0)],
            cdf: vec![1.0],
        }
    }

    pub fn atoms(&self) -> &[(u32, f64)] {
        &self.atoms
    }

    pub fn prob(&self, k: u32) -> f64 {
        self.atoms
            .binary_search_by_key(&k, |&(j, _)| j)
            .map(|i| self.atoms[i].1)
            .unwrap_or(0.0)
    }

    pub fn max_k(&self) -> u32 {
        self.atoms.last().map(|&(k, _)| k).unwrap_or(0)
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|&(k, p)| f64::from(k) * p).sum()
    }

    /// `f(s)` without the domain check.
    pub fn f(&self, s: f64) -> f64 {
        self.atoms.iter().map(|&(k, p)| p * s.powi(k as i32)).sum()
    }

    /// `f'(s)` without the domain check.
    pub fn f_prime(&self, s: f64) -> f64 {
        self.atoms
            .iter()
            .filter(|&&(k, _)| k > 0)
            .map(|&(k, p)| f64::from(k) * p * s.powi(k as i32 - 1))
            .sum()
    }

    /// Generating function (`order == 0`) or its derivative (`order == 1`) at `s` in `[0, 1]`.
    pub fn pgf_eval(&self, s: f64, order: u8) -> Result<f64> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Domain(format!("pgf argument {s} outside [0, 1]")));
        }
        match order {
            0 => Ok(self.f(s)),
            1 => Ok(self.f_prime(s)),
            _ => Err(Error::Domain(format!("pgf derivative order {order} not supported"))),
        }
    }

    /// Inverse-CDF draw over the support in ascending `k`.
    #[inline]
    pub fn sample(&self, u: f64) -> u32 {
        self.atoms[sample_discrete(&self.cdf, u)].0
    }

    /// Smallest fixed point of `f` in `[0, 1]`.
    ///
    /// Iterates `s <- f(s)` from 0, which increases monotonically to the
    /// smallest root. Falls back to bisection if the iteration stalls (slow
    /// linear convergence near criticality).
    pub fn extinction_probability(&self) -> f64 {
        let p0 = self.prob(0);
        if p0 == 0.0 {
            return 0.0;
        }
        if self.mean() <= 1.0 {
            return 1.0;
        }
        let mut s = 0.0;
        for _ in 0..FIXED_POINT_MAX_ITER {
            let next = self.f(s);
            if (next - s).abs() < FIXED_POINT_TOL {
                return self.newton_polish(next);
            }
            s = next;
        }
        // f(lo) >= lo on [0, q]; walk hi towards 1 until f(hi) < hi
        let lo = s;
        let mut gap = (1.0 - lo) / 2.0;
        let mut hi = lo + gap;
        while self.f(hi) >= hi && gap > 1e-300 {
            gap /= 2.0;
            hi = 1.0 - gap;
        }
        bisect_root(|x| self.f(x) - x, lo, hi)
    }
}

impl OffspringLaw {
    /// The fixed-point iteration converges only linearly, at rate `f'(q)`;
    /// a few Newton steps on `f(s) - s` take the last digits. From below the
    /// root the iterates increase monotonically because `f` is convex.
    fn newton_polish(&self, mut s: f64) -> f64 {
        for _ in 0..8 {
            let slope = self.f_prime(s) - 1.0;
            if slope >= 0.0 {
                break;
            }
            let next = s - (self.f(s) - s) / slope;
            if !(next > s) || next > 1.0 {
                break;
            }
            s = next;
        }
        s
    }
}

fn bisect_root<F: Fn(f64) -> f64>(g: F, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < f64::EPSILON {
            break;
        }
    }
    0.5 * (lo + hi)
}

impl fmt::Display for OffspringLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, (k, p)) in self.atoms.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{k}: {p}")?;
        }
        write!(f, "}}")
    }
}

/// A probability written either as a number or as an exact fraction `"a/b"`.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
enum ProbSpec {
    Number(f64),
    Text(String),
}

impl ProbSpec {
    fn value(&self) -> Result<f64> {
        match self {
            ProbSpec::Number(x) => Ok(*x),
            ProbSpec::Text(s) => parse_probability(s),
        }
    }
}

/// Parses `"0.25"` or `"1/4"`.
pub fn parse_probability(text: &str) -> Result<f64> {
    let text = text.trim();
    let bad = || Error::Parse(format!("cannot parse probability {text:?}"));
    match text.split_once('/') {
        Some((num, den)) => {
            let num: f64 = num.trim().parse().map_err(|_| bad())?;
            let den: f64 = den.trim().parse().map_err(|_| bad())?;
            if den == 0.0 {
                return Err(bad());
            }
            Ok(num / den)
        }
        None => text.parse().map_err(|_| bad()),
    }
}

impl<'de> Deserialize<'de> for OffspringLaw {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let pairs: Vec<(u32, ProbSpec)> = Vec::deserialize(d)?;
        let pairs = pairs
            .into_iter()
            .map(|(k, p)| p.value().map(|p| (k, p)))
            .collect::<Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        OffspringLaw::new(pairs).map_err(serde::de::Error::custom)
    }
}

impl Serialize for OffspringLaw {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.atoms.serialize(s)
    }
}

/// Joint law of (total children k, backbone children j), `k >= j >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLaw {
    /// Sorted by (k, j).
    entries: Vec<((u32, u32), f64)>,
    cdf: Vec<f64>,
}

impl JointLaw {
    pub fn entries(&self) -> &[((u32, u32), f64)] {
        &self.entries
    }

    pub fn prob(&self, k: u32, j: u32) -> f64 {
        self.entries
            .binary_search_by_key(&(k, j), |&(kj, _)| kj)
            .map(|i| self.entries[i].1)
            .unwrap_or(0.0)
    }

    /// Marginal law of the total child count.
    pub fn total_marginal(&self) -> BTreeMap<u32, f64> {
        let mut m = BTreeMap::new();
        for &((k, _), p) in &self.entries {
            *m.entry(k).or_insert(0.0) += p;
        }
        m
    }

    /// Marginal law of the backbone child count.
    pub fn backbone_marginal(&self) -> BTreeMap<u32, f64> {
        let mut m = BTreeMap::new();
        for &((_, j), p) in &self.entries {
            *m.entry(j).or_insert(0.0) += p;
        }
        m
    }

    #[inline]
    pub fn sample(&self, u: f64) -> (u32, u32) {
        self.entries[sample_discrete(&self.cdf, u)].0
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * f64::from(n - i) / f64::from(i + 1))
}

/// Everything the tree generator and the regime classifier need from a
/// supercritical law.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedLaws {
    pub law: OffspringLaw,
    pub q: f64,
    pub mu: f64,
    pub fprime_q: f64,
    /// Law of the root's child count in the conditioned tree.
    pub conditioned: OffspringLaw,
    /// Offspring law of trap vertices; `None` when `p_0 = 0` (no traps).
    pub trap: Option<OffspringLaw>,
    pub backbone_joint: JointLaw,
}

impl DerivedLaws {
    pub fn new(law: &OffspringLaw) -> Result<Self> {
        let mu = law.mean();
        if mu <= 1.0 {
            return Err(Error::Model(format!(
                "offspring mean {mu} <= 1; a supercritical law is required"
            )));
        }
        let q = law.extinction_probability();
        let fprime_q = law.f_prime(q);
        let survive = 1.0 - q;

        let conditioned = OffspringLaw::new(
            law.atoms()
                .iter()
                .map(|&(k, p)| (k, p * (1.0 - q.powi(k as i32)) / survive)),
        )?;

        let trap = if q > 0.0 {
            Some(OffspringLaw::new(
                law.atoms().iter().map(|&(k, p)| (k, p * q.powi(k as i32 - 1))),
            )?)
        } else {
            None
        };

        let mut entries = Vec::new();
        for &(k, p) in law.atoms() {
            for j in 1..=k {
                let w = p * binomial(k, j) * survive.powi(j as i32) * q.powi((k - j) as i32) / survive;
                if w > 0.0 {
                    entries.push(((k, j), w));
                }
            }
        }
        let cdf = cumulative(entries.iter().map(|&(_, p)| p));
        Ok(Self {
            law: law.clone(),
            q,
            mu,
            fprime_q,
            conditioned,
            trap,
            backbone_joint: JointLaw { entries, cdf },
        })
    }

    /// Mean of the trap law: `f'(q)` when there are traps, 0 otherwise.
    pub fn trap_mean(&self) -> f64 {
        if self.trap.is_some() {
            self.fprime_q
        } else {
            0.0
        }
    }

    pub fn thresholds(&self) -> Thresholds {
        let m = self.trap_mean();
        let (clt, speed) = if m > 0.0 {
            (m.powf(-0.5), 1.0 / m)
        } else {
            (f64::INFINITY, f64::INFINITY)
        };
        Thresholds {
            recurrence: 1.0 / self.mu,
            clt,
            speed,
        }
    }

    /// Biases within a relative `1e-9` of a threshold count as lying on it
    /// and go to the slower regime.
    pub fn classify_regime(&self, beta: f64) -> Result<RegimeReport> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::Domain(format!("bias must be a positive number, got {beta}")));
        }
        let thresholds = self.thresholds();
        let at = |t: f64| t.is_finite() && (beta - t).abs() <= TIE_TOLERANCE * t;
        let regime = if beta < thresholds.recurrence || at(thresholds.recurrence) {
            Regime::Recurrent
        } else if beta < thresholds.clt && !at(thresholds.clt) {
            Regime::BallisticClt
        } else if beta < thresholds.speed && !at(thresholds.speed) {
            Regime::BallisticNoClt
        } else {
            Regime::SubBallistic
        };
        Ok(RegimeReport {
            beta,
            regime,
            thresholds,
        })
    }
}

/// `(1/mu, f'(q)^{-1/2}, f'(q)^{-1})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thresholds {
    pub recurrence: f64,
    pub clt: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Recurrent,
    BallisticClt,
    BallisticNoClt,
    SubBallistic,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Recurrent => "recurrent",
            Regime::BallisticClt => "ballistic_clt",
            Regime::BallisticNoClt => "ballistic_no_clt",
            Regime::SubBallistic => "sub_ballistic",
        }
    }

    pub fn is_ballistic(self) -> bool {
        matches!(self, Regime::BallisticClt | Regime::BallisticNoClt)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegimeReport {
    pub beta: f64,
    pub regime: Regime,
    pub thresholds: Thresholds,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binary() -> OffspringLaw {
        OffspringLaw::new([(0, 0.25), (2, 0.75)]).unwrap()
    }

    #[test]
    fn pgf_values() {
        let law = binary();
        assert!((law.pgf_eval(1.0, 0).unwrap() - 1.0).abs() < 1e-15);
        assert!((law.pgf_eval(1.0, 1).unwrap() - 1.5).abs() < 1e-15);
        assert!((law.pgf_eval(1.0 / 3.0, 1).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pgf_domain_error() {
        let law = binary();
        assert!(matches!(law.pgf_eval(1.5, 0), Err(Error::Domain(_))));
        assert!(matches!(law.pgf_eval(-0.1, 1), Err(Error::Domain(_))));
        assert!(matches!(law.pgf_eval(0.5, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn extinction_examples() {
        assert_eq!(OffspringLaw::point(2).extinction_probability(), 0.0);
        let sub = OffspringLaw::new([(0, 0.5), (1, 0.5)]).unwrap();
        assert_eq!(sub.extinction_probability(), 1.0);
        // 3q^2 - 4q + 1 = 0 has roots 1/3 and 1
        assert!((binary().extinction_probability() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn extinction_near_criticality_converges() {
        // mean 1.001: fixed-point iteration contracts at rate ~0.999
        let law = OffspringLaw::new([(0, 0.4995), (2, 0.5005)]).unwrap();
        let q = law.extinction_probability();
        assert!((law.f(q) - q).abs() < 1e-12);
        // exact root of p2 q^2 - q + p0 = 0
        let exact = 0.4995 / 0.5005;
        assert!((q - exact).abs() < 1e-9, "{q} vs {exact}");
    }

    #[test]
    fn derived_binary_laws() {
        let d = DerivedLaws::new(&binary()).unwrap();
        assert!((d.q - 1.0 / 3.0).abs() < 1e-12);
        assert!((d.fprime_q - 0.5).abs() < 1e-12);
        assert!((d.conditioned.prob(2) - 1.0).abs() < 1e-12);
        assert_eq!(d.conditioned.prob(0), 0.0);
        let trap = d.trap.as_ref().unwrap();
        assert!((trap.prob(0) - 0.75).abs() < 1e-12);
        assert!((trap.prob(2) - 0.25).abs() < 1e-12);
        assert!((d.backbone_joint.prob(2, 1) - 0.5).abs() < 1e-12);
        assert!((d.backbone_joint.prob(2, 2) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn derive_rejects_subcritical() {
        let sub = OffspringLaw::new([(0, 0.5), (1, 0.5)]).unwrap();
        assert!(matches!(DerivedLaws::new(&sub), Err(Error::Model(_))));
    }

    #[test]
    fn no_deaths_means_no_traps() {
        let law = OffspringLaw::new([(1, 0.5), (3, 0.5)]).unwrap();
        let d = DerivedLaws::new(&law).unwrap();
        assert_eq!(d.q, 0.0);
        assert!(d.trap.is_none());
        assert_eq!(d.backbone_joint.prob(3, 3), 0.5);
        assert_eq!(d.classify_regime(100.0).unwrap().regime, Regime::BallisticClt);
    }

    #[test]
    fn regime_examples() {
        let d = DerivedLaws::new(&binary()).unwrap();
        let t = d.thresholds();
        assert!((t.recurrence - 2.0 / 3.0).abs() < 1e-12);
        assert!((t.clt - 2f64.sqrt()).abs() < 1e-9);
        assert!((t.speed - 2.0).abs() < 1e-9);
        assert_eq!(d.classify_regime(1.0).unwrap().regime, Regime::BallisticClt);
        assert_eq!(d.classify_regime(0.5).unwrap().regime, Regime::Recurrent);
        assert_eq!(d.classify_regime(1.8).unwrap().regime, Regime::BallisticNoClt);
        assert_eq!(d.classify_regime(2.5).unwrap().regime, Regime::SubBallistic);
        assert!(matches!(d.classify_regime(0.0), Err(Error::Domain(_))));
        assert!(matches!(d.classify_regime(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn ties_go_to_the_slower_regime() {
        let d = DerivedLaws::new(&binary()).unwrap();
        let t = d.thresholds();
        assert_eq!(d.classify_regime(t.recurrence).unwrap().regime, Regime::Recurrent);
        assert_eq!(d.classify_regime(t.clt).unwrap().regime, Regime::BallisticNoClt);
        assert_eq!(d.classify_regime(t.speed).unwrap().regime, Regime::SubBallistic);
        // the closed-form values, not just the computed thresholds
        assert_eq!(d.classify_regime(2.0 / 3.0).unwrap().regime, Regime::Recurrent);
        assert_eq!(d.classify_regime(2f64.sqrt()).unwrap().regime, Regime::BallisticNoClt);
        assert_eq!(d.classify_regime(2.0).unwrap().regime, Regime::SubBallistic);
    }

    #[test]
    fn sample_discrete_examples() {
        let trap = OffspringLaw::new([(0, 0.75), (2, 0.25)]).unwrap();
        assert_eq!(trap.sample(0.5), 0);
        assert_eq!(trap.sample(0.8), 2);
        let deg = OffspringLaw::point(2);
        for u in [0.0, 0.3, 0.999_999] {
            assert_eq!(deg.sample(u), 2);
        }
    }

    #[test]
    fn sample_discrete_frequencies() {
        let law = OffspringLaw::new([(0, 0.2), (1, 0.1), (3, 0.45), (5, 0.25)]).unwrap();
        let mut rng = crate::rng::CounterRng::new(5);
        let n = 100_000usize;
        let mut counts = BTreeMap::new();
        for _ in 0..n {
            *counts.entry(law.sample(rng.next_f64())).or_insert(0usize) += 1;
        }
        for &(k, p) in law.atoms() {
            let c = counts.get(&k).copied().unwrap_or(0) as f64;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((c - n as f64 * p).abs() < 4.0 * sd, "k={k}: {c} vs {}", n as f64 * p);
        }
    }

    #[test]
    fn normalization_violation_is_reported() {
        let err = OffspringLaw::new([(0, 0.4), (2, 0.5)]).unwrap_err();
        assert!(err.to_string().contains("normalization"));
        assert!(OffspringLaw::new([(0, -0.1), (2, 1.1)]).is_err());
        assert!(OffspringLaw::new([(2, 0.5), (2, 0.5)]).is_err());
    }

    #[test]
    fn parses_json_pairs_with_fractions() {
        let law: OffspringLaw = serde_json::from_str(r#"[[0, "1/4"], [2, 0.75]]"#).unwrap();
        assert_eq!(law, binary());
        assert!(serde_json::from_str::<OffspringLaw>(r#"[[0, "1/4"], [2, "2/3"]]"#).is_err());
        assert!(serde_json::from_str::<OffspringLaw>(r#"[[0, "x/4"], [2, 0.75]]"#).is_err());
    }

    fn arb_supercritical() -> impl Strategy<Value = OffspringLaw> {
        proptest::collection::vec(0.01f64..1.0, 2..7)
            .prop_filter_map("needs mean > 1 and p_0 > 0", |w| {
                let total: f64 = w.iter().sum();
                let law = OffspringLaw::new(w.iter().enumerate().map(|(k, x)| (k as u32, x / total))).ok()?;
                (law.mean() > 1.05).then_some(law)
            })
    }

    proptest! {
        #[test]
        fn fixed_point_and_derived_invariants(law in arb_supercritical()) {
            let d = DerivedLaws::new(&law).unwrap();
            prop_assert!((law.f(d.q) - d.q).abs() < 1e-12);
            // f is convex with fixed points q and 1, so f(s) < s strictly between them
            for i in 1..20 {
                let s = d.q + (1.0 - d.q) * f64::from(i) / 20.0;
                prop_assert!(law.f(s) < s);
            }
            // below q the iterate from 0 never overshoots: f(s) > s on [0, q)
            if d.q > 1e-6 {
                prop_assert!(law.f(0.5 * d.q) > 0.5 * d.q);
            }
            for (k, p) in d.backbone_joint.total_marginal() {
                prop_assert!((p - d.conditioned.prob(k)).abs() < 1e-12);
            }
            prop_assert!(d.conditioned.prob(0) == 0.0);
            let trap = d.trap.as_ref().unwrap();
            prop_assert!((trap.mean() - d.fprime_q).abs() < 1e-12);
        }

        #[test]
        fn regime_is_monotone_in_beta(law in arb_supercritical(), a in 0.01f64..5.0, b in 0.01f64..5.0) {
            let d = DerivedLaws::new(&law).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(d.classify_regime(lo).unwrap().regime <= d.classify_regime(hi).unwrap().regime);
        }
    }
}
