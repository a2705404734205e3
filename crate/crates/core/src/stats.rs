//! Estimators and goodness-of-fit tests.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::walk::Increment;

/// Significance level used for every verdict.
pub const ALPHA: f64 = 0.01;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.iter().all(|&x| x == xs[0]) {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Lag-1 sample autocorrelation.
pub fn lag1_autocorrelation(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let denom: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    if denom == 0.0 {
        return 0.0;
    }
    let num: f64 = xs.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
    num / denom
}

/// Delete-one jackknife standard error of the ratio `Σa / Σb`.
pub fn jackknife_ratio_se(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let loo: Vec<f64> = a.iter().zip(b).map(|(x, y)| (sa - x) / (sb - y)).collect();
    let m = mean(&loo);
    let ss: f64 = loo.iter().map(|r| (r - m).powi(2)).sum();
    ((n as f64 - 1.0) / n as f64 * ss).sqrt()
}

pub fn standard_normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Upper quantile `z` with `P(N > z) = p`.
pub fn normal_upper_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpeedEstimate {
    /// `Σ|X_n| / Σn` over trajectories.
    pub nu_direct: f64,
    pub nu_direct_se: Option<f64>,
    /// Mean level gain over mean duration of regeneration blocks.
    pub nu_regen: f64,
    pub nu_regen_se: f64,
    pub steps: u64,
    pub blocks: usize,
}

pub const MIN_SPEED_BLOCKS: usize = 30;

/// Speed from final positions `(|X_n|, n)` of independent walks and from
/// pooled regeneration increments.
pub fn estimate_speed(increments: &[Increment], finals: &[(u32, u64)]) -> Result<SpeedEstimate> {
    if increments.len() < MIN_SPEED_BLOCKS {
        return Err(Error::InsufficientData {
            needed: MIN_SPEED_BLOCKS,
            got: increments.len(),
        });
    }
    if finals.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let dl: Vec<f64> = increments.iter().map(|i| i.dlevel as f64).collect();
    let dt: Vec<f64> = increments.iter().map(|i| i.dt as f64).collect();
    let nu_regen = dl.iter().sum::<f64>() / dt.iter().sum::<f64>();
    let lv: Vec<f64> = finals.iter().map(|&(l, _)| f64::from(l)).collect();
    let nv: Vec<f64> = finals.iter().map(|&(_, n)| n as f64).collect();
    let nu_direct = lv.iter().sum::<f64>() / nv.iter().sum::<f64>();
    Ok(SpeedEstimate {
        nu_direct,
        nu_direct_se: (finals.len() > 1).then(|| jackknife_ratio_se(&lv, &nv)),
        nu_regen,
        nu_regen_se: jackknife_ratio_se(&dl, &dt),
        steps: nv.iter().sum::<f64>() as u64,
        blocks: increments.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SigmaEstimate {
    #[serde(skip)]
    pub chi: Vec<f64>,
    pub nu: f64,
    pub sigma2: f64,
    pub sigma2_se: f64,
    pub chi_mean: f64,
    pub chi_mean_se: f64,
    pub mean_dt: f64,
    /// All χ equal: σ² is zero and carries no information.
    pub degenerate: bool,
    /// Set when the estimate was requested outside the regime where it is finite.
    pub unstable: bool,
}

/// `σ² = Var(χ) / mean Δζ` from χ samples and the mean block duration.
pub fn sigma2_from_chi(chi: &[f64], mean_dt: f64) -> f64 {
    variance(chi) / mean_dt
}

pub const MIN_SIGMA_BLOCKS: usize = 100;

/// Centred block displacements `χ_j = Δ|X|_j - ν Δζ_j` and the diffusion constant.
pub fn estimate_sigma(increments: &[Increment], nu: f64, clt_regime: bool) -> Result<SigmaEstimate> {
    if increments.len() < MIN_SIGMA_BLOCKS {
        return Err(Error::InsufficientData {
            needed: MIN_SIGMA_BLOCKS,
            got: increments.len(),
        });
    }
    let n = increments.len() as f64;
    let chi: Vec<f64> = increments.iter().map(|i| i.dlevel as f64 - nu * i.dt as f64).collect();
    let dt: Vec<f64> = increments.iter().map(|i| i.dt as f64).collect();
    let mean_dt = mean(&dt);
    let var = variance(&chi);
    let sigma2 = var / mean_dt;

    // jackknife for Var(χ)/mean(Δζ) using running sums
    let s1: f64 = chi.iter().sum();
    let s2: f64 = chi.iter().map(|x| x * x).sum();
    let st: f64 = dt.iter().sum();
    let m = n - 1.0;
    let loo: Vec<f64> = chi
        .iter()
        .zip(&dt)
        .map(|(&x, &t)| {
            let (a1, a2) = (s1 - x, s2 - x * x);
            let v = (a2 - a1 * a1 / m) / (m - 1.0);
            v / ((st - t) / m)
        })
        .collect();
    let lm = mean(&loo);
    let sigma2_se = ((n - 1.0) / n * loo.iter().map(|r| (r - lm).powi(2)).sum::<f64>()).sqrt();

    Ok(SigmaEstimate {
        nu,
        sigma2,
        sigma2_se,
        chi_mean: s1 / n,
        chi_mean_se: (var / n).sqrt(),
        mean_dt,
        degenerate: var == 0.0,
        unstable: !clt_regime,
        chi,
    })
}

/// `B^n_t = (|X_{⌊nt⌋}| - nνt) / (σ√n)` at each grid time.
pub fn build_b(levels: &[u32], nu: f64, sigma: f64, n: usize, grid: &[f64]) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let scale = sigma * (n as f64).sqrt();
    grid.iter()
        .map(|&t| {
            if t < 0.0 {
                return Err(Error::Domain(format!("negative time {t}")));
            }
            let k = (n as f64 * t).floor() as usize;
            let level = levels.get(k).ok_or_else(|| {
                Error::Range(format!("time {t} needs step {k} beyond horizon {}", levels.len() - 1))
            })?;
            Ok((f64::from(*level) - n as f64 * nu * t) / scale)
        })
        .collect()
}

/// `sup_{s,t <= T, |s-t| <= δ} |B_s - B_t| ∧ 1`, evaluated on the lattice `k/n`.
pub fn modulus_functional(levels: &[u32], nu: f64, sigma: f64, n: usize, horizon: f64, delta: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let last = (n as f64 * horizon).floor() as usize;
    if last >= levels.len() {
        return Err(Error::Range(format!("horizon {horizon} beyond trajectory")));
    }
    let scale = sigma * (n as f64).sqrt();
    let b: Vec<f64> = (0..=last)
        .map(|k| (f64::from(levels[k]) - nu * k as f64) / scale)
        .collect();
    let w = (n as f64 * delta).floor() as usize;
    // sliding-window max - min with monotone deques
    let mut maxq = std::collections::VecDeque::new();
    let mut minq = std::collections::VecDeque::new();
    let mut best = 0.0f64;
    for (i, &x) in b.iter().enumerate() {
        while maxq.back().is_some_and(|&j: &usize| b[j] <= x) {
            maxq.pop_back();
        }
        maxq.push_back(i);
        while minq.back().is_some_and(|&j: &usize| b[j] >= x) {
            minq.pop_back();
        }
        minq.push_back(i);
        while maxq.front().is_some_and(|&j| j + w < i) {
            maxq.pop_front();
        }
        while minq.front().is_some_and(|&j| j + w < i) {
            minq.pop_front();
        }
        best = best.max(b[maxq[0]] - b[minq[0]]);
        if best >= 1.0 {
            return Ok(1.0);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestReport {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub dof: Option<usize>,
    pub alpha: f64,
    /// True when the null hypothesis is not rejected at `alpha`.
    pub pass: bool,
}

impl TestReport {
    fn new(statistic: f64, p_value: f64, n: usize, dof: Option<usize>, alpha: f64) -> Self {
        let p_value = p_value.clamp(0.0, 1.0);
        Self {
            statistic,
            p_value,
            n,
            dof,
            alpha,
            pass: p_value > alpha,
        }
    }

    pub fn at_level(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self.pass = self.p_value > alpha;
        self
    }
}

/// Survival function of the Kolmogorov distribution, `P(K > λ)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Jacobi theta form converges fast for small λ
        let c = -std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let s: f64 = (1..=10)
            .map(|k| {
                let j = f64::from(2 * k - 1);
                (c * j * j).exp()
            })
            .sum();
        1.0 - (std::f64::consts::TAU).sqrt() / lambda * s
    } else {
        let s: f64 = (1..=100)
            .map(|k| {
                let k = f64::from(k);
                let sign = if k as u32 % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * k * k * lambda * lambda).exp()
            })
            .sum();
        2.0 * s
    }
}

/// Two-sided KS statistic `D = max_i max(i/n - F(x_(i)), F(x_(i)) - (i-1)/n)`.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

pub const MIN_KS_SAMPLES: usize = 20;

/// KS test with the asymptotic Kolmogorov p-value.
pub fn ks_test<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> Result<TestReport> {
    if samples.len() < MIN_KS_SAMPLES {
        return Err(Error::InsufficientData {
            needed: MIN_KS_SAMPLES,
            got: samples.len(),
        });
    }
    let d = ks_statistic(samples, cdf);
    let p = kolmogorov_sf((samples.len() as f64).sqrt() * d);
    Ok(TestReport::new(d, p, samples.len(), None, ALPHA))
}

fn chi2_sf(stat: f64, dof: usize) -> f64 {
    ChiSquared::new(dof as f64)
        .map(|d| 1.0 - d.cdf(stat))
        .unwrap_or(f64::NAN)
}

/// Merges consecutive cells until each carries expected weight `>= min`;
/// an undersized remainder joins the last full group.
fn pool_cells(expected: &[f64], min: f64) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut cur = Vec::new();
    let mut acc = 0.0;
    for (i, &e) in expected.iter().enumerate() {
        cur.push(i);
        acc += e;
        if acc >= min {
            groups.push(std::mem::take(&mut cur));
            acc = 0.0;
        }
    }
    if !cur.is_empty() {
        match groups.last_mut() {
            Some(g) => g.extend(cur),
            None => groups.push(cur),
        }
    }
    groups
}

/// Pearson goodness of fit against a pmf over the same cells. Cells with
/// expected count below 5 are pooled with their neighbours.
pub fn chi_square_test(observed: &[u64], expected_pmf: &[f64]) -> Result<TestReport> {
    if observed.len() != expected_pmf.len() {
        return Err(Error::Domain("observed and expected cell counts differ".into()));
    }
    let total_p: f64 = expected_pmf.iter().sum();
    if (total_p - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("expected pmf sums to {total_p}; include a tail cell")));
    }
    let n: u64 = observed.iter().sum();
    let expected: Vec<f64> = expected_pmf.iter().map(|p| p * n as f64).collect();
    let groups = pool_cells(&expected, 5.0);
    if groups.len() < 2 {
        return Err(Error::DegenerateTest("all expected mass falls in one pooled cell".into()));
    }
    let stat: f64 = groups
        .iter()
        .map(|g| {
            let o: f64 = g.iter().map(|&i| observed[i] as f64).sum();
            let e: f64 = g.iter().map(|&i| expected[i]).sum();
            (o - e).powi(2) / e
        })
        .sum();
    let dof = groups.len() - 1;
    Ok(TestReport::new(stat, chi2_sf(stat, dof), n as usize, Some(dof), ALPHA))
}

/// Pearson homogeneity test for two samples over the same cells.
pub fn chi_square_two_sample(a: &[u64], b: &[u64]) -> Result<TestReport> {
    if a.len() != b.len() {
        return Err(Error::Domain("samples have different cell counts".into()));
    }
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let n = na + nb;
    // pool on the smaller expected arm
    let smaller = na.min(nb);
    let expected_small: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| (x + y) as f64 * smaller / n).collect();
    let groups = pool_cells(&expected_small, 5.0);
    if groups.len() < 2 {
        return Err(Error::DegenerateTest("all mass falls in one pooled cell".into()));
    }
    let mut stat = 0.0;
    for g in &groups {
        let oa: f64 = g.iter().map(|&i| a[i] as f64).sum();
        let ob: f64 = g.iter().map(|&i| b[i] as f64).sum();
        let tot = oa + ob;
        let (ea, eb) = (tot * na / n, tot * nb / n);
        stat += (oa - ea).powi(2) / ea + (ob - eb).powi(2) / eb;
    }
    let dof = groups.len() - 1;
    Ok(TestReport::new(stat, chi2_sf(stat, dof), n as usize, Some(dof), ALPHA))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendVerdict {
    Stabilizing,
    Diverging,
    Inconclusive,
}

impl TrendVerdict {
    pub fn as_str(self) -> &'static str {
        match self {
            TrendVerdict::Stabilizing => "stabilizing",
            TrendVerdict::Diverging => "diverging",
            TrendVerdict::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendReport {
    /// `(sample size, running moment)` at forty sizes per decade from 1000 on.
    pub evaluations: Vec<(usize, f64)>,
    /// Relative spread `(max - min) / max` of the last three evaluations.
    pub last_three_spread: f64,
    /// `(batch size, median over disjoint batches of the batch moment)` at
    /// decade batch sizes with at least ten batches.
    pub batch_medians: Vec<(usize, f64)>,
    /// Smallest decade-to-decade growth factor, minus one, over the last two
    /// decades of `batch_medians`.
    pub growth_per_decade: f64,
    pub censored_fraction: f64,
    pub tainted: bool,
    pub verdict: TrendVerdict,
}

pub const MIN_TREND_SAMPLES: usize = 10_000;
pub const STABLE_SPREAD: f64 = 0.05;
pub const DIVERGING_GROWTH: f64 = 0.25;
pub const MAX_CENSORED_FRACTION: f64 = 0.01;
const TREND_START: usize = 1000;
const EVALUATIONS_PER_DECADE: f64 = 40.0;
const MIN_BATCHES: usize = 10;

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Diagnoses whether the moment of the given order is finite.
///
/// The running moment is evaluated at log-spaced sizes; "stabilizing" means
/// the last three evaluations agree within 5%.
///
/// "diverging" means the typical empirical moment grows by more than 25% per
/// decade of sample size, over each of the last two decades. The typical
/// moment at size `n` is the median over disjoint batches of size `n`, which
/// is not thrown off by a single extreme draw the way the running moment is.
///
/// Growth takes precedence: a heavy tail can leave the running moment flat
/// over a short window while the batch medians keep climbing. Data that
/// neither grow nor settle are "inconclusive".
pub fn moment_trend(samples: &[f64], censored: usize, order: i32) -> Result<TrendReport> {
    if samples.len() < MIN_TREND_SAMPLES {
        return Err(Error::InsufficientData {
            needed: MIN_TREND_SAMPLES,
            got: samples.len(),
        });
    }
    let total = samples.len();
    let mut sizes: Vec<usize> = Vec::new();
    let mut step = 0.0;
    loop {
        let n = (TREND_START as f64 * 10f64.powf(step / EVALUATIONS_PER_DECADE)).round() as usize;
        if n >= total {
            break;
        }
        sizes.push(n);
        step += 1.0;
    }
    sizes.push(total);
    sizes.dedup();

    let powers: Vec<f64> = samples.iter().map(|x| x.powi(order)).collect();
    let mut evaluations = Vec::with_capacity(sizes.len());
    let mut acc = 0.0;
    let mut next = 0;
    for (i, x) in powers.iter().enumerate() {
        acc += x;
        if i + 1 == sizes[next] {
            evaluations.push((i + 1, acc / (i + 1) as f64));
            next += 1;
            if next == sizes.len() {
                break;
            }
        }
    }

    let tail: Vec<f64> = evaluations.iter().rev().take(3).map(|&(_, m)| m).collect();
    let hi = tail.iter().cloned().fold(f64::MIN, f64::max);
    let lo = tail.iter().cloned().fold(f64::MAX, f64::min);
    let last_three_spread = if hi > 0.0 { (hi - lo) / hi } else { 0.0 };

    let mut batch_medians = Vec::new();
    let mut n = 10usize;
    while total / n >= MIN_BATCHES {
        let moments: Vec<f64> = powers
            .chunks_exact(n)
            .map(|c| c.iter().sum::<f64>() / n as f64)
            .collect();
        batch_medians.push((n, median(moments)));
        n *= 10;
    }
    let ratios: Vec<f64> = batch_medians
        .windows(2)
        .map(|w| w[1].1 / w[0].1)
        .collect();
    let last_two = &ratios[ratios.len().saturating_sub(2)..];
    let growth_per_decade = last_two.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;

    let growing = last_two.len() == 2 && growth_per_decade > DIVERGING_GROWTH;
    let flat = last_three_spread < STABLE_SPREAD;
    let verdict = if growing {
        TrendVerdict::Diverging
    } else if flat {
        TrendVerdict::Stabilizing
    } else {
        TrendVerdict::Inconclusive
    };
    let censored_fraction = censored as f64 / (total + censored) as f64;
    Ok(TrendReport {
        evaluations,
        last_three_spread,
        batch_medians,
        growth_per_decade,
        censored_fraction,
        tainted: censored_fraction > MAX_CENSORED_FRACTION,
        verdict,
    })
}

pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Least-squares slope of `log P(X >= n)` against `n` for `n` in `lo..=hi`.
pub fn tail_slope(samples: &[u64], lo: u64, hi: u64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Range("no samples".into()));
    }
    let (min, max) = (*samples.iter().min().unwrap(), *samples.iter().max().unwrap());
    if lo >= hi || lo < min || hi > max {
        return Err(Error::Range(format!(
            "range [{lo}, {hi}] not inside observed support [{min}, {max}]"
        )));
    }
    let n = samples.len() as f64;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for t in lo..=hi {
        let count = samples.iter().filter(|&&x| x >= t).count();
        if count == 0 {
            return Err(Error::Range(format!("empty survival cell at {t}")));
        }
        xs.push(t as f64);
        ys.push((count as f64 / n).ln());
    }
    Ok(least_squares_slope(&xs, &ys))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NestedVariance {
    /// Sample variance of the per-group means.
    pub between: f64,
    /// Mean within-group variance divided by the group size.
    pub inner_noise: f64,
    /// `between - inner_noise`, clipped at zero.
    pub corrected: f64,
    /// Jackknife over groups.
    pub se: f64,
    pub clipped: bool,
}

/// Variance across groups of the group expectations, corrected for the
/// sampling noise of the group means.
pub fn nested_variance(groups: &[Vec<f64>]) -> Result<NestedVariance> {
    if groups.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: groups.len(),
        });
    }
    if groups.iter().any(|g| g.len() < 2) {
        return Err(Error::InsufficientData { needed: 2, got: 1 });
    }
    fn raw(groups: &[&Vec<f64>]) -> (f64, f64) {
        let means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
        let noise = groups.iter().map(|g| variance(g) / g.len() as f64).sum::<f64>() / groups.len() as f64;
        (variance(&means), noise)
    }
    let all: Vec<&Vec<f64>> = groups.iter().collect();
    let (between, inner_noise) = raw(&all);
    let est = between - inner_noise;

    let t = groups.len();
    let se = if t > 2 {
        let loo: Vec<f64> = (0..t)
            .map(|i| {
                let sub: Vec<&Vec<f64>> = all.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, g)| *g).collect();
                let (b, w) = raw(&sub);
                b - w
            })
            .collect();
        let m = mean(&loo);
        ((t as f64 - 1.0) / t as f64 * loo.iter().map(|x| (x - m).powi(2)).sum::<f64>()).sqrt()
    } else {
        f64::NAN
    };
    Ok(NestedVariance {
        between,
        inner_noise,
        corrected: est.max(0.0),
        se,
        clipped: est < 0.0,
    })
}

/// `(x ∧ 1) ∨ (-1)`
pub fn clip_unit(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn inc(dt: u64, dlevel: i64) -> Increment {
        Increment { dt, dlevel }
    }

    #[test]
    fn speed_examples() {
        let incs = vec![inc(4, 2), inc(6, 3)];
        // the ratio definition needs only sums; pad to the minimum block count
        let padded: Vec<Increment> = incs.iter().cycle().take(30).copied().collect();
        let est = estimate_speed(&padded, &[(10, 10)]).unwrap();
        assert!((est.nu_regen - 0.5).abs() < 1e-15);
        assert_eq!(est.nu_direct, 1.0);
        assert!(est.nu_direct_se.is_none());
        assert!(matches!(
            estimate_speed(&incs, &[(10, 10)]),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn sigma_examples() {
        let s2 = sigma2_from_chi(&[1.0, -1.0, 1.0, -1.0], 5.0);
        assert!((s2 - (4.0 / 3.0) / 5.0).abs() < 1e-15);
        let flat: Vec<Increment> = (0..200).map(|_| inc(2, 1)).collect();
        let est = estimate_sigma(&flat, 0.5, true).unwrap();
        assert_eq!(est.sigma2, 0.0);
        assert!(est.degenerate);
        assert!(!est.unstable);
        assert!(estimate_sigma(&flat[..50], 0.5, true).is_err());
        assert!(estimate_sigma(&flat, 0.5, false).unwrap().unstable);
    }

    #[test]
    fn sigma_jackknife_matches_brute_force() {
        let mut rng = CounterRng::new(3);
        let incs: Vec<Increment> = (0..150)
            .map(|_| inc(1 + rng.below(20), 1 + rng.below(5) as i64))
            .collect();
        let nu = 0.3;
        let est = estimate_sigma(&incs, nu, true).unwrap();
        let n = incs.len();
        let loo: Vec<f64> = (0..n)
            .map(|i| {
                let rest: Vec<&Increment> = incs.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, x)| x).collect();
                let chi: Vec<f64> = rest.iter().map(|x| x.dlevel as f64 - nu * x.dt as f64).collect();
                let mdt = rest.iter().map(|x| x.dt as f64).sum::<f64>() / rest.len() as f64;
                variance(&chi) / mdt
            })
            .collect();
        let m = mean(&loo);
        let se = ((n as f64 - 1.0) / n as f64 * loo.iter().map(|x| (x - m).powi(2)).sum::<f64>()).sqrt();
        assert!((est.sigma2_se - se).abs() < 1e-9 * se.max(1.0));
    }

    #[test]
    fn b_process_examples() {
        let b = build_b(&[0, 1, 2], 0.5, 1.0, 2, &[1.0]).unwrap();
        assert!((b[0] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        let linear: Vec<u32> = (0..=100).collect();
        let b = build_b(&linear, 1.0, 2.0, 50, &[0.0, 0.5, 1.0, 2.0]).unwrap();
        assert!(b.iter().all(|x| x.abs() < 1e-12));
        assert!(matches!(build_b(&linear, 1.0, 0.0, 50, &[1.0]), Err(Error::Domain(_))));
        assert!(matches!(build_b(&linear, 1.0, 1.0, 50, &[3.0]), Err(Error::Range(_))));
        assert_eq!(modulus_functional(&linear, 1.0, 1.0, 50, 2.0, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn modulus_matches_brute_force() {
        let mut rng = CounterRng::new(12);
        let mut levels = vec![10u32];
        for _ in 0..400 {
            let l = *levels.last().unwrap();
            levels.push(if rng.next_f64() < 0.6 { l + 1 } else { l - 1 });
        }
        let (nu, sigma, n) = (0.2, 3.0, 100);
        for delta in [0.0, 0.03, 0.1, 0.5] {
            let got = modulus_functional(&levels, nu, sigma, n, 4.0, delta).unwrap();
            let b: Vec<f64> = (0..=400)
                .map(|k| (f64::from(levels[k]) - nu * k as f64) / (sigma * 10.0))
                .collect();
            let w = (n as f64 * delta).floor() as usize;
            let mut best: f64 = 0.0;
            for i in 0..b.len() {
                for j in i..b.len().min(i + w + 1) {
                    best = best.max((b[i] - b[j]).abs());
                }
            }
            assert!((got - best.min(1.0)).abs() < 1e-12, "delta {delta}: {got} vs {best}");
        }
    }

    #[test]
    fn ks_examples() {
        let d = ks_statistic(&[0.1, 0.5, 0.9], |x| x);
        assert!((d - 7.0 / 30.0).abs() < 1e-12);
        assert!(ks_test(&[0.1, 0.5, 0.9], |x| x).is_err());

        let n = 200;
        let perfect: Vec<f64> = (1..=n).map(|i| i as f64 / (n + 1) as f64).collect();
        let r = ks_test(&perfect, |x| x).unwrap();
        assert!(r.statistic <= 1.0 / n as f64 + 1e-12);
        assert!(r.pass);

        let mut rng = CounterRng::new(77);
        let normals: Vec<f64> = (0..1000).map(|_| rng.next_normal()).collect();
        let r = ks_test(&normals, |x| x.clamp(0.0, 1.0)).unwrap();
        assert!(r.p_value < 0.001);
        let r = ks_test(&normals, standard_normal_cdf).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn kolmogorov_branches_agree() {
        // both series are valid everywhere; compare near the switch point
        for lambda in [0.9, 1.0, 1.1, 1.18, 1.25, 1.4] {
            let theta = {
                let c = -std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
                let s: f64 = (1..=50).map(|k| (c * f64::from(2 * k - 1).powi(2)).exp()).sum();
                1.0 - std::f64::consts::TAU.sqrt() / lambda * s
            };
            let alt: f64 = 2.0
                * (1..=200)
                    .map(|k| {
                        let kf = f64::from(k);
                        (if k % 2 == 1 { 1.0 } else { -1.0 }) * (-2.0 * kf * kf * lambda * lambda).exp()
                    })
                    .sum::<f64>();
            assert!((theta - alt).abs() < 1e-12);
            assert!((kolmogorov_sf(lambda) - alt).abs() < 1e-12);
        }
        // p = 0.01 at λ ≈ 1.6276
        assert!((kolmogorov_sf(1.6276) - 0.01).abs() < 1e-4);
    }

    #[test]
    fn chi_square_examples() {
        let r = chi_square_test(&[50, 50], &[0.5, 0.5]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);
        let r = chi_square_test(&[60, 40], &[0.5, 0.5]).unwrap();
        assert!((r.statistic - 4.0).abs() < 1e-12);
        assert_eq!(r.dof, Some(1));
        assert!((r.p_value - 0.0455).abs() < 1e-3);
        assert!(matches!(
            chi_square_test(&[10, 0], &[1.0, 0.0]),
            Err(Error::DegenerateTest(_))
        ));
        assert!(chi_square_test(&[10, 0], &[0.5, 0.4]).is_err());
    }

    #[test]
    fn chi_square_pools_sparse_cells() {
        // expected counts 50, 40, 6, 3, 1: the last three pool into one cell
        let r = chi_square_test(&[50, 40, 6, 3, 1], &[0.5, 0.4, 0.06, 0.03, 0.01]).unwrap();
        assert_eq!(r.dof, Some(2));
        assert!(r.statistic.abs() < 1e-12);
    }

    #[test]
    fn two_sample_chi_square() {
        let r = chi_square_two_sample(&[100, 200, 300], &[100, 200, 300]).unwrap();
        assert!(r.statistic.abs() < 1e-12 && r.pass);
        let r = chi_square_two_sample(&[100, 200], &[200, 100]).unwrap();
        assert!(r.p_value < 1e-6);
    }

    #[test]
    fn trend_verdicts_on_synthetic_data() {
        let mut rng = CounterRng::new(1);
        let bounded: Vec<f64> = (0..100_000).map(|_| rng.next_f64() * 3.0).collect();
        let r = moment_trend(&bounded, 0, 2).unwrap();
        assert_eq!(r.verdict, TrendVerdict::Stabilizing);
        assert!(!r.tainted);

        // Pareto with tail index 1.5: infinite variance
        let mut rng = CounterRng::new(2);
        let pareto: Vec<f64> = (0..1_000_000).map(|_| (1.0 - rng.next_f64()).powf(-1.0 / 1.5)).collect();
        let r = moment_trend(&pareto, 0, 2).unwrap();
        assert_eq!(r.verdict, TrendVerdict::Diverging, "{r:?}");

        let r = moment_trend(&bounded, 2000, 2).unwrap();
        assert!(r.tainted);
        assert!(moment_trend(&bounded[..500], 0, 2).is_err());
    }

    #[test]
    fn tail_slope_on_geometric() {
        let mut rng = CounterRng::new(6);
        // P(X >= n) = 2^-n
        let xs: Vec<u64> = (0..100_000)
            .map(|_| {
                let mut k = 0;
                while rng.next_f64() < 0.5 {
                    k += 1;
                }
                k
            })
            .collect();
        let s = tail_slope(&xs, 1, 8).unwrap();
        assert!((s + 2f64.ln()).abs() < 0.05, "{s}");
        assert!(matches!(tail_slope(&[3, 3, 3], 3, 4), Err(Error::Range(_))));
        assert!(matches!(tail_slope(&[3, 3, 3], 3, 3), Err(Error::Range(_))));
    }

    #[test]
    fn nested_variance_constant_is_zero() {
        let groups = vec![vec![0.7; 10]; 5];
        let v = nested_variance(&groups).unwrap();
        assert_eq!(v.corrected, 0.0);
        assert!(!v.clipped);
    }

    #[test]
    fn nested_variance_is_unbiased_on_hierarchical_gaussian() {
        // tree effect sd 0.5, inner noise sd 2: true between-tree variance 0.25
        let mut rng = CounterRng::new(31);
        for w in [2usize, 10] {
            let reps = 4000;
            let mut acc = 0.0;
            let mut raw = 0.0;
            for _ in 0..reps {
                let groups: Vec<Vec<f64>> = (0..20)
                    .map(|_| {
                        let a = 0.5 * rng.next_normal();
                        (0..w).map(|_| a + 2.0 * rng.next_normal()).collect()
                    })
                    .collect();
                let v = nested_variance(&groups).unwrap();
                acc += v.between - v.inner_noise;
                raw += v.between;
            }
            let est = acc / reps as f64;
            // sd of a single estimate is about sqrt(2/19) * (0.25 + 4/w); 4000 reps
            let tol = 4.0 * (2.0f64 / 19.0).sqrt() * (0.25 + 4.0 / w as f64) / (reps as f64).sqrt();
            assert!((est - 0.25).abs() < tol, "w={w}: {est}");
            // the uncorrected estimator is biased upward by 4/w
            assert!(raw / reps as f64 > 0.25 + 2.0 / w as f64);
        }
    }
}
