//! Canonical experiments.
//!
//! Replicate `i` of every experiment draws its randomness from
//! `derive_seed(seed, label, i)`, replicates run on the rayon pool, and the
//! results are gathered in index order before anything is reduced. Output is
//! therefore independent of the number of threads.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::pgf::{DerivedLaws, Regime, RegimeReport};
use crate::rng::{derive_seed, CounterRng};
use crate::stats::{self, NestedVariance, SpeedEstimate, TestReport, TrendReport, TrendVerdict, ALPHA};
use crate::tree::{sample_conditioned_rejection, Acceptance, Height, TreeHandle};
use crate::walk::{self, kernel_probabilities, Increment, Move, WalkOptions, Walker};

/// Default master seed.
pub const DEFAULT_SEED: u64 = 0x005E_ED0F_7EE5;

/// A plain table of already formatted cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        fn field(s: &str) -> String {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        }
        let mut out = String::new();
        for row in std::iter::once(&self.columns).chain(&self.rows) {
            let line: Vec<String> = row.iter().map(|c| field(c)).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

macro_rules! row {
    ($($x:expr),* $(,)?) => { vec![$($x.to_string()),*] };
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// One pass/fail claim checked by an experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

/// What an experiment hands back to its caller: CSV tables keyed by file
/// stem, a JSON summary and the verdicts.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub experiment: &'static str,
    pub tables: Vec<(String, Table)>,
    pub summary: serde_json::Value,
    pub checks: Vec<Check>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

// ---------------------------------------------------------------------------
// regimes

pub fn regimes(laws: &DerivedLaws, betas: &[f64]) -> Result<Outcome> {
    let mut table = Table::new(&[
        "beta", "regime", "recurrence", "clt", "speed", "q", "mu", "fprime_q", "beta2_fprime_q",
    ]);
    let th = laws.thresholds();
    let reports: Vec<RegimeReport> = betas.iter().map(|&b| laws.classify_regime(b)).collect::<Result<_>>()?;
    for r in &reports {
        table.push(row![
            r.beta,
            r.regime.as_str(),
            th.recurrence,
            th.clt,
            th.speed,
            laws.q,
            laws.mu,
            laws.trap_mean(),
            r.beta * r.beta * laws.trap_mean()
        ]);
    }
    let residual = (laws.law.f(laws.q) - laws.q).abs();
    Ok(Outcome {
        experiment: "regimes",
        tables: vec![("regimes".into(), table)],
        summary: json!({ "q": laws.q, "mu": laws.mu, "fprime_q": laws.trap_mean(), "thresholds": th, "reports": reports }),
        checks: vec![Check::new("fixed point", residual < 1e-12, format!("|f(q) - q| = {residual:e}"))],
    })
}

// ---------------------------------------------------------------------------
// speed, σ² and the start-up offset

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PilotParams {
    pub walks: usize,
    pub steps: usize,
}

impl Default for PilotParams {
    fn default() -> Self {
        Self {
            walks: 500,
            steps: 200_000,
        }
    }
}

/// Constants of the annealed limit, estimated from independent pilot walks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Constants {
    pub beta: f64,
    pub regime: Regime,
    pub nu: f64,
    pub nu_se: f64,
    pub sigma2: f64,
    pub sigma2_se: f64,
    /// `lim (E|X_n| - nν)`: the O(1) lag a walk started at the root carries.
    pub offset: f64,
    pub offset_se: f64,
    pub blocks: usize,
    pub walks: usize,
    pub steps: u64,
}

impl Constants {
    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    /// `(|X_n| - nν - offset) / (σ√n)`
    pub fn standardize(&self, level: f64, n: usize) -> f64 {
        (level - n as f64 * self.nu - self.offset) / (self.sigma() * (n as f64).sqrt())
    }
}

struct PilotWalk {
    first: Option<(u64, i64)>,
    increments: Vec<Increment>,
    /// `Σ_{s<T} (|X_{ζ+T}| - |X_{ζ+s}|)` for each block.
    remaining: Vec<i64>,
}

fn pilot_walk(tree: &TreeHandle, beta: f64, steps: usize, walk_seed: u64) -> Result<PilotWalk> {
    let traj = walk::run_walk(tree, beta, steps, walk_seed, WalkOptions::default());
    let rec = walk::regenerations(&traj)?;
    let remaining = rec
        .zeta_x
        .windows(2)
        .map(|w| {
            let end = i64::from(traj.levels[w[1]]);
            traj.levels[w[0]..w[1]].iter().map(|&l| end - i64::from(l)).sum()
        })
        .collect();
    Ok(PilotWalk {
        first: rec.zeta_x.first().map(|&z| (z as u64, rec.levels[0])),
        increments: rec.increments,
        remaining,
    })
}

/// Estimates ν (regeneration ratio), σ² = Var(χ)/E[Δζ] and the start-up
/// offset from `params.walks` walks on fresh trees.
///
/// The offset follows from renewal-reward: with `V_t = |X_t| - νt`,
/// `E V_n → E V_{ζ_1} - E[Σ_{s<T} (V_T - V_s)] / E[T]` where `T` is a block
/// length; the second term is what the block straddling time `n` still owes.
pub fn estimate_constants(laws: &Arc<DerivedLaws>, beta: f64, params: PilotParams, seed: u64) -> Result<Constants> {
    let regime = laws.classify_regime(beta)?.regime;
    if !regime.is_ballistic() {
        return Err(Error::Model(format!(
            "beta = {beta} is {}; the limit constants exist only in the ballistic regimes",
            regime.as_str()
        )));
    }
    let runs: Vec<PilotWalk> = (0..params.walks)
        .into_par_iter()
        .map(|i| {
            let tree = TreeHandle::new(derive_seed(seed, "pilot-tree", i as u64), laws.clone());
            pilot_walk(&tree, beta, params.steps, derive_seed(seed, "pilot-walk", i as u64))
        })
        .collect::<Result<_>>()?;
    let increments: Vec<Increment> = runs.iter().flat_map(|r| r.increments.iter().copied()).collect();
    let remaining: Vec<i64> = runs.iter().flat_map(|r| r.remaining.iter().copied()).collect();
    let speed = stats::estimate_speed(&increments, &[(0, 1)])?;
    let nu = speed.nu_regen;
    let sigma = stats::estimate_sigma(&increments, nu, regime == Regime::BallisticClt)?;

    let firsts: Vec<f64> = runs.iter().filter_map(|r| r.first).map(|(z, l)| l as f64 - nu * z as f64).collect();
    let owed: Vec<f64> = increments
        .iter()
        .zip(&remaining)
        .map(|(inc, &rem)| rem as f64 - nu * (inc.dt * (inc.dt + 1)) as f64 / 2.0)
        .collect();
    let dts: Vec<f64> = increments.iter().map(|i| i.dt as f64).collect();
    let owed_ratio = owed.iter().sum::<f64>() / dts.iter().sum::<f64>();
    let offset = stats::mean(&firsts) - owed_ratio;
    let offset_se = (stats::variance(&firsts) / firsts.len() as f64 + stats::jackknife_ratio_se(&owed, &dts).powi(2)).sqrt();

    Ok(Constants {
        beta,
        regime,
        nu,
        nu_se: speed.nu_regen_se,
        sigma2: sigma.sigma2,
        sigma2_se: sigma.sigma2_se,
        offset,
        offset_se,
        blocks: increments.len(),
        walks: params.walks,
        steps: (params.walks * params.steps) as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeedParams {
    pub steps: usize,
    pub walks: usize,
    /// Blocks for the independence check.
    pub iid_blocks: usize,
}

impl Default for SpeedParams {
    fn default() -> Self {
        Self {
            steps: 1_000_000,
            walks: 8,
            iid_blocks: 10_000,
        }
    }
}

/// Block-structure diagnostics from one long walk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockCheck {
    pub blocks: usize,
    pub steps: u64,
    pub lag1_dt: f64,
    pub lag1_dlevel: f64,
    /// ν used to centre χ, taken from independent walks.
    pub nu: f64,
    pub chi_mean: f64,
    pub chi_mean_se: f64,
}

impl BlockCheck {
    pub fn chi_z(&self) -> f64 {
        self.chi_mean / self.chi_mean_se
    }

    pub fn pass(&self) -> bool {
        self.lag1_dt.abs() < 0.05 && self.lag1_dlevel.abs() < 0.05 && self.chi_z().abs() < 3.0
    }
}

/// Runs one walk until it has `blocks` confirmed increments and checks
/// them for lag-1 correlation and centring against an external `nu`.
pub fn block_check(laws: &Arc<DerivedLaws>, beta: f64, blocks: usize, nu: f64, seed: u64) -> Result<BlockCheck> {
    let tree = TreeHandle::new(derive_seed(seed, "iid-tree", 0), laws.clone());
    let walk_seed = derive_seed(seed, "iid-walk", 0);
    let mut steps = ((blocks as f64 + 2.0) / nu.max(1e-3) * 1.2) as usize;
    loop {
        let rec = walk::regenerations(&walk::run_walk(&tree, beta, steps, walk_seed, WalkOptions::default()))?;
        if rec.increments.len() >= blocks {
            let inc = &rec.increments[..blocks];
            let dt: Vec<f64> = inc.iter().map(|i| i.dt as f64).collect();
            let dl: Vec<f64> = inc.iter().map(|i| i.dlevel as f64).collect();
            let chi: Vec<f64> = dl.iter().zip(&dt).map(|(l, t)| l - nu * t).collect();
            return Ok(BlockCheck {
                blocks,
                steps: steps as u64,
                lag1_dt: stats::lag1_autocorrelation(&dt),
                lag1_dlevel: stats::lag1_autocorrelation(&dl),
                nu,
                chi_mean: stats::mean(&chi),
                chi_mean_se: (stats::variance(&chi) / blocks as f64).sqrt(),
            });
        }
        if steps > 1 << 34 {
            return Err(Error::InsufficientData {
                needed: blocks,
                got: rec.increments.len(),
            });
        }
        steps *= 2;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedRow {
    pub beta: f64,
    pub regime: Regime,
    pub estimate: Option<SpeedEstimate>,
    pub blocks_check: Option<BlockCheck>,
}

impl SpeedRow {
    /// `|ν_direct - ν_regen|` in combined standard errors.
    pub fn agreement_z(&self) -> Option<f64> {
        let e = self.estimate?;
        let se = (e.nu_direct_se? .powi(2) + e.nu_regen_se.powi(2)).sqrt();
        Some((e.nu_direct - e.nu_regen).abs() / se)
    }

    pub fn relative_gap(&self) -> Option<f64> {
        self.estimate.map(|e| (e.nu_direct - e.nu_regen).abs() / e.nu_regen)
    }
}

pub fn speed_at(laws: &Arc<DerivedLaws>, beta: f64, params: SpeedParams, seed: u64) -> Result<SpeedRow> {
    let regime = laws.classify_regime(beta)?.regime;
    let runs: Vec<(Vec<Increment>, (u32, u64))> = (0..params.walks)
        .into_par_iter()
        .map(|i| {
            let tree = TreeHandle::new(derive_seed(seed, "tree", i as u64), laws.clone());
            let traj = walk::run_walk(&tree, beta, params.steps, derive_seed(seed, "walk", i as u64), WalkOptions::default());
            let rec = walk::regenerations(&traj)?;
            Ok((rec.increments, (*traj.levels.last().unwrap(), params.steps as u64)))
        })
        .collect::<Result<_>>()?;
    let increments: Vec<Increment> = runs.iter().flat_map(|r| r.0.iter().copied()).collect();
    let finals: Vec<(u32, u64)> = runs.iter().map(|r| r.1).collect();
    let estimate = match stats::estimate_speed(&increments, &finals) {
        Ok(e) => Some(e),
        Err(Error::InsufficientData { .. }) => None,
        Err(e) => return Err(e),
    };
    let blocks_check = match (regime.is_ballistic(), estimate) {
        (true, Some(e)) if params.iid_blocks > 1 => Some(block_check(laws, beta, params.iid_blocks, e.nu_regen, seed)?),
        _ => None,
    };
    Ok(SpeedRow {
        beta,
        regime,
        estimate,
        blocks_check,
    })
}

pub fn speed(laws: &Arc<DerivedLaws>, betas: &[f64], params: SpeedParams, seed: u64) -> Result<Outcome> {
    let rows: Vec<SpeedRow> = betas.iter().map(|&b| speed_at(laws, b, params, seed)).collect::<Result<_>>()?;
    let mut table = Table::new(&[
        "beta", "regime", "steps", "walks", "nu_direct", "nu_direct_se", "nu_regen", "nu_regen_se", "blocks",
        "agreement_z", "relative_gap", "lag1_dt", "lag1_dlevel", "chi_mean", "chi_mean_se",
    ]);
    let mut checks = Vec::new();
    for r in &rows {
        let e = r.estimate;
        let b = r.blocks_check;
        table.push(row![
            r.beta,
            r.regime.as_str(),
            params.steps,
            params.walks,
            opt(e.map(|e| e.nu_direct)),
            opt(e.and_then(|e| e.nu_direct_se)),
            opt(e.map(|e| e.nu_regen)),
            opt(e.map(|e| e.nu_regen_se)),
            e.map(|e| e.blocks).unwrap_or(0),
            opt(r.agreement_z()),
            opt(r.relative_gap()),
            opt(b.map(|b| b.lag1_dt)),
            opt(b.map(|b| b.lag1_dlevel)),
            opt(b.map(|b| b.chi_mean)),
            opt(b.map(|b| b.chi_mean_se)),
        ]);
        if r.regime == Regime::BallisticClt {
            let z = r.agreement_z().unwrap_or(f64::INFINITY);
            checks.push(Check::new(
                format!("speed estimators agree at beta={}", r.beta),
                z < 3.0,
                format!("|direct - regen| = {z:.2} combined se"),
            ));
            if let Some(b) = b {
                checks.push(Check::new(
                    format!("regeneration blocks i.i.d. at beta={}", r.beta),
                    b.pass(),
                    format!("lag1 dt {:.4}, lag1 dlevel {:.4}, chi mean {:.2} se", b.lag1_dt, b.lag1_dlevel, b.chi_z()),
                ));
            }
        }
    }
    Ok(Outcome {
        experiment: "speed",
        tables: vec![("speed".into(), table)],
        summary: json!({ "params": params, "rows": rows }),
        checks,
    })
}

// ---------------------------------------------------------------------------
// central limit theorems

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealedParams {
    pub n: usize,
    /// One fresh tree per walk.
    pub walks: usize,
    pub pilot: PilotParams,
}

impl Default for AnnealedParams {
    fn default() -> Self {
        Self {
            n: 10_000,
            walks: 2000,
            pilot: PilotParams::default(),
        }
    }
}

/// The quenched run uses a longer horizon than the annealed one: the O(1)
/// start-up lag differs from tree to tree, and at `n = 10^4` that spread is
/// still visible to a KS test with 2000 walks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuenchedParams {
    pub n: usize,
    pub trees: usize,
    /// Walks per tree.
    pub walks: usize,
    pub pilot: PilotParams,
}

impl Default for QuenchedParams {
    fn default() -> Self {
        Self {
            n: 100_000,
            trees: 5,
            walks: 2000,
            pilot: PilotParams::default(),
        }
    }
}

/// Standardized `|X_n|` from one walk. The level is spread uniformly over
/// its parity cell `(l-1, l+1)` so that the lattice does not register as
/// a departure from a continuous law.
fn standardized_sample(tree: &TreeHandle, beta: f64, n: usize, index: u64, seed: u64, c: &Constants) -> (u32, f64) {
    let mut w = Walker::new(tree, beta, derive_seed(seed, "walk", index));
    let level = w.advance(n as u64);
    let u = CounterRng::new(derive_seed(seed, "jitter", index)).next_f64();
    (level, c.standardize(f64::from(level) + 2.0 * u - 1.0, n))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CltSample {
    pub mean: f64,
    pub sd: f64,
    pub ks: TestReport,
    /// Same data with the literal centring `nν`, no offset and no jitter.
    pub ks_literal: TestReport,
    #[serde(skip)]
    pub levels: Vec<u32>,
    #[serde(skip)]
    pub z: Vec<f64>,
}

fn clt_sample(levels: Vec<u32>, z: Vec<f64>, n: usize, c: &Constants, alpha: f64) -> Result<CltSample> {
    let literal: Vec<f64> = levels
        .iter()
        .map(|&l| (f64::from(l) - n as f64 * c.nu) / (c.sigma() * (n as f64).sqrt()))
        .collect();
    Ok(CltSample {
        mean: stats::mean(&z),
        sd: stats::variance(&z).sqrt(),
        ks: stats::ks_test(&z, stats::standard_normal_cdf)?.at_level(alpha),
        ks_literal: stats::ks_test(&literal, stats::standard_normal_cdf)?.at_level(alpha),
        levels,
        z,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CltRun {
    pub beta: f64,
    pub n: usize,
    pub constants: Constants,
    /// The limit is Gaussian only in the ballistic CLT regime; elsewhere the
    /// test is a negative control and is expected to reject.
    pub expect_normal: bool,
    pub alpha: f64,
    pub samples: Vec<CltSample>,
}

impl CltRun {
    pub fn pass(&self) -> bool {
        if self.expect_normal {
            self.samples.iter().all(|s| s.ks.p_value > self.alpha)
        } else {
            self.samples.iter().any(|s| s.ks.p_value < self.alpha)
        }
    }
}

/// `|X_n|` for `walks` independent (tree, walk) pairs, standardized with
/// pilot constants and tested against N(0,1).
pub fn annealed_clt(laws: &Arc<DerivedLaws>, beta: f64, params: AnnealedParams, seed: u64) -> Result<CltRun> {
    let c = estimate_constants(laws, beta, params.pilot, seed)?;
    let draws: Vec<(u32, f64)> = (0..params.walks as u64)
        .into_par_iter()
        .map(|i| {
            let tree = TreeHandle::new(derive_seed(seed, "tree", i), laws.clone());
            standardized_sample(&tree, beta, params.n, i, seed, &c)
        })
        .collect();
    let (levels, z) = draws.into_iter().unzip();
    Ok(CltRun {
        beta,
        n: params.n,
        expect_normal: c.regime == Regime::BallisticClt,
        alpha: ALPHA,
        samples: vec![clt_sample(levels, z, params.n, &c, ALPHA)?],
        constants: c,
    })
}

/// `params.walks` walks on each of `params.trees` fixed trees; every tree
/// is tested at level `ALPHA / trees`.
pub fn quenched_clt(laws: &Arc<DerivedLaws>, beta: f64, params: QuenchedParams, seed: u64) -> Result<CltRun> {
    let c = estimate_constants(laws, beta, params.pilot, seed)?;
    let trees: Vec<TreeHandle> = (0..params.trees as u64)
        .map(|t| TreeHandle::new(derive_seed(seed, "tree", t), laws.clone()))
        .collect();
    let w = params.walks as u64;
    let draws: Vec<(u32, f64)> = (0..params.trees as u64 * w)
        .into_par_iter()
        .map(|i| standardized_sample(&trees[(i / w) as usize], beta, params.n, i, seed, &c))
        .collect();
    let alpha = ALPHA / params.trees as f64;
    let samples = draws
        .chunks(params.walks)
        .map(|chunk| {
            let (levels, z) = chunk.iter().copied().unzip();
            clt_sample(levels, z, params.n, &c, alpha)
        })
        .collect::<Result<_>>()?;
    Ok(CltRun {
        beta,
        n: params.n,
        expect_normal: c.regime == Regime::BallisticClt,
        alpha,
        samples,
        constants: c,
    })
}

fn clt_outcome(name: &'static str, runs: Vec<CltRun>, params: serde_json::Value) -> Outcome {
    let mut table = Table::new(&[
        "beta", "regime", "group", "n", "walks", "nu", "sigma2", "offset", "mean_z", "sd_z", "ks_statistic",
        "p_value", "p_value_literal", "alpha", "expect_normal", "pass",
    ]);
    let mut samples = Table::new(&["beta", "group", "index", "level", "z"]);
    let mut checks = Vec::new();
    for r in &runs {
        for (g, s) in r.samples.iter().enumerate() {
            table.push(row![
                r.beta,
                r.constants.regime.as_str(),
                g,
                r.n,
                s.z.len(),
                r.constants.nu,
                r.constants.sigma2,
                r.constants.offset,
                s.mean,
                s.sd,
                s.ks.statistic,
                s.ks.p_value,
                s.ks_literal.p_value,
                r.alpha,
                r.expect_normal,
                (s.ks.p_value > r.alpha) == r.expect_normal
            ]);
            for (i, (l, z)) in s.levels.iter().zip(&s.z).enumerate() {
                samples.push(row![r.beta, g, i, l, z]);
            }
        }
        let ps: Vec<String> = r.samples.iter().map(|s| format!("{:.4}", s.ks.p_value)).collect();
        let claim = if r.expect_normal { "Gaussian limit" } else { "non-Gaussian control rejects" };
        checks.push(Check::new(
            format!("{claim} at beta={}", r.beta),
            r.pass(),
            format!("KS p = [{}] at alpha {}", ps.join(", "), r.alpha),
        ));
    }
    Outcome {
        experiment: name,
        tables: vec![(name.into(), table), (format!("{name}-samples"), samples)],
        summary: json!({ "params": params, "runs": runs }),
        checks,
    }
}

pub fn annealed_clt_experiment(laws: &Arc<DerivedLaws>, betas: &[f64], params: AnnealedParams, seed: u64) -> Result<Outcome> {
    let runs = betas.iter().map(|&b| annealed_clt(laws, b, params, seed)).collect::<Result<_>>()?;
    Ok(clt_outcome("annealed-clt", runs, json!(params)))
}

pub fn quenched_clt_experiment(laws: &Arc<DerivedLaws>, betas: &[f64], params: QuenchedParams, seed: u64) -> Result<Outcome> {
    let runs = betas.iter().map(|&b| quenched_clt(laws, b, params, seed)).collect::<Result<_>>()?;
    Ok(clt_outcome("quenched-clt", runs, json!(params)))
}

// ---------------------------------------------------------------------------
// trap return times

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrapParams {
    pub samples: usize,
    pub time_cap: u64,
    pub size_cap: usize,
    /// Write every `(tau, censored)` pair.
    pub emit_samples: bool,
}

impl Default for TrapParams {
    fn default() -> Self {
        Self {
            samples: 1_000_000,
            time_cap: 100_000_000,
            size_cap: 1_000_000,
            emit_samples: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrapRun {
    pub beta: f64,
    /// `β² f'(q)`; the second moment is finite iff this is below 1.
    pub criticality: f64,
    pub trend: TrendReport,
    #[serde(skip)]
    pub taus: Vec<(u64, bool)>,
}

impl TrapRun {
    pub fn expected(&self) -> Option<TrendVerdict> {
        if self.criticality < 1.0 {
            Some(TrendVerdict::Stabilizing)
        } else if self.criticality > 1.0 {
            Some(TrendVerdict::Diverging)
        } else {
            None
        }
    }

    pub fn pass(&self) -> bool {
        !self.trend.tainted && self.expected().is_none_or(|v| v == self.trend.verdict)
    }
}

/// Return times to `ρ̄` on independent trap trees; sample `i` uses the
/// stream `derive_seed(seed, "trap", i)` for both the tree and the walk.
pub fn trap_moments(laws: &DerivedLaws, beta: f64, params: TrapParams, seed: u64) -> Result<TrapRun> {
    if !(beta > 0.0) {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    let taus: Vec<(u64, bool)> = (0..params.samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = CounterRng::new(derive_seed(seed, "trap", i));
            let trap = laws.sample_trap_tree(&mut rng, params.size_cap)?;
            if trap.censored {
                return Ok((0, true));
            }
            Ok(walk::trap_return_time(&trap.tree, beta, &mut rng, params.time_cap))
        })
        .collect::<Result<_>>()?;
    let censored = taus.iter().filter(|t| t.1).count();
    let kept: Vec<f64> = taus.iter().filter(|t| !t.1).map(|t| t.0 as f64).collect();
    let trend = stats::moment_trend(&kept, censored, 2)?;
    Ok(TrapRun {
        beta,
        criticality: beta * beta * laws.trap_mean(),
        trend,
        taus,
    })
}

pub fn trap_moments_experiment(laws: &DerivedLaws, betas: &[f64], params: TrapParams, seed: u64) -> Result<Outcome> {
    let runs: Vec<TrapRun> = betas.iter().map(|&b| trap_moments(laws, b, params, seed)).collect::<Result<_>>()?;
    let mut table = Table::new(&[
        "beta", "beta2_fprime_q", "samples", "censored_fraction", "last_three_spread", "growth_per_decade",
        "verdict", "expected", "tainted", "pass",
    ]);
    let mut trend = Table::new(&["beta", "kind", "size", "second_moment"]);
    let mut pairs = Table::new(&["beta", "index", "tau", "censored"]);
    let mut checks = Vec::new();
    for r in &runs {
        let expected = r.expected().map(|v| v.as_str()).unwrap_or("");
        table.push(row![
            r.beta,
            r.criticality,
            r.taus.len(),
            r.trend.censored_fraction,
            r.trend.last_three_spread,
            r.trend.growth_per_decade,
            r.trend.verdict.as_str(),
            expected,
            r.trend.tainted,
            r.pass()
        ]);
        for (n, m) in &r.trend.evaluations {
            trend.push(row![r.beta, "running", n, m]);
        }
        for (n, m) in &r.trend.batch_medians {
            trend.push(row![r.beta, "batch_median", n, m]);
        }
        if params.emit_samples {
            for (i, (t, c)) in r.taus.iter().enumerate() {
                pairs.push(row![r.beta, i, t, u8::from(*c)]);
            }
        }
        checks.push(Check::new(
            format!("second moment of return time at beta={}", r.beta),
            r.pass(),
            format!(
                "verdict {} (expected {}), spread {:.4}, growth {:.3}, censored {:.2e}",
                r.trend.verdict.as_str(),
                if expected.is_empty() { "none" } else { expected },
                r.trend.last_three_spread,
                r.trend.growth_per_decade,
                r.trend.censored_fraction
            ),
        ));
    }
    let mut tables = vec![("trap-moments".into(), table), ("trap-moment-trend".into(), trend)];
    if params.emit_samples {
        tables.push(("trap-times".into(), pairs));
    }
    Ok(Outcome {
        experiment: "trap-moments",
        tables,
        summary: json!({ "params": params, "runs": runs }),
        checks,
    })
}

// ---------------------------------------------------------------------------
// exact oracles

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleParams {
    pub depth: u32,
    pub shape_samples: usize,
    pub kernel_walks: usize,
    pub kernel_steps: usize,
    pub kernel_min_visits: u64,
    pub height_samples: usize,
    pub height_cap: u32,
    pub height_range: (u64, u64),
    pub excursion_samples: usize,
    pub excursion_beta: f64,
    pub excursion_step_cap: u64,
    /// Root class `(Z_1, Z_1^g)` to condition on; the likeliest class with
    /// traps when absent.
    pub root_class: Option<(u32, u32)>,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            depth: 2,
            shape_samples: 100_000,
            kernel_walks: 100_000,
            kernel_steps: 16,
            kernel_min_visits: 100_000,
            height_samples: 100_000,
            height_cap: 64,
            height_range: (2, 10),
            excursion_samples: 100_000,
            excursion_beta: 1.0,
            excursion_step_cap: 10_000_000,
            root_class: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapeComparison {
    pub depth: u32,
    /// `(shape, decomposition, survival-weighted oracle, reach-depth oracle)`
    pub counts: Vec<(String, u64, u64, u64)>,
    pub exact_oracle: TestReport,
    /// Against the oracle that only asks generation `depth` to be non-empty.
    pub reach_depth_oracle: TestReport,
}

/// Depth-truncated shape frequencies of the decomposition against both
/// rejection oracles.
pub fn compare_shapes(laws: &Arc<DerivedLaws>, depth: u32, samples: usize, seed: u64) -> Result<ShapeComparison> {
    let rows: Vec<(String, String, String)> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let tree = TreeHandle::new(derive_seed(seed, "oracle-tree", i), laws.clone());
            let mut exact = CounterRng::new(derive_seed(seed, "oracle-exact", i));
            let mut reach = CounterRng::new(derive_seed(seed, "oracle-reach", i));
            Ok((
                tree.truncate(depth).canonical_shape(),
                sample_conditioned_rejection(&laws.law, depth, Acceptance::SurvivalWeighted, &mut exact)?.canonical_shape(),
                sample_conditioned_rejection(&laws.law, depth, Acceptance::ReachDepth, &mut reach)?.canonical_shape(),
            ))
        })
        .collect::<Result<_>>()?;
    let mut counts: BTreeMap<String, [u64; 3]> = BTreeMap::new();
    for (a, b, c) in rows {
        counts.entry(a).or_default()[0] += 1;
        counts.entry(b).or_default()[1] += 1;
        counts.entry(c).or_default()[2] += 1;
    }
    let col = |k: usize| counts.values().map(|c| c[k]).collect::<Vec<u64>>();
    Ok(ShapeComparison {
        depth,
        exact_oracle: stats::chi_square_two_sample(&col(0), &col(1))?,
        reach_depth_oracle: stats::chi_square_two_sample(&col(0), &col(2))?,
        counts: counts.into_iter().map(|(s, c)| (s, c[0], c[1], c[2])).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelCell {
    pub is_root: bool,
    pub children: u32,
    /// `None` for the step to the parent.
    pub child: Option<u32>,
    pub visits: u64,
    pub count: u64,
    pub probability: f64,
    /// Deviation in binomial standard deviations (0 when the move is certain).
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelCheck {
    pub beta: f64,
    pub cells: Vec<KernelCell>,
    pub min_visits: u64,
}

impl KernelCheck {
    fn tested(&self) -> impl Iterator<Item = &KernelCell> {
        self.cells.iter().filter(move |c| c.visits >= self.min_visits)
    }

    pub fn root_tested(&self) -> bool {
        self.tested().any(|c| c.is_root)
    }

    pub fn max_z(&self) -> f64 {
        self.tested().map(|c| c.z.abs()).fold(0.0, f64::max)
    }

    pub fn pass(&self) -> bool {
        self.root_tested() && self.max_z() <= 4.0
    }
}

/// Empirical move frequencies per state class `(is root, number of
/// children)` against the kernel.
pub fn kernel_check(laws: &Arc<DerivedLaws>, beta: f64, walks: usize, steps: usize, min_visits: u64, seed: u64) -> KernelCheck {
    type Counts = BTreeMap<(bool, u32), Vec<u64>>;
    let per_walk: Vec<Counts> = (0..walks as u64)
        .into_par_iter()
        .map(|i| {
            let tree = TreeHandle::new(derive_seed(seed, "kernel-tree", i), laws.clone());
            let mut w = Walker::new(&tree, beta, derive_seed(seed, "kernel-walk", i));
            let mut counts = Counts::new();
            for _ in 0..steps {
                let key = (w.level() == 0, w.current().record.total_children);
                let mv = w.step();
                let slot = match mv {
                    Move::Parent => 0,
                    Move::Child(c) => c as usize + 1,
                };
                counts.entry(key).or_insert_with(|| vec![0; key.1 as usize + 1])[slot] += 1;
            }
            counts
        })
        .collect();
    let mut total = Counts::new();
    for c in per_walk {
        for (k, v) in c {
            let t = total.entry(k).or_insert_with(|| vec![0; v.len()]);
            t.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
    }
    let mut cells = Vec::new();
    for ((is_root, children), counts) in total {
        let visits: u64 = counts.iter().sum();
        let (p_parent, p_child) = kernel_probabilities(children, is_root, beta);
        for (slot, &count) in counts.iter().enumerate() {
            let p = if slot == 0 { p_parent } else { p_child };
            let expected = visits as f64 * p;
            let sd = (expected * (1.0 - p)).sqrt();
            let z = if sd > 0.0 {
                (count as f64 - expected) / sd
            } else if count as f64 == expected {
                0.0
            } else {
                f64::INFINITY
            };
            cells.push(KernelCell {
                is_root,
                children,
                child: (slot > 0).then(|| slot as u32 - 1),
                visits,
                count,
                probability: p,
                z,
            });
        }
    }
    KernelCheck { beta, cells, min_visits }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeightTail {
    pub samples: usize,
    pub capped: usize,
    pub range: (u64, u64),
    pub slope: f64,
    /// `ln f'(q)`
    pub target: f64,
    /// Survival `P(H >= h)` for `h` in `0..=range.1`.
    pub survival: Vec<f64>,
}

impl HeightTail {
    pub fn relative_error(&self) -> f64 {
        ((self.slope - self.target) / self.target).abs()
    }

    pub fn pass(&self) -> bool {
        self.relative_error() <= 0.15
    }
}

/// Branch heights at the roots of independent trees.
pub fn height_tail(laws: &Arc<DerivedLaws>, samples: usize, cap: u32, range: (u64, u64), seed: u64) -> Result<HeightTail> {
    if laws.trap.is_none() {
        return Err(Error::Model("p_0 = 0: there are no branches to measure".into()));
    }
    let heights: Vec<Height> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let tree = TreeHandle::new(derive_seed(seed, "branch-tree", i), laws.clone());
            tree.branch_height_at(&tree.root(), cap)
        })
        .collect::<Result<_>>()?;
    let capped = heights.iter().filter(|h| matches!(h, Height::AtLeast(_))).count();
    let values: Vec<u64> = heights.iter().map(|h| u64::from(h.value())).collect();
    let slope = stats::tail_slope(&values, range.0, range.1)?;
    let survival = (0..=range.1)
        .map(|h| values.iter().filter(|&&v| v >= h).count() as f64 / samples as f64)
        .collect();
    Ok(HeightTail {
        samples,
        capped,
        range,
        slope,
        target: laws.trap_mean().ln(),
        survival,
    })
}

/// Number of trap excursions from the root before the walk first steps
/// onto a backbone child; `None` if `step_cap` runs out.
pub fn first_root_excursion_count(tree: &TreeHandle, beta: f64, walk_seed: u64, step_cap: u64) -> Option<u32> {
    let mut w = Walker::new(tree, beta, walk_seed);
    let mut count = 0;
    let mut steps = 0u64;
    loop {
        w.step();
        steps += 1;
        if w.on_backbone() {
            return Some(count);
        }
        while w.level() > 0 {
            if steps >= step_cap {
                return None;
            }
            w.step();
            steps += 1;
        }
        count += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExcursionCheck {
    pub root_class: (u32, u32),
    pub p_ex: f64,
    pub trees_scanned: u64,
    pub censored: usize,
    /// `counts[w]` = number of roots with `W = w`.
    pub counts: Vec<u64>,
    pub test: TestReport,
}

/// `W` at the roots of trees whose root has the given `(Z_1, Z_1^g)`,
/// against the geometric law with termination `1 - p_ex`.
pub fn excursion_check(laws: &Arc<DerivedLaws>, params: &OracleParams, seed: u64) -> Result<ExcursionCheck> {
    let class = match params.root_class {
        Some(c) => c,
        None => laws
            .backbone_joint
            .entries()
            .iter()
            .filter(|&&((k, j), _)| j < k)
            .fold(None, |best: Option<((u32, u32), f64)>, &(kj, p)| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((kj, p)),
            })
            .map(|(kj, _)| kj)
            .ok_or_else(|| Error::Model("no root class has trap children".into()))?,
    };
    let (k, j) = class;
    if j == 0 || j > k || laws.backbone_joint.prob(k, j) == 0.0 {
        return Err(Error::Model(format!("root class ({k}, {j}) has probability zero")));
    }
    let mut chosen = Vec::with_capacity(params.excursion_samples);
    let mut scanned = 0u64;
    while chosen.len() < params.excursion_samples {
        let tree = TreeHandle::new(derive_seed(seed, "excursion-tree", scanned), laws.clone());
        let r = tree.root().record;
        if (r.total_children, r.backbone_children) == class {
            chosen.push(scanned);
        }
        scanned += 1;
    }
    let ws: Vec<Option<u32>> = chosen
        .par_iter()
        .map(|&i| {
            let tree = TreeHandle::new(derive_seed(seed, "excursion-tree", i), laws.clone());
            first_root_excursion_count(&tree, params.excursion_beta, derive_seed(seed, "excursion-walk", i), params.excursion_step_cap)
        })
        .collect();
    let censored = ws.iter().filter(|w| w.is_none()).count();
    let max = ws.iter().flatten().copied().max().unwrap_or(0) as usize;
    let mut counts = vec![0u64; max + 1];
    for w in ws.iter().flatten() {
        counts[*w as usize] += 1;
    }
    let p_ex = f64::from(k - j) / f64::from(k);
    let mut pmf: Vec<f64> = (0..max).map(|w| p_ex.powi(w as i32) * (1.0 - p_ex)).collect();
    pmf.push(p_ex.powi(max as i32));
    let test = stats::chi_square_test(&counts, &pmf)?;
    Ok(ExcursionCheck {
        root_class: class,
        p_ex,
        trees_scanned: scanned,
        censored,
        counts,
        test,
    })
}

pub fn oracle_compare(laws: &Arc<DerivedLaws>, kernel_betas: &[f64], params: &OracleParams, seed: u64) -> Result<Outcome> {
    let shapes = compare_shapes(laws, params.depth, params.shape_samples, seed)?;
    let kernels: Vec<KernelCheck> = kernel_betas
        .iter()
        .map(|&b| {
            laws.classify_regime(b)?;
            Ok(kernel_check(laws, b, params.kernel_walks, params.kernel_steps, params.kernel_min_visits, seed))
        })
        .collect::<Result<_>>()?;
    let heights = match height_tail(laws, params.height_samples, params.height_cap, params.height_range, seed) {
        Ok(h) => Some(h),
        Err(Error::Model(_)) => None,
        Err(e) => return Err(e),
    };
    let excursions = match excursion_check(laws, params, seed) {
        Ok(x) => Some(x),
        Err(Error::Model(_)) => None,
        Err(e) => return Err(e),
    };

    let mut checks = vec![Check::new(
        format!("depth-{} shapes match the exact oracle", shapes.depth),
        shapes.exact_oracle.pass,
        format!("chi-square p = {:.4}", shapes.exact_oracle.p_value),
    )];
    let mut shape_table = Table::new(&["shape", "decomposition", "survival_weighted", "reach_depth"]);
    for (s, a, b, c) in &shapes.counts {
        shape_table.push(row![s, a, b, c]);
    }
    let mut kernel_table = Table::new(&["beta", "is_root", "children", "move", "visits", "count", "probability", "z"]);
    for k in &kernels {
        for c in &k.cells {
            let mv = c.child.map(|i| format!("child{i}")).unwrap_or_else(|| "parent".into());
            kernel_table.push(row![k.beta, c.is_root, c.children, mv, c.visits, c.count, c.probability, c.z]);
        }
        checks.push(Check::new(
            format!("kernel frequencies at beta={}", k.beta),
            k.pass(),
            format!("max |z| = {:.2} over classes with >= {} visits; root tested: {}", k.max_z(), k.min_visits, k.root_tested()),
        ));
    }
    let mut tables = vec![("oracle-shapes".to_string(), shape_table), ("oracle-kernel".to_string(), kernel_table)];
    if let Some(h) = &heights {
        let mut t = Table::new(&["height", "survival"]);
        for (i, s) in h.survival.iter().enumerate() {
            t.push(row![i, s]);
        }
        tables.push(("oracle-branch-heights".into(), t));
        checks.push(Check::new(
            "branch-height tail rate",
            h.pass(),
            format!("slope {:.4} vs ln f'(q) = {:.4} ({:.1}% off)", h.slope, h.target, 100.0 * h.relative_error()),
        ));
    }
    if let Some(x) = &excursions {
        let mut t = Table::new(&["w", "count"]);
        for (w, c) in x.counts.iter().enumerate() {
            t.push(row![w, c]);
        }
        tables.push(("oracle-root-excursions".into(), t));
        checks.push(Check::new(
            format!("root excursion counts geometric for class {:?}", x.root_class),
            x.test.pass && x.censored == 0,
            format!("p_ex {:.4}, chi-square p = {:.4}, censored {}", x.p_ex, x.test.p_value, x.censored),
        ));
    }
    Ok(Outcome {
        experiment: "oracle-compare",
        tables,
        summary: json!({
            "params": params,
            "shapes": { "depth": shapes.depth, "exact_oracle": shapes.exact_oracle, "reach_depth_oracle": shapes.reach_depth_oracle },
            "kernel": kernels.iter().map(|k| json!({ "beta": k.beta, "max_z": k.max_z(), "root_tested": k.root_tested() })).collect::<Vec<_>>(),
            "branch_heights": heights,
            "root_excursions": excursions,
        }),
        checks,
    })
}

// ---------------------------------------------------------------------------
// quenched variance profile

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceParams {
    pub trees: usize,
    pub walks: usize,
    pub ns: Vec<usize>,
    /// Window of the modulus functional, reported alongside.
    pub delta: f64,
    pub pilot: PilotParams,
}

impl Default for VarianceParams {
    fn default() -> Self {
        Self {
            trees: 20,
            walks: 200,
            ns: (8..=14).map(|k| 1usize << k).collect(),
            delta: 0.1,
            pilot: PilotParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceProfile {
    pub beta: f64,
    pub constants: Constants,
    pub ns: Vec<usize>,
    /// `F(B^n) = clip(B^n_1)`.
    pub marginal: Vec<NestedVariance>,
    /// `F(B^n) = sup_{|s-t| <= δ} |B^n_s - B^n_t| ∧ 1` on `[0, 1]`.
    pub modulus: Vec<NestedVariance>,
    /// One-sided Bonferroni critical value for consecutive increases.
    pub z_crit: f64,
}

impl VarianceProfile {
    /// Largest rise between consecutive `n`, in combined standard errors.
    pub fn worst_rise(&self) -> f64 {
        self.marginal
            .windows(2)
            .map(|w| (w[1].corrected - w[0].corrected) / (w[0].se.powi(2) + w[1].se.powi(2)).sqrt())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn pass(&self) -> bool {
        self.worst_rise() <= self.z_crit
    }
}

/// Across-tree variance of the within-tree mean of `F(B^n)`, nested-MC corrected.
pub fn quenched_variance(laws: &Arc<DerivedLaws>, beta: f64, params: &VarianceParams, seed: u64) -> Result<VarianceProfile> {
    if params.ns.len() < 2 {
        return Err(Error::Domain("need at least two horizons".into()));
    }
    let c = estimate_constants(laws, beta, params.pilot, seed)?;
    let horizon = *params.ns.iter().max().unwrap();
    let w = params.walks as u64;
    let values: Vec<Vec<(f64, f64)>> = (0..params.trees as u64 * w)
        .into_par_iter()
        .map(|i| {
            let tree = TreeHandle::new(derive_seed(seed, "tree", i / w), laws.clone());
            let traj = walk::run_walk(&tree, beta, horizon, derive_seed(seed, "walk", i), WalkOptions::default());
            params
                .ns
                .iter()
                .map(|&n| {
                    let b1 = stats::build_b(&traj.levels, c.nu, c.sigma(), n, &[1.0])?[0];
                    let m = stats::modulus_functional(&traj.levels, c.nu, c.sigma(), n, 1.0, params.delta)?;
                    Ok((stats::clip_unit(b1), m))
                })
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let mut marginal = Vec::new();
    let mut modulus = Vec::new();
    for k in 0..params.ns.len() {
        let groups = |pick: fn(&(f64, f64)) -> f64| -> Vec<Vec<f64>> {
            values.chunks(params.walks).map(|g| g.iter().map(|v| pick(&v[k])).collect()).collect()
        };
        marginal.push(stats::nested_variance(&groups(|v| v.0))?);
        modulus.push(stats::nested_variance(&groups(|v| v.1))?);
    }
    Ok(VarianceProfile {
        beta,
        constants: c,
        ns: params.ns.clone(),
        marginal,
        modulus,
        z_crit: stats::normal_upper_quantile(ALPHA / (params.ns.len() - 1) as f64),
    })
}

pub fn quenched_variance_experiment(laws: &Arc<DerivedLaws>, betas: &[f64], params: &VarianceParams, seed: u64) -> Result<Outcome> {
    let profiles: Vec<VarianceProfile> = betas.iter().map(|&b| quenched_variance(laws, b, params, seed)).collect::<Result<_>>()?;
    let mut table = Table::new(&[
        "beta", "n", "functional", "between", "inner_noise", "corrected", "se", "clipped",
    ]);
    let mut checks = Vec::new();
    for p in &profiles {
        for (name, series) in [("marginal", &p.marginal), ("modulus", &p.modulus)] {
            for (n, v) in p.ns.iter().zip(series) {
                table.push(row![p.beta, n, name, v.between, v.inner_noise, v.corrected, v.se, v.clipped]);
            }
        }
        checks.push(Check::new(
            format!("quenched variance non-increasing at beta={}", p.beta),
            p.pass(),
            format!("worst rise {:.2} se vs critical {:.2}", p.worst_rise(), p.z_crit),
        ));
    }
    Ok(Outcome {
        experiment: "quenched-variance",
        tables: vec![("quenched-variance".into(), table)],
        summary: json!({ "params": params, "profiles": profiles }),
        checks,
    })
}
