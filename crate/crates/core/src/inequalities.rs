//! Checkable forms of the explicit inequalities behind the convergence
//! argument, ratio probes for the estimates whose constants are not explicit,
//! and a seeded randomized sweep over all of them.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::dynamics::moment;
use crate::equilibrium::{build_q, solve_z, Critical, DbSequence, EquilibriumError};
use crate::functionals::{dissipation, f, proximity_bound_check, relative_energy, FunctionalError};
use crate::kernel::{pow, validate_hypotheses, KernelError, KernelSpec, KernelTables};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InequalityError {
    #[error("{0}")]
    Domain(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("unknown suite {0:?}")]
    UnknownSuite(String),
}

type Result<T> = std::result::Result<T, InequalityError>;

/// One evaluation of `lhs <= rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs − lhs`.
    pub margin: f64,
    /// `lhs / rhs` when `rhs > 0`.
    pub ratio: Option<f64>,
    /// Allowance for certified series remainders that are not part of `lhs`.
    #[serde(default)]
    pub slack: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
    pub witness: Value,
}

impl ProbeResult {
    pub fn new(lhs: f64, rhs: f64, witness: Value) -> Self {
        ProbeResult {
            lhs,
            rhs,
            margin: rhs - lhs,
            ratio: (rhs > 0.0).then(|| lhs / rhs),
            slack: 0.0,
            extra: BTreeMap::new(),
            witness,
        }
    }

    pub fn with_slack(mut self, slack: f64) -> Self {
        self.slack = slack;
        self
    }

    pub fn with_extra(mut self, key: &str, value: f64) -> Self {
        self.extra.insert(key.to_string(), value);
        self
    }

    pub fn scale(&self) -> f64 {
        self.lhs.abs().max(self.rhs.abs()).max(1.0)
    }

    /// Margin in units of [`ProbeResult::scale`], after the slack.
    pub fn scaled_margin(&self) -> f64 {
        (self.margin + self.slack) / self.scale()
    }

    /// `margin >= −1e-12 · max(|lhs|, |rhs|, 1) − slack`.
    pub fn passes(&self) -> bool {
        self.scaled_margin() >= -1e-12
    }
}

fn positive(name: &str, x: f64) -> Result<()> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(InequalityError::Domain(format!(
            "{name} = {x} must be positive and finite"
        )));
    }
    Ok(())
}

/// `Σ_{i>j} i Q_i c_1^i <= 3 (z_s/(z_s − c_1))² · j Q_{j+1} c_1^{j+1}`.
/// The left side includes the certified remainder of the series.
pub fn tail_sum_bound(q: &DbSequence, c1: f64, j: usize) -> Result<ProbeResult> {
    let z_s = q.z_s()?;
    positive("c1", c1)?;
    if c1 >= z_s {
        return Err(InequalityError::Domain(format!(
            "c1 = {c1} must be below z_s = {z_s}"
        )));
    }
    if j == 0 || j + 1 > q.len() {
        return Err(InequalityError::Domain(format!(
            "j = {j} outside 1..{}",
            q.len()
        )));
    }
    let tail = q.series_from(c1, 1, j)?;
    let constant = 3.0 * (z_s / (z_s - c1)).powi(2);
    let rhs = constant * j as f64 * q.term(j + 1, c1.ln());
    Ok(
        ProbeResult::new(tail.upper(), rhs, json!({ "c1": c1, "j": j, "z_s": z_s }))
            .with_extra("constant", constant),
    )
}

/// `(x − y)²/max{x, y} <= (x − y)(log x − log y)`.
pub fn square_log_bound(x: f64, y: f64) -> Result<ProbeResult> {
    positive("x", x)?;
    positive("y", y)?;
    let lhs = (x - y) * (x - y) / x.max(y);
    let rhs = (x - y) * (x.ln() - y.ln());
    Ok(ProbeResult::new(lhs, rhs, json!({ "x": x, "y": y })))
}

/// `C_{k,λ} = (1 + 2^λ) 2^{k−1} k`.
pub fn power_constant(lambda: f64, k: f64) -> f64 {
    (1.0 + 2f64.powf(lambda)) * 2f64.powf(k - 1.0) * k
}

/// `(x^λ + y^λ)((x+y)^k − x^k − y^k) <= C_{k,λ} (xy)^{(λ+k)/2}`
/// for `0 <= λ <= 1`, `1 <= k <= 2 − λ`.
pub fn power_inequality(lambda: f64, k: f64, x: f64, y: f64) -> Result<ProbeResult> {
    if !(0.0..=1.0).contains(&lambda) || !(k >= 1.0 && k <= 2.0 - lambda) {
        return Err(InequalityError::Domain(format!(
            "need 0 <= λ <= 1 and 1 <= k <= 2 − λ, got λ = {lambda}, k = {k}"
        )));
    }
    if !(x >= 0.0 && y >= 0.0) || !x.is_finite() || !y.is_finite() {
        return Err(InequalityError::Domain(
            "x, y must be finite and >= 0".into(),
        ));
    }
    let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
    // (x+y)^k − x^k − y^k = hi^k ((1+t)^k − 1 − t^k), t = lo/hi, without cancellation.
    let bracket = if hi == 0.0 {
        0.0
    } else {
        let t = lo / hi;
        hi.powf(k) * ((k * t.ln_1p()).exp_m1() - t.powf(k))
    };
    let lhs = (x.powf(lambda) + y.powf(lambda)) * bracket;
    let rhs = power_constant(lambda, k) * (x * y).powf(0.5 * (lambda + k));
    Ok(ProbeResult::new(
        lhs,
        rhs,
        json!({ "lambda": lambda, "k": k, "x": x, "y": y }),
    ))
}

/// `f(x) − f(y) <= (x − y)(log x − log y) + (x − y) log max{x, y}`.
pub fn f_difference_bound(x: f64, y: f64) -> Result<ProbeResult> {
    positive("x", x)?;
    positive("y", y)?;
    let lhs = f(x) - f(y);
    let rhs = (x - y) * (x.ln() - y.ln()) + (x - y) * x.max(y).ln();
    Ok(ProbeResult::new(lhs, rhs, json!({ "x": x, "y": y })))
}

/// `x (log x)² <= 4 f(x) max{1, log x}`.
pub fn xlogx_bound(x: f64) -> Result<ProbeResult> {
    positive("x", x)?;
    let l = x.ln();
    Ok(ProbeResult::new(
        x * l * l,
        4.0 * f(x) * l.max(1.0),
        json!({ "x": x }),
    ))
}

/// `Σ i^k c_i |log Q_i| <= C Σ i^{k+1} c_i`, `C = max{|log C1|, |log C2|}`,
/// given `C1 >= Q_i^{1/i} >= C2 > 0` on the support of `c`.
pub fn moment_log_bound_q(
    c: &[f64],
    log_q: &[f64],
    k: f64,
    c1: f64,
    c2: f64,
) -> Result<ProbeResult> {
    positive("C2", c2)?;
    if c1 < c2 {
        return Err(InequalityError::Domain("need C1 >= C2".into()));
    }
    if c.len() > log_q.len() {
        return Err(InequalityError::Domain("c is longer than Q".into()));
    }
    let (lc1, lc2) = (c1.ln(), c2.ln());
    let mut lhs = 0.0;
    for (idx, &ci) in c.iter().enumerate() {
        if ci < 0.0 {
            return Err(InequalityError::Domain(format!("c_{} < 0", idx + 1)));
        }
        if ci == 0.0 {
            continue;
        }
        let i = (idx + 1) as f64;
        let root = log_q[idx] / i;
        let slop = 1e-14 * root.abs().max(1.0);
        if root > lc1 + slop || root < lc2 - slop {
            return Err(InequalityError::Precondition(format!(
                "Q_{}^(1/{}) = {} outside [{c2}, {c1}]",
                idx + 1,
                idx + 1,
                root.exp()
            )));
        }
        lhs += pow(i, k) * ci * log_q[idx].abs();
    }
    let constant = lc1.abs().max(lc2.abs());
    let rhs = constant * moment(c, k + 1.0);
    Ok(ProbeResult::new(
        lhs,
        rhs,
        json!({ "k": k, "C1": c1, "C2": c2, "c": c }),
    ))
}

/// Root of `u tanh u = 1`.
pub fn tanh_root() -> f64 {
    let mut u = 1.2f64;
    for _ in 0..50 {
        let g = u * u.tanh() - 1.0;
        let dg = u.tanh() + u / u.cosh().powi(2);
        let next = u - g / dg;
        if (next - u).abs() < 1e-16 {
            return next;
        }
        u = next;
    }
    u
}

/// `sup_{x>0} |x log x| / (x^{1−ε} + x^{1+ε})`. With `x = e^{v/ε}` the ratio is
/// `|v|/(2ε cosh v)`, maximised where `v tanh v = 1`.
pub fn c_epsilon(eps: f64) -> f64 {
    let u = tanh_root();
    u / (2.0 * eps * u.cosh())
}

/// `ε = ½ min{1, (m − k)/(2m)}`.
pub fn moment_log_epsilon(k: f64, m: f64) -> f64 {
    0.5 * (1.0f64).min((m - k) / (2.0 * m))
}

/// `Σ_{i>=1} i^{−s}` for `s > 1`, bounded above by explicit terms and the
/// integral of the remainder.
fn zeta_upper(s: f64) -> f64 {
    const K: usize = 4096;
    let head: f64 = (1..=K).map(|i| (i as f64).powf(-s)).sum();
    head + (K as f64).powf(1.0 - s) / (s - 1.0)
}

/// `Σ i^k c_i |log c_i|` against the constructive bound
/// `C_ε (M_m^{1−ε} Z^ε + min{M_m^{1+ε}, M_1^ε M_m})` where
/// `Z = Σ i^{(k − m(1−ε))/ε}`.
///
/// The first term is Hölder on `c^{1−ε}`; the second uses `c_i <= M_m` and
/// `c_i <= M_1` to bound `c_i^ε` and `i^k <= i^m`.
pub fn moment_log_bound_c(c: &[f64], k: f64, m: f64) -> Result<ProbeResult> {
    if !(m >= 1.0) || !(m > k) || !(k >= 0.0) {
        return Err(InequalityError::Domain(format!(
            "need m >= 1, 0 <= k < m; got k = {k}, m = {m}"
        )));
    }
    if c.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(InequalityError::Domain(
            "c must be finite and nonnegative".into(),
        ));
    }
    let eps = moment_log_epsilon(k, m);
    let lhs: f64 = c
        .iter()
        .enumerate()
        .filter(|(_, &x)| x > 0.0)
        .map(|(idx, &x)| pow((idx + 1) as f64, k) * x * x.ln().abs())
        .sum();
    let mm = moment(c, m);
    let m1 = moment(c, 1.0);
    let s = (m * (1.0 - eps) - k) / eps;
    let z = zeta_upper(s);
    let ce = c_epsilon(eps);
    let second = mm.powf(1.0 + eps).min(m1.powf(eps) * mm);
    let rhs = ce * (mm.powf(1.0 - eps) * z.powf(eps) + second);
    Ok(
        ProbeResult::new(lhs, rhs, json!({ "k": k, "m": m, "c": c }))
            .with_extra("epsilon", eps)
            .with_extra("C_epsilon", ce),
    )
}

/// `D_BD` with every pair inside the state; `tables` may be larger than `c`.
fn bd_dissipation(tables: &KernelTables, q: &DbSequence, c: &[f64]) -> Result<f64> {
    Ok(dissipation(tables, q, c)?.bd)
}

/// Mass excess over the `c_1`-equilibrium against `√D_BD √M_{2−λ}`.
///
/// `lhs = Σ i c_i − Σ_{i <= len(Q)} i Q_i c_1^i`. `rhs` is the explicit chain
/// `3 z_s²/(z_s − c_1)² / √(z_s K₁) · √D_BD √M_{2−λ}`; the bare ratio
/// `lhs / (√D_BD √M_{2−λ})` is kept under `extra["ratio_core"]`.
pub fn mass_difference_probe(
    tables: &KernelTables,
    q: &DbSequence,
    c: &[f64],
    k1: f64,
    lambda: f64,
) -> Result<ProbeResult> {
    let z_s = q.z_s()?;
    let c1 = check_c1(c, z_s)?;
    positive("K1", k1)?;
    let rho1 = q.series(c1, 1)?;
    let lhs = moment(c, 1.0) - rho1.value;
    let d = bd_dissipation(tables, q, c)?;
    let m = moment(c, 2.0 - lambda);
    let core = d.sqrt() * m.sqrt();
    let chain = 3.0 * z_s * z_s / ((z_s - c1) * (z_s - c1)) / (z_s * k1).sqrt();
    let mut p = ProbeResult::new(lhs, chain * core, json!({ "c": c, "K1": k1 }))
        .with_extra("D_BD", d)
        .with_extra("M_2mlambda", m)
        .with_extra("c1_over_zs", c1 / z_s);
    if core > 0.0 {
        p = p.with_extra("ratio_core", lhs / core);
    }
    Ok(p)
}

fn check_c1(c: &[f64], z_s: f64) -> Result<f64> {
    let c1 = *c
        .first()
        .ok_or_else(|| InequalityError::Domain("empty state".into()))?;
    if !(c1 > 0.0) || c1 >= z_s {
        return Err(InequalityError::Domain(format!(
            "c1 = {c1} must lie in (0, z_s = {z_s})"
        )));
    }
    Ok(c1)
}

/// `F` (relative energy at `z = c_1`) against `max{√D_BD √M_{2−λ}, D_BD}`.
/// The constant relating them is not explicit, so only the ratio is recorded.
pub fn relative_energy_probe(
    tables: &KernelTables,
    q: &DbSequence,
    c: &[f64],
    lambda: f64,
) -> Result<ProbeResult> {
    let z_s = q.z_s()?;
    let c1 = check_c1(c, z_s)?;
    if c.iter().any(|&x| !(x > 0.0)) {
        return Err(InequalityError::Domain(
            "state must be strictly positive".into(),
        ));
    }
    let fz = relative_energy(c, q, c1)?;
    let d = bd_dissipation(tables, q, c)?;
    let m = moment(c, 2.0 - lambda);
    let core = (d.sqrt() * m.sqrt()).max(d);
    Ok(ProbeResult::new(fz.value, core, json!({ "c": c }))
        .with_extra("D_BD", d)
        .with_extra("c1_over_zs", c1 / z_s))
}

/// `D_BD(c) > 0` for states of mass `rho < ρ_s` whose monomer concentration
/// is at least `z_s − ¼(z_s − z(ρ))`. `lhs = 0`, `rhs = D_BD`.
pub fn supercritical_dissipation_probe(
    tables: &KernelTables,
    q: &DbSequence,
    c: &[f64],
    rho: f64,
) -> Result<ProbeResult> {
    let crit = q.require_critical()?;
    let z_s = crit.z_s;
    if !(rho > 0.0) || rho >= crit.rho_s {
        return Err(InequalityError::Precondition(format!(
            "mass {rho} must lie in (0, ρ_s = {})",
            crit.rho_s
        )));
    }
    let mass = moment(c, 1.0);
    if (mass - rho).abs() > 1e-9 * rho {
        return Err(InequalityError::Precondition(format!(
            "state mass {mass} differs from {rho}"
        )));
    }
    let z = solve_z(q, rho, 1e-13 * rho.max(1.0))?.z;
    let lower = z_s - 0.25 * (z_s - z);
    let c1 = c.first().copied().unwrap_or(0.0);
    if !(c1 >= lower && c1 < z_s) {
        return Err(InequalityError::Precondition(format!(
            "c1 = {c1} outside [{lower}, {z_s})"
        )));
    }
    let d = bd_dissipation(tables, q, c)?;
    Ok(ProbeResult::new(0.0, d, json!({ "rho": rho, "c": c })).with_extra("z", z))
}

// ---------------------------------------------------------------------------
// Randomized sweeps.

/// Every suite, in report order.
pub const SUITES: [&str; 11] = [
    "tail_sum",
    "square_log",
    "power",
    "f_difference",
    "xlogx",
    "moment_log_q",
    "moment_log_c",
    "mass_difference",
    "proximity",
    "relative_energy",
    "supercritical",
];

/// Suites whose margin is asserted (explicit constants).
pub fn is_explicit(suite: &str) -> bool {
    !matches!(suite, "relative_energy" | "supercritical")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    pub explicit: bool,
    pub trials: usize,
    pub failures: usize,
    pub errors: usize,
    pub min_margin: f64,
    pub min_scaled_margin: f64,
    pub max_ratio: f64,
    /// Maximum ratio over even and odd trials separately.
    pub batch_max_ratio: [f64; 2],
    /// Smallest right-hand side seen (the dissipation, for `supercritical`).
    pub min_rhs: f64,
    pub pass: bool,
    pub worst: Option<ProbeResult>,
    pub first_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub trials: usize,
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn entry(&self, name: &str) -> Option<&SuiteEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Shared inputs of the state-based probes: the representative kernel.
pub struct ProbeContext {
    pub q: DbSequence,
    pub tables: KernelTables,
    pub k1: f64,
    pub lambda: f64,
    pub max_support: usize,
}

impl ProbeContext {
    pub fn representative(max_support: usize) -> Result<Self> {
        Self::for_kernel(&KernelSpec::representative(), max_support)
    }

    /// Context for an arbitrary kernel with a detailed-balance sequence of
    /// at least 4096 terms (or the full table, if smaller).
    pub fn for_kernel(spec: &KernelSpec, max_support: usize) -> Result<Self> {
        let len = spec.max_index().map_or(4096, |m| m.min(4096));
        let q = build_q(spec, len)?.calibrated(1e-10)?;
        let tables = KernelTables::new(spec, max_support)?;
        let report = validate_hypotheses(spec, &q, max_support.max(64));
        let k1 = report.estimated.k1;
        if !(k1 > 0.0) {
            return Err(InequalityError::Precondition(
                "K1 could not be estimated".into(),
            ));
        }
        Ok(ProbeContext {
            q,
            tables,
            k1,
            lambda: spec.lambda(),
            max_support,
        })
    }
}

fn suite_rng(seed: u64, suite: &str, trial: usize) -> ChaCha8Rng {
    // FNV-1a of the suite name keeps suites independent under one seed.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in suite.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h);
    rng.set_stream(trial as u64);
    rng
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..=hi.ln())).exp()
}

/// Random positive state of support `n` with `c_1` fixed. The shape stratum
/// cycles over geometric decay, a power times an exponential, and a
/// perturbed `c_1`-equilibrium.
pub fn random_state(
    rng: &mut ChaCha8Rng,
    q: &DbSequence,
    c1: f64,
    n: usize,
    stratum: usize,
) -> Vec<f64> {
    let mut c = Vec::with_capacity(n);
    match stratum % 3 {
        0 => {
            let g = rng.random_range(0.3..0.99);
            let mut v = c1;
            for _ in 0..n {
                c.push(v * rng.random_range(0.5..1.5));
                v *= g;
            }
        }
        1 => {
            let p = rng.random_range(0.0..4.0);
            let beta = rng.random_range(0.0..0.2);
            for i in 1..=n {
                let x = i as f64;
                c.push(c1 * x.powf(-p) * (-beta * (x - 1.0)).exp() * rng.random_range(0.5..1.5));
            }
        }
        _ => {
            let eps = log_uniform(rng, 1e-4, 0.9);
            let lz = c1.ln();
            for i in 1..=n {
                c.push(q.term(i, lz) * (1.0 + eps * rng.random_range(-1.0..=1.0)));
            }
        }
    }
    c[0] = c1;
    c
}

/// Random sequence satisfying the monotonicity hypothesis: `Q_i z_s^i`
/// non-increasing, with `Q_1 = 1`.
pub fn random_db_sequence(rng: &mut ChaCha8Rng, len: usize) -> DbSequence {
    let z_s = log_uniform(rng, 0.1, 10.0);
    let lzs = z_s.ln();
    let mean = log_uniform(rng, 1e-3, 0.5);
    let mut g = lzs;
    let mut log_q = Vec::with_capacity(len);
    for i in 1..=len {
        if i > 1 && rng.random::<f64>() > 0.3 {
            g -= -mean * (1.0 - rng.random::<f64>()).ln();
        }
        log_q.push(g - i as f64 * lzs);
    }
    DbSequence::from_log_q(log_q).with_critical(Critical {
        z_s,
        z_s_uncertainty: 0.0,
        rho_s: f64::INFINITY,
        rho_s_tail_bound: 0.0,
        rho_s_certified: false,
    })
}

fn trial(ctx: &ProbeContext, suite: &str, rng: &mut ChaCha8Rng, t: usize) -> Result<ProbeResult> {
    let z_s = ctx.q.z_s()?;
    let band = |rng: &mut ChaCha8Rng, t: usize| {
        let (lo, hi) = [(0.1, 0.37), (0.37, 0.63), (0.63, 0.9)][t % 3];
        z_s * rng.random_range(lo..hi)
    };
    let support =
        |rng: &mut ChaCha8Rng| log_uniform(rng, 2.0, ctx.max_support as f64 + 0.999) as usize;
    match suite {
        "tail_sum" => {
            let q = random_db_sequence(rng, 1024);
            let zs = q.z_s()?;
            let (lo, hi) = [(0.01, 0.33), (0.33, 0.66), (0.66, 0.99)][t % 3];
            let c1 = zs * rng.random_range(lo..hi);
            let j = rng.random_range(1..=1000);
            tail_sum_bound(&q, c1, j)
        }
        "square_log" => square_log_bound(log_uniform(rng, 1e-8, 1e8), log_uniform(rng, 1e-8, 1e8)),
        "power" => {
            let lambda = rng.random_range(0.0..=1.0);
            let k = rng.random_range(1.0..=2.0 - lambda);
            let x = if t.is_multiple_of(17) {
                0.0
            } else {
                log_uniform(rng, 1e-6, 1e6)
            };
            power_inequality(lambda, k, x, log_uniform(rng, 1e-6, 1e6))
        }
        "f_difference" => {
            f_difference_bound(log_uniform(rng, 1e-8, 1e8), log_uniform(rng, 1e-8, 1e8))
        }
        "xlogx" => {
            let x = if t.is_multiple_of(4) {
                1.0 + rng.random_range(-1e-3..1e-3)
            } else {
                log_uniform(rng, 1e-8, 1e8)
            };
            xlogx_bound(x)
        }
        "moment_log_q" => {
            let n = support(rng);
            let c2: f64 = rng.random_range(0.2..=1.0);
            let c1: f64 = rng.random_range(1.0..=5.0);
            let log_q: Vec<f64> = (1..=n)
                .map(|i| {
                    if i == 1 {
                        0.0
                    } else {
                        i as f64 * rng.random_range(c2.ln()..=c1.ln())
                    }
                })
                .collect();
            let c: Vec<f64> = (0..n).map(|_| log_uniform(rng, 1e-10, 1.0)).collect();
            let k = (t % 2) as f64;
            moment_log_bound_q(&c, &log_q, k, c1, c2)
        }
        "moment_log_c" => {
            let n = support(rng);
            let c: Vec<f64> = (0..n).map(|_| log_uniform(rng, 1e-12, 10.0)).collect();
            let (k, m) = if t.is_multiple_of(2) {
                (1.0, 2.0)
            } else {
                let k: f64 = rng.random_range(0.0..2.0);
                (k, rng.random_range((k + 0.1).max(1.0)..4.0))
            };
            moment_log_bound_c(&c, k, m)
        }
        "mass_difference" => {
            let c1 = band(rng, t);
            let c = {
                let n = support(rng);
                random_state(rng, &ctx.q, c1, n, t / 3)
            };
            mass_difference_probe(&ctx.tables, &ctx.q, &c, ctx.k1, ctx.lambda)
        }
        "proximity" => {
            let c1 = band(rng, t);
            let mut c = {
                let n = support(rng);
                random_state(rng, &ctx.q, c1, n, t / 3)
            };
            // The bound needs z matched to the mass of c: with a free z it
            // fails, e.g. for a single cluster c_100 = 1 at z = 0.9 z_s.
            let crit = *ctx.q.require_critical()?;
            let m = moment(&c, 1.0);
            let cap = 0.95 * crit.rho_s;
            if m > cap {
                c.iter_mut().for_each(|x| *x *= cap / m);
            }
            let m = moment(&c, 1.0);
            let z = solve_z(&ctx.q, m, 1e-12 * m.max(1.0))?.z;
            Ok(proximity_bound_check(&c, &ctx.q, z)?)
        }
        "relative_energy" => {
            let c1 = band(rng, t);
            let c = {
                let n = support(rng);
                random_state(rng, &ctx.q, c1, n, t / 3)
            };
            relative_energy_probe(&ctx.tables, &ctx.q, &c, ctx.lambda)
        }
        "supercritical" => {
            let crit = *ctx.q.require_critical()?;
            let rho = crit.rho_s * rng.random_range(0.1..0.9);
            let z = solve_z(&ctx.q, rho, 1e-12 * rho.max(1.0))?.z;
            let c1 = z_s - rng.random_range(0.0..0.25) * (z_s - z);
            let n = support(rng).max(2);
            let mut c = random_state(rng, &ctx.q, c1, n, t / 3);
            let rest: f64 = c
                .iter()
                .enumerate()
                .skip(1)
                .map(|(i, x)| (i + 1) as f64 * x)
                .sum();
            let s = (rho - c1) / rest;
            c.iter_mut().skip(1).for_each(|x| *x *= s);
            let mass = moment(&c, 1.0);
            supercritical_dissipation_probe(&ctx.tables, &ctx.q, &c, mass)
        }
        other => Err(InequalityError::UnknownSuite(other.to_string())),
    }
}

/// Runs `trials` seeded trials of one suite. Trials are independent and run
/// in parallel; each has its own ChaCha stream, so results do not depend on
/// scheduling.
pub fn run_suite(ctx: &ProbeContext, suite: &str, trials: usize, seed: u64) -> Result<SuiteEntry> {
    if !SUITES.contains(&suite) {
        return Err(InequalityError::UnknownSuite(suite.to_string()));
    }
    let results: Vec<Result<ProbeResult>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = suite_rng(seed, suite, t);
            trial(ctx, suite, &mut rng, t)
        })
        .collect();
    let explicit = is_explicit(suite);
    let mut e = SuiteEntry {
        name: suite.to_string(),
        explicit,
        trials,
        failures: 0,
        errors: 0,
        min_margin: f64::INFINITY,
        min_scaled_margin: f64::INFINITY,
        max_ratio: 0.0,
        batch_max_ratio: [0.0; 2],
        min_rhs: f64::INFINITY,
        pass: true,
        worst: None,
        first_error: None,
    };
    let mut worst_key = f64::INFINITY;
    for (t, r) in results.into_iter().enumerate() {
        let p = match r {
            Ok(p) => p,
            Err(err) => {
                e.errors += 1;
                e.first_error
                    .get_or_insert_with(|| format!("trial {t}: {err}"));
                continue;
            }
        };
        e.min_margin = e.min_margin.min(p.margin);
        e.min_scaled_margin = e.min_scaled_margin.min(p.scaled_margin());
        e.min_rhs = e.min_rhs.min(p.rhs);
        if let Some(r) = p.ratio {
            e.max_ratio = e.max_ratio.max(r);
            e.batch_max_ratio[t % 2] = e.batch_max_ratio[t % 2].max(r);
        }
        if explicit && !p.passes() {
            e.failures += 1;
        }
        let key = match suite {
            "relative_energy" => -p.ratio.unwrap_or(0.0),
            "supercritical" => p.rhs,
            _ => p.scaled_margin(),
        };
        if key < worst_key {
            worst_key = key;
            e.worst = Some(p);
        }
    }
    e.pass = e.errors == 0
        && match suite {
            "relative_energy" => {
                let [a, b] = e.batch_max_ratio;
                e.max_ratio.is_finite() && a.max(b) <= 2.0 * a.min(b)
            }
            "supercritical" => e.min_rhs > 0.0,
            _ => e.failures == 0,
        };
    Ok(e)
}

/// Runs `"all"` or a single named suite.
pub fn run_suites(
    ctx: &ProbeContext,
    which: &str,
    trials: usize,
    seed: u64,
) -> Result<SuiteReport> {
    let names: Vec<&str> = if which == "all" {
        SUITES.to_vec()
    } else {
        vec![which]
    };
    let entries = names
        .into_iter()
        .map(|s| run_suite(ctx, s, trials, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        seed,
        trials,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn flat_q(n: usize) -> DbSequence {
        DbSequence::from_log_q(vec![0.0; n]).with_critical(Critical {
            z_s: 1.0,
            z_s_uncertainty: 0.0,
            rho_s: f64::INFINITY,
            rho_s_tail_bound: 0.0,
            rho_s_certified: true,
        })
    }

    #[test]
    fn tail_sum_examples() {
        let q = flat_q(400);
        let p = tail_sum_bound(&q, 0.5, 1).unwrap();
        assert!((p.lhs - 1.5).abs() < 1e-12);
        assert!((p.rhs - 3.0).abs() < 1e-15);
        assert!((p.margin - 1.5).abs() < 1e-12);
        assert_eq!(p.extra["constant"], 12.0);
        assert!(tail_sum_bound(&q, 1.0, 1).is_err());
    }

    #[test]
    fn scalar_examples() {
        let p = square_log_bound(E, 1.0).unwrap();
        assert!((p.lhs - (E - 1.0).powi(2) / E).abs() < 1e-15);
        assert!((p.lhs - 1.0862).abs() < 1e-4 && (p.rhs - 1.7183).abs() < 1e-4);
        assert_eq!(square_log_bound(2.0, 2.0).unwrap().margin, 0.0);
        assert!(square_log_bound(0.0, 1.0).is_err());

        let p = power_inequality(0.0, 2.0, 3.0, 5.0).unwrap();
        assert!((p.lhs - 60.0).abs() < 1e-12 && (p.rhs - 120.0).abs() < 1e-12);
        assert_eq!(power_constant(0.0, 2.0), 8.0);
        let p = power_inequality(0.5, 1.5, 0.0, 2.0).unwrap();
        assert_eq!((p.lhs, p.rhs), (0.0, 0.0));
        assert!(power_inequality(0.5, 1.6, 1.0, 1.0).is_err());

        let p = f_difference_bound(1.0, E).unwrap();
        assert!((p.lhs + 1.0).abs() < 1e-15 && p.rhs.abs() < 1e-15);

        let p = xlogx_bound(E).unwrap();
        assert!((p.lhs - E).abs() < 1e-15 && (p.rhs - 4.0).abs() < 1e-14);
        assert_eq!(xlogx_bound(1.0).unwrap().margin, 0.0);
    }

    #[test]
    fn moment_log_q_examples() {
        let c = [0.3, 0.2, 0.1];
        let p = moment_log_bound_q(&c, &[0.0; 3], 1.0, 1.0, 1.0).unwrap();
        assert_eq!(p.lhs, 0.0);
        let log_q: Vec<f64> = (1..=3).map(|i| (1.0 - i as f64) * 2f64.ln()).collect();
        let p = moment_log_bound_q(&c, &log_q, 0.0, 1.0, 0.5).unwrap();
        assert!(p.passes() && p.margin > 0.0);
        assert!(matches!(
            moment_log_bound_q(&c, &log_q, 0.0, 1.0, 0.9),
            Err(InequalityError::Precondition(_))
        ));
    }

    #[test]
    fn c_epsilon_matches_grid_maximum() {
        for eps in [0.05, 0.125, 0.25] {
            let grid = (-40_000..=40_000)
                .map(|k| {
                    let x = (k as f64 * 1e-3 / eps).exp();
                    (x * x.ln()).abs() / (x.powf(1.0 - eps) + x.powf(1.0 + eps))
                })
                .fold(0.0f64, f64::max);
            let c = c_epsilon(eps);
            assert!(c >= grid && c - grid < 1e-6 * c, "eps {eps}: {c} vs {grid}");
        }
        assert!((tanh_root() - 1.19967864).abs() < 1e-8);
    }

    #[test]
    fn moment_log_c_examples() {
        let p = moment_log_bound_c(&[0.0; 4], 1.0, 2.0).unwrap();
        assert_eq!(p.lhs, 0.0);
        let p = moment_log_bound_c(&[1.0], 1.0, 2.0).unwrap();
        assert_eq!(p.lhs, 0.0);
        assert_eq!(p.extra["epsilon"], 0.125);
        assert!(moment_log_bound_c(&[1.0], 2.0, 2.0).is_err());
    }

    #[test]
    fn mass_difference_at_equilibrium_and_hand_case() {
        let ctx = ProbeContext::representative(64).unwrap();
        let z = 0.6 * ctx.q.z_s().unwrap();
        let lz = z.ln();
        let eq: Vec<f64> = (1..=4).map(|i| ctx.q.term(i, lz)).collect();
        let p = mass_difference_probe(&ctx.tables, &ctx.q, &eq, ctx.k1, ctx.lambda).unwrap();
        assert!(p.lhs <= 0.0 && p.passes());

        let mut c = eq.clone();
        c[1] *= 2.0;
        let p = mass_difference_probe(&ctx.tables, &ctx.q, &c, ctx.k1, ctx.lambda).unwrap();
        // lhs: the extra 2 c_2 minus the equilibrium mass beyond i = 4.
        let beyond = ctx.q.series_from(z, 1, 4).unwrap().value;
        assert!((p.lhs - (2.0 * eq[1] - beyond)).abs() < 1e-13);
        // D_BD by hand: the i = 1 and i = 2 exchanges change; i = 3 does too.
        let a = |i: usize| ctx.tables.a(i, 1);
        let qv = |i: usize| ctx.q.log_q(i).exp();
        let mut d = 0.0;
        for i in 1..4 {
            let ai = if i == 1 { 0.5 * a(1) } else { a(i) };
            let x = c[0] * c[i - 1] / qv(i);
            let y = c[i] / qv(i + 1);
            d += ai * qv(i) * (x - y) * (x.ln() - y.ln());
        }
        assert!((p.extra["D_BD"] - d).abs() < 1e-14 * d);
        assert!(p.passes(), "{p:?}");
    }

    #[test]
    fn relative_energy_probe_degenerate_and_scaling() {
        let ctx = ProbeContext::representative(64).unwrap();
        let c1 = 0.5 * ctx.q.z_s().unwrap();
        let lz = c1.ln();
        let eq: Vec<f64> = (1..=40).map(|i| ctx.q.term(i, lz)).collect();
        let p = relative_energy_probe(&ctx.tables, &ctx.q, &eq, ctx.lambda).unwrap();
        assert!(p.lhs < 1e-14 && p.rhs < 1e-14);

        let mut ratios = Vec::new();
        for eps in [1e-1, 1e-2, 1e-3, 1e-4] {
            let c: Vec<f64> = eq
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    if i == 0 {
                        *x
                    } else {
                        x * (1.0 + eps * ((i % 3) as f64 - 1.0))
                    }
                })
                .collect();
            let p = relative_energy_probe(&ctx.tables, &ctx.q, &c, ctx.lambda).unwrap();
            ratios.push(p.lhs / p.extra["D_BD"]);
        }
        // F and D_BD are both quadratic in ε, so F/D_BD settles.
        let last = ratios[3];
        assert!((ratios[2] - last).abs() < 1e-2 * last, "{ratios:?}");
    }

    #[test]
    fn supercritical_probe_cases() {
        let ctx = ProbeContext::representative(64).unwrap();
        let crit = *ctx.q.critical().unwrap();
        let rho = 0.5 * crit.rho_s;
        let z = solve_z(&ctx.q, rho, 1e-13).unwrap().z;
        let c1 = crit.z_s - 0.25 * (crit.z_s - z);
        let n = 64;
        let lz = z.ln();
        let mut c: Vec<f64> = (1..=n).map(|i| ctx.q.term(i, lz)).collect();
        c[0] = c1;
        let rest: f64 = c
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, x)| (i + 1) as f64 * x)
            .sum();
        let s = (rho - c1) / rest;
        c.iter_mut().skip(1).for_each(|x| *x *= s);
        let p = supercritical_dissipation_probe(&ctx.tables, &ctx.q, &c, moment(&c, 1.0)).unwrap();
        assert!(p.rhs > 0.0);

        let eq: Vec<f64> = (1..=n).map(|i| ctx.q.term(i, lz)).collect();
        assert!(matches!(
            supercritical_dissipation_probe(&ctx.tables, &ctx.q, &eq, moment(&eq, 1.0)),
            Err(InequalityError::Precondition(_))
        ));
    }

    #[test]
    fn suites_are_reproducible() {
        let ctx = ProbeContext::representative(64).unwrap();
        for s in SUITES {
            let a = run_suite(&ctx, s, 40, 9).unwrap();
            let b = run_suite(&ctx, s, 40, 9).unwrap();
            assert_eq!(
                serde_json::to_string(&a).unwrap(),
                serde_json::to_string(&b).unwrap()
            );
            assert_eq!(a.errors, 0, "{s}: {:?}", a.first_error);
        }
    }
}
