//! Free energy, relative energy, dissipation rates and distance to equilibrium.
//!
//! The dissipation summand for a pair `(i, j)` is
//! `a Q_i Q_j (x − y)(log x − log y)` with `x = c_i c_j/(Q_i Q_j)` and
//! `y = c_{i+j}/Q_{i+j}`. Detailed balance turns the first factor into the
//! flux `a c_i c_j − b c_{i+j}`, so only the logarithms need `Q`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{moment, State};
use crate::equilibrium::{k_z, DbSequence, EquilibriumError, SeriesValue};
use crate::inequalities::ProbeResult;
use crate::kernel::KernelTables;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FunctionalError {
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error("{0}")]
    Domain(String),
    #[error("state has {got} entries but the detailed-balance sequence only {have}")]
    TooLong { got: usize, have: usize },
    #[error("the partition sum diverges at z = {0}")]
    Divergent(f64),
}

type Result<T> = std::result::Result<T, FunctionalError>;

/// Logarithms are floored at `log(1e-300)` when a concentration vanishes.
pub const LOG_FLOOR: f64 = -690.7755278982137;

/// `x log x − x + 1`, with `f(0) = 1`.
pub fn f(x: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    let d = x - 1.0;
    if d.abs() <= 0.25 {
        f_near_one(d)
    } else {
        x * x.ln() - x + 1.0
    }
}

/// `f(1 + d) = Σ_{k>=2} (−d)^k / (k(k−1))`, accurate where the closed form
/// cancels.
fn f_near_one(d: f64) -> f64 {
    let mut pow = d * d;
    let mut sum = 0.0;
    let mut k = 2.0;
    loop {
        let term = pow / (k * (k - 1.0));
        sum += term;
        if term.abs() <= 1e-18 * sum.abs() || k > 60.0 {
            break;
        }
        pow *= -d;
        k += 1.0;
    }
    sum
}

fn check_len(c: &[f64], q: &DbSequence) -> Result<()> {
    if c.len() > q.len() {
        return Err(FunctionalError::TooLong {
            got: c.len(),
            have: q.len(),
        });
    }
    Ok(())
}

/// `V = Σ c_i (log(c_i/Q_i) − 1)` with `0 log 0 = 0`.
pub fn free_energy(c: &[f64], q: &DbSequence) -> Result<f64> {
    check_len(c, q)?;
    Ok(c.iter()
        .enumerate()
        .filter(|(_, &ci)| ci > 0.0)
        .map(|(idx, &ci)| ci * (ci.ln() - q.log_q(idx + 1) - 1.0))
        .sum())
}

/// Minimum of `V` over nonnegative states of size `n` and mass `rho`. The
/// minimiser is the truncated equilibrium `Q_i z^i`, `i <= n`, with `z` fixed
/// by the mass (no restriction `z <= z_s` at finite `n`).
pub fn free_energy_lower_bound(q: &DbSequence, n: usize, rho: f64) -> Result<f64> {
    if n > q.len() {
        return Err(FunctionalError::TooLong {
            got: n,
            have: q.len(),
        });
    }
    if rho <= 0.0 {
        return Ok(0.0);
    }
    let mass = |lz: f64| -> f64 { (1..=n).map(|i| i as f64 * q.term(i, lz)).sum() };
    let (mut lo, mut hi) = (-800.0, 0.0);
    while mass(hi) < rho {
        hi += 1.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) < rho {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lz = 0.5 * (lo + hi);
    let c: Vec<f64> = (1..=n).map(|i| q.term(i, lz)).collect();
    free_energy(&c, q)
}

fn check_z(q: &DbSequence, z: f64) -> Result<f64> {
    let z_s = q.z_s()?;
    if !(z > 0.0) || z > z_s * (1.0 + 1e-14) {
        return Err(FunctionalError::Domain(format!(
            "relative energy needs 0 < z <= z_s = {z_s}, got {z}"
        )));
    }
    Ok(z_s)
}

/// `F_z = Σ Q_i z^i f(c_i/(Q_i z^i))`, summed over the whole sequence so
/// that indices beyond the state contribute `Q_i z^i`. The tail bound covers
/// indices beyond the stored sequence.
pub fn relative_energy(c: &[f64], q: &DbSequence, z: f64) -> Result<SeriesValue> {
    check_len(c, q)?;
    check_z(q, z)?;
    let lz = z.ln();
    let mut sum = 0.0;
    for (idx, &ci) in c.iter().enumerate() {
        let i = idx + 1;
        let le = q.log_q(i) + i as f64 * lz;
        let e = le.exp();
        sum += if ci == 0.0 {
            e
        } else if e > 0.0 && ((ci - e) / e).abs() <= 0.25 {
            e * f_near_one((ci - e) / e)
        } else {
            ci * (ci.ln() - le) - ci + e
        };
    }
    let rest = q.series_from(z, 0, c.len())?;
    if rest.tail_bound.is_infinite() {
        return Err(FunctionalError::Divergent(z));
    }
    Ok(SeriesValue {
        value: sum + rest.value,
        tail_bound: rest.tail_bound,
    })
}

/// `V + Σ Q_i z^i − log z · mass`, the same quantity as [`relative_energy`]
/// through the free energy. Loses relative accuracy near equilibrium.
pub fn relative_energy_via_free_energy(c: &[f64], q: &DbSequence, z: f64) -> Result<SeriesValue> {
    check_z(q, z)?;
    let v = free_energy(c, q)?;
    let part = q.series(z, 0)?;
    if part.tail_bound.is_infinite() {
        return Err(FunctionalError::Divergent(z));
    }
    Ok(SeriesValue {
        value: v + part.value - z.ln() * moment(c, 1.0),
        tail_bound: part.tail_bound,
    })
}

/// Both dissipation rates from one pass. Row `i = 1` is summed first, and its
/// terms are exactly the monomer-exchange rate, so `bd <= cf` holds in
/// floating point as well.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Dissipation {
    pub cf: f64,
    pub bd: f64,
    /// Summands where a concentration was zero and its log was floored.
    pub clamped_terms: usize,
}

/// `D_CF` and `D_BD` over all pairs `i + j <= N` (`N = c.len()`). The tables
/// may be built for a larger size.
pub fn dissipation(tables: &KernelTables, q: &DbSequence, c: &[f64]) -> Result<Dissipation> {
    check_len(c, q)?;
    let n = c.len();
    if tables.n() < n {
        return Err(FunctionalError::Domain(format!(
            "kernel tables only reach N = {}, state has {n}",
            tables.n()
        )));
    }
    let logc: Vec<f64> = c
        .iter()
        .enumerate()
        .map(|(idx, &ci)| {
            let l = if ci > 0.0 { ci.ln() } else { f64::NEG_INFINITY };
            l - q.log_q(idx + 1)
        })
        .collect();
    let mut out = Dissipation::default();
    let mut sum = 0.0;
    for i in 1..=(n / 2) {
        let mut row = 0.0;
        for j in i..=(n - i) {
            let a = tables.a(i, j);
            if a == 0.0 {
                continue;
            }
            let (mut lx, mut ly) = (logc[i - 1] + logc[j - 1], logc[i + j - 1]);
            let (mut px, mut py) = (a * c[i - 1] * c[j - 1], tables.b(i, j) * c[i + j - 1]);
            if lx < LOG_FLOOR || ly < LOG_FLOOR {
                out.clamped_terms += 1;
                let lq = q.log_q(i) + q.log_q(j);
                if lx < LOG_FLOOR {
                    lx = LOG_FLOOR;
                    px = a * (lq + LOG_FLOOR).exp();
                }
                if ly < LOG_FLOOR {
                    ly = LOG_FLOOR;
                    py = a * (lq + LOG_FLOOR).exp();
                }
            }
            let term = (px - py).abs() * (lx - ly).abs();
            row += if i == j { 0.5 * term } else { term };
        }
        sum += row;
        if i == 1 {
            out.bd = sum;
        }
    }
    out.cf = sum;
    Ok(out)
}

pub fn dissipation_cf(tables: &KernelTables, q: &DbSequence, c: &[f64]) -> Result<f64> {
    Ok(dissipation(tables, q, c)?.cf)
}

/// `Σ_i a_i Q_i (c_1 c_i/Q_i − c_{i+1}/Q_{i+1})(log …)` with `a_1 = a(1,1)/2`
/// and `a_i = a(i,1)`.
pub fn dissipation_bd(tables: &KernelTables, q: &DbSequence, c: &[f64]) -> Result<f64> {
    Ok(dissipation(tables, q, c)?.bd)
}

/// `Σ_{i<=N} i |c_i − Q_i z^i|` plus the equilibrium mass beyond `N`.
pub fn strong_distance(c: &[f64], q: &DbSequence, z: f64) -> Result<SeriesValue> {
    check_len(c, q)?;
    if z == 0.0 {
        return Ok(SeriesValue {
            value: moment(c, 1.0),
            tail_bound: 0.0,
        });
    }
    let lz = z.ln();
    let near: f64 = c
        .iter()
        .enumerate()
        .map(|(idx, &ci)| (idx + 1) as f64 * (ci - q.term(idx + 1, lz)).abs())
        .sum();
    let rest = q.series_from(z, 1, c.len())?;
    Ok(SeriesValue {
        value: near + rest.value,
        tail_bound: rest.tail_bound,
    })
}

/// `Σ i |c_i − Q_i z^i| <= max{2F_z, K_z √F_z}`; the tail bounds of both
/// series go into the slack.
pub fn proximity_bound_check(c: &[f64], q: &DbSequence, z: f64) -> Result<ProbeResult> {
    let z_s = q.z_s()?;
    let kz = k_z(z, z_s)?;
    if z == 0.0 {
        return Err(FunctionalError::Domain(
            "proximity bound needs z > 0".into(),
        ));
    }
    let dist = strong_distance(c, q, z)?;
    let fz = relative_energy(c, q, z)?;
    let rhs = (2.0 * fz.value).max(kz * fz.value.max(0.0).sqrt());
    let slack = dist.tail_bound + 2.0 * fz.tail_bound + kz * fz.tail_bound.sqrt();
    Ok(ProbeResult::new(dist.value, rhs, serde_json::json!({ "z": z, "c": c })).with_slack(slack))
}

/// One observation of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub mass: f64,
    pub c1: f64,
    pub V: f64,
    pub F_z: f64,
    pub D_CF: f64,
    pub D_BD: f64,
    pub M_2mlambda: f64,
    pub dist_eq: f64,
    pub tail_mass: f64,
    pub clamped_mass: f64,
}

impl DiagnosticsRecord {
    pub const HEADER: [&'static str; 11] = [
        "t",
        "mass",
        "c1",
        "V",
        "F_z",
        "D_CF",
        "D_BD",
        "M_2mlambda",
        "dist_eq",
        "tail_mass",
        "clamped_mass",
    ];

    pub fn values(&self) -> [f64; 11] {
        [
            self.t,
            self.mass,
            self.c1,
            self.V,
            self.F_z,
            self.D_CF,
            self.D_BD,
            self.M_2mlambda,
            self.dist_eq,
            self.tail_mass,
            self.clamped_mass,
        ]
    }

    /// Fields formatted with 17 significant digits.
    pub fn csv_fields(&self) -> Vec<String> {
        self.values().iter().map(|v| format!("{v:.16e}")).collect()
    }
}

/// Computes [`DiagnosticsRecord`]s against a fixed target equilibrium.
#[derive(Debug, Clone)]
pub struct Diagnostics<'a> {
    tables: &'a KernelTables,
    q: &'a DbSequence,
    z: f64,
    lambda: f64,
}

/// Extra per-record information that does not go into the CSV.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordFlags {
    /// The state had zero entries, so logs were floored.
    pub pre_positivity: bool,
    pub clamped_terms: usize,
    pub f_z_tail_bound: f64,
}

impl<'a> Diagnostics<'a> {
    /// `z` is the target equilibrium parameter (`z(ρ)` or `z_s`).
    pub fn new(tables: &'a KernelTables, q: &'a DbSequence, z: f64, lambda: f64) -> Self {
        Diagnostics {
            tables,
            q,
            z,
            lambda,
        }
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn record(&self, s: &State, clamped_mass: f64) -> Result<(DiagnosticsRecord, RecordFlags)> {
        let c = &s.c;
        let n = c.len();
        let d = dissipation(self.tables, self.q, c)?;
        let (fz, fz_tail) = if self.z > 0.0 {
            let v = relative_energy(c, self.q, self.z)?;
            (v.value, v.tail_bound)
        } else {
            (f64::NAN, 0.0)
        };
        let rec = DiagnosticsRecord {
            t: s.t,
            mass: moment(c, 1.0),
            c1: c.first().copied().unwrap_or(0.0),
            V: free_energy(c, self.q)?,
            F_z: fz,
            D_CF: d.cf,
            D_BD: d.bd,
            M_2mlambda: moment(c, 2.0 - self.lambda),
            dist_eq: strong_distance(c, self.q, self.z)?.value,
            tail_mass: c
                .iter()
                .enumerate()
                .skip(n / 2)
                .map(|(idx, &x)| (idx + 1) as f64 * x)
                .sum(),
            clamped_mass,
        };
        let flags = RecordFlags {
            pre_positivity: c.iter().any(|&x| x <= 0.0),
            clamped_terms: d.clamped_terms,
            f_z_tail_bound: fz_tail,
        };
        Ok((rec, flags))
    }
}

/// Outcome of the numerical H-theorem check on a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HTheoremReport {
    pub records: usize,
    /// Largest `V(t_{k+1}) − V(t_k) − 10·rtol·|V(t_k)|`; nonpositive when `V`
    /// never increases beyond tolerance.
    pub worst_increase: f64,
    pub worst_increase_t: f64,
    pub monotone: bool,
    /// Stencils with `D_CF > threshold` that were compared.
    pub fd_checked: usize,
    pub fd_failures: usize,
    pub fd_worst_rel: f64,
    pub fd_worst_t: f64,
    /// Stencils skipped because `V` is not resolved there at the sampling
    /// cadence (second difference of `D_CF` too large).
    pub fd_unresolved: usize,
    pub fd_last_unresolved_t: f64,
}

impl HTheoremReport {
    /// Passes when `V` is monotone, every resolved stencil agrees, and the
    /// unresolved ones lie in `[0, layer]`.
    pub fn passes(&self, layer: f64) -> bool {
        self.monotone
            && self.fd_failures == 0
            && (self.fd_unresolved == 0 || self.fd_last_unresolved_t <= layer)
    }
}

/// Relative tolerance of the finite-difference comparison.
pub const FD_TOLERANCE: f64 = 1e-3;
/// `D_CF` below this is not compared.
pub const FD_THRESHOLD: f64 = 1e-8;

/// Checks `V` for monotonicity and compares the central difference
/// `(V_{k+1} − V_{k−1})/(t_{k+1} − t_{k−1})` with `−D_CF(t_k)`.
///
/// The central difference has error `≈ |D_{k+1} − 2D_k + D_{k−1}|/6`; stencils
/// where this estimate exceeds a tenth of the tolerance are counted as
/// unresolved instead of compared.
pub fn h_theorem_check(records: &[DiagnosticsRecord], rtol: f64) -> HTheoremReport {
    let mut rep = HTheoremReport {
        records: records.len(),
        worst_increase: f64::NEG_INFINITY,
        worst_increase_t: 0.0,
        monotone: true,
        fd_checked: 0,
        fd_failures: 0,
        fd_worst_rel: 0.0,
        fd_worst_t: 0.0,
        fd_unresolved: 0,
        fd_last_unresolved_t: 0.0,
    };
    for w in records.windows(2) {
        let excess = w[1].V - w[0].V - 10.0 * rtol * w[0].V.abs();
        if excess > rep.worst_increase {
            rep.worst_increase = excess;
            rep.worst_increase_t = w[1].t;
        }
        if excess > 0.0 {
            rep.monotone = false;
        }
    }
    for k in 1..records.len().saturating_sub(1) {
        let (prev, cur, next) = (&records[k - 1], &records[k], &records[k + 1]);
        let d = cur.D_CF;
        if !(d.abs() > FD_THRESHOLD) {
            continue;
        }
        let trunc = (next.D_CF - 2.0 * d + prev.D_CF).abs() / 6.0;
        if trunc > 0.1 * FD_TOLERANCE * d.abs() {
            rep.fd_unresolved += 1;
            rep.fd_last_unresolved_t = cur.t;
            continue;
        }
        let fd = (next.V - prev.V) / (next.t - prev.t);
        let rel = (fd + d).abs() / d.abs();
        rep.fd_checked += 1;
        if rel > rep.fd_worst_rel {
            rep.fd_worst_rel = rel;
            rep.fd_worst_t = cur.t;
        }
        if rel > FD_TOLERANCE.max(rtol) {
            rep.fd_failures += 1;
        }
    }
    rep
}
