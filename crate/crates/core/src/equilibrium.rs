//! Detailed-balance sequence, critical quantities and equilibrium profiles.
//!
//! `Q_i` grows roughly like `z_s^{-i}`, which overflows doubles for a few
//! hundred indices, so the sequence is kept as `log Q_i` and every series term
//! is assembled as `exp(log Q_i + i log z)`.
//!
//! Tails of the power series `Σ i^p Q_i z^i` beyond the stored range are
//! bounded with the monotonicity of `Q_i z_s^i`: for `i > M`,
//! `Q_i z^i <= Q_M z_s^M (z/z_s)^i`. When the family has a closed form the
//! stretched-exponential integral bound is used as well.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_ur, ln_gamma};
use thiserror::Error;

use crate::kernel::{pow, KernelError, KernelSpec, StretchedExp};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EquilibriumError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("detailed balance is underdetermined: b({i}, 1) = 0")]
    Underdetermined { i: usize },
    #[error("a({i}, 1) = 0 gives Q_{next} = 0; detailed balance needs a positive sequence", next = i + 1)]
    DegenerateCoagulation { i: usize },
    #[error("kernel is inconsistent with detailed balance at ({i}, {j}): relative residual {residual:.3e}")]
    InconsistentKernel { i: usize, j: usize, residual: f64 },
    #[error("z_s estimation needs at least 64 terms, have {0}")]
    TooShort(usize),
    #[error("z_s extrapolation did not settle: extrapolants {extrapolants:?}")]
    EstimationFailed { extrapolants: Vec<f64> },
    #[error("critical quantities have not been computed for this sequence")]
    NotCalibrated,
    #[error("mass {rho} exceeds the critical mass {rho_s}; the equilibrium is the z_s profile")]
    Supercritical { rho: f64, rho_s: f64 },
    #[error("{0}")]
    Domain(String),
    #[error("solver did not reach tolerance {tol:e}: residual {residual:e} after {iterations} iterations")]
    NotConverged {
        tol: f64,
        residual: f64,
        iterations: usize,
    },
}

type Result<T> = std::result::Result<T, EquilibriumError>;

/// Critical monomer concentration and critical mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Critical {
    pub z_s: f64,
    pub z_s_uncertainty: f64,
    /// `+∞` when the critical series diverges.
    pub rho_s: f64,
    pub rho_s_tail_bound: f64,
    /// False when the tail beyond the stored range was extrapolated rather
    /// than bounded.
    pub rho_s_certified: bool,
}

impl Critical {
    /// `[ρ_s, ρ_s + tail]`: the true critical mass lies in this interval.
    pub fn rho_s_bracket(&self) -> (f64, f64) {
        (self.rho_s, self.rho_s + self.rho_s_tail_bound)
    }
}

/// `log Q_i` for `i = 1..=len`, with `Q_1 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbSequence {
    log_q: Vec<f64>,
    closed_form: Option<StretchedExp>,
    critical: Option<Critical>,
}

/// Partial sum over the stored range plus a bound on the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesValue {
    pub value: f64,
    pub tail_bound: f64,
}

impl SeriesValue {
    pub fn upper(&self) -> f64 {
        self.value + self.tail_bound
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZsEstimate {
    pub z_s: f64,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoS {
    pub rho_s: f64,
    pub tail_bound: f64,
    pub diverges: bool,
    pub certified: bool,
    pub terms: usize,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumProfile {
    pub z: f64,
    /// `Q_i z^i` for `i = 1..=len` of the sequence.
    pub profile: Vec<f64>,
    /// `Σ i Q_i z^i` over the profile.
    pub mass: f64,
    pub tail_mass_bound: f64,
    pub iterations: usize,
}

impl DbSequence {
    /// Wraps an explicit `log Q` sequence (`log_q[0]` is forced to 0).
    pub fn from_log_q(mut log_q: Vec<f64>) -> Self {
        if let Some(first) = log_q.first_mut() {
            *first = 0.0;
        }
        DbSequence {
            log_q,
            closed_form: None,
            critical: None,
        }
    }

    pub fn len(&self) -> usize {
        self.log_q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_q.is_empty()
    }

    /// `log Q_i`, `i` in `1..=len`.
    #[inline]
    pub fn log_q(&self, i: usize) -> f64 {
        self.log_q[i - 1]
    }

    pub fn log_q_slice(&self) -> &[f64] {
        &self.log_q
    }

    pub fn closed_form(&self) -> Option<StretchedExp> {
        self.closed_form
    }

    pub fn critical(&self) -> Option<&Critical> {
        self.critical.as_ref()
    }

    pub fn require_critical(&self) -> Result<&Critical> {
        self.critical
            .as_ref()
            .ok_or(EquilibriumError::NotCalibrated)
    }

    pub fn z_s(&self) -> Result<f64> {
        Ok(self.require_critical()?.z_s)
    }

    /// Estimates `z_s` and `ρ_s` and stores them.
    pub fn calibrated(mut self, tol: f64) -> Result<Self> {
        let zs = estimate_zs(&self)?;
        let rho = compute_rho_s(&self, zs.z_s, tol);
        self.critical = Some(Critical {
            z_s: zs.z_s,
            z_s_uncertainty: zs.uncertainty,
            rho_s: rho.rho_s,
            rho_s_tail_bound: rho.tail_bound,
            rho_s_certified: rho.certified,
        });
        Ok(self)
    }

    /// Overrides the critical data, e.g. for sequences whose `z_s` is known.
    pub fn with_critical(mut self, critical: Critical) -> Self {
        self.critical = Some(critical);
        self
    }

    /// `Q_i z^i`; zero for `z = 0`.
    #[inline]
    pub fn term(&self, i: usize, log_z: f64) -> f64 {
        (self.log_q[i - 1] + i as f64 * log_z).exp()
    }

    /// `Σ_{i <= len} i^p Q_i z^i` plus a bound on the rest, for `0 <= z <= z_s`.
    pub fn series(&self, z: f64, power: u32) -> Result<SeriesValue> {
        self.series_from(z, power, 0)
    }

    /// `Σ_{i > start} i^p Q_i z^i`.
    pub fn series_from(&self, z: f64, power: u32, start: usize) -> Result<SeriesValue> {
        if z < 0.0 || !z.is_finite() {
            return Err(EquilibriumError::Domain(format!(
                "z = {z} must be nonnegative"
            )));
        }
        if z == 0.0 {
            return Ok(SeriesValue {
                value: 0.0,
                tail_bound: 0.0,
            });
        }
        let crit = self.require_critical()?;
        if z > crit.z_s * (1.0 + 1e-14) {
            return Err(EquilibriumError::Domain(format!(
                "z = {z} exceeds z_s = {}",
                crit.z_s
            )));
        }
        let lz = z.ln();
        let mut value = 0.0;
        for i in (start + 1)..=self.len() {
            let w = match power {
                0 => 1.0,
                1 => i as f64,
                p => (i as f64).powi(p as i32),
            };
            value += w * self.term(i, lz);
        }
        let m = self.len().max(start);
        Ok(SeriesValue {
            value,
            tail_bound: self.tail_beyond(m, z, power, crit),
        })
    }

    /// Bound on `Σ_{i > m} i^p Q_i z^i`.
    fn tail_beyond(&self, m: usize, z: f64, power: u32, crit: &Critical) -> f64 {
        let r = (z / crit.z_s).min(1.0);
        let s_m = self.term(self.len(), crit.z_s.ln());
        let mut bound = f64::INFINITY;
        if r < 1.0 {
            bound = s_m * geometric_tail(m, r, power);
        }
        if let Some(form) = self.closed_form {
            bound = bound.min(stretched_tail(form, m, power));
        } else if r >= 1.0 {
            bound = match power {
                1 => crit.rho_s_tail_bound,
                0 => crit.rho_s_tail_bound / (m as f64 + 1.0),
                _ => f64::INFINITY,
            };
        }
        bound
    }
}

/// `Σ_{i > m} i^p r^i` for `0 <= r < 1`.
fn geometric_tail(m: usize, r: f64, power: u32) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    let mf = m as f64;
    let lead = ((mf + 1.0) * r.ln()).exp();
    let q = 1.0 - r;
    match power {
        0 => lead / q,
        1 => lead * ((mf + 1.0) - mf * r) / (q * q),
        2 => {
            // Σ_{k>=0} (m+1+k)^2 r^k
            let a = mf + 1.0;
            lead * (a * a / q + (2.0 * a + 1.0) * r / (q * q) + 2.0 * r * r / (q * q * q))
        }
        _ => f64::INFINITY,
    }
}

/// `Σ_{i > m} i^p exp(−s i^μ)`, bounded by explicit terms up to the point
/// where the summand starts decreasing and by the integral after it.
fn stretched_tail(form: StretchedExp, m: usize, power: u32) -> f64 {
    let (s, mu) = (form.scale, form.exponent);
    if s <= 0.0 {
        return f64::INFINITY;
    }
    let p = power as f64;
    let f = |x: f64| x.powf(p) * (-s * pow(x, mu)).exp();
    let turn = (p / (s * mu)).powf(1.0 / mu).ceil() as usize;
    let k = m.max(turn);
    let explicit: f64 = ((m + 1)..=k).map(|i| f(i as f64)).sum();
    let a = (p + 1.0) / mu;
    let x = s * pow(k as f64, mu);
    let upper = gamma_ur(a, x);
    let integral = if upper > 0.0 {
        (upper.ln() + ln_gamma(a) - (p + 1.0) / mu * s.ln()).exp() / mu
    } else {
        0.0
    };
    explicit + integral
}

/// `log Q` by the one-step relation `Q_{i+1} = Q_i a(i,1) / b(i,1)`, then the
/// full two-index relation is verified for `i + j <= min(n_max, 256)`.
pub fn build_q(spec: &KernelSpec, n_max: usize) -> Result<DbSequence> {
    if n_max == 0 {
        return Err(EquilibriumError::Domain("n_max must be >= 1".into()));
    }
    let mut log_q = Vec::with_capacity(n_max);
    log_q.push(0.0);
    for i in 1..n_max {
        let a = spec.eval_a(i, 1)?;
        let b = spec.eval_b(i, 1)?;
        if b <= 0.0 {
            return Err(EquilibriumError::Underdetermined { i });
        }
        if a <= 0.0 {
            return Err(EquilibriumError::DegenerateCoagulation { i });
        }
        let prev = log_q[i - 1];
        log_q.push(prev + a.ln() - b.ln());
    }
    let check = n_max.min(256);
    for i in 1..check {
        for j in 1..=(check - i) {
            let (a, b) = (spec.eval_a(i, j)?, spec.eval_b(i, j)?);
            if a == 0.0 && b == 0.0 {
                continue;
            }
            let residual = if a == 0.0 {
                f64::INFINITY
            } else {
                let ratio = (b / a) * (log_q[i + j - 1] - log_q[i - 1] - log_q[j - 1]).exp();
                (1.0 - ratio).abs()
            };
            if !(residual <= 1e-8) {
                return Err(EquilibriumError::InconsistentKernel { i, j, residual });
            }
        }
    }
    Ok(DbSequence {
        log_q,
        closed_form: spec.closed_form(),
        critical: None,
    })
}

/// Spread of the last two first-order extrapolants beyond which the
/// extrapolation is rejected (relative to `max(1, |log z_s|)`).
const ZS_SPREAD_TOL: f64 = 1e-3;

/// `z_s` from `lim Q_j^{1/j} = 1/z_s`: closed form when available, otherwise
/// Richardson extrapolation of `−log Q_j / j` in `1/j` over `j ∈ {N/4, N/2, N}`.
pub fn estimate_zs(q: &DbSequence) -> Result<ZsEstimate> {
    let n = q.len();
    if n < 64 {
        return Err(EquilibriumError::TooShort(n));
    }
    if let Some(form) = q.closed_form {
        return Ok(ZsEstimate {
            z_s: form.z_s(),
            uncertainty: 0.0,
        });
    }
    let g = |j: usize| -q.log_q(j) / j as f64;
    let (g1, g2, g3) = (g(n / 4), g(n / 2), g(n));
    // Step ratios are exactly 2 only when n is divisible by 4; use the actual
    // abscissae so odd n stays consistent.
    let h = |j: usize| 1.0 / j as f64;
    let (h1, h2, h3) = (h(n / 4), h(n / 2), h(n));
    let r1 = (g2 * h1 - g1 * h2) / (h1 - h2);
    let r2 = (g3 * h2 - g2 * h3) / (h2 - h3);
    let log_zs = (r2 * h1 - r1 * h3) / (h1 - h3);
    let spread = (r2 - r1).abs();
    if !log_zs.is_finite() || spread > ZS_SPREAD_TOL * log_zs.abs().max(1.0) {
        return Err(EquilibriumError::EstimationFailed {
            extrapolants: vec![g1, g2, g3, r1, r2],
        });
    }
    let z_s = log_zs.exp();
    Ok(ZsEstimate {
        z_s,
        uncertainty: z_s * spread,
    })
}

/// `ρ_s = Σ j Q_j z_s^j` with a bound on the remainder.
///
/// Divergence is flagged when `Q_j z_s^j` decays no faster than `j^{-2}` over
/// the upper half of the stored range.
pub fn compute_rho_s(q: &DbSequence, z_s: f64, tol: f64) -> RhoS {
    let n = q.len();
    let lz = z_s.ln();
    let s = |j: usize| q.term(j, lz);

    let diverges = match q.closed_form {
        Some(form) => form.scale <= 0.0,
        None => {
            let lo = (n / 2).max(1);
            let pts: Vec<(f64, f64)> = (lo..=n)
                .map(|j| ((j as f64).ln(), q.log_q(j) + j as f64 * lz))
                .collect();
            log_slope(&pts) >= -2.0
        }
    };
    if diverges {
        return RhoS {
            rho_s: f64::INFINITY,
            tail_bound: 0.0,
            diverges: true,
            certified: true,
            terms: n,
            warning: None,
        };
    }

    let mut partial = 0.0;
    let mut terms = n;
    let mut tail = f64::INFINITY;
    let mut certified = true;
    match q.closed_form {
        Some(form) => {
            for j in 1..=n {
                partial += j as f64 * s(j);
                if j % 16 == 0 || j == n {
                    let t = stretched_tail(form, j, 1);
                    if t < tol || j == n {
                        tail = t;
                        terms = j;
                        break;
                    }
                }
            }
        }
        None => {
            partial = (1..=n).map(|j| j as f64 * s(j)).sum();
            let (bound, exact) = extrapolated_tail(q, lz);
            tail = bound;
            certified = exact;
        }
    }
    let warning = (tail >= tol).then(|| {
        format!(
            "tolerance {tol:e} not reached within {n} terms; ρ_s ∈ [{partial}, {}]",
            partial + tail
        )
    });
    RhoS {
        rho_s: partial,
        tail_bound: tail,
        diverges: false,
        certified,
        terms,
        warning,
    }
}

/// Tail of `Σ j s_j` past the stored range by extrapolating the decay of the
/// last quarter. Not a proof, so reported as uncertified.
fn extrapolated_tail(q: &DbSequence, lz: f64) -> (f64, bool) {
    let n = q.len();
    let ls = |j: usize| q.log_q(j) + j as f64 * lz;
    let s_n = ls(n).exp();
    let lo = (3 * n / 4).max(1);
    let max_log_ratio = (lo..n)
        .map(|j| ls(j + 1) - ls(j))
        .fold(f64::NEG_INFINITY, f64::max);
    let nf = n as f64;
    if max_log_ratio < 0.0 {
        let r = max_log_ratio.exp();
        return (s_n * geometric_tail(n, r, 1) / r.powf(nf), false);
    }
    let pts: Vec<(f64, f64)> = (lo..=n).map(|j| ((j as f64).ln(), ls(j))).collect();
    let slope = log_slope(&pts);
    if slope < -2.0 {
        (s_n * nf * nf / (-2.0 - slope), false)
    } else {
        (f64::INFINITY, false)
    }
}

fn log_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return 0.0;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// `Σ Q_i z^i` for `0 <= z <= z_s`.
pub fn partition_sum(q: &DbSequence, z: f64, tol: f64) -> Result<SeriesValue> {
    let crit = q.require_critical()?;
    if z > crit.z_s * (1.0 + 1e-14) {
        return Err(EquilibriumError::Domain(format!(
            "z = {z} exceeds z_s = {}",
            crit.z_s
        )));
    }
    if z >= crit.z_s && crit.rho_s.is_infinite() && q.closed_form.is_none() {
        // Q_i z_s^i may still be summable; a finite mass tail is not available
        // to bound it, so report the partial sum with an open bracket.
        let v = q.series(z, 0)?;
        return Ok(SeriesValue {
            value: v.value,
            tail_bound: f64::INFINITY,
        });
    }
    let v = q.series(z, 0)?;
    let _ = tol;
    Ok(v)
}

/// The equilibrium `c_i = Q_i z^i` of mass `rho`.
///
/// Bisection on the increasing map `z ↦ Σ i Q_i z^i` down to a bracket of
/// `1e-3 z_s`, then safeguarded Newton (at most 200 iterations).
pub fn solve_z(q: &DbSequence, rho: f64, tol: f64) -> Result<EquilibriumProfile> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(EquilibriumError::Domain(format!(
            "mass {rho} must be finite and >= 0"
        )));
    }
    let crit = *q.require_critical()?;
    if rho == 0.0 {
        return Ok(EquilibriumProfile {
            z: 0.0,
            profile: Vec::new(),
            mass: 0.0,
            tail_mass_bound: 0.0,
            iterations: 0,
        });
    }
    let mass_at = |z: f64| -> Result<SeriesValue> { q.series(z, 1) };
    if crit.rho_s.is_finite() {
        let (lo, hi) = crit.rho_s_bracket();
        if rho > hi + tol {
            return Err(EquilibriumError::Supercritical {
                rho,
                rho_s: crit.rho_s,
            });
        }
        if rho >= lo - tol {
            return profile_at(q, crit.z_s, 0);
        }
    }

    let (mut lo, mut hi) = (0.0, crit.z_s);
    let mut iterations = 0;
    // For ρ_s = ∞ the mass map blows up at z_s; evaluate just below it.
    if crit.rho_s.is_infinite() {
        hi = crit.z_s * (1.0 - 1e-15);
    }
    while hi - lo > 1e-3 * crit.z_s {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        if mass_at(mid)?.upper() < rho {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut z = 0.5 * (lo + hi);
    let mut residual = f64::INFINITY;
    for _ in 0..200 {
        iterations += 1;
        let m = mass_at(z)?.upper();
        residual = m - rho;
        if residual.abs() < tol {
            return profile_at(q, z, iterations);
        }
        if residual < 0.0 {
            lo = z;
        } else {
            hi = z;
        }
        let dm = q.series(z, 2)?.value / z;
        let mut next = z - residual / dm;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if next == z || hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
        z = next;
    }
    let m = mass_at(z)?.upper();
    if (m - rho).abs() < tol {
        return profile_at(q, z, iterations);
    }
    Err(EquilibriumError::NotConverged {
        tol,
        residual: residual.abs().min((m - rho).abs()),
        iterations,
    })
}

fn profile_at(q: &DbSequence, z: f64, iterations: usize) -> Result<EquilibriumProfile> {
    let lz = z.ln();
    let profile: Vec<f64> = (1..=q.len()).map(|i| q.term(i, lz)).collect();
    let m = q.series(z, 1)?;
    Ok(EquilibriumProfile {
        z,
        profile,
        mass: m.value,
        tail_mass_bound: m.tail_bound,
        iterations,
    })
}

impl EquilibriumProfile {
    /// First `n` entries, zero-padded when the profile is shorter.
    pub fn truncated(&self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|k| self.profile.get(k).copied().unwrap_or(0.0))
            .collect()
    }
}

/// `1/(1 − √(z/z_s)) − 1`.
pub fn k_z(z: f64, z_s: f64) -> Result<f64> {
    if !(z >= 0.0) || !(z < z_s) {
        return Err(EquilibriumError::Domain(format!(
            "K_z needs 0 <= z < z_s, got z = {z}, z_s = {z_s}"
        )));
    }
    Ok(1.0 / (1.0 - (z / z_s).sqrt()) - 1.0)
}
