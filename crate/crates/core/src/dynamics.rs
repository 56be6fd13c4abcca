//! Right-hand side of the truncated system and its time integration.
//!
//! The flux `W(i,j) = a(i,j) c_i c_j − b(i,j) c_{i+j}` is materialised once per
//! evaluation in the packed row layout of [`KernelTables`]; each output index
//! then gathers its gain and loss terms in ascending order. Every `j` is
//! computed by the same sequential loop whether or not the gather is spread
//! across threads, so serial and parallel evaluations agree bit for bit.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equilibrium::{solve_z, DbSequence, EquilibriumError};
use crate::kernel::{pow, KernelError, KernelSpec, KernelTables};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error("invalid integrator configuration: {0}")]
    Config(String),
    #[error("initial state has a negative or non-finite entry at i = {i}: {value}")]
    BadInitial { i: usize, value: f64 },
    #[error("state length {got} does not match the kernel tables (N = {expected})")]
    Length { expected: usize, got: usize },
    #[error(
        "step size underflow at t = {t}: h = {h:e}; the problem looks stiff at this tolerance"
    )]
    Stiff {
        t: f64,
        h: f64,
        partial: Box<State>,
        stats: IntegrationStats,
    },
    #[error("initial data file {path}: {reason}")]
    InitialFile { path: String, reason: String },
}

type Result<T> = std::result::Result<T, DynamicsError>;

/// Concentrations `c_1..c_N` at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub t: f64,
    pub c: Vec<f64>,
}

impl State {
    pub fn new(t: f64, c: Vec<f64>) -> Self {
        State { t, c }
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn mass(&self) -> f64 {
        moment(&self.c, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_max: f64,
    pub positivity_floor: f64,
    pub t_end: f64,
    pub observer_cadence: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            rtol: 1e-8,
            atol: 1e-12,
            h_init: 1e-6,
            h_max: 1.0,
            positivity_floor: 0.0,
            t_end: 1.0,
            observer_cadence: 0.1,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DynamicsError::Config(m.to_string()));
        if !(self.rtol > 0.0) || !(self.atol > 0.0) {
            return bad("rtol and atol must be positive");
        }
        if !(self.h_init > 0.0) || !(self.h_max > 0.0) || self.h_init > self.h_max {
            return bad("need 0 < h_init <= h_max");
        }
        if !(self.positivity_floor >= 0.0) {
            return bad("positivity_floor must be nonnegative");
        }
        if !(self.t_end >= 0.0) || !self.t_end.is_finite() {
            return bad("t_end must be finite and nonnegative");
        }
        if !(self.observer_cadence > 0.0) {
            return bad("observer_cadence must be positive");
        }
        Ok(())
    }
}

/// Observation grid `0, Δ, 2Δ, …, t_end`: `⌈t_end/Δ⌉ + 1` points with the last
/// one pinned to `t_end`.
pub fn observation_times(t_end: f64, cadence: f64) -> Vec<f64> {
    if t_end <= 0.0 {
        return vec![0.0];
    }
    let steps = ((t_end / cadence) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let mut times: Vec<f64> = (0..steps).map(|k| k as f64 * cadence).collect();
    times.push(t_end);
    times
}

/// `Σ i^k c_i`.
pub fn moment(c: &[f64], k: f64) -> f64 {
    c.iter()
        .enumerate()
        .map(|(idx, &ci)| pow((idx + 1) as f64, k) * ci)
        .sum()
}

/// Reusable evaluator of the truncated right-hand side.
#[derive(Debug, Clone)]
pub struct Rhs {
    tables: KernelTables,
    flux: Vec<f64>,
    parallel: bool,
}

/// Below this size the gather is cheaper than spreading it over threads.
const PARALLEL_MIN_N: usize = 256;

impl Rhs {
    pub fn new(tables: KernelTables) -> Self {
        let len = tables.a_packed().len();
        let parallel = rayon::current_num_threads() > 1 && tables.n() >= PARALLEL_MIN_N;
        Rhs {
            tables,
            flux: vec![0.0; len],
            parallel,
        }
    }

    pub fn from_spec(spec: &KernelSpec, n: usize) -> Result<Self> {
        Ok(Rhs::new(KernelTables::new(spec, n)?))
    }

    /// Forces the serial or the threaded gather. Results do not depend on it.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn tables(&self) -> &KernelTables {
        &self.tables
    }

    pub fn n(&self) -> usize {
        self.tables.n()
    }

    /// Fills the packed flux array `W(i,j)` for all `i + j <= N`.
    pub fn fluxes(&mut self, c: &[f64]) -> &[f64] {
        let n = self.tables.n();
        let (a, b) = (self.tables.a_packed(), self.tables.b_packed());
        for i in 1..n {
            let off = self.tables.row(i);
            let ci = c[i - 1];
            for j in 1..=(n - i) {
                let p = off + j - 1;
                self.flux[p] = a[p] * (ci * c[j - 1]) - b[p] * c[i + j - 1];
            }
        }
        &self.flux
    }

    /// `dc/dt` into `out`.
    pub fn eval(&mut self, c: &[f64], out: &mut [f64]) {
        let n = self.tables.n();
        assert_eq!(c.len(), n);
        assert_eq!(out.len(), n);
        self.fluxes(c);
        let flux = &self.flux;
        let tables = &self.tables;
        let one = |j: usize| gather(tables, flux, n, j);
        if self.parallel {
            out.par_iter_mut()
                .enumerate()
                .for_each(|(idx, o)| *o = one(idx + 1));
        } else {
            for (idx, o) in out.iter_mut().enumerate() {
                *o = one(idx + 1);
            }
        }
    }

    pub fn eval_vec(&mut self, c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; c.len()];
        self.eval(c, &mut out);
        out
    }

    /// `½ Σ_{i+j<=N} W(i,j) ((i+j)^k − i^k − j^k)`.
    pub fn moment_rate(&mut self, c: &[f64], k: f64) -> f64 {
        let n = self.tables.n();
        self.fluxes(c);
        let powk: Vec<f64> = (0..=n).map(|i| pow(i as f64, k)).collect();
        let mut sum = 0.0;
        for i in 1..n {
            let off = self.tables.row(i);
            for j in 1..=(n - i) {
                sum += self.flux[off + j - 1] * (powk[i + j] - powk[i] - powk[j]);
            }
        }
        0.5 * sum
    }
}

/// `½ Σ_{k<j} W(k, j−k) − Σ_{k<=N−j} W(j, k)`, both sums in ascending `k`.
/// The gain sum uses `W(k, j−k) = W(j−k, k)` to visit each unordered pair once.
#[inline]
fn gather(tables: &KernelTables, flux: &[f64], n: usize, j: usize) -> f64 {
    let mut gain = 0.0;
    for k in 1..=((j - 1) / 2) {
        gain += flux[tables.row(k) + (j - k) - 1];
    }
    if j.is_multiple_of(2) {
        gain += 0.5 * flux[tables.row(j / 2) + j / 2 - 1];
    }
    let mut loss = 0.0;
    if j < n {
        let off = tables.row(j);
        for k in 1..=(n - j) {
            loss += flux[off + k - 1];
        }
    }
    gain - loss
}

/// Convenience one-shot evaluation.
pub fn rhs(spec: &KernelSpec, c: &[f64]) -> Result<Vec<f64>> {
    let mut r = Rhs::from_spec(spec, c.len())?;
    Ok(r.eval_vec(c))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegrationStats {
    pub accepted: usize,
    pub rejected: usize,
    pub negative_rejections: usize,
    pub rhs_evals: usize,
    /// `Σ i |c_i|` removed by clamping accepted components to zero.
    pub clamped_mass: f64,
    pub clamp_events: usize,
    pub h_last: f64,
}

// Dormand–Prince 5(4) tableau. The system is autonomous, so the nodes are not needed.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Integrates from `s0` to `cfg.t_end`, calling `observer` at every point of
/// [`observation_times`] (including the start).
///
/// Steps are shortened to land exactly on observation times. A trial step is
/// rejected when a component drops below `−atol`; accepted components below
/// `positivity_floor` (or negative) are set to zero and their mass is
/// accumulated in [`IntegrationStats::clamped_mass`].
pub fn integrate<F>(
    rhs: &mut Rhs,
    s0: State,
    cfg: &IntegratorConfig,
    mut observer: F,
) -> Result<(State, IntegrationStats)>
where
    F: FnMut(&State, &IntegrationStats),
{
    cfg.validate()?;
    let n = rhs.n();
    if s0.c.len() != n {
        return Err(DynamicsError::Length {
            expected: n,
            got: s0.c.len(),
        });
    }
    if let Some((idx, &v)) =
        s0.c.iter()
            .enumerate()
            .find(|(_, v)| !(**v >= 0.0) || !v.is_finite())
    {
        return Err(DynamicsError::BadInitial {
            i: idx + 1,
            value: v,
        });
    }

    let t_end = s0.t + cfg.t_end;
    let times: Vec<f64> = observation_times(cfg.t_end, cfg.observer_cadence)
        .into_iter()
        .map(|t| s0.t + t)
        .collect();
    let t_scale = t_end.abs().max(1.0);

    let mut stats = IntegrationStats {
        h_last: cfg.h_init,
        ..Default::default()
    };
    let mut y = s0.c;
    let mut t = s0.t;
    let mut k = vec![vec![0.0; n]; 7];
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut h = cfg.h_init;
    let mut err_prev = 1e-4f64;

    rhs.eval(&y, &mut k[0]);
    stats.rhs_evals += 1;
    observer(&State::new(t, y.clone()), &stats);

    for &target in &times[1..] {
        while t < target {
            let remaining = target - t;
            let clipped = h >= remaining * (1.0 - 1e-12);
            let step = if clipped { remaining } else { h };
            if step < 1e-14 * t_scale && !clipped {
                return Err(DynamicsError::Stiff {
                    t,
                    h: step,
                    partial: Box::new(State::new(t, y)),
                    stats,
                });
            }

            let (k1, rest) = k.split_first_mut().unwrap();
            let [k2, k3, k4, k5, k6, k7] = rest else {
                unreachable!()
            };
            stage(&mut ytmp, &y, step, &[(A21, &*k1)]);
            rhs.eval(&ytmp, k2);
            stage(&mut ytmp, &y, step, &[(A31, &*k1), (A32, &*k2)]);
            rhs.eval(&ytmp, k3);
            stage(
                &mut ytmp,
                &y,
                step,
                &[(A41, &*k1), (A42, &*k2), (A43, &*k3)],
            );
            rhs.eval(&ytmp, k4);
            stage(
                &mut ytmp,
                &y,
                step,
                &[(A51, &*k1), (A52, &*k2), (A53, &*k3), (A54, &*k4)],
            );
            rhs.eval(&ytmp, k5);
            stage(
                &mut ytmp,
                &y,
                step,
                &[
                    (A61, &*k1),
                    (A62, &*k2),
                    (A63, &*k3),
                    (A64, &*k4),
                    (A65, &*k5),
                ],
            );
            rhs.eval(&ytmp, k6);
            stage(
                &mut ynew,
                &y,
                step,
                &[
                    (A71, &*k1),
                    (A73, &*k3),
                    (A74, &*k4),
                    (A75, &*k5),
                    (A76, &*k6),
                ],
            );
            rhs.eval(&ynew, k7);
            stats.rhs_evals += 6;

            let mut acc = 0.0;
            let mut negative = false;
            let mut finite = true;
            for i in 0..n {
                let e = step
                    * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                let sc = cfg.atol + cfg.rtol * y[i].abs().max(ynew[i].abs());
                acc += (e / sc) * (e / sc);
                negative |= ynew[i] < -cfg.atol;
                finite &= ynew[i].is_finite();
            }
            let err = (acc / n as f64).sqrt();

            if !finite || !err.is_finite() {
                stats.rejected += 1;
                h = step * 0.25;
                continue;
            }
            if negative {
                stats.rejected += 1;
                stats.negative_rejections += 1;
                h = step * 0.5;
                continue;
            }
            if err > 1.0 {
                stats.rejected += 1;
                h = step * (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
                continue;
            }

            // Accepted. PI step-size control.
            let fac = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.17) * err_prev.powf(0.04)).clamp(0.2, 5.0)
            };
            err_prev = err.max(1e-4);
            let proposal = (step * fac).min(cfg.h_max);
            h = if clipped {
                proposal.max(h.min(cfg.h_max))
            } else {
                proposal
            };

            t = if clipped { target } else { t + step };
            std::mem::swap(&mut y, &mut ynew);
            let mut clamped = false;
            for (idx, v) in y.iter_mut().enumerate() {
                if *v < cfg.positivity_floor && *v != 0.0 {
                    stats.clamped_mass += (idx + 1) as f64 * v.abs();
                    stats.clamp_events += 1;
                    *v = 0.0;
                    clamped = true;
                }
            }
            if clamped {
                rhs.eval(&y, k1);
                stats.rhs_evals += 1;
            } else {
                std::mem::swap(k1, k7);
            }
            stats.accepted += 1;
            stats.h_last = step;
        }
        observer(&State::new(t, y.clone()), &stats);
    }
    Ok((State::new(t, y), stats))
}

/// `out = y + h Σ coef·k`.
#[inline]
fn stage(out: &mut [f64], y: &[f64], h: f64, terms: &[(f64, &Vec<f64>)]) {
    out.copy_from_slice(y);
    for (i, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for (coef, kk) in terms {
            s += coef * kk[i];
        }
        *o += h * s;
    }
}

/// Initial-data recipes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialData {
    /// `c_1 = ρ`, everything else zero.
    Monodisperse { rho: f64 },
    /// `Q_i z^i (1 + ε ξ_i)` with `ξ_i` uniform in `[−1, 1]`, rescaled to mass `ρ`.
    EquilibriumPerturbed {
        rho: f64,
        #[serde(default)]
        epsilon: f64,
        #[serde(default)]
        seed: u64,
    },
    /// `c_i ∝ r^i`, scaled to mass `ρ`.
    Geometric { rho: f64, ratio: f64 },
    /// Headered CSV with columns `i,c_i`.
    File { path: String },
}

impl InitialData {
    pub fn rho(&self) -> Option<f64> {
        match self {
            InitialData::Monodisperse { rho }
            | InitialData::EquilibriumPerturbed { rho, .. }
            | InitialData::Geometric { rho, .. } => Some(*rho),
            InitialData::File { .. } => None,
        }
    }

    pub fn set_rho(&mut self, value: f64) {
        match self {
            InitialData::Monodisperse { rho }
            | InitialData::EquilibriumPerturbed { rho, .. }
            | InitialData::Geometric { rho, .. } => *rho = value,
            InitialData::File { .. } => {}
        }
    }

    pub fn set_seed(&mut self, value: u64) {
        if let InitialData::EquilibriumPerturbed { seed, .. } = self {
            *seed = value;
        }
    }

    /// Concentrations for a truncation of size `n`.
    pub fn build(&self, q: &DbSequence, n: usize) -> Result<Vec<f64>> {
        let mut c = vec![0.0; n];
        match *self {
            InitialData::Monodisperse { rho } => {
                c[0] = rho;
            }
            InitialData::EquilibriumPerturbed { rho, epsilon, seed } => {
                let eq = solve_z(q, rho, 1e-13 * rho.max(1.0))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for (i, ci) in c.iter_mut().enumerate() {
                    let xi: f64 = rng.random_range(-1.0..=1.0);
                    let base = eq.profile.get(i).copied().unwrap_or(0.0);
                    *ci = base * (1.0 + epsilon * xi);
                }
                rescale(&mut c, rho);
            }
            InitialData::Geometric { rho, ratio } => {
                if !(ratio > 0.0) {
                    return Err(DynamicsError::Config(
                        "geometric ratio must be positive".into(),
                    ));
                }
                let mut v = 1.0;
                for ci in c.iter_mut() {
                    *ci = v;
                    v *= ratio;
                }
                rescale(&mut c, rho);
            }
            InitialData::File { ref path } => {
                c = load_profile(Path::new(path), n)?;
            }
        }
        Ok(c)
    }
}

fn rescale(c: &mut [f64], rho: f64) {
    let m = moment(c, 1.0);
    if m > 0.0 {
        let s = rho / m;
        c.iter_mut().for_each(|x| *x *= s);
    }
}

/// Reads `i,c_i` rows; indices above `n` are an error, missing ones are zero.
pub fn load_profile(path: &Path, n: usize) -> Result<Vec<f64>> {
    let fail = |reason: String| DynamicsError::InitialFile {
        path: path.display().to_string(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| fail(e.to_string()))?;
    let mut c = vec![0.0; n];
    for (line, rec) in reader.deserialize::<(usize, f64)>().enumerate() {
        let (i, v) = rec.map_err(|e| fail(format!("row {}: {e}", line + 2)))?;
        if i == 0 || i > n {
            return Err(fail(format!("index {i} outside 1..={n}")));
        }
        if !(v >= 0.0) {
            return Err(fail(format!("negative concentration at i = {i}")));
        }
        c[i - 1] = v;
    }
    Ok(c)
}

/// Discrepancies between consecutive truncation sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationRow {
    pub n_small: usize,
    pub n_large: usize,
    /// `sup_t Σ i |c_i^{small} − c_i^{large}|` over the shared grid.
    pub discrepancy: f64,
    pub at_time: f64,
}

/// Runs every size in `n_list` from `initial` and compares consecutive pairs
/// on the observation grid. Branches run concurrently.
pub fn truncation_study(
    spec: &KernelSpec,
    q: &DbSequence,
    initial: &InitialData,
    n_list: &[usize],
    cfg: &IntegratorConfig,
) -> Result<Vec<TruncationRow>> {
    if n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DynamicsError::Config(
            "N list must be strictly ascending".into(),
        ));
    }
    let runs: Vec<Result<Vec<Vec<f64>>>> = n_list
        .par_iter()
        .map(|&n| {
            let c0 = initial.build(q, n)?;
            let mut rhs = Rhs::from_spec(spec, n)?;
            let mut snaps = Vec::new();
            integrate(&mut rhs, State::new(0.0, c0), cfg, |s, _| {
                snaps.push(s.c.clone())
            })?;
            Ok(snaps)
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let times = observation_times(cfg.t_end, cfg.observer_cadence);
    let mut rows = Vec::new();
    for w in 0..n_list.len().saturating_sub(1) {
        let (small, large) = (&runs[w], &runs[w + 1]);
        let mut worst = (0.0f64, 0.0);
        for (k, (cs, cl)) in small.iter().zip(large).enumerate() {
            let d: f64 = cl
                .iter()
                .enumerate()
                .map(|(idx, &x)| {
                    let y = cs.get(idx).copied().unwrap_or(0.0);
                    (idx + 1) as f64 * (x - y).abs()
                })
                .sum();
            if d > worst.0 {
                worst = (d, times[k]);
            }
        }
        rows.push(TruncationRow {
            n_small: n_list[w],
            n_large: n_list[w + 1],
            discrepancy: worst.0,
            at_time: worst.1,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::build_q;

    /// `a ≡ b ≡ 1`.
    fn constant_kernel() -> KernelSpec {
        KernelSpec::power_law_exp(0.0, 0.5, 0.0, 0.5).unwrap()
    }

    #[test]
    fn monodisperse_rates() {
        let spec = KernelSpec::representative();
        let mut c = vec![0.0; 6];
        c[0] = 0.7;
        let r = rhs(&spec, &c).unwrap();
        let a11 = spec.eval_a(1, 1).unwrap();
        let w = a11 * (0.7 * 0.7);
        assert!((r[0] + w).abs() < 1e-15);
        assert!((r[1] - 0.5 * w).abs() < 1e-15);
        assert!(r[2..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_state_zero_rate() {
        let r = rhs(&KernelSpec::representative(), &[0.0; 9]).unwrap();
        assert!(r.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn observation_grid() {
        assert_eq!(observation_times(100.0, 0.01).len(), 10001);
        assert_eq!(
            observation_times(1.0, 0.3),
            vec![0.0, 0.3, 0.6, 0.8999999999999999, 1.0]
        );
        assert_eq!(observation_times(0.0, 1.0), vec![0.0]);
        assert_eq!(*observation_times(10.0, 3.0).last().unwrap(), 10.0);
    }

    #[test]
    fn serial_and_parallel_agree_bitwise() {
        let spec = KernelSpec::representative();
        let n = 300;
        let c: Vec<f64> = (1..=n)
            .map(|i| (-(i as f64) * 0.03).exp() / i as f64)
            .collect();
        let mut serial = Rhs::from_spec(&spec, n).unwrap().with_parallel(false);
        let mut par = Rhs::from_spec(&spec, n).unwrap().with_parallel(true);
        let a = serial.eval_vec(&c);
        let b = par.eval_vec(&c);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    /// Reduced N = 2 constant-kernel system: with `c_2 = (ρ − c_1)/2`,
    /// `c_1' = −a c_1² + b (ρ − c_1)/2`, a Riccati equation solved in closed
    /// form through the roots of its right-hand side.
    #[test]
    fn two_component_riccati() {
        let spec = constant_kernel();
        let a = spec.eval_a(1, 1).unwrap();
        let b = spec.eval_b(1, 1).unwrap();
        let rho = 1.3;
        let (aa, bb, cc) = (-a, -0.5 * b, 0.5 * b * rho);
        let disc = (bb * bb - 4.0 * aa * cc).sqrt();
        let r1 = (-bb - disc) / (2.0 * aa);
        let r2 = (-bb + disc) / (2.0 * aa);
        let (hi, lo) = (r1.max(r2), r1.min(r2));
        let x0 = rho;
        let exact = |t: f64| {
            // (x − hi)/(x − lo) = K exp(−a (hi − lo) t)
            let k0 = (x0 - hi) / (x0 - lo);
            let e = k0 * (-a * (hi - lo) * t).exp();
            (hi - lo * e) / (1.0 - e)
        };
        let cfg = IntegratorConfig {
            rtol: 1e-12,
            atol: 1e-16,
            h_init: 1e-6,
            h_max: 0.1,
            t_end: 5.0,
            observer_cadence: 0.25,
            ..Default::default()
        };
        let mut r = Rhs::from_spec(&spec, 2).unwrap();
        let mut worst = 0.0f64;
        integrate(&mut r, State::new(0.0, vec![rho, 0.0]), &cfg, |s, _| {
            worst = worst.max((s.c[0] - exact(s.t)).abs() / exact(s.t));
        })
        .unwrap();
        assert!(worst < 10.0 * 1e-12, "{worst:e}");
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let spec = KernelSpec::representative();
        let q = build_q(&spec, 2048).unwrap().calibrated(1e-10).unwrap();
        let n = 120;
        let c0 = InitialData::EquilibriumPerturbed {
            rho: 2.0,
            epsilon: 0.0,
            seed: 0,
        }
        .build(&q, n)
        .unwrap();
        let mut r = Rhs::from_spec(&spec, n).unwrap();
        let rate = r.eval_vec(&c0);
        let tables = r.tables().clone();
        let mut flux_scale = 0.0f64;
        for i in 1..n {
            for j in 1..=(n - i) {
                flux_scale = flux_scale.max(tables.a(i, j) * c0[i - 1] * c0[j - 1]);
            }
        }
        let worst = rate.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(worst <= 1e-12 * flux_scale, "{worst:e} vs {flux_scale:e}");

        let cfg = IntegratorConfig {
            t_end: 20.0,
            observer_cadence: 5.0,
            h_max: 0.05,
            ..Default::default()
        };
        let norm: f64 = c0.iter().map(|x| x.abs()).sum();
        integrate(&mut r, State::new(0.0, c0.clone()), &cfg, |s, _| {
            let d: f64 = s.c.iter().zip(&c0).map(|(x, y)| (x - y).abs()).sum();
            assert!(d <= 1e-8 * norm, "t = {}: {d:e}", s.t);
        })
        .unwrap();
    }

    #[test]
    fn mass_balance_of_rates() {
        let spec = KernelSpec::representative();
        let n = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let c: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let r = rhs(&spec, &c).unwrap();
            let s: f64 = r.iter().enumerate().map(|(i, x)| (i + 1) as f64 * x).sum();
            let scale: f64 = r
                .iter()
                .enumerate()
                .map(|(i, x)| (i + 1) as f64 * x.abs())
                .sum();
            assert!(s.abs() <= 1e-13 * scale, "{s:e} / {scale:e}");
        }
    }

    #[test]
    fn moments() {
        assert_eq!(moment(&[0.0, 1.0, 0.0, 1.0], 2.0), 20.0);
        assert_eq!(moment(&[2.5], 7.3), 2.5);
        let c = [0.3, 0.2, 0.1];
        assert_eq!(moment(&c, 1.0), State::new(0.0, c.to_vec()).mass());
    }

    #[test]
    fn moment_rate_routes_agree() {
        let spec = KernelSpec::representative();
        let n = 80;
        let mut r = Rhs::from_spec(&spec, n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let c: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 0.1).collect();
            let rate = r.eval_vec(&c);
            for k in [0.0, 1.0, 1.5, 2.0] {
                let direct: f64 = rate
                    .iter()
                    .enumerate()
                    .map(|(i, x)| pow((i + 1) as f64, k) * x)
                    .sum();
                let scale: f64 = rate
                    .iter()
                    .enumerate()
                    .map(|(i, x)| pow((i + 1) as f64, k) * x.abs())
                    .sum();
                let weak = r.moment_rate(&c, k);
                assert!((weak - direct).abs() <= 1e-10 * scale, "k={k}");
            }
            assert!(r.moment_rate(&c, 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_initial_data_rejected() {
        let mut r = Rhs::from_spec(&KernelSpec::representative(), 3).unwrap();
        let err = integrate(
            &mut r,
            State::new(0.0, vec![1.0, -0.1, 0.0]),
            &IntegratorConfig::default(),
            |_, _| {},
        )
        .unwrap_err();
        assert!(matches!(err, DynamicsError::BadInitial { i: 2, .. }));
    }

    #[test]
    fn stiff_problem_reports_underflow() {
        // Rates of order 1e20 need steps far below the underflow threshold.
        let spec = KernelSpec::power_law_exp(0.5, 1e20, 1.0, 0.5).unwrap();
        let mut r = Rhs::from_spec(&spec, 20).unwrap();
        let mut c = vec![0.0; 20];
        c[0] = 1.0;
        let cfg = IntegratorConfig {
            rtol: 1e-12,
            atol: 1e-300,
            h_init: 1e-3,
            h_max: 1e-3,
            t_end: 1.0,
            observer_cadence: 1.0,
            ..Default::default()
        };
        let err = integrate(&mut r, State::new(0.0, c), &cfg, |_, _| {}).unwrap_err();
        assert!(matches!(err, DynamicsError::Stiff { .. }), "{err}");
    }

    #[test]
    fn zero_horizon_truncation_study() {
        let spec = KernelSpec::representative();
        let q = build_q(&spec, 1024).unwrap().calibrated(1e-10).unwrap();
        let cfg = IntegratorConfig {
            t_end: 0.0,
            observer_cadence: 1.0,
            ..Default::default()
        };
        let rows = truncation_study(
            &spec,
            &q,
            &InitialData::Monodisperse { rho: 1.0 },
            &[20, 40, 80],
            &cfg,
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.discrepancy == 0.0));
    }
}
