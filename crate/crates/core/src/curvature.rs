//! Measure-contraction checks along geodesic scalings `eta -> s eta`.
//!
//! Unweighted: `Jac(s eta) >= s^{N-q-m} Jac(eta)`. Weighted: the same with
//! `H = p e^{d^2/4}` composed with `exp` multiplying both Jacobians. All ratios
//! are formed in log space.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{self, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distance::cc_distance;
use crate::error::{Error, Result};
use crate::geodesic::{domain_certificate, exp_map, in_domain, jacobian_exp, scaling_jacobian_factor, Covector};
use crate::group::{GroupPoint, GroupSpec};
use crate::kernel::{n32_invariants, EpsilonProvider, KernelKind, KernelModel};
use crate::sampling::{boundary_grid, covector, default_s_grid, par_samples};

/// Default violation threshold of the unweighted check.
pub const MCP_THRESHOLD: f64 = 1.0 - 1e-6;
const CERTIFY_ATTEMPTS: usize = 8;

/// One evaluated `(eta, s)` pair; `index` and the report seed replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub index: usize,
    pub s: f64,
    pub zeta_norm: f64,
    pub tau_norm: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Argmin {
    pub eta: Covector,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub group: String,
    #[serde(rename = "N")]
    pub exponent: f64,
    pub n_samples: usize,
    pub s_grid: Vec<f64>,
    pub inf_ratio: f64,
    pub argmin: Argmin,
    pub violations: usize,
    pub threshold: f64,
    pub seed: u64,
    /// Task-specific statistics.
    pub stats: BTreeMap<String, f64>,
    #[serde(skip)]
    pub rows: Vec<ScanRow>,
}

impl RatioReport {
    fn assemble(
        spec: &GroupSpec,
        exponent: f64,
        etas: &[Covector],
        s_grid: &[f64],
        threshold: f64,
        seed: u64,
        rows: Vec<ScanRow>,
    ) -> Result<Self> {
        let best = rows
            .iter()
            .min_by(|a, b| a.ratio.total_cmp(&b.ratio))
            .ok_or_else(|| Error::Scan("no ratios were evaluated".into()))?;
        Ok(Self {
            group: spec.name(),
            exponent,
            n_samples: etas.len(),
            s_grid: s_grid.to_vec(),
            inf_ratio: best.ratio,
            argmin: Argmin {
                eta: etas[best.index].clone(),
                s: best.s,
            },
            violations: rows.iter().filter(|r| r.ratio < threshold).count(),
            threshold,
            seed,
            stats: BTreeMap::new(),
            rows,
        })
    }

    /// Violations recounted from the rows.
    pub fn recount(&self) -> usize {
        self.rows.iter().filter(|r| r.ratio < self.threshold).count()
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    pub const CSV_HEADER: &'static str = "group,N,s,zeta_norm,tau_norm,ratio,seed,index";

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                self.group, self.exponent, r.s, r.zeta_norm, r.tau_norm, r.ratio, self.seed, r.index
            )?;
        }
        Ok(())
    }
}

/// `H(eta) = p(exp eta) e^{|zeta|^2/4}` and the kernel that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedDensity {
    pub h_value: f64,
    pub source: KernelKind,
}

pub fn weighted_density(kernel: &KernelModel, eta: &Covector) -> Result<WeightedDensity> {
    let g = exp_map(kernel.spec(), eta)?;
    let h_value = kernel.log_weight(eta, &g)?.exp();
    if h_value > 0.0 && h_value.is_finite() {
        Ok(WeightedDensity {
            h_value,
            source: kernel.kind(),
        })
    } else {
        Err(Error::numerical("weighted density", format!("H = {h_value} at {eta:?}")))
    }
}

fn check_s(s: f64) -> Result<()> {
    if s > 0.0 && s <= 1.0 {
        Ok(())
    } else {
        Err(Error::Input(format!("scale s must lie in (0, 1], got {s}")))
    }
}

fn ln_jac(spec: &GroupSpec, eta: &Covector, s: f64) -> Result<f64> {
    jacobian_exp(spec, &eta.scale(s)).map(f64::ln).map_err(|e| match e {
        Error::Numerical { context, message } => Error::Numerical {
            context,
            message: format!("{message} (s = {s})"),
        },
        other => other,
    })
}

fn ln_weight(kernel: &KernelModel, eta: &Covector, s: f64) -> Result<f64> {
    let scaled = eta.scale(s);
    let g = exp_map(kernel.spec(), &scaled)?;
    kernel.log_weight(&scaled, &g)
}

fn check_domain(spec: &GroupSpec, eta: &Covector) -> Result<()> {
    if in_domain(spec, eta)? {
        Ok(())
    } else {
        Err(Error::Domain(format!("covector {eta:?} is outside the injectivity domain")))
    }
}

fn scale_exponent(spec: &GroupSpec, n: f64) -> f64 {
    (spec.q() + spec.m()) as f64 - n
}

/// `Jac(s eta) / (s^{N-q-m} Jac(eta))`; the MCP(0, N) inequality holds at
/// `(eta, s)` iff this is at least one.
pub fn mcp_ratio(spec: &GroupSpec, eta: &Covector, s: f64, n: f64) -> Result<f64> {
    check_s(s)?;
    check_domain(spec, eta)?;
    if s == 1.0 {
        return Ok(1.0);
    }
    let lr = ln_jac(spec, eta, s)? - ln_jac(spec, eta, 1.0)?;
    Ok((lr + scale_exponent(spec, n) * s.ln()).exp())
}

/// `H(s eta) Jac(s eta) / (s^{N-q-m} H(eta) Jac(eta))`.
pub fn weighted_mcp_ratio(kernel: &KernelModel, eta: &Covector, s: f64, n: f64) -> Result<f64> {
    let spec = kernel.spec();
    check_s(s)?;
    check_domain(spec, eta)?;
    if s == 1.0 {
        return Ok(1.0);
    }
    let lr = ln_jac(spec, eta, s)? - ln_jac(spec, eta, 1.0)?;
    let lw = ln_weight(kernel, eta, s)? - ln_weight(kernel, eta, 1.0)?;
    Ok((lr + lw + scale_exponent(spec, n) * s.ln()).exp())
}

/// Sampling and reporting options shared by the scans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub n_samples: usize,
    pub s_grid: Vec<f64>,
    pub zeta_min: f64,
    pub zeta_max: f64,
    /// Upper bound on `|tau|`; N32 candidates are filtered by certificate.
    pub tau_max: f64,
    /// Append the deterministic grid near `|tau| = 2 pi`.
    pub boundary_grid: bool,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            s_grid: default_s_grid(),
            zeta_min: 0.2,
            zeta_max: 5.0,
            tau_max: 2.0 * PI,
            boundary_grid: true,
            threshold: MCP_THRESHOLD,
            seed: 0,
        }
    }
}

impl ScanConfig {
    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Input("n_samples must be positive".into()));
        }
        if self.s_grid.is_empty() {
            return Err(Error::Input("s_grid is empty".into()));
        }
        for &s in &self.s_grid {
            check_s(s)?;
        }
        if !(self.zeta_min > 0.0 && self.zeta_min <= self.zeta_max) {
            return Err(Error::Input(format!(
                "need 0 < zeta_min <= zeta_max, got [{}, {}]",
                self.zeta_min, self.zeta_max
            )));
        }
        if !(self.tau_max > 0.0) {
            return Err(Error::Input(format!("tau_max must be positive, got {}", self.tau_max)));
        }
        Ok(())
    }
}

/// Covectors in the injectivity domain: random draws, then the boundary grid.
/// Returns the covectors and the number of draws that failed certification.
pub fn sample_domain(spec: &GroupSpec, cfg: &ScanConfig) -> Result<(Vec<Covector>, usize)> {
    cfg.validate()?;
    let draws = par_samples(cfg.seed, cfg.n_samples, |_, rng| {
        draw_in_domain(spec, rng, cfg.zeta_min, cfg.zeta_max, cfg.tau_max)
    });
    let mut etas = Vec::with_capacity(cfg.n_samples);
    let mut skipped = 0;
    for d in draws {
        match d? {
            Some(eta) => etas.push(eta),
            None => skipped += 1,
        }
    }
    if skipped * 20 > cfg.n_samples {
        return Err(Error::Scan(format!(
            "{skipped} of {} covectors failed the domain certificate (limit 5%)",
            cfg.n_samples
        )));
    }
    if cfg.boundary_grid {
        for eta in boundary_grid(spec) {
            if in_domain(spec, &eta)? {
                etas.push(eta);
            }
        }
    }
    Ok((etas, skipped))
}

fn draw_in_domain<R: Rng + ?Sized>(
    spec: &GroupSpec,
    rng: &mut R,
    lo: f64,
    hi: f64,
    tau_max: f64,
) -> Result<Option<Covector>> {
    for _ in 0..CERTIFY_ATTEMPTS {
        let eta = covector(rng, spec, lo, hi, tau_max);
        let inside = match spec.kind().htype_dims() {
            Some(_) => eta.tau_norm() < 2.0 * PI,
            None => domain_certificate(spec, &eta)?.in_domain,
        };
        if inside {
            return Ok(Some(eta));
        }
    }
    Ok(None)
}

/// `ln Jac(s eta) - ln Jac(eta)` for every grid point, with `s = 1` exact.
fn log_jacobian_ratios(spec: &GroupSpec, eta: &Covector, grid: &[f64]) -> Result<Vec<f64>> {
    let base = ln_jac(spec, eta, 1.0)?;
    grid.iter()
        .map(|&s| if s == 1.0 { Ok(0.0) } else { Ok(ln_jac(spec, eta, s)? - base) })
        .collect()
}

fn collect_rows(
    etas: &[Covector],
    grid: &[f64],
    seed: u64,
    per_sample: impl Fn(&Covector) -> Result<Vec<f64>> + Sync + Send,
) -> Result<Vec<(usize, Vec<f64>)>> {
    par_samples(seed, etas.len(), |i, _| per_sample(&etas[i]).map(|v| (i, v)))
        .into_iter()
        .map(|r| {
            let (i, v) = r?;
            debug_assert_eq!(v.len(), grid.len());
            Ok((i, v))
        })
        .collect()
}

fn rows_from(etas: &[Covector], grid: &[f64], logs: &[(usize, Vec<f64>)], shift: impl Fn(f64) -> f64) -> Vec<ScanRow> {
    let mut rows = Vec::with_capacity(logs.len() * grid.len());
    for (i, lr) in logs {
        for (&s, &l) in grid.iter().zip(lr) {
            rows.push(ScanRow {
                index: *i,
                s,
                zeta_norm: etas[*i].zeta_norm(),
                tau_norm: etas[*i].tau_norm(),
                ratio: if s == 1.0 { 1.0 } else { (l + shift(s)).exp() },
            });
        }
    }
    rows
}

/// Smallest real `N` with every sampled ratio at least `threshold`:
/// `q + m + max (ln threshold - lr) / (-ln s)` over `s < 1`.
fn required_exponent(spec: &GroupSpec, grid: &[f64], logs: &[(usize, Vec<f64>)], threshold: f64) -> f64 {
    let base = (spec.q() + spec.m()) as f64;
    let lt = threshold.ln();
    let mut need = f64::NEG_INFINITY;
    for (_, lr) in logs {
        for (&s, &l) in grid.iter().zip(lr) {
            if s < 1.0 {
                need = need.max((lt - l) / -s.ln());
            }
        }
    }
    base + need
}

fn exponent_stats(report: &mut RatioReport, spec: &GroupSpec, grid: &[f64], logs: &[(usize, Vec<f64>)]) {
    let need = required_exponent(spec, grid, logs, report.threshold);
    report.stats.insert("empirical_min_N".into(), need);
    report
        .stats
        .insert("smallest_passing_integer_N".into(), (need - 1e-9).ceil());
}

/// Unweighted MCP(0, N) over sampled covectors and the s-grid.
/// Records the empirical smallest passing `N` (sampled resolution only).
pub fn mcp_scan(spec: &GroupSpec, n: f64, cfg: &ScanConfig) -> Result<RatioReport> {
    let (etas, skipped) = sample_domain(spec, cfg)?;
    let grid = &cfg.s_grid;
    let logs = collect_rows(&etas, grid, cfg.seed, |eta| log_jacobian_ratios(spec, eta, grid))?;
    let k = scale_exponent(spec, n);
    let rows = rows_from(&etas, grid, &logs, |s| k * s.ln());
    let mut report = RatioReport::assemble(spec, n, &etas, grid, cfg.threshold, cfg.seed, rows)?;
    exponent_stats(&mut report, spec, grid, &logs);
    report.stats.insert("skipped".into(), skipped as f64);
    Ok(report)
}

/// Weighted check of the measure-contraction assumption. The reported
/// `inf_ratio` is the measured `C^{-1}`; violations count ratios below
/// `cfg.threshold`, which should be set to the tolerated `C^{-1}`.
pub fn weighted_mcp_scan(kernel: &KernelModel, n: f64, cfg: &ScanConfig) -> Result<RatioReport> {
    let spec = kernel.spec();
    let (etas, skipped) = sample_domain(spec, cfg)?;
    let grid = &cfg.s_grid;
    let logs = collect_rows(&etas, grid, cfg.seed, |eta| {
        let lj = log_jacobian_ratios(spec, eta, grid)?;
        let w0 = ln_weight(kernel, eta, 1.0)?;
        grid.iter()
            .zip(lj)
            .map(|(&s, l)| {
                if s == 1.0 {
                    Ok(0.0)
                } else {
                    Ok(l + ln_weight(kernel, eta, s)? - w0)
                }
            })
            .collect()
    })?;
    let k = scale_exponent(spec, n);
    let rows = rows_from(&etas, grid, &logs, |s| k * s.ln());
    let mut report = RatioReport::assemble(spec, n, &etas, grid, cfg.threshold, cfg.seed, rows)?;
    report.stats.insert("c_inverse".into(), report.inf_ratio);
    report.stats.insert("skipped".into(), skipped as f64);
    Ok(report)
}

/// Options of the N32 chain check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    /// Trial MCP exponent `N_0`; at least 14.
    pub n0: f64,
    pub s_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n0: 14.0,
            s_grid: default_s_grid(),
            seed: 0,
        }
    }
}

/// Right over left side of the N32 chain inequality
/// `(1+e d)(1+e_s d_s+e_s A_s^{1/2}) A <~ (1+e_s d_s)(1+e d+e A^{1/2}) s^{6-N_0} A_s`
/// on the sampled points and s-grid. Stats carry `sup A/(e^2 d^4)`.
pub fn n32_chain_check(g_samples: &[GroupPoint], provider: &EpsilonProvider, cfg: &ChainConfig) -> Result<RatioReport> {
    let spec = GroupSpec::n32()?;
    if cfg.n0 < 14.0 {
        return Err(Error::Input(format!("N_0 must be at least 14, got {}", cfg.n0)));
    }
    if g_samples.is_empty() {
        return Err(Error::Input("no sample points".into()));
    }
    for &s in &cfg.s_grid {
        check_s(s)?;
    }
    let grid = &cfg.s_grid;
    let per_point = par_samples(cfg.seed, g_samples.len(), |i, _| -> Result<(Covector, Vec<f64>, f64)> {
        let g = &g_samples[i];
        let dist = cc_distance(&spec, g)?;
        let eta = dist
            .preimage
            .ok_or_else(|| Error::Domain(format!("no preimage for sample {i} at {g}")))?;
        let d = dist.distance;
        let a = n32_invariants(g, d)?.frak_a;
        let e = provider.epsilon(g, &eta)?;
        let mut ratios = Vec::with_capacity(grid.len());
        for &s in grid {
            if s == 1.0 {
                ratios.push(1.0);
                continue;
            }
            let gs = exp_map(&spec, &eta.scale(s))?;
            let ds = s * d;
            let a_s = n32_invariants(&gs, ds)?.frak_a;
            let e_s = provider.epsilon(&gs, &eta.scale(s))?;
            if e > e_s * (1.0 + 1e-12) {
                return Err(Error::Input(format!(
                    "epsilon {e} exceeds epsilon_s {e_s} at sample {i}, s = {s}"
                )));
            }
            let left = (1.0 + e * d) * (1.0 + e_s * ds + e_s * a_s.sqrt()) * a;
            let right = (1.0 + e_s * ds) * (1.0 + e * d + e * a.sqrt()) * s.powf(6.0 - cfg.n0) * a_s;
            ratios.push(right / left);
        }
        Ok((eta, ratios, a / (e * e * d.powi(4))))
    });
    let mut etas = Vec::with_capacity(g_samples.len());
    let mut rows = Vec::new();
    let mut sup_a = 0.0f64;
    for (i, r) in per_point.into_iter().enumerate() {
        let (eta, ratios, a_ratio) = r?;
        sup_a = sup_a.max(a_ratio);
        for (&s, ratio) in grid.iter().zip(ratios) {
            rows.push(ScanRow {
                index: i,
                s,
                zeta_norm: eta.zeta_norm(),
                tau_norm: eta.tau_norm(),
                ratio,
            });
        }
        etas.push(eta);
    }
    let mut report = RatioReport::assemble(&spec, cfg.n0 + 2.0, &etas, grid, 0.0, cfg.seed, rows)?;
    report.violations = report.rows.iter().filter(|r| !(r.ratio > 0.0)).count();
    report.stats.insert("N0".into(), cfg.n0);
    report.stats.insert("sup_A_over_eps2_d4".into(), sup_a);
    Ok(report)
}

/// Options of the core-lemma check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreLemmaConfig {
    /// The constant `A`; samples need `d(g) > A`.
    pub a_param: f64,
    /// Indices `i` visited per sample, spread evenly over `0..=floor(2 d^3 / A)`.
    pub steps: usize,
    pub seed: u64,
}

impl Default for CoreLemmaConfig {
    fn default() -> Self {
        Self {
            a_param: 5.0,
            steps: 16,
            seed: 0,
        }
    }
}

/// Along the geodesic to each sample, `s(i) = 1 - i d^{-3}`. Rows carry
/// `Jac(Upsilon_i) / K_i` with `K_i = H(eta) / H(s(i) eta)` and
/// `Jac(Upsilon_i) = Jac(exp)(s eta) s^{q+m-1}(3-2s) / Jac(exp)(eta)`, so
/// `inf_ratio` is `1/C_2`. Stats record `sup K_i / Jac(Upsilon_i)` and the
/// largest relative mismatch of `d(g(i))` against `s(i) d(g)`.
pub fn core_lemma_check(kernel: &KernelModel, g_samples: &[GroupPoint], cfg: &CoreLemmaConfig) -> Result<RatioReport> {
    let spec = kernel.spec();
    let a_param = cfg.a_param;
    if !(a_param > 0.0) || cfg.steps == 0 {
        return Err(Error::Input("core lemma needs A > 0 and steps > 0".into()));
    }
    if g_samples.is_empty() {
        return Err(Error::Input("no sample points".into()));
    }
    type PointRows = (Covector, Vec<(f64, f64)>, f64);
    let per_point = par_samples(cfg.seed, g_samples.len(), |i, _| -> Result<PointRows> {
        let g = &g_samples[i];
        let dist = cc_distance(spec, g)?;
        let d = dist.distance;
        if d <= a_param {
            return Err(Error::Input(format!("sample {i} has d = {d} <= A = {a_param}")));
        }
        let eta = dist
            .preimage
            .ok_or_else(|| Error::Domain(format!("no preimage for sample {i} at {g}")))?;
        let top = (2.0 * d.powi(3) / a_param).floor() as usize;
        let stride = (top + 1).div_ceil(cfg.steps).max(1);
        let w0 = ln_weight(kernel, &eta, 1.0)?;
        let j0 = ln_jac(spec, &eta, 1.0)?;
        let mut out = Vec::new();
        let mut worst = 0.0f64;
        for k in (0..=top).step_by(stride) {
            let s = 1.0 - k as f64 / d.powi(3);
            if k == 0 {
                out.push((1.0, 1.0));
                continue;
            }
            let gi = exp_map(spec, &eta.scale(s))?;
            let di = cc_distance(spec, &gi)?.distance;
            worst = worst.max((di - s * d).abs() / d.max(1.0));
            let log_k = w0 - ln_weight(kernel, &eta, s)?;
            let log_jac =
                ln_jac(spec, &eta, s)? - j0 + scaling_jacobian_factor(spec.q(), spec.m(), s)?.ln();
            out.push((s, (log_jac - log_k).exp()));
        }
        Ok((eta, out, worst))
    });
    let mut etas = Vec::new();
    let mut rows = Vec::new();
    let mut grid = Vec::new();
    let mut worst = 0.0f64;
    for (i, r) in per_point.into_iter().enumerate() {
        let (eta, out, w) = r?;
        worst = worst.max(w);
        for (s, ratio) in out {
            grid.push(s);
            rows.push(ScanRow {
                index: i,
                s,
                zeta_norm: eta.zeta_norm(),
                tau_norm: eta.tau_norm(),
                ratio,
            });
        }
        etas.push(eta);
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let exponent = (spec.q() + spec.m()) as f64;
    let mut report = RatioReport::assemble(spec, exponent, &etas, &grid, 0.0, cfg.seed, rows)?;
    report.violations = report.rows.iter().filter(|r| !(r.ratio > 0.0)).count();
    report.stats.insert("A".into(), a_param);
    report.stats.insert("sup_K_over_jac".into(), 1.0 / report.inf_ratio);
    report.stats.insert("max_distance_mismatch".into(), worst);
    Ok(report)
}

/// The ball `{g : d(center, g) < radius}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallSet {
    pub center: GroupPoint,
    pub radius: f64,
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    fn from_box(box_volume: f64, values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self {
            value: box_volume * mean,
            stderr: box_volume * (var / n).sqrt(),
        }
    }

    /// `|a - b| / sqrt(se_a^2 + se_b^2)`.
    pub fn z_score(&self, other: &Estimate) -> f64 {
        let se = self.stderr.hypot(other.stderr);
        if se == 0.0 {
            if self.value == other.value { 0.0 } else { f64::INFINITY }
        } else {
            (self.value - other.value).abs() / se
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetLevelReport {
    pub s: f64,
    #[serde(rename = "N")]
    pub exponent: f64,
    /// `mu(Z_s(o, E))` by pushing samples of `E` forward along their geodesics.
    pub lhs: Estimate,
    /// `mu(Z_s(o, E))` by testing membership of samples around `Z_s(o, E)`.
    pub lhs_direct: Estimate,
    /// `mu(E)`.
    pub rhs: Estimate,
    /// `lhs / (s^N rhs)`, to compare with pointwise weighted ratios over `E`.
    pub set_ratio: f64,
    /// Pointwise weighted ratio at the preimage of the centre.
    pub center_ratio: f64,
    /// Range of pointwise weighted ratios over the samples in `E`.
    pub pointwise_min: f64,
    pub pointwise_max: f64,
    pub hits: usize,
    pub n_samples: usize,
    pub skipped: usize,
}

/// Half-widths of a box containing the ball of radius `r` about the identity
/// (see [`crate::distance::ball_volume_estimate`]).
fn ball_box(spec: &GroupSpec, r: f64) -> (f64, Vec<f64>) {
    let t: Vec<f64> = spec
        .structure_norms()
        .iter()
        .map(|s| s * r * r / (2.0 * PI) * (1.0 + 1e-9))
        .collect();
    (r, t)
}

/// Set-level check of the weighted contraction inequality for `E` a ball.
/// Estimates `mu(Z_s(o,E))` twice (push-forward and direct membership) and
/// `mu(E)`, where `d mu = p e^{d^2/4} d vol`.
pub fn set_level_mcp_check(
    kernel: &KernelModel,
    set: &BallSet,
    s: f64,
    n: f64,
    n_samples: usize,
    seed: u64,
) -> Result<SetLevelReport> {
    let spec = kernel.spec();
    check_s(s)?;
    spec.check_point(&set.center)?;
    if !(set.radius > 0.0) || n_samples < 100 {
        return Err(Error::Input("set-level check needs radius > 0 and at least 100 samples".into()));
    }
    let (xh, th) = ball_box(spec, set.radius);
    let box_volume = (2.0 * xh).powi(spec.q() as i32) * th.iter().map(|h| 2.0 * h).product::<f64>();
    let qm = (spec.q() + spec.m()) as f64;

    // Push-forward: g = c u uniform in E, eta = exp^{-1}(g),
    // lhs integrand s^{q+m} H(s eta) Jac(s eta) / Jac(eta), rhs integrand H(eta).
    type Pushed = Option<(f64, f64, f64, GroupPoint)>;
    let pushed = par_samples(seed, n_samples, |_, rng| -> Result<Option<Pushed>> {
        let u = GroupPoint {
            x: (0..spec.q()).map(|_| rng.random_range(-xh..=xh)).collect(),
            t: th.iter().map(|h| rng.random_range(-h..=*h)).collect(),
        };
        if u.x_norm() >= set.radius {
            return Ok(Some(None));
        }
        let Ok(du) = cc_distance(spec, &u) else { return Ok(None) };
        if du.distance >= set.radius {
            return Ok(Some(None));
        }
        let g = spec.multiply(&set.center, &u)?;
        let Ok(dg) = cc_distance(spec, &g) else { return Ok(None) };
        let Some(eta) = dg.preimage else { return Ok(None) };
        let w0 = ln_weight(kernel, &eta, 1.0)?;
        if s == 1.0 {
            let h = w0.exp();
            return Ok(Some(Some((h, h, 1.0, g))));
        }
        let lr = ln_jac(spec, &eta, s)? - ln_jac(spec, &eta, 1.0)?;
        let ws = ln_weight(kernel, &eta, s)?;
        let lhs = (qm * s.ln() + ws + lr).exp();
        let pointwise = (lr + ws - w0 + (qm - n) * s.ln()).exp();
        Ok(Some(Some((lhs, w0.exp(), pointwise, exp_map(spec, &eta.scale(s))?))))
    });
    let mut lhs_vals = Vec::with_capacity(n_samples);
    let mut rhs_vals = Vec::with_capacity(n_samples);
    let mut images = Vec::new();
    let (mut pmin, mut pmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut skipped = 0;
    for p in pushed {
        match p? {
            None => skipped += 1,
            Some(None) => {
                lhs_vals.push(0.0);
                rhs_vals.push(0.0);
            }
            Some(Some((l, r, ratio, img))) => {
                lhs_vals.push(l);
                rhs_vals.push(r);
                pmin = pmin.min(ratio);
                pmax = pmax.max(ratio);
                images.push(img);
            }
        }
    }
    if skipped * 20 > n_samples {
        return Err(Error::Scan(format!("{skipped} of {n_samples} preimages failed (limit 5%)")));
    }
    if images.is_empty() {
        return Err(Error::Scan("no samples landed in E".into()));
    }
    let hits = images.len();
    let lhs = Estimate::from_box(box_volume, &lhs_vals);
    let rhs = Estimate::from_box(box_volume, &rhs_vals);

    // Direct membership: sample a box around the pushed-forward cloud and keep
    // points u whose geodesic, extended by 1/s, stays minimal and lands in E.
    let dim = spec.dim();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for img in &images {
        for (k, v) in img.coords().into_iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    for k in 0..dim {
        let pad = 0.25 * (hi[k] - lo[k]) + 1e-3 * set.radius;
        lo[k] -= pad;
        hi[k] += pad;
    }
    let direct_volume: f64 = lo.iter().zip(&hi).map(|(a, b)| b - a).product();
    let center_inv = spec.inverse(&set.center);
    let direct = par_samples(seed ^ 0x5eed_d1ec, n_samples, |_, rng| -> Result<Option<f64>> {
        let c: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| rng.random_range(*a..=*b)).collect();
        let u = GroupPoint::from_coords(spec.q(), &c);
        let Ok(du) = cc_distance(spec, &u) else { return Ok(None) };
        let Some(eta_u) = du.preimage else { return Ok(Some(0.0)) };
        let stretched = eta_u.scale(1.0 / s);
        if !in_domain(spec, &stretched)? {
            return Ok(Some(0.0));
        }
        let g = exp_map(spec, &stretched)?;
        let Ok(dc) = cc_distance(spec, &spec.multiply(&center_inv, &g)?) else { return Ok(None) };
        if dc.distance >= set.radius {
            return Ok(Some(0.0));
        }
        Ok(Some(kernel.log_weight(&eta_u, &u)?.exp()))
    });
    let mut direct_vals = Vec::with_capacity(n_samples);
    let mut direct_skipped = 0;
    for v in direct {
        match v? {
            Some(v) => direct_vals.push(v),
            None => direct_skipped += 1,
        }
    }
    if direct_skipped * 20 > n_samples {
        return Err(Error::Scan(format!(
            "{direct_skipped} of {n_samples} membership tests failed (limit 5%)"
        )));
    }
    let lhs_direct = Estimate::from_box(direct_volume, &direct_vals);

    let center_eta = cc_distance(spec, &set.center)?
        .preimage
        .ok_or_else(|| Error::Domain(format!("centre {} has no preimage", set.center)))?;
    let center_ratio = weighted_mcp_ratio(kernel, &center_eta, s, n)?;
    Ok(SetLevelReport {
        s,
        exponent: n,
        set_ratio: lhs.value / (s.powf(n) * rhs.value),
        lhs,
        lhs_direct,
        rhs,
        center_ratio,
        pointwise_min: pmin,
        pointwise_max: pmax,
        hits,
        n_samples,
        skipped: skipped + direct_skipped,
    })
}
