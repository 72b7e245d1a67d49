//! Heat kernels of `Delta = sum X_l^2` and the comparison functions used to
//! bound them.
//!
//! On an H-type group with `q = 2n` the kernel at time one is
//!
//! ```text
//! p(x, t) = (2 pi)^{-m} (4 pi)^{-n} int_{R^m} e^{i mu.t} (|mu| / sinh|mu|)^n
//!           exp(-|x|^2/4 |mu| coth|mu|) dmu.
//! ```
//!
//! Along the imaginary axis the exponent is stationary exactly at the angle
//! `theta` solving `|t| / |x|^2 = psi(theta)`, where it equals `-d^2/4`. The
//! integration line is shifted there, so the integrand is a smooth bump of
//! unit height and `log p` is obtained without underflow for large `d^2 / h`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::distance::{cc_distance, solve_psi, DistanceResult};
use crate::error::{Error, Result};
use crate::geodesic::Covector;
use crate::group::{dot, GroupKind, GroupPoint, GroupSpec};
use crate::quadrature::{gl20, integrate_from};
use crate::sampling::{covector, par_samples};

type C64 = Complex<f64>;

/// `n ln(z / sinh z) - r z coth z`, stable for large `Re z >= 0`.
fn log_shape(z: C64, n: f64, r: f64) -> C64 {
    if z.norm() < 1e-3 {
        let z2 = z * z;
        let ratio = C64::new(1.0, 0.0) - z2 / 6.0 + z2 * z2 * (7.0 / 360.0);
        let zc = C64::new(1.0, 0.0) + z2 / 3.0 - z2 * z2 / 45.0;
        return ratio.ln() * n - zc * r;
    }
    if z.re > 15.0 {
        let e = (-2.0 * z).exp();
        let one = C64::new(1.0, 0.0);
        let log_ratio = z.ln() - z + std::f64::consts::LN_2 - (one - e).ln();
        let coth = (one + e) / (one - e);
        return log_ratio * n - z * coth * r;
    }
    (z / z.sinh()).ln() * n - z * z.cosh() / z.sinh() * r
}

/// Real exponent on the imaginary axis at height `sigma`:
/// `-sigma T - R sigma cot(sigma) + n ln(sigma / sin sigma)`.
fn axis_exponent(sigma: f64, n: f64, r: f64, t: f64) -> f64 {
    if sigma < 1e-4 {
        let s2 = sigma * sigma;
        return -sigma * t - r * (1.0 - s2 / 3.0) + n * (s2 / 6.0);
    }
    -sigma * t - r * sigma / sigma.tan() + n * (sigma / sigma.sin()).ln()
}

/// Breakpoints `0, w, 2w, 4w, ...` up to where the shifted integrand has
/// dropped below `e^{-45}` relative to its value at the origin.
fn breakpoints<F: Fn(f64) -> f64>(w: f64, log_mag: F) -> Vec<f64> {
    let mut b = vec![0.0, w];
    let mut u = w;
    while log_mag(u) > -45.0 && u < 1e4 {
        u *= 2.0;
        b.push(u);
    }
    b
}

/// `log p_1(x, t)` on `H(2n, m)` from `|x|` and `|t|`, with optional saddle hint.
fn log_kernel_unit(n: usize, m: usize, xn: f64, tn: f64, theta_hint: Option<f64>) -> Result<f64> {
    let nf = n as f64;
    let r = 0.25 * xn * xn;
    let theta = match theta_hint {
        Some(th) => th,
        None if xn > 0.0 => solve_psi(tn / (xn * xn)),
        None => PI,
    };
    // On or near the t-axis the saddle crowds the pole at i pi; stop short of it.
    let sigma = theta.min(PI - 1.0 / (1.0 + tn));
    let phi0 = axis_exponent(sigma, nf, r, tn);
    let width = 0.5 * (1.0 / (1.0 + r + tn).sqrt()).min(PI - sigma).min(1.0);
    let i = C64::new(0.0, 1.0);

    let prefactor = -(m as f64) * (2.0 * PI).ln() - nf * (4.0 * PI).ln();
    let tol = 1e-11;

    let inner = |rho: f64| -> Result<f64> {
        let rho2 = rho * rho;
        let exponent = move |u: f64| -> C64 {
            let mu1 = C64::new(u, sigma);
            let z = if rho == 0.0 { mu1 } else { (mu1 * mu1 + rho2).sqrt() };
            let z = if z.re < 0.0 { -z } else { z };
            i * mu1 * tn + log_shape(z, nf, r) - phi0
        };
        let breaks = breakpoints(width, |u| exponent(u).re);
        let mut f = |u: f64| exponent(u).exp();
        let res = integrate_from(&mut f, &breaks, 1e-300, tol, 4000);
        if !res.converged || !res.value.re.is_finite() {
            return Err(Error::numerical(
                "heat kernel",
                format!(
                    "inner quadrature did not converge (|x|={xn:e}, |t|={tn:e}, rho={rho:e}, err={:e})",
                    res.error
                ),
            ));
        }
        Ok(2.0 * res.value.re)
    };

    let integral = if m == 1 {
        inner(0.0)?
    } else {
        // Radial integral over mu' in R^{m-1}.
        let k = m - 2;
        let area = match k {
            0 => 2.0,
            1 => 2.0 * PI,
            _ => 4.0 * PI,
        };
        if m > 3 {
            return Err(Error::Input(format!("oscillatory kernel supports m <= 3, got {m}")));
        }
        let rho_mag = |rho: f64| -> f64 {
            let z2 = C64::new(rho * rho - sigma * sigma, 0.0);
            let z = z2.sqrt();
            let z = if z.re < 0.0 { -z } else { z };
            (log_shape(z, nf, r) - phi0).re - sigma * tn + (k as f64) * rho.max(1e-300).ln()
        };
        let breaks = breakpoints(width, rho_mag);
        let mut err = None;
        let mut f = |rho: f64| -> f64 {
            match inner(rho) {
                Ok(v) => v * rho.powi(k as i32),
                Err(e) => {
                    err.get_or_insert(e);
                    0.0
                }
            }
        };
        let res = integrate_from(&mut f, &breaks, 1e-300, 1e-9, 400);
        if let Some(e) = err {
            return Err(e);
        }
        if !res.converged {
            return Err(Error::numerical(
                "heat kernel",
                format!("radial quadrature did not converge (err={:e})", res.error),
            ));
        }
        area * res.value
    };
    if !(integral > 0.0) || !integral.is_finite() {
        return Err(Error::numerical(
            "heat kernel",
            format!("non-positive kernel value {integral:e} at |x|={xn:e}, |t|={tn:e}"),
        ));
    }
    Ok(prefactor + phi0 + integral.ln())
}

fn htype_dims(spec: &GroupSpec) -> Result<(usize, usize)> {
    spec.kind().htype_dims().ok_or_else(|| {
        Error::Input(format!("no oscillatory kernel for group {}", spec.name()))
    })
}

fn check_time(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!("time h must be positive, got {h}")))
    }
}

/// `log p_h(g)` on an H-type group via `p_h(g) = h^{-Q/2} p_1(delta_{1/sqrt h} g)`.
pub fn log_kernel_htype(n: usize, m: usize, g: &GroupPoint, h: f64) -> Result<f64> {
    check_time(h)?;
    if g.x.len() != 2 * n || g.t.len() != m {
        return Err(Error::Dimension {
            what: "kernel point",
            expected: 2 * n + m,
            got: g.x.len() + g.t.len(),
        });
    }
    let q_hom = (2 * n + 2 * m) as f64;
    let lp = log_kernel_unit(n, m, g.x_norm() / h.sqrt(), g.t_norm() / h, None)?;
    Ok(lp - 0.5 * q_hom * h.ln())
}

/// `p_h(g)` on `H^n`, with `n = dim x / 2`.
pub fn kernel_heisenberg(g: &GroupPoint, h: f64) -> Result<f64> {
    if g.x.len() % 2 != 0 || g.t.len() != 1 {
        return Err(Error::Input("Heisenberg points need even dim x and one t".into()));
    }
    Ok(log_kernel_htype(g.x.len() / 2, 1, g, h)?.exp())
}

/// `p_h(g)` on `H(2n, m)`.
pub fn kernel_htype(n: usize, m: usize, g: &GroupPoint, h: f64) -> Result<f64> {
    Ok(log_kernel_htype(n, m, g, h)?.exp())
}

/// `int p_1` over `H^n`, by Gauss-Legendre panels in `(|x|, t)`.
pub fn heisenberg_total_mass(n: usize, r_max: f64, t_max: f64, panels: usize) -> Result<f64> {
    if n == 0 || panels == 0 || !(r_max > 0.0 && t_max > 0.0) {
        return Err(Error::Input(format!(
            "need n, panels, r_max and t_max positive, got {n}, {panels}, {r_max}, {t_max}"
        )));
    }
    let (nodes, weights) = gl20();
    let rule = |len: f64| -> Vec<(f64, f64)> {
        let w = len / panels as f64;
        (0..panels)
            .flat_map(|p| {
                nodes.iter().zip(weights).map(move |(z, wt)| {
                    ((p as f64 + 0.5) * w + 0.5 * w * z, 0.5 * w * wt)
                })
            })
            .collect()
    };
    let rs = rule(r_max);
    let ts = rule(t_max);
    let rows: Vec<Result<f64>> = par_samples(0, rs.len(), |i, _| {
        let (r, wr) = rs[i];
        let mut acc = 0.0;
        for &(t, wt) in &ts {
            acc += wt * log_kernel_unit(n, 1, r, t, None)?.exp();
        }
        Ok(wr * r.powi(2 * n as i32 - 1) * acc)
    });
    let mut total = 0.0;
    for r in rows {
        total += r?;
    }
    // sphere area in R^{2n} times two for t < 0
    let sphere = 2.0 * PI.powi(n as i32) / (1..n).map(|k| k as f64).product::<f64>();
    Ok(2.0 * sphere * total)
}

/// A kernel value's comparison function with its factors for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparatorValue {
    pub value: f64,
    pub log_value: f64,
    pub d: f64,
    pub pieces: BTreeMap<String, f64>,
}

impl ComparatorValue {
    fn new(log_value: f64, d: f64, pieces: &[(&str, f64)]) -> Self {
        Self {
            value: log_value.exp(),
            log_value,
            d,
            pieces: pieces.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

fn htype_comparator_log(a: f64, b: f64, xn: f64, d: f64) -> f64 {
    a * (1.0 + d).ln() - b * (1.0 + xn * d).ln() - 0.25 * d * d
}

/// `(1 + d)^{2n-2} (1 + |x| d)^{-(n - 1/2)} e^{-d^2/4}` on `H^n`.
pub fn comparator_heisenberg(n: usize, g: &GroupPoint) -> Result<ComparatorValue> {
    comparator_htype(n, 1, g)
}

/// `(1 + d)^{2n-m-1} (1 + |x| d)^{-(n - 1/2)} e^{-d^2/4}` on `H(2n, m)`.
pub fn comparator_htype(n: usize, m: usize, g: &GroupPoint) -> Result<ComparatorValue> {
    let spec = if m == 1 {
        GroupSpec::heisenberg(n)?
    } else {
        GroupSpec::htype(2 * n, m)?
    };
    let d = cc_distance(&spec, g)?.distance;
    Ok(comparator_htype_at(n, m, g.x_norm(), d))
}

pub(crate) fn comparator_htype_at(n: usize, m: usize, xn: f64, d: f64) -> ComparatorValue {
    let a = 2.0 * n as f64 - m as f64 - 1.0;
    let b = n as f64 - 0.5;
    ComparatorValue::new(
        htype_comparator_log(a, b, xn, d),
        d,
        &[
            ("growth", (1.0 + d).powf(a)),
            ("decay", (1.0 + xn * d).powf(-b)),
            ("gaussian", (-0.25 * d * d).exp()),
        ],
    )
}

/// Polar data of `t` relative to `x` on the free group with three generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct N32Invariants {
    pub t1: f64,
    pub t2: f64,
    /// `(d^2 - |x|^2) / 4`.
    pub frak_m: f64,
    /// `T_2 |x| frak_m^{1/2}`.
    pub frak_a: f64,
}

/// True when `x` and `t` are linearly dependent up to relative tolerance `1e-12`.
pub fn n32_dependent(g: &GroupPoint) -> bool {
    let xt = dot(&g.x, &g.t);
    let lhs = dot(&g.x, &g.x) * dot(&g.t, &g.t);
    lhs - xt * xt <= 1e-12 * lhs
}

pub fn n32_invariants(g: &GroupPoint, d: f64) -> Result<N32Invariants> {
    if g.x.len() != 3 || g.t.len() != 3 {
        return Err(Error::Input("N32 invariants need three x and three t coordinates".into()));
    }
    if n32_dependent(g) {
        return Err(Error::Domain(format!("x and t are linearly dependent at {g}")));
    }
    let xn = g.x_norm();
    let tn = g.t_norm();
    let c = dot(&g.x, &g.t) / (xn * tn);
    let t1 = tn * c;
    let t2 = tn * (1.0 - c * c).max(0.0).sqrt();
    let frak_m = 0.25 * (d * d - xn * xn);
    Ok(N32Invariants {
        t1,
        t2,
        frak_m,
        frak_a: t2 * xn * frak_m.max(0.0).sqrt(),
    })
}

pub type EpsilonHook = Arc<dyn Fn(&GroupPoint, &Covector) -> f64 + Send + Sync>;

/// Source of `epsilon` in the N32 comparator.
#[derive(Clone)]
pub enum EpsilonProvider {
    Constant(f64),
    Hook(EpsilonHook),
    /// `pi - |theta|` from the numerical preimage. Labelled HEURISTIC.
    Heuristic,
}

impl EpsilonProvider {
    pub fn label(&self) -> &'static str {
        match self {
            EpsilonProvider::Constant(_) => "constant",
            EpsilonProvider::Hook(_) => "hook",
            EpsilonProvider::Heuristic => "HEURISTIC",
        }
    }

    pub fn epsilon(&self, g: &GroupPoint, eta: &Covector) -> Result<f64> {
        let e = match self {
            EpsilonProvider::Constant(c) => *c,
            EpsilonProvider::Hook(f) => f(g, eta),
            EpsilonProvider::Heuristic => PI - 0.5 * eta.tau_norm(),
        };
        if e > 0.0 && e.is_finite() {
            Ok(e)
        } else {
            Err(Error::Input(format!(
                "epsilon provider ({}) returned {e} at {g}",
                self.label()
            )))
        }
    }
}

impl fmt::Debug for EpsilonProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EpsilonProvider::Constant(c) => write!(f, "Constant({c})"),
            EpsilonProvider::Hook(_) => f.write_str("Hook(..)"),
            EpsilonProvider::Heuristic => f.write_str("Heuristic"),
        }
    }
}

/// `(1+d)^{-2} (1 + eps d) / (1 + eps d + eps T_2^{1/2} |x|^{1/2} m^{1/4}) e^{-d^2/4}`.
pub fn comparator_n32(g: &GroupPoint, epsilon: f64) -> Result<ComparatorValue> {
    let d = cc_distance(&GroupSpec::n32()?, g)?.distance;
    comparator_n32_at(g, d, epsilon)
}

pub fn comparator_n32_at(g: &GroupPoint, d: f64, epsilon: f64) -> Result<ComparatorValue> {
    if !(epsilon > 0.0) {
        return Err(Error::Input(format!("epsilon must be positive, got {epsilon}")));
    }
    let inv = n32_invariants(g, d)?;
    let corr = epsilon * inv.t2.sqrt() * g.x_norm().sqrt() * inv.frak_m.max(0.0).powf(0.25);
    let ed = epsilon * d;
    let log_value = -2.0 * (1.0 + d).ln() + (1.0 + ed).ln() - (1.0 + ed + corr).ln() - 0.25 * d * d;
    Ok(ComparatorValue::new(
        log_value,
        d,
        &[
            ("growth", (1.0 + d).powi(-2)),
            ("epsilon", epsilon),
            ("ratio", (1.0 + ed) / (1.0 + ed + corr)),
            ("T2", inv.t2),
            ("frak_m", inv.frak_m),
            ("gaussian", (-0.25 * d * d).exp()),
        ],
    ))
}

/// Shapes of the generic bounds: `((1+d)^{Q-1} e^{-d^2/4}, e^{-d^2/(4(1-delta))})`.
pub fn generic_bounds(spec: &GroupSpec, g: &GroupPoint, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Input(format!("delta must lie in (0, 1), got {delta}")));
    }
    let d = cc_distance(spec, g)?.distance;
    let q_hom = spec.homogeneous_dim() as f64;
    Ok((
        (1.0 + d).powf(q_hom - 1.0) * (-0.25 * d * d).exp(),
        (-d * d / (4.0 * (1.0 - delta))).exp(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    Oscillatory,
    ComparatorOnly,
}

/// A heat-kernel evaluator for one group.
#[derive(Debug, Clone)]
pub struct KernelModel {
    spec: GroupSpec,
    kind: KernelKind,
    epsilon: EpsilonProvider,
}

impl KernelModel {
    /// Oscillatory-integral evaluator; Heisenberg and H-type groups with `m <= 3`.
    pub fn oscillatory(spec: &GroupSpec) -> Result<Self> {
        let (_, m) = htype_dims(spec)?;
        if m > 3 {
            return Err(Error::Input(format!("oscillatory kernel supports m <= 3, got {m}")));
        }
        Ok(Self {
            spec: spec.clone(),
            kind: KernelKind::Oscillatory,
            epsilon: EpsilonProvider::Heuristic,
        })
    }

    /// The kernel represented by its two-sided comparison function.
    pub fn comparator(spec: &GroupSpec, epsilon: EpsilonProvider) -> Result<Self> {
        match spec.kind() {
            GroupKind::Custom => Err(Error::Input("no comparator for custom groups".into())),
            _ => Ok(Self {
                spec: spec.clone(),
                kind: KernelKind::ComparatorOnly,
                epsilon,
            }),
        }
    }

    pub fn spec(&self) -> &GroupSpec {
        &self.spec
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn epsilon_provider(&self) -> &EpsilonProvider {
        &self.epsilon
    }

    /// `log p_h(g)`; comparator models return the log comparator at scale `h`.
    pub fn log_density(&self, g: &GroupPoint, h: f64) -> Result<f64> {
        self.spec.check_point(g)?;
        check_time(h)?;
        match self.kind {
            KernelKind::Oscillatory => {
                let (n, m) = htype_dims(&self.spec)?;
                log_kernel_htype(n, m, g, h)
            }
            KernelKind::ComparatorOnly => {
                let scaled = self.spec.dilate(1.0 / h.sqrt(), g)?;
                let q_hom = self.spec.homogeneous_dim() as f64;
                let dist = cc_distance(&self.spec, &scaled)?;
                Ok(self.comparator_log(&scaled, &dist)? - 0.5 * q_hom * h.ln())
            }
        }
    }

    pub fn density(&self, g: &GroupPoint, h: f64) -> Result<f64> {
        Ok(self.log_density(g, h)?.exp())
    }

    fn comparator_log(&self, g: &GroupPoint, dist: &DistanceResult) -> Result<f64> {
        let d = dist.distance;
        match self.spec.kind() {
            GroupKind::N32 => {
                let eta = dist
                    .preimage
                    .as_ref()
                    .ok_or_else(|| Error::Domain(format!("no preimage for {g}")))?;
                let eps = self.epsilon.epsilon(g, eta)?;
                Ok(comparator_n32_at(g, d, eps)?.log_value)
            }
            kind => {
                let (n, m) = kind
                    .htype_dims()
                    .ok_or_else(|| Error::Input("no comparator for custom groups".into()))?;
                Ok(comparator_htype_at(n, m, g.x_norm(), d).log_value)
            }
        }
    }

    /// `log H(eta) = log p(exp eta) + |zeta|^2 / 4` for `eta` in the injectivity
    /// domain with endpoint `g = exp(eta)`.
    pub fn log_weight(&self, eta: &Covector, g: &GroupPoint) -> Result<f64> {
        let d = eta.zeta_norm();
        match self.kind {
            KernelKind::Oscillatory => {
                let (n, m) = htype_dims(&self.spec)?;
                let theta = 0.5 * eta.tau_norm();
                Ok(log_kernel_unit(n, m, g.x_norm(), g.t_norm(), Some(theta))? + 0.25 * d * d)
            }
            KernelKind::ComparatorOnly => {
                let dist = DistanceResult {
                    distance: d,
                    preimage: Some(eta.clone()),
                    residual: 0.0,
                    method: crate::distance::DistanceMethod::ClosedReduction,
                    near_cut: false,
                };
                Ok(self.comparator_log(g, &dist)? + 0.25 * d * d)
            }
        }
    }
}

/// Finite-difference horizontal gradient data of `log p` at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSample {
    pub point: GroupPoint,
    pub d: f64,
    /// `|grad p| / ((1 + d) p)`.
    pub ratio_k1: f64,
    /// `|grad^2 p| / ((1 + d)^2 p)`, Frobenius norm of `X_i X_j p`.
    pub ratio_k2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub group: String,
    pub n_samples: usize,
    pub seed: u64,
    pub sup_k1: f64,
    pub argmax_k1: GroupPoint,
    pub sup_k2: Option<f64>,
    pub argmax_k2: Option<GroupPoint>,
    pub samples: Vec<GradientSample>,
}

/// `|X p|/p` and optionally `|X X p|/p` at `g` by central differences along the frame.
pub fn kernel_gradient_at(model: &KernelModel, g: &GroupPoint, second: bool) -> Result<GradientSample> {
    if model.kind() != KernelKind::Oscillatory {
        return Err(Error::Input("gradient scans need an oscillatory kernel".into()));
    }
    let spec = model.spec();
    let q = spec.q();
    let base = model.log_density(g, 1.0)?;
    let d = cc_distance(spec, g)?.distance;
    let mut grad2 = 0.0;
    let mut try_steps = [1e-4, 1e-3].into_iter();
    let grad = loop {
        let Some(eps) = try_steps.next() else {
            return Err(Error::numerical("kernel gradient", format!("step underflow at {g}")));
        };
        let mut acc = 0.0;
        let mut finite = true;
        for l in 0..q {
            let p = model.log_density(&spec.step_along(g, l, eps), 1.0)?;
            let m = model.log_density(&spec.step_along(g, l, -eps), 1.0)?;
            let v = (p - m) / (2.0 * eps);
            finite &= v.is_finite();
            acc += v * v;
        }
        if finite {
            break acc.sqrt();
        }
    };
    let ratio_k2 = if second {
        let eps = 5e-3;
        for i in 0..q {
            for j in 0..q {
                let mut val = 0.0;
                for (a, b, w) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                    let pt = spec.step_along(&spec.step_along(g, i, a * eps), j, b * eps);
                    val += w * (model.log_density(&pt, 1.0)? - base).exp();
                }
                let xij = val / (4.0 * eps * eps);
                grad2 += xij * xij;
            }
        }
        Some(grad2.sqrt() / (1.0 + d).powi(2))
    } else {
        None
    };
    Ok(GradientSample {
        point: g.clone(),
        d,
        ratio_k1: grad / (1.0 + d),
        ratio_k2,
    })
}

/// Sup of the gradient ratios over endpoints of covectors with `|zeta| <= d_max`.
pub fn kernel_gradient_ratio_scan(
    model: &KernelModel,
    n_samples: usize,
    d_max: f64,
    second: bool,
    seed: u64,
) -> Result<GradientReport> {
    let spec = model.spec();
    let rows = par_samples(seed, n_samples, |_, rng| {
        let eta = covector(rng, spec, 0.0, d_max, 2.0 * PI);
        let g = crate::geodesic::exp_map(spec, &eta)?;
        kernel_gradient_at(model, &g, second)
    });
    let samples: Vec<GradientSample> = rows.into_iter().collect::<Result<_>>()?;
    let (i1, s1) = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s.ratio_k1))
        .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let k2 = second.then(|| {
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| (i, s.ratio_k2.unwrap_or(f64::NAN)))
            .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
    });
    Ok(GradientReport {
        group: spec.name(),
        n_samples,
        seed,
        sup_k1: s1,
        argmax_k1: samples[i1].point.clone(),
        sup_k2: k2.map(|(_, v)| v),
        argmax_k2: k2.map(|(i, _)| samples[i].point.clone()),
        samples,
    })
}

/// Least-squares fit of the small-time expansion at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallTimeFit {
    pub d: f64,
    pub hs: Vec<f64>,
    /// `log p_h + d^2/(4h) + (q+m)/2 log h`.
    pub residuals: Vec<f64>,
    /// Limit constant `c = log(C Jac^{-1/2})`.
    pub log_constant: f64,
    /// First-order coefficient in `c + a h`.
    pub slope: f64,
    /// Exponent of `h` when fitted freely.
    pub free_exponent: f64,
    /// Relative change of `e^c` when the smallest `h` is halved.
    pub drift: f64,
}

impl SmallTimeFit {
    /// The implied `Jac(exp)^{-1/2}` up to the group constant.
    pub fn jacobian_inv_sqrt(&self) -> f64 {
        self.log_constant.exp()
    }
}

fn lstsq(cols: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>> {
    let a = nalgebra::DMatrix::from_fn(y.len(), cols.len(), |i, j| cols[j][i]);
    let b = nalgebra::DVector::from_column_slice(y);
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::numerical("least squares", e.to_string()))?;
    Ok(sol.iter().copied().collect())
}

/// Fit `log p_h(g) + d^2/(4h) + ((q+m)/2) log h = c + a h` over `h = 2^{-k}`,
/// `k = 4..=10`.
pub fn small_time_jacobian(spec: &GroupSpec, g: &GroupPoint, model: &KernelModel) -> Result<SmallTimeFit> {
    if model.kind() != KernelKind::Oscillatory {
        return Err(Error::Input("small-time fits need an oscillatory kernel".into()));
    }
    let d = cc_distance(spec, g)?.distance;
    let half = 0.5 * (spec.q() + spec.m()) as f64;
    let fit = |ks: std::ops::RangeInclusive<i32>| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
        let hs: Vec<f64> = ks.map(|k| 0.5f64.powi(k)).collect();
        let mut logs = Vec::with_capacity(hs.len());
        for &h in &hs {
            logs.push(model.log_density(g, h)? + d * d / (4.0 * h));
        }
        let res: Vec<f64> = logs.iter().zip(&hs).map(|(l, h)| l + half * h.ln()).collect();
        let ones = vec![1.0; hs.len()];
        let coef = lstsq(&[ones.clone(), hs.clone()], &res)?;
        let free = lstsq(&[ones, hs.iter().map(|h| h.ln()).collect(), hs.clone()], &logs)?;
        Ok((hs, res, coef, free[1]))
    };
    let (hs, residuals, coef, free) = fit(4..=10)?;
    let (_, _, refined, _) = fit(4..=11)?;
    let drift = ((refined[0] - coef[0]).exp() - 1.0).abs();
    if drift > 0.05 || !coef[0].is_finite() {
        return Err(Error::Asymptotics(format!(
            "extracted constant moved by {:.2}% when refining h at {g}",
            100.0 * drift
        )));
    }
    Ok(SmallTimeFit {
        d,
        hs,
        residuals,
        log_constant: coef[0],
        slope: coef[1],
        free_exponent: free,
        drift,
    })
}
