//! Sub-Riemannian exponential map at the identity.
//!
//! For a covector `eta = (zeta, tau)` put `Omega = sum_j tau_j U_j`. The normal
//! geodesic has horizontal velocity `e^{s Omega} zeta`, so
//! `x(s) = int_0^s e^{u Omega} zeta du` and
//! `t_j(s) = 1/2 int_0^s (U_j x(u)) . x'(u) du`.
//!
//! Since `Omega` is skew, `e^{u Omega} = cos(u sqrt(B)) + Omega sin(u sqrt(B)) / sqrt(B)`
//! with `B = Omega^T Omega`, which gives `x(u)` in closed form from one
//! symmetric eigendecomposition. The vertical part is integrated with a
//! composite Gauss-Legendre rule whose panels resolve the highest frequency
//! `2 max omega_k`, which puts the error at rounding level and keeps `exp`
//! smooth in `eta` for finite differencing.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::distance::{cc_distance, DistanceMethod};
use crate::error::{Error, Result};
use crate::group::{norm, GroupKind, GroupPoint, GroupSpec};
use crate::quadrature::gl20;

/// Normal covector `(zeta, tau)` at the identity. Half of `tau` is the angle
/// `theta` in the `(zeta, 2 theta)` parametrisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covector {
    pub zeta: Vec<f64>,
    pub tau: Vec<f64>,
}

impl Covector {
    pub fn new(zeta: Vec<f64>, tau: Vec<f64>) -> Self {
        Self { zeta, tau }
    }

    pub fn zeta_norm(&self) -> f64 {
        norm(&self.zeta)
    }

    pub fn tau_norm(&self) -> f64 {
        norm(&self.tau)
    }

    /// `theta = tau / 2`.
    pub fn theta(&self) -> Vec<f64> {
        self.tau.iter().map(|v| 0.5 * v).collect()
    }

    pub fn scale(&self, s: f64) -> Covector {
        Covector {
            zeta: self.zeta.iter().map(|v| s * v).collect(),
            tau: self.tau.iter().map(|v| s * v).collect(),
        }
    }

    pub fn coords(&self) -> Vec<f64> {
        self.zeta.iter().chain(&self.tau).copied().collect()
    }

    pub fn from_coords(q: usize, c: &[f64]) -> Self {
        Self {
            zeta: c[..q].to_vec(),
            tau: c[q..].to_vec(),
        }
    }

    pub fn norm(&self) -> f64 {
        norm(&self.coords())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeodesicResult {
    pub endpoint: GroupPoint,
    pub jacobian: f64,
    pub in_domain: bool,
    pub length: f64,
}

/// Spectral data of `Omega` for one `tau`; evaluates the geodesic for any `zeta`.
pub(crate) struct Flow<'a> {
    spec: &'a GroupSpec,
    omega: DMatrix<f64>,
    v: DMatrix<f64>,
    w: DMatrix<f64>,
    freq: Vec<f64>,
}

impl<'a> Flow<'a> {
    pub(crate) fn new(spec: &'a GroupSpec, tau: &[f64]) -> Self {
        let omega = spec.omega(tau);
        let b = omega.transpose() * &omega;
        let eig = b.symmetric_eigen();
        let freq = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
        let v = eig.eigenvectors;
        let w = &omega * &v;
        Self { spec, omega, v, w, freq }
    }

    pub(crate) fn max_freq(&self) -> f64 {
        self.freq.iter().copied().fold(0.0, f64::max)
    }

    /// Coordinates of `zeta` in the eigenbasis.
    fn project(&self, zeta: &[f64]) -> Vec<f64> {
        let q = self.spec.q();
        (0..q)
            .map(|k| (0..q).map(|r| self.v[(r, k)] * zeta[r]).sum())
            .collect()
    }

    /// `(x(u), x'(u))` for projected `zeta`.
    fn state(&self, zhat: &[f64], u: f64, x: &mut [f64], xd: &mut [f64]) {
        let q = self.spec.q();
        x.iter_mut().for_each(|v| *v = 0.0);
        xd.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..q {
            let om = self.freq[k];
            let (c, sn, vers) = trig_kernels(om, u);
            let a = zhat[k];
            for r in 0..q {
                let vk = self.v[(r, k)] * a;
                let wk = self.w[(r, k)] * a;
                xd[r] += vk * c + wk * sn;
                x[r] += vk * sn + wk * vers;
            }
        }
    }

    /// `(y(u), y'(u))` with `x(u) = u zeta + y(u)`; both vanish with `tau`.
    fn deviation(&self, zhat: &[f64], u: f64, y: &mut [f64], yd: &mut [f64]) {
        let q = self.spec.q();
        y.iter_mut().for_each(|v| *v = 0.0);
        yd.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..q {
            let om = self.freq[k];
            let (_, sn, vers) = trig_kernels(om, u);
            let (cm1, sm) = trig_deviations(om, u);
            let a = zhat[k];
            for r in 0..q {
                let vk = self.v[(r, k)] * a;
                let wk = self.w[(r, k)] * a;
                yd[r] += vk * cm1 + wk * sn;
                y[r] += vk * sm + wk * vers;
            }
        }
    }

    /// `phi_1(Omega) = int_0^1 e^{u Omega} du` as a matrix.
    pub(crate) fn phi1(&self) -> DMatrix<f64> {
        let q = self.spec.q();
        let mut sinc = DMatrix::zeros(q, q);
        let mut vers = DMatrix::zeros(q, q);
        for k in 0..q {
            let (_, s, v) = trig_kernels(self.freq[k], 1.0);
            sinc[(k, k)] = s;
            vers[(k, k)] = v;
        }
        let vt = self.v.transpose();
        &self.v * sinc * &vt + &self.omega * &self.v * vers * vt
    }

    /// Endpoint `exp(zeta, tau)`.
    pub(crate) fn endpoint(&self, zeta: &[f64]) -> GroupPoint {
        let q = self.spec.q();
        let m = self.spec.m();
        let zhat = self.project(zeta);
        let mut x = vec![0.0; q];
        let mut xd = vec![0.0; q];
        self.state(&zhat, 1.0, &mut x, &mut xd);
        let x_end = x.clone();

        let (nodes, weights) = gl20();
        let panels = ((2.0 * self.max_freq()) / 8.0).ceil().max(1.0) as usize;
        let width = 1.0 / panels as f64;
        // With x = u zeta + y the term u (U zeta).zeta vanishes identically;
        // dropping it keeps t accurate relative to its own size as tau -> 0.
        let mut t = vec![0.0; m];
        let mut uz = vec![0.0; q];
        let mut uy = vec![0.0; q];
        for p in 0..panels {
            let center = (p as f64 + 0.5) * width;
            for (z, wgt) in nodes.iter().zip(weights) {
                let u = center + 0.5 * width * z;
                self.deviation(&zhat, u, &mut x, &mut xd);
                for (j, uj) in self.spec.structure().iter().enumerate() {
                    for l in 0..q {
                        uz[l] = (0..q).map(|k| uj[(l, k)] * zeta[k]).sum();
                        uy[l] = (0..q).map(|k| uj[(l, k)] * x[k]).sum();
                    }
                    let integrand: f64 = (0..q)
                        .map(|l| u * uz[l] * xd[l] + uy[l] * (zeta[l] + xd[l]))
                        .sum();
                    t[j] += 0.25 * width * wgt * integrand;
                }
            }
        }
        GroupPoint { x: x_end, t }
    }
}

/// `(cos(om u), sin(om u)/om, (1 - cos(om u))/om^2)` with the `om -> 0` limits.
fn trig_kernels(om: f64, u: f64) -> (f64, f64, f64) {
    let a = om * u;
    if a.abs() < 1e-4 {
        let a2 = a * a;
        let c = 1.0 - a2 / 2.0 + a2 * a2 / 24.0;
        let s = u * (1.0 - a2 / 6.0 + a2 * a2 / 120.0);
        let v = u * u * (0.5 - a2 / 24.0 + a2 * a2 / 720.0);
        (c, s, v)
    } else {
        let half = (0.5 * a).sin();
        (a.cos(), a.sin() / om, 2.0 * half * half / (om * om))
    }
}

/// `(cos(om u) - 1, sin(om u)/om - u)` without cancellation.
fn trig_deviations(om: f64, u: f64) -> (f64, f64) {
    let a = om * u;
    let half = (0.5 * a).sin();
    let cm1 = -2.0 * half * half;
    let sm = if a.abs() < 0.5 {
        // u (-a^2/3! + a^4/5! - ...)
        let a2 = a * a;
        let mut term = -a2 / 6.0;
        let mut sum = term;
        for k in 2..10 {
            let n = (2 * k) as f64;
            term *= -a2 / (n * (n + 1.0));
            sum += term;
        }
        u * sum
    } else {
        a.sin() / om - u
    };
    (cm1, sm)
}

fn check_covector(spec: &GroupSpec, eta: &Covector) -> Result<()> {
    if eta.zeta.len() != spec.q() {
        return Err(Error::Dimension {
            what: "covector zeta",
            expected: spec.q(),
            got: eta.zeta.len(),
        });
    }
    if eta.tau.len() != spec.m() {
        return Err(Error::Dimension {
            what: "covector tau",
            expected: spec.m(),
            got: eta.tau.len(),
        });
    }
    Ok(())
}

/// Endpoint of the normal geodesic with initial covector `eta` at time 1.
pub fn exp_map(spec: &GroupSpec, eta: &Covector) -> Result<GroupPoint> {
    check_covector(spec, eta)?;
    let g = Flow::new(spec, &eta.tau).endpoint(&eta.zeta);
    if g.coords().iter().all(|v| v.is_finite()) {
        Ok(g)
    } else {
        Err(Error::numerical("exp_map", format!("non-finite endpoint for {eta:?}")))
    }
}

/// The point `gamma(s) = exp(s eta)` on the geodesic, `0 < s <= 1`.
pub fn exp_scaled(spec: &GroupSpec, eta: &Covector, s: f64) -> Result<GroupPoint> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::Input(format!("scale s must lie in (0, 1], got {s}")));
    }
    exp_map(spec, &eta.scale(s))
}

/// Derivative matrix of `exp` at `eta` by central differences with one
/// Richardson refinement; step `max(1e-5, 1e-5 |eta|)`.
pub fn jacobian_matrix(spec: &GroupSpec, eta: &Covector) -> Result<DMatrix<f64>> {
    check_covector(spec, eta)?;
    let n = spec.dim();
    let base = eta.coords();
    let h = (1e-5 * norm(&base)).max(1e-5);
    let eval = |c: &[f64]| -> DVector<f64> {
        let e = Covector::from_coords(spec.q(), c);
        DVector::from_vec(Flow::new(spec, &e.tau).endpoint(&e.zeta).coords())
    };
    let mut jac = DMatrix::zeros(n, n);
    let mut c = base.clone();
    for i in 0..n {
        let mut diff = |step: f64| {
            c[i] = base[i] + step;
            let plus = eval(&c);
            c[i] = base[i] - step;
            let minus = eval(&c);
            c[i] = base[i];
            (plus - minus) / (2.0 * step)
        };
        let coarse = diff(h);
        let fine = diff(0.5 * h);
        jac.set_column(i, &((fine * 4.0 - coarse) / 3.0));
    }
    Ok(jac)
}

/// `Jac(exp)(eta)`; errors unless the determinant is finite and positive.
/// Since `exp(r zeta, tau)` is the dilate `delta_r exp(zeta, tau)`, the
/// determinant is `|zeta|^{2m} Jac(exp)(zeta/|zeta|, tau)`; differencing at
/// unit `|zeta|` keeps short geodesics resolvable.
pub fn jacobian_exp(spec: &GroupSpec, eta: &Covector) -> Result<f64> {
    check_covector(spec, eta)?;
    let r = eta.zeta_norm();
    let det = if r > 0.0 {
        let unit = Covector::new(eta.zeta.iter().map(|v| v / r).collect(), eta.tau.clone());
        jacobian_matrix(spec, &unit)?.determinant() * r.powi(2 * spec.m() as i32)
    } else {
        0.0
    };
    if det.is_finite() && det > 0.0 {
        Ok(det)
    } else {
        Err(Error::numerical(
            "jacobian_exp",
            format!("determinant {det:e} at zeta={:?}, tau={:?}", eta.zeta, eta.tau),
        ))
    }
}

/// Outcome of the numerical membership test for `eta` in the injectivity domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainCertificate {
    pub in_domain: bool,
    /// `|zeta|`, the length of the candidate geodesic.
    pub length: f64,
    /// Distance returned by the independent inversion, if any.
    pub distance: Option<f64>,
    /// Max-abs distance between `eta` and the recovered preimage.
    pub preimage_error: Option<f64>,
}

/// Numerical certificate: invert `exp(eta)` from scratch and require the
/// minimal preimage to be `eta` itself.
pub fn domain_certificate(spec: &GroupSpec, eta: &Covector) -> Result<DomainCertificate> {
    check_covector(spec, eta)?;
    let length = eta.zeta_norm();
    let mut cert = DomainCertificate {
        in_domain: false,
        length,
        distance: None,
        preimage_error: None,
    };
    if length == 0.0 {
        return Ok(cert);
    }
    let g = exp_map(spec, eta)?;
    let Ok(res) = cc_distance(spec, &g) else {
        return Ok(cert);
    };
    cert.distance = Some(res.distance);
    let Some(pre) = res.preimage.as_ref() else {
        return Ok(cert);
    };
    let err = pre
        .coords()
        .iter()
        .zip(eta.coords())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    cert.preimage_error = Some(err);
    let scale = length.max(1.0);
    cert.in_domain = res.method != DistanceMethod::BoundaryLimit
        && res.residual <= 1e-6 * scale
        && (res.distance - length).abs() <= 1e-6 * scale
        && err <= 1e-6 * eta.norm().max(1.0);
    Ok(cert)
}

/// Membership of `eta` in the injectivity domain. Explicit for the Heisenberg
/// and H-type families; a numerical certificate otherwise.
pub fn in_domain(spec: &GroupSpec, eta: &Covector) -> Result<bool> {
    check_covector(spec, eta)?;
    match spec.kind().htype_dims() {
        Some(_) => Ok(eta.zeta_norm() > 0.0 && eta.tau_norm() < 2.0 * std::f64::consts::PI),
        None => Ok(domain_certificate(spec, eta)?.in_domain),
    }
}

/// Endpoint, Jacobian, membership and length in one record.
pub fn geodesic(spec: &GroupSpec, eta: &Covector) -> Result<GeodesicResult> {
    let endpoint = exp_map(spec, eta)?;
    let inside = in_domain(spec, eta)?;
    let jacobian = if inside {
        jacobian_exp(spec, eta)?
    } else {
        jacobian_matrix(spec, eta)?.determinant()
    };
    Ok(GeodesicResult {
        endpoint,
        jacobian,
        in_domain: inside,
        length: eta.zeta_norm(),
    })
}

/// Jacobian determinant of `eta -> s(eta) eta` with `s = 1 - i |zeta|^{-3}`,
/// written in terms of `s`: `s^{q+m-1} (3 - 2 s)`.
pub fn scaling_jacobian_factor(q: usize, m: usize, s: f64) -> Result<f64> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::Input(format!("scale s must lie in (0, 1], got {s}")));
    }
    Ok(s.powi((q + m - 1) as i32) * (3.0 - 2.0 * s))
}

/// True for groups whose geodesics reduce to the scalar Heisenberg profile.
pub(crate) fn has_closed_reduction(spec: &GroupSpec) -> bool {
    !matches!(spec.kind(), GroupKind::N32 | GroupKind::Custom)
}
