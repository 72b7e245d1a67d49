//! Carnot-Caratheodory distance from the identity by inverting `exp`.
//!
//! Heisenberg and H-type groups reduce to one scalar equation: writing
//! `theta = |tau| / 2`, a geodesic ends at `|x| = |zeta| sin(theta)/theta` and
//! `|t| = |zeta|^2 (2 theta - sin 2 theta) / (8 theta^2)` with `t` parallel to
//! `tau`, so `|t| / |x|^2 = psi(theta)` fixes `theta` in `[0, pi)`.
//! Other groups use damped Newton on the vertical residual after eliminating
//! `zeta` through the linear relation `x = phi_1(Omega) zeta`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesic::{exp_map, has_closed_reduction, jacobian_matrix, Covector, Flow};
use crate::group::{dot, norm, GroupKind, GroupPoint, GroupSpec};
use crate::sampling::{par_samples, point_in_box};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMethod {
    ClosedReduction,
    MultistartSolve,
    BoundaryLimit,
}

impl std::fmt::Display for DistanceMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DistanceMethod::ClosedReduction => "closed-reduction",
            DistanceMethod::MultistartSolve => "multistart-solve",
            DistanceMethod::BoundaryLimit => "boundary-limit",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceResult {
    pub distance: f64,
    /// Minimal covector with `exp(preimage) = g`; absent on the cut locus.
    pub preimage: Option<Covector>,
    /// Max-abs coordinate mismatch between `exp(preimage)` and the target.
    pub residual: f64,
    pub method: DistanceMethod,
    /// Set when `exp` is nearly singular at the preimage (`sigma_min < 1e-8`);
    /// such distances carry the wider tolerance [`NEAR_CUT_TOLERANCE`].
    pub near_cut: bool,
}

pub const NEAR_CUT_TOLERANCE: f64 = 1e-4;
const ACCEPT_RESIDUAL: f64 = 1e-6;
const STARTS: usize = 16;

/// `2 theta - sin(2 theta)`, by series near zero.
pub(crate) fn two_theta_minus_sin(theta: f64) -> f64 {
    let a = 2.0 * theta;
    if a.abs() < 1.0 {
        // a^3/3! - a^5/5! + ...
        let a2 = a * a;
        let mut term = a * a2 / 6.0;
        let mut sum = 0.0f64;
        let mut k = 3.0;
        while term.abs() > 1e-18 * sum.abs().max(f64::MIN_POSITIVE) {
            sum += term;
            term *= -a2 / ((k + 1.0) * (k + 2.0));
            k += 2.0;
        }
        sum
    } else {
        a - a.sin()
    }
}

/// `sin(theta) / theta`.
pub fn sinc(theta: f64) -> f64 {
    if theta.abs() < 1e-6 {
        1.0 - theta * theta / 6.0
    } else {
        theta.sin() / theta
    }
}

/// `|t| / |zeta|^2` along a Heisenberg geodesic: `(2 theta - sin 2 theta) / (8 theta^2)`.
pub fn vertical_profile(theta: f64) -> f64 {
    if theta.abs() < 1e-8 {
        theta / 6.0
    } else {
        two_theta_minus_sin(theta) / (8.0 * theta * theta)
    }
}

/// `psi(theta) = |t| / |x|^2`, increasing from 0 to infinity on `[0, pi)`.
pub fn psi(theta: f64) -> f64 {
    if theta.abs() < 1e-8 {
        return theta / 6.0;
    }
    let s = theta.sin();
    two_theta_minus_sin(theta) / (8.0 * s * s)
}

fn psi_prime(theta: f64) -> f64 {
    if theta.abs() < 1e-3 {
        return 1.0 / 6.0 + theta * theta / 15.0;
    }
    let s = theta.sin();
    0.5 - two_theta_minus_sin(theta) * (2.0 * theta).sin() / (8.0 * s.powi(4))
}

/// Solve `psi(theta) = rho` on `[0, pi)` by Newton safeguarded with bisection.
pub fn solve_psi(rho: f64) -> f64 {
    if rho <= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, PI);
    // small-rho start from psi ~ theta/6, large-rho start from psi ~ pi / (4 (pi - theta)^2)
    let mut th = if rho < 0.3 {
        6.0 * rho
    } else {
        PI - (PI / (4.0 * rho)).sqrt()
    }
    .clamp(1e-300, PI - 1e-300);
    for _ in 0..200 {
        let f = psi(th) - rho;
        if f > 0.0 {
            hi = th;
        } else {
            lo = th;
        }
        let mut next = th - f / psi_prime(th);
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - th).abs() <= 4.0 * f64::EPSILON * th.max(1e-300) || hi - lo <= f64::EPSILON * hi {
            return next;
        }
        th = next;
    }
    th
}

/// Solve `exp(eta) = g` and return the minimal `|zeta|`.
pub fn cc_distance(spec: &GroupSpec, g: &GroupPoint) -> Result<DistanceResult> {
    spec.check_point(g)?;
    if !g.coords().iter().all(|v| v.is_finite()) {
        return Err(Error::Input(format!("non-finite point {g}")));
    }
    if g.is_identity() {
        return Ok(DistanceResult {
            distance: 0.0,
            preimage: None,
            residual: 0.0,
            method: DistanceMethod::ClosedReduction,
            near_cut: false,
        });
    }
    if has_closed_reduction(spec) {
        closed_reduction(spec, g)
    } else {
        multistart(spec, g)
    }
}

fn closed_reduction(spec: &GroupSpec, g: &GroupPoint) -> Result<DistanceResult> {
    let rx = g.x_norm();
    let rt = g.t_norm();
    if rx == 0.0 || rt / (rx * rx) > 1e28 {
        return Ok(DistanceResult {
            distance: (4.0 * PI * rt).sqrt(),
            preimage: None,
            residual: 0.0,
            method: DistanceMethod::BoundaryLimit,
            near_cut: true,
        });
    }
    let theta = solve_psi(rt / (rx * rx));
    let distance = if theta < 1.0 {
        rx / sinc(theta)
    } else {
        (rt / vertical_profile(theta)).sqrt()
    };
    // tau = 2 theta t_hat; zeta = phi_1(Omega)^{-1} x with phi_1 = a I + b Omega.
    let tn = 2.0 * theta;
    let tau: Vec<f64> = if rt > 0.0 {
        g.t.iter().map(|v| tn * v / rt).collect()
    } else {
        vec![0.0; spec.m()]
    };
    let (a, b) = if tn < 1e-4 {
        (1.0 - tn * tn / 6.0, 0.5 - tn * tn / 24.0)
    } else {
        let h = (0.5 * tn).sin();
        (tn.sin() / tn, 2.0 * h * h / (tn * tn))
    };
    let omega = spec.omega(&tau);
    let ox = &omega * DVector::from_column_slice(&g.x);
    let den = a * a + b * b * tn * tn;
    let zeta: Vec<f64> = (0..spec.q()).map(|i| (a * g.x[i] - b * ox[i]) / den).collect();
    // Fix the length exactly; direction comes from the linear solve.
    let zn = norm(&zeta);
    let zeta: Vec<f64> = zeta.iter().map(|v| v * distance / zn).collect();
    let preimage = Covector::new(zeta, tau);
    let residual = exp_map(spec, &preimage)?.max_abs_diff(g);
    let scale = spec.homogeneous_norm(g).powi(2).max(1.0);
    if residual > ACCEPT_RESIDUAL * scale {
        return Err(Error::Unresolved {
            point: g.clone(),
            residual,
        });
    }
    Ok(DistanceResult {
        distance,
        preimage: Some(preimage),
        residual,
        method: DistanceMethod::ClosedReduction,
        near_cut: false,
    })
}

/// Vertical residual after solving `phi_1(Omega) zeta = x` for `zeta`.
struct Reduced<'a> {
    spec: &'a GroupSpec,
    x: DVector<f64>,
    t: Vec<f64>,
}

impl Reduced<'_> {
    fn eval(&self, tau: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let flow = Flow::new(self.spec, tau);
        let zeta = flow.phi1().lu().solve(&self.x)?;
        let zeta: Vec<f64> = zeta.iter().copied().collect();
        if !zeta.iter().all(|v| v.is_finite()) {
            return None;
        }
        let end = flow.endpoint(&zeta);
        let r: Vec<f64> = end.t.iter().zip(&self.t).map(|(a, b)| a - b).collect();
        Some((zeta, r))
    }

    fn jacobian(&self, tau: &[f64]) -> Option<DMatrix<f64>> {
        let m = tau.len();
        let h = 1e-6 * norm(tau).max(1.0);
        let mut jac = DMatrix::zeros(m, m);
        let mut p = tau.to_vec();
        for k in 0..m {
            p[k] = tau[k] + h;
            let (_, rp) = self.eval(&p)?;
            p[k] = tau[k] - h;
            let (_, rm) = self.eval(&p)?;
            p[k] = tau[k];
            for j in 0..m {
                jac[(j, k)] = (rp[j] - rm[j]) / (2.0 * h);
            }
        }
        Some(jac)
    }

    /// Damped Newton from `tau0`; returns `(zeta, tau, |r|)` on convergence.
    fn solve(&self, tau0: Vec<f64>, tol: f64) -> Option<(Vec<f64>, Vec<f64>, f64)> {
        self.solve_within(tau0, tol, 60)
    }

    fn solve_within(&self, tau0: Vec<f64>, tol: f64, max_iter: usize) -> Option<(Vec<f64>, Vec<f64>, f64)> {
        let mut tau = tau0;
        let (mut zeta, mut r) = self.eval(&tau)?;
        let mut rn = norm(&r);
        for _ in 0..max_iter {
            if rn <= tol {
                return Some((zeta, tau, rn));
            }
            let jac = self.jacobian(&tau)?;
            let step = jac.lu().solve(&DVector::from_vec(r.clone()))?;
            let mut step: Vec<f64> = step.iter().map(|v| -v).collect();
            let sn = norm(&step);
            if !sn.is_finite() {
                return None;
            }
            if sn > 2.0 {
                step.iter_mut().for_each(|v| *v *= 2.0 / sn);
            }
            let mut alpha = 1.0;
            let mut accepted = false;
            while alpha > 1e-4 {
                let trial: Vec<f64> = tau.iter().zip(&step).map(|(a, b)| a + alpha * b).collect();
                if let Some((z, rr)) = self.eval(&trial) {
                    let n = norm(&rr);
                    if n < (1.0 - 1e-4 * alpha) * rn {
                        tau = trial;
                        zeta = z;
                        r = rr;
                        rn = n;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        (rn <= tol).then_some((zeta, tau, rn))
    }
}

/// Starting values for `tau`: the small-`tau` linearisation
/// `t ~ G tau / 12` with `G_jk = (U_j x).(U_k x)`, rescaled, and shifted along
/// the weakest direction of `G` which the linearisation cannot see.
fn seeds(spec: &GroupSpec, g: &GroupPoint) -> Vec<Vec<f64>> {
    let m = spec.m();
    let ux: Vec<DVector<f64>> = spec
        .structure()
        .iter()
        .map(|u| u * DVector::from_column_slice(&g.x))
        .collect();
    let gram = DMatrix::from_fn(m, m, |j, k| ux[j].dot(&ux[k]));
    let x2 = dot(&g.x, &g.x).max(f64::MIN_POSITIVE);
    let reg = &gram + DMatrix::identity(m, m) * (1e-3 * x2);
    let lin = reg
        .lu()
        .solve(&(DVector::from_column_slice(&g.t) * 12.0))
        .unwrap_or_else(|| DVector::zeros(m));
    let mut lin: Vec<f64> = lin.iter().copied().collect();
    let ln = norm(&lin);
    if ln > 5.5 {
        lin.iter_mut().for_each(|v| *v *= 5.5 / ln);
    }
    let eig = gram.symmetric_eigen();
    let weak_idx = eig.eigenvalues.imin();
    let weak: Vec<f64> = eig.eigenvectors.column(weak_idx).iter().copied().collect();
    let dir: Vec<f64> = if ln > 0.0 {
        lin.iter().map(|v| v / norm(&lin)).collect()
    } else {
        weak.clone()
    };
    let mut out = Vec::with_capacity(STARTS);
    for f in [1.0, 0.5] {
        for c in [0.0, 1.0, -1.0, 2.5, -2.5, 4.0, -4.0] {
            out.push(lin.iter().zip(&weak).map(|(a, w)| f * a + c * w).collect());
        }
    }
    for r in [PI, 5.0] {
        out.push(dir.iter().map(|v| r * v).collect());
    }
    out.truncate(STARTS);
    out
}

/// Continuation for the free group on three generators. When `x` is
/// orthogonal to `t` the minimal geodesic stays in the plane normal to `t`
/// and is a Heisenberg geodesic, known in closed form. Moving `t` from its
/// component normal to `x` back to `t` keeps `x` and `t` independent, so the
/// path stays where `exp` is a diffeomorphism and tracking the preimage
/// follows the minimal geodesic.
fn continuation(spec: &GroupSpec, g: &GroupPoint, tol: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    let xn = g.x_norm();
    let along = dot(&g.x, &g.t) / (xn * xn);
    let t_perp: Vec<f64> = g.t.iter().zip(&g.x).map(|(t, x)| t - along * x).collect();
    let tp = norm(&t_perp);
    if tp <= 1e-12 * g.t_norm() {
        return None;
    }
    let theta = solve_psi(tp / (xn * xn));
    let mut tau: Vec<f64> = t_perp.iter().map(|v| 2.0 * theta * v / tp).collect();
    let at = |lambda: f64| Reduced {
        spec,
        x: DVector::from_column_slice(&g.x),
        t: t_perp.iter().zip(&g.x).map(|(t, x)| t + lambda * along * x).collect(),
    };
    let (mut zeta, t0, _) = at(0.0).solve_within(tau, tol, 20)?;
    tau = t0;
    let (mut lambda, mut step) = (0.0f64, 0.25f64);
    let mut prev: Option<(f64, Vec<f64>)> = None;
    while lambda < 1.0 {
        let next = (lambda + step).min(1.0);
        let guess: Vec<f64> = match &prev {
            Some((l0, p)) => tau
                .iter()
                .zip(p)
                .map(|(a, b)| a + (a - b) * (next - lambda) / (lambda - l0))
                .collect(),
            None => tau.clone(),
        };
        match at(next).solve_within(guess, tol, 12) {
            Some((z, t, _)) if norm(&t.iter().zip(&tau).map(|(a, b)| a - b).collect::<Vec<_>>()) < 1.0 => {
                prev = Some((lambda, std::mem::replace(&mut tau, t)));
                zeta = z;
                lambda = next;
                step = (2.0 * step).min(0.5);
            }
            _ => {
                step *= 0.5;
                if step < 1e-7 {
                    return None;
                }
            }
        }
    }
    Some((zeta, tau))
}

fn multistart(spec: &GroupSpec, g: &GroupPoint) -> Result<DistanceResult> {
    let scale = spec.homogeneous_norm(g).powi(2).max(1.0);
    let tol = 1e-13 * scale;
    if spec.kind() == GroupKind::N32 {
        if g.x_norm() == 0.0 {
            return Ok(DistanceResult {
                distance: (4.0 * PI * g.t_norm()).sqrt(),
                preimage: None,
                residual: 0.0,
                method: DistanceMethod::BoundaryLimit,
                near_cut: true,
            });
        }
        if let Some((zeta, tau)) = continuation(spec, g, tol) {
            return finish(spec, g, Covector::new(zeta, tau), scale);
        }
    }
    let problem = Reduced {
        spec,
        x: DVector::from_column_slice(&g.x),
        t: g.t.clone(),
    };
    let mut best: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut best_residual = f64::INFINITY;
    for tau0 in seeds(spec, g) {
        if let Some(start) = problem.eval(&tau0) {
            best_residual = best_residual.min(norm(&start.1));
        }
        let Some((zeta, tau, rn)) = problem.solve(tau0, tol) else {
            continue;
        };
        best_residual = best_residual.min(rn);
        let better = match &best {
            None => true,
            Some((z, _)) => norm(&zeta) < norm(z) * (1.0 - 1e-12),
        };
        if better {
            best = Some((zeta, tau));
        }
    }
    let Some((zeta, tau)) = best else {
        return Err(Error::Unresolved {
            point: g.clone(),
            residual: best_residual,
        });
    };
    finish(spec, g, Covector::new(zeta, tau), scale)
}

fn finish(spec: &GroupSpec, g: &GroupPoint, preimage: Covector, scale: f64) -> Result<DistanceResult> {
    let residual = exp_map(spec, &preimage)?.max_abs_diff(g);
    if residual > ACCEPT_RESIDUAL * scale {
        return Err(Error::Unresolved {
            point: g.clone(),
            residual,
        });
    }
    let sv = jacobian_matrix(spec, &preimage)?.singular_values();
    let near_cut = sv.min() < 1e-8 * sv.max().max(1.0);
    Ok(DistanceResult {
        distance: preimage.zeta_norm(),
        preimage: Some(preimage),
        residual,
        method: DistanceMethod::MultistartSolve,
        near_cut,
    })
}

/// Half-widths of the sampling box `|x_i| <= x_half`, `|t_j| <= t_half`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleBox {
    pub x_half: f64,
    pub t_half: f64,
}

impl Default for SampleBox {
    fn default() -> Self {
        Self { x_half: 3.0, t_half: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormEquivalence {
    pub c_low: f64,
    pub c_high: f64,
    pub n_samples: usize,
    pub skipped: usize,
}

/// Empirical range of `d(g)^2 / (|x|^2 + |t|)` over uniform samples of a box.
pub fn norm_equivalence_scan(
    spec: &GroupSpec,
    region: SampleBox,
    n_samples: usize,
    seed: u64,
) -> Result<NormEquivalence> {
    if n_samples < 100 {
        return Err(Error::Input(format!("n_samples must be at least 100, got {n_samples}")));
    }
    let ratios = par_samples(seed, n_samples, |_, rng| {
        let g = point_in_box(rng, spec, region.x_half, region.t_half);
        let hn = spec.homogeneous_norm(&g).powi(2);
        cc_distance(spec, &g).ok().map(|r| r.distance * r.distance / hn)
    });
    let ok: Vec<f64> = ratios.iter().flatten().copied().collect();
    let skipped = n_samples - ok.len();
    check_skips(skipped, n_samples)?;
    Ok(NormEquivalence {
        c_low: ok.iter().copied().fold(f64::INFINITY, f64::min),
        c_high: ok.iter().copied().fold(0.0, f64::max),
        n_samples,
        skipped,
    })
}

fn check_skips(skipped: usize, n: usize) -> Result<()> {
    if skipped * 20 > n {
        Err(Error::Scan(format!("{skipped} of {n} distances unresolved (limit 5%)")))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeEstimate {
    pub r: f64,
    pub value: f64,
    pub stderr: f64,
    pub box_volume: f64,
    pub hits: usize,
    pub n_samples: usize,
    pub skipped: usize,
}

/// Monte Carlo volume of `{d < r}`. Candidates come from the box
/// `|x_i| <= r`, `|t_j| <= |U_j|_2 r^2 / (2 pi)`, which contains the ball:
/// projecting a curve of length `L` onto the rotation planes of `U_j`, each
/// projected area is at most the semicircle bound `L_k^2 / (2 pi)`.
pub fn ball_volume_estimate(spec: &GroupSpec, r: f64, n_samples: usize, seed: u64) -> Result<VolumeEstimate> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Input(format!("radius must be positive, got {r}")));
    }
    if n_samples < 10_000 {
        return Err(Error::Input(format!("n_samples must be at least 1e4, got {n_samples}")));
    }
    let t_half: Vec<f64> = spec
        .structure_norms()
        .iter()
        .map(|s| s * r * r / (2.0 * PI) * (1.0 + 1e-9))
        .collect();
    let box_volume = (2.0 * r).powi(spec.q() as i32) * t_half.iter().map(|h| 2.0 * h).product::<f64>();
    let inside = par_samples(seed, n_samples, |_, rng| {
        let g = GroupPoint {
            x: (0..spec.q()).map(|_| rng.random_range(-r..=r)).collect(),
            t: t_half.iter().map(|h| rng.random_range(-h..=*h)).collect(),
        };
        if g.x_norm() >= r {
            return Some(false);
        }
        cc_distance(spec, &g).ok().map(|d| d.distance < r)
    });
    let skipped = inside.iter().filter(|v| v.is_none()).count();
    check_skips(skipped, n_samples)?;
    let used = n_samples - skipped;
    let hits = inside.iter().filter(|v| **v == Some(true)).count();
    let p = hits as f64 / used as f64;
    Ok(VolumeEstimate {
        r,
        value: box_volume * p,
        stderr: box_volume * (p * (1.0 - p) / used as f64).sqrt(),
        box_volume,
        hits,
        n_samples,
        skipped,
    })
}
