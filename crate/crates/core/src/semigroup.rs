//! Monte Carlo heat semigroups. `e^{h Delta} f(g) = E f(g W_h)` where `W_h`
//! is horizontal Brownian motion generated by `Delta = sum X_l^2`: steps
//! `(dX, 0)` with `dX ~ N(0, 2 delta I)` composed through the group law.
//! The Riemannian flow appends an independent vertical Gaussian `N(0, 2h I)`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesic::exp_map;
use crate::group::{GroupPoint, GroupSpec};
use crate::sampling::{covector, par_samples, sample_rng};

/// Minimum number of steps over `[0, h]`.
pub const MIN_STEPS: usize = 16;
/// Minimum number of paths.
pub const MIN_PATHS: usize = 1000;
/// Finite-difference steps for `grad e^{h Delta} f` (first and second order).
pub const FD_STEP_1: f64 = 1e-3;
pub const FD_STEP_2: f64 = 5e-3;
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    /// Semigroup time.
    pub h: f64,
    pub n_paths: usize,
    /// Steps per unit time.
    pub n_steps: usize,
    pub seed: u64,
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::Input(format!("h must be positive, got {}", self.h)));
        }
        if (self.n_steps as f64) * self.h < MIN_STEPS as f64 {
            return Err(Error::Input(format!(
                "n_steps * h = {} is below the minimum resolution {MIN_STEPS}",
                self.n_steps as f64 * self.h
            )));
        }
        if self.n_paths < MIN_PATHS {
            return Err(Error::Input(format!(
                "n_paths must be at least {MIN_PATHS}, got {}",
                self.n_paths
            )));
        }
        Ok(())
    }

    /// Number of steps over `[0, h]`.
    pub fn steps(&self) -> usize {
        ((self.n_steps as f64 * self.h).ceil() as usize).max(MIN_STEPS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemigroupEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_paths: usize,
    /// Paths dropped because `f` was not finite there.
    pub rejected: usize,
}

impl SemigroupEstimate {
    pub fn z_score(&self, other: &SemigroupEstimate) -> f64 {
        let se = self.stderr.hypot(other.stderr);
        let diff = (self.value - other.value).abs();
        if se == 0.0 {
            if diff == 0.0 { 0.0 } else { f64::INFINITY }
        } else {
            diff / se
        }
    }
}

/// Outer function of a composed test function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outer {
    Square,
    Sin,
    Exp,
}

/// Smooth test functions on the group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TestFunction {
    /// The coordinate with this index in `(x, t)` order.
    Coordinate { index: usize },
    /// `sum c prod coords^e` with one exponent per coordinate.
    Polynomial { terms: Vec<(f64, Vec<u32>)> },
    /// `exp(-lambda (|x|^4 + 16 |t|^2))` evaluated at `center^{-1} g`.
    GaussianBump { center: GroupPoint, lambda: f64 },
    Composed { outer: Outer, inner: Box<TestFunction> },
}

impl TestFunction {
    pub fn label(&self) -> &'static str {
        match self {
            TestFunction::Coordinate { .. } => "coordinate",
            TestFunction::Polynomial { .. } => "polynomial",
            TestFunction::GaussianBump { .. } => "gaussian-bump",
            TestFunction::Composed { .. } => "composed",
        }
    }

    pub fn eval(&self, spec: &GroupSpec, g: &GroupPoint) -> f64 {
        match self {
            TestFunction::Coordinate { index } => {
                let q = g.x.len();
                if *index < q { g.x[*index] } else { g.t.get(index - q).copied().unwrap_or(f64::NAN) }
            }
            TestFunction::Polynomial { terms } => {
                let c = g.coords();
                terms
                    .iter()
                    .map(|(coef, exps)| {
                        coef * c.iter().zip(exps).map(|(v, e)| v.powi(*e as i32)).product::<f64>()
                    })
                    .sum()
            }
            TestFunction::GaussianBump { center, lambda } => {
                let u = spec.mul_unchecked(&spec.inverse(center), g);
                let r2 = u.x.iter().map(|v| v * v).sum::<f64>();
                let t2 = u.t.iter().map(|v| v * v).sum::<f64>();
                (-lambda * (r2 * r2 + 16.0 * t2)).exp()
            }
            TestFunction::Composed { outer, inner } => {
                let v = inner.eval(spec, g);
                match outer {
                    Outer::Square => v * v,
                    Outer::Sin => v.sin(),
                    Outer::Exp => v.exp(),
                }
            }
        }
    }

    /// `E f(g (0, W))` with `W ~ N(0, 2h I_m)` in closed form where one exists.
    /// The vertical directions are central, so for a bump only the Gaussian
    /// factor in `t` is smoothed.
    pub fn vertical_heat(&self, spec: &GroupSpec, g: &GroupPoint, h: f64) -> Option<f64> {
        match self {
            TestFunction::Coordinate { .. } => Some(self.eval(spec, g)),
            TestFunction::GaussianBump { center, lambda } => {
                let u = spec.mul_unchecked(&spec.inverse(center), g);
                let r2 = u.x.iter().map(|v| v * v).sum::<f64>();
                let a = 16.0 * lambda;
                let c = 1.0 + 4.0 * a * h;
                let t_part: f64 = u.t.iter().map(|v| (-a * v * v / c).exp() / c.sqrt()).product();
                Some((-lambda * r2 * r2).exp() * t_part)
            }
            _ => None,
        }
    }

    fn check(&self, spec: &GroupSpec) -> Result<()> {
        match self {
            TestFunction::Coordinate { index } if *index >= spec.dim() => Err(Error::Input(format!(
                "coordinate index {index} out of range for dimension {}",
                spec.dim()
            ))),
            TestFunction::Polynomial { terms } if terms.iter().any(|(_, e)| e.len() != spec.dim()) => {
                Err(Error::Input("polynomial exponents must list every coordinate".into()))
            }
            TestFunction::GaussianBump { center, lambda } => {
                spec.check_point(center)?;
                if *lambda > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Input(format!("bump lambda must be positive, got {lambda}")))
                }
            }
            TestFunction::Composed { inner, .. } => inner.check(spec),
            _ => Ok(()),
        }
    }
}

/// The bump family: `lambda` cycles through `{0.5, 1, 2}` while centres walk
/// the lattice `x_i, t_j in {0, 1, -1}` (scaled by `1/2` in `t`).
pub fn bump_family(spec: &GroupSpec, count: usize) -> Vec<TestFunction> {
    let dim = spec.dim();
    let q = spec.q();
    let lambdas = [0.5, 1.0, 2.0];
    let digits = [0.0, 1.0, -1.0];
    (0..count)
        .map(|i| {
            let mut c = vec![0.0; dim];
            let mut k = i / lambdas.len();
            for (j, slot) in c.iter_mut().enumerate() {
                let v = digits[k % 3];
                *slot = if j < q { v } else { 0.5 * v };
                k /= 3;
            }
            TestFunction::GaussianBump {
                center: GroupPoint::from_coords(q, &c),
                lambda: lambdas[i % lambdas.len()],
            }
        })
        .collect()
}

/// Which gradient the quasi Bakry-Emery ratio uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gradient {
    /// Horizontal frame `X_1..X_q`.
    Horizontal,
    /// Horizontal frame plus the vertical coordinate fields.
    Riemannian,
}

impl Gradient {
    fn dim(self, spec: &GroupSpec) -> usize {
        match self {
            Gradient::Horizontal => spec.q(),
            Gradient::Riemannian => spec.dim(),
        }
    }
}

fn frame_step(spec: &GroupSpec, g: &GroupPoint, l: usize, eps: f64) -> GroupPoint {
    if l < spec.q() {
        spec.step_along(g, l, eps)
    } else {
        spec.step_vertical(g, l - spec.q(), eps)
    }
}

/// `|grad^k f|(g)` by central differences along the chosen frame.
pub fn gradient_norm(spec: &GroupSpec, f: &TestFunction, g: &GroupPoint, k: usize, grad: Gradient) -> f64 {
    let n = grad.dim(spec);
    match k {
        1 => {
            let eps = 1e-5;
            (0..n)
                .map(|l| {
                    let d = (f.eval(spec, &frame_step(spec, g, l, eps))
                        - f.eval(spec, &frame_step(spec, g, l, -eps)))
                        / (2.0 * eps);
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        }
        _ => {
            let eps = 1e-4;
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let v = mixed(spec, g, i, j, eps, |p| f.eval(spec, p));
                    acc += v * v;
                }
            }
            acc.sqrt()
        }
    }
}

/// `X_i X_j u` at `g` by the four-point stencil `g e_i(+-eps) e_j(+-eps)`.
fn mixed(spec: &GroupSpec, g: &GroupPoint, i: usize, j: usize, eps: f64, u: impl Fn(&GroupPoint) -> f64) -> f64 {
    let mut v = 0.0;
    for (a, b, w) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
        let p = frame_step(spec, &frame_step(spec, g, i, a * eps), j, b * eps);
        v += w * u(&p);
    }
    v / (4.0 * eps * eps)
}

fn draw_path<R: Rng + ?Sized>(spec: &GroupSpec, cfg: &DiffusionConfig, rng: &mut R) -> GroupPoint {
    let steps = cfg.steps();
    let sd = (2.0 * cfg.h / steps as f64).sqrt();
    let mut w = spec.identity();
    let mut inc = GroupPoint::identity(spec.q(), spec.m());
    for _ in 0..steps {
        for v in inc.x.iter_mut() {
            *v = sd * rng.sample::<f64, _>(StandardNormal);
        }
        w = spec.mul_unchecked(&w, &inc);
    }
    w
}

/// `W_h` for path `path_index`, reproducible from `(cfg.seed, path_index)`.
pub fn sample_diffusion(spec: &GroupSpec, cfg: &DiffusionConfig, path_index: u64) -> Result<GroupPoint> {
    cfg.validate()?;
    Ok(draw_path(spec, cfg, &mut sample_rng(cfg.seed, path_index)))
}

/// `W_h (0, V)` with `V ~ N(0, 2h I_m)` drawn after the horizontal steps of
/// the same stream, so the horizontal part equals [`sample_diffusion`].
pub fn sample_riemannian(spec: &GroupSpec, cfg: &DiffusionConfig, path_index: u64) -> Result<GroupPoint> {
    cfg.validate()?;
    let mut rng = sample_rng(cfg.seed, path_index);
    Ok(riemannian_from(spec, cfg, &mut rng))
}

fn riemannian_from<R: Rng + ?Sized>(spec: &GroupSpec, cfg: &DiffusionConfig, rng: &mut R) -> GroupPoint {
    let mut w = draw_path(spec, cfg, rng);
    let sd = (2.0 * cfg.h).sqrt();
    for v in w.t.iter_mut() {
        *v += sd * rng.sample::<f64, _>(StandardNormal);
    }
    w
}

/// Endpoints of all `cfg.n_paths` paths, in index order.
pub fn simulate(spec: &GroupSpec, cfg: &DiffusionConfig, flow: Gradient) -> Result<Vec<GroupPoint>> {
    cfg.validate()?;
    Ok(par_samples(cfg.seed, cfg.n_paths, |_, rng| match flow {
        Gradient::Horizontal => draw_path(spec, cfg, rng),
        Gradient::Riemannian => riemannian_from(spec, cfg, rng),
    }))
}

/// Sum in a fixed pairwise order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        v.iter().sum()
    } else {
        let (a, b) = v.split_at(v.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

/// Mean and standard error.
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = pairwise_sum(v) / n;
    let dev: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// `E f(g W)` over precomputed endpoints. Non-finite values are rejected;
/// more than 1% rejections is an error.
pub fn estimate_on(spec: &GroupSpec, f: &TestFunction, g: &GroupPoint, paths: &[GroupPoint]) -> Result<SemigroupEstimate> {
    let vals: Vec<f64> = paths.iter().map(|w| f.eval(spec, &spec.mul_unchecked(g, w))).collect();
    let good: Vec<f64> = vals.iter().copied().filter(|v| v.is_finite()).collect();
    let rejected = vals.len() - good.len();
    if rejected * 100 > vals.len() || good.is_empty() {
        return Err(Error::Scan(format!("{rejected} of {} path values were not finite", vals.len())));
    }
    let (value, stderr) = mean_stderr(&good);
    Ok(SemigroupEstimate {
        value,
        stderr,
        n_paths: good.len(),
        rejected,
    })
}

/// `e^{h Delta} f(g)`.
pub fn heat_semigroup(spec: &GroupSpec, f: &TestFunction, g: &GroupPoint, cfg: &DiffusionConfig) -> Result<SemigroupEstimate> {
    f.check(spec)?;
    spec.check_point(g)?;
    estimate_on(spec, f, g, &simulate(spec, cfg, Gradient::Horizontal)?)
}

/// `e^{h Delta_R} f(g)` with the vertical Gaussian appended.
pub fn riemannian_semigroup(
    spec: &GroupSpec,
    f: &TestFunction,
    g: &GroupPoint,
    cfg: &DiffusionConfig,
) -> Result<SemigroupEstimate> {
    f.check(spec)?;
    spec.check_point(g)?;
    estimate_on(spec, f, g, &simulate(spec, cfg, Gradient::Riemannian)?)
}

/// `|grad^k e^{h L} f|(g) / e^{h L}(|grad^k f|)(g)` with a 95% delta-method interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QbeRatio {
    pub k: usize,
    pub ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub numerator: f64,
    pub denominator: SemigroupEstimate,
    /// `|grad^k e^{h L} f|^2 / e^{h L}(|grad^k f|^2)`.
    pub ratio_p2: f64,
    pub n_paths: usize,
}

/// Quasi Bakry-Emery ratio over precomputed endpoints. The numerator
/// differences `e^{h L} f` at `g e_l(+-eps)` with the same paths at every
/// stencil point.
pub fn qbe_ratio_on(
    spec: &GroupSpec,
    f: &TestFunction,
    g: &GroupPoint,
    paths: &[GroupPoint],
    k: usize,
    grad: Gradient,
) -> Result<QbeRatio> {
    if !(k == 1 || k == 2) {
        return Err(Error::Input(format!("gradient order must be 1 or 2, got {k}")));
    }
    let n = grad.dim(spec);
    let comps = if k == 1 { n } else { n * n };
    let np = paths.len();
    // Per-path components of the numerator vector and the denominator.
    let mut cols = vec![Vec::with_capacity(np); comps];
    let mut den = Vec::with_capacity(np);
    let mut den_sq = Vec::with_capacity(np);
    let stencil: Vec<Vec<GroupPoint>> = if k == 1 {
        (0..n)
            .map(|l| vec![frame_step(spec, g, l, FD_STEP_1), frame_step(spec, g, l, -FD_STEP_1)])
            .collect()
    } else {
        let e = FD_STEP_2;
        let mut out = Vec::with_capacity(comps);
        for i in 0..n {
            for j in 0..n {
                out.push(
                    [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
                        .iter()
                        .map(|(a, b)| frame_step(spec, &frame_step(spec, g, i, a * e), j, b * e))
                        .collect(),
                );
            }
        }
        out
    };
    let mut rejected = 0;
    for w in paths {
        let gw = spec.mul_unchecked(g, w);
        let b = gradient_norm(spec, f, &gw, k, grad);
        let comp: Vec<f64> = stencil
            .iter()
            .map(|pts| {
                let v: Vec<f64> = pts.iter().map(|p| f.eval(spec, &spec.mul_unchecked(p, w))).collect();
                if k == 1 {
                    (v[0] - v[1]) / (2.0 * FD_STEP_1)
                } else {
                    (v[0] - v[1] - v[2] + v[3]) / (4.0 * FD_STEP_2 * FD_STEP_2)
                }
            })
            .collect();
        if !b.is_finite() || comp.iter().any(|c| !c.is_finite()) {
            rejected += 1;
            continue;
        }
        for (c, v) in cols.iter_mut().zip(comp) {
            c.push(v);
        }
        den.push(b);
        den_sq.push(b * b);
    }
    if rejected * 100 > np || den.len() < 2 {
        return Err(Error::Scan(format!("{rejected} of {np} paths gave non-finite values")));
    }
    let m = den.len() as f64;
    let means: Vec<f64> = cols.iter().map(|c| pairwise_sum(c) / m).collect();
    let (bbar, bse) = mean_stderr(&den);
    if bbar - Z95 * bse <= 0.0 {
        return Err(Error::UnresolvedRatio {
            point: g.clone(),
            low: bbar - Z95 * bse,
            high: bbar + Z95 * bse,
        });
    }
    let num = means.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ratio = num / bbar;
    // Delta method: R = |D| / B with gradient (D / (|D| B), -|D| / B^2).
    let mut grad_r: Vec<f64> = if num > 0.0 {
        means.iter().map(|d| d / (num * bbar)).collect()
    } else {
        vec![0.0; comps]
    };
    grad_r.push(-num / (bbar * bbar));
    let mut series: Vec<&Vec<f64>> = cols.iter().collect();
    series.push(&den);
    let centred: Vec<f64> = (0..den.len())
        .map(|i| {
            series
                .iter()
                .zip(&grad_r)
                .enumerate()
                .map(|(c, (s, gr))| {
                    let mean = if c < comps { means[c] } else { bbar };
                    gr * (s[i] - mean)
                })
                .sum()
        })
        .collect();
    let var = pairwise_sum(&centred.iter().map(|v| v * v).collect::<Vec<_>>()) / (m - 1.0);
    let half = Z95 * (var / m).sqrt();
    let (b2, _) = mean_stderr(&den_sq);
    Ok(QbeRatio {
        k,
        ratio,
        ci_low: (ratio - half).max(0.0),
        ci_high: ratio + half,
        numerator: num,
        denominator: SemigroupEstimate {
            value: bbar,
            stderr: bse,
            n_paths: den.len(),
            rejected,
        },
        ratio_p2: num * num / b2,
        n_paths: np,
    })
}

/// `|grad^k e^{h Delta} f|(g) / e^{h Delta}(|grad^k f|)(g)`.
pub fn qbe_ratio(spec: &GroupSpec, f: &TestFunction, g: &GroupPoint, cfg: &DiffusionConfig, k: usize) -> Result<QbeRatio> {
    f.check(spec)?;
    spec.check_point(g)?;
    qbe_ratio_on(spec, f, g, &simulate(spec, cfg, Gradient::Horizontal)?, k, Gradient::Horizontal)
}

/// The Riemannian analogue: full gradient and the flow with vertical noise.
pub fn riemannian_qbe_ratio(
    spec: &GroupSpec,
    f: &TestFunction,
    g: &GroupPoint,
    cfg: &DiffusionConfig,
    k: usize,
) -> Result<QbeRatio> {
    f.check(spec)?;
    spec.check_point(g)?;
    qbe_ratio_on(spec, f, g, &simulate(spec, cfg, Gradient::Riemannian)?, k, Gradient::Riemannian)
}

/// Base points `exp(eta)` with `|zeta| <= d_max`, so `d(g) <= d_max`.
pub fn base_points(spec: &GroupSpec, count: usize, d_max: f64, seed: u64) -> Result<Vec<GroupPoint>> {
    par_samples(seed, count, |_, rng| {
        let eta = covector(rng, spec, 0.0, d_max, 2.0 * PI * (1.0 - 1e-9));
        exp_map(spec, &eta)
    })
    .into_iter()
    .collect()
}

/// One row of a quasi Bakry-Emery scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QbeRow {
    pub k: usize,
    pub h: f64,
    pub function: usize,
    pub point: usize,
    pub d: f64,
    pub ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ratio_p2: f64,
    pub n_paths: usize,
    /// `false` when the denominator interval reaches zero; the ratio fields are NaN.
    pub resolved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QbeScan {
    pub group: String,
    pub gradient: Gradient,
    pub seed: u64,
    /// Empirical sup of the resolved ratios.
    pub sup_ratio: f64,
    pub max_ci_low: f64,
    pub sup_ratio_p2: f64,
    pub unresolved: usize,
    pub rows: Vec<QbeRow>,
}

impl QbeScan {
    pub const CSV_HEADER: &'static str = "group,k,h,function,point,d,ratio,ci_low,ci_high,n_paths,resolved,seed";

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                self.group,
                r.k,
                r.h,
                r.function,
                r.point,
                r.d,
                r.ratio,
                r.ci_low,
                r.ci_high,
                r.n_paths,
                r.resolved,
                self.seed
            )?;
        }
        Ok(())
    }
}

/// Ratios for every `(h, f, g)`; one path ensemble per `h` is shared by all
/// functions and points.
#[allow(clippy::too_many_arguments)]
pub fn qbe_scan(
    spec: &GroupSpec,
    functions: &[TestFunction],
    points: &[GroupPoint],
    hs: &[f64],
    k: usize,
    grad: Gradient,
    n_paths: usize,
    seed: u64,
) -> Result<QbeScan> {
    for f in functions {
        f.check(spec)?;
    }
    let dists: Vec<f64> = points
        .iter()
        .map(|g| crate::distance::cc_distance(spec, g).map(|r| r.distance))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (hi, &h) in hs.iter().enumerate() {
        let cfg = DiffusionConfig {
            h,
            n_paths,
            n_steps: (MIN_STEPS as f64 / h).ceil() as usize,
            seed: seed.wrapping_add(hi as u64),
        };
        let paths = simulate(spec, &cfg, grad)?;
        let jobs: Vec<(usize, usize)> = (0..functions.len())
            .flat_map(|fi| (0..points.len()).map(move |pi| (fi, pi)))
            .collect();
        let out = par_samples(seed, jobs.len(), |j, _| {
            let (fi, pi) = jobs[j];
            qbe_ratio_on(spec, &functions[fi], &points[pi], &paths, k, grad)
        });
        for ((fi, pi), r) in jobs.into_iter().zip(out) {
            let (ratio, ci_low, ci_high, ratio_p2, resolved) = match r {
                Ok(r) => (r.ratio, r.ci_low, r.ci_high, r.ratio_p2, true),
                Err(Error::UnresolvedRatio { .. }) => (f64::NAN, f64::NAN, f64::NAN, f64::NAN, false),
                Err(e) => return Err(e),
            };
            rows.push(QbeRow {
                k,
                h,
                function: fi,
                point: pi,
                d: dists[pi],
                ratio,
                ci_low,
                ci_high,
                ratio_p2,
                n_paths,
                resolved,
            });
        }
    }
    let fold = |f: fn(&QbeRow) -> f64| rows.iter().filter(|r| r.resolved).map(f).fold(0.0, f64::max);
    Ok(QbeScan {
        group: spec.name(),
        gradient: grad,
        seed,
        sup_ratio: fold(|r| r.ratio),
        max_ci_low: fold(|r| r.ci_low),
        sup_ratio_p2: fold(|r| r.ratio_p2),
        unresolved: rows.iter().filter(|r| !r.resolved).count(),
        rows,
    })
}

/// Joint Riemannian estimate against `e^{h Delta}` applied to the vertical
/// heat flow of `f` on an independent horizontal ensemble. The vertical flow
/// is exact for bumps and coordinates, Gauss-Hermite in `t` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommutationCheck {
    pub joint: SemigroupEstimate,
    pub nested: SemigroupEstimate,
    pub z_score: f64,
}

pub fn commutation_check(
    spec: &GroupSpec,
    f: &TestFunction,
    g: &GroupPoint,
    cfg: &DiffusionConfig,
) -> Result<CommutationCheck> {
    f.check(spec)?;
    spec.check_point(g)?;
    let joint = estimate_on(spec, f, g, &simulate(spec, cfg, Gradient::Riemannian)?)?;
    let other = DiffusionConfig {
        seed: cfg.seed ^ 0x9e37_79b9_7f4a_7c15,
        ..cfg.clone()
    };
    let paths = simulate(spec, &other, Gradient::Horizontal)?;
    let (nodes, weights) = hermite_rule(24);
    let m = spec.m();
    let sd = (2.0 * cfg.h).sqrt();
    let vertical = |p: &GroupPoint| -> f64 {
        // Tensor rule over m vertical coordinates.
        let mut total = 0.0;
        let count = nodes.len().pow(m as u32);
        for idx in 0..count {
            let mut k = idx;
            let mut wgt = 1.0;
            let mut shifted = p.clone();
            for tj in shifted.t.iter_mut() {
                let a = k % nodes.len();
                k /= nodes.len();
                *tj += sd * nodes[a];
                wgt *= weights[a];
            }
            total += wgt * f.eval(spec, &shifted);
        }
        total
    };
    let vals: Vec<f64> = paths
        .iter()
        .map(|w| {
            let p = spec.mul_unchecked(g, w);
            f.vertical_heat(spec, &p, cfg.h).unwrap_or_else(|| vertical(&p))
        })
        .collect();
    let (value, stderr) = mean_stderr(&vals);
    let nested = SemigroupEstimate {
        value,
        stderr,
        n_paths: vals.len(),
        rejected: 0,
    };
    Ok(CommutationCheck {
        z_score: joint.z_score(&nested),
        joint,
        nested,
    })
}

/// Probabilists' Gauss-Hermite rule: `E phi(Z) ~ sum w_i phi(x_i)`, `Z ~ N(0, 1)`.
pub fn hermite_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Golub-Welsch on the Jacobi matrix with off-diagonal sqrt(k).
    let jac = nalgebra::DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Variance of the per-path gradient estimator with shared paths across the
/// stencil against independent paths for each side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrnDiagnostic {
    pub var_common: f64,
    pub var_independent: f64,
    pub reduction: f64,
}

pub fn crn_diagnostic(spec: &GroupSpec, f: &TestFunction, g: &GroupPoint, cfg: &DiffusionConfig) -> Result<CrnDiagnostic> {
    f.check(spec)?;
    let paths = simulate(spec, cfg, Gradient::Horizontal)?;
    let n = paths.len();
    let plus = frame_step(spec, g, 0, FD_STEP_1);
    let minus = frame_step(spec, g, 0, -FD_STEP_1);
    let diff = |a: &GroupPoint, b: &GroupPoint| {
        (f.eval(spec, &spec.mul_unchecked(&plus, a)) - f.eval(spec, &spec.mul_unchecked(&minus, b))) / (2.0 * FD_STEP_1)
    };
    let common: Vec<f64> = paths.iter().map(|w| diff(w, w)).collect();
    let indep: Vec<f64> = (0..n).map(|i| diff(&paths[i], &paths[(i + n / 2) % n])).collect();
    let var = |v: &[f64]| {
        let (_, se) = mean_stderr(v);
        se * se * v.len() as f64
    };
    let var_common = var(&common);
    let var_independent = var(&indep);
    Ok(CrnDiagnostic {
        var_common,
        var_independent,
        reduction: var_independent / var_common,
    })
}

/// `e^{(h1+h2) Delta} f(g)` directly and by composing independent paths of
/// lengths `h1` and `h2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemigroupPropertyCheck {
    pub direct: SemigroupEstimate,
    pub composed: SemigroupEstimate,
    pub z_score: f64,
}

pub fn semigroup_property_check(
    spec: &GroupSpec,
    f: &TestFunction,
    g: &GroupPoint,
    h1: f64,
    h2: f64,
    n_paths: usize,
    seed: u64,
) -> Result<SemigroupPropertyCheck> {
    let mk = |h: f64, s: u64| DiffusionConfig {
        h,
        n_paths,
        n_steps: (MIN_STEPS as f64 / h.min(h1).min(h2)).ceil() as usize,
        seed: s,
    };
    let direct = heat_semigroup(spec, f, g, &mk(h1 + h2, seed))?;
    let a = simulate(spec, &mk(h1, seed.wrapping_add(1)), Gradient::Horizontal)?;
    let b = simulate(spec, &mk(h2, seed.wrapping_add(2)), Gradient::Horizontal)?;
    let joined: Vec<GroupPoint> = a.iter().zip(&b).map(|(x, y)| spec.mul_unchecked(x, y)).collect();
    let composed = estimate_on(spec, f, g, &joined)?;
    Ok(SemigroupPropertyCheck {
        z_score: direct.z_score(&composed),
        direct,
        composed,
    })
}
