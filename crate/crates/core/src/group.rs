//! Step-two Carnot groups `R^q x R^m` with the law
//! `(x, t) . (x', t') = (x + x', t + t' + 1/2 <U x, x'>)`,
//! where `<U x, x'>_j = (U_j x) . x'` for skew-symmetric `U_j`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Skew-symmetry tolerance for user supplied structure matrices.
pub const CUSTOM_TOLERANCE: f64 = 1e-12;

/// Which family a group belongs to. Drives the choice of closed-form
/// reductions in the geodesic, distance and kernel modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    Heisenberg { n: usize },
    HType { q: usize, m: usize },
    N32,
    Custom,
}

impl GroupKind {
    /// `(n, m)` with `q = 2n` when every structure matrix is orthogonal and the
    /// family anticommutes, so that `Omega^2 = -|tau|^2 I`.
    pub fn htype_dims(&self) -> Option<(usize, usize)> {
        match *self {
            GroupKind::Heisenberg { n } => Some((n, 1)),
            GroupKind::HType { q, m } => Some((q / 2, m)),
            _ => None,
        }
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupKind::Heisenberg { n } => write!(f, "heisenberg({n})"),
            GroupKind::HType { q, m } => write!(f, "htype({q},{m})"),
            GroupKind::N32 => f.write_str("n32"),
            GroupKind::Custom => f.write_str("custom"),
        }
    }
}

impl FromStr for GroupKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace(' ', "");
        let args = |prefix: &str| -> Option<Vec<usize>> {
            let inner = s.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?;
            inner.split(',').map(|a| a.parse().ok()).collect()
        };
        if s == "n32" || s == "n3,2" {
            return Ok(GroupKind::N32);
        }
        if s == "custom" {
            return Ok(GroupKind::Custom);
        }
        if let Some(a) = args("heisenberg") {
            if let [n] = a[..] {
                return Ok(GroupKind::Heisenberg { n });
            }
        }
        if let Some(a) = args("htype") {
            if let [q, m] = a[..] {
                return Ok(GroupKind::HType { q, m });
            }
        }
        Err(Error::Input(format!("unknown group label `{s}`")))
    }
}

/// A point `g = (x, t)` of `R^q x R^m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPoint {
    pub x: Vec<f64>,
    pub t: Vec<f64>,
}

impl GroupPoint {
    pub fn new(x: Vec<f64>, t: Vec<f64>) -> Self {
        Self { x, t }
    }

    pub fn identity(q: usize, m: usize) -> Self {
        Self {
            x: vec![0.0; q],
            t: vec![0.0; m],
        }
    }

    pub fn x_norm(&self) -> f64 {
        norm(&self.x)
    }

    pub fn t_norm(&self) -> f64 {
        norm(&self.t)
    }

    pub fn is_identity(&self) -> bool {
        self.x.iter().chain(&self.t).all(|v| *v == 0.0)
    }

    /// Coordinates `(x, t)` concatenated.
    pub fn coords(&self) -> Vec<f64> {
        self.x.iter().chain(&self.t).copied().collect()
    }

    pub fn from_coords(q: usize, coords: &[f64]) -> Self {
        Self {
            x: coords[..q].to_vec(),
            t: coords[q..].to_vec(),
        }
    }

    /// Max-abs coordinate difference.
    pub fn max_abs_diff(&self, other: &GroupPoint) -> f64 {
        self.x
            .iter()
            .zip(&other.x)
            .chain(self.t.iter().zip(&other.t))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for GroupPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(x={:?}, t={:?})", self.x, self.t)
    }
}

/// A step-two Carnot group given by `m` linearly independent skew-symmetric
/// `q x q` matrices. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    q: usize,
    m: usize,
    u: Vec<DMatrix<f64>>,
    kind: GroupKind,
}

impl GroupSpec {
    /// `H^n`: block-diagonal `[[0, 1], [-1, 0]]` blocks, `q = 2n`, `m = 1`.
    pub fn heisenberg(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGroup("heisenberg(n) needs n >= 1".into()));
        }
        let q = 2 * n;
        let mut u = DMatrix::zeros(q, q);
        for b in 0..n {
            u[(2 * b, 2 * b + 1)] = 1.0;
            u[(2 * b + 1, 2 * b)] = -1.0;
        }
        Self::build(q, 1, vec![u], GroupKind::Heisenberg { n })
    }

    /// H-type group `H(q, m)`. `m = 1` is `H^{q/2}`; `m` in `{2, 3}` uses
    /// quaternionic blocks and needs `q` divisible by 4.
    pub fn htype(q: usize, m: usize) -> Result<Self> {
        if q == 0 || q % 2 != 0 || m == 0 {
            return Err(Error::InvalidGroup(format!("htype({q},{m}): q must be even and m >= 1")));
        }
        let u = if m == 1 {
            Self::heisenberg(q / 2)?.u
        } else {
            if m > 3 || q % 4 != 0 {
                return Err(Error::InvalidGroup(format!(
                    "htype({q},{m}): only m <= 3 with 4 | q is built in"
                )));
            }
            (0..m)
                .map(|j| {
                    let block = quaternion_block(j);
                    let mut mat = DMatrix::zeros(q, q);
                    for b in 0..q / 4 {
                        mat.view_mut((4 * b, 4 * b), (4, 4)).copy_from(&block);
                    }
                    mat
                })
                .collect()
        };
        Self::build(q, m, u, GroupKind::HType { q, m })
    }

    /// Free step-two group with three generators: `t + t' - 1/2 x cross x'`.
    pub fn n32() -> Result<Self> {
        let u = (0..3)
            .map(|j| DMatrix::from_fn(3, 3, |l, k| levi_civita(j, l, k)))
            .collect();
        Self::build(3, 3, u, GroupKind::N32)
    }

    /// Arbitrary structure matrices, validated at tolerance [`CUSTOM_TOLERANCE`].
    pub fn custom(u: Vec<DMatrix<f64>>) -> Result<Self> {
        let m = u.len();
        let q = u.first().map(|a| a.nrows()).unwrap_or(0);
        Self::build(q, m, u, GroupKind::Custom)
    }

    /// [`GroupSpec::custom`] from row-major nested vectors `u[j][row][col]`.
    pub fn from_rows(u: &[Vec<Vec<f64>>]) -> Result<Self> {
        let mats = u
            .iter()
            .enumerate()
            .map(|(j, rows)| {
                let q = rows.len();
                if rows.iter().any(|r| r.len() != q) {
                    return Err(Error::InvalidGroup(format!("U[{j}] is not square")));
                }
                Ok(DMatrix::from_fn(q, q, |r, c| rows[r][c]))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::custom(mats)
    }

    /// Built-in group from a label such as `heisenberg(1)`, `htype(4,2)` or `n32`.
    pub fn from_label(label: &str) -> Result<Self> {
        match label.parse::<GroupKind>()? {
            GroupKind::Heisenberg { n } => Self::heisenberg(n),
            GroupKind::HType { q, m } => Self::htype(q, m),
            GroupKind::N32 => Self::n32(),
            GroupKind::Custom => Err(Error::Input("`custom` needs explicit matrices".into())),
        }
    }

    fn build(q: usize, m: usize, u: Vec<DMatrix<f64>>, kind: GroupKind) -> Result<Self> {
        if q == 0 || m == 0 {
            return Err(Error::InvalidGroup("q and m must be positive".into()));
        }
        for (j, mat) in u.iter().enumerate() {
            if mat.nrows() != q || mat.ncols() != q {
                return Err(Error::InvalidGroup(format!(
                    "U[{j}] is {}x{}, expected {q}x{q}",
                    mat.nrows(),
                    mat.ncols()
                )));
            }
            if !mat.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidGroup(format!("U[{j}] has non-finite entries")));
            }
            let skew = (mat + mat.transpose()).amax();
            if skew > CUSTOM_TOLERANCE {
                return Err(Error::InvalidGroup(format!(
                    "U[{j}] is not skew-symmetric (max |U + U^T| = {skew:.3e})"
                )));
            }
        }
        let stack = DMatrix::from_fn(q * q, m, |r, j| u[j][(r / q, r % q)]);
        let rank = stack.clone().svd(false, false).rank(1e-10 * stack.amax().max(1.0));
        if rank != m {
            return Err(Error::InvalidGroup(format!(
                "structure matrices are linearly dependent (rank {rank} < {m})"
            )));
        }
        let spec = Self { q, m, u, kind };
        if let GroupKind::HType { .. } | GroupKind::Heisenberg { .. } = kind {
            let dev = spec.htype_deviation();
            if dev > CUSTOM_TOLERANCE {
                return Err(Error::InvalidGroup(format!("not H-type: deviation {dev:.3e}")));
            }
        }
        Ok(spec)
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Topological dimension `q + m`.
    pub fn dim(&self) -> usize {
        self.q + self.m
    }

    /// Homogeneous dimension `Q = q + 2m`.
    pub fn homogeneous_dim(&self) -> usize {
        self.q + 2 * self.m
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    pub fn name(&self) -> String {
        self.kind.to_string()
    }

    pub fn structure(&self) -> &[DMatrix<f64>] {
        &self.u
    }

    /// Largest entrywise violation of `U_i U_j + U_j U_i = -2 delta_ij I`.
    pub fn htype_deviation(&self) -> f64 {
        let id = DMatrix::<f64>::identity(self.q, self.q);
        let mut worst = 0.0f64;
        for i in 0..self.m {
            for j in i..self.m {
                let anti = &self.u[i] * &self.u[j] + &self.u[j] * &self.u[i];
                let target = if i == j { &id * -2.0 } else { DMatrix::zeros(self.q, self.q) };
                worst = worst.max((anti - target).amax());
            }
        }
        worst
    }

    /// `Omega = sum_j tau_j U_j`.
    pub fn omega(&self, tau: &[f64]) -> DMatrix<f64> {
        let mut om = DMatrix::zeros(self.q, self.q);
        for (uj, tj) in self.u.iter().zip(tau) {
            om += uj * *tj;
        }
        om
    }

    /// Operator norms `|U_j|_2`.
    pub fn structure_norms(&self) -> Vec<f64> {
        self.u
            .iter()
            .map(|a| a.clone().svd(false, false).singular_values.max())
            .collect()
    }

    pub fn identity(&self) -> GroupPoint {
        GroupPoint::identity(self.q, self.m)
    }

    pub fn check_point(&self, g: &GroupPoint) -> Result<()> {
        if g.x.len() != self.q {
            return Err(Error::Dimension {
                what: "horizontal coordinates",
                expected: self.q,
                got: g.x.len(),
            });
        }
        if g.t.len() != self.m {
            return Err(Error::Dimension {
                what: "vertical coordinates",
                expected: self.m,
                got: g.t.len(),
            });
        }
        Ok(())
    }

    /// `<U x, y>_j = (U_j x) . y` for every `j`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.u.iter().map(|uj| bilinear_one(uj, x, y)).collect()
    }

    pub fn multiply(&self, a: &GroupPoint, b: &GroupPoint) -> Result<GroupPoint> {
        self.check_point(a)?;
        self.check_point(b)?;
        Ok(self.mul_unchecked(a, b))
    }

    pub(crate) fn mul_unchecked(&self, a: &GroupPoint, b: &GroupPoint) -> GroupPoint {
        let x = a.x.iter().zip(&b.x).map(|(p, q)| p + q).collect();
        let t = self
            .u
            .iter()
            .enumerate()
            .map(|(j, uj)| a.t[j] + b.t[j] + 0.5 * bilinear_one(uj, &a.x, &b.x))
            .collect();
        GroupPoint { x, t }
    }

    /// `g^{-1} = (-x, -t)`, which holds because every `U_j` is skew.
    pub fn inverse(&self, g: &GroupPoint) -> GroupPoint {
        GroupPoint {
            x: g.x.iter().map(|v| -v).collect(),
            t: g.t.iter().map(|v| -v).collect(),
        }
    }

    /// `delta_r(x, t) = (r x, r^2 t)`.
    pub fn dilate(&self, r: f64, g: &GroupPoint) -> Result<GroupPoint> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::Input(format!("dilation factor must be positive, got {r}")));
        }
        Ok(GroupPoint {
            x: g.x.iter().map(|v| r * v).collect(),
            t: g.t.iter().map(|v| r * r * v).collect(),
        })
    }

    /// `(|x|^2 + |t|)^{1/2}`.
    pub fn homogeneous_norm(&self, g: &GroupPoint) -> f64 {
        (dot(&g.x, &g.x) + g.t_norm()).sqrt()
    }

    /// Left-invariant frame `X_1..X_q` at `g`, each as a vector in `R^{q+m}`.
    pub fn horizontal_frame(&self, g: &GroupPoint) -> Vec<Vec<f64>> {
        (0..self.q)
            .map(|l| {
                let mut v = vec![0.0; self.q + self.m];
                v[l] = 1.0;
                for (j, uj) in self.u.iter().enumerate() {
                    let row: f64 = (0..self.q).map(|k| uj[(l, k)] * g.x[k]).sum();
                    v[self.q + j] = 0.5 * row;
                }
                v
            })
            .collect()
    }

    /// The horizontal point `(v, 0)`.
    pub fn horizontal(&self, v: &[f64]) -> GroupPoint {
        GroupPoint {
            x: v.to_vec(),
            t: vec![0.0; self.m],
        }
    }

    /// `g . (eps e_l, 0)`: one step along the flow of `X_l`.
    pub fn step_along(&self, g: &GroupPoint, l: usize, eps: f64) -> GroupPoint {
        let mut v = vec![0.0; self.q];
        v[l] = eps;
        self.mul_unchecked(g, &self.horizontal(&v))
    }

    /// `g . (0, eps e_l)`: one step along `T_l`.
    pub fn step_vertical(&self, g: &GroupPoint, l: usize, eps: f64) -> GroupPoint {
        let mut out = g.clone();
        out.t[l] += eps;
        out
    }
}

fn bilinear_one(uj: &DMatrix<f64>, x: &[f64], y: &[f64]) -> f64 {
    let q = x.len();
    let mut acc = 0.0;
    for l in 0..q {
        if y[l] == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for k in 0..q {
            row += uj[(l, k)] * x[k];
        }
        acc += row * y[l];
    }
    acc
}

fn levi_civita(i: usize, j: usize, k: usize) -> f64 {
    match (i, j, k) {
        (0, 1, 2) | (1, 2, 0) | (2, 0, 1) => 1.0,
        (0, 2, 1) | (2, 1, 0) | (1, 0, 2) => -1.0,
        _ => 0.0,
    }
}

/// Negated left multiplication by `i`, `j`, `k` on the quaternions.
fn quaternion_block(j: usize) -> DMatrix<f64> {
    let rows: [[f64; 4]; 4] = match j {
        0 => [[0., 1., 0., 0.], [-1., 0., 0., 0.], [0., 0., 0., 1.], [0., 0., -1., 0.]],
        1 => [[0., 0., 1., 0.], [0., 0., 0., -1.], [-1., 0., 0., 0.], [0., 1., 0., 0.]],
        _ => [[0., 0., 0., 1.], [0., 0., 1., 0.], [0., -1., 0., 0.], [-1., 0., 0., 0.]],
    };
    DMatrix::from_fn(4, 4, |r, c| rows[r][c])
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupSpecRepr {
    q: usize,
    m: usize,
    #[serde(rename = "U")]
    u: Vec<Vec<Vec<f64>>>,
    name: String,
}

impl Serialize for GroupSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let u = self
            .u
            .iter()
            .map(|mat| (0..self.q).map(|r| mat.row(r).iter().copied().collect()).collect())
            .collect();
        GroupSpecRepr {
            q: self.q,
            m: self.m,
            u,
            name: self.name(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GroupSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = GroupSpecRepr::deserialize(d)?;
        GroupSpec::from_json_parts(repr).map_err(D::Error::custom)
    }
}

impl GroupSpec {
    fn from_json_parts(repr: GroupSpecRepr) -> Result<Self> {
        if repr.u.len() != repr.m {
            return Err(Error::InvalidGroup(format!(
                "m = {} but {} matrices given",
                repr.m,
                repr.u.len()
            )));
        }
        let mut mats = Vec::with_capacity(repr.m);
        for (j, rows) in repr.u.iter().enumerate() {
            if rows.len() != repr.q || rows.iter().any(|r| r.len() != repr.q) {
                return Err(Error::InvalidGroup(format!("U[{j}] is not {0}x{0}", repr.q)));
            }
            mats.push(DMatrix::from_fn(repr.q, repr.q, |r, c| rows[r][c]));
        }
        let kind: GroupKind = repr.name.parse()?;
        if kind == GroupKind::Custom {
            return Self::custom(mats);
        }
        let builtin = Self::from_label(&repr.name)?;
        if builtin.q != repr.q || builtin.m != repr.m {
            return Err(Error::InvalidGroup(format!("dimensions do not match `{}`", repr.name)));
        }
        let dev = builtin
            .u
            .iter()
            .zip(&mats)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        if dev > CUSTOM_TOLERANCE {
            // Same label, different matrices: keep the data, drop the label.
            return Self::custom(mats);
        }
        Ok(builtin)
    }
}
