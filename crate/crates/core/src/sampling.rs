//! Reproducible sampling. Every sample draws from its own ChaCha stream keyed
//! by `(seed, index)`, so results do not depend on how work is scheduled.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::geodesic::Covector;
use crate::group::{GroupPoint, GroupSpec};

/// Independent generator for sample `index` under master `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `f(i, rng_i)` for `i in 0..n`, evaluated in parallel and returned in index order.
pub fn par_samples<T, F>(seed: u64, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut ChaCha8Rng) -> T + Sync + Send,
{
    (0..n)
        .into_par_iter()
        .map(|i| f(i, &mut sample_rng(seed, i as u64)))
        .collect()
}

pub fn unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|a| a / n).collect();
        }
    }
}

/// Uniform direction scaled to a radius uniform in `[lo, hi]`.
pub fn vector_with_norm_in<R: Rng + ?Sized>(rng: &mut R, dim: usize, lo: f64, hi: f64) -> Vec<f64> {
    let r = rng.random_range(lo..=hi);
    unit_vector(rng, dim).into_iter().map(|a| a * r).collect()
}

/// Point uniform in the box `|x_i| <= hx`, `|t_j| <= ht`.
pub fn point_in_box<R: Rng + ?Sized>(rng: &mut R, spec: &GroupSpec, hx: f64, ht: f64) -> GroupPoint {
    GroupPoint {
        x: (0..spec.q()).map(|_| rng.random_range(-hx..=hx)).collect(),
        t: (0..spec.m()).map(|_| rng.random_range(-ht..=ht)).collect(),
    }
}

/// Covector with `|zeta|` uniform in `[zeta_lo, zeta_hi]`, uniform
/// directions and `|tau|` uniform in `[0, tau_max)`.
pub fn covector<R: Rng + ?Sized>(
    rng: &mut R,
    spec: &GroupSpec,
    zeta_lo: f64,
    zeta_hi: f64,
    tau_max: f64,
) -> Covector {
    let zeta = vector_with_norm_in(rng, spec.q(), zeta_lo, zeta_hi);
    let tau = vector_with_norm_in(rng, spec.m(), 0.0, tau_max);
    Covector { zeta, tau }
}

/// Deterministic grid hugging the boundary `|tau| -> 2 pi`: `|tau|` runs
/// through `2 pi - 10^{-k/2}`, `k = 2..=6`, together with a few interior
/// values, for several `|zeta|` and directions.
pub fn boundary_grid(spec: &GroupSpec) -> Vec<Covector> {
    let mut taus = vec![0.5 * PI, PI, 1.5 * PI, 1.8 * PI];
    for k in 2..=6 {
        taus.push(2.0 * PI - 10f64.powf(-(k as f64) / 2.0));
    }
    let zetas = [0.2, 1.0, 5.0];
    let mut out = Vec::new();
    for (a, &tn) in taus.iter().enumerate() {
        for sign in [1.0, -1.0] {
            for (b, &zn) in zetas.iter().enumerate() {
                let mut zeta = vec![0.0; spec.q()];
                zeta[(a + b) % spec.q()] = zn;
                let mut tau = vec![0.0; spec.m()];
                tau[(a + b) % spec.m()] = sign * tn;
                out.push(Covector { zeta, tau });
            }
        }
    }
    out
}

/// The default s-grid: `0.05 k` for `k = 1..=20` and `2^{-k}` for `k = 1..=10`,
/// sorted and deduplicated.
pub fn default_s_grid() -> Vec<f64> {
    let mut s: Vec<f64> = (1..=20).map(|k| k as f64 / 20.0).collect();
    s.extend((1..=10).map(|k| 0.5f64.powi(k)));
    s.sort_by(f64::total_cmp);
    s.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: f64 = sample_rng(7, 3).random();
        let b: f64 = sample_rng(7, 3).random();
        let c: f64 = sample_rng(7, 4).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn s_grid_shape() {
        let s = default_s_grid();
        assert_eq!(s.len(), 28); // 0.5 and 0.25 appear in both lists
        assert_eq!(*s.last().unwrap(), 1.0);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn boundary_grid_stays_inside() {
        let spec = GroupSpec::heisenberg(1).unwrap();
        for eta in boundary_grid(&spec) {
            assert!(eta.tau_norm() < 2.0 * PI);
            assert!(eta.zeta_norm() > 0.0);
        }
    }
}
