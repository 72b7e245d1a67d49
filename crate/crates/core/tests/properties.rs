use std::f64::consts::PI;

use carnot_core::curvature::mcp_ratio;
use carnot_core::kernel::{log_kernel_htype, KernelModel};
use carnot_core::{cc_distance, exp_map, in_domain, jacobian_exp, Covector, GroupPoint, GroupSpec};
use proptest::prelude::*;

const LABELS: [&str; 5] = ["heisenberg(1)", "heisenberg(2)", "htype(4,2)", "htype(4,3)", "n32"];
const HTYPE: [&str; 4] = ["heisenberg(1)", "heisenberg(2)", "htype(4,2)", "htype(4,3)"];

fn spec(label: &str) -> GroupSpec {
    GroupSpec::from_label(label).unwrap()
}

fn point(spec: &GroupSpec, c: &[f64]) -> GroupPoint {
    GroupPoint::from_coords(spec.q(), &c[..spec.dim()])
}

fn coords() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, 9)
}

/// Covector with `|zeta|` in `[0.2, 4]` and `|tau| < 2 pi (1 - 1e-3)`.
fn covector(spec: &GroupSpec, dir: &[f64], zn: f64, tn: f64) -> Covector {
    let q = spec.q();
    let (z, t) = dir[..q + spec.m()].split_at(q);
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-9);
    let (nz, nt) = (norm(z), norm(t));
    Covector::new(
        z.iter().map(|a| a / nz * zn).collect(),
        t.iter().map(|a| a / nt * tn).collect(),
    )
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn group_law_is_associative(l in 0..5usize, a in coords(), b in coords(), c in coords()) {
        let s = spec(LABELS[l]);
        let (a, b, c) = (point(&s, &a), point(&s, &b), point(&s, &c));
        let lhs = s.multiply(&s.multiply(&a, &b).unwrap(), &c).unwrap();
        let rhs = s.multiply(&a, &s.multiply(&b, &c).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn inverse_is_two_sided(l in 0..5usize, a in coords()) {
        let s = spec(LABELS[l]);
        let a = point(&s, &a);
        let inv = s.inverse(&a);
        prop_assert!(s.multiply(&a, &inv).unwrap().max_abs_diff(&s.identity()) <= 1e-12);
        prop_assert!(s.multiply(&inv, &a).unwrap().max_abs_diff(&s.identity()) <= 1e-12);
    }

    #[test]
    fn dilations_are_automorphisms(l in 0..5usize, a in coords(), b in coords(), r in 0.05..4.0f64) {
        let s = spec(LABELS[l]);
        let (a, b) = (point(&s, &a), point(&s, &b));
        let lhs = s.dilate(r, &s.multiply(&a, &b).unwrap()).unwrap();
        let rhs = s.multiply(&s.dilate(r, &a).unwrap(), &s.dilate(r, &b).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-11);
    }

    #[test]
    fn frame_is_the_derivative_of_right_translation(l in 0..5usize, a in coords(), k in 0..6usize) {
        let s = spec(LABELS[l]);
        let g = point(&s, &a);
        let k = k % s.q();
        let eps = 1e-3;
        let fwd = s.step_along(&g, k, eps).coords();
        let back = s.step_along(&g, k, -eps).coords();
        let frame = &s.horizontal_frame(&g)[k];
        for (i, f) in frame.iter().enumerate() {
            prop_assert!(((fwd[i] - back[i]) / (2.0 * eps) - f).abs() <= 1e-9);
        }
    }

    #[test]
    fn exp_round_trip(l in 0..4usize, dir in prop::collection::vec(-1.0..1.0f64, 9), zn in 0.2..4.0f64, f in 0.0..0.999f64) {
        let s = spec(HTYPE[l]);
        let eta = covector(&s, &dir, zn, 2.0 * PI * f);
        prop_assert!(in_domain(&s, &eta).unwrap());
        let g = exp_map(&s, &eta).unwrap();
        prop_assert!(rel(cc_distance(&s, &g).unwrap().distance, zn) <= 1e-6);
        prop_assert!(jacobian_exp(&s, &eta).unwrap() > 0.0);
    }

    #[test]
    fn distance_is_symmetric_and_homogeneous(l in 0..4usize, a in coords(), r in 0.1..5.0f64) {
        let s = spec(HTYPE[l]);
        let g = point(&s, &a);
        let d = cc_distance(&s, &g).unwrap().distance;
        let d_inv = cc_distance(&s, &s.inverse(&g)).unwrap().distance;
        let d_dil = cc_distance(&s, &s.dilate(r, &g).unwrap()).unwrap().distance;
        prop_assert!(rel(d, d_inv) <= 1e-9);
        prop_assert!(rel(d_dil, r * d) <= 1e-9);
    }

    #[test]
    fn triangle_inequality(l in 0..4usize, a in coords(), b in coords()) {
        let s = spec(HTYPE[l]);
        let (a, b) = (point(&s, &a), point(&s, &b));
        let d = |g: &GroupPoint| cc_distance(&s, g).unwrap().distance;
        let ab = s.multiply(&a, &b).unwrap();
        prop_assert!(d(&ab) <= (d(&a) + d(&b)) * (1.0 + 1e-9));
    }

    #[test]
    fn mcp_ratio_is_one_at_unit_scale_and_monotone_in_n(
        l in 0..4usize,
        dir in prop::collection::vec(-1.0..1.0f64, 9),
        zn in 0.2..4.0f64,
        f in 0.0..0.99f64,
        sv in 0.01..1.0f64,
    ) {
        let s = spec(HTYPE[l]);
        let eta = covector(&s, &dir, zn, 2.0 * PI * f);
        let n = (s.q() + 2 * s.m()) as f64 + 3.0;
        prop_assert_eq!(mcp_ratio(&s, &eta, 1.0, n).unwrap(), 1.0);
        let low = mcp_ratio(&s, &eta, sv, n).unwrap();
        let high = mcp_ratio(&s, &eta, sv, n + 1.0).unwrap();
        prop_assert!(high >= low * (1.0 - 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn n32_distance_is_symmetric_and_homogeneous(dir in prop::collection::vec(-1.0..1.0f64, 6), zn in 0.3..3.0f64, f in 0.05..0.9f64, r in 0.2..3.0f64) {
        let s = spec("n32");
        let eta = covector(&s, &dir, zn, 2.0 * PI * f);
        prop_assume!(in_domain(&s, &eta).unwrap());
        let g = exp_map(&s, &eta).unwrap();
        let d_inv = cc_distance(&s, &s.inverse(&g)).unwrap().distance;
        let d_dil = cc_distance(&s, &s.dilate(r, &g).unwrap()).unwrap().distance;
        prop_assert!(rel(d_inv, zn) <= 1e-6);
        prop_assert!(rel(d_dil, r * zn) <= 1e-6);
    }

    #[test]
    fn heat_kernel_is_positive_symmetric_and_scales(l in 0..3usize, a in coords(), h in 0.1..4.0f64) {
        let s = spec(HTYPE[l]);
        let (n, m) = s.kind().htype_dims().unwrap();
        let g = point(&s, &a);
        let model = KernelModel::oscillatory(&s).unwrap();
        let lp = model.log_density(&g, h).unwrap();
        prop_assert!(lp.is_finite());
        prop_assert!(rel(lp.exp(), model.density(&s.inverse(&g), h).unwrap()) <= 1e-8);
        let q_hom = s.homogeneous_dim() as f64;
        let scaled = log_kernel_htype(n, m, &s.dilate(1.0 / h.sqrt(), &g).unwrap(), 1.0).unwrap() - 0.5 * q_hom * h.ln();
        prop_assert!((lp - scaled).abs() <= 1e-9);
    }
}
