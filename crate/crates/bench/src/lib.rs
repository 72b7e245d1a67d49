//! Fixtures shared by the benchmarks.

use carnot_core::curvature::{sample_domain, ScanConfig};
use carnot_core::{exp_map, Covector, GroupPoint, GroupSpec};

/// `count` certified covectors and their endpoints, fixed by `seed`.
pub fn fixture(spec: &GroupSpec, count: usize, seed: u64) -> (Vec<Covector>, Vec<GroupPoint>) {
    let cfg = ScanConfig {
        n_samples: count,
        boundary_grid: false,
        seed,
        ..ScanConfig::default()
    };
    let (etas, _) = sample_domain(spec, &cfg).expect("fixture sampling");
    let pts = etas.iter().map(|e| exp_map(spec, e).expect("fixture endpoint")).collect();
    (etas, pts)
}
