//! Geometry and analysis on step-two Carnot groups: group law, exponential
//! map, Carnot-Caratheodory distance, heat kernels, measure-contraction
//! checks and Monte Carlo heat semigroups.

pub mod distance;
pub mod error;
pub mod geodesic;
pub mod curvature;
pub mod kernel;
pub mod group;
pub mod quadrature;
pub mod semigroup;
pub mod sampling;

pub use distance::{cc_distance, DistanceMethod, DistanceResult};
pub use error::{Error, Result};
pub use geodesic::{exp_map, exp_scaled, in_domain, jacobian_exp, Covector, GeodesicResult};
pub use group::{GroupKind, GroupPoint, GroupSpec};
pub use kernel::{EpsilonProvider, KernelModel};
pub use curvature::{RatioReport, ScanConfig};
pub use semigroup::{DiffusionConfig, Gradient, TestFunction};
