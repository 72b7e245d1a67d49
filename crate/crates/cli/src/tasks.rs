//! Task runners. Each returns CSV text, assertion outcomes and statistics.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use carnot_core::curvature::{
    core_lemma_check, mcp_scan, n32_chain_check, sample_domain, weighted_mcp_scan, ChainConfig, CoreLemmaConfig,
    RatioReport, ScanConfig,
};
use carnot_core::distance::{ball_volume_estimate, sinc};
use carnot_core::kernel::{
    comparator_htype, heisenberg_total_mass, kernel_gradient_ratio_scan, EpsilonProvider, KernelModel,
};
use carnot_core::sampling::{default_s_grid, par_samples, point_in_box};
use carnot_core::semigroup::{base_points, bump_family, qbe_scan};
use carnot_core::{cc_distance, exp_map, Covector, GroupKind, GroupPoint, GroupSpec};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, KernelChoice, Task};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    #[serde(with = "nonfinite")]
    pub value: f64,
    #[serde(with = "nonfinite")]
    pub limit: f64,
}

/// JSON has no infinities or NaN; those are written as strings.
mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl Assertion {
    fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            passed: value <= limit,
            value,
            limit,
        }
    }

    fn at_least(name: &str, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            passed: value >= limit,
            value,
            limit,
        }
    }

    fn finite(name: &str, value: f64) -> Self {
        Self {
            name: name.into(),
            passed: value.is_finite(),
            value,
            limit: f64::INFINITY,
        }
    }

    fn positive(name: &str, value: f64) -> Self {
        Self {
            name: name.into(),
            passed: value > 0.0 && value.is_finite(),
            value,
            limit: 0.0,
        }
    }
}

pub struct Outcome {
    pub csv: String,
    pub assertions: Vec<Assertion>,
    pub stats: BTreeMap<String, Value>,
}

// Every field is filled by `ExperimentConfig::resolve`.
fn need<T: Clone>(v: &Option<T>) -> T {
    v.clone().expect("resolved config")
}

pub fn run(task: Task, cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let spec = need(&cfg.group).build()?;
    let seed = need(&cfg.seed);
    match task {
        Task::AlgebraCheck => algebra(&spec, cfg, seed),
        Task::ExpCheck => exp_check(&spec, cfg, seed),
        Task::DistanceCheck => distance(&spec, cfg, seed),
        Task::KernelCheck => kernel(&spec, cfg, seed),
        Task::McpScan => mcp(&spec, cfg, seed),
        Task::WeightedMcpScan => weighted(&spec, cfg, seed),
        Task::N32Chain => chain(&spec, cfg, seed),
        Task::CoreLemma => core_lemma(&spec, cfg, seed),
        Task::QbeScan => qbe(&spec, cfg, seed),
        Task::VolumeCheck => volume(&spec, cfg, seed),
    }
}

fn scan_config(cfg: &ExperimentConfig, seed: u64) -> ScanConfig {
    ScanConfig {
        n_samples: need(&cfg.n_samples),
        s_grid: cfg.s_grid.clone().unwrap_or_else(default_s_grid),
        zeta_min: need(&cfg.zeta_min),
        zeta_max: need(&cfg.zeta_max),
        boundary_grid: cfg.boundary_grid.unwrap_or(false),
        threshold: cfg.threshold.unwrap_or(0.0),
        seed,
        ..ScanConfig::default()
    }
}

fn ratio_outcome(report: &RatioReport, assertions: Vec<Assertion>) -> Result<Outcome, CliError> {
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(|e| CliError::Io(e.to_string()))?;
    let mut stats: BTreeMap<String, Value> = report.stats.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    stats.insert("inf_ratio".into(), json!(report.inf_ratio));
    stats.insert("violations".into(), json!(report.violations));
    stats.insert("n_samples".into(), json!(report.n_samples));
    stats.insert("argmin".into(), serde_json::to_value(&report.argmin).expect("serializable"));
    Ok(Outcome {
        csv: String::from_utf8(csv).expect("ascii csv"),
        assertions,
        stats,
    })
}

fn algebra(spec: &GroupSpec, cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let n = need(&cfg.n_samples);
    let rows = par_samples(seed, n, |_, rng| {
        let a = point_in_box(rng, spec, 3.0, 3.0);
        let b = point_in_box(rng, spec, 3.0, 3.0);
        let c = point_in_box(rng, spec, 3.0, 3.0);
        let r = rand::Rng::random_range(rng, 0.1..3.0);
        let ab = spec.multiply(&a, &b)?;
        let assoc = spec.multiply(&ab, &c)?.max_abs_diff(&spec.multiply(&a, &spec.multiply(&b, &c)?)?);
        let inverse = spec.multiply(&a, &spec.inverse(&a))?.max_abs_diff(&spec.identity());
        let dilation = spec
            .dilate(r, &ab)?
            .max_abs_diff(&spec.multiply(&spec.dilate(r, &a)?, &spec.dilate(r, &b)?)?);
        Ok::<_, carnot_core::Error>([assoc, inverse, dilation])
    });
    let mut csv = String::from("group,index,seed,associativity,inverse,dilation\n");
    let mut worst = [0.0f64; 3];
    for (i, r) in rows.into_iter().enumerate() {
        let r = r?;
        for (w, v) in worst.iter_mut().zip(r) {
            *w = w.max(v);
        }
        writeln!(csv, "{},{i},{seed},{},{},{}", spec.name(), r[0], r[1], r[2]).unwrap();
    }
    let tol = need(&cfg.tolerance);
    Ok(Outcome {
        csv,
        assertions: vec![
            Assertion::at_most("associativity", worst[0], tol),
            Assertion::at_most("inverse", worst[1], tol),
            Assertion::at_most("dilation_automorphism", worst[2], tol),
        ],
        stats: BTreeMap::from([("triples".into(), json!(n))]),
    })
}

fn exp_check(spec: &GroupSpec, cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let scan = ScanConfig {
        boundary_grid: false,
        ..scan_config(cfg, seed)
    };
    let (etas, skipped) = sample_domain(spec, &scan)?;
    let rows = par_samples(seed, etas.len(), |i, _| {
        let eta = &etas[i];
        let g = exp_map(spec, eta)?;
        let d = cc_distance(spec, &g).map(|r| r.distance).unwrap_or(f64::NAN);
        Ok::<_, carnot_core::Error>((eta.zeta_norm(), eta.tau_norm(), d))
    });
    let mut csv = String::from("group,index,seed,zeta_norm,tau_norm,distance,rel_error\n");
    let mut worst = 0.0f64;
    let mut unresolved = 0usize;
    for (i, r) in rows.into_iter().enumerate() {
        let (z, t, d) = r?;
        let err = (d - z).abs() / z;
        if d.is_nan() {
            unresolved += 1;
        } else {
            worst = worst.max(err);
        }
        writeln!(csv, "{},{i},{seed},{z},{t},{d},{err}", spec.name()).unwrap();
    }
    let mut assertions = vec![
        Assertion::at_most("round_trip_rel_error", worst, need(&cfg.tolerance)),
        Assertion::at_most("unresolved", unresolved as f64, 0.0),
    ];
    if let GroupKind::Heisenberg { n: 1 } = spec.kind() {
        let sinc_err = etas
            .iter()
            .map(|eta| {
                let th = 0.5 * eta.tau_norm();
                let x = exp_map(spec, eta).map(|g| g.x_norm()).unwrap_or(f64::NAN);
                (x - sinc(th) * eta.zeta_norm()).abs() / (sinc(th) * eta.zeta_norm())
            })
            .fold(0.0, f64::max);
        assertions.push(Assertion::at_most("horizontal_norm_identity", sinc_err, 1e-8));
    }
    Ok(Outcome {
        csv,
        assertions,
        stats: BTreeMap::from([
            ("max_rel_error".into(), json!(worst)),
            ("uncertified_draws".into(), json!(skipped)),
        ]),
    })
}

fn distance(spec: &GroupSpec, cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let n = need(&cfg.n_samples);
    let (hx, ht) = (need(&cfg.x_half), need(&cfg.t_half));
    let rows = par_samples(seed, n, |_, rng| {
        let g = point_in_box(rng, spec, hx, ht);
        let d = cc_distance(spec, &g).map(|r| r.distance).unwrap_or(f64::NAN);
        let d_inv = cc_distance(spec, &spec.inverse(&g)).map(|r| r.distance).unwrap_or(f64::NAN);
        (g, d, d_inv)
    });
    let mut csv = String::from("group,index,seed,x_norm,t_norm,distance,ratio\n");
    let (mut lo, mut hi, mut asym) = (f64::INFINITY, 0.0f64, 0.0f64);
    let mut skipped = 0usize;
    for (i, (g, d, d_inv)) in rows.iter().enumerate() {
        let ratio = d * d / spec.homogeneous_norm(g).powi(2);
        if d.is_nan() {
            skipped += 1;
        } else {
            lo = lo.min(ratio);
            hi = hi.max(ratio);
            if d_inv.is_finite() {
                asym = asym.max((d - d_inv).abs() / d.max(1e-300));
            }
        }
        writeln!(csv, "{},{i},{seed},{},{},{d},{ratio}", spec.name(), g.x_norm(), g.t_norm()).unwrap();
    }
    Ok(Outcome {
        csv,
        assertions: vec![
            Assertion::positive("c_low", lo),
            Assertion::finite("c_high", hi),
            Assertion::at_most("skip_fraction", skipped as f64 / n as f64, 0.05),
            Assertion::at_most("symmetry_rel_error", asym, 1e-6),
        ],
        stats: BTreeMap::from([
            ("c_low".into(), json!(lo)),
            ("c_high".into(), json!(hi)),
            ("skipped".into(), json!(skipped)),
        ]),
    })
}

fn kernel(spec: &GroupSpec, cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let Some((n, m)) = spec.kind().htype_dims() else {
        return Err(CliError::Config(format!(
            "kernel-check needs a Heisenberg or H-type group, got {}",
            spec.name()
        )));
    };
    let q = 2 * n;
    let model = KernelModel::oscillatory(spec)?;
    let tol = need(&cfg.tolerance);
    let d_max = need(&cfg.d_max);
    let mut assertions = Vec::new();
    let mut stats = BTreeMap::new();
    if m == 1 {
        let mass = heisenberg_total_mass(n, 12.0, 12.0, 16)?;
        assertions.push(Assertion::at_most("mass_error", (mass - 1.0).abs(), tol));
        stats.insert("mass".into(), json!(mass));
    }
    let mut csv = String::from("group,index,seed,d,theta,log_p,log_comparator,ratio\n");
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    let mut index = 0;
    let steps = (2.0 * d_max).ceil() as usize;
    for i in 1..=steps {
        for j in 0..12 {
            let d = d_max * i as f64 / steps as f64;
            let th = PI * (j as f64 + 0.5) / 12.5;
            let mut zeta = vec![0.0; q];
            zeta[0] = d;
            let mut tau = vec![0.0; m];
            tau[0] = 2.0 * th;
            let g = exp_map(spec, &Covector::new(zeta, tau))?;
            let lp = model.log_density(&g, 1.0)?;
            let lc = comparator_htype(n, m, &g)?.log_value;
            let ratio = (lp - lc).exp();
            lo = lo.min(ratio);
            hi = hi.max(ratio);
            writeln!(csv, "{},{index},{seed},{d},{th},{lp},{lc},{ratio}", spec.name()).unwrap();
            index += 1;
        }
    }
    let band = hi / lo;
    assertions.push(Assertion::finite("comparator_band_ratio", band));
    let grad = kernel_gradient_ratio_scan(&model, need(&cfg.n_samples), 6.0, false, seed)?;
    assertions.push(Assertion::finite("gradient_ratio_sup", grad.sup_k1));
    stats.insert("comparator_band_ratio".into(), json!(band));
    stats.insert("comparator_ratio_min".into(), json!(lo));
    stats.insert("comparator_ratio_max".into(), json!(hi));
    stats.insert("gradient_ratio_sup".into(), json!(grad.sup_k1));
    Ok(Outcome { csv, assertions, stats })
}

fn mcp(spec: &GroupSpec, cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let scan = scan_config(cfg, seed);
    let report = mcp_scan(spec, need(&cfg.n), &scan)?;
    let a = Assertion::at_least("inf_ratio", report.inf_ratio, scan.threshold);
    ratio_outcome(&report, vec![a])
}

fn weighted(spec: &GroupSpec, cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let model = match need(&cfg.kernel) {
        KernelChoice::Oscillatory => KernelModel::oscillatory(spec)?,
        KernelChoice::Comparator => KernelModel::comparator(spec, need(&cfg.epsilon).provider()?)?,
    };
    let report = weighted_mcp_scan(&model, need(&cfg.n), &scan_config(cfg, seed))?;
    let a = Assertion::positive("inf_ratio", report.inf_ratio);
    let mut out = ratio_outcome(&report, vec![a])?;
    out.stats.insert("epsilon_provider".into(), json!(model.epsilon_provider().label()));
    Ok(out)
}

fn chain(spec: &GroupSpec, cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    if spec.kind() != GroupKind::N32 {
        return Err(CliError::Config(format!("n32-chain needs group n32, got {}", spec.name())));
    }
    let scan = ScanConfig {
        boundary_grid: false,
        ..scan_config(cfg, seed)
    };
    let (etas, _) = sample_domain(spec, &scan)?;
    let pts = etas.iter().map(|e| exp_map(spec, e)).collect::<Result<Vec<GroupPoint>, _>>()?;
    let provider: EpsilonProvider = need(&cfg.epsilon).provider()?;
    let chain_cfg = ChainConfig {
        n0: need(&cfg.n0),
        s_grid: need(&cfg.s_grid),
        seed,
    };
    let report = n32_chain_check(&pts, &provider, &chain_cfg)?;
    let sup_a = report.stats["sup_A_over_eps2_d4"];
    let assertions = vec![
        Assertion::positive("inf_ratio", report.inf_ratio),
        Assertion::finite("sup_A_over_eps2_d4", sup_a),
    ];
    let mut out = ratio_outcome(&report, assertions)?;
    out.stats.insert("epsilon_provider".into(), json!(provider.label()));
    Ok(out)
}

fn core_lemma(spec: &GroupSpec, cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let model = KernelModel::oscillatory(spec)?;
    let scan = ScanConfig {
        boundary_grid: false,
        ..scan_config(cfg, seed)
    };
    let (etas, _) = sample_domain(spec, &scan)?;
    let pts = etas.iter().map(|e| exp_map(spec, e)).collect::<Result<Vec<GroupPoint>, _>>()?;
    let lemma = CoreLemmaConfig {
        a_param: need(&cfg.a_param),
        steps: need(&cfg.steps),
        seed,
    };
    let report = core_lemma_check(&model, &pts, &lemma)?;
    let assertions = vec![
        Assertion::finite("sup_K_over_jac", report.stats["sup_K_over_jac"]),
        Assertion::at_most("max_distance_mismatch", report.stats["max_distance_mismatch"], need(&cfg.tolerance)),
    ];
    ratio_outcome(&report, assertions)
}

fn qbe(spec: &GroupSpec, cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let functions = bump_family(spec, need(&cfg.n_functions));
    let points = base_points(spec, need(&cfg.n_points), need(&cfg.d_max), seed)?;
    let k = need(&cfg.k);
    let scan = qbe_scan(
        spec,
        &functions,
        &points,
        &need(&cfg.h),
        k,
        need(&cfg.gradient).into(),
        need(&cfg.n_paths),
        seed,
    )?;
    let mut csv = Vec::new();
    scan.write_csv(&mut csv).map_err(|e| CliError::Io(e.to_string()))?;
    let all_finite = scan.rows.iter().all(|r| r.ratio.is_finite() && r.ci_high.is_finite());
    Ok(Outcome {
        csv: String::from_utf8(csv).expect("ascii csv"),
        assertions: vec![
            Assertion::finite("sup_ratio", if all_finite { scan.sup_ratio } else { f64::INFINITY }),
            Assertion::at_most("max_ci_low", scan.max_ci_low, need(&cfg.ceiling)),
        ],
        stats: BTreeMap::from([
            ("sup_ratio".into(), json!(scan.sup_ratio)),
            ("sup_ratio_p2".into(), json!(scan.sup_ratio_p2)),
            ("max_ci_low".into(), json!(scan.max_ci_low)),
            ("ratios".into(), json!(scan.rows.len())),
        ]),
    })
}

fn volume(spec: &GroupSpec, cfg: &ExperimentConfig, seed: u64) -> Result<Outcome, CliError> {
    let q_hom = spec.homogeneous_dim() as i32;
    let radii = need(&cfg.radii);
    let mut csv = String::from("group,index,seed,r,value,stderr,scaled,hits,n_samples\n");
    let mut scaled = Vec::new();
    for (i, &r) in radii.iter().enumerate() {
        let v = ball_volume_estimate(spec, r, need(&cfg.n_samples), seed.wrapping_add(i as u64))?;
        let c = v.value / r.powi(q_hom);
        let se = v.stderr / r.powi(q_hom);
        writeln!(csv, "{},{i},{seed},{r},{},{},{c},{},{}", spec.name(), v.value, v.stderr, v.hits, v.n_samples).unwrap();
        scaled.push((c, se));
    }
    let mut worst = 0.0f64;
    for (a, &(ca, sa)) in scaled.iter().enumerate() {
        for &(cb, sb) in &scaled[a + 1..] {
            worst = worst.max((ca - cb).abs() / sa.hypot(sb));
        }
    }
    let weights: f64 = scaled.iter().map(|(_, s)| s.powi(-2)).sum();
    let pooled = scaled.iter().map(|(c, s)| c / (s * s)).sum::<f64>() / weights;
    Ok(Outcome {
        csv,
        assertions: vec![Assertion::at_most("max_pairwise_z", worst, need(&cfg.sigma))],
        stats: BTreeMap::from([
            ("unit_ball_volume".into(), json!(pooled)),
            ("unit_ball_volume_stderr".into(), json!(weights.sqrt().recip())),
        ]),
    })
}
