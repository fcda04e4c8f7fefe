//! Command implementations: each resolves a config, runs its pipeline, emits
//! outputs plus a manifest, and reports whether every certificate passed.

use std::path::Path;

use anyhow::{bail, Context};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use epsteinlab::cmc::{CmcProblem, DiskPatchProblem, MEAN_CURVATURE_CERT_TOL};
use epsteinlab::epstein::{
    epstein_map, export_csv, export_obj, fundamental_forms_fd, mean_curvature_formula,
};
use epsteinlab::field::{Chart, FD_MARGIN};
use epsteinlab::foliation::{
    critical_point, extremal_length, flat_intersection_number, geodesic_collinearity_residual,
    hm_section_torus, periods, teich_line, CycleStep, FlatSurface, FoliationSide, TorusFoliation,
    TorusPoint,
};
use epsteinlab::geom::{visual_metric_density, BoundaryPoint};
use epsteinlab::minimal::{
    beta_path_point, first_order_schwarzian, halfpipe_limit_holonomy, halfpipe_limit_immersion,
    HolonomyPath4,
};
use epsteinlab::schwarzian::ConformalMetric;
use epsteinlab::surface::{build_genus2_octagon, solve_helmholtz, HyperbolicMesh};
use nalgebra::{Matrix2, Matrix4};

use crate::manifest::{canonicalize, RunWriter, StageReport};

/// Validation failures in resolved configs map to process exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_value<T: Serialize>(cfg: &T) -> Value {
    canonicalize(serde_json::to_value(cfg).expect("config serializes"))
}

pub fn thread_cap() -> anyhow::Result<usize> {
    match std::env::var("EPSTEIN_LAB_THREADS") {
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
        Ok(raw) => {
            let n: usize = raw
                .parse()
                .map_err(|_| ConfigError(format!("EPSTEIN_LAB_THREADS must be a positive integer, got {raw:?}")))?;
            if n == 0 {
                bail!(ConfigError("EPSTEIN_LAB_THREADS must be at least 1".into()));
            }
            Ok(n)
        }
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsteinSurfaceConfig {
    /// "flat" or "poincare".
    pub metric: String,
    /// Conformal scale exponent t in e^{2t}·(base metric).
    pub scale: f64,
    pub half_width: f64,
    pub n: usize,
}

impl Default for EpsteinSurfaceConfig {
    fn default() -> Self {
        EpsteinSurfaceConfig { metric: "poincare".into(), scale: 0.5, half_width: 0.4, n: 121 }
    }
}

pub fn run_epstein_surface(cfg: &EpsteinSurfaceConfig, out: &Path) -> anyhow::Result<bool> {
    if cfg.n < 11 {
        bail!(ConfigError("field `n` must be at least 11".into()));
    }
    if !(cfg.half_width > 0.0) {
        bail!(ConfigError("field `half_width` must be positive".into()));
    }
    let chart = Chart::centered_square(Complex64::new(0.0, 0.0), cfg.half_width, cfg.n);
    let metric = match cfg.metric.as_str() {
        "flat" => {
            let mut m = ConformalMetric::flat(chart);
            for v in &mut m.eta {
                *v += cfg.scale;
            }
            m
        }
        "poincare" => {
            if cfg.half_width >= std::f64::consts::FRAC_1_SQRT_2 {
                bail!(ConfigError("field `half_width` must keep the chart inside the unit disk".into()));
            }
            ConformalMetric::scaled_poincare_disk(chart, cfg.scale)
        }
        other => bail!(ConfigError(format!("field `metric` must be flat|poincare, got {other:?}"))),
    };
    let mut writer = RunWriter::new(out)?;
    let surface = epstein_map(&metric)?;
    let data = fundamental_forms_fd(&surface)?;
    let h_formula = mean_curvature_formula(&metric, None)?;
    let mut defining = 0.0f64;
    let mut fd_vs_formula = 0.0f64;
    for (i, j, k) in chart.interior(2 * FD_MARGIN + 1) {
        let z = chart.point(i, j);
        let density = visual_metric_density(&surface.points[k], BoundaryPoint::Finite(z))?;
        defining = defining.max((density.ln() - metric.eta[k]).abs());
        if data.valid[k] {
            fd_vs_formula = fd_vs_formula.max((data.mean_curvature(k) - h_formula.data[k]).abs());
        }
    }
    let mut obj = Vec::new();
    export_obj(&mut obj, &surface)?;
    writer.emit("surface.obj", &obj)?;
    let mut csv = Vec::new();
    export_csv(&mut csv, &surface, &data)?;
    writer.emit("surface.csv", &csv)?;
    let stages = vec![
        StageReport::new("epstein-map")
            .num("defining_property_residual", defining)
            .metric("immersed", json!(surface.immersed))
            .check(surface.immersed && defining < 1e-5),
        StageReport::new("fd-oracle")
            .num("max_mean_curvature_disagreement", fd_vs_formula)
            .check(fd_vs_formula < 1e-2),
    ];
    writer.finish("epstein-surface", 0, config_value(cfg), stages)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmcFoliateConfig {
    pub backend: String,
    pub phi_scale: f64,
    pub h_lo: f64,
    pub h_hi: f64,
    pub steps: usize,
    pub tol: f64,
    pub seed: u64,
    /// Mesh backend refinement level.
    pub subdiv: u32,
    /// Disk backend grid.
    pub n_sym: u32,
    pub ntheta: usize,
    pub nxi: usize,
    pub rho_inner: f64,
    pub rho_outer: f64,
}

impl Default for CmcFoliateConfig {
    fn default() -> Self {
        CmcFoliateConfig {
            backend: "homogeneous".into(),
            phi_scale: 0.0,
            h_lo: -0.9,
            h_hi: 0.9,
            steps: 19,
            tol: 1e-9,
            seed: 1,
            subdiv: 2,
            n_sym: 8,
            ntheta: 96,
            nxi: 44,
            rho_inner: 0.35,
            rho_outer: 0.9,
        }
    }
}

/// Quotient-supported bump profile used for the mesh backend's φ-norm field.
fn mesh_norm_field(mesh: &HyperbolicMesh, phi_scale: f64) -> Vec<f64> {
    let p0 = 0.25 * phi_scale * phi_scale;
    mesh.positions
        .as_ref()
        .expect("built meshes carry positions")
        .iter()
        .map(|z| {
            let r = z.norm();
            if r >= 0.62 {
                0.0
            } else {
                let x = r / 0.62;
                p0 * (1.0 - x * x).powi(3)
            }
        })
        .collect()
}

pub fn run_cmc_foliate(cfg: &CmcFoliateConfig, out: &Path) -> anyhow::Result<bool> {
    if !(cfg.tol > 0.0) {
        bail!(ConfigError("field `tol` must be positive".into()));
    }
    if cfg.steps == 0 {
        bail!(ConfigError("field `steps` must be at least 1".into()));
    }
    if !(-1.0 < cfg.h_lo && cfg.h_lo <= cfg.h_hi && cfg.h_hi < 1.0) {
        bail!(ConfigError(
            "fields `h_lo`/`h_hi` must satisfy -1 < h_lo <= h_hi < 1".into()
        ));
    }
    if cfg.phi_scale < 0.0 {
        bail!(ConfigError("field `phi_scale` must be nonnegative".into()));
    }
    let problem = match cfg.backend.as_str() {
        "homogeneous" => CmcProblem::homogeneous(0.25 * cfg.phi_scale * cfg.phi_scale)?,
        "mesh" => {
            let mesh = build_genus2_octagon(cfg.subdiv)?;
            let w0 = mesh_norm_field(&mesh, cfg.phi_scale);
            CmcProblem::mesh(mesh, w0)?
        }
        "disk" => CmcProblem::disk(DiskPatchProblem::new(
            cfg.n_sym,
            cfg.phi_scale,
            cfg.ntheta,
            cfg.nxi,
            cfg.rho_inner,
            cfg.rho_outer,
        )?),
        other => bail!(ConfigError(format!(
            "field `backend` must be homogeneous|mesh|disk, got {other:?}"
        ))),
    };
    let mut writer = RunWriter::new(out)?;
    let family = problem.continuation(cfg.h_lo, cfg.h_hi, cfg.steps, cfg.tol)?;
    let max_residual = family
        .solutions
        .iter()
        .map(|s| s.residual_norm)
        .fold(0.0, f64::max);
    let mut stages = vec![StageReport::new("continuation")
        .num("max_newton_residual", max_residual)
        .metric("steps", json!(family.solutions.len()))
        .check(max_residual < cfg.tol)];

    let mut csv = String::from("h,residual,newton_iters,principal_min,principal_max,separation_to_next\n");
    if matches!(problem, CmcProblem::Disk(_)) {
        let certified = problem.assemble_foliation(family, MEAN_CURVATURE_CERT_TOL, cfg.seed);
        match certified {
            Ok(family) => {
                let cert = family.certificate.clone().expect("certificate attached");
                for (k, sol) in family.solutions.iter().enumerate() {
                    let leaf_cert = &cert.leaves[k];
                    let sep = cert
                        .separations
                        .get(k)
                        .map(|s| format!("{s}"))
                        .unwrap_or_default();
                    csv.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        sol.h,
                        sol.residual_norm,
                        sol.newton_iters,
                        leaf_cert.principal_min,
                        leaf_cert.principal_max,
                        sep
                    ));
                }
                for (k, leaf) in family.leaves.iter().enumerate() {
                    if let Some(leaf) = leaf {
                        let mut obj = Vec::new();
                        export_obj(&mut obj, leaf)?;
                        writer.emit(&format!("leaf_{k:02}.obj"), &obj)?;
                    }
                }
                let min_sep = cert.separations.iter().copied().fold(f64::INFINITY, f64::min);
                let worst_mc = cert
                    .leaves
                    .iter()
                    .map(|l| l.max_mean_curvature_error)
                    .fold(0.0, f64::max);
                stages.push(
                    StageReport::new("foliation-certificate")
                        .num("min_separation", min_sep)
                        .num("max_mean_curvature_error", worst_mc)
                        .num(
                            "principal_min",
                            cert.leaves.iter().map(|l| l.principal_min).fold(f64::INFINITY, f64::min),
                        )
                        .num(
                            "principal_max",
                            cert.leaves
                                .iter()
                                .map(|l| l.principal_max)
                                .fold(f64::NEG_INFINITY, f64::max),
                        )
                        .check(cert.certified),
                );
            }
            Err(err) => {
                stages.push(
                    StageReport::new("foliation-certificate")
                        .metric("failure", json!(err.to_string()))
                        .check(false),
                );
            }
        }
    } else {
        for sol in &family.solutions {
            csv.push_str(&format!(
                "{},{},{},,,\n",
                sol.h, sol.residual_norm, sol.newton_iters
            ));
        }
    }
    writer.emit("leaves.csv", csv.as_bytes())?;
    writer.finish("cmc-foliate", cfg.seed, config_value(cfg), stages)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinimalPathConfig {
    pub detq_scale: f64,
    pub s_list: Vec<f64>,
    pub subdiv: u32,
    pub tol: f64,
}

impl Default for MinimalPathConfig {
    fn default() -> Self {
        MinimalPathConfig {
            detq_scale: 1.0,
            s_list: vec![1e-2, 5e-3, 2.5e-3],
            subdiv: 2,
            tol: 1e-12,
        }
    }
}

fn cli_frame_field(mesh: &HyperbolicMesh, scale: f64) -> Vec<Matrix2<f64>> {
    mesh.positions
        .as_ref()
        .expect("built meshes carry positions")
        .iter()
        .map(|z| {
            let r = z.norm();
            if r >= 0.62 {
                Matrix2::zeros()
            } else {
                let x = r / 0.62;
                let bump = (1.0 - x * x).powi(3);
                let a = scale * bump * (1.0 + 0.4 * (2.0 * z.arg()).cos());
                let b = scale * bump * 0.5 * (3.0 * z.arg()).sin();
                Matrix2::new(a, b, b, -a)
            }
        })
        .collect()
}

pub fn run_minimal_path(cfg: &MinimalPathConfig, out: &Path) -> anyhow::Result<bool> {
    if cfg.s_list.len() < 3 {
        bail!(ConfigError("field `s_list` needs at least three values".into()));
    }
    if cfg.s_list.iter().any(|s| *s <= 0.0) {
        bail!(ConfigError("field `s_list` must be positive".into()));
    }
    if !(cfg.tol > 0.0) {
        bail!(ConfigError("field `tol` must be positive".into()));
    }
    let mesh = build_genus2_octagon(cfg.subdiv)?;
    let field = cli_frame_field(&mesh, cfg.detq_scale);
    let mut writer = RunWriter::new(out)?;
    let mut csv = String::from("s,u_sup,kstar_min,kstar_max,gauss_residual,newton_iters\n");
    let mut path = Vec::new();
    let mut worst_res = 0.0f64;
    for &s in &cfg.s_list {
        let point = beta_path_point(&mesh, &field, s, cfg.tol)?;
        let forms = epsteinlab::minimal::forms_at_infinity(&point.data, epsteinlab::minimal::End::Positive)?;
        let u_sup = point.u.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let kmin = forms.kstar.iter().cloned().fold(f64::INFINITY, f64::min);
        let kmax = forms.kstar.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        worst_res = worst_res.max(point.gauss_residual);
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s, u_sup, kmin, kmax, point.gauss_residual, point.newton_iters
        ));
        path.push(point);
    }
    writer.emit("path.csv", csv.as_bytes())?;
    let report = first_order_schwarzian(&path)?;
    let limit = halfpipe_limit_immersion(&path)?;
    let scale = field.iter().map(|m| m.norm()).fold(0.0, f64::max).max(1e-300);
    let mut dii_err = 0.0f64;
    let mut ii_exact = 0.0f64;
    for k in 0..field.len() {
        dii_err = dii_err.max((report.d_iistar_traceless[k] + field[k]).norm());
        ii_exact = ii_exact.max((limit.ii_over_s[k] - field[k]).norm());
    }
    let extrapolation = canonicalize(json!({
        "u_fit_exponent": report.u_fit_exponent,
        "kstar_fit_exponent": report.kstar_fit_exponent,
        "d_kstar_sup": report.d_kstar_sup,
        "d_iistar0_vs_minus_field_rel": dii_err / scale,
        "ii_over_s_exactness": ii_exact,
        "i_fit_exponent": limit.i_fit_exponent,
    }));
    writer.emit(
        "extrapolation.json",
        (serde_json::to_string_pretty(&extrapolation)? + "\n").as_bytes(),
    )?;
    let stages = vec![
        StageReport::new("gauss-path")
            .num("max_gauss_residual", worst_res)
            .check(worst_res < cfg.tol),
        StageReport::new("first-order")
            .num("u_fit_exponent", report.u_fit_exponent)
            .num("kstar_fit_exponent", report.kstar_fit_exponent)
            .num("d_iistar0_rel_error", dii_err / scale)
            .check(report.u_fit_exponent >= 1.9 && report.kstar_fit_exponent >= 1.9 && dii_err <= 0.05 * scale),
        StageReport::new("halfpipe-immersion")
            .num("ii_over_s_exactness", ii_exact)
            .num("i_fit_exponent", limit.i_fit_exponent)
            .check(ii_exact < 1e-10 && limit.i_fit_exponent >= 1.9),
    ];
    writer.finish("minimal-path", 0, config_value(cfg), stages)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HalfpipeLimitConfig {
    /// Path to a JSON file {"ts": [...], "generators": [[[16 numbers]...]]};
    /// absent means the built-in demo path.
    pub input: Option<String>,
}

#[derive(Deserialize)]
struct HolonomyFile {
    ts: Vec<f64>,
    generators: Vec<Vec<[f64; 16]>>,
}

fn demo_holonomy_path() -> HolonomyPath4 {
    let m: f64 = 0.8;
    let a0 = nalgebra::Matrix3::new(m.cosh(), m.sinh(), 0.0, m.sinh(), m.cosh(), 0.0, 0.0, 0.0, 1.0);
    let w0 = [0.3, -0.2, 0.15];
    let v0 = [0.5, 0.1, -0.4];
    let ts: Vec<f64> = (0..6).map(|k| 0.2 / 2f64.powi(k)).collect();
    let gen = ts
        .iter()
        .map(|&t| {
            let mut mm = Matrix4::identity();
            for r in 0..3 {
                for c in 0..3 {
                    mm[(r, c)] = a0[(r, c)];
                }
                mm[(r, 3)] = t * w0[r];
                mm[(3, r)] = t * v0[r];
            }
            mm
        })
        .collect();
    HolonomyPath4 { ts, generators: vec![gen] }
}

pub fn run_halfpipe_limit(cfg: &HalfpipeLimitConfig, out: &Path) -> anyhow::Result<bool> {
    let path = match &cfg.input {
        None => demo_holonomy_path(),
        Some(file) => {
            let raw = std::fs::read_to_string(file)
                .with_context(|| format!("reading holonomy file {file}"))?;
            let parsed: HolonomyFile = serde_json::from_str(&raw)
                .map_err(|e| ConfigError(format!("holonomy file: {e}")))?;
            let generators = parsed
                .generators
                .iter()
                .map(|per_t| {
                    per_t
                        .iter()
                        .map(|flat| Matrix4::from_row_slice(flat))
                        .collect::<Vec<_>>()
                })
                .collect();
            HolonomyPath4 { ts: parsed.ts, generators }
        }
    };
    let mut writer = RunWriter::new(out)?;
    let limit = halfpipe_limit_holonomy(&path)?;
    let limits_json: Vec<Value> = limit
        .limits
        .iter()
        .map(|m| {
            let rows: Vec<Vec<f64>> = (0..4)
                .map(|r| (0..4).map(|c| m[(r, c)]).collect())
                .collect();
            json!(rows)
        })
        .collect();
    let body = canonicalize(json!({
        "limits": limits_json,
        "extrapolation_error": limit.extrapolation_error,
        "block_residual": limit.block_residual,
    }));
    writer.emit(
        "limits.json",
        (serde_json::to_string_pretty(&body)? + "\n").as_bytes(),
    )?;
    let stages = vec![StageReport::new("halfpipe-limit")
        .num("extrapolation_error", limit.extrapolation_error)
        .num("block_residual", limit.block_residual)
        .check(limit.block_residual < 1e-6)];
    writer.finish("halfpipe-limit", 0, config_value(cfg), stages)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorusPairConfig {
    pub f_class: [i64; 2],
    pub f_weight: f64,
    pub g_class: [i64; 2],
    pub g_weight: f64,
}

impl Default for TorusPairConfig {
    fn default() -> Self {
        TorusPairConfig { f_class: [1, 0], f_weight: 1.0, g_class: [0, 1], g_weight: 1.0 }
    }
}

fn pair_from(cfg: &TorusPairConfig) -> anyhow::Result<(TorusFoliation, TorusFoliation)> {
    let f = TorusFoliation::new(cfg.f_class[0], cfg.f_class[1], cfg.f_weight)
        .map_err(|e| ConfigError(format!("field `F`: {e}")))?;
    let g = TorusFoliation::new(cfg.g_class[0], cfg.g_class[1], cfg.g_weight)
        .map_err(|e| ConfigError(format!("field `G`: {e}")))?;
    Ok((f, g))
}

pub fn run_torus_critical(cfg: &TorusPairConfig, out: &Path) -> anyhow::Result<bool> {
    let (f, g) = pair_from(cfg)?;
    let mut writer = RunWriter::new(out)?;
    let cp = critical_point(&f, &g)?;
    let ext_f = extremal_length(&cp.point, &f);
    let ext_g = extremal_length(&cp.point, &g);
    let qf = hm_section_torus(&cp.point, &f);
    let body = canonicalize(json!({
        "tau": [cp.point.tau.re, cp.point.tau.im],
        "certificate": cp.certificate,
        "iterations": cp.iterations,
        "ext_f": ext_f,
        "ext_g": ext_g,
        "q_f": [qf.re, qf.im],
    }));
    writer.emit(
        "critical.json",
        (serde_json::to_string_pretty(&body)? + "\n").as_bytes(),
    )?;
    let csv = format!(
        "tau_re,tau_im,certificate,ext_f,ext_g\n{},{},{},{},{}\n",
        cp.point.tau.re, cp.point.tau.im, cp.certificate, ext_f, ext_g
    );
    writer.emit("critical.csv", csv.as_bytes())?;
    let stages = vec![StageReport::new("critical-point")
        .num("certificate", cp.certificate)
        .num("ext_gap", (ext_f - ext_g).abs())
        .check(cp.certificate < 1e-10)];
    writer.finish("torus-critical", 0, config_value(cfg), stages)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorusLineConfig {
    #[serde(flatten)]
    pub pair: TorusPairConfig,
    pub t_grid: Vec<f64>,
}

impl Default for TorusLineConfig {
    fn default() -> Self {
        TorusLineConfig {
            pair: TorusPairConfig::default(),
            t_grid: (0..9).map(|k| 0.4 + 0.2 * k as f64).collect(),
        }
    }
}

pub fn run_torus_line(cfg: &TorusLineConfig, out: &Path) -> anyhow::Result<bool> {
    if cfg.t_grid.is_empty() || cfg.t_grid.iter().any(|t| *t <= 0.0) {
        bail!(ConfigError("field `t_grid` must be non-empty and positive".into()));
    }
    let (f, g) = pair_from(&cfg.pair)?;
    let mut writer = RunWriter::new(out)?;
    let pts = teich_line(&f, &g, &cfg.t_grid)?;
    let residual = geodesic_collinearity_residual(&pts);
    let mut csv = String::from("t,tau_re,tau_im\n");
    for (t, p) in cfg.t_grid.iter().zip(&pts) {
        csv.push_str(&format!("{},{},{}\n", t, p.tau.re, p.tau.im));
    }
    writer.emit("line.csv", csv.as_bytes())?;
    let stages = vec![StageReport::new("teichmueller-line")
        .num("collinearity_residual", residual)
        .metric("points", json!(pts.len()))
        .check(residual < 1e-6)];
    writer.finish("torus-line", 0, config_value(cfg), stages)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatPeriodsConfig {
    pub surface: String,
    pub cycles: String,
}

#[derive(Deserialize)]
struct FlatSurfaceFile {
    polygons: Vec<Vec<[f64; 2]>>,
    pairings: Vec<[[usize; 2]; 2]>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CyclesFile {
    Bare(Vec<Vec<[i64; 3]>>),
    Wrapped { cycles: Vec<Vec<[i64; 3]>> },
}

pub fn run_flat_periods(cfg: &FlatPeriodsConfig, out: &Path) -> anyhow::Result<bool> {
    let raw = std::fs::read_to_string(&cfg.surface)
        .with_context(|| format!("reading surface file {}", cfg.surface))?;
    let sf: FlatSurfaceFile =
        serde_json::from_str(&raw).map_err(|e| ConfigError(format!("surface file: {e}")))?;
    let surface = FlatSurface {
        polygons: sf
            .polygons
            .iter()
            .map(|poly| poly.iter().map(|p| Complex64::new(p[0], p[1])).collect())
            .collect(),
        pairings: sf
            .pairings
            .iter()
            .map(|p| ((p[0][0], p[0][1]), (p[1][0], p[1][1])))
            .collect(),
    };
    let raw_cycles = std::fs::read_to_string(&cfg.cycles)
        .with_context(|| format!("reading cycles file {}", cfg.cycles))?;
    let parsed: CyclesFile =
        serde_json::from_str(&raw_cycles).map_err(|e| ConfigError(format!("cycles file: {e}")))?;
    let cycle_list = match parsed {
        CyclesFile::Bare(c) => c,
        CyclesFile::Wrapped { cycles } => cycles,
    };
    let cycles: Vec<Vec<CycleStep>> = cycle_list
        .iter()
        .map(|c| c.iter().map(|s| (s[0] as usize, s[1] as usize, s[2])).collect())
        .collect();

    let mut writer = RunWriter::new(out)?;
    let info = surface.analyze()?;
    let values = periods(&surface, &cycles)?;
    let mut rows = Vec::new();
    for (cycle, p) in cycles.iter().zip(&values) {
        let hor = flat_intersection_number(&surface, cycle, FoliationSide::Horizontal)?;
        let ver = flat_intersection_number(&surface, cycle, FoliationSide::Vertical)?;
        rows.push(json!({
            "period": [p.re, p.im],
            "intersection_horizontal": hor,
            "intersection_vertical": ver,
        }));
    }
    let body = canonicalize(json!({
        "genus": info.genus,
        "vertex_classes": info.n_vertex_classes,
        "zero_orders": info.zero_orders,
        "cycles": rows,
    }));
    writer.emit(
        "periods.json",
        (serde_json::to_string_pretty(&body)? + "\n").as_bytes(),
    )?;
    let stages = vec![StageReport::new("flat-periods")
        .metric("genus", json!(info.genus))
        .metric("cycles", json!(values.len()))
        .check(true)];
    writer.finish("flat-periods", 0, config_value(cfg), stages)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelftestConfig {
    pub seed: u64,
}

impl Default for SelftestConfig {
    fn default() -> Self {
        SelftestConfig { seed: 1 }
    }
}

pub fn run_selftest(cfg: &SelftestConfig, out: &Path) -> anyhow::Result<bool> {
    let cap = thread_cap()?;
    let seed = cfg.seed;
    type StageFn = Box<dyn FnOnce() -> StageReport + Send>;
    let jobs: Vec<StageFn> = vec![
        Box::new(selftest_geom),
        Box::new(selftest_schwarzian),
        Box::new(selftest_epstein),
        Box::new(selftest_surface),
        Box::new(move || selftest_cmc(seed)),
        Box::new(selftest_minimal),
        Box::new(selftest_foliation),
    ];
    // Fixed-order results; parallelism capped by EPSTEIN_LAB_THREADS.
    let mut results: Vec<Option<StageReport>> = (0..jobs.len()).map(|_| None).collect();
    let mut queue: Vec<(usize, StageFn)> = jobs.into_iter().enumerate().collect();
    while !queue.is_empty() {
        let batch: Vec<(usize, StageFn)> =
            queue.drain(..queue.len().min(cap)).collect();
        let handles: Vec<(usize, std::thread::JoinHandle<StageReport>)> = batch
            .into_iter()
            .map(|(idx, job)| (idx, std::thread::spawn(job)))
            .collect();
        for (idx, handle) in handles {
            results[idx] = Some(handle.join().expect("selftest stage panicked"));
        }
    }
    let stages: Vec<StageReport> = results.into_iter().map(|r| r.unwrap()).collect();
    let mut writer = RunWriter::new(out)?;
    let mut csv = String::from("stage,passed\n");
    for s in &stages {
        csv.push_str(&format!("{},{}\n", s.name, s.passed));
    }
    writer.emit("selftest.csv", csv.as_bytes())?;
    let cfg_echo = canonicalize(json!({"seed": cfg.seed, "threads_cap": cap}));
    writer.finish("selftest", cfg.seed, cfg_echo, stages)
}

fn selftest_geom() -> StageReport {
    use epsteinlab::geom::*;
    let mut worst_group = 0.0f64;
    let mut worst_dist = 0.0f64;
    for k in 0..24u32 {
        let t = k as f64 * 0.37 + 0.11;
        let m = MoebiusTransform::new(
            Complex64::new(1.0 + 0.2 * t.sin(), 0.1 * t.cos()),
            Complex64::new(0.3 * (2.0 * t).cos(), -0.2 * t.sin()),
            Complex64::new(0.15 * (1.3 * t).sin(), 0.1),
            Complex64::new(1.0, 0.05 * t),
        )
        .unwrap();
        let id = m.compose(&m.inverse());
        worst_group = worst_group.max(
            (id.a - Complex64::new(1.0, 0.0)).norm()
                + id.b.norm()
                + id.c.norm()
                + (id.d - Complex64::new(1.0, 0.0)).norm(),
        );
        let p = H3Point::new(Complex64::new(0.3 * t.cos(), 0.2), 0.5 + 0.1 * (k % 5) as f64);
        let q = H3Point::new(Complex64::new(-0.4, 0.5 * t.sin()), 1.1);
        worst_dist = worst_dist
            .max((h3_distance(&m.apply_h3(p), &m.apply_h3(q)) - h3_distance(&p, &q)).abs());
    }
    StageReport::new("geom")
        .num("group_law_residual", worst_group)
        .num("isometry_residual", worst_dist)
        .check(worst_group < 1e-12 && worst_dist < 1e-10)
}

fn selftest_schwarzian() -> StageReport {
    use epsteinlab::schwarzian::*;
    let chart = Chart::new(Complex64::new(0.8, 0.6), 0.01, 31, 31);
    let sq = HolomorphicMap::with_derivatives(
        |z| z * z,
        |z| 2.0 * z,
        |_| Complex64::new(2.0, 0.0),
        |_| Complex64::new(0.0, 0.0),
    );
    let s = schwarzian_derivative(&sq, chart).unwrap();
    let mut worst = 0.0f64;
    for j in 0..chart.ny {
        for i in 0..chart.nx {
            let z = chart.point(i, j);
            worst = worst.max((s.lambda[chart.idx(i, j)] + 1.5 / (z * z)).norm());
        }
    }
    let pchart = Chart::centered_square(Complex64::new(0.0, 0.0), 0.35, 201);
    let mut poincare = ConformalMetric::scaled_poincare_disk(pchart, 0.0);
    poincare.eta_z = None;
    let b = epsteinlab::schwarzian::mobius_flat_deviation(&poincare).unwrap().max_abs();
    StageReport::new("schwarzian")
        .num("square_map_residual", worst)
        .num("poincare_flat_deviation", b)
        .check(worst < 1e-10 && b < 1e-6)
}

fn selftest_epstein() -> StageReport {
    let chart = Chart::centered_square(Complex64::new(0.0, 0.0), 0.4, 141);
    let sigma = ConformalMetric::scaled_poincare_disk(chart, 0.5);
    let h = mean_curvature_formula(&sigma, None).unwrap();
    let surf = epstein_map(&sigma).unwrap();
    let data = fundamental_forms_fd(&surf).unwrap();
    let mut worst_formula = 0.0f64;
    let mut worst_fd = 0.0f64;
    for (_, _, k) in chart.interior(2 * FD_MARGIN + 1) {
        worst_formula = worst_formula.max((h.data[k] + 0.5f64.tanh()).abs());
        if data.valid[k] {
            worst_fd = worst_fd.max((data.mean_curvature(k) - h.data[k]).abs());
        }
    }
    StageReport::new("epstein")
        .num("umbilic_formula_residual", worst_formula)
        .num("fd_oracle_disagreement", worst_fd)
        .check(worst_formula < 1e-6 && worst_fd < 1e-3)
}

fn selftest_surface() -> StageReport {
    let mesh = build_genus2_octagon(2).unwrap();
    let chi = mesh.euler_characteristic();
    let defect = mesh.total_angle_defect().unwrap();
    let target = 2.0 * std::f64::consts::PI * chi as f64;
    let pos = mesh.positions.clone().unwrap();
    let f: Vec<f64> = pos.iter().map(|z| 1.5 + 0.3 * (z.re + z.im).cos()).collect();
    let rhs: Vec<f64> = pos.iter().map(|z| (3.0 * z.re).sin() + 0.5 * z.im).collect();
    let sol = solve_helmholtz(&mesh, &f, &rhs, 1e-12).unwrap();
    StageReport::new("surface")
        .metric("euler_characteristic", json!(chi))
        .num("gauss_bonnet_defect_residual", (defect - target).abs())
        .num("helmholtz_residual", sol.residual)
        .check(chi == -2 && (defect - target).abs() < 1e-9 && sol.residual < 1e-10)
}

fn selftest_cmc(seed: u64) -> StageReport {
    let p = CmcProblem::homogeneous(0.0).unwrap();
    let fam = p.continuation(-0.9, 0.9, 19, 1e-12).unwrap();
    let worst = fam
        .solutions
        .iter()
        .map(|s| s.residual_norm)
        .fold(0.0, f64::max);
    let disk = CmcProblem::disk(DiskPatchProblem::new(8, 1e-2, 64, 30, 0.35, 0.9).unwrap());
    let small = disk.continuation(-0.3, 0.3, 3, 1e-9).unwrap();
    let cert_ok = disk
        .assemble_foliation(small, MEAN_CURVATURE_CERT_TOL, seed)
        .map(|f| f.certificate.map(|c| c.certified).unwrap_or(false))
        .unwrap_or(false);
    StageReport::new("cmc")
        .num("fuchsian_residual", worst)
        .metric("disk_certificate", json!(cert_ok))
        .check(worst < 1e-12 && cert_ok)
}

fn selftest_minimal() -> StageReport {
    let mesh = build_genus2_octagon(1).unwrap();
    let detq = vec![-0.4; mesh.n_vertices];
    let s = 0.3;
    let (u, res, _) = epsteinlab::minimal::solve_gauss_equation(&mesh, &detq, s, 1e-13).unwrap();
    let f = |t: f64| -1.0 + (2.0 * t).exp() - (-2.0 * t).exp() * s * s * (-0.4);
    let (mut lo, mut hi) = (-1.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let root = 0.5 * (lo + hi);
    let worst = u.iter().map(|x| (x - root).abs()).fold(0.0, f64::max);
    let hp = halfpipe_limit_holonomy(&demo_holonomy_path()).unwrap();
    StageReport::new("minimal")
        .num("scalar_oracle_residual", worst)
        .num("gauss_residual", res)
        .num("halfpipe_block_residual", hp.block_residual)
        .check(worst < 1e-10 && hp.block_residual < 1e-8)
}

fn selftest_foliation() -> StageReport {
    let f = TorusFoliation::new(1, 0, 1.0).unwrap();
    let g = TorusFoliation::new(0, 1, 1.0).unwrap();
    let cp = critical_point(&f, &g).unwrap();
    let tau_err = (cp.point.tau - Complex64::i()).norm();
    let p = TorusPoint::new(Complex64::new(0.3, 0.9)).unwrap();
    let fol = TorusFoliation::new(2, -3, 1.7).unwrap();
    let ext = extremal_length(&p, &fol);
    let expect = {
        let seg = Complex64::new(2.0, 0.0) - 3.0 * p.tau;
        1.7 * 1.7 * seg.norm_sqr() / p.tau.im
    };
    StageReport::new("foliation")
        .num("square_critical_tau_error", tau_err)
        .num("extremal_length_residual", (ext - expect).abs())
        .check(tau_err < 1e-8 && (ext - expect).abs() < 1e-12 && cp.certificate < 1e-10)
}
