//! The Epstein map from conformal data at infinity to surfaces in H³, its
//! mean curvature, a finite-difference fundamental-form oracle, the
//! equidistant (normal) flow, and signed-distance probes.
//!
//! With σ = e^{2η} |dz|² on a planar chart, the Epstein surface is
//!
//!   Eps(z) = (z, 0) + 2 / (e^{2η} + 4 |η_z|²) · (2 η_z̄, e^η)
//!
//! and its unit normal at Eps(z) points along the geodesic towards the ideal
//! point z. The mean-curvature sign is pinned by the flat metric: the
//! height-two plane must report H ≡ −1 with that normal. Positive equidistant
//! parameter r flows against the normal (away from the chart domain), which
//! makes principal curvatures move as tanh(μ + r) and mean curvature strictly
//! increasing in r.

use nalgebra::Matrix2;
use num_complex::Complex64;

use crate::field::{Chart, ComplexGrid, RealGrid, FD_MARGIN};
use crate::geom::{
    h3_distance, unit_tangent_between, unit_tangent_toward, H3Point, H3Tangent,
};
use crate::schwarzian::{mobius_flat_deviation, ConformalMetric, QuadDifferential};
use crate::{EpsteinLabError, Result};

/// Threshold on the mean-curvature denominator below which the horospherical
/// support condition is reported as failed.
pub const DEGENERATE_DENOMINATOR_TOL: f64 = 1e-12;

/// Sampled Epstein surface over a chart.
#[derive(Debug, Clone)]
pub struct EpsteinSurface {
    pub chart: Chart,
    /// Surface point per node; meaningful only where `valid`.
    pub points: Vec<H3Point>,
    /// Unit normal per node, pointing towards the ideal point of the node.
    pub normals: Vec<H3Tangent>,
    pub valid: Vec<bool>,
    /// Stencil margin consumed so far; derivative consumers add their own.
    pub margin: usize,
    /// Source log-density, kept for the defining-property check.
    pub eta: Vec<f64>,
    /// Set when the FD first fundamental form is positive definite at every
    /// interior sample.
    pub immersed: bool,
}

impl EpsteinSurface {
    pub fn point(&self, i: usize, j: usize) -> H3Point {
        self.points[self.chart.idx(i, j)]
    }

    /// Biquadratic evaluation of the embedding at fractional grid coordinates.
    pub fn interpolate(&self, fi: f64, fj: f64) -> Option<H3Point> {
        let mut i0 = fi.round() as isize;
        let j0 = fj.round() as isize;
        if self.chart.periodic_x {
            i0 = i0.rem_euclid(self.chart.nx as isize);
        } else if i0 < 1 || i0 as usize + 1 >= self.chart.nx {
            return None;
        }
        if j0 < 1 || j0 as usize + 1 >= self.chart.ny {
            return None;
        }
        let (i0, j0) = (i0 as usize, j0 as usize);
        let du = fi - fi.round();
        let dv = fj - j0 as f64;
        for di in -1..=1 {
            for dj in -1..=1 {
                if !self.valid[self.chart.idx_off(i0, j0, di, dj)] {
                    return None;
                }
            }
        }
        let comp = |pick: &dyn Fn(&H3Point) -> f64| -> f64 {
            let v = |di: isize, dj: isize| pick(&self.points[self.chart.idx_off(i0, j0, di, dj)]);
            let lag = |t: f64, fm: f64, f0: f64, fp: f64| {
                f0 + 0.5 * t * (fp - fm) + 0.5 * t * t * (fp - 2.0 * f0 + fm)
            };
            let row = |dj: isize| lag(du, v(-1, dj), v(0, dj), v(1, dj));
            lag(dv, row(-1), row(0), row(1))
        };
        let x = comp(&|p: &H3Point| p.horizontal.re);
        let y = comp(&|p: &H3Point| p.horizontal.im);
        let t = comp(&|p: &H3Point| p.height);
        if t <= 0.0 {
            return None;
        }
        Some(H3Point::new(Complex64::new(x, y), t))
    }
}

/// First, second, and third fundamental forms plus the shape operator,
/// sampled per node in chart coordinates (or per vertex for mesh data).
#[derive(Debug, Clone)]
pub struct ImmersionData {
    pub i_form: Vec<Matrix2<f64>>,
    pub ii_form: Vec<Matrix2<f64>>,
    pub iii_form: Vec<Matrix2<f64>>,
    pub shape: Vec<Matrix2<f64>>,
    pub valid: Vec<bool>,
}

impl ImmersionData {
    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_empty()
    }

    /// Mean curvature = half trace of the shape operator.
    pub fn mean_curvature(&self, k: usize) -> f64 {
        0.5 * self.shape[k].trace()
    }

    /// Principal curvatures (eigenvalues of the shape operator; real since B
    /// is self-adjoint for the first fundamental form).
    pub fn principal_curvatures(&self, k: usize) -> (f64, f64) {
        principal_curvatures_of(&self.shape[k])
    }

    /// II(x, y) = I(Bx, y) residual, sup over valid samples.
    pub fn compatibility_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..self.len() {
            if !self.valid[k] {
                continue;
            }
            let diff = self.i_form[k] * self.shape[k] - self.ii_form[k];
            worst = worst.max(diff.norm());
        }
        worst
    }
}

pub fn principal_curvatures_of(b: &Matrix2<f64>) -> (f64, f64) {
    let h = 0.5 * b.trace();
    let disc = (h * h - b.determinant()).max(0.0).sqrt();
    (h - disc, h + disc)
}

/// Evaluates the explicit Epstein expression at one point.
pub fn epstein_point(z: Complex64, eta: f64, eta_z: Complex64) -> H3Point {
    let d = (2.0 * eta).exp() + 4.0 * eta_z.norm_sqr();
    H3Point::new(z + 4.0 * eta_z.conj() / d, 2.0 * eta.exp() / d)
}

/// Epstein map of a conformal metric. Uses the analytic gradient when the
/// metric provides one (all nodes valid), else 4th-order stencils (interior
/// nodes valid).
pub fn epstein_map(s: &ConformalMetric) -> Result<EpsteinSurface> {
    s.check_finite()?;
    let chart = s.chart;
    let eta_grid = RealGrid { chart, data: s.eta.clone() };
    let analytic = s.eta_z.is_some();
    let margin = if analytic { 0 } else { FD_MARGIN };
    let mut points = vec![H3Point::new(Complex64::new(0.0, 0.0), 1.0); chart.len()];
    let mut normals =
        vec![H3Tangent { horizontal: Complex64::new(0.0, 0.0), vertical: -1.0 }; chart.len()];
    let mut valid = vec![false; chart.len()];
    for j in 0..chart.ny {
        for i in 0..chart.nx {
            if !chart.is_interior(i, j, margin) {
                continue;
            }
            let k = chart.idx(i, j);
            let z = chart.point(i, j);
            let eta_z = if analytic { s.eta_z_at(i, j) } else { eta_grid.wirtinger_z(i, j) };
            let p = epstein_point(z, s.eta[k], eta_z);
            normals[k] = unit_tangent_toward(&p, z);
            points[k] = p;
            valid[k] = true;
        }
    }
    let mut surface = EpsteinSurface {
        chart,
        points,
        normals,
        valid,
        margin,
        eta: s.eta.clone(),
        immersed: false,
    };
    if chart.nx > 2 * (margin + FD_MARGIN) + 1 && chart.ny > 2 * (margin + FD_MARGIN) + 1 {
        if let Ok(data) = fundamental_forms_fd(&surface) {
            surface.immersed = data
                .valid
                .iter()
                .zip(&data.i_form)
                .filter(|(v, _)| **v)
                .all(|(_, m)| m.determinant() > 0.0 && m[(0, 0)] > 0.0);
        }
    }
    Ok(surface)
}

/// Curvature K(σ) = −e^{−2η} Δη of a conformal metric, valid on the interior.
pub fn gauss_curvature(s: &ConformalMetric) -> RealGrid {
    let chart = s.chart;
    let eta_grid = RealGrid { chart, data: s.eta.clone() };
    let mut out = RealGrid::constant(chart, f64::NAN);
    match &s.eta_z {
        Some(grad) => {
            let gz = ComplexGrid { chart, data: grad.clone() };
            for (i, j, k) in chart.interior(FD_MARGIN) {
                // Δη = 4 ∂_z̄ η_z; the imaginary part vanishes for real η.
                let dbar = 0.5 * (gz.dx(i, j) + Complex64::i() * gz.dy(i, j));
                out.data[k] = -(-2.0 * s.eta[k]).exp() * 4.0 * dbar.re;
            }
        }
        None => {
            for (i, j, k) in chart.interior(FD_MARGIN) {
                out.data[k] = -(-2.0 * s.eta[k]).exp() * eta_grid.laplace(i, j);
            }
        }
    }
    out
}

/// Mean curvature of the Epstein surface from the boundary data:
///
///   H = (K² − 1 − 16 ‖B(σ) − φ/2‖²_σ) / ((K − 1)² − 16 ‖B(σ) − φ/2‖²_σ)
///
/// with φ omitted meaning φ = 0. Valid on the chart interior.
pub fn mean_curvature_formula(
    s: &ConformalMetric,
    phi: Option<&QuadDifferential>,
) -> Result<RealGrid> {
    if let Some(phi) = phi {
        if !phi.chart.same_geometry(&s.chart) {
            return Err(EpsteinLabError::ChartMismatch(
                "mean_curvature_formula: phi lives on a different chart".into(),
            ));
        }
    }
    let chart = s.chart;
    let curv = gauss_curvature(s);
    let b = mobius_flat_deviation(s)?;
    let mut out = RealGrid::constant(chart, f64::NAN);
    let mut degenerate = Vec::new();
    for (i, j, k) in chart.interior(FD_MARGIN) {
        let kk = curv.data[k];
        let lam = match phi {
            Some(p) => b.lambda[k] - 0.5 * p.lambda[k],
            None => b.lambda[k],
        };
        let n16 = 16.0 * (-4.0 * s.eta[k]).exp() * lam.norm_sqr();
        let den = (kk - 1.0) * (kk - 1.0) - n16;
        if den.abs() < DEGENERATE_DENOMINATOR_TOL {
            degenerate.push((i, j));
            continue;
        }
        out.data[k] = (kk * kk - 1.0 - n16) / den;
    }
    if !degenerate.is_empty() {
        return Err(EpsteinLabError::Degenerate(format!(
            "mean-curvature denominator below {DEGENERATE_DENOMINATOR_TOL:.0e} at {} samples (first: {:?})",
            degenerate.len(),
            &degenerate[..degenerate.len().min(4)]
        )));
    }
    Ok(out)
}

fn christoffel_correction(t: f64, xa: &[f64; 3], xb: &[f64; 3]) -> [f64; 3] {
    // Upper half-space metric δ/t²: Γ^k_ij = (δ_ij δ_k3 − δ_jk δ_i3 − δ_ik δ_j3)/t.
    let mut out = [0.0; 3];
    let dotab = xa[0] * xb[0] + xa[1] * xb[1] + xa[2] * xb[2];
    for k in 0..3 {
        let mut acc = 0.0;
        if k == 2 {
            acc += dotab;
        }
        acc -= xb[k] * xa[2];
        acc -= xa[k] * xb[2];
        out[k] = acc / t;
    }
    out
}

/// Finite-difference fundamental forms of a sampled surface: the independent
/// oracle for the curvature formulas. Valid where the surface has two extra
/// stencil layers.
pub fn fundamental_forms_fd(e: &EpsteinSurface) -> Result<ImmersionData> {
    let chart = e.chart;
    let n = chart.len();
    let comp = |pick: fn(&H3Point) -> f64| RealGrid {
        chart,
        data: e.points.iter().map(pick).collect(),
    };
    let gx = comp(|p| p.horizontal.re);
    let gy = comp(|p| p.horizontal.im);
    let gt = comp(|p| p.height);
    let margin = e.margin + FD_MARGIN;
    let mut data = ImmersionData {
        i_form: vec![Matrix2::zeros(); n],
        ii_form: vec![Matrix2::zeros(); n],
        iii_form: vec![Matrix2::zeros(); n],
        shape: vec![Matrix2::zeros(); n],
        valid: vec![false; n],
    };
    let mut degenerate = Vec::new();
    for (i, j, k) in chart.interior(margin) {
        if !e.valid[k] {
            continue;
        }
        let t = e.points[k].height;
        let x1 = [gx.dx(i, j), gy.dx(i, j), gt.dx(i, j)];
        let x2 = [gx.dy(i, j), gy.dy(i, j), gt.dy(i, j)];
        let x11 = [gx.dxx(i, j), gy.dxx(i, j), gt.dxx(i, j)];
        let x22 = [gx.dyy(i, j), gy.dyy(i, j), gt.dyy(i, j)];
        let x12 = [gx.dxy(i, j), gy.dxy(i, j), gt.dxy(i, j)];
        let nvec = [
            e.normals[k].horizontal.re,
            e.normals[k].horizontal.im,
            e.normals[k].vertical,
        ];
        let hyp = |a: &[f64; 3], b: &[f64; 3]| (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (t * t);
        let mut i_mat = Matrix2::zeros();
        i_mat[(0, 0)] = hyp(&x1, &x1);
        i_mat[(0, 1)] = hyp(&x1, &x2);
        i_mat[(1, 0)] = i_mat[(0, 1)];
        i_mat[(1, 1)] = hyp(&x2, &x2);
        let second = |xa: &[f64; 3], xb: &[f64; 3], xab: &[f64; 3]| {
            let gamma = christoffel_correction(t, xa, xb);
            let cov = [xab[0] + gamma[0], xab[1] + gamma[1], xab[2] + gamma[2]];
            hyp(&cov, &nvec)
        };
        let mut ii_mat = Matrix2::zeros();
        ii_mat[(0, 0)] = second(&x1, &x1, &x11);
        ii_mat[(0, 1)] = second(&x1, &x2, &x12);
        ii_mat[(1, 0)] = ii_mat[(0, 1)];
        ii_mat[(1, 1)] = second(&x2, &x2, &x22);
        let det = i_mat.determinant();
        if det.abs() < 1e-14 {
            degenerate.push((i, j));
            continue;
        }
        let b_mat = i_mat.try_inverse().unwrap() * ii_mat;
        data.i_form[k] = i_mat;
        data.ii_form[k] = ii_mat;
        data.iii_form[k] = ii_mat * i_mat.try_inverse().unwrap() * ii_mat;
        data.shape[k] = b_mat;
        data.valid[k] = true;
    }
    if !degenerate.is_empty() {
        return Err(EpsteinLabError::Degenerate(format!(
            "degenerate first fundamental form at {} samples (first: {:?})",
            degenerate.len(),
            &degenerate[..degenerate.len().min(4)]
        )));
    }
    Ok(data)
}

/// Data of the surface at oriented distance r along the equidistant flow.
/// With eigenvalues tanh μ of the shape operator, the flowed eigenvalues are
/// tanh(μ + r).
pub fn equidistant_flow(d: &ImmersionData, r: f64) -> Result<ImmersionData> {
    let n = d.len();
    let (ch, sh) = (r.cosh(), r.sinh());
    let mut out = ImmersionData {
        i_form: vec![Matrix2::zeros(); n],
        ii_form: vec![Matrix2::zeros(); n],
        iii_form: vec![Matrix2::zeros(); n],
        shape: vec![Matrix2::zeros(); n],
        valid: d.valid.clone(),
    };
    for k in 0..n {
        if !d.valid[k] {
            continue;
        }
        let c = Matrix2::identity() * ch + d.shape[k] * sh;
        let det = c.determinant();
        if det.abs() < 1e-12 {
            return Err(EpsteinLabError::Degenerate(format!(
                "equidistant flow degenerates at sample {k}: principal curvature equals -coth(r) or -tanh(r)"
            )));
        }
        let c_inv = c.try_inverse().unwrap();
        let b_r = c_inv * (Matrix2::identity() * sh + d.shape[k] * ch);
        let i_r = c.transpose() * d.i_form[k] * c;
        let ii_r = {
            let m = i_r * b_r;
            0.5 * (m + m.transpose())
        };
        out.i_form[k] = i_r;
        out.ii_form[k] = ii_r;
        out.iii_form[k] = ii_r * i_r.try_inverse().unwrap() * ii_r;
        out.shape[k] = b_r;
    }
    Ok(out)
}

/// Signed distance from `p` to the sampled leaf; positive on the side away
/// from the leaf normal (the side reached by positive equidistant flow).
pub fn signed_distance_probe(leaf: &EpsteinSurface, p: &H3Point) -> Result<f64> {
    let chart = leaf.chart;
    let mut best: Option<(usize, usize, f64)> = None;
    for j in 0..chart.ny {
        for i in 0..chart.nx {
            let k = chart.idx(i, j);
            if !leaf.valid[k] {
                continue;
            }
            let d = h3_distance(p, &leaf.points[k]);
            if best.map(|(_, _, bd)| d < bd).unwrap_or(true) {
                best = Some((i, j, d));
            }
        }
    }
    let (bi, bj, coarse) = best.ok_or_else(|| {
        EpsteinLabError::OutOfChart("signed_distance_probe: leaf has no valid samples".into())
    })?;
    // A foot point at the border of the sampled patch means the true foot
    // point may lie outside the collar covered by the samples.
    let edge = !chart.is_interior(bi, bj, leaf.margin.max(1) + 1)
        || !leaf.valid[chart.idx(bi, bj)]
        || [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)].iter().any(|&(di, dj)| {
            let jj = bj as isize + dj;
            if jj < 0 || jj as usize >= chart.ny {
                return true;
            }
            if !chart.periodic_x {
                let ii = bi as isize + di;
                if ii < 0 || ii as usize >= chart.nx {
                    return true;
                }
            }
            !leaf.valid[chart.idx_off(bi, jj as usize, di, 0)]
        });
    if edge {
        return Err(EpsteinLabError::OutOfChart(
            "signed_distance_probe: foot point at the edge of the sampled collar".into(),
        ));
    }
    // Quadratic polish: fit d² over the 3×3 neighborhood, then evaluate the
    // interpolated surface at the fitted minimizer (one Newton step on the
    // local model).
    let f = |di: isize, dj: isize| {
        let k = chart.idx_off(bi, bj, di, dj);
        let d = h3_distance(p, &leaf.points[k]);
        d * d
    };
    let f00 = f(0, 0);
    let gu = 0.5 * (f(1, 0) - f(-1, 0));
    let gv = 0.5 * (f(0, 1) - f(0, -1));
    let huu = f(1, 0) - 2.0 * f00 + f(-1, 0);
    let hvv = f(0, 1) - 2.0 * f00 + f(0, -1);
    let huv = 0.25 * (f(1, 1) - f(1, -1) - f(-1, 1) + f(-1, -1));
    let det = huu * hvv - huv * huv;
    let (mut du, mut dv) = (0.0, 0.0);
    if det.abs() > 1e-30 && huu > 0.0 {
        du = (-gu * hvv + gv * huv) / det;
        dv = (-gv * huu + gu * huv) / det;
        let clamp = 1.5;
        du = du.clamp(-clamp, clamp);
        dv = dv.clamp(-clamp, clamp);
    }
    // Newton-style refinement of the foot point on the interpolated surface:
    // refit the local paraboloid of d² at shrinking spacings.
    let mut cu = bi as f64 + du;
    let mut cv = bj as f64 + dv;
    let eval = |u: f64, w: f64| -> Option<f64> {
        leaf.interpolate(u, w).map(|q| {
            let d = h3_distance(p, &q);
            d * d
        })
    };
    for spacing in [0.5f64, 0.2, 0.08] {
        let sample = |ou: f64, ov: f64| eval(cu + ou * spacing, cv + ov * spacing);
        let all = [
            sample(0.0, 0.0),
            sample(1.0, 0.0),
            sample(-1.0, 0.0),
            sample(0.0, 1.0),
            sample(0.0, -1.0),
            sample(1.0, 1.0),
            sample(1.0, -1.0),
            sample(-1.0, 1.0),
            sample(-1.0, -1.0),
        ];
        if all.iter().any(|x| x.is_none()) {
            break;
        }
        let a = |k: usize| all[k].unwrap();
        let gu = 0.5 * (a(1) - a(2));
        let gv = 0.5 * (a(3) - a(4));
        let huu = a(1) - 2.0 * a(0) + a(2);
        let hvv = a(3) - 2.0 * a(0) + a(4);
        let huv = 0.25 * (a(5) - a(6) - a(7) + a(8));
        let det = huu * hvv - huv * huv;
        if det.abs() < 1e-30 || huu <= 0.0 {
            break;
        }
        let su = ((-gu * hvv + gv * huv) / det).clamp(-1.0, 1.0);
        let sv = ((-gv * huu + gu * huv) / det).clamp(-1.0, 1.0);
        cu += su * spacing;
        cv += sv * spacing;
        cu = cu.clamp(bi as f64 - 1.5, bi as f64 + 1.5);
        cv = cv.clamp(bj as f64 - 1.5, bj as f64 + 1.5);
    }
    let foot = leaf
        .interpolate(cu, cv)
        .unwrap_or(leaf.points[chart.idx(bi, bj)]);
    let distance = h3_distance(p, &foot).min(coarse);
    if distance < 1e-12 {
        return Ok(0.0);
    }
    let nk = chart.idx(bi, bj);
    let dir = unit_tangent_between(&leaf.points[nk], p);
    let side = dir.dot(&leaf.normals[nk], &leaf.points[nk]);
    Ok(if side <= 0.0 { distance } else { -distance })
}

/// OBJ export in upper-half-space coordinates (x, y, height).
pub fn export_obj<W: std::io::Write>(w: &mut W, leaf: &EpsteinSurface) -> std::io::Result<()> {
    let chart = leaf.chart;
    let mut index = vec![0usize; chart.len()];
    let mut next = 1usize;
    for k in 0..chart.len() {
        if leaf.valid[k] {
            index[k] = next;
            next += 1;
            let p = leaf.points[k];
            writeln!(w, "v {} {} {}", p.horizontal.re, p.horizontal.im, p.height)?;
        }
    }
    for j in 0..chart.ny - 1 {
        for i in 0..chart.nx - 1 {
            let q = [
                chart.idx(i, j),
                chart.idx(i + 1, j),
                chart.idx(i + 1, j + 1),
                chart.idx(i, j + 1),
            ];
            if q.iter().all(|k| leaf.valid[*k]) {
                writeln!(w, "f {} {} {}", index[q[0]], index[q[1]], index[q[2]])?;
                writeln!(w, "f {} {} {}", index[q[0]], index[q[2]], index[q[3]])?;
            }
        }
    }
    Ok(())
}

/// CSV export: `z_re,z_im,height,H,lambda1,lambda2` per valid sample of the
/// fundamental-form data.
pub fn export_csv<W: std::io::Write>(
    w: &mut W,
    leaf: &EpsteinSurface,
    data: &ImmersionData,
) -> std::io::Result<()> {
    writeln!(w, "z_re,z_im,height,H,lambda1,lambda2")?;
    for j in 0..leaf.chart.ny {
        for i in 0..leaf.chart.nx {
            let k = leaf.chart.idx(i, j);
            if !data.valid[k] {
                continue;
            }
            let z = leaf.chart.point(i, j);
            let (l1, l2) = data.principal_curvatures(k);
            writeln!(
                w,
                "{},{},{},{},{},{}",
                z.re,
                z.im,
                leaf.points[k].height,
                data.mean_curvature(k),
                l1,
                l2
            )?;
        }
    }
    Ok(())
}
