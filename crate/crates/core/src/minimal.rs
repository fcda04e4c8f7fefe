//! The minimal-surface path: Gauss-equation solves for the conformal factor
//! of the induced metric, fundamental forms at infinity with their curvature,
//! first-order estimates at the totally geodesic locus, and the half-pipe
//! rescaling limits of holonomies and immersion data.
//!
//! Path data lives in per-vertex h-orthonormal frames on a closed hyperbolic
//! mesh: the induced metric is I = e^{2u_s} h (matrix e^{2u} Id), the second
//! fundamental form is II = s·R for a traceless symmetric field R, and u_s
//! solves
//!
//!   F(u, s) = −Δ_h u − 1 + e^{2u} − e^{−2u} s² det_h(R) = 0,
//!
//! the conformal reformulation of the Gauss equation K_I = −1 + det B.
//! Traceless R has det_h(R) ≤ 0; the solver accepts either sign of the
//! supplied determinant field and the constant-coefficient oracle in the
//! tests pins the working convention.

use nalgebra::{Matrix2, Matrix4};

use crate::epstein::ImmersionData;
use crate::sparse::conjugate_gradient;
use crate::surface::{HyperbolicMesh, ScalarField};
use crate::{EpsteinLabError, Result};

/// Orientation of the end towards which the equidistant data is pushed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum End {
    Positive,
    Negative,
}

/// One point of the Gauss-equation path.
#[derive(Debug, Clone)]
pub struct MinimalPathPoint {
    pub s: f64,
    pub u: ScalarField,
    pub detq: ScalarField,
    /// Immersion data in h-orthonormal frames per vertex.
    pub data: ImmersionData,
    pub gauss_residual: f64,
    pub newton_iters: usize,
}

impl MinimalPathPoint {
    /// The square-root reparametrization t with s = t², under which the
    /// boundary data scales linearly (II = t²·R means II/t = t·R).
    pub fn t(&self) -> f64 {
        self.s.sqrt()
    }
}

/// Fundamental forms at infinity, in the same per-vertex frames.
#[derive(Debug, Clone)]
pub struct FormsAtInfinity {
    pub istar: Vec<Matrix2<f64>>,
    pub iistar: Vec<Matrix2<f64>>,
    pub iistar_traceless: Vec<Matrix2<f64>>,
    pub kstar: Vec<f64>,
    pub hstar: Vec<f64>,
}

/// Solves the Gauss equation for the conformal factor at parameter s by a
/// Newton iteration; the linearized operator −Δ + 2(e^{2u} + e^{−2u} s² detq)
/// is solved by conjugate gradients.
pub fn solve_gauss_equation(
    mesh: &HyperbolicMesh,
    detq: &ScalarField,
    s: f64,
    tol: f64,
) -> Result<(ScalarField, f64, usize)> {
    if detq.len() != mesh.n_vertices {
        return Err(EpsteinLabError::Invalid("detq field length mismatch".into()));
    }
    let lap = mesh.laplacian()?;
    let n = mesh.n_vertices;
    let mut u = vec![0.0; n];
    let residual = |u: &[f64]| -> Vec<f64> {
        let du = lap.apply_pointwise(u);
        (0..n)
            .map(|i| {
                -du[i] - 1.0 + (2.0 * u[i]).exp() - (-2.0 * u[i]).exp() * s * s * detq[i]
            })
            .collect()
    };
    let sup = |r: &[f64]| r.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let mut r = residual(&u);
    let mut res = sup(&r);
    let mut iters = 0usize;
    const MAX_ITERS: usize = 40;
    while res > tol {
        if iters >= MAX_ITERS {
            return Err(EpsteinLabError::Divergence(format!(
                "gauss-equation newton stalled at s = {s}: residual {res:.3e} \
                 (s is outside the empirical convergence range)"
            )));
        }
        // Linearization diagonal 2(e^{2u} + e^{−2u} s² detq) must stay
        // positive for the CG solve; large negative detq·s² breaks it.
        let diag: Vec<f64> = (0..n)
            .map(|i| 2.0 * ((2.0 * u[i]).exp() + (-2.0 * u[i]).exp() * s * s * detq[i]))
            .collect();
        if let Some((i, d)) = diag.iter().enumerate().find(|(_, d)| **d <= 0.0) {
            return Err(EpsteinLabError::Divergence(format!(
                "gauss-equation linearization loses positivity at vertex {i} (diag {d:.3e}); \
                 s = {s} is outside the empirical convergence range"
            )));
        }
        // Mass-weighted SPD system (−L + diag(m·diag)) δ = −M r.
        let weighted: Vec<f64> = diag.iter().zip(&lap.mass).map(|(d, m)| d * m).collect();
        let matrix = lap.matrix.scaled(-1.0).add_diagonal(&weighted);
        let rhs: Vec<f64> = r.iter().zip(&lap.mass).map(|(ri, m)| -ri * m).collect();
        let (delta, _) = conjugate_gradient(&matrix, &rhs, None, 1e-13, 10 * n.max(100))?;
        for (ui, di) in u.iter_mut().zip(&delta) {
            *ui += di;
        }
        r = residual(&u);
        res = sup(&r);
        iters += 1;
    }
    Ok((u, res, iters))
}

/// Builds the path point with data I = e^{2u} h, II = s·R from a traceless
/// symmetric frame field R.
pub fn beta_path_point(
    mesh: &HyperbolicMesh,
    r_field: &[Matrix2<f64>],
    s: f64,
    tol: f64,
) -> Result<MinimalPathPoint> {
    if r_field.len() != mesh.n_vertices {
        return Err(EpsteinLabError::Invalid("frame field length mismatch".into()));
    }
    for (i, r) in r_field.iter().enumerate() {
        if r.trace().abs() > 1e-10 * (1.0 + r.norm()) {
            return Err(EpsteinLabError::Invalid(format!(
                "frame field not traceless at vertex {i}"
            )));
        }
    }
    let detq: ScalarField = r_field.iter().map(|r| r.determinant()).collect();
    let (u, gauss_residual, newton_iters) = solve_gauss_equation(mesh, &detq, s, tol)?;
    let n = mesh.n_vertices;
    let mut data = ImmersionData {
        i_form: Vec::with_capacity(n),
        ii_form: Vec::with_capacity(n),
        iii_form: Vec::with_capacity(n),
        shape: Vec::with_capacity(n),
        valid: vec![true; n],
    };
    for i in 0..n {
        let e2u = (2.0 * u[i]).exp();
        let i_mat = Matrix2::identity() * e2u;
        let ii_mat = r_field[i] * s;
        let b_mat = ii_mat / e2u;
        data.i_form.push(i_mat);
        data.ii_form.push(ii_mat);
        data.iii_form.push(ii_mat * (ii_mat / e2u));
        data.shape.push(b_mat);
    }
    Ok(MinimalPathPoint { s, u, detq, data, gauss_residual, newton_iters })
}

/// The s = 0 base point (totally geodesic: u ≡ 0, II ≡ 0).
pub fn base_path_point(mesh: &HyperbolicMesh) -> MinimalPathPoint {
    let n = mesh.n_vertices;
    MinimalPathPoint {
        s: 0.0,
        u: vec![0.0; n],
        detq: vec![0.0; n],
        data: ImmersionData {
            i_form: vec![Matrix2::identity(); n],
            ii_form: vec![Matrix2::zeros(); n],
            iii_form: vec![Matrix2::zeros(); n],
            shape: vec![Matrix2::zeros(); n],
            valid: vec![true; n],
        },
        gauss_residual: 0.0,
        newton_iters: 0,
    }
}

/// Fundamental forms at infinity of immersion data satisfying the Gauss
/// equation in H³ (so K_I = −1 + det B):
///
///   I*  = ½(I ± 2 II + III),  II* = ½(I − III),  B* = (E ± B)⁻¹(E ∓ B),
///   K*  = K_I / det(E ± B),   H*  = ½ tr B* = −K*.
pub fn forms_at_infinity(d: &ImmersionData, end: End) -> Result<FormsAtInfinity> {
    let n = d.len();
    let sign = match end {
        End::Positive => 1.0,
        End::Negative => -1.0,
    };
    let mut out = FormsAtInfinity {
        istar: Vec::with_capacity(n),
        iistar: Vec::with_capacity(n),
        iistar_traceless: Vec::with_capacity(n),
        kstar: Vec::with_capacity(n),
        hstar: Vec::with_capacity(n),
    };
    for k in 0..n {
        let i_mat = d.i_form[k];
        let ii_mat = d.ii_form[k];
        let iii_mat = d.iii_form[k];
        let b = d.shape[k];
        let istar = 0.5 * (i_mat + sign * 2.0 * ii_mat + iii_mat);
        let iistar = 0.5 * (i_mat - iii_mat);
        let e_pm = Matrix2::identity() + sign * b;
        let det = e_pm.determinant();
        if det.abs() < 1e-14 {
            return Err(EpsteinLabError::Degenerate(format!(
                "det(E ± B) vanishes at sample {k}"
            )));
        }
        let k_i = -1.0 + b.determinant();
        let kstar = k_i / det;
        let bstar = e_pm.try_inverse().unwrap() * (Matrix2::identity() - sign * b);
        let hstar = 0.5 * bstar.trace();
        out.iistar_traceless.push(iistar - hstar * istar);
        out.istar.push(istar);
        out.iistar.push(iistar);
        out.kstar.push(kstar);
        out.hstar.push(hstar);
    }
    Ok(out)
}

/// One-sided derivative estimates at s = 0 along the path, by Richardson
/// extrapolation of (f(s) − f(0))/s over the sampled parameters.
pub struct FirstOrderReport {
    /// d(I*)/ds at s = 0, per vertex.
    pub d_istar: Vec<Matrix2<f64>>,
    /// d((II*)₀)/ds at s = 0, per vertex.
    pub d_iistar_traceless: Vec<Matrix2<f64>>,
    /// Sup of the dK*/ds estimate.
    pub d_kstar_sup: f64,
    /// Log-log slope of sup|u_s| over the two smallest sample pairs.
    pub u_fit_exponent: f64,
    /// Log-log slope of sup|K*_s + 1|.
    pub kstar_fit_exponent: f64,
}

/// Requires at least three path points with distinct positive s (the s = 0
/// base is synthesized internally from the mesh frame count).
pub fn first_order_schwarzian(path: &[MinimalPathPoint]) -> Result<FirstOrderReport> {
    let mut pts: Vec<&MinimalPathPoint> = path.iter().filter(|p| p.s > 0.0).collect();
    pts.sort_by(|a, b| b.s.partial_cmp(&a.s).unwrap());
    if pts.len() < 3 {
        return Err(EpsteinLabError::Invalid(
            "first-order estimates need at least three positive-s samples".into(),
        ));
    }
    let n = pts[0].u.len();
    let forms: Vec<FormsAtInfinity> = pts
        .iter()
        .map(|p| forms_at_infinity(&p.data, End::Positive))
        .collect::<Result<_>>()?;
    // Base values at s = 0: I* = II* = ½Id, (II*)₀ = 0, K* = −1.
    let istar0 = Matrix2::identity() * 0.5;
    // Richardson on the three smallest samples (largest index = smallest s).
    let m = pts.len();
    let (sa, sb, sc) = (pts[m - 3].s, pts[m - 2].s, pts[m - 1].s);
    let extrap = |fa: f64, fb: f64, fc: f64, f0: f64| -> f64 {
        let ea = (fa - f0) / sa;
        let eb = (fb - f0) / sb;
        let ec = (fc - f0) / sc;
        // Neville extrapolation of e(s) to s = 0 through three nodes.
        let p_ab = (sa * eb - sb * ea) / (sa - sb);
        let p_bc = (sb * ec - sc * eb) / (sb - sc);
        (sa * p_bc - sc * p_ab) / (sa - sc)
    };
    let mut d_istar = Vec::with_capacity(n);
    let mut d_ii0 = Vec::with_capacity(n);
    let mut d_kstar_sup = 0.0f64;
    for k in 0..n {
        let mut mi = Matrix2::zeros();
        let mut mii = Matrix2::zeros();
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            mi[(r, c)] = extrap(
                forms[m - 3].istar[k][(r, c)],
                forms[m - 2].istar[k][(r, c)],
                forms[m - 1].istar[k][(r, c)],
                istar0[(r, c)],
            );
            mii[(r, c)] = extrap(
                forms[m - 3].iistar_traceless[k][(r, c)],
                forms[m - 2].iistar_traceless[k][(r, c)],
                forms[m - 1].iistar_traceless[k][(r, c)],
                0.0,
            );
        }
        d_istar.push(mi);
        d_ii0.push(mii);
        let dk = extrap(
            forms[m - 3].kstar[k],
            forms[m - 2].kstar[k],
            forms[m - 1].kstar[k],
            -1.0,
        );
        d_kstar_sup = d_kstar_sup.max(dk.abs());
    }
    let sup_u = |p: &MinimalPathPoint| p.u.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let sup_k = |f: &FormsAtInfinity| {
        f.kstar.iter().map(|x| (x + 1.0).abs()).fold(0.0, f64::max)
    };
    let slope = |ya: f64, yb: f64, xa: f64, xb: f64| (ya / yb).ln() / (xa / xb).ln();
    let u_fit_exponent = slope(sup_u(pts[m - 3]), sup_u(pts[m - 1]), sa, sc);
    let kstar_fit_exponent = slope(sup_k(&forms[m - 3]), sup_k(&forms[m - 1]), sa, sc);
    Ok(FirstOrderReport {
        d_istar,
        d_iistar_traceless: d_ii0,
        d_kstar_sup,
        u_fit_exponent,
        kstar_fit_exponent,
    })
}

/// Half-pipe Schwarzians of the limit, reported through their real parts:
/// (ℜq, −ℜq) with ℜq read off from −d((II*)₀)/ds.
pub fn hp_schwarzian_pair(report: &FirstOrderReport) -> (Vec<Matrix2<f64>>, Vec<Matrix2<f64>>) {
    let plus: Vec<Matrix2<f64>> = report.d_iistar_traceless.iter().map(|m| -m).collect();
    let minus: Vec<Matrix2<f64>> = report.d_iistar_traceless.to_vec();
    (plus, minus)
}

// ---------------------------------------------------------------------------
// Half-pipe rescaling limits

/// Sampled holonomy path: one 4×4 matrix per generator per parameter value.
#[derive(Debug, Clone)]
pub struct HolonomyPath4 {
    /// Strictly decreasing positive parameters.
    pub ts: Vec<f64>,
    /// `generators[g][k]` is ρ_{t_k}(γ_g).
    pub generators: Vec<Vec<Matrix4<f64>>>,
}

impl HolonomyPath4 {
    pub fn validate(&self) -> Result<()> {
        if self.ts.len() < 3 {
            return Err(EpsteinLabError::Invalid(
                "need at least three samples for extrapolation".into(),
            ));
        }
        if self.ts.windows(2).any(|w| w[0] <= w[1]) || self.ts.iter().any(|t| *t <= 0.0) {
            return Err(EpsteinLabError::Invalid(
                "parameters must be positive and strictly decreasing".into(),
            ));
        }
        for (g, path) in self.generators.iter().enumerate() {
            if path.len() != self.ts.len() {
                return Err(EpsteinLabError::Invalid(format!(
                    "generator {g} has {} samples, expected {}",
                    path.len(),
                    self.ts.len()
                )));
            }
            for m in path {
                if m.determinant().abs() < 1e-14 {
                    return Err(EpsteinLabError::Degenerate(format!(
                        "singular holonomy sample for generator {g}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Conjugation by the rescaling diag(1, 1, 1, 1/t): the A block is fixed,
/// the last column scales by t, the last row by 1/t.
pub fn rescale_holonomy(m: &Matrix4<f64>, t: f64) -> Matrix4<f64> {
    let mut out = *m;
    for r in 0..3 {
        out[(r, 3)] *= t;
        out[(3, r)] /= t;
    }
    out
}

/// Residual of membership in the half-pipe structure group: A ∈ O(2,1) with
/// J = diag(−1, 1, 1), vanishing upper-right column, and a = ±1.
pub fn halfpipe_block_residual(m: &Matrix4<f64>) -> f64 {
    let a = m.fixed_view::<3, 3>(0, 0).into_owned();
    let j = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(-1.0, 1.0, 1.0));
    let ortho = (a.transpose() * j * a - j).norm();
    let w = (m[(0, 3)].powi(2) + m[(1, 3)].powi(2) + m[(2, 3)].powi(2)).sqrt();
    let corner = (m[(3, 3)].abs() - 1.0).abs();
    ortho.max(w).max(corner)
}

pub struct HolonomyLimit {
    pub limits: Vec<Matrix4<f64>>,
    /// Sup over generators of the last extrapolation increment.
    pub extrapolation_error: f64,
    /// Sup over generators of the half-pipe block-form residual.
    pub block_residual: f64,
}

/// Neville extrapolation to t = 0 of the rescaled holonomies.
pub fn halfpipe_limit_holonomy(p: &HolonomyPath4) -> Result<HolonomyLimit> {
    p.validate()?;
    let mut limits = Vec::with_capacity(p.generators.len());
    let mut worst_err = 0.0f64;
    let mut worst_block = 0.0f64;
    for path in &p.generators {
        let rescaled: Vec<Matrix4<f64>> = path
            .iter()
            .zip(&p.ts)
            .map(|(m, &t)| rescale_holonomy(m, t))
            .collect();
        let mut limit = Matrix4::zeros();
        let mut err = 0.0f64;
        for r in 0..4 {
            for c in 0..4 {
                let ys: Vec<f64> = rescaled.iter().map(|m| m[(r, c)]).collect();
                let (val, e) = neville_to_zero(&p.ts, &ys)?;
                limit[(r, c)] = val;
                err = err.max(e);
            }
        }
        worst_err = worst_err.max(err);
        worst_block = worst_block.max(halfpipe_block_residual(&limit));
        limits.push(limit);
    }
    if worst_err > 1e-6 {
        return Err(EpsteinLabError::Solver(format!(
            "holonomy extrapolation did not converge (increment {worst_err:.3e})"
        )));
    }
    Ok(HolonomyLimit {
        limits,
        extrapolation_error: worst_err,
        block_residual: worst_block,
    })
}

fn neville_to_zero(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    let n = xs.len();
    let mut table = ys.to_vec();
    let mut prev = table[n - 1];
    for level in 1..n {
        for i in 0..n - level {
            // Evaluate the interpolating polynomial at x = 0.
            table[i] = (xs[i] * table[i + 1] - xs[i + level] * table[i])
                / (xs[i] - xs[i + level]);
        }
        let cur = table[0];
        if level == n - 1 {
            return Ok((cur, (cur - prev).abs()));
        }
        prev = table[0];
    }
    Ok((table[0], 0.0))
}

pub struct ImmersionLimit {
    /// Extrapolated first fundamental form (expected: the h-frame identity).
    pub i_limit: Vec<Matrix2<f64>>,
    /// II_s/s at the smallest sample (exact for the path: the frame field R).
    pub ii_over_s: Vec<Matrix2<f64>>,
    /// Sup over samples/vertices of |II_s/s − II_{s'}/s'|.
    pub ii_linearity_residual: f64,
    /// Log-log slope of sup|I_s − I_limit| (expected ≥ 2).
    pub i_fit_exponent: f64,
}

/// Rescaled immersion-data limit along the path: I = lim I_s and
/// II = lim II_s/s.
pub fn halfpipe_limit_immersion(path: &[MinimalPathPoint]) -> Result<ImmersionLimit> {
    let mut pts: Vec<&MinimalPathPoint> = path.iter().filter(|p| p.s > 0.0).collect();
    pts.sort_by(|a, b| b.s.partial_cmp(&a.s).unwrap());
    if pts.len() < 3 {
        return Err(EpsteinLabError::Invalid(
            "immersion limit needs at least three positive-s samples".into(),
        ));
    }
    let n = pts[0].u.len();
    let ss: Vec<f64> = pts.iter().map(|p| p.s).collect();
    let mut i_limit = Vec::with_capacity(n);
    for k in 0..n {
        let mut m = Matrix2::zeros();
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let ys: Vec<f64> = pts.iter().map(|p| p.data.i_form[k][(r, c)]).collect();
            let (val, _) = neville_to_zero(&ss, &ys)?;
            m[(r, c)] = val;
        }
        i_limit.push(m);
    }
    let finest = pts.last().unwrap();
    let ii_over_s: Vec<Matrix2<f64>> =
        finest.data.ii_form.iter().map(|m| m / finest.s).collect();
    let mut lin = 0.0f64;
    for p in &pts {
        for k in 0..n {
            lin = lin.max((p.data.ii_form[k] / p.s - ii_over_s[k]).norm());
        }
    }
    let sup_dev = |p: &MinimalPathPoint| -> f64 {
        (0..n)
            .map(|k| (p.data.i_form[k] - i_limit[k]).norm())
            .fold(0.0, f64::max)
    };
    let m = pts.len();
    let (ya, yc) = (sup_dev(pts[m - 3]), sup_dev(pts[m - 1]));
    let i_fit_exponent = (ya / yc).ln() / (pts[m - 3].s / pts[m - 1].s).ln();
    Ok(ImmersionLimit { i_limit, ii_over_s, ii_linearity_residual: lin, i_fit_exponent })
}
