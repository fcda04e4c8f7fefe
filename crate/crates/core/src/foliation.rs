//! Measured-foliation workbench: torus Teichmüller space, where the
//! extremal-length calculus is closed-form checkable, plus period and
//! intersection machinery on flat polygon surfaces.
//!
//! On the torus ℂ/(ℤ + τℤ), a measured foliation with class (m, n) ∈ ℤ²∖0
//! and transverse weight t intersects the curve class (a, b) in t·|a n − b m|.
//! It is realized as the horizontal foliation of q = c·dz² with
//!
//!   √c = t·(−(m + n·Re τ) + i·n·Im τ) / Im τ
//!
//! and the extremal length is ‖q‖₁ = |c|·Im τ = t²|m + nτ|²/Im τ. Gardiner's
//! derivative formula appears here as the Wirtinger gradient
//! ∂_τ ext = (i/2)·c, which the finite-difference oracle in the tests
//! verifies directly.

use num_complex::Complex64;

use crate::{EpsteinLabError, Result};

/// Conformal structure of the torus ℂ/(ℤ + τℤ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorusPoint {
    pub tau: Complex64,
}

impl TorusPoint {
    pub fn new(tau: Complex64) -> Result<Self> {
        if !(tau.im > 0.0) {
            return Err(EpsteinLabError::Invalid(format!(
                "torus modulus must have positive imaginary part, got {tau}"
            )));
        }
        Ok(TorusPoint { tau })
    }
}

/// Weighted measured foliation of slope class (m, n) on the torus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorusFoliation {
    pub class: (i64, i64),
    pub weight: f64,
}

impl TorusFoliation {
    pub fn new(m: i64, n: i64, weight: f64) -> Result<Self> {
        if (m, n) == (0, 0) {
            return Err(EpsteinLabError::Invalid("foliation class must be nonzero".into()));
        }
        if !(weight > 0.0) {
            return Err(EpsteinLabError::Invalid("foliation weight must be positive".into()));
        }
        Ok(TorusFoliation { class: (m, n), weight })
    }

    /// gcd-reduced class together with the effective weight.
    pub fn reduced(&self) -> ((i64, i64), f64) {
        let g = gcd(self.class.0.unsigned_abs(), self.class.1.unsigned_abs()) as i64;
        (
            (self.class.0 / g, self.class.1 / g),
            self.weight * g as f64,
        )
    }

    pub fn scaled(&self, t: f64) -> TorusFoliation {
        TorusFoliation { class: self.class, weight: self.weight * t }
    }

    /// Intersection number with the curve class (a, b): t·|a n − b m|.
    pub fn intersection_with_class(&self, a: i64, b: i64) -> f64 {
        self.weight * ((a * self.class.1 - b * self.class.0) as f64).abs()
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}

/// Coefficient c of the unique q = c·dz² whose horizontal foliation is
/// measure equivalent to F on the torus of modulus τ.
pub fn hm_section_torus(p: &TorusPoint, f: &TorusFoliation) -> Complex64 {
    let (m, n) = (f.class.0 as f64, f.class.1 as f64);
    let t = f.weight;
    let y = p.tau.im;
    let xi = Complex64::new(-t * (m + n * p.tau.re) / y, t * n);
    xi * xi
}

/// Extremal length ext_τ(F) = ‖q^F‖₁ = t²|m + nτ|²/Im τ.
pub fn extremal_length(p: &TorusPoint, f: &TorusFoliation) -> f64 {
    let c = hm_section_torus(p, f);
    c.norm() * p.tau.im
}

/// Wirtinger gradient ∂_τ ext_τ(F) = (i/2)·q^F (the cotangent covector at
/// τ); the pairing with a tangent direction δ is 2 Re(δ · gradient).
pub fn gardiner_gradient(p: &TorusPoint, f: &TorusFoliation) -> Complex64 {
    Complex64::i() * 0.5 * hm_section_torus(p, f)
}

/// Directional derivative of the extremal length along δ in the τ-plane.
pub fn gardiner_pairing(p: &TorusPoint, f: &TorusFoliation, delta: Complex64) -> f64 {
    2.0 * (delta * gardiner_gradient(p, f)).re
}

fn filling(f: &TorusFoliation, g: &TorusFoliation) -> bool {
    // Genus-1 filling criterion: the classes are not proportional.
    f.class.0 * g.class.1 - f.class.1 * g.class.0 != 0
}

pub struct CriticalPoint {
    pub point: TorusPoint,
    /// |q^F + q^G| at the critical point (equals the Euclidean gradient norm).
    pub certificate: f64,
    pub iterations: usize,
}

pub const GRADIENT_TOL: f64 = 1e-10;
const ARMIJO_C1: f64 = 1e-4;
const MAX_DESCENT_ITERS: usize = 10_000;

/// Unique critical point of ext(F) + ext(G) for a filling pair, located by
/// Armijo-backtracking gradient descent from `start`.
pub fn critical_point_from(
    f: &TorusFoliation,
    g: &TorusFoliation,
    start: TorusPoint,
) -> Result<CriticalPoint> {
    if !filling(f, g) {
        return Err(EpsteinLabError::NotFilling(format!(
            "classes {:?} and {:?} are proportional",
            f.class, g.class
        )));
    }
    let energy = |tau: Complex64| -> f64 {
        let p = TorusPoint { tau };
        extremal_length(&p, f) + extremal_length(&p, g)
    };
    let grad = |tau: Complex64| -> Complex64 {
        let p = TorusPoint { tau };
        gardiner_gradient(&p, f) + gardiner_gradient(&p, g)
    };
    let mut tau = start.tau;
    let mut e = energy(tau);
    let mut prev: Option<(Complex64, Complex64)> = None; // (tau, euclid grad)
    for it in 0..MAX_DESCENT_ITERS {
        let gr = grad(tau);
        // Euclidean gradient of E over (x, y): (2 Re g, −2 Im g).
        let ge = Complex64::new(2.0 * gr.re, -2.0 * gr.im);
        let norm = ge.norm();
        if norm < GRADIENT_TOL {
            let c_sum = hm_section_torus(&TorusPoint { tau }, f)
                + hm_section_torus(&TorusPoint { tau }, g);
            return Ok(CriticalPoint {
                point: TorusPoint { tau },
                certificate: c_sum.norm(),
                iterations: it,
            });
        }
        // Barzilai–Borwein initial step, safeguarded by Armijo backtracking.
        let mut step = match prev {
            Some((tau_p, ge_p)) => {
                let dx = tau - tau_p;
                let dg = ge - ge_p;
                let denom = (dx * dg.conj()).re;
                if denom > 0.0 {
                    (dx.norm_sqr() / denom).clamp(1e-8, 1e3)
                } else {
                    0.5
                }
            }
            None => 0.5,
        };
        prev = Some((tau, ge));
        loop {
            let cand = tau - step * ge;
            if cand.im > 0.0 {
                let ec = energy(cand);
                if ec <= e - ARMIJO_C1 * step * norm * norm {
                    tau = cand;
                    e = ec;
                    break;
                }
            }
            step *= 0.5;
            if step < 1e-18 {
                return Err(EpsteinLabError::Solver(
                    "gradient descent line search stalled".into(),
                ));
            }
        }
    }
    Err(EpsteinLabError::Solver(format!(
        "gradient descent did not reach tolerance in {MAX_DESCENT_ITERS} iterations"
    )))
}

/// Critical point from the default start.
pub fn critical_point(f: &TorusFoliation, g: &TorusFoliation) -> Result<CriticalPoint> {
    critical_point_from(f, g, TorusPoint { tau: Complex64::new(0.21, 1.37) })
}

/// Points p(√t F, (1/√t) G) over the grid; all lie on one hyperbolic geodesic
/// of the upper half-plane.
pub fn teich_line(
    f: &TorusFoliation,
    g: &TorusFoliation,
    t_grid: &[f64],
) -> Result<Vec<TorusPoint>> {
    if t_grid.iter().any(|t| *t <= 0.0) {
        return Err(EpsteinLabError::Invalid("line parameters must be positive".into()));
    }
    let mut out = Vec::with_capacity(t_grid.len());
    let mut start = TorusPoint { tau: Complex64::new(0.21, 1.37) };
    for &t in t_grid {
        let ft = f.scaled(t.sqrt());
        let gt = g.scaled(1.0 / t.sqrt());
        let cp = critical_point_from(&ft, &gt, start)?;
        start = cp.point; // warm start along the line
        out.push(cp.point);
    }
    Ok(out)
}

/// Max deviation of the points from the best hyperbolic geodesic through the
/// first and last (vertical line or circle centered on the real axis).
pub fn geodesic_collinearity_residual(points: &[TorusPoint]) -> f64 {
    if points.len() < 3 {
        return 0.0;
    }
    let a = points[0].tau;
    let b = points[points.len() - 1].tau;
    if (a.re - b.re).abs() < 1e-9 * (1.0 + a.norm()) {
        return points
            .iter()
            .map(|p| (p.tau.re - a.re).abs())
            .fold(0.0, f64::max);
    }
    let c = (b.norm_sqr() - a.norm_sqr()) / (2.0 * (b.re - a.re));
    let r = (a - Complex64::new(c, 0.0)).norm();
    points
        .iter()
        .map(|p| ((p.tau - Complex64::new(c, 0.0)).norm() - r).abs() / r)
        .fold(0.0, f64::max)
}

/// Hyperbolic distance on the upper half-plane (the genus-1 Teichmüller
/// metric model, up to the customary factor convention).
pub fn upper_half_plane_distance(a: Complex64, b: Complex64) -> f64 {
    let num = (a - b).norm_sqr();
    (1.0 + num / (2.0 * a.im * b.im)).acosh()
}

/// Side of the horizontal/vertical dichotomy for intersection numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoliationSide {
    Horizontal,
    Vertical,
}

/// Intersection number of the horizontal (|Im ∫√q|) or vertical (|Re ∫√q|)
/// foliation of q = c·dz² with the straight representative of (a, b).
pub fn torus_intersection_number(
    p: &TorusPoint,
    c: Complex64,
    class: (i64, i64),
    side: FoliationSide,
) -> Result<f64> {
    if class == (0, 0) {
        return Err(EpsteinLabError::Invalid("zero curve class".into()));
    }
    let period = c.sqrt() * (Complex64::new(class.0 as f64, 0.0) + class.1 as f64 * p.tau);
    Ok(match side {
        FoliationSide::Horizontal => period.im.abs(),
        FoliationSide::Vertical => period.re.abs(),
    })
}

// ---------------------------------------------------------------------------
// Flat polygon surfaces

/// Translation surface given by planar polygons with edges glued in opposite
/// pairs. Edge e of polygon p runs from vertex e to vertex e+1 (mod len).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FlatSurface {
    pub polygons: Vec<Vec<Complex64>>,
    /// Pairs ((p, e), (p', e')) with edge vectors satisfying v_e = −v_{e'}.
    pub pairings: Vec<((usize, usize), (usize, usize))>,
}

#[derive(Debug, Clone)]
pub struct FlatSurfaceInfo {
    pub genus: usize,
    pub n_vertex_classes: usize,
    pub cone_angles: Vec<f64>,
    /// Zero orders k_i (cone angle (k+2)π) per vertex class.
    pub zero_orders: Vec<i64>,
}

impl FlatSurface {
    pub fn edge_vector(&self, p: usize, e: usize) -> Complex64 {
        let poly = &self.polygons[p];
        poly[(e + 1) % poly.len()] - poly[e]
    }

    fn corner_count(&self) -> usize {
        self.polygons.iter().map(|p| p.len()).sum()
    }

    fn corner_index(&self, p: usize, v: usize) -> usize {
        self.polygons[..p].iter().map(|q| q.len()).sum::<usize>() + v % self.polygons[p].len()
    }

    /// Validates closure, involutivity, and translation gluing; derives the
    /// vertex classes with their cone angles and the stratum data.
    pub fn analyze(&self) -> Result<FlatSurfaceInfo> {
        for (pi, poly) in self.polygons.iter().enumerate() {
            if poly.len() < 3 {
                return Err(EpsteinLabError::Invalid(format!("polygon {pi} has < 3 vertices")));
            }
            let total: Complex64 = (0..poly.len()).map(|e| self.edge_vector(pi, e)).sum();
            if total.norm() > 1e-9 {
                return Err(EpsteinLabError::Invalid(format!(
                    "polygon {pi} does not close (edge sum {total})"
                )));
            }
        }
        // Every edge paired exactly once, involutively, by translation.
        let mut partner = vec![None; self.corner_count()];
        for &((p, e), (q, f)) in &self.pairings {
            if p >= self.polygons.len()
                || q >= self.polygons.len()
                || e >= self.polygons[p].len()
                || f >= self.polygons[q].len()
            {
                return Err(EpsteinLabError::Invalid("pairing index out of range".into()));
            }
            let a = self.corner_index(p, e);
            let b = self.corner_index(q, f);
            if partner[a].is_some() || partner[b].is_some() || a == b {
                return Err(EpsteinLabError::Invalid(
                    "pairing is not involutive (edge reused)".into(),
                ));
            }
            partner[a] = Some((q, f));
            partner[b] = Some((p, e));
            let va = self.edge_vector(p, e);
            let vb = self.edge_vector(q, f);
            if (va + vb).norm() > 1e-9 * (1.0 + va.norm()) {
                return Err(EpsteinLabError::Invalid(format!(
                    "edges ({p},{e}) and ({q},{f}) are not glued by translation"
                )));
            }
        }
        if partner.iter().any(|x| x.is_none()) {
            return Err(EpsteinLabError::Invalid("unpaired edge".into()));
        }
        // Corner classes: start of edge e glues to the end of its partner.
        let mut uf: Vec<usize> = (0..self.corner_count()).collect();
        fn find(uf: &mut Vec<usize>, i: usize) -> usize {
            if uf[i] != i {
                let r = find(uf, uf[i]);
                uf[i] = r;
                r
            } else {
                i
            }
        }
        for &((p, e), (q, f)) in &self.pairings {
            for ((p1, c1), (p2, c2)) in [((p, e), (q, f + 1)), ((p, e + 1), (q, f))] {
                let a = self.corner_index(p1, c1);
                let b = self.corner_index(p2, c2);
                let (ra, rb) = (find(&mut uf, a), find(&mut uf, b));
                if ra != rb {
                    uf[ra.max(rb)] = ra.min(rb);
                }
            }
        }
        let mut angle_by_root: std::collections::BTreeMap<usize, f64> =
            std::collections::BTreeMap::new();
        for (pi, poly) in self.polygons.iter().enumerate() {
            let l = poly.len();
            for v in 0..l {
                let outgoing = self.edge_vector(pi, v);
                let incoming = self.edge_vector(pi, (v + l - 1) % l);
                let mut ang = (-incoming / outgoing).arg();
                if ang <= 0.0 {
                    ang += 2.0 * std::f64::consts::PI;
                }
                let root = find(&mut uf, self.corner_index(pi, v));
                *angle_by_root.entry(root).or_insert(0.0) += ang;
            }
        }
        let cone_angles: Vec<f64> = angle_by_root.values().copied().collect();
        let mut zero_orders = Vec::with_capacity(cone_angles.len());
        for &ang in &cone_angles {
            let ratio = ang / std::f64::consts::PI;
            let k = ratio.round() as i64 - 2;
            if (ratio - ratio.round()).abs() > 1e-8 {
                return Err(EpsteinLabError::Invalid(format!(
                    "cone angle {ang} is not a multiple of π"
                )));
            }
            zero_orders.push(k);
        }
        let v = cone_angles.len() as i64;
        let e = (self.corner_count() / 2) as i64;
        let f = self.polygons.len() as i64;
        let chi = v - e + f;
        if chi % 2 != 0 || chi > 0 {
            return Err(EpsteinLabError::Invalid(format!(
                "surface has Euler characteristic {chi}"
            )));
        }
        let genus = ((2 - chi) / 2) as usize;
        let ksum: i64 = zero_orders.iter().sum();
        if ksum != 4 * genus as i64 - 4 {
            return Err(EpsteinLabError::Invalid(format!(
                "zero orders sum to {ksum}, expected {}",
                4 * genus as i64 - 4
            )));
        }
        Ok(FlatSurfaceInfo {
            genus,
            n_vertex_classes: cone_angles.len(),
            cone_angles,
            zero_orders,
        })
    }

    /// Torus from the unit lattice parallelogram (1, τ).
    pub fn torus(tau: Complex64) -> FlatSurface {
        let z = Complex64::new(0.0, 0.0);
        let one = Complex64::new(1.0, 0.0);
        FlatSurface {
            polygons: vec![vec![z, one, one + tau, tau]],
            pairings: vec![((0, 0), (0, 2)), ((0, 1), (0, 3))],
        }
    }

    /// The regular-octagon genus-2 translation surface (opposite sides glued).
    pub fn regular_octagon() -> FlatSurface {
        let mut verts = Vec::with_capacity(8);
        for k in 0..8 {
            let th = (2.0 * k as f64 + 1.0) * std::f64::consts::PI / 8.0;
            verts.push(Complex64::from_polar(1.0, th));
        }
        FlatSurface {
            polygons: vec![verts],
            pairings: (0..4).map(|k| ((0usize, k), (0usize, k + 4))).collect(),
        }
    }
}

/// Directed edge step of a cycle: (polygon, edge, orientation ±1).
pub type CycleStep = (usize, usize, i64);

/// Complex periods ∫_γ ω over edge-path cycles; the real and imaginary parts
/// are the intersection numbers with the vertical and horizontal foliations.
pub fn periods(s: &FlatSurface, cycles: &[Vec<CycleStep>]) -> Result<Vec<Complex64>> {
    let info = s.analyze()?;
    let _ = info;
    // Rebuild corner classes for the closedness check.
    let mut uf: Vec<usize> = (0..s.corner_count()).collect();
    fn find(uf: &mut Vec<usize>, i: usize) -> usize {
        if uf[i] != i {
            let r = find(uf, uf[i]);
            uf[i] = r;
            r
        } else {
            i
        }
    }
    for &((p, e), (q, f)) in &s.pairings {
        for ((p1, c1), (p2, c2)) in [((p, e), (q, f + 1)), ((p, e + 1), (q, f))] {
            let a = s.corner_index(p1, c1);
            let b = s.corner_index(p2, c2);
            let (ra, rb) = (find(&mut uf, a), find(&mut uf, b));
            if ra != rb {
                uf[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut out = Vec::with_capacity(cycles.len());
    for (ci, cycle) in cycles.iter().enumerate() {
        if cycle.is_empty() {
            return Err(EpsteinLabError::Invalid(format!("cycle {ci} is empty")));
        }
        let mut period = Complex64::new(0.0, 0.0);
        let mut current: Option<usize> = None;
        let mut start: Option<usize> = None;
        for &(p, e, sign) in cycle {
            if p >= s.polygons.len() || e >= s.polygons[p].len() || sign.abs() != 1 {
                return Err(EpsteinLabError::Invalid(format!("bad step in cycle {ci}")));
            }
            let (tail, head) = if sign > 0 { (e, e + 1) } else { (e + 1, e) };
            let tail_c = find(&mut uf, s.corner_index(p, tail));
            let head_c = find(&mut uf, s.corner_index(p, head));
            if let Some(cur) = current {
                if cur != tail_c {
                    return Err(EpsteinLabError::Invalid(format!(
                        "cycle {ci} is not a connected edge path"
                    )));
                }
            } else {
                start = Some(tail_c);
            }
            current = Some(head_c);
            period += s.edge_vector(p, e) * sign as f64;
        }
        if current != start {
            return Err(EpsteinLabError::Invalid(format!("cycle {ci} is not closed")));
        }
        out.push(period);
    }
    Ok(out)
}

/// Intersection of an edge-path cycle with the horizontal or vertical
/// foliation of the translation structure (straight representatives are
/// geodesic on flat surfaces).
pub fn flat_intersection_number(
    s: &FlatSurface,
    cycle: &[CycleStep],
    side: FoliationSide,
) -> Result<f64> {
    let p = periods(s, &[cycle.to_vec()])?[0];
    Ok(match side {
        FoliationSide::Horizontal => p.im.abs(),
        FoliationSide::Vertical => p.re.abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sq() -> TorusPoint {
        TorusPoint::new(Complex64::new(0.0, 1.0)).unwrap()
    }

    #[test]
    fn hm_section_square_torus_horizontal() {
        let f = TorusFoliation::new(1, 0, 1.0).unwrap();
        let c = hm_section_torus(&sq(), &f);
        assert!(c.im.abs() < 1e-15 && c.re > 0.0, "c = {c}");
        // Transverse measures against the basis match t|a n − b m|.
        for (a, b) in [(1i64, 0i64), (0, 1), (2, -3), (5, 4)] {
            let i_num =
                torus_intersection_number(&sq(), c, (a, b), FoliationSide::Horizontal).unwrap();
            assert!(
                (i_num - f.intersection_with_class(a, b)).abs() < 1e-12,
                "class ({a},{b})"
            );
        }
    }

    #[test]
    fn hm_section_brute_force_intersection_matching() {
        // The realizing differential reproduces the foliation's intersection
        // numbers on every torus tried.
        let taus = [
            Complex64::new(0.3, 0.8),
            Complex64::new(-0.45, 2.2),
            Complex64::new(0.0, 0.5),
        ];
        let fols = [
            TorusFoliation::new(1, 0, 1.0).unwrap(),
            TorusFoliation::new(2, 3, 0.7).unwrap(),
            TorusFoliation::new(-1, 4, 2.3).unwrap(),
        ];
        for tau in taus {
            let p = TorusPoint::new(tau).unwrap();
            for f in &fols {
                let c = hm_section_torus(&p, f);
                for a in -4i64..=4 {
                    for b in -4i64..=4 {
                        if (a, b) == (0, 0) {
                            continue;
                        }
                        let lhs = torus_intersection_number(&p, c, (a, b), FoliationSide::Horizontal)
                            .unwrap();
                        let rhs = f.intersection_with_class(a, b);
                        assert!((lhs - rhs).abs() < 1e-10 * (1.0 + rhs));
                    }
                }
            }
        }
    }

    #[test]
    fn hm_section_scaling_and_negation() {
        let p = TorusPoint::new(Complex64::new(0.4, 1.3)).unwrap();
        let f = TorusFoliation::new(2, -1, 0.9).unwrap();
        let c = hm_section_torus(&p, &f);
        // Weight t scales the differential by t².
        let c3 = hm_section_torus(&p, &f.scaled(3.0));
        assert!((c3 - 9.0 * c).norm() < 1e-12 * c.norm());
        // Realizing F as the vertical foliation is the negated differential:
        // hor(q) and ver(−q) have the same intersection numbers.
        for (a, b) in [(1i64, 0i64), (0, 1), (3, -2)] {
            let hor = torus_intersection_number(&p, c, (a, b), FoliationSide::Horizontal).unwrap();
            let ver = torus_intersection_number(&p, -c, (a, b), FoliationSide::Vertical).unwrap();
            assert!((hor - ver).abs() < 1e-12 * (1.0 + hor));
        }
    }

    /// Brute-force extremal length on the flat torus: straight-representative
    /// length squared over area, with the length integrated numerically and
    /// the area from the shoelace formula.
    fn extremal_length_oracle(p: &TorusPoint, f: &TorusFoliation) -> f64 {
        let ((m, n), t) = f.reduced();
        let seg = Complex64::new(m as f64, 0.0) + n as f64 * p.tau;
        let pieces = 4096;
        let mut len = 0.0;
        for k in 0..pieces {
            let a = seg * (k as f64 / pieces as f64);
            let b = seg * ((k + 1) as f64 / pieces as f64);
            len += (b - a).norm();
        }
        let quad = FlatSurface::torus(p.tau).polygons[0].clone();
        let mut area = 0.0;
        for i in 0..quad.len() {
            let a = quad[i];
            let b = quad[(i + 1) % quad.len()];
            area += a.re * b.im - b.re * a.im;
        }
        area = 0.5 * area.abs();
        t * t * len * len / area
    }

    #[test]
    fn extremal_length_examples_and_oracle() {
        let f10 = TorusFoliation::new(1, 0, 1.0).unwrap();
        assert!((extremal_length(&sq(), &f10) - 1.0).abs() < 1e-14);

        let tall = TorusPoint::new(Complex64::new(0.0, 2.0)).unwrap();
        let f01 = TorusFoliation::new(0, 1, 1.0).unwrap();
        assert!((extremal_length(&tall, &f01) - 2.0).abs() < 1e-14);

        // ext(tF) = t² ext(F), exactly.
        let p = TorusPoint::new(Complex64::new(0.37, 1.21)).unwrap();
        let f = TorusFoliation::new(3, 2, 1.4).unwrap();
        assert!(
            (extremal_length(&p, &f.scaled(3.0)) - 9.0 * extremal_length(&p, &f)).abs()
                < 1e-12 * extremal_length(&p, &f)
        );

        // Brute-force length²/area oracle.
        for fol in [f10, f01, TorusFoliation::new(2, -3, 1.7).unwrap()] {
            for tau in [Complex64::new(0.0, 1.0), Complex64::new(0.3, 0.9)] {
                let p = TorusPoint::new(tau).unwrap();
                let a = extremal_length(&p, &fol);
                let b = extremal_length_oracle(&p, &fol);
                assert!((a - b).abs() < 1e-10 * (1.0 + b), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gardiner_gradient_examples() {
        // ext = 1/Im τ for (1, 0): derivative in the vertical direction is −1
        // at τ = i.
        let f = TorusFoliation::new(1, 0, 1.0).unwrap();
        let d = gardiner_pairing(&sq(), &f, Complex64::i());
        assert!((d + 1.0).abs() < 1e-13, "pairing {d}");

        // Finite-difference oracle over assorted points and directions.
        let cases = [
            (Complex64::new(0.2, 0.7), TorusFoliation::new(1, 2, 1.1).unwrap()),
            (Complex64::new(-0.4, 1.9), TorusFoliation::new(3, -1, 0.6).unwrap()),
        ];
        for (tau, fol) in cases {
            let p = TorusPoint::new(tau).unwrap();
            for delta in [Complex64::new(1.0, 0.0), Complex64::new(0.3, -0.8)] {
                let eps = 1e-6;
                let ep = extremal_length(&TorusPoint::new(tau + eps * delta).unwrap(), &fol);
                let em = extremal_length(&TorusPoint::new(tau - eps * delta).unwrap(), &fol);
                let fd = (ep - em) / (2.0 * eps);
                let an = gardiner_pairing(&p, &fol, delta);
                assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{fd} vs {an}");
            }
        }

        // Scaling: gradient of ext(tF) is t² times the gradient.
        let p = TorusPoint::new(Complex64::new(0.15, 1.4)).unwrap();
        let fol = TorusFoliation::new(2, 5, 0.8).unwrap();
        let g1 = gardiner_gradient(&p, &fol);
        let g2 = gardiner_gradient(&p, &fol.scaled(2.0));
        assert!((g2 - 4.0 * g1).norm() < 1e-13 * g1.norm());
    }

    #[test]
    fn critical_point_square_case() {
        let f = TorusFoliation::new(1, 0, 1.0).unwrap();
        let g = TorusFoliation::new(0, 1, 1.0).unwrap();
        let cp = critical_point(&f, &g).unwrap();
        assert!((cp.point.tau - Complex64::i()).norm() < 1e-8, "tau* = {}", cp.point.tau);
        assert!(cp.certificate < 1e-10);
        // Equal extremal lengths at the Gardiner–Masur point.
        let ef = extremal_length(&cp.point, &f);
        let eg = extremal_length(&cp.point, &g);
        assert!((ef - eg).abs() < 1e-8);
    }

    #[test]
    fn critical_point_scale_invariance_and_filling() {
        let f = TorusFoliation::new(2, 1, 1.3).unwrap();
        let g = TorusFoliation::new(-1, 1, 0.7).unwrap();
        let p1 = critical_point(&f, &g).unwrap();
        let p2 = critical_point(&f.scaled(2.0), &g.scaled(2.0)).unwrap();
        assert!((p1.point.tau - p2.point.tau).norm() < 1e-8);
        assert!((extremal_length(&p1.point, &f) - extremal_length(&p1.point, &g)).abs() < 1e-8);

        let parallel = TorusFoliation::new(4, 2, 1.0).unwrap();
        assert!(matches!(
            critical_point(&f, &parallel),
            Err(EpsteinLabError::NotFilling(_))
        ));
    }

    #[test]
    fn critical_point_reminimization_from_other_starts() {
        let f = TorusFoliation::new(1, 2, 1.0).unwrap();
        let g = TorusFoliation::new(1, -1, 1.6).unwrap();
        let a = critical_point_from(&f, &g, TorusPoint::new(Complex64::new(0.9, 0.3)).unwrap())
            .unwrap();
        let b = critical_point_from(&f, &g, TorusPoint::new(Complex64::new(-1.2, 2.6)).unwrap())
            .unwrap();
        assert!((a.point.tau - b.point.tau).norm() < 1e-8);
    }

    #[test]
    fn teich_line_square_case_is_imaginary_axis() {
        let f = TorusFoliation::new(1, 0, 1.0).unwrap();
        let g = TorusFoliation::new(0, 1, 1.0).unwrap();
        let grid: Vec<f64> = (0..9).map(|k| 0.4 + 0.2 * k as f64).collect();
        let pts = teich_line(&f, &g, &grid).unwrap();
        for (t, p) in grid.iter().zip(&pts) {
            assert!(p.tau.re.abs() < 1e-8);
            assert!((p.tau.im - t).abs() < 1e-7, "expected {} got {}", t, p.tau.im);
        }
        assert!(geodesic_collinearity_residual(&pts) < 1e-6);
        // t = 1 recovers the critical point of the unscaled pair.
        let cp = critical_point(&f, &g).unwrap();
        let at1 = teich_line(&f, &g, &[1.0]).unwrap()[0];
        assert!((cp.point.tau - at1.tau).norm() < 1e-8);
    }

    #[test]
    fn teich_line_generic_pair_collinear_and_injective() {
        let f = TorusFoliation::new(2, 1, 1.3).unwrap();
        let g = TorusFoliation::new(-1, 1, 0.7).unwrap();
        let grid: Vec<f64> = (0..7).map(|k| 0.5 * 1.4f64.powi(k)).collect();
        let pts = teich_line(&f, &g, &grid).unwrap();
        let res = geodesic_collinearity_residual(&pts);
        assert!(res < 1e-6, "collinearity residual {res:.3e}");
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                assert!(upper_half_plane_distance(pts[i].tau, pts[j].tau) > 1e-6);
            }
        }
    }

    #[test]
    fn torus_intersection_examples_and_filling_scan() {
        // q = dz² on the square torus.
        let c = Complex64::new(1.0, 0.0);
        let horizontal =
            torus_intersection_number(&sq(), c, (0, 1), FoliationSide::Horizontal).unwrap();
        assert!((horizontal - 1.0).abs() < 1e-14);
        let leaf = torus_intersection_number(&sq(), c, (1, 0), FoliationSide::Horizontal).unwrap();
        assert!(leaf.abs() < 1e-14);
        assert!(torus_intersection_number(&sq(), c, (0, 0), FoliationSide::Horizontal).is_err());

        // hor(q) and ver(q) fill: the total intersection is positive over all
        // primitive classes in the scan window.
        let p = TorusPoint::new(Complex64::new(0.23, 1.07)).unwrap();
        let q = hm_section_torus(&p, &TorusFoliation::new(2, 1, 1.0).unwrap());
        for m in -20i64..=20 {
            for n in -20i64..=20 {
                if (m, n) == (0, 0) || gcd(m.unsigned_abs(), n.unsigned_abs()) != 1 {
                    continue;
                }
                let total = torus_intersection_number(&p, q, (m, n), FoliationSide::Horizontal)
                    .unwrap()
                    + torus_intersection_number(&p, q, (m, n), FoliationSide::Vertical).unwrap();
                assert!(total > 1e-6, "classes ({m},{n}) total {total}");
            }
        }
    }

    #[test]
    fn flat_torus_periods() {
        let s = FlatSurface::torus(Complex64::new(0.0, 1.0));
        let cycles = vec![vec![(0usize, 0usize, 1i64)], vec![(0, 3, -1)]];
        let per = periods(&s, &cycles).unwrap();
        assert!((per[0] - Complex64::new(1.0, 0.0)).norm() < 1e-14);
        assert!((per[1] - Complex64::new(0.0, 1.0)).norm() < 1e-14);

        let tau = Complex64::new(0.31, 1.42);
        let s = FlatSurface::torus(tau);
        let per = periods(&s, &cycles).unwrap();
        assert!((per[0] - Complex64::new(1.0, 0.0)).norm() < 1e-14);
        assert!((per[1] - tau).norm() < 1e-12);
    }

    #[test]
    fn octagon_surface_stratum_and_periods() {
        let s = FlatSurface::regular_octagon();
        let info = s.analyze().unwrap();
        assert_eq!(info.genus, 2);
        assert_eq!(info.n_vertex_classes, 1);
        assert_eq!(info.zero_orders, vec![4]);
        assert!((info.cone_angles[0] - 6.0 * std::f64::consts::PI).abs() < 1e-9);

        // All octagon corners are one vertex class, so single edges close.
        let cycles: Vec<Vec<CycleStep>> = (0..4).map(|e| vec![(0usize, e, 1i64)]).collect();
        let per = periods(&s, &cycles).unwrap();
        for (e, p) in per.iter().enumerate() {
            assert!((p - s.edge_vector(0, e)).norm() < 1e-14);
        }
        let h = flat_intersection_number(&s, &[(0, 0, 1)], FoliationSide::Horizontal).unwrap();
        assert!((h - s.edge_vector(0, 0).im.abs()).abs() < 1e-14);
    }

    #[test]
    fn flat_surface_validation_errors() {
        // Non-closing polygon.
        let bad = FlatSurface {
            polygons: vec![vec![
                Complex64::new(0.0, 0.0),
                Complex64::new(1.0, 0.0),
                Complex64::new(1.0, 1.0),
            ]],
            pairings: vec![],
        };
        // A triangle closes automatically as a polygon; break the pairing
        // instead: unpaired edges.
        assert!(bad.analyze().is_err());

        // Pairing that is not a translation.
        let mut torus = FlatSurface::torus(Complex64::new(0.0, 1.0));
        torus.pairings = vec![((0, 0), (0, 1)), ((0, 2), (0, 3))];
        assert!(torus.analyze().is_err());

        // Non-closed path: on a two-square torus the corners fall into two
        // classes, so a single vertical edge is not a closed cycle.
        let z = |x: f64, y: f64| Complex64::new(x, y);
        let two_square = FlatSurface {
            polygons: vec![
                vec![z(0.0, 0.0), z(1.0, 0.0), z(1.0, 1.0), z(0.0, 1.0)],
                vec![z(0.0, 1.0), z(1.0, 1.0), z(1.0, 2.0), z(0.0, 2.0)],
            ],
            pairings: vec![
                ((0, 0), (1, 2)), // bottom of A glues to top of B
                ((0, 2), (1, 0)), // top of A glues to bottom of B
                ((0, 1), (0, 3)),
                ((1, 1), (1, 3)),
            ],
        };
        assert_eq!(two_square.analyze().unwrap().genus, 1);
        assert!(periods(&two_square, &[vec![(0, 1, 1)]]).is_err());
        // While the two-edge vertical loop through both squares closes.
        let per = periods(&two_square, &[vec![(0, 1, 1), (1, 1, 1)]]).unwrap();
        assert!((per[0] - z(0.0, 2.0)).norm() < 1e-14);
    }
}
