//! Discrete closed hyperbolic surfaces: the genus-2 regular-octagon mesh,
//! cotangent Laplacian, curvature under conformal change, and the
//! positive-definite Helmholtz-type solver (f − Δ) u = rhs.
//!
//! The mesh metric is carried by per-triangle hyperbolic edge lengths.
//! Operators are assembled from the Euclidean realization of those lengths
//! (angles and areas by the Euclidean laws), which is the piecewise-flat
//! surrogate whose truncation error is measured, not assumed, by the
//! refinement tests. The Laplacian follows the analyst's sign convention:
//! ⟨u, Δu⟩ ≤ 0 and constants are in the kernel.

use num_complex::Complex64;
use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::sparse::{conjugate_gradient, Csr, Triplets};
use crate::{EpsteinLabError, Result};

/// One real value per vertex.
pub type ScalarField = Vec<f64>;

pub const CG_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    Laplacian,
    Helmholtz,
}

/// Sparse symmetric operator over vertex space, stored as the mass-weighted
/// bilinear form together with the lumped mass vector. The pointwise action
/// is M⁻¹ · matrix.
#[derive(Debug, Clone)]
pub struct LinearOperator {
    pub kind: OperatorKind,
    pub matrix: Csr,
    pub mass: Vec<f64>,
}

impl LinearOperator {
    pub fn apply_pointwise(&self, u: &[f64]) -> Vec<f64> {
        let mut y = self.matrix.apply_vec(u);
        for (yi, m) in y.iter_mut().zip(&self.mass) {
            *yi /= *m;
        }
        y
    }

    pub fn apply_bilinear(&self, u: &[f64]) -> Vec<f64> {
        self.matrix.apply_vec(u)
    }

    pub fn n(&self) -> usize {
        self.matrix.n
    }
}

/// Triangulated closed surface with hyperbolic edge lengths.
#[derive(Debug, Clone)]
pub struct HyperbolicMesh {
    pub genus: usize,
    pub n_vertices: usize,
    pub triangles: Vec<[usize; 3]>,
    /// `tri_lengths[t][k]` = hyperbolic length of the side from corner k to
    /// corner k+1 of triangle t.
    pub tri_lengths: Vec<[f64; 3]>,
    /// Poincaré-disk positions of a fundamental-domain representative per
    /// vertex, when the mesh was built here (imports may lack them).
    pub positions: Option<Vec<Complex64>>,
}

fn euclidean_angles(l: &[f64; 3]) -> Result<[f64; 3]> {
    // Angle at corner k is opposite the side (k+1, k+2), i.e. side k+1.
    let mut ang = [0.0; 3];
    for k in 0..3 {
        let opp = l[(k + 1) % 3];
        let a = l[k];
        let b = l[(k + 2) % 3];
        let cosv = (a * a + b * b - opp * opp) / (2.0 * a * b);
        if !(-1.0..=1.0).contains(&cosv) || !cosv.is_finite() {
            return Err(EpsteinLabError::Degenerate(format!(
                "triangle with sides {l:?} violates the triangle inequality"
            )));
        }
        ang[k] = cosv.acos();
    }
    Ok(ang)
}

fn heron_area(l: &[f64; 3]) -> Result<f64> {
    let s = 0.5 * (l[0] + l[1] + l[2]);
    let q = s * (s - l[0]) * (s - l[1]) * (s - l[2]);
    if q <= 0.0 {
        return Err(EpsteinLabError::Degenerate(format!(
            "degenerate triangle with sides {l:?}"
        )));
    }
    Ok(q.sqrt())
}

impl HyperbolicMesh {
    pub fn euler_characteristic(&self) -> i64 {
        let f = self.triangles.len() as i64;
        // Closed triangulated surface: E = 3F/2.
        self.n_vertices as i64 - 3 * f / 2 + f
    }

    /// Total surface area of the piecewise-flat realization (converges to
    /// 4π(g−1) under refinement).
    pub fn area(&self) -> Result<f64> {
        let mut total = 0.0;
        for l in &self.tri_lengths {
            total += heron_area(l)?;
        }
        Ok(total)
    }

    /// Lumped vertex masses (one third of incident triangle areas).
    pub fn vertex_mass(&self) -> Result<Vec<f64>> {
        let mut mass = vec![0.0; self.n_vertices];
        for (t, tri) in self.triangles.iter().enumerate() {
            let a = heron_area(&self.tri_lengths[t])? / 3.0;
            for &v in tri {
                mass[v] += a;
            }
        }
        Ok(mass)
    }

    /// Angle defect 2π − Σ(angles) per vertex, with Euclidean angles derived
    /// from the hyperbolic lengths. The total equals 2πχ exactly.
    pub fn vertex_angle_defect(&self) -> Result<Vec<f64>> {
        let mut defect = vec![2.0 * std::f64::consts::PI; self.n_vertices];
        for (t, tri) in self.triangles.iter().enumerate() {
            let ang = euclidean_angles(&self.tri_lengths[t])?;
            for k in 0..3 {
                defect[tri[k]] -= ang[k];
            }
        }
        Ok(defect)
    }

    pub fn total_angle_defect(&self) -> Result<f64> {
        Ok(self.vertex_angle_defect()?.iter().sum())
    }

    /// Cotangent Laplacian: symmetric, constants in the kernel, ⟨u, Lu⟩ ≤ 0.
    pub fn laplacian(&self) -> Result<LinearOperator> {
        let mut t = Triplets::new(self.n_vertices);
        for (ti, tri) in self.triangles.iter().enumerate() {
            let ang = euclidean_angles(&self.tri_lengths[ti])?;
            // Corner k faces side (k+1): connects vertices k+1 and k+2.
            for k in 0..3 {
                let w = 0.5 / ang[k].tan();
                let a = tri[(k + 1) % 3];
                let b = tri[(k + 2) % 3];
                t.push(a, b, w);
                t.push(b, a, w);
                t.push(a, a, -w);
                t.push(b, b, -w);
            }
        }
        Ok(LinearOperator {
            kind: OperatorKind::Laplacian,
            matrix: t.to_csr(),
            mass: self.vertex_mass()?,
        })
    }

    /// Bilinear form of the positive-definite operator f − Δ.
    pub fn helmholtz(&self, f: &ScalarField) -> Result<LinearOperator> {
        if f.len() != self.n_vertices {
            return Err(EpsteinLabError::Invalid("field length mismatch".into()));
        }
        if let Some((i, v)) = f.iter().enumerate().find(|(_, v)| **v <= 0.0) {
            return Err(EpsteinLabError::Positivity(format!(
                "helmholtz coefficient must be positive; f[{i}] = {v}"
            )));
        }
        let lap = self.laplacian()?;
        let diag: Vec<f64> = f.iter().zip(&lap.mass).map(|(fi, mi)| fi * mi).collect();
        Ok(LinearOperator {
            kind: OperatorKind::Helmholtz,
            matrix: lap.matrix.scaled(-1.0).add_diagonal(&diag),
            mass: lap.mass,
        })
    }
}

/// Curvature of e^{2u} h when the mesh metric h has curvature −1:
/// K = e^{−2u} (−Δu − 1) per vertex.
pub fn curvature_of_conformal(m: &HyperbolicMesh, u: &ScalarField) -> Result<ScalarField> {
    if u.len() != m.n_vertices {
        return Err(EpsteinLabError::Invalid("field length mismatch".into()));
    }
    let lap = m.laplacian()?;
    let du = lap.apply_pointwise(u);
    Ok(u.iter()
        .zip(&du)
        .map(|(ui, dui)| (-2.0 * ui).exp() * (-dui - 1.0))
        .collect())
}

pub struct HelmholtzSolution {
    pub u: ScalarField,
    pub iterations: usize,
    /// ‖f u − Δu − rhs‖₂ / ‖rhs‖₂ in the pointwise sense.
    pub residual: f64,
}

/// Solves (f − Δ) u = rhs by conjugate gradients on the mass-weighted form.
pub fn solve_helmholtz(
    m: &HyperbolicMesh,
    f: &ScalarField,
    rhs: &ScalarField,
    tol: f64,
) -> Result<HelmholtzSolution> {
    let op = m.helmholtz(f)?;
    solve_helmholtz_operator(&op, f, rhs, tol)
}

pub fn solve_helmholtz_operator(
    op: &LinearOperator,
    f: &ScalarField,
    rhs: &ScalarField,
    tol: f64,
) -> Result<HelmholtzSolution> {
    let n = op.n();
    if rhs.len() != n || f.len() != n {
        return Err(EpsteinLabError::Invalid("field length mismatch".into()));
    }
    let b: Vec<f64> = rhs.iter().zip(&op.mass).map(|(r, m)| r * m).collect();
    let (u, rep) = conjugate_gradient(&op.matrix, &b, None, tol, 10 * n.max(100))?;
    let lap_part = op.apply_pointwise(&u);
    let mut res = 0.0f64;
    let mut scale = 0.0f64;
    for k in 0..n {
        res += (lap_part[k] - rhs[k]).powi(2);
        scale += rhs[k].powi(2);
    }
    Ok(HelmholtzSolution {
        u,
        iterations: rep.iterations,
        residual: (res / scale.max(1e-300)).sqrt(),
    })
}

// --- genus-2 octagon construction -----------------------------------------

fn disk_distance(a: Complex64, b: Complex64) -> f64 {
    let t = (b - a) / (Complex64::new(1.0, 0.0) - a.conj() * b);
    2.0 * t.norm().atanh()
}

fn hyperbolic_midpoint(a: Complex64, b: Complex64) -> Complex64 {
    let t = (b - a) / (Complex64::new(1.0, 0.0) - a.conj() * b);
    let r = t.norm();
    if r == 0.0 {
        return a;
    }
    let rm = (r.atanh() * 0.5).tanh();
    let m = t / r * rm;
    (m + a) / (Complex64::new(1.0, 0.0) + a.conj() * m)
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }
    fn find(&mut self, i: usize) -> usize {
        if self.0[i] != i {
            let r = self.find(self.0[i]);
            self.0[i] = r;
            r
        } else {
            i
        }
    }
    fn union(&mut self, i: usize, j: usize) {
        let (ri, rj) = (self.find(i), self.find(j));
        if ri != rj {
            let lo = ri.min(rj);
            let hi = ri.max(rj);
            self.0[hi] = lo;
        }
    }
}

/// Closed genus-2 mesh from the regular hyperbolic octagon with all interior
/// angles π/4 and opposite sides identified. `subdiv` is the dyadic
/// refinement level: each of the 8 base triangles splits into 4^subdiv.
pub fn build_genus2_octagon(subdiv: u32) -> Result<HyperbolicMesh> {
    if subdiv < 1 {
        return Err(EpsteinLabError::Invalid("subdiv must be at least 1".into()));
    }
    let pi = std::f64::consts::PI;
    // Circumradius R of the regular octagon with vertex angle π/4:
    // cosh R = cot²(π/8).
    let cot8 = 1.0 / (pi / 8.0).tan();
    let radius = (cot8 * cot8).acosh();
    let rho = (radius * 0.5).tanh();
    let corner = |k: usize| -> Complex64 {
        let th = (2.0 * k as f64 + 1.0) * pi / 8.0;
        Complex64::new(rho * th.cos(), rho * th.sin())
    };

    let mut pos: Vec<Complex64> = Vec::new();
    let mut tris: Vec<[usize; 3]> = Vec::new();
    pos.push(Complex64::new(0.0, 0.0));
    let corner_ids: Vec<usize> = (0..8)
        .map(|k| {
            pos.push(corner(k));
            pos.len() - 1
        })
        .collect();
    for k in 0..8 {
        tris.push([0, corner_ids[k], corner_ids[(k + 1) % 8]]);
    }

    // Dyadic refinement with hyperbolic edge midpoints.
    for _ in 0..subdiv {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, pos: &mut Vec<Complex64>| -> usize {
            let key = (a.min(b), a.max(b));
            if let Some(&m) = mid.get(&key) {
                return m;
            }
            let m = hyperbolic_midpoint(pos[a], pos[b]);
            pos.push(m);
            let id = pos.len() - 1;
            mid.insert(key, id);
            id
        };
        let mut next = Vec::with_capacity(tris.len() * 4);
        for tri in &tris {
            let [a, b, c] = *tri;
            let ab = midpoint(a, b, &mut pos);
            let bc = midpoint(b, c, &mut pos);
            let ca = midpoint(c, a, &mut pos);
            next.push([a, ab, ca]);
            next.push([ab, b, bc]);
            next.push([ca, bc, c]);
            next.push([ab, bc, ca]);
        }
        tris = next;
    }

    // Boundary vertices per octagon side, ordered by distance from the side's
    // first corner. Side k runs from corner k to corner k+1.
    let on_side = |k: usize, p: Complex64| -> bool {
        let a = corner(k);
        let b = corner((k + 1) % 8);
        let ta = (p - a) / (Complex64::new(1.0, 0.0) - a.conj() * p);
        let tb = (b - a) / (Complex64::new(1.0, 0.0) - a.conj() * b);
        let cross = (ta * tb.conj()).im.abs();
        let along = (ta * tb.conj()).re;
        cross < 1e-11 && along > -1e-11 && ta.norm() <= tb.norm() + 1e-11
    };
    let mut side_vertices: Vec<Vec<(f64, usize)>> = vec![Vec::new(); 8];
    for (id, &p) in pos.iter().enumerate() {
        if corner_ids.contains(&id) || id == 0 {
            continue;
        }
        for k in 0..8 {
            if on_side(k, p) {
                side_vertices[k].push((disk_distance(corner(k), p), id));
            }
        }
    }
    for list in &mut side_vertices {
        list.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    }

    // Identify opposite sides with reversed orientation (corner k maps to
    // corner k+5), and all eight corners to a single vertex class.
    let mut uf = UnionFind::new(pos.len());
    for w in corner_ids.windows(2) {
        uf.union(w[0], w[1]);
    }
    let per_side = (1usize << subdiv) - 1;
    for k in 0..4 {
        let lhs = &side_vertices[k];
        let rhs = &side_vertices[k + 4];
        if lhs.len() != per_side || rhs.len() != per_side {
            return Err(EpsteinLabError::Degenerate(format!(
                "side {k} has {} subdivision points, expected {per_side}",
                lhs.len()
            )));
        }
        for i in 0..per_side {
            let (da, va) = lhs[i];
            // Reversed orientation: distance measured from corner k matches
            // distance measured from corner (k+4)+1 on the partner side.
            let (db, vb) = rhs[per_side - 1 - i];
            let side_len = disk_distance(corner(k), corner((k + 1) % 8));
            if (da - (side_len - db)).abs() > 1e-9 {
                return Err(EpsteinLabError::Degenerate(format!(
                    "side pairing mismatch on side {k}: {da} vs {}",
                    side_len - db
                )));
            }
            uf.union(va, vb);
        }
    }

    // Canonical ids.
    let mut canon: HashMap<usize, usize> = HashMap::new();
    let mut remap = vec![usize::MAX; pos.len()];
    let mut new_pos: Vec<Complex64> = Vec::new();
    for id in 0..pos.len() {
        let root = uf.find(id);
        let entry = *canon.entry(root).or_insert_with(|| {
            new_pos.push(pos[root]);
            new_pos.len() - 1
        });
        remap[id] = entry;
    }

    let mut triangles = Vec::with_capacity(tris.len());
    let mut tri_lengths = Vec::with_capacity(tris.len());
    for tri in &tris {
        let [a, b, c] = *tri;
        let l = [
            disk_distance(pos[a], pos[b]),
            disk_distance(pos[b], pos[c]),
            disk_distance(pos[c], pos[a]),
        ];
        triangles.push([remap[a], remap[b], remap[c]]);
        tri_lengths.push(l);
    }

    let mesh = HyperbolicMesh {
        genus: 2,
        n_vertices: new_pos.len(),
        triangles,
        tri_lengths,
        positions: Some(new_pos),
    };
    let chi = mesh.euler_characteristic();
    if chi != -2 {
        return Err(EpsteinLabError::Degenerate(format!(
            "octagon quotient has Euler characteristic {chi}, expected -2"
        )));
    }
    let defect = mesh.total_angle_defect()?;
    let expected = 2.0 * std::f64::consts::PI * chi as f64;
    if (defect - expected).abs() > 1e-9 * expected.abs() {
        return Err(EpsteinLabError::Degenerate(format!(
            "total angle defect {defect} deviates from 2πχ = {expected}"
        )));
    }
    Ok(mesh)
}

/// Fan chart around an interior vertex: 1-ring neighbors Möbius-translated so
/// the center sits at the origin. Unavailable for meshes without positions.
pub fn fan_chart(m: &HyperbolicMesh, vertex: usize) -> Option<Vec<(usize, Complex64)>> {
    let pos = m.positions.as_ref()?;
    let center = pos[vertex];
    let mut ring: Vec<(usize, Complex64)> = Vec::new();
    for tri in &m.triangles {
        if tri.contains(&vertex) {
            for &v in tri {
                if v != vertex && !ring.iter().any(|(id, _)| *id == v) {
                    let w = (pos[v] - center)
                        / (Complex64::new(1.0, 0.0) - center.conj() * pos[v]);
                    ring.push((v, w));
                }
            }
        }
    }
    Some(ring)
}

// --- import/export ----------------------------------------------------------

pub fn export_mesh<W: Write>(obj: &mut W, csv: &mut W, m: &HyperbolicMesh) -> Result<()> {
    if let Some(pos) = &m.positions {
        for p in pos {
            writeln!(obj, "v {} {} 0", p.re, p.im)?;
        }
    } else {
        for _ in 0..m.n_vertices {
            writeln!(obj, "v 0 0 0")?;
        }
    }
    for t in &m.triangles {
        writeln!(obj, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    writeln!(csv, "tri,va,vb,length")?;
    for (ti, t) in m.triangles.iter().enumerate() {
        for k in 0..3 {
            writeln!(
                csv,
                "{},{},{},{}",
                ti,
                t[k],
                t[(k + 1) % 3],
                m.tri_lengths[ti][k]
            )?;
        }
    }
    Ok(())
}

pub fn import_mesh<R: BufRead>(obj: &mut R, csv: &mut R) -> Result<HyperbolicMesh> {
    let mut positions = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    for line in obj.lines() {
        let line = line?;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let x: f64 = it.next().unwrap_or("0").parse().map_err(bad)?;
                let y: f64 = it.next().unwrap_or("0").parse().map_err(bad)?;
                positions.push(Complex64::new(x, y));
            }
            Some("f") => {
                let mut idx = [0usize; 3];
                for slot in &mut idx {
                    let tok = it
                        .next()
                        .ok_or_else(|| EpsteinLabError::Format("short face row".into()))?;
                    let v: usize = tok.split('/').next().unwrap().parse().map_err(bad)?;
                    *slot = v - 1;
                }
                triangles.push(idx);
            }
            _ => {}
        }
    }
    let mut tri_lengths = vec![[0.0f64; 3]; triangles.len()];
    let mut seen = vec![[false; 3]; triangles.len()];
    for (ln, line) in csv.lines().enumerate() {
        let line = line?;
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.trim().split(',').collect();
        if parts.len() != 4 {
            return Err(EpsteinLabError::Format(format!("bad edge row {line:?}")));
        }
        let ti: usize = parts[0].parse().map_err(bad)?;
        let va: usize = parts[1].parse().map_err(bad)?;
        let len: f64 = parts[3].parse().map_err(bad)?;
        let tri = triangles
            .get(ti)
            .ok_or_else(|| EpsteinLabError::Format(format!("edge row references triangle {ti}")))?;
        let k = (0..3)
            .find(|k| tri[*k] == va)
            .ok_or_else(|| EpsteinLabError::Format(format!("vertex {va} not in triangle {ti}")))?;
        tri_lengths[ti][k] = len;
        seen[ti][k] = true;
    }
    if seen.iter().any(|s| s.iter().any(|b| !b)) {
        return Err(EpsteinLabError::Format("missing edge lengths in sidecar CSV".into()));
    }
    let n_vertices = positions.len();
    let mesh = HyperbolicMesh {
        genus: 0,
        n_vertices,
        triangles,
        tri_lengths,
        positions: Some(positions),
    };
    let chi = mesh.euler_characteristic();
    if chi % 2 != 0 || chi > -2 {
        return Err(EpsteinLabError::Invalid(format!(
            "imported mesh has Euler characteristic {chi}; need a closed surface of genus ≥ 2"
        )));
    }
    let genus = ((2 - chi) / 2) as usize;
    // Validate the metric before accepting.
    mesh.vertex_angle_defect()?;
    Ok(HyperbolicMesh { genus, ..mesh })
}

fn bad<E: std::fmt::Display>(e: E) -> EpsteinLabError {
    EpsteinLabError::Format(e.to_string())
}

pub fn write_vertex_field_csv<W: Write>(w: &mut W, field: &ScalarField) -> Result<()> {
    writeln!(w, "vertex,value")?;
    for (i, v) in field.iter().enumerate() {
        writeln!(w, "{i},{v}")?;
    }
    Ok(())
}

pub fn read_vertex_field_csv<R: BufRead>(r: &mut R, n: usize) -> Result<ScalarField> {
    let mut out = vec![0.0; n];
    let mut filled = vec![false; n];
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.trim().split(',').collect();
        if parts.len() != 2 {
            return Err(EpsteinLabError::Format(format!("bad field row {line:?}")));
        }
        let i: usize = parts[0].parse().map_err(bad)?;
        if i >= n {
            return Err(EpsteinLabError::Format(format!("vertex id {i} out of range")));
        }
        out[i] = parts[1].parse().map_err(bad)?;
        filled[i] = true;
    }
    if filled.iter().any(|b| !b) {
        return Err(EpsteinLabError::Format("missing vertices in field CSV".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn octagon_euler_characteristic_and_defect() {
        let m = build_genus2_octagon(1).unwrap();
        assert_eq!(m.euler_characteristic(), -2);
        assert_eq!(m.genus, 2);
        let defect = m.total_angle_defect().unwrap();
        assert!((defect - (-4.0 * PI)).abs() < 1e-9 * 4.0 * PI);
    }

    #[test]
    fn octagon_area_converges_to_gauss_bonnet_value() {
        // Hyperbolic Gauss–Bonnet: area = 4π(g−1) = 4π, so ∫K dA → −4π.
        let target = 4.0 * PI;
        let mut errs = Vec::new();
        for s in [3u32, 4, 5] {
            let m = build_genus2_octagon(s).unwrap();
            let err = (m.area().unwrap() - target).abs() / target;
            errs.push(err);
        }
        assert!(errs[0] < 0.02, "subdiv 3 error {}", errs[0]);
        assert!(errs[2] < 0.005, "subdiv 5 error {}", errs[2]);
        assert!(errs[1] <= 0.5 * errs[0]);
        assert!(errs[2] <= 0.5 * errs[1]);
    }

    #[test]
    fn laplacian_kernel_and_sign() {
        let m = build_genus2_octagon(2).unwrap();
        let lap = m.laplacian().unwrap();
        assert!(lap.matrix.max_asymmetry() < 1e-12);
        let ones = vec![1.0; m.n_vertices];
        let lu = lap.apply_pointwise(&ones);
        assert!(lu.iter().all(|v| v.abs() < 1e-10));
        // ⟨u, Δu⟩ ≤ 0 for a batch of deterministic fields.
        let pos = m.positions.clone().unwrap();
        for mode in 1..6 {
            let u: Vec<f64> = pos
                .iter()
                .map(|p| (mode as f64 * p.re * 2.0).sin() * (p.im * 3.0).cos())
                .collect();
            let bi = lap.apply_bilinear(&u);
            let quad: f64 = u.iter().zip(&bi).map(|(a, b)| a * b).sum();
            assert!(quad <= 1e-12);
        }
    }

    fn interior_bump(m: &HyperbolicMesh) -> ScalarField {
        // Smooth bump of the hyperbolic distance to the base point, supported
        // well inside the octagon so it descends to the quotient.
        let pos = m.positions.as_ref().unwrap();
        let cutoff = 0.9;
        pos.iter()
            .map(|p| {
                let d = disk_distance(Complex64::new(0.0, 0.0), *p);
                if d < cutoff {
                    let x = d / cutoff;
                    (1.0 - x * x).powi(3)
                } else {
                    0.0
                }
            })
            .collect()
    }

    #[test]
    fn rayleigh_quotient_converges_under_refinement() {
        let mut vals = Vec::new();
        for s in [2u32, 3, 4] {
            let m = build_genus2_octagon(s).unwrap();
            let lap = m.laplacian().unwrap();
            let u = interior_bump(&m);
            let bi = lap.apply_bilinear(&u);
            let num: f64 = -u.iter().zip(&bi).map(|(a, b)| a * b).sum::<f64>();
            let den: f64 = u
                .iter()
                .zip(&lap.mass)
                .map(|(a, mm)| a * a * mm)
                .sum::<f64>();
            vals.push(num / den);
        }
        let d1 = (vals[1] - vals[0]).abs();
        let d2 = (vals[2] - vals[1]).abs();
        assert!(d2 < 0.5 * d1, "rayleigh increments {d1} then {d2}");
    }

    #[test]
    fn curvature_of_conformal_examples() {
        let m = build_genus2_octagon(3).unwrap();
        let zero = vec![0.0; m.n_vertices];
        let k = curvature_of_conformal(&m, &zero).unwrap();
        assert!(k.iter().all(|v| (v + 1.0).abs() < 1e-9));

        let t = 0.35;
        let konst = vec![t; m.n_vertices];
        let k = curvature_of_conformal(&m, &konst).unwrap();
        assert!(k.iter().all(|v| (v + (-2.0 * t).exp()).abs() < 1e-9));

        // Gauss–Bonnet under conformal change: ∫ K(e^{2u}h) dA_{e^{2u}h} is
        // exactly −(mesh area) for any u, which approximates 2πχ.
        let pos = m.positions.as_ref().unwrap();
        let u: Vec<f64> = pos.iter().map(|p| 0.3 * (p.re * 1.7).sin() * (p.im * 1.1).cos()).collect();
        let k = curvature_of_conformal(&m, &u).unwrap();
        let mass = m.vertex_mass().unwrap();
        let integral: f64 = k
            .iter()
            .zip(&u)
            .zip(&mass)
            .map(|((ki, ui), mi)| ki * (2.0 * ui).exp() * mi)
            .sum();
        let target = 2.0 * PI * m.euler_characteristic() as f64;
        assert!(
            (integral - target).abs() / target.abs() < 0.02,
            "integral {integral} vs {target}"
        );
    }

    #[test]
    fn helmholtz_solver_examples() {
        let m = build_genus2_octagon(3).unwrap();
        let n = m.n_vertices;
        let f = vec![2.0; n];
        // Constants: (2 − Δ) c = 2c.
        let c = 0.7;
        let rhs = vec![2.0 * c; n];
        let sol = solve_helmholtz(&m, &f, &rhs, CG_TOL).unwrap();
        assert!(sol.u.iter().all(|v| (v - c).abs() < 1e-9));

        // Random-ish right-hand side: pointwise residual under 1e-10.
        let pos = m.positions.as_ref().unwrap();
        let rhs: Vec<f64> = pos.iter().map(|p| (3.0 * p.re).sin() + 0.5 * p.im).collect();
        let f: Vec<f64> = pos.iter().map(|p| 1.5 + 0.3 * (p.re + p.im).cos()).collect();
        let sol = solve_helmholtz(&m, &f, &rhs, CG_TOL).unwrap();
        assert!(sol.residual < 1e-10, "residual {}", sol.residual);

        // Positive definiteness: ⟨u, T u⟩ > 0 for u ≠ 0.
        let op = m.helmholtz(&f).unwrap();
        let u: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let tu = op.apply_bilinear(&u);
        let q: f64 = u.iter().zip(&tu).map(|(a, b)| a * b).sum();
        assert!(q > 0.0);

        // Uniqueness: a second start agrees.
        let b: Vec<f64> = rhs.iter().zip(&op.mass).map(|(r, mm)| r * mm).collect();
        let x1 = vec![0.3; n];
        let (u2, _) = conjugate_gradient(&op.matrix, &b, Some(&x1), CG_TOL, 10 * n).unwrap();
        let diff: f64 = sol
            .u
            .iter()
            .zip(&u2)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-8);

        // f ≤ 0 rejected.
        let mut fbad = vec![1.0; n];
        fbad[3] = -0.5;
        assert!(matches!(
            solve_helmholtz(&m, &fbad, &rhs, CG_TOL),
            Err(EpsteinLabError::Positivity(_))
        ));
    }

    #[test]
    fn mesh_round_trip_through_obj_and_csv() {
        let m = build_genus2_octagon(1).unwrap();
        let mut obj = Vec::new();
        let mut csv = Vec::new();
        export_mesh(&mut obj, &mut csv, &m).unwrap();
        let back = import_mesh(
            &mut std::io::BufReader::new(&obj[..]),
            &mut std::io::BufReader::new(&csv[..]),
        )
        .unwrap();
        assert_eq!(back.genus, 2);
        assert_eq!(back.n_vertices, m.n_vertices);
        assert_eq!(back.triangles, m.triangles);
        for (a, b) in back.tri_lengths.iter().zip(&m.tri_lengths) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fan_chart_centers_vertex() {
        let m = build_genus2_octagon(2).unwrap();
        // Vertex 0 is the octagon center, clearly interior.
        let fan = fan_chart(&m, 0).unwrap();
        assert!(fan.len() >= 4);
        for (_, w) in fan {
            assert!(w.norm() < 1.0);
        }
    }
}
