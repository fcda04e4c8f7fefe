//! Planar rectangular charts and the finite-difference kernels shared by the
//! conformal-data modules.
//!
//! A [`Chart`] is an axis-aligned grid in a complex coordinate, optionally
//! periodic in its x-direction (used by the annulus charts). Fields over a
//! chart are stored row-major (y-major, x-fastest), matching the CSV layout
//! used for import/export. Derivatives use 4th-order central stencils; the
//! outermost two layers of a non-periodic direction never carry trusted
//! derivative values and are excluded by [`Chart::interior`].

use num_complex::Complex64;
use std::io::{BufRead, Write};

use crate::EpsteinLabError;

/// Stencil half-width of the 4th-order central differences used throughout.
pub const FD_MARGIN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Chart {
    /// Grid corner (i = 0, j = 0).
    pub origin: Complex64,
    pub dx: f64,
    pub dy: f64,
    pub nx: usize,
    pub ny: usize,
    /// Wrap indices in the x-direction (spacing must tile the period).
    pub periodic_x: bool,
}

impl Chart {
    pub fn new(origin: Complex64, spacing: f64, nx: usize, ny: usize) -> Self {
        Chart::rect(origin, spacing, spacing, nx, ny, false)
    }

    pub fn rect(origin: Complex64, dx: f64, dy: f64, nx: usize, ny: usize, periodic_x: bool) -> Self {
        assert!(dx > 0.0 && dy > 0.0, "chart spacing must be positive");
        assert!(nx >= 5 && ny >= 5, "chart must be at least 5x5 for the stencils");
        Chart { origin, dx, dy, nx, ny, periodic_x }
    }

    /// Square chart centered at `center` with half-width `half` and `n` nodes per side.
    pub fn centered_square(center: Complex64, half: f64, n: usize) -> Self {
        let spacing = 2.0 * half / (n - 1) as f64;
        Chart::new(center - Complex64::new(half, half), spacing, n, n)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny);
        j * self.nx + i
    }

    /// Index with offsets, wrapping x when periodic. Callers keep j in range.
    #[inline]
    pub fn idx_off(&self, i: usize, j: usize, oi: isize, oj: isize) -> usize {
        let jj = (j as isize + oj) as usize;
        let ii = if self.periodic_x {
            (i as isize + oi).rem_euclid(self.nx as isize) as usize
        } else {
            (i as isize + oi) as usize
        };
        self.idx(ii, jj)
    }

    #[inline]
    pub fn point(&self, i: usize, j: usize) -> Complex64 {
        self.origin + Complex64::new(i as f64 * self.dx, j as f64 * self.dy)
    }

    /// Indices `(i, j, idx)` at least `margin` nodes away from every
    /// non-periodic edge.
    pub fn interior(&self, margin: usize) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let nx = self.nx;
        let xr = if self.periodic_x { 0..nx } else { margin..nx.saturating_sub(margin) };
        (margin..self.ny.saturating_sub(margin))
            .flat_map(move |j| xr.clone().map(move |i| (i, j, j * nx + i)))
    }

    pub fn is_interior(&self, i: usize, j: usize, margin: usize) -> bool {
        let x_ok = self.periodic_x || (i >= margin && i + margin < self.nx);
        x_ok && j >= margin && j + margin < self.ny
    }

    pub fn same_geometry(&self, other: &Chart) -> bool {
        (self.origin - other.origin).norm() < 1e-14 * (1.0 + self.origin.norm())
            && (self.dx - other.dx).abs() < 1e-14 * self.dx
            && (self.dy - other.dy).abs() < 1e-14 * self.dy
            && self.nx == other.nx
            && self.ny == other.ny
            && self.periodic_x == other.periodic_x
    }
}

/// Real scalar field on a chart.
#[derive(Debug, Clone, PartialEq)]
pub struct RealGrid {
    pub chart: Chart,
    pub data: Vec<f64>,
}

/// Complex scalar field on a chart.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid {
    pub chart: Chart,
    pub data: Vec<Complex64>,
}

impl RealGrid {
    pub fn from_fn(chart: Chart, f: impl Fn(Complex64) -> f64) -> Self {
        let mut data = Vec::with_capacity(chart.len());
        for j in 0..chart.ny {
            for i in 0..chart.nx {
                data.push(f(chart.point(i, j)));
            }
        }
        RealGrid { chart, data }
    }

    pub fn constant(chart: Chart, value: f64) -> Self {
        RealGrid { chart, data: vec![value; chart.len()] }
    }

    pub fn max_abs_interior(&self, margin: usize) -> f64 {
        self.chart
            .interior(margin)
            .map(|(_, _, k)| self.data[k].abs())
            .fold(0.0, f64::max)
    }
}

impl ComplexGrid {
    pub fn from_fn(chart: Chart, f: impl Fn(Complex64) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(chart.len());
        for j in 0..chart.ny {
            for i in 0..chart.nx {
                data.push(f(chart.point(i, j)));
            }
        }
        ComplexGrid { chart, data }
    }

    pub fn zeros(chart: Chart) -> Self {
        ComplexGrid { chart, data: vec![Complex64::new(0.0, 0.0); chart.len()] }
    }

    pub fn max_abs_interior(&self, margin: usize) -> f64 {
        self.chart
            .interior(margin)
            .map(|(_, _, k)| self.data[k].norm())
            .fold(0.0, f64::max)
    }
}

/// 4th-order first-derivative stencil.
#[inline]
fn d1<T>(get: impl Fn(isize) -> T, h: f64) -> T
where
    T: std::ops::Sub<Output = T> + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
{
    (get(-2) - get(2) + (get(1) - get(-1)) * 8.0) * (1.0 / (12.0 * h))
}

/// 4th-order second-derivative stencil.
#[inline]
fn d2<T>(get: impl Fn(isize) -> T, h: f64) -> T
where
    T: std::ops::Sub<Output = T> + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
{
    ((get(1) + get(-1)) * 16.0 - (get(2) + get(-2)) - get(0) * 30.0) * (1.0 / (12.0 * h * h))
}

/// Coefficients of the 4th-order first-derivative stencil, offsets −2..=2.
pub const D1_STENCIL: [f64; 5] = [
    1.0 / 12.0,
    -8.0 / 12.0,
    0.0,
    8.0 / 12.0,
    -1.0 / 12.0,
];

/// Coefficients of the 4th-order second-derivative stencil, offsets −2..=2
/// (divide by h²).
pub const D2_STENCIL: [f64; 5] = [
    -1.0 / 12.0,
    16.0 / 12.0,
    -30.0 / 12.0,
    16.0 / 12.0,
    -1.0 / 12.0,
];

macro_rules! impl_derivatives {
    ($grid:ty, $elem:ty) => {
        impl $grid {
            /// ∂/∂x at `(i, j)`; requires the node to be x-interior.
            pub fn dx(&self, i: usize, j: usize) -> $elem {
                d1(|o| self.data[self.chart.idx_off(i, j, o, 0)], self.chart.dx)
            }

            /// ∂/∂y at `(i, j)`; requires the node to be y-interior.
            pub fn dy(&self, i: usize, j: usize) -> $elem {
                d1(|o| self.data[self.chart.idx_off(i, j, 0, o)], self.chart.dy)
            }

            pub fn dxx(&self, i: usize, j: usize) -> $elem {
                d2(|o| self.data[self.chart.idx_off(i, j, o, 0)], self.chart.dx)
            }

            pub fn dyy(&self, i: usize, j: usize) -> $elem {
                d2(|o| self.data[self.chart.idx_off(i, j, 0, o)], self.chart.dy)
            }

            /// Mixed ∂²/∂x∂y by composing the two first-derivative stencils.
            pub fn dxy(&self, i: usize, j: usize) -> $elem {
                d1(
                    |oy| d1(|ox| self.data[self.chart.idx_off(i, j, ox, oy)], self.chart.dx),
                    self.chart.dy,
                )
            }

            /// Flat-chart Laplacian ∂xx + ∂yy.
            pub fn laplace(&self, i: usize, j: usize) -> $elem {
                self.dxx(i, j) + self.dyy(i, j)
            }
        }
    };
}

impl_derivatives!(RealGrid, f64);
impl_derivatives!(ComplexGrid, Complex64);

impl RealGrid {
    /// Wirtinger derivative ∂_z = ½(∂x − i ∂y) of a real field.
    pub fn wirtinger_z(&self, i: usize, j: usize) -> Complex64 {
        0.5 * Complex64::new(self.dx(i, j), -self.dy(i, j))
    }

    /// Second Wirtinger derivative ∂_zz = ¼(∂xx − ∂yy) − (i/2) ∂xy of a real field.
    pub fn wirtinger_zz(&self, i: usize, j: usize) -> Complex64 {
        Complex64::new(0.25 * (self.dxx(i, j) - self.dyy(i, j)), -0.5 * self.dxy(i, j))
    }
}

impl ComplexGrid {
    /// Wirtinger derivative ∂_z of a complex field.
    pub fn wirtinger_z(&self, i: usize, j: usize) -> Complex64 {
        0.5 * (self.dx(i, j) - Complex64::i() * self.dy(i, j))
    }
}

/// CSV layout: one header line `origin_re,origin_im,dx,dy,nx,ny,periodic_x`,
/// then `nx*ny` row-major lines `re,im`.
pub fn write_complex_csv<W: Write>(w: &mut W, grid: &ComplexGrid) -> std::io::Result<()> {
    let c = &grid.chart;
    writeln!(
        w,
        "{},{},{},{},{},{},{}",
        c.origin.re, c.origin.im, c.dx, c.dy, c.nx, c.ny, c.periodic_x as u8
    )?;
    for v in &grid.data {
        writeln!(w, "{},{}", v.re, v.im)?;
    }
    Ok(())
}

pub fn write_real_csv<W: Write>(w: &mut W, grid: &RealGrid) -> std::io::Result<()> {
    let c = &grid.chart;
    writeln!(
        w,
        "{},{},{},{},{},{},{}",
        c.origin.re, c.origin.im, c.dx, c.dy, c.nx, c.ny, c.periodic_x as u8
    )?;
    for v in &grid.data {
        writeln!(w, "{},0", v)?;
    }
    Ok(())
}

pub fn read_complex_csv<R: BufRead>(r: &mut R) -> Result<ComplexGrid, EpsteinLabError> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| EpsteinLabError::Format("empty field CSV".into()))??;
    let parts: Vec<&str> = header.trim().split(',').collect();
    if parts.len() != 7 {
        return Err(EpsteinLabError::Format(format!(
            "field CSV header needs 7 entries, got {}",
            parts.len()
        )));
    }
    let num = |s: &str| -> Result<f64, EpsteinLabError> {
        s.trim()
            .parse::<f64>()
            .map_err(|e| EpsteinLabError::Format(format!("bad number {s:?}: {e}")))
    };
    let origin = Complex64::new(num(parts[0])?, num(parts[1])?);
    let dx = num(parts[2])?;
    let dy = num(parts[3])?;
    let nx = num(parts[4])? as usize;
    let ny = num(parts[5])? as usize;
    let periodic = num(parts[6])? != 0.0;
    if !(dx > 0.0) || !(dy > 0.0) || nx < 5 || ny < 5 {
        return Err(EpsteinLabError::Format(format!(
            "field CSV chart is too small or degenerate ({nx}x{ny}, spacing {dx}x{dy})"
        )));
    }
    let chart = Chart::rect(origin, dx, dy, nx, ny, periodic);
    let mut data = Vec::with_capacity(chart.len());
    for line in lines {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let pieces: Vec<&str> = line.split(',').collect();
        if pieces.len() != 2 {
            return Err(EpsteinLabError::Format(format!("bad field row {line:?}")));
        }
        data.push(Complex64::new(num(pieces[0])?, num(pieces[1])?));
    }
    if data.len() != chart.len() {
        return Err(EpsteinLabError::Format(format!(
            "field CSV row count {} does not match {}x{}",
            data.len(),
            chart.nx,
            chart.ny
        )));
    }
    Ok(ComplexGrid { chart, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fourth_order_derivatives_on_polynomial() {
        let chart = Chart::centered_square(Complex64::new(0.3, -0.2), 0.5, 41);
        // x^3 y + y^2 is reproduced exactly by the quartic-exact stencils.
        let g = RealGrid::from_fn(chart, |z| z.re.powi(3) * z.im + z.im * z.im);
        for (i, j, _) in chart.interior(FD_MARGIN) {
            let z = chart.point(i, j);
            assert!((g.dx(i, j) - 3.0 * z.re * z.re * z.im).abs() < 1e-10);
            assert!((g.dy(i, j) - (z.re.powi(3) + 2.0 * z.im)).abs() < 1e-10);
            assert!((g.dxy(i, j) - 3.0 * z.re * z.re).abs() < 1e-9);
            assert!((g.dxx(i, j) - 6.0 * z.re * z.im).abs() < 1e-9);
            assert!((g.dyy(i, j) - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn wirtinger_of_harmonic_field() {
        // For eta = Re(z^2) = x^2 - y^2: eta_z = z, eta_zz = 1.
        let chart = Chart::centered_square(Complex64::new(0.0, 0.0), 1.0, 33);
        let g = RealGrid::from_fn(chart, |z| z.re * z.re - z.im * z.im);
        for (i, j, _) in chart.interior(FD_MARGIN) {
            let z = chart.point(i, j);
            assert!((g.wirtinger_z(i, j) - z).norm() < 1e-9);
            assert!((g.wirtinger_zz(i, j) - Complex64::new(1.0, 0.0)).norm() < 1e-9);
        }
    }

    #[test]
    fn periodic_x_derivatives_wrap() {
        let n = 80;
        let dx = 2.0 * std::f64::consts::PI / n as f64;
        let chart = Chart::rect(Complex64::new(0.0, 0.0), dx, 0.05, n, 9, true);
        let g = RealGrid::from_fn(chart, |z| (z.re).sin() + z.im * z.im);
        // Every x (including the seam) is interior when periodic.
        for (i, j, _) in chart.interior(FD_MARGIN) {
            let z = chart.point(i, j);
            assert!((g.dx(i, j) - z.re.cos()).abs() < 2e-5, "at {} {}", i, j);
            assert!((g.dyy(i, j) - 2.0).abs() < 1e-8);
        }
        assert!(chart.is_interior(0, 3, FD_MARGIN));
        assert!(!chart.is_interior(0, 1, FD_MARGIN));
    }

    #[test]
    fn csv_round_trip() {
        let chart = Chart::centered_square(Complex64::new(1.0, 2.0), 0.25, 7);
        let g = ComplexGrid::from_fn(chart, |z| z * z + Complex64::i());
        let mut buf = Vec::new();
        write_complex_csv(&mut buf, &g).unwrap();
        let back = read_complex_csv(&mut std::io::BufReader::new(&buf[..])).unwrap();
        assert!(back.chart.same_geometry(&g.chart));
        for (a, b) in back.data.iter().zip(&g.data) {
            assert!((a - b).norm() < 1e-15);
        }
    }
}
