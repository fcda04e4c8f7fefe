//! Core algorithms: hyperbolic models, Schwarzian calculus, Epstein surfaces,
//! discrete hyperbolic surfaces, CMC continuation, minimal-surface paths with
//! half-pipe limits, and the torus measured-foliation workbench.

// Index-driven loops over grid/vertex arrays read better than iterator
// adapters in the numerical kernels; `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::manual_is_multiple_of)]

pub mod cmc;
pub mod epstein;
pub mod field;
pub mod foliation;
pub mod geom;
pub mod minimal;
pub mod schwarzian;
pub mod sparse;
pub mod surface;

pub use cmc::{CmcLeafFamily, CmcProblem, CmcSolution, DiskPatchProblem};
pub use epstein::{EpsteinSurface, ImmersionData};
pub use field::{Chart, ComplexGrid, RealGrid};
pub use foliation::{FlatSurface, TorusFoliation, TorusPoint};
pub use geom::{BoundaryPoint, H3Point, H3Tangent, MoebiusTransform};
pub use minimal::{FormsAtInfinity, HolonomyPath4, MinimalPathPoint};
pub use schwarzian::{ConformalMetric, HolomorphicMap, QuadDifferential};
pub use surface::{HyperbolicMesh, LinearOperator, ScalarField};

/// Error type shared by the whole crate.
#[derive(Debug, thiserror::Error)]
pub enum EpsteinLabError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("chart mismatch: {0}")]
    ChartMismatch(String),
    #[error("outside chart: {0}")]
    OutOfChart(String),
    #[error("singular map: {0}")]
    SingularMap(String),
    #[error("positivity violation: {0}")]
    Positivity(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("newton divergence: {0}")]
    Divergence(String),
    #[error("certificate failure: {0}")]
    Certificate(String),
    #[error("foliation classes do not fill: {0}")]
    NotFilling(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EpsteinLabError>;
