//! P1 finite elements on the unit square for affine-parametric diffusion problems.

pub mod case;
pub mod mesh;
pub mod problem;
pub mod sparse;

pub use case::{
    AffineTerm, CaseConfig, CaseKind, Coefficient, CustomCase, FieldSpec, LinearSolver, PriorSpec, Trig,
};
pub use mesh::{Edge, MeshGrid};
pub use problem::{AffineProblem, CoefficientValues, DofMap, ObservationOperator};
pub use sparse::{dot, norm2, SparsityPattern, SymSparse};
