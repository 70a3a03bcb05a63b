//! Numerical continuation of cycle-to-cycle connecting orbits in 3D autonomous ODEs.
//!
//! The toolkit discretizes boundary value problems by piecewise-polynomial
//! orthogonal collocation at Gauss points, continues solution families by
//! pseudo-arclength continuation with fold and branch-point detection, and
//! assembles the defining systems for saddle limit cycles, their adjoint
//! eigenfunctions, and truncated connecting orbits with projection boundary
//! conditions. Starting data is manufactured by a homotopy chain of
//! successive continuations. A three-level food chain model is built in as
//! the reference system, together with an independent Runge-Kutta oracle
//! used to cross-check every collocation result.

pub mod collocation;
pub mod continuation;
pub mod defining;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod quad;
