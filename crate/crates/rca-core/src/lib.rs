//! Joint denoising, dimension reduction, and super-resolution of a spatially
//! varying point-spread-function field, via the constrained matrix
//! factorization X = S·α·Vᵀ.

pub mod baselines;
pub mod degrade;
pub mod error;
pub mod field;
pub mod linalg;
pub mod metrics;
pub mod notch;
pub mod prox;
pub mod rca;
pub mod simulate;
pub mod transforms;

pub use error::{RcaError, RcaResult};
pub use field::{
    load_dataset, reconstruct, save_dataset, Factorization, ObservationStack, Position, PsfMatrix,
};
pub use metrics::{field_errors, ShapeReport};
pub use rca::{run_rca, DictKind, RcaConfig, RcaDiagnostics};
pub use simulate::{degrade_field, generate_field, DegradeOptions, FieldSpec, Layout};
