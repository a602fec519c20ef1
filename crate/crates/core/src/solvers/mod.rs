//! Ground-truth data generation: time integration of the
//! Kuramoto-Sivashinsky and Gray-Scott equations on periodic grids.

mod gs;
mod ks;

pub use gs::{generate_gs_corpus, gs_initial_condition, gs_initial_fields, gs_step, GSConfig};
pub use ks::{
    generate_ks_corpus, ks_initial_condition, ks_initial_profile, ks_initial_value, ks_step,
    KsStepper, KSConfig,
};
