//! Differential verification of a ReLU network against a modified copy of
//! itself with the same topology.
//!
//! Bounds are propagated on the difference `f'(x) - f(x)` directly, layer by
//! layer, alongside ordinary symbolic bounds for each network. Regions whose
//! bounds are not tight enough are bisected by [`verifier::verify`].

pub mod absbounds;
pub mod deltabounds;
pub mod error;
pub mod model;
pub mod oracle;
pub mod symexpr;
pub mod symvars;
pub mod verifier;

pub use deltabounds::{forward_diff, BudgetPolicy, DiffPass, Mode, SymVarOptions};
pub use error::{Error, Result};
pub use model::{InputBox, Network, NetworkPair};
pub use verifier::{verify, SplitStrategy, Status, VerificationOutcome, VerificationTask};
