//! Robust principal–agent contracting on finite state spaces.
//!
//! An [`Instance`](model::Instance) describes a principal who faces an agent
//! of unknown type and is uncertain about the distribution of types. Moving
//! to utility units ([`transform`]) makes incentive compatibility and
//! individual rationality linear ([`constraints`]); [`solver`] then maximizes
//! the principal's robust value over mechanisms, [`menu`] solves the same
//! problem over contract menus and certifies that both agree, and [`market`]
//! holds the closed forms of the hedging and delegation applications.
//!
//! ```
//! use rcl_core::presets::{build_preset, PresetName, PresetParams};
//! use rcl_core::solver::{solve_mechanism, SolveOptions};
//! use rcl_core::transform::to_utility_units;
//!
//! let inst = build_preset(PresetName::ReinsuranceWholeline, &PresetParams::default())?;
//! let uu = to_utility_units(&inst)?;
//! let opts = SolveOptions { max_iters: 2000, ..SolveOptions::default() };
//! let res = solve_mechanism(&uu, &opts)?;
//! assert!(res.feasibility.feasible);
//! # Ok::<(), rcl_core::Error>(())
//! ```

pub mod constraints;
mod error;
pub mod market;
pub mod menu;
pub mod model;
pub mod presets;
pub mod solver;
pub mod transform;

pub use error::{Error, Result, Violation};

// Snippets in the guide are compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/instances.md")]
    mod instances {}
    #[doc = include_str!("../../../book/src/utility_units.md")]
    mod utility_units {}
    #[doc = include_str!("../../../book/src/mechanisms.md")]
    mod mechanisms {}
    #[doc = include_str!("../../../book/src/menus.md")]
    mod menus {}
    #[doc = include_str!("../../../book/src/markets.md")]
    mod markets {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
