//! Outage probabilities of slow Rayleigh-fading multiple-access channels and
//! outage-aware multicast rate allocation.
//!
//! * [`mac`]: exact values and bounds for one receiver;
//! * [`exp_linear`]: the elimination recursions behind the exact values;
//! * [`monte_carlo`]: seeded sampling estimates;
//! * [`network`]: networks, network outage and multicast feasibility;
//! * [`allocation`]: the convex rate-allocation program and its solver;
//! * [`distributed`]: the message-passing simulation of the same program;
//! * [`curve`]: outage curves over multicast rate or SNR.
//!
//! The guide in `book/` walks through each layer.

// `!(x > 0.0)` also rejects NaN; index loops mirror the math
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod allocation;
pub mod curve;
pub mod distributed;
pub mod error;
pub mod exp_linear;
pub mod io;
pub mod mac;
pub mod monte_carlo;
pub mod network;

pub use error::{Error, Result};

// Book chapters, so `cargo test --doc` runs their snippets.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/mac-outage.md")]
    mod mac_outage {}
    #[doc = include_str!("../../../book/src/exp-linear.md")]
    mod exp_linear {}
    #[doc = include_str!("../../../book/src/monte-carlo.md")]
    mod monte_carlo {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/allocation.md")]
    mod allocation {}
    #[doc = include_str!("../../../book/src/distributed.md")]
    mod distributed {}
    #[doc = include_str!("../../../book/src/curves.md")]
    mod curves {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
