//! Estimators for counterfactual distributions.
//!
//! Two families live here:
//!
//! * covariate-conditional Fréchet–Hoeffding bounds on the joint CDF of the
//!   potential outcomes `(Y(1), Y(0))`, with plug-in, direct doubly-robust
//!   and log-sum-exp smoothed doubly-robust estimators ([`bounds`]);
//! * a triple cross-fitting pipeline ([`tml`]) that learns a latent
//!   confounder from an instrument with an HSIC-penalised variational
//!   autoencoder ([`ivvae`]) and then estimates counterfactual means, ATEs
//!   and dose-response curves.
//!
//! [`simgen`] reproduces the simulation designs with oracle truths and
//! [`bench`] runs replicated experiments on top of everything else.

pub mod bench;
pub mod bounds;
pub mod data;
pub mod error;
pub mod features;
pub mod hsic;
pub mod ivvae;
pub mod neural;
pub mod nuisance;
pub mod rng;
pub mod simgen;
pub mod stats;
pub mod tml;

pub use data::{Dataset, FoldMode, FoldPlan, FoldRole, Observation, RunConfig, Table, TreatmentKind};
pub use error::{Error, Result};
