//! Text-conditioned information routing for multivariate time-series
//! forecasting.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`graph`]), the
//! routed layer primitives ([`layers`]), the embedding-to-routing module
//! ([`routing`]), three base forecasters ([`model`]), data ingestion and a
//! synthetic regime-switching benchmark ([`data`]) and a biweekly
//! rolling-retrain backtest ([`backtest`]).

pub mod backtest;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod routing;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Axis, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
