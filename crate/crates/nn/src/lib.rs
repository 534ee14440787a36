//! Reverse-mode automatic differentiation over `ndarray` f64 matrices.
//!
//! A [`Graph`] is a define-by-run tape: every operation records its forward
//! value and a backward closure. All tensors are 2-D (`Array2<f64>`) —
//! sequences are (time x channels), vectors are (n x 1) — which keeps the op
//! set small and every gradient easy to audit. Models hold their weights in a
//! [`ParamStore`] and rebuild the graph each step; [`Adam`] applies updates.
//!
//! Everything runs in f64 on a single thread and is bit-deterministic for a
//! fixed input, which the training-reproducibility tests rely on.

pub mod check;
pub mod conv;
pub mod ctc;
pub mod graph;
pub mod init;
pub mod ops;
pub mod params;
pub mod stft;

pub use graph::{Gradients, Graph, NodeId};
pub use params::{Adam, Binder, ParamStore};
