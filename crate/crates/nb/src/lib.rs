//! nb — build, train, evaluate, and run neural NLP models from declarative
//! JSON configuration files.
//!
//! The crate is organized around a small set of layers:
//!
//! - [`tensor`]: dense tensors with reverse-mode automatic differentiation.
//! - [`blocks`]: the gallery of reusable neural blocks (embeddings, encoders,
//!   attention, regularization, combination, output heads) behind a registry
//!   that also accepts user-contributed blocks.
//! - [`composer`]: parses, validates, and compiles a JSON model config into a
//!   shape-checked, topologically ordered graph, then executes it.
//! - [`data`]: dataset readers, vocabularies, tagging-scheme conversion, and
//!   padded/masked batch encoding.
//! - [`train`]: losses, optimizers, the training loop, checkpoints, and an
//!   inference throughput benchmark.
//! - [`metrics`]: task-scoped evaluation metrics.
//! - [`templates`]: ready-to-train model templates plus synthetic dataset
//!   generators for quick end-to-end checks.
//! - [`cli`]: the `nb` command-line entry point.
//!
//! See the crate examples for runnable end-to-end walkthroughs of each
//! capability.

pub mod cli;
pub mod gradcheck;
pub mod shape;
pub mod tensor;
