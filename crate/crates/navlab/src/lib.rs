//! Instruction-driven navigation on procedurally generated graph worlds.
//!
//! The crate bundles a small, fully deterministic navigation stack:
//!
//! * [`world`] — graph-world generator, panoramic observation oracle, and a
//!   shortest-path expert demonstrator.
//! * [`percept`] — seeded joint embedding space with cosine-similarity
//!   object retrieval (top-5 visible objects per step).
//! * [`policy`] — dual-scale action scorer: local cross-modal scoring,
//!   graph-aware self-attention over a topological map, and dynamic fusion.
//! * [`planner`] — goal extraction from high-level instructions and per-step
//!   instruction generation through pluggable backends (template oracle,
//!   tiny LM, remote chat endpoint), plus the exact chat wire format.
//! * [`datasets`] — supervised and preference fine-tuning datasets built
//!   from expert paths and policy feedback.
//! * [`tuning`] — a tiny decoder LM with LoRA / prefix adapters, sequence
//!   log-probabilities, SFT and DPO objectives, and gradient checking.
//! * [`evalkit`] — episode runner, SR/SPL/RGS/RGSPL metrics, ablation
//!   driver, and generation diagnostics.
//! * [`harness`] — run configuration, manifests, and the CLI plumbing.
//!
//! Everything is seeded: identical seeds and configs reproduce worlds,
//! datasets, checkpoints, and reports byte for byte.

pub mod autodiff;
pub mod datasets;
pub mod driver;
pub mod evalkit;
pub mod harness;
pub mod percept;
pub mod planner;
pub mod policy;
pub mod tuning;
pub mod util;
pub mod world;

pub use world::{Action, NodeId};
