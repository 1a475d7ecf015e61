//! Text-based behavior simulation for robot behavior trees.
//!
//! A behavior tree is executed against a world state held as structured
//! text. Each leaf is resolved by a language model through a chain of
//! focused phases (consider, decide, capture, transfer), numeric checks run
//! in a small sandboxed expression language, and every model output passes a
//! content checker with a bounded repair loop. A final evaluation labels the
//! tree Good, BadLogic or Unreachable.

pub mod bench;
pub mod bt_engine;
pub mod case_gen;
pub mod cbs;
pub mod cli;
pub mod canonical;
pub mod code_reasoning;
pub mod evaluation;
pub mod feedback;
pub mod llm_backend;
pub mod tracing;
pub mod world_state;
