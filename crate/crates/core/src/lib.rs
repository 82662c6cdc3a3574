//! The C-DAG task model: specification tasks with alternative and
//! conditional nodes, their expansion into concrete and tagged tasks,
//! deadline and offset synthesis, offset-aware demand-bound analysis with
//! preemption costs, greedy partitioned allocation onto tagged engines, a
//! workload generator, an EDF simulator and an experiment harness.

pub mod allocation;
pub mod analysis;
pub mod expansion;
pub mod fixtures;
pub mod generator;
pub mod graph;
pub mod harness;
pub mod io;
pub mod model;
pub mod simulator;
pub mod timing;

pub use model::{Architecture, ConcreteTask, Node, NodeKind, SpecTask, TaggedTask, Ticks};
