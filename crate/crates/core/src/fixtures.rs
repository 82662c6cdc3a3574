//! Small hand-built tasks shared by tests, the CLI and the demo page.

use crate::graph::Dag;
use crate::model::{ConcreteId, ConcreteTask, Node, SpecTask, Ticks};

pub const EXAMPLE_PERIOD: Ticks = 30;

/// Specification with one alternative (9) choosing between a conditional
/// pattern (10 -> v6 | v7) and the chain v3 -> v4 -> v5; both end in v8.
pub fn example_spec() -> SpecTask {
    SpecTask {
        id: 0,
        period: EXAMPLE_PERIOD,
        deadline: EXAMPLE_PERIOD,
        nodes: vec![
            Node::subtask(1, "CPU", 2),
            Node::subtask(2, "CPU", 3),
            Node::subtask(3, "dGPU", 4),
            Node::subtask(4, "DLA", 3),
            Node::subtask(5, "dGPU", 2),
            Node::subtask(6, "DLA", 4),
            Node::subtask(7, "dGPU", 3),
            Node::subtask(8, "CPU", 2),
            Node::alternative(9),
            Node::conditional(10),
        ],
        edges: vec![(1, 9), (2, 9), (9, 10), (9, 3), (3, 4), (4, 5), (5, 8), (10, 6), (10, 7), (6, 8), (7, 8)],
    }
}

/// The concrete task of [`example_spec`] that keeps the conditional branch.
pub fn example_concrete() -> ConcreteTask {
    let nodes = vec![
        Node::subtask(1, "CPU", 2),
        Node::subtask(2, "CPU", 3),
        Node::subtask(6, "DLA", 4),
        Node::subtask(7, "dGPU", 3),
        Node::subtask(8, "CPU", 2),
        Node::conditional(10),
    ];
    let edges = [(1, 10), (2, 10), (10, 6), (10, 7), (6, 8), (7, 8)];
    let dag = Dag::new(nodes, &edges).expect("fixture is valid");
    ConcreteTask::new(ConcreteId { spec: 0, index: 0 }, EXAMPLE_PERIOD, EXAMPLE_PERIOD, dag, vec![(9, 10)])
}
