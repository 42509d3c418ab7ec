//! Filter activation networks over a teacher's final convolution and their
//! partition into budget-balanced communities.

mod graph;
mod partition;

pub use graph::{build_fan, FilterGraph, FilterNode, DEAD_EPSILON};
pub use partition::{balance_partitions, detect_communities, modularity, Partition, RESTARTS};
