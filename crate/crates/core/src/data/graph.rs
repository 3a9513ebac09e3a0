use crate::error::{Result, StumError};
use crate::tensor::Tensor;

/// Directed weighted edge `(from, to, weight)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

/// Road network: nodes, edge list, and dense adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficGraph {
    num_nodes: usize,
    edges: Vec<Edge>,
    adjacency: Vec<f64>,
}

impl TrafficGraph {
    /// Builds the graph; repeated edges keep the last weight.
    pub fn new(num_nodes: usize, edges: Vec<Edge>) -> Result<Self> {
        let mut adjacency = vec![0.0; num_nodes * num_nodes];
        for e in &edges {
            if e.from >= num_nodes || e.to >= num_nodes {
                return Err(StumError::DimensionMismatch(format!(
                    "edge ({}, {}) references a node outside 0..{num_nodes}",
                    e.from, e.to
                )));
            }
            if !(e.weight.is_finite() && e.weight > 0.0) {
                return Err(StumError::DimensionMismatch(format!(
                    "edge ({}, {}) has non-positive or non-finite weight {}",
                    e.from, e.to, e.weight
                )));
            }
            adjacency[e.from * num_nodes + e.to] = e.weight;
        }
        Ok(TrafficGraph {
            num_nodes,
            edges,
            adjacency,
        })
    }

    pub fn empty(num_nodes: usize) -> Self {
        TrafficGraph {
            num_nodes,
            edges: Vec::new(),
            adjacency: vec![0.0; num_nodes * num_nodes],
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn weight(&self, from: usize, to: usize) -> f64 {
        self.adjacency[from * self.num_nodes + to]
    }

    pub fn adjacency(&self) -> Tensor {
        Tensor::from_parts(vec![self.num_nodes, self.num_nodes], self.adjacency.clone())
    }

    /// Row-normalized adjacency with self-loops, `D⁻¹(A + I)`.
    pub fn normalized_with_self_loops(&self) -> Tensor {
        let n = self.num_nodes;
        let mut a = self.adjacency.clone();
        for i in 0..n {
            a[i * n + i] += 1.0;
            let row = &mut a[i * n..(i + 1) * n];
            let deg: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= deg);
        }
        Tensor::from_parts(vec![n, n], a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjacency_positive_iff_edge() {
        let g = TrafficGraph::new(
            3,
            vec![
                Edge {
                    from: 0,
                    to: 1,
                    weight: 1.0,
                },
                Edge {
                    from: 1,
                    to: 2,
                    weight: 2.5,
                },
            ],
        )
        .unwrap();
        for u in 0..3 {
            for v in 0..3 {
                let listed = g.edges().iter().any(|e| e.from == u && e.to == v);
                assert_eq!(g.weight(u, v) > 0.0, listed);
            }
        }
    }

    #[test]
    fn out_of_range_node_is_dimension_mismatch() {
        let err = TrafficGraph::new(
            307,
            vec![Edge {
                from: 0,
                to: 307,
                weight: 1.0,
            }],
        )
        .unwrap_err();
        assert!(matches!(err, StumError::DimensionMismatch(_)));
    }

    #[test]
    fn normalized_rows_sum_to_one() {
        let g = TrafficGraph::new(
            4,
            vec![
                Edge {
                    from: 0,
                    to: 1,
                    weight: 3.0,
                },
                Edge {
                    from: 1,
                    to: 0,
                    weight: 3.0,
                },
                Edge {
                    from: 2,
                    to: 3,
                    weight: 0.5,
                },
            ],
        )
        .unwrap();
        let a = g.normalized_with_self_loops();
        for row in a.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(TrafficGraph::empty(3).normalized_with_self_loops(), Tensor::eye(3));
    }
}
