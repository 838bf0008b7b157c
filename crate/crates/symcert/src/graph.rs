//! The colored collision graph and the block-level statistics built on it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::GramBundle;
use crate::klr;
use crate::linalg::{self, Mat, Vector};
use crate::task::{bad_pair, bad_test, Dataset, Sample, TemplateFamily};

/// Non-fresh pairs among the training strings and against the test string.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionGraph {
    pub colors: Vec<usize>,
    pub r: usize,
    /// Row-major symmetric 0/1 adjacency with zero diagonal.
    adj: Vec<bool>,
    /// `C_0i`: training string `i` collides with the test string.
    pub test_edges: Vec<bool>,
    pub degrees: Vec<usize>,
}

impl CollisionGraph {
    /// Builds a graph from an explicit edge predicate on training pairs.
    pub fn from_fn(colors: Vec<usize>, r: usize, test_edges: Vec<bool>, edge: impl Fn(usize, usize) -> bool + Sync) -> Self {
        let n = colors.len();
        let rows: Vec<Vec<bool>> = (0..n)
            .into_par_iter()
            .map(|i| (0..n).map(|j| j != i && edge(i.min(j), i.max(j))).collect())
            .collect();
        let adj: Vec<bool> = rows.into_iter().flatten().collect();
        let degrees = (0..n).map(|i| adj[i * n..(i + 1) * n].iter().filter(|&&e| e).count()).collect();
        CollisionGraph {
            colors,
            r,
            adj,
            test_edges,
            degrees,
        }
    }

    pub fn n(&self) -> usize {
        self.colors.len()
    }

    pub fn edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.n() + j]
    }

    /// Unordered training edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        (0..n)
            .flat_map(|i| (i + 1..n).filter(move |&j| self.adj[i * n + j]).map(move |j| (i, j)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.degrees.iter().sum::<usize>() / 2
    }

    pub fn test_edge_count(&self) -> usize {
        self.test_edges.iter().filter(|&&e| e).count()
    }

    /// `d_2 = ||d||_2`.
    pub fn d2(&self) -> f64 {
        (self.degrees.iter().map(|&d| (d * d) as f64).sum::<f64>()).sqrt()
    }

    pub fn d_max(&self) -> usize {
        self.degrees.iter().copied().max().unwrap_or(0)
    }

    /// Unordered edge counts per color pair (symmetric; the diagonal counts
    /// edges inside a block).
    pub fn color_pair_counts(&self) -> Vec<Vec<usize>> {
        let mut out = vec![vec![0; self.r]; self.r];
        for (i, j) in self.edges() {
            let (b, c) = (self.colors[i], self.colors[j]);
            out[b][c] += 1;
            if b != c {
                out[c][b] += 1;
            }
        }
        out
    }

    /// Realized ordered edge density `sum_{i != j} C_ij / n^2`.
    pub fn edge_density(&self) -> f64 {
        let n = self.n() as f64;
        self.degrees.iter().sum::<usize>() as f64 / (n * n)
    }

    /// Realized wedge density `sum_i d_i (d_i - 1) / n^3`.
    pub fn wedge_density(&self) -> f64 {
        let n = self.n() as f64;
        self.degrees.iter().map(|&d| (d * d.saturating_sub(1)) as f64).sum::<f64>() / (n * n * n)
    }

    /// Node/edge export for plotting, with the signed discrepancy on each edge.
    pub fn export(&self, bundle: Option<&GramBundle>) -> GraphExport {
        GraphExport {
            nodes: self
                .colors
                .iter()
                .enumerate()
                .map(|(id, &color)| ExportNode { id, color })
                .collect(),
            edges: self
                .edges()
                .into_iter()
                .map(|(i, j)| ExportEdge {
                    source: i,
                    target: j,
                    weight: bundle.map_or(1.0, |b| b.delta[(i, j)]),
                })
                .collect(),
            test_edges: (0..self.n())
                .filter(|&i| self.test_edges[i])
                .map(|i| ExportEdge {
                    source: i,
                    target: usize::MAX,
                    weight: bundle.map_or(1.0, |b| b.zeta[i]),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportNode {
    pub id: usize,
    pub color: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportEdge {
    pub source: usize,
    /// `usize::MAX` marks the test vertex.
    pub target: usize,
    pub weight: f64,
}

/// JSON shape consumed by the plotting scripts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub nodes: Vec<ExportNode>,
    pub edges: Vec<ExportEdge>,
    pub test_edges: Vec<ExportEdge>,
}

/// Evaluates the collision events from the stored substitutions.
pub fn build_graph(ds: &Dataset, test: &Sample, fam: &TemplateFamily) -> CollisionGraph {
    let s = &ds.samples;
    let test_edges = s.iter().map(|x| bad_test(fam, x.template, &x.sub, test)).collect();
    CollisionGraph::from_fn(ds.colors(), ds.r, test_edges, |i, j| {
        bad_pair(fam, s[i].template, &s[i].sub, s[j].template, &s[j].sub)
    })
}

/// Block averages and empirical densities.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlockStats {
    pub sizes: Vec<usize>,
    /// `(1/(n_b n_c)) sum_{I_b x I_c} Delta_ij`, diagonal included when `b = c`.
    pub delta_bar: Mat,
    pub zeta_bar: Vector,
    /// Cross-block density over `n_b n_c` pairs; same-block density over `binom(n_b, 2)` pairs.
    pub q_hat: Mat,
    pub q_hat_test: Vector,
}

pub fn block_sizes(colors: &[usize], r: usize) -> Vec<usize> {
    let mut out = vec![0; r];
    for &c in colors {
        out[c] += 1;
    }
    out
}

pub fn block_stats(graph: &CollisionGraph, delta: &Mat, zeta: &Vector) -> Result<BlockStats> {
    let r = graph.r;
    let n = graph.n();
    let sizes = block_sizes(&graph.colors, r);
    if let Some(b) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::EmptyBlock(b));
    }
    let col = &graph.colors;
    let mut delta_bar = Mat::zeros(r, r);
    let mut counts = Mat::zeros(r, r);
    for i in 0..n {
        for j in 0..n {
            delta_bar[(col[i], col[j])] += delta[(i, j)];
            if graph.edge(i, j) {
                counts[(col[i], col[j])] += 1.0;
            }
        }
    }
    let mut q_hat = Mat::zeros(r, r);
    for b in 0..r {
        for c in 0..r {
            let (nb, nc) = (sizes[b] as f64, sizes[c] as f64);
            delta_bar[(b, c)] /= nb * nc;
            q_hat[(b, c)] = if b != c {
                counts[(b, c)] / (nb * nc)
            } else if sizes[b] >= 2 {
                // the ordered count sees each unordered pair twice
                counts[(b, b)] / (nb * (nb - 1.0))
            } else {
                0.0
            };
        }
    }
    let mut zeta_bar = Vector::zeros(r);
    let mut q_hat_test = Vector::zeros(r);
    for i in 0..n {
        zeta_bar[col[i]] += zeta[i];
        if graph.test_edges[i] {
            q_hat_test[col[i]] += 1.0;
        }
    }
    for b in 0..r {
        zeta_bar[b] /= sizes[b] as f64;
        q_hat_test[b] /= sizes[b] as f64;
    }
    Ok(BlockStats {
        sizes,
        delta_bar,
        zeta_bar,
        q_hat,
        q_hat_test,
    })
}

/// Train–train action sizes and the relative curvature of the perturbation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ActionTerms {
    /// Realized `||Delta (y*c_M)||_2 / n^{3/2}`.
    pub a_realized: f64,
    /// `||Delta||_op / n`.
    pub op_term: f64,
    /// `delta_*/n + L_* d_2 / n^{3/2}`.
    pub degree_term: f64,
    /// `A_Delta`, the smaller of the two bounds.
    pub a_delta: f64,
    pub gamma_cspec: f64,
}

/// `c_m` is the block-constant dual on `M_n`; `y` the sample labels.
#[allow(clippy::too_many_arguments)]
pub fn action_terms(
    delta: &Mat,
    m_n: &Mat,
    graph: &CollisionGraph,
    c_m: &Vector,
    y: &Vector,
    lambda: f64,
    delta_star: f64,
    l_star: f64,
) -> ActionTerms {
    let n = delta.nrows() as f64;
    let a_realized = (delta * y.component_mul(c_m)).norm() / n.powf(1.5);
    let op_term = linalg::sym_op_norm(delta) / n;
    let degree_term = delta_star / n + l_star * graph.d2() / n.powf(1.5);
    let cop = klr::curvature_operator(m_n, y, lambda);
    ActionTerms {
        a_realized,
        op_term,
        degree_term,
        a_delta: op_term.min(degree_term),
        gamma_cspec: klr::relative_curvature(&cop, delta, y, lambda),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{Template, TemplateFamily};

    fn family() -> TemplateFamily {
        TemplateFamily::new(
            vec![Template::parse("#100ab").unwrap(), Template::parse("#101ab").unwrap()],
            vec![1, -1],
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn shared_token_creates_an_edge() {
        let fam = family();
        let ds = Dataset {
            r: 2,
            samples: vec![
                Sample::new(&fam, 0, vec![1, 2]),
                Sample::new(&fam, 1, vec![2, 3]),
                Sample::new(&fam, 0, vec![4, 5]),
            ],
        };
        let test = Sample::new(&fam, 0, vec![50, 51]);
        let g = build_graph(&ds, &test, &fam);
        assert!(g.edge(0, 1) && g.edge(1, 0));
        assert!(!g.edge(0, 2) && !g.edge(1, 2));
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.test_edge_count(), 0);
    }

    #[test]
    fn literal_hit_creates_an_edge() {
        let fam = family();
        // the first sample's wildcard image contains the other template's literal 101
        let ds = Dataset {
            r: 2,
            samples: vec![Sample::new(&fam, 0, vec![101, 2]), Sample::new(&fam, 1, vec![7, 8])],
        };
        let g = build_graph(&ds, &Sample::new(&fam, 0, vec![50, 51]), &fam);
        assert!(g.edge(0, 1));
    }

    #[test]
    fn degree_identity_and_counts() {
        let colors = vec![0, 0, 1, 1, 1];
        let g = CollisionGraph::from_fn(colors, 2, vec![false; 5], |i, j| (i + j) % 2 == 1);
        let n = 5.0f64;
        let lhs = g.d2().powi(2);
        let rhs = n * n * g.edge_density() + n.powi(3) * g.wedge_density();
        assert!((lhs - rhs).abs() < 1e-9);
        let total: usize = {
            let c = g.color_pair_counts();
            c[0][0] + c[1][1] + c[0][1]
        };
        assert_eq!(total, g.edge_count());
    }

    #[test]
    fn empty_graph_stats() {
        let colors = vec![0, 1, 0, 1];
        let g = CollisionGraph::from_fn(colors, 2, vec![false; 4], |_, _| false);
        let mut delta = Mat::zeros(4, 4);
        for i in 0..4 {
            delta[(i, i)] = 0.25;
        }
        let st = block_stats(&g, &delta, &Vector::zeros(4)).unwrap();
        assert_eq!(st.delta_bar[(0, 1)], 0.0);
        assert!(st.delta_bar[(0, 0)] <= 0.25 / 2.0 + 1e-15);
        assert_eq!(g.d2(), 0.0);
    }

    #[test]
    fn single_cross_edge_average() {
        let colors = vec![0, 0, 1, 1, 1];
        let g = CollisionGraph::from_fn(colors, 2, vec![false; 5], |i, j| (i, j) == (1, 3));
        let mut delta = Mat::zeros(5, 5);
        delta[(1, 3)] = 0.6;
        delta[(3, 1)] = 0.6;
        let st = block_stats(&g, &delta, &Vector::zeros(5)).unwrap();
        assert!((st.delta_bar[(0, 1)] - 0.6 / 6.0).abs() < 1e-15);
        assert!((st.q_hat[(0, 1)] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn empty_block_is_rejected() {
        let g = CollisionGraph::from_fn(vec![0, 0], 2, vec![false; 2], |_, _| false);
        assert!(matches!(
            block_stats(&g, &Mat::zeros(2, 2), &Vector::zeros(2)),
            Err(Error::EmptyBlock(1))
        ));
    }
}
