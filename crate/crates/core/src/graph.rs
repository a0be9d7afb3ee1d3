//! Discrete variables as weighted undirected graphs.
//!
//! A [`FactorGraph`] owns its unnormalized Laplacian `L = D - A` together with
//! the eigendecomposition `L = U diag(λ) Uᵀ`, computed once at construction.
//! Eigenvalues are sorted ascending and the tiny ones are clamped to zero.
//! Eigenvector signs are whatever the solver returns; nothing downstream
//! depends on them because `U` only ever appears quadratically.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative threshold under which an eigenvalue is treated as exactly zero.
const ZERO_EIG_RTOL: f64 = 1e-10;
/// Relative threshold under which consecutive eigenvalues share a projector.
const GROUP_RTOL: f64 = 1e-12;

/// Eigenvalues that coincide (up to rounding) and the orthogonal projector
/// onto their joint eigenspace.
#[derive(Debug, Clone)]
pub struct SpectralGroup {
    pub lambda: f64,
    pub projector: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct FactorGraph {
    weights: DMatrix<f64>,
    eigvals: DVector<f64>,
    eigvecs: DMatrix<f64>,
    groups: Vec<SpectralGroup>,
    neighbors: Vec<Vec<usize>>,
    connected: bool,
}

impl FactorGraph {
    /// Unweighted complete graph `K_n`. Its spectrum is `{0, n, ..., n}`.
    pub fn complete(n: usize) -> Result<Self> {
        check_size(n)?;
        let weights = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 });
        Ok(Self::from_weight_matrix(weights))
    }

    /// Unweighted path `0 - 1 - ... - (n-1)`, the natural graph of an ordinal variable.
    pub fn path(n: usize) -> Result<Self> {
        check_size(n)?;
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i, 1.0)).collect();
        Self::from_weighted_edges(n, &edges)
    }

    /// Assemble a graph from `(i, j, w)` triples. Duplicate edges are summed.
    pub fn from_weighted_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        check_size(n)?;
        let mut weights = DMatrix::zeros(n, n);
        for &(i, j, w) in edges {
            let reason = if i >= n || j >= n {
                Some("vertex index out of range")
            } else if i == j {
                Some("self-loop")
            } else if !(w > 0.0) || !w.is_finite() {
                Some("weight must be positive and finite")
            } else {
                None
            };
            if let Some(reason) = reason {
                return Err(Error::InvalidEdge { i, j, w, reason });
            }
            weights[(i, j)] += w;
            weights[(j, i)] += w;
        }
        Ok(Self::from_weight_matrix(weights))
    }

    fn from_weight_matrix(weights: DMatrix<f64>) -> Self {
        let n = weights.nrows();
        let laplacian = laplacian_of(&weights);
        let (eigvals, eigvecs) = sorted_eigen(laplacian);
        let groups = spectral_groups(&eigvals, &eigvecs);

        let mut neighbors = vec![Vec::new(); n];
        let mut dsu = DisjointSet::new(n);
        for i in 0..n {
            for j in 0..n {
                if weights[(i, j)] > 0.0 {
                    neighbors[i].push(j);
                    dsu.union(i, j);
                }
            }
        }
        let root = dsu.find(0);
        let connected = (1..n).all(|v| dsu.find(v) == root);

        Self {
            weights,
            eigvals,
            eigvecs,
            groups,
            neighbors,
            connected,
        }
    }

    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn laplacian(&self) -> DMatrix<f64> {
        laplacian_of(&self.weights)
    }

    /// Laplacian eigenvalues (graph frequencies), ascending.
    pub fn eigvals(&self) -> &DVector<f64> {
        &self.eigvals
    }

    /// Orthonormal graph Fourier basis; column `i` pairs with `eigvals()[i]`.
    pub fn eigvecs(&self) -> &DMatrix<f64> {
        &self.eigvecs
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigvals[self.n() - 1]
    }

    pub fn groups(&self) -> &[SpectralGroup] {
        &self.groups
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    /// Vertices sharing a positive-weight edge with `v`, ascending.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    /// Upper-triangle edge list `(i, j, w)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let w = self.weights[(i, j)];
                if w > 0.0 {
                    out.push((i, j, w));
                }
            }
        }
        out
    }

    /// `U diag(h(λ)) Uᵀ`, symmetrized.
    pub fn spectral_transform<H>(&self, h: H) -> Result<DMatrix<f64>>
    where
        H: Fn(f64) -> f64,
    {
        let n = self.n();
        let mut hv = DVector::zeros(n);
        for (i, &lambda) in self.eigvals.iter().enumerate() {
            let value = h(lambda);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("spectrum function at lambda = {lambda}"),
                    value,
                });
            }
            hv[i] = value;
        }
        let scaled = DMatrix::from_fn(n, n, |r, c| self.eigvecs[(r, c)] * hv[c]);
        let m = &scaled * self.eigvecs.transpose();
        Ok((&m + m.transpose()) * 0.5)
    }

    pub fn to_decl(&self) -> GraphDecl {
        GraphDecl::Edges {
            n: self.n(),
            edges: self.edges(),
        }
    }
}

fn check_size(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidSize("graph needs at least one vertex".into()));
    }
    Ok(())
}

fn laplacian_of(weights: &DMatrix<f64>) -> DMatrix<f64> {
    let n = weights.nrows();
    let mut l = -weights.clone();
    for i in 0..n {
        l[(i, i)] = weights.row(i).sum();
    }
    l
}

fn sorted_eigen(laplacian: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = laplacian.nrows();
    let eig = SymmetricEigen::new(laplacian);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let lambda_max = order.last().map_or(0.0, |&i| eig.eigenvalues[i]);
    let zero_tol = ZERO_EIG_RTOL * lambda_max.max(1.0);
    let eigvals = DVector::from_iterator(
        n,
        order.iter().map(|&i| {
            let l = eig.eigenvalues[i];
            if l.abs() < zero_tol {
                0.0
            } else {
                l
            }
        }),
    );
    let eigvecs = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (eigvals, eigvecs)
}

fn spectral_groups(eigvals: &DVector<f64>, eigvecs: &DMatrix<f64>) -> Vec<SpectralGroup> {
    let n = eigvals.len();
    let tol = GROUP_RTOL * eigvals[n - 1].abs().max(1.0);
    let mut groups = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && eigvals[end] - eigvals[end - 1] <= tol {
            end += 1;
        }
        let cols = eigvecs.columns(start, end - start);
        let projector = cols * cols.transpose();
        let projector = (&projector + projector.transpose()) * 0.5;
        let lambda = eigvals.rows(start, end - start).mean();
        groups.push(SpectralGroup { lambda, projector });
        start = end;
    }
    groups
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// How a graph is written in configuration files and witness records:
/// `"complete(n)"`, `"path(n)"`, or `{ n = .., edges = [[i, j, w], ...] }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GraphDecl {
    Short(String),
    Edges {
        n: usize,
        edges: Vec<(usize, usize, f64)>,
    },
}

impl GraphDecl {
    pub fn build(&self) -> Result<FactorGraph> {
        match self {
            GraphDecl::Edges { n, edges } => FactorGraph::from_weighted_edges(*n, edges),
            GraphDecl::Short(s) => {
                let s = s.trim();
                let parse = |prefix: &str| -> Option<usize> {
                    s.strip_prefix(prefix)?
                        .strip_suffix(')')?
                        .trim()
                        .parse()
                        .ok()
                };
                if let Some(n) = parse("complete(") {
                    FactorGraph::complete(n)
                } else if let Some(n) = parse("path(") {
                    FactorGraph::path(n)
                } else {
                    Err(Error::Config(format!(
                        "unrecognized graph `{s}` (expected complete(n), path(n) or an edge table)"
                    )))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Cyclic Jacobi eigenvalue iteration, independent of nalgebra's solver.
    fn jacobi_eigen(mut a: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let n = a.nrows();
        let mut v = DMatrix::identity(n, n);
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[(i, j)] * a[(i, j)])
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[(k, p)], a[(k, q)]);
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
        ((0..n).map(|i| a[(i, i)]).collect(), v)
    }

    fn sorted(mut v: Vec<f64>) -> Vec<f64> {
        v.sort_by(f64::total_cmp);
        v
    }

    fn assert_vec_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn complete_graph_spectrum() {
        let g = FactorGraph::complete(3).unwrap();
        assert_vec_close(g.eigvals().as_slice(), &[0.0, 3.0, 3.0], 1e-12);
        let g = FactorGraph::complete(5).unwrap();
        let oracle = sorted(jacobi_eigen(g.laplacian()).0);
        assert_vec_close(&oracle, &[0.0, 5.0, 5.0, 5.0, 5.0], 1e-12);
        assert_vec_close(g.eigvals().as_slice(), &oracle, 1e-10);
        assert_eq!(g.groups().len(), 2);
    }

    #[test]
    fn single_vertex() {
        let g = FactorGraph::complete(1).unwrap();
        assert_eq!(g.eigvals().as_slice(), &[0.0]);
        assert_eq!(g.eigvecs()[(0, 0)].abs(), 1.0);
        assert!(g.is_connected());
        assert_eq!(FactorGraph::path(1).unwrap().eigvals().as_slice(), &[0.0]);
    }

    #[test]
    fn zero_vertices_rejected() {
        assert!(matches!(FactorGraph::complete(0), Err(Error::InvalidSize(_))));
        assert!(matches!(FactorGraph::path(0), Err(Error::InvalidSize(_))));
        assert!(FactorGraph::from_weighted_edges(0, &[]).is_err());
    }

    #[test]
    fn path_graph_spectrum() {
        let g = FactorGraph::path(3).unwrap();
        let l = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert_eq!(g.laplacian(), l);
        let oracle = sorted(jacobi_eigen(l).0);
        assert_vec_close(&oracle, &[0.0, 1.0, 3.0], 1e-12);
        assert_vec_close(g.eigvals().as_slice(), &oracle, 1e-10);
        let g = FactorGraph::path(2).unwrap();
        assert_vec_close(g.eigvals().as_slice(), &[0.0, 2.0], 1e-12);
    }

    #[test]
    fn weighted_edges() {
        let g = FactorGraph::from_weighted_edges(2, &[(0, 1, 2.0)]).unwrap();
        assert_vec_close(g.eigvals().as_slice(), &[0.0, 4.0], 1e-12);

        let g = FactorGraph::from_weighted_edges(3, &[(0, 1, 1.0)]).unwrap();
        assert!(!g.is_connected());
        assert_eq!(g.eigvals()[1], 0.0);

        let tri = FactorGraph::from_weighted_edges(3, &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)])
            .unwrap();
        let k3 = FactorGraph::complete(3).unwrap();
        assert_eq!(tri.weights(), k3.weights());
        assert_vec_close(tri.eigvals().as_slice(), k3.eigvals().as_slice(), 1e-14);

        let dup = FactorGraph::from_weighted_edges(2, &[(0, 1, 0.5), (1, 0, 1.5)]).unwrap();
        assert_eq!(dup.weights()[(0, 1)], 2.0);
    }

    #[test]
    fn bad_edges_rejected() {
        for edges in [
            vec![(1, 1, 1.0)],
            vec![(0, 1, 0.0)],
            vec![(0, 1, -1.0)],
            vec![(0, 3, 1.0)],
            vec![(0, 1, f64::NAN)],
        ] {
            assert!(matches!(
                FactorGraph::from_weighted_edges(3, &edges),
                Err(Error::InvalidEdge { .. })
            ));
        }
    }

    #[test]
    fn decomposition_invariants() {
        let edges = [(0, 1, 0.3), (1, 2, 1.7), (2, 3, 0.9), (0, 3, 1.1), (1, 3, 0.2), (3, 4, 2.0)];
        let g = FactorGraph::from_weighted_edges(5, &edges).unwrap();
        assert!(g.is_connected());
        let l = g.laplacian();
        let u = g.eigvecs();
        let recon = u * DMatrix::from_diagonal(g.eigvals()) * u.transpose();
        let scale = 1.0 + (0..5).map(|i| l[(i, i)]).fold(0.0, f64::max);
        assert!((recon - &l).amax() <= 1e-8 * scale);
        assert!((u.transpose() * u - DMatrix::identity(5, 5)).amax() <= 1e-8);
        assert_eq!(g.eigvals()[0], 0.0);
        assert!(g.eigvals()[1] > 0.0);
        assert!(g.eigvals().as_slice().windows(2).all(|w| w[0] <= w[1]));
        let c0 = 1.0 / 5f64.sqrt();
        for r in 0..5 {
            assert!((u[(r, 0)].abs() - c0).abs() < 1e-8);
        }
    }

    #[test]
    fn spectral_transform_identity_and_closed_form() {
        let g = FactorGraph::path(4).unwrap();
        let m = g.spectral_transform(|_| 1.0).unwrap();
        assert!((m - DMatrix::identity(4, 4)).amax() < 1e-8);

        let k3 = FactorGraph::complete(3).unwrap();
        let m = k3.spectral_transform(|l| 1.0 / (1.0 + l)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 0.5 } else { 0.25 };
                assert!((m[(i, j)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spectral_transform_matches_jacobi_oracle() {
        let g = FactorGraph::path(3).unwrap();
        let m = g.spectral_transform(|l| (-l).exp()).unwrap();
        let (vals, vecs) = jacobi_eigen(g.laplacian());
        let h = DMatrix::from_diagonal(&DVector::from_iterator(3, vals.iter().map(|l| (-l).exp())));
        let oracle = &vecs * h * vecs.transpose();
        assert!((m - oracle).amax() < 1e-10);
    }

    #[test]
    fn spectral_transform_reports_offending_lambda() {
        let g = FactorGraph::complete(3).unwrap();
        let err = g.spectral_transform(|l| if l > 1.0 { f64::INFINITY } else { 1.0 });
        match err {
            Err(Error::NonFinite { context, .. }) => assert!(context.contains('3')),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn graph_decl_parsing() {
        let g = GraphDecl::Short("complete(4)".into()).build().unwrap();
        assert_eq!(g.n(), 4);
        let g = GraphDecl::Short(" path( 6 )".into()).build().unwrap();
        assert_eq!(g.edges().len(), 5);
        assert!(GraphDecl::Short("star(3)".into()).build().is_err());
        let round = g.to_decl().build().unwrap();
        assert_eq!(round.weights(), g.weights());
    }

    #[test]
    fn neighbors_follow_positive_weights() {
        let g = FactorGraph::path(4).unwrap();
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(2), &[1, 3]);
        let iso = FactorGraph::from_weighted_edges(3, &[(0, 1, 1.0)]).unwrap();
        assert!(iso.neighbors(2).is_empty());
    }
}
