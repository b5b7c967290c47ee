use crate::error::{Error, Result};
use crate::numerics::{softmax, Activation, Layer, Matrix, Mlp, MlpGrads, Tape};

/// Initial node features: support rows carry `[score ‖ one-hot label]`, the
/// single query node (last row) carries `[score ‖ uniform]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexMatrix {
    pub nodes: Matrix,
    pub n_way: usize,
}

impl VertexMatrix {
    pub fn n_nodes(&self) -> usize {
        self.nodes.rows()
    }

    pub fn query_index(&self) -> usize {
        self.nodes.rows() - 1
    }
}

pub(crate) fn label_block(labels: &[usize], n_way: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), n_way);
    for (r, &l) in labels.iter().enumerate() {
        if l >= n_way {
            return Err(Error::Index {
                what: "support label",
                index: l,
                bound: n_way,
            });
        }
        m.set(r, l, 1.0);
    }
    Ok(m)
}

pub fn build_vertices(
    support_scores: &Matrix,
    support_labels: &[usize],
    query_scores: &[f64],
    n_way: usize,
) -> Result<VertexMatrix> {
    if support_labels.len() != support_scores.rows() {
        return Err(Error::shape(
            "build_vertices",
            format!("{} support labels", support_scores.rows()),
            support_labels.len(),
        ));
    }
    if query_scores.len() != support_scores.cols() {
        return Err(Error::shape(
            "build_vertices",
            format!("query score width {}", support_scores.cols()),
            query_scores.len(),
        ));
    }
    let onehot = label_block(support_labels, n_way)?;
    let support = Matrix::hstack(&[support_scores, &onehot])?;
    let mut query = query_scores.to_vec();
    query.extend(std::iter::repeat_n(1.0 / n_way as f64, n_way));
    let mut nodes = support;
    nodes.push_row(&query)?;
    Ok(VertexMatrix { nodes, n_way })
}

/// Raw and normalised learned adjacency of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    /// MLP edge scores; the diagonal holds `-inf`.
    pub raw: Matrix,
    /// Row-wise softmax over off-diagonal entries, zero diagonal.
    pub normalized: Matrix,
}

/// Learned adjacency from an MLP over absolute node differences.
pub fn edge_block(nodes: &Matrix, edge: &Mlp) -> Result<Adjacency> {
    let n = nodes.rows();
    if n < 2 {
        return Err(Error::Protocol(format!(
            "edge block needs at least two nodes, got {n}"
        )));
    }
    if edge.input_width() != nodes.cols() || edge.output_width() != 1 {
        return Err(Error::shape(
            "edge_block",
            format!("edge MLP {} -> 1", nodes.cols()),
            format!("{} -> {}", edge.input_width(), edge.output_width()),
        ));
    }
    let pairs = all_pairs(n);
    let (vals, _) = edge_pairs_forward(edge, nodes, &pairs)?;
    let raw = raw_from_pairs(n, &pairs, &vals);
    let normalized = normalize_rows(&raw);
    Ok(Adjacency { raw, normalized })
}

/// `f(Σ_B (B · nodes) · θ_B + b_B)` over an operator family.
pub fn graph_conv(
    nodes: &Matrix,
    operators: &[Matrix],
    theta: &[Layer],
    activation: Activation,
) -> Result<Matrix> {
    if operators.is_empty() {
        return Err(Error::Config(
            "graph convolution needs at least one operator".into(),
        ));
    }
    if operators.len() != theta.len() {
        return Err(Error::Config(format!(
            "{} operators but {} weight blocks",
            operators.len(),
            theta.len()
        )));
    }
    let n = nodes.rows();
    let width = theta[0].output_width();
    let mut acc = Matrix::zeros(n, width);
    for (op, th) in operators.iter().zip(theta) {
        if op.shape() != (n, n) {
            return Err(Error::shape(
                "graph_conv",
                format!("{n}x{n} operator"),
                format!("{}x{}", op.rows(), op.cols()),
            ));
        }
        if th.output_width() != width {
            return Err(Error::shape(
                "graph_conv",
                format!("output width {width}"),
                th.output_width(),
            ));
        }
        let mixed = op.matmul(nodes)?;
        acc.add_assign(&th.affine(&mixed)?)?;
    }
    Ok(activation.apply_matrix(&acc))
}

// ---------------------------------------------------------------------------
// Kernels shared by the forward and backward passes of the metric network.

pub(crate) fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Edge MLP over `|x_i - x_j|` for each pair; returns one raw score per pair.
pub(crate) fn edge_pairs_forward(
    edge: &Mlp,
    x: &Matrix,
    pairs: &[(usize, usize)],
) -> Result<(Vec<f64>, Tape)> {
    let w = x.cols();
    let mut diffs = Matrix::zeros(pairs.len(), w);
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let (a, b) = (x.row(i), x.row(j));
        for ((d, &u), &v) in diffs.row_mut(p).iter_mut().zip(a).zip(b) {
            *d = (u - v).abs();
        }
    }
    let (out, tape) = edge.forward(&diffs)?;
    Ok((out.into_vec(), tape))
}

/// Backward through [`edge_pairs_forward`]: accumulates parameter gradients
/// into `grads` and node gradients into `dx`.
pub(crate) fn edge_pairs_backward(
    edge: &Mlp,
    x: &Matrix,
    pairs: &[(usize, usize)],
    tape: &Tape,
    d_raw: &[f64],
    grads: &mut MlpGrads,
    dx: &mut Matrix,
) -> Result<()> {
    if pairs.is_empty() {
        return Ok(());
    }
    let upstream = Matrix::from_vec(pairs.len(), 1, d_raw.to_vec())?;
    let (g, d_diff) = edge.backward(tape, &upstream)?;
    grads.accumulate(&g);
    let w = x.cols();
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let dd = d_diff.row(p);
        for c in 0..w {
            let delta = x.get(i, c) - x.get(j, c);
            // subgradient 0 at equal coordinates
            let s = if delta > 0.0 {
                dd[c]
            } else if delta < 0.0 {
                -dd[c]
            } else {
                0.0
            };
            if s != 0.0 {
                dx.data_mut()[i * w + c] += s;
                dx.data_mut()[j * w + c] -= s;
            }
        }
    }
    Ok(())
}

pub(crate) fn raw_from_pairs(n: usize, pairs: &[(usize, usize)], vals: &[f64]) -> Matrix {
    let mut raw = Matrix::zeros(n, n);
    for (&(i, j), &v) in pairs.iter().zip(vals) {
        raw.set(i, j, v);
        raw.set(j, i, v);
    }
    for i in 0..n {
        raw.set(i, i, f64::NEG_INFINITY);
    }
    raw
}

/// Softmax of each row over its off-diagonal entries; the diagonal is zero.
pub(crate) fn normalize_rows(raw: &Matrix) -> Matrix {
    let n = raw.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let row = raw.row(i);
        let max = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let o = out.row_mut(i);
        let mut sum = 0.0;
        for j in 0..n {
            if j != i {
                let e = (row[j] - max).exp();
                o[j] = e;
                sum += e;
            }
        }
        for v in o.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Gradient of the row softmax: `d_raw_ij = a_ij (d_a_ij - Σ_l a_il d_a_il)`.
pub(crate) fn normalize_backward(adj: &Matrix, d_adj: &Matrix) -> Matrix {
    let n = adj.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let a = adj.row(i);
        let da = d_adj.row(i);
        let inner: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
        let o = out.row_mut(i);
        for j in 0..n {
            if j != i {
                o[j] = a[j] * (da[j] - inner);
            }
        }
    }
    out
}

/// Softmax over a single vector of raw scores (query-row edges).
pub(crate) fn normalize_vector(raw: &[f64]) -> Vec<f64> {
    softmax(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vertices_by_definition() {
        let s = Matrix::from_rows(&[[1.0, -1.0]]).unwrap();
        let v = build_vertices(&s, &[0], &[0.0, 0.0], 2).unwrap();
        assert_eq!(v.nodes.row(0), &[1.0, -1.0, 1.0, 0.0]);
        assert_eq!(v.nodes.row(1), &[0.0, 0.0, 0.5, 0.5]);
        assert_eq!(v.query_index(), 1);
        assert!(matches!(
            build_vertices(&s, &[2], &[0.0, 0.0], 2),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn vertices_shape_and_permutation() {
        let s = Matrix::from_fn(25, 5, |i, j| (i * 5 + j) as f64 * 0.01);
        let labels: Vec<usize> = (0..25).map(|i| i / 5).collect();
        let v = build_vertices(&s, &labels, &[0.1; 5], 5).unwrap();
        assert_eq!(v.nodes.shape(), (26, 10));
        let perm: Vec<usize> = (0..25).rev().collect();
        let sp = s.select_rows(&perm);
        let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let vp = build_vertices(&sp, &lp, &[0.1; 5], 5).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(vp.nodes.row(k), v.nodes.row(i));
        }
    }

    #[test]
    fn identical_nodes_give_uniform_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let edge = Mlp::random(
            &[3, 8, 1],
            Activation::leaky(),
            Activation::Identity,
            &mut rng,
        )
        .unwrap();
        let nodes = Matrix::filled(4, 3, 0.7);
        let adj = edge_block(&nodes, &edge).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 0.0 } else { 1.0 / 3.0 };
                assert!((adj.normalized.get(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_node_is_protocol_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let edge =
            Mlp::random(&[3, 1], Activation::leaky(), Activation::Identity, &mut rng).unwrap();
        assert!(matches!(
            edge_block(&Matrix::zeros(1, 3), &edge),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn hand_computed_three_node_edges() {
        // one affine layer: raw = 0.5*|d0| - 1.0*|d1| + 0.25
        let layer = Layer::new(
            Matrix::from_rows(&[[0.5], [-1.0]]).unwrap(),
            vec![0.25],
            Activation::Identity,
        )
        .unwrap();
        let edge = Mlp::new(vec![layer]).unwrap();
        let nodes = Matrix::from_rows(&[[0.0, 1.0], [2.0, -1.0], [1.0, 1.5]]).unwrap();
        let adj = edge_block(&nodes, &edge).unwrap();
        let r01: f64 = 0.5 * 2.0 - 1.0 * 2.0 + 0.25;
        let r02: f64 = 0.5 * 1.0 - 1.0 * 0.5 + 0.25;
        let r12: f64 = 0.5 * 1.0 - 1.0 * 2.5 + 0.25;
        assert!((adj.raw.get(0, 1) - r01).abs() < 1e-12);
        assert!((adj.raw.get(2, 1) - r12).abs() < 1e-12);
        let row0 = [
            r01.exp() / (r01.exp() + r02.exp()),
            r02.exp() / (r01.exp() + r02.exp()),
        ];
        assert!((adj.normalized.get(0, 1) - row0[0]).abs() < 1e-12);
        assert!((adj.normalized.get(0, 2) - row0[1]).abs() < 1e-12);
        let row2 = [
            r02.exp() / (r02.exp() + r12.exp()),
            r12.exp() / (r02.exp() + r12.exp()),
        ];
        assert!((adj.normalized.get(2, 0) - row2[0]).abs() < 1e-12);
        assert!((adj.normalized.get(2, 1) - row2[1]).abs() < 1e-12);
    }

    #[test]
    fn conv_identity_cases() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [-0.5, 0.25], [3.0, -1.0]]).unwrap();
        let id = Layer::identity(2, Activation::Identity);
        let out = graph_conv(
            &x,
            &[Matrix::identity(3)],
            std::slice::from_ref(&id),
            Activation::Identity,
        )
        .unwrap();
        assert_eq!(out, x);
        let out2 = graph_conv(
            &x,
            &[Matrix::identity(3), Matrix::zeros(3, 3)],
            &[id.clone(), Layer::zeros(2, 2, Activation::Identity)],
            Activation::Identity,
        )
        .unwrap();
        assert_eq!(out2, x);
        assert!(matches!(
            graph_conv(&x, &[], &[], Activation::Identity),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn conv_hand_oracle() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]]).unwrap();
        let a = Matrix::from_rows(&[[0.0, 0.5, 0.5], [0.25, 0.0, 0.75], [1.0, 0.0, 0.0]]).unwrap();
        let t_self = Layer::new(
            Matrix::from_rows(&[[1.0], [-1.0]]).unwrap(),
            vec![0.1],
            Activation::Identity,
        )
        .unwrap();
        let t_adj = Layer::new(
            Matrix::from_rows(&[[2.0], [0.5]]).unwrap(),
            vec![-0.2],
            Activation::Identity,
        )
        .unwrap();
        let out = graph_conv(
            &x,
            &[Matrix::identity(3), a],
            &[t_self, t_adj],
            Activation::LeakyRelu(0.2),
        )
        .unwrap();
        // node 0: self 1*1 + 0*-1 + 0.1 = 1.1; neighbours 0.5*[0,2]+0.5*[1,1] = [0.5,1.5] -> 1.0+0.75-0.2 = 1.55
        // node 1: self -2 + 0.1 = -1.9; nb 0.25*[1,0]+0.75*[1,1] = [1,0.75] -> 2+0.375-0.2 = 2.175
        // node 2: self 0 + 0.1 = 0.1; nb [1,0] -> 2 - 0.2 = 1.8
        let expect = [1.1 + 1.55, -1.9 + 2.175, 0.1 + 1.8];
        for (r, e) in expect.iter().enumerate() {
            assert!((out.get(r, 0) - e).abs() < 1e-12, "{r}");
        }
    }
}
