//! Comparison methods: nearest-centroid ProtoNet on features, the score-space
//! S-Proto classifier and the graph metric applied to tuned features (FT-GNN).

use rand::Rng;

use crate::error::{Error, Result};
use crate::gnn::MetricNet;
use crate::numerics::{
    argmin, softmax_cross_entropy, Activation, Matrix, Mlp, MlpGrads, Parameters,
};
use crate::parallel::ExecMode;
use crate::scorer::ScoreMatrix;

/// Class centroids of `rows`; classes are `0..=max(label)`.
pub fn class_centroids(rows: &Matrix, labels: &[usize]) -> Result<Matrix> {
    if labels.len() != rows.rows() {
        return Err(Error::shape("class_centroids", rows.rows(), labels.len()));
    }
    let n_way = labels.iter().max().map_or(0, |m| m + 1);
    let mut sums = Matrix::zeros(n_way, rows.cols());
    let mut counts = vec![0usize; n_way];
    for (r, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums.row_mut(l).iter_mut().zip(rows.row(r)) {
            *s += v;
        }
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Protocol(format!("class {c} has no support rows")));
    }
    for (c, &n) in counts.iter().enumerate() {
        for s in sums.row_mut(c) {
            *s /= n as f64;
        }
    }
    Ok(sums)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(centroids: &Matrix, queries: &Matrix) -> Result<Vec<usize>> {
    if queries.cols() != centroids.cols() {
        return Err(Error::shape(
            "nearest_centroid",
            centroids.cols(),
            queries.cols(),
        ));
    }
    Ok(queries
        .iter_rows()
        .map(|q| {
            let d: Vec<f64> = centroids
                .iter_rows()
                .map(|c| squared_distance(q, c))
                .collect();
            argmin(&d)
        })
        .collect())
}

/// Nearest class centroid under squared Euclidean distance.
pub fn protonet_predict(
    support_features: &Matrix,
    support_labels: &[usize],
    query_features: &Matrix,
) -> Result<Vec<usize>> {
    let centroids = class_centroids(support_features, support_labels)?;
    nearest_centroid(&centroids, query_features)
}

/// Score-space prototypical classifier with a learned embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct SProtoNet {
    embedding: Mlp,
}

pub const DEFAULT_SPROTO_WIDTH: usize = 32;

impl SProtoNet {
    pub fn new(embedding: Mlp) -> Self {
        SProtoNet { embedding }
    }

    /// `score_width -> embed_width -> embed_width` with a leaky hidden layer.
    pub fn random<R: Rng + ?Sized>(
        score_width: usize,
        embed_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if embed_width == 0 {
            return Err(Error::Config("S-Proto embed width must be >= 1".into()));
        }
        let embedding = Mlp::random(
            &[score_width, embed_width, embed_width],
            Activation::leaky(),
            Activation::Identity,
            rng,
        )?;
        Ok(SProtoNet { embedding })
    }

    pub fn embedding(&self) -> &Mlp {
        &self.embedding
    }

    pub fn into_embedding(self) -> Mlp {
        self.embedding
    }

    pub fn predict(
        &self,
        support: &Matrix,
        support_labels: &[usize],
        queries: &Matrix,
    ) -> Result<Vec<usize>> {
        let s = self.embedding.apply(support)?;
        let q = self.embedding.apply(queries)?;
        let centroids = class_centroids(&s, support_labels)?;
        nearest_centroid(&centroids, &q)
    }

    /// Cross-entropy over softmax of negative squared centroid distances,
    /// centroids taken after embedding.
    pub fn loss_and_grad(
        &self,
        support: &Matrix,
        support_labels: &[usize],
        queries: &Matrix,
        query_labels: &[usize],
    ) -> Result<(f64, MlpGrads)> {
        if queries.rows() == 0 {
            return Err(Error::Protocol(
                "S-Proto loss needs at least one query".into(),
            ));
        }
        let n_s = support.rows();
        let stacked = Matrix::vstack(&[support, queries])?;
        let (emb, tape) = self.embedding.forward(&stacked)?;
        let e_s = emb.select_rows(&(0..n_s).collect::<Vec<_>>());
        let e_q = emb.select_rows(&(n_s..emb.rows()).collect::<Vec<_>>());
        let centroids = class_centroids(&e_s, support_labels)?;
        let n_way = centroids.rows();
        let logits = Matrix::from_fn(e_q.rows(), n_way, |q, k| {
            -squared_distance(e_q.row(q), centroids.row(k))
        });
        let (loss, dlogits) = softmax_cross_entropy(&logits, query_labels)?;

        let width = emb.cols();
        let mut d_emb = Matrix::zeros(emb.rows(), width);
        let mut d_cent = Matrix::zeros(n_way, width);
        for q in 0..e_q.rows() {
            for k in 0..n_way {
                let g = dlogits.get(q, k);
                if g == 0.0 {
                    continue;
                }
                for d in 0..width {
                    let diff = e_q.get(q, d) - centroids.get(k, d);
                    let v = d_emb.get(n_s + q, d) - 2.0 * g * diff;
                    d_emb.set(n_s + q, d, v);
                    let c = d_cent.get(k, d) + 2.0 * g * diff;
                    d_cent.set(k, d, c);
                }
            }
        }
        let mut counts = vec![0usize; n_way];
        for &l in support_labels {
            counts[l] += 1;
        }
        for (i, &l) in support_labels.iter().enumerate() {
            let inv = 1.0 / counts[l] as f64;
            for (d, c) in d_emb.row_mut(i).iter_mut().zip(d_cent.row(l)) {
                *d += c * inv;
            }
        }
        let (grads, _) = self.embedding.backward(&tape, &d_emb)?;
        Ok((loss, grads))
    }
}

impl Parameters for SProtoNet {
    fn param_count(&self) -> usize {
        Parameters::param_count(&self.embedding)
    }

    fn flatten_params(&self) -> Vec<f64> {
        self.embedding.flatten_params()
    }

    fn assign_params(&mut self, src: &[f64]) -> Result<()> {
        self.embedding.assign_params(src)
    }
}

pub fn sproto_predict(
    net: &SProtoNet,
    support_scores: &ScoreMatrix,
    support_labels: &[usize],
    query_scores: &ScoreMatrix,
) -> Result<Vec<usize>> {
    net.predict(
        support_scores.values(),
        support_labels,
        query_scores.values(),
    )
}

/// Graph metric over tuned feature vectors instead of scores.
pub fn ftgnn_predict(
    net: &MetricNet,
    support_features: &Matrix,
    support_labels: &[usize],
    query_features: &Matrix,
    mode: ExecMode,
) -> Result<Vec<usize>> {
    if net.input_width() != support_features.cols() {
        return Err(Error::shape(
            "ftgnn_predict",
            format!("feature width {}", net.input_width()),
            support_features.cols(),
        ));
    }
    net.predict(support_features, support_labels, query_features, mode)
}
