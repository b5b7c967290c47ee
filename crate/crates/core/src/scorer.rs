//! Per-episode fine-tuning of an adapter + linear classifier over fixed
//! feature vectors, pre-softmax score extraction and the summed-softmax
//! ensemble baseline.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{
    argmax, optimizer_step, softmax, softmax_cross_entropy, Activation, Layer, Matrix, Mlp,
    OptimizerKind, OptimizerState, Parameters,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OptimizerTag {
    Adam,
    SgdMomentum,
}

impl OptimizerTag {
    pub fn with_lr(self, lr: f64) -> OptimizerKind {
        match self {
            OptimizerTag::Adam => OptimizerKind::adam(lr),
            OptimizerTag::SgdMomentum => OptimizerKind::sgd(lr),
        }
    }

    pub fn code(self) -> u8 {
        match self {
            OptimizerTag::Adam => 0,
            OptimizerTag::SgdMomentum => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(OptimizerTag::Adam),
            1 => Some(OptimizerTag::SgdMomentum),
            _ => None,
        }
    }
}

/// Fine-tunable adapter stack (`dim -> dim`) followed by an identity-activation
/// linear classifier producing pre-softmax scores.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderHead {
    adapter: Mlp,
    classifier: Layer,
    optimizer: OptimizerTag,
}

impl EncoderHead {
    pub fn new(adapter: Mlp, classifier: Layer, optimizer: OptimizerTag) -> Result<Self> {
        if adapter.input_width() != adapter.output_width() {
            return Err(Error::shape(
                "EncoderHead::new",
                format!("adapter preserving width {}", adapter.input_width()),
                format!("output width {}", adapter.output_width()),
            ));
        }
        if classifier.input_width() != adapter.output_width() {
            return Err(Error::shape(
                "EncoderHead::new",
                format!("classifier input width {}", adapter.output_width()),
                format!("{}", classifier.input_width()),
            ));
        }
        if classifier.activation != Activation::Identity {
            return Err(Error::Config(
                "classifier must use identity activation".into(),
            ));
        }
        Ok(EncoderHead {
            adapter,
            classifier,
            optimizer,
        })
    }

    /// Random adapter of `adapter_depth` leaky-relu layers and random classifier.
    pub fn random<R: Rng + ?Sized>(
        dim: usize,
        adapter_depth: usize,
        n_out: usize,
        optimizer: OptimizerTag,
        rng: &mut R,
    ) -> Result<Self> {
        if adapter_depth == 0 {
            return Err(Error::Config("adapter depth must be at least 1".into()));
        }
        let widths = vec![dim; adapter_depth + 1];
        let adapter = Mlp::random(&widths, Activation::leaky(), Activation::leaky(), rng)?;
        let classifier = Layer::random(dim, n_out, Activation::Identity, rng);
        EncoderHead::new(adapter, classifier, optimizer)
    }

    /// Same adapter, zero-initialised classifier of width `n_way`.
    pub fn with_fresh_classifier(&self, n_way: usize) -> EncoderHead {
        EncoderHead {
            adapter: self.adapter.clone(),
            classifier: Layer::zeros(self.feature_dim(), n_way, Activation::Identity),
            optimizer: self.optimizer,
        }
    }

    pub fn adapter(&self) -> &Mlp {
        &self.adapter
    }

    pub fn classifier(&self) -> &Layer {
        &self.classifier
    }

    pub fn optimizer(&self) -> OptimizerTag {
        self.optimizer
    }

    pub fn feature_dim(&self) -> usize {
        self.adapter.input_width()
    }

    pub fn n_way(&self) -> usize {
        self.classifier.output_width()
    }

    /// Adapter output: the fine-tuned feature vectors.
    pub fn embed(&self, features: &Matrix) -> Result<Matrix> {
        self.adapter.apply(features)
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        self.classifier.affine(&self.embed(features)?)
    }

    /// Mean cross-entropy over `(x, y)` and its flat gradient (adapter first,
    /// then classifier), matching [`Parameters`] order.
    pub fn loss_and_grad(&self, x: &Matrix, y: &[usize]) -> Result<(f64, Vec<f64>)> {
        let (h, tape) = self.adapter.forward(x)?;
        let logits = self.classifier.affine(&h)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, y)?;
        let (cg, dh) = self.classifier.affine_backward(&h, &dlogits)?;
        let (ag, _) = self.adapter.backward(&tape, &dh)?;
        let mut flat = Vec::with_capacity(self.param_count());
        ag.flatten_into(&mut flat);
        cg.flatten_into(&mut flat);
        Ok((loss, flat))
    }

    pub fn loss(&self, x: &Matrix, y: &[usize]) -> Result<f64> {
        Ok(softmax_cross_entropy(&self.logits(x)?, y)?.0)
    }

    /// Same adapter, classifier restricted to the given output columns.
    pub fn with_classifier_columns(&self, columns: &[usize]) -> Result<EncoderHead> {
        let bound = self.n_way();
        if let Some(&bad) = columns.iter().find(|&&c| c >= bound) {
            return Err(Error::Index {
                what: "classifier column",
                index: bad,
                bound,
            });
        }
        let w = &self.classifier.weights;
        let weights = Matrix::from_fn(w.rows(), columns.len(), |r, j| w.get(r, columns[j]));
        let biases = columns.iter().map(|&c| self.classifier.biases[c]).collect();
        Ok(EncoderHead {
            adapter: self.adapter.clone(),
            classifier: Layer::new(weights, biases, Activation::Identity)?,
            optimizer: self.optimizer,
        })
    }

    /// Maps a flat gradient of `self.with_classifier_columns(columns)` back onto
    /// this head's parameter layout; unselected columns get zero.
    pub fn scatter_column_grad(&self, columns: &[usize], grad: &[f64]) -> Result<Vec<f64>> {
        let na = Parameters::param_count(&self.adapter);
        let dim = self.feature_dim();
        let k = columns.len();
        if grad.len() != na + dim * k + k {
            return Err(Error::shape(
                "scatter_column_grad",
                na + dim * k + k,
                grad.len(),
            ));
        }
        let n = self.n_way();
        let mut out = vec![0.0; Parameters::param_count(self)];
        out[..na].copy_from_slice(&grad[..na]);
        for r in 0..dim {
            for (j, &c) in columns.iter().enumerate() {
                out[na + r * n + c] += grad[na + r * k + j];
            }
        }
        for (j, &c) in columns.iter().enumerate() {
            out[na + dim * n + c] += grad[na + dim * k + j];
        }
        Ok(out)
    }
}

impl Parameters for EncoderHead {
    fn param_count(&self) -> usize {
        Parameters::param_count(&self.adapter) + Parameters::param_count(&self.classifier)
    }

    fn flatten_params(&self) -> Vec<f64> {
        let mut out = self.adapter.flatten_params();
        out.extend(self.classifier.flatten_params());
        out
    }

    fn assign_params(&mut self, src: &[f64]) -> Result<()> {
        let n = Parameters::param_count(self);
        if src.len() != n {
            return Err(Error::shape("EncoderHead::assign_params", n, src.len()));
        }
        let na = Parameters::param_count(&self.adapter);
        self.adapter.assign_params(&src[..na])?;
        self.classifier.assign_params(&src[na..])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stddev of Gaussian noise added to support rows during tuning.
    pub jitter_std: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            epochs: 100,
            batch_size: 4,
            lr: 0.01,
            jitter_std: 0.0,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self, support_rows: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("fine-tuning needs at least one epoch".into()));
        }
        if self.batch_size == 0 || self.batch_size > support_rows {
            return Err(Error::Config(format!(
                "batch size {} must lie in 1..={support_rows} (support size)",
                self.batch_size
            )));
        }
        if !(self.jitter_std >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(
                "jitter stddev must be >= 0 and lr finite".into(),
            ));
        }
        Ok(())
    }
}

/// Tunes a copy of `head` on the support set and returns it; `head` itself is
/// never touched.
pub fn fine_tune<R: Rng + ?Sized>(
    head: &EncoderHead,
    support: &Matrix,
    labels: &[usize],
    cfg: &FineTuneConfig,
    rng: &mut R,
) -> Result<EncoderHead> {
    run_fine_tune(head, support, labels, cfg, rng, false).map(|(h, _)| h)
}

/// Like [`fine_tune`], also returning the full-support loss before training
/// and after every epoch.
pub fn fine_tune_traced<R: Rng + ?Sized>(
    head: &EncoderHead,
    support: &Matrix,
    labels: &[usize],
    cfg: &FineTuneConfig,
    rng: &mut R,
) -> Result<(EncoderHead, Vec<f64>)> {
    run_fine_tune(head, support, labels, cfg, rng, true)
}

fn run_fine_tune<R: Rng + ?Sized>(
    head: &EncoderHead,
    support: &Matrix,
    labels: &[usize],
    cfg: &FineTuneConfig,
    rng: &mut R,
    trace: bool,
) -> Result<(EncoderHead, Vec<f64>)> {
    cfg.validate(support.rows())?;
    if labels.len() != support.rows() {
        return Err(Error::shape("fine_tune", support.rows(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= head.n_way()) {
        return Err(Error::Index {
            what: "support label",
            index: bad,
            bound: head.n_way(),
        });
    }
    let mut tuned = head.clone();
    let mut opt = OptimizerState::new(head.optimizer.with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..support.rows()).collect();
    let mut losses = Vec::new();
    if trace {
        losses.push(tuned.loss(support, labels)?);
    }
    let mut batch_labels = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = support.select_rows(chunk);
            if cfg.jitter_std > 0.0 {
                for v in x.data_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += cfg.jitter_std * z;
                }
            }
            batch_labels.clear();
            batch_labels.extend(chunk.iter().map(|&i| labels[i]));
            let (loss, grads) = tuned.loss_and_grad(&x, &batch_labels)?;
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    location: "fine-tuning loss".into(),
                });
            }
            optimizer_step(&mut opt, &mut tuned, &grads)?;
        }
        if trace {
            losses.push(tuned.loss(support, labels)?);
        }
    }
    Ok((tuned, losses))
}

/// Pre-softmax scores; `n_blocks` encoders contribute `n_way` columns each.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    n_way: usize,
    values: Matrix,
}

impl ScoreMatrix {
    pub fn new(n_way: usize, values: Matrix) -> Result<Self> {
        if n_way == 0 || values.cols() % n_way != 0 {
            return Err(Error::shape(
                "ScoreMatrix::new",
                format!("a multiple of n_way={n_way} columns"),
                values.cols(),
            ));
        }
        if !values.is_finite() {
            return Err(Error::Numeric {
                location: "score matrix".into(),
            });
        }
        Ok(ScoreMatrix { n_way, values })
    }

    pub fn n_way(&self) -> usize {
        self.n_way
    }

    pub fn n_blocks(&self) -> usize {
        self.values.cols() / self.n_way
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    /// Scores of encoder `b`.
    pub fn block(&self, b: usize) -> Matrix {
        self.values
            .column_block(b * self.n_way, (b + 1) * self.n_way)
    }
}

/// Classifier logits of one head, no softmax.
pub fn score(head: &EncoderHead, features: &Matrix) -> Result<ScoreMatrix> {
    if features.cols() != head.feature_dim() {
        return Err(Error::shape(
            "score",
            format!("feature width {}", head.feature_dim()),
            features.cols(),
        ));
    }
    ScoreMatrix::new(head.n_way(), head.logits(features)?)
}

/// Scores of every head, concatenated in head order.
pub fn ensemble_scores(heads: &[EncoderHead], features: &Matrix) -> Result<ScoreMatrix> {
    let first = heads
        .first()
        .ok_or_else(|| Error::Config("ensemble needs at least one head".into()))?;
    if let Some(h) = heads
        .iter()
        .find(|h| h.n_way() != first.n_way() || h.feature_dim() != first.feature_dim())
    {
        return Err(Error::Config(format!(
            "heterogeneous ensemble: {}-way/{}-dim vs {}-way/{}-dim",
            first.n_way(),
            first.feature_dim(),
            h.n_way(),
            h.feature_dim()
        )));
    }
    let blocks = heads
        .iter()
        .map(|h| score(h, features).map(ScoreMatrix::into_values))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Matrix> = blocks.iter().collect();
    ScoreMatrix::new(first.n_way(), Matrix::hstack(&refs)?)
}

/// Summed-softmax prediction over score blocks; ties go to the lowest class.
pub fn lensem_from_scores(scores: &ScoreMatrix) -> Vec<usize> {
    let n_way = scores.n_way();
    scores
        .values()
        .iter_rows()
        .map(|row| {
            let mut total = vec![0.0; n_way];
            for block in row.chunks_exact(n_way) {
                for (t, p) in total.iter_mut().zip(softmax(block)) {
                    *t += p;
                }
            }
            argmax(&total)
        })
        .collect()
}

pub fn lensem_predict(heads: &[EncoderHead], query: &Matrix) -> Result<Vec<usize>> {
    Ok(lensem_from_scores(&ensemble_scores(heads, query)?))
}
