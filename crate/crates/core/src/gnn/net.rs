use rand::Rng;

use super::ops::{
    all_pairs, edge_pairs_backward, edge_pairs_forward, label_block, normalize_backward,
    normalize_rows, normalize_vector, raw_from_pairs,
};
use crate::error::{Error, Result};
use crate::numerics::{
    argmax, softmax_cross_entropy, Activation, Layer, LayerGrad, Matrix, Mlp, MlpGrads, Parameters,
    Tape,
};
use crate::parallel::{map_indexed, ExecMode};
use crate::scorer::ScoreMatrix;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricNetConfig {
    pub n_way: usize,
    /// Width of the per-sample coordinates (score width, or feature dim for
    /// the feature-space variant).
    pub input_width: usize,
    pub n_layers: usize,
    pub conv_width: usize,
    pub edge_hidden: Vec<usize>,
    /// Learned linear projection of the input coordinates; identity when off.
    pub projection: bool,
}

impl MetricNetConfig {
    pub fn new(n_way: usize, input_width: usize) -> Self {
        MetricNetConfig {
            n_way,
            input_width,
            n_layers: 3,
            conv_width: 16,
            edge_hidden: vec![64, 32],
            projection: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.input_width == 0 || self.n_layers == 0 || self.conv_width == 0 {
            return Err(Error::Config(format!("invalid metric net config {self:?}")));
        }
        if self.edge_hidden.contains(&0) {
            return Err(Error::Config(
                "edge MLP hidden widths must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One graph layer: learned adjacency plus convolution over `{I, Ã}`.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnLayer {
    pub edge: Mlp,
    /// Weights of the identity operator.
    pub theta_self: Layer,
    /// Weights of the learned-adjacency operator.
    pub theta_adj: Layer,
    pub activation: Activation,
}

impl GnnLayer {
    pub fn input_width(&self) -> usize {
        self.theta_self.input_width()
    }

    pub fn conv_width(&self) -> usize {
        self.theta_self.output_width()
    }
}

/// Graph metric network over score coordinates.
///
/// Each layer appends its convolution output to the running node features,
/// so node width grows by `conv_width` per layer and the input coordinates
/// and label block stay visible to every later layer and the output head.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricNet {
    n_way: usize,
    input_width: usize,
    projection: Option<Layer>,
    layers: Vec<GnnLayer>,
    output: Layer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnnLayerGrads {
    pub edge: MlpGrads,
    pub theta_self: LayerGrad,
    pub theta_adj: LayerGrad,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricGrads {
    pub projection: Option<LayerGrad>,
    pub layers: Vec<GnnLayerGrads>,
    pub output: LayerGrad,
}

impl MetricGrads {
    pub fn zeros_like(net: &MetricNet) -> Self {
        MetricGrads {
            projection: net.projection.as_ref().map(LayerGrad::zeros_like),
            layers: net
                .layers
                .iter()
                .map(|l| GnnLayerGrads {
                    edge: MlpGrads::zeros_like(&l.edge),
                    theta_self: LayerGrad::zeros_like(&l.theta_self),
                    theta_adj: LayerGrad::zeros_like(&l.theta_adj),
                })
                .collect(),
            output: LayerGrad::zeros_like(&net.output),
        }
    }

    pub fn accumulate(&mut self, other: &MetricGrads) {
        if let (Some(a), Some(b)) = (&mut self.projection, &other.projection) {
            a.accumulate(b);
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.edge.accumulate(&b.edge);
            a.theta_self.accumulate(&b.theta_self);
            a.theta_adj.accumulate(&b.theta_adj);
        }
        self.output.accumulate(&other.output);
    }

    pub fn scale(&mut self, s: f64) {
        if let Some(p) = &mut self.projection {
            p.scale(s);
        }
        for l in &mut self.layers {
            l.edge.scale(s);
            l.theta_self.scale(s);
            l.theta_adj.scale(s);
        }
        self.output.scale(s);
    }

    /// Flat gradient in [`Parameters`] order of the net.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(p) = &self.projection {
            p.flatten_into(&mut out);
        }
        for l in &self.layers {
            l.edge.flatten_into(&mut out);
            l.theta_self.flatten_into(&mut out);
            l.theta_adj.flatten_into(&mut out);
        }
        self.output.flatten_into(&mut out);
        out
    }
}

impl MetricNet {
    /// Random graph layers, identity-initialised projection (when enabled) and
    /// a zero output head, so a fresh net predicts uniformly.
    pub fn new<R: Rng + ?Sized>(cfg: &MetricNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let projection = cfg
            .projection
            .then(|| Layer::identity(cfg.input_width, Activation::Identity));
        let mut width = cfg.input_width + cfg.n_way;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let mut widths = vec![width];
            widths.extend(&cfg.edge_hidden);
            widths.push(1);
            let edge = Mlp::random(&widths, Activation::leaky(), Activation::Identity, rng)?;
            let theta_self = Layer::random(width, cfg.conv_width, Activation::Identity, rng);
            let theta_adj = Layer::random(width, cfg.conv_width, Activation::Identity, rng);
            layers.push(GnnLayer {
                edge,
                theta_self,
                theta_adj,
                activation: Activation::leaky(),
            });
            width += cfg.conv_width;
        }
        let output = Layer::zeros(width, cfg.n_way, Activation::Identity);
        MetricNet::from_parts(cfg.n_way, cfg.input_width, projection, layers, output)
    }

    pub fn from_parts(
        n_way: usize,
        input_width: usize,
        projection: Option<Layer>,
        layers: Vec<GnnLayer>,
        output: Layer,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config(
                "metric net needs at least one graph layer".into(),
            ));
        }
        if let Some(p) = &projection {
            if p.input_width() != input_width || p.output_width() != input_width {
                return Err(Error::shape(
                    "MetricNet projection",
                    format!("{input_width} -> {input_width}"),
                    format!("{} -> {}", p.input_width(), p.output_width()),
                ));
            }
        }
        let mut width = input_width + n_way;
        for (k, l) in layers.iter().enumerate() {
            let ok = l.edge.input_width() == width
                && l.edge.output_width() == 1
                && l.theta_self.input_width() == width
                && l.theta_adj.input_width() == width
                && l.theta_adj.output_width() == l.theta_self.output_width();
            if !ok {
                return Err(Error::shape(
                    "MetricNet layer",
                    format!("layer {k} consuming width {width}"),
                    format!(
                        "edge {}->{}, theta {}->{} / {}->{}",
                        l.edge.input_width(),
                        l.edge.output_width(),
                        l.theta_self.input_width(),
                        l.theta_self.output_width(),
                        l.theta_adj.input_width(),
                        l.theta_adj.output_width()
                    ),
                ));
            }
            width += l.conv_width();
        }
        if output.input_width() != width || output.output_width() != n_way {
            return Err(Error::shape(
                "MetricNet output",
                format!("{width} -> {n_way}"),
                format!("{} -> {}", output.input_width(), output.output_width()),
            ));
        }
        Ok(MetricNet {
            n_way,
            input_width,
            projection,
            layers,
            output,
        })
    }

    pub fn n_way(&self) -> usize {
        self.n_way
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn projection(&self) -> Option<&Layer> {
        self.projection.as_ref()
    }

    pub fn layers(&self) -> &[GnnLayer] {
        &self.layers
    }

    pub fn output(&self) -> &Layer {
        &self.output
    }

    pub fn into_parts(self) -> (usize, usize, Option<Layer>, Vec<GnnLayer>, Layer) {
        (
            self.n_way,
            self.input_width,
            self.projection,
            self.layers,
            self.output,
        )
    }

    /// Query logits for every query row; each query gets its own graph.
    pub fn logits(
        &self,
        support: &Matrix,
        support_labels: &[usize],
        queries: &Matrix,
        mode: ExecMode,
    ) -> Result<Matrix> {
        let ctx = SupportContext::new(self, support, support_labels)?;
        self.check_queries(queries)?;
        let rows = map_indexed(queries.rows(), mode, |q| {
            ctx.query_forward(queries.row(q)).map(|(logits, _)| logits)
        });
        let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.n_way));
        }
        Matrix::from_rows(&rows)
    }

    pub fn predict(
        &self,
        support: &Matrix,
        support_labels: &[usize],
        queries: &Matrix,
        mode: ExecMode,
    ) -> Result<Vec<usize>> {
        let logits = self.logits(support, support_labels, queries, mode)?;
        Ok(logits.iter_rows().map(argmax).collect())
    }

    /// Mean query cross-entropy and its gradient.
    pub fn loss_and_grad(
        &self,
        support: &Matrix,
        support_labels: &[usize],
        queries: &Matrix,
        query_labels: &[usize],
        mode: ExecMode,
    ) -> Result<(f64, MetricGrads)> {
        if queries.rows() == 0 {
            return Err(Error::Protocol(
                "metric loss needs at least one query".into(),
            ));
        }
        if query_labels.len() != queries.rows() {
            return Err(Error::shape(
                "metric_loss",
                queries.rows(),
                query_labels.len(),
            ));
        }
        let ctx = SupportContext::new(self, support, support_labels)?;
        self.check_queries(queries)?;
        let parts = map_indexed(queries.rows(), mode, |q| {
            ctx.query_loss_and_grad(queries.row(q), query_labels[q])
        });
        let mut total = 0.0;
        let mut grads = MetricGrads::zeros_like(self);
        let mut shared = SharedGrads::zeros(&ctx);
        for part in parts {
            let (loss, g, s) = part?;
            total += loss;
            grads.accumulate(&g);
            shared.accumulate(&s);
        }
        ctx.finish_backward(shared, &mut grads)?;
        let inv = 1.0 / queries.rows() as f64;
        grads.scale(inv);
        Ok((total * inv, grads))
    }

    fn check_queries(&self, queries: &Matrix) -> Result<()> {
        if queries.cols() != self.input_width {
            return Err(Error::shape(
                "metric_forward",
                format!("query width {}", self.input_width),
                queries.cols(),
            ));
        }
        Ok(())
    }
}

impl Parameters for MetricNet {
    fn param_count(&self) -> usize {
        self.projection.as_ref().map_or(0, Layer::param_count)
            + self
                .layers
                .iter()
                .map(|l| {
                    Parameters::param_count(&l.edge)
                        + l.theta_self.param_count()
                        + l.theta_adj.param_count()
                })
                .sum::<usize>()
            + self.output.param_count()
    }

    fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Parameters::param_count(self));
        if let Some(p) = &self.projection {
            out.extend(p.flatten_params());
        }
        for l in &self.layers {
            out.extend(l.edge.flatten_params());
            out.extend(l.theta_self.flatten_params());
            out.extend(l.theta_adj.flatten_params());
        }
        out.extend(self.output.flatten_params());
        out
    }

    fn assign_params(&mut self, src: &[f64]) -> Result<()> {
        let n = Parameters::param_count(self);
        if src.len() != n {
            return Err(Error::shape("MetricNet::assign_params", n, src.len()));
        }
        let mut off = 0;
        let mut take = |len: usize| {
            let s = &src[off..off + len];
            off += len;
            s
        };
        if let Some(p) = &mut self.projection {
            p.assign_params(take(p.param_count()))?;
        }
        for l in &mut self.layers {
            let ne = Parameters::param_count(&l.edge);
            l.edge.assign_params(take(ne))?;
            l.theta_self
                .assign_params(take(l.theta_self.param_count()))?;
            l.theta_adj.assign_params(take(l.theta_adj.param_count()))?;
        }
        self.output.assign_params(take(self.output.param_count()))
    }
}

/// Logits of a single query given scored support samples.
pub fn metric_forward(
    net: &MetricNet,
    support_scores: &ScoreMatrix,
    support_labels: &[usize],
    query_scores: &[f64],
) -> Result<Vec<f64>> {
    let ctx = SupportContext::new(net, support_scores.values(), support_labels)?;
    if query_scores.len() != net.input_width {
        return Err(Error::shape(
            "metric_forward",
            net.input_width,
            query_scores.len(),
        ));
    }
    ctx.query_forward(query_scores).map(|(l, _)| l)
}

/// Mean cross-entropy over queries, one graph per query.
pub fn metric_loss(
    net: &MetricNet,
    support_scores: &ScoreMatrix,
    support_labels: &[usize],
    query_scores: &ScoreMatrix,
    query_labels: &[usize],
    mode: ExecMode,
) -> Result<(f64, MetricGrads)> {
    net.loss_and_grad(
        support_scores.values(),
        support_labels,
        query_scores.values(),
        query_labels,
        mode,
    )
}

// ---------------------------------------------------------------------------
// Per-episode evaluation machinery.
//
// Support-only quantities of the first layer (projected support coordinates
// and support-support edge scores) do not depend on the query, so they are
// computed once per episode; their gradients are accumulated over queries
// and back-propagated once in `finish_backward`.

struct SharedEdges {
    pairs: Vec<(usize, usize)>,
    raw: Vec<f64>,
    tape: Tape,
}

struct SupportContext<'a> {
    net: &'a MetricNet,
    inputs: &'a Matrix,
    x0: Matrix,
    shared: Option<SharedEdges>,
}

struct SharedGrads {
    d_raw: Vec<f64>,
    d_x0: Matrix,
}

impl SharedGrads {
    fn zeros(ctx: &SupportContext<'_>) -> Self {
        SharedGrads {
            d_raw: vec![0.0; ctx.shared.as_ref().map_or(0, |s| s.pairs.len())],
            d_x0: Matrix::zeros(ctx.x0.rows(), ctx.x0.cols()),
        }
    }

    fn accumulate(&mut self, other: &SharedGrads) {
        for (a, b) in self.d_raw.iter_mut().zip(&other.d_raw) {
            *a += b;
        }
        self.d_x0.add_assign(&other.d_x0).expect("same shape");
    }
}

struct FullTape {
    x: Matrix,
    adj: Matrix,
    y: Matrix,
    pre: Matrix,
    pairs: Vec<(usize, usize)>,
    edge_tape: Tape,
}

struct LastTape {
    x: Matrix,
    attn: Vec<f64>,
    u: Vec<f64>,
    pre: Vec<f64>,
    pairs: Vec<(usize, usize)>,
    edge_tape: Tape,
}

struct QueryTape {
    input: Vec<f64>,
    full: Vec<FullTape>,
    last: LastTape,
    z: Vec<f64>,
}

impl<'a> SupportContext<'a> {
    fn new(net: &'a MetricNet, inputs: &'a Matrix, labels: &[usize]) -> Result<Self> {
        if inputs.cols() != net.input_width {
            return Err(Error::shape(
                "metric_forward",
                format!("support width {}", net.input_width),
                inputs.cols(),
            ));
        }
        if inputs.rows() == 0 {
            return Err(Error::Protocol(
                "graph needs at least one support node".into(),
            ));
        }
        if labels.len() != inputs.rows() {
            return Err(Error::shape("metric_forward", inputs.rows(), labels.len()));
        }
        let labels = label_block(labels, net.n_way)?;
        let projected = match &net.projection {
            Some(p) => p.affine(inputs)?,
            None => inputs.clone(),
        };
        let x0 = Matrix::hstack(&[&projected, &labels])?;
        let shared = if net.layers.len() >= 2 {
            let pairs = all_pairs(x0.rows());
            let (raw, tape) = edge_pairs_forward(&net.layers[0].edge, &x0, &pairs)
                .map_err(|e| e.context("layer 0"))?;
            Some(SharedEdges { pairs, raw, tape })
        } else {
            None
        };
        Ok(SupportContext {
            net,
            inputs,
            x0,
            shared,
        })
    }

    fn n_support(&self) -> usize {
        self.x0.rows()
    }

    fn query_nodes(&self, query: &[f64]) -> Result<Vec<f64>> {
        let n_way = self.net.n_way;
        let mut row = match &self.net.projection {
            Some(p) => p
                .affine(&Matrix::from_vec(1, query.len(), query.to_vec())?)?
                .into_vec(),
            None => query.to_vec(),
        };
        row.extend(std::iter::repeat_n(1.0 / n_way as f64, n_way));
        Ok(row)
    }

    fn query_forward(&self, query: &[f64]) -> Result<(Vec<f64>, QueryTape)> {
        let net = self.net;
        let n_s = self.n_support();
        let q = n_s;
        let n = n_s + 1;
        let xq = self.query_nodes(query)?;
        let mut x = self.x0.clone();
        x.push_row(&xq)?;

        let n_layers = net.layers.len();
        let mut full = Vec::with_capacity(n_layers - 1);
        for (k, layer) in net.layers[..n_layers - 1].iter().enumerate() {
            let mut step = || -> Result<(FullTape, Matrix)> {
                let (pairs, raw) = if k == 0 {
                    let shared = self
                        .shared
                        .as_ref()
                        .expect("shared edges for multi-layer nets");
                    let pairs: Vec<(usize, usize)> = (0..n_s).map(|i| (i, q)).collect();
                    let (vals, tape) = edge_pairs_forward(&layer.edge, &x, &pairs)?;
                    let mut raw = raw_from_pairs(n, &shared.pairs, &shared.raw);
                    for (&(i, j), &v) in pairs.iter().zip(&vals) {
                        raw.set(i, j, v);
                        raw.set(j, i, v);
                    }
                    ((pairs, tape), raw)
                } else {
                    let pairs = all_pairs(n);
                    let (vals, tape) = edge_pairs_forward(&layer.edge, &x, &pairs)?;
                    let raw = raw_from_pairs(n, &pairs, &vals);
                    ((pairs, tape), raw)
                };
                let adj = normalize_rows(&raw);
                let y = x.matmul(&layer.theta_adj.weights)?;
                let mut pre = layer.theta_self.affine(&x)?;
                pre.add_assign(&adj.matmul(&y)?)?;
                pre.add_row_vector(&layer.theta_adj.biases)?;
                let out = layer.activation.apply_matrix(&pre);
                let next = Matrix::hstack(&[&x, &out])?;
                let (pairs, edge_tape) = pairs;
                Ok((
                    FullTape {
                        x: std::mem::replace(&mut x, Matrix::zeros(0, 0)),
                        adj,
                        y,
                        pre,
                        pairs,
                        edge_tape,
                    },
                    next,
                ))
            };
            let (tape, next) = step().map_err(|e| e.context(format!("layer {k}")))?;
            full.push(tape);
            x = next;
        }

        let k = n_layers - 1;
        let layer = &net.layers[k];
        let mut last = || -> Result<(LastTape, Vec<f64>)> {
            let pairs: Vec<(usize, usize)> = (0..n_s).map(|j| (q, j)).collect();
            let (raw, edge_tape) = edge_pairs_forward(&layer.edge, &x, &pairs)?;
            let attn = normalize_vector(&raw);
            let w = x.cols();
            let mut u = vec![0.0; w];
            for (j, &a) in attn.iter().enumerate() {
                for (uv, xv) in u.iter_mut().zip(x.row(j)) {
                    *uv += a * xv;
                }
            }
            let xq = Matrix::from_vec(1, w, x.row(q).to_vec())?;
            let mut pre = layer.theta_self.affine(&xq)?;
            pre.add_assign(
                &layer
                    .theta_adj
                    .affine(&Matrix::from_vec(1, w, u.clone())?)?,
            )?;
            let pre = pre.into_vec();
            let mut z = x.row(q).to_vec();
            z.extend(pre.iter().map(|&p| layer.activation.apply(p)));
            Ok((
                LastTape {
                    x: std::mem::replace(&mut x, Matrix::zeros(0, 0)),
                    attn,
                    u,
                    pre,
                    pairs,
                    edge_tape,
                },
                z,
            ))
        };
        let (last, z) = last().map_err(|e| e.context(format!("layer {k}")))?;
        let logits = net
            .output
            .affine(&Matrix::from_vec(1, z.len(), z.clone())?)?
            .into_vec();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                location: "metric net logits".into(),
            });
        }
        Ok((
            logits,
            QueryTape {
                input: query.to_vec(),
                full,
                last,
                z,
            },
        ))
    }

    fn query_loss_and_grad(
        &self,
        query: &[f64],
        label: usize,
    ) -> Result<(f64, MetricGrads, SharedGrads)> {
        let (logits, tape) = self.query_forward(query)?;
        let (loss, dlogits) =
            softmax_cross_entropy(&Matrix::from_vec(1, logits.len(), logits)?, &[label])?;
        let (grads, shared) = self.query_backward(&tape, dlogits.data())?;
        Ok((loss, grads, shared))
    }

    fn query_backward(
        &self,
        tape: &QueryTape,
        dlogits: &[f64],
    ) -> Result<(MetricGrads, SharedGrads)> {
        let net = self.net;
        let n_s = self.n_support();
        let q = n_s;
        let mut grads = MetricGrads::zeros_like(net);
        let mut shared = SharedGrads::zeros(self);

        // output head
        let zrow = Matrix::from_vec(1, tape.z.len(), tape.z.clone())?;
        let dl = Matrix::from_vec(1, dlogits.len(), dlogits.to_vec())?;
        let (og, dz) = net.output.affine_backward(&zrow, &dl)?;
        grads.output = og;

        // last layer, query row only
        let k_last = net.layers.len() - 1;
        let layer = &net.layers[k_last];
        let lt = &tape.last;
        let c = layer.conv_width();
        let w = lt.x.cols();
        let mut dx = Matrix::zeros(lt.x.rows(), w);
        {
            let g = &mut grads.layers[k_last];
            let dpre: Vec<f64> = (0..c)
                .map(|i| dz.get(0, w + i) * layer.activation.derivative(lt.pre[i]))
                .collect();
            let dpre_m = Matrix::from_vec(1, c, dpre.clone())?;
            let xq = Matrix::from_vec(1, w, lt.x.row(q).to_vec())?;
            let (gs, dxq) = layer.theta_self.affine_backward(&xq, &dpre_m)?;
            let um = Matrix::from_vec(1, w, lt.u.clone())?;
            let (ga, du) = layer.theta_adj.affine_backward(&um, &dpre_m)?;
            g.theta_self.accumulate(&gs);
            g.theta_adj.accumulate(&ga);
            for (i, (d, v)) in dx.row_mut(q).iter_mut().zip(dxq.data()).enumerate() {
                *d += v + dz.get(0, i);
            }
            let du = du.into_vec();
            let mut d_attn = vec![0.0; n_s];
            for j in 0..n_s {
                let a = lt.attn[j];
                let xj = lt.x.row(j);
                d_attn[j] = du.iter().zip(xj).map(|(a, b)| a * b).sum();
                for (d, v) in dx.row_mut(j).iter_mut().zip(&du) {
                    *d += a * v;
                }
            }
            let inner: f64 = lt.attn.iter().zip(&d_attn).map(|(a, b)| a * b).sum();
            let d_raw: Vec<f64> = lt
                .attn
                .iter()
                .zip(&d_attn)
                .map(|(a, d)| a * (d - inner))
                .collect();
            edge_pairs_backward(
                &layer.edge,
                &lt.x,
                &lt.pairs,
                &lt.edge_tape,
                &d_raw,
                &mut g.edge,
                &mut dx,
            )?;
        }

        // full layers, last to first
        for k in (0..k_last).rev() {
            let layer = &net.layers[k];
            let ft = &tape.full[k];
            let c = layer.conv_width();
            let n = ft.x.rows();
            let w = ft.x.cols();
            let mut dpre = dx.column_block(w, w + c);
            for (d, p) in dpre.data_mut().iter_mut().zip(ft.pre.data()) {
                *d *= layer.activation.derivative(*p);
            }
            let g = &mut grads.layers[k];
            let (gs, mut dx_new) = layer.theta_self.affine_backward(&ft.x, &dpre)?;
            g.theta_self.accumulate(&gs);
            dx_new.add_assign(&dx.column_block(0, w))?;
            let dy = ft.adj.t_matmul(&dpre)?;
            g.theta_adj.weights.add_assign(&ft.x.t_matmul(&dy)?)?;
            for (b, v) in g.theta_adj.biases.iter_mut().zip(dpre.column_sums()) {
                *b += v;
            }
            dx_new.add_assign(&dy.matmul_t(&layer.theta_adj.weights)?)?;
            let d_adj = dpre.matmul_t(&ft.y)?;
            let d_raw_full = normalize_backward(&ft.adj, &d_adj);
            let pair_grad = |&(i, j): &(usize, usize)| d_raw_full.get(i, j) + d_raw_full.get(j, i);
            let d_local: Vec<f64> = ft.pairs.iter().map(pair_grad).collect();
            edge_pairs_backward(
                &layer.edge,
                &ft.x,
                &ft.pairs,
                &ft.edge_tape,
                &d_local,
                &mut g.edge,
                &mut dx_new,
            )?;
            if k == 0 {
                let sh = self.shared.as_ref().expect("shared edges");
                for (acc, p) in shared.d_raw.iter_mut().zip(&sh.pairs) {
                    *acc += pair_grad(p);
                }
            }
            debug_assert_eq!(dx_new.rows(), n);
            dx = dx_new;
        }

        // dx now refers to layer-0 node features
        let sw = net.input_width;
        for r in 0..n_s {
            shared.d_x0.row_mut(r).copy_from_slice(dx.row(r));
        }
        if let (Some(p), Some(pg)) = (&net.projection, &mut grads.projection) {
            let dq = Matrix::from_vec(1, sw, dx.row(q)[..sw].to_vec())?;
            let inp = Matrix::from_vec(1, sw, tape.input.clone())?;
            let (g, _) = p.affine_backward(&inp, &dq)?;
            pg.accumulate(&g);
        }
        Ok((grads, shared))
    }

    fn finish_backward(&self, mut shared: SharedGrads, grads: &mut MetricGrads) -> Result<()> {
        let net = self.net;
        if let Some(sh) = &self.shared {
            edge_pairs_backward(
                &net.layers[0].edge,
                &self.x0,
                &sh.pairs,
                &sh.tape,
                &shared.d_raw,
                &mut grads.layers[0].edge,
                &mut shared.d_x0,
            )?;
        }
        if let (Some(p), Some(pg)) = (&net.projection, &mut grads.projection) {
            let d = shared.d_x0.column_block(0, net.input_width);
            let (g, _) = p.affine_backward(self.inputs, &d)?;
            pg.accumulate(&g);
        }
        Ok(())
    }
}
