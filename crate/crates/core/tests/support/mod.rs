//! Helpers shared by the integration tests and the acceptance runner:
//! random fixtures, the grad-check suite, brute-force oracles and the
//! graph-metric structural checks.

#![allow(dead_code)]

use damsl::baselines::{protonet_predict, sproto_predict, SProtoNet};
use damsl::featurebank::{gen_synthetic_domain, sample_episode, Protocol, SyntheticDomainSpec};
use damsl::gnn::{edge_block, MetricNet, MetricNetConfig};
use damsl::numerics::{
    grad_check, softmax_cross_entropy, Activation, Layer, Matrix, Mlp, Parameters,
};
use damsl::parallel::ExecMode;
use damsl::scorer::{lensem_predict, EncoderHead, OptimizerTag, ScoreMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn labels(n_way: usize, per_class: usize) -> Vec<usize> {
    (0..n_way)
        .flat_map(|c| std::iter::repeat_n(c, per_class))
        .collect()
}

/// Adds `scale`·N(0,1) to every parameter, so zero-initialised heads and
/// identity projections become generic.
pub fn jiggle<P: Parameters>(model: &mut P, scale: f64, rng: &mut impl Rng) {
    let p: Vec<f64> = model
        .flatten_params()
        .into_iter()
        .map(|v| v + scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    model.assign_params(&p).unwrap();
}

pub fn random_net(cfg: &MetricNetConfig, rng: &mut impl Rng) -> MetricNet {
    let mut net = MetricNet::new(cfg, rng).unwrap();
    jiggle(&mut net, 0.3, rng);
    net
}

fn small_net_config(
    n_way: usize,
    input_width: usize,
    n_layers: usize,
    projection: bool,
) -> MetricNetConfig {
    MetricNetConfig {
        n_layers,
        conv_width: 4,
        edge_hidden: vec![6, 4],
        projection,
        ..MetricNetConfig::new(n_way, input_width)
    }
}

pub const KINK_STEP: f64 = 1e-7;
const MAX_REDRAWS: usize = 8;

/// Runs one grad-check case at `GRAD_STEP`. A failing fixture is replayed at
/// `KINK_STEP`; if it passes there the difference quotient straddled a
/// leaky-relu kink and the fixture is redrawn, otherwise the failure stands.
fn kink_free<F>(rng: &mut ChaCha8Rng, redraws: &mut usize, mut case: F) -> f64
where
    F: FnMut(&mut ChaCha8Rng, f64) -> f64,
{
    let mut err = f64::INFINITY;
    for _ in 0..=MAX_REDRAWS {
        let replay = rng.clone();
        err = case(rng, GRAD_STEP);
        if err < GRAD_TOL {
            return err;
        }
        if case(&mut replay.clone(), KINK_STEP) >= GRAD_TOL {
            return err;
        }
        *redraws += 1;
    }
    err
}

/// Grad check of `loss = Σ out ⊙ r` through an MLP, for parameters and input.
fn mlp_error(mlp: &Mlp, x: &Matrix, step: f64, rng: &mut impl Rng) -> f64 {
    let r = gaussian(x.rows(), mlp.output_width(), rng);
    let loss = |m: &Mlp, x: &Matrix| -> damsl::Result<(f64, Vec<f64>, Matrix)> {
        let (out, tape) = m.forward(x)?;
        let l = out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let (g, dx) = m.backward(&tape, &r)?;
        Ok((l, g.flatten(), dx))
    };
    let mut probe = mlp.clone();
    let params = grad_check(&mlp.flatten_params(), step, |p| {
        probe.assign_params(p)?;
        let (l, g, _) = loss(&probe, x)?;
        Ok((l, g))
    })
    .unwrap();
    let input = grad_check(x.data(), step, |p| {
        let xp = Matrix::from_vec(x.rows(), x.cols(), p.to_vec())?;
        let (l, _, dx) = loss(mlp, &xp)?;
        Ok((l, dx.into_vec()))
    })
    .unwrap();
    params.max(input)
}

/// Maximum relative grad-check error of every layer type for one seed, and
/// the number of fixtures redrawn because they sat on a kink. The metric net
/// at its default widths is included when `default_widths` is set.
pub fn grad_errors(seed: u64, default_widths: bool) -> (Vec<(&'static str, f64)>, usize) {
    let mut rng = rng(seed);
    let mut redraws = 0;
    let mut out = Vec::new();
    for (name, act) in [
        ("dense identity", Activation::Identity),
        ("dense relu", Activation::Relu),
        ("dense leaky relu", Activation::leaky()),
        ("dense tanh", Activation::Tanh),
    ] {
        let e = kink_free(&mut rng, &mut redraws, |rng, step| {
            let mut layer = Layer::random(5, 4, act, rng);
            layer.biases = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
            let mlp = Mlp::new(vec![layer]).unwrap();
            let x = gaussian(6, 5, rng);
            mlp_error(&mlp, &x, step, rng)
        });
        out.push((name, e));
    }

    let e = kink_free(&mut rng, &mut redraws, |rng, step| {
        let mlp = Mlp::random(
            &[6, 8, 5, 3],
            Activation::leaky(),
            Activation::Identity,
            rng,
        )
        .unwrap();
        let x = gaussian(7, 6, rng);
        mlp_error(&mlp, &x, step, rng)
    });
    out.push(("mlp", e));

    let e = kink_free(&mut rng, &mut redraws, |rng, step| {
        let logits = gaussian(6, 5, rng);
        let y: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
        grad_check(logits.data(), step, |p| {
            let m = Matrix::from_vec(6, 5, p.to_vec())?;
            let (l, g) = softmax_cross_entropy(&m, &y)?;
            Ok((l, g.into_vec()))
        })
        .unwrap()
    });
    out.push(("softmax cross-entropy", e));

    for (name, tag) in [
        ("encoder head (adam)", OptimizerTag::Adam),
        ("encoder head (sgd)", OptimizerTag::SgdMomentum),
    ] {
        let e = kink_free(&mut rng, &mut redraws, |rng, step| {
            let mut head = EncoderHead::random(6, 1, 4, tag, rng).unwrap();
            jiggle(&mut head, 0.2, rng);
            let x = gaussian(8, 6, rng);
            let y = labels(4, 2);
            let start = head.flatten_params();
            grad_check(&start, step, |p| {
                head.assign_params(p)?;
                head.loss_and_grad(&x, &y)
            })
            .unwrap()
        });
        out.push((name, e));
    }

    let e = kink_free(&mut rng, &mut redraws, |rng, step| {
        let mut sp = SProtoNet::random(6, 5, rng).unwrap();
        let s = gaussian(6, 6, rng);
        let q = gaussian(4, 6, rng);
        let (sl, ql) = (labels(3, 2), vec![0, 1, 2, 1]);
        let start = sp.flatten_params();
        grad_check(&start, step, |p| {
            sp.assign_params(p)?;
            let (l, g) = sp.loss_and_grad(&s, &sl, &q, &ql)?;
            Ok((l, g.flatten()))
        })
        .unwrap()
    });
    out.push(("s-proto embedding", e));

    for (name, n_layers, projection) in [
        ("graph layer (single)", 1, false),
        ("metric net, 2 layers", 2, false),
        ("metric net, 3 layers + projection", 3, true),
    ] {
        let cfg = small_net_config(3, 3, n_layers, projection);
        let e = kink_free(&mut rng, &mut redraws, |rng, step| {
            metric_net_error(&cfg, 2, 2, step, rng)
        });
        out.push((name, e));
    }
    if default_widths {
        // 2-way 1-shot toy episode
        let cfg = MetricNetConfig::new(2, 2);
        let e = kink_free(&mut rng, &mut redraws, |rng, step| {
            metric_net_error(&cfg, 1, 1, step, rng)
        });
        out.push(("metric net, default widths", e));
    }
    (out, redraws)
}

fn metric_net_error(
    cfg: &MetricNetConfig,
    k_shot: usize,
    n_query: usize,
    step: f64,
    rng: &mut impl Rng,
) -> f64 {
    let mut net = random_net(cfg, rng);
    let s = gaussian(cfg.n_way * k_shot, cfg.input_width, rng);
    let sl = labels(cfg.n_way, k_shot);
    let q = gaussian(cfg.n_way * n_query, cfg.input_width, rng);
    let ql = labels(cfg.n_way, n_query);
    let start = net.flatten_params();
    let mut analytic_done = false;
    grad_check(&start, step, |p| {
        net.assign_params(p)?;
        if analytic_done {
            // probes need only the loss
            let logits = net.logits(&s, &sl, &q, ExecMode::Sequential)?;
            return Ok((softmax_cross_entropy(&logits, &ql)?.0, Vec::new()));
        }
        analytic_done = true;
        let (l, g) = net.loss_and_grad(&s, &sl, &q, &ql, ExecMode::Sequential)?;
        Ok((l, g.flatten()))
    })
    .unwrap()
}

/// Structural measurements of a random graph metric for one seed.
#[derive(Debug)]
pub struct StructureReport {
    /// Max logit drift after permuting support rows (labels follow).
    pub permutation_drift: f64,
    /// Max |row sum − 1| of the normalised adjacency.
    pub row_sum_error: f64,
    /// Max |diagonal| of the normalised adjacency.
    pub diagonal: f64,
    /// Max |raw_ij − raw_ji| over off-diagonal entries.
    pub raw_asymmetry: f64,
    /// Max logit difference between a query scored alone and inside a batch.
    pub leakage: f64,
}

pub fn structure_report(seed: u64, n_way: usize, k_shot: usize, blocks: usize) -> StructureReport {
    let mut rng = rng(seed);
    let width = n_way * blocks;
    let cfg = MetricNetConfig::new(n_way, width);
    let net = random_net(&cfg, &mut rng);
    let s = gaussian(n_way * k_shot, width, &mut rng);
    let sl = labels(n_way, k_shot);
    let q = gaussian(6, width, &mut rng);
    let mode = ExecMode::Sequential;
    let base = net.logits(&s, &sl, &q, mode).unwrap();

    let mut order: Vec<usize> = (0..s.rows()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let sp = s.select_rows(&order);
    let slp: Vec<usize> = order.iter().map(|&i| sl[i]).collect();
    let permuted = net.logits(&sp, &slp, &q, mode).unwrap();
    let permutation_drift = max_abs_diff(base.data(), permuted.data());

    let nodes = gaussian(n_way * k_shot + 1, width + n_way, &mut rng);
    let edge = Mlp::random(
        &[width + n_way, 64, 32, 1],
        Activation::leaky(),
        Activation::Identity,
        &mut rng,
    )
    .unwrap();
    let adj = edge_block(&nodes, &edge).unwrap();
    let n = nodes.rows();
    let mut row_sum_error = 0.0f64;
    let mut diagonal = 0.0f64;
    let mut raw_asymmetry = 0.0f64;
    for i in 0..n {
        let sum: f64 = adj.normalized.row(i).iter().sum();
        row_sum_error = row_sum_error.max((sum - 1.0).abs());
        diagonal = diagonal.max(adj.normalized.get(i, i).abs());
        for j in 0..n {
            if i != j {
                raw_asymmetry = raw_asymmetry.max((adj.raw.get(i, j) - adj.raw.get(j, i)).abs());
            }
        }
    }

    let mut leakage = 0.0f64;
    for r in 0..q.rows() {
        let alone = net.logits(&s, &sl, &q.select_rows(&[r]), mode).unwrap();
        leakage = leakage.max(max_abs_diff(alone.row(0), base.row(r)));
    }
    // a batch of different companions must not move the first query either
    let others = gaussian(4, width, &mut rng);
    let mixed = Matrix::vstack(&[&q.select_rows(&[0]), &others]).unwrap();
    let with_others = net.logits(&s, &sl, &mixed, mode).unwrap();
    leakage = leakage.max(max_abs_diff(with_others.row(0), base.row(0)));

    StructureReport {
        permutation_drift,
        row_sum_error,
        diagonal,
        raw_asymmetry,
        leakage,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Brute-force nearest centroid: per-class means by explicit loops, squared
/// distances, first minimum wins.
pub fn oracle_nearest_centroid(support: &Matrix, labels: &[usize], queries: &Matrix) -> Vec<usize> {
    let n_way = labels.iter().max().unwrap() + 1;
    let d = support.cols();
    let mut centroids = vec![vec![0.0; d]; n_way];
    let mut counts = vec![0.0; n_way];
    for (r, &l) in labels.iter().enumerate() {
        counts[l] += 1.0;
        for c in 0..d {
            centroids[l][c] += support.get(r, c);
        }
    }
    for (cent, n) in centroids.iter_mut().zip(&counts) {
        for v in cent.iter_mut() {
            *v /= n;
        }
    }
    (0..queries.rows())
        .map(|q| {
            let mut best = (0, f64::INFINITY);
            for (k, cent) in centroids.iter().enumerate() {
                let mut dist = 0.0;
                for c in 0..d {
                    let diff = queries.get(q, c) - cent[c];
                    dist += diff * diff;
                }
                if dist < best.1 {
                    best = (k, dist);
                }
            }
            best.0
        })
        .collect()
}

/// Applies an MLP by explicit loops.
pub fn oracle_mlp(mlp: &Mlp, x: &Matrix) -> Matrix {
    let mut cur = x.clone();
    for layer in mlp.layers() {
        let (i_w, o_w) = (layer.input_width(), layer.output_width());
        cur = Matrix::from_fn(cur.rows(), o_w, |r, o| {
            let mut acc = 0.0;
            for i in 0..i_w {
                acc += cur.get(r, i) * layer.weights.get(i, o);
            }
            layer.activation.apply(acc + layer.biases[o])
        });
    }
    cur
}

/// Naive summed softmax over heads; first maximum wins.
pub fn oracle_lensem(heads: &[EncoderHead], queries: &Matrix) -> Vec<usize> {
    let n_way = heads[0].n_way();
    let logits: Vec<Matrix> = heads.iter().map(|h| h.logits(queries).unwrap()).collect();
    (0..queries.rows())
        .map(|q| {
            let mut total = vec![0.0; n_way];
            for l in &logits {
                let row = l.row(q);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (t, v) in total.iter_mut().zip(&e) {
                    *t += v / z;
                }
            }
            let mut best = 0;
            for k in 1..n_way {
                if total[k] > total[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Counts of (protonet, sproto, lensem) prediction mismatches against the
/// oracles over `episodes` random episodes. Every fourth episode uses
/// small-integer features so that exact distance ties occur.
pub fn oracle_mismatches(episodes: usize, seed: u64) -> (usize, usize, usize, usize) {
    let mut rng = rng(seed);
    let spec = SyntheticDomainSpec {
        n_classes: 12,
        dim: 8,
        ..SyntheticDomainSpec::default()
    };
    let bank = gen_synthetic_domain(&spec, 30, seed).unwrap();
    let (mut proto, mut sproto, mut lensem, mut ties) = (0, 0, 0, 0);
    for ep in 0..episodes {
        let k_shot = [1, 2, 4, 5][ep % 4];
        let p = Protocol::new(5, k_shot, 6);
        let mut e = sample_episode(&bank, p, &mut rng).unwrap();
        if ep % 4 == 2 {
            for m in [&mut e.support_features, &mut e.query_features] {
                for v in m.data_mut() {
                    *v = rng.random_range(-2..=2) as f64;
                }
            }
        }
        let got =
            protonet_predict(&e.support_features, &e.support_labels, &e.query_features).unwrap();
        let want =
            oracle_nearest_centroid(&e.support_features, &e.support_labels, &e.query_features);
        proto += got.iter().zip(&want).filter(|(a, b)| a != b).count();
        ties += count_ties(&e.support_features, &e.support_labels, &e.query_features);

        let heads: Vec<EncoderHead> = [OptimizerTag::Adam, OptimizerTag::SgdMomentum]
            .iter()
            .take(1 + ep % 2)
            .map(|&t| {
                let mut h = EncoderHead::random(8, 1, 5, t, &mut rng).unwrap();
                jiggle(&mut h, 0.3, &mut rng);
                h
            })
            .collect();
        let got = lensem_predict(&heads, &e.query_features).unwrap();
        let want = oracle_lensem(&heads, &e.query_features);
        lensem += got.iter().zip(&want).filter(|(a, b)| a != b).count();

        let scores = |x: &Matrix| {
            let blocks: Vec<Matrix> = heads.iter().map(|h| h.logits(x).unwrap()).collect();
            let refs: Vec<&Matrix> = blocks.iter().collect();
            ScoreMatrix::new(5, Matrix::hstack(&refs).unwrap()).unwrap()
        };
        let (ss, qs) = (scores(&e.support_features), scores(&e.query_features));
        let net = SProtoNet::random(ss.width(), 6, &mut rng).unwrap();
        let got = sproto_predict(&net, &ss, &e.support_labels, &qs).unwrap();
        let emb_s = oracle_mlp(net.embedding(), ss.values());
        let emb_q = oracle_mlp(net.embedding(), qs.values());
        let want = oracle_nearest_centroid(&emb_s, &e.support_labels, &emb_q);
        sproto += got.iter().zip(&want).filter(|(a, b)| a != b).count();
    }
    (proto, sproto, lensem, ties)
}

/// Queries whose two nearest centroids are exactly equidistant.
fn count_ties(support: &Matrix, labels: &[usize], queries: &Matrix) -> usize {
    let n_way = labels.iter().max().unwrap() + 1;
    let cent = damsl::baselines::class_centroids(support, labels).unwrap();
    (0..queries.rows())
        .filter(|&q| {
            let mut d: Vec<f64> = (0..n_way)
                .map(|k| {
                    cent.row(k)
                        .iter()
                        .zip(queries.row(q))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum()
                })
                .collect();
            d.sort_by(f64::total_cmp);
            d[0] == d[1]
        })
        .count()
}
