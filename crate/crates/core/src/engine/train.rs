use rand::Rng;

use super::config::EngineConfig;
use super::model::{Metric, Model};
use super::pretrain::pretrain_encoders;
use super::substream;
use super::variant::{Predictor, VariantTag};
use crate::baselines::SProtoNet;
use crate::error::{Error, Result};
use crate::featurebank::{sample_episode, FeatureBank};
use crate::gnn::MetricNet;
use crate::numerics::{optimizer_step, OptimizerKind, OptimizerState};
use crate::scorer::EncoderHead;

const STREAM_METRIC_INIT: u64 = 1;
const STREAM_META: u64 = 2;

/// Freshly initialised metric for `tag` over the given encoders.
pub fn init_metric<R: Rng + ?Sized>(
    tag: VariantTag,
    encoders: &[EncoderHead],
    n_way: usize,
    cfg: &EngineConfig,
    rng: &mut R,
) -> Result<Metric> {
    let score_width = n_way * encoders.len();
    Ok(match tag.spec().predictor {
        Predictor::ScoreGraph => Metric::Graph(MetricNet::new(
            &cfg.metric.net_config(n_way, score_width),
            rng,
        )?),
        Predictor::FeatureGraph => {
            let dim = encoders[0].feature_dim();
            Metric::Graph(MetricNet::new(&cfg.metric.net_config(n_way, dim), rng)?)
        }
        Predictor::ScoreProto => {
            Metric::Proto(SProtoNet::random(score_width, cfg.sproto_width, rng)?)
        }
        Predictor::Lensem | Predictor::Centroid => Metric::None,
    })
}

/// Episodic training of the metric on the source domain. Encoder copies are
/// tuned per episode and discarded; scores are treated as constants.
/// Returns the per-episode training losses.
pub fn meta_train<R: Rng + ?Sized>(
    model: &mut Model,
    source: &FeatureBank,
    episodes: usize,
    cfg: &EngineConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !model.tag().spec().predictor.has_metric() {
        return Err(Error::Config(format!(
            "{} has no metric to meta-train",
            model.tag()
        )));
    }
    let protocol = cfg.meta_protocol;
    model.check_n_way(protocol.n_way)?;
    protocol.check_bank(source)?;
    let mut opt = OptimizerState::new(OptimizerKind::adam(cfg.metric_lr));
    let mut losses = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let episode = sample_episode(source, protocol, rng)?;
        let tune_seed = rng.next_u64();
        let tuned = model.adapt(&episode, &cfg.fine_tune, tune_seed)?;
        let (s, q) = model.metric_inputs(&tuned, &episode)?;
        let mut step = |model: &mut Model| -> Result<f64> {
            match model.metric_mut() {
                Metric::Graph(net) => {
                    let (loss, g) = net.loss_and_grad(
                        &s,
                        &episode.support_labels,
                        &q,
                        &episode.query_labels,
                        cfg.exec,
                    )?;
                    check_loss(loss, ep)?;
                    optimizer_step(&mut opt, net, &g.flatten())?;
                    Ok(loss)
                }
                Metric::Proto(net) => {
                    let (loss, g) =
                        net.loss_and_grad(&s, &episode.support_labels, &q, &episode.query_labels)?;
                    check_loss(loss, ep)?;
                    optimizer_step(&mut opt, net, &g.flatten())?;
                    Ok(loss)
                }
                Metric::None => unreachable!("checked above"),
            }
        };
        losses.push(step(model)?);
    }
    Ok(losses)
}

fn check_loss(loss: f64, episode: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            location: format!("meta-training episode {episode}: loss {loss}"),
        })
    }
}

/// Pretraining, metric initialisation and meta-training from one seed.
/// With `cfg.holdout_classes > 0` the two phases see disjoint source classes.
pub fn train_model(
    tag: VariantTag,
    source: &FeatureBank,
    cfg: &EngineConfig,
    seed: u64,
) -> Result<(Model, Vec<f64>)> {
    cfg.validate()?;
    cfg.meta_protocol.check_bank(source)?;
    let n_way = cfg.meta_protocol.n_way;
    let split;
    let (pre_bank, meta_bank) = if cfg.holdout_classes == 0 {
        (source, source)
    } else {
        split = source.split_classes(source.n_classes().saturating_sub(cfg.holdout_classes))?;
        (&split.0, &split.1)
    };
    let encoders = pretrain_encoders(&tag.spec(), pre_bank, cfg, seed)?;
    let metric = init_metric(
        tag,
        &encoders,
        n_way,
        cfg,
        &mut substream(seed, STREAM_METRIC_INIT),
    )?;
    let mut model = Model::new(tag, n_way, encoders, metric)?;
    let losses = if tag.spec().predictor.has_metric() {
        meta_train(
            &mut model,
            meta_bank,
            cfg.meta_episodes,
            cfg,
            &mut substream(seed, STREAM_META),
        )?
    } else {
        Vec::new()
    };
    Ok((model, losses))
}
