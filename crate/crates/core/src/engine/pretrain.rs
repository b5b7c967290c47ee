use rand::Rng;

use super::config::{EngineConfig, PretrainConfig};
use super::variant::{ModelVariant, PretrainMode};
use crate::error::{Error, Result};
use crate::featurebank::{sample_episode, FeatureBank, Protocol};
use crate::numerics::{optimizer_step, OptimizerState, Parameters};
use crate::scorer::{fine_tune, EncoderHead, FineTuneConfig};

use super::substream;

const STREAM_ENCODER_BASE: u64 = 100;

/// Pretrains the encoders of `variant` on every source class.
///
/// Encoder `i` is initialised and trained from its own substream of `seed`,
/// so encoder 0 of a v1 and a v2 model start from the same weights.
pub fn pretrain_encoders(
    variant: &ModelVariant,
    source: &FeatureBank,
    cfg: &EngineConfig,
    seed: u64,
) -> Result<Vec<EncoderHead>> {
    cfg.validate()?;
    let protocol = cfg.meta_protocol;
    if source.n_classes() < protocol.n_way {
        return Err(Error::Protocol(format!(
            "source bank has {} classes, fewer than n_way = {}",
            source.n_classes(),
            protocol.n_way
        )));
    }
    let (x, y) = source.stacked();
    variant
        .optimizers
        .iter()
        .enumerate()
        .map(|(i, &tag)| {
            let mut rng = substream(seed, STREAM_ENCODER_BASE + i as u64);
            let head = EncoderHead::random(
                source.dim(),
                cfg.adapter_depth,
                source.n_classes(),
                tag,
                &mut rng,
            )?;
            let sup = FineTuneConfig {
                epochs: cfg.pretrain.epochs,
                batch_size: cfg.pretrain.batch_size.min(x.rows()),
                lr: cfg.pretrain.lr_for(tag),
                jitter_std: 0.0,
            };
            let head = fine_tune(&head, &x, &y, &sup, &mut rng)?;
            match variant.pretrain {
                PretrainMode::Supervised => Ok(head),
                PretrainMode::SupervisedPlusFomaml => fomaml(
                    head,
                    source,
                    protocol,
                    &cfg.pretrain,
                    cfg.pretrain.fomaml_episodes,
                    &mut rng,
                ),
            }
        })
        .collect()
}

/// First-order MAML over source episodes. The inner loop takes plain
/// gradient steps on a copy whose classifier is restricted to the episode's
/// classes; the query gradient at the adapted copy is applied to the
/// original through its own optimizer.
pub fn fomaml<R: Rng + ?Sized>(
    mut head: EncoderHead,
    source: &FeatureBank,
    protocol: Protocol,
    cfg: &PretrainConfig,
    episodes: usize,
    rng: &mut R,
) -> Result<EncoderHead> {
    let mut outer = OptimizerState::new(head.optimizer().with_lr(cfg.lr_for(head.optimizer())));
    for ep in 0..episodes {
        let episode = sample_episode(source, protocol, rng)?;
        let columns: Vec<usize> = (0..protocol.n_way)
            .map(|c| episode.support_origin[c * protocol.k_shot].0)
            .collect();
        let mut fast = head.with_classifier_columns(&columns)?;
        let mut params = fast.flatten_params();
        for _ in 0..cfg.inner_steps {
            let (_, g) = fast.loss_and_grad(&episode.support_features, &episode.support_labels)?;
            for (p, g) in params.iter_mut().zip(&g) {
                *p -= cfg.inner_lr * g;
            }
            fast.assign_params(&params)?;
        }
        let (loss, g) = fast.loss_and_grad(&episode.query_features, &episode.query_labels)?;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                location: format!("first-order MAML episode {ep}"),
            });
        }
        let full = head.scatter_column_grad(&columns, &g)?;
        optimizer_step(&mut outer, &mut head, &full)?;
    }
    Ok(head)
}
