use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::variant::{Predictor, VariantTag};
use crate::baselines::{protonet_predict, SProtoNet};
use crate::error::{Error, Result};
use crate::featurebank::Episode;
use crate::gnn::MetricNet;
use crate::numerics::Matrix;
use crate::parallel::ExecMode;
use crate::scorer::{ensemble_scores, fine_tune, lensem_predict, EncoderHead, FineTuneConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum Metric {
    None,
    Graph(MetricNet),
    Proto(SProtoNet),
}

/// Pretrained encoders plus the (meta-trained) metric of one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    tag: VariantTag,
    n_way: usize,
    encoders: Vec<EncoderHead>,
    metric: Metric,
}

impl Model {
    pub fn new(
        tag: VariantTag,
        n_way: usize,
        encoders: Vec<EncoderHead>,
        metric: Metric,
    ) -> Result<Self> {
        let spec = tag.spec();
        if n_way < 2 {
            return Err(Error::Config(format!(
                "model n_way must be >= 2, got {n_way}"
            )));
        }
        let tags: Vec<_> = encoders.iter().map(EncoderHead::optimizer).collect();
        if tags != spec.optimizers {
            return Err(Error::Config(format!(
                "{tag} expects encoders {:?}, got {tags:?}",
                spec.optimizers
            )));
        }
        let dim = encoders[0].feature_dim();
        if encoders.iter().any(|e| e.feature_dim() != dim) {
            return Err(Error::Config("encoders disagree on feature dim".into()));
        }
        let ok = match (&metric, spec.predictor) {
            (Metric::Graph(net), Predictor::ScoreGraph) => {
                net.n_way() == n_way && net.input_width() == n_way * encoders.len()
            }
            (Metric::Graph(net), Predictor::FeatureGraph) => {
                net.n_way() == n_way && net.input_width() == dim
            }
            (Metric::Proto(net), Predictor::ScoreProto) => {
                net.embedding().input_width() == n_way * encoders.len()
            }
            (Metric::None, Predictor::Lensem | Predictor::Centroid) => true,
            _ => false,
        };
        if !ok {
            return Err(Error::Config(format!(
                "metric does not fit variant {tag} at {n_way}-way"
            )));
        }
        Ok(Model {
            tag,
            n_way,
            encoders,
            metric,
        })
    }

    pub fn tag(&self) -> VariantTag {
        self.tag
    }

    pub fn n_way(&self) -> usize {
        self.n_way
    }

    pub fn encoders(&self) -> &[EncoderHead] {
        &self.encoders
    }

    pub fn metric(&self) -> &Metric {
        &self.metric
    }

    pub(crate) fn metric_mut(&mut self) -> &mut Metric {
        &mut self.metric
    }

    /// Re-labels the model as a metric-free variant over the same encoders,
    /// e.g. `damsl_v2` → `lensem_v2`.
    pub fn as_metric_free(&self, tag: VariantTag) -> Result<Model> {
        Model::new(tag, self.n_way, self.encoders.clone(), Metric::None)
    }

    /// Whether `n_way` episodes can be handled by this model.
    pub fn check_n_way(&self, n_way: usize) -> Result<()> {
        if self.tag.spec().predictor.has_metric() && n_way != self.n_way {
            return Err(Error::Config(format!(
                "{} was trained for {}-way episodes, asked for {n_way}-way",
                self.tag, self.n_way
            )));
        }
        Ok(())
    }

    /// Fine-tunes a fresh-classifier copy of every encoder on the support
    /// set. Every head uses the same tuning seed.
    pub fn adapt(
        &self,
        episode: &Episode,
        cfg: &FineTuneConfig,
        seed: u64,
    ) -> Result<Vec<EncoderHead>> {
        self.encoders
            .iter()
            .map(|e| {
                let head = e.with_fresh_classifier(episode.n_way());
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                fine_tune(
                    &head,
                    &episode.support_features,
                    &episode.support_labels,
                    cfg,
                    &mut rng,
                )
            })
            .collect()
    }

    /// Support and query coordinates fed to the metric.
    pub(crate) fn metric_inputs(
        &self,
        tuned: &[EncoderHead],
        episode: &Episode,
    ) -> Result<(Matrix, Matrix)> {
        match self.tag.spec().predictor {
            Predictor::FeatureGraph => Ok((
                tuned[0].embed(&episode.support_features)?,
                tuned[0].embed(&episode.query_features)?,
            )),
            _ => Ok((
                ensemble_scores(tuned, &episode.support_features)?.into_values(),
                ensemble_scores(tuned, &episode.query_features)?.into_values(),
            )),
        }
    }

    /// Query predictions for one episode; the model itself is never modified.
    pub fn predict_episode(
        &self,
        episode: &Episode,
        cfg: &FineTuneConfig,
        tune_seed: u64,
        exec: ExecMode,
    ) -> Result<Vec<usize>> {
        self.check_n_way(episode.n_way())?;
        let predictor = self.tag.spec().predictor;
        if predictor == Predictor::Centroid {
            let enc = &self.encoders[0];
            return protonet_predict(
                &enc.embed(&episode.support_features)?,
                &episode.support_labels,
                &enc.embed(&episode.query_features)?,
            );
        }
        let tuned = self.adapt(episode, cfg, tune_seed)?;
        if predictor == Predictor::Lensem {
            return lensem_predict(&tuned, &episode.query_features);
        }
        let (s, q) = self.metric_inputs(&tuned, episode)?;
        match &self.metric {
            Metric::Graph(net) => net.predict(&s, &episode.support_labels, &q, exec),
            Metric::Proto(net) => net.predict(&s, &episode.support_labels, &q),
            Metric::None => unreachable!("validated in Model::new"),
        }
    }
}
