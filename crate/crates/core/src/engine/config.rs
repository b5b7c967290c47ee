use crate::error::{Error, Result};
use crate::featurebank::Protocol;
use crate::gnn::MetricNetConfig;
use crate::parallel::ExecMode;
use crate::scorer::{FineTuneConfig, OptimizerTag};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_lr: f64,
    pub sgd_lr: f64,
    /// Outer iterations of first-order MAML (v1 encoders only).
    pub fomaml_episodes: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            batch_size: 32,
            adam_lr: 1e-3,
            sgd_lr: 1e-2,
            fomaml_episodes: 100,
            inner_steps: 5,
            inner_lr: 0.01,
        }
    }
}

impl PretrainConfig {
    pub fn lr_for(&self, tag: OptimizerTag) -> f64 {
        match tag {
            OptimizerTag::Adam => self.adam_lr,
            OptimizerTag::SgdMomentum => self.sgd_lr,
        }
    }
}

/// Graph-metric hyperparameters; widths are filled in per model.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSettings {
    pub n_layers: usize,
    pub conv_width: usize,
    pub edge_hidden: Vec<usize>,
    pub projection: bool,
}

impl Default for MetricSettings {
    fn default() -> Self {
        let d = MetricNetConfig::new(2, 1);
        MetricSettings {
            n_layers: d.n_layers,
            conv_width: d.conv_width,
            edge_hidden: d.edge_hidden,
            projection: d.projection,
        }
    }
}

impl MetricSettings {
    pub fn net_config(&self, n_way: usize, input_width: usize) -> MetricNetConfig {
        MetricNetConfig {
            n_way,
            input_width,
            n_layers: self.n_layers,
            conv_width: self.conv_width,
            edge_hidden: self.edge_hidden.clone(),
            projection: self.projection,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EngineConfig {
    pub adapter_depth: usize,
    /// Source classes (last in label order) withheld from encoder
    /// pretraining and used only for meta-training; 0 shares all classes.
    pub holdout_classes: usize,
    pub pretrain: PretrainConfig,
    pub fine_tune: FineTuneConfig,
    pub metric: MetricSettings,
    pub metric_lr: f64,
    pub sproto_width: usize,
    pub meta_episodes: usize,
    pub meta_protocol: Protocol,
    pub exec: ExecMode,
}

pub const DEFAULT_META_EPISODES: usize = 500;
pub const DEFAULT_EVAL_EPISODES: usize = 600;
pub const BENCHMARK_HOLDOUT_CLASSES: usize = 10;

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            adapter_depth: 1,
            holdout_classes: 0,
            pretrain: PretrainConfig::default(),
            fine_tune: FineTuneConfig::default(),
            metric: MetricSettings::default(),
            metric_lr: 1e-3,
            sproto_width: crate::baselines::DEFAULT_SPROTO_WIDTH,
            meta_episodes: DEFAULT_META_EPISODES,
            meta_protocol: Protocol::new(5, 5, crate::featurebank::DEFAULT_N_QUERY),
            exec: ExecMode::default(),
        }
    }
}

impl EngineConfig {
    /// Settings of the synthetic benchmark suite: ten source classes are
    /// reserved for meta-training and meta-training episodes use 5 queries
    /// per class.
    pub fn benchmark() -> Self {
        let mut cfg = EngineConfig {
            holdout_classes: BENCHMARK_HOLDOUT_CLASSES,
            ..EngineConfig::default()
        };
        cfg.meta_protocol.n_query = 5;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.adapter_depth == 0 {
            return Err(Error::Config("adapter_depth must be >= 1".into()));
        }
        let p = &self.pretrain;
        if p.epochs == 0 || p.batch_size == 0 {
            return Err(Error::Config(
                "pretraining needs epochs >= 1 and batch_size >= 1".into(),
            ));
        }
        for (name, v) in [
            ("adam_lr", p.adam_lr),
            ("sgd_lr", p.sgd_lr),
            ("inner_lr", p.inner_lr),
            ("metric_lr", self.metric_lr),
            ("fine_tune lr", self.fine_tune.lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.sproto_width == 0 {
            return Err(Error::Config("sproto_width must be >= 1".into()));
        }
        self.metric.net_config(2, 1).validate()?;
        self.meta_protocol.validate()
    }
}
