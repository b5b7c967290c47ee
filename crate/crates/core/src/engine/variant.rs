use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::scorer::OptimizerTag;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VariantTag {
    DamslV1,
    DamslV2,
    LensemV1,
    LensemV2,
    FtgnnV1,
    SprotoV1,
    Protonet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretrainMode {
    Supervised,
    SupervisedPlusFomaml,
}

/// How an episode's query labels are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predictor {
    /// Graph metric over concatenated score blocks.
    ScoreGraph,
    /// Graph metric over the first head's tuned adapter features.
    FeatureGraph,
    /// Learned embedding + nearest centroid over scores.
    ScoreProto,
    /// Summed softmax of the tuned heads.
    Lensem,
    /// Nearest centroid on the frozen pretrained adapter features.
    Centroid,
}

impl Predictor {
    pub fn has_metric(self) -> bool {
        matches!(
            self,
            Predictor::ScoreGraph | Predictor::FeatureGraph | Predictor::ScoreProto
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelVariant {
    pub tag: VariantTag,
    pub optimizers: Vec<OptimizerTag>,
    pub pretrain: PretrainMode,
    pub predictor: Predictor,
}

impl VariantTag {
    pub const ALL: [VariantTag; 7] = [
        VariantTag::DamslV1,
        VariantTag::DamslV2,
        VariantTag::LensemV1,
        VariantTag::LensemV2,
        VariantTag::FtgnnV1,
        VariantTag::SprotoV1,
        VariantTag::Protonet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantTag::DamslV1 => "damsl_v1",
            VariantTag::DamslV2 => "damsl_v2",
            VariantTag::LensemV1 => "lensem_v1",
            VariantTag::LensemV2 => "lensem_v2",
            VariantTag::FtgnnV1 => "ftgnn_v1",
            VariantTag::SprotoV1 => "sproto_v1",
            VariantTag::Protonet => "protonet",
        }
    }

    pub fn code(self) -> u8 {
        VariantTag::ALL.iter().position(|&t| t == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        VariantTag::ALL.get(code as usize).copied()
    }

    pub fn valid_tags() -> String {
        VariantTag::ALL.map(VariantTag::as_str).join(", ")
    }

    /// v2 variants carry an Adam and an SGD-momentum encoder pretrained
    /// supervised only; everything else uses one Adam encoder pretrained
    /// supervised + first-order MAML.
    pub fn spec(self) -> ModelVariant {
        let v2 = matches!(self, VariantTag::DamslV2 | VariantTag::LensemV2);
        let (optimizers, pretrain) = if v2 {
            (
                vec![OptimizerTag::Adam, OptimizerTag::SgdMomentum],
                PretrainMode::Supervised,
            )
        } else {
            (vec![OptimizerTag::Adam], PretrainMode::SupervisedPlusFomaml)
        };
        let predictor = match self {
            VariantTag::DamslV1 | VariantTag::DamslV2 => Predictor::ScoreGraph,
            VariantTag::LensemV1 | VariantTag::LensemV2 => Predictor::Lensem,
            VariantTag::FtgnnV1 => Predictor::FeatureGraph,
            VariantTag::SprotoV1 => Predictor::ScoreProto,
            VariantTag::Protonet => Predictor::Centroid,
        };
        ModelVariant {
            tag: self,
            optimizers,
            pretrain,
            predictor,
        }
    }
}

impl fmt::Display for VariantTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        VariantTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; valid tags: {}",
                    VariantTag::valid_tags()
                ))
            })
    }
}
