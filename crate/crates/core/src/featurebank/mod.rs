//! Feature banks, synthetic shifted domains and episode sampling.

mod bank;
mod episode;
mod synthetic;

pub use bank::{load_feature_bank, ClassFeatures, FeatureBank};
pub use episode::{sample_episode, Episode, Protocol, DEFAULT_N_QUERY};
pub use synthetic::{
    gen_benchmark_suite, gen_synthetic_domain, DomainShift, SyntheticDomainSpec, TARGET_SEED_OFFSET,
};
