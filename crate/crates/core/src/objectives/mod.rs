//! Training objectives: distillation toward an ensemble mean, Contrastive
//! Tension, siamese NLI and siamese STS regression.

mod ct;
mod data;
mod nli;
mod regression;
mod sed;

pub use ct::{ct_loss, ct_loss_var, sample_ct_batches, train_ct, CtBatch, CtBatchSampler, CtConfig, CtPair};
pub use data::{load_corpus, load_nli_tsv, parse_nli_tsv, LabeledNliPair, NliLabel};
pub use nli::{nli_logits, nli_loss_var, nli_siamese_loss, train_nli, NliConfig, NliHead, NLI_CLASSES};
pub use regression::{
    cosine_var, sts_regression_loss, sts_regression_loss_var, train_sts_regression, RegressionConfig, RegressionRun,
    RegressionTargetMap,
};
pub use sed::{ensemble_mean_embedding, sed_loss, sed_loss_var, EnsembleSpec};
