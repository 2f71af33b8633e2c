//! Ensemble targets and the distillation loss.

use crate::diffcore::{Graph, Var};
use crate::encoder::{EncoderConfig, EncoderModel, Embedding, PoolingSpec};
use crate::error::{Error, Result};

/// Frozen teacher encoders sharing one architecture.
#[derive(Debug, Clone)]
pub struct EnsembleSpec {
    members: Vec<EncoderModel>,
    pool: PoolingSpec,
}

impl EnsembleSpec {
    /// Rejects empty ensembles and members whose architecture differs from the first.
    pub fn new(members: Vec<EncoderModel>, pool: PoolingSpec) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::invalid("an ensemble needs at least one member"))?;
        for (i, m) in members.iter().enumerate().skip(1) {
            if !m.same_architecture(first) {
                return Err(Error::ArchitectureMismatch {
                    student: format!("member {i}: {}", m.describe()),
                    teacher: format!("member 0: {}", first.describe()),
                });
            }
        }
        Ok(EnsembleSpec { members, pool })
    }

    pub fn members(&self) -> &[EncoderModel] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn pool(&self) -> PoolingSpec {
        self.pool
    }

    pub fn config(&self) -> &EncoderConfig {
        self.members[0].config()
    }

    pub fn dim(&self) -> usize {
        self.members[0].dim()
    }

    /// Same ensemble, different target pooling.
    pub fn with_pool(&self, pool: PoolingSpec) -> EnsembleSpec {
        EnsembleSpec {
            members: self.members.clone(),
            pool,
        }
    }

    /// Unnormalised mean of the members' embeddings of `sentence`.
    pub fn mean_embedding(&self, sentence: &str) -> Result<Embedding> {
        ensemble_mean_embedding(self, sentence)
    }
}

/// `(1/N) * sum_i M_i(sentence)` with each member pooled by the ensemble's spec.
///
/// Each coordinate is summed in sorted order, so the result does not depend on
/// member order.
pub fn ensemble_mean_embedding(ensemble: &EnsembleSpec, sentence: &str) -> Result<Embedding> {
    let outputs = ensemble
        .members()
        .iter()
        .map(|m| m.encode(sentence, ensemble.pool()))
        .collect::<Result<Vec<_>>>()?;
    let n = ensemble.len() as f64;
    let mut column = Vec::with_capacity(outputs.len());
    let mean = (0..ensemble.dim())
        .map(|d| {
            column.clear();
            column.extend(outputs.iter().map(|e| e.as_slice()[d]));
            column.sort_by(f64::total_cmp);
            column.iter().sum::<f64>() / n
        })
        .collect();
    Ok(Embedding::new(mean))
}

/// Mean squared error over dimensions.
pub fn sed_loss(target: &Embedding, student: &Embedding) -> Result<f64> {
    if target.dim() != student.dim() {
        return Err(Error::shape(format!(
            "sed_loss: target has {} dims, student {}",
            target.dim(),
            student.dim()
        )));
    }
    let d = target.dim() as f64;
    Ok(target
        .as_slice()
        .iter()
        .zip(student.as_slice())
        .map(|(t, s)| (t - s) * (t - s))
        .sum::<f64>()
        / d)
}

/// Graph form of [`sed_loss`]. The target is detached so only the student receives gradient.
pub fn sed_loss_var(g: &mut Graph, target: Var, student: Var) -> Result<Var> {
    let target = g.detach(target);
    let diff = g.sub(student, target)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Vocabulary;

    fn member(seed: u64) -> EncoderModel {
        let cfg = EncoderConfig {
            layers: 1,
            hidden: 4,
            heads: 1,
            ffn: 4,
            max_len: 8,
        };
        EncoderModel::init(cfg, Vocabulary::build(&["x y z"], 1, None), seed).unwrap()
    }

    #[test]
    fn sed_loss_examples() {
        let a = Embedding::new(vec![1.0, 1.0]);
        let b = Embedding::new(vec![0.0, 0.0]);
        assert_eq!(sed_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(sed_loss(&a, &b).unwrap(), 1.0);
        assert!(sed_loss(&a, &Embedding::new(vec![0.0])).is_err());
    }

    #[test]
    fn single_member_mean_is_member() {
        let m = member(1);
        let ens = EnsembleSpec::new(vec![m.clone()], PoolingSpec::FINAL).unwrap();
        assert_eq!(
            ensemble_mean_embedding(&ens, "x y").unwrap(),
            m.encode("x y", PoolingSpec::FINAL).unwrap()
        );
    }

    #[test]
    fn duplicated_member_is_idempotent() {
        let m = member(2);
        let ens = EnsembleSpec::new(vec![m.clone(), m.clone()], PoolingSpec::FINAL).unwrap();
        assert_eq!(
            ensemble_mean_embedding(&ens, "z").unwrap(),
            m.encode("z", PoolingSpec::FINAL).unwrap()
        );
    }

    #[test]
    fn mismatched_members_rejected() {
        let other = EncoderModel::init(
            EncoderConfig {
                layers: 1,
                hidden: 8,
                heads: 1,
                ffn: 4,
                max_len: 8,
            },
            Vocabulary::build(&["x y z"], 1, None),
            0,
        )
        .unwrap();
        assert!(matches!(
            EnsembleSpec::new(vec![member(0), other], PoolingSpec::FINAL),
            Err(Error::ArchitectureMismatch { .. })
        ));
        assert!(EnsembleSpec::new(vec![], PoolingSpec::FINAL).is_err());
    }
}
