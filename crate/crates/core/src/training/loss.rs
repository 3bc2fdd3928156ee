use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Every target token including `<eos>`.
    #[default]
    Sequence,
    /// Only the sense-tagged slot.
    TargetOnly,
}

/// `[B×(S+1)]` positions that enter the loss.
pub fn loss_mask(batch: &Batch, kind: LossKind) -> Vec<bool> {
    match kind {
        LossKind::Sequence => batch.target_mask.clone(),
        LossKind::TargetOnly => {
            let t = batch.target_steps();
            let mut m = vec![false; batch.size * t];
            for (row, &p) in batch.target_positions.iter().enumerate() {
                m[row * t + p] = true;
            }
            m
        }
    }
}

/// Mean of `-log p(target)` over the unmasked positions of `[B×T×V]`
/// log-probabilities.
pub fn compute_loss(g: &mut Graph, log_probs: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let s = g.shape(log_probs).to_vec();
    if s.len() != 3 || targets.len() != s[0] * s[1] || mask.len() != targets.len() {
        return Err(Error::shape(
            "compute_loss",
            format!("{} targets and {} mask entries for {s:?}", targets.len(), mask.len()),
        ));
    }
    let kept = mask.iter().filter(|&&m| m).count();
    if kept == 0 {
        return Err(Error::Usage("every position of the batch is masked".into()));
    }
    let flat = g.reshape(log_probs, &[s[0] * s[1], s[2]])?;
    let picked = g.pick(flat, targets)?;
    let weights = mask.iter().map(|&m| if m { -1.0 / kept as f64 } else { 0.0 }).collect();
    let w = g.constant(Tensor::vector(weights));
    let weighted = g.mul(picked, w)?;
    Ok(g.sum(weighted))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_log_probs_give_log_v() {
        let mut g = Graph::new();
        let lp = g.constant(Tensor::full(&[2, 3, 4], -(4f64.ln())));
        let l = compute_loss(&mut g, lp, &[0, 1, 2, 3, 0, 1], &[true; 6]).unwrap();
        assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_gives_zero() {
        let mut data = vec![-1e3; 2 * 3];
        data[1] = 0.0;
        data[3] = 0.0;
        let mut g = Graph::new();
        let lp = g.constant(Tensor::new(vec![1, 2, 3], data).unwrap());
        let l = compute_loss(&mut g, lp, &[1, 0], &[true, true]).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn all_masked_is_usage_error() {
        let mut g = Graph::new();
        let lp = g.constant(Tensor::zeros(&[1, 2, 3]));
        assert!(matches!(compute_loss(&mut g, lp, &[0, 0], &[false, false]), Err(Error::Usage(_))));
    }
}
