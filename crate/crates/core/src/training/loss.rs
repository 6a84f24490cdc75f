use crate::corpus::Target;
use crate::error::{Error, Result};
use crate::ssa_data::TokenLabel;
use crate::tensor::{Graph, Tensor, Var};

const IGNORE: usize = usize::MAX;

/// Sentence-level loss over a `[b, n_classes]` batch: mean cross-entropy for
/// class targets, mean squared error against a `[b, 1]` output for
/// regression targets. A batch mixing the two is a contract violation.
pub fn loss_target(g: &mut Graph, logits: Var, targets: &[Target]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::contract("loss_target on an empty batch"));
    }
    let classes: Option<Vec<usize>> = targets.iter().map(|t| t.class()).collect();
    if let Some(labels) = classes {
        return g.cross_entropy(logits, &labels, IGNORE);
    }
    let values: Option<Vec<f32>> = targets
        .iter()
        .map(|t| match t {
            Target::Regression(v) => Some(*v),
            Target::Class(_) => None,
        })
        .collect();
    let values =
        values.ok_or_else(|| Error::contract("batch mixes class and regression targets"))?;
    let b = values.len();
    if g.shape(logits) != [b, 1] {
        return Err(Error::Shape {
            op: "loss_target",
            lhs: g.shape(logits).to_vec(),
            rhs: vec![b, 1],
        });
    }
    let target = g.constant(Tensor::new(vec![b, 1], values)?);
    g.mse(logits, target)
}

/// Mean cross-entropy of `[N, 2]` SSA logits over the labelled rows;
/// unlabelled rows are skipped. Zero when nothing is labelled.
pub fn loss_ssa(g: &mut Graph, ssa_logits: Var, labels: &[TokenLabel]) -> Result<Var> {
    let classes: Vec<usize> = labels.iter().map(|l| l.class().unwrap_or(IGNORE)).collect();
    g.cross_entropy(ssa_logits, &classes, IGNORE)
}

/// `alpha · target + (1 − alpha) · ssa`.
pub fn loss_total(g: &mut Graph, target: Var, ssa: Var, alpha: f32) -> Result<Var> {
    let a = g.scale(target, alpha);
    let b = g.scale(ssa, 1.0 - alpha);
    g.add(a, b)
}
