//! Image-feature alignment: L1 matching of per-dimension batch mean and
//! population variance between the projected student features and the
//! (frozen) teacher features.
//!
//! Both L1 terms are reduced by the mean over feature dimensions so the
//! loss magnitude does not scale with feature width.

use crate::config::AlignKind;
use crate::tensor::{Tape, Tensor, VarId};
use crate::{Error, Result};

/// Per-dimension mean and population variance of a feature batch.
#[derive(Debug, Clone)]
pub struct AlignStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// The two alignment terms and their sum.
#[derive(Debug, Clone, Copy)]
pub struct AlignLoss {
    pub mean_term: f32,
    pub var_term: f32,
    pub total: f32,
}

/// On-tape handles to the alignment terms.
#[derive(Debug, Clone, Copy)]
pub struct AlignLossVars {
    pub mean_term: VarId,
    pub var_term: VarId,
    pub total: VarId,
}

/// Batch statistics of a feature matrix.
pub fn compute_stats(features: &Tensor) -> Result<AlignStats> {
    let mut tape = Tape::new();
    let f = tape.constant(features);
    let mean = tape.reduce_mean_rows(f)?;
    let var = tape.reduce_var_rows(f)?;
    Ok(AlignStats { mean: tape.to_tensor(mean), var: tape.to_tensor(var) })
}

/// Records the alignment loss on a tape. The teacher side is detached, so
/// gradient flows through the student features only.
pub fn align_loss_on_tape(
    tape: &mut Tape,
    student_proj: VarId,
    teacher: VarId,
) -> Result<AlignLossVars> {
    if tape.shape(student_proj) != tape.shape(teacher) {
        return Err(Error::Dimension {
            op: "align_loss",
            left: tape.shape(student_proj).to_vec(),
            right: tape.shape(teacher).to_vec(),
        });
    }
    let teacher = tape.detach(teacher);
    let mean_s = tape.reduce_mean_rows(student_proj)?;
    let var_s = tape.reduce_var_rows(student_proj)?;
    let mean_t = tape.reduce_mean_rows(teacher)?;
    let var_t = tape.reduce_var_rows(teacher)?;

    let mean_diff = tape.sub(mean_s, mean_t)?;
    let mean_abs = tape.abs(mean_diff);
    let mean_term = tape.mean_all(mean_abs)?;

    let var_diff = tape.sub(var_s, var_t)?;
    let var_abs = tape.abs(var_diff);
    let var_term = tape.mean_all(var_abs)?;

    let total = tape.add(mean_term, var_term)?;
    Ok(AlignLossVars { mean_term, var_term, total })
}

/// Selects which alignment term enters the training loss.
pub fn select_align_term(vars: &AlignLossVars, kind: AlignKind) -> VarId {
    match kind {
        AlignKind::Mean => vars.mean_term,
        AlignKind::Var => vars.var_term,
        AlignKind::Both => vars.total,
    }
}

/// Value-level alignment loss between two feature batches.
pub fn align_loss(student_proj: &Tensor, teacher: &Tensor) -> Result<AlignLoss> {
    let mut tape = Tape::new();
    let s = tape.constant(student_proj);
    let t = tape.constant(teacher);
    let vars = align_loss_on_tape(&mut tape, s, t)?;
    Ok(AlignLoss {
        mean_term: tape.value(vars.mean_term)[0],
        var_term: tape.value(vars.var_term)[0],
        total: tape.value(vars.total)[0],
    })
}
