//! Gated cross-attention fusion: scaled dot-product attention with queries
//! from the (projected) student image features and keys/values from the
//! teacher's class-text features, blended into the student representation by
//! a learnable scalar gate that starts at exactly 0 — so the module is a
//! strict no-op at initialization and grows in as the gate learns.

use rand_chacha::ChaCha8Rng;

use crate::encoders::{Affine, AffineVars};
use crate::tensor::{Tape, Tensor, VarId};
use crate::{Error, Result};

/// The three projection maps and the fusion gate.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
    /// Single learnable scalar, initialized to exactly 0.
    pub alpha: Tensor,
    /// Dimension used in the 1/sqrt(C) attention scaling.
    pub scale_dim: usize,
}

/// Tape binding of [`AttentionParams`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub query: AffineVars,
    pub key: AffineVars,
    pub value: AffineVars,
    pub alpha: VarId,
    pub scale_dim: usize,
}

impl AttentionParams {
    pub fn new(feature_dim: usize, attn_dim: usize, scale_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionParams {
            query: Affine::kaiming(feature_dim, attn_dim, rng),
            key: Affine::kaiming(feature_dim, attn_dim, rng),
            value: Affine::kaiming(feature_dim, attn_dim, rng),
            alpha: Tensor::zeros(vec![1]).requires_grad(),
            scale_dim,
        }
    }

    /// Identity projections with `alpha` still 0; handy for worked examples.
    pub fn identity(dim: usize) -> Self {
        AttentionParams {
            query: Affine::identity(dim),
            key: Affine::identity(dim),
            value: Affine::identity(dim),
            alpha: Tensor::zeros(vec![1]).requires_grad(),
            scale_dim: dim,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            query: self.query.bind(tape),
            key: self.key.bind(tape),
            value: self.value.bind(tape),
            alpha: tape.leaf(&self.alpha),
            scale_dim: self.scale_dim,
        }
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            query: self.query.bind_frozen(tape),
            key: self.key.bind_frozen(tape),
            value: self.value.bind_frozen(tape),
            alpha: tape.constant(&self.alpha),
            scale_dim: self.scale_dim,
        }
    }
}

/// `softmax(Q K^T / sqrt(C)) V` with Q from student image features and K, V
/// from teacher text features; softmax runs over the class axis.
pub fn cross_attention(
    tape: &mut Tape,
    params: &AttentionVars,
    student_features: VarId,
    text_features: VarId,
) -> Result<VarId> {
    let text_shape = tape.shape(text_features).to_vec();
    if text_shape.first().copied().unwrap_or(0) == 0 {
        return Err(Error::Parameter("cross_attention: need at least one text row".into()));
    }
    let q = params.query.apply(tape, student_features)?;
    let k = params.key.apply(tape, text_features)?;
    let v = params.value.apply(tape, text_features)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (params.scale_dim as f32).sqrt());
    let attn = tape.row_softmax(scaled, 1.0)?;
    tape.matmul(attn, v)
}

/// Attention weights for inspection: same forward as [`cross_attention`]
/// up to the softmax.
pub fn attention_weights(
    tape: &mut Tape,
    params: &AttentionVars,
    student_features: VarId,
    text_features: VarId,
) -> Result<VarId> {
    let q = params.query.apply(tape, student_features)?;
    let k = params.key.apply(tape, text_features)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (params.scale_dim as f32).sqrt());
    tape.row_softmax(scaled, 1.0)
}

/// `f_e = u_s + alpha * f_att`; the gate participates in the gradient.
pub fn fuse(
    tape: &mut Tape,
    params: &AttentionVars,
    student_features: VarId,
    attended: VarId,
) -> Result<VarId> {
    if tape.shape(student_features) != tape.shape(attended) {
        return Err(Error::Dimension {
            op: "fuse",
            left: tape.shape(student_features).to_vec(),
            right: tape.shape(attended).to_vec(),
        });
    }
    let gated = tape.scale_var(attended, params.alpha)?;
    tape.add(student_features, gated)
}

/// Fused student representation, value level.
#[derive(Debug, Clone)]
pub struct FusedFeatures {
    pub features: Tensor,
}

/// Runs attention + fusion outside a training tape.
pub fn fuse_features(
    params: &AttentionParams,
    student_features: &Tensor,
    text_features: &Tensor,
) -> Result<FusedFeatures> {
    let mut tape = Tape::new();
    let vars = params.bind_frozen(&mut tape);
    let u = tape.constant(student_features);
    let w = tape.constant(text_features);
    let att = cross_attention(&mut tape, &vars, u, w)?;
    let fused = fuse(&mut tape, &vars, u, att)?;
    Ok(FusedFeatures { features: tape.to_tensor(fused) })
}
