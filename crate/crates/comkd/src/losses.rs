//! Classification probability over unit-norm features, cross-entropy for
//! teacher pretraining, the temperature-scaled KL distillation loss, the
//! L1/MSE logit-matching variants, and final-loss assembly.
//!
//! All batch reductions are means, keeping loss scale independent of batch
//! size. The teacher side of every distillation loss is detached.

use crate::tensor::{Tape, Tensor, VarId};
use crate::{Error, Result};

/// Raw similarity logits plus the temperature that turns them into a
/// distribution.
#[derive(Debug, Clone)]
pub struct LogitMatrix {
    pub values: Tensor,
    pub temperature: f32,
}

impl LogitMatrix {
    /// Softmax view of the logits at the stored temperature.
    pub fn probabilities(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(&self.values);
        let p = tape.row_softmax(v, self.temperature)?;
        Ok(tape.to_tensor(p))
    }

    /// Row-wise argmax (ties resolve to the lowest index).
    pub fn argmax(&self) -> Result<Vec<usize>> {
        let (rows, cols) = self.values.dims2()?;
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = self.values.row(r);
            let mut best = 0usize;
            for c in 1..cols {
                if row[c] > row[best] {
                    best = c;
                }
            }
            out.push(best);
        }
        Ok(out)
    }
}

fn check_unit_rows(op: &'static str, t: &Tensor) -> Result<()> {
    let (rows, cols) = t.dims2()?;
    for r in 0..rows {
        let norm: f32 = t.data[r * cols..(r + 1) * cols].iter().map(|v| v * v).sum::<f32>().sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::Invariant(format!(
                "{}: row {} has norm {} (expected unit-norm input)",
                op, r, norm
            )));
        }
    }
    Ok(())
}

/// Similarity logits `features · textᵀ` of unit-norm features against the
/// unit-norm class matrix. Rows that are not unit-norm (beyond 1e-3) are an
/// invariant violation.
pub fn clip_logits(features: &Tensor, text: &Tensor, tau: f32) -> Result<LogitMatrix> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {}", tau)));
    }
    check_unit_rows("clip_logits", features)?;
    check_unit_rows("clip_logits", text)?;
    let mut tape = Tape::new();
    let f = tape.constant(features);
    let w = tape.constant(text);
    let wt = tape.transpose(w)?;
    let logits = tape.matmul(f, wt)?;
    Ok(LogitMatrix { values: tape.to_tensor(logits), temperature: tau })
}

/// On-tape logits of (already normalized) features against the class matrix.
pub fn clip_logits_on_tape(tape: &mut Tape, features: VarId, text: VarId) -> Result<VarId> {
    let wt = tape.transpose(text)?;
    tape.matmul(features, wt)
}

/// Mean over the batch of `-log softmax(logits/tau)[label]`.
pub fn cross_entropy_on_tape(
    tape: &mut Tape,
    logits: VarId,
    labels: &[usize],
    tau: f32,
) -> Result<VarId> {
    let logp = tape.log_row_softmax(logits, tau)?;
    let picked = tape.select_class(logp, labels)?;
    let mean = tape.mean_all(picked)?;
    Ok(tape.scale(mean, -1.0))
}

/// Value-level cross-entropy of a logit matrix.
pub fn cross_entropy(logits: &LogitMatrix, labels: &[usize]) -> Result<f32> {
    let mut tape = Tape::new();
    let l = tape.constant(&logits.values);
    let ce = cross_entropy_on_tape(&mut tape, l, labels, logits.temperature)?;
    Ok(tape.value(ce)[0])
}

/// `tau^2 * mean_b KL(softmax(q_t/tau) || softmax(q_s/tau))`, teacher first
/// and detached.
pub fn kd_kl_on_tape(tape: &mut Tape, q_t: VarId, q_s: VarId, tau: f32) -> Result<VarId> {
    if tape.shape(q_t) != tape.shape(q_s) {
        return Err(Error::Dimension {
            op: "kd_kl_loss",
            left: tape.shape(q_t).to_vec(),
            right: tape.shape(q_s).to_vec(),
        });
    }
    let q_t = tape.detach(q_t);
    let p_t = tape.row_softmax(q_t, tau)?;
    let logp_t = tape.log_row_softmax(q_t, tau)?;
    let logp_s = tape.log_row_softmax(q_s, tau)?;
    let diff = tape.sub(logp_t, logp_s)?;
    let weighted = tape.mul(p_t, diff)?;
    let per_row = tape.row_sum(weighted)?;
    let mean = tape.mean_all(per_row)?;
    Ok(tape.scale(mean, tau * tau))
}

/// Mean absolute difference of raw logits (teacher detached).
pub fn l1_logit_on_tape(tape: &mut Tape, q_t: VarId, q_s: VarId) -> Result<VarId> {
    if tape.shape(q_t) != tape.shape(q_s) {
        return Err(Error::Dimension {
            op: "l1_logit_loss",
            left: tape.shape(q_t).to_vec(),
            right: tape.shape(q_s).to_vec(),
        });
    }
    let q_t = tape.detach(q_t);
    let diff = tape.sub(q_s, q_t)?;
    let a = tape.abs(diff);
    tape.mean_all(a)
}

/// Mean squared difference of raw logits (teacher detached).
pub fn mse_logit_on_tape(tape: &mut Tape, q_t: VarId, q_s: VarId) -> Result<VarId> {
    if tape.shape(q_t) != tape.shape(q_s) {
        return Err(Error::Dimension {
            op: "mse_logit_loss",
            left: tape.shape(q_t).to_vec(),
            right: tape.shape(q_s).to_vec(),
        });
    }
    let q_t = tape.detach(q_t);
    let diff = tape.sub(q_s, q_t)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean_all(sq)
}

/// Value-level distillation losses over raw logit tensors.
pub fn kd_kl_loss(q_t: &Tensor, q_s: &Tensor, tau: f32) -> Result<f32> {
    let mut tape = Tape::new();
    let t = tape.constant(q_t);
    let s = tape.constant(q_s);
    let l = kd_kl_on_tape(&mut tape, t, s, tau)?;
    Ok(tape.value(l)[0])
}

pub fn l1_logit_loss(q_t: &Tensor, q_s: &Tensor) -> Result<f32> {
    let mut tape = Tape::new();
    let t = tape.constant(q_t);
    let s = tape.constant(q_s);
    let l = l1_logit_on_tape(&mut tape, t, s)?;
    Ok(tape.value(l)[0])
}

pub fn mse_logit_loss(q_t: &Tensor, q_s: &Tensor) -> Result<f32> {
    let mut tape = Tape::new();
    let t = tape.constant(q_t);
    let s = tape.constant(q_s);
    let l = mse_logit_on_tape(&mut tape, t, s)?;
    Ok(tape.value(l)[0])
}

/// The assembled training loss and its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_stu: f32,
    pub l_align: f32,
    pub l_final: f32,
    pub lambda_align: f32,
}

/// `l_final = l_stu + lambda_align * l_align`; the default weight 1
/// reproduces the plain unweighted sum.
pub fn final_loss(l_stu: f32, l_align: f32, lambda_align: f32) -> LossBreakdown {
    LossBreakdown { l_stu, l_align, l_final: l_stu + lambda_align * l_align, lambda_align }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn logits_of_aligned_and_orthogonal_classes() {
        let features = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let text = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let lm = clip_logits(&features, &text, 1.0).unwrap();
        assert_eq!(lm.values.data, vec![1.0, 0.0]);
        let p = lm.probabilities().unwrap();
        assert!((p.data[0] - 0.73106).abs() < 1e-4);
        assert!((p.data[1] - 0.26894).abs() < 1e-4);
    }

    #[test]
    fn non_normalized_input_is_rejected() {
        let features = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let text = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(clip_logits(&features, &text, 1.0), Err(Error::Invariant(_))));
    }

    #[test]
    fn single_class_probability_is_one() {
        let features = Tensor::from_rows(&[vec![0.6, 0.8]]).unwrap();
        let text = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let lm = clip_logits(&features, &text, 1.0).unwrap();
        assert_eq!(lm.probabilities().unwrap().data, vec![1.0]);
    }

    #[test]
    fn unit_cosine_logits_stay_in_range() {
        let features = Tensor::from_rows(&[vec![0.6, 0.8], vec![-1.0, 0.0]]).unwrap();
        let text = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let lm = clip_logits(&features, &text, 2.0).unwrap();
        assert!(lm.values.data.iter().all(|v| v.abs() <= 1.0 + 1e-5));
    }

    #[test]
    fn cross_entropy_worked_example() {
        let lm = LogitMatrix {
            values: Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            temperature: 1.0,
        };
        let ce = cross_entropy(&lm, &[0]).unwrap();
        assert!((ce - 0.31326).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_n() {
        for n in [2usize, 5, 8] {
            let lm = LogitMatrix {
                values: Tensor::from_rows(&[vec![0.4; n]]).unwrap(),
                temperature: 1.0,
            };
            let ce = cross_entropy(&lm, &[n - 1]).unwrap();
            assert!((ce - (n as f32).ln()).abs() < 1e-5);
        }
    }

    #[test]
    fn cross_entropy_decreases_with_logit_scale() {
        let mut prev = f32::INFINITY;
        for s in [1.0f32, 10.0, 100.0] {
            let lm = LogitMatrix {
                values: Tensor::from_rows(&[vec![s, 0.0, 0.0]]).unwrap(),
                temperature: 1.0,
            };
            let ce = cross_entropy(&lm, &[0]).unwrap();
            assert!(ce < prev);
            assert!(ce >= 0.0);
            prev = ce;
        }
        assert!(prev < 1e-4);
    }

    #[test]
    fn out_of_range_label_is_parameter_error() {
        let lm = LogitMatrix {
            values: Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            temperature: 1.0,
        };
        assert!(matches!(cross_entropy(&lm, &[2]), Err(Error::Parameter(_))));
    }

    #[test]
    fn kl_of_identical_logits_is_zero() {
        let q = Tensor::from_rows(&[vec![0.3, -0.8, 0.1], vec![1.0, 0.0, -1.0]]).unwrap();
        let l = kd_kl_loss(&q, &q, 1.0).unwrap();
        assert!(l.abs() < 1e-7);
    }

    #[test]
    fn kl_worked_example() {
        let q_t = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let q_s = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let l = kd_kl_loss(&q_t, &q_s, 1.0).unwrap();
        // (e-1)/(e+1)
        assert!((l - 0.46212).abs() < 1e-4, "{}", l);
    }

    #[test]
    fn kl_matches_scalar_oracle_at_tau_two() {
        let q_t = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let q_s = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let tau = 2.0f32;
        let l = kd_kl_loss(&q_t, &q_s, tau).unwrap();
        // scalar oracle in f64
        let soft = |a: f64, b: f64| {
            let ea = (a / tau as f64).exp();
            let eb = (b / tau as f64).exp();
            (ea / (ea + eb), eb / (ea + eb))
        };
        let (pt0, pt1) = soft(1.0, 0.0);
        let (ps0, ps1) = soft(0.0, 1.0);
        let kl = pt0 * (pt0 / ps0).ln() + pt1 * (pt1 / ps1).ln();
        let expect = (tau as f64) * (tau as f64) * kl;
        assert!((l as f64 - expect).abs() < 1e-5, "{} vs {}", l, expect);
    }

    #[test]
    fn l1_and_mse_worked_examples() {
        let q_t = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let q_s = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert!((l1_logit_loss(&q_t, &q_s).unwrap() - 1.0).abs() < 1e-6);
        assert!((mse_logit_loss(&q_t, &q_s).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(l1_logit_loss(&q_t, &q_t).unwrap(), 0.0);
        assert_eq!(mse_logit_loss(&q_t, &q_t).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_gives_abs_and_square() {
        let q_t = Tensor::from_rows(&[vec![0.4, -0.3, 0.9]]).unwrap();
        for c in [0.5f32, -1.25] {
            let q_s = Tensor::from_rows(&[q_t.row(0).iter().map(|v| v + c).collect()]).unwrap();
            assert!((l1_logit_loss(&q_t, &q_s).unwrap() - c.abs()).abs() < 1e-6);
            assert!((mse_logit_loss(&q_t, &q_s).unwrap() - c * c).abs() < 1e-6);
        }
    }

    #[test]
    fn final_loss_examples() {
        assert_eq!(final_loss(0.5, 0.25, 1.0).l_final, 0.75);
        let kl_only = final_loss(0.7, 0.9, 0.0);
        assert_eq!(kl_only.l_final, kl_only.l_stu);
        assert!((final_loss(0.4, 0.2, 0.5).l_final - 0.5).abs() < 1e-7);
    }

    #[test]
    fn kd_losses_match_scalar_loop_oracles_on_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (b, n) = (4usize, 8usize);
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                Tensor::from_rows(
                    &(0..b)
                        .map(|_| (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                        .collect::<Vec<_>>(),
                )
                .unwrap()
            };
            let q_t = mk(&mut rng);
            let q_s = mk(&mut rng);
            let tau = rng.gen_range(0.5f32..2.0);

            let softmax64 = |row: &[f32]| {
                let z: Vec<f64> = row.iter().map(|v| *v as f64 / tau as f64).collect();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect::<Vec<f64>>()
            };
            let mut kl = 0.0f64;
            let mut l1 = 0.0f64;
            let mut mse = 0.0f64;
            for r in 0..b {
                let pt = softmax64(q_t.row(r));
                let ps = softmax64(q_s.row(r));
                for c in 0..n {
                    kl += pt[c] * (pt[c] / ps[c]).ln() / b as f64;
                    let d = (q_s.row(r)[c] - q_t.row(r)[c]) as f64;
                    l1 += d.abs() / (b * n) as f64;
                    mse += d * d / (b * n) as f64;
                }
            }
            kl *= (tau as f64) * (tau as f64);
            assert!((kd_kl_loss(&q_t, &q_s, tau).unwrap() as f64 - kl).abs() < 1e-5);
            assert!((l1_logit_loss(&q_t, &q_s).unwrap() as f64 - l1).abs() < 1e-5);
            assert!((mse_logit_loss(&q_t, &q_s).unwrap() as f64 - mse).abs() < 1e-5);
        }
    }

    #[test]
    fn kd_teacher_side_receives_no_gradient() {
        let mut tape = Tape::new();
        let q_t = tape.leaf(
            &Tensor::from_rows(&[vec![0.5, -0.5]]).unwrap().requires_grad(),
        );
        let q_s = tape.leaf(
            &Tensor::from_rows(&[vec![0.1, 0.2]]).unwrap().requires_grad(),
        );
        let l = kd_kl_on_tape(&mut tape, q_t, q_s, 1.0).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(q_s).is_some());
        let tg = tape.grad(q_t);
        assert!(tg.is_none() || tg.unwrap().iter().all(|v| *v == 0.0));
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative_and_zero_only_on_matching_distributions(
            rows_t in proptest::collection::vec(
                proptest::collection::vec(-2.0f32..2.0, 4), 1..4),
            rows_s in proptest::collection::vec(
                proptest::collection::vec(-2.0f32..2.0, 4), 1..4),
            tau in 0.5f32..2.0,
        ) {
            prop_assume!(rows_t.len() == rows_s.len());
            let q_t = Tensor::from_rows(&rows_t).unwrap();
            let q_s = Tensor::from_rows(&rows_s).unwrap();
            let l = kd_kl_loss(&q_t, &q_s, tau).unwrap();
            prop_assert!(l > -1e-6);
            // identical inputs always give (near) zero
            let same = kd_kl_loss(&q_t, &q_t, tau).unwrap();
            prop_assert!(same.abs() < 1e-6);
        }

        #[test]
        fn probability_rows_sum_to_one_and_argmax_ignores_tau(
            rows in proptest::collection::vec(
                proptest::collection::vec(-1.0f32..1.0, 3), 1..4),
        ) {
            // build unit-norm features/text from free values
            let feat: Vec<Vec<f32>> = rows.iter().map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-3);
                r.iter().map(|v| v / n).collect()
            }).collect();
            let text = vec![vec![1.0f32, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
            let f = Tensor::from_rows(&feat).unwrap();
            let w = Tensor::from_rows(&text).unwrap();
            let mut argmaxes = Vec::new();
            for tau in [0.5f32, 1.0, 2.0] {
                let lm = clip_logits(&f, &w, tau).unwrap();
                let p = lm.probabilities().unwrap();
                for r in 0..feat.len() {
                    let sum: f32 = p.row(r).iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-6);
                }
                argmaxes.push(lm.argmax().unwrap());
            }
            prop_assert_eq!(&argmaxes[0], &argmaxes[1]);
            prop_assert_eq!(&argmaxes[1], &argmaxes[2]);
        }
    }
}
