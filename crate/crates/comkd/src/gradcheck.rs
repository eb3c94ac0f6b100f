//! Finite-difference verification of every differentiable operation and of
//! the composite losses through the full teacher and student pipelines.
//!
//! For each check, the analytic gradient comes from the tape; the numeric
//! gradient is a central difference quotient of an independent f64
//! scalar-loop reference of the same function (h = 1e-3, with the exactly
//! applied f32 perturbation in the denominator). Differencing the f32
//! forward directly would carry ~1e-3 absolute rounding noise at this step
//! size, which would swamp the tolerance; the f64 reference removes that
//! noise and doubles as an independent forward oracle.
//!
//! Relative error is `|a - n| / max(|a|, |n|, 1e-2)`: pure relative for
//! non-negligible components, a 1e-5 absolute floor for negligible ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::eduattn::AttentionVars;
use crate::encoders::{AffineVars, TextFeatureMatrix};
use crate::tensor::{Tape, Tensor, VarId};
use crate::trainer::{student_batch_loss, teacher_batch_loss, StudentModel, TeacherModel};
use crate::Result;

pub const DEFAULT_TOL: f64 = 1e-3;
const STEP: f32 = 1e-3;
const REL_FLOOR: f64 = 1e-2;

/// Outcome of one named check, maximized over rounds and entries.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub rounds: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// One input tensor of a check; only `grad: true` inputs are perturbed.
struct Input {
    tensor: Tensor,
    grad: bool,
}

impl Input {
    fn grad_tensor(data: Tensor) -> Input {
        Input { tensor: data.requires_grad(), grad: true }
    }

    fn const_tensor(data: Tensor) -> Input {
        Input { tensor: data, grad: false }
    }
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor { shape: vec![rows, cols], data, requires_grad: false, grad: None }
}

fn rand_vector(rng: &mut ChaCha8Rng, len: usize) -> Tensor {
    let data: Vec<f32> = (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::vector(data)
}

/// Pushes entries away from a kink at zero so the central difference never
/// straddles it.
fn away_from_zero(mut t: Tensor, margin: f32) -> Tensor {
    for v in &mut t.data {
        if v.abs() < margin {
            *v += if *v >= 0.0 { margin } else { -margin };
        }
    }
    t
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// f64 scalar-loop references, independent of the tape implementation.
mod reference {
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = a[r * cols + c];
            }
        }
        out
    }

    pub fn add_row(a: &[f64], bias: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = a.to_vec();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += bias[c];
            }
        }
        out
    }

    pub fn affine(x: &[f64], w: &[f64], b: &[f64], rows: usize, i: usize, o: usize) -> Vec<f64> {
        add_row(&matmul(x, w, rows, i, o), b, rows, o)
    }

    pub fn relu(a: &[f64]) -> Vec<f64> {
        a.iter().map(|v| v.max(0.0)).collect()
    }

    pub fn row_softmax(x: &[f64], rows: usize, cols: usize, tau: f64) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..cols {
                let e = ((row[c] - max) / tau).exp();
                out[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                out[r * cols + c] /= sum;
            }
        }
        out
    }

    pub fn log_row_softmax(x: &[f64], rows: usize, cols: usize, tau: f64) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..cols {
                sum += ((row[c] - max) / tau).exp();
            }
            let lse = sum.ln();
            for c in 0..cols {
                out[r * cols + c] = (row[c] - max) / tau - lse;
            }
        }
        out
    }

    pub fn l2_normalize_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..cols {
                out[r * cols + c] = row[c] / norm;
            }
        }
        out
    }

    pub fn mean_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += x[r * cols + c];
            }
        }
        out.iter_mut().for_each(|v| *v /= rows as f64);
        out
    }

    pub fn var_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mean = mean_rows(x, rows, cols);
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                let d = x[r * cols + c] - mean[c];
                out[c] += d * d;
            }
        }
        out.iter_mut().for_each(|v| *v /= rows as f64);
        out
    }

    pub fn cross_entropy(logits: &[f64], rows: usize, cols: usize, labels: &[usize], tau: f64) -> f64 {
        let logp = log_row_softmax(logits, rows, cols, tau);
        let mut s = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            s -= logp[r * cols + l];
        }
        s / rows as f64
    }

    pub fn kd_kl(q_t: &[f64], q_s: &[f64], rows: usize, cols: usize, tau: f64) -> f64 {
        let p_t = row_softmax(q_t, rows, cols, tau);
        let lp_t = log_row_softmax(q_t, rows, cols, tau);
        let lp_s = log_row_softmax(q_s, rows, cols, tau);
        let mut s = 0.0;
        for i in 0..rows * cols {
            s += p_t[i] * (lp_t[i] - lp_s[i]);
        }
        tau * tau * s / rows as f64
    }

    pub fn l1(q_t: &[f64], q_s: &[f64]) -> f64 {
        q_t.iter().zip(q_s).map(|(a, b)| (b - a).abs()).sum::<f64>() / q_t.len() as f64
    }

    pub fn mse(q_t: &[f64], q_s: &[f64]) -> f64 {
        q_t.iter().zip(q_s).map(|(a, b)| (b - a) * (b - a)).sum::<f64>() / q_t.len() as f64
    }

    pub fn align(
        s: &[f64],
        t: &[f64],
        rows: usize,
        cols: usize,
    ) -> (f64, f64, f64) {
        let ms = mean_rows(s, rows, cols);
        let mt = mean_rows(t, rows, cols);
        let vs = var_rows(s, rows, cols);
        let vt = var_rows(t, rows, cols);
        let mean_term =
            ms.iter().zip(&mt).map(|(a, b)| (a - b).abs()).sum::<f64>() / cols as f64;
        let var_term =
            vs.iter().zip(&vt).map(|(a, b)| (a - b).abs()).sum::<f64>() / cols as f64;
        (mean_term, var_term, mean_term + var_term)
    }

    /// Q from image rows, K/V from text rows, softmax over the text axis,
    /// then the gated residual sum.
    #[allow(clippy::too_many_arguments)]
    pub fn attention_fused(
        u: &[f64],
        w_t: &[f64],
        qw: &[f64],
        qb: &[f64],
        kw: &[f64],
        kb: &[f64],
        vw: &[f64],
        vb: &[f64],
        alpha: f64,
        b: usize,
        n: usize,
        d: usize,
        da: usize,
        scale_dim: usize,
    ) -> Vec<f64> {
        let q = affine(u, qw, qb, b, d, da);
        let k = affine(w_t, kw, kb, n, d, da);
        let v = affine(w_t, vw, vb, n, d, da);
        let kt = transpose(&k, n, da);
        let scores = matmul(&q, &kt, b, da, n);
        let scaled: Vec<f64> =
            scores.iter().map(|s| s / (scale_dim as f64).sqrt()).collect();
        let attn = row_softmax(&scaled, b, n, 1.0);
        let f_att = matmul(&attn, &v, b, n, da);
        u.iter().zip(&f_att).map(|(ui, ai)| ui + alpha * ai).collect()
    }
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data.iter().map(|v| *v as f64).collect()
}

/// Generic harness: binds the inputs, runs the tape loss, then perturbs
/// every gradient-carrying entry and compares against the f64 reference.
fn check_case(
    name: &str,
    seed: u64,
    rounds: usize,
    gen: &dyn Fn(&mut ChaCha8Rng) -> Vec<Input>,
    tape_loss: &dyn Fn(&mut Tape, &[VarId], &[Input]) -> Result<VarId>,
    ref_loss: &dyn Fn(&[Vec<f64>], &[Input]) -> f64,
) -> Result<CheckReport> {
    let mut max_rel = 0.0f64;
    for round in 0..rounds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(round as u64));
        let inputs = gen(&mut rng);

        let mut tape = Tape::new();
        let ids: Vec<VarId> = inputs
            .iter()
            .map(|inp| if inp.grad { tape.leaf(&inp.tensor) } else { tape.constant(&inp.tensor) })
            .collect();
        let loss = tape_loss(&mut tape, &ids, &inputs)?;
        tape.backward(loss)?;

        // sanity: tape loss and reference agree at the base point
        let base: Vec<Vec<f64>> = inputs.iter().map(|i| to_f64(&i.tensor)).collect();
        let ref_base = ref_loss(&base, &inputs);
        let tape_base = tape.value(loss)[0] as f64;
        let forward_err = rel_err(tape_base, ref_base);
        max_rel = max_rel.max(forward_err);

        for (i, inp) in inputs.iter().enumerate() {
            if !inp.grad {
                continue;
            }
            let analytic: Vec<f32> = match tape.grad(ids[i]) {
                Some(g) => g.to_vec(),
                None => vec![0.0; inp.tensor.numel()],
            };
            for j in 0..inp.tensor.numel() {
                let x = inp.tensor.data[j];
                let xp = x + STEP;
                let xm = x - STEP;
                let mut vals = base.clone();
                vals[i][j] = xp as f64;
                let lp = ref_loss(&vals, &inputs);
                vals[i][j] = xm as f64;
                let lm = ref_loss(&vals, &inputs);
                let numeric = (lp - lm) / (xp as f64 - xm as f64);
                max_rel = max_rel.max(rel_err(analytic[j] as f64, numeric));
            }
        }
    }
    Ok(CheckReport { name: name.to_string(), max_rel_err: max_rel, tol: DEFAULT_TOL, rounds })
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.shape[0], t.shape[1])
}

/// Weighted-sum loss over an op output: `sum(y * w)` with `w` the last
/// (constant) input.
fn weighted(tape: &mut Tape, y: VarId, w: VarId) -> Result<VarId> {
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

fn weighted_ref(y: &[f64], w: &[f64]) -> f64 {
    y.iter().zip(w).map(|(a, b)| a * b).sum()
}

/// Runs the whole suite: one report per op or composite, each over
/// `rounds` random restarts.
pub fn run_all(seed: u64, rounds: usize) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();

    reports.push(check_case(
        "matmul",
        seed,
        rounds,
        &|rng| {
            vec![
                Input::grad_tensor(rand_matrix(rng, 4, 3)),
                Input::grad_tensor(rand_matrix(rng, 3, 5)),
                Input::const_tensor(rand_matrix(rng, 4, 5)),
            ]
        },
        &|tape, ids, _| {
            let y = tape.matmul(ids[0], ids[1])?;
            weighted(tape, y, ids[2])
        },
        &|vals, _| weighted_ref(&reference::matmul(&vals[0], &vals[1], 4, 3, 5), &vals[2]),
    )?);

    reports.push(check_case(
        "add",
        seed,
        rounds,
        &|rng| {
            vec![
                Input::grad_tensor(rand_matrix(rng, 3, 4)),
                Input::grad_tensor(rand_matrix(rng, 3, 4)),
                Input::const_tensor(rand_matrix(rng, 3, 4)),
            ]
        },
        &|tape, ids, _| {
            let y = tape.add(ids[0], ids[1])?;
            weighted(tape, y, ids[2])
        },
        &|vals, _| {
            let y: Vec<f64> = vals[0].iter().zip(&vals[1]).map(|(a, b)| a + b).collect();
            weighted_ref(&y, &vals[2])
        },
    )?);

    reports.push(check_case(
        "sub",
        seed,
        rounds,
        &|rng| {
            vec![
                Input::grad_tensor(rand_matrix(rng, 3, 4)),
                Input::grad_tensor(rand_matrix(rng, 3, 4)),
                Input::const_tensor(rand_matrix(rng, 3, 4)),
            ]
        },
        &|tape, ids, _| {
            let y = tape.sub(ids[0], ids[1])?;
            weighted(tape, y, ids[2])
        },
        &|vals, _| {
            let y: Vec<f64> = vals[0].iter().zip(&vals[1]).map(|(a, b)| a - b).collect();
            weighted_ref(&y, &vals[2])
        },
    )?);

    reports.push(check_case(
        "mul",
        seed,
        rounds,
        &|rng| {
            vec![
                Input::grad_tensor(rand_matrix(rng, 3, 4)),
                Input::grad_tensor(rand_matrix(rng, 3, 4)),
                Input::const_tensor(rand_matrix(rng, 3, 4)),
            ]
        },
        &|tape, ids, _| {
            let y = tape.mul(ids[0], ids[1])?;
            weighted(tape, y, ids[2])
        },
        &|vals, _| {
            let y: Vec<f64> = vals[0].iter().zip(&vals[1]).map(|(a, b)| a * b).collect();
            weighted_ref(&y, &vals[2])
        },
    )?);

    reports.push(check_case(
        "add_row",
        seed,
        rounds,
        &|rng| {
            vec![
                Input::grad_tensor(rand_matrix(rng, 4, 3)),
                Input::grad_tensor(rand_vector(rng, 3)),
                Input::const_tensor(rand_matrix(rng, 4, 3)),
            ]
        },
        &|tape, ids, _| {
            let y = tape.add_row(ids[0], ids[1])?;
            weighted(tape, y, ids[2])
        },
        &|vals, _| weighted_ref(&reference::add_row(&vals[0], &vals[1], 4, 3), &vals[2]),
    )?);

    reports.push(check_case(
        "scale",
        seed,
        rounds,
        &|rng| {
            vec![
                Input::grad_tensor(rand_matrix(rng, 3, 3)),
                Input::const_tensor(rand_matrix(rng, 3, 3)),
            ]
        },
        &|tape, ids, _| {
            let y = tape.scale(ids[0], 1.7);
            weighted(tape, y, ids[1])
        },
        &|vals, _| {
            let y: Vec<f64> = vals[0].iter().map(|v| v * 1.7f32 as f64).collect();
            weighted_ref(&y, &vals[1])
        },
    )?);

    reports.push(check_case(
        "scale_var",
        seed,
        rounds,
        &|rng| {
            vec![
                Input::grad_tensor(rand_matrix(rng, 3, 4)),
                Input::grad_tensor(rand_vector(rng, 1)),
                Input::const_tensor(rand_matrix(rng, 3, 4)),
            ]
        },
        &|tape, ids, _| {
            let y = tape.scale_var(ids[0], ids[1])?;
            weighted(tape, y, ids[2])
        },
        &|vals, _| {
            let s = vals[1][0];
            let y: Vec<f64> = vals[0].iter().map(|v| v * s).collect();
            weighted_ref(&y, &vals[2])
        },
    )?);

    reports.push(check_case(
        "transpose",
        seed,
        rounds,
        &|rng| {
            vec![
                Input::grad_tensor(rand_matrix(rng, 3, 4)),
                Input::const_tensor(rand_matrix(rng, 4, 3)),
            ]
        },
        &|tape, ids, _| {
            let y = tape.transpose(ids[0])?;
            weighted(tape, y, ids[1])
        },
        &|vals, _| weighted_ref(&reference::transpose(&vals[0], 3, 4), &vals[1]),
    )?);

    reports.push(check_case(
        "concat_cols",
        seed,
        rounds,
        &|rng| {
            vec![
                Input::grad_tensor(rand_matrix(rng, 3, 2)),
                Input::grad_tensor(rand_matrix(rng, 3, 4)),
                Input::const_tensor(rand_matrix(rng, 3, 6)),
            ]
        },
        &|tape, ids, _| {
            let y = tape.concat_cols(ids[0], ids[1])?;
            weighted(tape, y, ids[2])
        },
        &|vals, _| {
            let mut y = Vec::new();
            for r in 0..3 {
                y.extend_from_slice(&vals[0][r * 2..(r + 1) * 2]);
                y.extend_from_slice(&vals[1][r * 4..(r + 1) * 4]);
            }
            weighted_ref(&y, &vals[2])
        },
    )?);

    reports.push(check_case(
        "repeat_row",
        seed,
        rounds,
        &|rng| {
            vec![
                Input::grad_tensor(rand_vector(rng, 4)),
                Input::const_tensor(rand_matrix(rng, 3, 4)),
            ]
        },
        &|tape, ids, _| {
            let y = tape.repeat_row(ids[0], 3)?;
            weighted(tape, y, ids[1])
        },
        &|vals, _| {
            let mut y = Vec::new();
            for _ in 0..3 {
                y.extend_from_slice(&vals[0]);
            }
            weighted_ref(&y, &vals[1])
        },
    )?);

    reports.push(check_case(
        "relu",
        seed,
        rounds,
        &|rng| {
            vec![
                Input::grad_tensor(away_from_zero(rand_matrix(rng, 4, 4), 5.0 * STEP)),
                Input::const_tensor(rand_matrix(rng, 4, 4)),
            ]
        },
        &|tape, ids, _| {
            let y = tape.relu(ids[0]);
            weighted(tape, y, ids[1])
        },
        &|vals, _| weighted_ref(&reference::relu(&vals[0]), &vals[1]),
    )?);

    reports.push(check_case(
        "abs",
        seed,
        rounds,
        &|rng| {
            vec![
                Input::grad_tensor(away_from_zero(rand_matrix(rng, 4, 4), 5.0 * STEP)),
                Input::const_tensor(rand_matrix(rng, 4, 4)),
            ]
        },
        &|tape, ids, _| {
            let y = tape.abs(ids[0]);
            weighted(tape, y, ids[1])
        },
        &|vals, _| {
            let y: Vec<f64> = vals[0].iter().map(|v| v.abs()).collect();
            weighted_ref(&y, &vals[1])
        },
    )?);

    reports.push(check_case(
        "row_softmax",
        seed,
        rounds,
        &|rng| {
            vec![
                Input::grad_tensor(rand_matrix(rng, 3, 5)),
                Input::const_tensor(rand_matrix(rng, 3, 5)),
            ]
        },
        &|tape, ids, _| {
            let y = tape.row_softmax(ids[0], 0.7)?;
            weighted(tape, y, ids[1])
        },
        &|vals, _| {
            weighted_ref(&reference::row_softmax(&vals[0], 3, 5, 0.7f32 as f64), &vals[1])
        },
    )?);

    reports.push(check_case(
        "log_row_softmax",
        seed,
        rounds,
        &|rng| {
            vec![
                Input::grad_tensor(rand_matrix(rng, 3, 5)),
                Input::const_tensor(rand_matrix(rng, 3, 5)),
            ]
        },
        &|tape, ids, _| {
            let y = tape.log_row_softmax(ids[0], 1.3)?;
            weighted(tape, y, ids[1])
        },
        &|vals, _| {
            weighted_ref(&reference::log_row_softmax(&vals[0], 3, 5, 1.3f32 as f64), &vals[1])
        },
    )?);

    reports.push(check_case(
        "l2_normalize_rows",
        seed,
        rounds,
        &|rng| {
            let mut t = rand_matrix(rng, 3, 4);
            for r in 0..3 {
                let norm: f32 =
                    t.data[r * 4..(r + 1) * 4].iter().map(|v| v * v).sum::<f32>().sqrt();
                if norm < 0.5 {
                    t.data[r * 4] += 1.0;
                }
            }
            vec![Input::grad_tensor(t), Input::const_tensor(rand_matrix(rng, 3, 4))]
        },
        &|tape, ids, _| {
            let y = tape.l2_normalize_rows(ids[0])?;
            weighted(tape, y, ids[1])
        },
        &|vals, _| weighted_ref(&reference::l2_normalize_rows(&vals[0], 3, 4), &vals[1]),
    )?);

    reports.push(check_case(
        "reduce_mean_rows",
        seed,
        rounds,
        &|rng| {
            vec![
                Input::grad_tensor(rand_matrix(rng, 4, 3)),
                Input::const_tensor(rand_vector(rng, 3)),
            ]
        },
        &|tape, ids, _| {
            let y = tape.reduce_mean_rows(ids[0])?;
            weighted(tape, y, ids[1])
        },
        &|vals, _| weighted_ref(&reference::mean_rows(&vals[0], 4, 3), &vals[1]),
    )?);

    reports.push(check_case(
        "reduce_var_rows",
        seed,
        rounds,
        &|rng| {
            vec![
                Input::grad_tensor(rand_matrix(rng, 4, 3)),
                Input::const_tensor(rand_vector(rng, 3)),
            ]
        },
        &|tape, ids, _| {
            let y = tape.reduce_var_rows(ids[0])?;
            weighted(tape, y, ids[1])
        },
        &|vals, _| weighted_ref(&reference::var_rows(&vals[0], 4, 3), &vals[1]),
    )?);

    reports.push(check_case(
        "row_sum",
        seed,
        rounds,
        &|rng| {
            vec![
                Input::grad_tensor(rand_matrix(rng, 3, 4)),
                Input::const_tensor(rand_vector(rng, 3)),
            ]
        },
        &|tape, ids, _| {
            let y = tape.row_sum(ids[0])?;
            weighted(tape, y, ids[1])
        },
        &|vals, _| {
            let y: Vec<f64> =
                (0..3).map(|r| vals[0][r * 4..(r + 1) * 4].iter().sum()).collect();
            weighted_ref(&y, &vals[1])
        },
    )?);

    reports.push(check_case(
        "mean_all",
        seed,
        rounds,
        &|rng| vec![Input::grad_tensor(rand_matrix(rng, 3, 4))],
        &|tape, ids, _| tape.mean_all(ids[0]),
        &|vals, _| vals[0].iter().sum::<f64>() / vals[0].len() as f64,
    )?);

    reports.push(check_case(
        "sum_all",
        seed,
        rounds,
        &|rng| vec![Input::grad_tensor(rand_matrix(rng, 3, 4))],
        &|tape, ids, _| Ok(tape.sum_all(ids[0])),
        &|vals, _| vals[0].iter().sum::<f64>(),
    )?);

    reports.push(check_case(
        "select_class",
        seed,
        rounds,
        &|rng| {
            vec![
                Input::grad_tensor(rand_matrix(rng, 3, 4)),
                Input::const_tensor(rand_vector(rng, 3)),
            ]
        },
        &|tape, ids, _| {
            let y = tape.select_class(ids[0], &[1, 0, 3])?;
            weighted(tape, y, ids[1])
        },
        &|vals, _| {
            let y = [vals[0][1], vals[0][4], vals[0][2 * 4 + 3]];
            weighted_ref(&y, &vals[1])
        },
    )?);

    reports.push(check_case(
        "cross_entropy",
        seed,
        rounds,
        &|rng| vec![Input::grad_tensor(rand_matrix(rng, 4, 5))],
        &|tape, ids, _| crate::losses::cross_entropy_on_tape(tape, ids[0], &[2, 0, 4, 1], 0.8),
        &|vals, _| reference::cross_entropy(&vals[0], 4, 5, &[2, 0, 4, 1], 0.8f32 as f64),
    )?);

    reports.push(check_case(
        "kd_kl_loss",
        seed,
        rounds,
        &|rng| {
            vec![
                Input::const_tensor(rand_matrix(rng, 4, 5)),
                Input::grad_tensor(rand_matrix(rng, 4, 5)),
            ]
        },
        &|tape, ids, _| crate::losses::kd_kl_on_tape(tape, ids[0], ids[1], 1.5),
        &|vals, _| reference::kd_kl(&vals[0], &vals[1], 4, 5, 1.5f32 as f64),
    )?);

    reports.push(check_case(
        "l1_logit_loss",
        seed,
        rounds,
        &|rng| {
            let q_t = rand_matrix(rng, 4, 5);
            // keep |q_s - q_t| clear of the kink
            let mut q_s = q_t.clone();
            for v in &mut q_s.data {
                let d: f32 = rng.gen_range(0.05f32..0.8);
                let sign: bool = rng.gen();
                *v += if sign { d } else { -d };
            }
            vec![Input::const_tensor(q_t), Input::grad_tensor(q_s)]
        },
        &|tape, ids, _| crate::losses::l1_logit_on_tape(tape, ids[0], ids[1]),
        &|vals, _| reference::l1(&vals[0], &vals[1]),
    )?);

    reports.push(check_case(
        "mse_logit_loss",
        seed,
        rounds,
        &|rng| {
            vec![
                Input::const_tensor(rand_matrix(rng, 4, 5)),
                Input::grad_tensor(rand_matrix(rng, 4, 5)),
            ]
        },
        &|tape, ids, _| crate::losses::mse_logit_on_tape(tape, ids[0], ids[1]),
        &|vals, _| reference::mse(&vals[0], &vals[1]),
    )?);

    reports.push(check_case(
        "align_loss",
        seed,
        rounds,
        &|rng| {
            let s = rand_matrix(rng, 5, 4);
            // offset + scale keeps the mean/var differences clear of the
            // L1 kinks under perturbation
            let mut t = rand_matrix(rng, 5, 4);
            for v in &mut t.data {
                *v = *v * 1.4 + 0.3;
            }
            vec![Input::grad_tensor(s), Input::const_tensor(t)]
        },
        &|tape, ids, _| {
            let parts = crate::ifalign::align_loss_on_tape(tape, ids[0], ids[1])?;
            Ok(parts.total)
        },
        &|vals, _| reference::align(&vals[0], &vals[1], 5, 4).2,
    )?);

    reports.push(check_case(
        "cross_attention_fuse",
        seed,
        rounds,
        &|rng| {
            let mut alpha = rand_vector(rng, 1);
            alpha.data[0] = 0.4; // nonzero gate so the projections get gradient
            vec![
                Input::grad_tensor(rand_matrix(rng, 4, 4)), // query weight
                Input::grad_tensor(rand_vector(rng, 4)),    // query bias
                Input::grad_tensor(rand_matrix(rng, 4, 4)), // key weight
                Input::grad_tensor(rand_vector(rng, 4)),    // key bias
                Input::grad_tensor(rand_matrix(rng, 4, 4)), // value weight
                Input::grad_tensor(rand_vector(rng, 4)),    // value bias
                Input::grad_tensor(alpha),
                Input::grad_tensor(rand_matrix(rng, 3, 4)), // student features
                Input::const_tensor(rand_matrix(rng, 2, 4)), // text rows
                Input::const_tensor(rand_matrix(rng, 3, 4)), // loss weights
            ]
        },
        &|tape, ids, _| {
            let vars = AttentionVars {
                query: AffineVars { weight: ids[0], bias: ids[1] },
                key: AffineVars { weight: ids[2], bias: ids[3] },
                value: AffineVars { weight: ids[4], bias: ids[5] },
                alpha: ids[6],
                scale_dim: 4,
            };
            let att = crate::eduattn::cross_attention(tape, &vars, ids[7], ids[8])?;
            let fused = crate::eduattn::fuse(tape, &vars, ids[7], att)?;
            weighted(tape, fused, ids[9])
        },
        &|vals, _| {
            let fused = reference::attention_fused(
                &vals[7], &vals[8], &vals[0], &vals[1], &vals[2], &vals[3], &vals[4], &vals[5],
                vals[6][0], 3, 2, 4, 4, 4,
            );
            weighted_ref(&fused, &vals[9])
        },
    )?);

    reports.push(check_teacher_pipeline(seed, rounds)?);
    reports.push(check_student_pipeline(seed, rounds)?);

    Ok(reports)
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        input_dim: 4,
        student_dim: 3,
        teacher_dim: 4,
        attn_dim: 4,
        attn_c: 4,
        teacher_hidden: 5,
        student_hidden: 5,
        prompt_len: 1,
        prompt_width: 2,
        lambda_align: 0.7,
        tau: 1.2,
        ..TrainConfig::default()
    }
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = rand_matrix(rng, rows, cols);
    for r in 0..rows {
        let row = &mut t.data[r * cols..(r + 1) * cols];
        let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-3);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

/// Cross-entropy through the full teacher pipeline (encode, prompt, text
/// normalization, logits), perturbing every teacher parameter.
fn check_teacher_pipeline(seed: u64, rounds: usize) -> Result<CheckReport> {
    let mut max_rel = 0.0f64;
    let cfg = small_cfg();
    let labels = [0usize, 2, 1, 2];
    for round in 0..rounds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 + round as u64));
        let mut teacher = TeacherModel::init(&cfg, 3, &mut rng);
        // nonzero prompt and biases: exercises those gradient paths off the
        // origin and keeps tiny dead-relu layers away from zero-norm rows
        for v in &mut teacher.prompt.values.data {
            *v = rng.gen_range(-0.5f32..0.5);
        }
        for layer in &mut teacher.encoder.layers {
            for v in &mut layer.bias.data {
                *v = rng.gen_range(0.1f32..0.4);
            }
        }
        let batch = rand_matrix(&mut rng, 4, cfg.input_dim);

        let reference_loss = |t: &TeacherModel| -> f64 {
            let b = 4usize;
            let pdim = t.prompt.values.numel();
            let k = cfg.input_dim;
            let mut x = Vec::with_capacity(b * (k + pdim));
            for r in 0..b {
                x.extend(batch.row(r).iter().map(|v| *v as f64));
                x.extend(t.prompt.values.data.iter().map(|v| *v as f64));
            }
            let mut h = x;
            let mut width = k + pdim;
            let last = t.encoder.layers.len() - 1;
            for (i, layer) in t.encoder.layers.iter().enumerate() {
                let (wi, wo) = dims2(&layer.weight);
                h = reference::affine(&h, &to_f64(&layer.weight), &to_f64(&layer.bias), b, wi, wo);
                if i != last {
                    h = reference::relu(&h);
                }
                width = wo;
            }
            let u = reference::l2_normalize_rows(&h, b, width);
            let w = reference::l2_normalize_rows(&to_f64(&t.text_table.rows), 3, width);
            let wt = reference::transpose(&w, 3, width);
            let logits = reference::matmul(&u, &wt, b, width, 3);
            reference::cross_entropy(&logits, b, 3, &labels, cfg.tau as f64)
        };

        let mut tape = Tape::new();
        let (loss, _logits, vars) =
            teacher_batch_loss(&mut tape, &teacher, cfg.tau, &batch, &labels)?;
        tape.backward(loss)?;
        max_rel = max_rel.max(rel_err(tape.value(loss)[0] as f64, reference_loss(&teacher)));

        let ids = vars.grad_ids();
        let analytic: Vec<Vec<f32>> = ids
            .iter()
            .map(|&id| tape.grad(id).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(id).len()]))
            .collect();

        for (p_idx, _) in ids.iter().enumerate() {
            let n = analytic[p_idx].len();
            for j in 0..n {
                let x = teacher.params()[p_idx].data[j];
                let xp = x + STEP;
                let xm = x - STEP;
                teacher.params_mut()[p_idx].data[j] = xp;
                let lp = reference_loss(&teacher);
                teacher.params_mut()[p_idx].data[j] = xm;
                let lm = reference_loss(&teacher);
                teacher.params_mut()[p_idx].data[j] = x;
                let numeric = (lp - lm) / (xp as f64 - xm as f64);
                max_rel = max_rel.max(rel_err(analytic[p_idx][j] as f64, numeric));
            }
        }
    }
    Ok(CheckReport {
        name: "teacher_pipeline_cross_entropy".into(),
        max_rel_err: max_rel,
        tol: DEFAULT_TOL,
        rounds,
    })
}

/// The full distillation loss (alignment + attention fusion + KL) through
/// every student parameter.
fn check_student_pipeline(seed: u64, rounds: usize) -> Result<CheckReport> {
    let mut max_rel = 0.0f64;
    let cfg = small_cfg();
    for round in 0..rounds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2000 + round as u64));
        let text = TextFeatureMatrix { rows: unit_rows(&mut rng, 3, cfg.teacher_dim) };
        let teacher_features = unit_rows(&mut rng, 4, cfg.teacher_dim);
        let teacher_logits = {
            let mut tape = Tape::new();
            let f = tape.constant(&teacher_features);
            let w = tape.constant(&text.rows);
            let l = crate::losses::clip_logits_on_tape(&mut tape, f, w)?;
            tape.to_tensor(l)
        };
        let batch = rand_matrix(&mut rng, 4, cfg.input_dim);
        let mut student = StudentModel::init(&cfg, text.clone(), &mut rng);
        student.attention.alpha.data[0] = 0.35;
        for v in &mut student.prompt.values.data {
            *v = rng.gen_range(-0.5f32..0.5);
        }
        for layer in &mut student.encoder.layers {
            for v in &mut layer.bias.data {
                *v = rng.gen_range(0.1f32..0.4);
            }
        }

        let reference_loss = |s: &StudentModel| -> f64 {
            let b = 4usize;
            let n = 3usize;
            let d = cfg.teacher_dim;
            let pdim = s.prompt.values.numel();
            let k = cfg.input_dim;
            let mut x = Vec::with_capacity(b * (k + pdim));
            for r in 0..b {
                x.extend(batch.row(r).iter().map(|v| *v as f64));
                x.extend(s.prompt.values.data.iter().map(|v| *v as f64));
            }
            let mut h = x;
            let mut width = k + pdim;
            let last = s.encoder.layers.len() - 1;
            for (i, layer) in s.encoder.layers.iter().enumerate() {
                let (wi, wo) = dims2(&layer.weight);
                h = reference::affine(&h, &to_f64(&layer.weight), &to_f64(&layer.bias), b, wi, wo);
                if i != last {
                    h = reference::relu(&h);
                }
                width = wo;
            }
            let u = reference::l2_normalize_rows(&h, b, width);
            let (pi, po) = dims2(&s.projector.map.weight);
            let proj = reference::affine(
                &u,
                &to_f64(&s.projector.map.weight),
                &to_f64(&s.projector.map.bias),
                b,
                pi,
                po,
            );
            let t_feat = to_f64(&teacher_features);
            let (_, _, align_total) = reference::align(&proj, &t_feat, b, d);
            let w_rows = to_f64(&s.text_features.rows);
            let fused = reference::attention_fused(
                &proj,
                &w_rows,
                &to_f64(&s.attention.query.weight),
                &to_f64(&s.attention.query.bias),
                &to_f64(&s.attention.key.weight),
                &to_f64(&s.attention.key.bias),
                &to_f64(&s.attention.value.weight),
                &to_f64(&s.attention.value.bias),
                s.attention.alpha.data[0] as f64,
                b,
                n,
                d,
                cfg.attn_dim,
                cfg.attn_c,
            );
            let f_n = reference::l2_normalize_rows(&fused, b, d);
            let wt = reference::transpose(&w_rows, n, d);
            let q_s = reference::matmul(&f_n, &wt, b, d, n);
            let q_t = to_f64(&teacher_logits);
            let l_stu = reference::kd_kl(&q_t, &q_s, b, n, cfg.tau as f64);
            l_stu + cfg.lambda_align as f64 * align_total
        };

        let mut tape = Tape::new();
        let step =
            student_batch_loss(&mut tape, &student, &cfg, &batch, &teacher_features, &teacher_logits)?;
        tape.backward(step.l_final)?;
        max_rel = max_rel.max(rel_err(tape.value(step.l_final)[0] as f64, reference_loss(&student)));

        let ids = step.vars.grad_ids();
        let analytic: Vec<Vec<f32>> = ids
            .iter()
            .map(|&id| tape.grad(id).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(id).len()]))
            .collect();

        for (p_idx, _) in ids.iter().enumerate() {
            let n = analytic[p_idx].len();
            for j in 0..n {
                let x = student.params()[p_idx].data[j];
                let xp = x + STEP;
                let xm = x - STEP;
                student.params_mut()[p_idx].data[j] = xp;
                let lp = reference_loss(&student);
                student.params_mut()[p_idx].data[j] = xm;
                let lm = reference_loss(&student);
                student.params_mut()[p_idx].data[j] = x;
                let numeric = (lp - lm) / (xp as f64 - xm as f64);
                max_rel = max_rel.max(rel_err(analytic[p_idx][j] as f64, numeric));
            }
        }
    }
    Ok(CheckReport {
        name: "student_pipeline_distill_loss".into(),
        max_rel_err: max_rel,
        tol: DEFAULT_TOL,
        rounds,
    })
}

/// Renders one line per report, `PASS`/`FAIL` per the tolerance.
pub fn render_reports(reports: &[CheckReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&format!(
            "{:<34} max_rel_err {:>10.3e}  tol {:.0e}  rounds {:>2}  {}\n",
            r.name,
            r.max_rel_err,
            r.tol,
            r.rounds,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    out
}
