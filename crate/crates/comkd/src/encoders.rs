//! Teacher and student image encoders (small MLPs), learnable input
//! prompts, the teacher's class-text embedding table (standing in for a
//! frozen text encoder), and the student's dimension-adjusting projector.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Tape, Tensor, VarId};
use crate::{Error, Result};

/// Affine map `y = x W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Debug, Clone)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Tape binding of an [`Affine`]'s parameters.
#[derive(Debug, Clone, Copy)]
pub struct AffineVars {
    pub weight: VarId,
    pub bias: VarId,
}

impl Affine {
    /// Kaiming-uniform fan-in init: `W ~ U(-b, b)` with `b = sqrt(6 / in)`,
    /// zero bias.
    pub fn kaiming(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Affine {
        let bound = (6.0 / in_dim as f64).sqrt() as f32;
        let data: Vec<f32> = (0..in_dim * out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        Affine {
            weight: Tensor { shape: vec![in_dim, out_dim], data, requires_grad: false, grad: None }
                .requires_grad(),
            bias: Tensor::zeros(vec![out_dim]).requires_grad(),
        }
    }

    /// Square identity map with zero bias.
    pub fn identity(dim: usize) -> Affine {
        let mut data = vec![0.0f32; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Affine {
            weight: Tensor { shape: vec![dim, dim], data, requires_grad: false, grad: None }
                .requires_grad(),
            bias: Tensor::zeros(vec![dim]).requires_grad(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn bind(&self, tape: &mut Tape) -> AffineVars {
        AffineVars { weight: tape.leaf(&self.weight), bias: tape.leaf(&self.bias) }
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> AffineVars {
        AffineVars { weight: tape.constant(&self.weight), bias: tape.constant(&self.bias) }
    }
}

impl AffineVars {
    pub fn apply(&self, tape: &mut Tape, x: VarId) -> Result<VarId> {
        let xw = tape.matmul(x, self.weight)?;
        tape.add_row(xw, self.bias)
    }
}

/// Feed-forward stack with rectifiers between layers (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Affine>,
}

#[derive(Debug, Clone)]
pub struct MlpVars {
    pub layers: Vec<AffineVars>,
}

impl Mlp {
    /// `dims` chains input through hidden widths to the output width.
    pub fn new(dims: &[usize], rng: &mut ChaCha8Rng) -> Mlp {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims.windows(2).map(|w| Affine::kaiming(w[0], w[1], rng)).collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        MlpVars { layers: self.layers.iter().map(|l| l.bind(tape)).collect() }
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> MlpVars {
        MlpVars { layers: self.layers.iter().map(|l| l.bind_frozen(tape)).collect() }
    }
}

impl MlpVars {
    pub fn apply(&self, tape: &mut Tape, x: VarId) -> Result<VarId> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(tape, h)?;
            if i != last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Learnable vector concatenated to every encoder input.
#[derive(Debug, Clone)]
pub struct PromptVector {
    pub values: Tensor,
}

impl PromptVector {
    /// Prompts start at zero and are shaped `[len * width]`.
    pub fn zeros(len: usize, width: usize) -> PromptVector {
        PromptVector { values: Tensor::zeros(vec![len * width]).requires_grad() }
    }

    pub fn dim(&self) -> usize {
        self.values.numel()
    }
}

/// Learnable per-class embedding table; row i is the pre-normalization text
/// feature of class i.
#[derive(Debug, Clone)]
pub struct TextEmbeddingTable {
    pub rows: Tensor,
}

impl TextEmbeddingTable {
    /// Unit-Gaussian rows, `[classes, dim]`.
    pub fn gaussian(classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> TextEmbeddingTable {
        let data: Vec<f32> =
            (0..classes * dim).map(|_| StandardNormal.sample(rng)).collect();
        TextEmbeddingTable {
            rows: Tensor { shape: vec![classes, dim], data, requires_grad: false, grad: None }
                .requires_grad(),
        }
    }

    pub fn class_count(&self) -> usize {
        self.rows.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.rows.shape[1]
    }
}

/// Row-wise unit-norm class embedding matrix, the classification weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatureMatrix {
    pub rows: Tensor,
}

impl TextFeatureMatrix {
    pub fn class_count(&self) -> usize {
        self.rows.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.rows.shape[1]
    }
}

/// Affine map adjusting student feature width to the teacher's.
#[derive(Debug, Clone)]
pub struct Projector {
    pub map: Affine,
}

impl Projector {
    pub fn kaiming(student_dim: usize, teacher_dim: usize, rng: &mut ChaCha8Rng) -> Projector {
        Projector { map: Affine::kaiming(student_dim, teacher_dim, rng) }
    }
}

/// Runs a batch through prompt concatenation, the MLP, and row
/// normalization: the shared image-encoding path of teacher and student.
pub fn encode_image(
    tape: &mut Tape,
    encoder: &MlpVars,
    prompt: VarId,
    batch: VarId,
) -> Result<VarId> {
    let batch_shape = tape.shape(batch).to_vec();
    let prompt_dim = tape.value(prompt).len();
    let expect_in = match tape.shape(encoder.layers[0].weight) {
        [i, _] => *i,
        _ => unreachable!("affine weights are rank-2"),
    };
    if batch_shape.len() != 2 || batch_shape[1] + prompt_dim != expect_in {
        return Err(Error::Dimension {
            op: "encode_image",
            left: batch_shape,
            right: vec![expect_in - prompt_dim.min(expect_in)],
        });
    }
    let rows = batch_shape[0];
    let tiled = tape.repeat_row(prompt, rows)?;
    let with_prompt = tape.concat_cols(batch, tiled)?;
    let features = encoder.apply(tape, with_prompt)?;
    if rows == 0 {
        // Empty batches normalize trivially.
        return Ok(features);
    }
    tape.l2_normalize_rows(features)
}

/// Row-normalized copy of the class embedding table.
pub fn teacher_text_features(tape: &mut Tape, table: VarId) -> Result<VarId> {
    tape.l2_normalize_rows(table)
}

/// Value-level variant used at distillation start and by inference.
pub fn teacher_text_features_value(table: &TextEmbeddingTable) -> Result<TextFeatureMatrix> {
    let mut tape = Tape::new();
    let t = tape.constant(&table.rows);
    let n = teacher_text_features(&mut tape, t)?;
    Ok(TextFeatureMatrix { rows: tape.to_tensor(n) })
}

/// Applies the projector row-wise. The result is intentionally not
/// re-normalized; normalization happens where the logits need it.
pub fn project(tape: &mut Tape, projector: &AffineVars, features: VarId) -> Result<VarId> {
    projector.apply(tape, features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn encode_empty_batch_yields_empty_features() {
        let mut r = rng(1);
        let mlp = Mlp::new(&[6, 8, 4], &mut r);
        let prompt = PromptVector::zeros(2, 2);
        let mut tape = Tape::new();
        let enc = mlp.bind(&mut tape);
        let p = tape.leaf(&prompt.values);
        let batch = tape.constant(&Tensor::new(vec![0, 2], vec![]).unwrap());
        let out = encode_image(&mut tape, &enc, p, batch).unwrap();
        assert_eq!(tape.shape(out), &[0, 4]);
    }

    #[test]
    fn zero_final_layer_triggers_degenerate_error() {
        let mut r = rng(2);
        let mut mlp = Mlp::new(&[4, 4, 3], &mut r);
        let last = mlp.layers.last_mut().unwrap();
        last.weight.data.iter_mut().for_each(|v| *v = 0.0);
        last.bias.data.iter_mut().for_each(|v| *v = 0.0);
        let prompt = PromptVector::zeros(1, 2);
        let mut tape = Tape::new();
        let enc = mlp.bind(&mut tape);
        let p = tape.leaf(&prompt.values);
        let batch = tape.constant(&Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        assert!(matches!(
            encode_image(&mut tape, &enc, p, batch),
            Err(Error::DegenerateFeature { .. })
        ));
    }

    #[test]
    fn encoded_rows_are_unit_norm() {
        let mut r = rng(3);
        let mlp = Mlp::new(&[8, 16, 5], &mut r);
        let prompt = PromptVector::zeros(2, 2);
        let rows: Vec<Vec<f32>> =
            (0..6).map(|i| (0..4).map(|j| ((i * 4 + j) as f32).sin()).collect()).collect();
        let mut tape = Tape::new();
        let enc = mlp.bind(&mut tape);
        let p = tape.leaf(&prompt.values);
        let batch = tape.constant(&Tensor::from_rows(&rows).unwrap());
        let out = encode_image(&mut tape, &enc, p, batch).unwrap();
        for i in 0..6 {
            let row = &tape.value(out)[i * 5..(i + 1) * 5];
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn encode_is_batch_permutation_equivariant() {
        let mut r = rng(4);
        let mlp = Mlp::new(&[6, 10, 4], &mut r);
        let prompt = PromptVector::zeros(1, 2);
        let rows = vec![
            vec![0.3, -0.2, 0.9, 0.1],
            vec![-0.5, 0.7, 0.2, -0.8],
            vec![0.4, 0.4, -0.1, 0.6],
        ];
        let run = |order: &[usize]| {
            let batch_rows: Vec<Vec<f32>> = order.iter().map(|&i| rows[i].clone()).collect();
            let mut tape = Tape::new();
            let enc = mlp.bind(&mut tape);
            let p = tape.leaf(&prompt.values);
            let batch = tape.constant(&Tensor::from_rows(&batch_rows).unwrap());
            let out = encode_image(&mut tape, &enc, p, batch).unwrap();
            tape.to_tensor(out)
        };
        let fwd = run(&[0, 1, 2]);
        let rev = run(&[2, 0, 1]);
        for (i, &src) in [2usize, 0, 1].iter().enumerate() {
            assert_eq!(rev.row(i), fwd.row(src));
        }
    }

    #[test]
    fn text_features_normalize_rows() {
        let table = TextEmbeddingTable {
            rows: Tensor::from_rows(&[vec![3.0, 4.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap(),
        };
        let w = teacher_text_features_value(&table).unwrap();
        assert_eq!(w.rows.row(0), &[0.6, 0.8, 0.0]);
        assert_eq!(w.rows.row(1), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn unit_norm_table_is_returned_unchanged() {
        let table = TextEmbeddingTable {
            rows: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        };
        let w = teacher_text_features_value(&table).unwrap();
        assert_eq!(w.rows.data, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_text_row_errors() {
        let table = TextEmbeddingTable {
            rows: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap(),
        };
        assert!(matches!(
            teacher_text_features_value(&table),
            Err(Error::DegenerateFeature { row: 1, .. })
        ));
    }

    #[test]
    fn single_class_softmax_is_one() {
        let table =
            TextEmbeddingTable { rows: Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap() };
        let w = teacher_text_features_value(&table).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(&Tensor::from_rows(&[vec![0.6, 0.8]]).unwrap());
        let wt = tape.constant(&w.rows);
        let wtt = tape.transpose(wt).unwrap();
        let logits = tape.matmul(f, wtt).unwrap();
        let probs = tape.row_softmax(logits, 1.0).unwrap();
        assert_eq!(tape.value(probs), &[1.0]);
    }

    #[test]
    fn identity_projector_is_identity() {
        let proj = Projector { map: Affine::identity(3) };
        let mut tape = Tape::new();
        let p = proj.map.bind(&mut tape);
        let x = tape.constant(&Tensor::from_rows(&[vec![0.1, -0.4, 2.0]]).unwrap());
        let y = project(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y), &[0.1, -0.4, 2.0]);
    }

    #[test]
    fn zero_weight_projector_yields_bias_rows() {
        let mut proj = Projector { map: Affine::identity(2) };
        proj.map.weight.data.iter_mut().for_each(|v| *v = 0.0);
        proj.map.bias.data = vec![0.5, -1.5];
        let mut tape = Tape::new();
        let p = proj.map.bind(&mut tape);
        let x = tape.constant(&Tensor::from_rows(&[vec![3.0, 4.0], vec![-1.0, 2.0]]).unwrap());
        let y = project(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y), &[0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn rectangular_projection_worked_example() {
        // weight rows are [out][in] in the example; ours is [in][out].
        let proj = Projector {
            map: Affine {
                weight: Tensor::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]]).unwrap()
                    .requires_grad(),
                bias: Tensor::zeros(vec![3]).requires_grad(),
            },
        };
        let mut tape = Tape::new();
        let p = proj.map.bind(&mut tape);
        let x = tape.constant(&Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let y = project(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn projector_width_mismatch_is_dimension_error() {
        let mut r = rng(5);
        let proj = Projector::kaiming(4, 6, &mut r);
        let mut tape = Tape::new();
        let p = proj.map.bind(&mut tape);
        let x = tape.constant(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        assert!(matches!(project(&mut tape, &p, x), Err(Error::Dimension { .. })));
    }
}
