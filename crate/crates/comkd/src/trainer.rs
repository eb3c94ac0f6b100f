//! The two-stage pipeline: teacher pretraining on labeled data, then
//! student distillation on unlabeled data, plus the ablation grid runner.
//!
//! The teacher is trained with cross-entropy over its own class-text table
//! and then frozen. The student reuses the teacher's normalized text
//! features, trains only its image branch (encoder, prompt, projector,
//! attention maps, gate), and minimizes
//! `l_final = l_stu + lambda_align * l_align` per minibatch. Teacher
//! features and logits are computed once per run without gradient; batch
//! statistics for alignment are per-minibatch.
//!
//! Everything is bit-deterministic per `(config, data)`: model init and
//! batch shuffling derive from the config seed on separate RNG streams.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AlignKind, KdKind, TrainConfig};
use crate::data::Dataset;
use crate::eduattn::{cross_attention, fuse, AttentionParams};
use crate::encoders::{
    encode_image, project, teacher_text_features, teacher_text_features_value, Mlp, MlpVars,
    Projector, PromptVector, TextEmbeddingTable, TextFeatureMatrix,
};
use crate::evaluator::Metrics;
use crate::ifalign::{align_loss_on_tape, select_align_term};
use crate::losses::{clip_logits_on_tape, cross_entropy_on_tape, kd_kl_on_tape, l1_logit_on_tape, mse_logit_on_tape};
use crate::tensor::{fingerprint, sgd_step, Tape, Tensor, VarId};
use crate::{Error, Result};

// RNG streams per stage, so pretraining and distillation draw independently
// of each other under one seed.
const STREAM_TEACHER_INIT: u64 = 10;
const STREAM_TEACHER_BATCHES: u64 = 11;
const STREAM_STUDENT_INIT: u64 = 20;
const STREAM_STUDENT_BATCHES: u64 = 21;

fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Frozen after pretraining: image encoder, prompt, and class-text table.
#[derive(Debug, Clone)]
pub struct TeacherModel {
    pub encoder: Mlp,
    pub prompt: PromptVector,
    pub text_table: TextEmbeddingTable,
    pub input_dim: usize,
    pub feature_dim: usize,
    pub tau: f32,
}

impl TeacherModel {
    pub fn init(cfg: &TrainConfig, class_count: usize, rng: &mut ChaCha8Rng) -> TeacherModel {
        let prompt_dim = cfg.prompt_dim();
        TeacherModel {
            encoder: Mlp::new(
                &[cfg.input_dim + prompt_dim, cfg.teacher_hidden, cfg.teacher_dim],
                rng,
            ),
            prompt: PromptVector::zeros(cfg.prompt_len, cfg.prompt_width),
            text_table: TextEmbeddingTable::gaussian(class_count, cfg.teacher_dim, rng),
            input_dim: cfg.input_dim,
            feature_dim: cfg.teacher_dim,
            tau: cfg.tau,
        }
    }

    pub fn class_count(&self) -> usize {
        self.text_table.class_count()
    }

    /// All trainable tensors in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.encoder.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.prompt.values);
        out.push(&mut self.text_table.rows);
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.encoder.layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.push(&self.prompt.values);
        out.push(&self.text_table.rows);
        out
    }

    /// Order-sensitive FNV fingerprint of all parameter bytes.
    pub fn fingerprint(&self) -> u64 {
        fingerprint(self.params())
    }

    /// Class logits for a raw input batch (inference path).
    pub fn infer_logits(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let enc = self.encoder.bind_frozen(&mut tape);
        let prompt = tape.constant(&self.prompt.values);
        let batch = tape.constant(inputs);
        let features = encode_image(&mut tape, &enc, prompt, batch)?;
        let table = tape.constant(&self.text_table.rows);
        let text = teacher_text_features(&mut tape, table)?;
        let logits = clip_logits_on_tape(&mut tape, features, text)?;
        Ok(tape.to_tensor(logits))
    }
}

/// The distilled model: image branch plus a frozen copy of the teacher's
/// normalized text features.
#[derive(Debug, Clone)]
pub struct StudentModel {
    pub encoder: Mlp,
    pub prompt: PromptVector,
    pub projector: Projector,
    pub attention: AttentionParams,
    pub text_features: TextFeatureMatrix,
    pub use_eduattn: bool,
    pub input_dim: usize,
    pub feature_dim: usize,
    pub tau: f32,
}

impl StudentModel {
    pub fn init(
        cfg: &TrainConfig,
        text_features: TextFeatureMatrix,
        rng: &mut ChaCha8Rng,
    ) -> StudentModel {
        let prompt_dim = cfg.prompt_dim();
        StudentModel {
            encoder: Mlp::new(
                &[cfg.input_dim + prompt_dim, cfg.student_hidden, cfg.student_dim],
                rng,
            ),
            prompt: PromptVector::zeros(cfg.prompt_len, cfg.prompt_width),
            projector: Projector::kaiming(cfg.student_dim, cfg.teacher_dim, rng),
            attention: AttentionParams::new(cfg.teacher_dim, cfg.attn_dim, cfg.attn_c, rng),
            text_features,
            use_eduattn: cfg.eduattn,
            input_dim: cfg.input_dim,
            feature_dim: cfg.teacher_dim,
            tau: cfg.tau,
        }
    }

    pub fn class_count(&self) -> usize {
        self.text_features.class_count()
    }

    /// All trainable tensors in a fixed order (text features are frozen and
    /// excluded).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.encoder.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.prompt.values);
        out.push(&mut self.projector.map.weight);
        out.push(&mut self.projector.map.bias);
        for a in [&mut self.attention.query, &mut self.attention.key, &mut self.attention.value] {
            out.push(&mut a.weight);
            out.push(&mut a.bias);
        }
        out.push(&mut self.attention.alpha);
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.encoder.layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.push(&self.prompt.values);
        out.push(&self.projector.map.weight);
        out.push(&self.projector.map.bias);
        for a in [&self.attention.query, &self.attention.key, &self.attention.value] {
            out.push(&a.weight);
            out.push(&a.bias);
        }
        out.push(&self.attention.alpha);
        out
    }

    pub fn fingerprint(&self) -> u64 {
        let mut all = self.params();
        all.push(&self.text_features.rows);
        fingerprint(all)
    }

    /// Normalized fused student features for a raw input batch.
    pub fn infer_features(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward_features(&mut tape, inputs, false)?;
        Ok(tape.to_tensor(out))
    }

    /// Class logits for a raw input batch (inference path; the attention
    /// module stays active exactly as trained).
    pub fn infer_logits(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let features = self.forward_features(&mut tape, inputs, false)?;
        let text = tape.constant(&self.text_features.rows);
        let logits = clip_logits_on_tape(&mut tape, features, text)?;
        Ok(tape.to_tensor(logits))
    }

    fn forward_features(&self, tape: &mut Tape, inputs: &Tensor, trainable: bool) -> Result<VarId> {
        let enc = if trainable { self.encoder.bind(tape) } else { self.encoder.bind_frozen(tape) };
        let prompt =
            if trainable { tape.leaf(&self.prompt.values) } else { tape.constant(&self.prompt.values) };
        let proj =
            if trainable { self.projector.map.bind(tape) } else { self.projector.map.bind_frozen(tape) };
        let batch = tape.constant(inputs);
        let encoded = encode_image(tape, &enc, prompt, batch)?;
        let projected = project(tape, &proj, encoded)?;
        let fused = if self.use_eduattn {
            let attn =
                if trainable { self.attention.bind(tape) } else { self.attention.bind_frozen(tape) };
            let text = tape.constant(&self.text_features.rows);
            let attended = cross_attention(tape, &attn, projected, text)?;
            fuse(tape, &attn, projected, attended)?
        } else {
            projected
        };
        tape.l2_normalize_rows(fused)
    }
}

/// One epoch's mean losses plus a coarse accuracy signal: label accuracy
/// during pretraining, teacher-agreement during distillation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_stu: f32,
    pub l_align: f32,
    pub l_final: f32,
    pub train_acc: f64,
}

/// Per-epoch training trace of one run.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    pub wall_clock_secs: f64,
}

impl RunLog {
    /// Bit-exact view of the loss trajectory, for determinism assertions.
    pub fn loss_bits(&self) -> Vec<(u32, u32, u32)> {
        self.records
            .iter()
            .map(|r| (r.l_stu.to_bits(), r.l_align.to_bits(), r.l_final.to_bits()))
            .collect()
    }

    pub fn final_loss(&self) -> Option<f32> {
        self.records.last().map(|r| r.l_final)
    }
}

fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Stage one: trains encoder, prompt, and text table with SGD on
/// cross-entropy; the caller freezes the result by construction (nothing
/// mutates a teacher afterwards).
pub fn pretrain_teacher(cfg: &TrainConfig, labeled: &Dataset) -> Result<(TeacherModel, RunLog)> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::Parameter("pretrain_teacher: empty dataset".into()));
    }
    if labeled.dim() != cfg.input_dim {
        return Err(Error::Config(format!(
            "dataset dim {} does not match config input_dim {}",
            labeled.dim(),
            cfg.input_dim
        )));
    }
    let labels = labeled.labels()?;
    if !labeled.covers_all_classes() {
        return Err(Error::Parameter(
            "pretrain_teacher: every class needs at least one labeled sample".into(),
        ));
    }

    let start = Instant::now();
    let mut init_rng = stage_rng(cfg.seed, STREAM_TEACHER_INIT);
    let mut teacher = TeacherModel::init(cfg, labeled.class_count, &mut init_rng);
    let mut batch_rng = stage_rng(cfg.seed, STREAM_TEACHER_BATCHES);
    let mut records = Vec::with_capacity(cfg.epochs_teacher);

    for epoch in 0..cfg.epochs_teacher {
        let mut loss_sum = 0.0f64;
        let mut hit = 0usize;
        let batches = epoch_batches(labeled.len(), cfg.batch_size, &mut batch_rng);
        let n_batches = batches.len();
        for batch_idx in batches {
            let inputs = labeled.inputs.gather_rows(&batch_idx)?;
            let batch_labels: Vec<usize> = batch_idx.iter().map(|&i| labels[i]).collect();

            let mut tape = Tape::new();
            let (loss, logits, vars) =
                teacher_batch_loss(&mut tape, &teacher, cfg.tau, &inputs, &batch_labels)?;
            tape.backward(loss)?;

            // batch accuracy before the update
            let lv = tape.value(logits);
            let n = teacher.class_count();
            for (r, &label) in batch_labels.iter().enumerate() {
                let row = &lv[r * n..(r + 1) * n];
                let mut best = 0;
                for c in 1..n {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                if best == label {
                    hit += 1;
                }
            }
            loss_sum += tape.value(loss)[0] as f64;

            for (var, param) in vars.grad_ids().into_iter().zip(teacher.params_mut()) {
                tape.accumulate_grad_into(var, param)?;
            }
            sgd_step(&mut teacher.params_mut(), cfg.lr_teacher)?;
        }
        let mean_loss = (loss_sum / n_batches as f64) as f32;
        records.push(EpochRecord {
            epoch,
            l_stu: mean_loss,
            l_align: 0.0,
            l_final: mean_loss,
            train_acc: 100.0 * hit as f64 / labeled.len() as f64,
        });
    }

    let log = RunLog { seed: cfg.seed, records, wall_clock_secs: start.elapsed().as_secs_f64() };
    Ok((teacher, log))
}

/// Tape bindings of one student training step.
pub struct StudentStepVars {
    pub enc: MlpVars,
    pub prompt: VarId,
    pub projector: crate::encoders::AffineVars,
    pub attn: Option<crate::eduattn::AttentionVars>,
}

impl StudentStepVars {
    /// Bound parameter ids, aligned with the prefix of
    /// [`StudentModel::params_mut`] (attention ids absent when unbound).
    pub fn grad_ids(&self) -> Vec<VarId> {
        let mut out = Vec::new();
        for l in &self.enc.layers {
            out.push(l.weight);
            out.push(l.bias);
        }
        out.push(self.prompt);
        out.push(self.projector.weight);
        out.push(self.projector.bias);
        if let Some(a) = &self.attn {
            for v in [a.query, a.key, a.value] {
                out.push(v.weight);
                out.push(v.bias);
            }
            out.push(a.alpha);
        }
        out
    }
}

/// The recorded losses of one student batch.
pub struct StudentBatchLoss {
    pub l_final: VarId,
    pub l_stu: VarId,
    pub l_align: Option<VarId>,
    pub logits: VarId,
    pub vars: StudentStepVars,
}

/// Records one full student training step on `tape`: encode -> project ->
/// (alignment statistics) -> attention fusion -> normalize -> logits ->
/// `l_stu + lambda_align * l_align`. Teacher-side inputs enter as
/// constants. This is the exact loss `distill_student` descends.
pub fn student_batch_loss(
    tape: &mut Tape,
    student: &StudentModel,
    cfg: &TrainConfig,
    inputs: &Tensor,
    teacher_features: &Tensor,
    teacher_logits: &Tensor,
) -> Result<StudentBatchLoss> {
    let vars = StudentStepVars {
        enc: student.encoder.bind(tape),
        prompt: tape.leaf(&student.prompt.values),
        projector: student.projector.map.bind(tape),
        attn: if cfg.eduattn { Some(student.attention.bind(tape)) } else { None },
    };
    let batch = tape.constant(inputs);
    let encoded = encode_image(tape, &vars.enc, vars.prompt, batch)?;
    let projected = project(tape, &vars.projector, encoded)?;

    let teacher_batch = tape.constant(teacher_features);
    let align = if cfg.ifalign {
        let parts = align_loss_on_tape(tape, projected, teacher_batch)?;
        Some(select_align_term(&parts, cfg.align))
    } else {
        None
    };

    let fused = if let Some(attn) = &vars.attn {
        let w = tape.constant(&student.text_features.rows);
        let attended = cross_attention(tape, attn, projected, w)?;
        fuse(tape, attn, projected, attended)?
    } else {
        projected
    };
    let normalized = tape.l2_normalize_rows(fused)?;
    let w = tape.constant(&student.text_features.rows);
    let logits = clip_logits_on_tape(tape, normalized, w)?;
    let q_t = tape.constant(teacher_logits);

    let l_stu = match cfg.kd_loss {
        KdKind::Kl => kd_kl_on_tape(tape, q_t, logits, cfg.tau)?,
        KdKind::L1 => l1_logit_on_tape(tape, q_t, logits)?,
        KdKind::Mse => mse_logit_on_tape(tape, q_t, logits)?,
    };
    let l_final = match align {
        Some(a) => {
            let weighted = tape.scale(a, cfg.lambda_align);
            tape.add(l_stu, weighted)?
        }
        None => l_stu,
    };
    Ok(StudentBatchLoss { l_final, l_stu, l_align: align, logits, vars })
}

/// Tape bindings of one teacher training step.
pub struct TeacherStepVars {
    pub enc: MlpVars,
    pub prompt: VarId,
    pub table: VarId,
}

impl TeacherStepVars {
    pub fn grad_ids(&self) -> Vec<VarId> {
        let mut out = Vec::new();
        for l in &self.enc.layers {
            out.push(l.weight);
            out.push(l.bias);
        }
        out.push(self.prompt);
        out.push(self.table);
        out
    }
}

/// Records one teacher pretraining step: encode -> normalized text table ->
/// logits -> cross-entropy. This is the exact loss `pretrain_teacher`
/// descends.
pub fn teacher_batch_loss(
    tape: &mut Tape,
    teacher: &TeacherModel,
    tau: f32,
    inputs: &Tensor,
    labels: &[usize],
) -> Result<(VarId, VarId, TeacherStepVars)> {
    let vars = TeacherStepVars {
        enc: teacher.encoder.bind(tape),
        prompt: tape.leaf(&teacher.prompt.values),
        table: tape.leaf(&teacher.text_table.rows),
    };
    let batch = tape.constant(inputs);
    let features = encode_image(tape, &vars.enc, vars.prompt, batch)?;
    let text = teacher_text_features(tape, vars.table)?;
    let logits = clip_logits_on_tape(tape, features, text)?;
    let loss = cross_entropy_on_tape(tape, logits, labels, tau)?;
    Ok((loss, logits, vars))
}

/// Stage two: distills a student from a frozen teacher on unlabeled inputs.
///
/// Per batch the student runs encode -> project -> (alignment statistics)
/// -> attention fusion -> normalize -> logits, and backward flows through
/// the student side only. Labels on the dataset, if any, are ignored.
pub fn distill_student(
    cfg: &TrainConfig,
    teacher: &TeacherModel,
    unlabeled: &Dataset,
) -> Result<(StudentModel, RunLog)> {
    cfg.validate()?;
    if teacher.input_dim != cfg.input_dim || teacher.feature_dim != cfg.teacher_dim {
        return Err(Error::Config(format!(
            "teacher dims (input {}, feature {}) do not match config (input {}, teacher_dim {})",
            teacher.input_dim, teacher.feature_dim, cfg.input_dim, cfg.teacher_dim
        )));
    }
    if cfg.eduattn && cfg.attn_dim != cfg.teacher_dim {
        return Err(Error::Config(format!(
            "attention fusion needs attn_dim == teacher_dim, got {} vs {}",
            cfg.attn_dim, cfg.teacher_dim
        )));
    }
    if unlabeled.dim() != cfg.input_dim {
        return Err(Error::Config(format!(
            "dataset dim {} does not match config input_dim {}",
            unlabeled.dim(),
            cfg.input_dim
        )));
    }
    if unlabeled.is_empty() {
        return Err(Error::Parameter("distill_student: empty dataset".into()));
    }

    let start = Instant::now();
    let data = unlabeled.without_labels();

    // Teacher pass over the whole set, once, without gradient.
    let text = teacher_text_features_value(&teacher.text_table)?;
    let teacher_features = {
        let mut tape = Tape::new();
        let enc = teacher.encoder.bind_frozen(&mut tape);
        let prompt = tape.constant(&teacher.prompt.values);
        let batch = tape.constant(&data.inputs);
        let f = encode_image(&mut tape, &enc, prompt, batch)?;
        tape.to_tensor(f)
    };
    let teacher_logits = {
        let mut tape = Tape::new();
        let f = tape.constant(&teacher_features);
        let w = tape.constant(&text.rows);
        let l = clip_logits_on_tape(&mut tape, f, w)?;
        tape.to_tensor(l)
    };

    let mut init_rng = stage_rng(cfg.seed, STREAM_STUDENT_INIT);
    let mut student = StudentModel::init(cfg, text, &mut init_rng);
    let mut batch_rng = stage_rng(cfg.seed, STREAM_STUDENT_BATCHES);
    let mut records = Vec::with_capacity(cfg.epochs_student);
    let n_classes = teacher.class_count();

    for epoch in 0..cfg.epochs_student {
        let mut stu_sum = 0.0f64;
        let mut align_sum = 0.0f64;
        let mut final_sum = 0.0f64;
        let mut agree = 0usize;
        let batches = epoch_batches(data.len(), cfg.batch_size, &mut batch_rng);
        let n_batches = batches.len();

        for batch_idx in batches {
            let inputs = data.inputs.gather_rows(&batch_idx)?;
            let t_feat = teacher_features.gather_rows(&batch_idx)?;
            let t_logits = teacher_logits.gather_rows(&batch_idx)?;

            let mut tape = Tape::new();
            let step = student_batch_loss(&mut tape, &student, cfg, &inputs, &t_feat, &t_logits)?;
            tape.backward(step.l_final)?;

            stu_sum += tape.value(step.l_stu)[0] as f64;
            if let Some(a) = step.l_align {
                align_sum += tape.value(a)[0] as f64;
            }
            final_sum += tape.value(step.l_final)[0] as f64;

            // argmax agreement with the teacher, before the update
            let sv = tape.value(step.logits);
            for (r, _) in batch_idx.iter().enumerate() {
                let srow = &sv[r * n_classes..(r + 1) * n_classes];
                let trow = t_logits.row(r);
                let arg = |row: &[f32]| {
                    let mut best = 0;
                    for c in 1..row.len() {
                        if row[c] > row[best] {
                            best = c;
                        }
                    }
                    best
                };
                if arg(srow) == arg(trow) {
                    agree += 1;
                }
            }

            let ids = step.vars.grad_ids();
            {
                let mut params = student.params_mut();
                // when attention is ablated its params are unbound; keep
                // only the bound prefix
                params.truncate(ids.len());
                for (var, param) in ids.into_iter().zip(params.iter_mut()) {
                    tape.accumulate_grad_into(var, param)?;
                }
            }
            sgd_step(&mut student.params_mut(), cfg.lr_student)?;
        }

        records.push(EpochRecord {
            epoch,
            l_stu: (stu_sum / n_batches as f64) as f32,
            l_align: (align_sum / n_batches as f64) as f32,
            l_final: (final_sum / n_batches as f64) as f32,
            train_acc: 100.0 * agree as f64 / data.len() as f64,
        });
    }

    let log = RunLog { seed: cfg.seed, records, wall_clock_secs: start.elapsed().as_secs_f64() };
    Ok((student, log))
}

/// Named ablation presets mirroring the module-removal grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationPreset {
    Full,
    NoIfalign,
    NoEduattn,
    KlOnly,
}

impl AblationPreset {
    pub fn label(&self) -> &'static str {
        match self {
            AblationPreset::Full => "full",
            AblationPreset::NoIfalign => "no-ifalign",
            AblationPreset::NoEduattn => "no-eduattn",
            AblationPreset::KlOnly => "kl-only",
        }
    }

    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            AblationPreset::Full => {
                c.ifalign = true;
                c.eduattn = true;
            }
            AblationPreset::NoIfalign => {
                c.ifalign = false;
                c.eduattn = true;
            }
            AblationPreset::NoEduattn => {
                c.ifalign = true;
                c.eduattn = false;
            }
            AblationPreset::KlOnly => {
                c.ifalign = false;
                c.eduattn = false;
            }
        }
        c
    }
}

impl std::str::FromStr for AblationPreset {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(AblationPreset::Full),
            "no-ifalign" => Ok(AblationPreset::NoIfalign),
            "no-eduattn" => Ok(AblationPreset::NoEduattn),
            "kl-only" => Ok(AblationPreset::KlOnly),
            other => Err(format!(
                "unknown ablation `{}` (expected full|no-ifalign|no-eduattn|kl-only)",
                other
            )),
        }
    }
}

/// One cell of an ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationCell {
    Preset(AblationPreset),
    Align(AlignKind),
    Kd(KdKind),
}

impl AblationCell {
    pub fn label(&self) -> String {
        match self {
            AblationCell::Preset(p) => p.label().to_string(),
            AblationCell::Align(a) => format!("align={}", a),
            AblationCell::Kd(k) => format!("kd={}", k),
        }
    }

    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        match self {
            AblationCell::Preset(p) => p.apply(cfg),
            AblationCell::Align(a) => {
                let mut c = cfg.clone();
                c.ifalign = true;
                c.align = *a;
                c
            }
            AblationCell::Kd(k) => {
                let mut c = cfg.clone();
                c.kd_loss = *k;
                c
            }
        }
    }

    /// The three standard grids: `modules`, `align`, `kd`.
    pub fn grid(name: &str) -> Result<Vec<AblationCell>> {
        match name {
            "modules" => Ok(vec![
                AblationCell::Preset(AblationPreset::Full),
                AblationCell::Preset(AblationPreset::NoIfalign),
                AblationCell::Preset(AblationPreset::NoEduattn),
                AblationCell::Preset(AblationPreset::KlOnly),
            ]),
            "align" => Ok(vec![
                AblationCell::Align(AlignKind::Mean),
                AblationCell::Align(AlignKind::Var),
                AblationCell::Align(AlignKind::Both),
            ]),
            "kd" => Ok(vec![
                AblationCell::Kd(KdKind::L1),
                AblationCell::Kd(KdKind::Mse),
                AblationCell::Kd(KdKind::Kl),
            ]),
            other => Err(Error::Config(format!(
                "unknown ablation grid `{}` (expected modules|align|kd)",
                other
            ))),
        }
    }
}

/// Result row of one ablation cell.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub metrics: Metrics,
}

/// Trains one student per grid cell from the same seed and teacher, then
/// evaluates base-to-novel metrics on the test set.
pub fn run_ablation(
    cfg: &TrainConfig,
    teacher: &TeacherModel,
    distill_data: &Dataset,
    test_data: &Dataset,
    split: &crate::evaluator::SplitSpec,
    cells: &[AblationCell],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let cell_cfg = cell.apply(cfg);
        let (student, _log) = distill_student(&cell_cfg, teacher, distill_data)?;
        let metrics = crate::evaluator::evaluate_base_novel(&student, test_data, split)?;
        rows.push(AblationRow { label: cell.label(), metrics });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, GeneratorSpec};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            input_dim: 8,
            student_dim: 6,
            teacher_dim: 10,
            attn_dim: 10,
            attn_c: 10,
            teacher_hidden: 24,
            student_hidden: 12,
            epochs_teacher: 40,
            epochs_student: 10,
            batch_size: 16,
            prompt_len: 2,
            prompt_width: 2,
            ..TrainConfig::default()
        }
    }

    fn tiny_data(seed: u64) -> Dataset {
        gen_synthetic(&GeneratorSpec {
            seed,
            class_count: 3,
            dim: 8,
            per_class: 16,
            sigma: 0.8,
            shift: 0.0,
        })
        .unwrap()
    }

    #[test]
    fn zero_epochs_returns_untouched_init() {
        let mut cfg = tiny_cfg();
        cfg.epochs_teacher = 0;
        let data = tiny_data(1);
        let (teacher, log) = pretrain_teacher(&cfg, &data).unwrap();
        let mut rng = stage_rng(cfg.seed, STREAM_TEACHER_INIT);
        let fresh = TeacherModel::init(&cfg, data.class_count, &mut rng);
        assert_eq!(teacher.fingerprint(), fresh.fingerprint());
        assert!(log.records.is_empty());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let cfg = tiny_cfg();
        let data = tiny_data(2);
        let (t1, l1) = pretrain_teacher(&cfg, &data).unwrap();
        let (t2, l2) = pretrain_teacher(&cfg, &data).unwrap();
        assert_eq!(t1.fingerprint(), t2.fingerprint());
        assert_eq!(l1.loss_bits(), l2.loss_bits());
    }

    #[test]
    fn two_well_separated_classes_reach_high_accuracy() {
        // 6-sigma separation: means on the radius-3 sphere, sigma = 1 means
        // opposite poles sit 6 sigma apart; with 2 classes the generator's
        // random means may be closer, so shrink sigma to keep >= 6 sigma.
        let mut cfg = tiny_cfg();
        cfg.epochs_teacher = 200;
        cfg.input_dim = 8;
        let data = gen_synthetic(&GeneratorSpec {
            seed: 3,
            class_count: 2,
            dim: 8,
            per_class: 32,
            sigma: 0.5,
            shift: 0.0,
        })
        .unwrap();
        let (_, log) = pretrain_teacher(&cfg, &data).unwrap();
        let acc = log.records.last().unwrap().train_acc;
        assert!(acc >= 99.0, "teacher should fit separable data, got {}", acc);
    }

    #[test]
    fn pretrain_rejects_unlabeled_or_empty() {
        let cfg = tiny_cfg();
        let data = tiny_data(5).without_labels();
        assert!(pretrain_teacher(&cfg, &data).is_err());
    }

    #[test]
    fn distillation_keeps_teacher_frozen_and_gradient_free() {
        let mut cfg = tiny_cfg();
        cfg.epochs_teacher = 10;
        cfg.epochs_student = 4;
        let data = tiny_data(7);
        let (teacher, _) = pretrain_teacher(&cfg, &data).unwrap();
        let before = teacher.fingerprint();
        let (student, log) = distill_student(&cfg, &teacher, &data).unwrap();
        assert_eq!(teacher.fingerprint(), before);
        for p in teacher.params() {
            assert!(p.grad.as_ref().unwrap().iter().all(|g| *g == 0.0));
        }
        assert_eq!(log.records.len(), cfg.epochs_student);
        assert_eq!(student.class_count(), 3);
    }

    #[test]
    fn distillation_is_deterministic() {
        let mut cfg = tiny_cfg();
        cfg.epochs_teacher = 10;
        cfg.epochs_student = 5;
        let data = tiny_data(9);
        let (teacher, _) = pretrain_teacher(&cfg, &data).unwrap();
        let (s1, l1) = distill_student(&cfg, &teacher, &data).unwrap();
        let (s2, l2) = distill_student(&cfg, &teacher, &data).unwrap();
        assert_eq!(s1.fingerprint(), s2.fingerprint());
        assert_eq!(l1.loss_bits(), l2.loss_bits());
    }

    #[test]
    fn kl_only_flags_equal_preset_trajectory_bitwise() {
        let mut cfg = tiny_cfg();
        cfg.epochs_teacher = 8;
        cfg.epochs_student = 4;
        let data = tiny_data(11);
        let (teacher, _) = pretrain_teacher(&cfg, &data).unwrap();

        let mut flags_off = cfg.clone();
        flags_off.ifalign = false;
        flags_off.eduattn = false;
        let (_, l1) = distill_student(&flags_off, &teacher, &data).unwrap();
        let preset = AblationPreset::KlOnly.apply(&cfg);
        let (_, l2) = distill_student(&preset, &teacher, &data).unwrap();
        assert_eq!(l1.loss_bits(), l2.loss_bits());
    }

    #[test]
    fn lambda_zero_with_attention_off_is_pure_kd() {
        let mut cfg = tiny_cfg();
        cfg.epochs_teacher = 8;
        cfg.epochs_student = 3;
        cfg.eduattn = false;
        cfg.lambda_align = 0.0;
        let data = tiny_data(13);
        let (teacher, _) = pretrain_teacher(&cfg, &data).unwrap();
        let (_, log) = distill_student(&cfg, &teacher, &data).unwrap();
        let mut kl_cfg = cfg.clone();
        kl_cfg.ifalign = false;
        let (_, kl_log) = distill_student(&kl_cfg, &teacher, &data).unwrap();
        for (a, b) in log.records.iter().zip(&kl_log.records) {
            assert_eq!(a.l_final.to_bits(), b.l_stu.to_bits());
            assert_eq!(a.l_final.to_bits(), b.l_final.to_bits());
        }
    }

    #[test]
    fn gradient_reaches_prompt_and_encoder() {
        let mut cfg = tiny_cfg();
        cfg.epochs_teacher = 6;
        cfg.epochs_student = 1;
        let data = tiny_data(17);
        let (teacher, _) = pretrain_teacher(&cfg, &data).unwrap();
        let mut rng = stage_rng(cfg.seed, STREAM_STUDENT_INIT);
        let text = teacher_text_features_value(&teacher.text_table).unwrap();
        let fresh = StudentModel::init(&cfg, text, &mut rng);
        let (student, _) = distill_student(&cfg, &teacher, &data).unwrap();
        // prompt started at zero; any gradient moves it
        let prompt_moved =
            student.prompt.values.data.iter().any(|v| *v != 0.0);
        let encoder_moved = student
            .encoder
            .layers
            .iter()
            .zip(&fresh.encoder.layers)
            .any(|(a, b)| a.weight.data != b.weight.data);
        assert!(prompt_moved, "prompt should receive gradient");
        assert!(encoder_moved, "encoder should receive gradient");
    }

    #[test]
    fn ablation_grids_have_expected_row_counts() {
        assert_eq!(AblationCell::grid("modules").unwrap().len(), 4);
        assert_eq!(AblationCell::grid("align").unwrap().len(), 3);
        assert_eq!(AblationCell::grid("kd").unwrap().len(), 3);
        assert!(AblationCell::grid("nope").is_err());
    }

    #[test]
    fn dim_mismatch_is_config_error() {
        let cfg = tiny_cfg();
        let data = tiny_data(19);
        let (teacher, _) = pretrain_teacher(&cfg, &data).unwrap();
        let mut bad = cfg.clone();
        bad.teacher_dim = 12;
        bad.attn_dim = 12;
        assert!(matches!(
            distill_student(&bad, &teacher, &data),
            Err(Error::Config(_))
        ));
    }
}
