//! Run configuration: typed fields, a line-oriented `key = value` parser,
//! and the canonical text form embedded in checkpoints.
//!
//! Defaults (an empty config file is valid and yields exactly these):
//!
//! | key              | default | meaning                                      |
//! |------------------|---------|----------------------------------------------|
//! | `input_dim`      | 32      | raw input width k                            |
//! | `student_dim`    | 16      | student feature width d_s                    |
//! | `teacher_dim`    | 32      | teacher feature width d_t                    |
//! | `attn_dim`       | = teacher_dim | attention projection width d_a         |
//! | `attn_c`         | = attn_dim | C in the attention 1/sqrt(C) scaling      |
//! | `teacher_hidden` | 128     | teacher MLP hidden width                     |
//! | `student_hidden` | 32      | student MLP hidden width                     |
//! | `tau`            | 1.0     | softmax temperature                          |
//! | `lr_teacher`     | 0.1     | teacher pretraining SGD step                 |
//! | `lr_student`     | 0.05    | student distillation SGD step                |
//! | `epochs_teacher` | 200     | teacher pretraining epochs                   |
//! | `epochs_student` | 60      | distillation epochs                          |
//! | `batch_size`     | 64      | minibatch size                               |
//! | `lambda_align`   | 1.0     | weight of the alignment loss in the total    |
//! | `seed`           | 1       | run seed (init + batch shuffling)            |
//! | `ifalign`        | true    | enable feature-statistics alignment          |
//! | `eduattn`        | true    | enable gated cross-attention fusion         |
//! | `kd_loss`        | kl      | logit refinement loss: `kl`, `l1`, `mse`     |
//! | `align`          | both    | alignment statistic: `mean`, `var`, `both`   |
//! | `prompt_len`     | 4       | number of prompt tokens                      |
//! | `prompt_width`   | = round(input_dim / 4) | width of each prompt token    |
//!
//! Unknown keys are hard errors so typos cannot silently fall back to
//! defaults.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::{Error, Result};

/// Which loss refines the distilled knowledge against teacher logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdKind {
    Kl,
    L1,
    Mse,
}

impl FromStr for KdKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "kl" => Ok(KdKind::Kl),
            "l1" => Ok(KdKind::L1),
            "mse" => Ok(KdKind::Mse),
            other => Err(format!("unknown kd loss `{}` (expected kl|l1|mse)", other)),
        }
    }
}

impl fmt::Display for KdKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KdKind::Kl => "kl",
            KdKind::L1 => "l1",
            KdKind::Mse => "mse",
        })
    }
}

/// Which feature statistics the alignment loss matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignKind {
    Mean,
    Var,
    Both,
}

impl FromStr for AlignKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mean" => Ok(AlignKind::Mean),
            "var" => Ok(AlignKind::Var),
            "both" => Ok(AlignKind::Both),
            other => Err(format!("unknown align kind `{}` (expected mean|var|both)", other)),
        }
    }
}

impl fmt::Display for AlignKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlignKind::Mean => "mean",
            AlignKind::Var => "var",
            AlignKind::Both => "both",
        })
    }
}

/// Everything a training run needs, teacher and student stages alike.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub input_dim: usize,
    pub student_dim: usize,
    pub teacher_dim: usize,
    pub attn_dim: usize,
    pub attn_c: usize,
    pub teacher_hidden: usize,
    pub student_hidden: usize,
    pub tau: f32,
    pub lr_teacher: f32,
    pub lr_student: f32,
    pub epochs_teacher: usize,
    pub epochs_student: usize,
    pub batch_size: usize,
    pub lambda_align: f32,
    pub seed: u64,
    pub ifalign: bool,
    pub eduattn: bool,
    pub kd_loss: KdKind,
    pub align: AlignKind,
    pub prompt_len: usize,
    pub prompt_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            input_dim: 32,
            student_dim: 16,
            teacher_dim: 32,
            attn_dim: 32,
            attn_c: 32,
            teacher_hidden: 128,
            student_hidden: 32,
            tau: 1.0,
            lr_teacher: 0.1,
            lr_student: 0.05,
            epochs_teacher: 200,
            epochs_student: 60,
            batch_size: 64,
            lambda_align: 1.0,
            seed: 1,
            ifalign: true,
            eduattn: true,
            kd_loss: KdKind::Kl,
            align: AlignKind::Both,
            prompt_len: 4,
            prompt_width: 8,
        }
    }
}

impl TrainConfig {
    /// Total width of the learnable prompt vector.
    pub fn prompt_dim(&self) -> usize {
        self.prompt_len * self.prompt_width
    }

    /// Default prompt token width for a given input width.
    pub fn default_prompt_width(input_dim: usize) -> usize {
        ((input_dim as f64 / 4.0).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive_dims = [
            ("input_dim", self.input_dim),
            ("student_dim", self.student_dim),
            ("teacher_dim", self.teacher_dim),
            ("attn_dim", self.attn_dim),
            ("attn_c", self.attn_c),
            ("teacher_hidden", self.teacher_hidden),
            ("student_hidden", self.student_hidden),
            ("batch_size", self.batch_size),
            ("prompt_len", self.prompt_len),
            ("prompt_width", self.prompt_width),
        ];
        for (name, v) in positive_dims {
            if v == 0 {
                return Err(Error::Config(format!("`{}` must be positive", name)));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("`tau` must be > 0, got {}", self.tau)));
        }
        if !(self.lr_teacher > 0.0) {
            return Err(Error::Config(format!("`lr_teacher` must be > 0, got {}", self.lr_teacher)));
        }
        if !(self.lr_student > 0.0) {
            return Err(Error::Config(format!("`lr_student` must be > 0, got {}", self.lr_student)));
        }
        if self.lambda_align < 0.0 {
            return Err(Error::Config(format!(
                "`lambda_align` must be >= 0, got {}",
                self.lambda_align
            )));
        }
        Ok(())
    }

    /// Canonical text form; parsing it back reproduces the config exactly,
    /// and serializing again reproduces the same bytes.
    pub fn to_config_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("input_dim", self.input_dim.to_string());
        kv("student_dim", self.student_dim.to_string());
        kv("teacher_dim", self.teacher_dim.to_string());
        kv("attn_dim", self.attn_dim.to_string());
        kv("attn_c", self.attn_c.to_string());
        kv("teacher_hidden", self.teacher_hidden.to_string());
        kv("student_hidden", self.student_hidden.to_string());
        kv("tau", format!("{:?}", self.tau));
        kv("lr_teacher", format!("{:?}", self.lr_teacher));
        kv("lr_student", format!("{:?}", self.lr_student));
        kv("epochs_teacher", self.epochs_teacher.to_string());
        kv("epochs_student", self.epochs_student.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lambda_align", format!("{:?}", self.lambda_align));
        kv("seed", self.seed.to_string());
        kv("ifalign", self.ifalign.to_string());
        kv("eduattn", self.eduattn.to_string());
        kv("kd_loss", self.kd_loss.to_string());
        kv("align", self.align.to_string());
        kv("prompt_len", self.prompt_len.to_string());
        kv("prompt_width", self.prompt_width.to_string());
        s
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize, ty: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| {
        Error::Config(format!("expected {} for `{}`, got `{}` (line {})", ty, key, value, line))
    })
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// unknown keys, bad values, and out-of-domain numbers are errors naming the
/// key and line.
pub fn parse_config_str(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut saw_prompt_width = false;
    let mut saw_attn_dim = false;
    let mut saw_attn_c = false;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "expected `key = value`, got `{}` (line {})",
                line, line_no
            )));
        };
        let key = key.trim();
        let value = value.trim();
        match key {
            "input_dim" => cfg.input_dim = parse_value(key, value, line_no, "positive integer")?,
            "student_dim" => cfg.student_dim = parse_value(key, value, line_no, "positive integer")?,
            "teacher_dim" => cfg.teacher_dim = parse_value(key, value, line_no, "positive integer")?,
            "attn_dim" => {
                cfg.attn_dim = parse_value(key, value, line_no, "positive integer")?;
                saw_attn_dim = true;
            }
            "attn_c" => {
                cfg.attn_c = parse_value(key, value, line_no, "positive integer")?;
                saw_attn_c = true;
            }
            "teacher_hidden" => cfg.teacher_hidden = parse_value(key, value, line_no, "positive integer")?,
            "student_hidden" => cfg.student_hidden = parse_value(key, value, line_no, "positive integer")?,
            "tau" => {
                cfg.tau = parse_value(key, value, line_no, "real")?;
                if !(cfg.tau > 0.0) {
                    return Err(Error::Config(format!(
                        "`tau` must be > 0, got {} (line {})",
                        value, line_no
                    )));
                }
            }
            "lr_teacher" => {
                cfg.lr_teacher = parse_value(key, value, line_no, "real")?;
                if !(cfg.lr_teacher > 0.0) {
                    return Err(Error::Config(format!(
                        "`lr_teacher` must be > 0, got {} (line {})",
                        value, line_no
                    )));
                }
            }
            "lr_student" => {
                cfg.lr_student = parse_value(key, value, line_no, "real")?;
                if !(cfg.lr_student > 0.0) {
                    return Err(Error::Config(format!(
                        "`lr_student` must be > 0, got {} (line {})",
                        value, line_no
                    )));
                }
            }
            "epochs_teacher" => cfg.epochs_teacher = parse_value(key, value, line_no, "integer")?,
            "epochs_student" => cfg.epochs_student = parse_value(key, value, line_no, "integer")?,
            "batch_size" => cfg.batch_size = parse_value(key, value, line_no, "positive integer")?,
            "lambda_align" => {
                cfg.lambda_align = parse_value(key, value, line_no, "real")?;
                if cfg.lambda_align < 0.0 {
                    return Err(Error::Config(format!(
                        "`lambda_align` must be >= 0, got {} (line {})",
                        value, line_no
                    )));
                }
            }
            "seed" => cfg.seed = parse_value(key, value, line_no, "integer")?,
            "ifalign" => cfg.ifalign = parse_value(key, value, line_no, "bool")?,
            "eduattn" => cfg.eduattn = parse_value(key, value, line_no, "bool")?,
            "kd_loss" => {
                cfg.kd_loss = value
                    .parse()
                    .map_err(|e| Error::Config(format!("{} (line {})", e, line_no)))?;
            }
            "align" => {
                cfg.align = value
                    .parse()
                    .map_err(|e| Error::Config(format!("{} (line {})", e, line_no)))?;
            }
            "prompt_len" => cfg.prompt_len = parse_value(key, value, line_no, "positive integer")?,
            "prompt_width" => {
                cfg.prompt_width = parse_value(key, value, line_no, "positive integer")?;
                saw_prompt_width = true;
            }
            other => {
                return Err(Error::Config(format!("unknown key `{}` (line {})", other, line_no)));
            }
        }
    }

    // Derived defaults follow the keys they derive from unless given
    // explicitly.
    if !saw_prompt_width {
        cfg.prompt_width = TrainConfig::default_prompt_width(cfg.input_dim);
    }
    if !saw_attn_dim {
        cfg.attn_dim = cfg.teacher_dim;
    }
    if !saw_attn_c {
        cfg.attn_c = cfg.attn_dim;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}
