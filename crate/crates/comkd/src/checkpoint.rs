//! Binary persistence for models and datasets.
//!
//! Wire format (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "CKD1"
//! version u32      1
//! count   u32      number of tensor entries
//! entry*  name_len u16, name utf-8, rank u8, dims u32 each, payload f32-LE
//! snap    u32 length, utf-8 config/provenance text
//! ```
//!
//! Every numeric payload is 32-bit IEEE-754 little-endian, so round trips
//! are lossless and byte-identical. Datasets reuse the same encoding with
//! entries `inputs`, `labels` (f32-encoded indices, absent when unlabeled)
//! and `meta`, plus generator provenance in the trailing text.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::{parse_config_str, TrainConfig};
use crate::data::{Dataset, GeneratorSpec};
use crate::eduattn::AttentionParams;
use crate::encoders::{Affine, Mlp, Projector, PromptVector, TextEmbeddingTable, TextFeatureMatrix};
use crate::tensor::Tensor;
use crate::trainer::{StudentModel, TeacherModel};
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CKD1";
pub const VERSION: u32 = 1;

const MAX_RANK: u8 = 8;

/// A named tensor map plus a trailing text snapshot.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
    pub snapshot: String,
    /// Byte offset each entry started at (filled by [`Checkpoint::load`]).
    entry_offsets: Vec<u64>,
}

impl Checkpoint {
    pub fn new(entries: Vec<(String, Tensor)>, snapshot: String) -> Checkpoint {
        let n = entries.len();
        Checkpoint { entries, snapshot, entry_offsets: vec![0; n] }
    }

    fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("missing tensor entry `{}`", name),
            })
    }

    fn offset_of(&self, idx: usize) -> u64 {
        self.entry_offsets.get(idx).copied().unwrap_or(0)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            let bytes = name.as_bytes();
            if bytes.len() > u16::MAX as usize {
                return Err(Error::Parameter(format!("tensor name too long: {}", name)));
            }
            if t.shape.len() > MAX_RANK as usize {
                return Err(Error::Parameter(format!(
                    "tensor `{}` has rank {} (max {})",
                    name,
                    t.shape.len(),
                    MAX_RANK
                )));
            }
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[t.shape.len() as u8])?;
            for d in &t.shape {
                if *d > u32::MAX as usize {
                    return Err(Error::Parameter(format!("dimension {} overflows u32", d)));
                }
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        let snap = self.snapshot.as_bytes();
        w.write_all(&(snap.len() as u32).to_le_bytes())?;
        w.write_all(snap)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Checkpoint> {
        let mut reader = OffsetReader { inner: r, offset: 0 };

        let magic = reader.take::<4>("magic")?;
        if magic != MAGIC {
            return Err(Error::Format { offset: 0, message: format!("bad magic {:02x?}", magic) });
        }
        let version = u32::from_le_bytes(reader.take::<4>("version")?);
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported format version {}", version),
            });
        }
        let count = u32::from_le_bytes(reader.take::<4>("entry count")?) as usize;

        let mut entries = Vec::with_capacity(count.min(1024));
        let mut entry_offsets = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let entry_offset = reader.offset;
            let name_len = u16::from_le_bytes(reader.take::<2>("name length")?) as usize;
            let name_bytes = reader.take_vec(name_len, "tensor name")?;
            let name = String::from_utf8(name_bytes).map_err(|_| Error::Format {
                offset: entry_offset,
                message: format!("entry {} has a non-UTF-8 name", i),
            })?;
            let rank = reader.take::<1>("rank")?[0];
            if rank > MAX_RANK {
                return Err(Error::Format {
                    offset: entry_offset,
                    message: format!("entry `{}` has rank {} (max {})", name, rank, MAX_RANK),
                });
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut numel: u64 = 1;
            for _ in 0..rank {
                let d = u32::from_le_bytes(reader.take::<4>("dimension")?) as u64;
                numel = numel.saturating_mul(d);
                shape.push(d as usize);
            }
            if numel > (1 << 31) {
                return Err(Error::Format {
                    offset: entry_offset,
                    message: format!("entry `{}` dimensions overflow: {:?}", name, shape),
                });
            }
            let payload = reader.take_vec(numel as usize * 4, "tensor payload")?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
            entry_offsets.push(entry_offset);
        }

        let snap_len = u32::from_le_bytes(reader.take::<4>("snapshot length")?) as usize;
        let snap_offset = reader.offset;
        let snap = reader.take_vec(snap_len, "snapshot")?;
        let snapshot = String::from_utf8(snap).map_err(|_| Error::Format {
            offset: snap_offset,
            message: "snapshot is not UTF-8".into(),
        })?;

        Ok(Checkpoint { entries, snapshot, entry_offsets })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        Checkpoint::read_from(&mut r)
    }
}

struct OffsetReader<'a, R: Read> {
    inner: &'a mut R,
    offset: u64,
}

impl<R: Read> OffsetReader<'_, R> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Format {
            offset: self.offset,
            message: format!("truncated while reading {}", what),
        })?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn take_vec(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Format {
            offset: self.offset,
            message: format!("truncated while reading {}", what),
        })?;
        self.offset += n as u64;
        Ok(buf)
    }
}

// ── model persistence ───────────────────────────────────────────────────

fn push_affine(entries: &mut Vec<(String, Tensor)>, prefix: &str, a: &Affine) {
    entries.push((format!("{}.weight", prefix), a.weight.clone()));
    entries.push((format!("{}.bias", prefix), a.bias.clone()));
}

fn read_affine(ckpt: &Checkpoint, prefix: &str) -> Result<Affine> {
    Ok(Affine {
        weight: ckpt.get(&format!("{}.weight", prefix))?.clone().requires_grad(),
        bias: ckpt.get(&format!("{}.bias", prefix))?.clone().requires_grad(),
    })
}

fn encoder_entries(entries: &mut Vec<(String, Tensor)>, mlp: &Mlp) {
    for (i, layer) in mlp.layers.iter().enumerate() {
        push_affine(entries, &format!("encoder.layer{}", i), layer);
    }
}

fn read_encoder(ckpt: &Checkpoint) -> Result<Mlp> {
    let mut layers = Vec::new();
    loop {
        let prefix = format!("encoder.layer{}", layers.len());
        if ckpt.entries.iter().any(|(n, _)| *n == format!("{}.weight", prefix)) {
            layers.push(read_affine(ckpt, &prefix)?);
        } else {
            break;
        }
    }
    if layers.is_empty() {
        return Err(Error::Format { offset: 0, message: "checkpoint has no encoder layers".into() });
    }
    Ok(Mlp { layers })
}

const TEACHER_FIXED: &[&str] = &["prompt", "text_table"];
const STUDENT_FIXED: &[&str] = &[
    "prompt",
    "projector.weight",
    "projector.bias",
    "attn.query.weight",
    "attn.query.bias",
    "attn.key.weight",
    "attn.key.bias",
    "attn.value.weight",
    "attn.value.bias",
    "attn.alpha",
    "text_features",
];

fn check_known_names(ckpt: &Checkpoint, fixed: &[&str]) -> Result<()> {
    for (i, (name, _)) in ckpt.entries.iter().enumerate() {
        let known = fixed.contains(&name.as_str())
            || (name.starts_with("encoder.layer")
                && (name.ends_with(".weight") || name.ends_with(".bias")));
        if !known {
            return Err(Error::Format {
                offset: ckpt.offset_of(i),
                message: format!("unknown tensor name `{}`", name),
            });
        }
    }
    Ok(())
}

pub fn save_teacher(
    path: impl AsRef<Path>,
    teacher: &TeacherModel,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut entries = Vec::new();
    encoder_entries(&mut entries, &teacher.encoder);
    entries.push(("prompt".into(), teacher.prompt.values.clone()));
    entries.push(("text_table".into(), teacher.text_table.rows.clone()));
    Checkpoint::new(entries, cfg.to_config_text()).save(path)
}

pub fn load_teacher(path: impl AsRef<Path>) -> Result<(TeacherModel, TrainConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = parse_config_str(&ckpt.snapshot)
        .map_err(|e| Error::Format { offset: 0, message: format!("bad config snapshot: {}", e) })?;
    check_known_names(&ckpt, TEACHER_FIXED)?;
    let encoder = read_encoder(&ckpt)?;
    let teacher = TeacherModel {
        encoder,
        prompt: PromptVector { values: ckpt.get("prompt")?.clone().requires_grad() },
        text_table: TextEmbeddingTable { rows: ckpt.get("text_table")?.clone().requires_grad() },
        input_dim: cfg.input_dim,
        feature_dim: cfg.teacher_dim,
        tau: cfg.tau,
    };
    Ok((teacher, cfg))
}

pub fn save_student(
    path: impl AsRef<Path>,
    student: &StudentModel,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut entries = Vec::new();
    encoder_entries(&mut entries, &student.encoder);
    entries.push(("prompt".into(), student.prompt.values.clone()));
    push_affine(&mut entries, "projector", &student.projector.map);
    push_affine(&mut entries, "attn.query", &student.attention.query);
    push_affine(&mut entries, "attn.key", &student.attention.key);
    push_affine(&mut entries, "attn.value", &student.attention.value);
    entries.push(("attn.alpha".into(), student.attention.alpha.clone()));
    entries.push(("text_features".into(), student.text_features.rows.clone()));
    Checkpoint::new(entries, cfg.to_config_text()).save(path)
}

pub fn load_student(path: impl AsRef<Path>) -> Result<(StudentModel, TrainConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = parse_config_str(&ckpt.snapshot)
        .map_err(|e| Error::Format { offset: 0, message: format!("bad config snapshot: {}", e) })?;
    check_known_names(&ckpt, STUDENT_FIXED)?;
    let encoder = read_encoder(&ckpt)?;
    let student = StudentModel {
        encoder,
        prompt: PromptVector { values: ckpt.get("prompt")?.clone().requires_grad() },
        projector: Projector { map: read_affine(&ckpt, "projector")? },
        attention: AttentionParams {
            query: read_affine(&ckpt, "attn.query")?,
            key: read_affine(&ckpt, "attn.key")?,
            value: read_affine(&ckpt, "attn.value")?,
            alpha: ckpt.get("attn.alpha")?.clone().requires_grad(),
            scale_dim: cfg.attn_c,
        },
        text_features: TextFeatureMatrix { rows: ckpt.get("text_features")?.clone() },
        use_eduattn: cfg.eduattn,
        input_dim: cfg.input_dim,
        feature_dim: cfg.teacher_dim,
        tau: cfg.tau,
    };
    Ok((student, cfg))
}

/// A model checkpoint of either stage.
#[derive(Debug)]
pub enum LoadedModel {
    Teacher(TeacherModel),
    Student(StudentModel),
}

/// Loads whichever model kind the checkpoint holds (detected from its
/// entry names).
pub fn load_model(path: impl AsRef<Path>) -> Result<(LoadedModel, TrainConfig)> {
    let ckpt = Checkpoint::load(&path)?;
    let is_student = ckpt.entries.iter().any(|(n, _)| n == "text_features");
    if is_student {
        let (m, cfg) = load_student(path)?;
        Ok((LoadedModel::Student(m), cfg))
    } else {
        let (m, cfg) = load_teacher(path)?;
        Ok((LoadedModel::Teacher(m), cfg))
    }
}

// ── dataset persistence ─────────────────────────────────────────────────

pub fn save_dataset(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let mut entries = Vec::new();
    entries.push(("inputs".into(), data.inputs.clone()));
    if let Some(labels) = &data.labels {
        let as_f32: Vec<f32> = labels.iter().map(|&l| l as f32).collect();
        entries.push(("labels".into(), Tensor::vector(as_f32)));
    }
    entries.push((
        "meta".into(),
        Tensor::vector(vec![data.class_count as f32, data.dim() as f32]),
    ));
    let snapshot = match &data.provenance {
        Some(p) => format!(
            "seed = {}\nclasses = {}\ndim = {}\nper_class = {}\nsigma = {:?}\nshift = {:?}\n",
            p.seed, p.class_count, p.dim, p.per_class, p.sigma, p.shift
        ),
        None => String::new(),
    };
    Checkpoint::new(entries, snapshot).save(path)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let ckpt = Checkpoint::load(path)?;
    let inputs = ckpt.get("inputs")?.clone();
    let meta = ckpt.get("meta")?;
    if meta.data.len() != 2 {
        return Err(Error::Format {
            offset: 0,
            message: format!("meta entry must have 2 values, got {}", meta.data.len()),
        });
    }
    let class_count = meta.data[0] as usize;
    let labels = match ckpt.entries.iter().find(|(n, _)| n == "labels") {
        Some((_, t)) => {
            let mut ls = Vec::with_capacity(t.data.len());
            for v in &t.data {
                let l = v.round();
                if l < 0.0 || (l as usize) >= class_count {
                    return Err(Error::Format {
                        offset: 0,
                        message: format!("label {} out of range [0, {})", v, class_count),
                    });
                }
                ls.push(l as usize);
            }
            Some(ls)
        }
        None => None,
    };
    for (i, (name, _)) in ckpt.entries.iter().enumerate() {
        if !matches!(name.as_str(), "inputs" | "labels" | "meta") {
            return Err(Error::Format {
                offset: ckpt.offset_of(i),
                message: format!("unknown tensor name `{}`", name),
            });
        }
    }
    let provenance = parse_provenance(&ckpt.snapshot);
    Ok(Dataset { inputs, labels, class_count, provenance })
}

fn parse_provenance(text: &str) -> Option<GeneratorSpec> {
    let mut spec = GeneratorSpec { seed: 0, class_count: 0, dim: 0, per_class: 0, sigma: 0.0, shift: 0.0 };
    let mut seen = 0;
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else { continue };
        let v = v.trim();
        match k.trim() {
            "seed" => spec.seed = v.parse().ok()?,
            "classes" => spec.class_count = v.parse().ok()?,
            "dim" => spec.dim = v.parse().ok()?,
            "per_class" => spec.per_class = v.parse().ok()?,
            "sigma" => spec.sigma = v.parse().ok()?,
            "shift" => spec.shift = v.parse().ok()?,
            _ => continue,
        }
        seen += 1;
    }
    if seen == 6 {
        Some(spec)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;

    fn toy_checkpoint() -> Checkpoint {
        Checkpoint::new(
            vec![
                ("a".into(), Tensor::from_rows(&[vec![1.5, -2.0]]).unwrap()),
                ("b".into(), Tensor::vector(vec![0.25])),
            ],
            "seed = 1\n".into(),
        )
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ckpt = toy_checkpoint();
        let mut bytes1 = Vec::new();
        ckpt.write_to(&mut bytes1).unwrap();
        let loaded = Checkpoint::read_from(&mut bytes1.as_slice()).unwrap();
        let mut bytes2 = Vec::new();
        loaded.write_to(&mut bytes2).unwrap();
        assert_eq!(bytes1, bytes2);
        assert_eq!(loaded.snapshot, "seed = 1\n");
    }

    #[test]
    fn hand_built_fixture_decodes_exactly() {
        // two entries written by hand against the documented layout
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CKD1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        // entry "w": rank 2, dims [1,2], payload [3.0, -4.5]
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(b"w");
        bytes.push(2);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&3.0f32.to_le_bytes());
        bytes.extend_from_slice(&(-4.5f32).to_le_bytes());
        // entry "b": rank 1, dims [1], payload [0.125]
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(b"b");
        bytes.push(1);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0.125f32.to_le_bytes());
        // snapshot
        let snap = b"tau = 1.0\n";
        bytes.extend_from_slice(&(snap.len() as u32).to_le_bytes());
        bytes.extend_from_slice(snap);

        let ckpt = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(ckpt.entries[0].0, "w");
        assert_eq!(ckpt.entries[0].1.shape, vec![1, 2]);
        assert_eq!(ckpt.entries[0].1.data, vec![3.0, -4.5]);
        assert_eq!(ckpt.entries[1].1.data, vec![0.125]);
        assert_eq!(ckpt.snapshot, "tau = 1.0\n");
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let ckpt = toy_checkpoint();
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        bytes[0] = b'X';
        let err = Checkpoint::read_from(&mut bytes.as_slice()).unwrap_err();
        match err {
            Error::Format { offset, message } => {
                assert_eq!(offset, 0);
                assert!(message.contains("magic"));
            }
            other => panic!("expected format error, got {}", other),
        }
    }

    #[test]
    fn truncation_reports_an_offset() {
        let ckpt = toy_checkpoint();
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = Checkpoint::read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{}", err);
    }

    #[test]
    fn oversized_dimensions_are_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CKD1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(b"w");
        bytes.push(2);
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        let err = Checkpoint::read_from(&mut bytes.as_slice()).unwrap_err();
        match err {
            Error::Format { message, .. } => assert!(message.contains("overflow"), "{}", message),
            other => panic!("expected format error, got {}", other),
        }
    }

    #[test]
    fn dataset_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let data = gen_synthetic(&GeneratorSpec {
            seed: 5,
            class_count: 3,
            dim: 4,
            per_class: 6,
            sigma: 1.0,
            shift: 0.5,
        })
        .unwrap();
        save_dataset(&path, &data).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.inputs.value_bytes(), data.inputs.value_bytes());
        assert_eq!(loaded.labels, data.labels);
        assert_eq!(loaded.class_count, 3);
        assert_eq!(loaded.provenance, data.provenance);

        // unlabeled round trip drops the labels entry
        let unlabeled = data.without_labels();
        save_dataset(&path, &unlabeled).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert!(loaded.labels.is_none());
    }

    #[test]
    fn save_load_save_is_byte_identical_for_datasets() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        let data = gen_synthetic(&GeneratorSpec {
            seed: 6,
            class_count: 2,
            dim: 3,
            per_class: 4,
            sigma: 0.5,
            shift: 0.0,
        })
        .unwrap();
        save_dataset(&p1, &data).unwrap();
        let loaded = load_dataset(&p1).unwrap();
        save_dataset(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
