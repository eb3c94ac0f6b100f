//! Accuracy, harmonic mean, and the three evaluation protocols:
//! base-to-novel generalization, cross-dataset transfer, and domain-shift
//! robustness. Accuracies are percentages; the softmax is restricted to the
//! evaluated class subset (novel-class names are assumed known at test
//! time, as in the standard protocol).

use crate::data::Dataset;
use crate::tensor::Tensor;
use crate::trainer::{StudentModel, TeacherModel};
use crate::{Error, Result};

/// Disjoint base/novel class-id split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
}

impl SplitSpec {
    pub fn new(base_classes: Vec<usize>, novel_classes: Vec<usize>) -> Result<SplitSpec> {
        for b in &base_classes {
            if novel_classes.contains(b) {
                return Err(Error::Parameter(format!(
                    "class {} appears in both base and novel sets",
                    b
                )));
            }
        }
        Ok(SplitSpec { base_classes, novel_classes })
    }

    /// First `base_count` ids are base, the rest novel.
    pub fn first_n(base_count: usize, class_count: usize) -> Result<SplitSpec> {
        if base_count == 0 || base_count >= class_count {
            return Err(Error::Parameter(format!(
                "base_count {} must be in (0, {})",
                base_count, class_count
            )));
        }
        Ok(SplitSpec {
            base_classes: (0..base_count).collect(),
            novel_classes: (base_count..class_count).collect(),
        })
    }

    pub fn swapped(&self) -> SplitSpec {
        SplitSpec { base_classes: self.novel_classes.clone(), novel_classes: self.base_classes.clone() }
    }
}

/// Base accuracy, novel accuracy, and their harmonic mean, in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
}

impl Metrics {
    pub fn csv_row(&self, split: &str) -> String {
        format!("{},{:.2},{:.2},{:.2}", split, self.base_acc, self.novel_acc, self.hm)
    }
}

/// Anything that maps raw inputs to class logits.
pub trait Classifier {
    fn class_count(&self) -> usize;
    fn class_logits(&self, inputs: &Tensor) -> Result<Tensor>;
}

impl Classifier for TeacherModel {
    fn class_count(&self) -> usize {
        TeacherModel::class_count(self)
    }
    fn class_logits(&self, inputs: &Tensor) -> Result<Tensor> {
        self.infer_logits(inputs)
    }
}

impl Classifier for StudentModel {
    fn class_count(&self) -> usize {
        StudentModel::class_count(self)
    }
    fn class_logits(&self, inputs: &Tensor) -> Result<Tensor> {
        self.infer_logits(inputs)
    }
}

/// Percentage of samples whose argmax over the subset-restricted logits
/// matches the label. Ties resolve to the lowest class id.
pub fn accuracy(model: &dyn Classifier, data: &Dataset, class_subset: &[usize]) -> Result<f64> {
    if class_subset.is_empty() {
        return Err(Error::Parameter("accuracy: empty class subset".into()));
    }
    let labels = data.labels()?;
    let n = model.class_count();
    for &c in class_subset {
        if c >= n {
            return Err(Error::Parameter(format!("accuracy: class {} out of range [0, {})", c, n)));
        }
    }
    let subset_rows: Vec<usize> =
        (0..data.len()).filter(|&i| class_subset.contains(&labels[i])).collect();
    if subset_rows.is_empty() {
        return Err(Error::Parameter("accuracy: no samples with labels in the subset".into()));
    }
    let inputs = data.inputs.gather_rows(&subset_rows)?;
    let logits = model.class_logits(&inputs)?;
    let mut hits = 0usize;
    for (r, &i) in subset_rows.iter().enumerate() {
        let row = logits.row(r);
        let mut best = class_subset[0];
        for &c in class_subset {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == labels[i] {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / subset_rows.len() as f64)
}

/// `2ab / (a+b)`, and 0 when either accuracy is 0.
pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64> {
    if base < 0.0 || novel < 0.0 {
        return Err(Error::Parameter(format!(
            "harmonic_mean: accuracies must be >= 0, got ({}, {})",
            base, novel
        )));
    }
    if base == 0.0 || novel == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * base * novel / (base + novel))
}

/// Base accuracy over base-class test samples (softmax restricted to base
/// classes), novel analogously, combined by harmonic mean.
pub fn evaluate_base_novel(
    model: &dyn Classifier,
    test: &Dataset,
    split: &SplitSpec,
) -> Result<Metrics> {
    let labels = test.labels()?;
    let has = |classes: &[usize]| labels.iter().any(|l| classes.contains(l));
    if !has(&split.base_classes) || !has(&split.novel_classes) {
        return Err(Error::Parameter(
            "evaluate_base_novel: test set must contain both class groups".into(),
        ));
    }
    let base_acc = accuracy(model, test, &split.base_classes)?;
    let novel_acc = accuracy(model, test, &split.novel_classes)?;
    let hm = harmonic_mean(base_acc, novel_acc)?;
    Ok(Metrics { base_acc, novel_acc, hm })
}

/// Plain all-class accuracy on a target dataset; domain-shift evaluation is
/// this applied to a shifted dataset.
pub fn evaluate_transfer(model: &dyn Classifier, target: &Dataset) -> Result<f64> {
    if target.class_count != model.class_count() {
        return Err(Error::Config(format!(
            "evaluate_transfer: dataset has {} classes, model expects {}",
            target.class_count,
            model.class_count()
        )));
    }
    let all: Vec<usize> = (0..model.class_count()).collect();
    accuracy(model, target, &all)
}

/// Plain-text table of metric rows.
pub fn render_table(rows: &[(String, Metrics)]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<14} {:>8} {:>8} {:>8}\n", "split", "base", "novel", "hm"));
    for (label, m) in rows {
        out.push_str(&format!(
            "{:<14} {:>8.2} {:>8.2} {:>8.2}\n",
            label, m.base_acc, m.novel_acc, m.hm
        ));
    }
    out
}

/// `split,base,novel,hm` CSV with header.
pub fn render_csv(rows: &[(String, Metrics)]) -> String {
    let mut out = String::from("split,base,novel,hm\n");
    for (label, m) in rows {
        out.push_str(&m.csv_row(label));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, GeneratorSpec};
    use crate::encoders::{Affine, Mlp, PromptVector, TextEmbeddingTable, TextFeatureMatrix};
    use crate::trainer::TeacherModel;

    /// Teacher whose encoder is the identity and whose text rows are the
    /// normalized class means: a nearest-mean classifier.
    fn nearest_mean_teacher(means: &[Vec<f32>]) -> TeacherModel {
        let dim = means[0].len();
        let mut norm_rows = Vec::new();
        for m in means {
            let n: f32 = m.iter().map(|v| v * v).sum::<f32>().sqrt();
            norm_rows.push(m.iter().map(|v| v / n).collect::<Vec<f32>>());
        }
        TeacherModel {
            encoder: Mlp { layers: vec![Affine::identity(dim)] },
            prompt: PromptVector { values: Tensor::zeros(vec![0]).requires_grad() },
            text_table: TextEmbeddingTable {
                rows: Tensor::from_rows(&norm_rows).unwrap().requires_grad(),
            },
            input_dim: dim,
            feature_dim: dim,
            tau: 1.0,
        }
    }

    fn class_means(seed: u64, n: usize, dim: usize) -> Vec<Vec<f32>> {
        // read the means straight from a zero-noise-ish dataset
        let d = gen_synthetic(&GeneratorSpec {
            seed,
            class_count: n,
            dim,
            per_class: 1,
            sigma: 1e-6,
            shift: 0.0,
        })
        .unwrap();
        (0..n).map(|i| d.inputs.row(i).to_vec()).collect()
    }

    #[test]
    fn harmonic_mean_examples() {
        assert!((harmonic_mean(83.69, 81.54).unwrap() - 82.60).abs() < 0.01);
        assert!((harmonic_mean(86.96, 80.73).unwrap() - 83.73).abs() < 0.01);
        assert!((harmonic_mean(55.5, 55.5).unwrap() - 55.5).abs() < 1e-9);
        assert_eq!(harmonic_mean(100.0, 0.0).unwrap(), 0.0);
        assert!(harmonic_mean(-1.0, 50.0).is_err());
    }

    #[test]
    fn perfect_model_scores_perfect_metrics() {
        let means = class_means(21, 4, 8);
        let teacher = nearest_mean_teacher(&means);
        let test = gen_synthetic(&GeneratorSpec {
            seed: 22,
            class_count: 4,
            dim: 8,
            per_class: 12,
            sigma: 0.05,
            shift: 0.0,
        })
        .unwrap();
        // same seed for means? no: means must match the test set's
        let means = {
            let d = gen_synthetic(&GeneratorSpec {
                seed: 22,
                class_count: 4,
                dim: 8,
                per_class: 1,
                sigma: 1e-6,
                shift: 0.0,
            })
            .unwrap();
            (0..4).map(|i| d.inputs.row(i).to_vec()).collect::<Vec<_>>()
        };
        let teacher2 = nearest_mean_teacher(&means);
        drop(teacher);
        let split = SplitSpec::first_n(2, 4).unwrap();
        let m = evaluate_base_novel(&teacher2, &test, &split).unwrap();
        assert_eq!((m.base_acc, m.novel_acc, m.hm), (100.0, 100.0, 100.0));
    }

    #[test]
    fn single_class_subset_is_trivially_perfect() {
        let means = class_means(23, 3, 6);
        let teacher = nearest_mean_teacher(&means);
        let test = gen_synthetic(&GeneratorSpec {
            seed: 23,
            class_count: 3,
            dim: 6,
            per_class: 8,
            sigma: 2.0,
            shift: 0.0,
        })
        .unwrap();
        assert_eq!(accuracy(&teacher, &test, &[1]).unwrap(), 100.0);
    }

    #[test]
    fn empty_subset_is_parameter_error() {
        let means = class_means(24, 3, 6);
        let teacher = nearest_mean_teacher(&means);
        let test = gen_synthetic(&GeneratorSpec {
            seed: 24,
            class_count: 3,
            dim: 6,
            per_class: 4,
            sigma: 1.0,
            shift: 0.0,
        })
        .unwrap();
        assert!(accuracy(&teacher, &test, &[]).is_err());
    }

    #[test]
    fn swapping_split_swaps_accuracies_and_keeps_hm() {
        let means = class_means(25, 4, 8);
        let teacher = nearest_mean_teacher(&means);
        let test = gen_synthetic(&GeneratorSpec {
            seed: 25,
            class_count: 4,
            dim: 8,
            per_class: 16,
            sigma: 1.5,
            shift: 0.0,
        })
        .unwrap();
        let split = SplitSpec::first_n(2, 4).unwrap();
        let a = evaluate_base_novel(&teacher, &test, &split).unwrap();
        let b = evaluate_base_novel(&teacher, &test, &split.swapped()).unwrap();
        assert_eq!(a.base_acc, b.novel_acc);
        assert_eq!(a.novel_acc, b.base_acc);
        assert!((a.hm - b.hm).abs() < 1e-9);
    }

    #[test]
    fn metrics_sit_between_the_two_accuracies() {
        let means = class_means(26, 4, 8);
        let teacher = nearest_mean_teacher(&means);
        let test = gen_synthetic(&GeneratorSpec {
            seed: 26,
            class_count: 4,
            dim: 8,
            per_class: 24,
            sigma: 1.8,
            shift: 0.0,
        })
        .unwrap();
        let split = SplitSpec::first_n(2, 4).unwrap();
        let m = evaluate_base_novel(&teacher, &test, &split).unwrap();
        if m.base_acc > 0.0 && m.novel_acc > 0.0 {
            let lo = m.base_acc.min(m.novel_acc);
            let hi = m.base_acc.max(m.novel_acc);
            assert!(m.hm >= lo - 1e-9 && m.hm <= hi + 1e-9);
        }
    }

    #[test]
    fn transfer_equals_all_class_accuracy_and_rejects_mismatch() {
        let means = class_means(27, 3, 6);
        let teacher = nearest_mean_teacher(&means);
        let data = gen_synthetic(&GeneratorSpec {
            seed: 27,
            class_count: 3,
            dim: 6,
            per_class: 10,
            sigma: 1.0,
            shift: 0.0,
        })
        .unwrap();
        let t = evaluate_transfer(&teacher, &data).unwrap();
        let a = accuracy(&teacher, &data, &[0, 1, 2]).unwrap();
        assert_eq!(t, a);
        let other = gen_synthetic(&GeneratorSpec {
            seed: 27,
            class_count: 4,
            dim: 6,
            per_class: 10,
            sigma: 1.0,
            shift: 0.0,
        })
        .unwrap();
        assert!(matches!(evaluate_transfer(&teacher, &other), Err(Error::Config(_))));
    }

    #[test]
    fn base_perfect_novel_chance_model_matches_hm_arithmetic() {
        // text rows for base classes are the true means; novel rows are the
        // means of a different seed's classes, so novel predictions are
        // essentially arbitrary
        let true_means = class_means(30, 8, 16);
        let mut rows = true_means[..4].to_vec();
        let wrong = class_means(31, 8, 16);
        rows.extend(wrong[4..].iter().cloned());
        let model = nearest_mean_teacher(&rows);
        let test = gen_synthetic(&GeneratorSpec {
            seed: 30,
            class_count: 8,
            dim: 16,
            per_class: 64,
            sigma: 0.05,
            shift: 0.0,
        })
        .unwrap();
        let split = SplitSpec::first_n(4, 8).unwrap();
        let m = evaluate_base_novel(&model, &test, &split).unwrap();
        assert_eq!(m.base_acc, 100.0);
        assert!(m.novel_acc < 60.0, "novel accuracy should be chance-ish, got {}", m.novel_acc);
        let expect = harmonic_mean(m.base_acc, m.novel_acc).unwrap();
        assert!((m.hm - expect).abs() < 1e-9);
    }

    #[test]
    fn random_student_sits_near_chance() {
        use rand::SeedableRng;
        let cfg = crate::TrainConfig {
            input_dim: 16,
            student_dim: 8,
            teacher_dim: 16,
            attn_dim: 16,
            attn_c: 16,
            prompt_len: 2,
            prompt_width: 4,
            ..Default::default()
        };
        let data = gen_synthetic(&GeneratorSpec {
            seed: 40,
            class_count: 8,
            dim: 16,
            per_class: 256,
            sigma: 1.0,
            shift: 0.0,
        })
        .unwrap();
        // mean accuracy over a few random models to damp per-model bias
        let mut total = 0.0;
        for seed in 0..3u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let table = TextEmbeddingTable::gaussian(8, 16, &mut rng);
            let text = crate::encoders::teacher_text_features_value(&table).unwrap();
            let student = crate::trainer::StudentModel::init(
                &cfg,
                TextFeatureMatrix { rows: text.rows.clone() },
                &mut rng,
            );
            total += evaluate_transfer(&student, &data).unwrap();
        }
        let mean = total / 3.0;
        assert!((mean - 12.5).abs() <= 5.0, "chance-level accuracy expected, got {}", mean);
    }
}
