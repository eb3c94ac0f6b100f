// scratch calibration harness; removed before release
use std::time::Instant;

use comkd::data::{gen_synthetic, GeneratorSpec};
use comkd::evaluator::{evaluate_base_novel, evaluate_transfer, SplitSpec};
use comkd::trainer::{distill_student, pretrain_teacher, AblationCell, AblationPreset};
use comkd::{KdKind, TrainConfig};

fn main() {
    let cfg = TrainConfig::default();
    let mut medians: Vec<(String, Vec<f64>)> = Vec::new();
    let start = Instant::now();

    for seed in 1..=5u64 {
        let full = gen_synthetic(&GeneratorSpec {
            seed,
            class_count: 8,
            dim: 32,
            per_class: 96,
            sigma: 1.0,
            shift: 0.0,
        })
        .unwrap();
        let (train, test) = full.split_per_class(64).unwrap();
        let mut cfg = cfg.clone();
        cfg.seed = seed;

        let t0 = Instant::now();
        let (teacher, tlog) = pretrain_teacher(&cfg, &train).unwrap();
        let t_time = t0.elapsed().as_secs_f64();
        let t_train_acc = tlog.records.last().unwrap().train_acc;
        let t_test = evaluate_transfer(&teacher, &test).unwrap();
        let split = SplitSpec::first_n(4, 8).unwrap();
        let t_bn = evaluate_base_novel(&teacher, &test, &split).unwrap();
        println!(
            "seed {}: teacher train_acc {:.1} test {:.1} hm {:.2} ({:.1}s)",
            seed, t_train_acc, t_test, t_bn.hm, t_time
        );

        let unlabeled = train.without_labels();
        let cells = [
            AblationCell::Preset(AblationPreset::Full),
            AblationCell::Preset(AblationPreset::NoIfalign),
            AblationCell::Preset(AblationPreset::NoEduattn),
            AblationCell::Preset(AblationPreset::KlOnly),
            AblationCell::Kd(KdKind::Mse),
            AblationCell::Kd(KdKind::L1),
        ];
        for cell in cells {
            let ccfg = cell.apply(&cfg);
            let t1 = Instant::now();
            let (student, log) = distill_student(&ccfg, &teacher, &unlabeled).unwrap();
            let d_time = t1.elapsed().as_secs_f64();
            let m = evaluate_base_novel(&student, &test, &split).unwrap();
            let acc = evaluate_transfer(&student, &test).unwrap();
            let l0 = log.records.first().unwrap().l_final;
            let le = log.records.last().unwrap().l_final;
            println!(
                "  {:<12} hm {:>6.2} base {:>6.2} novel {:>6.2} all {:>6.2}  l0 {:.4} lE {:.4} ({:.1}s)",
                cell.label(),
                m.hm,
                m.base_acc,
                m.novel_acc,
                acc,
                l0,
                le,
                d_time
            );
            let entry = medians.iter_mut().find(|(l, _)| *l == cell.label());
            match entry {
                Some((_, v)) => v.push(m.hm),
                None => medians.push((cell.label(), vec![m.hm])),
            }
        }
    }

    println!("\nmedians over seeds 1..5:");
    for (label, mut v) in medians {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!("  {:<12} {:.2}", label, v[v.len() / 2]);
    }
    println!("total {:.1}s", start.elapsed().as_secs_f64());
}
