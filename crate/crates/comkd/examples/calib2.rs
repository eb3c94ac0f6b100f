// scratch calibration harness; removed before release
use std::time::Instant;

use comkd::data::{gen_synthetic, GeneratorSpec};
use comkd::evaluator::{evaluate_base_novel, evaluate_transfer, SplitSpec};
use comkd::trainer::{distill_student, pretrain_teacher, AblationCell, AblationPreset};
use comkd::{KdKind, TrainConfig};

fn candidate(seed: u64, lr: f32, epochs: usize) -> TrainConfig {
    let ds: usize = std::env::var("DS").unwrap().parse().unwrap();
    let hs: usize = std::env::var("HS").unwrap().parse().unwrap();
    let dt: usize = std::env::var("DT").unwrap().parse().unwrap();
    TrainConfig {
        seed,
        student_dim: ds,
        student_hidden: hs,
        teacher_dim: dt,
        attn_dim: dt,
        attn_c: dt,
        teacher_hidden: 4 * hs,
        lr_student: lr,
        epochs_student: epochs,
        ..Default::default()
    }
}

fn main() {
    for (lr, epochs) in [(0.3f32, 300usize), (0.6, 300), (1.0, 300)] {
        println!("=== lr {} epochs {} ===", lr, epochs);
        let mut med: Vec<(String, Vec<f64>)> = Vec::new();
        let mut descent_ok = true;
        let mut accs: Vec<f64> = Vec::new();
        let start = Instant::now();
        for seed in 1..=5u64 {
            let full_data = gen_synthetic(&GeneratorSpec {
                seed,
                class_count: 8,
                dim: 32,
                per_class: 96,
                sigma: 1.0,
                shift: 0.0,
            })
            .unwrap();
            let (train, test) = full_data.split_per_class(64).unwrap();
            let cfg = candidate(seed, lr, epochs);
            let (teacher, _) = pretrain_teacher(&cfg, &train).unwrap();
            let split = SplitSpec::first_n(4, 8).unwrap();
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
                let (student, log) = match distill_student(&ccfg, &teacher, &unlabeled) {
                    Ok(x) => x,
                    Err(e) => {
                        println!("  seed {} {} FAILED: {}", seed, cell.label(), e);
                        continue;
                    }
                };
                let m = evaluate_base_novel(&student, &test, &split).unwrap();
                let l0 = log.records.first().unwrap().l_final;
                let le = log.records.last().unwrap().l_final;
                if le >= l0 {
                    descent_ok = false;
                }
                if matches!(cell, AblationCell::Preset(AblationPreset::Full)) {
                    accs.push(evaluate_transfer(&student, &test).unwrap());
                }
                let _ = (l0, le);
                let label = cell.label();
                match med.iter_mut().find(|(l, _)| *l == label) {
                    Some((_, v)) => v.push(m.hm),
                    None => med.push((label, vec![m.hm])),
                }
            }
        }
        let mut meds: Vec<(String, f64)> = Vec::new();
        for (label, mut v) in med {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            meds.push((label, v[v.len() / 2]));
        }
        for (l, m) in &meds {
            println!("  median {:<12} {:.2}", l, m);
        }
        accs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let get = |name: &str| meds.iter().find(|(l, _)| l == name).map(|(_, m)| *m).unwrap();
        let (full, klo, noif, noed) = (get("full"), get("kl-only"), get("no-ifalign"), get("no-eduattn"));
        let (mse, l1) = (get("kd=mse"), get("kd=l1"));
        println!(
            "  C5 median all-acc {:.2} (need >= 32.5) | C6 full>=klonly {} band {} | C7 kl>=mse {} kl>=l1 {} mse>=l1 {}",
            accs[accs.len() / 2],
            full >= klo,
            noif >= klo - 0.5 && noif <= full + 0.5 && noed >= klo - 0.5 && noed <= full + 0.5,
            full >= mse,
            full >= l1,
            mse >= l1,
        );
        println!("  descent_ok {} | wall {:.1}s", descent_ok, start.elapsed().as_secs_f64());
    }
}
