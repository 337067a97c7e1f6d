//! End-to-end desk-scale run on synthetic data: pretrain, fine-tune with and
//! without distillation, evaluate.

use dkan_core::dataset::{build_ifsnd_split, neu_det_categories, generate_synthetic_dataset, SplitSpec, SynthConfig};
use dkan_core::distill::DistillWeights;
use dkan_core::train::{evaluate_model, pretrain_base, run_experiment, TrainConfig};
use std::time::Instant;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let per_cat: usize = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(60);
    let pretrain: usize = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(600);
    let finetune: usize = args.get(3).and_then(|v| v.parse().ok()).unwrap_or(300);
    let seeds: usize = args.get(4).and_then(|v| v.parse().ok()).unwrap_or(3);
    // name=lambda1:lambda2,...
    let runs: Vec<(String, DistillWeights)> = match args.get(5) {
        Some(list) => list
            .split(',')
            .map(|item| {
                let (name, w) = item.split_once('=').ok_or("expected name=l1:l2")?;
                let (a, b) = w.split_once(':').ok_or("expected name=l1:l2")?;
                Ok((name.to_string(), DistillWeights::new(a.parse()?, b.parse()?)?))
            })
            .collect::<Result<_, Box<dyn std::error::Error>>>()?,
        None => vec![
            ("none".into(), DistillWeights::none()),
            ("fka".into(), DistillWeights::new(1.0, 0.0)?),
            ("lka".into(), DistillWeights::new(0.0, 0.01)?),
            ("both".into(), DistillWeights::default()),
        ],
    };
    let images = generate_synthetic_dataset(
        &SynthConfig {
            images_per_category: per_cat,
            ..SynthConfig::default()
        },
        0,
    )?;
    let spec = SplitSpec::named("split1", &neu_det_categories(), 5, 0)?;
    let partition = build_ifsnd_split(&images, &spec, per_cat / 3, per_cat / 2)?;
    let mut config = TrainConfig::desk();
    config.pretrain_iterations = pretrain;
    config.iterations = finetune;
    let t = Instant::now();
    let base = pretrain_base(&partition.base_train, &spec.base_categories, &config, &mut |l| {
        if l.step % 50 == 0 {
            println!("pretrain {:4} rpn {:.4} rcnn {:.4} total {:.4}", l.step, l.loss_rpn, l.loss_rcnn, l.loss_total);
        }
    })?;
    println!("pretrain took {:.1}s", t.elapsed().as_secs_f64());
    let (r, _) = evaluate_model(&base, &partition)?;
    println!("base model: AP_B {:.4} per-category {:?}", r.ap_base, r.per_category_ap);
    for (tag, w) in runs {
        let t = Instant::now();
        let cfg = TrainConfig {
            distill: w,
            ..config.clone()
        };
        let rep = run_experiment(&partition, &base, &cfg, seeds);
        let m = rep.mean.expect("at least one seed");
        println!(
            "{tag:5} AP_B {:.4} AP_N {:.4} AP_All {:.4} failures {} ({:.1}s)",
            m.ap_base,
            m.ap_novel,
            m.ap_all,
            rep.failures.len(),
            t.elapsed().as_secs_f64()
        );
        for s in &rep.per_seed {
            let last = s.log.last().unwrap();
            println!("   seed {} AP_B {:.4} AP_N {:.4} final total {:.4} fka {:.5} lka {:.5}", s.seed, s.report.ap_base, s.report.ap_novel, last.loss_total, last.loss_fka, last.loss_lka);
        }
    }
    Ok(())
}
