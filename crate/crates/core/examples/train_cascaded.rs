//! Trains the cascaded head and reports retrieval, keyword hit rates and
//! how close batch norm brought the keyword statistics to the subword table.
//!
//! cargo run --release --example train_cascaded [-- --keywords K] [--no-batchnorm] [--seed S]

use speechclip::evaluation::{eval_image_speech, eval_keywords, export_diagnostics};
use speechclip::model::ModelKind;
use speechclip::teachers::{generate_dataset, DatasetConfig, TeacherBundle, TeacherConfig};
use speechclip::training::{train, Preset, TrainConfig, TrainOptions};

fn main() -> speechclip::Result<()> {
    let mut config = TrainConfig::preset(ModelKind::Cascaded, Preset::Desk);
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        match a.as_str() {
            "--keywords" => config.keywords = args.next().and_then(|v| v.parse().ok()).expect("--keywords K"),
            "--seed" => config.seed = args.next().and_then(|v| v.parse().ok()).expect("--seed S"),
            "--no-batchnorm" => config.batchnorm = false,
            other => panic!("unknown argument {other}"),
        }
    }
    config.validate()?;

    let teachers = TeacherBundle::build(TeacherConfig::default())?;
    let data = generate_dataset(&teachers, &DatasetConfig::default())?;
    let run = train(&config, &data.train, &data.dev, &teachers, &TrainOptions::default())?;
    println!(
        "K={} batchnorm={} best dev speech->image R@1 {:.3} at step {}",
        config.keywords, config.batchnorm, run.best_dev_recall, run.best_step
    );

    let retrieval = eval_image_speech(&run.best_model, &data.test, &teachers)?;
    for d in &retrieval.directions {
        println!("test {:<14} R@1 {:.3}  R@10 {:.3}", d.label, d.recall_at(1), d.recall_at(10));
    }

    let (kw, _) = eval_keywords(&run.best_model, &data.test, &teachers)?;
    let slots: Vec<String> = kw.slot_hit_rate.iter().map(|r| format!("{r:.2}")).collect();
    println!("keyword hit rate per slot [{}]", slots.join(", "));
    println!(
        "average {:.3}  chance {:.3}  (E|caption|/V {:.3})",
        kw.average_hit_rate, kw.chance_hit_rate, kw.nominal_chance_level
    );

    if let Some(bn) = export_diagnostics(&run.best_model, Some(&teachers)).batchnorm {
        println!("running vs target mean distance {:.3}, var distance {:.3}", bn.mean_distance, bn.var_distance);
    }
    Ok(())
}
