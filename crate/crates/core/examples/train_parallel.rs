//! Trains the parallel head on the desk corpus and evaluates it on test.
//!
//! cargo run --release --example train_parallel [SEED] [CHECKPOINT_OUT]

use speechclip::evaluation::{eval_image_speech, eval_zeroshot_speech_text, export_diagnostics, RetrievalReport};
use speechclip::model::{write_checkpoint, Checkpoint, ModelKind};
use speechclip::teachers::{generate_dataset, DatasetConfig, TeacherBundle, TeacherConfig};
use speechclip::training::{train, Preset, TrainConfig, TrainOptions};

fn show(report: &RetrievalReport) {
    for d in &report.directions {
        let cells: Vec<String> = d
            .ks
            .iter()
            .zip(&d.recall)
            .zip(&d.random_baseline)
            .map(|((k, r), b)| format!("R@{k} {r:.3} (chance {b:.3})"))
            .collect();
        println!("  {:<14} {}", d.label, cells.join("  "));
    }
}

fn main() -> speechclip::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("SEED is an integer"));
    let out = args.next();

    let teachers = TeacherBundle::build(TeacherConfig::default())?;
    let data = generate_dataset(&teachers, &DatasetConfig::default())?;
    let config = TrainConfig {
        seed,
        ..TrainConfig::preset(ModelKind::Parallel, Preset::Desk)
    };
    let run = train(&config, &data.train, &data.dev, &teachers, &TrainOptions::default())?;

    for r in run.history.iter().step_by(200) {
        println!("step {:>5}  lr {:.2e}  loss {:.4}  logit scale {:.2}", r.step, r.lr, r.loss, r.temperature);
    }
    for e in &run.evals {
        println!("dev @ {:>5}  speech->image R@1 {:.3}{}", e.step, e.speech_to_image_r1, if e.best { "  *" } else { "" });
    }

    println!("test, image-speech:");
    show(&eval_image_speech(&run.best_model, &data.test, &teachers)?);
    println!("test, zero-shot speech-text:");
    show(&eval_zeroshot_speech_text(&run.best_model, &data.test, &teachers)?);

    let diag = export_diagnostics(&run.best_model, Some(&teachers));
    let weights: Vec<String> = diag.layer_weights.iter().map(|w| format!("{w:.3}")).collect();
    println!("layer weights [{}], argmax {}", weights.join(", "), diag.argmax_layer);

    if let Some(path) = out {
        write_checkpoint(
            &path,
            &Checkpoint {
                model: run.best_model,
                step: run.best_step,
                best_dev_recall: Some(run.best_dev_recall),
                optimizer: None,
            },
        )?;
        println!("wrote {path}");
    }
    Ok(())
}
