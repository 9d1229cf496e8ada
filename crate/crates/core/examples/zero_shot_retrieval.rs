//! Speech-to-text retrieval against frozen text embeddings the model never
//! saw during training, before and after image-only alignment.
//!
//! cargo run --release --example zero_shot_retrieval [CHECKPOINT]

use speechclip::evaluation::eval_zeroshot_speech_text;
use speechclip::model::{read_checkpoint, ModelKind};
use speechclip::teachers::{generate_dataset, DatasetConfig, TeacherBundle, TeacherConfig};
use speechclip::training::{init_model, train, Preset, TrainConfig, TrainOptions};

fn main() -> speechclip::Result<()> {
    let teachers = TeacherBundle::build(TeacherConfig::default())?;
    let data = generate_dataset(&teachers, &DatasetConfig::default())?;
    let config = TrainConfig::preset(ModelKind::Parallel, Preset::Desk);

    let untrained = init_model(&config, &teachers)?;
    let trained = match std::env::args().nth(1) {
        Some(path) => read_checkpoint(path)?.model,
        None => train(&config, &data.train, &data.dev, &teachers, &TrainOptions::default())?.best_model,
    };
    trained.check_teachers(&teachers)?;

    for (name, model) in [("untrained", &untrained), ("trained", &trained)] {
        let report = eval_zeroshot_speech_text(model, &data.test, &teachers)?;
        for d in &report.directions {
            println!(
                "{name:<10} {:<13} gallery {:>4}  R@1 {:.3}  R@5 {:.3}  R@10 {:.3}",
                d.label,
                d.gallery,
                d.recall_at(1),
                d.recall_at(5),
                d.recall_at(10)
            );
        }
    }
    Ok(())
}
