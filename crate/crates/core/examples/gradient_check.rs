//! Finite-difference check of the full parallel head and contrastive loss.
//!
//! cargo run --example gradient_check

use speechclip::diffcore::gradcheck::{check_gradients, GradCheckConfig};
use speechclip::diffcore::Tensor;
use speechclip::model::{contrastive_loss, Bound, ParallelConfig, ParallelModel};
use speechclip::rng::{normal_tensor, seeded};
use speechclip::teachers::{TeacherBundle, TeacherConfig};

fn main() -> speechclip::Result<()> {
    let teachers = TeacherBundle::build(TeacherConfig {
        vocab: 12,
        d_text: 4,
        d_audio: 8,
        layers: 2,
        ..TeacherConfig::default()
    })?;
    let model = ParallelModel::new(ParallelConfig::for_teachers(&teachers), 1)?;
    let mut rng = seeded(2);
    let features: Vec<Vec<Tensor>> = [3, 5, 4]
        .iter()
        .map(|&t| (0..teachers.feature_layers()).map(|_| normal_tensor(&mut rng, &[t, 8], 1.0)).collect())
        .collect();
    let images = normal_tensor(&mut rng, &[3, 4], 1.0);

    let names: Vec<String> = model.params().names().iter().map(|s| s.to_string()).collect();
    let inputs: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let report = check_gradients(
        &inputs,
        |g, v| {
            let b = Bound::from_pairs(names.iter().cloned().zip(v.iter().copied()).collect());
            let feats: Vec<Vec<_>> = features
                .iter()
                .map(|layers| layers.iter().map(|t| g.constant(t.clone())).collect())
                .collect();
            let speech = model.forward(g, &b, &feats)?;
            let img = g.constant(images.clone());
            let img = g.l2_normalize(img)?;
            contrastive_loss(g, speech, img, b.var("log_temperature"))
        },
        GradCheckConfig::default(),
    )?;
    println!("parameters:        {}", names.join(", "));
    println!("entries checked:   {}", report.checked);
    println!("max abs error:     {:.3e}", report.max_abs_error);
    println!("max rel error*:    {:.3e}", report.max_rel_error);
    println!("mismatches:        {}", report.failures.len());
    println!("* over entries whose absolute error exceeds the absolute tolerance");
    Ok(())
}
