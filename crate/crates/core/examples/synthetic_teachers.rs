//! Builds the simulated frozen teachers and a small paired corpus, and
//! reports the properties training relies on.
//!
//! cargo run --example synthetic_teachers [OUT_DIR]

use speechclip::teachers::{generate_dataset, write_dataset, DatasetConfig, Split, TeacherBundle, TeacherConfig};

fn main() -> speechclip::Result<()> {
    let teachers = TeacherBundle::build(TeacherConfig::default())?;
    let c = teachers.config();
    println!("V={} D_t={} D_a={} layers={}", c.vocab, c.d_text, c.d_audio, c.layers + 1);
    println!("noise per layer      {:?}", teachers.noise_scales());
    println!("informative layer    {}", teachers.informative_layer());
    println!("|Q^T Q - I|_max      {:.2e}", teachers.orthogonality_error());
    let (mean, var) = teachers.subword_statistics();
    println!("subword mean[..4]    {:?}", &mean[..4]);
    println!("subword var[..4]     {:?}", &var[..4]);
    println!("checksum             {:016x}", teachers.checksum());

    let data = generate_dataset(
        &teachers,
        &DatasetConfig {
            images: 50,
            ..DatasetConfig::default()
        },
    )?;
    let s = &data.train.samples[0];
    println!(
        "first caption: image {} tokens {:?} durations {:?} ({} frames)",
        s.image_id,
        s.tokens,
        s.durations,
        s.frames()
    );
    let text = teachers.text_embedding(&s.tokens)?;
    let image = s.image_embedding();
    let cos: f64 = text.iter().zip(&image).map(|(a, b)| a * b).sum();
    println!("cos(text, image) of that caption: {cos:.4}");

    if let Some(out) = std::env::args().nth(1) {
        std::fs::create_dir_all(&out).map_err(|e| speechclip::Error::io(&out, e))?;
        for split in Split::ALL {
            write_dataset(std::path::Path::new(&out).join(split.file_name()), data.get(split))?;
        }
        println!("wrote splits to {out}");
    }
    Ok(())
}
