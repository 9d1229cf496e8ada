//! Lists the keywords a cascaded model picks for individual test captions
//! next to the spoken tokens, and the most frequent hits per slot.
//!
//! cargo run --release --example keyword_inspection [SAMPLES] [ATTENTION_TSV]

use speechclip::evaluation::{eval_keywords, write_attention_maps};
use speechclip::model::ModelKind;
use speechclip::teachers::{generate_dataset, DatasetConfig, TeacherBundle, TeacherConfig};
use speechclip::training::{train, Preset, TrainConfig, TrainOptions};

fn main() -> speechclip::Result<()> {
    let mut args = std::env::args().skip(1);
    let shown: usize = args.next().map_or(12, |s| s.parse().expect("SAMPLES is an integer"));
    let attention = args.next();

    let teachers = TeacherBundle::build(TeacherConfig::default())?;
    let data = generate_dataset(&teachers, &DatasetConfig::default())?;
    let config = TrainConfig::preset(ModelKind::Cascaded, Preset::Desk);
    let model = train(&config, &data.train, &data.dev, &teachers, &TrainOptions::default())?.best_model;
    let (report, maps) = eval_keywords(&model, &data.test, &teachers)?;

    println!("{:>5}  {:<28} keywords (hits marked *)", "image", "tokens");
    for r in report.records.iter().take(shown) {
        let kws: Vec<String> = r
            .keywords
            .iter()
            .zip(&r.hits)
            .map(|(k, &h)| if h { format!("{k}*") } else { k.to_string() })
            .collect();
        println!("{:>5}  {:<28} {}", r.image_id, format!("{:?}", r.tokens), kws.join(" "));
    }
    for (slot, hits) in report.top_hits.iter().enumerate() {
        let top: Vec<String> = hits.iter().take(5).map(|(id, n)| format!("{id}x{n}")).collect();
        println!("slot {slot}: hit rate {:.3}  top {}", report.slot_hit_rate[slot], top.join(" "));
    }
    println!("average {:.3} vs chance {:.3}", report.average_hit_rate, report.chance_hit_rate);

    if let Some(path) = attention {
        write_attention_maps(&path, &report.records, &maps)?;
        println!("wrote {path}");
    }
    Ok(())
}
