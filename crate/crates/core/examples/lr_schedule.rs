//! Prints the warmup/decay schedules of both presets as CSV.
//!
//! cargo run --example lr_schedule > schedule.csv

use speechclip::model::ModelKind;
use speechclip::training::{lr_schedule, Preset, TrainConfig};

fn main() -> speechclip::Result<()> {
    println!("preset,step,lr");
    for preset in [Preset::Desk, Preset::Paper] {
        let c = TrainConfig::preset(ModelKind::Parallel, preset);
        let every = (c.total_steps / 100).max(1);
        for step in (0..=c.total_steps).step_by(every as usize) {
            let lr = lr_schedule(step, c.warmup_steps, c.total_steps, c.peak_lr, c.floor_lr)?;
            println!("{preset},{step},{lr:e}");
        }
    }
    Ok(())
}
