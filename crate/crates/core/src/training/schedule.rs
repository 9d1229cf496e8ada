use crate::error::{Error, Result};

/// Linear warmup from 0 to `peak_lr` over `[0, warmup_steps]`, then linear
/// decay to `floor_lr` at `total_steps`.
pub fn lr_schedule(step: u64, warmup_steps: u64, total_steps: u64, peak_lr: f64, floor_lr: f64) -> Result<f64> {
    if warmup_steps >= total_steps {
        return Err(Error::Parameter(format!(
            "warmup steps {warmup_steps} must be below total steps {total_steps}"
        )));
    }
    if step > total_steps {
        return Err(Error::Parameter(format!("step {step} is beyond total steps {total_steps}")));
    }
    if step <= warmup_steps {
        if warmup_steps == 0 {
            return Ok(peak_lr);
        }
        return Ok(peak_lr * (step as f64 / warmup_steps as f64));
    }
    let frac = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(peak_lr * (1.0 - frac) + floor_lr * frac)
}

#[cfg(test)]
mod tests {
    use super::*;

    const PAPER: (u64, u64, f64, f64) = (5_000, 50_000, 1e-4, 1e-8);

    fn paper(step: u64) -> f64 {
        lr_schedule(step, PAPER.0, PAPER.1, PAPER.2, PAPER.3).unwrap()
    }

    #[test]
    fn paper_preset_anchor_points() {
        assert_eq!(paper(5_000), 1e-4);
        assert_eq!(paper(50_000), 1e-8);
        assert!((paper(2_500) - 5e-5).abs() <= 1e-20);
        assert_eq!(paper(0), 0.0);
    }

    #[test]
    fn continuous_at_the_warmup_boundary() {
        // Both segment formulas evaluated at the boundary.
        let warm = 1e-4 * (5_000.0 / 5_000.0);
        let decay = 1e-4 * (1.0 - 0.0) + 1e-8 * 0.0;
        assert_eq!(warm, decay);
        assert_eq!(paper(5_000), warm);
        let after = paper(5_001);
        assert!(after < 1e-4 && 1e-4 - after < 1e-8);
    }

    #[test]
    fn monotone_segments() {
        for s in 1..=5_000 {
            assert!(paper(s) > paper(s - 1));
        }
        for s in 5_001..=50_000 {
            assert!(paper(s) < paper(s - 1));
        }
    }

    #[test]
    fn out_of_range_step_is_rejected() {
        assert!(matches!(lr_schedule(50_001, 5_000, 50_000, 1e-4, 1e-8), Err(Error::Parameter(_))));
        assert!(lr_schedule(10, 20, 20, 1e-3, 1e-6).is_err());
    }
}
