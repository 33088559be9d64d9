//! Easy-to-hard cosine crop-scale schedule.

use super::SynthError;

/// δ_t = δ_l + (δ_u − δ_l)·(1 + cos(π·t/T))/2. Starts at δ_u, ends at δ_l,
/// nonincreasing in between.
pub fn e2h_schedule(t: usize, total: usize, delta_l: f64, delta_u: f64) -> Result<f64, SynthError> {
    if total == 0 {
        return Err(SynthError::Config("schedule needs T >= 1".into()));
    }
    if t > total {
        return Err(SynthError::ScheduleRange { t, total });
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(delta_l + (delta_u - delta_l) * (1.0 + phase.cos()) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_exact() {
        for total in [1usize, 7, 500] {
            assert_eq!(e2h_schedule(0, total, 0.08, 1.0).unwrap(), 1.0);
            assert_eq!(e2h_schedule(total, total, 0.08, 1.0).unwrap(), 0.08);
        }
    }

    #[test]
    fn midpoint_is_average() {
        let mid = e2h_schedule(250, 500, 0.08, 1.0).unwrap();
        assert!((mid - (0.08 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn nonincreasing() {
        for total in [1usize, 7, 500] {
            let mut prev = f64::INFINITY;
            for t in 0..=total {
                let v = e2h_schedule(t, total, 0.08, 1.0).unwrap();
                assert!(v <= prev, "t={t} total={total}");
                prev = v;
            }
        }
    }

    #[test]
    fn step_past_total_errors() {
        assert!(matches!(
            e2h_schedule(8, 7, 0.08, 1.0),
            Err(SynthError::ScheduleRange { t: 8, total: 7 })
        ));
    }
}
