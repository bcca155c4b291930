use super::{RawTrajectory, TrajError};

pub const DAY_SECONDS: i64 = 86_400;

/// Index of the window containing `t`, with windows starting at local midnight
/// when `window` is a day and `timezone_offset` is the local UTC offset.
pub fn window_index(t: i64, window: i64, timezone_offset: i64) -> i64 {
    (t + timezone_offset).div_euclid(window)
}

/// Splits a time-sorted trajectory into consecutive fixed-length windows.
/// Empty windows are omitted; each output keeps the agent id.
pub fn partition_windows(
    traj: &RawTrajectory,
    window: i64,
    timezone_offset: i64,
) -> Result<Vec<(i64, RawTrajectory)>, TrajError> {
    if window <= 0 {
        return Err(TrajError::InvalidParameter(format!("window must be positive, got {window}")));
    }
    let mut out: Vec<(i64, RawTrajectory)> = Vec::new();
    for p in &traj.points {
        let k = window_index(p.t, window, timezone_offset);
        match out.last_mut() {
            Some((last_k, w)) if *last_k == k => w.points.push(*p),
            _ => out.push((k, RawTrajectory::new(traj.agent_id.clone(), vec![*p]))),
        }
    }
    Ok(out)
}
