use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use log::warn;

use super::{RawPoint, RawTrajectory, TrajError};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestReport {
    /// One trajectory per agent, ordered by agent id, points time-sorted.
    pub trajectories: Vec<RawTrajectory>,
    pub rows_read: usize,
    /// Rows skipped for unparseable or out-of-range fields.
    pub malformed_rows: usize,
    /// Points dropped because their agent already had a point at that time.
    pub duplicate_points: usize,
}

/// Epoch seconds (integer or decimal) or ISO-8601 / RFC 3339. Naive
/// date-times are taken as UTC.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then(|| v.floor() as i64);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    None
}

/// Reads `agent_id,lat,lon,timestamp` rows (extra columns ignored, any order).
pub fn ingest_reader<R: Read>(reader: R) -> Result<IngestReport, TrajError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| TrajError::MissingColumn(name.to_string()))
    };
    let (ia, ilat, ilon, it) = (col("agent_id")?, col("lat")?, col("lon")?, col("timestamp")?);

    let mut by_agent: BTreeMap<String, Vec<RawPoint>> = BTreeMap::new();
    let mut report = IngestReport::default();
    let mut record = csv::StringRecord::new();
    let mut line = 1u64;
    loop {
        match rdr.read_record(&mut record) {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) => {
                // ragged or non-UTF-8 row
                report.rows_read += 1;
                report.malformed_rows += 1;
                warn!("skipping unreadable row: {e}");
                continue;
            }
        }
        line += 1;
        report.rows_read += 1;
        let parsed = (|| {
            let agent = record.get(ia)?;
            let lat: f64 = record.get(ilat)?.parse().ok()?;
            let lon: f64 = record.get(ilon)?.parse().ok()?;
            let t = parse_timestamp(record.get(it)?)?;
            let ok = !agent.is_empty() && (-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon);
            ok.then_some((agent, RawPoint { lat, lon, t }))
        })();
        match parsed {
            Some((agent, p)) => match by_agent.get_mut(agent) {
                Some(v) => v.push(p),
                None => {
                    by_agent.insert(agent.to_string(), vec![p]);
                }
            },
            None => {
                report.malformed_rows += 1;
                warn!("line {line}: malformed row skipped");
            }
        }
    }
    for (agent, points) in by_agent {
        let mut traj = RawTrajectory::new(agent, points);
        report.duplicate_points += traj.normalize();
        report.trajectories.push(traj);
    }
    if report.malformed_rows > 0 {
        warn!("{} of {} rows were malformed", report.malformed_rows, report.rows_read);
    }
    Ok(report)
}

pub fn ingest_csv(path: &Path) -> Result<IngestReport, TrajError> {
    ingest_reader(std::fs::File::open(path)?)
}
