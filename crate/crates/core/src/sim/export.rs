use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::SimError;
use crate::traj::RawTrajectory;

pub const CSV_NAME: &str = "trajectories.csv";
pub const LABELS_NAME: &str = "labels.json";

/// Writes the ingestion CSV (`agent_id,lat,lon,timestamp`, epoch seconds).
pub fn write_csv(path: &Path, trajs: &[RawTrajectory]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["agent_id", "lat", "lon", "timestamp"])?;
    let mut lat = String::new();
    let mut lon = String::new();
    for traj in trajs {
        for p in &traj.points {
            use std::fmt::Write as _;
            lat.clear();
            lon.clear();
            // shortest representation that parses back to the same f64
            write!(lat, "{}", p.lat).expect("write to string");
            write!(lon, "{}", p.lon).expect("write to string");
            w.write_record([traj.agent_id.as_str(), &lat, &lon, &p.t.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_labels(path: &Path, labels: &BTreeMap<String, u32>) -> Result<(), SimError> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, labels)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, u32>, SimError> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Writes `trajectories.csv` and `labels.json` into `dir` and returns both paths.
pub fn export_dataset(
    dir: &Path,
    trajs: &[RawTrajectory],
    labels: &BTreeMap<String, u32>,
) -> Result<(PathBuf, PathBuf), SimError> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(CSV_NAME);
    let labels_path = dir.join(LABELS_NAME);
    write_csv(&csv_path, trajs)?;
    write_labels(&labels_path, labels)?;
    Ok((csv_path, labels_path))
}
