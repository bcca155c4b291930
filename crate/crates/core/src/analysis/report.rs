use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AnalysisError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub model: String,
    pub task: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl AccuracyRow {
    pub fn new(model: impl Into<String>, task: impl Into<String>, predicted: &[usize], truth: &[usize]) -> Self {
        let correct = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
        Self {
            model: model.into(),
            task: task.into(),
            correct,
            total: truth.len(),
            accuracy: accuracy(predicted, truth),
        }
    }
}

/// Share of positions where the prediction equals the truth; 0 when empty.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    let n = predicted.len().min(truth.len());
    if n == 0 {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / n as f64
}

pub fn write_accuracy_report(path: &Path, rows: &[AccuracyRow]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

const LOW: [f64; 3] = [255.0, 255.0, 255.0];
const HIGH: [f64; 3] = [8.0, 48.0, 107.0];

/// RGB pixels, `cell` pixels per matrix entry, white at the matrix minimum
/// ramping linearly to dark blue at its maximum.
fn rasterize(m: &[Vec<f64>], cell: usize) -> Result<(usize, usize, Vec<u8>), AnalysisError> {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || m.iter().any(|r| r.len() != cols) {
        return Err(AnalysisError::Shape("heatmap needs a non-empty rectangular matrix".into()));
    }
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err(AnalysisError::Invalid("heatmap entries must be finite".into()));
    }
    let cell = cell.max(1);
    let lo = m.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = m.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = (cols * cell, rows * cell);
    let mut data = Vec::with_capacity(w * h * 3);
    for r in m {
        let line: Vec<u8> = r
            .iter()
            .flat_map(|&v| {
                let t = (v - lo) / span;
                let px: Vec<u8> = (0..3).map(|c| (LOW[c] + t * (HIGH[c] - LOW[c])).round() as u8).collect();
                std::iter::repeat_n(px, cell).flatten()
            })
            .collect();
        for _ in 0..cell {
            data.extend_from_slice(&line);
        }
    }
    Ok((w, h, data))
}

pub fn heatmap_ppm(m: &[Vec<f64>], cell: usize, path: &Path) -> Result<(), AnalysisError> {
    let (w, h, data) = rasterize(m, cell)?;
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(&data)?;
    f.flush()?;
    Ok(())
}

pub fn heatmap_png(m: &[Vec<f64>], cell: usize, path: &Path) -> Result<(), AnalysisError> {
    let (w, h, data) = rasterize(m, cell)?;
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&data)?;
    writer.finish()?;
    Ok(())
}
