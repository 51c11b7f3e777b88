use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_io::{csv_bytes, write_atomic, write_ppm};
use crate::error::{ensure, Result};
use crate::scalar::Real;
use crate::tensor_core::Tensor;

pub const GT_COLOR: [f64; 3] = [0.0, 1.0, 0.0];
pub const PRED_COLOR: [f64; 3] = [1.0, 0.0, 1.0];

/// One grid row: the input next to its reconstructions.
#[derive(Clone, Debug)]
pub struct ReportRow<T> {
    pub id: u64,
    pub input: Tensor<T>,
    /// `(label, image)` per reconstruction, e.g. one per stage.
    pub reconstructions: Vec<(String, Tensor<T>)>,
    /// Ground-truth `(cx, cy, w, h)` boxes drawn on the input tile.
    pub gt_boxes: Vec<[f64; 4]>,
    /// Predicted boxes, drawn on an extra copy of the input.
    pub pred_boxes: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, Default)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Clone, Debug, Default)]
pub struct ReportInput<T> {
    pub experiment: String,
    /// Resolved configuration snapshot (JSON).
    pub config: String,
    pub seeds: Vec<u64>,
    pub stage_mse: Vec<(String, f64)>,
    pub rows: Vec<ReportRow<T>>,
    pub tables: Vec<Table>,
}

/// Index of what a report wrote, stored as `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub images: Vec<PathBuf>,
    pub tables: Vec<PathBuf>,
}

/// Draws the outline of a normalized box onto an `[H x W x 3]` image.
pub fn draw_box<T: Real>(image: &mut Tensor<T>, bbox: [f64; 4], color: [f64; 3]) {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let [cx, cy, bw, bh] = bbox;
    let clamp = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
    let x0 = clamp(((cx - bw / 2.0) * w as f64).floor(), w);
    let x1 = clamp(((cx + bw / 2.0) * w as f64).ceil() - 1.0, w);
    let y0 = clamp(((cy - bh / 2.0) * h as f64).floor(), h);
    let y1 = clamp(((cy + bh / 2.0) * h as f64).ceil() - 1.0, h);
    let data = image.data_mut();
    let mut put = |y: usize, x: usize| {
        for c in 0..3 {
            data[(y * w + x) * 3 + c] = T::lit(color[c]);
        }
    };
    for x in x0..=x1.max(x0) {
        put(y0, x);
        put(y1.max(y0), x);
    }
    for y in y0..=y1.max(y0) {
        put(y, x0);
        put(y, x1.max(x0));
    }
}

/// Tiles same-sized `[H x W x 3]` images left to right with a white gutter.
pub fn montage<T: Real>(tiles: &[Tensor<T>], gutter: usize) -> Result<Tensor<T>> {
    ensure!(!tiles.is_empty(), "montage needs at least one tile");
    let shape = tiles[0].shape().to_vec();
    ensure!(tiles.iter().all(|t| t.shape() == shape.as_slice()), "montage tiles differ in shape");
    let (h, w) = (shape[0], shape[1]);
    let total_w = tiles.len() * w + (tiles.len() - 1) * gutter;
    let mut out = Tensor::full([h, total_w, 3], T::one());
    for (k, t) in tiles.iter().enumerate() {
        let x_off = k * (w + gutter);
        for y in 0..h {
            let src = &t.data()[y * w * 3..(y + 1) * w * 3];
            let dst = (y * total_w + x_off) * 3;
            out.data_mut()[dst..dst + w * 3].copy_from_slice(src);
        }
    }
    Ok(out)
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.9e}")
}

/// Writes image grids, CSV tables, the config snapshot and a JSON index to
/// `dir`. Output bytes depend only on `input`.
pub fn emit_report<T: Real>(dir: &Path, input: &ReportInput<T>) -> Result<ReconstructionReport> {
    let mut images = Vec::new();
    let mut tables = Vec::new();
    for row in &input.rows {
        let mut tiles = Vec::with_capacity(row.reconstructions.len() + 2);
        let mut first = row.input.clone();
        for &b in &row.gt_boxes {
            draw_box(&mut first, b, GT_COLOR);
        }
        tiles.push(first);
        if !row.pred_boxes.is_empty() {
            let mut pred = row.input.clone();
            for &b in &row.pred_boxes {
                draw_box(&mut pred, b, PRED_COLOR);
            }
            tiles.push(pred);
        }
        tiles.extend(row.reconstructions.iter().map(|(_, r)| r.clone()));
        let name = PathBuf::from(format!("grid_{:05}.ppm", row.id));
        write_atomic(&dir.join(&name), &write_ppm(&montage(&tiles, 2)?)?)?;
        images.push(name);
    }
    let mut write_table = |name: &str, header: &[&str], rows: &[Vec<String>]| -> Result<()> {
        let file = PathBuf::from(format!("{name}.csv"));
        write_atomic(&dir.join(&file), &csv_bytes(header, rows)?)?;
        tables.push(file);
        Ok(())
    };
    let stage_rows: Vec<Vec<String>> =
        input.stage_mse.iter().map(|(s, v)| vec![s.clone(), fmt_f64(*v)]).collect();
    write_table("stage_mse", &["stage", "mse"], &stage_rows)?;
    let grid_rows: Vec<Vec<String>> = input
        .rows
        .iter()
        .map(|r| {
            let labels: Vec<&str> = r.reconstructions.iter().map(|(l, _)| l.as_str()).collect();
            vec![r.id.to_string(), format!("grid_{:05}.ppm", r.id), labels.join(";")]
        })
        .collect();
    write_table("grids", &["id", "file", "columns"], &grid_rows)?;
    for t in &input.tables {
        let header: Vec<&str> = t.header.iter().map(String::as_str).collect();
        write_table(&t.name, &header, &t.rows)?;
    }
    write_atomic(&dir.join("config.json"), input.config.as_bytes())?;
    let report = ReconstructionReport {
        experiment: input.experiment.clone(),
        seeds: input.seeds.clone(),
        images,
        tables,
    };
    write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn montage_places_tiles() {
        let a = Tensor::<f64>::zeros([2, 2, 3]);
        let m = montage(&[a.clone(), a], 1).unwrap();
        assert_eq!(m.shape(), &[2, 5, 3]);
        assert_eq!(m.data()[2 * 3], 1.0);
        assert_eq!(m.data()[3 * 3], 0.0);
    }

    #[test]
    fn box_outline_stays_inside() {
        let mut img = Tensor::<f64>::zeros([8, 8, 3]);
        draw_box(&mut img, [0.5, 0.5, 0.5, 0.5], [1.0, 0.0, 0.0]);
        assert_eq!(img.data()[(2 * 8 + 2) * 3], 1.0);
        assert_eq!(img.data()[(4 * 8 + 4) * 3], 0.0);
        draw_box(&mut img, [0.0, 1.0, 2.0, 2.0], [0.0, 1.0, 0.0]);
    }
}
