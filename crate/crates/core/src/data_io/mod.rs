//! Synthetic data and on-disk formats.

pub mod annotations;
pub mod checkpoint;
pub mod ppm;
pub mod shapes;

pub use annotations::{load_dataset, read_annotations, save_dataset, write_annotations, AnnotationRecord};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_atomic, write_checkpoint, Checkpoint, FORMAT_VERSION,
};
pub use ppm::{read_ppm, write_ppm};
pub use shapes::{
    generate_shapes_sample, generate_split, generate_splits, mean_image, Annotation, Mask, Mode, ObjectAnnotation,
    Sample, ShapeClass, SplitSizes, Splits, NUM_CLASSES,
};

use std::path::Path;

use crate::error::Result;

/// Writes a CSV table (header row, '.' decimals) atomically.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_atomic(path, &csv_bytes(header, rows)?)
}

pub fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()).into())
}
