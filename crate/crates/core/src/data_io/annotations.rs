//! JSON-lines annotations and on-disk dataset directories
//! (`<dir>/<id>.ppm` plus `<dir>/annotations.jsonl`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::write_atomic;
use super::ppm::{read_ppm, write_ppm};
use super::shapes::{Annotation, Mask, Mode, ObjectAnnotation, Sample, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectRecord {
    pub cls: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub mask_rle: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub id: u64,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objects: Option<Vec<ObjectRecord>>,
}

impl AnnotationRecord {
    pub fn from_sample<T: Real>(s: &Sample<T>) -> Self {
        match &s.annotation {
            Annotation::Label(c) => Self { id: s.id, mode: Mode::Classification, label: Some(*c), objects: None },
            Annotation::Objects(objs) => Self {
                id: s.id,
                mode: Mode::Detection,
                label: None,
                objects: Some(
                    objs.iter()
                        .map(|o| ObjectRecord { cls: o.class, bbox: o.bbox, mask_rle: o.mask.to_rle() })
                        .collect(),
                ),
            },
        }
    }

    /// Validates the record against an image of `height x width` pixels.
    pub fn to_annotation(&self, height: usize, width: usize) -> Result<Annotation> {
        let bad = |msg: String| Err(Error::Annotation(format!("id {}: {msg}", self.id)));
        match (self.mode, self.label, &self.objects) {
            (Mode::Classification, Some(c), None) => {
                if c >= NUM_CLASSES {
                    return bad(format!("label {c} out of range"));
                }
                Ok(Annotation::Label(c))
            }
            (Mode::Detection, None, Some(objs)) => {
                if !(1..=4).contains(&objs.len()) {
                    return bad(format!("{} objects, expected 1 to 4", objs.len()));
                }
                let mut out = Vec::with_capacity(objs.len());
                for o in objs {
                    if o.cls >= NUM_CLASSES {
                        return bad(format!("class {} out of range", o.cls));
                    }
                    let [cx, cy, w, h] = o.bbox;
                    let inside = |c: f64, e: f64| e >= 0.0 && c - e / 2.0 >= -1e-9 && c + e / 2.0 <= 1.0 + 1e-9;
                    if !o.bbox.iter().all(|v| v.is_finite()) || !inside(cx, w) || !inside(cy, h) {
                        return bad(format!("box {:?} outside the image", o.bbox));
                    }
                    let Some(mask) = Mask::from_rle(height, width, &o.mask_rle) else {
                        return bad(format!("mask_rle does not cover {height}x{width} pixels"));
                    };
                    out.push(ObjectAnnotation { class: o.cls, bbox: o.bbox, mask });
                }
                Ok(Annotation::Objects(out))
            }
            (Mode::Classification, _, _) => bad("classification record needs a label and no objects".into()),
            (Mode::Detection, _, _) => bad("detection record needs objects and no label".into()),
        }
    }
}

pub fn write_annotations<T: Real>(samples: &[Sample<T>]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(&AnnotationRecord::from_sample(s))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_annotations(text: &str) -> Result<Vec<AnnotationRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Annotation(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn save_dataset<T: Real>(dir: &Path, samples: &[Sample<T>]) -> Result<()> {
    for s in samples {
        write_atomic(&dir.join(format!("{:05}.ppm", s.id)), &write_ppm(&s.image)?)?;
    }
    write_atomic(&dir.join("annotations.jsonl"), write_annotations(samples)?.as_bytes())
}

pub fn load_dataset<T: Real>(dir: &Path) -> Result<Vec<Sample<T>>> {
    let path = dir.join("annotations.jsonl");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    read_annotations(&text)?
        .into_iter()
        .map(|rec| {
            let p = dir.join(format!("{:05}.ppm", rec.id));
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let image = read_ppm(&bytes)?;
            let annotation = rec.to_annotation(image.shape()[0], image.shape()[1])?;
            Ok(Sample { id: rec.id, image, annotation })
        })
        .collect()
}
