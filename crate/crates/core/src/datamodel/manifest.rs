//! Line-delimited JSON manifests.
//!
//! ```text
//! {"id":"a","image_path":"a.png","audio_path":"a.wav","boxes":[[0,0,10,10]]}
//! {"id":"b","image_path":"b.png","audio_path":"b.wav","mask_path":"b_mask.png"}
//! {"id":"c","image_path":"c.png","audio_path":"c.wav","polarity":"non_audible"}
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Annotation, BoundingBox, Dataset, Polarity, SampleRecord, Split};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    image_path: String,
    audio_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<BoundingBox>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "is_positive")]
    polarity: Polarity,
}

fn is_positive(p: &Polarity) -> bool {
    p.is_positive()
}

impl ManifestLine {
    fn into_record(self) -> std::result::Result<SampleRecord, String> {
        let annotation = match (self.boxes, self.mask_path) {
            (Some(_), Some(_)) => return Err("both `boxes` and `mask_path` present".into()),
            (Some(boxes), None) => {
                for b in &boxes {
                    if !(b.x_min <= b.x_max && b.y_min <= b.y_max) {
                        return Err(format!("malformed box {:?}", <[f64; 4]>::from(*b)));
                    }
                }
                Some(Annotation::Boxes(boxes))
            }
            (None, Some(p)) => Some(Annotation::Mask(p)),
            (None, None) => None,
        };
        Ok(SampleRecord {
            id: self.id,
            image_path: self.image_path,
            audio_path: self.audio_path,
            annotation,
            polarity: self.polarity,
        })
    }

    fn from_record(r: &SampleRecord) -> Self {
        let (boxes, mask_path) = match &r.annotation {
            Some(Annotation::Boxes(b)) => (Some(b.clone()), None),
            Some(Annotation::Mask(p)) => (None, Some(p.clone())),
            None => (None, None),
        };
        Self {
            id: r.id.clone(),
            image_path: r.image_path.clone(),
            audio_path: r.audio_path.clone(),
            boxes,
            mask_path,
            polarity: r.polarity,
        }
    }
}

/// Parse manifest text. `origin` only labels error messages.
pub fn parse_manifest(text: &str, origin: &str, split: Split, root: &Path) -> Result<Dataset> {
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::ManifestParse {
            path: origin.to_string(),
            line: idx + 1,
            msg,
        };
        let parsed: ManifestLine = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        records.push(parsed.into_record().map_err(err)?);
    }
    Dataset::new(records, split, root)
}

pub fn load_manifest(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, &path.display().to_string(), split, &root)
}

pub fn manifest_to_string(dataset: &Dataset) -> Result<String> {
    let mut out = String::new();
    for r in &dataset.records {
        out.push_str(&serde_json::to_string(&ManifestLine::from_record(r))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, manifest_to_string(dataset)?).map_err(|e| Error::io(path, e))
}
