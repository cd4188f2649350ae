//! CSV manifests: `path,label,x0,y0,x1,y1`, one sample per row, with the
//! ground-truth box in inclusive pixel coordinates (`x` is the column).

use std::path::{Path, PathBuf};

use crate::attention::BBox;
use crate::error::{Error, Result};

pub const HEADER: &str = "path,label,x0,y0,x1,y1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    /// Relative to the dataset root.
    pub path: PathBuf,
    pub label: usize,
    pub bbox: BBox,
}

pub fn encode_manifest(records: &[SampleRecord]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.path.display(),
            r.label,
            r.bbox.left,
            r.bbox.top,
            r.bbox.right,
            r.bbox.bottom
        ));
    }
    out
}

pub fn decode_manifest(text: &str) -> Result<Vec<SampleRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Manifest {
        line: 1,
        message: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>().join(",") != HEADER {
        return Err(Error::Manifest {
            line: 1,
            message: format!("expected header `{HEADER}`"),
        });
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Manifest {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| Error::Manifest { line, message };
        if row.len() != 6 {
            return Err(bad(format!("expected 6 fields, got {}", row.len())));
        }
        let int = |idx: usize, name: &str| -> Result<usize> {
            row[idx]
                .parse::<usize>()
                .map_err(|_| bad(format!("field `{name}` is not a non-negative integer: `{}`", &row[idx])))
        };
        let label = int(1, "label")?;
        let (x0, y0, x1, y1) = (int(2, "x0")?, int(3, "y0")?, int(4, "x1")?, int(5, "y1")?);
        if x1 < x0 || y1 < y0 {
            return Err(bad(format!("box is not ordered: ({x0},{y0})-({x1},{y1})")));
        }
        if row[0].is_empty() {
            return Err(bad("empty path".into()));
        }
        records.push(SampleRecord {
            path: PathBuf::from(&row[0]),
            label,
            bbox: BBox {
                top: y0,
                left: x0,
                bottom: y1,
                right: x1,
            },
        });
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    std::fs::write(path, encode_manifest(records)).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_manifest(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_manifest_is_header_only() {
        let text = encode_manifest(&[]);
        assert_eq!(text, "path,label,x0,y0,x1,y1\n");
        assert!(decode_manifest(&text).unwrap().is_empty());
    }

    #[test]
    fn unordered_box_reports_line() {
        let text = "path,label,x0,y0,x1,y1\na.ppm,0,1,1,4,4\nb.ppm,1,5,0,3,2\n";
        match decode_manifest(text).unwrap_err() {
            Error::Manifest { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_fields() {
        assert!(decode_manifest("path,label,x0,y0,x1,y1\na.ppm,zero,1,1,4,4\n").is_err());
        assert!(decode_manifest("path,label,x0,y0,x1,y1\na.ppm,0,1,1,4\n").is_err());
        assert!(decode_manifest("file,label\n").is_err());
    }

    proptest! {
        #[test]
        fn round_trip(rows in prop::collection::vec((0usize..10, 0usize..50, 0usize..50, 0usize..20, 0usize..20), 0..40)) {
            let records: Vec<SampleRecord> = rows.iter().enumerate().map(|(i, &(label, x, y, dw, dh))| SampleRecord {
                path: PathBuf::from(format!("train/{i:06}.ppm")),
                label,
                bbox: BBox { top: y, left: x, bottom: y + dh, right: x + dw },
            }).collect();
            prop_assert_eq!(decode_manifest(&encode_manifest(&records)).unwrap(), records);
        }
    }
}
