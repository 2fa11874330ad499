//! Annotation, occupancy and detection files.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::OccupancyMap;
use crate::geometry::CropRect;
use crate::nms::DetectionCandidate;
use crate::{Error, Result};

/// One annotated person: `{"frame", "cell", "person"}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub frame: u64,
    pub cell: usize,
    pub person: u32,
}

/// One detection: `{"frame", "cell", "score", "rects"}` with
/// `[x0, y0, x1, y1]` or `null` per view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub frame: u64,
    pub cell: usize,
    pub score: f64,
    pub rects: Vec<Option<[f64; 4]>>,
}

impl DetectionRecord {
    pub fn from_candidate(frame: u64, c: &DetectionCandidate) -> Self {
        Self {
            frame,
            cell: c.cell,
            score: c.score,
            rects: c.rects.iter().map(|r| r.map(|r| r.as_array())).collect(),
        }
    }

    pub fn to_candidate(&self) -> DetectionCandidate {
        DetectionCandidate {
            cell: self.cell,
            score: self.score,
            rects: self
                .rects
                .iter()
                .map(|r| r.map(|[x0, y0, x1, y1]| CropRect::new(x0, y0, x1, y1)))
                .collect(),
        }
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, rows: &[Annotation]) -> Result<()> {
    write_jsonl(path, rows)
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    read_jsonl(path)
}

pub fn write_detections(path: &Path, rows: &[DetectionRecord]) -> Result<()> {
    write_jsonl(path, rows)
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    read_jsonl(path)
}

/// CSV with header `frame,cell,q`.
pub fn write_occupancy_csv(path: &Path, maps: &[OccupancyMap]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["frame", "cell", "q"])?;
    for m in maps {
        for (c, q) in m.q.iter().enumerate() {
            w.write_record([m.frame_id.to_string(), c.to_string(), q.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_occupancy_csv(path: &Path) -> Result<Vec<OccupancyMap>> {
    #[derive(Deserialize)]
    struct Row {
        frame: u64,
        cell: usize,
        q: f64,
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut maps: Vec<OccupancyMap> = Vec::new();
    for row in r.deserialize() {
        let row: Row = row?;
        if maps.last().map_or(true, |m| m.frame_id != row.frame) {
            maps.push(OccupancyMap {
                frame_id: row.frame,
                q: Vec::new(),
            });
        }
        let m = maps.last_mut().expect("pushed above");
        if row.cell != m.q.len() {
            return Err(Error::Format(format!(
                "{}: frame {} lists cell {} out of order",
                path.display(),
                row.frame,
                row.cell
            )));
        }
        m.q.push(row.q);
    }
    Ok(maps)
}

/// Convenience for tests and tools: parse a whole file as JSON lines of
/// arbitrary values.
pub fn read_json_lines(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ann = vec![
            Annotation { frame: 0, cell: 3, person: 1 },
            Annotation { frame: 2, cell: 7, person: 0 },
        ];
        let p = dir.path().join("a.jsonl");
        write_annotations(&p, &ann).unwrap();
        assert_eq!(read_annotations(&p).unwrap(), ann);
        let first = fs::read_to_string(&p).unwrap();
        assert_eq!(first.lines().next().unwrap(), r#"{"frame":0,"cell":3,"person":1}"#);

        let det = vec![DetectionRecord {
            frame: 1,
            cell: 4,
            score: 0.75,
            rects: vec![Some([1.0, 2.0, 3.0, 4.0]), None],
        }];
        let p = dir.path().join("d.jsonl");
        write_detections(&p, &det).unwrap();
        let back = read_detections(&p).unwrap();
        assert_eq!(back, det);
        assert_eq!(DetectionRecord::from_candidate(1, &back[0].to_candidate()), det[0]);
        let v = read_json_lines(&p).unwrap();
        assert!(v[0]["rects"][1].is_null());

        let maps = vec![
            OccupancyMap { frame_id: 0, q: vec![0.1, 0.9] },
            OccupancyMap { frame_id: 5, q: vec![0.0, 1.0] },
        ];
        let p = dir.path().join("o.csv");
        write_occupancy_csv(&p, &maps).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with("frame,cell,q\n"));
        assert_eq!(read_occupancy_csv(&p).unwrap(), maps);
    }

    #[test]
    fn malformed_lines_report_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        fs::write(&p, "{\"frame\":0,\"cell\":1,\"person\":2}\n{\"frame\":\"x\"}\n").unwrap();
        let err = read_annotations(&p).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }
}
