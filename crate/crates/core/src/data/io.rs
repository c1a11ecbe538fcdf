//! On-disk recording layout:
//!
//! ```text
//! subject_<id>/eye.csv      header of 38 channel names, one row per 30 Hz sample
//! subject_<id>/head.csv     header of 12 channel names, one row per 30 Hz sample
//! subject_<id>/phy.csv      header eda,bvp,skt, one row per second
//! subject_<id>/frames.ptgv  frame features, one row per frame at 30 fps
//! subject_<id>/labels.csv   time_s,label
//! ```

use std::path::{Path, PathBuf};

use super::{Stream, SubjectRecording};
use crate::encoders::Modality;
use crate::error::{Error, Result};
use crate::video::{read_ptgv, write_ptgv};

const FILES: [&str; 5] = ["eye.csv", "head.csv", "phy.csv", "frames.ptgv", "labels.csv"];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::schema(path.display().to_string(), format!("{other:?}")),
    }
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::schema(path.display().to_string(), format!("row {}: {e}", i + 1)))?;
        rows.push(row);
    }
    Ok((header, rows))
}

fn read_stream(dir: &Path, m: Modality) -> Result<Stream> {
    let path = dir.join(format!("{}.csv", m.name()));
    let (names, rows) = read_table(&path)?;
    if names.len() != m.nodes() {
        return Err(Error::schema(
            format!("{}.csv channels", m.name()),
            format!("expected {} channels, found {}", m.nodes(), names.len()),
        ));
    }
    let data = rows.into_iter().flatten().map(|v| v as f32).collect();
    Ok(Stream { names, rate: m.rate(), data })
}

fn subject_id(dir: &Path) -> Result<u32> {
    dir.file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_prefix("subject_"))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::schema(dir.display().to_string(), "directory must be named subject_<id>"))
}

pub fn load_recording(dir: &Path) -> Result<SubjectRecording> {
    let missing: Vec<&str> = FILES.iter().copied().filter(|f| !dir.join(f).is_file()).collect();
    if !missing.is_empty() {
        return Err(Error::schema(dir.display().to_string(), format!("missing streams: {}", missing.join(", "))));
    }
    let subject_id = subject_id(dir)?;
    let eye = read_stream(dir, Modality::Eye)?;
    let head = read_stream(dir, Modality::Head)?;
    let phy = read_stream(dir, Modality::Phy)?;
    let frames = read_ptgv(&dir.join("frames.ptgv"))?;
    let (header, rows) = read_table(&dir.join("labels.csv"))?;
    if header != ["time_s", "label"] {
        return Err(Error::schema("labels.csv header", format!("expected time_s,label, found {}", header.join(","))));
    }
    let mut labels = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        if row.len() != 2 || (row[0] - i as f64).abs() > 1e-6 {
            return Err(Error::schema("labels.csv rate", format!("row {} is not at {i} s", i + 1)));
        }
        if row[1] < 0.0 || row[1].fract() != 0.0 || row[1] > 10.0 {
            return Err(Error::schema("labels.csv label", format!("row {}: level {} outside 0..10", i + 1, row[1])));
        }
        labels.push(row[1] as u8);
    }
    let rec = SubjectRecording { subject_id, eye, head, phy, frames, labels };
    rec.validate()?;
    Ok(rec)
}

fn write_table(path: &Path, header: &[String], data: &[f32]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in data.chunks(header.len()) {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn recording_dir(root: &Path, id: u32) -> PathBuf {
    root.join(format!("subject_{id}"))
}

pub fn save_recording(rec: &SubjectRecording, dir: &Path) -> Result<()> {
    rec.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for m in Modality::ALL {
        let s = rec.stream(m);
        write_table(&dir.join(format!("{}.csv", m.name())), &s.names, &s.data)?;
    }
    write_ptgv(&dir.join("frames.ptgv"), &rec.frames)?;
    let path = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["time_s", "label"]).map_err(|e| csv_err(&path, e))?;
    for (i, l) in rec.labels.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn save_dataset(recs: &[SubjectRecording], root: &Path) -> Result<()> {
    recs.iter().try_for_each(|r| save_recording(r, &recording_dir(root, r.subject_id)))
}

/// Loads every `subject_<id>` directory under `root`, ordered by id.
pub fn load_dataset(root: &Path) -> Result<Vec<SubjectRecording>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(root, e))?.path();
        if p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("subject_")) {
            dirs.push((subject_id(&p)?, p));
        }
    }
    if dirs.is_empty() {
        return Err(Error::Data(format!("no subject_<id> directories under {}", root.display())));
    }
    dirs.sort();
    dirs.iter().map(|(_, p)| load_recording(p)).collect()
}
