//! Video manifests and fixation files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One manifest line. Paths are absolute or relative to the manifest file.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub frames_dir: PathBuf,
    /// `None` when the manifest field is `-` (RGB-only data).
    pub depth_dir: Option<PathBuf>,
    pub fixations_file: PathBuf,
    pub width: u32,
    pub height: u32,
    pub split: Split,
}

pub const MANIFEST_FIELDS: usize = 7;

/// Parse a tab-separated manifest. Blank lines and `#` comments are skipped.
/// Referenced paths are not touched here; see [`Video::load`].
pub fn parse_manifest(path: &Path) -> Result<Vec<VideoRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest_str(&text, base, path)
}

pub fn parse_manifest_str(text: &str, base: &Path, origin: &Path) -> Result<Vec<VideoRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse { path: origin.to_path_buf(), line: line_no, message };
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != MANIFEST_FIELDS {
            return Err(err(format!("expected {MANIFEST_FIELDS} tab-separated fields, found {}", fields.len())));
        }
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let dim = |s: &str, name: &str| -> Result<u32> {
            match s.parse::<u32>() {
                Ok(v) if v >= 1 => Ok(v),
                _ => Err(err(format!("{name} must be a positive integer, got `{s}`"))),
            }
        };
        if fields[0].is_empty() {
            return Err(err("empty video_id".into()));
        }
        records.push(VideoRecord {
            video_id: fields[0].to_string(),
            frames_dir: resolve(fields[1]),
            depth_dir: (fields[2] != "-" && !fields[2].is_empty()).then(|| resolve(fields[2])),
            fixations_file: resolve(fields[3]),
            width: dim(fields[4], "width")?,
            height: dim(fields[5], "height")?,
            split: fields[6].parse().map_err(err)?,
        });
    }
    Ok(records)
}

/// Serialize records with paths relative to `base` where possible.
pub fn format_manifest(records: &[VideoRecord], base: &Path) -> String {
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
    let mut out = String::new();
    for r in records {
        let depth = r.depth_dir.as_deref().map_or_else(|| "-".to_string(), rel);
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.video_id,
            rel(&r.frames_dir),
            depth,
            rel(&r.fixations_file),
            r.width,
            r.height,
            r.split
        ));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixationPoint {
    /// Column, in original-resolution pixels.
    pub x: f64,
    /// Row, in original-resolution pixels.
    pub y: f64,
    pub viewer_id: u32,
}

/// All viewers' fixations on one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FixationSet {
    pub frame_index: usize,
    pub points: Vec<FixationPoint>,
}

impl FixationSet {
    /// Mirror along the width axis of a `width`-pixel frame.
    pub fn mirrored(&self, width: u32) -> FixationSet {
        let w = width as f64;
        FixationSet {
            frame_index: self.frame_index,
            points: self.points.iter().map(|p| FixationPoint { x: w - 1.0 - p.x, ..*p }).collect(),
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct FixationRow {
    frame_index: usize,
    viewer_id: u32,
    x: f64,
    y: f64,
}

pub const FIXATION_HEADER: [&str; 4] = ["frame_index", "viewer_id", "x", "y"];

/// Read a fixation CSV, grouping points by frame and validating coordinates
/// against the original frame size.
pub fn read_fixations(path: &Path, width: u32, height: u32) -> Result<BTreeMap<usize, FixationSet>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != FIXATION_HEADER {
        return Err(Error::Parse { path: path.to_path_buf(), line: 1, message: format!("expected header `{}`", FIXATION_HEADER.join(",")) });
    }
    let mut frames: BTreeMap<usize, FixationSet> = BTreeMap::new();
    for (i, row) in reader.deserialize::<FixationRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse { path: path.to_path_buf(), line, message: e.to_string() })?;
        if !(row.x >= 0.0 && row.x < width as f64 && row.y >= 0.0 && row.y < height as f64) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("fixation ({}, {}) outside {width}x{height} frame", row.x, row.y),
            });
        }
        frames
            .entry(row.frame_index)
            .or_insert_with(|| FixationSet { frame_index: row.frame_index, points: Vec::new() })
            .points
            .push(FixationPoint { x: row.x, y: row.y, viewer_id: row.viewer_id });
    }
    Ok(frames)
}

pub fn write_fixations(path: &Path, frames: &[FixationSet]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for set in frames {
        for p in &set.points {
            w.serialize(FixationRow { frame_index: set.frame_index, viewer_id: p.viewer_id, x: p.x, y: p.y })
                .map_err(|e| csv_error(path, e))?;
        }
    }
    if frames.iter().all(|f| f.points.is_empty()) {
        w.write_record(FIXATION_HEADER).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse { path: path.to_path_buf(), line: 0, message: format!("{other:?}") },
    }
}

pub const FRAME_EXTENSION: &str = "png";

pub fn frame_file(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame_{index:06}.{FRAME_EXTENSION}"))
}

/// Number of consecutively numbered frames `frame_000000 ..` in `dir`.
pub fn count_frames(dir: &Path) -> Result<usize> {
    if !dir.is_dir() {
        return Err(Error::Resolve { what: "frames directory", path: dir.to_path_buf() });
    }
    let mut indices = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name();
        let name = name.to_string_lossy();
        if let Some(idx) = name
            .strip_prefix("frame_")
            .and_then(|r| r.strip_suffix(&format!(".{FRAME_EXTENSION}")))
            .filter(|d| d.len() == 6)
            .and_then(|d| d.parse::<usize>().ok())
        {
            indices.push(idx);
        }
    }
    indices.sort_unstable();
    if indices.is_empty() {
        return Err(Error::Resolve { what: "frames (none found)", path: dir.to_path_buf() });
    }
    if indices.iter().enumerate().any(|(i, &v)| i != v) {
        return Err(Error::Input(format!("{}: frame numbering is not contiguous from 0", dir.display())));
    }
    Ok(indices.len())
}

/// A manifest record with its frame count resolved and fixations loaded.
#[derive(Clone, Debug)]
pub struct Video {
    pub record: VideoRecord,
    pub frame_count: usize,
    pub fixations: BTreeMap<usize, FixationSet>,
}

impl Video {
    pub fn load(record: VideoRecord) -> Result<Video> {
        let frame_count = count_frames(&record.frames_dir)?;
        if !record.fixations_file.is_file() {
            return Err(Error::Resolve { what: "fixations file", path: record.fixations_file.clone() });
        }
        let fixations = read_fixations(&record.fixations_file, record.width, record.height)?;
        if let Some((&last, _)) = fixations.iter().next_back() {
            if last >= frame_count {
                return Err(Error::Input(format!(
                    "{}: fixation frame index {last} out of range for {frame_count} frames",
                    record.video_id
                )));
            }
        }
        Ok(Video { record, frame_count, fixations })
    }

    pub fn id(&self) -> &str {
        &self.record.video_id
    }

    pub fn fixations_at(&self, frame: usize) -> FixationSet {
        self.fixations.get(&frame).cloned().unwrap_or(FixationSet { frame_index: frame, points: Vec::new() })
    }
}

/// Parse and resolve every record of several manifests.
pub fn load_videos(manifests: &[PathBuf]) -> Result<Vec<Video>> {
    let mut videos = Vec::new();
    for m in manifests {
        for r in parse_manifest(m)? {
            videos.push(Video::load(r)?);
        }
    }
    Ok(videos)
}
