//! On-disk dataset layout.
//!
//! ```text
//! <root>/dataset.toml          generating config
//! <root>/<split>/manifest.txt  one video id per line
//! <root>/<split>/<id>.feat     "JDFT" u32 frames u32 dim  f32 LE row-major
//! <root>/<split>/<id>.lbl      "JDLB" u32 frames u32 classes u8 row-major
//! ```
//!
//! Both headers are 16 bytes; the last four are reserved and written as zero.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use super::{Dataset, DatasetConfig, EventTimeline, FeatureSequence, Video};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"JDFT";
pub const LABEL_MAGIC: &[u8; 4] = b"JDLB";
const HEADER_LEN: usize = 16;

fn header(magic: &[u8; 4], rows: usize, cols: usize) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(magic);
    h[4..8].copy_from_slice(&(rows as u32).to_le_bytes());
    h[8..12].copy_from_slice(&(cols as u32).to_le_bytes());
    h
}

fn parse_header(bytes: &[u8], magic: &[u8; 4], what: &'static str) -> Result<(usize, usize)> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != magic {
        return Err(Error::format(what, "bad magic or truncated header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    Ok((rows, cols))
}

pub fn encode_features(f: &FeatureSequence) -> Vec<u8> {
    let (rows, cols) = f.features().dim();
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * 4);
    out.extend_from_slice(&header(FEATURE_MAGIC, rows, cols));
    for v in f.features().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSequence> {
    let (rows, cols) = parse_header(bytes, FEATURE_MAGIC, "feature file")?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != rows * cols * 4 {
        return Err(Error::format(
            "feature file",
            format!(
                "expected {} data bytes, found {}",
                rows * cols * 4,
                body.len()
            ),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureSequence::new(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

pub fn encode_labels(t: &EventTimeline) -> Vec<u8> {
    let (rows, cols) = t.labels().dim();
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols);
    out.extend_from_slice(&header(LABEL_MAGIC, rows, cols));
    out.extend(t.labels().iter().copied());
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<EventTimeline> {
    let (rows, cols) = parse_header(bytes, LABEL_MAGIC, "label file")?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != rows * cols {
        return Err(Error::format(
            "label file",
            format!("expected {} data bytes, found {}", rows * cols, body.len()),
        ));
    }
    EventTimeline::new(Array2::from_shape_vec((rows, cols), body.to_vec()).expect("length checked"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_split(dir: &Path, videos: &[Video]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for v in videos {
        write_file(
            &dir.join(format!("{}.feat", v.id)),
            &encode_features(&v.features),
        )?;
        write_file(
            &dir.join(format!("{}.lbl", v.id)),
            &encode_labels(&v.timeline),
        )?;
        manifest.push_str(&v.id);
        manifest.push('\n');
    }
    write_file(&dir.join("manifest.txt"), manifest.as_bytes())
}

fn read_split(dir: &Path) -> Result<Vec<Video>> {
    let manifest = read_file(&dir.join("manifest.txt"))?;
    let manifest =
        String::from_utf8(manifest).map_err(|_| Error::format("manifest", "not valid UTF-8"))?;
    manifest
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|id| {
            let features = decode_features(&read_file(&dir.join(format!("{id}.feat")))?)?;
            let timeline = decode_labels(&read_file(&dir.join(format!("{id}.lbl")))?)?;
            if features.num_frames() != timeline.num_frames() {
                return Err(Error::format(
                    "dataset",
                    format!("video {id}: feature and label frame counts differ"),
                ));
            }
            Ok(Video {
                id: id.to_string(),
                features,
                timeline,
            })
        })
        .collect()
}

pub fn write_dataset(root: &Path, cfg: &DatasetConfig, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&root.join("dataset.toml"), text.as_bytes())?;
    write_split(&root.join("train"), &ds.train)?;
    write_split(&root.join("test"), &ds.test)
}

/// Loads a dataset written by [`write_dataset`], returning it with its config.
pub fn read_dataset(root: &Path) -> Result<(DatasetConfig, Dataset)> {
    let path = root.join("dataset.toml");
    let text = String::from_utf8(read_file(&path)?)
        .map_err(|_| Error::format("dataset.toml", "not valid UTF-8"))?;
    let cfg: DatasetConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let ds = Dataset {
        actions: cfg.actions.clone(),
        train: read_split(&root.join("train"))?,
        test: read_split(&root.join("test"))?,
    };
    for v in ds.train.iter().chain(&ds.test) {
        if v.timeline.num_classes() != cfg.actions.num_classes() {
            return Err(Error::format(
                "dataset",
                format!("video {} has {} classes", v.id, v.timeline.num_classes()),
            ));
        }
    }
    Ok((cfg, ds))
}
