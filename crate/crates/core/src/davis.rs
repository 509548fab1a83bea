//! DAVIS directory layout:
//! `JPEGImages/480p/<seq>/NNNNN.jpg` and `Annotations/480p/<seq>/NNNNN.png`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::mask::{FrameRef, FrameSource, LabelMap};
use crate::pngio::{read_mask_png, write_mask_png, PngError};

pub const RESOLUTION_DIR: &str = "480p";

#[derive(Debug, Error)]
pub enum DavisError {
    #[error("sequence directory not found: {0}")]
    MissingSequence(PathBuf),
    #[error("sequence {sequence} has no frames")]
    NoFrames { sequence: String },
    #[error("sequence {sequence} has gaps in frame numbering; missing {missing:?}")]
    Gaps { sequence: String, missing: Vec<usize> },
    #[error("annotation {index:05} of {sequence} has no matching frame")]
    OrphanAnnotation { sequence: String, index: usize },
    #[error("{path}: size {got:?} differs from sequence size {expected:?}")]
    InconsistentSize { path: PathBuf, got: (u32, u32), expected: (u32, u32) },
    #[error("{path}: {source}")]
    Png { path: PathBuf, source: PngError },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A sequence's frames plus whatever annotations exist, aligned by index.
#[derive(Debug, Clone)]
pub struct DavisSequence {
    pub sequence_id: String,
    pub frames: Vec<FrameRef>,
    pub annotations: Vec<Option<LabelMap>>,
}

impl DavisSequence {
    pub fn width(&self) -> u32 {
        self.frames[0].width
    }

    pub fn height(&self) -> u32 {
        self.frames[0].height
    }

    /// Every frame carries an annotation.
    pub fn fully_annotated(&self) -> bool {
        self.annotations.iter().all(Option::is_some)
    }

    /// All annotations, if every frame has one.
    pub fn groundtruth(&self) -> Option<Vec<LabelMap>> {
        self.annotations.iter().cloned().collect()
    }
}

pub fn frames_dir(root: &Path, sequence_id: &str) -> PathBuf {
    root.join("JPEGImages").join(RESOLUTION_DIR).join(sequence_id)
}

pub fn annotations_dir(root: &Path, sequence_id: &str) -> PathBuf {
    root.join("Annotations").join(RESOLUTION_DIR).join(sequence_id)
}

/// Files named `NNNNN.<ext>`, keyed by their index.
fn numbered_files(dir: &Path, ext: &str) -> io::Result<BTreeMap<usize, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        if stem.len() == 5 && stem.bytes().all(|b| b.is_ascii_digit()) {
            out.insert(stem.parse().expect("digits"), path);
        }
    }
    Ok(out)
}

fn gaps(indices: impl Iterator<Item = usize>, len: usize) -> Vec<usize> {
    let present: Vec<usize> = indices.collect();
    let max = present.last().copied().map_or(len, |m| m + 1);
    (0..max).filter(|i| present.binary_search(i).is_err()).collect()
}

/// Opens one sequence. Frames must be numbered contiguously from `00000`;
/// annotations may cover any subset of frames (test-dev style sets carry
/// only `00000`).
pub fn open_davis_sequence(root: &Path, sequence_id: &str) -> Result<DavisSequence, DavisError> {
    let fdir = frames_dir(root, sequence_id);
    if !fdir.is_dir() {
        return Err(DavisError::MissingSequence(fdir));
    }
    let frame_files = numbered_files(&fdir, "jpg")?;
    if frame_files.is_empty() {
        return Err(DavisError::NoFrames { sequence: sequence_id.to_string() });
    }
    let missing = gaps(frame_files.keys().copied(), frame_files.len());
    if !missing.is_empty() {
        return Err(DavisError::Gaps { sequence: sequence_id.to_string(), missing });
    }

    let mut frames = Vec::with_capacity(frame_files.len());
    let mut size: Option<(u32, u32)> = None;
    for (&index, path) in &frame_files {
        let dims = image::image_dimensions(path)
            .map_err(|source| DavisError::Image { path: path.clone(), source })?;
        match size {
            None => size = Some(dims),
            Some(expected) if expected != dims => {
                return Err(DavisError::InconsistentSize { path: path.clone(), got: dims, expected })
            }
            _ => {}
        }
        frames.push(FrameRef {
            sequence_id: sequence_id.to_string(),
            frame_index: index,
            width: dims.0,
            height: dims.1,
            source: FrameSource::File(path.clone()),
        });
    }
    let expected = size.expect("at least one frame");

    let mut annotations = vec![None; frames.len()];
    let adir = annotations_dir(root, sequence_id);
    if adir.is_dir() {
        for (index, path) in numbered_files(&adir, "png")? {
            if index >= frames.len() {
                return Err(DavisError::OrphanAnnotation { sequence: sequence_id.to_string(), index });
            }
            let bytes = fs::read(&path)?;
            let map = read_mask_png(&bytes).map_err(|source| DavisError::Png { path: path.clone(), source })?;
            if map.dims() != expected {
                return Err(DavisError::InconsistentSize { path, got: map.dims(), expected });
            }
            annotations[index] = Some(map);
        }
    }
    Ok(DavisSequence { sequence_id: sequence_id.to_string(), frames, annotations })
}

/// Sequence ids listed in a split file, one per line; blank lines and `#`
/// comments are skipped.
pub fn read_split(path: &Path) -> io::Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// Writes `<out>/<seq>/NNNNN.png` for every frame that has a map.
pub fn write_sequence_masks(out: &Path, sequence_id: &str, maps: &[Option<LabelMap>]) -> Result<(), DavisError> {
    let dir = out.join(sequence_id);
    fs::create_dir_all(&dir)?;
    for (i, map) in maps.iter().enumerate() {
        if let Some(map) = map {
            let path = dir.join(format!("{i:05}.png"));
            let bytes = write_mask_png(map).map_err(|source| DavisError::Png { path: path.clone(), source })?;
            fs::write(path, bytes)?;
        }
    }
    Ok(())
}
