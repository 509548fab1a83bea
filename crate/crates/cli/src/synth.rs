//! Deterministic synthetic datasets in DAVIS layout: flat-colored squares
//! drifting over a textured background while their size oscillates.
//!
//! Object `k` lives in horizontal band `k` of the frame. Its center moves
//! linearly and its side follows
//! `size * (1 + scale_amplitude * sin(2π t / scale_period + phase))`,
//! rounded to whole pixels.

use std::f64::consts::TAU;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use trackany_core::davis::{annotations_dir, frames_dir};
use trackany_core::mask::{compose_labelmap, BinaryMask, OverlapPolicy};
use trackany_core::pngio::write_mask_png;
use trackany_core::LabelMap;

const JPEG_QUALITY: u8 = 92;

const COLORS: [[u8; 3]; 8] = [
    [220, 40, 40],
    [40, 90, 220],
    [240, 200, 30],
    [30, 170, 80],
    [200, 60, 200],
    [20, 200, 210],
    [250, 130, 20],
    [240, 240, 240],
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("sequence {sequence}: object {object} leaves its band at frame {frame}")]
    LeavesBand { sequence: String, object: usize, frame: usize },
    #[error("sequence {sequence}: object {object} exits the frame at frame {frame}")]
    ExitsFrame { sequence: String, object: usize, frame: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Png(#[from] trackany_core::pngio::PngError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub sequences: usize,
    pub frames: usize,
    pub objects: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    /// Base side length in pixels.
    pub size: f64,
    /// Largest horizontal speed in pixels per frame; vertical speed is a
    /// quarter of it.
    pub drift: f64,
    pub scale_amplitude: f64,
    /// Oscillation period in frames.
    pub scale_period: f64,
    pub prefix: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            sequences: 3,
            frames: 30,
            objects: 2,
            width: 192,
            height: 128,
            seed: 7,
            size: 40.0,
            drift: 1.0,
            scale_amplitude: 0.1,
            scale_period: 20.0,
            prefix: "synth".into(),
        }
    }
}

/// Closed-form motion of one object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Track {
    pub x0: f64,
    pub y0: f64,
    pub vx: f64,
    pub vy: f64,
    pub phase: f64,
}

impl SynthSpec {
    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Spec(m.into()));
        if self.sequences == 0 || self.frames == 0 {
            return bad("sequences and frames must be positive");
        }
        if self.objects == 0 || self.objects > COLORS.len() {
            return bad("objects must be between 1 and 8");
        }
        if self.width == 0 || self.height == 0 {
            return bad("resolution must be positive");
        }
        if !(self.size >= 1.0) || !(self.drift >= 0.0) || !(self.scale_period > 0.0) {
            return bad("size must be >= 1, drift >= 0, scale_period > 0");
        }
        if !(0.0..1.0).contains(&self.scale_amplitude) {
            return bad("scale_amplitude must lie in [0, 1)");
        }
        if self.prefix.is_empty() || self.prefix.contains(['/', '\\']) {
            return bad("prefix must be a plain non-empty name");
        }
        Ok(())
    }

    pub fn sequence_id(&self, s: usize) -> String {
        format!("{}{s:03}", self.prefix)
    }

    /// Real-valued side length at frame `t`.
    pub fn side(&self, track: &Track, t: usize) -> f64 {
        self.size * (1.0 + self.scale_amplitude * (TAU * t as f64 / self.scale_period + track.phase).sin())
    }

    /// Pixel bounds `[x0, x1) x [y0, y1)` at frame `t`, possibly outside
    /// the frame.
    pub fn square(&self, track: &Track, t: usize) -> (i64, i64, i64, i64) {
        let side = self.side(track, t).round() as i64;
        let cx = track.x0 + track.vx * t as f64;
        let cy = track.y0 + track.vy * t as f64;
        let x0 = (cx - side as f64 / 2.0).round() as i64;
        let y0 = (cy - side as f64 / 2.0).round() as i64;
        (x0, y0, x0 + side, y0 + side)
    }

    fn band(&self, k: usize) -> (i64, i64) {
        let h = self.height as f64 / self.objects as f64;
        ((k as f64 * h).floor() as i64, ((k + 1) as f64 * h).floor() as i64)
    }

    /// Motion parameters of every object of every sequence.
    pub fn tracks(&self) -> Vec<Vec<Track>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.sequences)
            .map(|_| {
                (0..self.objects)
                    .map(|k| {
                        let (b0, b1) = self.band(k);
                        let jitter = self.width as f64 / 16.0;
                        Track {
                            x0: self.width as f64 / 2.0 + rng.gen_range(-jitter..=jitter),
                            y0: (b0 + b1) as f64 / 2.0,
                            vx: rng.gen_range(-self.drift..=self.drift),
                            vy: rng.gen_range(-self.drift..=self.drift) / 4.0,
                            phase: rng.gen_range(0.0..TAU),
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Rejects the spec at the first frame where an object leaves the frame
    /// or its band.
    pub fn check(&self) -> Result<Vec<Vec<Track>>, SynthError> {
        self.validate()?;
        let tracks = self.tracks();
        for (s, seq) in tracks.iter().enumerate() {
            for t in 0..self.frames {
                for (k, track) in seq.iter().enumerate() {
                    let (x0, y0, x1, y1) = self.square(track, t);
                    let sequence = self.sequence_id(s);
                    if x0 < 0 || y0 < 0 || x1 > self.width as i64 || y1 > self.height as i64 {
                        return Err(SynthError::ExitsFrame { sequence, object: k + 1, frame: t });
                    }
                    let (b0, b1) = self.band(k);
                    if y0 < b0 || y1 > b1 {
                        return Err(SynthError::LeavesBand { sequence, object: k + 1, frame: t });
                    }
                }
            }
        }
        Ok(tracks)
    }

    /// Groundtruth map of one frame.
    pub fn labelmap(&self, tracks: &[Track], t: usize) -> LabelMap {
        let parts: Vec<_> = tracks
            .iter()
            .enumerate()
            .map(|(k, track)| {
                let (x0, y0, x1, y1) = self.square(track, t);
                let mask = BinaryMask::rect(self.width, self.height, x0 as u32, y0 as u32, x1 as u32, y1 as u32);
                ((k + 1) as u8, mask)
            })
            .collect();
        compose_labelmap(&parts, &OverlapPolicy::LowerIdWins).expect("objects lie in the frame")
    }
}

fn background(spec: &SynthSpec, s: usize) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(s as u64 + 1);
    RgbImage::from_fn(spec.width, spec.height, |x, y| {
        let stripe = if (x / 8 + y / 8) % 2 == 0 { 20 } else { 0 };
        let v = 90 + stripe + rng.gen_range(0..40u8);
        Rgb([v, v, v.saturating_add(10)])
    })
}

fn render(spec: &SynthSpec, base: &RgbImage, map: &LabelMap) -> RgbImage {
    let mut img = base.clone();
    for (i, &label) in map.labels().iter().enumerate() {
        if label != 0 {
            let x = i as u32 % spec.width;
            let y = i as u32 / spec.width;
            img.put_pixel(x, y, Rgb(COLORS[label as usize - 1]));
        }
    }
    img
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), SynthError> {
    fs::write(path, bytes).map_err(|source| SynthError::Io { path: path.to_path_buf(), source })
}

fn mkdir(path: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(path).map_err(|source| SynthError::Io { path: path.to_path_buf(), source })
}

/// Writes the dataset under `out` and returns its sequence ids. Also writes
/// `ImageSets/val.txt` listing every sequence and `synth.json` holding the
/// spec.
pub fn make_synthetic_dataset(spec: &SynthSpec, out: &Path) -> Result<Vec<String>, SynthError> {
    let tracks = spec.check()?;
    let mut ids = Vec::with_capacity(spec.sequences);
    for (s, seq_tracks) in tracks.iter().enumerate() {
        let id = spec.sequence_id(s);
        let (fdir, adir) = (frames_dir(out, &id), annotations_dir(out, &id));
        mkdir(&fdir)?;
        mkdir(&adir)?;
        let base = background(spec, s);
        for t in 0..spec.frames {
            let map = spec.labelmap(seq_tracks, t);
            let mut jpg = Vec::new();
            JpegEncoder::new_with_quality(Cursor::new(&mut jpg), JPEG_QUALITY).encode_image(&render(spec, &base, &map))?;
            write(&fdir.join(format!("{t:05}.jpg")), &jpg)?;
            write(&adir.join(format!("{t:05}.png")), &write_mask_png(&map)?)?;
        }
        ids.push(id);
    }
    let sets = out.join("ImageSets");
    mkdir(&sets)?;
    write(&sets.join("val.txt"), format!("{}\n", ids.join("\n")).as_bytes())?;
    let json = serde_json::to_string_pretty(spec).expect("spec serializes");
    write(&out.join("synth.json"), json.as_bytes())?;
    Ok(ids)
}
