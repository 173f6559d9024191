//! Clip directories on disk, dataset manifests, and saliency overlays.
//!
//! A clip is a directory of `frame_000.png`, `frame_001.png`, … plus an
//! optional `annotations.json`. A manifest lists clips relative to its own
//! directory.

mod synth;

pub use synth::{
    centroid_accuracy, default_splits, mean_chroma, quantize, render_clip, synth_generate,
    CauseRecipe, ShapeKind, SplitCounts, SynthClip, SynthReport, SynthSpec,
};

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::classifier::VideoClip;
use crate::error::{Error, Result};
use crate::metrics::SaliencyVolume;
use crate::tensor::Tensor;

pub const ANNOTATIONS_FILE: &str = "annotations.json";

pub fn frame_file_name(t: usize) -> String {
    format!("frame_{t:03}.png")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    /// Frame directory, relative to the manifest.
    pub frames: String,
    pub label: usize,
    pub annotations: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub num_classes: usize,
    /// `(T, H, W)` of the stored frames.
    pub geometry: [usize; 3],
    pub class_counts: Vec<usize>,
    pub clips: Vec<ClipEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut counts = vec![0; self.num_classes];
        for c in &self.clips {
            *counts.get_mut(c.label).ok_or_else(|| {
                Error::Format(format!(
                    "label {} out of range in split `{}`",
                    c.label, self.split
                ))
            })? += 1;
        }
        if counts != self.class_counts {
            return Err(Error::Format(format!(
                "split `{}` declares class counts {:?} but lists {:?}",
                self.split, self.class_counts, counts
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| Error::json(format!("parsing {}", path.display()), e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::json("encoding manifest", e))?;
        fs::write(path, text + "\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Decodes `frame_000.png … frame_{T-1}.png` from `dir`, resizes each to
/// `(H, W)` bilinearly when needed and scales to `[0, 1]`.
pub fn load_frames(dir: &Path, geometry: [usize; 3]) -> Result<Tensor> {
    let [t_len, h, w] = geometry;
    let listing =
        fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut found = 0;
    for entry in listing {
        let entry = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
        if entry.path().extension().is_some_and(|x| x == "png") {
            found += 1;
        }
    }
    if found != t_len {
        return Err(Error::Contract(format!(
            "{} holds {found} frames, expected {t_len}",
            dir.display()
        )));
    }
    let plane = h * w;
    let mut data = vec![0.0; 3 * t_len * plane];
    for t in 0..t_len {
        let path = dir.join(frame_file_name(t));
        if !path.is_file() {
            return Err(Error::Format(format!(
                "frame {t} missing: {}",
                path.display()
            )));
        }
        let img = image::open(&path)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?
            .to_rgb8();
        let img = if img.dimensions() == (w as u32, h as u32) {
            img
        } else {
            imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
        };
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[(c * t_len + t) * plane + i] = f64::from(px.0[c]) / 255.0;
            }
        }
    }
    Tensor::new(&[3, t_len, h, w], data)
}

/// A clip directory at the given geometry, labelled `label`.
pub fn load_clip(dir: &Path, label: usize, geometry: [usize; 3]) -> Result<VideoClip> {
    let mut clip = VideoClip::new(load_frames(dir, geometry)?, label)?;
    clip.source = Some(dir.display().to_string());
    Ok(clip)
}

#[derive(Clone, Debug)]
pub struct LoadedClip {
    pub clip: VideoClip,
    pub annotations: PathBuf,
}

/// Every clip listed in the manifest at `path`, resized to `geometry`.
pub fn load_split(path: &Path, geometry: [usize; 3]) -> Result<Vec<LoadedClip>> {
    let manifest = DatasetManifest::load(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    manifest
        .clips
        .iter()
        .map(|e| {
            Ok(LoadedClip {
                clip: load_clip(&root.join(&e.frames), e.label, geometry)?,
                annotations: root.join(&e.annotations),
            })
        })
        .collect()
}

/// The "hot" colormap: black through red and yellow to white.
pub fn heat_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [
        (3.0 * v).min(1.0),
        (3.0 * v - 1.0).clamp(0.0, 1.0),
        (3.0 * v - 2.0).clamp(0.0, 1.0),
    ]
}

/// Frame `t` of `clip` blended half and half with the heat color of `m`:
/// `byte = round(255 · (0.5 · pixel + 0.5 · heat(M)))`.
pub fn overlay_frame(clip: &Tensor, m: &SaliencyVolume, t: usize) -> Result<RgbImage> {
    let s = clip.shape();
    if s.len() != 4 || s[0] != 3 || s[1..] != m.geometry() || t >= s[1] {
        return Err(Error::Dimension {
            op: "render_overlay",
            lhs: s.to_vec(),
            rhs: m.geometry().to_vec(),
        });
    }
    let (t_len, h, w) = (s[1], s[2], s[3]);
    let plane = h * w;
    let d = clip.data();
    let sal = m.frame(t);
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let heat = heat_color(sal[i]);
        image::Rgb(
            [0, 1, 2].map(|c| quantize(0.5 * d[(c * t_len + t) * plane + i] + 0.5 * heat[c])),
        )
    }))
}

/// Writes `overlay_000.png …` into `out`.
pub fn render_overlay(clip: &Tensor, m: &SaliencyVolume, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let mut paths = Vec::new();
    for t in 0..m.geometry()[0] {
        let img = overlay_frame(clip, m, t)?;
        let path = out.join(format!("overlay_{t:03}.png"));
        img.save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        paths.push(path);
    }
    Ok(paths)
}
