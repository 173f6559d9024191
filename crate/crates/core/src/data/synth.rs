//! Synthetic cause-labelled clips: a neutral background, a few neutral
//! distractor shapes and one colored cause object whose type decides the
//! label.

use std::fs;
use std::path::Path;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{frame_file_name, ClipEntry, DatasetManifest, ANNOTATIONS_FILE};
use crate::error::{Error, Result};
use crate::metrics::{save_annotations, ObjectAnnotation, ObjectFrame};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    VerticalBar,
    Triangle,
    SquareCluster,
    Square,
}

impl ShapeKind {
    /// Whether pixel offset `(dy, dx)` from the center lies inside a shape of size `r`.
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disc => dy * dy + dx * dx <= r * r,
            ShapeKind::Square => dy.abs() <= 0.8 * r && dx.abs() <= 0.8 * r,
            ShapeKind::VerticalBar => dx.abs() <= 0.35 * r && dy.abs() <= 1.5 * r,
            ShapeKind::Triangle => {
                let depth = dy + r;
                (0.0..=2.0 * r).contains(&depth) && dx.abs() <= 0.6 * depth
            }
            ShapeKind::SquareCluster => [(-0.6, -0.6), (-0.6, 0.6), (0.6, 0.0)]
                .iter()
                .any(|&(oy, ox)| (dy - oy * r).abs() <= 0.4 * r && (dx - ox * r).abs() <= 0.4 * r),
        }
    }

    /// Whether `(dy, dx)` lies within `half` pixels of the outline of a shape
    /// of size `r`. Disc outlines are rings, triangles open at the corners and
    /// clusters become isolated dots,
    /// so strokes of width below 3 px vanish under a 5×5 median.
    fn on_stroke(self, dy: f64, dx: f64, r: f64, half: f64) -> bool {
        match self {
            ShapeKind::Disc => ((dy * dy + dx * dx).sqrt() - r).abs() <= half,
            ShapeKind::Square => {
                let (ay, ax) = (dy.abs(), dx.abs());
                let s = 0.8 * r;
                ay.max(ax) <= s + half && ay.max(ax) >= s - half
            }
            ShapeKind::VerticalBar => dx.abs() <= half && dy.abs() <= 1.5 * r,
            ShapeKind::Triangle => {
                // edges stop short of the corners
                let v = [(-r, 0.0), (r, -1.2 * r), (r, 1.2 * r)];
                (0..3).any(|i| {
                    let (a, b) = (v[i], v[(i + 1) % 3]);
                    let lerp = |f: f64| (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1));
                    segment_distance((dy, dx), lerp(0.2), lerp(0.8)) <= half
                })
            }
            ShapeKind::SquareCluster => [(-0.7, -0.7), (-0.7, 0.7), (0.7, -0.7), (0.7, 0.7)]
                .iter()
                .any(|&(oy, ox)| {
                    (dy - oy * r).abs() <= 2.0 * half && (dx - ox * r).abs() <= 2.0 * half
                }),
        }
    }

    /// Radius of a disc that covers the shape.
    fn extent(self, r: f64) -> f64 {
        match self {
            ShapeKind::Disc => r,
            ShapeKind::Triangle => r * 1.2f64.hypot(1.0),
            ShapeKind::Square => 0.8 * r * std::f64::consts::SQRT_2,
            ShapeKind::VerticalBar => 1.5 * r,
            ShapeKind::SquareCluster => r * std::f64::consts::SQRT_2,
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let s = if len2 > 0.0 {
        (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - s * dy).powi(2) + (p.1 - a.1 - s * dx).powi(2)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CauseRecipe {
    pub name: String,
    pub shape: ShapeKind,
    pub color: [f64; 3],
    /// Nominal center as fractions of `(H, W)`.
    pub region: [f64; 2],
    /// Uniform center jitter as a fraction of `(H, W)`.
    pub jitter: f64,
    /// Size at onset as a fraction of the shorter frame side.
    pub size: f64,
    /// Relative growth per frame after onset.
    pub growth: f64,
    /// Onset frame is drawn uniformly from `0..=max_onset`.
    pub max_onset: usize,
    /// Outline width in pixels; `None` fills the shape.
    #[serde(default)]
    pub stroke: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_classes: usize,
    /// `(T, H, W)`.
    pub geometry: [usize; 3],
    pub recipes: Vec<CauseRecipe>,
    /// Mean number of distractors per clip.
    pub distractor_density: f64,
    /// Half-width of the uniform luminance noise.
    pub noise: f64,
    pub seed: u64,
}

fn recipe(name: &str, shape: ShapeKind, color: [f64; 3], region: [f64; 2]) -> CauseRecipe {
    CauseRecipe {
        name: name.into(),
        shape,
        color,
        region,
        jitter: 0.08,
        size: 0.07,
        growth: 0.02,
        max_onset: 4,
        stroke: Some(1.5),
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            geometry: [20, 64, 64],
            recipes: vec![
                recipe("disc", ShapeKind::Disc, [0.9, 0.15, 0.1], [0.25, 0.5]),
                recipe(
                    "bar",
                    ShapeKind::VerticalBar,
                    [0.95, 0.85, 0.1],
                    [0.55, 0.3],
                ),
                recipe(
                    "triangle",
                    ShapeKind::Triangle,
                    [0.1, 0.25, 0.9],
                    [0.5, 0.75],
                ),
                recipe(
                    "cluster",
                    ShapeKind::SquareCluster,
                    [0.15, 0.8, 0.2],
                    [0.7, 0.5],
                ),
            ],
            distractor_density: 2.0,
            noise: 0.03,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Full `20×360×360` frames with the default recipes.
    pub fn full_resolution() -> Self {
        Self {
            geometry: [20, 360, 360],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.recipes.len() != self.num_classes || self.num_classes == 0 {
            return Err(Error::Parameter(format!(
                "{} recipes for {} classes",
                self.recipes.len(),
                self.num_classes
            )));
        }
        if self.geometry.contains(&0) || self.noise < 0.0 || self.distractor_density < 0.0 {
            return Err(Error::Parameter(
                "geometry must be positive, noise and density non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-split clip counts, one entry per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub name: String,
    pub counts: Vec<usize>,
}

pub fn default_splits() -> Vec<SplitCounts> {
    [
        ("train", [10, 5, 17, 17]),
        ("val", [3, 3, 5, 5]),
        ("test", [2, 2, 3, 3]),
    ]
    .into_iter()
    .map(|(name, c)| SplitCounts {
        name: name.into(),
        counts: c.to_vec(),
    })
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub spec: SynthSpec,
    pub manifests: Vec<String>,
    /// Nearest-centroid accuracy on mean-chroma features, centroids fitted on
    /// the first split and evaluated on the rest.
    pub centroid_accuracy: f64,
}

/// A rendered clip before quantization.
#[derive(Clone, Debug)]
pub struct SynthClip {
    /// `3×T×H×W`, values in `[0, 1]`.
    pub frames: Tensor,
    pub label: usize,
    pub objects: Vec<ObjectAnnotation>,
}

struct Placed {
    shape: ShapeKind,
    stroke: Option<f64>,
    color: [f64; 3],
    center: [f64; 2],
    size: f64,
    /// First frame and per-frame relative growth.
    onset: usize,
    growth: f64,
}

impl Placed {
    fn size_at(&self, t: usize) -> f64 {
        self.size * (1.0 + self.growth * (t - self.onset) as f64)
    }

    fn covers(&self, dy: f64, dx: f64, t: usize) -> bool {
        let r = self.size_at(t);
        match self.stroke {
            Some(w) => self.shape.on_stroke(dy, dx, r, w / 2.0),
            None => self.shape.contains(dy, dx, r),
        }
    }

    fn reach(&self, t: usize) -> f64 {
        self.shape.extent(self.size_at(t)) + self.stroke.map_or(0.0, |w| w / 2.0)
    }

    fn annotation(
        &self,
        id: String,
        group: &str,
        frames: usize,
        h: usize,
        w: usize,
    ) -> ObjectAnnotation {
        let frames = (self.onset..frames)
            .map(|t| {
                let e = self.reach(t);
                let [cy, cx] = self.center;
                let lo = |c: f64| (c - e).floor().max(0.0) as usize;
                let hi = |c: f64, n: usize| ((c + e).ceil() as usize).min(n - 1);
                ObjectFrame {
                    t,
                    center: self.center,
                    radius: e,
                    bbox: Some([lo(cy), lo(cx), hi(cy, h), hi(cx, w)]),
                }
            })
            .collect();
        ObjectAnnotation {
            id,
            group: Some(group.into()),
            frames,
        }
    }
}

fn clip_rng(seed: u64, split: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split as u64) << 32) | index as u64);
    rng
}

/// Renders one clip of class `label`.
pub fn render_clip(spec: &SynthSpec, label: usize, rng: &mut impl Rng) -> Result<SynthClip> {
    spec.validate()?;
    let recipe = spec.recipes.get(label).ok_or_else(|| {
        Error::Contract(format!(
            "label {label} out of range for {} classes",
            spec.num_classes
        ))
    })?;
    let [t_len, h, w] = spec.geometry;
    let side = h.min(w) as f64;

    let center = [
        ((recipe.region[0] + rng.gen_range(-recipe.jitter..=recipe.jitter)) * h as f64)
            .clamp(0.0, (h - 1) as f64),
        ((recipe.region[1] + rng.gen_range(-recipe.jitter..=recipe.jitter)) * w as f64)
            .clamp(0.0, (w - 1) as f64),
    ];
    let onset = rng.gen_range(0..=recipe.max_onset.min(t_len - 1));
    let cause = Placed {
        shape: recipe.shape,
        stroke: recipe.stroke,
        color: recipe.color,
        center,
        size: recipe.size * side,
        onset,
        growth: recipe.growth,
    };
    let cause_reach = cause.reach(t_len - 1);

    let whole = spec.distractor_density.floor() as usize;
    let count = whole + usize::from(rng.gen_bool(spec.distractor_density - whole as f64));
    let mut distractors: Vec<Placed> = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = if rng.gen_bool(0.5) {
            ShapeKind::Disc
        } else {
            ShapeKind::Square
        };
        let gray = rng.gen_range(0.7..=0.95);
        let size = rng.gen_range(0.05..=0.09) * side;
        let reach = shape.extent(size);
        let mut center = [0.0; 2];
        for _ in 0..64 {
            center = [
                rng.gen_range(0.0..(h - 1) as f64),
                rng.gen_range(0.0..(w - 1) as f64),
            ];
            let apart = |o: [f64; 2], r: f64| {
                ((center[0] - o[0]).powi(2) + (center[1] - o[1]).powi(2)).sqrt() > reach + r + 2.0
            };
            if apart(cause.center, cause_reach)
                && distractors.iter().all(|d| apart(d.center, d.reach(0)))
            {
                break;
            }
        }
        distractors.push(Placed {
            shape,
            stroke: None,
            color: [gray; 3],
            center,
            size,
            onset: 0,
            growth: 0.0,
        });
    }

    let plane = h * w;
    let mut data = vec![0.0; 3 * t_len * plane];
    for t in 0..t_len {
        for y in 0..h {
            let base = 0.4 + 0.15 * y as f64 / (h.max(2) - 1) as f64;
            for x in 0..w {
                let noise = if spec.noise > 0.0 {
                    rng.gen_range(-spec.noise..=spec.noise)
                } else {
                    0.0
                };
                let mut px = [base + noise; 3];
                for obj in distractors.iter().chain(std::iter::once(&cause)) {
                    if t >= obj.onset
                        && obj.covers(y as f64 - obj.center[0], x as f64 - obj.center[1], t)
                    {
                        px = obj.color;
                    }
                }
                for (c, v) in px.iter().enumerate() {
                    data[(c * t_len + t) * plane + y * w + x] = v.clamp(0.0, 1.0);
                }
            }
        }
    }

    let mut objects = vec![cause.annotation("cause".into(), "cause", t_len, h, w)];
    for (k, d) in distractors.iter().enumerate() {
        objects.push(d.annotation(format!("distractor_{k}"), "distractor", t_len, h, w));
    }
    Ok(SynthClip {
        frames: Tensor::new(&[3, t_len, h, w], data)?,
        label,
        objects,
    })
}

/// Quantizes to 8 bits the way frames are stored on disk.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_frames(frames: &Tensor, dir: &Path) -> Result<()> {
    let [_, t_len, h, w] = match *frames.shape() {
        [c, t, h, w] => [c, t, h, w],
        _ => unreachable!("rendered clips are rank 4"),
    };
    let plane = h * w;
    let d = frames.data();
    for t in 0..t_len {
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            image::Rgb([0, 1, 2].map(|c| quantize(d[(c * t_len + t) * plane + i])))
        });
        let path = dir.join(frame_file_name(t));
        img.save(&path)
            .map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}

/// Mean over pixels of each channel minus the pixel's channel average.
pub fn mean_chroma(frames: &Tensor) -> [f64; 3] {
    let per = frames.numel() / 3;
    let d = frames.data();
    let mut acc = [0.0; 3];
    for i in 0..per {
        let px = [d[i], d[per + i], d[2 * per + i]];
        let l = (px[0] + px[1] + px[2]) / 3.0;
        for c in 0..3 {
            acc[c] += px[c] - l;
        }
    }
    acc.map(|a| a / per as f64)
}

/// Nearest-centroid accuracy: centroids from `fit`, accuracy on `eval`.
pub fn centroid_accuracy(
    fit: &[([f64; 3], usize)],
    eval: &[([f64; 3], usize)],
    num_classes: usize,
) -> Result<f64> {
    let mut sums = vec![[0.0; 3]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (f, l) in fit {
        for c in 0..3 {
            sums[*l][c] += f[c];
        }
        counts[*l] += 1;
    }
    if counts.contains(&0) || eval.is_empty() {
        return Err(Error::Contract(
            "every class needs a fitting sample and evaluation must be non-empty".into(),
        ));
    }
    let centroids: Vec<[f64; 3]> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.map(|v| v / n as f64))
        .collect();
    let correct = eval
        .iter()
        .filter(|(f, l)| {
            let dist = |c: &[f64; 3]| (0..3).map(|i| (f[i] - c[i]).powi(2)).sum::<f64>();
            let best = (0..num_classes)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap_or(0);
            best == *l
        })
        .count();
    Ok(correct as f64 / eval.len() as f64)
}

/// Writes every split under `out` as `<split>/clip_NNNN/` frame directories
/// plus `<split>.json` manifests and `synth_report.json`.
pub fn synth_generate(spec: &SynthSpec, splits: &[SplitCounts], out: &Path) -> Result<SynthReport> {
    spec.validate()?;
    if splits.is_empty() {
        return Err(Error::Parameter("at least one split is required".into()));
    }
    let mut features: Vec<Vec<([f64; 3], usize)>> = Vec::new();
    let mut manifest_names = Vec::new();
    for (s, split) in splits.iter().enumerate() {
        if split.counts.len() != spec.num_classes {
            return Err(Error::Parameter(format!(
                "split `{}` lists {} class counts for {} classes",
                split.name,
                split.counts.len(),
                spec.num_classes
            )));
        }
        let labels: Vec<usize> = split
            .counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
            .collect();
        let mut entries = Vec::with_capacity(labels.len());
        let mut feats = Vec::with_capacity(labels.len());
        for (i, &label) in labels.iter().enumerate() {
            let clip = render_clip(spec, label, &mut clip_rng(spec.seed, s, i))?;
            let rel = format!("{}/clip_{i:04}", split.name);
            let dir = out.join(&rel);
            fs::create_dir_all(&dir)
                .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            write_frames(&clip.frames, &dir)?;
            save_annotations(&clip.objects, &dir.join(ANNOTATIONS_FILE))?;
            feats.push((mean_chroma(&clip.frames), label));
            entries.push(ClipEntry {
                frames: rel.clone(),
                label,
                annotations: format!("{rel}/{ANNOTATIONS_FILE}"),
            });
        }
        let manifest = DatasetManifest {
            split: split.name.clone(),
            num_classes: spec.num_classes,
            geometry: spec.geometry,
            class_counts: split.counts.clone(),
            clips: entries,
        };
        let name = format!("{}.json", split.name);
        manifest.save(&out.join(&name))?;
        manifest_names.push(name);
        features.push(feats);
    }
    let eval: Vec<([f64; 3], usize)> = if features.len() > 1 {
        features[1..].concat()
    } else {
        features[0].clone()
    };
    let report = SynthReport {
        spec: spec.clone(),
        manifests: manifest_names,
        centroid_accuracy: centroid_accuracy(&features[0], &eval, spec.num_classes)?,
    };
    let path = out.join("synth_report.json");
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::json("encoding synth report", e))?;
    fs::write(&path, text + "\n")
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn colored_pixels(frames: &Tensor) -> usize {
        let per = frames.numel() / 3;
        let d = frames.data();
        (0..per)
            .filter(|&i| (d[i] - d[per + i]).abs() > 1e-12 || (d[i] - d[2 * per + i]).abs() > 1e-12)
            .count()
    }

    #[test]
    fn minimal_scene_has_only_the_cause() {
        let spec = SynthSpec {
            distractor_density: 0.0,
            noise: 0.0,
            ..SynthSpec::default()
        };
        for label in 0..4 {
            let clip =
                render_clip(&spec, label, &mut ChaCha8Rng::seed_from_u64(label as u64)).unwrap();
            assert_eq!(clip.objects.len(), 1);
            assert!(colored_pixels(&clip.frames) > 0);
            // every colored pixel lies inside the cause annotation's bbox
            let [_, t_len, h, w] = [3, 20, 64, 64];
            let d = clip.frames.data();
            let per = t_len * h * w;
            for t in 0..t_len {
                let ann = clip.objects[0].at(t);
                for y in 0..h {
                    for x in 0..w {
                        let i = t * h * w + y * w + x;
                        if (d[i] - d[per + i]).abs() > 1e-12
                            || (d[i] - d[2 * per + i]).abs() > 1e-12
                        {
                            let b = ann
                                .and_then(|a| a.bbox)
                                .expect("colored pixel outside the cause's lifetime");
                            assert!(y >= b[0] && y <= b[2] && x >= b[1] && x <= b[3]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn median_filter_erases_stroked_causes() {
        let spec = SynthSpec {
            distractor_density: 0.0,
            noise: 0.0,
            ..SynthSpec::default()
        };
        let [_, h, w] = spec.geometry;
        for label in 0..4 {
            let clip = render_clip(&spec, label, &mut clip_rng(0, 0, label)).unwrap();
            let last = spec.geometry[0] - 1;
            let plane =
                |c: usize| &clip.frames.data()[(c * spec.geometry[0] + last) * h * w..][..h * w];
            let filtered: Vec<Vec<f64>> = (0..3)
                .map(|c| crate::explain::median_filter(plane(c), h, w, 5))
                .collect();
            let chroma = (0..h * w)
                .map(|i| {
                    (filtered[0][i] - filtered[1][i])
                        .abs()
                        .max((filtered[0][i] - filtered[2][i]).abs())
                })
                .fold(0.0, f64::max);
            assert!(chroma < 0.02, "class {label} keeps chroma {chroma}");
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = SynthSpec::default();
        let a = render_clip(&spec, 2, &mut clip_rng(5, 0, 3)).unwrap();
        let b = render_clip(&spec, 2, &mut clip_rng(5, 0, 3)).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.objects, b.objects);
    }

    #[test]
    fn distractors_are_annotated() {
        let spec = SynthSpec::default();
        let clip = render_clip(&spec, 0, &mut clip_rng(0, 0, 0)).unwrap();
        assert_eq!(
            clip.objects
                .iter()
                .filter(|o| o.group() == "distractor")
                .count(),
            2
        );
        assert!(clip
            .objects
            .iter()
            .all(|o| o.frames.iter().all(|f| f.radius > 0.0)));
    }

    #[test]
    fn mismatched_recipes_are_rejected() {
        let spec = SynthSpec {
            num_classes: 3,
            ..SynthSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Parameter(_))));
    }
}
