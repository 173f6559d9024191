//! Object-centric attention scores over saliency volumes.
//!
//! For an object with center `c` and radius `r` on frame `t`, every pixel `u`
//! contributes `M(u, t)` when `d(u, c) ≤ r` and `M(u, t) / d(u, c)` otherwise,
//! with `d` the Euclidean distance between pixel centers. Pixel `(y, x)` has
//! its center at `(y, x)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Saliency `M` stored as `[T, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyVolume(Tensor);

impl SaliencyVolume {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Shape {
                op: "saliency volume",
                reason: format!("expected T×H×W, got {:?}", values.shape()),
            });
        }
        if values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("saliency values must lie in [0, 1]".into()));
        }
        Ok(Self(values))
    }

    /// `(T, H, W)`.
    pub fn geometry(&self) -> [usize; 3] {
        let s = self.0.shape();
        [s[0], s[1], s[2]]
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_values(self) -> Tensor {
        self.0
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let [_, h, w] = self.geometry();
        &self.0.data()[t * h * w..][..h * w]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectFrame {
    pub t: usize,
    /// `(row, col)` in pixels.
    pub center: [f64; 2],
    pub radius: f64,
    /// `[row0, col0, row1, col1]`, inclusive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[usize; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub id: String,
    /// Objects sharing a group are averaged in time series; defaults to `id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub frames: Vec<ObjectFrame>,
}

impl ObjectAnnotation {
    pub fn group(&self) -> &str {
        self.group.as_deref().unwrap_or(&self.id)
    }

    pub fn at(&self, t: usize) -> Option<&ObjectFrame> {
        self.frames.iter().find(|f| f.t == t)
    }
}

pub fn load_annotations(path: &Path) -> Result<Vec<ObjectAnnotation>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing {}", path.display()), e))
}

pub fn save_annotations(objects: &[ObjectAnnotation], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(objects)
        .map_err(|e| Error::json("encoding annotations", e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn placement(m: &SaliencyVolume, t: usize, obj: &ObjectAnnotation) -> Result<ObjectFrame> {
    let [frames, h, w] = m.geometry();
    if t >= frames {
        return Err(Error::Contract(format!(
            "frame {t} outside a {frames}-frame volume"
        )));
    }
    let f = obj
        .at(t)
        .ok_or_else(|| Error::Contract(format!("object `{}` is absent at frame {t}", obj.id)))?;
    let [r, c] = f.center;
    if !(f.radius > 0.0)
        || !(0.0..=(h - 1) as f64).contains(&r)
        || !(0.0..=(w - 1) as f64).contains(&c)
    {
        return Err(Error::Contract(format!(
            "object `{}` at frame {t} needs a positive radius and an in-frame center, got {:?} / {}",
            obj.id, f.center, f.radius
        )));
    }
    Ok(f.clone())
}

fn weighted_sum(frame: &[f64], width: usize, center: [f64; 2], radius: f64) -> f64 {
    let mut total = 0.0;
    for (y, row) in frame.chunks_exact(width).enumerate() {
        let dy = y as f64 - center[0];
        for (x, &m) in row.iter().enumerate() {
            let dx = x as f64 - center[1];
            let d = (dy * dy + dx * dx).sqrt();
            total += if d <= radius { m } else { m / d };
        }
    }
    total
}

/// Unnormalized score of `obj` on frame `t` of `m`.
pub fn attention_score(m: &SaliencyVolume, t: usize, obj: &ObjectAnnotation) -> Result<f64> {
    let f = placement(m, t, obj)?;
    let w = m.geometry()[2];
    Ok(weighted_sum(m.frame(t), w, f.center, f.radius))
}

/// Score divided by the score of an all-ones saliency for the same object.
pub fn normalized_attention_score(
    m: &SaliencyVolume,
    t: usize,
    obj: &ObjectAnnotation,
) -> Result<f64> {
    let f = placement(m, t, obj)?;
    let w = m.geometry()[2];
    let ones = vec![1.0; m.frame(t).len()];
    let full = weighted_sum(&ones, w, f.center, f.radius);
    Ok(weighted_sum(m.frame(t), w, f.center, f.radius) / full)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub frame: usize,
    pub group: String,
    pub score: f64,
}

/// Per frame and group, the mean normalized score of the group members
/// present on that frame. Groups keep their first-appearance order; frames
/// where a group has no member are skipped.
pub fn score_time_series(
    m: &SaliencyVolume,
    objects: &[ObjectAnnotation],
) -> Result<Vec<ScoreRow>> {
    let mut groups: Vec<&str> = Vec::new();
    for o in objects {
        if !groups.contains(&o.group()) {
            groups.push(o.group());
        }
    }
    let mut rows = Vec::new();
    for t in 0..m.geometry()[0] {
        for &g in &groups {
            let mut sum = 0.0;
            let mut n = 0usize;
            for o in objects
                .iter()
                .filter(|o| o.group() == g && o.at(t).is_some())
            {
                sum += normalized_attention_score(m, t, o)?;
                n += 1;
            }
            if n > 0 {
                rows.push(ScoreRow {
                    frame: t,
                    group: g.to_string(),
                    score: sum / n as f64,
                });
            }
        }
    }
    Ok(rows)
}

/// Mean normalized score of `obj` over every frame where it is present.
pub fn mean_normalized_score(m: &SaliencyVolume, obj: &ObjectAnnotation) -> Result<f64> {
    let frames: Vec<usize> = obj
        .frames
        .iter()
        .map(|f| f.t)
        .filter(|&t| t < m.geometry()[0])
        .collect();
    if frames.is_empty() {
        return Err(Error::Contract(format!(
            "object `{}` is never present",
            obj.id
        )));
    }
    let mut total = 0.0;
    for &t in &frames {
        total += normalized_attention_score(m, t, obj)?;
    }
    Ok(total / frames.len() as f64)
}

/// Scores as JSON lines.
pub fn write_score_rows(rows: &[ScoreRow], path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::json("encoding score row", e))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
