//! Blurred reference clip: per frame and channel, a median filter followed
//! by a Gaussian, both with clamp-to-edge boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlurConfig {
    /// Side of the square median window (odd).
    pub median_size: usize,
    /// Gaussian standard deviation in pixels.
    pub sigma: f64,
    /// Gaussian support radius; `2σ` rounded when unset.
    pub radius: Option<usize>,
}

impl Default for BlurConfig {
    fn default() -> Self {
        Self {
            median_size: 5,
            sigma: 5.0,
            radius: None,
        }
    }
}

impl BlurConfig {
    pub fn gaussian_radius(&self) -> usize {
        self.radius.unwrap_or((2.0 * self.sigma).round() as usize)
    }
}

/// The clip every mask location fades toward, same geometry as the source.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbReference(pub Tensor);

#[inline]
fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

pub fn median_filter(frame: &[f64], height: usize, width: usize, size: usize) -> Vec<f64> {
    let r = (size / 2) as isize;
    let mut window = Vec::with_capacity(size * size);
    let mut out = vec![0.0; frame.len()];
    for y in 0..height {
        for x in 0..width {
            window.clear();
            for dy in -r..=r {
                let yy = clamp_index(y as isize + dy, height);
                for dx in -r..=r {
                    let xx = clamp_index(x as isize + dx, width);
                    window.push(frame[yy * width + xx]);
                }
            }
            let mid = window.len() / 2;
            let (_, m, _) = window.select_nth_unstable_by(mid, f64::total_cmp);
            out[y * width + x] = *m;
        }
    }
    out
}

pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur.
pub fn gaussian_filter(
    frame: &[f64],
    height: usize,
    width: usize,
    sigma: f64,
    radius: usize,
) -> Vec<f64> {
    let k = gaussian_kernel(sigma, radius);
    let r = radius as isize;
    let mut tmp = vec![0.0; frame.len()];
    for y in 0..height {
        let row = &frame[y * width..][..width];
        for x in 0..width {
            tmp[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * row[clamp_index(x as isize + j as isize - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; frame.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * tmp[clamp_index(y as isize + j as isize - r, height) * width + x])
                .sum();
        }
    }
    out
}

/// Median-then-Gaussian blur of every frame of a `C×T×H×W` clip.
pub fn blur_reference(clip: &Tensor, cfg: &BlurConfig) -> Result<PerturbReference> {
    let [c, t, h, w] = match *clip.shape() {
        [c, t, h, w] => [c, t, h, w],
        _ => {
            return Err(Error::Shape {
                op: "blur_reference",
                reason: format!("expected C×T×H×W, got {:?}", clip.shape()),
            })
        }
    };
    if cfg.median_size == 0 || cfg.median_size % 2 == 0 || cfg.sigma <= 0.0 {
        return Err(Error::Parameter(format!(
            "median size must be odd and sigma positive, got {} and {}",
            cfg.median_size, cfg.sigma
        )));
    }
    if h < cfg.median_size || w < cfg.median_size {
        return Err(Error::Parameter(format!(
            "{h}×{w} frame is smaller than the {0}×{0} median window",
            cfg.median_size
        )));
    }
    let plane = h * w;
    let radius = cfg.gaussian_radius();
    let mut out = Vec::with_capacity(clip.numel());
    for frame in clip.data().chunks_exact(plane).take(c * t) {
        let med = median_filter(frame, h, w, cfg.median_size);
        out.extend(
            gaussian_filter(&med, h, w, cfg.sigma, radius)
                .into_iter()
                .map(|v| v.clamp(0.0, 1.0)),
        );
    }
    Ok(PerturbReference(Tensor::new(clip.shape(), out)?))
}
