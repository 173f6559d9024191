//! Temporal reasoning block: per-frame spatial self-attention over a
//! `C×T×H×W` feature volume, added back through a learnable scalar gate.
//!
//! For every frame `t` the block forms two reduced embeddings
//! `f = W_f x_t` and `g = W_g x_t` (`C̄×N`, `N = H·W`) and the score
//! `s[i][j] = f_iᵀ g_j`. Output location `j` attends over all locations `i`
//! with weights `α[j][i] = softmax_i(s[i][j])`. Values come from a 3D
//! convolution `h = W_h * x` over the whole volume, so
//! `o_t = h_t · α_tᵀ`. The stacked `C̄`-channel result is projected back to
//! `C` channels by `W_v` and the block returns `γ · W_v O + x`. With `γ = 0`
//! (its initial value) the block is the identity.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::tensor::Tensor;

/// Channel reduction used unless overridden.
pub const REDUCTION: usize = 8;

/// A validated `C×T×H×W` activation volume with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume(Tensor);

impl FeatureVolume {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 4 {
            return Err(Error::Shape {
                op: "feature volume",
                reason: format!("expected C×T×H×W, got {:?}", values.shape()),
            });
        }
        if !values.is_finite() {
            return Err(Error::Numeric {
                op: "feature volume",
            });
        }
        Ok(Self(values))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[1]
    }

    /// Spatial extent `(H, W)`.
    pub fn spatial(&self) -> (usize, usize) {
        (self.0.shape()[2], self.0.shape()[3])
    }

    pub fn locations(&self) -> usize {
        self.0.shape()[2] * self.0.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Per-frame `N×N` row-stochastic attention matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub frames: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrbParams {
    pub w_f: Tensor,
    pub w_g: Tensor,
    /// Value kernel, `C̄×C×kT×kH×kW` with odd extents (same-size padding).
    pub w_h: Tensor,
    pub w_v: Tensor,
    pub gamma: Tensor,
}

/// The five parameter groups of a block recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundTrb {
    pub w_f: Var,
    pub w_g: Var,
    pub w_h: Var,
    pub w_v: Var,
    pub gamma: Var,
}

impl TrbParams {
    /// Random projections with `C̄ = C/8`; rejects `C` not divisible by 8.
    pub fn new<R: Rng>(channels: usize, rng: &mut R) -> Result<Self> {
        if channels == 0 || channels % REDUCTION != 0 {
            return Err(Error::Parameter(format!(
                "channel count {channels} is not a positive multiple of {REDUCTION}"
            )));
        }
        Self::with_reduced(channels, channels / REDUCTION, [1, 1, 1], rng)
    }

    /// Explicit reduced width and value-kernel extents.
    pub fn with_reduced<R: Rng>(
        channels: usize,
        reduced: usize,
        h_kernel: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 || reduced == 0 {
            return Err(Error::Parameter("channel counts must be positive".into()));
        }
        if h_kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::Parameter(format!(
                "value kernel extents must be odd, got {h_kernel:?}"
            )));
        }
        let bound_in = (3.0 / channels as f64).sqrt();
        let bound_red = (3.0 / reduced as f64).sqrt();
        let kvol: usize = h_kernel.iter().product();
        let bound_h = (3.0 / (channels * kvol) as f64).sqrt();
        let mut uniform =
            |shape: &[usize], bound: f64| Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        Ok(Self {
            w_f: uniform(&[reduced, channels], bound_in),
            w_g: uniform(&[reduced, channels], bound_in),
            w_h: uniform(
                &[reduced, channels, h_kernel[0], h_kernel[1], h_kernel[2]],
                bound_h,
            ),
            w_v: uniform(&[channels, reduced], bound_red),
            gamma: Tensor::scalar(0.0),
        })
    }

    pub fn channels(&self) -> usize {
        self.w_f.shape()[1]
    }

    pub fn reduced(&self) -> usize {
        self.w_f.shape()[0]
    }

    pub fn h_kernel(&self) -> [usize; 3] {
        let s = self.w_h.shape();
        [s[2], s[3], s[4]]
    }

    fn h_geometry(&self) -> ConvGeometry {
        let k = self.h_kernel();
        ConvGeometry::new([1, 1, 1], [k[0] / 2, k[1] / 2, k[2] / 2])
    }

    pub const GROUPS: [&'static str; 5] = ["w_f", "w_g", "w_h", "w_v", "gamma"];

    /// Parameter groups in [`TrbParams::GROUPS`] order.
    pub fn tensors(&self) -> [&Tensor; 5] {
        [&self.w_f, &self.w_g, &self.w_h, &self.w_v, &self.gamma]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.w_f,
            &mut self.w_g,
            &mut self.w_h,
            &mut self.w_v,
            &mut self.gamma,
        ]
    }

    /// Records the parameters on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundTrb {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundTrb {
            w_f: put(&self.w_f),
            w_g: put(&self.w_g),
            w_h: put(&self.w_h),
            w_v: put(&self.w_v),
            gamma: put(&self.gamma),
        }
    }

    fn check_input(&self, x: &FeatureVolume) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(Error::Dimension {
                op: "trb_forward",
                lhs: x.tensor().shape().to_vec(),
                rhs: vec![self.channels()],
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &FeatureVolume) -> Result<FeatureVolume> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(x.tensor().clone());
        let y = trb_forward(&mut tape, xv, &p, self.h_geometry())?;
        FeatureVolume::new(tape.value(y).clone())
    }

    pub fn attention(&self, x: &FeatureVolume) -> Result<AttentionMap> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(x.tensor().clone());
        let mut frames = Vec::with_capacity(x.frames());
        for t in 0..x.frames() {
            let xt = tape.frame_slice(xv, t)?;
            let a = attention_map(&mut tape, xt, &p)?;
            frames.push(tape.value(a).clone());
        }
        Ok(AttentionMap { frames })
    }

    /// Writes one dump per parameter group plus `manifest.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let k = self.h_kernel();
        let mut manifest = format!(
            "channels={}\nreduced_channels={}\nh_kernel={},{},{}\n",
            self.channels(),
            self.reduced(),
            k[0],
            k[1],
            k[2]
        );
        for (name, t) in Self::GROUPS.iter().zip(self.tensors()) {
            let file = format!("{name}.trbt");
            t.save(dir.join(&file))?;
            manifest.push_str(&format!("{name}={file}\n"));
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let entries: BTreeMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let get = |key: &str| {
            entries
                .get(key)
                .copied()
                .ok_or_else(|| Error::Format(format!("{} lacks `{key}`", path.display())))
        };
        let channels: usize = get("channels")?
            .parse()
            .map_err(|_| Error::Format("bad channels entry".into()))?;
        let reduced: usize = get("reduced_channels")?
            .parse()
            .map_err(|_| Error::Format("bad reduced_channels entry".into()))?;
        let load = |key: &str| Tensor::load(dir.join(get(key)?));
        let params = Self {
            w_f: load("w_f")?,
            w_g: load("w_g")?,
            w_h: load("w_h")?,
            w_v: load("w_v")?,
            gamma: load("gamma")?,
        };
        if params.channels() != channels || params.reduced() != reduced {
            return Err(Error::Format(format!(
                "manifest declares C={channels}, C̄={reduced} but tensors disagree"
            )));
        }
        Ok(params)
    }
}

/// `α` for one frame slice `x_t[C×N]`: row `j` is the softmax over `i` of
/// `f(x_i)ᵀ g(x_j)`.
pub fn attention_map(tape: &mut Tape, x_t: Var, p: &BoundTrb) -> Result<Var> {
    let c = tape.shape(p.w_f)[1];
    if tape.shape(x_t).len() != 2 || tape.shape(x_t)[0] != c {
        return Err(Error::Dimension {
            op: "attention_map",
            lhs: tape.shape(x_t).to_vec(),
            rhs: vec![c],
        });
    }
    let f = tape.matmul(p.w_f, x_t)?;
    let g = tape.matmul(p.w_g, x_t)?;
    let gt = tape.transpose(g)?;
    // scores[j][i] = g_j · f_i = s_ij
    let scores = tape.matmul(gt, f)?;
    tape.softmax_rows(scores)
}

/// Stacked attended values `O[C̄×T×H×W]` given one map per frame.
pub fn attend_values(
    tape: &mut Tape,
    x: Var,
    maps: &[Var],
    p: &BoundTrb,
    h_geom: ConvGeometry,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape {
            op: "attend_values",
            reason: format!("expected C×T×H×W, got {shape:?}"),
        });
    }
    let (frames, height, width) = (shape[1], shape[2], shape[3]);
    if maps.len() != frames {
        return Err(Error::Contract(format!(
            "{} attention maps for {frames} frames",
            maps.len()
        )));
    }
    let h = tape.conv3d(x, p.w_h, h_geom)?;
    let mut out = Vec::with_capacity(frames);
    for (t, &alpha) in maps.iter().enumerate() {
        let h_t = tape.frame_slice(h, t)?;
        let alpha_t = tape.transpose(alpha)?;
        out.push(tape.matmul(h_t, alpha_t)?);
    }
    tape.stack_frames(&out, height, width)
}

/// `γ · W_v O + x` over a whole `C×T×H×W` volume.
pub fn trb_forward(tape: &mut Tape, x: Var, p: &BoundTrb, h_geom: ConvGeometry) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let c = tape.shape(p.w_f)[1];
    if shape.len() != 4 || shape[0] != c {
        return Err(Error::Dimension {
            op: "trb_forward",
            lhs: shape,
            rhs: vec![c],
        });
    }
    let (frames, height, width) = (shape[1], shape[2], shape[3]);
    let mut maps = Vec::with_capacity(frames);
    for t in 0..frames {
        let x_t = tape.frame_slice(x, t)?;
        maps.push(attention_map(tape, x_t, p)?);
    }
    let o = attend_values(tape, x, &maps, p, h_geom)?;
    let mut projected = Vec::with_capacity(frames);
    for t in 0..frames {
        let o_t = tape.frame_slice(o, t)?;
        projected.push(tape.matmul(p.w_v, o_t)?);
    }
    let o_v = tape.stack_frames(&projected, height, width)?;
    let gated = tape.mul_scalar(o_v, p.gamma)?;
    tape.add(gated, x)
}

/// Same-size padding for a block's value kernel.
pub fn value_geometry(params: &TrbParams) -> ConvGeometry {
    params.h_geometry()
}
