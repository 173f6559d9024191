//! Miniature 3D residual video classifier with optional temporal reasoning
//! blocks after selected stages.
//!
//! Layout: a strided stem convolution, then one or more residual stages
//! (two 3×3×3 convolutions plus a projection shortcut when the shape
//! changes), then global average pooling and a linear head. Blocks listed in
//! [`ModelConfig::trb_stages`] get [`ModelConfig::trbs_per_stage`] TRBs
//! appended after their residual blocks.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, CHECKPOINT_MANIFEST};
pub use train::{
    accuracy, evaluate, fit, make_epoch_schedule, EpochRecord, EvalReport, FitResult, Predictor,
    TrainConfig,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::tensor::Tensor;
use crate::trb::{self, TrbParams};

/// A labelled RGB clip, `3×T×H×W` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub label: usize,
    pub fps: f64,
    pub source: Option<String>,
}

impl VideoClip {
    pub const CHANNELS: usize = 3;
    pub const FRAMES: usize = 20;
    pub const FPS: f64 = 4.0;
    pub const SIZE: usize = 360;

    pub fn new(frames: Tensor, label: usize) -> Result<Self> {
        if frames.rank() != 4 || frames.shape()[0] != Self::CHANNELS {
            return Err(Error::Shape {
                op: "video clip",
                reason: format!("expected 3×T×H×W, got {:?}", frames.shape()),
            });
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract(
                "clip pixel values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            frames,
            label,
            fps: Self::FPS,
            source: None,
        })
    }

    /// `(T, H, W)`.
    pub fn geometry(&self) -> [usize; 3] {
        let s = self.frames.shape();
        [s[1], s[2], s[3]]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `[C, T, H, W]` of accepted clips.
    pub input: [usize; 4],
    pub stem_channels: usize,
    pub stem_kernel: [usize; 3],
    pub stem_stride: [usize; 3],
    pub stem_padding: [usize; 3],
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<[usize; 3]>,
    pub blocks_per_stage: usize,
    pub trb_stages: Vec<usize>,
    pub trbs_per_stage: usize,
    pub num_classes: usize,
    /// Global pooling ahead of the linear head.
    pub pooling: Pooling,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    #[default]
    Max,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input: [3, 20, 64, 64],
            stem_channels: 16,
            stem_kernel: [3, 4, 4],
            stem_stride: [2, 4, 4],
            stem_padding: [1, 0, 0],
            stage_channels: vec![16, 32, 64, 64],
            stage_strides: vec![[2, 2, 2], [1, 2, 2], [1, 1, 1], [1, 1, 1]],
            blocks_per_stage: 1,
            trb_stages: vec![2, 3],
            trbs_per_stage: 2,
            num_classes: 4,
            pooling: Pooling::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let stages = self.stage_channels.len();
        if stages == 0 || self.stage_strides.len() != stages {
            return Err(Error::Parameter(format!(
                "{} stage widths but {} stage strides",
                stages,
                self.stage_strides.len()
            )));
        }
        if self.num_classes < 2 || self.blocks_per_stage == 0 {
            return Err(Error::Parameter(
                "need ≥ 2 classes and ≥ 1 block per stage".into(),
            ));
        }
        for &s in &self.trb_stages {
            let Some(&c) = self.stage_channels.get(s) else {
                return Err(Error::Parameter(format!("TRB stage {s} does not exist")));
            };
            if c % trb::REDUCTION != 0 {
                return Err(Error::Parameter(format!(
                    "stage {s} has {c} channels, not divisible by {}",
                    trb::REDUCTION
                )));
            }
        }
        Ok(())
    }

    pub fn trb_count(&self) -> usize {
        self.trb_stages.len() * self.trbs_per_stage
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub geom: ConvGeometry,
}

impl ConvLayer {
    fn new<R: Rng>(
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        geom: ConvGeometry,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel.iter().product::<usize>();
        let bound = gain * (6.0 / fan_in as f64).sqrt();
        Self {
            weight: Tensor::from_fn(&[cout, cin, kernel[0], kernel[1], kernel[2]], |_| {
                rng.gen_range(-bound..bound)
            }),
            bias: Tensor::zeros(&[cout]),
            geom,
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var, params: &mut ParamCursor) -> Result<Var> {
        let (w, b) = (params.next(), params.next());
        let y = tape.conv3d(x, w, self.geom)?;
        tape.channel_bias(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub shortcut: Option<ConvLayer>,
}

impl ResidualBlock {
    fn new<R: Rng>(cin: usize, cout: usize, stride: [usize; 3], rng: &mut R) -> Self {
        let same = ConvGeometry::new([1, 1, 1], [1, 1, 1]);
        let shortcut = (cin != cout || stride != [1, 1, 1]).then(|| {
            ConvLayer::new(
                cin,
                cout,
                [1, 1, 1],
                ConvGeometry::new(stride, [0, 0, 0]),
                1.0,
                rng,
            )
        });
        Self {
            conv1: ConvLayer::new(
                cin,
                cout,
                [3, 3, 3],
                ConvGeometry::new(stride, [1, 1, 1]),
                1.0,
                rng,
            ),
            conv2: ConvLayer::new(cout, cout, [3, 3, 3], same, 0.5, rng),
            shortcut,
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var, params: &mut ParamCursor) -> Result<Var> {
        let h = self.conv1.forward(tape, x, params)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, h, params)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(tape, x, params)?,
            None => x,
        };
        let y = tape.add(h, skip)?;
        Ok(tape.relu(y))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub blocks: Vec<ResidualBlock>,
    pub trbs: Vec<TrbParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClassifier {
    pub config: ModelConfig,
    pub stem: ConvLayer,
    pub stages: Vec<Stage>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

/// Hands out bound parameter handles in declaration order.
struct ParamCursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl ParamCursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }
}

impl VideoClassifier {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = ConvLayer::new(
            config.input[0],
            config.stem_channels,
            config.stem_kernel,
            ConvGeometry::new(config.stem_stride, config.stem_padding),
            1.0,
            &mut rng,
        );
        let mut cin = config.stem_channels;
        let mut stages = Vec::with_capacity(config.stage_channels.len());
        for (s, (&cout, &stride)) in config
            .stage_channels
            .iter()
            .zip(&config.stage_strides)
            .enumerate()
        {
            let mut blocks = Vec::with_capacity(config.blocks_per_stage);
            for b in 0..config.blocks_per_stage {
                let stride = if b == 0 { stride } else { [1, 1, 1] };
                blocks.push(ResidualBlock::new(cin, cout, stride, &mut rng));
                cin = cout;
            }
            let trbs = if config.trb_stages.contains(&s) {
                (0..config.trbs_per_stage)
                    .map(|_| TrbParams::new(cout, &mut rng))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            stages.push(Stage { blocks, trbs });
        }
        let bound = (6.0 / (cin + config.num_classes) as f64).sqrt();
        let head_weight =
            Tensor::from_fn(&[config.num_classes, cin], |_| rng.gen_range(-bound..bound));
        let head_bias = Tensor::zeros(&[config.num_classes]);
        let model = Self {
            config,
            stem,
            stages,
            head_weight,
            head_bias,
        };
        model.feature_shape()?;
        Ok(model)
    }

    /// Shape of the final feature volume, checking that every layer fits.
    pub fn feature_shape(&self) -> Result<[usize; 4]> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&self.config.input));
        let vars = self.bind(&mut tape, false);
        let mut cursor = ParamCursor {
            vars: &vars,
            pos: 0,
        };
        let f = self.features(&mut tape, x, &mut cursor)?;
        let s = tape.shape(f);
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Parameters with checkpoint names, in binding order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        // order mirrors `features` and `forward`
        out.push(("stem.weight".to_string(), &self.stem.weight));
        out.push(("stem.bias".to_string(), &self.stem.bias));
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.blocks.iter().enumerate() {
                let base = format!("stages.{s}.blocks.{b}");
                out.push((format!("{base}.conv1.weight"), &block.conv1.weight));
                out.push((format!("{base}.conv1.bias"), &block.conv1.bias));
                out.push((format!("{base}.conv2.weight"), &block.conv2.weight));
                out.push((format!("{base}.conv2.bias"), &block.conv2.bias));
                if let Some(sc) = &block.shortcut {
                    out.push((format!("{base}.shortcut.weight"), &sc.weight));
                    out.push((format!("{base}.shortcut.bias"), &sc.bias));
                }
            }
            for (k, t) in stage.trbs.iter().enumerate() {
                for (name, tensor) in TrbParams::GROUPS.iter().zip(t.tensors()) {
                    out.push((format!("stages.{s}.trbs.{k}.{name}"), tensor));
                }
            }
        }
        out.push(("head.weight".to_string(), &self.head_weight));
        out.push(("head.bias".to_string(), &self.head_bias));
        out
    }

    /// Mutable parameters in the same order as [`VideoClassifier::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.stem.weight, &mut self.stem.bias];
        for stage in &mut self.stages {
            for block in &mut stage.blocks {
                out.push(&mut block.conv1.weight);
                out.push(&mut block.conv1.bias);
                out.push(&mut block.conv2.weight);
                out.push(&mut block.conv2.bias);
                if let Some(sc) = &mut block.shortcut {
                    out.push(&mut sc.weight);
                    out.push(&mut sc.bias);
                }
            }
            for t in &mut stage.trbs {
                out.extend(t.tensors_mut());
            }
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    /// Records every parameter on `tape`; leaves when `trainable`, constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    fn features(&self, tape: &mut Tape, x: Var, params: &mut ParamCursor) -> Result<Var> {
        let mut h = self.stem.forward(tape, x, params)?;
        h = tape.relu(h);
        for stage in &self.stages {
            for block in &stage.blocks {
                h = block.forward(tape, h, params)?;
            }
            for t in &stage.trbs {
                let bound = trb::BoundTrb {
                    w_f: params.next(),
                    w_g: params.next(),
                    w_h: params.next(),
                    w_v: params.next(),
                    gamma: params.next(),
                };
                h = trb::trb_forward(tape, h, &bound, trb::value_geometry(t))?;
            }
        }
        Ok(h)
    }

    /// Logits `[K]` for a clip volume already on `tape`, using `params` from
    /// [`VideoClassifier::bind`].
    pub fn forward(&self, tape: &mut Tape, clip: Var, params: &[Var]) -> Result<Var> {
        if tape.shape(clip) != self.config.input {
            return Err(Error::Dimension {
                op: "model_forward",
                lhs: tape.shape(clip).to_vec(),
                rhs: self.config.input.to_vec(),
            });
        }
        let mut cursor = ParamCursor {
            vars: params,
            pos: 0,
        };
        let h = self.features(tape, clip, &mut cursor)?;
        let pooled = match self.config.pooling {
            Pooling::Mean => tape.channel_mean(h)?,
            Pooling::Max => tape.channel_max(h)?,
        };
        let c = tape.shape(pooled)[0];
        let col = tape.reshape(pooled, &[c, 1])?;
        let (w, b) = (cursor.next(), cursor.next());
        debug_assert_eq!(cursor.pos, params.len());
        let z = tape.matmul(w, col)?;
        let z = tape.reshape(z, &[self.config.num_classes])?;
        tape.add(z, b)
    }

    pub fn logits(&self, frames: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(frames.clone());
        let z = self.forward(&mut tape, x, &params)?;
        let out = tape.value(z).clone();
        if !out.is_finite() {
            return Err(Error::Numeric {
                op: "model_forward",
            });
        }
        Ok(out)
    }

    pub fn probabilities(&self, frames: &Tensor) -> Result<Vec<f64>> {
        let z = self.logits(frames)?;
        let k = z.numel();
        crate::autodiff::softmax_rows_value(z.data(), 1, k)
    }

    /// The same backbone and head with every TRB removed.
    pub fn without_trbs(&self) -> Self {
        let mut m = self.clone();
        m.config.trb_stages.clear();
        for stage in &mut m.stages {
            stage.trbs.clear();
        }
        m
    }

    pub fn trbs(&self) -> impl Iterator<Item = &TrbParams> {
        self.stages.iter().flat_map(|s| s.trbs.iter())
    }

    pub fn trbs_mut(&mut self) -> impl Iterator<Item = &mut TrbParams> {
        self.stages.iter_mut().flat_map(|s| s.trbs.iter_mut())
    }

    pub fn predict_clip(&self, frames: &Tensor) -> Result<usize> {
        let z = self.logits(frames)?;
        Ok(argmax(z.data()))
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy_loss(logits: &Tensor, label: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let l = tape.cross_entropy(z, label)?;
    Ok(tape.value(l).item())
}
