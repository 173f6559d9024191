//! Spatio-temporal perturbation explanations.
//!
//! A low-resolution mask `m ∈ [0,1]^(T_m×H_m×W_m)` is upsampled to the clip
//! and blends the clip with a blurred copy of itself,
//! `Φ = m·x₀ + (1 − m)·x_p`. The mask minimizes
//!
//! ```text
//! f_c(Φ) + λ1 Σ|1 − m| + λs Σ_t TV_s(m_t) + λt TV_t(m)
//! ```
//!
//! where `f_c` is the softmax probability of the target class, `TV_s` is the
//! isotropic spatial total variation `Σ_u ‖∇m(u)‖^β` and `TV_t` sums
//! `|m(u, t+1) − m(u, t)|^β`. Both TV terms use forward differences that are
//! zero at the far boundary and live on the low-resolution grid. The
//! attention saliency is `1 − upsample(m)`.

mod blur;

pub use blur::{
    blur_reference, gaussian_filter, gaussian_kernel, median_filter, BlurConfig, PerturbReference,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::{upsample_trilinear, Tape, Var};
use crate::classifier::{argmax, VideoClassifier};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, OptimizerState};
use crate::tensor::Tensor;

/// Low-resolution perturbation mask stored as `[T_m, H_m, W_m]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume(Tensor);

impl MaskVolume {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Shape {
                op: "mask volume",
                reason: format!("expected T×H×W, got {:?}", values.shape()),
            });
        }
        if values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("mask values must lie in [0, 1]".into()));
        }
        Ok(Self(values))
    }

    /// All-ones (unperturbed) mask on a `(H_m, W_m, T_m)` grid.
    pub fn ones(grid: [usize; 3]) -> Self {
        let [h, w, t] = grid;
        Self(Tensor::ones(&[t, h, w]))
    }

    /// `(H_m, W_m, T_m)`.
    pub fn grid(&self) -> [usize; 3] {
        let s = self.0.shape();
        [s[1], s[2], s[0]]
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_values(self) -> Tensor {
        self.0
    }

    /// Trilinear upsampling to a `(T, H, W)` clip geometry.
    pub fn upsample(&self, geometry: [usize; 3]) -> Result<Tensor> {
        upsample_trilinear(&self.0, geometry)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub lambda1: f64,
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub beta: f64,
    pub lr: f64,
    pub iterations: usize,
    /// Class whose score is minimized; the model's prediction when unset.
    pub target_class: Option<usize>,
    /// Mask grid `(H_m, W_m, T_m)`.
    pub mask_size: [usize; 3],
    pub blur: BlurConfig,
    /// Recorded with the outputs; the optimization itself draws no randomness.
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.001,
            lambda_s: 0.2,
            lambda_t: 0.1,
            beta: 3.0,
            lr: 0.01,
            iterations: 500,
            target_class: None,
            mask_size: [28, 28, 10],
            blur: BlurConfig::default(),
            seed: 0,
        }
    }
}

impl ExplainConfig {
    fn validate(&self) -> Result<()> {
        if self.beta < 1.0 {
            return Err(Error::Parameter(format!(
                "β must be ≥ 1, got {}",
                self.beta
            )));
        }
        if self.mask_size.contains(&0) {
            return Err(Error::Parameter("mask extents must be positive".into()));
        }
        Ok(())
    }
}

/// `m·x₀ + (1 − m)·x_p` with `m[T×H×W]` broadcast over channels.
pub fn perturb_apply(clip: &Tensor, mask: &Tensor, reference: &PerturbReference) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x0 = tape.constant(clip.clone());
    let xp = tape.constant(reference.0.clone());
    let m = tape.constant(mask.clone());
    let out = perturb_on_tape(&mut tape, x0, xp, m)?;
    Ok(tape.value(out).clone())
}

fn perturb_on_tape(tape: &mut Tape, x0: Var, xp: Var, m: Var) -> Result<Var> {
    let cs = tape.shape(x0).to_vec();
    if cs.len() != 4 || tape.shape(m) != &cs[1..] || tape.shape(xp) != cs.as_slice() {
        return Err(Error::Dimension {
            op: "perturb_apply",
            lhs: cs,
            rhs: tape.shape(m).to_vec(),
        });
    }
    let mb = tape.expand_leading(m, cs[0])?;
    let keep = tape.mul(mb, x0)?;
    let neg = tape.scale(mb, -1.0);
    let inv = tape.add_scalar(neg, 1.0);
    let fade = tape.mul(inv, xp)?;
    tape.add(keep, fade)
}

/// `Σ_u (g_r² + g_c²)^(β/2)` over the last two axes of `m` (any leading axes are summed).
pub fn tv_spatial_on_tape(tape: &mut Tape, m: Var, beta: f64) -> Result<Var> {
    let rank = tape.shape(m).len();
    if rank < 2 {
        return Err(Error::Shape {
            op: "tv_spatial",
            reason: format!("expected at least two axes, got {:?}", tape.shape(m)),
        });
    }
    let gr = tape.diff(m, rank - 2)?;
    let gc = tape.diff(m, rank - 1)?;
    let gr2 = tape.mul(gr, gr)?;
    let gc2 = tape.mul(gc, gc)?;
    let sq = tape.add(gr2, gc2)?;
    let p = tape.pow(sq, beta / 2.0);
    Ok(tape.sum(p))
}

/// `Σ_u Σ_t |m(t+1, u) − m(t, u)|^β` for `m[T×H×W]`.
pub fn tv_temporal_on_tape(tape: &mut Tape, m: Var, beta: f64) -> Result<Var> {
    let d = tape.diff(m, 0)?;
    let d2 = tape.mul(d, d)?;
    let p = tape.pow(d2, beta / 2.0);
    Ok(tape.sum(p))
}

/// Spatial TV of one `H×W` mask frame.
pub fn tv_spatial(frame: &Tensor, beta: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let m = tape.constant(frame.clone());
    let v = tv_spatial_on_tape(&mut tape, m, beta)?;
    Ok(tape.value(v).item())
}

/// Temporal TV of a mask volume.
pub fn tv_temporal(mask: &MaskVolume, beta: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let m = tape.constant(mask.values().clone());
    let v = tv_temporal_on_tape(&mut tape, m, beta)?;
    Ok(tape.value(v).item())
}

/// Handles of one objective evaluation recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveTerms {
    pub loss: Var,
    pub score: Var,
    pub l1: Var,
    pub tv_spatial: Var,
    pub tv_temporal: Var,
}

/// Everything the objective needs besides the mask.
pub struct ExplainContext<'a> {
    pub model: &'a VideoClassifier,
    pub clip: &'a Tensor,
    pub reference: &'a PerturbReference,
    pub target: usize,
}

impl ExplainContext<'_> {
    fn geometry(&self) -> [usize; 3] {
        let s = self.clip.shape();
        [s[1], s[2], s[3]]
    }

    /// Records the objective for `mask` (a `[T_m, H_m, W_m]` var) on `tape`,
    /// with model weights as constants.
    pub fn record(
        &self,
        tape: &mut Tape,
        mask: Var,
        cfg: &ExplainConfig,
    ) -> Result<ObjectiveTerms> {
        if self.target >= self.model.config.num_classes {
            return Err(Error::Contract(format!(
                "target class {} out of range for {} classes",
                self.target, self.model.config.num_classes
            )));
        }
        let params = self.model.bind(tape, false);
        let x0 = tape.constant(self.clip.clone());
        let xp = tape.constant(self.reference.0.clone());
        let up = tape.upsample_trilinear(mask, self.geometry())?;
        let perturbed = perturb_on_tape(tape, x0, xp, up)?;
        let logits = self.model.forward(tape, perturbed, &params)?;
        let k = self.model.config.num_classes;
        let row = tape.reshape(logits, &[1, k])?;
        let probs = tape.softmax_rows(row)?;
        let score = tape.select(probs, self.target)?;

        let neg = tape.scale(mask, -1.0);
        let gap = tape.add_scalar(neg, 1.0);
        let gap = tape.abs(gap);
        let l1 = tape.sum(gap);
        let tv_s = tv_spatial_on_tape(tape, mask, cfg.beta)?;
        let tv_t = tv_temporal_on_tape(tape, mask, cfg.beta)?;

        let a = tape.scale(l1, cfg.lambda1);
        let b = tape.scale(tv_s, cfg.lambda_s);
        let c = tape.scale(tv_t, cfg.lambda_t);
        let reg = tape.add(a, b)?;
        let reg = tape.add(reg, c)?;
        let loss = tape.add(score, reg)?;
        Ok(ObjectiveTerms {
            loss,
            score,
            l1,
            tv_spatial: tv_s,
            tv_temporal: tv_t,
        })
    }

    /// Objective value and its gradient with respect to the mask.
    pub fn value_and_grad(&self, mask: &MaskVolume, cfg: &ExplainConfig) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let m = tape.leaf(mask.values().clone());
        let terms = self.record(&mut tape, m, cfg)?;
        tape.backward(terms.loss)?;
        let grad = tape
            .grad(m)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(mask.values().shape()));
        Ok((tape.value(terms.loss).item(), grad))
    }

    pub fn objective(&self, mask: &MaskVolume, cfg: &ExplainConfig) -> Result<f64> {
        let mut tape = Tape::new();
        let m = tape.constant(mask.values().clone());
        let terms = self.record(&mut tape, m, cfg)?;
        Ok(tape.value(terms.loss).item())
    }

    /// Target-class probability on the clip perturbed by `mask`.
    pub fn score(&self, mask: &MaskVolume) -> Result<f64> {
        let up = mask.upsample(self.geometry())?;
        let perturbed = perturb_apply(self.clip, &up, self.reference)?;
        Ok(self.model.probabilities(&perturbed)?[self.target])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub loss: f64,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct Explanation {
    pub mask: MaskVolume,
    pub target: usize,
    /// Target probability on the unperturbed clip.
    pub initial_score: f64,
    /// Target probability under the returned mask.
    pub final_score: f64,
    pub trace: Vec<TraceRecord>,
}

/// Adam on the low-resolution mask from an all-ones start, clamping into
/// `[0, 1]` after every step.
pub fn optimize_mask(
    model: &VideoClassifier,
    clip: &Tensor,
    cfg: &ExplainConfig,
) -> Result<Explanation> {
    cfg.validate()?;
    let reference = blur_reference(clip, &cfg.blur)?;
    let target = match cfg.target_class {
        Some(c) => c,
        None => argmax(model.logits(clip)?.data()),
    };
    let ctx = ExplainContext {
        model,
        clip,
        reference: &reference,
        target,
    };
    let [mh, mw, mt] = cfg.mask_size;
    let geometry = ctx.geometry();
    if mt > geometry[0] || mh > geometry[1] || mw > geometry[2] {
        return Err(Error::Parameter(format!(
            "mask grid {:?} exceeds clip geometry {geometry:?}",
            cfg.mask_size
        )));
    }
    let mut mask = Tensor::ones(&[mt, mh, mw]);
    let mut adam = OptimizerState::adam(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut trace = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let mut tape = Tape::new();
        let m = tape.leaf(mask.clone());
        let terms = ctx.record(&mut tape, m, cfg)?;
        let loss = tape.value(terms.loss).item();
        if !loss.is_finite() {
            return Err(Error::Optimization { iteration });
        }
        tape.backward(terms.loss)?;
        let grad = tape
            .grad(m)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(mask.shape()));
        if !grad.is_finite() {
            return Err(Error::Optimization { iteration });
        }
        trace.push(TraceRecord {
            iteration,
            loss,
            score: tape.value(terms.score).item(),
        });
        drop(tape);
        adam.step(&mut [&mut mask], &[&grad])?;
        for v in mask.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    let mask = MaskVolume::new(mask)?;
    let initial_score = model.probabilities(clip)?[target];
    let final_score = ctx.score(&mask)?;
    Ok(Explanation {
        mask,
        target,
        initial_score,
        final_score,
        trace,
    })
}

/// Attention saliency `1 − upsample(m)` at clip geometry `(T, H, W)`.
pub fn saliency_from_mask(mask: &MaskVolume, geometry: [usize; 3]) -> Result<Tensor> {
    Ok(mask.upsample(geometry)?.map(|v| (1.0 - v).clamp(0.0, 1.0)))
}
