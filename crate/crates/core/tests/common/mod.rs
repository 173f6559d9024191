#![allow(dead_code)]

pub mod fd_cases;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trb_core::classifier::{ModelConfig, VideoClassifier};
use trb_core::metrics::{ObjectAnnotation, ObjectFrame};
use trb_core::trb::TrbParams;
use trb_core::{Result, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values in `±[0.2, 1)`, away from the kinks of `abs`, `relu` and `pow`.
pub fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.2..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Largest gradient discrepancy relative to the largest numeric gradient
/// magnitude (floored at 1e-8), over every input.
pub fn fd_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    fd_check_with_step(inputs, FD_STEP, f)
}

pub fn fd_check_with_step<F>(inputs: &[Tensor], step: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars).expect("forward");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars).expect("forward");
        tape.value(loss).item()
    };

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        let mut values = inputs.to_vec();
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x = input.data()[i];
            values[k].data_mut()[i] = x + step;
            let up = eval(&values);
            values[k].data_mut()[i] = x - step;
            let down = eval(&values);
            values[k].data_mut()[i] = x;
            *slot = (up - down) / (2.0 * step);
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        let diff = analytic[k]
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        worst = worst.max(diff / scale);
    }
    worst
}

/// `Σ w ⊙ y` for a fixed random `w`, turning any output into a scalar loss
/// that exercises every output element.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = uniform(tape.shape(y), -1.0, 1.0, &mut rng(seed));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// A 3-class model on `3×4×8×8` clips with one active TRB.
pub fn tiny_model(seed: u64) -> VideoClassifier {
    let cfg = ModelConfig {
        input: [3, 4, 8, 8],
        stem_channels: 8,
        stem_kernel: [1, 2, 2],
        stem_stride: [1, 2, 2],
        stem_padding: [0, 0, 0],
        stage_channels: vec![8],
        stage_strides: vec![[1, 1, 1]],
        blocks_per_stage: 1,
        trb_stages: vec![0],
        trbs_per_stage: 1,
        num_classes: 3,
        ..ModelConfig::default()
    };
    let mut model = VideoClassifier::new(cfg, seed).unwrap();
    for p in model.trbs_mut() {
        p.gamma = Tensor::scalar(0.5);
    }
    model
}

/// Direct evaluation of the block for a 1×1×1 value kernel:
/// `s_ij = f_iᵀ g_j`, `α_j = softmax_i(s_ij)`, `o_j = Σ_i α_ji h_i`,
/// `y_j = γ W_v o_j + x_j`. Returns `(y, α per frame)`.
pub fn naive_trb(p: &TrbParams, x: &Tensor) -> (Tensor, Vec<Vec<Vec<f64>>>) {
    let [c, t_len, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let n = h * w;
    let cr = p.reduced();
    let gamma = p.gamma.item();
    let xv = |ch: usize, t: usize, i: usize| x.data()[(ch * t_len + t) * n + i];
    let proj = |m: &Tensor, t: usize, i: usize| -> Vec<f64> {
        (0..cr)
            .map(|r| {
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += m.data()[r * c + ch] * xv(ch, t, i);
                }
                acc
            })
            .collect()
    };
    let mut y = vec![0.0; x.numel()];
    let mut maps = Vec::new();
    for t in 0..t_len {
        let f: Vec<Vec<f64>> = (0..n).map(|i| proj(&p.w_f, t, i)).collect();
        let g: Vec<Vec<f64>> = (0..n).map(|i| proj(&p.w_g, t, i)).collect();
        let hv: Vec<Vec<f64>> = (0..n).map(|i| proj(&p.w_h, t, i)).collect();
        let mut alpha = vec![vec![0.0; n]; n];
        for j in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|i| (0..cr).map(|r| f[i][r] * g[j][r]).sum())
                .collect();
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - max).exp()).sum();
            for i in 0..n {
                alpha[j][i] = (s[i] - max).exp() / z;
            }
        }
        for j in 0..n {
            let o: Vec<f64> = (0..cr)
                .map(|r| (0..n).map(|i| alpha[j][i] * hv[i][r]).sum())
                .collect();
            for ch in 0..c {
                let v: f64 = (0..cr).map(|r| p.w_v.data()[ch * cr + r] * o[r]).sum();
                y[(ch * t_len + t) * n + j] = gamma * v + xv(ch, t, j);
            }
        }
        maps.push(alpha);
    }
    (Tensor::new(x.shape(), y).unwrap(), maps)
}

pub fn object(
    id: &str,
    center: [f64; 2],
    radius: f64,
    frames: std::ops::Range<usize>,
) -> ObjectAnnotation {
    ObjectAnnotation {
        id: id.into(),
        group: None,
        frames: frames
            .map(|t| ObjectFrame {
                t,
                center,
                radius,
                bbox: None,
            })
            .collect(),
    }
}

/// Per-pixel double loop straight from the score definition.
pub fn loop_oracle(m: &Tensor, t: usize, center: [f64; 2], radius: f64) -> f64 {
    let (h, w) = (m.shape()[1], m.shape()[2]);
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = m.at(&[t, y, x]);
            let d = ((y as f64 - center[0]).powi(2) + (x as f64 - center[1]).powi(2)).sqrt();
            s += if d <= radius { v } else { v / d };
        }
    }
    s
}

/// Saliency blobs at A = (8, 8) and B = (24, 22) on `20×32×32`; the weight
/// on B ramps linearly over frames 6..=14.
pub fn transition_fixture() -> (Tensor, Vec<ObjectAnnotation>) {
    let (t_len, h, w) = (20, 32, 32);
    let a = object("a", [8.0, 8.0], 3.0, 0..t_len);
    let b = object("b", [24.0, 22.0], 3.0, 0..t_len);
    let blob = |c: [f64; 2], y: usize, x: usize| {
        let d2 = (y as f64 - c[0]).powi(2) + (x as f64 - c[1]).powi(2);
        (-d2 / 18.0).exp()
    };
    let weight = |t: usize| ((t as f64 - 6.0) / 8.0).clamp(0.0, 1.0);
    let m = Tensor::from_fn(&[t_len, h, w], |k| {
        let (t, y, x) = (k / (h * w), (k / w) % h, k % w);
        (1.0 - weight(t)) * blob([8.0, 8.0], y, x) + weight(t) * blob([24.0, 22.0], y, x)
    });
    (m, vec![a, b])
}
