//! Finite-difference checks for every tape operation, the composed block
//! forward and the explanation objective, shared by the gradient tests and
//! the acceptance suite.

use super::{away_from_zero, fd_check, rng, tiny_model, uniform, weighted_sum};
use trb_core::explain::{blur_reference, ExplainConfig, ExplainContext};
use trb_core::trb::{trb_forward, TrbParams};
use trb_core::{ConvGeometry, Tape, Tensor};

/// Worst relative error per named check.
#[derive(Default)]
pub struct Checks {
    pub results: Vec<(String, f64)>,
}

impl Checks {
    pub fn check<F>(&mut self, name: &str, inputs: &[Tensor], f: F)
    where
        F: Fn(&mut Tape, &[trb_core::Var]) -> trb_core::Result<trb_core::Var>,
    {
        self.results.push((name.to_string(), fd_check(inputs, f)));
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.results.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

pub const ALL: &[(&str, fn(&mut Checks))] = &[
    ("elementwise_ops", elementwise_ops),
    ("reductions_and_reshapes", reductions_and_reshapes),
    ("matrix_ops", matrix_ops),
    ("conv3d_input_and_kernel", conv3d_input_and_kernel),
    ("volume_ops", volume_ops),
    ("tv_regularizers", tv_regularizers),
    (
        "trb_forward_all_parameter_groups",
        trb_forward_all_parameter_groups,
    ),
    (
        "explanation_objective_wrt_mask",
        explanation_objective_wrt_mask,
    ),
];

pub fn elementwise_ops(c: &mut Checks) {
    let mut r = rng(1);
    let a = away_from_zero(&[3, 4], &mut r);
    let b = away_from_zero(&[3, 4], &mut r);
    c.check("add", &[a.clone(), b.clone()], |t, v| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y, 10)
    });
    c.check("sub", &[a.clone(), b.clone()], |t, v| {
        let y = t.sub(v[0], v[1])?;
        weighted_sum(t, y, 11)
    });
    c.check("mul", &[a.clone(), b.clone()], |t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted_sum(t, y, 12)
    });
    c.check("scale+add_scalar", &[a.clone()], |t, v| {
        let y = t.scale(v[0], -2.5);
        let y = t.add_scalar(y, 0.75);
        weighted_sum(t, y, 13)
    });
    c.check("mul_scalar", &[a.clone(), Tensor::scalar(0.6)], |t, v| {
        let y = t.mul_scalar(v[0], v[1])?;
        weighted_sum(t, y, 14)
    });
    c.check("abs", &[a.clone()], |t, v| {
        let y = t.abs(v[0]);
        weighted_sum(t, y, 15)
    });
    c.check("relu", &[a.clone()], |t, v| {
        let y = t.relu(v[0]);
        weighted_sum(t, y, 16)
    });
    let positive = uniform(&[3, 4], 0.2, 1.5, &mut r);
    for p in [0.5, 1.5, 2.0, 3.0] {
        c.check("pow", &[positive.clone()], |t, v| {
            let y = t.pow(v[0], p);
            weighted_sum(t, y, 17)
        });
    }
}

pub fn reductions_and_reshapes(c: &mut Checks) {
    let mut r = rng(2);
    let a = uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
    c.check("sum", &[a.clone()], |t, v| {
        let y = t.mul(v[0], v[0])?;
        Ok(t.sum(y))
    });
    c.check("mean", &[a.clone()], |t, v| {
        let y = t.mul(v[0], v[0])?;
        Ok(t.mean(y))
    });
    c.check("reshape", &[a.clone()], |t, v| {
        let y = t.reshape(v[0], &[6, 4])?;
        weighted_sum(t, y, 20)
    });
    c.check("channel_mean", &[a.clone()], |t, v| {
        let y = t.channel_mean(v[0])?;
        weighted_sum(t, y, 21)
    });
    c.check("channel_max", &[a.clone()], |t, v| {
        let y = t.channel_max(v[0])?;
        weighted_sum(t, y, 24)
    });
    c.check(
        "channel_bias",
        &[a.clone(), uniform(&[2], -1.0, 1.0, &mut r)],
        |t, v| {
            let y = t.channel_bias(v[0], v[1])?;
            weighted_sum(t, y, 22)
        },
    );
    c.check("expand_leading", &[a.clone()], |t, v| {
        let y = t.expand_leading(v[0], 3)?;
        weighted_sum(t, y, 23)
    });
    c.check("select", &[a.clone()], |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.select(y, 7)
    });
}

pub fn matrix_ops(c: &mut Checks) {
    let mut r = rng(3);
    let a = uniform(&[3, 5], -1.0, 1.0, &mut r);
    let b = uniform(&[5, 2], -1.0, 1.0, &mut r);
    c.check("matmul", &[a.clone(), b], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, 30)
    });
    c.check("transpose", &[a.clone()], |t, v| {
        let y = t.transpose(v[0])?;
        weighted_sum(t, y, 31)
    });
    c.check(
        "softmax_rows",
        &[uniform(&[4, 6], -2.0, 2.0, &mut r)],
        |t, v| {
            let y = t.softmax_rows(v[0])?;
            weighted_sum(t, y, 32)
        },
    );
    for label in 0..4 {
        c.check(
            "cross_entropy",
            &[uniform(&[4], -3.0, 3.0, &mut r)],
            |t, v| t.cross_entropy(v[0], label),
        );
    }
}

pub fn conv3d_input_and_kernel(c: &mut Checks) {
    let mut r = rng(4);
    let x = uniform(&[2, 4, 5, 5], -1.0, 1.0, &mut r);
    let k = uniform(&[3, 2, 3, 2, 3], -0.5, 0.5, &mut r);
    for geom in [
        ConvGeometry::unit(),
        ConvGeometry::new([1, 2, 2], [1, 0, 1]),
        ConvGeometry::new([2, 1, 3], [0, 1, 2]),
    ] {
        c.check("conv3d", &[x.clone(), k.clone()], |t, v| {
            let y = t.conv3d(v[0], v[1], geom)?;
            weighted_sum(t, y, 40)
        });
    }
}

pub fn volume_ops(c: &mut Checks) {
    let mut r = rng(5);
    let m = uniform(&[2, 3, 3], 0.0, 1.0, &mut r);
    c.check("upsample_trilinear", &[m.clone()], |t, v| {
        let y = t.upsample_trilinear(v[0], [4, 7, 5])?;
        weighted_sum(t, y, 50)
    });
    c.check("upsample_identity", &[m.clone()], |t, v| {
        let y = t.upsample_trilinear(v[0], [2, 3, 3])?;
        weighted_sum(t, y, 51)
    });
    for axis in 0..3 {
        c.check("diff", &[m.clone()], |t, v| {
            let y = t.diff(v[0], axis)?;
            weighted_sum(t, y, 52)
        });
    }
    let x = uniform(&[3, 2, 2, 3], -1.0, 1.0, &mut r);
    c.check("frame_slice+stack_frames", &[x.clone()], |t, v| {
        let a = t.frame_slice(v[0], 1)?;
        let b = t.frame_slice(v[0], 0)?;
        let b = t.scale(b, 2.0);
        let y = t.stack_frames(&[a, b, a], 2, 3)?;
        weighted_sum(t, y, 53)
    });
}

pub fn tv_regularizers(c: &mut Checks) {
    // smooth ramp plus jitter keeps neighbour differences away from the |d|^β kink
    let jitter = uniform(&[3, 4, 4], -0.02, 0.02, &mut rng(6));
    let m = Tensor::from_fn(&[3, 4, 4], |i| {
        let (t, y, x) = (i / 16, (i / 4) % 4, i % 4);
        0.1 + 0.25 * t as f64 + 0.2 * y as f64 + 0.13 * x as f64 + jitter.data()[i]
    });
    for beta in [1.5, 2.0, 3.0] {
        c.check("tv_spatial", &[m.clone()], |t, v| {
            trb_core::explain::tv_spatial_on_tape(t, v[0], beta)
        });
        c.check("tv_temporal", &[m.clone()], |t, v| {
            trb_core::explain::tv_temporal_on_tape(t, v[0], beta)
        });
    }
}

fn trb_fixture(h_kernel: [usize; 3], reduced: usize, seed: u64) -> (TrbParams, Tensor) {
    let mut r = rng(seed);
    let mut p = TrbParams::with_reduced(8, reduced, h_kernel, &mut r).unwrap();
    p.gamma = Tensor::scalar(0.7);
    let x = uniform(&[8, 2, 2, 3], -1.0, 1.0, &mut r);
    (p, x)
}

pub fn trb_forward_all_parameter_groups(c: &mut Checks) {
    for (kernel, reduced, seed) in [([1, 1, 1], 1, 60), ([3, 3, 3], 2, 61)] {
        let (p, x) = trb_fixture(kernel, reduced, seed);
        let geom = trb_core::trb::value_geometry(&p);
        let mut inputs = vec![x];
        inputs.extend(p.tensors().into_iter().cloned());
        c.check("trb_forward", &inputs, |t, v| {
            let bound = trb_core::trb::BoundTrb {
                w_f: v[1],
                w_g: v[2],
                w_h: v[3],
                w_v: v[4],
                gamma: v[5],
            };
            let y = trb_forward(t, v[0], &bound, geom)?;
            weighted_sum(t, y, 62)
        });
    }
}

pub fn explanation_objective_wrt_mask(c: &mut Checks) {
    let model = tiny_model(3);
    let clip = uniform(&[3, 4, 8, 8], 0.0, 1.0, &mut rng(70));
    let reference = blur_reference(&clip, &Default::default()).unwrap();
    let cfg = ExplainConfig {
        mask_size: [4, 4, 2],
        ..ExplainConfig::default()
    };
    // λ's raised so the regularizers weigh about as much as the class score
    let heavy = ExplainConfig {
        lambda1: 0.05,
        lambda_s: 0.5,
        lambda_t: 0.5,
        ..cfg.clone()
    };
    let mask = uniform(&[2, 4, 4], 0.2, 0.8, &mut rng(71));
    for target in 0..3 {
        let ctx = ExplainContext {
            model: &model,
            clip: &clip,
            reference: &reference,
            target,
        };
        for e in [&cfg, &heavy] {
            c.check("explain_objective", std::slice::from_ref(&mask), |t, v| {
                Ok(ctx.record(t, v[0], e)?.loss)
            });
        }
    }
}
