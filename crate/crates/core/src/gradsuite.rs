//! Finite-difference verification suite over every differentiable op and a
//! whole network, in 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{FusionTopology, ModelError, SkipcrossNet, Strategy};
use crate::tensor::{grad_check, grad_check_params, GradCheckReport, Param, Result, Tensor};

pub const EPSILON: f64 = 1e-6;
/// Larger step for the deep network, whose small gradients drown in
/// roundoff at `EPSILON`.
pub const NETWORK_EPSILON: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Largest fraction of sampled coordinates that may be skipped as kinks.
pub const MAX_KINK_FRACTION: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        let sampled = self.report.checked + self.report.kinks;
        self.report.max_rel_error < TOLERANCE
            && self.report.checked > 0
            && self.report.kinks as f64 <= MAX_KINK_FRACTION * sampled as f64
    }
}

/// The small topology used for whole-network checks.
pub fn tiny_topology() -> FusionTopology {
    FusionTopology::new(vec![2, 2, 2], vec![4, 8, 8], Strategy::Skipcross)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn entry(name: &str, report: GradCheckReport) -> SuiteEntry {
    SuiteEntry {
        name: name.to_string(),
        report,
    }
}

/// Checks each op against a random linear functional of its output.
pub fn op_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let x = random(&[2, 3, 6, 6], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let ho = (6 + 2 * pad - 3) / stride + 1;
        let coeff = random(&[2, 4, ho, ho], &mut rng);
        let r = grad_check(
            |_, p| {
                p[0].conv2d(p[1], Some(p[2]), stride, pad)?
                    .weighted_sum(coeff.clone())
            },
            &[x, w, b],
            EPSILON,
            None,
            seed,
        )?;
        out.push(entry(&format!("conv2d stride {stride} pad {pad}"), r));
    }

    let x = random(&[2, 3, 3, 4], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[2], &mut rng);
    let coeff = random(&[2, 2, 6, 8], &mut rng);
    let r = grad_check(
        |_, p| {
            p[0].conv_transpose2d(p[1], Some(p[2]), 2, 1, 1)?
                .weighted_sum(coeff.clone())
        },
        &[x, w, b],
        EPSILON,
        None,
        seed,
    )?;
    out.push(entry("conv_transpose2d", r));

    let x = random(&[2, 2, 6, 4], &mut rng);
    let coeff = random(&[2, 2, 3, 2], &mut rng);
    let r = grad_check(
        |_, p| p[0].maxpool2d()?.weighted_sum(coeff.clone()),
        &[x],
        EPSILON,
        None,
        seed,
    )?;
    out.push(entry("maxpool2d", r));

    let x = random(&[1, 2, 4, 4], &mut rng);
    let coeff = random(&[1, 2, 4, 4], &mut rng);
    let r = grad_check(
        |_, p| p[0].relu().weighted_sum(coeff.clone()),
        &[x],
        EPSILON,
        None,
        seed,
    )?;
    out.push(entry("relu", r));

    let a = random(&[1, 2, 3, 3], &mut rng);
    let b = random(&[1, 2, 3, 3], &mut rng);
    let w = Tensor::scalar(rng.random_range(-1.0..1.0));
    let coeff = random(&[1, 2, 3, 3], &mut rng);
    let r = grad_check(
        |_, p| p[0].add(p[1])?.weighted_sum(coeff.clone()),
        &[a.clone(), b.clone()],
        EPSILON,
        None,
        seed,
    )?;
    out.push(entry("add", r));
    let r = grad_check(
        |_, p| p[0].scale_add(p[2], p[1])?.weighted_sum(coeff.clone()),
        &[a.clone(), b, w.clone()],
        EPSILON,
        None,
        seed,
    )?;
    out.push(entry("scale_add", r));
    let r = grad_check(
        |_, p| p[0].scale(p[1])?.mul_const(1.5).weighted_sum(coeff.clone()),
        &[a, w],
        EPSILON,
        None,
        seed,
    )?;
    out.push(entry("scale and mul_const", r));

    let logits = Tensor::from_fn(&[2, 2, 3, 4], |_| rng.random_range(-3.0..3.0));
    let target: Vec<u8> = (0..24).map(|_| rng.random_range(0..2u8)).collect();
    let r = grad_check(
        |_, p| p[0].softmax_cross_entropy(&target),
        &[logits],
        EPSILON,
        None,
        seed,
    )?;
    out.push(entry("softmax_cross_entropy", r));
    Ok(out)
}

/// Checks the loss gradient of a freshly built network, sampling
/// `per_param` coordinates of every parameter tensor. Fusion scalars are
/// drawn at random and biases positive so that activations sit away from
/// ReLU zeros and pooling ties.
pub fn network_check(
    topology: &FusionTopology,
    height: usize,
    width: usize,
    per_param: usize,
    seed: u64,
) -> std::result::Result<SuiteEntry, ModelError> {
    let net = SkipcrossNet::<f64>::build(topology, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, p) in net.params() {
        if p.numel() == 1 {
            p.set_value(Tensor::scalar(rng.random_range(-1.0..1.0)))?;
        } else if name.ends_with(".bias") {
            p.set_value(Tensor::from_fn(&p.shape(), |_| rng.random_range(0.1..0.5)))?;
        }
    }
    let rgb = Tensor::from_fn(&[1, topology.rgb_in_channels, height, width], |_| {
        rng.random_range(0.0..1.0)
    });
    let adi = Tensor::from_fn(&[1, topology.lidar_in_channels, height, width], |_| {
        rng.random_range(0.0..1.0)
    });
    let mask: Vec<u8> = (0..height * width)
        .map(|_| rng.random_range(0..2u8))
        .collect();
    let params: Vec<Param<f64>> = net.params().iter().map(|(_, p)| p.clone()).collect();
    let report = grad_check_params(
        |tape| {
            Ok::<_, ModelError>(
                net.forward(tape, &rgb, &adi)?
                    .softmax_cross_entropy(&mask)?,
            )
        },
        &params,
        NETWORK_EPSILON,
        Some(per_param),
        seed,
    )?;
    Ok(entry(
        &format!(
            "network {:?} {:?}",
            topology.stage_blocks, topology.stage_channels
        ),
        report,
    ))
}
