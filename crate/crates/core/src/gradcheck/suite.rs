//! Standard gradient checks over every tape op and the network blocks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, random_tensor, GradcheckOptions, GradcheckReport};
use crate::blocks::{
    BasicBlock, ContextNet, DenseResidualBlock, NetworkConfig, NonLocalBlock, ParamSpec, Variant,
};
use crate::error::Result;
use crate::tape::{OpKind, ParamVars, Tape, Var};
use crate::tensor::{Shape, Tensor};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;

type Forward = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    forward: Forward,
}

fn shape(rng: &mut ChaCha8Rng, n: (usize, usize), c: (usize, usize), hw: (usize, usize)) -> Shape {
    Shape::new(
        rng.gen_range(n.0..=n.1),
        rng.gen_range(c.0..=c.1),
        rng.gen_range(hw.0..=hw.1),
        rng.gen_range(hw.0..=hw.1),
    )
}

fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> Case {
    let single = |rng: &mut ChaCha8Rng, s: Shape, f: Forward| Case {
        inputs: vec![random_tensor(s, rng)],
        forward: f,
    };
    match kind {
        OpKind::Conv2d => {
            let k = *[1usize, 3].choose(rng).unwrap();
            let stride = rng.gen_range(1..=2);
            let padding = if rng.gen() { k / 2 } else { 0 };
            let x = shape(rng, (1, 2), (1, 3), (3, 6));
            let cout = rng.gen_range(1..=3);
            Case {
                inputs: vec![
                    random_tensor(x, rng),
                    random_tensor(Shape::new(cout, x.c(), k, k), rng),
                    random_tensor(Shape::new(1, cout, 1, 1), rng),
                ],
                forward: Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, padding)),
            }
        }
        OpKind::MaxPool2d => {
            let s = shape(rng, (1, 2), (1, 3), (1, 3));
            let s = Shape::new(s.n(), s.c(), 2 * s.h(), 2 * s.w());
            single(rng, s, Box::new(|t, v| t.maxpool2d(v[0])))
        }
        OpKind::UpsampleNearest2x => {
            let s = shape(rng, (1, 2), (1, 3), (1, 4));
            single(rng, s, Box::new(|t, v| t.upsample_nearest2x(v[0])))
        }
        OpKind::UpsampleBilinear2x => {
            let s = shape(rng, (1, 2), (1, 3), (1, 4));
            single(rng, s, Box::new(|t, v| t.upsample_bilinear2x(v[0])))
        }
        OpKind::ConcatChannels => {
            let base = shape(rng, (1, 2), (1, 3), (1, 4));
            let parts = rng.gen_range(2..=3);
            let inputs = (0..parts)
                .map(|_| {
                    let c = rng.gen_range(1..=3);
                    random_tensor(Shape::new(base.n(), c, base.h(), base.w()), rng)
                })
                .collect();
            Case {
                inputs,
                forward: Box::new(|t, v| t.concat_channels(v)),
            }
        }
        OpKind::Prelu => {
            let x = shape(rng, (1, 2), (1, 3), (1, 4));
            Case {
                inputs: vec![random_tensor(x, rng), random_tensor(Shape::new(1, x.c(), 1, 1), rng)],
                forward: Box::new(|t, v| t.prelu(v[0], v[1])),
            }
        }
        OpKind::SoftmaxRows => {
            let s = shape(rng, (1, 2), (1, 2), (1, 5));
            single(rng, s, Box::new(|t, v| t.softmax_rows(v[0])))
        }
        OpKind::Matmul => {
            let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
            let (r, k, s) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
            Case {
                inputs: vec![
                    random_tensor(Shape::new(n, c, r, k), rng),
                    random_tensor(Shape::new(n, c, k, s), rng),
                ],
                forward: Box::new(|t, v| t.matmul(v[0], v[1])),
            }
        }
        OpKind::Add | OpKind::Mul => {
            let s = shape(rng, (1, 2), (1, 3), (1, 4));
            Case {
                inputs: vec![random_tensor(s, rng), random_tensor(s, rng)],
                forward: if kind == OpKind::Add {
                    Box::new(|t, v| t.add(v[0], v[1]))
                } else {
                    Box::new(|t, v| t.mul(v[0], v[1]))
                },
            }
        }
        OpKind::Scale => {
            let s = shape(rng, (1, 2), (1, 3), (1, 4));
            let factor = rng.gen_range(-2.0..2.0);
            single(rng, s, Box::new(move |t, v| t.scale(v[0], factor)))
        }
        OpKind::Reshape => {
            let s = shape(rng, (1, 2), (1, 3), (1, 4));
            let to = Shape::new(1, 1, s.n() * s.c(), s.h() * s.w());
            single(rng, s, Box::new(move |t, v| t.reshape(v[0], to)))
        }
        OpKind::Permute => {
            let s = shape(rng, (1, 3), (1, 3), (1, 3));
            let mut perm = [0, 1, 2, 3];
            perm.shuffle(rng);
            single(rng, s, Box::new(move |t, v| t.permute(v[0], perm)))
        }
        OpKind::Sum => {
            let s = shape(rng, (1, 2), (1, 3), (1, 4));
            single(rng, s, Box::new(|t, v| t.sum(v[0])))
        }
        OpKind::L1Loss => {
            let s = shape(rng, (1, 2), (1, 3), (1, 4));
            let target = random_tensor(s, rng);
            single(rng, s, Box::new(move |t, v| t.l1_loss(v[0], &target)))
        }
    }
}

/// Checks every op over `trials` random instances each.
pub fn op_suite(trials: usize, seed: u64, fault: Option<OpKind>) -> Result<Vec<GradcheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(OpKind::ALL.len());
    for kind in OpKind::ALL {
        let mut worst: Option<GradcheckReport> = None;
        for trial in 0..trials {
            let case = op_case(kind, &mut rng);
            let opts = GradcheckOptions {
                tolerance: OP_TOLERANCE,
                seed: seed.wrapping_add(trial as u64),
                fault,
                ..Default::default()
            };
            let report = gradcheck(kind.name(), &case.forward, &case.inputs, &opts)?;
            if worst.as_ref().map_or(true, |w| report.max_rel_error() > w.max_rel_error()) {
                worst = Some(report);
            }
        }
        reports.extend(worst);
    }
    Ok(reports)
}

/// Random parameters for `specs`: the initial value (if any) plus uniform
/// noise, so that zero-initialized tensors still carry signal.
fn perturbed_params(specs: &[ParamSpec], init: Option<&crate::ParamStore<f32>>, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    specs
        .iter()
        .map(|spec| match init {
            Some(p) => {
                let base = p.get(&spec.name).expect("initialized parameter").cast::<f64>();
                let mut t = base;
                for v in t.data_mut() {
                    *v += rng.gen_range(-0.1..0.1);
                }
                t
            }
            None => random_tensor(spec.shape, rng),
        })
        .collect()
}

fn check_with_params<B>(
    name: &str,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor<f64>>,
    input: Tensor<f64>,
    opts: &GradcheckOptions,
    block: B,
) -> Result<GradcheckReport>
where
    B: Fn(&mut Tape<f64>, &ParamVars, Var) -> Result<Var>,
{
    let names: Vec<String> = specs.into_iter().map(|s| s.name).collect();
    let mut inputs = vec![input];
    inputs.extend(params);
    gradcheck(
        name,
        |t, v| {
            let pv: ParamVars = names.iter().cloned().zip(v[1..].iter().copied()).collect();
            block(t, &pv, v[0])
        },
        &inputs,
        opts,
    )
}

/// Basic block, dense residual block, non-local block and a tiny full
/// network (two stages, width 4, 8x8 input) with respect to their input and
/// every parameter.
pub fn block_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<GradcheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block_opts = GradcheckOptions {
        tolerance: OP_TOLERANCE,
        seed,
        fault,
        ..Default::default()
    };
    let mut reports = Vec::new();

    let basic = BasicBlock::new("basic", 2, 3);
    let mut specs = Vec::new();
    basic.specs(&mut specs);
    let params = perturbed_params(&specs, None, &mut rng);
    let x = random_tensor(Shape::new(1, 2, 5, 5), &mut rng);
    reports.push(check_with_params("basic_block", specs, params, x, &block_opts, |t, p, x| {
        basic.forward(t, p, x)
    })?);

    let drb = DenseResidualBlock::new("drb", 2);
    let mut specs = Vec::new();
    drb.specs(&mut specs);
    let params = perturbed_params(&specs, None, &mut rng);
    let x = random_tensor(Shape::new(1, 2, 4, 4), &mut rng);
    reports.push(check_with_params("dense_residual_block", specs, params, x, &block_opts, |t, p, x| {
        drb.forward(t, p, x)
    })?);

    let nonlocal = NonLocalBlock::new("gc", 3);
    let mut specs = Vec::new();
    nonlocal.specs(&mut specs);
    let params = perturbed_params(&specs, None, &mut rng);
    let x = random_tensor(Shape::new(1, 3, 3, 4), &mut rng);
    reports.push(check_with_params("nonlocal_block", specs, params, x, &block_opts, |t, p, x| {
        nonlocal.forward(t, p, x)
    })?);

    let config = NetworkConfig {
        num_stages: 2,
        base_channels: 4,
        ..NetworkConfig::default()
    }
    .with_variant(Variant::Full);
    let net = ContextNet::new(config)?;
    let specs = net.param_specs();
    let init = net.init_parameters(seed);
    let params = perturbed_params(&specs, Some(&init), &mut rng);
    let x = Tensor::from_fn(Shape::new(1, 3, 8, 8), |_| rng.gen_range(0.0..1.0));
    let net_opts = GradcheckOptions {
        tolerance: NETWORK_TOLERANCE,
        max_coords: Some(4),
        seed,
        fault,
        ..Default::default()
    };
    reports.push(check_with_params("network", specs, params, x, &net_opts, |t, p, x| {
        net.forward(t, p, x)
    })?);

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_a_few_trials() {
        let reports = op_suite(3, 5, None).unwrap();
        assert_eq!(reports.len(), OpKind::ALL.len());
        for r in &reports {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn fault_is_detected() {
        let reports = op_suite(2, 5, Some(OpKind::Matmul)).unwrap();
        let matmul = reports.iter().find(|r| r.name == "matmul").unwrap();
        assert!(!matmul.passed(), "{matmul}");
        let conv = reports.iter().find(|r| r.name == "conv2d").unwrap();
        assert!(conv.passed(), "{conv}");
    }
}
