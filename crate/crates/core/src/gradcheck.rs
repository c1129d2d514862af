//! Central finite-difference verification of analytic gradients.
//!
//! The operation under test runs in `f64`. Its output is scalarized as
//! `sum(out * R)` with a fixed random projection `R`, and the analytic
//! gradient of that scalar is compared against `(L(x+h) - L(x-h)) / 2h`
//! coordinate by coordinate.
//!
//! A coordinate whose `x - h` or `x + h` evaluation takes a different branch
//! of a maxpool or PReLU than `x` itself straddles a kink, where the central
//! difference is not a derivative estimate. Such coordinates are skipped and
//! counted; with `max_coords` another coordinate is drawn in their place.

pub mod suite;

use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so that structurally zero
/// gradients compare on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Corrupts the backward rule of one op kind on the analytic pass.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: None,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub index: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a kink.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub name: String,
    pub tolerance: f64,
    pub inputs: Vec<InputReport>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    /// Every input must have at least one checked coordinate.
    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance && self.inputs.iter().all(|r| r.checked > 0)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let checked: usize = self.inputs.iter().map(|r| r.checked).sum();
        let skipped: usize = self.inputs.iter().map(|r| r.skipped).sum();
        write!(
            f,
            "{:<6} {:<24} max rel err {:.3e} (tol {:.0e}, {} coords",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error(),
            self.tolerance,
            checked
        )?;
        if skipped > 0 {
            write!(f, ", {skipped} at kinks skipped")?;
        }
        write!(f, ")")
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks the gradient of `f` with respect to every tensor in `inputs`.
pub fn gradcheck<F>(name: &str, f: F, inputs: &[Tensor<f64>], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut tape = Tape::new();
    if let Some(kind) = opts.fault {
        tape.inject_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let projection = Tensor::from_fn(tape.shape(out), |_| rng.gen_range(-1.0..1.0));
    let r = tape.constant(projection.clone());
    let weighted = tape.mul(out, r)?;
    let loss = tape.sum(weighted)?;
    tape.backward(loss)?;

    let base_branch = tape.branch_signature();
    let scalarized = |perturbed: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vars)?;
        let value = t
            .value(out)
            .data()
            .iter()
            .zip(projection.data())
            .map(|(a, b)| a * b)
            .sum();
        Ok((value, t.branch_signature()))
    };

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let numel = inputs[i].numel();
        let analytic = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let (order, wanted): (Vec<usize>, usize) = match opts.max_coords {
            Some(k) if k < numel => (index::sample(&mut rng, numel, numel).into_vec(), k),
            _ => ((0..numel).collect(), numel),
        };
        let (mut checked, mut skipped) = (0, 0);
        let mut max_rel_error = 0.0f64;
        for &c in &order {
            if checked == wanted {
                break;
            }
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + opts.step;
            let (plus, plus_branch) = scalarized(&work)?;
            work[i].data_mut()[c] = orig - opts.step;
            let (minus, minus_branch) = scalarized(&work)?;
            work[i].data_mut()[c] = orig;
            if plus_branch != base_branch || minus_branch != base_branch {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            max_rel_error = max_rel_error.max(relative_error(analytic.data()[c], numeric));
            checked += 1;
        }
        reports.push(InputReport {
            index: i,
            max_rel_error,
            checked,
            skipped,
        });
    }

    Ok(GradcheckReport {
        name: name.to_owned(),
        tolerance: opts.tolerance,
        inputs: reports,
    })
}

/// Uniform samples in `[-1, 1]`.
pub fn random_tensor(shape: crate::Shape, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..=1.0))
}
