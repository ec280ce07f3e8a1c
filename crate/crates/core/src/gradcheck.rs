//! Central-difference verification of every backward pass.
//!
//! Each subject is reduced to a scalar `f(θ) = ⟨u, layer(θ)⟩` with a seeded
//! random projection `u` (or the perceptual loss, for the full generator),
//! and analytic gradients are compared against
//! `(f(θ + h) − f(θ − h)) / 2h` element by element.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, NormKind};
use crate::layers::{
    conv2d_backward, conv2d_forward, relu_backward, relu_forward, upsample_nearest_backward,
    upsample_nearest_forward, ConvGeometry, PaddingMode,
};
use crate::loss::{total_loss, FeatureExtractor, StyleTarget};
use crate::norm::{
    batch_norm_backward, batch_norm_train, instance_norm_backward, instance_norm_forward, Mode,
    DEFAULT_EPS,
};
use crate::rng::RngStream;
use crate::tensor::{exact_sum, sample_gaussian, Shape, Tensor4};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Parameters sampled per full-generator check.
pub const GENERATOR_SAMPLES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Subject {
    ConvZero,
    ConvReflect,
    Relu,
    Upsample,
    BatchNorm,
    InstanceNorm,
    /// Instance-norm generator composed with the perceptual loss.
    Generator,
    /// Batch-norm generator (train mode, `T = 2`) composed with the loss.
    GeneratorBatch,
}

impl Subject {
    pub const ALL: [Subject; 8] = [
        Subject::ConvZero,
        Subject::ConvReflect,
        Subject::Relu,
        Subject::Upsample,
        Subject::BatchNorm,
        Subject::InstanceNorm,
        Subject::Generator,
        Subject::GeneratorBatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subject::ConvZero => "conv-zero",
            Subject::ConvReflect => "conv-reflect",
            Subject::Relu => "relu",
            Subject::Upsample => "upsample",
            Subject::BatchNorm => "batch-norm",
            Subject::InstanceNorm => "instance-norm",
            Subject::Generator => "generator",
            Subject::GeneratorBatch => "generator-batch",
        }
    }

    pub fn is_layer(self) -> bool {
        !matches!(self, Subject::Generator | Subject::GeneratorBatch)
    }
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subject {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Subject::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown gradcheck subject `{s}`")))
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub subject: Subject,
    pub group: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < tol)
    }
}

/// Compares `analytic` with central differences of `f` around `theta` at
/// the given element indices.
fn check_group(
    f: &dyn Fn(&[f64]) -> Result<f64>,
    theta: &[f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut probe = theta.to_vec();
    for &i in indices {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe)?;
        probe[i] = orig - h;
        let minus = f(&probe)?;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Correctly rounded `⟨y, u⟩`. Outputs a probe does not touch are bitwise
/// equal on both sides and cancel exactly in the central difference.
fn project(y: &Tensor4, u: &Tensor4) -> Result<f64> {
    if y.shape() != u.shape() {
        return Err(Error::InvalidShape(format!(
            "projection {} vs {}",
            y.shape(),
            u.shape()
        )));
    }
    Ok(exact_sum(y.data().iter().zip(u.data()).map(|(a, b)| a * b)))
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn randn(rng: &mut RngStream, shape: Shape) -> Tensor4 {
    sample_gaussian(rng, shape).expect("valid shape")
}

fn with_data(shape: Shape, data: &[f64]) -> Tensor4 {
    Tensor4::from_vec(shape, data.to_vec()).expect("same shape")
}

struct Groups {
    subject: Subject,
    out: Vec<GroupResult>,
}

impl Groups {
    fn push(&mut self, group: &str, checked: usize, err: f64) {
        self.out.push(GroupResult {
            subject: self.subject,
            group: group.to_string(),
            checked,
            max_rel_error: err,
        });
    }
}

/// Runs the check for one subject. Failures are reported, not raised.
pub fn gradcheck(subject: Subject, seed: u64, h: f64) -> Result<GradcheckReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step h must be > 0, got {h}"
        )));
    }
    let mut rng = RngStream::new(seed);
    let mut groups = Groups {
        subject,
        out: Vec::new(),
    };
    match subject {
        Subject::ConvZero | Subject::ConvReflect => {
            let padding = if subject == Subject::ConvZero {
                PaddingMode::Zero
            } else {
                PaddingMode::Reflect
            };
            for (label, stride) in [("", 1), ("stride2.", 2)] {
                conv_groups(&mut groups, &mut rng, padding, stride, label, h)?;
            }
        }
        Subject::Relu => {
            let xs = Shape::new(2, 2, 4, 4)?;
            // keep inputs away from the kink
            let x = randn(&mut rng, xs).map(|v| v.signum() * (v.abs() + 1e-2));
            let u = randn(&mut rng, xs);
            let (_, cache) = relu_forward(&x);
            let analytic = relu_backward(&u, &cache)?;
            let f = |d: &[f64]| project(&relu_forward(&with_data(xs, d)).0, &u);
            let err = check_group(&f, x.data(), analytic.data(), &all(x.len()), h)?;
            groups.push("input", x.len(), err);
        }
        Subject::Upsample => {
            let xs = Shape::new(1, 2, 3, 3)?;
            let x = randn(&mut rng, xs);
            let u = randn(&mut rng, Shape::new(1, 2, 6, 6)?);
            let analytic = upsample_nearest_backward(&u, 2)?;
            let f = |d: &[f64]| project(&upsample_nearest_forward(&with_data(xs, d), 2)?, &u);
            let err = check_group(&f, x.data(), analytic.data(), &all(x.len()), h)?;
            groups.push("input", x.len(), err);
        }
        Subject::BatchNorm | Subject::InstanceNorm => {
            let xs = Shape::new(2, 2, 3, 3)?;
            let x = randn(&mut rng, xs);
            let u = randn(&mut rng, xs);
            let batch = subject == Subject::BatchNorm;
            let forward = |t: &Tensor4| {
                if batch {
                    batch_norm_train(t, DEFAULT_EPS)
                } else {
                    instance_norm_forward(t, DEFAULT_EPS)
                }
            };
            let (_, cache) = forward(&x)?;
            let analytic = if batch {
                batch_norm_backward(&u, &cache)?
            } else {
                instance_norm_backward(&u, &cache)?
            };
            let f = |d: &[f64]| project(&forward(&with_data(xs, d))?.0, &u);
            let err = check_group(&f, x.data(), analytic.data(), &all(x.len()), h)?;
            groups.push("input", x.len(), err);
        }
        Subject::Generator | Subject::GeneratorBatch => {
            let (norm, t) = if subject == Subject::Generator {
                (NormKind::Instance, 1)
            } else {
                (NormKind::Batch, 2)
            };
            generator_groups(&mut groups, &mut rng, norm, t, h)?;
        }
    }
    Ok(GradcheckReport { groups: groups.out })
}

fn conv_groups(
    groups: &mut Groups,
    rng: &mut RngStream,
    padding: PaddingMode,
    stride: usize,
    label: &str,
    h: f64,
) -> Result<()> {
    let xs = Shape::new(1, 2, 4 + stride, 4 + stride)?;
    let ws = Shape::new(3, 2, 3, 3)?;
    let geometry = ConvGeometry::strided(3, stride, padding);
    let x = randn(rng, xs);
    let w = randn(rng, ws);
    let b: Vec<f64> = (0..3).map(|_| rng.standard_normal()).collect();
    let (y, cache) = conv2d_forward(&x, &w, Some(&b), geometry)?;
    let u = randn(rng, y.shape());
    let grads = conv2d_backward(&u, &cache, &w)?;

    let fx = |d: &[f64]| {
        project(
            &conv2d_forward(&with_data(xs, d), &w, Some(&b), geometry)?.0,
            &u,
        )
    };
    let err = check_group(&fx, x.data(), grads.input.data(), &all(x.len()), h)?;
    groups.push(&format!("{label}input"), x.len(), err);

    let fw = |d: &[f64]| {
        project(
            &conv2d_forward(&x, &with_data(ws, d), Some(&b), geometry)?.0,
            &u,
        )
    };
    let err = check_group(&fw, w.data(), grads.weight.data(), &all(w.len()), h)?;
    groups.push(&format!("{label}weight"), w.len(), err);

    let fb = |d: &[f64]| project(&conv2d_forward(&x, &w, Some(d), geometry)?.0, &u);
    let err = check_group(&fb, &b, &grads.bias, &all(b.len()), h)?;
    groups.push(&format!("{label}bias"), b.len(), err);
    Ok(())
}

fn uniform_image(rng: &mut RngStream, shape: Shape) -> Tensor4 {
    let data = (0..shape.numel()).map(|_| rng.uniform()).collect();
    Tensor4::from_vec(shape, data).expect("valid shape")
}

fn generator_groups(
    groups: &mut Groups,
    rng: &mut RngStream,
    norm: NormKind,
    t: usize,
    h: f64,
) -> Result<()> {
    let config = GeneratorConfig::default().with_norm(norm);
    let generator = Generator::build(&config, &mut rng.fork(0))?;
    let phi = FeatureExtractor::seeded(rng.seed());
    let xs = Shape::new(t, 3, 8, 8)?;
    let content = uniform_image(rng, xs);
    let style = uniform_image(rng, xs.with_t(1));
    let z = randn(rng, xs.with_c(config.noise_channels));
    let target = StyleTarget::from_image(&phi, &style, 1.0, 10.0)?;

    let loss_of = |g: &Generator| -> Result<f64> {
        let (out, _) = g.forward_pure(&content, Some(&z), Mode::Train)?;
        Ok(total_loss(&target, &phi, &content, &out)?.total)
    };
    let (out, cache) = generator.forward_pure(&content, Some(&z), Mode::Train)?;
    let loss = total_loss(&target, &phi, &content, &out)?;
    let grads = generator.backward(&loss.grad, &cache)?;

    // sample i goes to tensor i mod n, at a uniform element, so every
    // parameter tensor is visited
    let names: Vec<&String> = generator.params().keys().collect();
    let sizes: Vec<usize> = generator.params().values().map(Tensor4::len).collect();
    let mut picks: Vec<(usize, usize)> = (0..GENERATOR_SAMPLES)
        .map(|i| {
            let p = i % names.len();
            (p, rng.below(sizes[p]))
        })
        .collect();
    picks.sort_unstable();

    for (p, chunk) in chunk_by_param(&picks) {
        let name = names[p];
        let theta = generator.params()[name].data().to_vec();
        let f = |d: &[f64]| {
            let mut g = generator.clone();
            g.params_mut()[name] = with_data(g.params()[name].shape(), d);
            loss_of(&g)
        };
        let err = check_group(&f, &theta, grads.params[name].data(), &chunk, h)?;
        groups.push(name, chunk.len(), err);
    }
    Ok(())
}

fn chunk_by_param(picks: &[(usize, usize)]) -> Vec<(usize, Vec<usize>)> {
    let mut out: Vec<(usize, Vec<usize>)> = Vec::new();
    for &(p, i) in picks {
        match out.last_mut() {
            Some((q, v)) if *q == p => v.push(i),
            _ => out.push((p, vec![i])),
        }
    }
    out
}
