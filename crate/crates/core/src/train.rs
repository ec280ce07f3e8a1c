//! Generator training: minimize the batch-averaged perceptual loss over the
//! generator parameters with Adam.
//!
//! Each step draws the next `batch_size` content images from a seeded
//! shuffled round-robin over the dataset, samples fresh Gaussian noise for
//! every instance, and takes one optimizer step. Given the config and seed,
//! the whole parameter trajectory is bit-reproducible.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use log::info;

use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, Params};
use crate::loss::{
    total_loss, FeatureExtractor, StyleTarget, DEFAULT_CONTENT_WEIGHT, DEFAULT_STYLE_WEIGHT,
};
use crate::norm::Mode;
use crate::rng::{RngStream, RNG_ALGORITHM};
use crate::tensor::{sample_gaussian, Shape, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> AdamState {
        let zeros: Params = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor4::zeros(t.shape())))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

fn check_aligned(what: &str, params: &Params, other: &Params) -> Result<()> {
    if params.len() != other.len() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {} parameters vs {}",
            params.len(),
            other.len()
        )));
    }
    for ((pk, pv), (ok, ov)) in params.iter().zip(other) {
        if pk != ok || pv.shape() != ov.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: `{pk}` {} vs `{ok}` {}",
                pv.shape(),
                ov.shape()
            )));
        }
    }
    Ok(())
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut Params,
    grads: &Params,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    check_aligned("grads", params, grads)?;
    check_aligned("adam state", params, &state.m)?;
    check_aligned("adam state", params, &state.v)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .values_mut()
        .zip(grads.values())
        .zip(state.m.values_mut())
        .zip(state.v.values_mut())
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub content_weight: f64,
    pub style_weight: f64,
    pub generator: GeneratorConfig,
    /// Seed of the default random feature extractor.
    pub extractor_seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            steps: 200,
            batch_size: 4,
            adam: AdamConfig::default(),
            content_weight: DEFAULT_CONTENT_WEIGHT,
            style_weight: DEFAULT_STYLE_WEIGHT,
            generator: GeneratorConfig::default(),
            extractor_seed: 0,
            log_every: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.adam.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument("learning rate must be >= 0".into()));
        }
        Ok(())
    }

    /// `key value` pairs echoed into run reports.
    pub fn echo(&self) -> Vec<(String, String)> {
        let g = &self.generator;
        [
            ("seed", self.seed.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.adam.learning_rate.to_string()),
            (
                "adam_betas",
                format!("{},{}", self.adam.beta1, self.adam.beta2),
            ),
            ("adam_eps", self.adam.eps.to_string()),
            ("content_weight", self.content_weight.to_string()),
            ("style_weight", self.style_weight.to_string()),
            ("norm", g.norm.name().to_string()),
            ("padding", g.padding.name().to_string()),
            ("base_channels", g.base_channels.to_string()),
            ("residual_blocks", g.residual_blocks.to_string()),
            ("noise_channels", g.noise_channels.to_string()),
            ("eps", g.eps.to_string()),
            ("affine", g.affine.to_string()),
            ("extractor_seed", self.extractor_seed.to_string()),
            ("rng", RNG_ALGORITHM.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Content images (each `1 × 3 × W × H`, all the same size) and the style
/// image.
#[derive(Clone, Debug)]
pub struct TrainData {
    contents: Vec<Tensor4>,
    style: Tensor4,
}

impl TrainData {
    pub fn new(contents: Vec<Tensor4>, style: Tensor4) -> Result<TrainData> {
        let first = contents
            .first()
            .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))?;
        let shape = first.shape();
        if shape.t != 1 || shape.c != 3 {
            return Err(Error::InvalidShape(format!(
                "content images must be (1, 3, W, H), got {shape}"
            )));
        }
        if let Some(bad) = contents.iter().find(|c| c.shape() != shape) {
            return Err(Error::ShapeMismatch(format!(
                "content images must share one size: {shape} vs {}",
                bad.shape()
            )));
        }
        let ss = style.shape();
        if ss.t != 1 || ss.c != 3 {
            return Err(Error::InvalidShape(format!(
                "style image must be (1, 3, W, H), got {ss}"
            )));
        }
        Ok(TrainData { contents, style })
    }

    pub fn contents(&self) -> &[Tensor4] {
        &self.contents
    }

    pub fn style(&self) -> &Tensor4 {
        &self.style
    }

    fn content_shape(&self) -> Shape {
        self.contents[0].shape()
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub losses: Vec<f64>,
    pub wall_time: Duration,
    pub checksum: String,
    pub config: Vec<(String, String)>,
}

impl RunReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one step")
    }

    /// `step <i> loss <v>` lines, then a `# config` block. Wall time is left
    /// out so that reruns produce identical files.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(out, "step {i} loss {l}");
        }
        out.push_str("# config\n");
        for (k, v) in &self.config {
            let _ = writeln!(out, "# {k} {v}");
        }
        let _ = writeln!(out, "# checksum {}", self.checksum);
        out
    }

    /// Loss trace of a serialized report.
    pub fn parse_trace(text: &str) -> Result<Vec<f64>> {
        let mut losses = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parsed = match fields.as_slice() {
                ["step", i, "loss", v] => i.parse::<usize>().ok().zip(v.parse::<f64>().ok()),
                _ => None,
            };
            match parsed {
                Some((i, v)) if i == losses.len() => losses.push(v),
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "bad report line {}: `{line}`",
                        n + 1
                    )))
                }
            }
        }
        Ok(losses)
    }
}

/// Seeded shuffled round-robin over `n` items.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: RngStream,
}

impl BatchSampler {
    fn new(n: usize, rng: RngStream) -> BatchSampler {
        BatchSampler {
            order: (0..n).collect(),
            cursor: n,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.rng.shuffle(&mut self.order);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// The generator a run with `config` starts from. Conv weights depend only
/// on the seed and the conv shapes, so configs differing in `norm` share them.
pub fn initial_generator(config: &TrainConfig) -> Result<Generator> {
    Generator::build(&config.generator, &mut RngStream::new(config.seed).fork(0))
}

/// Trains with the default seeded feature extractor.
pub fn train(config: &TrainConfig, data: &TrainData) -> Result<(Generator, RunReport)> {
    let phi = FeatureExtractor::seeded(config.extractor_seed);
    train_with(config, data, &phi)
}

pub fn train_with(
    config: &TrainConfig,
    data: &TrainData,
    phi: &FeatureExtractor,
) -> Result<(Generator, RunReport)> {
    config.validate()?;
    let start = Instant::now();
    let root = RngStream::new(config.seed);
    let mut generator = initial_generator(config)?;
    let mut sampler = BatchSampler::new(data.contents.len(), root.fork(1));
    let mut noise_rng = root.fork(2);
    let target =
        StyleTarget::from_image(phi, &data.style, config.content_weight, config.style_weight)?;
    let mut adam = AdamState::new(generator.params());
    let shape = data.content_shape();
    let nc = config.generator.noise_channels;

    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx = sampler.next_batch(config.batch_size);
        let parts: Vec<Tensor4> = idx.iter().map(|&i| data.contents[i].clone()).collect();
        let batch = Tensor4::stack(&parts)?;
        let z = if nc > 0 {
            Some(sample_gaussian(
                &mut noise_rng,
                (config.batch_size, nc, shape.w, shape.h),
            )?)
        } else {
            None
        };
        let (out, cache) = generator.forward(&batch, z.as_ref(), Mode::Train)?;
        let loss = total_loss(&target, phi, &batch, &out)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: loss.total,
            });
        }
        let grads = generator.backward(&loss.grad, &cache)?;
        adam_step(
            generator.params_mut(),
            &grads.params,
            &mut adam,
            &config.adam,
        )?;
        losses.push(loss.total);
        if config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.steps) {
            info!(
                "step {step} loss {:.6} (content {:.6}, style {:.6})",
                loss.total, loss.content, loss.style
            );
        }
    }

    let report = RunReport {
        losses,
        wall_time: start.elapsed(),
        checksum: generator.checksum(),
        config: config.echo(),
    };
    Ok((generator, report))
}
