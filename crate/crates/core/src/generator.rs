//! Feed-forward stylization generator `g(x, z)`.
//!
//! A fully convolutional encoder / residual / decoder network:
//!
//! ```text
//! concat(x, z)
//! conv 3×3 s1 → norm → relu                       (enc0, base channels)
//! conv 3×3 s2 → norm → relu                       (enc1, 2·base)
//! conv 3×3 s2 → norm → relu                       (enc2, 4·base)
//! residual × n: x + norm(conv(relu(norm(conv(x)))))
//! upsample ×2 → conv 3×3 → norm → relu            (dec1, 2·base)
//! upsample ×2 → conv 3×3 → norm → relu            (dec2, base)
//! conv 3×3 → sigmoid                              (out, 3 channels)
//! ```
//!
//! The normalization kind is a single switch, so batch- and instance-norm
//! generators built from the same seed share every convolution weight.
//! Convolutions that feed a normalization layer carry no bias unless
//! normalization is disabled.

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::{
    conv2d_backward, conv2d_forward, relu_backward, relu_forward, sigmoid_backward,
    sigmoid_forward, upsample_nearest_backward, upsample_nearest_forward, ConvCache, ConvGeometry,
    PaddingMode, ReluCache, SigmoidCache,
};
use crate::norm::{
    affine_backward, affine_forward, batch_norm_backward, batch_norm_eval, batch_norm_train,
    instance_norm_backward, instance_norm_forward, Mode, NormCache, NormStats, RunningStats,
    DEFAULT_EPS,
};
use crate::rng::RngStream;
use crate::tensor::{sample_gaussian, Shape, Tensor4};

/// Named parameter tensors in construction order.
pub type Params = IndexMap<String, Tensor4>;

/// Input spatial dimensions must be multiples of this.
pub const SPATIAL_MULTIPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormKind {
    None,
    Batch,
    Instance,
}

impl NormKind {
    pub fn name(self) -> &'static str {
        match self {
            NormKind::None => "none",
            NormKind::Batch => "batch",
            NormKind::Instance => "instance",
        }
    }
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormKind::None),
            "batch" => Ok(NormKind::Batch),
            "instance" => Ok(NormKind::Instance),
            other => Err(Error::InvalidArgument(format!(
                "unknown norm mode `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub norm: NormKind,
    pub padding: PaddingMode,
    pub base_channels: usize,
    pub residual_blocks: usize,
    pub noise_channels: usize,
    pub kernel: usize,
    pub eps: f64,
    pub affine: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            norm: NormKind::Instance,
            padding: PaddingMode::Reflect,
            base_channels: 8,
            residual_blocks: 3,
            noise_channels: 1,
            kernel: 3,
            eps: DEFAULT_EPS,
            affine: false,
        }
    }
}

impl GeneratorConfig {
    pub fn with_norm(&self, norm: NormKind) -> GeneratorConfig {
        GeneratorConfig {
            norm,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::InvalidArgument("base_channels must be >= 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument("kernel size must be odd".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("eps must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Stage {
    Conv {
        name: String,
        geometry: ConvGeometry,
    },
    Norm {
        name: String,
    },
    Relu,
    Upsample(usize),
    Residual(Vec<Stage>),
    Sigmoid,
}

#[derive(Clone, Debug)]
enum StageCache {
    Conv(ConvCache),
    Norm(NormCache),
    Relu(ReluCache),
    Upsample,
    Residual(Vec<StageCache>),
    Sigmoid(SigmoidCache),
}

/// Everything backward needs from one forward pass.
#[derive(Clone, Debug, Default)]
pub struct GeneratorCache {
    stages: Vec<StageCache>,
    input_shape: Option<Shape>,
    noise_channels: usize,
    batch_stats: Vec<(String, NormStats)>,
}

impl GeneratorCache {
    /// Batch statistics of every batch-norm layer, in layer order (train mode
    /// only).
    pub fn batch_stats(&self) -> &[(String, NormStats)] {
        &self.batch_stats
    }
}

pub struct GeneratorGrads {
    /// One entry per parameter, same names and order as [`Generator::params`].
    pub params: Params,
    /// Gradient with respect to the content image.
    pub input: Tensor4,
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    stages: Vec<Stage>,
    params: Params,
    running: IndexMap<String, RunningStats>,
}

struct Builder<'a> {
    config: &'a GeneratorConfig,
    rng: &'a mut RngStream,
    params: Params,
    running: IndexMap<String, RunningStats>,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, ci: usize, co: usize, stride: usize, normalized: bool) -> Stage {
        let k = self.config.kernel;
        let std = (2.0 / (ci * k * k) as f64).sqrt();
        let weight = sample_gaussian(self.rng, (co, ci, k, k))
            .expect("positive dims")
            .scale(std);
        self.params.insert(format!("{name}.weight"), weight);
        if !normalized || self.config.norm == NormKind::None {
            let bias = Tensor4::zeros(Shape::new(1, co, 1, 1).expect("positive dims"));
            self.params.insert(format!("{name}.bias"), bias);
        }
        Stage::Conv {
            name: name.to_string(),
            geometry: ConvGeometry::strided(k, stride, self.config.padding),
        }
    }

    fn norm(&mut self, name: &str, channels: usize, stages: &mut Vec<Stage>) {
        if self.config.norm == NormKind::None {
            return;
        }
        if self.config.affine {
            let s = Shape::new(1, channels, 1, 1).expect("positive dims");
            self.params.insert(
                format!("{name}.gamma"),
                Tensor4::full(s, 1.0).expect("shape"),
            );
            self.params
                .insert(format!("{name}.beta"), Tensor4::zeros(s));
        }
        if self.config.norm == NormKind::Batch {
            self.running
                .insert(name.to_string(), RunningStats::new(channels));
        }
        stages.push(Stage::Norm {
            name: name.to_string(),
        });
    }

    fn conv_norm_relu(
        &mut self,
        prefix: &str,
        ci: usize,
        co: usize,
        stride: usize,
        out: &mut Vec<Stage>,
    ) {
        out.push(self.conv(&format!("{prefix}.conv"), ci, co, stride, true));
        self.norm(&format!("{prefix}.norm"), co, out);
        out.push(Stage::Relu);
    }
}

impl Generator {
    /// A freshly initialized generator. Convolution weights are drawn in a
    /// fixed layer order from `rng` with std `sqrt(2 / (C_in·K²))`; biases
    /// start at zero.
    pub fn build(config: &GeneratorConfig, rng: &mut RngStream) -> Result<Generator> {
        config.validate()?;
        let b = config.base_channels;
        let mut builder = Builder {
            config,
            rng,
            params: Params::new(),
            running: IndexMap::new(),
        };
        let mut stages = Vec::new();
        builder.conv_norm_relu("enc0", 3 + config.noise_channels, b, 1, &mut stages);
        builder.conv_norm_relu("enc1", b, 2 * b, 2, &mut stages);
        builder.conv_norm_relu("enc2", 2 * b, 4 * b, 2, &mut stages);
        for r in 0..config.residual_blocks {
            let mut body = Vec::new();
            body.push(builder.conv(&format!("res{r}.conv1"), 4 * b, 4 * b, 1, true));
            builder.norm(&format!("res{r}.norm1"), 4 * b, &mut body);
            body.push(Stage::Relu);
            body.push(builder.conv(&format!("res{r}.conv2"), 4 * b, 4 * b, 1, true));
            builder.norm(&format!("res{r}.norm2"), 4 * b, &mut body);
            stages.push(Stage::Residual(body));
        }
        stages.push(Stage::Upsample(2));
        builder.conv_norm_relu("dec1", 4 * b, 2 * b, 1, &mut stages);
        stages.push(Stage::Upsample(2));
        builder.conv_norm_relu("dec2", 2 * b, b, 1, &mut stages);
        stages.push(builder.conv("out.conv", b, 3, 1, false));
        stages.push(Stage::Sigmoid);

        let Builder {
            params, running, ..
        } = builder;
        Ok(Generator {
            config: config.clone(),
            stages,
            params,
            running,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn running_stats(&self) -> &IndexMap<String, RunningStats> {
        &self.running
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor4::len).sum()
    }

    /// Top-level layers, counting the input concatenation as one layer and
    /// each residual block as one layer.
    pub fn layer_count(&self) -> usize {
        1 + self.stages.len()
    }

    /// Names of the convolution weight tensors, in layer order.
    pub fn conv_weight_names(&self) -> Vec<&str> {
        self.params
            .keys()
            .filter(|k| k.ends_with(".weight"))
            .map(String::as_str)
            .collect()
    }

    fn check_inputs(&self, x: &Tensor4, z: Option<&Tensor4>) -> Result<()> {
        let s = x.shape();
        if s.c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "content must have 3 channels, got {}",
                s.c
            )));
        }
        if s.w % SPATIAL_MULTIPLE != 0 || s.h % SPATIAL_MULTIPLE != 0 {
            return Err(Error::InvalidShape(format!(
                "spatial dims must be multiples of {SPATIAL_MULTIPLE}, got {}x{}",
                s.w, s.h
            )));
        }
        let nc = self.config.noise_channels;
        match z {
            None if nc > 0 => Err(Error::ShapeMismatch(format!(
                "generator expects {nc} noise channels"
            ))),
            Some(z) if nc == 0 => Err(Error::ShapeMismatch(format!(
                "generator takes no noise, got {}",
                z.shape()
            ))),
            Some(z) if z.shape() != s.with_c(nc) => Err(Error::ShapeMismatch(format!(
                "noise must be {}, got {}",
                s.with_c(nc),
                z.shape()
            ))),
            _ => Ok(()),
        }
    }

    /// Forward pass. In train mode batch-norm layers normalize with batch
    /// statistics and fold them into their running averages; in eval mode
    /// they use the running averages. Instance norm is identical in both.
    pub fn forward(
        &mut self,
        x: &Tensor4,
        z: Option<&Tensor4>,
        mode: Mode,
    ) -> Result<(Tensor4, GeneratorCache)> {
        let (y, cache) = self.forward_pure(x, z, mode)?;
        for (name, stats) in &cache.batch_stats {
            self.running
                .get_mut(name)
                .ok_or_else(|| Error::MissingForward(format!("no running stats for `{name}`")))?
                .update(stats)?;
        }
        Ok((y, cache))
    }

    /// Evaluation-mode forward that leaves the generator untouched.
    pub fn infer(&self, x: &Tensor4, z: Option<&Tensor4>) -> Result<Tensor4> {
        Ok(self.forward_pure(x, z, Mode::Eval)?.0)
    }

    /// Forward pass that never updates running statistics. Batch statistics
    /// are still reported in the cache.
    pub fn forward_pure(
        &self,
        x: &Tensor4,
        z: Option<&Tensor4>,
        mode: Mode,
    ) -> Result<(Tensor4, GeneratorCache)> {
        self.check_inputs(x, z)?;
        let input = match z {
            Some(z) => Tensor4::concat_channels(&[x, z])?,
            None => x.clone(),
        };
        let mut cache = GeneratorCache {
            stages: Vec::with_capacity(self.stages.len()),
            input_shape: Some(x.shape()),
            noise_channels: self.config.noise_channels,
            batch_stats: Vec::new(),
        };
        let mut caches = Vec::with_capacity(self.stages.len());
        let y = self.run(
            &self.stages,
            input,
            mode,
            &mut caches,
            &mut cache.batch_stats,
        )?;
        cache.stages = caches;
        Ok((y, cache))
    }

    fn run(
        &self,
        stages: &[Stage],
        mut x: Tensor4,
        mode: Mode,
        caches: &mut Vec<StageCache>,
        batch_stats: &mut Vec<(String, NormStats)>,
    ) -> Result<Tensor4> {
        for stage in stages {
            let (y, c) = match stage {
                Stage::Conv { name, geometry } => {
                    let w = &self.params[&format!("{name}.weight")];
                    let b = self.params.get(&format!("{name}.bias")).map(Tensor4::data);
                    let (y, c) = conv2d_forward(&x, w, b, *geometry)?;
                    (y, StageCache::Conv(c))
                }
                Stage::Norm { name } => {
                    let eps = self.config.eps;
                    let (y, c) = match (self.config.norm, mode) {
                        (NormKind::Instance, _) => instance_norm_forward(&x, eps)?,
                        (NormKind::Batch, Mode::Train) => {
                            let (y, c) = batch_norm_train(&x, eps)?;
                            batch_stats.push((name.clone(), c.stats().clone()));
                            (y, c)
                        }
                        (NormKind::Batch, Mode::Eval) => {
                            let rs = &self.running[name];
                            batch_norm_eval(&x, eps, rs).map_err(|e| match e {
                                Error::NotCalibrated(_) => Error::NotCalibrated(name.clone()),
                                other => other,
                            })?
                        }
                        (NormKind::None, _) => unreachable!("no norm stages without normalization"),
                    };
                    let y = if self.config.affine {
                        let gamma = self.params[&format!("{name}.gamma")].data();
                        let beta = self.params[&format!("{name}.beta")].data();
                        affine_forward(&y, gamma, beta)?
                    } else {
                        y
                    };
                    (y, StageCache::Norm(c))
                }
                Stage::Relu => {
                    let (y, c) = relu_forward(&x);
                    (y, StageCache::Relu(c))
                }
                Stage::Upsample(f) => (upsample_nearest_forward(&x, *f)?, StageCache::Upsample),
                Stage::Residual(body) => {
                    let mut inner = Vec::with_capacity(body.len());
                    let mut y = self.run(body, x.clone(), mode, &mut inner, batch_stats)?;
                    y.add_assign(&x)?;
                    (y, StageCache::Residual(inner))
                }
                Stage::Sigmoid => {
                    let (y, c) = sigmoid_forward(&x);
                    (y, StageCache::Sigmoid(c))
                }
            };
            caches.push(c);
            x = y;
        }
        Ok(x)
    }

    /// Exact gradients of every parameter and of the content image.
    pub fn backward(&self, grad_out: &Tensor4, cache: &GeneratorCache) -> Result<GeneratorGrads> {
        let input_shape = cache
            .input_shape
            .ok_or_else(|| Error::MissingForward("generator cache is empty".into()))?;
        if cache.noise_channels != self.config.noise_channels {
            return Err(Error::MissingForward(
                "cache comes from a different generator".into(),
            ));
        }
        grad_out.expect_shape(input_shape, "generator backward")?;
        let mut grads: Params = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor4::zeros(v.shape())))
            .collect();
        let g = self.unrun(&self.stages, &cache.stages, grad_out.clone(), &mut grads)?;
        let input = if self.config.noise_channels > 0 {
            g.split_channels(&[3, self.config.noise_channels])?
                .swap_remove(0)
        } else {
            g
        };
        Ok(GeneratorGrads {
            params: grads,
            input,
        })
    }

    fn unrun(
        &self,
        stages: &[Stage],
        caches: &[StageCache],
        mut g: Tensor4,
        grads: &mut Params,
    ) -> Result<Tensor4> {
        if stages.len() != caches.len() {
            return Err(Error::MissingForward(format!(
                "{} layers but {} cached forwards",
                stages.len(),
                caches.len()
            )));
        }
        let mismatch = || Error::MissingForward("cache does not match the layer graph".into());
        for (stage, cache) in stages.iter().zip(caches).rev() {
            g = match (stage, cache) {
                (Stage::Conv { name, .. }, StageCache::Conv(c)) => {
                    let wname = format!("{name}.weight");
                    let cg = conv2d_backward(&g, c, &self.params[&wname])?;
                    grads[&wname].add_assign(&cg.weight)?;
                    if let Some(gb) = grads.get_mut(&format!("{name}.bias")) {
                        for (a, b) in gb.data_mut().iter_mut().zip(&cg.bias) {
                            *a += b;
                        }
                    }
                    cg.input
                }
                (Stage::Norm { name }, StageCache::Norm(c)) => {
                    let g = if self.config.affine {
                        let gamma = self.params[&format!("{name}.gamma")].data();
                        let ag = affine_backward(&g, c.normalized(), gamma)?;
                        add_vec(&mut grads[&format!("{name}.gamma")], &ag.gamma);
                        add_vec(&mut grads[&format!("{name}.beta")], &ag.beta);
                        ag.input
                    } else {
                        g
                    };
                    match self.config.norm {
                        NormKind::Instance => instance_norm_backward(&g, c)?,
                        NormKind::Batch => batch_norm_backward(&g, c)?,
                        NormKind::None => return Err(mismatch()),
                    }
                }
                (Stage::Relu, StageCache::Relu(c)) => relu_backward(&g, c)?,
                (Stage::Upsample(f), StageCache::Upsample) => upsample_nearest_backward(&g, *f)?,
                (Stage::Residual(body), StageCache::Residual(inner)) => {
                    let mut gb = self.unrun(body, inner, g.clone(), grads)?;
                    gb.add_assign(&g)?;
                    gb
                }
                (Stage::Sigmoid, StageCache::Sigmoid(c)) => sigmoid_backward(&g, c)?,
                _ => return Err(mismatch()),
            };
        }
        Ok(g)
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in &self.params {
            hasher.update(name.as_bytes());
            for d in t.shape().dims() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Parameters, running statistics and a `meta.config` record as named
    /// tensors, suitable for a weight file.
    pub fn to_named(&self) -> Vec<(String, Tensor4)> {
        let c = &self.config;
        let meta = vec![
            META_VERSION,
            match c.norm {
                NormKind::None => 0.0,
                NormKind::Batch => 1.0,
                NormKind::Instance => 2.0,
            },
            match c.padding {
                PaddingMode::Zero => 0.0,
                PaddingMode::Reflect => 1.0,
            },
            c.base_channels as f64,
            c.residual_blocks as f64,
            c.noise_channels as f64,
            c.kernel as f64,
            c.eps,
            if c.affine { 1.0 } else { 0.0 },
        ];
        let mut out = vec![(
            META_NAME.to_string(),
            Tensor4::from_vec((1, 1, 1, meta.len()), meta).expect("meta shape"),
        )];
        out.extend(self.params.iter().map(|(k, v)| (k.clone(), v.clone())));
        for (name, rs) in &self.running {
            let n = rs.channels();
            out.push((
                format!("{name}.running_mean"),
                Tensor4::from_vec((1, n, 1, 1), rs.mean.clone()).expect("stats shape"),
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor4::from_vec((1, n, 1, 1), rs.var.clone()).expect("stats shape"),
            ));
            out.push((
                format!("{name}.running_count"),
                Tensor4::from_vec((1, 1, 1, 1), vec![rs.count as f64]).expect("count shape"),
            ));
        }
        out
    }

    /// Inverse of [`Generator::to_named`].
    pub fn from_named(entries: &[(String, Tensor4)]) -> Result<Generator> {
        let lookup: IndexMap<&str, &Tensor4> =
            entries.iter().map(|(k, v)| (k.as_str(), v)).collect();
        let bad = |m: String| Error::InvalidArgument(m);
        let meta = lookup
            .get(META_NAME)
            .ok_or_else(|| bad(format!("missing `{META_NAME}` entry")))?
            .data();
        if meta.len() != 9 || meta[0] != META_VERSION {
            return Err(bad("unsupported generator metadata".into()));
        }
        let count = |v: f64, what: &str| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
                Ok(v as usize)
            } else {
                Err(bad(format!("invalid {what} {v}")))
            }
        };
        let config = GeneratorConfig {
            norm: match meta[1] {
                0.0 => NormKind::None,
                1.0 => NormKind::Batch,
                2.0 => NormKind::Instance,
                v => return Err(bad(format!("invalid norm code {v}"))),
            },
            padding: match meta[2] {
                0.0 => PaddingMode::Zero,
                1.0 => PaddingMode::Reflect,
                v => return Err(bad(format!("invalid padding code {v}"))),
            },
            base_channels: count(meta[3], "base_channels")?,
            residual_blocks: count(meta[4], "residual_blocks")?,
            noise_channels: count(meta[5], "noise_channels")?,
            kernel: count(meta[6], "kernel")?,
            eps: meta[7],
            affine: meta[8] != 0.0,
        };
        let mut g = Generator::build(&config, &mut RngStream::new(0))?;
        for (name, slot) in g.params.iter_mut() {
            let t = lookup
                .get(name.as_str())
                .ok_or_else(|| bad(format!("missing parameter `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "`{name}`: expected {}, file has {}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = (*t).clone();
        }
        for (name, rs) in g.running.iter_mut() {
            let get = |suffix: &str| {
                lookup
                    .get(format!("{name}.{suffix}").as_str())
                    .copied()
                    .ok_or_else(|| bad(format!("missing `{name}.{suffix}`")))
            };
            let mean = get("running_mean")?;
            let var = get("running_var")?;
            if mean.len() != rs.channels() || var.len() != rs.channels() {
                return Err(Error::ShapeMismatch(format!("running stats for `{name}`")));
            }
            rs.mean = mean.data().to_vec();
            rs.var = var.data().to_vec();
            rs.count = count(get("running_count")?.data()[0], "running count")? as u64;
        }
        Ok(g)
    }
}

const META_NAME: &str = "meta.config";
const META_VERSION: f64 = 1.0;

fn add_vec(t: &mut Tensor4, v: &[f64]) {
    for (a, b) in t.data_mut().iter_mut().zip(v) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, t: usize, size: usize) -> Tensor4 {
        let mut rng = RngStream::new(seed);
        let s = Shape::new(t, 3, size, size).unwrap();
        Tensor4::from_vec(s, (0..s.numel()).map(|_| rng.uniform()).collect()).unwrap()
    }

    fn noise(seed: u64, t: usize, size: usize) -> Tensor4 {
        sample_gaussian(&mut RngStream::new(seed), (t, 1, size, size)).unwrap()
    }

    #[test]
    fn bn_and_in_share_conv_weights() {
        let cfg = GeneratorConfig::default();
        let bn = Generator::build(&cfg.with_norm(NormKind::Batch), &mut RngStream::new(7)).unwrap();
        let inn =
            Generator::build(&cfg.with_norm(NormKind::Instance), &mut RngStream::new(7)).unwrap();
        assert_eq!(bn.params(), inn.params());
        assert_eq!(bn.param_count(), inn.param_count());
        let none =
            Generator::build(&cfg.with_norm(NormKind::None), &mut RngStream::new(7)).unwrap();
        for name in bn.conv_weight_names() {
            assert_eq!(bn.params()[name], none.params()[name]);
        }
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = GeneratorConfig::default();
        let a = Generator::build(&cfg, &mut RngStream::new(3)).unwrap();
        let b = Generator::build(&cfg, &mut RngStream::new(3)).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn layer_count_without_residual_blocks() {
        // concat + 3 × (conv, norm, relu) + 2 × (upsample, conv, norm, relu) + conv + sigmoid
        let cfg = GeneratorConfig {
            residual_blocks: 0,
            ..GeneratorConfig::default()
        };
        let g = Generator::build(&cfg, &mut RngStream::new(1)).unwrap();
        assert_eq!(g.layer_count(), 1 + 9 + 8 + 2);
        let g = Generator::build(&cfg.with_norm(NormKind::None), &mut RngStream::new(1)).unwrap();
        assert_eq!(g.layer_count(), 1 + 6 + 6 + 2);
        let g = Generator::build(&GeneratorConfig::default(), &mut RngStream::new(1)).unwrap();
        assert_eq!(g.layer_count(), 20 + 3);
    }

    #[test]
    fn first_conv_has_no_bias_when_normalized() {
        let g = Generator::build(&GeneratorConfig::default(), &mut RngStream::new(1)).unwrap();
        assert!(!g.params().contains_key("enc0.conv.bias"));
        assert!(g.params().contains_key("out.conv.bias"));
        let cfg = GeneratorConfig::default().with_norm(NormKind::None);
        let g = Generator::build(&cfg, &mut RngStream::new(1)).unwrap();
        assert!(g.params().contains_key("enc0.conv.bias"));
    }

    #[test]
    fn output_matches_input_size() {
        let mut g = Generator::build(&GeneratorConfig::default(), &mut RngStream::new(2)).unwrap();
        for size in [16, 32, 48] {
            let (y, _) = g
                .forward(
                    &image(size as u64, 1, size),
                    Some(&noise(9, 1, size)),
                    Mode::Train,
                )
                .unwrap();
            assert_eq!(y.shape(), Shape::new(1, 3, size, size).unwrap());
            assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut g = Generator::build(&GeneratorConfig::default(), &mut RngStream::new(2)).unwrap();
        let x = image(1, 1, 16);
        assert!(matches!(
            g.forward(&x, None, Mode::Train),
            Err(Error::ShapeMismatch(_))
        ));
        let z = noise(1, 1, 12);
        assert!(matches!(
            g.forward(&x, Some(&z), Mode::Train),
            Err(Error::ShapeMismatch(_))
        ));
        let odd = image(1, 1, 18);
        let z = noise(1, 1, 18);
        assert!(matches!(
            g.forward(&odd, Some(&z), Mode::Train),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn eval_batch_norm_needs_training_first() {
        let cfg = GeneratorConfig::default().with_norm(NormKind::Batch);
        let mut g = Generator::build(&cfg, &mut RngStream::new(2)).unwrap();
        let x = image(1, 2, 16);
        let z = noise(1, 2, 16);
        assert!(matches!(
            g.infer(&x, Some(&z)),
            Err(Error::NotCalibrated(_))
        ));
        g.forward(&x, Some(&z), Mode::Train).unwrap();
        assert!(g.running_stats().values().all(|rs| rs.count == 1));
        g.infer(&x, Some(&z)).unwrap();
    }

    #[test]
    fn instance_norm_has_no_train_eval_split() {
        let mut g = Generator::build(&GeneratorConfig::default(), &mut RngStream::new(2)).unwrap();
        let x = image(1, 2, 16);
        let z = noise(1, 2, 16);
        let (a, _) = g.forward(&x, Some(&z), Mode::Train).unwrap();
        let b = g.infer(&x, Some(&z)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_grad_gives_zero_param_grads() {
        let mut g = Generator::build(&GeneratorConfig::default(), &mut RngStream::new(2)).unwrap();
        let (y, cache) = g
            .forward(&image(1, 1, 16), Some(&noise(1, 1, 16)), Mode::Train)
            .unwrap();
        let grads = g.backward(&Tensor4::zeros(y.shape()), &cache).unwrap();
        assert_eq!(
            grads.params.keys().collect::<Vec<_>>(),
            g.params().keys().collect::<Vec<_>>()
        );
        assert!(grads
            .params
            .values()
            .all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_without_forward_is_rejected() {
        let g = Generator::build(&GeneratorConfig::default(), &mut RngStream::new(2)).unwrap();
        let grad = Tensor4::zeros(Shape::new(1, 3, 16, 16).unwrap());
        assert!(matches!(
            g.backward(&grad, &GeneratorCache::default()),
            Err(Error::MissingForward(_))
        ));
        let small_cfg = GeneratorConfig {
            residual_blocks: 0,
            ..GeneratorConfig::default()
        };
        let mut small = Generator::build(&small_cfg, &mut RngStream::new(2)).unwrap();
        let (y, cache) = small
            .forward(&image(1, 1, 16), Some(&noise(1, 1, 16)), Mode::Train)
            .unwrap();
        assert!(matches!(
            g.backward(&y, &cache),
            Err(Error::MissingForward(_))
        ));
    }

    #[test]
    fn named_round_trip() {
        for norm in [NormKind::None, NormKind::Batch, NormKind::Instance] {
            let cfg = GeneratorConfig {
                affine: true,
                ..GeneratorConfig::default().with_norm(norm)
            };
            let mut g = Generator::build(&cfg, &mut RngStream::new(5)).unwrap();
            g.forward(&image(1, 2, 16), Some(&noise(2, 2, 16)), Mode::Train)
                .unwrap();
            let back = Generator::from_named(&g.to_named()).unwrap();
            assert_eq!(back.config(), g.config());
            assert_eq!(back.params(), g.params());
            assert_eq!(back.running_stats(), g.running_stats());
        }
    }
}
