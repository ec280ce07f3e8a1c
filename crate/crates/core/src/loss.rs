//! Perceptual stylization loss.
//!
//! A frozen convolutional feature extractor provides style statistics (Gram
//! matrices of shallow feature maps, averaged over spatial positions) and
//! content statistics (a deeper feature map kept spatially resolved). The
//! loss is
//!
//! ```text
//! L = α · mean((φ_c(out) − φ_c(content))²)
//!   + β · mean_taps mean((G(φ_k(out)) − G_k(style))²)
//! ```
//!
//! averaged over the instances of a batch, with exact reverse-mode gradients
//! back to the stylized image.

use crate::error::{Error, Result};
use crate::layers::{
    conv2d_backward, relu_backward, relu_forward, ConvCache, ConvGeometry, ConvParams, PaddingMode,
    ReluCache,
};
use crate::rng::RngStream;
use crate::tensor::{exact_sum, sample_gaussian, Shape, Tensor4};

pub const DEFAULT_CONTENT_WEIGHT: f64 = 1.0;
pub const DEFAULT_STYLE_WEIGHT: f64 = 10.0;
/// Smallest spatial size accepted by [`FeatureExtractor::extract`].
pub const MIN_INPUT_SIZE: usize = 8;

const DEFAULT_CHANNELS: [usize; 5] = [3, 8, 16, 16, 16];
const DEFAULT_STRIDES: [usize; 4] = [2, 2, 1, 1];

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WeightSource {
    Seeded(u64),
    Loaded,
}

/// A frozen stack of `conv → ReLU` blocks. Tap `k` (1-based) is the output of
/// block `k`.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    blocks: Vec<ConvParams>,
    style_taps: Vec<usize>,
    content_tap: usize,
    source: WeightSource,
}

impl FeatureExtractor {
    /// The default extractor: four bias-free 3×3 reflect-padded blocks with
    /// channels 3→8→16→16→16, the first two with stride 2, random Gaussian
    /// filters with fan-in scaling. Style taps 1, 2, 3; content tap 3.
    pub fn seeded(seed: u64) -> FeatureExtractor {
        let mut rng = RngStream::new(seed);
        let blocks = DEFAULT_STRIDES
            .iter()
            .enumerate()
            .map(|(b, &stride)| {
                let (ci, co) = (DEFAULT_CHANNELS[b], DEFAULT_CHANNELS[b + 1]);
                let std = (2.0 / (ci * 9) as f64).sqrt();
                let weight = sample_gaussian(&mut rng, (co, ci, 3, 3))
                    .expect("static shape")
                    .scale(std);
                ConvParams {
                    weight,
                    bias: None,
                    geometry: ConvGeometry::strided(3, stride, PaddingMode::Reflect),
                }
            })
            .collect();
        FeatureExtractor {
            blocks,
            style_taps: vec![1, 2, 3],
            content_tap: 3,
            source: WeightSource::Seeded(seed),
        }
    }

    /// An extractor from explicit blocks, e.g. weights read from a file.
    pub fn from_blocks(
        blocks: Vec<ConvParams>,
        style_taps: Vec<usize>,
        content_tap: usize,
    ) -> Result<FeatureExtractor> {
        if blocks.is_empty() {
            return Err(Error::InvalidArgument(
                "extractor needs at least one block".into(),
            ));
        }
        let n = blocks.len();
        if style_taps.is_empty() {
            return Err(Error::InvalidArgument(
                "extractor needs at least one style tap".into(),
            ));
        }
        for &tap in style_taps.iter().chain(std::iter::once(&content_tap)) {
            if tap == 0 || tap > n {
                return Err(Error::InvalidArgument(format!("tap {tap} outside 1..={n}")));
            }
        }
        for pair in blocks.windows(2) {
            if pair[0].weight.shape().t != pair[1].weight.shape().c {
                return Err(Error::ShapeMismatch(format!(
                    "block output {} feeds block expecting {}",
                    pair[0].weight.shape(),
                    pair[1].weight.shape()
                )));
            }
        }
        Ok(FeatureExtractor {
            blocks,
            style_taps,
            content_tap,
            source: WeightSource::Loaded,
        })
    }

    /// Default architecture with weights taken from `block{k}.weight` and
    /// optional `block{k}.bias` entries (`k` from 1).
    pub fn from_named(entries: &[(String, Tensor4)]) -> Result<FeatureExtractor> {
        let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let mut blocks = Vec::new();
        for k in 1.. {
            let Some(weight) = find(&format!("block{k}.weight")) else {
                break;
            };
            let bias = find(&format!("block{k}.bias")).map(|b| b.data().to_vec());
            let stride = DEFAULT_STRIDES.get(k - 1).copied().unwrap_or(1);
            let kernel = weight.shape().w;
            blocks.push(ConvParams {
                weight: weight.clone(),
                bias,
                geometry: ConvGeometry::strided(kernel, stride, PaddingMode::Reflect),
            });
        }
        let n = blocks.len();
        let content_tap = n.min(3);
        let style_taps = (1..=content_tap).collect();
        FeatureExtractor::from_blocks(blocks, style_taps, content_tap)
    }

    pub fn to_named(&self) -> Vec<(String, Tensor4)> {
        let mut out = Vec::new();
        for (k, block) in self.blocks.iter().enumerate() {
            out.push((format!("block{}.weight", k + 1), block.weight.clone()));
            if let Some(b) = &block.bias {
                let t = Tensor4::from_vec((1, b.len(), 1, 1), b.clone()).expect("bias shape");
                out.push((format!("block{}.bias", k + 1), t));
            }
        }
        out
    }

    pub fn source(&self) -> &WeightSource {
        &self.source
    }

    pub fn style_taps(&self) -> &[usize] {
        &self.style_taps
    }

    pub fn content_tap(&self) -> usize {
        self.content_tap
    }

    pub fn input_channels(&self) -> usize {
        self.blocks[0].weight.shape().c
    }

    fn depth(&self) -> usize {
        self.style_taps
            .iter()
            .copied()
            .chain(std::iter::once(self.content_tap))
            .max()
            .unwrap_or(1)
    }

    /// Runs the blocks up to the deepest tap.
    pub fn extract(&self, x: &Tensor4) -> Result<Features> {
        let s = x.shape();
        if s.c != self.input_channels() {
            return Err(Error::InvalidShape(format!(
                "extractor expects {} channels, got {}",
                self.input_channels(),
                s.c
            )));
        }
        if s.w < MIN_INPUT_SIZE || s.h < MIN_INPUT_SIZE {
            return Err(Error::InvalidShape(format!(
                "extractor input must be at least {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}, got {}x{}",
                s.w, s.h
            )));
        }
        let mut maps = Vec::with_capacity(self.depth());
        let mut caches = Vec::with_capacity(self.depth());
        let mut cur = x.clone();
        for block in &self.blocks[..self.depth()] {
            let (pre, conv_cache) = block.forward(&cur)?;
            let (post, relu_cache) = relu_forward(&pre);
            caches.push((conv_cache, relu_cache));
            maps.push(post.clone());
            cur = post;
        }
        Ok(Features { maps, caches })
    }

    /// Gradient with respect to the extractor input, given gradients at any
    /// subset of taps (indexed like [`Features::tap`]).
    pub fn backward(&self, features: &Features, tap_grads: &[Option<Tensor4>]) -> Result<Tensor4> {
        let depth = features.maps.len();
        if tap_grads.len() != depth {
            return Err(Error::MissingForward(format!(
                "expected {depth} tap gradients, got {}",
                tap_grads.len()
            )));
        }
        let mut grad: Option<Tensor4> = None;
        for k in (0..depth).rev() {
            if let Some(tg) = &tap_grads[k] {
                grad = Some(match grad {
                    Some(mut g) => {
                        g.add_assign(tg)?;
                        g
                    }
                    None => tg.clone(),
                });
            }
            let Some(g) = grad.take() else { continue };
            let (conv_cache, relu_cache) = &features.caches[k];
            let g = relu_backward(&g, relu_cache)?;
            let grads = conv2d_backward(&g, conv_cache, &self.blocks[k].weight)?;
            grad = Some(grads.input);
        }
        grad.ok_or_else(|| Error::InvalidArgument("no tap received a gradient".into()))
    }
}

/// Feature maps at every block up to the deepest tap, plus what backward needs.
#[derive(Clone, Debug)]
pub struct Features {
    maps: Vec<Tensor4>,
    caches: Vec<(ConvCache, ReluCache)>,
}

impl Features {
    /// Output of block `k` (1-based).
    pub fn tap(&self, k: usize) -> &Tensor4 {
        &self.maps[k - 1]
    }

    pub fn depth(&self) -> usize {
        self.maps.len()
    }
}

/// A `C × C` Gram matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Gram {
    c: usize,
    data: Vec<f64>,
}

impl Gram {
    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.c + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.c).all(|i| (0..i).all(|j| self.get(i, j).to_bits() == self.get(j, i).to_bits()))
    }

    /// `xᵀ G x`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.c {
            for j in 0..self.c {
                acc += x[i] * self.get(i, j) * x[j];
            }
        }
        acc
    }
}

/// `G_ij = (1 / WH) Σ_lm F_ilm F_jlm` for a single-instance feature map.
/// Each sum is correctly rounded, so `G` is bitwise invariant under any
/// permutation of the spatial sites.
pub fn gram(features: &Tensor4) -> Result<Gram> {
    if features.shape().t != 1 {
        return Err(Error::InvalidShape(format!(
            "gram takes one instance, got T = {}",
            features.shape().t
        )));
    }
    Ok(gram_of(features, 0))
}

fn gram_of(f: &Tensor4, t: usize) -> Gram {
    let s = f.shape();
    let n = s.plane() as f64;
    let mut data = vec![0.0; s.c * s.c];
    for i in 0..s.c {
        let fi = f.plane(t, i);
        for j in 0..s.c {
            let fj = f.plane(t, j);
            let dot = exact_sum(fi.iter().zip(fj).map(|(a, b)| a * b));
            data[i * s.c + j] = dot / n;
        }
    }
    Gram { c: s.c, data }
}

/// Writes `∂L/∂F` for instance `t` into `out`, given `∂L/∂G`.
fn gram_backward_into(f: &Tensor4, t: usize, d_gram: &[f64], out: &mut Tensor4) {
    let s = f.shape();
    let n = s.plane() as f64;
    for i in 0..s.c {
        let mut acc = vec![0.0; s.plane()];
        for j in 0..s.c {
            let coef = (d_gram[i * s.c + j] + d_gram[j * s.c + i]) / n;
            for (a, v) in acc.iter_mut().zip(f.plane(t, j)) {
                *a += coef * v;
            }
        }
        for (dst, a) in out.plane_mut(t, i).iter_mut().zip(acc) {
            *dst += a;
        }
    }
}

/// Style statistics of a fixed style image and the loss weights.
#[derive(Clone, Debug)]
pub struct StyleTarget {
    grams: Vec<Gram>,
    pub content_weight: f64,
    pub style_weight: f64,
}

impl StyleTarget {
    pub fn from_image(
        phi: &FeatureExtractor,
        style: &Tensor4,
        content_weight: f64,
        style_weight: f64,
    ) -> Result<StyleTarget> {
        if style.shape().t != 1 {
            return Err(Error::InvalidShape(
                "style target takes a single image".into(),
            ));
        }
        let features = phi.extract(style)?;
        let grams = phi
            .style_taps()
            .iter()
            .map(|&k| gram(features.tap(k)))
            .collect::<Result<_>>()?;
        Ok(StyleTarget {
            grams,
            content_weight,
            style_weight,
        })
    }

    pub fn grams(&self) -> &[Gram] {
        &self.grams
    }

    pub fn with_weights(&self, content_weight: f64, style_weight: f64) -> StyleTarget {
        StyleTarget {
            grams: self.grams.clone(),
            content_weight,
            style_weight,
        }
    }
}

/// Loss value, its two weighted components and the gradient with respect to
/// the stylized image.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: f64,
    pub content: f64,
    pub style: f64,
    pub grad: Tensor4,
}

/// Batch-averaged perceptual loss of `output` against `content` and the style
/// target.
pub fn total_loss(
    target: &StyleTarget,
    phi: &FeatureExtractor,
    content: &Tensor4,
    output: &Tensor4,
) -> Result<LossOutput> {
    if content.shape() != output.shape() {
        return Err(Error::ShapeMismatch(format!(
            "content {} vs output {}",
            content.shape(),
            output.shape()
        )));
    }
    if target.grams.len() != phi.style_taps().len() {
        return Err(Error::ShapeMismatch(
            "style target was built for a different extractor".into(),
        ));
    }
    let batch = output.shape().t;
    let inv_t = 1.0 / batch as f64;
    let out_f = phi.extract(output)?;
    let con_f = phi.extract(content)?;

    let mut tap_grads: Vec<Option<Tensor4>> = vec![None; out_f.depth()];
    let mut content_sum = 0.0;
    let mut style_sum = 0.0;

    let ct = phi.content_tap();
    {
        let fo = out_f.tap(ct);
        let fc = con_f.tap(ct);
        let s = fo.shape();
        let per_instance = (s.c * s.plane()) as f64;
        let mut g = Tensor4::zeros(s);
        let stride = s.c * s.plane();
        for t in 0..batch {
            let range = t * stride..(t + 1) * stride;
            let (o, c) = (&fo.data()[range.clone()], &fc.data()[range.clone()]);
            let sq: f64 = o.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            content_sum += sq / per_instance;
            let coef = target.content_weight * 2.0 / per_instance * inv_t;
            for ((d, a), b) in g.data_mut()[range].iter_mut().zip(o).zip(c) {
                *d = coef * (a - b);
            }
        }
        tap_grads[ct - 1] = Some(g);
    }

    let taps = phi.style_taps();
    let n_taps = taps.len() as f64;
    for (&k, tgt) in taps.iter().zip(&target.grams) {
        let fo = out_f.tap(k);
        let c = fo.shape().c;
        if tgt.c != c {
            return Err(Error::ShapeMismatch(format!(
                "tap {k}: target gram is {0}x{0}, features have {c} channels",
                tgt.c
            )));
        }
        let entries = (c * c) as f64;
        let mut g = Tensor4::zeros(fo.shape());
        for t in 0..batch {
            let gm = gram_of(fo, t);
            let diff: Vec<f64> = gm.data.iter().zip(&tgt.data).map(|(a, b)| a - b).collect();
            style_sum += diff.iter().map(|d| d * d).sum::<f64>() / entries / n_taps;
            let coef = target.style_weight * 2.0 / entries / n_taps * inv_t;
            let d_gram: Vec<f64> = diff.iter().map(|d| coef * d).collect();
            gram_backward_into(fo, t, &d_gram, &mut g);
        }
        match &mut tap_grads[k - 1] {
            Some(existing) => existing.add_assign(&g)?,
            slot => *slot = Some(g),
        }
    }

    let content_term = target.content_weight * content_sum * inv_t;
    let style_term = target.style_weight * style_sum * inv_t;
    let grad = phi.backward(&out_f, &tap_grads)?;
    debug_assert_eq!(grad.shape(), output.shape());
    Ok(LossOutput {
        total: content_term + style_term,
        content: content_term,
        style: style_term,
        grad,
    })
}

/// Shape of every tap for an input of the given spatial size.
pub fn tap_shapes(phi: &FeatureExtractor, input: Shape) -> Result<Vec<Shape>> {
    let mut s = input;
    let mut out = Vec::new();
    for block in &phi.blocks[..phi.depth()] {
        let k = block.weight.shape().w;
        let g = block.geometry;
        s = Shape::new(
            s.t,
            block.weight.shape().t,
            g.output_size(s.w, k),
            g.output_size(s.h, k),
        )?;
        out.push(s);
    }
    Ok(out)
}
