//! Differentiable building blocks: padding, 2-D convolution, ReLU,
//! nearest-neighbour upsampling and the output sigmoid.
//!
//! Every forward returns the output together with a cache value; the matching
//! backward consumes that cache. Convolution is cross-correlation (no kernel
//! flip). Output planes are computed independently and in parallel, each one
//! by a single thread in a fixed order, so results do not depend on the
//! thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PaddingMode {
    Zero,
    /// Mirror about the edge pixel without repeating it: `[a b c] -> b [a b c] b`.
    Reflect,
}

impl PaddingMode {
    pub fn name(self) -> &'static str {
        match self {
            PaddingMode::Zero => "zero",
            PaddingMode::Reflect => "reflect",
        }
    }
}

impl std::str::FromStr for PaddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(PaddingMode::Zero),
            "reflect" => Ok(PaddingMode::Reflect),
            other => Err(Error::InvalidArgument(format!(
                "unknown padding mode `{other}`"
            ))),
        }
    }
}

/// Maps a padded coordinate back to its source coordinate, if any.
#[inline]
fn source_index(padded: usize, pad: usize, n: usize, mode: PaddingMode) -> Option<usize> {
    let i = padded as isize - pad as isize;
    let n = n as isize;
    if (0..n).contains(&i) {
        return Some(i as usize);
    }
    match mode {
        PaddingMode::Zero => None,
        PaddingMode::Reflect => {
            let r = if i < 0 { -i } else { 2 * (n - 1) - i };
            debug_assert!((0..n).contains(&r));
            Some(r as usize)
        }
    }
}

fn check_padding(shape: Shape, pad: usize, mode: PaddingMode) -> Result<()> {
    if mode == PaddingMode::Reflect && (pad >= shape.w || pad >= shape.h) {
        return Err(Error::InvalidPadding(format!(
            "reflect padding {pad} needs spatial dims > {pad}, got {}x{}",
            shape.w, shape.h
        )));
    }
    Ok(())
}

/// Pads both spatial axes by `pad` on each side.
pub fn pad_forward(x: &Tensor4, pad: usize, mode: PaddingMode) -> Result<Tensor4> {
    let s = x.shape();
    check_padding(s, pad, mode)?;
    if pad == 0 {
        return Ok(x.clone());
    }
    let (pw, ph) = (s.w + 2 * pad, s.h + 2 * pad);
    let mut out = Tensor4::zeros(Shape { w: pw, h: ph, ..s });
    out.data_mut()
        .par_chunks_mut(pw * ph)
        .enumerate()
        .for_each(|(idx, dst)| {
            let src = x.plane(idx / s.c, idx % s.c);
            for i in 0..pw {
                let Some(si) = source_index(i, pad, s.w, mode) else {
                    continue;
                };
                for j in 0..ph {
                    if let Some(sj) = source_index(j, pad, s.h, mode) {
                        dst[i * ph + j] = src[si * s.h + sj];
                    }
                }
            }
        });
    Ok(out)
}

/// Adjoint of [`pad_forward`]: zero padding drops gradient at padded
/// positions, reflect padding folds it back onto the mirrored source pixels.
pub fn pad_backward(
    grad_padded: &Tensor4,
    input_shape: Shape,
    pad: usize,
    mode: PaddingMode,
) -> Result<Tensor4> {
    let s = input_shape;
    let (pw, ph) = (s.w + 2 * pad, s.h + 2 * pad);
    grad_padded.expect_shape(Shape { w: pw, h: ph, ..s }, "pad_backward")?;
    check_padding(s, pad, mode)?;
    if pad == 0 {
        return Ok(grad_padded.clone());
    }
    let mut out = Tensor4::zeros(s);
    out.data_mut()
        .par_chunks_mut(s.plane())
        .enumerate()
        .for_each(|(idx, dst)| {
            let src = grad_padded.plane(idx / s.c, idx % s.c);
            for i in 0..pw {
                let Some(si) = source_index(i, pad, s.w, mode) else {
                    continue;
                };
                for j in 0..ph {
                    if let Some(sj) = source_index(j, pad, s.h, mode) {
                        dst[si * s.h + sj] += src[i * ph + j];
                    }
                }
            }
        });
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    pub padding: PaddingMode,
}

impl ConvGeometry {
    /// Stride 1 with `(k - 1) / 2` padding: spatial size is preserved.
    pub fn same(kernel: usize, padding: PaddingMode) -> ConvGeometry {
        ConvGeometry {
            stride: 1,
            pad: (kernel - 1) / 2,
            padding,
        }
    }

    pub fn strided(kernel: usize, stride: usize, padding: PaddingMode) -> ConvGeometry {
        ConvGeometry {
            stride,
            pad: (kernel - 1) / 2,
            padding,
        }
    }

    /// `floor((size + 2·pad − kernel) / stride) + 1`.
    pub fn output_size(&self, size: usize, kernel: usize) -> usize {
        (size + 2 * self.pad - kernel) / self.stride + 1
    }
}

/// An owned convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `(C_out, C_in, K, K)`.
    pub weight: Tensor4,
    pub bias: Option<Vec<f64>>,
    pub geometry: ConvGeometry,
}

impl ConvParams {
    pub fn forward(&self, x: &Tensor4) -> Result<(Tensor4, ConvCache)> {
        conv2d_forward(x, &self.weight, self.bias.as_deref(), self.geometry)
    }

    pub fn backward(&self, grad_out: &Tensor4, cache: &ConvCache) -> Result<ConvGrads> {
        conv2d_backward(grad_out, cache, &self.weight)
    }
}

#[derive(Clone, Debug)]
pub struct ConvCache {
    padded: Tensor4,
    input_shape: Shape,
    output_shape: Shape,
    geometry: ConvGeometry,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor4,
    pub weight: Tensor4,
    pub bias: Vec<f64>,
}

fn kernel_size(weight: &Tensor4) -> Result<usize> {
    let ws = weight.shape();
    if ws.w != ws.h || ws.w % 2 == 0 {
        return Err(Error::InvalidShape(format!(
            "kernel must be square with odd size, got {}x{}",
            ws.w, ws.h
        )));
    }
    Ok(ws.w)
}

/// Cross-correlation of `x` with `weight`, shape `(C_out, C_in, K, K)`.
pub fn conv2d_forward(
    x: &Tensor4,
    weight: &Tensor4,
    bias: Option<&[f64]>,
    geometry: ConvGeometry,
) -> Result<(Tensor4, ConvCache)> {
    let s = x.shape();
    let ws = weight.shape();
    let k = kernel_size(weight)?;
    let (co, ci) = (ws.t, ws.c);
    if s.c != ci {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {ci} input channels, got {}",
            s.c
        )));
    }
    if let Some(b) = bias {
        if b.len() != co {
            return Err(Error::ShapeMismatch(format!(
                "bias has {} entries for {co} output channels",
                b.len()
            )));
        }
    }
    if geometry.stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let ConvGeometry {
        stride,
        pad,
        padding,
    } = geometry;
    if s.w + 2 * pad < k || s.h + 2 * pad < k {
        return Err(Error::InvalidShape(format!(
            "padded input {}x{} smaller than kernel {k}",
            s.w + 2 * pad,
            s.h + 2 * pad
        )));
    }
    let padded = pad_forward(x, pad, padding)?;
    let ph = s.h + 2 * pad;
    let (ow, oh) = (geometry.output_size(s.w, k), geometry.output_size(s.h, k));
    let output_shape = Shape::new(s.t, co, ow, oh)?;
    let mut out = Tensor4::zeros(output_shape);

    out.data_mut()
        .par_chunks_mut(ow * oh)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (t, o) = (idx / co, idx % co);
            if let Some(b) = bias {
                plane.fill(b[o]);
            }
            for c in 0..ci {
                let src = padded.plane(t, c);
                for kx in 0..k {
                    for ky in 0..k {
                        let wv = weight.get(o, c, kx, ky);
                        for ox in 0..ow {
                            let row = &src[(ox * stride + kx) * ph..];
                            let dst = &mut plane[ox * oh..(ox + 1) * oh];
                            if stride == 1 {
                                for (d, v) in dst.iter_mut().zip(&row[ky..ky + oh]) {
                                    *d += wv * v;
                                }
                            } else {
                                for (oy, d) in dst.iter_mut().enumerate() {
                                    *d += wv * row[oy * stride + ky];
                                }
                            }
                        }
                    }
                }
            }
        });

    let cache = ConvCache {
        padded,
        input_shape: s,
        output_shape,
        geometry,
    };
    Ok((out, cache))
}

/// Exact gradients of [`conv2d_forward`] with respect to its input, weight
/// and bias.
pub fn conv2d_backward(
    grad_out: &Tensor4,
    cache: &ConvCache,
    weight: &Tensor4,
) -> Result<ConvGrads> {
    grad_out.expect_shape(cache.output_shape, "conv2d_backward")?;
    let ws = weight.shape();
    let k = kernel_size(weight)?;
    let (co, ci) = (ws.t, ws.c);
    if co != cache.output_shape.c || ci != cache.input_shape.c {
        return Err(Error::ShapeMismatch(format!(
            "weight {ws} does not match the cached forward"
        )));
    }
    let s = cache.input_shape;
    let ConvGeometry {
        stride,
        pad,
        padding,
    } = cache.geometry;
    let ps = cache.padded.shape();
    let ph = ps.h;
    let (ow, oh) = (cache.output_shape.w, cache.output_shape.h);

    let mut grad_w = Tensor4::zeros(ws);
    grad_w
        .data_mut()
        .par_chunks_mut(ci * k * k)
        .enumerate()
        .for_each(|(o, gw)| {
            for c in 0..ci {
                for kx in 0..k {
                    for ky in 0..k {
                        let mut acc = 0.0;
                        for t in 0..s.t {
                            let g = grad_out.plane(t, o);
                            let src = cache.padded.plane(t, c);
                            for ox in 0..ow {
                                let row = &src[(ox * stride + kx) * ph..];
                                let grow = &g[ox * oh..(ox + 1) * oh];
                                for (oy, gv) in grow.iter().enumerate() {
                                    acc += gv * row[oy * stride + ky];
                                }
                            }
                        }
                        gw[(c * k + kx) * k + ky] = acc;
                    }
                }
            }
        });

    let grad_b: Vec<f64> = (0..co)
        .map(|o| {
            (0..s.t)
                .map(|t| grad_out.plane(t, o).iter().sum::<f64>())
                .sum()
        })
        .collect();

    let mut grad_padded = Tensor4::zeros(ps);
    grad_padded
        .data_mut()
        .par_chunks_mut(ps.plane())
        .enumerate()
        .for_each(|(idx, gp)| {
            let (t, c) = (idx / ci, idx % ci);
            for o in 0..co {
                let g = grad_out.plane(t, o);
                for kx in 0..k {
                    for ky in 0..k {
                        let wv = weight.get(o, c, kx, ky);
                        for ox in 0..ow {
                            let base = (ox * stride + kx) * ph + ky;
                            let grow = &g[ox * oh..(ox + 1) * oh];
                            for (oy, gv) in grow.iter().enumerate() {
                                gp[base + oy * stride] += wv * gv;
                            }
                        }
                    }
                }
            }
        });

    let grad_x = pad_backward(&grad_padded, s, pad, padding)?;
    Ok(ConvGrads {
        input: grad_x,
        weight: grad_w,
        bias: grad_b,
    })
}

#[derive(Clone, Debug)]
pub struct ReluCache {
    active: Vec<bool>,
    shape: Shape,
}

/// `max(0, x)`.
pub fn relu_forward(x: &Tensor4) -> (Tensor4, ReluCache) {
    let active = x.data().iter().map(|&v| v > 0.0).collect();
    let y = x.map(|v| if v > 0.0 { v } else { 0.0 });
    (
        y,
        ReluCache {
            active,
            shape: x.shape(),
        },
    )
}

/// Passes gradient where the input was strictly positive; the subgradient at
/// zero is zero.
pub fn relu_backward(grad_out: &Tensor4, cache: &ReluCache) -> Result<Tensor4> {
    grad_out.expect_shape(cache.shape, "relu_backward")?;
    let data = grad_out
        .data()
        .iter()
        .zip(&cache.active)
        .map(|(&g, &on)| if on { g } else { 0.0 })
        .collect();
    Tensor4::from_vec(cache.shape, data)
}

fn check_factor(factor: usize) -> Result<()> {
    if factor == 0 {
        return Err(Error::InvalidArgument(
            "upsample factor must be >= 1".into(),
        ));
    }
    Ok(())
}

/// Replicates every pixel into a `factor × factor` block.
pub fn upsample_nearest_forward(x: &Tensor4, factor: usize) -> Result<Tensor4> {
    check_factor(factor)?;
    let s = x.shape();
    let (uw, uh) = (s.w * factor, s.h * factor);
    let mut out = Tensor4::zeros(Shape { w: uw, h: uh, ..s });
    out.data_mut()
        .par_chunks_mut(uw * uh)
        .enumerate()
        .for_each(|(idx, dst)| {
            let src = x.plane(idx / s.c, idx % s.c);
            for i in 0..uw {
                for j in 0..uh {
                    dst[i * uh + j] = src[(i / factor) * s.h + j / factor];
                }
            }
        });
    Ok(out)
}

/// Adjoint of [`upsample_nearest_forward`]: sums each `factor × factor` block.
pub fn upsample_nearest_backward(grad_out: &Tensor4, factor: usize) -> Result<Tensor4> {
    check_factor(factor)?;
    let g = grad_out.shape();
    if g.w % factor != 0 || g.h % factor != 0 {
        return Err(Error::ShapeMismatch(format!(
            "gradient {g} is not a multiple of upsample factor {factor}"
        )));
    }
    let (w, h) = (g.w / factor, g.h / factor);
    let mut out = Tensor4::zeros(Shape { w, h, ..g });
    out.data_mut()
        .par_chunks_mut(w * h)
        .enumerate()
        .for_each(|(idx, dst)| {
            let src = grad_out.plane(idx / g.c, idx % g.c);
            for i in 0..g.w {
                for j in 0..g.h {
                    dst[(i / factor) * h + j / factor] += src[i * g.h + j];
                }
            }
        });
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SigmoidCache {
    output: Tensor4,
}

pub fn sigmoid_forward(x: &Tensor4) -> (Tensor4, SigmoidCache) {
    let y = x.map(|v| 1.0 / (1.0 + (-v).exp()));
    (y.clone(), SigmoidCache { output: y })
}

pub fn sigmoid_backward(grad_out: &Tensor4, cache: &SigmoidCache) -> Result<Tensor4> {
    grad_out.expect_shape(cache.output.shape(), "sigmoid_backward")?;
    let data = grad_out
        .data()
        .iter()
        .zip(cache.output.data())
        .map(|(g, y)| g * y * (1.0 - y))
        .collect();
    Tensor4::from_vec(cache.output.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::tensor::sample_gaussian;

    fn randn(seed: u64, shape: (usize, usize, usize, usize)) -> Tensor4 {
        sample_gaussian(&mut RngStream::new(seed), shape).unwrap()
    }

    #[test]
    fn reflect_padding_mirrors_without_repeating_edge() {
        let x = Tensor4::from_vec((1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        // W = 1 cannot be reflect-padded by 1
        assert!(matches!(
            pad_forward(&x, 1, PaddingMode::Reflect),
            Err(Error::InvalidPadding(_))
        ));
        let x = Tensor4::from_vec((1, 1, 2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = pad_forward(&x, 1, PaddingMode::Reflect).unwrap();
        assert_eq!(p.shape(), Shape::new(1, 1, 4, 5).unwrap());
        assert_eq!(
            p.data(),
            &[
                5.0, 4.0, 5.0, 6.0, 5.0, //
                2.0, 1.0, 2.0, 3.0, 2.0, //
                5.0, 4.0, 5.0, 6.0, 5.0, //
                2.0, 1.0, 2.0, 3.0, 2.0,
            ]
        );
        let z = pad_forward(&x, 1, PaddingMode::Zero).unwrap();
        assert_eq!(z.sum(), x.sum());
        assert_eq!(z.get(0, 0, 0, 0), 0.0);
    }

    #[test]
    fn identity_kernel() {
        let x = randn(1, (2, 3, 4, 5));
        let mut w = Tensor4::zeros(Shape::new(3, 3, 1, 1).unwrap());
        for c in 0..3 {
            w.set(c, c, 0, 0, 1.0);
        }
        let geom = ConvGeometry {
            stride: 1,
            pad: 0,
            padding: PaddingMode::Zero,
        };
        let (y, cache) = conv2d_forward(&x, &w, None, geom).unwrap();
        assert_eq!(y, x);
        let g = randn(2, (2, 3, 4, 5));
        let grads = conv2d_backward(&g, &cache, &w).unwrap();
        assert_eq!(grads.input, g);
    }

    #[test]
    fn averaging_kernel_preserves_constant_under_reflect_padding() {
        let x = Tensor4::full((1, 1, 6, 5), 5.0).unwrap();
        let w = Tensor4::full((1, 1, 3, 3), 1.0 / 9.0).unwrap();
        let (y, _) =
            conv2d_forward(&x, &w, None, ConvGeometry::same(3, PaddingMode::Reflect)).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn zero_grad_gives_zero_grads() {
        let x = randn(3, (1, 2, 5, 5));
        let w = randn(4, (3, 2, 3, 3));
        let b = vec![0.1, 0.2, 0.3];
        let (y, cache) = conv2d_forward(
            &x,
            &w,
            Some(&b),
            ConvGeometry::same(3, PaddingMode::Reflect),
        )
        .unwrap();
        let grads = conv2d_backward(&Tensor4::zeros(y.shape()), &cache, &w).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.weight.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_shape_errors() {
        let x = randn(5, (1, 2, 4, 4));
        let w = randn(6, (1, 3, 3, 3));
        let geom = ConvGeometry::same(3, PaddingMode::Zero);
        assert!(matches!(
            conv2d_forward(&x, &w, None, geom),
            Err(Error::ShapeMismatch(_))
        ));
        let even = randn(6, (1, 2, 2, 2));
        assert!(matches!(
            conv2d_forward(&x, &even, None, geom),
            Err(Error::InvalidShape(_))
        ));
        let wide = randn(6, (1, 2, 9, 9));
        let geom = ConvGeometry::same(9, PaddingMode::Reflect);
        assert!(matches!(
            conv2d_forward(&x, &wide, None, geom),
            Err(Error::InvalidPadding(_))
        ));
        let w = randn(6, (1, 2, 3, 3));
        let (y, cache) =
            conv2d_forward(&x, &w, None, ConvGeometry::same(3, PaddingMode::Zero)).unwrap();
        let bad = Tensor4::zeros(y.shape().with_c(2));
        assert!(matches!(
            conv2d_backward(&bad, &cache, &w),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn strided_output_size() {
        let x = randn(7, (1, 1, 32, 30));
        let w = randn(8, (2, 1, 3, 3));
        let (y, _) = conv2d_forward(
            &x,
            &w,
            None,
            ConvGeometry::strided(3, 2, PaddingMode::Reflect),
        )
        .unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 16, 15).unwrap());
    }

    #[test]
    fn relu_examples() {
        let x = Tensor4::from_vec((1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        let (y, cache) = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&Tensor4::full((1, 1, 1, 3), 1.0).unwrap(), &cache).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);

        let pos = randn(9, (1, 2, 3, 3)).map(f64::abs);
        assert_eq!(relu_forward(&pos).0, pos);
    }

    #[test]
    fn upsample_examples() {
        let x = Tensor4::from_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(upsample_nearest_forward(&x, 1).unwrap(), x);
        assert_eq!(upsample_nearest_backward(&x, 1).unwrap(), x);

        let up = upsample_nearest_forward(&x, 2).unwrap();
        assert_eq!(
            up.data(),
            &[
                1.0, 1.0, 2.0, 2.0, //
                1.0, 1.0, 2.0, 2.0, //
                3.0, 3.0, 4.0, 4.0, //
                3.0, 3.0, 4.0, 4.0,
            ]
        );
        let back =
            upsample_nearest_backward(&Tensor4::full((1, 1, 4, 4), 1.0).unwrap(), 2).unwrap();
        assert_eq!(back.data(), &[4.0; 4]);

        let ones = Tensor4::full((2, 3, 3, 2), 1.0).unwrap();
        let rt =
            upsample_nearest_backward(&upsample_nearest_forward(&ones, 3).unwrap(), 3).unwrap();
        assert!(rt.data().iter().all(|&v| v == 9.0));

        assert!(matches!(
            upsample_nearest_forward(&x, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            upsample_nearest_backward(&x, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn sigmoid_range_and_derivative() {
        let x = Tensor4::from_vec((1, 1, 1, 3), vec![-3.0, 0.0, 3.0]).unwrap();
        let (y, cache) = sigmoid_forward(&x);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(y.get(0, 0, 0, 1), 0.5);
        let g = sigmoid_backward(&Tensor4::full((1, 1, 1, 3), 1.0).unwrap(), &cache).unwrap();
        assert_eq!(g.get(0, 0, 0, 1), 0.25);
    }
}
