//! Dense 4-D tensors in `T × C × W × H` order.
//!
//! `T` indexes images in a batch, `C` feature channels, and `W`, `H` the two
//! spatial axes. `H` is the fastest-varying axis, so every `(t, c)` plane is a
//! contiguous `W·H` slice.
//!
//! Reductions always accumulate in ascending flat-index order, which makes
//! every result bit-reproducible regardless of thread count.

use std::fmt;

use bitflags::bitflags;

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Dimensions of a [`Tensor4`]. Every dimension is at least 1.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub t: usize,
    pub c: usize,
    pub w: usize,
    pub h: usize,
}

impl Shape {
    pub fn new(t: usize, c: usize, w: usize, h: usize) -> Result<Shape> {
        if t == 0 || c == 0 || w == 0 || h == 0 {
            return Err(Error::InvalidShape(format!(
                "all dimensions must be >= 1, got ({t}, {c}, {w}, {h})"
            )));
        }
        t.checked_mul(c)
            .and_then(|n| n.checked_mul(w))
            .and_then(|n| n.checked_mul(h))
            .ok_or_else(|| Error::InvalidShape(format!("({t}, {c}, {w}, {h}) overflows")))?;
        Ok(Shape { t, c, w, h })
    }

    pub fn numel(&self) -> usize {
        self.t * self.c * self.w * self.h
    }

    /// Number of elements in one spatial plane.
    pub fn plane(&self) -> usize {
        self.w * self.h
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.t, self.c, self.w, self.h]
    }

    pub fn with_t(self, t: usize) -> Shape {
        Shape { t, ..self }
    }

    pub fn with_c(self, c: usize) -> Shape {
        Shape { c, ..self }
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.t, self.c, self.w, self.h)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Anything that names a tensor shape: a [`Shape`] or a `(T, C, W, H)` tuple.
pub trait IntoShape {
    fn into_shape(self) -> Result<Shape>;
}

impl IntoShape for Shape {
    fn into_shape(self) -> Result<Shape> {
        Ok(self)
    }
}

impl IntoShape for (usize, usize, usize, usize) {
    fn into_shape(self) -> Result<Shape> {
        let (t, c, w, h) = self;
        Shape::new(t, c, w, h)
    }
}

bitflags! {
    /// A set of tensor axes.
    #[derive(Clone, Copy, Debug, PartialEq, Eq)]
    pub struct Axes: u8 {
        const T = 0b0001;
        const C = 0b0010;
        const W = 0b0100;
        const H = 0b1000;
        const SPATIAL = Self::W.bits() | Self::H.bits();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// A dense `T × C × W × H` array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor4")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor4 {
    /// A tensor of the given shape with every element set to `fill`.
    pub fn full<S>(shape: S, fill: f64) -> Result<Tensor4>
    where
        S: IntoShape,
    {
        let shape = shape.into_shape()?;
        Ok(Tensor4 {
            shape,
            data: vec![fill; shape.numel()],
        })
    }

    pub fn zeros(shape: Shape) -> Tensor4 {
        Tensor4 {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn from_vec<S>(shape: S, data: Vec<f64>) -> Result<Tensor4>
    where
        S: IntoShape,
    {
        let shape = shape.into_shape()?;
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape(format!(
                "{} elements cannot fill shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, t: usize, c: usize, w: usize, h: usize) -> usize {
        let s = self.shape;
        debug_assert!(t < s.t && c < s.c && w < s.w && h < s.h);
        ((t * s.c + c) * s.w + w) * s.h + h
    }

    #[inline]
    pub fn get(&self, t: usize, c: usize, w: usize, h: usize) -> f64 {
        self.data[self.index(t, c, w, h)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, c: usize, w: usize, h: usize, v: f64) {
        let i = self.index(t, c, w, h);
        self.data[i] = v;
    }

    /// The contiguous `W·H` plane for instance `t`, channel `c`.
    pub fn plane(&self, t: usize, c: usize) -> &[f64] {
        let n = self.shape.plane();
        let start = (t * self.shape.c + c) * n;
        &self.data[start..start + n]
    }

    pub fn plane_mut(&mut self, t: usize, c: usize) -> &mut [f64] {
        let n = self.shape.plane();
        let start = (t * self.shape.c + c) * n;
        &mut self.data[start..start + n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, a: f64) -> Tensor4 {
        self.map(|v| a * v)
    }

    pub fn map_binary(&self, other: &Tensor4, op: BinaryOp) -> Result<Tensor4> {
        self.expect_shape(other.shape, "map_binary")?;
        let f = match op {
            BinaryOp::Add => |a: f64, b: f64| a + b,
            BinaryOp::Sub => |a: f64, b: f64| a - b,
            BinaryOp::Mul => |a: f64, b: f64| a * b,
        };
        Ok(Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        self.map_binary(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Tensor4) -> Result<Tensor4> {
        self.map_binary(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Tensor4) -> Result<Tensor4> {
        self.map_binary(other, BinaryOp::Mul)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        self.expect_shape(other.shape, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Sum or mean over `axes`; reduced axes keep size 1.
    pub fn reduce(&self, axes: Axes, kind: ReduceKind) -> Result<Tensor4> {
        if axes.is_empty() {
            return Err(Error::InvalidArgument(
                "reduce needs at least one axis".into(),
            ));
        }
        let s = self.shape;
        let keep = |flag: Axes, n: usize| if axes.contains(flag) { 1 } else { n };
        let out_shape = Shape {
            t: keep(Axes::T, s.t),
            c: keep(Axes::C, s.c),
            w: keep(Axes::W, s.w),
            h: keep(Axes::H, s.h),
        };
        let mut out = Tensor4::zeros(out_shape);
        let mut flat = 0;
        for t in 0..s.t {
            let ot = if out_shape.t == 1 { 0 } else { t };
            for c in 0..s.c {
                let oc = if out_shape.c == 1 { 0 } else { c };
                for w in 0..s.w {
                    let ow = if out_shape.w == 1 { 0 } else { w };
                    let base = out.index(ot, oc, ow, 0);
                    for h in 0..s.h {
                        let oh = if out_shape.h == 1 { 0 } else { h };
                        out.data[base + oh] += self.data[flat];
                        flat += 1;
                    }
                }
            }
        }
        if kind == ReduceKind::Mean {
            let count = (s.numel() / out_shape.numel()) as f64;
            for v in &mut out.data {
                *v /= count;
            }
        }
        Ok(out)
    }

    /// Sum of all elements in flat order.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor4) -> Result<f64> {
        self.expect_shape(other.shape, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> Result<f64> {
        self.expect_shape(other.shape, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of instance `t` as a `T = 1` tensor.
    pub fn instance(&self, t: usize) -> Result<Tensor4> {
        if t >= self.shape.t {
            return Err(Error::InvalidArgument(format!(
                "instance {t} out of range for batch of {}",
                self.shape.t
            )));
        }
        let n = self.shape.c * self.shape.plane();
        Ok(Tensor4 {
            shape: self.shape.with_t(1),
            data: self.data[t * n..(t + 1) * n].to_vec(),
        })
    }

    /// Stack tensors along `T`. All parts must agree on `C`, `W`, `H`.
    pub fn stack(parts: &[Tensor4]) -> Result<Tensor4> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(parts.iter().map(Tensor4::len).sum());
        let mut t = 0;
        for p in parts {
            let ps = p.shape;
            if (ps.c, ps.w, ps.h) != (s.c, s.w, s.h) {
                return Err(Error::ShapeMismatch(format!("cannot stack {ps} onto {s}")));
            }
            data.extend_from_slice(&p.data);
            t += ps.t;
        }
        Ok(Tensor4 {
            shape: s.with_t(t),
            data,
        })
    }

    /// Concatenate along `C`. All parts must agree on `T`, `W`, `H`.
    pub fn concat_channels(parts: &[&Tensor4]) -> Result<Tensor4> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot concatenate zero tensors".into()))?;
        let s = first.shape;
        for p in parts {
            let ps = p.shape;
            if (ps.t, ps.w, ps.h) != (s.t, s.w, s.h) {
                return Err(Error::ShapeMismatch(format!(
                    "cannot concatenate {ps} with {s} along channels"
                )));
            }
        }
        let c: usize = parts.iter().map(|p| p.shape.c).sum();
        let mut data = Vec::with_capacity(s.t * c * s.plane());
        for t in 0..s.t {
            for p in parts {
                let n = p.shape.c * s.plane();
                data.extend_from_slice(&p.data[t * n..(t + 1) * n]);
            }
        }
        Ok(Tensor4 {
            shape: s.with_c(c),
            data,
        })
    }

    /// Split along `C` into pieces with the given channel counts.
    pub fn split_channels(&self, counts: &[usize]) -> Result<Vec<Tensor4>> {
        let s = self.shape;
        if counts.iter().sum::<usize>() != s.c || counts.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "cannot split {} channels into {counts:?}",
                s.c
            )));
        }
        let plane = s.plane();
        let mut out: Vec<Tensor4> = counts
            .iter()
            .map(|&c| Tensor4::zeros(s.with_c(c)))
            .collect();
        for t in 0..s.t {
            let mut c0 = 0;
            for (piece, &c) in out.iter_mut().zip(counts) {
                let src = &self.data[(t * s.c + c0) * plane..(t * s.c + c0 + c) * plane];
                piece.data[t * c * plane..(t + 1) * c * plane].copy_from_slice(src);
                c0 += c;
            }
        }
        Ok(out)
    }

    pub(crate) fn expect_shape(&self, expected: Shape, what: &str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch(format!(
                "{what}: expected {expected}, got {}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// Correctly rounded sum of finite values (Shewchuk's exact partials with
/// half-even correction in the final rounding). The result depends only on
/// the multiset of inputs, not on their order.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut kept = 0;
        for k in 0..partials.len() {
            let mut y = partials[k];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    let Some(mut n) = partials.len().checked_sub(1) else {
        return 0.0;
    };
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// i.i.d. standard normal samples drawn from `rng`.
pub fn sample_gaussian<S>(rng: &mut RngStream, shape: S) -> Result<Tensor4>
where
    S: IntoShape,
{
    let shape = shape.into_shape()?;
    let data = (0..shape.numel()).map(|_| rng.standard_normal()).collect();
    Ok(Tensor4 { shape, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_sum_is_correctly_rounded() {
        assert_eq!(exact_sum([]), 0.0);
        assert_eq!(exact_sum([1e100, 1.0, -1e100]), 1.0);
        assert_eq!(exact_sum([0.1; 10]), 1.0);
        // half-way case that naive summation rounds the wrong way
        assert_eq!(exact_sum([1.0, 1e-16, 1e-16]), 1.0000000000000002);
        let v = [0.3, -2.7e-3, 1e8, 7.25, -1e8, 1e-9];
        let mut r = v;
        r.reverse();
        assert_eq!(exact_sum(v).to_bits(), exact_sum(r).to_bits());
    }

    #[test]
    fn full_fills_every_element() {
        let z = Tensor4::full((1, 1, 2, 2), 0.0).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let ones = Tensor4::full((2, 3, 4, 4), 1.0).unwrap();
        assert_eq!(ones.len(), 96);
        assert_eq!(ones.sum(), 96.0);
    }

    #[test]
    fn zero_dimension_is_rejected() {
        assert!(matches!(
            Tensor4::full((1, 0, 2, 2), 0.0),
            Err(Error::InvalidShape(_))
        ));
        assert!(matches!(
            Tensor4::from_vec((1, 1, 2, 2), vec![0.0; 3]),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn binary_ops() {
        let ones = Tensor4::full((1, 1, 2, 2), 1.0).unwrap();
        assert_eq!(ones.add(&ones).unwrap().data(), &[2.0; 4]);
        let x = Tensor4::from_vec((1, 1, 2, 2), vec![1.5, -2.0, 3.25, 7.0]).unwrap();
        assert_eq!(x.sub(&x).unwrap().data(), &[0.0; 4]);
        let y = Tensor4::full((1, 1, 2, 3), 1.0).unwrap();
        assert!(matches!(x.mul(&y), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn reduce_examples() {
        let x = Tensor4::from_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = x.reduce(Axes::SPATIAL, ReduceKind::Mean).unwrap();
        assert_eq!(m.shape(), Shape::new(1, 1, 1, 1).unwrap());
        assert_eq!(m.data(), &[2.5]);

        let ones = Tensor4::full((2, 3, 2, 2), 1.0).unwrap();
        let s = ones.reduce(Axes::all(), ReduceKind::Sum).unwrap();
        assert_eq!(s.data(), &[24.0]);

        let sevens = Tensor4::full((3, 2, 2, 2), 7.0).unwrap();
        let m = sevens.reduce(Axes::T, ReduceKind::Mean).unwrap();
        assert_eq!(m.shape(), Shape::new(1, 2, 2, 2).unwrap());
        assert!(m.data().iter().all(|&v| v == 7.0));

        assert!(matches!(
            x.reduce(Axes::empty(), ReduceKind::Sum),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn reduce_keeps_unreduced_axes_in_place() {
        // sum over C of a (1,2,1,3) tensor
        let x = Tensor4::from_vec((1, 2, 1, 3), vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]).unwrap();
        let s = x.reduce(Axes::C, ReduceKind::Sum).unwrap();
        assert_eq!(s.data(), &[11.0, 22.0, 33.0]);
        let s = x.reduce(Axes::H, ReduceKind::Sum).unwrap();
        assert_eq!(s.data(), &[6.0, 60.0]);
    }

    #[test]
    fn gaussian_samples() {
        let a = sample_gaussian(&mut RngStream::new(9), (1, 2, 3, 3)).unwrap();
        let b = sample_gaussian(&mut RngStream::new(9), (1, 2, 3, 3)).unwrap();
        assert_eq!(a, b);

        let z = sample_gaussian(&mut RngStream::new(42), (1, 1, 64, 64)).unwrap();
        let n = z.len() as f64;
        let mean = z.sum() / n;
        let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.1, "mean {mean}");
        assert!(var > 0.85 && var < 1.15, "var {var}");

        assert!(matches!(
            sample_gaussian(&mut RngStream::new(1), (1, 1, 0, 4)),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn channel_concat_and_split_are_inverse() {
        let a = Tensor4::from_vec((2, 1, 1, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor4::from_vec((2, 2, 1, 2), (10..18).map(f64::from).collect()).unwrap();
        let ab = Tensor4::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(
            ab.data(),
            &[1.0, 2.0, 10.0, 11.0, 12.0, 13.0, 3.0, 4.0, 14.0, 15.0, 16.0, 17.0]
        );
        let parts = ab.split_channels(&[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn stack_and_instance() {
        let a = Tensor4::full((1, 2, 2, 2), 1.0).unwrap();
        let b = Tensor4::full((1, 2, 2, 2), 2.0).unwrap();
        let ab = Tensor4::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(ab.shape().t, 2);
        assert_eq!(ab.instance(1).unwrap(), b);
        assert!(ab.instance(2).is_err());
    }
}
