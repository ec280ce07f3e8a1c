//! Contrast, batch and instance normalization.
//!
//! For an input `x` of shape `T × C × W × H`:
//!
//! * contrast normalization divides each `(t, i)` plane by its spatial sum,
//!   `y_tijk = x_tijk / Σ_lm x_tilm`;
//! * batch normalization standardizes each channel `i` with the mean and
//!   biased variance taken jointly over `T`, `W` and `H`;
//! * instance normalization standardizes each `(t, i)` plane with its own
//!   spatial mean and biased variance.
//!
//! Instance normalization has no train/eval distinction. Batch normalization
//! uses batch statistics while training and frozen running averages when
//! evaluating.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor4};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;
/// Planes whose spatial sum is at most this in magnitude are rejected by
/// [`contrast_norm`].
pub const DEGENERATE_SUM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Statistics of one normalization call. For instance norm the vectors are
/// indexed by `t * C + i`, for batch norm by channel `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

/// Exponential moving averages of batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub count: u64,
}

impl RunningStats {
    pub fn new(channels: usize) -> RunningStats {
        RunningStats::with_momentum(channels, DEFAULT_MOMENTUM)
    }

    pub fn with_momentum(channels: usize, momentum: f64) -> RunningStats {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum,
            count: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn is_calibrated(&self) -> bool {
        self.count > 0
    }

    /// `r ← (1 − momentum)·r + momentum·batch`.
    pub fn update(&mut self, batch: &NormStats) -> Result<()> {
        if batch.mean.len() != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "running stats track {} channels, batch has {}",
                self.channels(),
                batch.mean.len()
            )));
        }
        let m = self.momentum;
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - m) * *r + m * b;
        }
        self.count += 1;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum CacheKind {
    Instance,
    BatchTrain,
    BatchEval,
}

/// What a normalization backward needs from its forward.
#[derive(Clone, Debug)]
pub struct NormCache {
    kind: CacheKind,
    normalized: Tensor4,
    stats: NormStats,
}

impl NormCache {
    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    /// The standardized tensor `(x − μ) / sqrt(σ² + ε)`.
    pub fn normalized(&self) -> &Tensor4 {
        &self.normalized
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps must be > 0, got {eps}"
        )));
    }
    Ok(())
}

/// Divides every `(t, i)` plane by its spatial sum. No mean subtraction and
/// no epsilon.
pub fn contrast_norm(x: &Tensor4) -> Result<Tensor4> {
    let s = x.shape();
    let mut y = x.clone();
    for t in 0..s.t {
        for i in 0..s.c {
            let sum: f64 = x.plane(t, i).iter().sum();
            if sum.abs() <= DEGENERATE_SUM {
                return Err(Error::DegenerateInput { t, i, sum });
            }
            for v in y.plane_mut(t, i) {
                *v /= sum;
            }
        }
    }
    Ok(y)
}

/// Standardizes every `(t, i)` plane over its spatial extent. Behaves the
/// same in training and evaluation.
pub fn instance_norm_forward(x: &Tensor4, eps: f64) -> Result<(Tensor4, NormCache)> {
    check_eps(eps)?;
    let s = x.shape();
    let n = s.plane() as f64;
    let groups = s.t * s.c;
    let mut mean = Vec::with_capacity(groups);
    let mut var = Vec::with_capacity(groups);
    let mut y = Tensor4::zeros(s);
    for t in 0..s.t {
        for i in 0..s.c {
            let plane = x.plane(t, i);
            let mu = plane.iter().sum::<f64>() / n;
            let v = plane.iter().map(|&a| (a - mu) * (a - mu)).sum::<f64>() / n;
            let inv_std = 1.0 / (v + eps).sqrt();
            for (dst, &a) in y.plane_mut(t, i).iter_mut().zip(plane) {
                *dst = (a - mu) * inv_std;
            }
            mean.push(mu);
            var.push(v);
        }
    }
    let cache = NormCache {
        kind: CacheKind::Instance,
        normalized: y.clone(),
        stats: NormStats { mean, var, eps },
    };
    Ok((y, cache))
}

/// Batch statistics over `(T, W, H)` per channel.
fn batch_stats(x: &Tensor4, eps: f64) -> NormStats {
    let s = x.shape();
    let n = (s.t * s.plane()) as f64;
    let mut mean = Vec::with_capacity(s.c);
    let mut var = Vec::with_capacity(s.c);
    for i in 0..s.c {
        let mu = (0..s.t).flat_map(|t| x.plane(t, i)).sum::<f64>() / n;
        let v = (0..s.t)
            .flat_map(|t| x.plane(t, i))
            .map(|&a| (a - mu) * (a - mu))
            .sum::<f64>()
            / n;
        mean.push(mu);
        var.push(v);
    }
    NormStats { mean, var, eps }
}

fn standardize_channels(x: &Tensor4, mean: &[f64], var: &[f64], eps: f64) -> Tensor4 {
    let s = x.shape();
    let mut y = Tensor4::zeros(s);
    for t in 0..s.t {
        for i in 0..s.c {
            let inv_std = 1.0 / (var[i] + eps).sqrt();
            let mu = mean[i];
            for (dst, &a) in y.plane_mut(t, i).iter_mut().zip(x.plane(t, i)) {
                *dst = (a - mu) * inv_std;
            }
        }
    }
    y
}

/// Training-mode batch norm without touching any running statistics.
pub fn batch_norm_train(x: &Tensor4, eps: f64) -> Result<(Tensor4, NormCache)> {
    check_eps(eps)?;
    let stats = batch_stats(x, eps);
    let y = standardize_channels(x, &stats.mean, &stats.var, eps);
    let cache = NormCache {
        kind: CacheKind::BatchTrain,
        normalized: y.clone(),
        stats,
    };
    Ok((y, cache))
}

/// Evaluation-mode batch norm with frozen running statistics.
pub fn batch_norm_eval(
    x: &Tensor4,
    eps: f64,
    running: &RunningStats,
) -> Result<(Tensor4, NormCache)> {
    check_eps(eps)?;
    if !running.is_calibrated() {
        return Err(Error::NotCalibrated("batch_norm".into()));
    }
    if running.channels() != x.shape().c {
        return Err(Error::ShapeMismatch(format!(
            "running stats track {} channels, input has {}",
            running.channels(),
            x.shape().c
        )));
    }
    let y = standardize_channels(x, &running.mean, &running.var, eps);
    let cache = NormCache {
        kind: CacheKind::BatchEval,
        normalized: y.clone(),
        stats: NormStats {
            mean: running.mean.clone(),
            var: running.var.clone(),
            eps,
        },
    };
    Ok((y, cache))
}

/// Batch norm. In [`Mode::Train`] the batch statistics normalize `x` and are
/// folded into `running`; in [`Mode::Eval`] `running` is used as-is.
pub fn batch_norm_forward(
    x: &Tensor4,
    eps: f64,
    mode: Mode,
    running: &mut RunningStats,
) -> Result<(Tensor4, NormCache)> {
    match mode {
        Mode::Train => {
            let (y, cache) = batch_norm_train(x, eps)?;
            running.update(&cache.stats)?;
            Ok((y, cache))
        }
        Mode::Eval => batch_norm_eval(x, eps, running),
    }
}

/// `dx = (g − mean(g) − x̂·mean(g·x̂)) / sqrt(σ² + ε)` over one group.
fn group_backward(
    grad: &[&[f64]],
    normalized: &[&[f64]],
    var: f64,
    eps: f64,
    out: &mut [&mut [f64]],
) {
    let n: usize = grad.iter().map(|p| p.len()).sum();
    let n = n as f64;
    let mut g_sum = 0.0;
    let mut gx_sum = 0.0;
    for (g, xh) in grad.iter().zip(normalized) {
        for (a, b) in g.iter().zip(xh.iter()) {
            g_sum += a;
            gx_sum += a * b;
        }
    }
    let g_mean = g_sum / n;
    let gx_mean = gx_sum / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    for ((g, xh), dst) in grad.iter().zip(normalized).zip(out.iter_mut()) {
        for ((d, a), b) in dst.iter_mut().zip(g.iter()).zip(xh.iter()) {
            *d = inv_std * (a - g_mean - b * gx_mean);
        }
    }
}

fn check_cache_shape(grad_out: &Tensor4, cache: &NormCache, what: &str) -> Result<Shape> {
    grad_out.expect_shape(cache.normalized.shape(), what)?;
    Ok(grad_out.shape())
}

pub fn instance_norm_backward(grad_out: &Tensor4, cache: &NormCache) -> Result<Tensor4> {
    if cache.kind != CacheKind::Instance {
        return Err(Error::MissingForward(
            "instance_norm_backward needs an instance-norm cache".into(),
        ));
    }
    let s = check_cache_shape(grad_out, cache, "instance_norm_backward")?;
    let mut dx = Tensor4::zeros(s);
    for t in 0..s.t {
        for i in 0..s.c {
            let k = t * s.c + i;
            group_backward(
                &[grad_out.plane(t, i)],
                &[cache.normalized.plane(t, i)],
                cache.stats.var[k],
                cache.stats.eps,
                &mut [dx.plane_mut(t, i)],
            );
        }
    }
    Ok(dx)
}

/// Gradient of batch norm. Train-mode caches differentiate through the batch
/// statistics; eval-mode caches treat the running statistics as constants.
pub fn batch_norm_backward(grad_out: &Tensor4, cache: &NormCache) -> Result<Tensor4> {
    let s = check_cache_shape(grad_out, cache, "batch_norm_backward")?;
    match cache.kind {
        CacheKind::Instance => Err(Error::MissingForward(
            "batch_norm_backward needs a batch-norm cache".into(),
        )),
        CacheKind::BatchEval => {
            let mut dx = grad_out.clone();
            for t in 0..s.t {
                for i in 0..s.c {
                    let inv_std = 1.0 / (cache.stats.var[i] + cache.stats.eps).sqrt();
                    for v in dx.plane_mut(t, i) {
                        *v *= inv_std;
                    }
                }
            }
            Ok(dx)
        }
        CacheKind::BatchTrain => {
            let mut dx = Tensor4::zeros(s);
            let plane = s.plane();
            for i in 0..s.c {
                let grads: Vec<&[f64]> = (0..s.t).map(|t| grad_out.plane(t, i)).collect();
                let xh: Vec<&[f64]> = (0..s.t).map(|t| cache.normalized.plane(t, i)).collect();
                // channel i is strided across the batch; collect disjoint planes
                let mut outs: Vec<&mut [f64]> = dx
                    .data_mut()
                    .chunks_mut(plane)
                    .enumerate()
                    .filter(|(k, _)| k % s.c == i)
                    .map(|(_, p)| p)
                    .collect();
                group_backward(&grads, &xh, cache.stats.var[i], cache.stats.eps, &mut outs);
            }
            Ok(dx)
        }
    }
}

/// Optional learnable per-channel scale and shift applied after
/// normalization: `y = γ·x̂ + β`.
pub fn affine_forward(x: &Tensor4, gamma: &[f64], beta: &[f64]) -> Result<Tensor4> {
    let s = x.shape();
    if gamma.len() != s.c || beta.len() != s.c {
        return Err(Error::ShapeMismatch(format!(
            "affine parameters have {}/{} entries for {} channels",
            gamma.len(),
            beta.len(),
            s.c
        )));
    }
    let mut y = x.clone();
    for t in 0..s.t {
        for i in 0..s.c {
            for v in y.plane_mut(t, i) {
                *v = gamma[i] * *v + beta[i];
            }
        }
    }
    Ok(y)
}

pub struct AffineGrads {
    pub input: Tensor4,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn affine_backward(grad_out: &Tensor4, x: &Tensor4, gamma: &[f64]) -> Result<AffineGrads> {
    grad_out.expect_shape(x.shape(), "affine_backward")?;
    let s = x.shape();
    if gamma.len() != s.c {
        return Err(Error::ShapeMismatch(format!(
            "gamma has {} entries for {} channels",
            gamma.len(),
            s.c
        )));
    }
    let mut dx = grad_out.clone();
    let mut dgamma = vec![0.0; s.c];
    let mut dbeta = vec![0.0; s.c];
    for t in 0..s.t {
        for i in 0..s.c {
            for (g, xv) in grad_out.plane(t, i).iter().zip(x.plane(t, i)) {
                dgamma[i] += g * xv;
                dbeta[i] += g;
            }
            for v in dx.plane_mut(t, i) {
                *v *= gamma[i];
            }
        }
    }
    Ok(AffineGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
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
    fn contrast_norm_examples() {
        let ones = Tensor4::full((1, 1, 2, 2), 1.0).unwrap();
        assert_eq!(contrast_norm(&ones).unwrap().data(), &[0.25; 4]);

        let x = Tensor4::from_vec((1, 1, 2, 1), vec![1.0, 3.0]).unwrap();
        assert_eq!(contrast_norm(&x).unwrap().data(), &[0.25, 0.75]);

        let mut z = Tensor4::full((2, 2, 2, 2), 1.0).unwrap();
        z.plane_mut(1, 0).fill(0.0);
        match contrast_norm(&z) {
            Err(Error::DegenerateInput { t, i, .. }) => assert_eq!((t, i), (1, 0)),
            other => panic!("expected DegenerateInput, got {other:?}"),
        }
    }

    #[test]
    fn instance_norm_hand_values() {
        let x = Tensor4::from_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // eps must be positive; 1e-300 is zero to working precision here
        let (y, cache) = instance_norm_forward(&x, 1e-300).unwrap();
        assert_eq!(cache.stats().mean, vec![2.5]);
        assert_eq!(cache.stats().var, vec![1.25]);
        let expected = [-1.341641, -0.447214, 0.447214, 1.341641];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!(matches!(
            instance_norm_forward(&x, 0.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        // 7.0 sums exactly; 3.7 leaves a rounding residue in the mean
        let exact = Tensor4::full((2, 3, 4, 4), 7.0).unwrap();
        let inexact = Tensor4::full((2, 3, 4, 4), 3.7).unwrap();
        for eps in [1e-5, 1e-2, 1.0] {
            let (y, _) = instance_norm_forward(&exact, eps).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0));
            let (y, _) = instance_norm_forward(&inexact, eps).unwrap();
            assert!(y.data().iter().all(|&v| v.abs() < 1e-12));
        }
        let (y, _) = batch_norm_train(&exact, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_is_scale_invariant() {
        let x = randn(11, (2, 3, 5, 5));
        let (a, _) = instance_norm_forward(&x, DEFAULT_EPS).unwrap();
        let (b, _) = instance_norm_forward(&x.scale(1000.0), DEFAULT_EPS).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-3);
    }

    #[test]
    fn batch_norm_two_constant_planes() {
        let mut x = Tensor4::zeros(Shape::new(2, 1, 3, 3).unwrap());
        x.plane_mut(1, 0).fill(2.0);
        let mut rs = RunningStats::new(1);
        let (y, cache) = batch_norm_forward(&x, 1e-5, Mode::Train, &mut rs).unwrap();
        assert_eq!(cache.stats().mean, vec![1.0]);
        assert_eq!(cache.stats().var, vec![1.0]);
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((expected - 0.999995).abs() < 1e-6);
        assert!(y.plane(0, 0).iter().all(|&v| v == -expected));
        assert!(y.plane(1, 0).iter().all(|&v| v == expected));
        // running = 0.9 * init + 0.1 * batch
        assert!((rs.mean[0] - 0.1).abs() < 1e-15);
        assert!((rs.var[0] - 1.0).abs() < 1e-15);
        assert_eq!(rs.count, 1);
    }

    #[test]
    fn batch_norm_at_t1_matches_instance_norm() {
        let x = randn(12, (1, 4, 6, 5));
        let (a, _) = instance_norm_forward(&x, DEFAULT_EPS).unwrap();
        let (b, _) = batch_norm_train(&x, DEFAULT_EPS).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn eval_requires_calibration() {
        let x = randn(13, (2, 2, 3, 3));
        let mut rs = RunningStats::new(2);
        assert!(matches!(
            batch_norm_forward(&x, DEFAULT_EPS, Mode::Eval, &mut rs),
            Err(Error::NotCalibrated(_))
        ));
        batch_norm_forward(&x, DEFAULT_EPS, Mode::Train, &mut rs).unwrap();
        let before = rs.clone();
        let (y, _) = batch_norm_forward(&x, DEFAULT_EPS, Mode::Eval, &mut rs).unwrap();
        assert_eq!(rs, before);
        let expect = (x.get(1, 1, 2, 0) - rs.mean[1]) / (rs.var[1] + DEFAULT_EPS).sqrt();
        assert_eq!(y.get(1, 1, 2, 0), expect);
    }

    #[test]
    fn zero_grad_gives_zero_input_grad() {
        let x = randn(14, (2, 2, 3, 3));
        let (y, ci) = instance_norm_forward(&x, DEFAULT_EPS).unwrap();
        let (_, cb) = batch_norm_train(&x, DEFAULT_EPS).unwrap();
        let zero = Tensor4::zeros(y.shape());
        assert!(instance_norm_backward(&zero, &ci)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(batch_norm_backward(&zero, &cb)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_grad_planes_sum_to_zero() {
        let x = randn(15, (2, 3, 4, 4));
        let g = randn(16, (2, 3, 4, 4));
        let (_, cache) = instance_norm_forward(&x, DEFAULT_EPS).unwrap();
        let dx = instance_norm_backward(&g, &cache).unwrap();
        for t in 0..2 {
            for i in 0..3 {
                let s: f64 = dx.plane(t, i).iter().sum();
                assert!(s.abs() < 1e-10, "plane ({t},{i}) sums to {s}");
            }
        }
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let x = randn(17, (1, 2, 3, 3));
        let (_, ci) = instance_norm_forward(&x, DEFAULT_EPS).unwrap();
        let (_, cb) = batch_norm_train(&x, DEFAULT_EPS).unwrap();
        let g = randn(18, (1, 2, 3, 3));
        assert!(matches!(
            batch_norm_backward(&g, &ci),
            Err(Error::MissingForward(_))
        ));
        assert!(matches!(
            instance_norm_backward(&g, &cb),
            Err(Error::MissingForward(_))
        ));
    }

    #[test]
    fn affine_identity_at_init() {
        let x = randn(19, (2, 3, 2, 2));
        let y = affine_forward(&x, &[1.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(y, x);
    }
}
