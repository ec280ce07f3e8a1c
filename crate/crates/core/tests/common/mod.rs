#![allow(dead_code)]

use normkit::layers::PaddingMode;
use normkit::rng::RngStream;
use normkit::synth;
use normkit::tensor::{sample_gaussian, Shape, Tensor4};
use normkit::train::TrainData;

pub fn randn(seed: u64, t: usize, c: usize, w: usize, h: usize) -> Tensor4 {
    sample_gaussian(&mut RngStream::new(seed), (t, c, w, h)).unwrap()
}

pub fn bits(t: &Tensor4) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

pub fn same_bits(a: &Tensor4, b: &Tensor4) -> bool {
    a.shape() == b.shape() && bits(a) == bits(b)
}

/// Source index of padded position `i` along an axis of length `n`, or
/// `None` for a zero-padded position. Reflection does not repeat the edge.
fn source(i: isize, n: usize, mode: PaddingMode) -> Option<usize> {
    let n = n as isize;
    if (0..n).contains(&i) {
        return Some(i as usize);
    }
    match mode {
        PaddingMode::Zero => None,
        PaddingMode::Reflect => {
            let r = if i < 0 { -i } else { 2 * (n - 1) - i };
            Some(r as usize)
        }
    }
}

/// Direct cross-correlation with every index computed from scratch.
pub fn naive_conv(
    x: &Tensor4,
    w: &Tensor4,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    mode: PaddingMode,
) -> Tensor4 {
    let s = x.shape();
    let ws = w.shape();
    let k = ws.w;
    let ow = (s.w + 2 * pad - k) / stride + 1;
    let oh = (s.h + 2 * pad - k) / stride + 1;
    let mut y = Tensor4::zeros(Shape::new(s.t, ws.t, ow, oh).unwrap());
    for t in 0..s.t {
        for o in 0..ws.t {
            for i in 0..ow {
                for j in 0..oh {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for c in 0..s.c {
                        for p in 0..k {
                            for q in 0..k {
                                let xi = (i * stride + p) as isize - pad as isize;
                                let xj = (j * stride + q) as isize - pad as isize;
                                if let (Some(a), Some(b)) =
                                    (source(xi, s.w, mode), source(xj, s.h, mode))
                                {
                                    acc += w.get(o, c, p, q) * x.get(t, c, a, b);
                                }
                            }
                        }
                    }
                    y.set(t, o, i, j, acc);
                }
            }
        }
    }
    y
}

/// The pinned demo dataset: four 32×32 synthetic content images and a
/// 32×32 striped style image.
pub fn demo_data() -> TrainData {
    let contents = synth::content_images(4, 32, 0)
        .iter()
        .map(|i| i.to_tensor())
        .collect();
    TrainData::new(contents, synth::style_image(32).to_tensor()).unwrap()
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    normkit::gradcheck::relative_error(a, n)
}
