//! Small deterministic images for demos and tests.

use crate::io::ImageRgb;
use crate::rng::RngStream;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn render(width: usize, height: usize, f: impl Fn(f64, f64) -> [f64; 3]) -> ImageRgb {
    let mut pixels = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64;
            let v = (y as f64 + 0.5) / height as f64;
            pixels.extend(f(u, v).map(to_byte));
        }
    }
    ImageRgb::new(width, height, pixels).expect("sized buffer")
}

fn color(rng: &mut RngStream) -> [f64; 3] {
    [rng.uniform(), rng.uniform(), rng.uniform()]
}

fn mix(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] * (1.0 - s) + b[c] * s)
}

/// Content image `index` of a seeded family: a two-color gradient with a
/// disc and a rectangle on top. Images differ in layout and palette.
pub fn content_image(size: usize, seed: u64, index: u64) -> ImageRgb {
    let mut rng = RngStream::new(seed).fork(index);
    let (bg0, bg1, disc, rect) = (
        color(&mut rng),
        color(&mut rng),
        color(&mut rng),
        color(&mut rng),
    );
    let angle = rng.uniform() * std::f64::consts::TAU;
    let (dx, dy) = (angle.cos(), angle.sin());
    let (cx, cy, r) = (
        0.2 + 0.6 * rng.uniform(),
        0.2 + 0.6 * rng.uniform(),
        0.1 + 0.2 * rng.uniform(),
    );
    let (rx0, ry0) = (0.6 * rng.uniform(), 0.6 * rng.uniform());
    let (rx1, ry1) = (
        rx0 + 0.15 + 0.25 * rng.uniform(),
        ry0 + 0.15 + 0.25 * rng.uniform(),
    );
    render(size, size, |u, v| {
        if (u - cx).powi(2) + (v - cy).powi(2) < r * r {
            disc
        } else if (rx0..rx1).contains(&u) && (ry0..ry1).contains(&v) {
            rect
        } else {
            let s = 0.5 + 0.5 * ((u - 0.5) * dx + (v - 0.5) * dy) / std::f64::consts::FRAC_1_SQRT_2;
            mix(bg0, bg1, s)
        }
    })
}

pub fn content_images(count: usize, size: usize, seed: u64) -> Vec<ImageRgb> {
    (0..count as u64)
        .map(|i| content_image(size, seed, i))
        .collect()
}

/// Diagonal color stripes with a fine checker overlay, a texture with
/// strong oriented second-order statistics.
pub fn style_image(size: usize) -> ImageRgb {
    let palette = [[0.9, 0.75, 0.1], [0.1, 0.2, 0.6], [0.8, 0.2, 0.3]];
    render(size, size, |u, v| {
        let band = ((u + v) * 6.0).floor() as usize % palette.len();
        let checker =
            ((u * size as f64 / 2.0).floor() as i64 + (v * size as f64 / 2.0).floor() as i64) % 2;
        let base = palette[band];
        if checker == 0 {
            base
        } else {
            base.map(|c| c * 0.7)
        }
    })
}
