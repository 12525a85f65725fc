//! Image utilities on `[1, H, W]` tensors: bilinear resizing, seeded
//! corruption (dark regions, Gaussian blur, additive noise) and synthetic
//! datasets.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

fn dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [1, h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
        s => Err(Error::Input(format!("expected a [1, H, W] image, got {s:?}"))),
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = dims(image)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Input("resize target must be non-empty".into()));
    }
    let src = image.data();
    let axis = |o: usize, n_in: usize, n_out: usize| {
        let pos = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = libm::floor(pos) as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, pos - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, h, out_h);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new(&[1, out_h, out_w], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionConfig {
    pub seed: u64,
    pub dark_regions: bool,
    pub blur: bool,
    pub noise: bool,
    /// Inclusive range of dark rectangles per image.
    pub dark_count: (usize, usize),
    /// Rectangle side as a fraction of the image side, per dimension.
    pub dark_size: (f64, f64),
    /// Gaussian blur standard deviation in pixels.
    pub blur_sigma: (f64, f64),
    /// Additive noise standard deviation.
    pub noise_std: (f64, f64),
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            seed: 0,
            dark_regions: true,
            blur: true,
            noise: true,
            dark_count: (1, 3),
            dark_size: (0.1, 0.3),
            blur_sigma: (1.0, 3.0),
            noise_std: (0.05, 0.15),
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        fn range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
            if lo >= 0.0 && lo <= hi && hi.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{name} range must be non-negative and ordered, got {lo}..{hi}"
                )))
            }
        }
        if !(self.dark_regions || self.blur || self.noise) {
            return Err(Error::Config("at least one corruption must be enabled".into()));
        }
        if self.dark_count.0 > self.dark_count.1 {
            return Err(Error::Config(format!(
                "dark-region count range {:?} is reversed",
                self.dark_count
            )));
        }
        range("dark size", self.dark_size)?;
        if self.dark_size.1 > 1.0 {
            return Err(Error::Config("dark-region size fraction cannot exceed 1".into()));
        }
        range("blur sigma", self.blur_sigma)?;
        range("noise std", self.noise_std)
    }
}

/// Normalised 1-D Gaussian kernel of radius `ceil(3σ)`; `[1.0]` for `σ = 0`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = libm::ceil(3.0 * sigma) as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let (h, w) = dims(image)?;
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src = image.data();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * src[y * w + clamp(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[clamp(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    Tensor::new(&[1, h, w], out)
}

/// Applies the enabled corruptions in the fixed order dark regions, blur,
/// noise, then clamps to `[0, 1]`. Output depends only on the image,
/// `config` and `image_seed`.
pub fn corrupt(image: &Tensor, config: &CorruptionConfig, image_seed: u64) -> Result<Tensor> {
    config.validate()?;
    let (h, w) = dims(image)?;
    let mut r = rng::seeded(rng::derive_seed(config.seed, image_seed));
    let mut out = image.clone();

    if config.dark_regions {
        let count = r.random_range(config.dark_count.0..=config.dark_count.1);
        for _ in 0..count {
            let rh = side(rng::uniform(&mut r, config.dark_size.0, config.dark_size.1), h);
            let rw = side(rng::uniform(&mut r, config.dark_size.0, config.dark_size.1), w);
            let top = r.random_range(0..=h - rh);
            let left = r.random_range(0..=w - rw);
            let data = out.data_mut();
            for y in top..top + rh {
                data[y * w + left..y * w + left + rw].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    if config.blur {
        let sigma = rng::uniform(&mut r, config.blur_sigma.0, config.blur_sigma.1);
        out = gaussian_blur(&out, sigma)?;
    }
    if config.noise {
        let std = rng::uniform(&mut r, config.noise_std.0, config.noise_std.1);
        for v in out.data_mut() {
            *v += std * rng::normal(&mut r);
        }
    }
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

fn side(fraction: f64, n: usize) -> usize {
    (libm::round(fraction * n as f64) as usize).clamp(1, n)
}

/// Class-dependent Gaussian blobs on a speckled background. Class `c` has a
/// blob radius growing linearly with `c`, so mean brightness separates the
/// classes. Samples are interleaved by class (`label = i % num_classes`).
pub fn make_synthetic(num_classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if num_classes == 0 || per_class == 0 || size < 4 {
        return Err(Error::Input(
            "synthetic set needs classes, samples and size >= 4".into(),
        ));
    }
    let mut r = rng::seeded(seed);
    let n = size as f64;
    let mut out = Vec::with_capacity(num_classes * per_class);
    for i in 0..num_classes * per_class {
        let label = i % num_classes;
        let radius = n * (0.10 + 0.20 * label as f64 / (num_classes.max(2) - 1) as f64);
        let cy = n / 2.0 + rng::uniform(&mut r, -0.08, 0.08) * n;
        let cx = n / 2.0 + rng::uniform(&mut r, -0.08, 0.08) * n;
        let amp = rng::uniform(&mut r, 0.75, 0.85);
        let mut data = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let blob = amp * libm::exp(-(dy * dy + dx * dx) / (2.0 * radius * radius));
                let v = 0.1 + blob + 0.03 * rng::normal(&mut r);
                data.push(v.clamp(0.0, 1.0));
            }
        }
        out.push(Sample {
            id: format!("synthetic_{i:05}"),
            image: Tensor::new(&[1, size, size], data)?,
            label,
        });
    }
    Ok(out)
}

/// Images of i.i.d. uniform `[0, 1]` pixels (far-OOD probe set).
pub fn uniform_noise(count: usize, size: usize, seed: u64) -> Vec<Tensor> {
    let mut r = rng::seeded(seed);
    (0..count)
        .map(|_| {
            let data = (0..size * size).map(|_| r.random::<f64>()).collect();
            Tensor::new(&[1, size, size], data).expect("square image")
        })
        .collect()
}
