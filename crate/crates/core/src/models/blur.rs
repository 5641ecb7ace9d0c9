use crate::error::{Error, Result};
use crate::image::image_dims;
use crate::tensor::{Element, Tensor};

/// Normalized 1-D Gaussian weights with radius `ceil(3σ)`.
pub fn gaussian_kernel_1d(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("blur sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

fn reflect(i: isize, n: isize) -> usize {
    let mut i = i;
    // repeated mirroring for kernels wider than the image
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
        if n == 1 {
            return 0;
        }
    }
}

/// Separable Gaussian blur of a `[c, h, w]` image with `σ` in pixels and
/// reflect padding. Untracked: the result is a constant of any optimization.
pub fn gaussian_blur_px<T: Element>(image: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    let (c, h, w) = image_dims(image)?;
    let k = gaussian_kernel_1d(sigma)?;
    let r = (k.len() / 2) as isize;
    let src = image.data();
    let mut tmp = vec![0.0f64; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..][..w];
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &kw) in k.iter().enumerate() {
                    acc += kw * row[reflect(x as isize + j as isize - r, w as isize)].f64();
                }
                tmp[(ch * h + y) * w + x] = acc;
            }
        }
    }
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &kw) in k.iter().enumerate() {
                    let sy = reflect(y as isize + j as isize - r, h as isize);
                    acc += kw * tmp[(ch * h + sy) * w + x];
                }
                out[(ch * h + y) * w + x] = T::of(acc.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Blur with `σ = sigma_fraction × min(h, w)`.
pub fn gaussian_blur<T: Element>(image: &Tensor<T>, sigma_fraction: f64) -> Result<Tensor<T>> {
    let (_, h, w) = image_dims(image)?;
    if !(sigma_fraction > 0.0) {
        return Err(Error::invalid(format!("blur sigma fraction must be positive, got {sigma_fraction}")));
    }
    gaussian_blur_px(image, sigma_fraction * h.min(w) as f64)
}
