use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Border handling for [`conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output shrinks by `kernel - 1`.
    Valid,
    /// Zero padding preserving the spatial extent (odd kernels only).
    Same,
    /// Mirror padding without repeating the edge sample (odd kernels only).
    Reflect,
}

/// Precomputed geometry of one convolution: per-axis maps from padded
/// coordinates back to source coordinates.
#[derive(Clone, Debug)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
}

fn axis_map(extent: usize, k: usize, padding: Padding) -> Result<(Vec<Option<usize>>, usize)> {
    match padding {
        Padding::Valid => {
            if k > extent {
                return Err(Error::invalid(format!(
                    "kernel extent {k} larger than input extent {extent}"
                )));
            }
            Ok(((0..extent).map(Some).collect(), extent - k + 1))
        }
        Padding::Same | Padding::Reflect => {
            if k % 2 == 0 {
                return Err(Error::invalid(format!(
                    "padded convolution needs an odd kernel, got {k}"
                )));
            }
            let pad = k / 2;
            if padding == Padding::Reflect && pad >= extent {
                return Err(Error::invalid(format!(
                    "kernel extent {k} too large to reflect-pad extent {extent}"
                )));
            }
            let map = (0..extent + 2 * pad)
                .map(|p| {
                    let i = p as isize - pad as isize;
                    let n = extent as isize;
                    if (0..n).contains(&i) {
                        Some(i as usize)
                    } else if padding == Padding::Same {
                        None
                    } else if i < 0 {
                        Some((-i) as usize)
                    } else {
                        Some((2 * (n - 1) - i) as usize)
                    }
                })
                .collect();
            Ok((map, extent))
        }
    }
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], padding: Padding) -> Result<Self> {
        let (&[c, h, w], &[o, kc, kh, kw]) = (input, kernel) else {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: input.iter().chain(kernel).copied().collect(),
                reason: "expected input [c,h,w] and kernel [o,c,kh,kw]".into(),
            });
        };
        if c != kc {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        }
        if h == 0 || w == 0 || kh == 0 || kw == 0 {
            return Err(Error::Empty { op: "conv2d" });
        }
        let (rows, out_h) = axis_map(h, kh, padding)?;
        let (cols, out_w) = axis_map(w, kw, padding)?;
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            out_channels: o,
            kh,
            kw,
            out_h,
            out_w,
            rows,
            cols,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds the input into a `[c*kh*kw, out_h*out_w]` patch matrix.
    pub fn im2col<T: Element>(&self, input: &[T]) -> Vec<T> {
        let n = self.out_len();
        let mut col = vec![T::zero(); self.patch_len() * n];
        for ci in 0..self.channels {
            let plane = &input[ci * self.height * self.width..][..self.height * self.width];
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let r = (ci * self.kh + dy) * self.kw + dx;
                    let dst = &mut col[r * n..(r + 1) * n];
                    for oy in 0..self.out_h {
                        let Some(sy) = self.rows[oy + dy] else { continue };
                        let src_row = &plane[sy * self.width..(sy + 1) * self.width];
                        let dst_row = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            if let Some(sx) = self.cols[ox + dx] {
                                *d = src_row[sx];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters patch gradients back
    /// onto the input, summing contributions of mirrored samples.
    pub fn col2im<T: Element>(&self, col: &[T]) -> Vec<T> {
        let n = self.out_len();
        let mut out = vec![T::zero(); self.channels * self.height * self.width];
        for ci in 0..self.channels {
            let plane = &mut out[ci * self.height * self.width..][..self.height * self.width];
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let r = (ci * self.kh + dy) * self.kw + dx;
                    let src = &col[r * n..(r + 1) * n];
                    for oy in 0..self.out_h {
                        let Some(sy) = self.rows[oy + dy] else { continue };
                        for ox in 0..self.out_w {
                            if let Some(sx) = self.cols[ox + dx] {
                                plane[sy * self.width + sx] =
                                    plane[sy * self.width + sx] + src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward<T: Element>(&self, input: &[T], kernel: &[T]) -> (Vec<T>, Vec<T>) {
        let col = self.im2col(input);
        let (p, n) = (self.patch_len(), self.out_len());
        let mut out = vec![T::zero(); self.out_channels * n];
        T::gemm(
            self.out_channels,
            p,
            n,
            kernel,
            (p as isize, 1),
            &col,
            (n as isize, 1),
            T::zero(),
            &mut out,
        );
        (out, col)
    }
}

/// Untracked cross-correlation of `input [c,h,w]` with `kernel [o,c,kh,kw]`.
pub fn conv2d<T: Element>(input: &Tensor<T>, kernel: &Tensor<T>, padding: Padding) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(input.shape(), kernel.shape(), padding)?;
    let (out, _) = geo.forward(input.data(), kernel.data());
    Tensor::new([geo.out_channels, geo.out_h, geo.out_w], out)
}
