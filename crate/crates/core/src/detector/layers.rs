//! Stateless layer kernels with explicit backward passes. Parameters are
//! passed as flat slices; callers keep whatever activations the backward
//! pass needs.

use super::tensor::FeatureMap;

/// Geometry of a square 2-D convolution. Weights are laid out as
/// `[out, in, k, k]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    /// Output indices `lo..hi` whose input tap `o * stride + k - pad` lands in `0..n`.
    #[inline]
    fn valid_range(&self, k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let k = k as isize;
        let lo = ((p - k).max(0) + s - 1) / s;
        let hi = ((n_in as isize - 1 + p - k).div_euclid(s) + 1).clamp(0, n_out as isize);
        (lo as usize, (hi as usize).max(lo as usize))
    }
}

pub fn conv2d_forward(x: &FeatureMap, shape: &ConvShape, weight: &[f64], bias: &[f64]) -> FeatureMap {
    debug_assert_eq!(x.channels, shape.in_channels);
    let (ho, wo) = (shape.out_size(x.height), shape.out_size(x.width));
    let k = shape.kernel;
    let mut out = FeatureMap::zeros(shape.out_channels, ho, wo);
    for oc in 0..shape.out_channels {
        let out_plane = out.channel_mut(oc);
        out_plane.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..shape.in_channels {
            let in_plane = x.channel(ic);
            for ky in 0..k {
                let (oy_lo, oy_hi) = shape.valid_range(ky, x.height, ho);
                for kx in 0..k {
                    let w = weight[((oc * shape.in_channels + ic) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = shape.valid_range(kx, x.width, wo);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * shape.stride + ky - shape.pad;
                        let in_row = &in_plane[iy * x.width..(iy + 1) * x.width];
                        let out_row = &mut out_plane[oy * wo..(oy + 1) * wo];
                        for ox in ox_lo..ox_hi {
                            out_row[ox] += w * in_row[ox * shape.stride + kx - shape.pad];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients and returns the input gradient.
pub fn conv2d_backward(
    x: &FeatureMap,
    shape: &ConvShape,
    weight: &[f64],
    grad_out: &FeatureMap,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    need_input_grad: bool,
) -> Option<FeatureMap> {
    let (ho, wo) = (grad_out.height, grad_out.width);
    let k = shape.kernel;
    let mut grad_in = need_input_grad.then(|| FeatureMap::zeros_like(x));
    for oc in 0..shape.out_channels {
        let g_plane = grad_out.channel(oc);
        grad_bias[oc] += g_plane.iter().sum::<f64>();
        for ic in 0..shape.in_channels {
            let in_plane = x.channel(ic);
            for ky in 0..k {
                let (oy_lo, oy_hi) = shape.valid_range(ky, x.height, ho);
                for kx in 0..k {
                    let widx = ((oc * shape.in_channels + ic) * k + ky) * k + kx;
                    let w = weight[widx];
                    let (ox_lo, ox_hi) = shape.valid_range(kx, x.width, wo);
                    let mut gw = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * shape.stride + ky - shape.pad;
                        let in_row = &in_plane[iy * x.width..(iy + 1) * x.width];
                        let g_row = &g_plane[oy * wo..(oy + 1) * wo];
                        for ox in ox_lo..ox_hi {
                            gw += g_row[ox] * in_row[ox * shape.stride + kx - shape.pad];
                        }
                        if let Some(gi) = grad_in.as_mut() {
                            let gi_row = &mut gi.channel_mut(ic)[iy * x.width..(iy + 1) * x.width];
                            for ox in ox_lo..ox_hi {
                                gi_row[ox * shape.stride + kx - shape.pad] += w * g_row[ox];
                            }
                        }
                    }
                    grad_weight[widx] += gw;
                }
            }
        }
    }
    grad_in
}

pub fn relu_inplace(x: &mut FeatureMap) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `grad` by the positive entries of the ReLU output `y`.
pub fn relu_backward_inplace(y: &[f64], grad: &mut [f64]) {
    for (g, &v) in grad.iter_mut().zip(y) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Nearest-neighbour 2x upsampling cropped to `height x width`.
pub fn upsample2x(x: &FeatureMap, height: usize, width: usize) -> FeatureMap {
    let mut out = FeatureMap::zeros(x.channels, height, width);
    for c in 0..x.channels {
        for y in 0..height {
            let sy = (y / 2).min(x.height - 1);
            for xx in 0..width {
                let sx = (xx / 2).min(x.width - 1);
                out.data[(c * height + y) * width + xx] = x.at(c, sy, sx);
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`].
pub fn upsample2x_backward(grad: &FeatureMap, height: usize, width: usize) -> FeatureMap {
    let mut out = FeatureMap::zeros(grad.channels, height, width);
    for c in 0..grad.channels {
        for y in 0..grad.height {
            let sy = (y / 2).min(height - 1);
            for x in 0..grad.width {
                let sx = (x / 2).min(width - 1);
                out.data[(c * height + sy) * width + sx] += grad.at(c, y, x);
            }
        }
    }
    out
}

/// `y = W x + b` with `W` laid out `[out, in]`.
pub fn linear_forward(x: &[f64], weight: &[f64], bias: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = x.len();
    (0..out_dim)
        .map(|o| {
            let row = &weight[o * in_dim..(o + 1) * in_dim];
            bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        })
        .collect()
}

pub fn linear_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) -> Vec<f64> {
    let in_dim = x.len();
    let mut grad_in = vec![0.0; in_dim];
    for (o, &g) in grad_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grad_bias[o] += g;
        let row = &weight[o * in_dim..(o + 1) * in_dim];
        let grow = &mut grad_weight[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            grow[i] += g * x[i];
            grad_in[i] += g * row[i];
        }
    }
    grad_in
}
