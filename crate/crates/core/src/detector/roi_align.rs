//! ROI Align over a single pyramid level (half-pixel aligned, fixed
//! sampling grid per bin).

use super::tensor::FeatureMap;
use crate::dataset::BoundingBox;

/// Per-bin bilinear taps `(plane offset, weight)`, weights already divided by
/// the number of samples in the bin.
#[derive(Debug, Clone)]
pub struct RoiSampling {
    pub pool: usize,
    pub bins: Vec<Vec<(usize, f64)>>,
}

fn bilinear_taps(y: f64, x: f64, height: usize, width: usize, scale: f64, out: &mut Vec<(usize, f64)>) {
    if y < -1.0 || y > height as f64 || x < -1.0 || x > width as f64 {
        return;
    }
    let (mut y, mut x) = (y.max(0.0), x.max(0.0));
    let mut y0 = y as usize;
    let mut x0 = x as usize;
    let y1;
    let x1;
    if y0 >= height - 1 {
        y0 = height - 1;
        y1 = y0;
        y = y0 as f64;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= width - 1 {
        x0 = width - 1;
        x1 = x0;
        x = x0 as f64;
    } else {
        x1 = x0 + 1;
    }
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    out.push((y0 * width + x0, hy * hx * scale));
    out.push((y0 * width + x1, hy * lx * scale));
    out.push((y1 * width + x0, ly * hx * scale));
    out.push((y1 * width + x1, ly * lx * scale));
}

impl RoiSampling {
    pub fn new(bbox: &BoundingBox, stride: usize, height: usize, width: usize, pool: usize, samples: usize) -> Self {
        let s = stride as f64;
        let (x1, y1) = (bbox.x1 / s - 0.5, bbox.y1 / s - 0.5);
        let (x2, y2) = (bbox.x2 / s - 0.5, bbox.y2 / s - 0.5);
        let bin_w = (x2 - x1) / pool as f64;
        let bin_h = (y2 - y1) / pool as f64;
        let scale = 1.0 / (samples * samples) as f64;
        let mut bins = Vec::with_capacity(pool * pool);
        for py in 0..pool {
            for px in 0..pool {
                let mut taps = Vec::with_capacity(4 * samples * samples);
                for iy in 0..samples {
                    let y = y1 + bin_h * (py as f64 + (iy as f64 + 0.5) / samples as f64);
                    for ix in 0..samples {
                        let x = x1 + bin_w * (px as f64 + (ix as f64 + 0.5) / samples as f64);
                        bilinear_taps(y, x, height, width, scale, &mut taps);
                    }
                }
                bins.push(taps);
            }
        }
        Self { pool, bins }
    }

    /// Pooled values laid out `[channel, bin]`.
    pub fn forward(&self, map: &FeatureMap) -> Vec<f64> {
        let nb = self.bins.len();
        let mut out = vec![0.0; map.channels * nb];
        for c in 0..map.channels {
            let plane = map.channel(c);
            for (b, taps) in self.bins.iter().enumerate() {
                out[c * nb + b] = taps.iter().map(|&(o, w)| w * plane[o]).sum();
            }
        }
        out
    }

    pub fn backward(&self, grad: &[f64], grad_map: &mut FeatureMap) {
        let nb = self.bins.len();
        for c in 0..grad_map.channels {
            let plane = grad_map.channel_mut(c);
            for (b, taps) in self.bins.iter().enumerate() {
                let g = grad[c * nb + b];
                if g != 0.0 {
                    for &(o, w) in taps {
                        plane[o] += w * g;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_pools_to_constant() {
        let map = FeatureMap::filled(3, 8, 8, 2.5);
        for b in [
            BoundingBox::new(0.0, 0.0, 32.0, 32.0).unwrap(),
            BoundingBox::new(3.0, 7.0, 9.0, 30.0).unwrap(),
            BoundingBox::new(30.0, 30.0, 31.0, 32.0).unwrap(),
        ] {
            let v = RoiSampling::new(&b, 4, 8, 8, 4, 2).forward(&map);
            assert!(v.iter().all(|x| (x - 2.5).abs() < 1e-12), "{v:?}");
        }
    }

    #[test]
    fn linear_ramp_sampled_exactly() {
        // f(y, x) = x on a 1-channel map; an interior bin centre is read back
        let mut map = FeatureMap::zeros(1, 6, 6);
        for y in 0..6 {
            for x in 0..6 {
                map.data[y * 6 + x] = x as f64;
            }
        }
        let b = BoundingBox::new(4.0, 4.0, 12.0, 12.0).unwrap();
        let v = RoiSampling::new(&b, 2, 6, 6, 2, 1).forward(&map);
        // feature-space box [1.5, 5.5], bin centres at 2.5 and 4.5
        assert!((v[0] - 2.5).abs() < 1e-12 && (v[1] - 4.5).abs() < 1e-12);
    }

    #[test]
    fn backward_is_adjoint() {
        let map = FeatureMap::from_vec(2, 5, 5, (0..50).map(|i| (i as f64 * 0.37).sin()).collect());
        let s = RoiSampling::new(&BoundingBox::new(1.0, 2.0, 17.0, 13.0).unwrap(), 4, 5, 5, 3, 2);
        let out = s.forward(&map);
        let g: Vec<f64> = (0..out.len()).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut gm = FeatureMap::zeros_like(&map);
        s.backward(&g, &mut gm);
        let lhs: f64 = out.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = map.data.iter().zip(&gm.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
