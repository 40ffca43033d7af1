use super::crop::CropWindow;
use crate::error::{Error, Result};

/// One season of one modality: `channels x height x width`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Invalid(format!("raster dims must be positive, got {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Invalid(format!(
                "raster {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Raster { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Raster { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Cuts `window` out and bilinearly resamples it to `out_h x out_w`.
    ///
    /// Sample positions use pixel-center alignment, so a window that already
    /// has the output size is copied exactly.
    pub fn crop_resample(&self, window: &CropWindow, out_h: usize, out_w: usize) -> Result<Raster> {
        if window.height == 0
            || window.width == 0
            || window.top + window.height > self.height
            || window.left + window.width > self.width
        {
            return Err(Error::Invalid(format!(
                "crop window {window:?} exceeds raster {}x{}",
                self.height, self.width
            )));
        }
        let axis = |out: usize, start: usize, len: usize| -> Vec<(usize, usize, f64)> {
            let scale = len as f64 / out as f64;
            (0..out)
                .map(|i| {
                    let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                    let lo = src.floor() as usize;
                    let hi = (lo + 1).min(len - 1);
                    (start + lo, start + hi, src - lo as f64)
                })
                .collect()
        };
        let ys = axis(out_h, window.top, window.height);
        let xs = axis(out_w, window.left, window.width);
        let mut out = Raster::zeros(self.channels, out_h, out_w);
        for c in 0..self.channels {
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
                    let bottom = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
                    out.data[(c * out_h + oy) * out_w + ox] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> Raster {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Raster {
        Raster::new(1, h, w, (0..h * w).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn same_size_crop_is_exact_copy() {
        let r = ramp(8, 8);
        let w = CropWindow { season: 0, top: 2, left: 3, height: 4, width: 4 };
        let c = r.crop_resample(&w, 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(c.get(0, y, x), r.get(0, y + 2, x + 3));
            }
        }
    }

    #[test]
    fn downsampling_linear_field_stays_linear() {
        // f(y, x) = 8y + x; bilinear sampling reproduces affine fields exactly.
        let r = ramp(8, 8);
        let w = CropWindow { season: 0, top: 0, left: 0, height: 8, width: 8 };
        let c = r.crop_resample(&w, 4, 4).unwrap();
        assert!((c.get(0, 0, 0) - (8.0 * 0.5 + 0.5)).abs() < 1e-12);
        assert!((c.get(0, 1, 2) - (8.0 * 2.5 + 4.5)).abs() < 1e-12);
    }

    #[test]
    fn flip_reverses_columns() {
        let r = ramp(2, 3);
        let f = r.flip_horizontal();
        assert_eq!(f.data, vec![2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        assert_eq!(f.flip_horizontal(), r);
    }

    #[test]
    fn out_of_bounds_window_is_rejected() {
        let r = ramp(4, 4);
        let w = CropWindow { season: 0, top: 2, left: 0, height: 3, width: 2 };
        assert!(r.crop_resample(&w, 2, 2).is_err());
    }
}
