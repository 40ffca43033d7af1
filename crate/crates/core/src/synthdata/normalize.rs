use serde::{Deserialize, Serialize};

use super::raster::Raster;
use crate::error::{Error, Result};

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Population statistics over every pixel of every raster.
    pub fn from_rasters<'a>(rasters: impl IntoIterator<Item = &'a Raster>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for r in rasters {
            if sum.is_empty() {
                sum = vec![0.0; r.channels];
                sq = vec![0.0; r.channels];
            } else if sum.len() != r.channels {
                return Err(Error::Invalid(format!(
                    "channel count {} differs from {}",
                    r.channels,
                    sum.len()
                )));
            }
            for c in 0..r.channels {
                for &v in r.channel(c) {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += r.height * r.width;
        }
        if count == 0 {
            return Err(Error::Invalid("channel statistics need at least one raster".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt()).collect();
        Ok(ChannelStats { mean, std })
    }

    fn check(&self, raster: &Raster) -> Result<()> {
        if self.mean.len() != raster.channels || self.std.len() != raster.channels {
            return Err(Error::Invalid(format!(
                "stats for {} channels applied to a {}-channel raster",
                self.mean.len(),
                raster.channels
            )));
        }
        if let Some(c) = self.std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::Invalid(format!("channel {c} has non-positive std")));
        }
        Ok(())
    }
}

/// Per-channel standardization `(x - mean) / std`.
pub fn normalize(raster: &Raster, stats: &ChannelStats) -> Result<Raster> {
    stats.check(raster)?;
    let mut out = raster.clone();
    for c in 0..raster.channels {
        let (m, s) = (stats.mean[c], stats.std[c]);
        out.channel_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok(out)
}

pub fn denormalize(raster: &Raster, stats: &ChannelStats) -> Result<Raster> {
    stats.check(raster)?;
    let mut out = raster.clone();
    for c in 0..raster.channels {
        let (m, s) = (stats.mean[c], stats.std[c]);
        out.channel_mut(c).iter_mut().for_each(|v| *v = *v * s + m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_maps_to_zero() {
        let r = Raster::new(1, 2, 2, vec![3.5; 4]).unwrap();
        let stats = ChannelStats { mean: vec![3.5], std: vec![1.0] };
        assert!(normalize(&r, &stats).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_std_rejected() {
        let r = Raster::new(1, 1, 2, vec![1.0, 2.0]).unwrap();
        let stats = ChannelStats { mean: vec![0.0], std: vec![0.0] };
        assert!(normalize(&r, &stats).is_err());
        // Statistics of a constant raster have zero std and are likewise unusable.
        let flat = Raster::new(1, 1, 2, vec![4.0, 4.0]).unwrap();
        let s = ChannelStats::from_rasters([&flat]).unwrap();
        assert!(normalize(&flat, &s).is_err());
    }

    #[test]
    fn standardization_is_a_fixed_point() {
        let r = Raster::new(2, 2, 3, (0..12).map(|i| (i as f64 * 0.7).sin() * 5.0 + i as f64).collect()).unwrap();
        let once = normalize(&r, &ChannelStats::from_rasters([&r]).unwrap()).unwrap();
        let twice = normalize(&once, &ChannelStats::from_rasters([&once]).unwrap()).unwrap();
        for (a, b) in once.data.iter().zip(&twice.data) {
            assert!((a - b).abs() < 1e-9);
        }
        let stats = ChannelStats::from_rasters([&once]).unwrap();
        for c in 0..2 {
            assert!(stats.mean[c].abs() < 1e-12);
            assert!((stats.std[c] - 1.0).abs() < 1e-12);
        }
    }
}
