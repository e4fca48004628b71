//! Labeled toy datasets with a known discriminative motif.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::data::{Dataset, TimeSeriesInstance};
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct MotifConfig {
    pub instances: usize,
    pub series_len: usize,
    pub motif_len: usize,
    pub amplitude: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for MotifConfig {
    fn default() -> Self {
        Self {
            instances: 60,
            series_len: 128,
            motif_len: 24,
            amplitude: 2.0,
            noise: 0.5,
            seed: 0,
        }
    }
}

/// Gaussian noise series in two equal classes; class `"1"` carries a
/// one-period sine burst at a random position. Returns the raw (unnormalized)
/// dataset with labels `"0"` and `"1"`, alternating by instance.
pub fn motif_dataset(config: &MotifConfig) -> Result<Dataset> {
    if config.motif_len == 0 || config.motif_len > config.series_len {
        return Err(Error::Config("motif must fit inside the series".into()));
    }
    let normal = Normal::new(0.0, config.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut instances = Vec::with_capacity(config.instances);
    let mut labels = Vec::with_capacity(config.instances);
    for m in 0..config.instances {
        let mut rng = rng_for(config.seed, &[m as u64]);
        let mut series: Vec<f64> = (0..config.series_len).map(|_| normal.sample(&mut rng)).collect();
        let class = m % 2;
        if class == 1 {
            let start = rng.random_range(0..=config.series_len - config.motif_len);
            for t in 0..config.motif_len {
                let phase = 2.0 * std::f64::consts::PI * t as f64 / config.motif_len as f64;
                series[start + t] += config.amplitude * phase.sin();
            }
        }
        instances.push(TimeSeriesInstance::new(format!("s{m}"), vec![series])?);
        labels.push(class.to_string());
    }
    Dataset::new(instances, Some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_balance() {
        let ds = motif_dataset(&MotifConfig::default()).unwrap();
        assert_eq!((ds.len(), ds.series_len(), ds.variables()), (60, 128, 1));
        assert_eq!(ds.class_count(), Some(2));
        assert_eq!(ds.label_indices().unwrap().iter().filter(|&&l| l == 1).count(), 30);
    }

    #[test]
    fn seeded() {
        let a = motif_dataset(&MotifConfig::default()).unwrap();
        let b = motif_dataset(&MotifConfig::default()).unwrap();
        let c = motif_dataset(&MotifConfig { seed: 1, ..Default::default() }).unwrap();
        assert_eq!(a.instance(3).channel(0), b.instance(3).channel(0));
        assert_ne!(a.instance(3).channel(0), c.instance(3).channel(0));
    }
}
