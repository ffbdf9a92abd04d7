use std::collections::BTreeMap;

use super::Dataset;
use crate::error::{Error, Result};
use crate::numcore::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.85,
            val: 0.05,
            test: 0.10,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.train <= 0.0 {
            return Err(Error::Config(format!("invalid split ratios {r:?}")));
        }
        if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {r:?} do not sum to 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Largest-remainder apportionment of `n` items over the three ratios.
fn apportion(n: usize, r: &SplitRatios) -> [usize; 3] {
    let quotas = [r.train * n as f64, r.val * n as f64, r.test * n as f64];
    let mut counts = quotas.map(|q| q.floor() as usize);
    let mut left = n - counts.iter().sum::<usize>().min(n);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Per-species split. Species with fewer than 3 samples go entirely to
/// train and produce a warning.
pub fn split_stratified(ds: &Dataset, ratios: SplitRatios, seed: u64) -> Result<DatasetSplits> {
    ratios.validate()?;
    let mut by_species: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        by_species.entry(s.label()).or_default().push(i);
    }
    let root = SeededRng::new(seed);
    let mut out = DatasetSplits::default();
    for (species, mut idx) in by_species {
        if idx.len() < 3 {
            let msg = format!(
                "species {species} has {} samples; all assigned to train",
                idx.len()
            );
            log::warn!("{msg}");
            out.warnings.push(msg);
            out.train.extend(idx);
            continue;
        }
        root.fork(species as u64).shuffle(&mut idx);
        let [tr, va, _] = apportion(idx.len(), &ratios);
        out.train.extend_from_slice(&idx[..tr]);
        out.val.extend_from_slice(&idx[tr..tr + va]);
        out.test.extend_from_slice(&idx[tr + va..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}
