//! Symmetric CLIP loss with supervised-contrastive positive sets.
//!
//! For anchors `z` (binding modality) and targets `y` (other modality), with
//! `P(i)` the indices sharing the label of `i` (always including `i`):
//!
//! ```text
//! L_zy = sum_i -1/|P(i)| sum_{j in P(i)} log( exp(z_i.y_j/t) / sum_n exp(z_i.y_n/t) )
//! L_yz = same with the roles of z and y swapped
//! L    = (L_zy + L_yz) / 2
//! ```
//!
//! Pseudo-negatives are extra `y`-side rows that only enter the
//! denominators of `L_zy`.

use crate::encoders::Record;
use crate::error::{Error, Result};
use crate::numcore::{dot, SeededRng};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub pseudo_negative_count: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            pseudo_negative_count: 0,
        }
    }
}

impl LossConfig {
    pub fn with_temperature(temperature: f64) -> Self {
        Self {
            temperature,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub z: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub pseudo_negatives: Vec<Vec<f64>>,
}

impl ContrastiveBatch {
    pub fn new(z: Vec<Vec<f64>>, y: Vec<Vec<f64>>, labels: Vec<usize>) -> Self {
        Self {
            z,
            y,
            labels,
            pseudo_negatives: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    fn validate(&self) -> Result<usize> {
        let n = self.z.len();
        if n == 0 {
            return Err(Error::Size("contrastive batch is empty".into()));
        }
        if self.y.len() != n || self.labels.len() != n {
            return Err(Error::Size(format!(
                "batch has {} z, {} y, {} labels",
                n,
                self.y.len(),
                self.labels.len()
            )));
        }
        let d = self.z[0].len();
        let all = self.z.iter().chain(&self.y).chain(&self.pseudo_negatives);
        if all.clone().any(|v| v.len() != d) {
            return Err(Error::Shape("batch embeddings differ in dimension".into()));
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_z: Vec<Vec<f64>>,
    pub grad_y: Vec<Vec<f64>>,
    pub grad_pseudo: Vec<Vec<f64>>,
}

/// One direction of the loss: anchors `a` scored against `targets`
/// (`targets[..n]` are the paired rows, anything after is denominator
/// only). Adds gradients into `grad_a` / `grad_t` scaled by `weight`.
fn directional(
    a: &[Vec<f64>],
    targets: &[&Vec<f64>],
    positives: &[Vec<usize>],
    tau: f64,
    weight: f64,
    grad_a: &mut [Vec<f64>],
    grad_t: &mut [Vec<f64>],
) -> f64 {
    let mut total = 0.0;
    let mut logits = vec![0.0; targets.len()];
    for (i, anchor) in a.iter().enumerate() {
        for (l, t) in logits.iter_mut().zip(targets) {
            *l = dot(anchor, t) / tau;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let log_denom = max + sum_exp.ln();
        let pos = &positives[i];
        let inv = 1.0 / pos.len() as f64;
        let pos_mean: f64 = pos.iter().map(|&j| logits[j]).sum::<f64>() * inv;
        total += log_denom - pos_mean;

        // dL/dlogit_n = softmax_n - [n in P(i)] / |P(i)|
        for (n, l) in logits.iter().enumerate() {
            let mut coef = (l - log_denom).exp();
            if n < a.len() && pos.binary_search(&n).is_ok() {
                coef -= inv;
            }
            let c = weight * coef / tau;
            if c == 0.0 {
                continue;
            }
            for (g, t) in grad_a[i].iter_mut().zip(targets[n].iter()) {
                *g += c * t;
            }
            for (g, av) in grad_t[n].iter_mut().zip(anchor) {
                *g += c * av;
            }
        }
    }
    total
}

fn positive_sets(labels: &[usize]) -> Vec<Vec<usize>> {
    labels
        .iter()
        .map(|&li| {
            labels
                .iter()
                .enumerate()
                .filter(|(_, &lj)| lj == li)
                .map(|(j, _)| j)
                .collect()
        })
        .collect()
}

/// Loss value and exact partials with respect to every embedding
/// coordinate (treated as free variables).
pub fn supcon_clip_loss(batch: &ContrastiveBatch, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let d = batch.validate()?;
    let n = batch.len();
    let tau = cfg.temperature;
    let positives = positive_sets(&batch.labels);

    let mut grad_z = vec![vec![0.0; d]; n];
    let mut grad_y = vec![vec![0.0; d]; n];
    let mut grad_pseudo = vec![vec![0.0; d]; batch.pseudo_negatives.len()];

    // z -> y, with pseudo-negatives appended to the targets
    let targets: Vec<&Vec<f64>> = batch.y.iter().chain(&batch.pseudo_negatives).collect();
    let mut grad_targets = vec![vec![0.0; d]; targets.len()];
    let l_zy = directional(&batch.z, &targets, &positives, tau, 0.5, &mut grad_z, &mut grad_targets);
    for (k, g) in grad_targets.into_iter().enumerate() {
        if k < n {
            grad_y[k] = g;
        } else {
            grad_pseudo[k - n] = g;
        }
    }

    // y -> z
    let targets: Vec<&Vec<f64>> = batch.z.iter().collect();
    let l_yz = directional(&batch.y, &targets, &positives, tau, 0.5, &mut grad_y, &mut grad_z);

    Ok(LossOutput {
        loss: 0.5 * (l_zy + l_yz),
        grad_z,
        grad_y,
        grad_pseudo,
    })
}

/// Loss value only.
pub fn supcon_clip_value(batch: &ContrastiveBatch, cfg: &LossConfig) -> Result<f64> {
    supcon_clip_loss(batch, cfg).map(|o| o.loss)
}

/// Uniform locations on the sphere: lon uniform in [-180, 180), sin(lat)
/// uniform in [-1, 1].
pub fn sample_pseudo_negative_locations(count: usize, rng: &mut SeededRng) -> Vec<Record> {
    (0..count)
        .map(|_| {
            let lon = rng.uniform_range(-180.0, 180.0);
            let s: f64 = rng.uniform_range(-1.0, 1.0);
            Record::Location {
                lat: s.asin().to_degrees().clamp(-90.0, 90.0),
                lon,
            }
        })
        .collect()
}

/// Max over all coordinates of `|analytic - numeric| / (|numeric| + 1e-8 (1 + |loss|))`
/// using fourth-order central differences with step `h`.
pub fn loss_gradcheck(batch: &ContrastiveBatch, cfg: &LossConfig, h: f64) -> Result<f64> {
    let analytic = supcon_clip_loss(batch, cfg)?;
    let mut worst: f64 = 0.0;
    let floor = 1e-8 * (1.0 + analytic.loss.abs());
    let mut probe = batch.clone();
    let groups: [(Side, &Vec<Vec<f64>>); 3] = [
        (Side::Z, &analytic.grad_z),
        (Side::Y, &analytic.grad_y),
        (Side::Pseudo, &analytic.grad_pseudo),
    ];
    for (side, grads) in groups {
        for (r, row) in grads.iter().enumerate() {
            for (c, &g) in row.iter().enumerate() {
                let orig = *side.cell(&mut probe, r, c);
                let mut at = |k: f64| -> Result<f64> {
                    *side.cell(&mut probe, r, c) = orig + k * h;
                    supcon_clip_value(&probe, cfg)
                };
                let (p2, p1, m1, m2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
                *side.cell(&mut probe, r, c) = orig;
                let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
                worst = worst.max((g - numeric).abs() / (numeric.abs() + floor));
            }
        }
    }
    Ok(worst)
}

/// Temperatures cycled through by [`gradcheck_suite`].
pub const GRADCHECK_TEMPERATURES: [f64; 3] = [0.07, 1.0, 10.0];

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckCase {
    pub index: usize,
    pub n: usize,
    pub d: usize,
    pub temperature: f64,
    pub max_rel_error: f64,
}

/// Batch of random unit embeddings with labels drawn from `classes` classes.
pub fn random_unit_batch(rng: &mut SeededRng, n: usize, d: usize, classes: usize, pseudo: usize) -> ContrastiveBatch {
    let unit = |rng: &mut SeededRng| -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let s = dot(&v, &v).sqrt();
        v.into_iter().map(|x| x / s).collect()
    };
    let z = (0..n).map(|_| unit(rng)).collect();
    let y = (0..n).map(|_| unit(rng)).collect();
    let labels = (0..n).map(|_| rng.below(classes.max(1))).collect();
    let mut b = ContrastiveBatch::new(z, y, labels);
    b.pseudo_negatives = (0..pseudo).map(|_| unit(rng)).collect();
    b
}

/// `count` seeded batches with N in 2..=8, d in 2..=16 and the temperature
/// cycling through [`GRADCHECK_TEMPERATURES`].
pub fn gradcheck_suite(seed: u64, count: usize) -> Result<Vec<GradcheckCase>> {
    let root = SeededRng::new(seed).fork_named("gradcheck");
    (0..count)
        .map(|index| {
            let mut rng = root.fork(index as u64);
            let n = 2 + rng.below(7);
            let d = 2 + rng.below(15);
            let classes = 1 + rng.below(n);
            let pseudo = rng.below(3);
            let temperature = GRADCHECK_TEMPERATURES[index % GRADCHECK_TEMPERATURES.len()];
            let batch = random_unit_batch(&mut rng, n, d, classes, pseudo);
            let step = 1e-3 * temperature.max(1.0);
            let max_rel_error = loss_gradcheck(&batch, &LossConfig::with_temperature(temperature), step)?;
            Ok(GradcheckCase {
                index,
                n,
                d,
                temperature,
                max_rel_error,
            })
        })
        .collect()
}

#[derive(Clone, Copy)]
enum Side {
    Z,
    Y,
    Pseudo,
}

impl Side {
    fn cell(self, b: &mut ContrastiveBatch, r: usize, c: usize) -> &mut f64 {
        match self {
            Side::Z => &mut b.z[r][c],
            Side::Y => &mut b.y[r][c],
            Side::Pseudo => &mut b.pseudo_negatives[r][c],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::l2_normalize;

    fn random_unit(rng: &mut SeededRng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        l2_normalize(&v).unwrap()
    }

    fn random_batch(seed: u64, n: usize, d: usize, classes: usize, pseudo: usize) -> ContrastiveBatch {
        let mut rng = SeededRng::new(seed);
        let z = (0..n).map(|_| random_unit(&mut rng, d)).collect();
        let y = (0..n).map(|_| random_unit(&mut rng, d)).collect();
        let labels = (0..n).map(|_| rng.below(classes)).collect();
        let mut b = ContrastiveBatch::new(z, y, labels);
        b.pseudo_negatives = (0..pseudo).map(|_| random_unit(&mut rng, d)).collect();
        b
    }

    /// Literal transcription of the double sums with scalar loops.
    fn literal_loss(b: &ContrastiveBatch, tau: f64) -> f64 {
        let n = b.z.len();
        let d = b.z[0].len();
        let dotp = |u: &Vec<f64>, v: &Vec<f64>| {
            let mut s = 0.0;
            for k in 0..d {
                s += u[k] * v[k];
            }
            s
        };
        let mut l_gm = 0.0;
        let mut l_mg = 0.0;
        for i in 0..n {
            let mut p_count = 0.0;
            for j in 0..n {
                if b.labels[j] == b.labels[i] {
                    p_count += 1.0;
                }
            }
            let mut denom_gm = 0.0;
            let mut denom_mg = 0.0;
            for m in 0..n {
                denom_gm += (dotp(&b.z[i], &b.y[m]) / tau).exp();
                denom_mg += (dotp(&b.y[i], &b.z[m]) / tau).exp();
            }
            for pn in &b.pseudo_negatives {
                denom_gm += (dotp(&b.z[i], pn) / tau).exp();
            }
            for j in 0..n {
                if b.labels[j] != b.labels[i] {
                    continue;
                }
                l_gm += -1.0 / p_count * ((dotp(&b.z[i], &b.y[j]) / tau).exp() / denom_gm).ln();
                l_mg += -1.0 / p_count * ((dotp(&b.y[i], &b.z[j]) / tau).exp() / denom_mg).ln();
            }
        }
        (l_gm + l_mg) / 2.0
    }

    /// Plain symmetric InfoNCE (cross-entropy over rows and columns of the
    /// similarity matrix, diagonal targets).
    fn symmetric_infonce(z: &[Vec<f64>], y: &[Vec<f64>], tau: f64) -> f64 {
        let n = z.len();
        let sim: Vec<Vec<f64>> = z
            .iter()
            .map(|zi| y.iter().map(|yj| zi.iter().zip(yj).map(|(a, b)| a * b).sum::<f64>() / tau).collect())
            .collect();
        let mut rows = 0.0;
        let mut cols = 0.0;
        for i in 0..n {
            let lse_r = sim[i].iter().map(|v| v.exp()).sum::<f64>().ln();
            let lse_c = (0..n).map(|k| sim[k][i].exp()).sum::<f64>().ln();
            rows += lse_r - sim[i][i];
            cols += lse_c - sim[i][i];
        }
        (rows + cols) / 2.0
    }

    #[test]
    fn single_example_loss_is_zero() {
        let b = random_batch(1, 1, 4, 3, 0);
        let out = supcon_clip_loss(&b, &LossConfig::default()).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn distinct_labels_reduce_to_infonce() {
        for seed in 0..10 {
            let mut b = random_batch(seed, 6, 8, 1, 0);
            b.labels = (0..6).collect();
            for tau in [0.07, 0.5, 3.0] {
                let got = supcon_clip_value(&b, &LossConfig::with_temperature(tau)).unwrap();
                let want = symmetric_infonce(&b.z, &b.y, tau);
                assert!((got - want).abs() < 1e-9, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn matches_literal_formula_n3() {
        let mut b = random_batch(17, 3, 4, 2, 0);
        b.labels = vec![0, 0, 1];
        let got = supcon_clip_value(&b, &LossConfig::with_temperature(1.0)).unwrap();
        assert!((got - literal_loss(&b, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn matches_literal_formula_with_pseudo_negatives() {
        for seed in 0..5 {
            let b = random_batch(seed, 6, 5, 3, 4);
            let got = supcon_clip_value(&b, &LossConfig::with_temperature(0.2)).unwrap();
            let want = literal_loss(&b, 0.2);
            assert!((got - want).abs() < 1e-9 * want.abs().max(1.0));
        }
    }

    #[test]
    fn config_and_size_errors() {
        let b = random_batch(2, 3, 4, 2, 0);
        assert!(matches!(
            supcon_clip_loss(&b, &LossConfig::with_temperature(0.0)),
            Err(Error::Config(_))
        ));
        let empty = ContrastiveBatch::new(vec![], vec![], vec![]);
        assert!(matches!(supcon_clip_loss(&empty, &LossConfig::default()), Err(Error::Size(_))));
    }

    #[test]
    fn swap_symmetry_and_permutation_invariance() {
        for seed in 0..20 {
            let b = random_batch(seed, 7, 6, 3, 0);
            let cfg = LossConfig::with_temperature(0.1);
            let base = supcon_clip_value(&b, &cfg).unwrap();
            let swapped = ContrastiveBatch::new(b.y.clone(), b.z.clone(), b.labels.clone());
            assert!((base - supcon_clip_value(&swapped, &cfg).unwrap()).abs() < 1e-12);
            let mut perm: Vec<usize> = (0..7).collect();
            SeededRng::new(seed + 100).shuffle(&mut perm);
            let permuted = ContrastiveBatch::new(
                perm.iter().map(|&i| b.z[i].clone()).collect(),
                perm.iter().map(|&i| b.y[i].clone()).collect(),
                perm.iter().map(|&i| b.labels[i]).collect(),
            );
            assert!((base - supcon_clip_value(&permuted, &cfg).unwrap()).abs() < 1e-12);
            assert!(base >= 0.0);
        }
    }

    proptest::proptest! {
        #[test]
        fn loss_invariants_hold_on_random_batches(seed in 0u64..1_000_000, n in 1usize..9, d in 2usize..17, pseudo in 0usize..4, t in 0usize..3) {
            let tau = GRADCHECK_TEMPERATURES[t];
            let cfg = LossConfig::with_temperature(tau);
            let mut rng = SeededRng::new(seed);
            let classes = 1 + rng.below(n);
            let b = random_unit_batch(&mut rng, n, d, classes, 0);
            let base = supcon_clip_value(&b, &cfg).unwrap();
            proptest::prop_assert!(base >= 0.0 && base.is_finite());
            let swapped = ContrastiveBatch::new(b.y.clone(), b.z.clone(), b.labels.clone());
            proptest::prop_assert!((base - supcon_clip_value(&swapped, &cfg).unwrap()).abs() <= 1e-12 * base.max(1.0));

            let pb = random_unit_batch(&mut rng, n, d, classes, pseudo);
            let with_pn = supcon_clip_value(&pb, &cfg).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let mut permuted = ContrastiveBatch::new(
                perm.iter().map(|&i| pb.z[i].clone()).collect(),
                perm.iter().map(|&i| pb.y[i].clone()).collect(),
                perm.iter().map(|&i| pb.labels[i]).collect(),
            );
            permuted.pseudo_negatives = pb.pseudo_negatives.clone();
            proptest::prop_assert!((with_pn - supcon_clip_value(&permuted, &cfg).unwrap()).abs() <= 1e-12 * with_pn.max(1.0));
        }
    }

    #[test]
    fn loss_falls_with_temperature_when_positives_dominate() {
        let n = 5;
        let e: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|k| if k == i { 1.0 } else { 0.0 }).collect())
            .collect();
        let b = ContrastiveBatch::new(e.clone(), e, (0..n).collect());
        let grid = [5.0, 2.0, 1.0, 0.5, 0.2, 0.1, 0.07];
        let losses: Vec<f64> = grid
            .iter()
            .map(|&t| supcon_clip_value(&b, &LossConfig::with_temperature(t)).unwrap())
            .collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn gradcheck_random_batches() {
        for (k, tau) in [0.07, 1.0, 10.0].into_iter().enumerate() {
            let b = random_batch(40 + k as u64, 4, 8, 2, 2);
            let err = loss_gradcheck(&b, &LossConfig::with_temperature(tau), 1e-5).unwrap();
            assert!(err < 1e-4, "tau {tau}: {err}");
        }
    }

    #[test]
    fn gradcheck_suite_is_seeded() {
        let a = gradcheck_suite(3, 12).unwrap();
        assert_eq!(a, gradcheck_suite(3, 12).unwrap());
        for c in &a {
            assert!((2..=8).contains(&c.n) && (2..=16).contains(&c.d));
            assert!(c.max_rel_error < 1e-4, "{c:?}");
        }
    }

    #[test]
    fn symmetric_batch_has_zero_gradient() {
        let v = l2_normalize(&[0.3, -0.2, 0.9, 0.1]).unwrap();
        let b = ContrastiveBatch::new(vec![v.clone(); 4], vec![v.clone(); 4], vec![2; 4]);
        let cfg = LossConfig::default();
        let out = supcon_clip_loss(&b, &cfg).unwrap();
        let h = 1e-5;
        for r in 0..4 {
            for c in 0..4 {
                let mut p = b.clone();
                p.z[r][c] += h;
                let up = supcon_clip_value(&p, &cfg).unwrap();
                p.z[r][c] -= 2.0 * h;
                let dn = supcon_clip_value(&p, &cfg).unwrap();
                let num = (up - dn) / (2.0 * h);
                assert!((out.grad_z[r][c] - num).abs() < 1e-6);
                assert!(out.grad_z[r][c].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pseudo_negative_sampling() {
        assert!(sample_pseudo_negative_locations(0, &mut SeededRng::new(1)).is_empty());
        let a = sample_pseudo_negative_locations(50, &mut SeededRng::new(9));
        let b = sample_pseudo_negative_locations(50, &mut SeededRng::new(9));
        assert_eq!(a, b);

        let n = 100_000;
        let bins = 20;
        let mut counts = vec![0usize; bins];
        for r in sample_pseudo_negative_locations(n, &mut SeededRng::new(2024)) {
            let Record::Location { lat, lon } = r else { unreachable!() };
            assert!((-180.0..180.0).contains(&lon));
            let s = lat.to_radians().sin();
            let k = (((s + 1.0) / 2.0) * bins as f64).floor().min(bins as f64 - 1.0) as usize;
            counts[k] += 1;
        }
        let expected = n as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi-square critical value, 19 degrees of freedom, p = 0.01
        assert!(chi2 < 36.191, "chi2 = {chi2}");
    }
}
