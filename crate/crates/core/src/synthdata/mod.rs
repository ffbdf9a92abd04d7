//! Deterministic synthetic multimodal world.
//!
//! Each species has a latent trait vector and a few spatial "bumps". A sample
//! draws a location from its species' bumps and derives every modality from
//! the trait (image, audio) or from the location (env, satellite). Satellite
//! features also carry a per-species habitat offset.

pub(crate) mod io;
mod split;

pub use io::{decode_dataset, encode_dataset, read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use split::{split_stratified, DatasetSplits, SplitRatios};

use crate::encoders::{Modality, Record};
use crate::error::{Error, Result};
use crate::numcore::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub species_count: usize,
    pub samples_per_species: usize,
    pub latent_dim: usize,
    pub image_dim: usize,
    pub audio_dim: usize,
    pub sat_dim: usize,
    pub env_dim: usize,
    pub image_noise: f64,
    pub audio_noise: f64,
    pub sat_noise: f64,
    pub env_noise: f64,
    /// Std of the trait-to-feature maps for image and audio, per feature.
    pub trait_signal: f64,
    /// Std of the per-species satellite habitat offset.
    pub habitat_scale: f64,
    pub bumps_per_species: usize,
    pub bump_std_deg: f64,
    pub env_basis_count: usize,
    pub audio_missing_rate: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            species_count: 20,
            samples_per_species: 100,
            latent_dim: 8,
            image_dim: 32,
            audio_dim: 24,
            sat_dim: 16,
            env_dim: 20,
            image_noise: 0.3,
            audio_noise: 0.3,
            sat_noise: 0.3,
            env_noise: 0.3,
            trait_signal: 0.2,
            habitat_scale: 0.25,
            bumps_per_species: 2,
            bump_std_deg: 12.0,
            env_basis_count: 12,
            audio_missing_rate: 0.2,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.species_count < 2 {
            return bad("world.species_count must be >= 2");
        }
        if [
            self.samples_per_species,
            self.latent_dim,
            self.image_dim,
            self.audio_dim,
            self.sat_dim,
            self.env_dim,
            self.bumps_per_species,
            self.env_basis_count,
        ]
        .contains(&0)
        {
            return bad("world dimensions and counts must be >= 1");
        }
        let noises = [
            self.image_noise,
            self.audio_noise,
            self.sat_noise,
            self.env_noise,
            self.trait_signal,
            self.habitat_scale,
            self.bump_std_deg,
        ];
        if noises.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("noise and scale parameters must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.audio_missing_rate) {
            return bad("world.audio_missing_rate must be in [0, 1]");
        }
        Ok(())
    }

    /// Same world with every noise source switched off.
    pub fn noiseless(&self) -> Self {
        Self {
            image_noise: 0.0,
            audio_noise: 0.0,
            sat_noise: 0.0,
            env_noise: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureDims {
    pub image: usize,
    pub audio: usize,
    pub sat: usize,
    pub env: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub species_id: u32,
    pub lat: f32,
    pub lon: f32,
    pub image: Vec<f32>,
    pub audio: Option<Vec<f32>>,
    pub sat: Vec<f32>,
    pub env: Vec<f32>,
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

impl MultimodalSample {
    pub fn record(&self, modality: Modality) -> Option<Record> {
        Some(match modality {
            Modality::Image => Record::Features(widen(&self.image)),
            Modality::Location => Record::Location {
                lat: self.lat as f64,
                lon: self.lon as f64,
            },
            Modality::Satellite => Record::Features(widen(&self.sat)),
            Modality::Env => Record::Features(widen(&self.env)),
            Modality::Audio => Record::Features(widen(self.audio.as_ref()?)),
            Modality::Text => Record::Class(self.species_id as usize),
        })
    }

    pub fn label(&self) -> usize {
        self.species_id as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub species_count: usize,
    pub dims: FeatureDims,
    pub samples: Vec<MultimodalSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<&MultimodalSample> {
        indices.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn audio_count(&self) -> usize {
        self.samples.iter().filter(|s| s.audio.is_some()).count()
    }
}

/// A sample in full precision, before narrowing to the stored `f32` form.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub species_id: usize,
    pub lat: f64,
    pub lon: f64,
    pub image: Vec<f64>,
    pub audio: Option<Vec<f64>>,
    pub sat: Vec<f64>,
    pub env: Vec<f64>,
}

impl RawSample {
    fn narrow(&self) -> MultimodalSample {
        let n = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let mut lon = self.lon as f32;
        if lon >= 180.0 {
            lon = -180.0;
        }
        MultimodalSample {
            species_id: self.species_id as u32,
            lat: (self.lat as f32).clamp(-90.0, 90.0),
            lon,
            image: n(&self.image),
            audio: self.audio.as_deref().map(n),
            sat: n(&self.sat),
            env: n(&self.env),
        }
    }
}

#[derive(Debug, Clone)]
struct EnvWave {
    lon_freq: f64,
    lat_freq: f64,
    phase: f64,
}

/// Generative parameters of a world. Rebuilt from the config alone.
#[derive(Debug, Clone)]
pub struct World {
    cfg: WorldConfig,
    traits: Vec<Vec<f64>>,
    image_map: Vec<Vec<f64>>,
    audio_map: Vec<Vec<f64>>,
    env_map: Vec<Vec<f64>>,
    sat_map: Vec<Vec<f64>>,
    habitat: Vec<Vec<f64>>,
    bumps: Vec<Vec<(f64, f64)>>,
    waves: Vec<EnvWave>,
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| std * rng.normal()).collect())
        .collect()
}

fn apply(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn wrap_lon(lon: f64) -> f64 {
    let mut l = (lon + 180.0).rem_euclid(360.0) - 180.0;
    if l >= 180.0 {
        l -= 360.0;
    }
    l
}

fn reflect_lat(lat: f64) -> f64 {
    let mut l = lat;
    while !(-90.0..=90.0).contains(&l) {
        l = if l > 90.0 { 180.0 - l } else { -180.0 - l };
    }
    l
}

impl World {
    pub fn new(cfg: &WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let root = SeededRng::new(cfg.seed);
        let mut rng = root.fork_named("world.params");
        let p = cfg.latent_dim;
        let traits = gaussian_matrix(cfg.species_count, p, 1.0, &mut rng);
        let per_trait = cfg.trait_signal / (p as f64).sqrt();
        let image_map = gaussian_matrix(cfg.image_dim, p, per_trait, &mut rng);
        let audio_map = gaussian_matrix(cfg.audio_dim, p, per_trait, &mut rng);
        let b = cfg.env_basis_count;
        let env_map = gaussian_matrix(cfg.env_dim, b, 1.0 / (b as f64).sqrt(), &mut rng);
        let sat_map = gaussian_matrix(cfg.sat_dim, b, 1.0 / (b as f64).sqrt(), &mut rng);
        let habitat = gaussian_matrix(cfg.species_count, cfg.sat_dim, cfg.habitat_scale, &mut rng);
        let max_s = 70f64.to_radians().sin();
        let bumps = (0..cfg.species_count)
            .map(|_| {
                (0..cfg.bumps_per_species)
                    .map(|_| {
                        let lat = rng.uniform_range(-max_s, max_s).asin().to_degrees();
                        let lon = rng.uniform_range(-180.0, 180.0);
                        (lat, lon)
                    })
                    .collect()
            })
            .collect();
        let waves = (0..b)
            .map(|_| EnvWave {
                lon_freq: (1 + rng.below(3)) as f64,
                lat_freq: rng.uniform_range(0.5, 3.0),
                phase: rng.uniform_range(0.0, std::f64::consts::TAU),
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            traits,
            image_map,
            audio_map,
            env_map,
            sat_map,
            habitat,
            bumps,
            waves,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            image: self.cfg.image_dim,
            audio: self.cfg.audio_dim,
            sat: self.cfg.sat_dim,
            env: self.cfg.env_dim,
        }
    }

    /// Smooth environmental basis functions at a location.
    pub fn env_basis(&self, lat: f64, lon: f64) -> Vec<f64> {
        let (phi, lam) = (lat.to_radians(), lon.to_radians());
        self.waves
            .iter()
            .map(|w| (w.lon_freq * lam + w.lat_freq * phi + w.phase).sin())
            .collect()
    }

    pub fn species_bumps(&self, species: usize) -> &[(f64, f64)] {
        &self.bumps[species]
    }

    /// Noise-free satellite features for a species observed at a location.
    pub fn sat_mean(&self, species: usize, lat: f64, lon: f64) -> Vec<f64> {
        apply(&self.sat_map, &self.env_basis(lat, lon))
            .into_iter()
            .zip(&self.habitat[species])
            .map(|(a, b)| a + b)
            .collect()
    }

    /// Unnormalized spatial density of a species (sum of its bumps).
    pub fn species_density(&self, species: usize, lat: f64, lon: f64) -> f64 {
        let s = self.cfg.bump_std_deg.max(1e-9);
        self.bumps[species]
            .iter()
            .map(|&(blat, blon)| {
                let dlat = lat - blat;
                let dlon = wrap_lon(lon - blon);
                (-(dlat * dlat + dlon * dlon) / (2.0 * s * s)).exp()
            })
            .sum()
    }

    /// Noise-free satellite features at a location, with the habitat offset
    /// taken as the density-weighted mix over species. `None` where no
    /// species has appreciable density.
    pub fn sat_at_location(&self, lat: f64, lon: f64) -> Option<Vec<f64>> {
        let weights: Vec<f64> = (0..self.cfg.species_count)
            .map(|s| self.species_density(s, lat, lon))
            .collect();
        let total: f64 = weights.iter().sum();
        if !(total > 1e-12) {
            return None;
        }
        let mut out = apply(&self.sat_map, &self.env_basis(lat, lon));
        for (w, offset) in weights.iter().zip(&self.habitat) {
            for (o, h) in out.iter_mut().zip(offset) {
                *o += w / total * h;
            }
        }
        Some(out)
    }

    pub fn draw_sample(&self, species: usize, rng: &mut SeededRng) -> RawSample {
        let cfg = &self.cfg;
        let bump = self.bumps[species][rng.below(cfg.bumps_per_species)];
        let lat = reflect_lat(bump.0 + cfg.bump_std_deg * rng.normal());
        let lon = wrap_lon(bump.1 + cfg.bump_std_deg * rng.normal());
        let noisy = |mean: Vec<f64>, std: f64, rng: &mut SeededRng| -> Vec<f64> {
            mean.into_iter().map(|m| m + std * rng.normal()).collect()
        };
        let t = &self.traits[species];
        let image = noisy(apply(&self.image_map, t), cfg.image_noise, rng);
        let has_audio = rng.uniform() >= cfg.audio_missing_rate;
        let audio_mean = apply(&self.audio_map, t);
        let audio = noisy(audio_mean, cfg.audio_noise, rng);
        let env = noisy(apply(&self.env_map, &self.env_basis(lat, lon)), cfg.env_noise, rng);
        let sat = noisy(self.sat_mean(species, lat, lon), cfg.sat_noise, rng);
        RawSample {
            species_id: species,
            lat,
            lon,
            image,
            audio: has_audio.then_some(audio),
            sat,
            env,
        }
    }

    /// Full-precision samples, species-major.
    pub fn draw_raw(&self) -> Vec<RawSample> {
        let mut rng = SeededRng::new(self.cfg.seed).fork_named("world.samples");
        let mut out = Vec::with_capacity(self.cfg.species_count * self.cfg.samples_per_species);
        for s in 0..self.cfg.species_count {
            for _ in 0..self.cfg.samples_per_species {
                out.push(self.draw_sample(s, &mut rng));
            }
        }
        out
    }

    pub fn dataset(&self) -> Dataset {
        Dataset {
            species_count: self.cfg.species_count,
            dims: self.dims(),
            samples: self.draw_raw().iter().map(RawSample::narrow).collect(),
        }
    }
}

pub fn generate_world(cfg: &WorldConfig) -> Result<Dataset> {
    Ok(World::new(cfg)?.dataset())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            species_count: 5,
            samples_per_species: 30,
            ..WorldConfig::default()
        }
    }

    fn nearest_centroid_accuracy(ds: &Dataset) -> f64 {
        let d = ds.dims.image;
        let mut sums = vec![vec![0.0; d]; ds.species_count];
        let mut counts = vec![0.0; ds.species_count];
        for s in &ds.samples {
            for (a, &v) in sums[s.label()].iter_mut().zip(&s.image) {
                *a += v as f64;
            }
            counts[s.label()] += 1.0;
        }
        let cents: Vec<Vec<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(s, c)| s.iter().map(|v| v / c).collect())
            .collect();
        let correct = ds
            .samples
            .iter()
            .filter(|s| {
                let dist = |c: &Vec<f64>| -> f64 {
                    c.iter().zip(&s.image).map(|(a, &b)| (a - b as f64).powi(2)).sum()
                };
                let best = (0..cents.len())
                    .min_by(|&a, &b| dist(&cents[a]).partial_cmp(&dist(&cents[b])).unwrap())
                    .unwrap();
                best == s.label()
            })
            .count();
        correct as f64 / ds.len() as f64
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_world(&small()).unwrap();
        let b = generate_world(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_world(&WorldConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn balanced_and_in_range() {
        let ds = generate_world(&WorldConfig::default()).unwrap();
        assert_eq!(ds.len(), 2000);
        for s in 0..20 {
            assert_eq!(ds.samples.iter().filter(|x| x.label() == s).count(), 100);
        }
        for s in &ds.samples {
            assert!((-90.0..=90.0).contains(&s.lat));
            assert!((-180.0..180.0).contains(&s.lon));
            assert_eq!(s.image.len(), 32);
            assert_eq!(s.sat.len(), 16);
            assert_eq!(s.env.len(), 20);
            if let Some(a) = &s.audio {
                assert_eq!(a.len(), 24);
            }
        }
        let missing = 1.0 - ds.audio_count() as f64 / ds.len() as f64;
        assert!((missing - 0.2).abs() < 0.05, "{missing}");
    }

    #[test]
    fn noiseless_images_are_separable() {
        let ds = generate_world(&WorldConfig::default().noiseless()).unwrap();
        assert_eq!(nearest_centroid_accuracy(&ds), 1.0);
    }

    #[test]
    fn sat_is_linear_in_env_basis_without_noise() {
        let cfg = small().noiseless();
        let world = World::new(&cfg).unwrap();
        let raw = world.draw_raw();
        let b = cfg.env_basis_count;
        // Least squares per species and per satellite feature on
        // [basis, 1] via normal equations.
        for species in 0..cfg.species_count {
            let rows: Vec<&RawSample> = raw.iter().filter(|r| r.species_id == species).collect();
            let design: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| {
                    let mut v = world.env_basis(r.lat, r.lon);
                    v.push(1.0);
                    v
                })
                .collect();
            let k = b + 1;
            for f in 0..cfg.sat_dim {
                let mut ata = vec![vec![0.0; k]; k];
                let mut atb = vec![0.0; k];
                for (x, r) in design.iter().zip(&rows) {
                    for i in 0..k {
                        atb[i] += x[i] * r.sat[f];
                        for j in 0..k {
                            ata[i][j] += x[i] * x[j];
                        }
                    }
                }
                let coef = solve(ata, atb);
                let max_resid = design
                    .iter()
                    .zip(&rows)
                    .map(|(x, r)| (x.iter().zip(&coef).map(|(a, c)| a * c).sum::<f64>() - r.sat[f]).abs())
                    .fold(0.0, f64::max);
                assert!(max_resid < 1e-9, "species {species} feature {f}: {max_resid}");
            }
        }
    }

    fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()).unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..n {
                        a[r][c] -= f * a[col][c];
                    }
                    b[r] -= f * b[col];
                }
            }
        }
        (0..n).map(|i| b[i] / a[i][i]).collect()
    }

    #[test]
    fn image_noise_lowers_separability() {
        let levels = [0.2, 0.4, 0.8];
        let mean_acc: Vec<f64> = levels
            .iter()
            .map(|&noise| {
                (0..5)
                    .map(|seed| {
                        let cfg = WorldConfig {
                            image_noise: noise,
                            seed,
                            ..WorldConfig::default()
                        };
                        nearest_centroid_accuracy(&generate_world(&cfg).unwrap())
                    })
                    .sum::<f64>()
                    / 5.0
            })
            .collect();
        assert!(mean_acc.windows(2).all(|w| w[1] < w[0]), "{mean_acc:?}");
    }

    #[test]
    fn config_validation() {
        assert!(World::new(&WorldConfig { species_count: 1, ..small() }).is_err());
        assert!(World::new(&WorldConfig { audio_missing_rate: 1.5, ..small() }).is_err());
        assert!(World::new(&WorldConfig { image_noise: -0.1, ..small() }).is_err());
    }
}
