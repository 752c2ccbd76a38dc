//! Samples, synthetic generation with controllable subgroup imbalance, and
//! the fake/real pair sampler.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Name of the domain label reserved for pristine images. It always has id 0.
pub const REAL_DOMAIN: &str = "real";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ImageShape {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 16,
            width: 16,
        }
    }
}

impl ImageShape {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// One training example `(X, D, A, Y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub x: Tensor,
    /// Demographic subgroup id.
    pub d: usize,
    /// Forgery-domain id; 0 is [`REAL_DOMAIN`].
    pub a: usize,
    /// 0 real, 1 fake.
    pub y: u8,
}

/// Immutable collection of samples with its subgroup and domain vocabularies.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    subgroups: Vec<String>,
    domains: Vec<String>,
    image: ImageShape,
}

impl Dataset {
    /// Validates `y = 1 ⇔ a ≠ real`, vocabulary membership and image shapes.
    /// `domains[0]` must be [`REAL_DOMAIN`].
    pub fn new(
        samples: Vec<Sample>,
        subgroups: Vec<String>,
        domains: Vec<String>,
        image: ImageShape,
    ) -> Result<Self> {
        if domains.first().map(String::as_str) != Some(REAL_DOMAIN) {
            return Err(Error::Dataset(format!(
                "domain vocabulary must start with `{REAL_DOMAIN}`"
            )));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.y > 1 {
                return Err(Error::Dataset(format!(
                    "sample {i}: label {} is not binary",
                    s.y
                )));
            }
            if (s.y == 1) != (s.a != 0) {
                return Err(Error::Dataset(format!(
                    "sample {i}: label {} inconsistent with domain `{}`",
                    s.y,
                    domains.get(s.a).map(String::as_str).unwrap_or("?")
                )));
            }
            if s.d >= subgroups.len() || s.a >= domains.len() {
                return Err(Error::Dataset(format!(
                    "sample {i}: label outside vocabulary"
                )));
            }
            if s.x.shape() != image.dims() {
                return Err(Error::shape("dataset", &image.dims(), s.x.shape()));
            }
        }
        Ok(Self {
            samples,
            subgroups,
            domains,
            image,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn subgroups(&self) -> &[String] {
        &self.subgroups
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn image(&self) -> ImageShape {
        self.image
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// New dataset holding `indices` (in that order) with the same vocabularies.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            subgroups: self.subgroups.clone(),
            domains: self.domains.clone(),
            image: self.image,
        }
    }
}

/// Count `n_p` of samples per subgroup, indexed by subgroup id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubgroupStats {
    pub counts: Vec<usize>,
}

impl SubgroupStats {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Ids with at least one sample.
    pub fn present(&self) -> impl Iterator<Item = usize> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, _)| i)
    }
}

pub fn subgroup_stats(dataset: &Dataset) -> SubgroupStats {
    let mut counts = vec![0; dataset.subgroups.len()];
    for s in &dataset.samples {
        counts[s.d] += 1;
    }
    SubgroupStats { counts }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubgroupSpec {
    pub name: String,
    /// Relative sampling weight.
    pub weight: f64,
    /// Amplitude of the domain-agnostic artifact pattern present in every
    /// image of this subgroup, real or fake. Non-zero values make the
    /// subgroup's pristine images look partially forged.
    pub artifact_bias: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Amplitudes {
    pub domain_specific: f64,
    pub domain_agnostic: f64,
    pub demographic: f64,
    pub background: f64,
    pub noise: f64,
}

impl Default for Amplitudes {
    fn default() -> Self {
        Self {
            domain_specific: 0.6,
            domain_agnostic: 0.5,
            demographic: 0.6,
            background: 1.0,
            noise: 0.5,
        }
    }
}

/// Recipe for a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub subgroups: Vec<SubgroupSpec>,
    /// Fake domains; [`REAL_DOMAIN`] is implicit.
    pub domains: Vec<String>,
    pub n_real: usize,
    pub n_fake: usize,
    pub image: ImageShape,
    pub amplitudes: Amplitudes,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            subgroups: vec![
                SubgroupSpec {
                    name: "g0".into(),
                    weight: 0.8,
                    artifact_bias: 0.0,
                },
                SubgroupSpec {
                    name: "g1".into(),
                    weight: 0.2,
                    artifact_bias: 0.0,
                },
            ],
            domains: ["df", "f2f", "fs"].iter().map(|s| s.to_string()).collect(),
            n_real: 500,
            n_fake: 500,
            image: ImageShape::default(),
            amplitudes: Amplitudes::default(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Checks every field, reporting all offending ones at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.subgroups.len() < 2 {
            bad.push(String::from("subgroups: need at least 2"));
        }
        for (i, s) in self.subgroups.iter().enumerate() {
            if !(s.weight.is_finite() && s.weight > 0.0) {
                bad.push(format!(
                    "subgroups[{i}].weight: must be positive and finite"
                ));
            }
            if !s.artifact_bias.is_finite() {
                bad.push(format!("subgroups[{i}].artifact_bias: must be finite"));
            }
            if s.name.is_empty() || self.subgroups[..i].iter().any(|o| o.name == s.name) {
                bad.push(format!("subgroups[{i}].name: empty or duplicate"));
            }
        }
        if self.domains.len() < 2 {
            bad.push(String::from("domains: need at least 2 fake domains"));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d == REAL_DOMAIN || d.is_empty() || self.domains[..i].contains(d) {
                bad.push(format!("domains[{i}]: empty, duplicate or reserved"));
            }
        }
        if self.n_real < 1 {
            bad.push(String::from("n_real: must be at least 1"));
        }
        if self.n_fake < 1 {
            bad.push(String::from("n_fake: must be at least 1"));
        }
        let img = self.image;
        if img.channels == 0 || img.height == 0 || img.width == 0 {
            bad.push(String::from("image: extents must be positive"));
        }
        let a = self.amplitudes;
        for (name, v) in [
            ("domain_specific", a.domain_specific),
            ("domain_agnostic", a.domain_agnostic),
            ("demographic", a.demographic),
            ("background", a.background),
            ("noise", a.noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                bad.push(format!(
                    "amplitudes.{name}: must be finite and non-negative"
                ));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad))
        }
    }
}

fn gaussian_pattern(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normalize_rms(v: &mut [f64]) {
    let rms = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64);
    if rms > 0.0 {
        v.iter_mut().for_each(|x| *x /= rms);
    }
}

/// Zero-mean across the set, then unit RMS each. A linear read-out of the set
/// average then carries nothing.
fn centered_patterns(rng: &mut ChaCha8Rng, count: usize, n: usize) -> Vec<Vec<f64>> {
    let mut raw: Vec<Vec<f64>> = (0..count).map(|_| gaussian_pattern(rng, n)).collect();
    let mean: Vec<f64> = (0..n)
        .map(|i| raw.iter().map(|p| p[i]).sum::<f64>() / count as f64)
        .collect();
    for p in raw.iter_mut() {
        p.iter_mut().zip(&mean).for_each(|(x, m)| *x -= m);
        normalize_rms(p);
    }
    raw
}

/// Low-frequency smooth patterns standing in for image content.
fn background_basis(rng: &mut ChaCha8Rng, img: ImageShape, count: usize) -> Vec<Vec<f64>> {
    let tau = 2.0 * core::f64::consts::PI;
    (0..count)
        .map(|_| {
            let fy = rng.random_range(0..3) as f64;
            let fx = rng.random_range(0..3) as f64;
            let phase = rng.random::<f64>() * tau;
            let channel_gain: Vec<f64> = (0..img.channels)
                .map(|_| rng.random_range(0.5..1.5))
                .collect();
            let mut p = Vec::with_capacity(img.numel());
            for g in &channel_gain {
                for y in 0..img.height {
                    for x in 0..img.width {
                        let t = tau
                            * (fy * y as f64 / img.height as f64
                                + fx * x as f64 / img.width as f64)
                            + phase;
                        p.push(g * libm::cos(t));
                    }
                }
            }
            normalize_rms(&mut p);
            p
        })
        .collect()
}

const BACKGROUND_BASIS: usize = 6;

/// Builds a dataset where every image is additive: content + subgroup signal
/// (+ per-subgroup artifact bias) + for fakes the domain-agnostic and the
/// domain-specific artifact patterns, plus Gaussian noise.
///
/// Fakes are assigned to domains cyclically so each domain is equally
/// represented, and domain-specific patterns sum to zero across domains.
pub fn generate_synthetic(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let img = spec.image;
    let n = img.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let basis = background_basis(&mut rng, img, BACKGROUND_BASIS);
    let demographic = centered_patterns(&mut rng, spec.subgroups.len(), n);
    let specific = centered_patterns(&mut rng, spec.domains.len(), n);
    let mut agnostic = gaussian_pattern(&mut rng, n);
    normalize_rms(&mut agnostic);

    let total_weight: f64 = spec.subgroups.iter().map(|s| s.weight).sum();
    let amp = spec.amplitudes;
    let mut samples = Vec::with_capacity(spec.n_real + spec.n_fake);
    for i in 0..spec.n_real + spec.n_fake {
        let fake = i >= spec.n_real;
        let mut u = rng.random::<f64>() * total_weight;
        let mut d = spec.subgroups.len() - 1;
        for (j, s) in spec.subgroups.iter().enumerate() {
            if u < s.weight {
                d = j;
                break;
            }
            u -= s.weight;
        }
        let a = if fake {
            1 + (i - spec.n_real) % spec.domains.len()
        } else {
            0
        };
        let coeffs: Vec<f64> = (0..BACKGROUND_BASIS)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let bias = spec.subgroups[d].artifact_bias;
        let mut x = Vec::with_capacity(n);
        for k in 0..n {
            let mut v: f64 = coeffs
                .iter()
                .zip(&basis)
                .map(|(c, b)| c * b[k])
                .sum::<f64>()
                * amp.background;
            v += amp.demographic * demographic[d][k] + bias * agnostic[k];
            if fake {
                v += amp.domain_agnostic * agnostic[k] + amp.domain_specific * specific[a - 1][k];
            }
            v += amp.noise * rng.sample::<f64, _>(StandardNormal);
            x.push(v);
        }
        samples.push(Sample {
            id: format!("s{i}"),
            x: Tensor::new(img.dims().to_vec(), x)?,
            d,
            a,
            y: fake as u8,
        });
    }
    samples.shuffle(&mut rng);

    let mut domains = vec![String::from(REAL_DOMAIN)];
    domains.extend(spec.domains.iter().cloned());
    Dataset::new(
        samples,
        spec.subgroups.iter().map(|s| s.name.clone()).collect(),
        domains,
        img,
    )
}

/// `(anchor, partner)` index pairs with opposite labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairBatch {
    pub pairs: Vec<(usize, usize)>,
}

impl PairBatch {
    /// Every image of the batch with its pair partner: both sides of each pair
    /// are members.
    pub fn members(&self) -> Vec<(usize, usize)> {
        self.pairs
            .iter()
            .flat_map(|&(a, b)| [(a, b), (b, a)])
            .collect()
    }
}

pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random opposite-label pairing. Every epoch visits each sample once as an
/// anchor; the partner is drawn uniformly from the other class. Epoch `e`
/// depends only on `(seed, e)`, so a run can resume mid-stream.
#[derive(Clone, Debug)]
pub struct PairSampler {
    labels: Vec<u8>,
    reals: Vec<usize>,
    fakes: Vec<usize>,
    pairs_per_batch: usize,
    seed: u64,
}

impl PairSampler {
    /// `batch_size` counts images; a batch holds `batch_size / 2` pairs.
    pub fn new(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        let labels: Vec<u8> = dataset.samples.iter().map(|s| s.y).collect();
        let reals: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
        let fakes: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
        if reals.is_empty() || fakes.is_empty() {
            return Err(Error::Dataset(String::from(
                "pair sampling needs at least one real and one fake sample",
            )));
        }
        Ok(Self {
            labels,
            reals,
            fakes,
            pairs_per_batch: batch_size / 2,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.labels.len().div_ceil(self.pairs_per_batch)
    }

    pub fn epoch(&self, epoch: u64) -> Vec<PairBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, epoch));
        let mut anchors: Vec<usize> = (0..self.labels.len()).collect();
        anchors.shuffle(&mut rng);
        let pairs: Vec<(usize, usize)> = anchors
            .into_iter()
            .map(|a| {
                let pool = if self.labels[a] == 0 {
                    &self.fakes
                } else {
                    &self.reals
                };
                (a, pool[rng.random_range(0..pool.len())])
            })
            .collect();
        pairs
            .chunks(self.pairs_per_batch)
            .map(|c| PairBatch { pairs: c.to_vec() })
            .collect()
    }
}
