//! Synthetic classification and re-identification datasets.
//!
//! Images are rendered from latent codes through a fixed bank of smooth
//! coloured sinusoid patterns followed by `tanh` and pixel noise. The bank
//! depends only on `renderer_seed`, so source and target datasets share
//! low-level structure the way natural images do.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    /// Classes for a source dataset, identities for a re-id dataset.
    pub n_identities: usize,
    pub n_cameras: usize,
    pub samples_per_identity_per_camera: usize,
    pub image: [usize; 3],
    pub prototype_dim: usize,
    /// Spread of identity prototypes; 0 makes every identity identical.
    pub prototype_scale: f64,
    /// Within-identity latent jitter.
    pub intra_scale: f64,
    pub camera_strength: f64,
    pub noise: f64,
    /// Fraction of identities used for training (re-id only).
    pub train_fraction: f64,
    /// Identities carved out of the training share for validation (re-id only).
    pub val_identities: usize,
    pub renderer_seed: u64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            n_identities: 128,
            n_cameras: 3,
            samples_per_identity_per_camera: 4,
            image: [3, 16, 8],
            prototype_dim: 12,
            prototype_scale: 1.0,
            intra_scale: 0.25,
            camera_strength: 0.2,
            noise: 0.05,
            train_fraction: 0.5,
            val_identities: 8,
            renderer_seed: 0,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    /// A classification-flavoured default: more classes and samples, one camera.
    pub fn source_default() -> Self {
        SyntheticDatasetSpec {
            n_identities: 64,
            n_cameras: 1,
            samples_per_identity_per_camera: 16,
            camera_strength: 0.0,
            seed: 1000,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_identities == 0 || self.samples_per_identity_per_camera == 0 || self.n_cameras == 0 {
            return Err(Error::Config("dataset needs identities, cameras and samples".into()));
        }
        if self.image.contains(&0) || self.prototype_dim == 0 {
            return Err(Error::Config("dataset image shape and prototype_dim must be non-zero".into()));
        }
        let finite = [self.prototype_scale, self.intra_scale, self.camera_strength, self.noise];
        if finite.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("dataset scales must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Images with identity (class) and camera labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub images: Tensor,
    pub ids: Vec<usize>,
    pub cams: Vec<usize>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers rows `idx` into a new `[n, C, H, W]` tensor.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let per = self.images.numel() / self.len().max(1);
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let [c, h, w] = self.image_shape();
        Tensor::new(vec![idx.len(), c, h, w], data).expect("gathered rows match shape")
    }

    /// Stable byte view of the images, for determinism checks.
    pub fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for v in self.images.data() {
            h.update(&v.to_le_bytes());
        }
        for (i, c) in self.ids.iter().zip(&self.cams) {
            h.update(&(*i as u64).to_le_bytes());
            h.update(&(*c as u64).to_le_bytes());
        }
        h.finalize()
    }
}

#[derive(Clone, Debug)]
pub struct ClassificationDataset {
    pub train: ImageSet,
    pub test: ImageSet,
    pub classes: usize,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ReidDataset {
    /// Labels are re-indexed to `0..train_ids`.
    pub train: ImageSet,
    pub train_ids: usize,
    pub val_gallery: ImageSet,
    pub val_query: ImageSet,
    pub gallery: ImageSet,
    pub query: ImageSet,
    pub warnings: Vec<String>,
}

struct Renderer {
    /// `[latent][pixel]` patterns.
    bank: Vec<Vec<f32>>,
    gain: f64,
}

impl Renderer {
    fn new(spec: &SyntheticDatasetSpec) -> Self {
        let [c, h, w] = spec.image;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.renderer_seed ^ 0x5eed_0f1a_6e00);
        let bank = (0..spec.prototype_dim)
            .map(|_| {
                let fy = rng.random_range(0.0..2.5);
                let fx = rng.random_range(0.0..1.5);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let colour: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut p = Vec::with_capacity(c * h * w);
                for col in &colour {
                    for y in 0..h {
                        for x in 0..w {
                            let t = std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + phase;
                            p.push((col * t.sin()) as f32);
                        }
                    }
                }
                p
            })
            .collect();
        Renderer {
            bank,
            gain: 1.5 / (spec.prototype_dim as f64).sqrt(),
        }
    }

    fn render(&self, z: &[f64], noise: f64, rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
        let n = self.bank[0].len();
        for p in 0..n {
            let s: f64 = z.iter().zip(&self.bank).map(|(zk, b)| zk * f64::from(b[p])).sum();
            let e: f64 = rng.sample(StandardNormal);
            out.push(((self.gain * s).tanh() + noise * e) as f32);
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Per-camera latent affine map `z -> (I + s G) z + s b`.
struct Camera {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl Camera {
    fn new(rng: &mut ChaCha8Rng, d: usize, s: f64) -> Self {
        let scale = s / (d as f64).sqrt();
        let a = (0..d)
            .map(|i| {
                let mut row = gaussian(rng, d, scale);
                row[i] += 1.0;
                row
            })
            .collect();
        Camera { a, b: gaussian(rng, d, s) }
    }

    fn apply(&self, z: &[f64]) -> Vec<f64> {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(z).map(|(a, z)| a * z).sum::<f64>() + b)
            .collect()
    }
}

struct Sample {
    id: usize,
    cam: usize,
    pixels: Vec<f32>,
}

fn generate(spec: &SyntheticDatasetSpec) -> Result<(Vec<Sample>, Vec<String>)> {
    spec.validate()?;
    let renderer = Renderer::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.prototype_dim;
    let protos: Vec<Vec<f64>> = (0..spec.n_identities).map(|_| gaussian(&mut rng, d, spec.prototype_scale)).collect();
    let cams: Vec<Camera> = (0..spec.n_cameras).map(|_| Camera::new(&mut rng, d, spec.camera_strength)).collect();
    let mut warnings = Vec::new();
    if spec.n_identities > 1 && spec.prototype_scale == 0.0 {
        warnings.push("identity prototypes coincide: labels are not learnable beyond chance".to_string());
    }
    let mut samples = Vec::new();
    for (id, z) in protos.iter().enumerate() {
        for (cam, camera) in cams.iter().enumerate() {
            let zc = camera.apply(z);
            for _ in 0..spec.samples_per_identity_per_camera {
                let jitter = gaussian(&mut rng, d, spec.intra_scale);
                let zs: Vec<f64> = zc.iter().zip(&jitter).map(|(a, b)| a + b).collect();
                let mut pixels = Vec::new();
                renderer.render(&zs, spec.noise, &mut rng, &mut pixels);
                samples.push(Sample { id, cam, pixels });
            }
        }
    }
    Ok((samples, warnings))
}

fn collect(spec: &SyntheticDatasetSpec, samples: &[&Sample], relabel: impl Fn(usize) -> usize) -> ImageSet {
    let [c, h, w] = spec.image;
    let data = samples.iter().flat_map(|s| s.pixels.iter().copied()).collect();
    ImageSet {
        images: Tensor::new(vec![samples.len(), c, h, w], data).expect("rendered sizes match"),
        ids: samples.iter().map(|s| relabel(s.id)).collect(),
        cams: samples.iter().map(|s| s.cam).collect(),
    }
}

/// Balanced classification data; the last quarter of each class's samples
/// (at least one) is held out for testing.
pub fn gen_source_dataset(spec: &SyntheticDatasetSpec) -> Result<ClassificationDataset> {
    if spec.n_identities < 2 {
        return Err(Error::Config("a classification dataset needs at least two classes".into()));
    }
    let (samples, warnings) = generate(spec)?;
    let per_class = spec.n_cameras * spec.samples_per_identity_per_camera;
    let held = (per_class / 4).max(1).min(per_class - 1);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, s) in samples.iter().enumerate() {
        if i % per_class >= per_class - held {
            test.push(s);
        } else {
            train.push(s);
        }
    }
    if train.is_empty() {
        return Err(Error::Config("classification dataset needs at least two samples per class".into()));
    }
    Ok(ClassificationDataset {
        train: collect(spec, &train, |i| i),
        test: collect(spec, &test, |i| i),
        classes: spec.n_identities,
        warnings,
    })
}

/// Splits identities into train / validation / test. Test and validation
/// identities use the first sample of every camera as a query and the rest
/// as gallery.
pub fn gen_target_reid_dataset(spec: &SyntheticDatasetSpec) -> Result<ReidDataset> {
    if spec.n_cameras < 2 {
        return Err(Error::Config("re-identification needs at least two cameras".into()));
    }
    if spec.samples_per_identity_per_camera < 2 {
        return Err(Error::Config("re-identification needs two samples per identity and camera".into()));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!("train_fraction {} not in (0, 1)", spec.train_fraction)));
    }
    let n_train_total = ((spec.n_identities as f64 * spec.train_fraction).round() as usize).max(1);
    if n_train_total >= spec.n_identities || spec.val_identities >= n_train_total {
        return Err(Error::Config(format!(
            "{} identities cannot host {} training ids ({} for validation) and a test split",
            spec.n_identities, n_train_total, spec.val_identities
        )));
    }
    let n_train = n_train_total - spec.val_identities;
    let (samples, warnings) = generate(spec)?;
    let role = |id: usize| {
        if id < n_train {
            0
        } else if id < n_train_total {
            1
        } else {
            2
        }
    };
    let per = spec.samples_per_identity_per_camera;
    let mut parts: [Vec<&Sample>; 5] = Default::default();
    for (i, s) in samples.iter().enumerate() {
        let first = i % per == 0;
        let slot = match (role(s.id), first) {
            (0, _) => 0,
            (1, true) => 1,
            (1, false) => 2,
            (_, true) => 3,
            (_, false) => 4,
        };
        parts[slot].push(s);
    }
    let [train, vq, vg, q, g] = parts;
    Ok(ReidDataset {
        train: collect(spec, &train, |i| i),
        train_ids: n_train,
        val_query: collect(spec, &vq, |i| i),
        val_gallery: collect(spec, &vg, |i| i),
        query: collect(spec, &q, |i| i),
        gallery: collect(spec, &g, |i| i),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn deterministic_for_seed() {
        let spec = SyntheticDatasetSpec::default();
        let a = gen_target_reid_dataset(&spec).unwrap();
        let b = gen_target_reid_dataset(&spec).unwrap();
        assert_eq!(a.train.fingerprint(), b.train.fingerprint());
        assert_eq!(a.gallery.fingerprint(), b.gallery.fingerprint());
        let other = gen_target_reid_dataset(&SyntheticDatasetSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.train.fingerprint(), other.train.fingerprint());
    }

    #[test]
    fn identity_splits_are_disjoint() {
        let d = gen_target_reid_dataset(&SyntheticDatasetSpec::default()).unwrap();
        let train: BTreeSet<_> = d.train.ids.iter().collect();
        let val: BTreeSet<_> = d.val_query.ids.iter().chain(&d.val_gallery.ids).collect();
        let test: BTreeSet<_> = d.query.ids.iter().chain(&d.gallery.ids).collect();
        assert!(train.is_disjoint(&test) && train.is_disjoint(&val) && val.is_disjoint(&test));
        assert_eq!(train.len(), d.train_ids);
        assert!(d.train.ids.iter().all(|&i| i < d.train_ids));
    }

    #[test]
    fn degenerate_specs() {
        let single = SyntheticDatasetSpec {
            n_cameras: 1,
            ..Default::default()
        };
        assert!(gen_target_reid_dataset(&single).is_err());
        let empty = SyntheticDatasetSpec {
            n_identities: 0,
            ..SyntheticDatasetSpec::source_default()
        };
        assert!(gen_source_dataset(&empty).is_err());
        let same = SyntheticDatasetSpec {
            n_identities: 2,
            prototype_scale: 0.0,
            noise: 0.0,
            intra_scale: 0.0,
            ..SyntheticDatasetSpec::source_default()
        };
        let d = gen_source_dataset(&same).unwrap();
        assert!(!d.warnings.is_empty());
        // both classes render to the same image
        let per = d.train.images.numel() / d.train.len();
        let data = d.train.images.data();
        let last = d.train.len() - 1;
        assert_eq!(&data[..per], &data[last * per..]);
    }
}
