//! Synthetic multi-head tasks drawn from the shared-covariance Gaussian model.
//!
//! Every head `m` has `N` class means placed at distance `separation[m] / √2`
//! from the origin along mutually orthogonal random directions (random unit
//! directions when `N > D`), so any two classes sit `separation[m]` apart.
//! All classes of a head share one covariance: a random rotation of a
//! diagonal spectrum spanning `cov_anisotropy : 1`, scaled to unit mean
//! variance per axis. Separation is therefore measured in within-class
//! standard deviations.
//!
//! Class-text vectors, used to exercise text heads, mix each class direction
//! with random noise according to `text_alignment[m]` (0 is pure noise, 1 is
//! the class direction itself).
//!
//! Head `m` draws from its own random stream, so heads can be generated in
//! parallel and adding heads never changes existing ones.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{HecError, Result};
use crate::feature_store::{FeatureBank, Manifest, PromptSpec, SampleKind, FORMAT_VERSION};
use crate::parallel;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_heads: usize,
    pub head_dim: usize,
    pub ways: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    /// Per-head distance between class means, in within-class std units.
    pub separation: Vec<f64>,
    /// Ratio of largest to smallest covariance eigenvalue.
    pub cov_anisotropy: f64,
    pub seed: u64,
    /// Per-head weight of the class direction in its class-text vector.
    /// Empty means all zeros.
    #[serde(default)]
    pub text_alignment: Vec<f64>,
}

impl SynthSpec {
    /// `num_heads` heads at zero separation except the `planted` ones.
    pub fn planted(
        num_heads: usize,
        head_dim: usize,
        ways: usize,
        shots: usize,
        queries_per_class: usize,
        planted: &[(usize, f64)],
        seed: u64,
    ) -> Self {
        let mut separation = vec![0.0; num_heads];
        for &(m, s) in planted {
            separation[m] = s;
        }
        SynthSpec {
            num_heads,
            head_dim,
            ways,
            shots,
            queries_per_class,
            separation,
            cov_anisotropy: 1.0,
            seed,
            text_alignment: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.head_dim == 0 || self.ways == 0 || self.shots == 0 {
            return Err(HecError::InvalidParameter(
                "num_heads, head_dim, ways and shots must be ≥ 1".into(),
            ));
        }
        if self.separation.len() != self.num_heads {
            return Err(HecError::InvalidParameter(format!(
                "{} separations for {} heads",
                self.separation.len(),
                self.num_heads
            )));
        }
        if self.separation.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(HecError::InvalidParameter("separations must be finite and ≥ 0".into()));
        }
        if !(self.cov_anisotropy >= 1.0 && self.cov_anisotropy.is_finite()) {
            return Err(HecError::InvalidParameter(format!(
                "cov_anisotropy must be ≥ 1, got {}",
                self.cov_anisotropy
            )));
        }
        if !self.text_alignment.is_empty() {
            if self.text_alignment.len() != self.num_heads {
                return Err(HecError::InvalidParameter(format!(
                    "{} text alignments for {} heads",
                    self.text_alignment.len(),
                    self.num_heads
                )));
            }
            if self.text_alignment.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(HecError::InvalidParameter("text alignments must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    fn alignment(&self, head: usize) -> f64 {
        self.text_alignment.get(head).copied().unwrap_or(0.0)
    }
}

/// One generated task.
#[derive(Debug, Clone)]
pub struct SynthTask {
    pub support: FeatureBank,
    pub query: FeatureBank,
    pub support_labels: Vec<usize>,
    pub query_labels: Vec<usize>,
    /// One class-text vector per class and head.
    pub class_text: FeatureBank,
}

struct HeadModel {
    directions: Vec<DVector<f64>>,
    means: Vec<DVector<f64>>,
    cov_sqrt: DMatrix<f64>,
    text: Vec<DVector<f64>>,
}

fn normal_vector(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn spectrum(d: usize, anisotropy: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..d)
        .map(|j| if d == 1 { 1.0 } else { anisotropy.powf(-(j as f64) / (d - 1) as f64) })
        .collect();
    let mean = raw.iter().sum::<f64>() / d as f64;
    raw.into_iter().map(|v| v / mean).collect()
}

fn head_model(spec: &SynthSpec, head: usize, rng: &mut ChaCha8Rng) -> HeadModel {
    let d = spec.head_dim;
    let n = spec.ways;

    let mut directions: Vec<DVector<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v = normal_vector(rng, d);
        if n <= d {
            for u in &directions {
                let proj = u.dot(&v);
                v.axpy(-proj, u, 1.0);
            }
        }
        let norm = v.norm();
        directions.push(if norm > 0.0 { v / norm } else { DVector::zeros(d) });
    }
    let radius = spec.separation[head] / std::f64::consts::SQRT_2;
    let means = directions.iter().map(|u| u * radius).collect();

    let rotation = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal)).qr().q();
    let scales = DVector::from_vec(spectrum(d, spec.cov_anisotropy).into_iter().map(f64::sqrt).collect());
    let cov_sqrt = rotation * DMatrix::from_diagonal(&scales);

    let a = spec.alignment(head);
    let text = directions
        .iter()
        .map(|u| {
            let noise = normal_vector(rng, d);
            let noise = noise.normalize();
            let t = u * a + noise * (1.0 - a);
            let norm = t.norm();
            if norm > 0.0 { t / norm } else { t }
        })
        .collect();

    HeadModel { directions, means, cov_sqrt, text }
}

/// Covariance shared by the classes of head `head` (before normalization).
pub fn head_covariance(spec: &SynthSpec, head: usize) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, head as u64 + 1);
    let model = head_model(spec, head, &mut rng);
    Ok(&model.cov_sqrt * model.cov_sqrt.transpose())
}

/// Class-mean directions of head `head` (unit vectors).
pub fn class_directions(spec: &SynthSpec, head: usize) -> Result<Vec<DVector<f64>>> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, head as u64 + 1);
    Ok(head_model(spec, head, &mut rng).directions)
}

struct HeadDraws {
    samples: Vec<DVector<f64>>,
    text: Vec<DVector<f64>>,
}

fn draw_head(spec: &SynthSpec, head: usize, counts: &[usize]) -> HeadDraws {
    let mut rng = rng::stream(spec.seed, head as u64 + 1);
    let model = head_model(spec, head, &mut rng);
    let mut samples = Vec::with_capacity(counts.iter().sum::<usize>() * spec.ways);
    for &per_class in counts {
        for c in 0..spec.ways {
            for _ in 0..per_class {
                let z = normal_vector(&mut rng, spec.head_dim);
                samples.push(&model.means[c] + &model.cov_sqrt * z);
            }
        }
    }
    HeadDraws { samples, text: model.text }
}

fn assemble(per_head: &[HeadDraws], range: std::ops::Range<usize>, d: usize, kind: SampleKind) -> Result<FeatureBank> {
    let m = per_head.len();
    let mut data = Vec::with_capacity(range.len() * m * d);
    for s in range.clone() {
        for head in per_head {
            data.extend(head.samples[s].iter().map(|&v| v as f32));
        }
    }
    FeatureBank::new(data, range.len(), m, d, false, kind)
}

fn text_bank(per_head: &[HeadDraws], ways: usize, d: usize) -> Result<FeatureBank> {
    let mut data = Vec::with_capacity(ways * per_head.len() * d);
    for c in 0..ways {
        for head in per_head {
            data.extend(head.text[c].iter().map(|&v| v as f32));
        }
    }
    FeatureBank::new(data, ways, per_head.len(), d, false, SampleKind::ClassText)
}

fn class_major_labels(ways: usize, per_class: usize) -> Vec<usize> {
    (0..ways).flat_map(|c| std::iter::repeat_n(c, per_class)).collect()
}

/// Like [`generate`] but without the final L2 normalization.
pub fn generate_raw(spec: &SynthSpec) -> Result<SynthTask> {
    spec.validate()?;
    if spec.queries_per_class == 0 {
        return Err(HecError::InvalidParameter("queries_per_class must be ≥ 1".into()));
    }
    let counts = [spec.shots, spec.queries_per_class];
    let per_head = parallel::map_indexed(spec.num_heads, |m| draw_head(spec, m, &counts));
    let n_support = spec.ways * spec.shots;
    let n_total = n_support + spec.ways * spec.queries_per_class;
    Ok(SynthTask {
        support: assemble(&per_head, 0..n_support, spec.head_dim, SampleKind::Image)?,
        query: assemble(&per_head, n_support..n_total, spec.head_dim, SampleKind::Image)?,
        support_labels: class_major_labels(spec.ways, spec.shots),
        query_labels: class_major_labels(spec.ways, spec.queries_per_class),
        class_text: text_bank(&per_head, spec.ways, spec.head_dim)?,
    })
}

/// Draws a support and a query bank (class-major order) plus class-text
/// vectors, all L2-normalized per head.
pub fn generate(spec: &SynthSpec) -> Result<SynthTask> {
    let raw = generate_raw(spec)?;
    Ok(SynthTask {
        support: raw.support.l2_normalize().0,
        query: raw.query.l2_normalize().0,
        class_text: raw.class_text.l2_normalize().0,
        ..raw
    })
}

/// A labelled synthetic dataset from which episodes can be sampled.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub images: FeatureBank,
    pub image_manifest: Manifest,
    pub class_text: FeatureBank,
    pub class_manifest: Manifest,
}

/// `spec.ways` classes with `samples_per_class` normalized samples each;
/// `spec.shots` and `spec.queries_per_class` are ignored. The head axis is
/// reported as `layers × num_heads / layers`.
pub fn generate_dataset(spec: &SynthSpec, samples_per_class: usize, layers: usize) -> Result<SynthDataset> {
    spec.validate()?;
    if samples_per_class == 0 {
        return Err(HecError::InvalidParameter("samples_per_class must be ≥ 1".into()));
    }
    if layers == 0 || !spec.num_heads.is_multiple_of(layers) {
        return Err(HecError::InvalidParameter(format!(
            "{} heads cannot be split into {layers} layers",
            spec.num_heads
        )));
    }
    let per_head = parallel::map_indexed(spec.num_heads, |m| draw_head(spec, m, &[samples_per_class]));
    let n = spec.ways * samples_per_class;
    let images = assemble(&per_head, 0..n, spec.head_dim, SampleKind::Image)?.l2_normalize().0;
    let class_text = text_bank(&per_head, spec.ways, spec.head_dim)?.l2_normalize().0;

    let base = Manifest {
        model_id: "synthetic".into(),
        num_layers: layers,
        heads_per_layer: spec.num_heads / layers,
        head_dim: spec.head_dim,
        class_names: (0..spec.ways).map(|c| format!("class_{c}")).collect(),
        labels: None,
        prompt_record: PromptSpec::unconditioned(),
        dataset_name: format!("synthetic-seed-{}", spec.seed),
        format_version: FORMAT_VERSION,
    };
    let image_manifest = Manifest { labels: Some(class_major_labels(spec.ways, samples_per_class)), ..base.clone() };
    image_manifest.validate_against(&images)?;
    base.validate_against(&class_text)?;
    Ok(SynthDataset { images, image_manifest, class_text, class_manifest: base })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_banks() {
        let spec = SynthSpec::planted(4, 3, 3, 2, 2, &[(1, 3.0)], 77);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.support, b.support);
        assert_eq!(a.query, b.query);
        assert_eq!(a.class_text, b.class_text);
        let c = generate(&SynthSpec { seed: 78, ..spec }).unwrap();
        assert_ne!(a.support, c.support);
    }

    #[test]
    fn shapes_and_label_counts() {
        let spec = SynthSpec::planted(5, 4, 3, 2, 4, &[], 1);
        let t = generate(&spec).unwrap();
        assert_eq!((t.support.samples(), t.support.heads(), t.support.dim()), (6, 5, 4));
        assert_eq!(t.query.samples(), 12);
        for c in 0..3 {
            assert_eq!(t.support_labels.iter().filter(|&&y| y == c).count(), 2);
            assert_eq!(t.query_labels.iter().filter(|&&y| y == c).count(), 4);
        }
        assert!(t.support.is_normalized() && t.query.is_normalized());
        assert_eq!(t.class_text.samples(), 3);
    }

    #[test]
    fn pairwise_mean_distance_equals_separation() {
        let spec = SynthSpec::planted(1, 8, 5, 1, 1, &[(0, 5.0)], 3);
        let dirs = class_directions(&spec, 0).unwrap();
        for i in 0..5 {
            for j in (i + 1)..5 {
                let dist = (&dirs[i] - &dirs[j]).norm() * 5.0 / std::f64::consts::SQRT_2;
                assert!((dist - 5.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn heads_do_not_depend_on_head_count() {
        let small = SynthSpec::planted(2, 3, 2, 2, 1, &[], 5);
        let large = SynthSpec::planted(4, 3, 2, 2, 1, &[], 5);
        let a = generate(&small).unwrap();
        let b = generate(&large).unwrap();
        assert_eq!(a.support.slice(3, 1), b.support.slice(3, 1));
    }

    #[test]
    fn covariance_spectrum_follows_anisotropy() {
        let spec = SynthSpec { cov_anisotropy: 4.0, ..SynthSpec::planted(1, 3, 2, 1, 1, &[], 9) };
        let cov = head_covariance(&spec, 0).unwrap();
        let mut eig: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((eig[2] / eig[0] - 4.0).abs() < 1e-9);
        assert!((cov.trace() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_specs() {
        let mut spec = SynthSpec::planted(2, 3, 2, 2, 1, &[], 5);
        spec.separation = vec![1.0];
        assert!(generate(&spec).is_err());
        let spec = SynthSpec { cov_anisotropy: 0.5, ..SynthSpec::planted(2, 3, 2, 2, 1, &[], 5) };
        assert!(generate(&spec).is_err());
        let spec = SynthSpec { queries_per_class: 0, ..SynthSpec::planted(2, 3, 2, 2, 1, &[], 5) };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn dataset_manifests_validate() {
        let spec = SynthSpec::planted(6, 4, 3, 1, 1, &[(0, 4.0)], 2);
        let ds = generate_dataset(&spec, 5, 2).unwrap();
        assert_eq!(ds.images.samples(), 15);
        assert_eq!(ds.image_manifest.num_heads(), 6);
        assert_eq!(ds.class_text.samples(), 3);
        assert!(generate_dataset(&spec, 5, 4).is_err());
    }
}
