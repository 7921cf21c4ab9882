//! Feature banks, their on-disk format, and seeded episode sampling.
//!
//! A bank is a dense `[sample][head][dim]` tensor of `f32`. On disk it is
//! stored as an HECF file:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `b"HECF"`                         |
//! | 4      | 4    | format version, `u32` LE (currently 1)  |
//! | 8      | 4    | `S` samples, `u32` LE                   |
//! | 12     | 4    | `M` heads, `u32` LE                     |
//! | 16     | 4    | `D` dims, `u32` LE                      |
//! | 20     | 1    | sample kind (0 image, 1 class text, 2 summary token) |
//! | 21     | 1    | normalized flag (0/1)                   |
//! | 22     | 2    | reserved, zero                          |
//! | 24     | S·M·D·4 | payload, `f32` LE                    |
//!
//! Metadata lives in a JSON sidecar next to the payload
//! (`bank.hecf` → `bank.manifest.json`).

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{HecError, Result};
use crate::rng;

pub const MAGIC: [u8; 4] = *b"HECF";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

/// Allowed deviation from unit norm for a bank flagged as normalized.
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Image,
    ClassText,
    SummaryToken,
}

impl SampleKind {
    fn code(self) -> u8 {
        match self {
            SampleKind::Image => 0,
            SampleKind::ClassText => 1,
            SampleKind::SummaryToken => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(SampleKind::Image),
            1 => Ok(SampleKind::ClassText),
            2 => Ok(SampleKind::SummaryToken),
            c => Err(HecError::InvalidBank(format!("unknown sample kind {c}"))),
        }
    }
}

/// Dense `[S × M × D]` tensor of attention vectors (or summary embeddings).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    data: Vec<f32>,
    samples: usize,
    heads: usize,
    dim: usize,
    normalized: bool,
    kind: SampleKind,
}

impl FeatureBank {
    /// Builds a bank and checks every invariant.
    pub fn new(
        data: Vec<f32>,
        samples: usize,
        heads: usize,
        dim: usize,
        normalized: bool,
        kind: SampleKind,
    ) -> Result<Self> {
        let bank = FeatureBank { data, samples, heads, dim, normalized, kind };
        bank.validate()?;
        Ok(bank)
    }

    /// Builds a bank from `f64` values, rounding to `f32`.
    pub fn from_f64(
        data: &[f64],
        samples: usize,
        heads: usize,
        dim: usize,
        normalized: bool,
        kind: SampleKind,
    ) -> Result<Self> {
        Self::new(data.iter().map(|&v| v as f32).collect(), samples, heads, dim, normalized, kind)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.heads == 0 || self.dim == 0 {
            return Err(HecError::InvalidBank(format!(
                "all dimensions must be ≥ 1, got S={} M={} D={}",
                self.samples, self.heads, self.dim
            )));
        }
        let expected = self.samples * self.heads * self.dim;
        if self.data.len() != expected {
            return Err(HecError::ShapeMismatch(format!(
                "payload has {} values, shape needs {expected}",
                self.data.len()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(HecError::NonFinite("feature bank"));
        }
        if self.normalized {
            for s in 0..self.samples {
                for m in 0..self.heads {
                    let n = norm(self.slice(s, m));
                    if n != 0.0 && (n - 1.0).abs() > NORM_TOLERANCE {
                        return Err(HecError::InvalidBank(format!(
                            "slice [{s},{m}] has norm {n}, bank is flagged normalized"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn kind(&self) -> SampleKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Attention vector of head `head` for sample `sample`.
    pub fn slice(&self, sample: usize, head: usize) -> &[f32] {
        let start = (sample * self.heads + head) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// All heads of one sample, `M·D` values in head-major order.
    pub fn sample(&self, sample: usize) -> &[f32] {
        let stride = self.heads * self.dim;
        &self.data[sample * stride..(sample + 1) * stride]
    }

    /// `[rows × D]` matrix of head `head` over the given samples, widened to `f64`.
    pub fn head_matrix(&self, head: usize, rows: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), self.dim, |i, j| self.slice(rows[i], head)[j] as f64)
    }

    /// `[rows × M·D]` matrix with every head of each sample concatenated.
    pub fn flat_matrix(&self, rows: &[usize]) -> DMatrix<f64> {
        let width = self.heads * self.dim;
        DMatrix::from_fn(rows.len(), width, |i, j| self.sample(rows[i])[j] as f64)
    }

    /// Copies the given samples into a new bank.
    pub fn select(&self, rows: &[usize]) -> Result<FeatureBank> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.samples) {
            return Err(HecError::ShapeMismatch(format!(
                "row {bad} out of range for {} samples",
                self.samples
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * self.heads * self.dim);
        for &r in rows {
            data.extend_from_slice(self.sample(r));
        }
        FeatureBank::new(data, rows.len(), self.heads, self.dim, self.normalized, self.kind)
    }

    /// Divides every head slice by its L2 norm. Zero slices stay zero and are
    /// counted in the returned diagnostic.
    pub fn l2_normalize(&self) -> (FeatureBank, NormalizeReport) {
        let mut data = self.data.clone();
        let mut zero_slices = 0;
        for chunk in data.chunks_mut(self.dim) {
            let n = norm(chunk);
            if n == 0.0 {
                zero_slices += 1;
                continue;
            }
            for v in chunk.iter_mut() {
                *v = (*v as f64 / n) as f32;
            }
        }
        let bank = FeatureBank {
            data,
            samples: self.samples,
            heads: self.heads,
            dim: self.dim,
            normalized: true,
            kind: self.kind,
        };
        (bank, NormalizeReport { zero_slices })
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.samples as u32).to_le_bytes());
        out.extend_from_slice(&(self.heads as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.push(self.kind.code());
        out.push(self.normalized as u8);
        out.extend_from_slice(&[0, 0]);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn from_bytes(bytes: &[u8]) -> Result<FeatureBank> {
        if bytes.len() < 4 {
            return Err(HecError::Truncated { expected: HEADER_LEN, found: bytes.len() });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(HecError::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN {
            return Err(HecError::Truncated { expected: HEADER_LEN, found: bytes.len() });
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != FORMAT_VERSION {
            return Err(HecError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let (samples, heads, dim) = (word(8) as usize, word(12) as usize, word(16) as usize);
        let kind = SampleKind::from_code(bytes[20])?;
        let normalized = match bytes[21] {
            0 => false,
            1 => true,
            v => return Err(HecError::InvalidBank(format!("normalized flag {v}"))),
        };
        let count = samples
            .checked_mul(heads)
            .and_then(|v| v.checked_mul(dim))
            .ok_or_else(|| HecError::InvalidBank("shape overflows".into()))?;
        let expected = HEADER_LEN + count * 4;
        if bytes.len() < expected {
            return Err(HecError::Truncated { expected, found: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(HecError::InvalidBank(format!(
                "{} trailing bytes after payload",
                bytes.len() - expected
            )));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        FeatureBank::new(data, samples, heads, dim, normalized, kind)
    }
}

/// Outcome of [`FeatureBank::l2_normalize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormalizeReport {
    pub zero_slices: usize,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningLevel {
    None,
    Task,
    Domain,
    ClassList,
}

/// The text prompt the features were extracted under.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub conditioning_level: ConditioningLevel,
    pub prompt_text: String,
    pub class_list_appended: bool,
}

impl PromptSpec {
    pub fn unconditioned() -> Self {
        PromptSpec {
            conditioning_level: ConditioningLevel::None,
            prompt_text: "Describe this image.".to_string(),
            class_list_appended: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conditioning_level == ConditioningLevel::ClassList && !self.class_list_appended {
            return Err(HecError::InvalidManifest(
                "class_list conditioning requires class_list_appended".into(),
            ));
        }
        Ok(())
    }
}

/// Sidecar metadata for a bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model_id: String,
    pub num_layers: usize,
    pub heads_per_layer: usize,
    pub head_dim: usize,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    pub prompt_record: PromptSpec,
    pub dataset_name: String,
    pub format_version: u32,
}

impl Manifest {
    pub fn num_heads(&self) -> usize {
        self.num_layers * self.heads_per_layer
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `(layer, head)` of a flattened head index (layer-major).
    pub fn head_position(&self, head: usize) -> (usize, usize) {
        (head / self.heads_per_layer, head % self.heads_per_layer)
    }

    /// Checks the manifest on its own and against the bank it describes.
    pub fn validate_against(&self, bank: &FeatureBank) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(HecError::VersionMismatch {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        self.prompt_record.validate()?;
        match bank.kind() {
            SampleKind::Image | SampleKind::ClassText => {
                if self.num_heads() != bank.heads() {
                    return Err(HecError::ShapeMismatch(format!(
                        "manifest L·H = {}·{} = {} but bank has {} heads",
                        self.num_layers,
                        self.heads_per_layer,
                        self.num_heads(),
                        bank.heads()
                    )));
                }
                if self.head_dim != bank.dim() {
                    return Err(HecError::ShapeMismatch(format!(
                        "manifest head_dim {} but bank has D={}",
                        self.head_dim,
                        bank.dim()
                    )));
                }
            }
            SampleKind::SummaryToken => {
                if bank.heads() != 1 || bank.dim() != self.heads_per_layer * self.head_dim {
                    return Err(HecError::ShapeMismatch(format!(
                        "summary bank must be [S × 1 × H·D = {}], got [{} × {} × {}]",
                        self.heads_per_layer * self.head_dim,
                        bank.samples(),
                        bank.heads(),
                        bank.dim()
                    )));
                }
            }
        }
        match (&self.labels, bank.kind()) {
            (Some(_), SampleKind::ClassText) => {
                return Err(HecError::InvalidManifest("class-text banks carry no labels".into()))
            }
            (Some(labels), _) => {
                if labels.len() != bank.samples() {
                    return Err(HecError::ShapeMismatch(format!(
                        "{} labels for {} samples",
                        labels.len(),
                        bank.samples()
                    )));
                }
                if let Some(&bad) = labels.iter().find(|&&y| y >= self.num_classes()) {
                    return Err(HecError::InvalidManifest(format!(
                        "label {bad} outside [0, {})",
                        self.num_classes()
                    )));
                }
            }
            (None, _) => {}
        }
        if bank.kind() == SampleKind::ClassText && bank.samples() != self.num_classes() {
            return Err(HecError::ShapeMismatch(format!(
                "class-text bank has {} samples for {} classes",
                bank.samples(),
                self.num_classes()
            )));
        }
        Ok(())
    }
}

/// Location of the JSON sidecar for a bank path.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

/// Writes the HECF payload and its JSON sidecar.
pub fn write_bank(bank: &FeatureBank, manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    bank.validate()?;
    manifest.validate_against(bank)?;
    fs::write(path, bank.to_bytes()).map_err(|e| HecError::io(path, e))?;
    let sidecar = manifest_path(path);
    let mut json = serde_json::to_string_pretty(manifest)?;
    json.push('\n');
    fs::write(&sidecar, json).map_err(|e| HecError::io(&sidecar, e))?;
    Ok(())
}

/// Reads and validates a bank and its sidecar.
pub fn read_bank(path: impl AsRef<Path>) -> Result<(FeatureBank, Manifest)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| HecError::io(path, e))?;
    let bank = FeatureBank::from_bytes(&bytes)?;
    let sidecar = manifest_path(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| HecError::io(&sidecar, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| HecError::InvalidManifest(format!("{}: {e}", sidecar.display())))?;
    manifest.validate_against(&bank)?;
    Ok((bank, manifest))
}

/// One sampled N-way K-shot task. Indices point into the dataset bank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub ways: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub class_subset: Vec<usize>,
    pub support_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
    pub seed: u64,
}

impl Episode {
    /// Episode-local labels (position in `class_subset`) of the support set.
    pub fn support_labels(&self) -> Vec<usize> {
        (0..self.ways).flat_map(|c| std::iter::repeat_n(c, self.shots)).collect()
    }

    /// Episode-local labels of the query set.
    pub fn query_labels(&self) -> Vec<usize> {
        (0..self.ways).flat_map(|c| std::iter::repeat_n(c, self.queries_per_class)).collect()
    }
}

/// Draws an episode from the labelled samples of `manifest`.
///
/// Classes are chosen without replacement among those holding at least
/// `shots + queries_per_class` samples; each chosen class then draws its
/// samples without replacement from its own stream, support first.
pub fn sample_episode(
    manifest: &Manifest,
    ways: usize,
    shots: usize,
    queries_per_class: usize,
    seed: u64,
) -> Result<Episode> {
    if ways == 0 || shots == 0 {
        return Err(HecError::InvalidParameter(format!(
            "ways and shots must be ≥ 1 (ways={ways}, shots={shots})"
        )));
    }
    let labels = manifest
        .labels
        .as_ref()
        .ok_or_else(|| HecError::InfeasibleEpisode("manifest has no labels".into()))?;
    let num_classes = manifest.num_classes();
    if ways > num_classes {
        return Err(HecError::InfeasibleEpisode(format!(
            "{ways} ways requested but only {num_classes} classes"
        )));
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let need = shots + queries_per_class;
    let eligible: Vec<usize> = (0..num_classes).filter(|&c| by_class[c].len() >= need).collect();
    if eligible.len() < ways {
        return Err(HecError::InfeasibleEpisode(format!(
            "only {} classes have ≥ {need} samples, {ways} needed",
            eligible.len()
        )));
    }

    let mut class_rng = rng::stream(seed, 0);
    let class_subset: Vec<usize> = index::sample(&mut class_rng, eligible.len(), ways)
        .into_iter()
        .map(|i| eligible[i])
        .collect();

    let mut support_indices = Vec::with_capacity(ways * shots);
    let mut query_indices = Vec::with_capacity(ways * queries_per_class);
    for &c in &class_subset {
        let pool = &by_class[c];
        let mut class_rng = rng::stream(rng::mix(seed, c as u64), 0);
        let picks = index::sample(&mut class_rng, pool.len(), need).into_vec();
        support_indices.extend(picks[..shots].iter().map(|&i| pool[i]));
        query_indices.extend(picks[shots..].iter().map(|&i| pool[i]));
    }

    Ok(Episode {
        ways,
        shots,
        queries_per_class,
        class_subset,
        support_indices,
        query_indices,
        seed,
    })
}
