//! Episodic evaluation: per-episode prediction, benchmarks over seeded
//! episodes, hyperparameter sweeps, head-rank curves and retrieval metrics.
//!
//! Prediction code only ever receives support labels. Query labels are
//! derived from the episode after predictions are made.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::ensemble::{self, EnsembleMethod, HeadOutputs, SupportStats};
use crate::error::{HecError, Result};
use crate::feature_store::{sample_episode, Episode, FeatureBank, Manifest, SampleKind};
use crate::gda::{self, fit_all_heads, HeadGda};
use crate::head_ranking::{
    self, oracle_text_scores, oracle_vision_scores, select_top_k, text_head_scores, vision_head_scores, HeadKind,
    HeadScores, HeadSelection, OracleMetric,
};
use crate::parallel;
use crate::rng;

/// z-value of the two-sided 95% normal interval.
pub const Z_95: f64 = 1.96;

/// Everything an episode may draw features from.
#[derive(Debug, Clone)]
pub struct EvalBanks {
    /// Per-image attention vectors; `manifest.labels` must be present.
    pub images: FeatureBank,
    pub manifest: Manifest,
    /// One row per class (in manifest class order), for text heads.
    pub class_text: Option<FeatureBank>,
    /// Per-image summary-token embeddings `[S × 1 × F]`.
    pub summary: Option<FeatureBank>,
    /// Per-class summary-token embeddings `[C × 1 × F]`.
    pub class_summary: Option<FeatureBank>,
}

impl EvalBanks {
    pub fn new(images: FeatureBank, manifest: Manifest) -> Self {
        EvalBanks { images, manifest, class_text: None, summary: None, class_summary: None }
    }

    pub fn with_class_text(mut self, class_text: FeatureBank) -> Self {
        self.class_text = Some(class_text);
        self
    }

    pub fn with_summaries(mut self, summary: FeatureBank, class_summary: Option<FeatureBank>) -> Self {
        self.summary = Some(summary);
        self.class_summary = class_summary;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.kind() != SampleKind::Image {
            return Err(HecError::InvalidBank("image bank must have sample kind image".into()));
        }
        self.manifest.validate_against(&self.images)?;
        if self.manifest.labels.is_none() {
            return Err(HecError::InvalidManifest("image manifest needs labels".into()));
        }
        let classes = self.manifest.num_classes();
        if let Some(t) = &self.class_text {
            if t.kind() != SampleKind::ClassText
                || t.samples() != classes
                || t.heads() != self.images.heads()
                || t.dim() != self.images.dim()
            {
                return Err(HecError::ShapeMismatch(format!(
                    "class-text bank must be class_text [{classes} × {} × {}]",
                    self.images.heads(),
                    self.images.dim()
                )));
            }
        }
        if let Some(s) = &self.summary {
            if s.samples() != self.images.samples() || s.heads() != 1 {
                return Err(HecError::ShapeMismatch(format!(
                    "summary bank must be [{} × 1 × F]",
                    self.images.samples()
                )));
            }
        }
        if let Some(cs) = &self.class_summary {
            let f = self.summary.as_ref().map(|s| s.dim());
            if cs.samples() != classes || cs.heads() != 1 || f.is_some_and(|f| f != cs.dim()) {
                return Err(HecError::ShapeMismatch(format!(
                    "class summary bank must be [{classes} × 1 × F] matching the summary bank"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    HecV,
    HecT,
    HecVt,
    RidgeProbe,
    NearestCentroid,
    StZeroShot,
    /// Alternative combination of the top vision heads.
    Ensemble(EnsembleMethod),
}

impl Method {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "hec_v" => Method::HecV,
            "hec_t" => Method::HecT,
            "hec_vt" => Method::HecVt,
            "ridge_probe" => Method::RidgeProbe,
            "nearest_centroid" => Method::NearestCentroid,
            "st_zero_shot" => Method::StZeroShot,
            other => {
                let inner = other.strip_prefix("ensemble:").unwrap_or(other);
                Method::Ensemble(
                    EnsembleMethod::parse(inner).ok_or_else(|| HecError::InvalidMethod(other.to_string()))?,
                )
            }
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::HecV => f.write_str("hec_v"),
            Method::HecT => f.write_str("hec_t"),
            Method::HecVt => f.write_str("hec_vt"),
            Method::RidgeProbe => f.write_str("ridge_probe"),
            Method::NearestCentroid => f.write_str("nearest_centroid"),
            Method::StZeroShot => f.write_str("st_zero_shot"),
            Method::Ensemble(m) => write!(f, "ensemble:{}", m.name()),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Method::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// A method and its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    pub tau: f64,
    pub top_k: usize,
    pub alpha: f64,
    pub ridge_lambda: f64,
    /// Fixed text heads; ranked on each episode's support set when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_selection: Option<HeadSelection>,
}

impl MethodSpec {
    /// Defaults: τ = 10, top-k = 20, α = 1, λ = 1.
    pub fn new(method: Method) -> Self {
        MethodSpec { method, tau: 10.0, top_k: 20, alpha: 1.0, ridge_lambda: 1.0, text_selection: None }
    }

    pub fn validate(&self) -> Result<()> {
        ensemble::EnsembleConfig {
            method: EnsembleMethod::ProbaMean,
            tau: self.tau,
            top_k: self.top_k,
            alpha: self.alpha,
            ridge_lambda: self.ridge_lambda,
        }
        .validate()?;
        if self.method == Method::RidgeProbe && !(self.ridge_lambda > 0.0) {
            return Err(HecError::InvalidParameter("ridge probe needs lambda > 0".into()));
        }
        if let Some(sel) = &self.text_selection {
            if sel.kind != HeadKind::Text || sel.is_empty() {
                return Err(HecError::InvalidParameter("fixed text selection must be a non-empty text selection".into()));
            }
        }
        Ok(())
    }
}

struct EpisodeView<'a> {
    banks: &'a EvalBanks,
    support: &'a [usize],
    support_labels: Vec<usize>,
    query: &'a [usize],
    ways: usize,
    class_subset: &'a [usize],
}

impl EpisodeView<'_> {
    fn class_text(&self) -> Result<FeatureBank> {
        let bank = self
            .banks
            .class_text
            .as_ref()
            .ok_or_else(|| HecError::InvalidParameter("method needs a class-text bank".into()))?;
        bank.select(self.class_subset)
    }

    fn vision_models(&self) -> Result<Vec<HeadGda>> {
        fit_all_heads(&self.banks.images, self.support, &self.support_labels, self.ways)
    }

    fn vision_selection(&self, models: &[HeadGda], spec: &MethodSpec) -> Result<(HeadScores, HeadSelection)> {
        let scores = vision_head_scores(models, &self.banks.images, self.support, &self.support_labels, spec.tau)?;
        let sel = select_top_k(&scores, spec.top_k)?;
        Ok((scores, sel))
    }

    fn text_selection(&self, class_text: &FeatureBank, spec: &MethodSpec) -> Result<HeadSelection> {
        if let Some(sel) = &spec.text_selection {
            return Ok(sel.clone());
        }
        let scores = text_head_scores(&self.banks.images, self.support, &self.support_labels, class_text)?;
        select_top_k(&scores, spec.top_k)
    }

    fn hec_v(&self, spec: &MethodSpec) -> Result<DMatrix<f64>> {
        let models = self.vision_models()?;
        let (_, sel) = self.vision_selection(&models, spec)?;
        ensemble::hec_v_batch(&self.banks.images, self.query, &models, &sel, spec.tau)
    }

    fn hec_t(&self, spec: &MethodSpec) -> Result<DMatrix<f64>> {
        let class_text = self.class_text()?;
        let sel = self.text_selection(&class_text, spec)?;
        ensemble::hec_t_batch(&self.banks.images, self.query, &class_text, &sel)
    }

    /// Row-normalized features for the closed-form baselines: summary tokens
    /// when available, otherwise all heads concatenated.
    fn flat_features(&self, rows: &[usize]) -> DMatrix<f64> {
        let mut x = match &self.banks.summary {
            Some(s) => s.flat_matrix(rows),
            None => self.banks.images.flat_matrix(rows),
        };
        for mut row in x.row_iter_mut() {
            let n = row.norm();
            if n > 0.0 {
                row.unscale_mut(n);
            }
        }
        x
    }

    fn ensemble(&self, method: EnsembleMethod, spec: &MethodSpec) -> Result<Vec<usize>> {
        let models = self.vision_models()?;
        let (scores, sel) = self.vision_selection(&models, spec)?;
        let heads = sel.ascending();
        let images = &self.banks.images;
        let mut support_probs = Vec::with_capacity(heads.len());
        let mut support_logits = Vec::with_capacity(heads.len());
        let mut query_probs = Vec::with_capacity(heads.len());
        let mut query_logits = Vec::with_capacity(heads.len());
        for &m in &heads {
            if method.needs_weights() {
                let l = models[m].logits_batch(&images.head_matrix(m, self.support))?;
                support_probs.push(head_ranking::row_softmax(&l, spec.tau)?);
                support_logits.push(l);
            }
            let l = models[m].logits_batch(&images.head_matrix(m, self.query))?;
            query_probs.push(head_ranking::row_softmax(&l, spec.tau)?);
            query_logits.push(l);
        }
        let stats = SupportStats {
            scores: heads.iter().map(|&m| scores.scores[m]).collect(),
            weights: ensemble::support_weights(
                method,
                &support_probs,
                &support_logits,
                &self.support_labels,
                spec.ridge_lambda,
            )?,
        };
        (0..self.query.len())
            .map(|i| {
                let row = |m: &DMatrix<f64>| m.row(i).iter().copied().collect::<Vec<f64>>();
                let outputs = HeadOutputs {
                    probs: query_probs.iter().map(row).collect(),
                    logits: query_logits.iter().map(row).collect(),
                };
                ensemble::ensemble_predict(method, &outputs, &stats).map(|s| gda::argmax(&s))
            })
            .collect()
    }

    fn predict(&self, spec: &MethodSpec) -> Result<Vec<usize>> {
        let argmax_rows = |m: DMatrix<f64>| -> Vec<usize> {
            m.row_iter().map(|r| gda::argmax(&r.iter().copied().collect::<Vec<_>>())).collect()
        };
        match spec.method {
            Method::HecV => Ok(argmax_rows(self.hec_v(spec)?)),
            Method::HecT => Ok(argmax_rows(self.hec_t(spec)?)),
            Method::HecVt => {
                let pv = self.hec_v(spec)?;
                let pt = self.hec_t(spec)?;
                Ok(argmax_rows((pv * spec.alpha + pt) / (spec.alpha + 1.0)))
            }
            Method::RidgeProbe => {
                let probe = baselines::ridge_fit(
                    &self.flat_features(self.support),
                    &self.support_labels,
                    self.ways,
                    spec.ridge_lambda,
                )?;
                Ok(argmax_rows(baselines::ridge_predict_batch(&probe, &self.flat_features(self.query))?))
            }
            Method::NearestCentroid => {
                let centroids =
                    baselines::class_centroids(&self.flat_features(self.support), &self.support_labels, self.ways)?;
                let q = self.flat_features(self.query);
                q.row_iter()
                    .map(|r| baselines::nearest_centroid(&centroids, &r.iter().copied().collect::<Vec<_>>()))
                    .collect()
            }
            Method::StZeroShot => {
                let (summary, class_summary) = match (&self.banks.summary, &self.banks.class_summary) {
                    (Some(s), Some(c)) => (s, c),
                    _ => {
                        return Err(HecError::InvalidParameter(
                            "st_zero_shot needs summary and class-summary banks".into(),
                        ))
                    }
                };
                let classes = class_summary.flat_matrix(self.class_subset);
                self.query
                    .iter()
                    .map(|&r| {
                        let q: Vec<f64> = summary.sample(r).iter().map(|&v| v as f64).collect();
                        baselines::st_zero_shot(&q, &classes).map(|l| gda::argmax(&l))
                    })
                    .collect()
            }
            Method::Ensemble(m) => self.ensemble(m, spec),
        }
    }
}

/// Predicted episode-local classes for the query set of `episode`.
pub fn predict_episode(banks: &EvalBanks, episode: &Episode, spec: &MethodSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let view = EpisodeView {
        banks,
        support: &episode.support_indices,
        support_labels: episode.support_labels(),
        query: &episode.query_indices,
        ways: episode.ways,
        class_subset: &episode.class_subset,
    };
    view.predict(spec)
}

/// Top-1 query accuracy of `spec` on `episode`.
pub fn run_episode(banks: &EvalBanks, episode: &Episode, spec: &MethodSpec) -> Result<f64> {
    if episode.query_indices.is_empty() {
        return Err(HecError::Empty("query set"));
    }
    let predictions = predict_episode(banks, episode, spec)?;
    Ok(accuracy(&predictions, &episode.query_labels()))
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Episode shape and seeds for a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    /// Episodes drawn per seed.
    pub episodes: usize,
    pub seeds: Vec<u64>,
}

impl BenchmarkConfig {
    /// `(seed, episode index, episode seed)` for every episode, in report order.
    pub fn episode_seeds(&self) -> Vec<(u64, usize, u64)> {
        self.seeds
            .iter()
            .flat_map(|&s| (0..self.episodes).map(move |e| (s, e, rng::mix(s, e as u64))))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub episode: usize,
    pub episode_seed: u64,
    pub method: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub episodes: usize,
    pub mean: f64,
    /// Half-width of the 95% interval, `1.96·s/√n` with the sample std `s`.
    pub ci95: f64,
}

impl Aggregate {
    pub fn from_accuracies(method: String, values: &[f64]) -> Aggregate {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let ci95 = if n > 1 {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            Z_95 * var.sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        Aggregate { method, episodes: n, mean, ci95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub benchmark: BenchmarkConfig,
    pub methods: Vec<MethodSpec>,
    pub rng: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excluded_episode_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ReportConfig,
    pub per_episode: Vec<EpisodeResult>,
    pub aggregate: Vec<Aggregate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_curves: Option<Vec<RankCurve>>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Flat per-episode table.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.per_episode {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| HecError::InvalidParameter(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn aggregate_for(&self, method: &str) -> Option<&Aggregate> {
        self.aggregate.iter().find(|a| a.method == method)
    }
}

/// Runs every method on every episode. Episodes run in parallel; results are
/// gathered in seed order so reports do not depend on the thread count.
pub fn run_benchmark(banks: &EvalBanks, config: &BenchmarkConfig, methods: &[MethodSpec]) -> Result<EvalReport> {
    run_benchmark_excluding(banks, config, methods, None)
}

fn run_benchmark_excluding(
    banks: &EvalBanks,
    config: &BenchmarkConfig,
    methods: &[MethodSpec],
    exclude: Option<u64>,
) -> Result<EvalReport> {
    banks.validate()?;
    if methods.is_empty() {
        return Err(HecError::Empty("method list"));
    }
    for m in methods {
        m.validate()?;
    }
    let jobs: Vec<(u64, usize, u64)> = config
        .episode_seeds()
        .into_iter()
        .filter(|&(_, _, es)| Some(es) != exclude)
        .collect();
    if jobs.is_empty() {
        return Err(HecError::Empty("episode list"));
    }
    let results = parallel::try_map_indexed(jobs.len(), |j| {
        let (seed, episode, episode_seed) = jobs[j];
        let ep = sample_episode(&banks.manifest, config.ways, config.shots, config.queries_per_class, episode_seed)?;
        methods
            .iter()
            .map(|spec| {
                Ok(EpisodeResult {
                    seed,
                    episode,
                    episode_seed,
                    method: spec.method.to_string(),
                    accuracy: run_episode(banks, &ep, spec)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let per_episode: Vec<EpisodeResult> = results.into_iter().flatten().collect();
    let aggregate = methods
        .iter()
        .map(|spec| {
            let name = spec.method.to_string();
            let values: Vec<f64> = per_episode.iter().filter(|r| r.method == name).map(|r| r.accuracy).collect();
            Aggregate::from_accuracies(name, &values)
        })
        .collect();
    Ok(EvalReport {
        config: ReportConfig {
            benchmark: config.clone(),
            methods: methods.to_vec(),
            rng: rng::RNG_NAME.to_string(),
            excluded_episode_seed: exclude,
        },
        per_episode,
        aggregate,
        rank_curves: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Alpha,
    Lambda,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub param: SweepParam,
    pub selection_seed: u64,
    /// `(value, accuracy)` on the selection episode, ascending by value.
    pub selection_accuracies: Vec<(f64, f64)>,
    pub best: f64,
    pub best_spec: MethodSpec,
    pub report: EvalReport,
}

fn with_param(spec: &MethodSpec, param: SweepParam, value: f64) -> MethodSpec {
    let mut s = spec.clone();
    match param {
        SweepParam::Alpha => s.alpha = value,
        SweepParam::Lambda => s.ridge_lambda = value,
    }
    s
}

/// Picks the grid value with the best accuracy on one selection episode
/// (ties to the smallest value), then evaluates the frozen choice on the
/// benchmark episodes, skipping the selection episode.
pub fn sweep(
    banks: &EvalBanks,
    config: &BenchmarkConfig,
    base: &MethodSpec,
    param: SweepParam,
    grid: &[f64],
    selection_seed: u64,
) -> Result<SweepOutcome> {
    let mut values: Vec<f64> = grid.to_vec();
    if values.is_empty() {
        return Err(HecError::Empty("sweep grid"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(HecError::InvalidParameter("sweep grid must be finite".into()));
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    values.dedup();
    banks.validate()?;
    let selection = sample_episode(
        &banks.manifest,
        config.ways,
        config.shots,
        config.queries_per_class,
        selection_seed,
    )?;
    let mut selection_accuracies = Vec::with_capacity(values.len());
    let mut best = (values[0], f64::NEG_INFINITY);
    for &v in &values {
        let acc = run_episode(banks, &selection, &with_param(base, param, v))?;
        selection_accuracies.push((v, acc));
        if acc > best.1 {
            best = (v, acc);
        }
    }
    let best_spec = with_param(base, param, best.0);
    let report = run_benchmark_excluding(banks, config, std::slice::from_ref(&best_spec), Some(selection_seed))?;
    Ok(SweepOutcome { param, selection_seed, selection_accuracies, best: best.0, best_spec, report })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    /// Support-set scores (what a deployed model would use).
    TestTime,
    /// Query-set performance (an upper bound).
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankPoint {
    pub rank: usize,
    pub head: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativePoint {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCurve {
    pub kind: HeadKind,
    pub ranking: Ranking,
    /// Query accuracy of the head at each rank.
    pub per_rank: Vec<RankPoint>,
    /// Query accuracy of the ensemble of the top-k heads.
    pub cumulative: Vec<CumulativePoint>,
}

impl RankCurve {
    pub fn to_csv(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Row {
            rank: usize,
            head: usize,
            head_accuracy: f64,
            topk_accuracy: f64,
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for (p, c) in self.per_rank.iter().zip(&self.cumulative) {
            w.serialize(Row { rank: p.rank, head: p.head, head_accuracy: p.accuracy, topk_accuracy: c.accuracy })?;
        }
        let bytes = w.into_inner().map_err(|e| HecError::InvalidParameter(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn argmax_accuracy(probs: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let predictions: Vec<usize> = probs
        .row_iter()
        .map(|r| gda::argmax(&r.iter().copied().collect::<Vec<_>>()))
        .collect();
    accuracy(&predictions, labels)
}

/// Per-rank head accuracies and top-k ensemble accuracies for one episode.
///
/// Oracle ranking orders heads by query accuracy measured with `oracle`
/// (hard accuracy by default in the CLI). The ensemble at size `k` averages
/// the class probabilities of the first `k` heads in ranking order.
pub fn rank_curve(
    banks: &EvalBanks,
    episode: &Episode,
    kind: HeadKind,
    ranking: Ranking,
    tau: f64,
    oracle: OracleMetric,
) -> Result<RankCurve> {
    banks.validate()?;
    let support_labels = episode.support_labels();
    let query_labels = episode.query_labels();
    let images = &banks.images;
    let (support, query) = (&episode.support_indices, &episode.query_indices);
    if query.is_empty() {
        return Err(HecError::Empty("query set"));
    }

    let heads = images.heads();
    let (query_accuracy, order, head_probs): (HeadScores, HeadSelection, Vec<DMatrix<f64>>) = match kind {
        HeadKind::Vision => {
            let models = fit_all_heads(images, support, &support_labels, episode.ways)?;
            let hard = oracle_vision_scores(&models, images, query, &query_labels, OracleMetric::Hard)?;
            let ranking_scores = match ranking {
                Ranking::TestTime => vision_head_scores(&models, images, support, &support_labels, tau)?,
                Ranking::Oracle => match oracle {
                    OracleMetric::Hard => hard.clone(),
                    m => oracle_vision_scores(&models, images, query, &query_labels, m)?,
                },
            };
            let probs = parallel::try_map_indexed(heads, |m| {
                head_ranking::vision_head_probs(&models[m], images, m, query, tau)
            })?;
            (hard, select_top_k(&ranking_scores, heads)?, probs)
        }
        HeadKind::Text => {
            let class_text = banks
                .class_text
                .as_ref()
                .ok_or_else(|| HecError::InvalidParameter("text rank curve needs a class-text bank".into()))?
                .select(&episode.class_subset)?;
            let hard = oracle_text_scores(images, query, &query_labels, &class_text, OracleMetric::Hard)?;
            let ranking_scores = match ranking {
                Ranking::TestTime => text_head_scores(images, support, &support_labels, &class_text)?,
                Ranking::Oracle => match oracle {
                    OracleMetric::Hard => hard.clone(),
                    m => oracle_text_scores(images, query, &query_labels, &class_text, m)?,
                },
            };
            let probs = parallel::try_map_indexed(heads, |m| {
                head_ranking::row_softmax(&head_ranking::text_head_logits(images, m, query, &class_text), 1.0)
            })?;
            (hard, select_top_k(&ranking_scores, heads)?, probs)
        }
    };

    let per_rank = order
        .indices
        .iter()
        .enumerate()
        .map(|(r, &m)| RankPoint { rank: r + 1, head: m, accuracy: query_accuracy.scores[m] })
        .collect();
    let mut running = DMatrix::<f64>::zeros(query.len(), episode.ways);
    let mut cumulative = Vec::with_capacity(heads);
    for (k, &m) in order.indices.iter().enumerate() {
        running += &head_probs[m];
        cumulative.push(CumulativePoint { k: k + 1, accuracy: argmax_accuracy(&running, &query_labels) });
    }
    Ok(RankCurve { kind, ranking, per_rank, cumulative })
}

/// Answers for one retrieval group: `bits[image][text]` is whether the
/// model's match/no-match answer for that image–caption pair was right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalOutcome {
    pub bits: [[bool; 2]; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    /// Fraction of captions answered correctly against both images.
    pub text: f64,
    /// Fraction of images answered correctly against both captions.
    pub image: f64,
    /// Fraction of groups with all four answers correct.
    pub group: f64,
}

pub fn retrieval_metrics(outcomes: &[RetrievalOutcome]) -> Result<RetrievalMetrics> {
    if outcomes.is_empty() {
        return Err(HecError::Empty("retrieval outcomes"));
    }
    let (mut text, mut image, mut group) = (0usize, 0usize, 0usize);
    for o in outcomes {
        let b = o.bits;
        text += (0..2).filter(|&t| b[0][t] && b[1][t]).count();
        image += (0..2).filter(|&i| b[i][0] && b[i][1]).count();
        group += b.iter().flatten().all(|&x| x) as usize;
    }
    let n = outcomes.len() as f64;
    Ok(RetrievalMetrics { text: text as f64 / (2.0 * n), image: image as f64 / (2.0 * n), group: group as f64 / n })
}
