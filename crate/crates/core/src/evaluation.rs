//! Retrieval, rank correlation, basis scoring and plot-data exports.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{kfold_split, Dataset};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::geometry::{
    exp_map_origin, exterior_angle, lift_time, poincare_projection, Curvature, LorentzPoint,
    TangentVector,
};
use crate::model::DualEncoder;
use crate::par;
use crate::training::{derive_seed, train_indices, TrainConfig, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Text queries ranked against brain candidates.
    TextToBrain,
    /// Brain queries ranked against text candidates.
    BrainToText,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::TextToBrain, Direction::BrainToText];

    pub fn key(self) -> &'static str {
        match self {
            Direction::TextToBrain => "text_to_brain",
            Direction::BrainToText => "brain_to_text",
        }
    }
}

/// Row-major query x candidate similarities; higher is more similar.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    /// Pairs whose angle was undefined and were scored as `-pi`.
    pub degenerate: usize,
}

impl SimilarityMatrix {
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: values.len(),
            });
        }
        Ok(SimilarityMatrix {
            rows,
            cols,
            values,
            degenerate: 0,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// `-|ext(brain, text)|`, or `-pi` (counted) if the angle is undefined.
fn scored_angle(brain: &LorentzPoint, text: &LorentzPoint, c: Curvature) -> (f64, bool) {
    match exterior_angle(brain, text, c) {
        Ok(a) => (-a.abs(), false),
        Err(_) => (-PI, true),
    }
}

/// Similarity of every query to every candidate. The brain embedding always
/// occupies the parent slot of the exterior angle, whichever side queries.
pub fn similarity_matrix(
    brain: &[LorentzPoint],
    text: &[LorentzPoint],
    direction: Direction,
    c: Curvature,
) -> Result<SimilarityMatrix> {
    if let (Some(b), Some(t)) = (brain.first(), text.first()) {
        if b.dim() != t.dim() {
            return Err(Error::DimensionMismatch {
                expected: b.dim(),
                found: t.dim(),
            });
        }
    }
    let (rows, cols) = match direction {
        Direction::TextToBrain => (text.len(), brain.len()),
        Direction::BrainToText => (brain.len(), text.len()),
    };
    let per_row = par::map_range(rows, |i| {
        (0..cols)
            .map(|j| match direction {
                Direction::TextToBrain => scored_angle(&brain[j], &text[i], c),
                Direction::BrainToText => scored_angle(&brain[i], &text[j], c),
            })
            .collect::<Vec<_>>()
    });
    let mut values = Vec::with_capacity(rows * cols);
    let mut degenerate = 0;
    for row in per_row {
        for (v, bad) in row {
            values.push(v);
            degenerate += usize::from(bad);
        }
    }
    Ok(SimilarityMatrix {
        rows,
        cols,
        values,
        degenerate,
    })
}

/// 0-based rank of candidate `target` in `row`: the number of candidates
/// that beat it, where equal scores go to the lower index.
pub fn rank_of(row: &[f64], target: usize) -> usize {
    let t = row[target];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > t || (v == t && j < target))
        .count()
}

/// Percentage of queries whose true candidate `truth[i]` ranks in the top `k`.
pub fn recall_at_k(sim: &SimilarityMatrix, truth: &[usize], k: usize) -> Result<f64> {
    if k == 0 || k > sim.cols {
        return Err(Error::InvalidArgument(format!(
            "recall@{k} needs 1 <= K <= {} candidates",
            sim.cols
        )));
    }
    if truth.len() != sim.rows {
        return Err(Error::DimensionMismatch {
            expected: sim.rows,
            found: truth.len(),
        });
    }
    if let Some(bad) = truth.iter().find(|&&t| t >= sim.cols) {
        return Err(Error::InvalidArgument(format!(
            "ground-truth index {bad} out of range"
        )));
    }
    if sim.rows == 0 {
        return Ok(0.0);
    }
    let hits = (0..sim.rows)
        .filter(|&i| rank_of(sim.row(i), truth[i]) < k)
        .count();
    Ok(100.0 * hits as f64 / sim.rows as f64)
}

/// Kendall's tau-b. Quadratic in the input length, with exact integer pair
/// counts.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::UndefinedCorrelation(format!("{n} observations")));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("NaN in rank correlation input".into()));
    }
    // Per-row (concordant, discordant, tied-x, tied-y) over j > i.
    let rows = par::map_range(n, |i| {
        let mut acc = [0i64; 4];
        for j in i + 1..n {
            let dx = x[i].partial_cmp(&x[j]);
            let dy = y[i].partial_cmp(&y[j]);
            use std::cmp::Ordering::Equal;
            match (dx, dy) {
                (Some(Equal), Some(Equal)) => {
                    acc[2] += 1;
                    acc[3] += 1;
                }
                (Some(Equal), _) => acc[2] += 1,
                (_, Some(Equal)) => acc[3] += 1,
                (Some(a), Some(b)) if a == b => acc[0] += 1,
                (Some(_), Some(_)) => acc[1] += 1,
                _ => {}
            }
        }
        acc
    });
    let [con, dis, tx, ty] = rows.iter().fold([0i64; 4], |mut s, r| {
        for k in 0..4 {
            s[k] += r[k];
        }
        s
    });
    let n0 = (n as i64) * (n as i64 - 1) / 2;
    if tx == n0 || ty == n0 {
        return Err(Error::UndefinedCorrelation(
            "every value is tied on one variable".into(),
        ));
    }
    Ok((con - dis) as f64 / (((n0 - tx) as f64) * ((n0 - ty) as f64)).sqrt())
}

/// Numerically stable softmax.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisScores {
    pub probabilities: Vec<f64>,
    pub degenerate: usize,
}

/// Softmax over `-|ext(basis_m, text)|`, each basis element taking the
/// brain slot.
pub fn basis_similarity_scores(
    text: &LorentzPoint,
    basis: &[LorentzPoint],
    c: Curvature,
) -> Result<BasisScores> {
    if basis.is_empty() {
        return Err(Error::InvalidArgument("empty basis".into()));
    }
    let scored: Vec<(f64, bool)> = basis.iter().map(|b| scored_angle(b, text, c)).collect();
    Ok(BasisScores {
        probabilities: softmax(&scored.iter().map(|s| s.0).collect::<Vec<_>>()),
        degenerate: scored.iter().filter(|s| s.1).count(),
    })
}

/// Marks the `ceil(fraction * M)` highest scores; ties at the cutoff go to
/// the lower index.
pub fn top_percentile_mask(scores: &[f64], fraction: f64) -> Vec<bool> {
    let m = scores.len();
    // The epsilon keeps e.g. 0.1 * 10 from rounding up to 2.
    let keep = ((fraction.clamp(0.0, 1.0) * m as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = vec![false; m];
    for &i in order.iter().take(keep.min(m)) {
        mask[i] = true;
    }
    mask
}

/// Unit-disk coordinates for plotting. When `d > 2`, only the two space axes
/// with the largest variance over the set are kept (ties to the lower axis);
/// the reduced point is re-lifted and mapped to the Poincaré disk, then
/// scaled by `sqrt(c)` so the disk has radius 1 for every curvature.
pub fn poincare_coords(points: &[LorentzPoint], c: Curvature) -> Result<Vec<[f64; 2]>> {
    let Some(first) = points.first() else {
        return Ok(Vec::new());
    };
    let d = first.dim();
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "Poincaré export needs space dimension >= 2, got {d}"
        )));
    }
    if let Some(p) = points.iter().find(|p| p.dim() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: p.dim(),
        });
    }
    let n = points.len() as f64;
    let variance: Vec<f64> = (0..d)
        .map(|k| {
            let mean = points.iter().map(|p| p.space()[k]).sum::<f64>() / n;
            points.iter().map(|p| (p.space()[k] - mean).powi(2)).sum::<f64>() / n
        })
        .collect();
    let mut axes: Vec<usize> = (0..d).collect();
    axes.sort_by(|&a, &b| variance[b].total_cmp(&variance[a]).then(a.cmp(&b)));
    let (a0, a1) = (axes[0].min(axes[1]), axes[0].max(axes[1]));
    Ok(points
        .iter()
        .map(|p| {
            let reduced = lift_time(vec![p.space()[a0], p.space()[a1]], c);
            let q = poincare_projection(&reduced, c);
            [q[0] * c.sqrt(), q[1] * c.sqrt()]
        })
        .collect())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `label,x,y` rows, one per point.
pub fn export_poincare(
    points: &[LorentzPoint],
    labels: &[String],
    c: Curvature,
    path: impl AsRef<Path>,
) -> Result<()> {
    if labels.len() != points.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            found: labels.len(),
        });
    }
    let coords = poincare_coords(points, c)?;
    let mut out = String::from("label,x,y\n");
    for (label, [x, y]) in labels.iter().zip(coords) {
        writeln!(out, "{},{x},{y}", csv_field(label)).expect("write to string");
    }
    write_text(path.as_ref(), &out)
}

/// Writes `time,region_count` rows for external histogram plotting.
pub fn export_histogram(
    points: &[LorentzPoint],
    region_counts: &[u32],
    path: impl AsRef<Path>,
) -> Result<()> {
    if region_counts.len() != points.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            found: region_counts.len(),
        });
    }
    let mut out = String::from("time,region_count\n");
    for (p, r) in points.iter().zip(region_counts) {
        writeln!(out, "{},{r}", p.time()).expect("write to string");
    }
    write_text(path.as_ref(), &out)
}

/// Per-fold recall values with their mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallStats {
    pub per_fold: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl RecallStats {
    pub fn from_folds(per_fold: Vec<f64>) -> Self {
        let n = per_fold.len() as f64;
        let mean = per_fold.iter().sum::<f64>() / n;
        let std = if per_fold.len() > 1 {
            (per_fold.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        RecallStats {
            per_fold,
            mean,
            std,
        }
    }
}

/// direction key -> K -> stats
pub type RecallTable = BTreeMap<String, BTreeMap<usize, RecallStats>>;

/// What produces the test-split embeddings in each fold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RetrievalModel {
    /// Fresh encoders trained on the fold's training split.
    Trained,
    /// Independent random points (Gaussian tangent vectors), a chance baseline.
    Null,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalSetup {
    pub k_folds: usize,
    pub ks: Vec<usize>,
    /// Seeds the fold partition (and the null model's draws).
    pub seed: u64,
    pub brain: EncoderConfig,
    pub text: EncoderConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub recall: RecallTable,
    pub skipped: Vec<String>,
    pub degenerate_pairs: usize,
    pub fold_sizes: Vec<usize>,
}

impl RetrievalReport {
    pub fn mean(&self, direction: Direction, k: usize) -> Option<f64> {
        self.recall
            .get(direction.key())
            .and_then(|m| m.get(&k))
            .map(|s| s.mean)
    }
}

fn null_points(n: usize, d: usize, c: Curvature, rng: &mut ChaCha8Rng) -> Vec<LorentzPoint> {
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            exp_map_origin(&TangentVector(z), c)
        })
        .collect()
}

/// Recall@K in both directions for an embedded set whose pairs share an
/// index.
pub fn paired_recall(
    brain: &[LorentzPoint],
    text: &[LorentzPoint],
    ks: &[usize],
    c: Curvature,
) -> Result<(BTreeMap<Direction, Vec<f64>>, usize)> {
    let truth: Vec<usize> = (0..brain.len()).collect();
    let mut out = BTreeMap::new();
    let mut degenerate = 0;
    for dir in Direction::BOTH {
        let sim = similarity_matrix(brain, text, dir, c)?;
        degenerate += sim.degenerate;
        let r = ks
            .iter()
            .map(|&k| recall_at_k(&sim, &truth, k))
            .collect::<Result<Vec<_>>>()?;
        out.insert(dir, r);
    }
    Ok((out, degenerate))
}

/// k-fold retrieval. Each fold trains (or draws) a model on its training
/// split and ranks its test split in both directions. Any K larger than
/// the smallest test fold is skipped and noted.
pub fn cross_validated_retrieval(
    dataset: &Dataset,
    setup: &RetrievalSetup,
    model: RetrievalModel,
) -> Result<RetrievalReport> {
    let folds = kfold_split(dataset.len(), setup.k_folds, setup.seed)?;
    let smallest = folds.iter().map(|f| f.test.len()).min().unwrap_or(0);
    let mut ks = Vec::new();
    let mut skipped = Vec::new();
    for &k in &setup.ks {
        if k == 0 || k > smallest {
            skipped.push(format!(
                "recall@{k} skipped: smallest test fold has {smallest} samples"
            ));
        } else {
            ks.push(k);
        }
    }
    let c = setup.train.loss.curvature;
    let mut per_dir: BTreeMap<Direction, Vec<Vec<f64>>> = BTreeMap::new();
    let mut degenerate = 0;
    for (f, fold) in folds.iter().enumerate() {
        let run = || -> Result<_> {
            let (brain, text) = match model {
                RetrievalModel::Trained => {
                    let init = DualEncoder::init(setup.brain, setup.text, c)?;
                    let (state, _) = train_indices(
                        dataset,
                        &fold.train,
                        TrainState::fresh(init),
                        &setup.train,
                        &mut |_| {},
                    )?;
                    let e = state.model.embed_indices(dataset, &fold.test)?;
                    (e.brain, e.text)
                }
                RetrievalModel::Null => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(setup.seed, 1000 + f as u64));
                    let d = setup.brain.output_dim;
                    let n = fold.test.len();
                    (null_points(n, d, c, &mut rng), null_points(n, d, c, &mut rng))
                }
            };
            paired_recall(&brain, &text, &ks, c)
        };
        let (recalls, deg) = run().map_err(|e| Error::Fold {
            fold: f,
            source: Box::new(e),
        })?;
        degenerate += deg;
        for (dir, r) in recalls {
            per_dir.entry(dir).or_default().push(r);
        }
    }

    let mut recall = RecallTable::new();
    for (dir, folds_r) in per_dir {
        let table = recall.entry(dir.key().to_string()).or_default();
        for (ki, k) in ks.iter().enumerate() {
            let vals = folds_r.iter().map(|r| r[ki]).collect();
            table.insert(*k, RecallStats::from_folds(vals));
        }
    }
    Ok(RetrievalReport {
        recall,
        skipped,
        degenerate_pairs: degenerate,
        fold_sizes: folds.iter().map(|f| f.test.len()).collect(),
    })
}

/// Kendall's tau of each modality's time coordinate against region counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauReport {
    pub brain: Option<f64>,
    pub text: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub samples: usize,
    pub degenerate_pairs: usize,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall: RecallTable,
    pub tau: TauReport,
    pub basis_scores: Vec<Vec<f64>>,
    pub diagnostics: Diagnostics,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Time-vs-region-count correlation, with the undefined case reported as a
/// note instead of an error.
pub fn time_tau(points: &[LorentzPoint], counts: &[u32], what: &str, notes: &mut Vec<String>) -> Option<f64> {
    let t: Vec<f64> = points.iter().map(LorentzPoint::time).collect();
    let r: Vec<f64> = counts.iter().map(|&v| v as f64).collect();
    match kendall_tau(&t, &r) {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(format!("{what} tau: {e}"));
            None
        }
    }
}
