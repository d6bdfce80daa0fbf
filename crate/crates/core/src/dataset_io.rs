//! Dataset assembly, per-axis L1 k-means action quantization, and a 2-D
//! projection of the primitive text embeddings for inspection.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_space::{LowLevelAction, PrimitiveVocabulary};
use crate::cil_train::{encode_text, CilError, EncoderParams};
use crate::teleop::{load_episode, Episode, EpisodeError, Source, Transition};

/// Continuous action components that are quantized (the gripper is discrete).
pub const AXES: usize = 7;
pub const AXIS_NAMES: [&str; AXES] = ["x", "y", "z", "roll", "pitch", "yaw", "grip_rot"];
pub const RESTARTS: usize = 5;
pub const MAX_ITERS: usize = 200;
pub const SHIFT_TOL: f64 = 1e-9;
pub const EPISODE_EXT: &str = "jsonl";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Episode { path: PathBuf, source: EpisodeError },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("no transitions left after filtering")]
    Empty,
    #[error("no values to cluster")]
    NoValues,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("k = {k} exceeds the {distinct} distinct values")]
    TooManyClusters { k: usize, distinct: usize },
    #[error("k values must be strictly increasing")]
    UnsortedK,
    #[error(transparent)]
    Cil(#[from] CilError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub include_sta: bool,
    /// Keep only the first n teleop episodes per task, by seed, together with
    /// the augmentations derived from them.
    pub few_shot_n: Option<usize>,
}

impl BuildOptions {
    pub fn full() -> Self {
        BuildOptions {
            include_sta: true,
            few_shot_n: None,
        }
    }

    pub fn passive() -> Self {
        BuildOptions {
            include_sta: false,
            few_shot_n: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Episodes that contributed at least one transition.
    pub episodes: usize,
    pub teleop_episodes: usize,
    pub transitions: Vec<Transition>,
}

impl Dataset {
    pub fn teleop_transitions(&self) -> usize {
        self.transitions.iter().filter(|t| t.source == Source::Teleop).count()
    }
}

/// Episode files of one directory in file-name order.
pub fn load_episode_dir(dir: &Path) -> Result<Vec<Episode>, DatasetError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == EPISODE_EXT))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|path| load_episode(&path).map_err(|source| DatasetError::Episode { path, source }))
        .collect()
}

pub fn build_dataset(dirs: &[PathBuf], options: BuildOptions) -> Result<Dataset, DatasetError> {
    let mut episodes = Vec::new();
    for dir in dirs {
        episodes.extend(load_episode_dir(dir)?);
    }
    select_transitions(&episodes, options)
}

fn keeps(source: Source, include_sta: bool) -> bool {
    match source {
        Source::Teleop => true,
        Source::StaDiversify | Source::StaRecovery => include_sta,
        Source::Policy => false,
    }
}

/// In-memory form of [`build_dataset`]; output order follows input order.
pub fn select_transitions(episodes: &[Episode], options: BuildOptions) -> Result<Dataset, DatasetError> {
    let allowed: Option<BTreeSet<(&str, u64)>> = options.few_shot_n.map(|n| {
        let mut seeds: BTreeMap<&str, BTreeSet<u64>> = BTreeMap::new();
        for e in episodes.iter().filter(|e| e.is_teleop()) {
            seeds.entry(e.task_id.as_str()).or_default().insert(e.seed);
        }
        seeds
            .into_iter()
            .flat_map(|(task, s)| s.into_iter().take(n).map(move |seed| (task, seed)))
            .collect()
    });
    let mut out = Dataset {
        episodes: 0,
        teleop_episodes: 0,
        transitions: Vec::new(),
    };
    for e in episodes {
        if let Some(allowed) = &allowed {
            if !allowed.contains(&(e.task_id.as_str(), e.seed)) {
                continue;
            }
        }
        let before = out.transitions.len();
        out.transitions.extend(
            e.transitions
                .iter()
                .filter(|t| keeps(t.source, options.include_sta))
                .cloned(),
        );
        if out.transitions.len() > before {
            out.episodes += 1;
            out.teleop_episodes += usize::from(e.is_teleop());
        }
    }
    if out.transitions.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(out)
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn nearest(centers: &[f64], v: f64) -> usize {
    let i = centers.partition_point(|&c| c < v);
    if i == 0 {
        0
    } else if i == centers.len() || v - centers[i - 1] <= centers[i] - v {
        i - 1
    } else {
        i
    }
}

/// Mean absolute distance of each value to its nearest center, summed in
/// input order. `centers` must be sorted ascending.
pub fn l1_distortion(values: &[f64], centers: &[f64]) -> f64 {
    let total: f64 = values.iter().map(|&v| (v - centers[nearest(centers, v)]).abs()).sum();
    total / values.len() as f64
}

/// Half-open index ranges of `sorted` assigned to each center.
fn cells(sorted: &[f64], centers: &[f64]) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(centers.len());
    let mut lo = 0;
    for j in 0..centers.len() {
        let hi = if j + 1 == centers.len() {
            sorted.len()
        } else {
            let (a, b) = (centers[j], centers[j + 1]);
            lo + sorted[lo..].partition_point(|&v| v - a <= b - v)
        };
        out.push((lo, hi));
        lo = hi;
    }
    out
}

/// Lloyd iterations with median updates; distortion never increases.
fn lloyd(sorted: &[f64], mut centers: Vec<f64>) -> Vec<f64> {
    for _ in 0..MAX_ITERS {
        let mut shift = 0.0f64;
        for (j, (lo, hi)) in cells(sorted, &centers).into_iter().enumerate() {
            if hi > lo {
                let m = median_sorted(&sorted[lo..hi]);
                shift = shift.max((m - centers[j]).abs());
                centers[j] = m;
            }
        }
        if shift < SHIFT_TOL {
            break;
        }
    }
    centers
}

fn distinct(sorted: &[f64]) -> Vec<f64> {
    let mut d: Vec<f64> = sorted.to_vec();
    d.dedup();
    d
}

fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn check_k(values: &[f64], k: usize) -> Result<(Vec<f64>, Vec<f64>), DatasetError> {
    if values.is_empty() {
        return Err(DatasetError::NoValues);
    }
    if k == 0 {
        return Err(DatasetError::ZeroK);
    }
    let sorted = sorted_copy(values);
    let uniq = distinct(&sorted);
    if k > uniq.len() {
        return Err(DatasetError::TooManyClusters { k, distinct: uniq.len() });
    }
    Ok((sorted, uniq))
}

/// Best of [`RESTARTS`] seeded runs plus the optional warm start, by L1
/// distortion; earlier candidates win ties.
fn best_fit(values: &[f64], sorted: &[f64], uniq: &[f64], k: usize, seed: u64, warm: Option<Vec<f64>>) -> Vec<f64> {
    let mut candidates = Vec::new();
    if let Some(w) = warm {
        candidates.push(lloyd(sorted, w));
    }
    for r in 0..RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let mut init: Vec<f64> = sample(&mut rng, uniq.len(), k).into_iter().map(|i| uniq[i]).collect();
        init.sort_by(f64::total_cmp);
        candidates.push(lloyd(sorted, init));
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for c in candidates {
        let d = l1_distortion(values, &c);
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            best = Some((d, c));
        }
    }
    best.expect("at least one restart").1
}

/// One-dimensional k-means under L1 distance (median centers), sorted ascending.
pub fn fit_axis_kmeans(values: &[f64], k: usize, seed: u64) -> Result<Vec<f64>, DatasetError> {
    let (sorted, uniq) = check_k(values, k)?;
    Ok(best_fit(values, &sorted, &uniq, k, seed, None))
}

/// Grows `centers` to `k` by repeatedly splitting the cluster with the largest
/// total deviation at the median of its heavier side.
fn split_to(sorted: &[f64], mut centers: Vec<f64>, k: usize) -> Vec<f64> {
    while centers.len() < k {
        let mut worst: Option<(f64, f64)> = None;
        for (j, (lo, hi)) in cells(sorted, &centers).into_iter().enumerate() {
            let c = centers[j];
            let cell = &sorted[lo..hi];
            let below: Vec<f64> = cell.iter().copied().filter(|&v| v < c).collect();
            let above: Vec<f64> = cell.iter().copied().filter(|&v| v > c).collect();
            let dev_b: f64 = below.iter().map(|v| c - v).sum();
            let dev_a: f64 = above.iter().map(|v| v - c).sum();
            let side = if dev_b >= dev_a { &below } else { &above };
            if side.is_empty() {
                continue;
            }
            let total = dev_b + dev_a;
            if worst.is_none_or(|(w, _)| total > w) {
                worst = Some((total, median_sorted(side)));
            }
        }
        let (_, new) = worst.expect("k never exceeds the distinct values");
        let at = centers.partition_point(|&c| c < new);
        centers.insert(at, new);
    }
    centers
}

/// Fits every k in `ks` (strictly increasing); each fit also considers the
/// previous centers grown by splitting, so distortion is nonincreasing in k.
pub fn fit_axis_kmeans_nested(values: &[f64], ks: &[usize], seed: u64) -> Result<Vec<Vec<f64>>, DatasetError> {
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DatasetError::UnsortedK);
    }
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(ks.len());
    for &k in ks {
        let (sorted, uniq) = check_k(values, k)?;
        let warm = out.last().map(|prev| split_to(&sorted, prev.clone(), k));
        out.push(best_fit(values, &sorted, &uniq, k, seed, warm));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerModel {
    pub k: usize,
    pub seed: u64,
    /// Ascending centers per axis; an axis with fewer distinct values than k
    /// gets one center per distinct value.
    pub centers: Vec<Vec<f64>>,
    pub distortion: [f64; AXES],
}

impl QuantizerModel {
    pub fn quantize(&self, a: &LowLevelAction) -> LowLevelAction {
        let mut out = *a;
        for (i, c) in self.centers.iter().enumerate() {
            out.0[i] = c[nearest(c, a.0[i])];
        }
        out
    }

    /// Mean of the per-axis distortions.
    pub fn mean_distortion(&self) -> f64 {
        self.distortion.iter().sum::<f64>() / AXES as f64
    }
}

fn axis_values(transitions: &[Transition]) -> Result<Vec<Vec<f64>>, DatasetError> {
    if transitions.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok((0..AXES)
        .map(|i| transitions.iter().map(|t| t.action.0[i]).collect())
        .collect())
}

/// Fits quantizers for every k in `ks` with nested initialization per axis.
pub fn fit_quantizers(transitions: &[Transition], ks: &[usize], seed: u64) -> Result<Vec<QuantizerModel>, DatasetError> {
    if ks.contains(&0) {
        return Err(DatasetError::ZeroK);
    }
    let axes = axis_values(transitions)?;
    let mut per_axis = Vec::with_capacity(AXES);
    for values in &axes {
        let cap = distinct(&sorted_copy(values)).len();
        let mut capped: Vec<usize> = ks.iter().map(|&k| k.min(cap)).collect();
        capped.dedup();
        let fits = fit_axis_kmeans_nested(values, &capped, seed)?;
        per_axis.push(
            ks.iter()
                .map(|&k| fits[capped.iter().position(|&c| c == k.min(cap)).expect("capped k")].clone())
                .collect::<Vec<_>>(),
        );
    }
    Ok(ks
        .iter()
        .enumerate()
        .map(|(n, &k)| {
            let centers: Vec<Vec<f64>> = per_axis.iter().map(|f| f[n].clone()).collect();
            let mut distortion = [0.0; AXES];
            for i in 0..AXES {
                distortion[i] = l1_distortion(&axes[i], &centers[i]);
            }
            QuantizerModel {
                k,
                seed,
                centers,
                distortion,
            }
        })
        .collect())
}

/// Replaces every action component by its nearest per-axis center; returns
/// the quantized transitions and the mean L1 distance between original and
/// quantized actions.
pub fn quantize_dataset(transitions: &[Transition], k: usize, seed: u64) -> Result<(Vec<Transition>, f64), DatasetError> {
    let model = fit_quantizers(transitions, &[k], seed)?.remove(0);
    let mut total = 0.0;
    let out = transitions
        .iter()
        .map(|t| {
            let q = model.quantize(&t.action);
            total += (0..AXES).map(|i| (q.0[i] - t.action.0[i]).abs()).sum::<f64>();
            Transition { action: q, ..t.clone() }
        })
        .collect();
    Ok((out, total / transitions.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuantizationRow {
    pub k: usize,
    pub per_axis: [f64; AXES],
    pub mean: f64,
}

pub fn quantization_report(transitions: &[Transition], ks: &[usize], seed: u64) -> Result<Vec<QuantizationRow>, DatasetError> {
    Ok(fit_quantizers(transitions, ks, seed)?
        .into_iter()
        .map(|m| QuantizationRow {
            k: m.k,
            per_axis: m.distortion,
            mean: m.mean_distortion(),
        })
        .collect())
}

pub fn write_report_csv<W: Write>(rows: &[QuantizationRow], out: W) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["k".to_string()];
    header.extend(AXIS_NAMES.iter().map(|a| a.to_string()));
    header.push("mean".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.k.to_string()];
        rec.extend(r.per_axis.iter().map(|v| v.to_string()));
        rec.push(r.mean.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPoint {
    pub id: usize,
    pub text: String,
    pub xy: [f64; 2],
}

/// Projects the canonical-text embeddings onto their top two principal
/// directions. Each direction's largest-magnitude loading is made positive.
pub fn export_primitive_embeddings(
    params: &EncoderParams,
    vocab: &PrimitiveVocabulary,
) -> Result<Vec<EmbeddingPoint>, DatasetError> {
    let prims = vocab.primitives();
    let rows: Vec<Vec<f64>> = prims
        .iter()
        .map(|p| encode_text(&p.canonical_text, params))
        .collect::<Result<_, _>>()?;
    let (n, d) = (rows.len(), params.dim);
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let second = eig.eigenvalues[order.get(1).copied().unwrap_or(order[0])];
    if d < 2 || second <= 1e-12 * top.max(1e-300) {
        tracing::warn!("embedding covariance is rank-deficient; second axis is degenerate");
    }
    let mut dirs = Vec::with_capacity(2);
    for k in 0..2 {
        let mut v = match order.get(k) {
            Some(&c) => eig.eigenvectors.column(c).into_owned(),
            None => nalgebra::DVector::zeros(d),
        };
        let lead = v.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if lead < 0.0 {
            v.neg_mut();
        }
        dirs.push(v);
    }
    Ok(prims
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let row = x.row(i);
            EmbeddingPoint {
                id: p.id,
                text: p.canonical_text.clone(),
                xy: [row.dot(&dirs[0].transpose()), row.dot(&dirs[1].transpose())],
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_pairs_split_cleanly() {
        let c = fit_axis_kmeans(&[-0.1, -0.1, 0.1, 0.1], 2, 0).unwrap();
        assert_eq!(c, vec![-0.1, 0.1]);
    }

    #[test]
    fn one_center_is_the_median() {
        let v = [0.3, -1.0, 2.0, 0.5, 0.1, 7.0];
        let c = fit_axis_kmeans(&v, 1, 3).unwrap();
        assert_eq!(c, vec![(0.3 + 0.5) / 2.0]);
        let odd = fit_axis_kmeans(&v[..5], 1, 3).unwrap();
        assert_eq!(odd, vec![0.3]);
    }

    #[test]
    fn k_equal_to_distinct_count_is_exact() {
        let v = [1.0, 2.0, 2.0, 5.0, 1.0, 9.0];
        let c = fit_axis_kmeans(&v, 4, 1).unwrap();
        assert_eq!(c, vec![1.0, 2.0, 5.0, 9.0]);
        assert_eq!(l1_distortion(&v, &c), 0.0);
    }

    #[test]
    fn bad_k_is_rejected() {
        assert!(matches!(
            fit_axis_kmeans(&[1.0, 1.0, 2.0], 3, 0),
            Err(DatasetError::TooManyClusters { k: 3, distinct: 2 })
        ));
        assert!(matches!(fit_axis_kmeans(&[1.0], 0, 0), Err(DatasetError::ZeroK)));
        assert!(matches!(fit_axis_kmeans(&[], 1, 0), Err(DatasetError::NoValues)));
        assert!(matches!(
            fit_axis_kmeans_nested(&[1.0, 2.0], &[2, 1], 0),
            Err(DatasetError::UnsortedK)
        ));
    }

    #[test]
    fn nearest_breaks_ties_low() {
        assert_eq!(nearest(&[0.0, 2.0], 1.0), 0);
        assert_eq!(nearest(&[0.0, 2.0], 1.5), 1);
        assert_eq!(nearest(&[0.0, 2.0], -4.0), 0);
        assert_eq!(nearest(&[0.0, 2.0], 4.0), 1);
    }

    #[test]
    fn splitting_adds_distinct_centers() {
        let v = sorted_copy(&[0.0, 0.0, 1.0, 5.0, 6.0, 7.0, 20.0]);
        let c = split_to(&v, vec![5.0], 3);
        assert_eq!(c.len(), 3);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
    }
}
