//! Evaluation metrics: L1 and macro-F1, confusion matrices, random-guess
//! levels, fingerprint similarity, multi-image aggregation, occlusion
//! heatmaps and rank AUC.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{NUM_COARSE, NUM_CONTINUOUS, NUM_DISCRETE, NUM_FINE};
use crate::parser::Prediction;
use crate::rng::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L1Report {
    pub per_parameter: [f64; NUM_CONTINUOUS],
    pub mean: f64,
    pub count: usize,
}

/// Mean absolute error per parameter (normalized space) and its mean over parameters.
pub fn l1_error(pred: &[[f64; NUM_CONTINUOUS]], target: &[[f64; NUM_CONTINUOUS]]) -> Result<L1Report> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape("l1_error", format!("{} predictions, {} targets", pred.len(), target.len())));
    }
    let n = pred.len() as f64;
    let per_parameter = std::array::from_fn(|j| pred.iter().zip(target).map(|(p, t)| (p[j] - t[j]).abs()).sum::<f64>() / n);
    Ok(L1Report {
        mean: per_parameter.iter().sum::<f64>() / NUM_CONTINUOUS as f64,
        per_parameter,
        count: pred.len(),
    })
}

/// `2TP / (2TP + FP + FN)` for one class.
pub fn class_f1(pred: &[usize], target: &[usize], class: usize) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        match (p == class, t == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let d = 2 * tp + fp + fn_;
    if d == 0 {
        0.0
    } else {
        2.0 * tp as f64 / d as f64
    }
}

/// Macro-F1 over the classes that occur in the targets or the predictions.
pub fn f1_score(pred: &[usize], target: &[usize], classes: usize) -> Result<f64> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::invalid(format!("f1 on {} predictions, {} targets", pred.len(), target.len())));
    }
    if let Some(&l) = pred.iter().chain(target).find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {l} >= {classes} classes")));
    }
    let seen: BTreeSet<usize> = pred.iter().chain(target).copied().collect();
    Ok(seen.iter().map(|&c| class_f1(pred, target, c)).sum::<f64>() / seen.len() as f64)
}

pub fn f1_flags(pred: &[bool], target: &[bool]) -> Result<f64> {
    let p: Vec<usize> = pred.iter().map(|&b| b as usize).collect();
    let t: Vec<usize> = target.iter().map(|&b| b as usize).collect();
    f1_score(&p, &t, 2)
}

/// Counts indexed `[predicted][ground truth]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Ground-truth class counts (column sums).
    pub fn truth_counts(&self) -> Vec<usize> {
        (0..self.classes).map(|t| self.counts.iter().map(|r| r[t]).sum()).collect()
    }

    /// Number of predicted classes (rows) with any count.
    pub fn nonzero_rows(&self) -> usize {
        self.counts.iter().filter(|r| r.iter().any(|&c| c > 0)).count()
    }

    /// All predictions fall in one class.
    pub fn collapsed(&self) -> bool {
        self.nonzero_rows() <= 1
    }

    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("confusion", "class counts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn to_csv(&self, class_names: &[&str]) -> String {
        let name = |i: usize| class_names.get(i).map_or_else(|| i.to_string(), |s| s.to_string());
        let mut out = String::from("predicted\\truth");
        for t in 0..self.classes {
            out.push(',');
            out.push_str(&name(t));
        }
        out.push('\n');
        for (p, row) in self.counts.iter().enumerate() {
            out.push_str(&name(p));
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(pred: &[usize], target: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != target.len() {
        return Err(Error::shape("confusion", format!("{} vs {}", pred.len(), target.len())));
    }
    let mut counts = vec![vec![0; classes]; classes];
    for (&p, &t) in pred.iter().zip(target) {
        if p >= classes || t >= classes {
            return Err(Error::invalid(format!("label out of range for {classes} classes")));
        }
        counts[p][t] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

/// Expected L1 of uniform [0, 1] guesses against targets drawn from `targets`.
pub fn random_guess_l1(targets: &[[f64; NUM_CONTINUOUS]], draws: usize, seed: u64) -> Result<f64> {
    if targets.is_empty() || draws == 0 {
        return Err(Error::invalid("random guess needs targets and draws"));
    }
    let mut rng = rng_for(seed, "random-guess-l1");
    let mut total = 0.0;
    for _ in 0..draws {
        let t = &targets[rng.gen_range(0..targets.len())];
        let j = rng.gen_range(0..NUM_CONTINUOUS);
        total += (rng.gen::<f64>() - t[j]).abs();
    }
    Ok(total / draws as f64)
}

/// Macro-F1 of uniformly random labels against `target`, averaged over `repeats`.
pub fn random_guess_f1(target: &[usize], classes: usize, repeats: usize, seed: u64) -> Result<f64> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be positive"));
    }
    let mut rng = rng_for(seed, "random-guess-f1");
    let mut total = 0.0;
    for _ in 0..repeats {
        let pred: Vec<usize> = target.iter().map(|_| rng.gen_range(0..classes)).collect();
        total += f1_score(&pred, target, classes)?;
    }
    Ok(total / repeats as f64)
}

/// A permutation of `0..n` that is not the identity (for n >= 2).
pub fn non_identity_permutation<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    if n < 2 {
        return p;
    }
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().any(|(i, &v)| i != v) {
            return p;
        }
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    Some((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub ids: Vec<String>,
    /// `NaN` where a cell had no usable pairs.
    pub values: Vec<Vec<f64>>,
    pub pairs_per_cell: usize,
    pub skipped_pairs: usize,
}

impl SimilarityMatrix {
    pub fn diagonal_mean(&self) -> f64 {
        mean_finite((0..self.ids.len()).map(|i| self.values[i][i]))
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        let n = self.ids.len();
        mean_finite((0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| self.values[i][j]))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("gm");
        for id in &self.ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (id, row) in self.ids.iter().zip(&self.values) {
            out.push_str(id);
            for v in row {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

fn mean_finite(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mean cosine similarity over `pairs` distinct sampled fingerprint pairs per
/// cell. `fingerprints[g]` is `[n_g, ...]`; diagonal pairs use distinct images.
pub fn similarity_matrix(ids: &[String], fingerprints: &[Tensor<f32>], pairs: usize, seed: u64) -> Result<SimilarityMatrix> {
    if ids.len() != fingerprints.len() || pairs == 0 {
        return Err(Error::invalid("one fingerprint set per id and pairs > 0 required"));
    }
    let mut rng = rng_for(seed, "similarity");
    let g = ids.len();
    let mut values = vec![vec![f64::NAN; g]; g];
    let mut skipped = 0;
    for a in 0..g {
        for b in 0..g {
            let (na, nb) = (fingerprints[a].shape()[0], fingerprints[b].shape()[0]);
            let available = if a == b { na * na.saturating_sub(1) / 2 } else { na * nb };
            if available < pairs {
                return Err(Error::invalid(format!(
                    "cell ({}, {}) has {available} distinct pairs, {pairs} requested",
                    ids[a], ids[b]
                )));
            }
            let mut seen = HashSet::new();
            let mut sum = 0.0;
            let mut used = 0;
            while seen.len() < pairs {
                let i = rng.gen_range(0..na);
                let j = rng.gen_range(0..nb);
                let key = if a == b { (i.min(j), i.max(j)) } else { (i, j) };
                if (a == b && i == j) || !seen.insert(key) {
                    continue;
                }
                match cosine(fingerprints[a].row(i), fingerprints[b].row(j)) {
                    Some(c) => {
                        sum += c;
                        used += 1;
                    }
                    None => skipped += 1,
                }
            }
            if used > 0 {
                values[a][b] = sum / used as f64;
            }
        }
    }
    Ok(SimilarityMatrix {
        ids: ids.to_vec(),
        values,
        pairs_per_cell: pairs,
        skipped_pairs: skipped,
    })
}

/// Hard decisions derived from a prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub continuous: [f64; NUM_CONTINUOUS],
    pub discrete: [usize; NUM_DISCRETE],
    pub coarse: [bool; NUM_COARSE],
    pub fine: [bool; NUM_FINE],
}

impl From<&Prediction> for Decision {
    fn from(p: &Prediction) -> Self {
        Decision {
            continuous: p.continuous,
            discrete: p.discrete,
            coarse: p.coarse_flags(),
            fine: p.fine_flags(),
        }
    }
}

fn majority(votes: impl Iterator<Item = usize>, classes: usize) -> usize {
    let mut counts = vec![0usize; classes];
    for v in votes {
        counts[v] += 1;
    }
    // lowest index wins ties
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

/// Combine the first `n` decisions: mean for continuous values, majority vote
/// (ties toward the lower class index) for labels and flags.
pub fn aggregate_predictions(decisions: &[Decision], n: usize) -> Result<Decision> {
    if n == 0 || n > decisions.len() {
        return Err(Error::invalid(format!("aggregate over {n} of {} predictions", decisions.len())));
    }
    let d = &decisions[..n];
    let max_class = |k: usize| d.iter().map(|x| x.discrete[k]).max().unwrap_or(0) + 1;
    Ok(Decision {
        continuous: std::array::from_fn(|j| d.iter().map(|x| x.continuous[j]).sum::<f64>() / n as f64),
        discrete: std::array::from_fn(|k| majority(d.iter().map(|x| x.discrete[k]), max_class(k))),
        coarse: std::array::from_fn(|m| majority(d.iter().map(|x| x.coarse[m] as usize), 2) == 1),
        fine: std::array::from_fn(|m| majority(d.iter().map(|x| x.fine[m] as usize), 2) == 1),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Value(f32),
    /// Re-use the image's own pixels (a no-op mask).
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Mean occluded score per pixel (each patch's value fills its pixels).
    pub values: Vec<f64>,
    /// Mean unoccluded score.
    pub baseline: f64,
}

impl Heatmap {
    pub fn delta(&self) -> Vec<f64> {
        self.values.iter().map(|v| v - self.baseline).collect()
    }

    pub fn to_csv(&self) -> String {
        self.values
            .chunks(self.width)
            .map(|r| r.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

/// Slide a `patch` x `patch` mask with stride `patch` over `images`
/// (`[N, C, H, W]`) and average `score` over images for each position.
/// `score` returns one value per image, e.g. an L1 error or `1 - p(truth)`.
pub fn occlusion_heatmap(
    images: &Tensor<f32>,
    patch: usize,
    fill: Fill,
    score: impl Fn(&Tensor<f32>) -> Result<Vec<f64>>,
) -> Result<Heatmap> {
    let (n, c, h, w) = match *images.shape() {
        [n, c, h, w] if n > 0 => (n, c, h, w),
        ref s => return Err(Error::shape("occlusion_heatmap", format!("{s:?}"))),
    };
    if patch == 0 || patch >= h.min(w) {
        return Err(Error::invalid(format!("patch {patch} must lie in 1..{}", h.min(w))));
    }
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let baseline = mean(score(images)?);
    let mut values = vec![0.0; h * w];
    for gy in (0..h).step_by(patch) {
        for gx in (0..w).step_by(patch) {
            let mut occluded = images.clone();
            if let Fill::Value(v) = fill {
                let data = occluded.data_mut();
                for i in 0..n * c {
                    for y in gy..(gy + patch).min(h) {
                        for x in gx..(gx + patch).min(w) {
                            data[i * h * w + y * w + x] = v;
                        }
                    }
                }
            }
            let s = mean(score(&occluded)?);
            for y in gy..(gy + patch).min(h) {
                for x in gx..(gx + patch).min(w) {
                    values[y * w + x] = s;
                }
            }
        }
    }
    Ok(Heatmap {
        height: h,
        width: w,
        values,
        baseline,
    })
}

/// Rank-based AUC (Mann–Whitney U); ties count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}
