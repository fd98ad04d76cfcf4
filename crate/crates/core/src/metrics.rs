//! Classification, segmentation, depth and clustering metrics.

use std::fmt::Write as _;

use crate::error::{shape_err, GepError, Result};
use crate::par::{self, Exec};
use crate::tensor::Tensor;

/// Fraction of rows whose label ranks among the `k` highest scores. A class
/// tied with the label outranks it only if its index is lower.
pub fn topk_accuracy(scores: &Tensor, labels: &[u32], k: usize) -> Result<f64> {
    if scores.ndim() != 2 || scores.rows() != labels.len() {
        return shape_err(format!("scores {:?} with {} labels", scores.shape(), labels.len()));
    }
    let c = scores.cols();
    if k == 0 || k > c {
        return Err(GepError::Parameter(format!("k = {k} with {c} classes")));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= c {
            return Err(GepError::InvalidLabel { label: l, classes: c });
        }
        let row = scores.row(i);
        let s = row[l];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > s || (v == s && j < l))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Counts indexed `[ground truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

const CONFUSION_CHUNK: usize = 4096;

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return shape_err("confusion counts must be square");
        }
        Ok(Self {
            classes: c,
            counts: rows.iter().flatten().copied().collect(),
        })
    }

    /// Adds pixel pairs; ground-truth entries equal to `ignore` are skipped.
    pub fn add(&mut self, gt: &[u32], pred: &[u32], ignore: Option<u32>) -> Result<()> {
        if gt.len() != pred.len() {
            return shape_err(format!("{} labels vs {} predictions", gt.len(), pred.len()));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            if Some(g) == ignore {
                continue;
            }
            for v in [g, p] {
                if v as usize >= self.classes {
                    return Err(GepError::InvalidLabel { label: v as usize, classes: self.classes });
                }
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return shape_err("merging confusion matrices of different sizes");
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn build(classes: usize, gt: &[u32], pred: &[u32], ignore: Option<u32>) -> Result<Self> {
        Self::build_with(Exec::default(), classes, gt, pred, ignore)
    }

    /// Partial matrices over fixed-size chunks, merged in chunk order.
    pub fn build_with(exec: Exec, classes: usize, gt: &[u32], pred: &[u32], ignore: Option<u32>) -> Result<Self> {
        if gt.len() != pred.len() {
            return shape_err(format!("{} labels vs {} predictions", gt.len(), pred.len()));
        }
        let chunks = gt.len().div_ceil(CONFUSION_CHUNK);
        let parts = par::try_map_range(exec, chunks, |i| {
            let lo = i * CONFUSION_CHUNK;
            let hi = (lo + CONFUSION_CHUNK).min(gt.len());
            let mut m = Self::new(classes);
            m.add(&gt[lo..hi], &pred[lo..hi], ignore)?;
            Ok::<_, GepError>(m)
        })?;
        let mut total = Self::new(classes);
        for p in &parts {
            total.merge(p)?;
        }
        Ok(total)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Class-mean IoU and accuracy over classes present in the ground truth.
pub fn miou_macc(conf: &ConfusionMatrix) -> (f64, f64) {
    let c = conf.classes();
    let (mut iou, mut acc, mut present) = (0.0, 0.0, 0usize);
    for k in 0..c {
        let row: u64 = (0..c).map(|j| conf.get(k, j)).sum();
        if row == 0 {
            continue;
        }
        let col: u64 = (0..c).map(|i| conf.get(i, k)).sum();
        let tp = conf.get(k, k);
        iou += tp as f64 / (row + col - tp) as f64;
        acc += tp as f64 / row as f64;
        present += 1;
    }
    if present == 0 {
        return (0.0, 0.0);
    }
    (iou / present as f64, acc / present as f64)
}

/// Masked mean absolute error and RMS error; an empty mask gives zeros.
pub fn depth_errors(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<(f64, f64)> {
    if pred.shape() != gt.shape() || pred.shape() != mask.shape() {
        return shape_err(format!("depth {:?}, target {:?}, mask {:?}", pred.shape(), gt.shape(), mask.shape()));
    }
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
    for ((&p, &t), &m) in pred.data().iter().zip(gt.data()).zip(mask.data()) {
        if m != 0.0 {
            let d = p - t;
            abs += d.abs();
            sq += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((abs / n as f64, (sq / n as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterScores {
    pub silhouette: f64,
    pub davies_bouldin: f64,
    pub calinski_harabasz: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn validate_clusters(points: &Tensor, labels: &[u32]) -> Result<usize> {
    if points.ndim() != 2 || points.rows() != labels.len() {
        return shape_err(format!("points {:?} with {} labels", points.shape(), labels.len()));
    }
    let k = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l as usize] += 1;
    }
    if k < 2 || sizes.contains(&0) {
        return Err(GepError::Parameter(
            "cluster labels must be contiguous from 0 and cover at least 2 clusters".into(),
        ));
    }
    Ok(k)
}

pub fn cluster_metrics(points: &Tensor, labels: &[u32]) -> Result<ClusterScores> {
    cluster_metrics_with(Exec::default(), points, labels)
}

/// Silhouette (a singleton point scores 0), Davies–Bouldin (pairs with
/// coincident centroids are skipped) and Calinski–Harabasz (0 when both
/// dispersions vanish), all with Euclidean distances.
pub fn cluster_metrics_with(exec: Exec, points: &Tensor, labels: &[u32]) -> Result<ClusterScores> {
    let k = validate_clusters(points, labels)?;
    let (n, d) = (points.rows(), points.cols());
    let mut sizes = vec![0usize; k];
    let mut centroids = vec![0.0; k * d];
    for (i, &l) in labels.iter().enumerate() {
        sizes[l as usize] += 1;
        for (c, &x) in centroids[l as usize * d..(l as usize + 1) * d].iter_mut().zip(points.row(i)) {
            *c += x;
        }
    }
    for (c, chunk) in centroids.chunks_mut(d.max(1)).enumerate() {
        for x in chunk {
            *x /= sizes[c] as f64;
        }
    }
    let centroid = |c: usize| &centroids[c * d..(c + 1) * d];

    let sil = par::map_range(exec, n, |i| {
        let own = labels[i] as usize;
        if sizes[own] == 1 {
            return 0.0;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[labels[j] as usize] += dist(points.row(i), points.row(j));
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m == 0.0 { 0.0 } else { (b - a) / m }
    });
    let silhouette = sil.iter().sum::<f64>() / n as f64;

    let mut spread = vec![0.0; k];
    for (i, &l) in labels.iter().enumerate() {
        spread[l as usize] += dist(points.row(i), centroid(l as usize));
    }
    for (s, &m) in spread.iter_mut().zip(&sizes) {
        *s /= m as f64;
    }
    let mut db = 0.0;
    for a in 0..k {
        let mut worst: f64 = 0.0;
        for b in 0..k {
            if a == b {
                continue;
            }
            let dab = dist(centroid(a), centroid(b));
            if dab > 0.0 {
                worst = worst.max((spread[a] + spread[b]) / dab);
            }
        }
        db += worst;
    }
    let davies_bouldin = db / k as f64;

    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &x) in mean.iter_mut().zip(points.row(i)) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let between: f64 = (0..k)
        .map(|c| sizes[c] as f64 * dist(centroid(c), &mean).powi(2))
        .sum();
    let within: f64 = (0..n)
        .map(|i| dist(points.row(i), centroid(labels[i] as usize)).powi(2))
        .sum();
    let calinski_harabasz = if between == 0.0 {
        0.0
    } else if within == 0.0 {
        f64::INFINITY
    } else {
        between * (n - k) as f64 / (within * (k - 1) as f64)
    };
    Ok(ClusterScores {
        silhouette,
        davies_bouldin,
        calinski_harabasz,
    })
}

/// Ordered metric name → value pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub entries: Vec<(String, String)>,
}

impl Report {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    /// One `key=value` per line.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }

    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut r = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GepError::Format(format!("report line {} has no '='", i + 1)))?;
            r.push(k, v);
        }
        Ok(r)
    }
}
