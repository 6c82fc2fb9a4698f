//! Accuracy, macro mAP, cross-modal Recall@K, cosine-similarity drift
//! statistics and linear probing.
//!
//! Rankings always break score ties by index ascending, so every metric is
//! a deterministic function of its inputs.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::head::{argmax, ClassificationHead};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{lr_at, AdamW, TrainConfig};

pub const HISTOGRAM_BINS: usize = 20;
pub const DEFAULT_KS: [usize; 5] = [1, 5, 10, 20, 50];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    #[serde(rename = "mAP")]
    Map,
}

impl Metric {
    pub fn for_labels(multilabel: bool) -> Self {
        if multilabel {
            Metric::Map
        } else {
            Metric::Accuracy
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Map => "mAP",
        }
    }
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Indices sorted by score descending, index ascending on ties.
pub fn ranking(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    idx
}

/// Average precision of one class; `None` without positives.
pub fn average_precision(scores: &[f32], positives: &[bool]) -> Option<f64> {
    let total = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &i) in ranking(scores).iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// Per-class AP for every class with at least one positive.
pub fn per_class_ap(scores: &Tensor, labels: &Tensor) -> Result<Vec<Option<f64>>> {
    if scores.shape() != labels.shape() || scores.shape().len() != 2 {
        return Err(Error::shape(
            "mean_average_precision",
            format!("scores {:?} vs labels {:?}", scores.shape(), labels.shape()),
        ));
    }
    let (n, c) = (scores.rows(), scores.row_len());
    Ok((0..c)
        .map(|ci| {
            let col: Vec<f32> = (0..n).map(|r| scores.data()[r * c + ci]).collect();
            let pos: Vec<bool> = (0..n).map(|r| labels.data()[r * c + ci] > 0.5).collect();
            average_precision(&col, &pos)
        })
        .collect())
}

/// Macro mAP over classes that have at least one positive.
pub fn mean_average_precision(scores: &Tensor, labels: &Tensor) -> Result<f64> {
    let aps: Vec<f64> = per_class_ap(scores, labels)?.into_iter().flatten().collect();
    if aps.is_empty() {
        return Err(Error::Degenerate("no positive labels anywhere".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Embedding rows with sample ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub matrix: Tensor,
    pub ids: Vec<usize>,
    pub normalized: bool,
}

impl EmbeddingSet {
    pub fn new(matrix: Tensor, ids: Vec<usize>) -> Result<Self> {
        if matrix.shape().len() != 2 || matrix.rows() != ids.len() {
            return Err(Error::shape("embedding set", format!("{:?} for {} ids", matrix.shape(), ids.len())));
        }
        let mut seen = ids.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("embedding ids must be unique".into()));
        }
        Ok(EmbeddingSet { matrix, ids, normalized: false })
    }

    /// Rows scaled to unit norm (zero rows stay zero).
    pub fn normalize(&self) -> Self {
        EmbeddingSet { matrix: l2_rows(&self.matrix), ids: self.ids.clone(), normalized: true }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn l2_rows(m: &Tensor) -> Tensor {
    let w = m.row_len();
    let mut out = Vec::with_capacity(m.len());
    for row in m.data().chunks(w) {
        let n = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        out.extend(row.iter().map(|&v| if n == 0.0 { 0.0 } else { (v as f64 / n) as f32 }));
    }
    Tensor::new(m.shape().to_vec(), out).expect("same shape")
}

/// Cosine similarity matrix `[A, B]`.
pub fn similarity_matrix(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<Tensor> {
    let (an, bn) = (a.normalize(), b.normalize());
    let d = an.matrix.row_len();
    if bn.matrix.row_len() != d {
        return Err(Error::shape("similarity", format!("dims {d} vs {}", bn.matrix.row_len())));
    }
    let mut out = Vec::with_capacity(a.len() * b.len());
    for i in 0..a.len() {
        let ra = an.matrix.row(i);
        for j in 0..b.len() {
            let rb = bn.matrix.row(j);
            out.push(ra.iter().zip(rb).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>() as f32);
        }
    }
    Tensor::new(vec![a.len(), b.len()], out)
}

pub fn transpose(m: &Tensor) -> Tensor {
    let (r, c) = (m.rows(), m.row_len());
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = m.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("same element count")
}

/// Recall@K from a `[Q, G]` similarity matrix. `pairing[q]` is the gallery
/// index of query `q`'s counterpart.
pub fn recall_at_k_from_similarity(sim: &Tensor, pairing: &[usize], k: usize) -> Result<f64> {
    let (q, g) = (sim.rows(), sim.row_len());
    if k == 0 || k > g {
        return Err(Error::InvalidArgument(format!("k = {k} with a gallery of {g}")));
    }
    if pairing.len() != q || pairing.iter().any(|&p| p >= g) {
        return Err(Error::InvalidArgument("pairing must map every query into the gallery".into()));
    }
    let mut hits = 0;
    for (qi, &p) in pairing.iter().enumerate() {
        let row = sim.row(qi);
        let target = row[p];
        let ahead = row
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > target || (s == target && j < p))
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / q as f64)
}

/// Gallery index of every query, matched by sample id.
pub fn pair_by_id(query: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<Vec<usize>> {
    let pos: BTreeMap<usize, usize> = gallery.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    query
        .ids
        .iter()
        .map(|id| pos.get(id).copied().ok_or_else(|| Error::InvalidArgument(format!("query id {id} has no gallery pair"))))
        .collect()
}

pub fn recall_at_k(query: &EmbeddingSet, gallery: &EmbeddingSet, k: usize) -> Result<f64> {
    let sim = similarity_matrix(query, gallery)?;
    recall_at_k_from_similarity(&sim, &pair_by_id(query, gallery)?, k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// `(k, recall)` for queries from the first set.
    pub a_to_b: Vec<(usize, f64)>,
    pub b_to_a: Vec<(usize, f64)>,
}

impl RetrievalReport {
    pub fn at(&self, k: usize) -> Option<(f64, f64)> {
        let a = self.a_to_b.iter().find(|r| r.0 == k)?.1;
        let b = self.b_to_a.iter().find(|r| r.0 == k)?.1;
        Some((a, b))
    }

    /// Mean of both directions at `k`.
    pub fn mean_at(&self, k: usize) -> Option<f64> {
        self.at(k).map(|(a, b)| (a + b) / 2.0)
    }
}

/// Both retrieval directions from a single similarity matrix; `b -> a` reads
/// its transpose. Values of `k` larger than the gallery are skipped.
pub fn retrieval(a: &EmbeddingSet, b: &EmbeddingSet, ks: &[usize]) -> Result<RetrievalReport> {
    let sim = similarity_matrix(a, b)?;
    let sim_t = transpose(&sim);
    let ab = pair_by_id(a, b)?;
    let ba = pair_by_id(b, a)?;
    let mut report = RetrievalReport { a_to_b: Vec::new(), b_to_a: Vec::new() };
    for &k in ks {
        if k <= b.len() {
            report.a_to_b.push((k, recall_at_k_from_similarity(&sim, &ab, k)?));
        }
        if k <= a.len() {
            report.b_to_a.push((k, recall_at_k_from_similarity(&sim_t, &ba, k)?));
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineStats {
    pub mean: f64,
    pub median: f64,
    /// Counts over 20 equal bins covering `[-1, 1]`.
    pub histogram: Vec<usize>,
    pub values: Vec<f64>,
}

/// Row-wise cosine between paired embeddings. Zero rows count as 0.
pub fn cosine_similarity_stats(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<CosineStats> {
    if a.ids != b.ids {
        return Err(Error::InvalidArgument("cosine stats need identical ids in identical order".into()));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("cosine stats of an empty set".into()));
    }
    let (an, bn) = (a.normalize(), b.normalize());
    if an.matrix.row_len() != bn.matrix.row_len() {
        return Err(Error::shape("cosine stats", "embedding dims differ"));
    }
    let values: Vec<f64> = (0..a.len())
        .map(|i| {
            an.matrix
                .row(i)
                .iter()
                .zip(bn.matrix.row(i))
                .map(|(&x, &y)| x as f64 * y as f64)
                .sum::<f64>()
                .clamp(-1.0, 1.0)
        })
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 { sorted[m / 2] } else { (sorted[m / 2 - 1] + sorted[m / 2]) / 2.0 };
    let mut histogram = vec![0usize; HISTOGRAM_BINS];
    for &v in &values {
        let bin = (((v + 1.0) / 2.0 * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        histogram[bin] += 1;
    }
    Ok(CosineStats { mean, median, histogram, values })
}

/// Zero-shot score of embeddings against a head: accuracy of the argmax for
/// single-label data, macro mAP of the logits otherwise.
pub fn zeroshot_score(embeddings: &Tensor, head: &ClassificationHead, labels: &Tensor, metric: Metric) -> Result<f64> {
    let logits = head.classify(embeddings)?;
    score_logits(&logits, labels, metric)
}

pub fn score_logits(logits: &Tensor, labels: &Tensor, metric: Metric) -> Result<f64> {
    match metric {
        Metric::Map => mean_average_precision(logits, labels),
        Metric::Accuracy => {
            let preds: Vec<usize> = (0..logits.rows()).map(|r| argmax(logits.row(r))).collect();
            accuracy(&preds, &class_ids(labels))
        }
    }
}

/// First positive column of every row.
pub fn class_ids(labels: &Tensor) -> Vec<usize> {
    (0..labels.rows())
        .map(|r| labels.row(r).iter().position(|&v| v > 0.5).unwrap_or(0))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub metric: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<Vec<Option<f64>>>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn new(task: &str, metric: &str, value: f64) -> Self {
        MetricsReport {
            task: task.to_string(),
            metric: metric.to_string(),
            value,
            values: BTreeMap::new(),
            per_class: None,
            config: serde_json::Value::Null,
        }
    }
}

/// A trained linear probe and its test score.
#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub weights: Checkpoint,
    pub report: MetricsReport,
    pub losses: Vec<f64>,
}

/// Trains `W x + b` on frozen (L2-normalized) embeddings and scores it on
/// the test embeddings.
pub fn linear_probe(
    train_x: &Tensor,
    train_y: &Tensor,
    test_x: &Tensor,
    test_y: &Tensor,
    multilabel: bool,
    cfg: &TrainConfig,
) -> Result<ProbeResult> {
    cfg.validate()?;
    let (n, d) = (train_x.rows(), train_x.row_len());
    let c = train_y.row_len();
    if train_y.rows() != n || test_x.row_len() != d || test_y.row_len() != c || test_x.rows() != test_y.rows() {
        return Err(Error::shape("linear probe", "embedding and label shapes disagree"));
    }
    let train_ids = class_ids(train_y);
    let distinct: std::collections::BTreeSet<usize> = train_ids.iter().copied().collect();
    if !multilabel && distinct.len() < 2 {
        return Err(Error::Degenerate("linear probe needs at least two classes".into()));
    }
    let train_x = l2_rows(train_x);
    let test_x = l2_rows(test_x);

    let mut rng = Rng::derive(cfg.seed, "probe/init");
    let mut weights = Checkpoint::new("linear-probe", c);
    weights.insert("probe.w", Tensor::new(vec![d, c], rng.normal_vec(d * c, 1.0 / (d as f64).sqrt()))?)?;
    weights.insert("probe.b", Tensor::zeros(&[c]))?;

    let mut opt = AdamW::new(cfg.weight_decay);
    let batch = cfg.batch_size.min(n);
    let steps_per_epoch = n / batch;
    let total = cfg.epochs * steps_per_epoch;
    let mut order_rng = Rng::derive(cfg.seed, "probe/order");
    let mut losses = Vec::with_capacity(total);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let order = order_rng.permutation(n);
        for chunk in order.chunks_exact(batch) {
            let x = train_x.select_rows(chunk)?;
            let mut g = Graph::new();
            let xi = g.input("x", &x)?;
            let w = g.param("probe.w", weights.require("probe.w")?, true)?;
            let b = g.param("probe.b", weights.require("probe.b")?, true)?;
            let z = g.matmul(xi, w)?;
            let logits = g.add(z, b)?;
            let loss = if multilabel {
                let y = g.input("y", &train_y.select_rows(chunk)?)?;
                g.bce_with_logits(logits, y)?
            } else {
                let t: Vec<usize> = chunk.iter().map(|&i| train_ids[i]).collect();
                g.softmax_cross_entropy(logits, &t)?
            };
            losses.push(g.scalar(loss));
            let grads = g.backward(loss)?;
            opt.step(&mut weights, &grads, "", lr_at(step, total, cfg))?;
            step += 1;
        }
    }

    let logits = probe_logits(&weights, &test_x)?;
    let metric = Metric::for_labels(multilabel);
    let value = score_logits(&logits, test_y, metric)?;
    let mut report = MetricsReport::new("linear_probe", metric.as_str(), value);
    if multilabel {
        report.per_class = Some(per_class_ap(&logits, test_y)?);
    }
    Ok(ProbeResult { weights, report, losses })
}

fn probe_logits(weights: &Checkpoint, x: &Tensor) -> Result<Tensor> {
    let w = weights.require("probe.w")?;
    let b = weights.require("probe.b")?;
    let c = w.row_len();
    let mut out = Vec::with_capacity(x.rows() * c);
    for r in 0..x.rows() {
        let row = x.row(r);
        for ci in 0..c {
            let mut acc = b.data()[ci] as f64;
            for (j, &v) in row.iter().enumerate() {
                acc += v as f64 * w.data()[j * c + ci] as f64;
            }
            out.push(acc as f32);
        }
    }
    Tensor::new(vec![x.rows(), c], out)
}
