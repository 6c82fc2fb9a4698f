//! Frozen zero-shot classification head built from class names and caption
//! templates, and cosine-similarity classification against it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::checkpoint::Checkpoint;
use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `e^2.659`, the usual initial CLIP temperature, used as a fixed constant.
pub fn default_logit_scale() -> f64 {
    2.659f64.exp()
}

pub const SLOT: &str = "{}";
const HEAD_ARCH: &str = "classification-head";
const HEAD_W: &str = "head.w";
const META_LOGIT_SCALE: &str = "logit_scale";
const META_CLASSES: &str = "classes";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub classes: Vec<String>,
    pub templates: Vec<String>,
}

impl PromptSet {
    pub fn new(classes: Vec<String>, templates: Vec<String>) -> Result<Self> {
        let p = PromptSet { classes, templates };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.templates.is_empty() {
            return Err(Error::InvalidArgument("prompt set needs at least one class and one template".into()));
        }
        if let Some(t) = self.templates.iter().find(|t| t.matches(SLOT).count() != 1) {
            return Err(Error::InvalidArgument(format!("template {t:?} must contain exactly one {SLOT}")));
        }
        Ok(())
    }

    pub fn fill(template: &str, class: &str) -> String {
        template.replacen(SLOT, class, 1)
    }

    /// Every filled prompt for class `c`, in template order.
    pub fn prompts_for(&self, c: usize) -> Vec<String> {
        self.templates.iter().map(|t| Self::fill(t, &self.classes[c])).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: PromptSet = serde_json::from_str(&raw)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Class embedding matrix `[D, C]` with unit columns, plus a logit scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationHead {
    weights: Tensor,
    logit_scale: f64,
    classes: Vec<String>,
}

impl ClassificationHead {
    /// Averages L2-normalized prompt embeddings per class and re-normalizes.
    /// `per_class[c]` is `[P_c, D]`.
    pub fn from_prompt_embeddings(per_class: &[Tensor], classes: Vec<String>, logit_scale: f64) -> Result<Self> {
        if !(logit_scale > 0.0 && logit_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("logit scale must be positive, got {logit_scale}")));
        }
        if per_class.is_empty() || per_class.len() != classes.len() {
            return Err(Error::InvalidArgument("one embedding block per class is required".into()));
        }
        let d = per_class[0].row_len();
        let c = per_class.len();
        let mut w = vec![0.0f32; d * c];
        for (ci, block) in per_class.iter().enumerate() {
            if block.shape().len() != 2 || block.row_len() != d || block.rows() == 0 {
                return Err(Error::shape("head", format!("class {ci} embeddings {:?}", block.shape())));
            }
            let mut mean = vec![0.0f64; d];
            for r in 0..block.rows() {
                let row = block.row(r);
                let n = norm(row);
                if n == 0.0 {
                    return Err(Error::Degenerate(format!(
                        "prompt {r} of class {:?} embeds to the zero vector",
                        classes[ci]
                    )));
                }
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v as f64 / n;
                }
            }
            let p = block.rows() as f64;
            mean.iter_mut().for_each(|m| *m /= p);
            let n = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Degenerate(format!("class {:?} averages to the zero vector", classes[ci])));
            }
            for (j, m) in mean.iter().enumerate() {
                w[j * c + ci] = (m / n) as f32;
            }
        }
        Ok(ClassificationHead { weights: Tensor::new(vec![d, c], w)?, logit_scale, classes })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.weights.shape()[1]
    }

    /// `logits[n, c] = scale * <e_n / |e_n|, w_c>`. Zero rows give zero logits.
    pub fn classify(&self, embeddings: &Tensor) -> Result<Tensor> {
        let (d, c) = (self.dim(), self.num_classes());
        if embeddings.shape().len() != 2 || embeddings.row_len() != d {
            return Err(Error::shape("classify", format!("expected [N, {d}], got {:?}", embeddings.shape())));
        }
        let w = self.weights.data();
        let mut out = Vec::with_capacity(embeddings.rows() * c);
        for r in 0..embeddings.rows() {
            let row = embeddings.row(r);
            let n = norm(row);
            for ci in 0..c {
                if n == 0.0 {
                    out.push(0.0);
                    continue;
                }
                let dot: f64 = row.iter().enumerate().map(|(j, &v)| v as f64 * w[j * c + ci] as f64).sum();
                out.push((self.logit_scale * dot / n) as f32);
            }
        }
        Tensor::new(vec![embeddings.rows(), c], out)
    }

    /// Argmax per row, lowest index on ties.
    pub fn predict(&self, embeddings: &Tensor) -> Result<Vec<usize>> {
        let logits = self.classify(embeddings)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    /// Adds the head as frozen leaf `head.w` and returns scaled logits.
    pub fn build(&self, g: &mut Graph, embeddings: NodeId) -> Result<NodeId> {
        let w = g.param(HEAD_W, &self.weights, false)?;
        let e = g.l2_normalize(embeddings)?;
        let cos = g.matmul(e, w)?;
        g.scale(cos, self.logit_scale)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(HEAD_ARCH, self.dim());
        ck.insert(HEAD_W, self.weights.clone())?;
        ck.set_meta(META_LOGIT_SCALE, format!("{}", self.logit_scale));
        ck.set_meta(META_CLASSES, serde_json::to_string(&self.classes)?);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_architecture(HEAD_ARCH)?;
        let weights = ck.require(HEAD_W)?.clone();
        let logit_scale: f64 = ck
            .meta_value(META_LOGIT_SCALE)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Header("head lacks a logit scale".into()))?;
        let classes: Vec<String> = serde_json::from_str(
            ck.meta_value(META_CLASSES).ok_or_else(|| Error::Header("head lacks class names".into()))?,
        )?;
        if weights.shape().len() != 2 || weights.shape()[1] != classes.len() {
            return Err(Error::Header("head weights disagree with class list".into()));
        }
        Ok(ClassificationHead { weights, logit_scale, classes })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ClassificationHead::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Encodes every filled template with `text` and builds the head.
pub fn build_head(text: &TextEncoder, prompts: &PromptSet, logit_scale: f64) -> Result<ClassificationHead> {
    prompts.validate()?;
    let per_class = (0..prompts.classes.len())
        .map(|c| text.encode_texts(&prompts.prompts_for(c)))
        .collect::<Result<Vec<_>>>()?;
    ClassificationHead::from_prompt_embeddings(&per_class, prompts.classes.clone(), logit_scale)
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn two_orthogonal_prompts_average_to_diagonal() {
        let block = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let h = ClassificationHead::from_prompt_embeddings(&[block], names(1), 1.0).unwrap();
        let s = std::f32::consts::FRAC_1_SQRT_2;
        assert!((h.weights().data()[0] - s).abs() < 1e-7);
        assert!((h.weights().data()[1] - s).abs() < 1e-7);
    }

    #[test]
    fn single_prompt_column_is_its_normalized_embedding() {
        let block = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let h = ClassificationHead::from_prompt_embeddings(&[block], names(1), 1.0).unwrap();
        assert_eq!(h.weights().data(), &[0.6, 0.8]);
    }

    #[test]
    fn zero_embedding_is_degenerate() {
        let block = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            ClassificationHead::from_prompt_embeddings(&[block], names(1), 1.0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn classify_matches_hand_values() {
        let eye = |i: usize| Tensor::new(vec![1, 2], if i == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).unwrap();
        let h = ClassificationHead::from_prompt_embeddings(&[eye(0), eye(1)], names(2), 10.0).unwrap();
        let e = Tensor::new(vec![1, 2], vec![0.6, 0.8]).unwrap();
        let logits = h.classify(&e).unwrap();
        assert!((logits.data()[0] - 6.0).abs() < 1e-5);
        assert!((logits.data()[1] - 8.0).abs() < 1e-5);
        assert_eq!(h.predict(&e).unwrap(), vec![1]);
    }

    #[test]
    fn templates_need_one_slot() {
        assert!(PromptSet::new(names(1), vec!["no slot".into()]).is_err());
        assert!(PromptSet::new(names(1), vec!["{} and {}".into()]).is_err());
        assert!(PromptSet::new(vec![], vec!["a {}".into()]).is_err());
        assert!(PromptSet::new(names(1), vec!["a {}".into()]).is_ok());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let block = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let h = ClassificationHead::from_prompt_embeddings(&[block], names(1), 14.0).unwrap();
        let back = ClassificationHead::from_checkpoint(&h.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back, h);
    }
}
