use crate::autodiff::{Graph, NodeId};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const W: &str = "proj.w";
const B: &str = "proj.b";

/// Linear map from the student's `D_s` embedding to the teacher's `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    weight: Tensor,
    bias: Tensor,
}

impl ProjectionHead {
    /// Identity on the shared leading coordinates, zeros elsewhere.
    pub fn identity(d_in: usize, d_out: usize) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::InvalidArgument("projection dims must be positive".into()));
        }
        let mut w = vec![0.0f32; d_in * d_out];
        for i in 0..d_in.min(d_out) {
            w[i * d_out + i] = 1.0;
        }
        Ok(ProjectionHead { weight: Tensor::new(vec![d_in, d_out], w)?, bias: Tensor::zeros(&[d_out]) })
    }

    /// `Some(identity)` when the dims differ, `None` otherwise.
    pub fn for_dims(d_in: usize, d_out: usize) -> Result<Option<Self>> {
        if d_in == d_out {
            Ok(None)
        } else {
            ProjectionHead::identity(d_in, d_out).map(Some)
        }
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 2 || bias.shape() != [ws[1]] {
            return Err(Error::shape("projection head", format!("weight {ws:?}, bias {:?}", bias.shape())));
        }
        Ok(ProjectionHead { weight, bias })
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (d_in, d_out) = (self.d_in(), self.d_out());
        if x.shape().len() != 2 || x.shape()[1] != d_in {
            return Err(Error::shape("projection input", format!("expected [N, {d_in}], got {:?}", x.shape())));
        }
        let n = x.rows();
        let w = self.weight.data();
        let mut out = Vec::with_capacity(n * d_out);
        for r in 0..n {
            let row = x.row(r);
            for j in 0..d_out {
                let mut acc = self.bias.data()[j] as f64;
                for (i, &v) in row.iter().enumerate() {
                    acc += v as f64 * w[i * d_out + j] as f64;
                }
                out.push(acc as f32);
            }
        }
        Tensor::new(vec![n, d_out], out)
    }

    pub fn build(&self, g: &mut Graph, x: NodeId, prefix: &str, trainable: bool) -> Result<NodeId> {
        let w = g.param(&format!("{prefix}{W}"), &self.weight, trainable)?;
        let b = g.param(&format!("{prefix}{B}"), &self.bias, trainable)?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    pub fn set(&mut self, weight: Tensor, bias: Tensor) -> Result<()> {
        if weight.shape() != self.weight.shape() || bias.shape() != self.bias.shape() {
            return Err(Error::shape("projection head", "replacement shapes differ"));
        }
        self.weight = weight;
        self.bias = bias;
        Ok(())
    }

    /// Appends `proj.w` and `proj.b` to `ckpt`.
    pub fn write_into(&self, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.insert(W, self.weight.clone())?;
        ckpt.insert(B, self.bias.clone())
    }

    /// Reads a head stored by [`ProjectionHead::write_into`], if any.
    pub fn read_from(ckpt: &Checkpoint) -> Result<Option<Self>> {
        match (ckpt.get(W), ckpt.get(B)) {
            (Some(w), Some(b)) => ProjectionHead::from_tensors(w.clone(), b.clone()).map(Some),
            (None, None) => Ok(None),
            _ => Err(Error::Header("projection head is missing its weight or bias".into())),
        }
    }
}
