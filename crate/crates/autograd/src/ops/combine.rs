//! Operations that combine several tensors.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Operation, Var};
use crate::tensor::Tensor;

struct ConcatOp {
    channels: Vec<usize>,
    n: usize,
    inner: usize,
}

impl<T: Element> Operation<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let total: usize = self.channels.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.channels.len());
        for (i, &c) in self.channels.iter().enumerate() {
            if needs[i] {
                let mut d = Vec::with_capacity(self.n * c * self.inner);
                for s in 0..self.n {
                    let start = (s * total + offset) * self.inner;
                    d.extend_from_slice(&g[start..start + c * self.inner]);
                }
                out.push(Some(d));
            } else {
                out.push(None);
            }
            offset += c;
        }
        out
    }
}

struct SoftmaxOp;

impl<T: Element> Operation<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let y = out.data();
        let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
        vec![Some(y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - dot)).collect())]
    }
}

struct WeightedSumOp;

impl<T: Element> Operation<T> for WeightedSumOp {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let m = inputs.len() - 1;
        let weights = inputs[m].data();
        let mut out: Vec<Option<Vec<T>>> = (0..m)
            .map(|i| needs[i].then(|| g.iter().map(|&gi| gi * weights[i]).collect()))
            .collect();
        let dw = needs[m].then(|| {
            (0..m)
                .map(|i| inputs[i].data().iter().zip(g).map(|(&p, &gi)| p * gi).sum())
                .collect()
        });
        out.push(dw);
        out
    }
}

impl<T: Element> Graph<T> {
    /// Concatenates `[N,C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *parts.first().ok_or_else(|| TensorError::Validation(format!("{OP}: no inputs")))?;
        let [n, _, h, w] = self.value(first).dims4(OP)?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pn, pc, ph, pw] = self.value(p).dims4(OP)?;
            for (axis, e, f) in [("N", n, pn), ("H", h, ph), ("W", w, pw)] {
                if e != f {
                    return Err(TensorError::Dimension { op: OP, axis, expected: e, found: f });
                }
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let inner = h * w;
        let mut out = Vec::with_capacity(n * total * inner);
        for s in 0..n {
            for (&p, &c) in parts.iter().zip(&channels) {
                let d = self.data(p);
                out.extend_from_slice(&d[s * c * inner..(s + 1) * c * inner]);
            }
        }
        let value = Tensor::new([n, total, h, w], out)?;
        Ok(self.push_op(value, parts.to_vec(), Box::new(ConcatOp { channels, n, inner })))
    }

    /// Softmax over all elements of a vector.
    pub fn softmax(&mut self, x: Var) -> Var {
        let data = self.data(x);
        let max = data.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = data.iter().map(|&v| (v - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        let value = Tensor::new(self.shape(x).to_vec(), exps.into_iter().map(|e| e / z).collect()).unwrap();
        self.push_op(value, vec![x], Box::new(SoftmaxOp))
    }

    /// `sum_m weights[m] * parts[m]` for equally shaped `parts`.
    pub fn weighted_sum(&mut self, parts: &[Var], weights: Var) -> Result<Var> {
        const OP: &str = "weighted_sum";
        let m = parts.len();
        if self.value(weights).numel() != m {
            return Err(TensorError::Dimension { op: OP, axis: "M", expected: m, found: self.value(weights).numel() });
        }
        let first = *parts.first().ok_or_else(|| TensorError::Validation(format!("{OP}: no inputs")))?;
        let shape = self.shape(first).to_vec();
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p) != shape.as_slice()) {
            return Err(TensorError::Validation(format!("{OP}: shape {:?} differs from {:?}", self.shape(bad), shape)));
        }
        let w = self.data(weights).to_vec();
        let mut out = vec![T::zero(); shape.iter().product()];
        for (&p, &wi) in parts.iter().zip(&w) {
            for (o, &v) in out.iter_mut().zip(self.data(p)) {
                *o += wi * v;
            }
        }
        let mut inputs = parts.to_vec();
        inputs.push(weights);
        Ok(self.push_op(Tensor::new(shape, out)?, inputs, Box::new(WeightedSumOp)))
    }
}
