use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Operation, Var};
use crate::tensor::Tensor;

struct MseOp;

impl<T: Element> Operation<T> for MseOp {
    fn name(&self) -> &'static str {
        "mse_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (p, t) = (inputs[0].data(), inputs[1].data());
        let k = g[0] * T::from_f64_lossy(2.0) / T::from_usize(p.len()).unwrap();
        let dp: Vec<T> = p.iter().zip(t).map(|(&a, &b)| k * (a - b)).collect();
        let dt = needs[1].then(|| dp.iter().map(|&v| -v).collect());
        vec![needs[0].then_some(dp), dt]
    }
}

struct CrossEntropyOp<T> {
    labels: Vec<usize>,
    /// Softmax probabilities, same layout as the logits.
    probs: Vec<T>,
    dims: [usize; 4],
}

impl<T: Element> Operation<T> for CrossEntropyOp<T> {
    fn name(&self) -> &'static str {
        "cross_entropy_pixelwise"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let [n, c, h, w] = self.dims;
        let hw = h * w;
        let k = g[0] / T::from_usize(n * hw).unwrap();
        let mut dx: Vec<T> = self.probs.iter().map(|&p| p * k).collect();
        for s in 0..n {
            for pix in 0..hw {
                let label = self.labels[s * hw + pix];
                dx[(s * c + label) * hw + pix] -= k;
            }
        }
        vec![Some(dx)]
    }
}

impl<T: Element> Graph<T> {
    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (ps, ts) = (self.shape(pred), self.shape(target));
        if ps != ts {
            return Err(shape_error("mse_loss", ps, ts));
        }
        let (p, t) = (self.data(pred), self.data(target));
        let sum: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(sum / T::from_usize(p.len()).unwrap());
        Ok(self.push_op(value, vec![pred, target], Box::new(MseOp)))
    }

    /// Per-pixel softmax over the channel axis followed by the mean negative
    /// log-likelihood of `labels` (flattened `[N,H,W]`).
    pub fn cross_entropy_pixelwise(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "cross_entropy_pixelwise";
        let dims @ [n, c, h, w] = self.value(logits).dims4(OP)?;
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(TensorError::Dimension { op: OP, axis: "N*H*W", expected: n * hw, found: labels.len() });
        }
        if let Some(pos) = labels.iter().position(|&l| l >= c) {
            let (s, pix) = (pos / hw, pos % hw);
            return Err(TensorError::Validation(format!(
                "{OP}: label {} at pixel (n={}, h={}, w={}) outside [0, {c})",
                labels[pos],
                s,
                pix / w,
                pix % w
            )));
        }
        let x = self.data(logits);
        let mut probs = vec![T::zero(); x.len()];
        let mut nll = T::zero();
        for s in 0..n {
            for pix in 0..hw {
                let at = |ch: usize| (s * c + ch) * hw + pix;
                let max = (0..c).map(|ch| x[at(ch)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for ch in 0..c {
                    let e = (x[at(ch)] - max).exp();
                    probs[at(ch)] = e;
                    z += e;
                }
                for ch in 0..c {
                    probs[at(ch)] = probs[at(ch)] / z;
                }
                let label = labels[s * hw + pix];
                nll += z.ln() - (x[at(label)] - max);
            }
        }
        let value = Tensor::scalar(nll / T::from_usize(n * hw).unwrap());
        let op = CrossEntropyOp { labels: labels.to_vec(), probs, dims };
        Ok(self.push_op(value, vec![logits], Box::new(op)))
    }
}

fn shape_error(op: &str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Validation(format!("{op}: shapes {a:?} and {b:?} differ"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_of_identical_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn([1, 2, 3, 3], |i| i as f64 * 0.1));
        let t = g.detach(x);
        let l = g.mse_loss(x, t).unwrap();
        assert_eq!(g.item(l), 0.0);
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros([1, 2, 1, 1]));
        let l = g.cross_entropy_pixelwise(x, &[0]).unwrap();
        assert!((g.item(l) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g.item(l) - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range_reports_pixel() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros([1, 2, 2, 2]));
        let err = g.cross_entropy_pixelwise(x, &[0, 1, 0, 2]).unwrap_err().to_string();
        assert!(err.contains("n=0, h=1, w=1"), "{err}");
    }

    #[test]
    fn two_class_case_matches_direct_softmax() {
        let logits = [0.3, -1.2, 2.0, 0.7, -0.4, 0.9, 1.5, -2.2];
        let labels = [1usize, 0, 0, 1];
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new([1, 2, 2, 2], logits.to_vec()).unwrap());
        let l = g.cross_entropy_pixelwise(x, &labels).unwrap();
        // direct oracle: channel planes are [0..4] and [4..8]
        let mut oracle = 0.0;
        for p in 0..4 {
            let (a, b) = (logits[p], logits[4 + p]);
            let chosen = if labels[p] == 0 { a } else { b };
            oracle += -(chosen.exp() / (a.exp() + b.exp())).ln();
        }
        oracle /= 4.0;
        assert!((g.item(l) - oracle).abs() < 1e-12);
    }
}
