use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Operation, Var};
use crate::tensor::Tensor;

/// How a right-hand operand lines up with a left-hand tensor.
#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Same,
    Scalar,
    /// Per-channel vector over axis 1; `inner` is the product of the axes after it.
    Channel { channels: usize, inner: usize },
}

impl Broadcast {
    fn resolve(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        let rhs_numel: usize = rhs.iter().product();
        if lhs == rhs {
            return Ok(Broadcast::Same);
        }
        if rhs_numel == 1 && rhs.len() <= 1 {
            return Ok(Broadcast::Scalar);
        }
        if rhs.len() == 1 && lhs.len() >= 2 {
            if rhs[0] != lhs[1] {
                return Err(TensorError::Dimension { op, axis: "C", expected: lhs[1], found: rhs[0] });
            }
            return Ok(Broadcast::Channel { channels: lhs[1], inner: lhs[2..].iter().product() });
        }
        Err(TensorError::Validation(format!("{op}: cannot combine shapes {lhs:?} and {rhs:?}")))
    }

    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Channel { channels, inner } => (i / inner) % channels,
        }
    }

    /// Sums a full-size gradient down to the operand's size.
    fn reduce<T: Element>(self, full: impl Iterator<Item = (usize, T)>, len: usize) -> Vec<T> {
        let mut out = vec![T::zero(); len];
        for (i, v) in full {
            out[self.index(i)] += v;
        }
        out
    }
}

struct AddOp {
    bcast: Broadcast,
}

impl<T: Element> Operation<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let db = needs[1].then(|| match self.bcast {
            Broadcast::Same => g.to_vec(),
            b => b.reduce(g.iter().copied().enumerate(), inputs[1].numel()),
        });
        vec![needs[0].then(|| g.to_vec()), db]
    }
}

struct MulOp {
    bcast: Broadcast,
}

impl<T: Element> Operation<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let da = needs[0].then(|| g.iter().enumerate().map(|(i, &gi)| gi * b[self.bcast.index(i)]).collect());
        let db = needs[1].then(|| self.bcast.reduce(g.iter().zip(a).map(|(&gi, &ai)| gi * ai).enumerate(), b.len()));
        vec![da, db]
    }
}

struct ReluOp;

impl<T: Element> Operation<T> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        // Subgradient at exactly zero is zero.
        vec![Some(g.iter().zip(x).map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() }).collect())]
    }
}

struct ScaleShiftOp {
    scale: Broadcast,
    shift: Broadcast,
}

impl<T: Element> Operation<T> for ScaleShiftOp {
    fn name(&self) -> &'static str {
        "scale_shift"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (x, s) = (inputs[0].data(), inputs[1].data());
        let dx = needs[0].then(|| g.iter().enumerate().map(|(i, &gi)| gi * s[self.scale.index(i)]).collect());
        let ds = needs[1].then(|| self.scale.reduce(g.iter().zip(x).map(|(&gi, &xi)| gi * xi).enumerate(), s.len()));
        let dt = needs[2].then(|| self.shift.reduce(g.iter().copied().enumerate(), inputs[2].numel()));
        vec![dx, ds, dt]
    }
}

struct ScaleOp<T> {
    factor: T,
}

impl<T: Element> Operation<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().map(|&gi| gi * self.factor).collect())]
    }
}

struct SumAllOp {
    mean: bool,
}

impl<T: Element> Operation<T> for SumAllOp {
    fn name(&self) -> &'static str {
        if self.mean {
            "mean_all"
        } else {
            "sum_all"
        }
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let n = inputs[0].numel();
        let v = if self.mean { g[0] / T::from_usize(n).unwrap() } else { g[0] };
        vec![Some(vec![v; n])]
    }
}

struct UpsampleOp {
    dims: [usize; 4],
    factor: usize,
}

impl<T: Element> Operation<T> for UpsampleOp {
    fn name(&self) -> &'static str {
        "upsample_nearest"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let [n, c, h, w] = self.dims;
        let f = self.factor;
        let (ho, wo) = (h * f, w * f);
        let mut dx = vec![T::zero(); n * c * h * w];
        for plane in 0..n * c {
            let src = &g[plane * ho * wo..(plane + 1) * ho * wo];
            let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
            for oh in 0..ho {
                for ow in 0..wo {
                    dst[(oh / f) * w + ow / f] += src[oh * wo + ow];
                }
            }
        }
        vec![Some(dx)]
    }
}

struct L1Op {
    indices: Vec<usize>,
}

impl<T: Element> Operation<T> for L1Op {
    fn name(&self) -> &'static str {
        "l1_sum"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        let mut dx = vec![T::zero(); x.len()];
        for &i in &self.indices {
            // sign(0) = 0
            let s = if x[i] > T::zero() {
                T::one()
            } else if x[i] < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            dx[i] += g[0] * s;
        }
        vec![Some(dx)]
    }
}

impl<T: Element> Graph<T> {
    /// `a + b`; `b` may equal `a` in shape, be a scalar, or be a per-channel vector.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = Broadcast::resolve("add", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.data(a), self.data(b));
        let out: Vec<T> = av.iter().enumerate().map(|(i, &x)| x + bv[bcast.index(i)]).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push_op(value, vec![a, b], Box::new(AddOp { bcast })))
    }

    /// Elementwise product with the same broadcasting rules as [`add`](Self::add).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = Broadcast::resolve("mul", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.data(a), self.data(b));
        let out: Vec<T> = av.iter().enumerate().map(|(i, &x)| x * bv[bcast.index(i)]).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push_op(value, vec![a, b], Box::new(MulOp { bcast })))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push_op(value, vec![x], Box::new(ReluOp))
    }

    /// Per-channel affine map `s * x + t`; `s` and `t` are scalars or `[C]` vectors.
    pub fn scale_shift(&mut self, x: Var, s: Var, t: Var) -> Result<Var> {
        let scale = Broadcast::resolve("scale_shift", self.shape(x), self.shape(s))?;
        let shift = Broadcast::resolve("scale_shift", self.shape(x), self.shape(t))?;
        if self.value(s).rank() > 1 || self.value(t).rank() > 1 {
            return Err(TensorError::Validation("scale_shift: scale and shift must be scalars or per-channel vectors".into()));
        }
        let (xv, sv, tv) = (self.data(x), self.data(s), self.data(t));
        let out: Vec<T> = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| sv[scale.index(i)] * v + tv[shift.index(i)])
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push_op(value, vec![x, s, t], Box::new(ScaleShiftOp { scale, shift })))
    }

    /// Multiplies by a fixed scalar.
    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push_op(value, vec![x], Box::new(ScaleOp { factor }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: T = self.data(x).iter().copied().sum();
        self.push_op(Tensor::scalar(total), vec![x], Box::new(SumAllOp { mean: false }))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel()).unwrap();
        let total: T = self.data(x).iter().copied().sum();
        self.push_op(Tensor::scalar(total / n), vec![x], Box::new(SumAllOp { mean: true }))
    }

    /// Nearest-neighbour upsampling of `[N,C,H,W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let dims @ [n, c, h, w] = self.value(x).dims4("upsample_nearest")?;
        if factor == 0 {
            return Err(TensorError::Validation("upsample_nearest: factor must be positive".into()));
        }
        if factor == 1 {
            return Ok(x);
        }
        let (ho, wo) = (h * factor, w * factor);
        let src = self.data(x);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for oh in 0..ho {
                for ow in 0..wo {
                    d[oh * wo + ow] = s[(oh / factor) * w + ow / factor];
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        Ok(self.push_op(value, vec![x], Box::new(UpsampleOp { dims, factor })))
    }

    /// `sum |x_i|` over the given flat indices (all elements when `None`).
    /// The subgradient at zero is zero.
    pub fn l1_sum(&mut self, x: Var, indices: Option<&[usize]>) -> Result<Var> {
        let numel = self.value(x).numel();
        let indices: Vec<usize> = match indices {
            Some(idx) => idx.to_vec(),
            None => (0..numel).collect(),
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= numel) {
            return Err(TensorError::Validation(format!("l1_sum: index {bad} out of bounds for {numel} elements")));
        }
        let data = self.data(x);
        let total: T = indices.iter().map(|&i| data[i].abs()).sum();
        Ok(self.push_op(Tensor::scalar(total), vec![x], Box::new(L1Op { indices })))
    }
}
