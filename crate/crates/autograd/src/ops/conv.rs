use crate::element::{gemm, Element, MatView};
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Operation, Var};
use crate::tensor::Tensor;

/// Output extent `floor((input + 2 padding - kernel) / stride) + 1` of a
/// convolution along one axis, `None` when the window does not fit.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = (input + 2 * padding).checked_sub(kernel)?;
    if stride == 0 {
        return None;
    }
    Some(span / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Calls `f(col_start, input_start, len)` for every run of in-bounds
    /// taps along one output row: column entries `col_start..col_start+len`
    /// of the im2col matrix read inputs `input_start + t * stride`.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (np, p) = (self.n * self.p(), self.p());
        let rows: Vec<_> = (0..self.kh).map(|k| valid_range(k, self.stride, self.padding, self.h, self.ho)).collect();
        let cols: Vec<_> = (0..self.kw).map(|k| valid_range(k, self.stride, self.padding, self.w, self.wo)).collect();
        for n in 0..self.n {
            for ci in 0..self.cin {
                let plane = (n * self.cin + ci) * self.h * self.w;
                for (ki, &(olo, ohi)) in rows.iter().enumerate() {
                    for (kj, &(lo, hi)) in cols.iter().enumerate() {
                        if lo >= hi {
                            continue;
                        }
                        let row = (ci * self.kh + ki) * self.kw + kj;
                        let iw0 = lo * self.stride + kj - self.padding;
                        for oh in olo..ohi {
                            let ih = oh * self.stride + ki - self.padding;
                            f(row * np + n * p + oh * self.wo + lo, plane + ih * self.w + iw0, hi - lo);
                        }
                    }
                }
            }
        }
    }

    /// Fills the im2col matrix `[K, N*P]`; out-of-bounds taps stay zero.
    fn im2col<T: Element>(&self, x: &[T], cols: &mut [T]) {
        let s = self.stride;
        self.for_each_run(|c, i, len| {
            let dst = &mut cols[c..c + len];
            if s == 1 {
                dst.copy_from_slice(&x[i..i + len]);
            } else {
                for (t, d) in dst.iter_mut().enumerate() {
                    *d = x[i + t * s];
                }
            }
        });
    }

    /// Scatter-adds column gradients back onto the input.
    fn col2im<T: Element>(&self, dcols: &[T], dx: &mut [T]) {
        let s = self.stride;
        self.for_each_run(|c, i, len| {
            let src = &dcols[c..c + len];
            if s == 1 {
                for (d, &v) in dx[i..i + len].iter_mut().zip(src) {
                    *d += v;
                }
            } else {
                for (t, &v) in src.iter().enumerate() {
                    dx[i + t * s] += v;
                }
            }
        });
    }
}

/// Outputs `[lo, hi)` along one axis whose tap at kernel offset `k` lands
/// inside an input of extent `input`.
fn valid_range(k: usize, stride: usize, padding: usize, input: usize, output: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(k).div_ceil(stride);
    let hi = if input + padding > k { ((input + padding - k - 1) / stride + 1).min(output) } else { 0 };
    (lo.min(output), hi.max(lo.min(output)))
}

struct Conv2dOp<T> {
    geom: Geometry,
    /// im2col matrix `[K, N*P]`.
    cols: Vec<T>,
}

impl<T: Element> Operation<T> for Conv2dOp<T> {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let g = self.geom;
        let (k, p, np) = (g.k(), g.p(), g.n * g.p());
        let weight = inputs[1].data();

        let grad_weight = needs[1].then(|| {
            let mut dw = vec![T::zero(); g.cout * k];
            for n in 0..g.n {
                let dout = &grad_out[n * g.cout * p..(n + 1) * g.cout * p];
                let cols_t = &self.cols[n * p..];
                let beta = if n == 0 { T::zero() } else { T::one() };
                gemm(
                    dout,
                    MatView::row_major(g.cout, p),
                    cols_t,
                    MatView { rows: p, cols: k, row_stride: 1, col_stride: np },
                    beta,
                    &mut dw,
                    MatView::row_major(g.cout, k),
                );
            }
            dw
        });

        let grad_bias = needs[2].then(|| {
            let mut db = vec![T::zero(); g.cout];
            for n in 0..g.n {
                for (co, acc) in db.iter_mut().enumerate() {
                    let start = (n * g.cout + co) * p;
                    *acc += grad_out[start..start + p].iter().copied().sum::<T>();
                }
            }
            db
        });

        let grad_input = needs[0].then(|| {
            let mut dcols = vec![T::zero(); k * np];
            for n in 0..g.n {
                let dout = &grad_out[n * g.cout * p..(n + 1) * g.cout * p];
                gemm(
                    weight,
                    MatView::transposed(g.cout, k),
                    dout,
                    MatView::row_major(g.cout, p),
                    T::zero(),
                    &mut dcols[n * p..],
                    MatView { rows: k, cols: p, row_stride: np, col_stride: 1 },
                );
            }
            let mut dx = vec![T::zero(); g.n * g.cin * g.h * g.w];
            g.col2im(&dcols, &mut dx);
            dx
        });

        vec![grad_input, grad_weight, grad_bias]
    }
}

impl<T: Element> Graph<T> {
    /// 2-d cross-correlation of `input [N,Cin,H,W]` with `weight
    /// [Cout,Cin,kh,kw]` plus per-output-channel `bias [Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let [n, cin, h, w] = self.value(input).dims4(OP)?;
        let [cout, wcin, kh, kw] = self.value(weight).dims4(OP)?;
        if wcin != cin {
            return Err(TensorError::Dimension { op: OP, axis: "Cin", expected: wcin, found: cin });
        }
        let bias_len = self.value(bias).numel();
        if self.value(bias).rank() != 1 || bias_len != cout {
            return Err(TensorError::Dimension { op: OP, axis: "Cout", expected: cout, found: bias_len });
        }
        if stride == 0 {
            return Err(TensorError::Validation("conv2d: stride must be positive".into()));
        }
        let ho = conv2d_output_size(h, kh, stride, padding).ok_or_else(|| {
            TensorError::Validation(format!("conv2d: axis H of size {h} does not fit kernel {kh}, stride {stride}, padding {padding}"))
        })?;
        let wo = conv2d_output_size(w, kw, stride, padding).ok_or_else(|| {
            TensorError::Validation(format!("conv2d: axis W of size {w} does not fit kernel {kw}, stride {stride}, padding {padding}"))
        })?;

        let geom = Geometry { n, cin, h, w, cout, kh, kw, ho, wo, stride, padding };
        let (k, p, np) = (geom.k(), geom.p(), n * geom.p());
        let x = self.value(input).data();
        let mut cols = vec![T::zero(); k * np];
        geom.im2col(x, &mut cols);

        let wdata = self.value(weight).data();
        let bdata = self.value(bias).data();
        let mut out = vec![T::zero(); n * cout * p];
        for s in 0..n {
            let block = &mut out[s * cout * p..(s + 1) * cout * p];
            for (co, chunk) in block.chunks_mut(p).enumerate() {
                chunk.fill(bdata[co]);
            }
            gemm(
                wdata,
                MatView::row_major(cout, k),
                &cols[s * p..],
                MatView { rows: k, cols: p, row_stride: np, col_stride: 1 },
                T::one(),
                block,
                MatView::row_major(cout, p),
            );
        }
        let value = Tensor::new([n, cout, ho, wo], out)?;
        Ok(self.push_op(value, vec![input, weight, bias], Box::new(Conv2dOp { geom, cols })))
    }
}
