use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayD, Axis, IxDyn, Slice, Zip};

use super::{Graph, IntoStandard, Scalar, Var};

/// Sums `grad` down to `shape`, undoing numpy-style broadcasting.
pub fn reduce_to<F: Scalar>(grad: &ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut r = grad.clone();
    while r.ndim() > shape.len() {
        r = r.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && r.shape()[ax] != 1 {
            r = r.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    r
}

fn standard<F: Scalar>(a: ArrayD<F>) -> ArrayD<F> {
    a.into_standard()
}

fn to_2d<F: Scalar>(a: &ArrayD<F>, rows: usize, cols: usize) -> ndarray::ArrayView2<'_, F> {
    a.view()
        .into_shape_with_order((rows, cols))
        .expect("standard layout tensor")
}

fn to_3d<F: Scalar>(a: &ArrayD<F>, b: usize, m: usize, n: usize) -> ndarray::ArrayView3<'_, F> {
    a.view()
        .into_shape_with_order((b, m, n))
        .expect("standard layout tensor")
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<F: Scalar> Graph<'_, F> {
    fn unary<Fw, Bw>(&mut self, x: Var, fwd: Fw, dfdx: Bw) -> Var
    where
        Fw: Fn(F) -> F,
        Bw: Fn(F, F) -> F + 'static,
    {
        let y = self.value(x).mapv(fwd);
        self.push(y, &[x], move |inp, out, g, _| {
            let mut dx = g.clone();
            Zip::from(&mut dx)
                .and(inp[0])
                .and(out)
                .for_each(|d, &x, &y| *d *= dfdx(x, y));
            vec![Some(dx)]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (F::one() - y))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s + x * s * (F::one() - s)
            },
        )
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = F::c(GELU_C);
        let k = F::c(GELU_K);
        let half = F::c(0.5);
        let three = F::c(3.0);
        self.unary(
            x,
            move |x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh()),
            move |x, _| {
                let t = (c * (x + k * x * x * x)).tanh();
                half * (F::one() + t)
                    + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x)
            },
        )
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let half = F::c(0.5);
        self.unary(x, |x| x.sqrt(), move |_, y| half / y)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let y = self.value(x) * s;
        self.push(y, &[x], move |_, _, g, _| vec![Some(g * s)])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = standard(self.value(a) + self.value(b));
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        self.push(y, &[a, b], move |_, _, g, needs| {
            vec![
                needs[0].then(|| reduce_to(g, &sa)),
                needs[1].then(|| reduce_to(g, &sb)),
            ]
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = standard(self.value(a) - self.value(b));
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        self.push(y, &[a, b], move |_, _, g, needs| {
            vec![
                needs[0].then(|| reduce_to(g, &sa)),
                needs[1].then(|| reduce_to(&g.mapv(|v| -v), &sb)),
            ]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = standard(self.value(a) * self.value(b));
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        self.push(y, &[a, b], move |inp, _, g, needs| {
            vec![
                needs[0].then(|| reduce_to(&(g * inp[1]), &sa)),
                needs[1].then(|| reduce_to(&(g * inp[0]), &sb)),
            ]
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let y = standard(self.value(a) / self.value(b));
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        self.push(y, &[a, b], move |inp, out, g, needs| {
            vec![
                needs[0].then(|| reduce_to(&(g / inp[1]), &sa)),
                needs[1].then(|| {
                    let d = (g * out) / inp[1];
                    reduce_to(&d.mapv(|v| -v), &sb)
                }),
            ]
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let in_shape = self.shape(x).to_vec();
        let y = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {in_shape:?} to {shape:?}"));
        self.push(y, &[x], move |_, _, g, _| {
            vec![Some(
                g.clone()
                    .into_shape_with_order(IxDyn(&in_shape))
                    .expect("reshape back"),
            )]
        })
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let y = standard(self.value(x).clone().permuted_axes(IxDyn(axes)));
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.push(y, &[x], move |_, _, g, _| {
            vec![Some(standard(g.clone().permuted_axes(IxDyn(&inverse))))]
        })
    }

    /// Broadcasts `x` to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Var {
        let in_shape = self.shape(x).to_vec();
        let y = self
            .value(x)
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {in_shape:?} to {shape:?}"))
            .to_owned();
        let y = standard(y);
        self.push(y, &[x], move |_, _, g, _| {
            vec![Some(reduce_to(g, &in_shape))]
        })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        let views: Vec<_> = xs.iter().map(|&v| self.value(v).view()).collect();
        let y = standard(ndarray::concatenate(Axis(axis), &views).expect("concat shapes"));
        let sizes: Vec<usize> = xs.iter().map(|&v| self.shape(v)[axis]).collect();
        self.push(y, xs, move |_, _, g, needs| {
            let mut start = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&n, &need)| {
                    let piece = need.then(|| {
                        standard(
                            g.slice_axis(Axis(axis), Slice::from(start..start + n))
                                .to_owned(),
                        )
                    });
                    start += n;
                    piece
                })
                .collect()
        })
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Var {
        let in_shape = self.shape(x).to_vec();
        let y = standard(
            self.value(x)
                .slice_axis(Axis(axis), Slice::from(start..end))
                .to_owned(),
        );
        self.push(y, &[x], move |_, _, g, _| {
            let mut dx = ArrayD::zeros(IxDyn(&in_shape));
            dx.slice_axis_mut(Axis(axis), Slice::from(start..end))
                .assign(g);
            vec![Some(dx)]
        })
    }

    /// Rows of a 2-D `table` selected by `ids`, shape `[ids.len(), cols]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let shape = self.shape(table).to_vec();
        assert_eq!(shape.len(), 2, "gather_rows expects a 2-D table");
        let t = to_2d(self.value(table), shape[0], shape[1]);
        let mut y = Array2::zeros((ids.len(), shape[1]));
        for (r, &id) in ids.iter().enumerate() {
            y.row_mut(r).assign(&t.row(id));
        }
        let ids = ids.to_vec();
        self.push(y.into_dyn(), &[table], move |_, _, g, _| {
            let mut dt = Array2::zeros((shape[0], shape[1]));
            let g2 = to_2d(g, ids.len(), shape[1]);
            for (r, &id) in ids.iter().enumerate() {
                let mut row = dt.row_mut(id);
                row += &g2.row(r);
            }
            vec![Some(dt.into_dyn())]
        })
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Var {
        let in_shape = self.shape(x).to_vec();
        let mut y = self.value(x).sum_axis(Axis(axis));
        if keepdim {
            y = y.insert_axis(Axis(axis));
        }
        self.push(standard(y), &[x], move |_, _, g, _| {
            let g = if keepdim {
                g.clone()
            } else {
                g.clone().insert_axis(Axis(axis))
            };
            vec![Some(standard(
                g.broadcast(IxDyn(&in_shape)).expect("broadcast").to_owned(),
            ))]
        })
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Var {
        let n = self.shape(x)[axis];
        let s = self.sum_axis(x, axis, keepdim);
        self.scale(s, F::one() / F::c(n as f64))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let in_shape = self.shape(x).to_vec();
        let total = self.value(x).sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), total),
            &[x],
            move |_, _, g, _| {
                let gv = *g.iter().next().expect("scalar grad");
                vec![Some(ArrayD::from_elem(IxDyn(&in_shape), gv))]
            },
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, F::one() / F::c(n as f64))
    }

    /// `x @ w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let in_dim = *xs.last().expect("linear on scalar");
        assert_eq!(ws.len(), 2, "linear weight must be 2-D");
        assert_eq!(
            in_dim, ws[0],
            "linear: input width {in_dim} vs weight {ws:?}"
        );
        let out_dim = ws[1];
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let x2 = to_2d(self.value(x), rows, in_dim);
        let w2 = to_2d(self.value(w), in_dim, out_dim);
        let mut y = x2.dot(&w2);
        let mut flops = 2 * rows * in_dim * out_dim;
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[out_dim], "linear bias shape");
            let bv = to_2d(self.value(b), 1, out_dim);
            y += &bv;
            flops += rows * out_dim;
        }
        self.add_flops(flops as u64);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().expect("nonempty") = out_dim;
        let y = y
            .into_dyn()
            .into_standard()
            .into_shape_with_order(IxDyn(&out_shape))
            .expect("reshape");
        let parents: Vec<Var> = std::iter::once(x)
            .chain(std::iter::once(w))
            .chain(b)
            .collect();
        self.push(y, &parents, move |inp, _, g, needs| {
            let g2 = to_2d(g, rows, out_dim);
            let x2 = to_2d(inp[0], rows, in_dim);
            let w2 = to_2d(inp[1], in_dim, out_dim);
            let dx = needs[0].then(|| {
                g2.dot(&w2.t())
                    .into_dyn()
                    .into_standard()
                    .into_shape_with_order(IxDyn(&xs))
                    .expect("reshape")
            });
            let dw = needs[1].then(|| x2.t().dot(&g2).into_dyn());
            let mut out = vec![dx, dw];
            if needs.len() == 3 {
                out.push(needs[2].then(|| g2.sum_axis(Axis(0)).into_dyn()));
            }
            out
        })
    }

    /// Batched matrix product over the trailing two axes; leading axes must match.
    /// With `transpose_b`, `b` is `[.., n, k]` and the product is `a @ b^T`.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let nd = sa.len();
        assert!(
            nd >= 2 && sb.len() == nd,
            "matmul rank mismatch {sa:?} {sb:?}"
        );
        assert_eq!(sa[..nd - 2], sb[..nd - 2], "matmul batch dims");
        let batch: usize = sa[..nd - 2].iter().product();
        let (m, k) = (sa[nd - 2], sa[nd - 1]);
        let (kb, n) = if transpose_b {
            (sb[nd - 1], sb[nd - 2])
        } else {
            (sb[nd - 2], sb[nd - 1])
        };
        assert_eq!(k, kb, "matmul inner dims {sa:?} {sb:?}");
        let a3 = to_3d(self.value(a), batch, m, k);
        let b3 = to_3d(self.value(b), batch, sb[nd - 2], sb[nd - 1]);
        let mut y = Array3::<F>::zeros((batch, m, n));
        for i in 0..batch {
            let bi = b3.index_axis(Axis(0), i);
            let mut yi = y.index_axis_mut(Axis(0), i);
            let ai = a3.index_axis(Axis(0), i);
            if transpose_b {
                general_mat_mul(F::one(), &ai, &bi.t(), F::zero(), &mut yi);
            } else {
                general_mat_mul(F::one(), &ai, &bi, F::zero(), &mut yi);
            }
        }
        self.add_flops((2 * batch * m * n * k) as u64);
        let mut out_shape = sa[..nd - 2].to_vec();
        out_shape.extend([m, n]);
        let y = y
            .into_dyn()
            .into_standard()
            .into_shape_with_order(IxDyn(&out_shape))
            .expect("reshape");
        self.push(y, &[a, b], move |inp, _, g, needs| {
            let a3 = to_3d(inp[0], batch, m, k);
            let b3 = to_3d(inp[1], batch, sb[nd - 2], sb[nd - 1]);
            let g3 = to_3d(g, batch, m, n);
            let da = needs[0].then(|| {
                let mut da = Array3::<F>::zeros((batch, m, k));
                for i in 0..batch {
                    let gi = g3.index_axis(Axis(0), i);
                    let bi = b3.index_axis(Axis(0), i);
                    let mut di = da.index_axis_mut(Axis(0), i);
                    if transpose_b {
                        general_mat_mul(F::one(), &gi, &bi, F::zero(), &mut di);
                    } else {
                        general_mat_mul(F::one(), &gi, &bi.t(), F::zero(), &mut di);
                    }
                }
                da.into_dyn()
                    .into_standard()
                    .into_shape_with_order(IxDyn(&sa))
                    .expect("reshape")
            });
            let db = needs[1].then(|| {
                let mut db = Array3::<F>::zeros((batch, sb[nd - 2], sb[nd - 1]));
                for i in 0..batch {
                    let gi = g3.index_axis(Axis(0), i);
                    let ai = a3.index_axis(Axis(0), i);
                    let mut di = db.index_axis_mut(Axis(0), i);
                    if transpose_b {
                        general_mat_mul(F::one(), &gi.t(), &ai, F::zero(), &mut di);
                    } else {
                        general_mat_mul(F::one(), &ai.t(), &gi, F::zero(), &mut di);
                    }
                }
                db.into_dyn()
                    .into_standard()
                    .into_shape_with_order(IxDyn(&sb))
                    .expect("reshape")
            });
            vec![da, db]
        })
    }

    /// Softmax over the last axis. Entries equal to `-inf` receive zero probability.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().expect("softmax on scalar");
        let rows = self.value(x).len() / cols;
        let x2 = to_2d(self.value(x), rows, cols);
        let mut y = Array2::<F>::zeros((rows, cols));
        for (xr, mut yr) in x2.outer_iter().zip(y.outer_iter_mut()) {
            let max = xr.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut total = F::zero();
            for (o, &v) in yr.iter_mut().zip(xr.iter()) {
                *o = (v - max).exp();
                total += *o;
            }
            yr /= total;
        }
        let y = y
            .into_dyn()
            .into_standard()
            .into_shape_with_order(IxDyn(&shape))
            .expect("reshape");
        self.push(y, &[x], move |_, out, g, _| {
            let y2 = to_2d(out, rows, cols);
            let g2 = to_2d(g, rows, cols);
            let mut dx = Array2::<F>::zeros((rows, cols));
            for ((yr, gr), mut dr) in y2
                .outer_iter()
                .zip(g2.outer_iter())
                .zip(dx.outer_iter_mut())
            {
                let dot: F = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                for ((d, &yv), &gv) in dr.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(
                dx.into_dyn()
                    .into_standard()
                    .into_shape_with_order(IxDyn(&shape))
                    .expect("reshape"),
            )]
        })
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().expect("layer_norm on scalar");
        assert_eq!(self.shape(gamma), &[cols], "layer_norm gamma shape");
        assert_eq!(self.shape(beta), &[cols], "layer_norm beta shape");
        let rows = self.value(x).len() / cols;
        let eps = F::c(eps);
        let n = F::c(cols as f64);
        let normalise = move |xr: ndarray::ArrayView1<F>| -> (Vec<F>, F) {
            let mean = xr.sum() / n;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let inv = F::one() / (var + eps).sqrt();
            (xr.iter().map(|&v| (v - mean) * inv).collect(), inv)
        };
        let x2 = to_2d(self.value(x), rows, cols);
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let mut y = Array2::<F>::zeros((rows, cols));
        for (xr, mut yr) in x2.outer_iter().zip(y.outer_iter_mut()) {
            let (xhat, _) = normalise(xr);
            for (j, o) in yr.iter_mut().enumerate() {
                *o = xhat[j] * gv[j] + bv[j];
            }
        }
        let y = y
            .into_dyn()
            .into_standard()
            .into_shape_with_order(IxDyn(&shape))
            .expect("reshape");
        self.push(y, &[x, gamma, beta], move |inp, _, g, needs| {
            let x2 = to_2d(inp[0], rows, cols);
            let g2 = to_2d(g, rows, cols);
            let gamma = inp[1];
            let mut dx = Array2::<F>::zeros((rows, cols));
            let mut dgamma = ArrayD::<F>::zeros(IxDyn(&[cols]));
            let mut dbeta = ArrayD::<F>::zeros(IxDyn(&[cols]));
            for ((xr, gr), mut dr) in x2
                .outer_iter()
                .zip(g2.outer_iter())
                .zip(dx.outer_iter_mut())
            {
                let (xhat, inv) = normalise(xr);
                let mut mean_d = F::zero();
                let mut mean_dx = F::zero();
                for j in 0..cols {
                    let d = gr[j] * gamma[j];
                    mean_d += d;
                    mean_dx += d * xhat[j];
                    dgamma[j] += gr[j] * xhat[j];
                    dbeta[j] += gr[j];
                }
                mean_d /= n;
                mean_dx /= n;
                for j in 0..cols {
                    let d = gr[j] * gamma[j];
                    dr[j] = inv * (d - mean_d - xhat[j] * mean_dx);
                }
            }
            vec![
                needs[0].then(|| {
                    dx.into_dyn()
                        .into_standard()
                        .into_shape_with_order(IxDyn(&shape))
                        .expect("reshape")
                }),
                needs[1].then_some(dgamma),
                needs[2].then_some(dbeta),
            ]
        })
    }

    /// Divides each last-axis row by its L2 norm (clamped below by `1e-12`).
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().expect("l2_normalize on scalar");
        let rows = self.value(x).len() / cols;
        let floor = F::c(1e-12);
        let x2 = to_2d(self.value(x), rows, cols);
        let mut y = Array2::<F>::zeros((rows, cols));
        let mut norms = Vec::with_capacity(rows);
        for (xr, mut yr) in x2.outer_iter().zip(y.outer_iter_mut()) {
            let norm = xr.iter().map(|&v| v * v).sum::<F>().sqrt().max(floor);
            yr.assign(&(&xr / norm));
            norms.push(norm);
        }
        let y = y
            .into_dyn()
            .into_standard()
            .into_shape_with_order(IxDyn(&shape))
            .expect("reshape");
        self.push(y, &[x], move |_, out, g, _| {
            let y2 = to_2d(out, rows, cols);
            let g2 = to_2d(g, rows, cols);
            let mut dx = Array2::<F>::zeros((rows, cols));
            for (((yr, gr), mut dr), &norm) in y2
                .outer_iter()
                .zip(g2.outer_iter())
                .zip(dx.outer_iter_mut())
                .zip(&norms)
            {
                let dot: F = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                for ((d, &yv), &gv) in dr.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                    *d = (gv - yv * dot) / norm;
                }
            }
            vec![Some(
                dx.into_dyn()
                    .into_standard()
                    .into_shape_with_order(IxDyn(&shape))
                    .expect("reshape"),
            )]
        })
    }

    /// Mean cross-entropy of `logits` (`[rows, classes]`) over rows that carry a target.
    ///
    /// Panics when no row carries a target; callers report that as an error.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let shape = self.shape(logits).to_vec();
        assert_eq!(shape.len(), 2, "cross_entropy expects [rows, classes]");
        let (rows, cols) = (shape[0], shape[1]);
        assert_eq!(rows, targets.len(), "cross_entropy target count");
        let count = targets.iter().filter(|t| t.is_some()).count();
        assert!(count > 0, "cross_entropy without targets");
        let x2 = to_2d(self.value(logits), rows, cols);
        let mut total = F::zero();
        let mut log_probs = Array2::<F>::zeros((rows, cols));
        for ((xr, mut lr), t) in x2.outer_iter().zip(log_probs.outer_iter_mut()).zip(targets) {
            let max = xr.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let lse = xr.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            for (o, &v) in lr.iter_mut().zip(xr.iter()) {
                *o = v - lse;
            }
            if let Some(t) = *t {
                total -= lr[t];
            }
        }
        let inv_count = F::one() / F::c(count as f64);
        let targets = targets.to_vec();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), total * inv_count),
            &[logits],
            move |_, _, g, _| {
                let gv = *g.iter().next().expect("scalar grad") * inv_count;
                let mut dx = Array2::<F>::zeros((rows, cols));
                for ((lr, mut dr), t) in log_probs
                    .outer_iter()
                    .zip(dx.outer_iter_mut())
                    .zip(&targets)
                {
                    if let Some(t) = *t {
                        for (d, &l) in dr.iter_mut().zip(lr.iter()) {
                            *d = l.exp() * gv;
                        }
                        dr[t] -= gv;
                    }
                }
                vec![Some(dx.into_dyn())]
            },
        )
    }
}

/// Additive attention mask `[batch, 1, 1, keys]`: `0` for kept keys, `-inf` for masked ones.
pub fn key_mask<F: Scalar>(mask: &[Vec<u8>]) -> ArrayD<F> {
    let batch = mask.len();
    let keys = mask.first().map_or(0, Vec::len);
    let mut m = ArrayD::<F>::zeros(IxDyn(&[batch, 1, 1, keys]));
    for (b, row) in mask.iter().enumerate() {
        for (k, &keep) in row.iter().enumerate() {
            if keep == 0 {
                m[[b, 0, 0, k]] = F::neg_infinity();
            }
        }
    }
    m
}

/// Additive causal mask `[1, 1, len, len]`.
pub fn causal_mask<F: Scalar>(len: usize) -> ArrayD<F> {
    let mut m = ArrayD::<F>::zeros(IxDyn(&[1, 1, len, len]));
    for i in 0..len {
        m.slice_mut(s![0, 0, i, i + 1..]).fill(F::neg_infinity());
    }
    m
}
