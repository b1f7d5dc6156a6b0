use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, IxDyn};

use super::{Graph, IntoStandard, Scalar, Var};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Output length of a strided, zero-padded convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

fn im2col<F: Scalar>(x: &[F], geo: &Geometry) -> Array2<F> {
    let Geometry {
        cin,
        h,
        w,
        k,
        stride,
        pad,
        ho,
        wo,
        ..
    } = *geo;
    let mut cols = Array2::<F>::zeros((cin * k * k, ho * wo));
    let out = cols.as_slice_mut().expect("contiguous");
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let base = row * ho * wo;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = c * h * w + ii as usize * w;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            out[base + oi * wo + oj] = x[src + jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(cols: &Array2<F>, dx: &mut [F], geo: &Geometry) {
    let Geometry {
        cin,
        h,
        w,
        k,
        stride,
        pad,
        ho,
        wo,
        ..
    } = *geo;
    let src = cols.as_slice().expect("contiguous");
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let base = row * ho * wo;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = c * h * w + ii as usize * w;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            dx[dst + jj as usize] += src[base + oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

impl<F: Scalar> Graph<'_, F> {
    /// 2-D convolution over `[batch, cin, h, w]` with weight `[cout, cin / groups, k, k]`.
    ///
    /// Supports dense (`groups == 1`) and depthwise (`groups == cin == cout`) kernels.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [b, c, h, w], got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be 4-D");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1] * groups, cin, "conv2d channel mismatch {xs:?} {ws:?}");
        let depthwise = groups > 1;
        if depthwise {
            assert!(
                groups == cin && cout == cin,
                "only depthwise grouping is supported"
            );
        }
        if let Some(b) = bias {
            assert_eq!(self.shape(b), &[cout], "conv2d bias shape");
        }
        let geo = Geometry {
            batch,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho: conv_out_len(h, k, stride, pad),
            wo: conv_out_len(w, k, stride, pad),
        };
        let y = if depthwise {
            depthwise_forward(self.value(x), self.value(weight), &geo)
        } else {
            dense_forward(self.value(x), self.value(weight), &geo)
        };
        let mut y = y;
        let spatial = geo.ho * geo.wo;
        let mut flops = 2 * batch * cout * spatial * (cin / groups) * k * k;
        if let Some(b) = bias {
            let bv = self.value(b).as_slice().expect("contiguous").to_vec();
            let ys = y.as_slice_mut().expect("contiguous");
            for bi in 0..batch {
                for (c, &bc) in bv.iter().enumerate() {
                    let off = (bi * cout + c) * spatial;
                    ys[off..off + spatial].iter_mut().for_each(|v| *v += bc);
                }
            }
            flops += batch * cout * spatial;
        }
        self.add_flops(flops as u64);
        let parents: Vec<Var> = [x, weight].into_iter().chain(bias).collect();
        self.push(y, &parents, move |inp, _, g, needs| {
            let (dx, dw) = if depthwise {
                depthwise_backward(inp[0], inp[1], g, &geo, needs[0], needs[1])
            } else {
                dense_backward(inp[0], inp[1], g, &geo, needs[0], needs[1])
            };
            let mut out = vec![dx, dw];
            if needs.len() == 3 {
                out.push(needs[2].then(|| {
                    let gs = g.as_slice().expect("contiguous");
                    let mut db = vec![F::zero(); geo.cout];
                    for bi in 0..geo.batch {
                        for (c, d) in db.iter_mut().enumerate() {
                            let off = (bi * geo.cout + c) * spatial;
                            *d += gs[off..off + spatial].iter().copied().sum::<F>();
                        }
                    }
                    ArrayD::from_shape_vec(IxDyn(&[geo.cout]), db).expect("shape")
                }));
            }
            out
        })
    }
}

fn dense_forward<F: Scalar>(x: &ArrayD<F>, w: &ArrayD<F>, geo: &Geometry) -> ArrayD<F> {
    let Geometry {
        batch,
        cin,
        h,
        w: wd,
        cout,
        k,
        ho,
        wo,
        ..
    } = *geo;
    let xs = x.as_slice().expect("contiguous");
    let w2 = w
        .view()
        .into_shape_with_order((cout, cin * k * k))
        .expect("weight layout");
    let mut y = ArrayD::<F>::zeros(IxDyn(&[batch, cout, ho, wo]));
    let per_in = cin * h * wd;
    let per_out = cout * ho * wo;
    let ys = y.as_slice_mut().expect("contiguous");
    for b in 0..batch {
        let cols = im2col(&xs[b * per_in..(b + 1) * per_in], geo);
        let mut out = ndarray::ArrayViewMut2::from_shape(
            (cout, ho * wo),
            &mut ys[b * per_out..(b + 1) * per_out],
        )
        .expect("output layout");
        general_mat_mul(F::one(), &w2, &cols, F::zero(), &mut out);
    }
    y
}

fn dense_backward<F: Scalar>(
    x: &ArrayD<F>,
    w: &ArrayD<F>,
    g: &ArrayD<F>,
    geo: &Geometry,
    need_x: bool,
    need_w: bool,
) -> (Option<ArrayD<F>>, Option<ArrayD<F>>) {
    let Geometry {
        batch,
        cin,
        h,
        w: wd,
        cout,
        k,
        ho,
        wo,
        ..
    } = *geo;
    let xs = x.as_slice().expect("contiguous");
    let gs = g.as_slice().expect("contiguous");
    let w2 = w
        .view()
        .into_shape_with_order((cout, cin * k * k))
        .expect("weight layout");
    let per_in = cin * h * wd;
    let per_out = cout * ho * wo;
    let mut dx = need_x.then(|| ArrayD::<F>::zeros(IxDyn(&[batch, cin, h, wd])));
    let mut dw = need_w.then(|| Array2::<F>::zeros((cout, cin * k * k)));
    for b in 0..batch {
        let gb =
            ndarray::ArrayView2::from_shape((cout, ho * wo), &gs[b * per_out..(b + 1) * per_out])
                .expect("grad layout");
        if let Some(dw) = dw.as_mut() {
            let cols = im2col(&xs[b * per_in..(b + 1) * per_in], geo);
            general_mat_mul(F::one(), &gb, &cols.t(), F::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let mut dcols = Array2::<F>::zeros((cin * k * k, ho * wo));
            general_mat_mul(F::one(), &w2.t(), &gb, F::zero(), &mut dcols);
            let dxs = dx.as_slice_mut().expect("contiguous");
            col2im(&dcols, &mut dxs[b * per_in..(b + 1) * per_in], geo);
        }
    }
    let dw = dw.map(|d| {
        d.into_dyn()
            .into_standard()
            .into_shape_with_order(IxDyn(&[cout, cin, k, k]))
            .expect("reshape")
    });
    (dx, dw)
}

fn depthwise_forward<F: Scalar>(x: &ArrayD<F>, w: &ArrayD<F>, geo: &Geometry) -> ArrayD<F> {
    let Geometry {
        batch,
        cin,
        h,
        w: wd,
        k,
        stride,
        pad,
        ho,
        wo,
        ..
    } = *geo;
    let xs = x.as_slice().expect("contiguous");
    let ws = w.as_slice().expect("contiguous");
    let mut y = ArrayD::<F>::zeros(IxDyn(&[batch, cin, ho, wo]));
    let ys = y.as_slice_mut().expect("contiguous");
    for b in 0..batch {
        for c in 0..cin {
            let xin = &xs[(b * cin + c) * h * wd..(b * cin + c + 1) * h * wd];
            let kern = &ws[c * k * k..(c + 1) * k * k];
            let out = &mut ys[(b * cin + c) * ho * wo..(b * cin + c + 1) * ho * wo];
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = F::zero();
                    for ki in 0..k {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj >= 0 && jj < wd as isize {
                                acc += kern[ki * k + kj] * xin[ii as usize * wd + jj as usize];
                            }
                        }
                    }
                    out[oi * wo + oj] = acc;
                }
            }
        }
    }
    y
}

fn depthwise_backward<F: Scalar>(
    x: &ArrayD<F>,
    w: &ArrayD<F>,
    g: &ArrayD<F>,
    geo: &Geometry,
    need_x: bool,
    need_w: bool,
) -> (Option<ArrayD<F>>, Option<ArrayD<F>>) {
    let Geometry {
        batch,
        cin,
        h,
        w: wd,
        k,
        stride,
        pad,
        ho,
        wo,
        ..
    } = *geo;
    let xs = x.as_slice().expect("contiguous");
    let ws = w.as_slice().expect("contiguous");
    let gs = g.as_slice().expect("contiguous");
    let mut dx = vec![F::zero(); xs.len()];
    let mut dw = vec![F::zero(); ws.len()];
    for b in 0..batch {
        for c in 0..cin {
            let plane = (b * cin + c) * h * wd;
            let gplane = (b * cin + c) * ho * wo;
            for oi in 0..ho {
                for oj in 0..wo {
                    let gv = gs[gplane + oi * wo + oj];
                    for ki in 0..k {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj >= 0 && jj < wd as isize {
                                let xi = plane + ii as usize * wd + jj as usize;
                                let wi = c * k * k + ki * k + kj;
                                dw[wi] += gv * xs[xi];
                                dx[xi] += gv * ws[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        need_x.then(|| ArrayD::from_shape_vec(x.raw_dim(), dx).expect("shape")),
        need_w.then(|| ArrayD::from_shape_vec(w.raw_dim(), dw).expect("shape")),
    )
}
