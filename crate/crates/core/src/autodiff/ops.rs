//! Differentiable operations on [`Var`]s.
//!
//! Each op records a backward closure capturing shared handles to the
//! values it needs. Large scratch buffers (e.g. im2col matrices) are
//! recomputed in the backward pass instead of being stored.

use super::tape::{GradSink, Scalar, Value, Var};
use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, Axis, Ix1, Ix2, Ix3, IxDyn};

fn as2d<F: Scalar>(v: &Value<F>) -> ArrayView2<'_, F> {
    v.view()
        .into_dimensionality::<Ix2>()
        .expect("expected rank-2 array")
}

/// Collapse all leading axes so the array is `[rows, last]`.
fn view_rows<F: Scalar>(v: &Value<F>) -> Array2<F> {
    let last = *v.shape().last().expect("rank >= 1");
    let rows = v.len() / last.max(1);
    v.to_owned()
        .into_shape_with_order((rows, last))
        .expect("standard layout")
}

impl<F: Scalar> Var<F> {
    fn unary(&self, value: ArrayD<F>, back: impl Fn(&ArrayD<F>) -> ArrayD<F> + 'static) -> Var<F> {
        let pid = self.id;
        self.tape.push(
            value,
            Some(Box::new(move |g, sink: &mut GradSink<'_, F>| {
                sink.add(pid, back(g));
            })),
        )
    }

    pub fn neg(&self) -> Var<F> {
        self.unary(self.value().mapv(|x| -x), |g| g.mapv(|x| -x))
    }

    pub fn scale(&self, c: F) -> Var<F> {
        self.unary(self.value().mapv(|x| x * c), move |g| g.mapv(|x| x * c))
    }

    pub fn add_scalar(&self, c: F) -> Var<F> {
        self.unary(self.value().mapv(|x| x + c), |g| g.clone())
    }

    pub fn relu(&self) -> Var<F> {
        let x = self.value();
        let xc = x.clone();
        self.unary(x.mapv(|v| if v > F::zero() { v } else { F::zero() }), move |g| {
            let mut out = g.clone();
            out.zip_mut_with(&xc.view(), |gi, &xi| {
                if xi <= F::zero() {
                    *gi = F::zero();
                }
            });
            out
        })
    }

    pub fn gelu(&self) -> Var<F> {
        let x = self.value();
        let k = F::lit(0.797_884_560_802_865_4); // sqrt(2/pi)
        let c3 = F::lit(0.044715);
        let half = F::lit(0.5);
        let one = F::one();
        let fwd = x.mapv(|v| {
            let u = k * (v + c3 * v * v * v);
            half * v * (one + u.tanh())
        });
        let xc = x.clone();
        self.unary(fwd, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(&xc.view(), |gi, &v| {
                let u = k * (v + c3 * v * v * v);
                let t = u.tanh();
                let du = k * (one + F::lit(3.0) * c3 * v * v);
                let d = half * (one + t) + half * v * (one - t * t) * du;
                *gi = *gi * d;
            });
            out
        })
    }

    pub fn sigmoid(&self) -> Var<F> {
        let y = self.value().mapv(|v| F::one() / (F::one() + (-v).exp()));
        let yc = y.clone().into_shared();
        self.unary(y, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(&yc.view(), |gi, &yi| *gi = *gi * yi * (F::one() - yi));
            out
        })
    }

    /// |x| with subgradient 0 at x = 0.
    pub fn abs(&self) -> Var<F> {
        let x = self.value();
        let xc = x.clone();
        self.unary(x.mapv(|v| v.abs()), move |g| {
            let mut out = g.clone();
            out.zip_mut_with(&xc.view(), |gi, &xi| {
                *gi = if xi > F::zero() {
                    *gi
                } else if xi < F::zero() {
                    -*gi
                } else {
                    F::zero()
                };
            });
            out
        })
    }

    /// Elementwise square root; caller guarantees nonnegative input.
    pub fn sqrt(&self) -> Var<F> {
        let y = self.value().mapv(|v| v.sqrt());
        let yc = y.clone().into_shared();
        self.unary(y, move |g| {
            let mut out = g.clone();
            let half = F::lit(0.5);
            out.zip_mut_with(&yc.view(), |gi, &yi| {
                *gi = if yi > F::zero() { *gi * half / yi } else { F::zero() };
            });
            out
        })
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the range.
    pub fn clamp(&self, lo: F, hi: F) -> Var<F> {
        let x = self.value();
        let xc = x.clone();
        self.unary(
            x.mapv(|v| v.max(lo).min(hi)),
            move |g| {
                let mut out = g.clone();
                out.zip_mut_with(&xc.view(), |gi, &xi| {
                    if xi <= lo || xi >= hi {
                        *gi = F::zero();
                    }
                });
                out
            },
        )
    }

    fn binary(
        &self,
        other: &Var<F>,
        value: ArrayD<F>,
        back: impl Fn(&ArrayD<F>) -> (ArrayD<F>, ArrayD<F>) + 'static,
    ) -> Var<F> {
        let (pa, pb) = (self.id, other.id);
        self.tape.push(
            value,
            Some(Box::new(move |g, sink| {
                let (ga, gb) = back(g);
                sink.add(pa, ga);
                sink.add(pb, gb);
            })),
        )
    }

    pub fn add(&self, other: &Var<F>) -> Var<F> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        self.binary(other, (&a.view() + &b.view()).into_dyn(), |g| (g.clone(), g.clone()))
    }

    pub fn sub(&self, other: &Var<F>) -> Var<F> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        self.binary(other, (&a.view() - &b.view()).into_dyn(), |g| {
            (g.clone(), g.mapv(|x| -x))
        })
    }

    pub fn mul(&self, other: &Var<F>) -> Var<F> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let (ac, bc) = (a.clone(), b.clone());
        self.binary(other, (&a.view() * &b.view()).into_dyn(), move |g| {
            ((g * &bc.view()).into_dyn(), (g * &ac.view()).into_dyn())
        })
    }

    pub fn div(&self, other: &Var<F>) -> Var<F> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "div: shape mismatch");
        let (ac, bc) = (a.clone(), b.clone());
        self.binary(other, (&a.view() / &b.view()).into_dyn(), move |g| {
            let ga = (g / &bc.view()).into_dyn();
            let mut gb = (g * &ac.view()).into_dyn();
            gb.zip_mut_with(&bc.view(), |x, &bi| *x = -*x / (bi * bi));
            (ga, gb)
        })
    }

    /// Broadcast a trailing singleton axis `[.., 1]` to `[.., n]`.
    pub fn expand_last(&self, n: usize) -> Var<F> {
        let v = self.value();
        let shape = v.shape().to_vec();
        assert_eq!(*shape.last().unwrap(), 1, "expand_last expects trailing 1");
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = n;
        let out = v
            .broadcast(IxDyn(&out_shape))
            .expect("broadcast")
            .to_owned();
        let pid = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let last = g.ndim() - 1;
                let mut gg = g.sum_axis(Axis(last));
                gg = gg.insert_axis(Axis(last));
                sink.add(pid, gg);
            })),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<F> {
        let v = self.value();
        let orig = v.shape().to_vec();
        assert_eq!(
            v.len(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let out = v
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape of standard-layout array");
        let pid = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let gg = g
                    .to_owned()
                    .into_shape_with_order(IxDyn(&orig))
                    .expect("reshape grad");
                sink.add(pid, gg);
            })),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Var<F> {
        let v = self.value();
        assert_eq!(axes.len(), v.ndim(), "permute: rank mismatch");
        let out = v
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let pid = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let gg = g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                sink.add(pid, gg);
            })),
        )
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Var<F> {
        let v = self.value();
        let last = v.ndim() - 1;
        let full = v.shape()[last];
        assert!(start + len <= full, "slice_last out of range");
        let out = v
            .slice_axis(Axis(last), ndarray::Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        let orig_shape = v.shape().to_vec();
        let pid = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut gg = ArrayD::<F>::zeros(IxDyn(&orig_shape));
                gg.slice_axis_mut(Axis(last), ndarray::Slice::from(start..start + len))
                    .assign(g);
                sink.add(pid, gg);
            })),
        )
    }

    /// Select rows of axis 0 by index; duplicate indices accumulate in the
    /// backward pass.
    pub fn index_select(&self, idx: &[usize]) -> Var<F> {
        let v = self.value();
        let n = v.shape()[0];
        for &i in idx {
            assert!(i < n, "index_select: index {i} out of range {n}");
        }
        let out = v.select(Axis(0), idx);
        let idxv = idx.to_vec();
        let orig_shape = v.shape().to_vec();
        let pid = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut gg = ArrayD::<F>::zeros(IxDyn(&orig_shape));
                for (row, &i) in idxv.iter().enumerate() {
                    let mut dst = gg.index_axis_mut(Axis(0), i);
                    dst += &g.index_axis(Axis(0), row);
                }
                sink.add(pid, gg);
            })),
        )
    }

    pub fn sum_all(&self) -> Var<F> {
        let v = self.value();
        let total = v.sum();
        let shape = v.shape().to_vec();
        let pid = self.id;
        self.tape.push(
            ndarray::arr0(total).into_dyn(),
            Some(Box::new(move |g, sink| {
                let gv = *g.iter().next().unwrap();
                sink.add(pid, ArrayD::from_elem(IxDyn(&shape), gv));
            })),
        )
    }

    pub fn mean_all(&self) -> Var<F> {
        let n = F::lit(self.len() as f64);
        self.sum_all().scale(F::one() / n)
    }

    pub fn sum_axis(&self, axis: usize) -> Var<F> {
        let v = self.value();
        let out = v.sum_axis(Axis(axis));
        let orig_shape = v.shape().to_vec();
        let pid = self.id;
        self.tape.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let expanded = g.clone().insert_axis(Axis(axis));
                let gg = expanded
                    .broadcast(IxDyn(&orig_shape))
                    .expect("broadcast grad")
                    .to_owned();
                sink.add(pid, gg);
            })),
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Var<F> {
        let n = F::lit(self.shape()[axis] as f64);
        self.sum_axis(axis).scale(F::one() / n)
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Var<F>) -> Var<F> {
        let (a, b) = (self.value(), other.value());
        let (a2, b2) = (as2d(&a), as2d(&b));
        assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dim mismatch");
        let out = a2.dot(&b2);
        let (ac, bc) = (a.clone(), b.clone());
        self.binary(other, out.into_dyn(), move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let ga = g2.dot(&as2d(&bc).t()).into_dyn();
            let gb = as2d(&ac).t().dot(&g2).into_dyn();
            (ga, gb)
        })
    }

    /// Batched matrix product: `[G,m,k] x [G,k,n] -> [G,m,n]`.
    pub fn bmm(&self, other: &Var<F>) -> Var<F> {
        let (a, b) = (self.value(), other.value());
        let a3 = a.view().into_dimensionality::<Ix3>().expect("bmm lhs rank 3");
        let b3 = b.view().into_dimensionality::<Ix3>().expect("bmm rhs rank 3");
        let (ga_, m, k) = (a3.dim().0, a3.dim().1, a3.dim().2);
        let (gb_, k2, n) = (b3.dim().0, b3.dim().1, b3.dim().2);
        assert_eq!(ga_, gb_, "bmm: group count mismatch");
        assert_eq!(k, k2, "bmm: inner dim mismatch");
        let mut out = Array3::<F>::zeros((ga_, m, n));
        for gi in 0..ga_ {
            out.index_axis_mut(Axis(0), gi)
                .assign(&a3.index_axis(Axis(0), gi).dot(&b3.index_axis(Axis(0), gi)));
        }
        let (ac, bc) = (a.clone(), b.clone());
        self.binary(other, out.into_dyn(), move |g| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let a3 = ac.view().into_dimensionality::<Ix3>().unwrap();
            let b3 = bc.view().into_dimensionality::<Ix3>().unwrap();
            let mut gav = Array3::<F>::zeros(a3.dim());
            let mut gbv = Array3::<F>::zeros(b3.dim());
            for gi in 0..g3.dim().0 {
                let gg = g3.index_axis(Axis(0), gi);
                gav.index_axis_mut(Axis(0), gi)
                    .assign(&gg.dot(&b3.index_axis(Axis(0), gi).t()));
                gbv.index_axis_mut(Axis(0), gi)
                    .assign(&a3.index_axis(Axis(0), gi).t().dot(&gg));
            }
            (gav.into_dyn(), gbv.into_dyn())
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Var<F> {
        let v = self.value();
        let mut y = view_rows(&v);
        for mut row in y.rows_mut() {
            let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|x| (x - mx).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let shape = v.shape().to_vec();
        let y = y.into_shape_with_order(IxDyn(&shape)).unwrap();
        let yc = y.clone().into_shared();
        let pid = self.id;
        self.tape.push(
            y,
            Some(Box::new(move |g, sink| {
                let last = g.ndim() - 1;
                let gy = g * &yc.view();
                let s = gy.sum_axis(Axis(last)).insert_axis(Axis(last));
                let gg = &gy - &(&yc.view() * &s.broadcast(g.raw_dim()).unwrap());
                sink.add(pid, gg);
            })),
        )
    }

    /// Affine layer over the last axis: `x[.., in] . w[in, out] + b[out]`.
    pub fn linear(&self, w: &Var<F>, b: &Var<F>) -> Var<F> {
        let x = self.value();
        let wv = w.value();
        let bv = b.value();
        let w2 = as2d(&wv);
        let b1 = bv.view().into_dimensionality::<Ix1>().expect("bias rank 1");
        let in_dim = *x.shape().last().unwrap();
        assert_eq!(w2.nrows(), in_dim, "linear: input dim mismatch");
        assert_eq!(w2.ncols(), b1.len(), "linear: bias dim mismatch");
        let x2 = view_rows(&x);
        let mut out = x2.dot(&w2);
        out += &b1;
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = w2.ncols();
        let out = out.into_shape_with_order(IxDyn(&out_shape)).unwrap();
        let (px, pw, pb) = (self.id, w.id, b.id);
        let (xc, wc) = (x.clone(), wv.clone());
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let last = g.shape().len() - 1;
                let cols = g.shape()[last];
                let rows = g.len() / cols;
                let g2 = g
                    .view()
                    .into_shape_with_order((rows, cols))
                    .expect("grad standard layout");
                let x2 = view_rows(&xc);
                let gx = g2.dot(&as2d(&wc).t());
                let gw = x2.t().dot(&g2);
                let gb = g2.sum_axis(Axis(0));
                sink.add(px, gx.into_shape_with_order(xc.raw_dim()).unwrap().into_dyn());
                sink.add(pw, gw.into_dyn());
                sink.add(pb, gb.into_dyn());
            })),
        )
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layernorm(&self, w: &Var<F>, b: &Var<F>, eps: F) -> Var<F> {
        let x = self.value();
        let wv = w.value();
        let bv = b.value();
        let c = *x.shape().last().unwrap();
        assert_eq!(wv.len(), c, "layernorm: scale dim");
        assert_eq!(bv.len(), c, "layernorm: shift dim");
        let x2 = view_rows(&x);
        let rows = x2.nrows();
        let mut xhat = Array2::<F>::zeros((rows, c));
        let mut sigma = Array1::<F>::zeros(rows);
        let inv_c = F::one() / F::lit(c as f64);
        for (i, row) in x2.rows().into_iter().enumerate() {
            let mu = row.sum() * inv_c;
            let var = row.fold(F::zero(), |acc, &v| acc + (v - mu) * (v - mu)) * inv_c;
            let sd = (var + eps).sqrt();
            sigma[i] = sd;
            for (j, &v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mu) / sd;
            }
        }
        let w1 = wv.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            row.zip_mut_with(&w1.view(), |v, &wi| *v = *v * wi);
            row += &b1;
        }
        let out = y.into_shape_with_order(x.raw_dim()).unwrap();
        let (px, pw, pb) = (self.id, w.id, b.id);
        let xhat = xhat.into_shared();
        let sigma = sigma.into_shared();
        let wcap = w1.into_shared();
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let cols = xhat.ncols();
                let rows = xhat.nrows();
                let g2 = g
                    .view()
                    .into_shape_with_order((rows, cols))
                    .expect("grad layout");
                let mut gx = Array2::<F>::zeros((rows, cols));
                let mut gw = Array1::<F>::zeros(cols);
                let mut gb = Array1::<F>::zeros(cols);
                let inv_c = F::one() / F::lit(cols as f64);
                for i in 0..rows {
                    let gy = g2.row(i);
                    let xh = xhat.row(i);
                    for j in 0..cols {
                        gw[j] += gy[j] * xh[j];
                        gb[j] += gy[j];
                    }
                    // dxhat = gy * w; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) / sigma
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..cols {
                        let dxh = gy[j] * wcap[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 = m1 * inv_c;
                    m2 = m2 * inv_c;
                    let inv_sd = F::one() / sigma[i];
                    for j in 0..cols {
                        let dxh = gy[j] * wcap[j];
                        gx[[i, j]] = (dxh - m1 - xh[j] * m2) * inv_sd;
                    }
                }
                sink.add(px, gx.into_shape_with_order(g.raw_dim()).unwrap().into_dyn());
                sink.add(pw, gw.into_dyn());
                sink.add(pb, gb.into_dyn());
            })),
        )
    }

    /// Elementwise binary cross entropy with logits against constant
    /// targets in {0, 1}: `max(x,0) - x*t + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&self, targets: &ArrayD<F>) -> Var<F> {
        let x = self.value();
        assert_eq!(x.shape(), targets.shape(), "bce: shape mismatch");
        let mut out = ArrayD::<F>::zeros(x.raw_dim());
        ndarray::Zip::from(&mut out)
            .and(&x.view())
            .and(targets)
            .for_each(|o, &xi, &ti| {
                let pos = xi.max(F::zero());
                *o = pos - xi * ti + (F::one() + (-xi.abs()).exp()).ln();
            });
        let xc = x.clone();
        let tc = targets.clone();
        let pid = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut gg = g.clone();
                ndarray::Zip::from(&mut gg)
                    .and(&xc.view())
                    .and(&tc)
                    .for_each(|gi, &xi, &ti| {
                        let s = F::one() / (F::one() + (-xi).exp());
                        *gi = *gi * (s - ti);
                    });
                sink.add(pid, gg);
            })),
        )
    }
}

/// Concatenate along the last axis. All inputs share leading dimensions.
pub fn concat_last<F: Scalar>(parts: &[Var<F>]) -> Var<F> {
    assert!(!parts.is_empty(), "concat_last: no inputs");
    let values: Vec<Value<F>> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let last = values[0].ndim() - 1;
    let out = ndarray::concatenate(Axis(last), &views).expect("concat_last");
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let widths: Vec<usize> = values.iter().map(|v| v.shape()[last]).collect();
    parts[0].tape.push(
        out,
        Some(Box::new(move |g, sink| {
            let mut start = 0usize;
            for (pid, w) in ids.iter().zip(&widths) {
                let gg = g
                    .slice_axis(Axis(last), ndarray::Slice::from(start..start + w))
                    .to_owned();
                sink.add(*pid, gg);
                start += w;
            }
        })),
    )
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

pub(crate) fn conv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

fn im2col<F: Scalar>(
    x: &ArrayD<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(w, kw, stride, pad);
    let mut col = Array2::<F>::zeros((cin * kh * kw, ho * wo));
    for ci in 0..cin {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                for oy in 0..ho {
                    let iy = (oy * stride + i) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + j) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * wo + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im<F: Scalar>(
    gcol: &Array2<F>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(w, kw, stride, pad);
    let mut gx = Array3::<F>::zeros((cin, h, w));
    for ci in 0..cin {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                for oy in 0..ho {
                    let iy = (oy * stride + i) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + j) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[[ci, iy as usize, ix as usize]] += gcol[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
    gx
}

impl<F: Scalar> Var<F> {
    /// 2-D convolution of a single image `x[Cin,H,W]` with kernels
    /// `w[Cout,Cin,kh,kw]` and per-channel bias. Zero padding.
    pub fn conv2d(&self, w: &Var<F>, b: &Var<F>, stride: usize, pad: usize) -> Var<F> {
        let x = self.value();
        let wv = w.value();
        let bv = b.value();
        assert_eq!(x.ndim(), 3, "conv2d: input rank 3 expected");
        assert_eq!(wv.ndim(), 4, "conv2d: kernel rank 4 expected");
        let (cout, cin, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(x.shape()[0], cin, "conv2d: channel mismatch");
        assert_eq!(bv.len(), cout, "conv2d: bias mismatch");
        let (h, wd) = (x.shape()[1], x.shape()[2]);
        let ho = conv_out_size(h, kh, stride, pad);
        let wo = conv_out_size(wd, kw, stride, pad);

        let xd = x.to_owned();
        let col = im2col(&xd, kh, kw, stride, pad);
        let w2 = wv
            .to_owned()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap();
        let mut out2 = w2.dot(&col);
        for (mut row, &bi) in out2.rows_mut().into_iter().zip(bv.iter()) {
            row.mapv_inplace(|v| v + bi);
        }
        let out = out2
            .into_shape_with_order(IxDyn(&[cout, ho, wo]))
            .unwrap();

        let (px, pw, pb) = (self.id, w.id, b.id);
        let (xc, wc) = (x.clone(), wv.clone());
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let g2 = g
                    .view()
                    .into_shape_with_order((cout, ho * wo))
                    .expect("conv grad layout");
                // recompute im2col rather than storing it
                let col = im2col(&xc.to_owned(), kh, kw, stride, pad);
                let gw = g2.dot(&col.t());
                let gb = g2.sum_axis(Axis(1));
                let w2 = wc
                    .to_owned()
                    .into_shape_with_order((cout, cin * kh * kw))
                    .unwrap();
                let gcol = w2.t().dot(&g2);
                let gx = col2im(&gcol, cin, h, wd, kh, kw, stride, pad);
                sink.add(px, gx.into_dyn());
                sink.add(
                    pw,
                    gw.into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                        .unwrap(),
                );
                sink.add(pb, gb.into_dyn());
            })),
        )
    }
}

// ---------------------------------------------------------------------------
// bilinear sampling / splatting
// ---------------------------------------------------------------------------

/// One bilinear footprint: four (row, col, weight) taps.
#[derive(Clone, Copy)]
struct Footprint<F> {
    r0: usize,
    c0: usize,
    fr: F,
    fc: F,
    /// true when the row (resp. col) coordinate is strictly inside
    /// `(0, size-1)` so its derivative is nonzero
    dr_live: bool,
    dc_live: bool,
}

fn footprint<F: Scalar>(row: F, col: F, rows: usize, cols: usize) -> Footprint<F> {
    let rmax = F::lit((rows - 1) as f64);
    let cmax = F::lit((cols - 1) as f64);
    let rc = row.max(F::zero()).min(rmax);
    let cc = col.max(F::zero()).min(cmax);
    let (r0, fr) = if rows >= 2 {
        let r0 = rc.floor().to_f64() as usize;
        let r0 = r0.min(rows - 2);
        (r0, rc - F::lit(r0 as f64))
    } else {
        (0, F::zero())
    };
    let (c0, fc) = if cols >= 2 {
        let c0 = cc.floor().to_f64() as usize;
        let c0 = c0.min(cols - 2);
        (c0, cc - F::lit(c0 as f64))
    } else {
        (0, F::zero())
    };
    Footprint {
        r0,
        c0,
        fr,
        fc,
        dr_live: rows >= 2 && row > F::zero() && row < rmax,
        dc_live: cols >= 2 && col > F::zero() && col < cmax,
    }
}

impl<F: Scalar> Var<F> {
    /// Bilinear sample of `plane[C,R,Cols]` at `coords[K,2]` (row, col),
    /// border-clamped. Differentiable in both the plane and the coordinates.
    pub fn bilinear_sample(plane: &Var<F>, coords: &Var<F>) -> Var<F> {
        let pv = plane.value();
        let cv = coords.value();
        assert_eq!(pv.ndim(), 3, "bilinear_sample: plane rank 3");
        assert_eq!(cv.ndim(), 2, "bilinear_sample: coords rank 2");
        assert_eq!(cv.shape()[1], 2, "bilinear_sample: coords [K,2]");
        let (ch, rows, cols) = (pv.shape()[0], pv.shape()[1], pv.shape()[2]);
        let k = cv.shape()[0];
        let p3 = pv.view().into_dimensionality::<Ix3>().unwrap();
        let c2 = as2d(&cv);
        let mut out = Array2::<F>::zeros((k, ch));
        let one = F::one();
        for i in 0..k {
            let fp = footprint(c2[[i, 0]], c2[[i, 1]], rows, cols);
            let (r0, c0) = (fp.r0, fp.c0);
            let r1 = (r0 + 1).min(rows - 1);
            let c1 = (c0 + 1).min(cols - 1);
            let w00 = (one - fp.fr) * (one - fp.fc);
            let w01 = (one - fp.fr) * fp.fc;
            let w10 = fp.fr * (one - fp.fc);
            let w11 = fp.fr * fp.fc;
            for c in 0..ch {
                out[[i, c]] = w00 * p3[[c, r0, c0]]
                    + w01 * p3[[c, r0, c1]]
                    + w10 * p3[[c, r1, c0]]
                    + w11 * p3[[c, r1, c1]];
            }
        }
        let (pp, pc) = (plane.id, coords.id);
        let (pvc, cvc) = (pv.clone(), cv.clone());
        plane.tape.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let p3 = pvc.view().into_dimensionality::<Ix3>().unwrap();
                let c2 = as2d(&cvc);
                let mut gp = Array3::<F>::zeros((ch, rows, cols));
                let mut gc = Array2::<F>::zeros((k, 2));
                let one = F::one();
                for i in 0..k {
                    let fp = footprint(c2[[i, 0]], c2[[i, 1]], rows, cols);
                    let (r0, c0) = (fp.r0, fp.c0);
                    let r1 = (r0 + 1).min(rows - 1);
                    let c1 = (c0 + 1).min(cols - 1);
                    let w00 = (one - fp.fr) * (one - fp.fc);
                    let w01 = (one - fp.fr) * fp.fc;
                    let w10 = fp.fr * (one - fp.fc);
                    let w11 = fp.fr * fp.fc;
                    let mut dr = F::zero();
                    let mut dc = F::zero();
                    for c in 0..ch {
                        let gi = g2[[i, c]];
                        gp[[c, r0, c0]] += gi * w00;
                        gp[[c, r0, c1]] += gi * w01;
                        gp[[c, r1, c0]] += gi * w10;
                        gp[[c, r1, c1]] += gi * w11;
                        let p00 = p3[[c, r0, c0]];
                        let p01 = p3[[c, r0, c1]];
                        let p10 = p3[[c, r1, c0]];
                        let p11 = p3[[c, r1, c1]];
                        dr += gi
                            * ((one - fp.fc) * (p10 - p00) + fp.fc * (p11 - p01));
                        dc += gi
                            * ((one - fp.fr) * (p01 - p00) + fp.fr * (p11 - p10));
                    }
                    if fp.dr_live {
                        gc[[i, 0]] = dr;
                    }
                    if fp.dc_live {
                        gc[[i, 1]] = dc;
                    }
                }
                sink.add(pp, gp.into_dyn());
                sink.add(pc, gc.into_dyn());
            })),
        )
    }

    /// Average splat of per-point features onto a `[Cf,R,Cols]` plane at
    /// fixed (row, col) coordinates. Differentiable in the features only;
    /// untouched cells stay zero.
    pub fn splat_average(
        features: &Var<F>,
        coords: &Array2<F>,
        rows: usize,
        cols: usize,
    ) -> Var<F> {
        let fv = features.value();
        assert_eq!(fv.ndim(), 2, "splat_average: features [P,Cf]");
        let p = fv.shape()[0];
        assert_eq!(coords.nrows(), p, "splat_average: coord count mismatch");
        let cf = fv.shape()[1];
        let f2 = as2d(&fv);
        let one = F::one();

        let mut wsum = Array2::<F>::zeros((rows, cols));
        let mut acc = Array3::<F>::zeros((cf, rows, cols));
        // per point: 4 taps (cell row, cell col, weight)
        let mut taps: Vec<[(u32, u32, F); 4]> = Vec::with_capacity(p);
        for i in 0..p {
            let fp = footprint(coords[[i, 0]], coords[[i, 1]], rows, cols);
            let (r0, c0) = (fp.r0, fp.c0);
            let r1 = (r0 + 1).min(rows - 1);
            let c1 = (c0 + 1).min(cols - 1);
            let t = [
                (r0 as u32, c0 as u32, (one - fp.fr) * (one - fp.fc)),
                (r0 as u32, c1 as u32, (one - fp.fr) * fp.fc),
                (r1 as u32, c0 as u32, fp.fr * (one - fp.fc)),
                (r1 as u32, c1 as u32, fp.fr * fp.fc),
            ];
            for &(r, c, w) in &t {
                if w > F::zero() {
                    wsum[[r as usize, c as usize]] += w;
                    for ch in 0..cf {
                        acc[[ch, r as usize, c as usize]] += w * f2[[i, ch]];
                    }
                }
            }
            taps.push(t);
        }
        let mut out = acc;
        for r in 0..rows {
            for c in 0..cols {
                let w = wsum[[r, c]];
                if w > F::zero() {
                    for ch in 0..cf {
                        out[[ch, r, c]] = out[[ch, r, c]] / w;
                    }
                }
            }
        }
        let pid = features.id;
        let wsum = wsum.into_shared();
        features.tape.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut gf = Array2::<F>::zeros((p, cf));
                for (i, t) in taps.iter().enumerate() {
                    for &(r, c, w) in t {
                        let (r, c) = (r as usize, c as usize);
                        let total = wsum[[r, c]];
                        if w > F::zero() && total > F::zero() {
                            let scale = w / total;
                            for ch in 0..cf {
                                gf[[i, ch]] += scale * g3[[ch, r, c]];
                            }
                        }
                    }
                }
                sink.add(pid, gf.into_dyn());
            })),
        )
    }

    /// Scaled inner products `out[k,o] = <samples[k,o,:], feats[k,:]> / sqrt(C)`.
    pub fn corr_dot(samples: &Var<F>, feats: &Var<F>) -> Var<F> {
        let sv = samples.value();
        let fv = feats.value();
        assert_eq!(sv.ndim(), 3, "corr_dot: samples [K,O,C]");
        assert_eq!(fv.ndim(), 2, "corr_dot: feats [K,C]");
        let (k, o, c) = (sv.shape()[0], sv.shape()[1], sv.shape()[2]);
        assert_eq!(fv.shape()[0], k, "corr_dot: K mismatch");
        assert_eq!(fv.shape()[1], c, "corr_dot: C mismatch");
        let scale = F::one() / F::lit((c as f64).sqrt());
        let s3 = sv.view().into_dimensionality::<Ix3>().unwrap();
        let f2 = as2d(&fv);
        let mut out = Array2::<F>::zeros((k, o));
        for i in 0..k {
            for j in 0..o {
                let mut dot = F::zero();
                for cc in 0..c {
                    dot += s3[[i, j, cc]] * f2[[i, cc]];
                }
                out[[i, j]] = dot * scale;
            }
        }
        let (ps, pf) = (samples.id, feats.id);
        let (svc, fvc) = (sv.clone(), fv.clone());
        samples.tape.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let s3 = svc.view().into_dimensionality::<Ix3>().unwrap();
                let f2 = as2d(&fvc);
                let mut gs = Array3::<F>::zeros((k, o, c));
                let mut gf = Array2::<F>::zeros((k, c));
                for i in 0..k {
                    for j in 0..o {
                        let gij = g2[[i, j]] * scale;
                        for cc in 0..c {
                            gs[[i, j, cc]] += gij * f2[[i, cc]];
                            gf[[i, cc]] += gij * s3[[i, j, cc]];
                        }
                    }
                }
                sink.add(ps, gs.into_dyn());
                sink.add(pf, gf.into_dyn());
            })),
        )
    }

    /// Replicate each coordinate across a fixed offset grid:
    /// `out[k*O+o, :] = coords[k, :] + offsets[o, :]`.
    pub fn add_offsets(coords: &Var<F>, offsets: &Array2<F>) -> Var<F> {
        let cv = coords.value();
        assert_eq!(cv.ndim(), 2, "add_offsets: coords [K,2]");
        let k = cv.shape()[0];
        let d = cv.shape()[1];
        assert_eq!(offsets.ncols(), d, "add_offsets: dim mismatch");
        let o = offsets.nrows();
        let c2 = as2d(&cv);
        let mut out = Array2::<F>::zeros((k * o, d));
        for i in 0..k {
            for j in 0..o {
                for dd in 0..d {
                    out[[i * o + j, dd]] = c2[[i, dd]] + offsets[[j, dd]];
                }
            }
        }
        let pid = coords.id;
        coords.tape.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut gc = Array2::<F>::zeros((k, d));
                for i in 0..k {
                    for j in 0..o {
                        for dd in 0..d {
                            gc[[i, dd]] += g2[[i * o + j, dd]];
                        }
                    }
                }
                sink.add(pid, gc.into_dyn());
            })),
        )
    }

    /// Sinusoidal Fourier features of 3-vectors. Input `[..,3]`, output
    /// `[..,6L]` laid out per axis as `L` sines then `L` cosines of
    /// `2^k * pi * (x - center) * inv_scale`.
    pub fn fourier_encode(&self, bands: usize, center: [F; 3], inv_scale: [F; 3]) -> Var<F> {
        let x = self.value();
        assert_eq!(*x.shape().last().unwrap(), 3, "fourier_encode: last dim 3");
        let rows = x.len() / 3;
        let x2 = view_rows(&x);
        let pi = F::lit(std::f64::consts::PI);
        let mut out = Array2::<F>::zeros((rows, 6 * bands));
        for i in 0..rows {
            for a in 0..3 {
                let n = (x2[[i, a]] - center[a]) * inv_scale[a];
                for kb in 0..bands {
                    let freq = F::lit((1u64 << kb) as f64) * pi;
                    let arg = freq * n;
                    out[[i, a * 2 * bands + kb]] = arg.sin();
                    out[[i, a * 2 * bands + bands + kb]] = arg.cos();
                }
            }
        }
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = 6 * bands;
        let out = out.into_shape_with_order(IxDyn(&out_shape)).unwrap();
        let pid = self.id;
        let xc = x.clone();
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let g2 = g
                    .view()
                    .into_shape_with_order((rows, 6 * bands))
                    .expect("grad layout");
                let x2 = view_rows(&xc);
                let mut gx = Array2::<F>::zeros((rows, 3));
                for i in 0..rows {
                    for a in 0..3 {
                        let n = (x2[[i, a]] - center[a]) * inv_scale[a];
                        let mut acc = F::zero();
                        for kb in 0..bands {
                            let freq = F::lit((1u64 << kb) as f64) * pi;
                            let arg = freq * n;
                            let gs = g2[[i, a * 2 * bands + kb]];
                            let gc = g2[[i, a * 2 * bands + bands + kb]];
                            acc += freq * (gs * arg.cos() - gc * arg.sin());
                        }
                        gx[[i, a]] = acc * inv_scale[a];
                    }
                }
                let gx = gx
                    .into_shape_with_order(xc.raw_dim())
                    .expect("grad reshape");
                sink.add(pid, gx.into_dyn());
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::tape::Tape;
    use super::*;
    use ndarray::{arr1, arr2, Array};

    #[test]
    fn add_mul_backward_accumulates() {
        let tape = Tape::<f64>::new();
        let a = tape.var(arr1(&[2.0, 3.0]));
        let b = tape.var(arr1(&[5.0, 7.0]));
        // loss = sum(a*b + a)
        let loss = a.mul(&b).add(&a).sum_all();
        assert_eq!(loss.scalar(), 2.0 * 5.0 + 2.0 + 3.0 * 7.0 + 3.0);
        let grads = tape.backward(&loss);
        let ga = grads.get(&a).unwrap();
        let gb = grads.get(&b).unwrap();
        assert_eq!(ga.as_slice().unwrap(), &[6.0, 8.0]); // b + 1
        assert_eq!(gb.as_slice().unwrap(), &[2.0, 3.0]); // a
    }

    #[test]
    fn matmul_matches_manual_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.var(arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        let b = tape.var(arr2(&[[5.0, 6.0], [7.0, 8.0]]));
        let loss = a.matmul(&b).sum_all();
        let grads = tape.backward(&loss);
        // d(sum(AB))/dA = ones * B^T
        let ga = grads.get(&a).unwrap();
        assert_eq!(ga[[0, 0]], 11.0);
        assert_eq!(ga[[0, 1]], 15.0);
        let gb = grads.get(&b).unwrap();
        assert_eq!(gb[[0, 0]], 4.0);
        assert_eq!(gb[[1, 1]], 6.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::<f64>::new();
        let x = tape.var(arr2(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]));
        let y = x.softmax_last();
        let v = y.to_array();
        for row in v.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((v[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn splat_single_point_integer_cell() {
        let tape = Tape::<f64>::new();
        let feats = tape.var(arr2(&[[2.0, -1.0]]));
        let coords = arr2(&[[1.0, 3.0]]);
        let plane = Var::splat_average(&feats, &coords, 4, 5);
        let v = plane.to_array();
        assert_eq!(v[[0, 1, 3]], 2.0);
        assert_eq!(v[[1, 1, 3]], -1.0);
        assert_eq!(v[[0, 0, 0]], 0.0);
    }

    #[test]
    fn bilinear_sample_integer_and_midpoint() {
        let tape = Tape::<f64>::new();
        let mut p = Array::zeros((1, 2, 2));
        p[[0, 0, 0]] = 1.0;
        p[[0, 0, 1]] = 2.0;
        p[[0, 1, 0]] = 3.0;
        p[[0, 1, 1]] = 4.0;
        let plane = tape.var(p);
        let coords = tape.var(arr2(&[[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]]));
        let out = Var::bilinear_sample(&plane, &coords).to_array();
        assert_eq!(out[[0, 0]], 1.0);
        assert!((out[[1, 0]] - 2.5).abs() < 1e-12);
        assert_eq!(out[[2, 0]], 4.0);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Array::from_shape_fn((1, 3, 3), |(_, i, j)| (i * 3 + j) as f64));
        let mut w = Array::zeros((1, 1, 3, 3));
        w[[0, 0, 1, 1]] = 1.0; // identity with pad 1
        let wv = tape.var(w);
        let bv = tape.var(arr1(&[0.0]));
        let y = x.conv2d(&wv, &bv, 1, 1);
        assert_eq!(y.to_array(), x.to_array());
    }

    #[test]
    fn fourier_zero_input() {
        let tape = Tape::<f64>::new();
        let x = tape.var(arr2(&[[0.0, 0.0, 0.0]]));
        let e = x
            .fourier_encode(4, [0.0; 3], [1.0; 3])
            .to_array();
        for a in 0..3 {
            for k in 0..4 {
                assert_eq!(e[[0, a * 8 + k]], 0.0);
                assert_eq!(e[[0, a * 8 + 4 + k]], 1.0);
            }
        }
    }

    #[test]
    fn slice_and_concat_roundtrip() {
        let tape = Tape::<f64>::new();
        let x = tape.var(arr2(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]));
        let a = x.slice_last(0, 1);
        let b = x.slice_last(1, 2);
        let y = concat_last(&[a, b]);
        assert_eq!(y.to_array(), x.to_array());
        let loss = y.mul(&y).sum_all();
        let grads = tape.backward(&loss);
        let gx = grads.get(&x).unwrap();
        assert_eq!(gx[[1, 2]], 12.0);
    }

    #[test]
    fn index_select_accumulates_duplicates() {
        let tape = Tape::<f64>::new();
        let x = tape.var(arr2(&[[1.0], [2.0], [3.0]]));
        let y = x.index_select(&[0, 0, 2]);
        let loss = y.sum_all();
        let grads = tape.backward(&loss);
        let gx = grads.get(&x).unwrap();
        assert_eq!(gx[[0, 0]], 2.0);
        assert_eq!(gx[[1, 0]], 0.0);
        assert_eq!(gx[[2, 0]], 1.0);
    }

}
