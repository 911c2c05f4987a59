//! Differentiable operations. Each op computes its forward value eagerly and
//! registers a backward closure that routes gradients to its inputs.

use std::rc::Rc;

use ndarray::{concatenate, ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix3, IxDyn, Slice};

use super::{accum, Scalar, Tensor};

fn same_graph<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) {
    debug_assert!(
        Rc::ptr_eq(&a.graph().inner, &b.graph().inner),
        "tensors belong to different graphs"
    );
}

fn as2<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("2-d tensor")
}

/// Plain-array matmul with optional transposes, used by forward and backward.
pub(crate) fn mm_arr<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>, ta: bool, tb: bool) -> ArrayD<T> {
    let av = as2(a);
    let bv = as2(b);
    let r = match (ta, tb) {
        (false, false) => av.dot(&bv),
        (false, true) => av.dot(&bv.t()),
        (true, false) => av.t().dot(&bv),
        (true, true) => av.t().dot(&bv.t()),
    };
    r.into_dyn()
}

impl<T: Scalar> Tensor<T> {
    // ---- elementwise binary ----

    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        same_graph(self, other);
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let v = &*self.value() + other.value();
        let (ia, ib) = (self.id(), other.id());
        self.graph().op(v, self.requires_grad() || other.requires_grad(), || {
            Box::new(move |g, grads| {
                accum(grads, ia, g.clone());
                accum(grads, ib, g.clone());
            })
        })
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        same_graph(self, other);
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let v = &*self.value() - other.value();
        let (ia, ib) = (self.id(), other.id());
        self.graph().op(v, self.requires_grad() || other.requires_grad(), || {
            Box::new(move |g, grads| {
                accum(grads, ia, g.clone());
                accum(grads, ib, g.mapv(|x| -x));
            })
        })
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        same_graph(self, other);
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let v = &*self.value() * other.value();
        let (ia, ib) = (self.id(), other.id());
        let (va, vb) = (Rc::clone(&self.value), Rc::clone(&other.value));
        self.graph().op(v, self.requires_grad() || other.requires_grad(), || {
            Box::new(move |g, grads| {
                accum(grads, ia, g * &*vb);
                accum(grads, ib, g * &*va);
            })
        })
    }

    pub fn div(&self, other: &Tensor<T>) -> Tensor<T> {
        same_graph(self, other);
        assert_eq!(self.shape(), other.shape(), "div: shape mismatch");
        let v = &*self.value() / other.value();
        let (ia, ib) = (self.id(), other.id());
        let (va, vb) = (Rc::clone(&self.value), Rc::clone(&other.value));
        self.graph().op(v, self.requires_grad() || other.requires_grad(), || {
            Box::new(move |g, grads| {
                accum(grads, ia, g / &*vb);
                let d = g * &*va / &(&*vb * &*vb);
                accum(grads, ib, d.mapv(|x| -x));
            })
        })
    }

    // ---- scalar ----

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        let v = self.value().mapv(|x| x * c);
        let ia = self.id();
        self.graph().op(v, self.requires_grad(), || {
            Box::new(move |g, grads| accum(grads, ia, g.mapv(|x| x * c)))
        })
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let v = self.value().mapv(|x| x + c);
        let ia = self.id();
        self.graph().op(v, self.requires_grad(), || {
            Box::new(move |g, grads| accum(grads, ia, g.clone()))
        })
    }

    /// Multiply by a differentiable 0-d scalar tensor.
    pub fn mul_scalar_t(&self, s: &Tensor<T>) -> Tensor<T> {
        same_graph(self, s);
        assert!(s.shape().is_empty(), "mul_scalar_t: scalar must be 0-d");
        let sv = *s.value().first().unwrap();
        let v = self.value().mapv(|x| x * sv);
        let (ia, is) = (self.id(), s.id());
        let va = Rc::clone(&self.value);
        self.graph().op(v, self.requires_grad() || s.requires_grad(), || {
            Box::new(move |g, grads| {
                accum(grads, ia, g.mapv(|x| x * sv));
                let ds: T = g.iter().zip(va.iter()).map(|(&g, &x)| g * x).sum();
                accum(grads, is, ArrayD::from_elem(IxDyn(&[]), ds));
            })
        })
    }

    /// Add a differentiable 0-d scalar tensor elementwise.
    pub fn add_scalar_t(&self, s: &Tensor<T>) -> Tensor<T> {
        same_graph(self, s);
        assert!(s.shape().is_empty(), "add_scalar_t: scalar must be 0-d");
        let sv = *s.value().first().unwrap();
        let v = self.value().mapv(|x| x + sv);
        let (ia, is) = (self.id(), s.id());
        self.graph().op(v, self.requires_grad() || s.requires_grad(), || {
            Box::new(move |g, grads| {
                accum(grads, ia, g.clone());
                let ds: T = g.iter().copied().sum();
                accum(grads, is, ArrayD::from_elem(IxDyn(&[]), ds));
            })
        })
    }

    /// Elementwise addition of a constant array (no gradient for the constant).
    pub fn add_const(&self, c: &ArrayD<T>) -> Tensor<T> {
        assert_eq!(self.shape(), c.shape(), "add_const: shape mismatch");
        let v = &*self.value() + c;
        let ia = self.id();
        self.graph().op(v, self.requires_grad(), || {
            Box::new(move |g, grads| accum(grads, ia, g.clone()))
        })
    }

    // ---- unary ----

    pub fn sigmoid(&self) -> Tensor<T> {
        let one = T::one();
        let v = self.value().mapv(|x| one / (one + (-x).exp()));
        let ia = self.id();
        let out = Rc::new(v);
        let out2 = Rc::clone(&out);
        let t = self.graph().op(
            ArrayD::clone(&out),
            self.requires_grad(),
            move || {
                Box::new(move |g, grads| {
                    let d = g * &out2.mapv(|s| s * (T::one() - s));
                    accum(grads, ia, d);
                })
            },
        );
        t
    }

    pub fn silu(&self) -> Tensor<T> {
        let one = T::one();
        let sig = self.value().mapv(|x| one / (one + (-x).exp()));
        let v = &*self.value() * &sig;
        let ia = self.id();
        let va = Rc::clone(&self.value);
        self.graph().op(v, self.requires_grad(), || {
            Box::new(move |g, grads| {
                let d = ndarray::Zip::from(g)
                    .and(&*va)
                    .and(&sig)
                    .map_collect(|&g, &x, &s| g * s * (T::one() + x * (T::one() - s)));
                accum(grads, ia, d);
            })
        })
    }

    pub fn exp(&self) -> Tensor<T> {
        let v = self.value().mapv(|x| x.exp());
        let ia = self.id();
        let out = Rc::new(v);
        let out2 = Rc::clone(&out);
        self.graph().op(ArrayD::clone(&out), self.requires_grad(), move || {
            Box::new(move |g, grads| accum(grads, ia, g * &*out2))
        })
    }

    pub fn ln(&self) -> Tensor<T> {
        let v = self.value().mapv(|x| x.ln());
        let ia = self.id();
        let va = Rc::clone(&self.value);
        self.graph().op(v, self.requires_grad(), || {
            Box::new(move |g, grads| accum(grads, ia, g / &*va))
        })
    }

    pub fn sqrt(&self) -> Tensor<T> {
        let v = self.value().mapv(|x| x.sqrt());
        let ia = self.id();
        let out = Rc::new(v);
        let out2 = Rc::clone(&out);
        self.graph().op(ArrayD::clone(&out), self.requires_grad(), move || {
            Box::new(move |g, grads| {
                let half = T::f(0.5);
                let d = ndarray::Zip::from(g)
                    .and(&*out2)
                    .map_collect(|&g, &y| g * half / y);
                accum(grads, ia, d);
            })
        })
    }

    /// `max(x, c)` elementwise; gradient passes only where `x > c`.
    pub fn clamp_min(&self, c: T) -> Tensor<T> {
        let v = self.value().mapv(|x| if x > c { x } else { c });
        let ia = self.id();
        let va = Rc::clone(&self.value);
        self.graph().op(v, self.requires_grad(), || {
            Box::new(move |g, grads| {
                let d = ndarray::Zip::from(g)
                    .and(&*va)
                    .map_collect(|&g, &x| if x > c { g } else { T::zero() });
                accum(grads, ia, d);
            })
        })
    }

    // ---- broadcasts ----

    /// `x[m,n] + v[n]`, broadcasting the vector over rows.
    pub fn add_row_vec(&self, v: &Tensor<T>) -> Tensor<T> {
        same_graph(self, v);
        let (m, n) = self.dims2();
        assert_eq!(v.shape(), [n], "add_row_vec: vector length mismatch");
        let vv = v
            .value()
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1-d vector");
        let out = &as2(self.value()) + &vv;
        let (ia, ib) = (self.id(), v.id());
        let _ = m;
        self.graph().op(
            out.into_dyn(),
            self.requires_grad() || v.requires_grad(),
            || {
                Box::new(move |g, grads| {
                    accum(grads, ia, g.clone());
                    accum(grads, ib, g.sum_axis(Axis(0)));
                })
            },
        )
    }

    /// `x[m,n] op v[m]`, broadcasting the vector down columns.
    fn per_row_op(
        &self,
        v: &Tensor<T>,
        fwd: impl Fn(T, T) -> T,
        kind: PerRow,
    ) -> Tensor<T> {
        same_graph(self, v);
        let (m, _n) = self.dims2();
        assert_eq!(v.shape(), [m], "per-row op: vector length mismatch");
        let x2 = as2(self.value());
        let v1 = v.value().view().into_dimensionality::<Ix1>().unwrap();
        let mut out = x2.to_owned();
        for (mut row, &s) in out.rows_mut().into_iter().zip(v1.iter()) {
            row.mapv_inplace(|x| fwd(x, s));
        }
        let (ia, ib) = (self.id(), v.id());
        let (va, vb) = (Rc::clone(&self.value), Rc::clone(&v.value));
        self.graph().op(
            out.into_dyn(),
            self.requires_grad() || v.requires_grad(),
            || {
                Box::new(move |g, grads| {
                    let g2 = as2(g);
                    let x2 = as2(&va);
                    let v1 = vb.view().into_dimensionality::<Ix1>().unwrap();
                    match kind {
                        PerRow::Add => {
                            accum(grads, ia, g.clone());
                            accum(grads, ib, g2.sum_axis(Axis(1)).into_dyn());
                        }
                        PerRow::Sub => {
                            accum(grads, ia, g.clone());
                            accum(
                                grads,
                                ib,
                                g2.sum_axis(Axis(1)).mapv(|x| -x).into_dyn(),
                            );
                        }
                        PerRow::Mul => {
                            let mut dx = g2.to_owned();
                            for (mut row, &s) in dx.rows_mut().into_iter().zip(v1.iter()) {
                                row.mapv_inplace(|x| x * s);
                            }
                            accum(grads, ia, dx.into_dyn());
                            let dv = (&g2 * &x2).sum_axis(Axis(1));
                            accum(grads, ib, dv.into_dyn());
                        }
                        PerRow::Div => {
                            let mut dx = g2.to_owned();
                            for (mut row, &s) in dx.rows_mut().into_iter().zip(v1.iter()) {
                                row.mapv_inplace(|x| x / s);
                            }
                            accum(grads, ia, dx.into_dyn());
                            let prod = &g2 * &x2;
                            let mut dv = prod.sum_axis(Axis(1));
                            for (d, &s) in dv.iter_mut().zip(v1.iter()) {
                                *d = -*d / (s * s);
                            }
                            accum(grads, ib, dv.into_dyn());
                        }
                    }
                })
            },
        )
    }

    pub fn add_per_row(&self, v: &Tensor<T>) -> Tensor<T> {
        self.per_row_op(v, |x, s| x + s, PerRow::Add)
    }

    pub fn sub_per_row(&self, v: &Tensor<T>) -> Tensor<T> {
        self.per_row_op(v, |x, s| x - s, PerRow::Sub)
    }

    pub fn mul_per_row(&self, v: &Tensor<T>) -> Tensor<T> {
        self.per_row_op(v, |x, s| x * s, PerRow::Mul)
    }

    pub fn div_per_row(&self, v: &Tensor<T>) -> Tensor<T> {
        self.per_row_op(v, |x, s| x / s, PerRow::Div)
    }

    // ---- matmul ----

    fn dims2(&self) -> (usize, usize) {
        let s = self.shape();
        assert!(s.len() == 2, "expected 2-d tensor, got {s:?}");
        (s[0], s[1])
    }

    /// `a[m,k] @ b[k,n]`.
    pub fn mm(&self, other: &Tensor<T>) -> Tensor<T> {
        same_graph(self, other);
        let (_, ka) = self.dims2();
        let (kb, _) = other.dims2();
        assert_eq!(ka, kb, "mm: inner dimension mismatch");
        let v = mm_arr(self.value(), other.value(), false, false);
        let (ia, ib) = (self.id(), other.id());
        let (va, vb) = (Rc::clone(&self.value), Rc::clone(&other.value));
        self.graph().op(v, self.requires_grad() || other.requires_grad(), || {
            Box::new(move |g, grads| {
                accum(grads, ia, mm_arr(g, &vb, false, true));
                accum(grads, ib, mm_arr(&va, g, true, false));
            })
        })
    }

    /// `a[m,k] @ b[n,k]^T`.
    pub fn mm_nt(&self, other: &Tensor<T>) -> Tensor<T> {
        same_graph(self, other);
        let (_, ka) = self.dims2();
        let (_, kb) = other.dims2();
        assert_eq!(ka, kb, "mm_nt: inner dimension mismatch");
        let v = mm_arr(self.value(), other.value(), false, true);
        let (ia, ib) = (self.id(), other.id());
        let (va, vb) = (Rc::clone(&self.value), Rc::clone(&other.value));
        self.graph().op(v, self.requires_grad() || other.requires_grad(), || {
            Box::new(move |g, grads| {
                accum(grads, ia, mm_arr(g, &vb, false, false));
                accum(grads, ib, mm_arr(g, &va, true, false));
            })
        })
    }

    /// `a[k,m]^T @ b[k,n]`.
    pub fn mm_tn(&self, other: &Tensor<T>) -> Tensor<T> {
        same_graph(self, other);
        let (ka, _) = self.dims2();
        let (kb, _) = other.dims2();
        assert_eq!(ka, kb, "mm_tn: inner dimension mismatch");
        let v = mm_arr(self.value(), other.value(), true, false);
        let (ia, ib) = (self.id(), other.id());
        let (va, vb) = (Rc::clone(&self.value), Rc::clone(&other.value));
        self.graph().op(v, self.requires_grad() || other.requires_grad(), || {
            Box::new(move |g, grads| {
                accum(grads, ia, mm_arr(&vb, g, false, true));
                accum(grads, ib, mm_arr(&va, g, false, false));
            })
        })
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor<T> {
        let s: T = self.value().iter().copied().sum();
        let v = ArrayD::from_elem(IxDyn(&[]), s);
        let ia = self.id();
        let shape = self.shape().to_vec();
        self.graph().op(v, self.requires_grad(), || {
            Box::new(move |g, grads| {
                let gv = *g.first().unwrap();
                accum(grads, ia, ArrayD::from_elem(IxDyn(&shape), gv));
            })
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.value().len();
        self.sum_all().mul_scalar(T::f(1.0 / n as f64))
    }

    /// Row means of a 2-d tensor: `[m,n] -> [m]`.
    pub fn row_mean(&self) -> Tensor<T> {
        let (_m, n) = self.dims2();
        let v = as2(self.value()).mean_axis(Axis(1)).unwrap().into_dyn();
        let ia = self.id();
        let shape = self.shape().to_vec();
        self.graph().op(v, self.requires_grad(), || {
            Box::new(move |g, grads| {
                let inv = T::f(1.0 / n as f64);
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = ArrayD::zeros(IxDyn(&shape));
                let mut dx2 = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
                for (mut row, &gi) in dx2.rows_mut().into_iter().zip(g1.iter()) {
                    row.fill(gi * inv);
                }
                accum(grads, ia, dx);
            })
        })
    }

    // ---- softmax / losses ----

    /// Row-wise softmax of a 2-d tensor (numerically stabilized).
    pub fn softmax_rows(&self) -> Tensor<T> {
        let x2 = as2(self.value());
        let mut out = x2.to_owned();
        for mut row in out.rows_mut() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|x| (x - mx).exp());
            let s: T = row.iter().copied().sum();
            row.mapv_inplace(|x| x / s);
        }
        let ia = self.id();
        let out = Rc::new(out.into_dyn());
        let out2 = Rc::clone(&out);
        self.graph().op(ArrayD::clone(&out), self.requires_grad(), move || {
            Box::new(move |g, grads| {
                let y = as2(&out2);
                let g2 = as2(g);
                let mut dx = (&g2 * &y).to_owned();
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let s: T = drow.iter().copied().sum();
                    ndarray::Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|d, &y| *d = *d - y * s);
                }
                accum(grads, ia, dx.into_dyn());
            })
        })
    }

    /// Weighted cross-entropy over rows of `logits[n, C]`, returned as the
    /// weighted sum (caller normalizes).
    pub fn cross_entropy(&self, targets: &[usize], weights: &[T]) -> Tensor<T> {
        let (n, _c) = self.dims2();
        assert_eq!(targets.len(), n);
        assert_eq!(weights.len(), n);
        let x2 = as2(self.value());
        let mut total = T::zero();
        for (i, row) in x2.rows().into_iter().enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&z| (z - mx).exp()).sum::<T>().ln();
            total = total + weights[i] * (lse - row[targets[i]]);
        }
        let v = ArrayD::from_elem(IxDyn(&[]), total);
        let ia = self.id();
        let va = Rc::clone(&self.value);
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        self.graph().op(v, self.requires_grad(), || {
            Box::new(move |g, grads| {
                let gv = *g.first().unwrap();
                let x2 = as2(&va);
                let mut dx = x2.to_owned();
                for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    row.mapv_inplace(|z| (z - mx).exp());
                    let s: T = row.iter().copied().sum();
                    row.mapv_inplace(|p| p / s);
                    row[targets[i]] = row[targets[i]] - T::one();
                    let w = gv * weights[i];
                    row.mapv_inplace(|p| p * w);
                }
                accum(grads, ia, dx.into_dyn());
            })
        })
    }

    /// Elementwise binary cross-entropy on logits against a constant target.
    pub fn bce_logits(&self, target: &ArrayD<T>) -> Tensor<T> {
        assert_eq!(self.shape(), target.shape(), "bce_logits: shape mismatch");
        let v = ndarray::Zip::from(self.value())
            .and(target)
            .map_collect(|&z, &t| {
                let m = if z > T::zero() { z } else { T::zero() };
                m - z * t + (T::one() + (-z.abs()).exp()).ln()
            });
        let ia = self.id();
        let va = Rc::clone(&self.value);
        let target = target.clone();
        self.graph().op(v, self.requires_grad(), || {
            Box::new(move |g, grads| {
                let d = ndarray::Zip::from(g)
                    .and(&*va)
                    .and(&target)
                    .map_collect(|&g, &z, &t| {
                        let s = T::one() / (T::one() + (-z).exp());
                        g * (s - t)
                    });
                accum(grads, ia, d);
            })
        })
    }

    /// Inner product with a constant vector.
    pub fn dot_const(&self, w: &ArrayD<T>) -> Tensor<T> {
        assert_eq!(self.shape(), w.shape(), "dot_const: shape mismatch");
        let s: T = self
            .value()
            .iter()
            .zip(w.iter())
            .map(|(&x, &w)| x * w)
            .sum();
        let v = ArrayD::from_elem(IxDyn(&[]), s);
        let ia = self.id();
        let w = w.clone();
        self.graph().op(v, self.requires_grad(), || {
            Box::new(move |g, grads| {
                let gv = *g.first().unwrap();
                accum(grads, ia, w.mapv(|x| x * gv));
            })
        })
    }

    // ---- structure ----

    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.value().len(), "reshape: element count mismatch");
        let v = self
            .value()
            .view()
            .to_shape(IxDyn(shape))
            .expect("contiguous reshape")
            .to_owned();
        let ia = self.id();
        let orig = self.shape().to_vec();
        self.graph().op(v, self.requires_grad(), || {
            Box::new(move |g, grads| {
                let d = g.view().to_shape(IxDyn(&orig)).unwrap().to_owned();
                accum(grads, ia, d);
            })
        })
    }

    /// Transpose of a 2-d tensor.
    pub fn transpose2(&self) -> Tensor<T> {
        let v = as2(self.value()).t().to_owned().into_dyn();
        let ia = self.id();
        self.graph().op(v, self.requires_grad(), || {
            Box::new(move |g, grads| {
                accum(grads, ia, as2(g).t().to_owned().into_dyn());
            })
        })
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<T> {
        assert!(start + len <= self.shape()[axis], "narrow out of bounds");
        let v = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let ia = self.id();
        let orig = self.shape().to_vec();
        self.graph().op(v, self.requires_grad(), || {
            Box::new(move |g, grads| {
                let mut dx = ArrayD::zeros(IxDyn(&orig));
                dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                accum(grads, ia, dx);
            })
        })
    }

    /// Concatenate along `axis`.
    pub fn concat(axis: usize, parts: &[&Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty());
        let views: Vec<ArrayViewD<T>> = parts.iter().map(|t| t.value().view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat shapes");
        let ids: Vec<usize> = parts.iter().map(|t| t.id()).collect();
        let lens: Vec<usize> = parts.iter().map(|t| t.shape()[axis]).collect();
        let rg = parts.iter().any(|t| t.requires_grad());
        parts[0].graph().op(v, rg, || {
            Box::new(move |g, grads| {
                let mut start = 0;
                for (&id, &len) in ids.iter().zip(lens.iter()) {
                    let part = g
                        .slice_axis(Axis(axis), Slice::from(start..start + len))
                        .to_owned();
                    accum(grads, id, part);
                    start += len;
                }
            })
        })
    }

    /// Gather rows of a 2-d tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor<T> {
        let (m, n) = self.dims2();
        let x2 = as2(self.value());
        let mut out = ndarray::Array2::<T>::zeros((rows.len(), n));
        for (k, &r) in rows.iter().enumerate() {
            assert!(r < m, "select_rows: row out of range");
            out.row_mut(k).assign(&x2.row(r));
        }
        let ia = self.id();
        let rows = rows.to_vec();
        let orig = self.shape().to_vec();
        self.graph().op(out.into_dyn(), self.requires_grad(), || {
            Box::new(move |g, grads| {
                let g2 = as2(g);
                let mut dx = ndarray::Array2::<T>::zeros((orig[0], orig[1]));
                for (k, &r) in rows.iter().enumerate() {
                    let mut dr = dx.row_mut(r);
                    dr += &g2.row(k);
                }
                accum(grads, ia, dx.into_dyn());
            })
        })
    }

    /// Extract one row of a 2-d tensor as a 1-d tensor.
    pub fn row(&self, i: usize) -> Tensor<T> {
        let (m, _n) = self.dims2();
        assert!(i < m, "row index out of range");
        let v = as2(self.value()).row(i).to_owned().into_dyn();
        let ia = self.id();
        let orig = self.shape().to_vec();
        self.graph().op(v, self.requires_grad(), || {
            Box::new(move |g, grads| {
                let mut dx = ndarray::Array2::<T>::zeros((orig[0], orig[1]));
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                dx.row_mut(i).assign(&g1);
                accum(grads, ia, dx.into_dyn());
            })
        })
    }

    /// Gather elements of a 1-d tensor; duplicate indices accumulate on backward.
    pub fn gather(&self, idx: &[usize]) -> Tensor<T> {
        let n = self.value().len();
        let x1 = self.value().view().into_dimensionality::<Ix1>().unwrap();
        let mut out = ndarray::Array1::<T>::zeros(idx.len());
        for (k, &i) in idx.iter().enumerate() {
            assert!(i < n, "gather index out of range");
            out[k] = x1[i];
        }
        let ia = self.id();
        let idx = idx.to_vec();
        self.graph().op(out.into_dyn(), self.requires_grad(), || {
            Box::new(move |g, grads| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = ndarray::Array1::<T>::zeros(n);
                for (k, &i) in idx.iter().enumerate() {
                    dx[i] = dx[i] + g1[k];
                }
                accum(grads, ia, dx.into_dyn());
            })
        })
    }

    // ---- normalization ----

    /// Layer normalization over the last axis of a 2-d tensor.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Tensor<T> {
        same_graph(self, gain);
        same_graph(self, bias);
        let (_m, n) = self.dims2();
        assert_eq!(gain.shape(), [n]);
        assert_eq!(bias.shape(), [n]);
        let x2 = as2(self.value());
        let g1 = gain.value().view().into_dimensionality::<Ix1>().unwrap();
        let b1 = bias.value().view().into_dimensionality::<Ix1>().unwrap();

        let inv_n = T::f(1.0 / n as f64);
        let mut xhat = x2.to_owned();
        let mut inv_std = ndarray::Array1::<T>::zeros(x2.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mu: T = row.iter().copied().sum::<T>() * inv_n;
            let var: T = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() * inv_n;
            let istd = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mu) * istd);
            *is = istd;
        }
        let mut out = xhat.clone();
        for mut row in out.rows_mut() {
            ndarray::Zip::from(&mut row)
                .and(&g1)
                .and(&b1)
                .for_each(|y, &g, &b| *y = *y * g + b);
        }

        let (ix, ig, ib) = (self.id(), gain.id(), bias.id());
        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        let gval = Rc::clone(&gain.value);
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        self.graph().op(out.into_dyn(), rg, || {
            Box::new(move |g, grads| {
                let g2 = as2(g);
                let gain1 = gval.view().into_dimensionality::<Ix1>().unwrap();
                // d gain / d bias
                let mut dgain = ndarray::Array1::<T>::zeros(gain1.len());
                let mut dbias = ndarray::Array1::<T>::zeros(gain1.len());
                for (grow, xrow) in g2.rows().into_iter().zip(xhat.rows()) {
                    ndarray::Zip::from(&mut dgain)
                        .and(&grow)
                        .and(&xrow)
                        .for_each(|d, &g, &x| *d = *d + g * x);
                    dbias += &grow;
                }
                accum(grads, ig, dgain.into_dyn());
                accum(grads, ib, dbias.into_dyn());
                // dx
                let inv_n = T::f(1.0 / gain1.len() as f64);
                let mut dx = ndarray::Array2::<T>::zeros(g2.dim());
                for ((grow, xrow), (mut dxrow, &istd)) in g2
                    .rows()
                    .into_iter()
                    .zip(xhat.rows())
                    .zip(dx.rows_mut().into_iter().zip(inv_std.iter()))
                {
                    // dxhat = g * gain
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..gain1.len() {
                        let dxh = grow[j] * gain1[j];
                        s1 = s1 + dxh;
                        s2 = s2 + dxh * xrow[j];
                    }
                    s1 = s1 * inv_n;
                    s2 = s2 * inv_n;
                    for j in 0..gain1.len() {
                        let dxh = grow[j] * gain1[j];
                        dxrow[j] = istd * (dxh - s1 - xrow[j] * s2);
                    }
                }
                accum(grads, ix, dx.into_dyn());
            })
        })
    }

    /// Row-wise L2 normalization with an epsilon floor on the norm.
    pub fn l2_normalize_rows(&self, eps: T) -> Tensor<T> {
        let x2 = as2(self.value());
        let mut out = x2.to_owned();
        let mut norms = ndarray::Array1::<T>::zeros(x2.nrows());
        for (mut row, nrm) in out.rows_mut().into_iter().zip(norms.iter_mut()) {
            let n: T = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            let d = if n > eps { n } else { eps };
            row.mapv_inplace(|x| x / d);
            *nrm = n;
        }
        let ia = self.id();
        let va = Rc::clone(&self.value);
        let norms = Rc::new(norms);
        self.graph().op(out.into_dyn(), self.requires_grad(), || {
            Box::new(move |g, grads| {
                let g2 = as2(g);
                let x2 = as2(&va);
                let mut dx = ndarray::Array2::<T>::zeros(g2.dim());
                for (((grow, xrow), mut dxrow), &n) in g2
                    .rows()
                    .into_iter()
                    .zip(x2.rows())
                    .zip(dx.rows_mut())
                    .zip(norms.iter())
                {
                    if n > eps {
                        // y = x / n; dx = (g - y (g.y)) / n
                        let gy: T = grow
                            .iter()
                            .zip(xrow.iter())
                            .map(|(&g, &x)| g * x / n)
                            .sum();
                        for j in 0..grow.len() {
                            dxrow[j] = (grow[j] - xrow[j] / n * gy) / n;
                        }
                    } else {
                        for j in 0..grow.len() {
                            dxrow[j] = grow[j] / eps;
                        }
                    }
                }
                accum(grads, ia, dx.into_dyn());
            })
        })
    }

    // ---- convolution / resampling ----

    /// 2-d convolution on `[C,H,W]` input with `[O,C,kh,kw]` weights.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Tensor<T> {
        same_graph(self, weight);
        same_graph(self, bias);
        let xs = self.shape();
        let ws = weight.shape();
        assert!(xs.len() == 3 && ws.len() == 4, "conv2d: bad ranks");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (o, ci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(c, ci, "conv2d: channel mismatch");
        assert_eq!(bias.shape(), [o]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;

        let cols = im2col(self.value(), kh, kw, stride, pad, ho, wo);
        let w2 = weight
            .value()
            .view()
            .to_shape((o, c * kh * kw))
            .unwrap()
            .to_owned();
        let mut y2 = w2.dot(&as2(&cols.clone().into_dyn()));
        let b1 = bias.value().view().into_dimensionality::<Ix1>().unwrap();
        for (mut row, &b) in y2.rows_mut().into_iter().zip(b1.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let out = y2.to_shape((o, ho, wo)).unwrap().to_owned().into_dyn();

        let (ix, iw, ib) = (self.id(), weight.id(), bias.id());
        let cols = Rc::new(cols);
        let wval = Rc::clone(&weight.value);
        let rg = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        self.graph().op(out, rg, || {
            Box::new(move |g, grads| {
                let g2 = g.view().to_shape((o, ho * wo)).unwrap().to_owned();
                // bias
                let db = g2.sum_axis(Axis(1));
                accum(grads, ib, db.into_dyn());
                // weight: dW2 = g2 @ cols^T
                let dw2 = g2.dot(&cols.t());
                let dw = dw2.to_shape((o, c, kh, kw)).unwrap().to_owned();
                accum(grads, iw, dw.into_dyn());
                // input: dcols = W2^T @ g2, then col2im
                let w2 = wval.view().to_shape((o, c * kh * kw)).unwrap().to_owned();
                let dcols = w2.t().dot(&g2);
                let dx = col2im(&dcols, c, h, w, kh, kw, stride, pad, ho, wo);
                accum(grads, ix, dx);
            })
        })
    }

    /// Nearest-neighbor 2x upsampling of a `[C,H,W]` tensor.
    pub fn upsample2_nearest(&self) -> Tensor<T> {
        let xs = self.shape();
        assert_eq!(xs.len(), 3);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let x3 = self.value().view().into_dimensionality::<Ix3>().unwrap();
        let mut out = ndarray::Array3::<T>::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x3[[ci, i, j]];
                    out[[ci, 2 * i, 2 * j]] = v;
                    out[[ci, 2 * i + 1, 2 * j]] = v;
                    out[[ci, 2 * i, 2 * j + 1]] = v;
                    out[[ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
        let ia = self.id();
        self.graph().op(out.into_dyn(), self.requires_grad(), || {
            Box::new(move |g, grads| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array3::<T>::zeros((c, h, w));
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            dx[[ci, i, j]] = g3[[ci, 2 * i, 2 * j]]
                                + g3[[ci, 2 * i + 1, 2 * j]]
                                + g3[[ci, 2 * i, 2 * j + 1]]
                                + g3[[ci, 2 * i + 1, 2 * j + 1]];
                        }
                    }
                }
                accum(grads, ia, dx.into_dyn());
            })
        })
    }

    /// Bilinear 2x upsampling of a `[C,H,W]` tensor (half-pixel centers).
    pub fn upsample2_bilinear(&self) -> Tensor<T> {
        let xs = self.shape();
        assert_eq!(xs.len(), 3);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let out = upsample2_bilinear_array(self.value());
        let ia = self.id();
        self.graph().op(out, self.requires_grad(), || {
            Box::new(move |g, grads| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array3::<T>::zeros((c, h, w));
                let q = T::f(0.75);
                let r = T::f(0.25);
                for ci in 0..c {
                    for oi in 0..2 * h {
                        let (i0, i1, wi0, wi1) = bilinear_taps(oi, h, q, r);
                        for oj in 0..2 * w {
                            let (j0, j1, wj0, wj1) = bilinear_taps(oj, w, q, r);
                            let gv = g3[[ci, oi, oj]];
                            dx[[ci, i0, j0]] = dx[[ci, i0, j0]] + gv * wi0 * wj0;
                            dx[[ci, i0, j1]] = dx[[ci, i0, j1]] + gv * wi0 * wj1;
                            dx[[ci, i1, j0]] = dx[[ci, i1, j0]] + gv * wi1 * wj0;
                            dx[[ci, i1, j1]] = dx[[ci, i1, j1]] + gv * wi1 * wj1;
                        }
                    }
                }
                accum(grads, ia, dx.into_dyn());
            })
        })
    }
}

#[derive(Clone, Copy)]
enum PerRow {
    Add,
    Sub,
    Mul,
    Div,
}

/// Source taps and weights for one output coordinate of 2x bilinear
/// upsampling with half-pixel centers (`align_corners = false`).
fn bilinear_taps<T: Scalar>(o: usize, n: usize, q: T, r: T) -> (usize, usize, T, T) {
    // o = 2i   samples input at i - 0.25 -> 0.25 * x[i-1] + 0.75 * x[i]
    // o = 2i+1 samples input at i + 0.25 -> 0.75 * x[i] + 0.25 * x[i+1]
    let i = o / 2;
    if o % 2 == 0 {
        if i == 0 {
            (0, 0, q + r, T::zero())
        } else {
            (i - 1, i, r, q)
        }
    } else if i + 1 >= n {
        (n - 1, n - 1, q + r, T::zero())
    } else {
        (i, i + 1, q, r)
    }
}

/// Value-only bilinear 2x upsampling, shared with inference-side code.
pub fn upsample2_bilinear_array<T: Scalar>(x: &ArrayD<T>) -> ArrayD<T> {
    let xs = x.shape();
    assert_eq!(xs.len(), 3);
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    let x3 = x.view().into_dimensionality::<Ix3>().unwrap();
    let q = T::f(0.75);
    let r = T::f(0.25);
    let mut out = ndarray::Array3::<T>::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        for oi in 0..2 * h {
            let (i0, i1, wi0, wi1) = bilinear_taps(oi, h, q, r);
            for oj in 0..2 * w {
                let (j0, j1, wj0, wj1) = bilinear_taps(oj, w, q, r);
                out[[ci, oi, oj]] = x3[[ci, i0, j0]] * wi0 * wj0
                    + x3[[ci, i0, j1]] * wi0 * wj1
                    + x3[[ci, i1, j0]] * wi1 * wj0
                    + x3[[ci, i1, j1]] * wi1 * wj1;
            }
        }
    }
    out.into_dyn()
}

fn im2col<T: Scalar>(
    x: &ArrayD<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ndarray::Array2<T> {
    let xs = x.shape();
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    let x3 = x.view().into_dimensionality::<Ix3>().unwrap();
    let mut cols = ndarray::Array2::<T>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (ci * kh + dy) * kw + dx;
                let mut crow = cols.row_mut(row);
                for i in 0..ho {
                    let yy = (i * stride + dy) as isize - pad as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for j in 0..wo {
                        let xx = (j * stride + dx) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        crow[i * wo + j] = x3[[ci, yy as usize, xx as usize]];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &ndarray::Array2<T>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ArrayD<T> {
    let mut dx = ndarray::Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        for dy in 0..kh {
            for dxk in 0..kw {
                let row = (ci * kh + dy) * kw + dxk;
                let crow = cols.row(row);
                for i in 0..ho {
                    let yy = (i * stride + dy) as isize - pad as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for j in 0..wo {
                        let xx = (j * stride + dxk) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        dx[[ci, yy as usize, xx as usize]] =
                            dx[[ci, yy as usize, xx as usize]] + crow[i * wo + j];
                    }
                }
            }
        }
    }
    dx.into_dyn()
}
