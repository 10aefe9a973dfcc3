//! Minimal reverse-mode autodiff over `ndarray`. A `Graph` is a tape of
//! nodes built forward; `backward` walks it in reverse, handing each node's
//! output gradient to a captured closure that produces the parent gradients.
//! Nodes whose ancestors contain no parameter skip gradient bookkeeping
//! entirely, so constant subgraphs cost nothing at backward time.
//!
//! Values are stored as shared arrays (`ArcArray`), making the closures'
//! captures refcount bumps rather than copies. Convolutions are expressed as
//! im2col gathers followed by a matrix product, which routes the heavy
//! arithmetic through `dot`.

use crate::scalar::Scalar;
use ndarray::{ArcArray, Array1, Array2, ArrayD, ArrayView2, ArrayViewD, Axis, Ix2, IxDyn};

pub type Value<F> = ArcArray<F, IxDyn>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

type BackFn<F> = Box<dyn Fn(&ArrayD<F>) -> Vec<(TensorId, ArrayD<F>)>>;

struct Node<F: Scalar> {
    value: Value<F>,
    needs_grad: bool,
    back: Option<BackFn<F>>,
}

/// Gradients by node id, populated by [`Graph::backward`].
pub struct Grads<F: Scalar> {
    by_node: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, id: TensorId) -> Option<&ArrayD<F>> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn as2<F: Scalar>(v: &ArrayViewD<'_, F>) -> ArrayView2<'_, F> {
    v.view().into_dimensionality::<Ix2>().expect("2-d tensor")
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Graph<F> {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> ArrayViewD<'_, F> {
        self.nodes[id.0].value.view()
    }

    pub fn value2(&self, id: TensorId) -> ArrayView2<'_, F> {
        self.nodes[id.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d tensor")
    }

    pub fn needs_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: ArrayD<F>, needs_grad: bool, back: Option<BackFn<F>>) -> TensorId {
        self.nodes.push(Node {
            value: value.into_shared(),
            needs_grad,
            back: if needs_grad { back } else { None },
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn input(&mut self, value: ArrayD<F>) -> TensorId {
        self.push(value, false, None)
    }

    /// Parameter leaf: gradients accumulate here.
    pub fn param(&mut self, value: Value<F>) -> TensorId {
        self.nodes.push(Node {
            value,
            needs_grad: true,
            back: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: TensorId) -> TensorId {
        let v = self.nodes[x.0].value.to_owned();
        self.input(v)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = va.to_owned() + vb.view();
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(
            out,
            needs,
            Some(Box::new(move |g| vec![(a, g.clone()), (b, g.clone())])),
        )
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let out = va.to_owned() - vb.view();
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(
            out,
            needs,
            Some(Box::new(move |g| {
                vec![(a, g.clone()), (b, g.mapv(|v| -v))]
            })),
        )
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let va = self.nodes[a.0].value.clone();
        let vb = self.nodes[b.0].value.clone();
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = va.to_owned() * vb.view();
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(
            out,
            needs,
            Some(Box::new(move |g| {
                vec![(a, g * &vb.view()), (b, g * &va.view())]
            })),
        )
    }

    pub fn scale(&mut self, a: TensorId, c: F) -> TensorId {
        let out = self.nodes[a.0].value.to_owned() * c;
        let needs = self.nodes[a.0].needs_grad;
        self.push(out, needs, Some(Box::new(move |g| vec![(a, g * c)])))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: F) -> TensorId {
        let out = self.nodes[a.0].value.mapv(|v| v + c);
        let needs = self.nodes[a.0].needs_grad;
        self.push(out, needs, Some(Box::new(move |g| vec![(a, g.clone())])))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let va = self.nodes[a.0].value.clone();
        let out = va.mapv(|v| v.max(F::zero()));
        let needs = self.nodes[a.0].needs_grad;
        self.push(
            out,
            needs,
            Some(Box::new(move |g| {
                let mask = va.mapv(|v| if v > F::zero() { F::one() } else { F::zero() });
                vec![(a, g * &mask.view())]
            })),
        )
    }

    pub fn leaky_relu(&mut self, a: TensorId, slope: F) -> TensorId {
        let va = self.nodes[a.0].value.clone();
        let out = va.mapv(|v| if v > F::zero() { v } else { v * slope });
        let needs = self.nodes[a.0].needs_grad;
        self.push(
            out,
            needs,
            Some(Box::new(move |g| {
                let mask = va.mapv(|v| if v > F::zero() { F::one() } else { slope });
                vec![(a, g * &mask.view())]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let out = self.nodes[a.0].value.mapv(sigmoid_scalar);
        let shared = out.clone().into_shared();
        let needs = self.nodes[a.0].needs_grad;
        self.push(
            out,
            needs,
            Some(Box::new(move |g| {
                let ds = shared.mapv(|s| s * (F::one() - s));
                vec![(a, g * &ds.view())]
            })),
        )
    }

    // ---- linear algebra ----

    /// `a [m,k] x b [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let va = self.nodes[a.0].value.clone();
        let vb = self.nodes[b.0].value.clone();
        let out = as2(&va.view()).dot(&as2(&vb.view()));
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |g| {
                let g2 = as2(&g.view());
                let ga = g2.dot(&as2(&vb.view()).t());
                let gb = as2(&va.view()).t().dot(&g2);
                vec![(a, ga.into_dyn()), (b, gb.into_dyn())]
            })),
        )
    }

    /// Bias add: `x [t,c] + v [c]` broadcast over rows.
    pub fn add_rowvec(&mut self, x: TensorId, v: TensorId) -> TensorId {
        let vx = self.nodes[x.0].value.clone();
        let vv = self.nodes[v.0].value.clone();
        let x2 = as2(&vx.view()).to_owned();
        let v1 = vv
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("1-d bias");
        assert_eq!(x2.ncols(), v1.len(), "bias length mismatch");
        let out = x2 + &v1;
        let needs = self.nodes[x.0].needs_grad || self.nodes[v.0].needs_grad;
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |g| {
                let g2 = as2(&g.view());
                let gv = g2.sum_axis(Axis(0));
                vec![(x, g.clone()), (v, gv.into_dyn())]
            })),
        )
    }

    /// `x [t,c] + col [t]` broadcast across columns (the mel-wide addition
    /// of the scalar energy sequence).
    pub fn add_colvec(&mut self, x: TensorId, col: TensorId) -> TensorId {
        let vx = self.nodes[x.0].value.clone();
        let vc = self.nodes[col.0].value.clone();
        let x2 = as2(&vx.view()).to_owned();
        let c1 = vc
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("1-d column");
        assert_eq!(x2.nrows(), c1.len(), "column length mismatch");
        let mut out = x2;
        for (mut row, &c) in out.rows_mut().into_iter().zip(c1.iter()) {
            row.mapv_inplace(|v| v + c);
        }
        let needs = self.nodes[x.0].needs_grad || self.nodes[col.0].needs_grad;
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |g| {
                let g2 = as2(&g.view());
                let gc = g2.sum_axis(Axis(1));
                vec![(x, g.clone()), (col, gc.into_dyn())]
            })),
        )
    }

    /// Elementwise multiply of `x [t,c]` by a constant per-row mask `[t]`.
    pub fn mul_colvec_const(&mut self, x: TensorId, col: Array1<F>) -> TensorId {
        let vx = self.nodes[x.0].value.clone();
        let x2 = as2(&vx.view()).to_owned();
        assert_eq!(x2.nrows(), col.len(), "mask length mismatch");
        let mut out = x2;
        for (mut row, &c) in out.rows_mut().into_iter().zip(col.iter()) {
            row.mapv_inplace(|v| v * c);
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |g| {
                let g2 = as2(&g.view());
                let mut gx = g2.to_owned();
                for (mut row, &c) in gx.rows_mut().into_iter().zip(col.iter()) {
                    row.mapv_inplace(|v| v * c);
                }
                vec![(x, gx.into_dyn())]
            })),
        )
    }

    /// Row sums of `x [t,c] -> [t]`.
    pub fn row_sum(&mut self, x: TensorId) -> TensorId {
        let vx = self.nodes[x.0].value.clone();
        let x2 = as2(&vx.view());
        let ncols = x2.ncols();
        let out = x2.sum_axis(Axis(1));
        let needs = self.nodes[x.0].needs_grad;
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |g| {
                let g1 = g
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .expect("1-d grad");
                let mut gx = Array2::zeros((g1.len(), ncols));
                for (mut row, &gv) in gx.rows_mut().into_iter().zip(g1.iter()) {
                    row.fill(gv);
                }
                vec![(x, gx.into_dyn())]
            })),
        )
    }

    /// `x [t,c] / d [t]` with per-row broadcast.
    pub fn div_colvec(&mut self, x: TensorId, d: TensorId) -> TensorId {
        let vx = self.nodes[x.0].value.clone();
        let vd = self.nodes[d.0].value.clone();
        let x2 = as2(&vx.view()).to_owned();
        let d1 = vd
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("1-d divisor");
        assert_eq!(x2.nrows(), d1.len());
        let mut out = x2;
        for (mut row, &dv) in out.rows_mut().into_iter().zip(d1.iter()) {
            row.mapv_inplace(|v| v / dv);
        }
        let needs = self.nodes[x.0].needs_grad || self.nodes[d.0].needs_grad;
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |g| {
                let g2 = as2(&g.view());
                let x2 = as2(&vx.view());
                let d1 = vd.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut gx = g2.to_owned();
                for (mut row, &dv) in gx.rows_mut().into_iter().zip(d1.iter()) {
                    row.mapv_inplace(|v| v / dv);
                }
                let mut gd = Array1::zeros(d1.len());
                for t in 0..d1.len() {
                    let mut acc = F::zero();
                    for c in 0..x2.ncols() {
                        acc += g2[[t, c]] * x2[[t, c]];
                    }
                    gd[t] = -acc / (d1[t] * d1[t]);
                }
                vec![(x, gx.into_dyn()), (d, gd.into_dyn())]
            })),
        )
    }

    /// Softmax over each row of `x [t,c]`.
    pub fn softmax_rows(&mut self, x: TensorId) -> TensorId {
        let vx = self.nodes[x.0].value.clone();
        let x2 = as2(&vx.view());
        let mut out = x2.to_owned();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: F = row.iter().copied().sum();
            row.mapv_inplace(|v| v / sum);
        }
        let shared = out.clone().into_shared();
        let needs = self.nodes[x.0].needs_grad;
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |g| {
                let g2 = as2(&g.view());
                let s2 = shared.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = Array2::zeros((g2.nrows(), g2.ncols()));
                for t in 0..g2.nrows() {
                    let mut dot = F::zero();
                    for c in 0..g2.ncols() {
                        dot += g2[[t, c]] * s2[[t, c]];
                    }
                    for c in 0..g2.ncols() {
                        gx[[t, c]] = s2[[t, c]] * (g2[[t, c]] - dot);
                    }
                }
                vec![(x, gx.into_dyn())]
            })),
        )
    }

    /// Per-row layer normalization of `x [t,c]` with learnable gain/bias.
    pub fn layer_norm_rows(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: F,
    ) -> TensorId {
        let vx = self.nodes[x.0].value.clone();
        let vgamma = self.nodes[gamma.0].value.clone();
        let x2 = as2(&vx.view());
        let g1 = vgamma
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("gamma 1-d");
        let beta1 = self.nodes[beta.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("beta 1-d")
            .to_owned();
        let (t, c) = (x2.nrows(), x2.ncols());
        let cf = F::cast_usize(c);
        let mut xhat = Array2::zeros((t, c));
        let mut inv_std = Array1::zeros(t);
        for i in 0..t {
            let row = x2.row(i);
            let mean = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cf;
            let istd = F::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                xhat[[i, j]] = (row[j] - mean) * istd;
            }
        }
        let mut out = Array2::zeros((t, c));
        for i in 0..t {
            for j in 0..c {
                out[[i, j]] = xhat[[i, j]] * g1[j] + beta1[j];
            }
        }
        let xhat_shared = xhat.into_shared();
        let needs = self.nodes[x.0].needs_grad
            || self.nodes[gamma.0].needs_grad
            || self.nodes[beta.0].needs_grad;
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |g| {
                let g2 = as2(&g.view());
                let gamma1 = vgamma.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let xh = &xhat_shared;
                let (t, c) = (g2.nrows(), g2.ncols());
                let cf = F::cast_usize(c);
                let mut ggamma = Array1::zeros(c);
                let mut gbeta = Array1::zeros(c);
                for i in 0..t {
                    for j in 0..c {
                        ggamma[j] += g2[[i, j]] * xh[[i, j]];
                        gbeta[j] += g2[[i, j]];
                    }
                }
                let mut gx = Array2::zeros((t, c));
                for i in 0..t {
                    let mut mean_gxh = F::zero();
                    let mut mean_gxh_xh = F::zero();
                    for j in 0..c {
                        let gxh = g2[[i, j]] * gamma1[j];
                        mean_gxh += gxh;
                        mean_gxh_xh += gxh * xh[[i, j]];
                    }
                    mean_gxh /= cf;
                    mean_gxh_xh /= cf;
                    for j in 0..c {
                        let gxh = g2[[i, j]] * gamma1[j];
                        gx[[i, j]] = (gxh - mean_gxh - xh[[i, j]] * mean_gxh_xh) * inv_std[i];
                    }
                }
                vec![
                    (x, gx.into_dyn()),
                    (gamma, ggamma.into_dyn()),
                    (beta, gbeta.into_dyn()),
                ]
            })),
        )
    }

    // ---- structural ----

    /// Concatenate `[t,c1]` and `[t,c2]` along columns.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let va = self.nodes[a.0].value.clone();
        let vb = self.nodes[b.0].value.clone();
        let a2 = as2(&va.view());
        let b2 = as2(&vb.view());
        assert_eq!(a2.nrows(), b2.nrows(), "concat row mismatch");
        let c1 = a2.ncols();
        let out = ndarray::concatenate(Axis(1), &[a2.view(), b2.view()]).expect("concat");
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |g| {
                let g2 = as2(&g.view());
                let ga = g2.slice(ndarray::s![.., ..c1]).to_owned();
                let gb = g2.slice(ndarray::s![.., c1..]).to_owned();
                vec![(a, ga.into_dyn()), (b, gb.into_dyn())]
            })),
        )
    }

    /// Columns `[start, start+len)` of `x [t,c]`.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> TensorId {
        let vx = self.nodes[x.0].value.clone();
        let x2 = as2(&vx.view());
        let total = x2.ncols();
        assert!(start + len <= total, "slice out of range");
        let out = x2.slice(ndarray::s![.., start..start + len]).to_owned();
        let needs = self.nodes[x.0].needs_grad;
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |g| {
                let g2 = as2(&g.view());
                let mut gx = Array2::zeros((g2.nrows(), total));
                gx.slice_mut(ndarray::s![.., start..start + len]).assign(&g2);
                vec![(x, gx.into_dyn())]
            })),
        )
    }

    /// Repeat a `[1,c]` row `t` times.
    pub fn broadcast_row(&mut self, v: TensorId, t: usize) -> TensorId {
        let vv = self.nodes[v.0].value.clone();
        let v2 = as2(&vv.view());
        assert_eq!(v2.nrows(), 1, "broadcast_row expects [1,c]");
        let c = v2.ncols();
        let mut out = Array2::zeros((t, c));
        for mut row in out.rows_mut() {
            row.assign(&v2.row(0));
        }
        let needs = self.nodes[v.0].needs_grad;
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |g| {
                let g2 = as2(&g.view());
                let gv = g2.sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![(v, gv.into_dyn())]
            })),
        )
    }

    /// Mean over rows: `[t,c] -> [1,c]`.
    pub fn mean_rows(&mut self, x: TensorId) -> TensorId {
        let vx = self.nodes[x.0].value.clone();
        let x2 = as2(&vx.view());
        let t = x2.nrows();
        let out = x2.mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0));
        let needs = self.nodes[x.0].needs_grad;
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |g| {
                let g2 = as2(&g.view());
                let scale = F::one() / F::cast_usize(t);
                let mut gx = Array2::zeros((t, g2.ncols()));
                for mut row in gx.rows_mut() {
                    row.assign(&g2.row(0));
                    row.mapv_inplace(|v| v * scale);
                }
                vec![(x, gx.into_dyn())]
            })),
        )
    }

    /// Embedding lookup: rows of `table [v,e]` selected by `idx`.
    pub fn gather_rows(&mut self, table: TensorId, idx: Vec<usize>) -> TensorId {
        let vt = self.nodes[table.0].value.clone();
        let t2 = as2(&vt.view());
        let (v, e) = (t2.nrows(), t2.ncols());
        for &i in &idx {
            assert!(i < v, "gather index {i} out of range {v}");
        }
        let mut out = Array2::zeros((idx.len(), e));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&t2.row(i));
        }
        let needs = self.nodes[table.0].needs_grad;
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |g| {
                let g2 = as2(&g.view());
                let mut gt = Array2::zeros((v, e));
                for (r, &i) in idx.iter().enumerate() {
                    let mut target = gt.row_mut(i);
                    target += &g2.row(r);
                }
                vec![(table, gt.into_dyn())]
            })),
        )
    }

    /// Nearest-neighbor resample of rows to `dst_len`.
    pub fn nearest_rows(&mut self, x: TensorId, dst_len: usize) -> TensorId {
        let vx = self.nodes[x.0].value.clone();
        let x2 = as2(&vx.view());
        let src_len = x2.nrows();
        assert!(src_len > 0 && dst_len > 0);
        let map: Vec<usize> = (0..dst_len)
            .map(|i| {
                let idx = ((i as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize;
                idx.min(src_len - 1)
            })
            .collect();
        let mut out = Array2::zeros((dst_len, x2.ncols()));
        for (r, &src) in map.iter().enumerate() {
            out.row_mut(r).assign(&x2.row(src));
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |g| {
                let g2 = as2(&g.view());
                let mut gx = Array2::zeros((src_len, g2.ncols()));
                for (r, &src) in map.iter().enumerate() {
                    let mut target = gx.row_mut(src);
                    target += &g2.row(r);
                }
                vec![(x, gx.into_dyn())]
            })),
        )
    }

    /// Flatten to 1-d.
    pub fn flatten(&mut self, x: TensorId) -> TensorId {
        let vx = self.nodes[x.0].value.clone();
        let shape: Vec<usize> = vx.shape().to_vec();
        let out = vx
            .to_owned()
            .into_shape_with_order(IxDyn(&[vx.len()]))
            .expect("flatten");
        let needs = self.nodes[x.0].needs_grad;
        self.push(
            out,
            needs,
            Some(Box::new(move |g| {
                let gx = g
                    .to_owned()
                    .into_shape_with_order(IxDyn(&shape))
                    .expect("unflatten");
                vec![(x, gx)]
            })),
        )
    }

    /// im2col for 1-d convolution over `x [t, c_in]`, kernel `k`, stride
    /// `s`, zero padding `p` on both time ends. Output
    /// `[t_out, c_in * k]` with column layout `tap * c_in + channel`.
    pub fn im2col1d(&mut self, x: TensorId, k: usize, stride: usize, pad: usize) -> TensorId {
        let vx = self.nodes[x.0].value.clone();
        let x2 = as2(&vx.view());
        let (t, c) = (x2.nrows(), x2.ncols());
        assert!(t + 2 * pad >= k, "input shorter than kernel");
        let t_out = (t + 2 * pad - k) / stride + 1;
        let mut out = Array2::zeros((t_out, c * k));
        for o in 0..t_out {
            for tap in 0..k {
                let src = (o * stride + tap) as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    let src = src as usize;
                    for ch in 0..c {
                        out[[o, tap * c + ch]] = x2[[src, ch]];
                    }
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |g| {
                let g2 = as2(&g.view());
                let mut gx = Array2::zeros((t, c));
                for o in 0..g2.nrows() {
                    for tap in 0..k {
                        let src = (o * stride + tap) as isize - pad as isize;
                        if src >= 0 && (src as usize) < t {
                            let src = src as usize;
                            for ch in 0..c {
                                gx[[src, ch]] += g2[[o, tap * c + ch]];
                            }
                        }
                    }
                }
                vec![(x, gx.into_dyn())]
            })),
        )
    }

    /// im2col for 2-d convolution over `x [c, h, w]`. Output
    /// `[h_out * w_out, c * kh * kw]`.
    #[allow(clippy::too_many_arguments)]
    pub fn im2col2d(
        &mut self,
        x: TensorId,
        kh: usize,
        kw: usize,
        sh: usize,
        sw: usize,
        ph: usize,
        pw: usize,
    ) -> TensorId {
        let vx = self.nodes[x.0].value.clone();
        let shape = vx.shape().to_vec();
        assert_eq!(shape.len(), 3, "im2col2d expects [c,h,w]");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let h_out = (h + 2 * ph - kh) / sh + 1;
        let w_out = (w + 2 * pw - kw) / sw + 1;
        let mut out = Array2::zeros((h_out * w_out, c * kh * kw));
        for oy in 0..h_out {
            for ox in 0..w_out {
                let row = oy * w_out + ox;
                for ch in 0..c {
                    for ty in 0..kh {
                        for tx in 0..kw {
                            let sy = (oy * sh + ty) as isize - ph as isize;
                            let sx = (ox * sw + tx) as isize - pw as isize;
                            if sy >= 0 && (sy as usize) < h && sx >= 0 && (sx as usize) < w {
                                out[[row, ch * kh * kw + ty * kw + tx]] =
                                    vx[[ch, sy as usize, sx as usize]];
                            }
                        }
                    }
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(
            out.into_dyn(),
            needs,
            Some(Box::new(move |g| {
                let g2 = as2(&g.view());
                let mut gx = ArrayD::zeros(IxDyn(&[c, h, w]));
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let row = oy * w_out + ox;
                        for ch in 0..c {
                            for ty in 0..kh {
                                for tx in 0..kw {
                                    let sy = (oy * sh + ty) as isize - ph as isize;
                                    let sx = (ox * sw + tx) as isize - pw as isize;
                                    if sy >= 0
                                        && (sy as usize) < h
                                        && sx >= 0
                                        && (sx as usize) < w
                                    {
                                        gx[[ch, sy as usize, sx as usize]] +=
                                            g2[[row, ch * kh * kw + ty * kw + tx]];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![(x, gx)]
            })),
        )
    }

    /// Reinterpret `[h*w, c]` as a `[c, h, w]` feature map.
    pub fn hw_to_chw(&mut self, x: TensorId, h: usize, w: usize) -> TensorId {
        let vx = self.nodes[x.0].value.clone();
        let x2 = as2(&vx.view());
        assert_eq!(x2.nrows(), h * w);
        let c = x2.ncols();
        let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
        for row in 0..h * w {
            for ch in 0..c {
                out[[ch, row / w, row % w]] = x2[[row, ch]];
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(
            out,
            needs,
            Some(Box::new(move |g| {
                let mut gx = Array2::zeros((h * w, c));
                for row in 0..h * w {
                    for ch in 0..c {
                        gx[[row, ch]] = g[[ch, row / w, row % w]];
                    }
                }
                vec![(x, gx.into_dyn())]
            })),
        )
    }

    // ---- reductions / losses ----

    /// Mean over all elements, shape `[1]`.
    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let vx = self.nodes[x.0].value.clone();
        let n = vx.len();
        let mean = vx.iter().copied().sum::<F>() / F::cast_usize(n);
        let shape = vx.shape().to_vec();
        let needs = self.nodes[x.0].needs_grad;
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), mean),
            needs,
            Some(Box::new(move |g| {
                let gv = g[[0]] / F::cast_usize(n);
                vec![(x, ArrayD::from_elem(IxDyn(&shape), gv))]
            })),
        )
    }

    /// Mean absolute deviation from a constant target.
    pub fn l1_to_const(&mut self, x: TensorId, target: ArrayD<F>) -> TensorId {
        let vx = self.nodes[x.0].value.clone();
        assert_eq!(vx.shape(), target.shape(), "l1 target shape");
        let n = F::cast_usize(vx.len());
        let loss = vx
            .iter()
            .zip(target.iter())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<F>()
            / n;
        let needs = self.nodes[x.0].needs_grad;
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), loss),
            needs,
            Some(Box::new(move |g| {
                let scale = g[[0]] / n;
                let mut gx = vx.to_owned();
                gx.zip_mut_with(&target, |a, &b| {
                    *a = if *a > b {
                        scale
                    } else if *a < b {
                        -scale
                    } else {
                        F::zero()
                    };
                });
                vec![(x, gx)]
            })),
        )
    }

    /// Mean squared deviation from a constant target.
    pub fn mse_to_const(&mut self, x: TensorId, target: ArrayD<F>) -> TensorId {
        let vx = self.nodes[x.0].value.clone();
        assert_eq!(vx.shape(), target.shape(), "mse target shape");
        let n = F::cast_usize(vx.len());
        let loss = vx
            .iter()
            .zip(target.iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<F>()
            / n;
        let needs = self.nodes[x.0].needs_grad;
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), loss),
            needs,
            Some(Box::new(move |g| {
                let scale = F::cast(2.0) * g[[0]] / n;
                let mut gx = vx.to_owned();
                gx.zip_mut_with(&target, |a, &b| *a = (*a - b) * scale);
                vec![(x, gx)]
            })),
        )
    }

    /// Mean squared difference between two tensors.
    pub fn mse_pair(&mut self, x: TensorId, y: TensorId) -> TensorId {
        let vx = self.nodes[x.0].value.clone();
        let vy = self.nodes[y.0].value.clone();
        assert_eq!(vx.shape(), vy.shape(), "mse pair shape");
        let n = F::cast_usize(vx.len());
        let loss = vx
            .iter()
            .zip(vy.iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<F>()
            / n;
        let needs = self.nodes[x.0].needs_grad || self.nodes[y.0].needs_grad;
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), loss),
            needs,
            Some(Box::new(move |g| {
                let scale = F::cast(2.0) * g[[0]] / n;
                let mut gx = vx.to_owned();
                gx.zip_mut_with(&vy, |a, &b| *a = (*a - b) * scale);
                let gy = gx.mapv(|v| -v);
                vec![(x, gx), (y, gy)]
            })),
        )
    }

    /// Mean binary cross entropy of logits against constant soft targets:
    /// `max(z,0) - z t + ln(1 + exp(-|z|))`, numerically stable.
    pub fn bce_logits_to_const(&mut self, logits: TensorId, targets: ArrayD<F>) -> TensorId {
        let vz = self.nodes[logits.0].value.clone();
        assert_eq!(vz.shape(), targets.shape(), "bce target shape");
        let n = F::cast_usize(vz.len());
        let loss = vz
            .iter()
            .zip(targets.iter())
            .map(|(&z, &t)| z.max(F::zero()) - z * t + (F::one() + (-z.abs()).exp()).ln())
            .sum::<F>()
            / n;
        let needs = self.nodes[logits.0].needs_grad;
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), loss),
            needs,
            Some(Box::new(move |g| {
                let scale = g[[0]] / n;
                let mut gz = vz.to_owned();
                gz.zip_mut_with(&targets, |z, &t| *z = (sigmoid_scalar(*z) - t) * scale);
                vec![(logits, gz)]
            })),
        )
    }

    /// Reverse pass from a scalar root. Gradients for parameter leaves stay
    /// in the result for extraction; intermediate gradients are freed as the
    /// walk passes them.
    pub fn backward(&self, root: TensorId) -> Grads<F> {
        let mut grads: Vec<Option<ArrayD<F>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        grads[root.0] = Some(ArrayD::from_elem(IxDyn(&root_shape), F::one()));
        for i in (0..=root.0).rev() {
            if self.nodes[i].back.is_none() {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let back = self.nodes[i].back.as_ref().unwrap();
            for (pid, pg) in back(&g) {
                if !self.nodes[pid.0].needs_grad {
                    continue;
                }
                match &mut grads[pid.0] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        Grads { by_node: grads }
    }
}

fn sigmoid_scalar<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// Convolution and linear-layer helpers shared by every network.
impl<F: Scalar> Graph<F> {
    /// Linear layer: `x [t,in] * w [in,out] + b [out]`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let xw = self.matmul(x, w);
        self.add_rowvec(xw, b)
    }

    /// 1-d convolution as im2col + matmul. Weight layout `[k*c_in, c_out]`
    /// matching `im2col1d` columns.
    pub fn conv1d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let cols = self.im2col1d(x, k, stride, pad);
        self.linear(cols, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Central finite difference of `f` with respect to one entry of `x`.
    fn numeric_grad(
        build: &dyn Fn(&mut Graph<f64>, TensorId) -> TensorId,
        x: &ArrayD<f64>,
        idx: &[usize],
    ) -> f64 {
        let h = 1e-6;
        let mut eval = |delta: f64| {
            let mut xp = x.clone();
            xp[IxDyn(idx)] += delta;
            let mut g = Graph::new();
            let xid = g.param(xp.into_shared());
            let out = build(&mut g, xid);
            g.value(out)[[0]]
        };
        (eval(h) - eval(-h)) / (2.0 * h)
    }

    fn analytic_grad(
        build: &dyn Fn(&mut Graph<f64>, TensorId) -> TensorId,
        x: &ArrayD<f64>,
        idx: &[usize],
    ) -> f64 {
        let mut g = Graph::new();
        let xid = g.param(x.clone().into_shared());
        let out = build(&mut g, xid);
        let grads = g.backward(out);
        grads.get(xid).unwrap()[IxDyn(idx)]
    }

    fn check_op(build: &dyn Fn(&mut Graph<f64>, TensorId) -> TensorId, x: ArrayD<f64>) {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..4 {
            let idx: Vec<usize> = x.shape().iter().map(|&d| rng.random_range(0..d)).collect();
            let num = numeric_grad(build, &x, &idx);
            let ana = analytic_grad(build, &x, &idx);
            let denom = num.abs().max(ana.abs()).max(1e-8);
            assert!(
                (num - ana).abs() / denom < 1e-5,
                "grad mismatch at {idx:?}: numeric {num}, analytic {ana}"
            );
        }
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> ArrayD<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_grads_match_finite_differences() {
        let w = random_matrix(4, 3, 1);
        let build = move |g: &mut Graph<f64>, x: TensorId| {
            let wid = g.input(w.clone());
            let y = g.matmul(x, wid);
            let y = g.relu(y);
            g.mean_all(y)
        };
        check_op(&build, random_matrix(5, 4, 2));
    }

    #[test]
    fn elementwise_grads_match() {
        let build = |g: &mut Graph<f64>, x: TensorId| {
            let s = g.sigmoid(x);
            let l = g.leaky_relu(s, 0.2);
            let sc = g.scale(l, 1.7);
            let sum = g.add(sc, x);
            g.mean_all(sum)
        };
        check_op(&build, random_matrix(3, 4, 4));
    }

    #[test]
    fn bias_and_column_ops_match() {
        let bias = arr1(&[0.3, -0.9, 0.1]).into_dyn();
        let build = move |g: &mut Graph<f64>, x: TensorId| {
            let b = g.input(bias.clone());
            let y = g.add_rowvec(x, b);
            let rs = g.row_sum(y);
            let z = g.div_colvec(y, rs);
            g.mean_all(z)
        };
        let mut x = random_matrix(4, 3, 5);
        x.mapv_inplace(|v| v + 2.0); // keep row sums away from zero
        check_op(&build, x);
    }

    #[test]
    fn div_colvec_divisor_grad_matches() {
        let numer = random_matrix(4, 3, 11).mapv(|v| v + 3.0);
        let build = move |g: &mut Graph<f64>, d2: TensorId| {
            let x = g.input(numer.clone());
            let d = g.flatten(d2);
            let z = g.div_colvec(x, d);
            g.mean_all(z)
        };
        let d = random_matrix(4, 1, 12).mapv(|v| v + 2.5);
        check_op(&build, d);
    }

    #[test]
    fn layer_norm_grads_match() {
        let gamma = arr1(&[1.1, 0.9, 1.3, 0.7]).into_dyn();
        let beta = arr1(&[0.1, -0.2, 0.05, 0.3]).into_dyn();
        let build = move |g: &mut Graph<f64>, x: TensorId| {
            let ga = g.input(gamma.clone());
            let be = g.input(beta.clone());
            let y = g.layer_norm_rows(x, ga, be, 1e-5);
            g.mean_all(y)
        };
        check_op(&build, random_matrix(3, 4, 6));

        let x = random_matrix(3, 4, 7);
        let build_gamma = move |g: &mut Graph<f64>, gamma: TensorId| {
            let xin = g.input(x.clone());
            let gflat = g.flatten(gamma);
            let be = g.input(ArrayD::zeros(IxDyn(&[4])));
            let y = g.layer_norm_rows(xin, gflat, be, 1e-5);
            let sq = g.mul(y, y);
            g.mean_all(sq)
        };
        check_op(&build_gamma, random_matrix(1, 4, 8));
    }

    #[test]
    fn softmax_grads_match() {
        let build = |g: &mut Graph<f64>, x: TensorId| {
            let s = g.softmax_rows(x);
            let sq = g.mul(s, s);
            g.mean_all(sq)
        };
        check_op(&build, random_matrix(3, 5, 9));
    }

    #[test]
    fn conv1d_grads_match_for_input_and_weight() {
        let w = random_matrix(3 * 2, 4, 10); // k=3, c_in=2, c_out=4
        let b = ArrayD::zeros(IxDyn(&[4]));
        let build = move |g: &mut Graph<f64>, x: TensorId| {
            let wid = g.input(w.clone());
            let bid = g.input(b.clone());
            let y = g.conv1d(x, wid, bid, 3, 1, 1);
            let y = g.relu(y);
            g.mean_all(y)
        };
        check_op(&build, random_matrix(6, 2, 11));

        let x = random_matrix(6, 2, 12);
        let build_w = move |g: &mut Graph<f64>, w: TensorId| {
            let xid = g.input(x.clone());
            let bid = g.input(ArrayD::zeros(IxDyn(&[4])));
            let y = g.conv1d(xid, w, bid, 3, 1, 1);
            let sq = g.mul(y, y);
            g.mean_all(sq)
        };
        check_op(&build_w, random_matrix(6, 4, 13));
    }

    #[test]
    fn strided_conv_and_gather_match() {
        let build = |g: &mut Graph<f64>, x: TensorId| {
            let cols = g.im2col1d(x, 4, 2, 0);
            let sq = g.mul(cols, cols);
            g.mean_all(sq)
        };
        check_op(&build, random_matrix(10, 3, 14));

        let build_gather = |g: &mut Graph<f64>, table: TensorId| {
            let rows = g.gather_rows(table, vec![0, 2, 2, 1]);
            let sq = g.mul(rows, rows);
            g.mean_all(sq)
        };
        check_op(&build_gather, random_matrix(3, 4, 15));
    }

    #[test]
    fn interpolation_concat_broadcast_match() {
        let build = |g: &mut Graph<f64>, x: TensorId| {
            let up = g.nearest_rows(x, 7);
            let down = g.nearest_rows(up, 3);
            let sq = g.mul(down, down);
            g.mean_all(sq)
        };
        check_op(&build, random_matrix(4, 2, 16));

        let other = random_matrix(4, 3, 17);
        let build_concat = move |g: &mut Graph<f64>, x: TensorId| {
            let o = g.input(other.clone());
            let c = g.concat_cols(x, o);
            let sl = g.slice_cols(c, 1, 3);
            let sq = g.mul(sl, sl);
            g.mean_all(sq)
        };
        check_op(&build_concat, random_matrix(4, 2, 18));

        let build_bcast = |g: &mut Graph<f64>, v: TensorId| {
            let rows = g.broadcast_row(v, 5);
            let sq = g.mul(rows, rows);
            g.mean_all(sq)
        };
        check_op(&build_bcast, random_matrix(1, 3, 19));

        let build_pool = |g: &mut Graph<f64>, x: TensorId| {
            let pooled = g.mean_rows(x);
            let sq = g.mul(pooled, pooled);
            g.mean_all(sq)
        };
        check_op(&build_pool, random_matrix(6, 3, 27));
    }

    #[test]
    fn conv2d_path_matches() {
        let build = |g: &mut Graph<f64>, x2: TensorId| {
            // treat [h*w, 1] input as [1, h, w]
            let h = 5;
            let w = 4;
            let chw = g.hw_to_chw(x2, h, w);
            let cols = g.im2col2d(chw, 3, 3, 2, 2, 1, 1);
            let sq = g.mul(cols, cols);
            g.mean_all(sq)
        };
        check_op(&build, random_matrix(20, 1, 20));
    }

    #[test]
    fn loss_grads_match() {
        let target = random_matrix(3, 4, 21);
        let t2 = target.clone();
        let build_l1 = move |g: &mut Graph<f64>, x: TensorId| g.l1_to_const(x, t2.clone());
        check_op(&build_l1, random_matrix(3, 4, 22));

        let t3 = target.clone();
        let build_mse = move |g: &mut Graph<f64>, x: TensorId| g.mse_to_const(x, t3.clone());
        check_op(&build_mse, random_matrix(3, 4, 23));

        let soft = target.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let build_bce =
            move |g: &mut Graph<f64>, x: TensorId| g.bce_logits_to_const(x, soft.clone());
        check_op(&build_bce, random_matrix(3, 4, 24));

        let y = random_matrix(3, 4, 25);
        let build_pair = move |g: &mut Graph<f64>, x: TensorId| {
            let yid = g.input(y.clone());
            g.mse_pair(x, yid)
        };
        check_op(&build_pair, random_matrix(3, 4, 26));
    }

    #[test]
    fn grads_accumulate_when_a_node_is_reused() {
        let mut g = Graph::new();
        let x = g.param(arr2(&[[2.0f64]]).into_dyn().into_shared());
        let y = g.mul(x, x); // x^2
        let z = g.add(y, x); // x^2 + x -> dz/dx = 2x + 1 = 5
        let loss = g.mean_all(z);
        let grads = g.backward(loss);
        assert!((grads.get(x).unwrap()[[0, 0]] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let mut g = Graph::new();
        let x = g.param(arr2(&[[3.0f64]]).into_dyn().into_shared());
        let d = g.detach(x);
        let y = g.mul(d, d);
        let loss = g.mean_all(y);
        let grads = g.backward(loss);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn constant_subgraphs_carry_no_backward() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.input(arr2(&[[1.0, 2.0]]).into_dyn());
        let b = g.input(arr2(&[[3.0, 4.0]]).into_dyn());
        let c = g.add(a, b);
        assert!(!g.needs_grad(c));
    }
}
