use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewMut2, Ix2, IxDyn};

use super::{Backward, Tensor, Var};

/// A pair of fixed matrices applied on both spatial axes of every plane:
/// `out = rows · plane · colsᵀ`. Resampling, reflective padding, blurring
/// and decimation are all of this form.
#[derive(Clone)]
pub struct Separable {
    pub rows: Arc<Array2<f64>>,
    pub cols: Arc<Array2<f64>>,
}

impl Separable {
    pub fn new(rows: Array2<f64>, cols: Array2<f64>) -> Self {
        Separable {
            rows: Arc::new(rows.as_standard_layout().into_owned()),
            cols: Arc::new(cols.as_standard_layout().into_owned()),
        }
    }

    pub fn transpose(&self) -> Self {
        Separable::new(self.rows.t().to_owned(), self.cols.t().to_owned())
    }

    /// Composition: `self` applied after `inner`.
    pub fn then_after(&self, inner: &Separable) -> Separable {
        Separable::new(self.rows.dot(&*inner.rows), self.cols.dot(&*inner.cols))
    }

    pub fn output_hw(&self) -> (usize, usize) {
        (self.rows.nrows(), self.cols.nrows())
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let shape = x.shape();
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        assert_eq!(self.rows.ncols(), h, "separable map: height mismatch");
        assert_eq!(self.cols.ncols(), w, "separable map: width mismatch");
        let (ho, wo) = self.output_hw();
        let planes = x.len() / (h * w);
        let xs = x.as_slice().expect("standard layout");
        let mut out = vec![0.0; planes * ho * wo];
        let mut tmp = Array2::<f64>::zeros((ho, w));
        let ct = self.cols.t();
        for p in 0..planes {
            let plane = ArrayView2::from_shape((h, w), &xs[p * h * w..(p + 1) * h * w]).unwrap();
            general_mat_mul(1.0, &*self.rows, &plane, 0.0, &mut tmp);
            let mut om = ArrayViewMut2::from_shape((ho, wo), &mut out[p * ho * wo..(p + 1) * ho * wo]).unwrap();
            general_mat_mul(1.0, &tmp, &ct, 0.0, &mut om);
        }
        let mut oshape = shape.to_vec();
        let nd = oshape.len();
        oshape[nd - 2] = ho;
        oshape[nd - 1] = wo;
        ArrayD::from_shape_vec(IxDyn(&oshape), out).unwrap()
    }
}

struct SepLinear(Separable);
impl Backward for SepLinear {
    fn name(&self) -> &'static str {
        "separable"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.separable(&self.0.transpose()))]
    }
}

struct MatMul;
impl Backward for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, inputs: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        vec![Some(g.matmul(&b.transpose2())), Some(a.transpose2().matmul(g))]
    }
}

struct Transpose2;
impl Backward for Transpose2 {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.transpose2())]
    }
}

fn as2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("expected a matrix")
}

impl Var {
    /// Applies a fixed separable linear map to the last two axes.
    pub fn separable(&self, map: &Separable) -> Var {
        let v = map.apply(self.value());
        Var::from_op(v, vec![self.clone()], SepLinear(map.clone()))
    }

    pub fn matmul(&self, other: &Var) -> Var {
        let v = as2(self.value()).dot(&as2(other.value())).into_dyn();
        Var::from_op(v, vec![self.clone(), other.clone()], MatMul)
    }

    pub fn transpose2(&self) -> Var {
        let v = as2(self.value()).t().as_standard_layout().into_owned().into_dyn();
        Var::from_op(v, vec![self.clone()], Transpose2)
    }
}

/// 1-D bilinear resampling matrix (half-pixel centres, edge clamped),
/// the convention of common deep-learning `interpolate` routines.
pub fn bilinear_matrix(out_len: usize, in_len: usize) -> Array2<f64> {
    let mut m = Array2::zeros((out_len, in_len));
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let t = src - i0 as f64;
        m[[o, i0]] += 1.0 - t;
        m[[o, i1]] += t;
    }
    m
}

/// Bilinear resize of `[.., H, W]` to `(ho, wo)`.
pub fn resize_map(h: usize, w: usize, ho: usize, wo: usize) -> Separable {
    Separable::new(bilinear_matrix(ho, h), bilinear_matrix(wo, w))
}
