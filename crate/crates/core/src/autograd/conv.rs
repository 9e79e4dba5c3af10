//! 2-D convolution as im2col + GEMM, plus the two adjoint ops that make it
//! closed under differentiation: the data adjoint (a transposed
//! convolution) and the weight adjoint.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, IxDyn};
use rayon::prelude::*;

use super::{Backward, Tensor, Var};

/// Square-kernel geometry shared by a convolution and its adjoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry { kernel, stride, padding }
    }

    pub fn output_len(&self, input: usize) -> usize {
        let span = input + 2 * self.padding;
        assert!(
            span >= self.kernel,
            "convolution input {input} too small for kernel {} with padding {}",
            self.kernel,
            self.padding
        );
        (span - self.kernel) / self.stride + 1
    }
}

struct Dims {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    ho: usize,
    wo: usize,
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], ci: usize, h: usize, w: usize, g: ConvGeometry, ho: usize, wo: usize, cols: &mut [f64]) {
    let k = g.kernel;
    let hw_out = ho * wo;
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], ci: usize, h: usize, w: usize, g: ConvGeometry, ho: usize, wo: usize, x: &mut [f64]) {
    let k = g.kernel;
    let hw_out = ho * wo;
    x.fill(0.0);
    for c in 0..ci {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn slice(t: &Tensor) -> &[f64] {
    t.as_slice().expect("tensor not in standard layout")
}

/// `y = conv(x, w)`; x `[N,Ci,H,W]`, w `[Co,Ci,k,k]` -> `[N,Co,Ho,Wo]`.
fn conv_forward(x: &Tensor, w: &Tensor, g: ConvGeometry) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = w.shape()[0];
    assert_eq!(w.shape(), &[co, ci, g.kernel, g.kernel], "conv2d weight shape");
    let (ho, wo) = (g.output_len(h), g.output_len(wd));
    let kk = ci * g.kernel * g.kernel;
    let wm = ArrayView2::from_shape((co, kk), slice(w)).unwrap();
    let xs = slice(x);
    let mut out = vec![0.0; n * co * ho * wo];
    out.par_chunks_mut(co * ho * wo).enumerate().for_each(|(i, o)| {
        let mut cols = vec![0.0; kk * ho * wo];
        im2col(&xs[i * ci * h * wd..(i + 1) * ci * h * wd], ci, h, wd, g, ho, wo, &mut cols);
        let cm = ArrayView2::from_shape((kk, ho * wo), &cols).unwrap();
        let mut om = ArrayViewMut2::from_shape((co, ho * wo), o).unwrap();
        general_mat_mul(1.0, &wm, &cm, 0.0, &mut om);
    });
    ArrayD::from_shape_vec(IxDyn(&[n, co, ho, wo]), out).unwrap()
}

/// Adjoint of [`conv_forward`] in `x`: gy `[N,Co,Ho,Wo]` -> `[N,Ci,H,W]`.
fn conv_data_adjoint(gy: &Tensor, w: &Tensor, g: ConvGeometry, h: usize, wd: usize) -> Tensor {
    let (n, co, ho, wo) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
    let ci = w.shape()[1];
    assert_eq!(w.shape()[0], co, "transposed conv weight shape");
    assert_eq!((g.output_len(h), g.output_len(wd)), (ho, wo), "transposed conv output size");
    let kk = ci * g.kernel * g.kernel;
    let wm = ArrayView2::from_shape((co, kk), slice(w)).unwrap();
    let wt = wm.t();
    let gs = slice(gy);
    let mut out = vec![0.0; n * ci * h * wd];
    out.par_chunks_mut(ci * h * wd).enumerate().for_each(|(i, o)| {
        let gm = ArrayView2::from_shape((co, ho * wo), &gs[i * co * ho * wo..(i + 1) * co * ho * wo]).unwrap();
        let mut cols = vec![0.0; kk * ho * wo];
        {
            let mut cm = ArrayViewMut2::from_shape((kk, ho * wo), &mut cols).unwrap();
            general_mat_mul(1.0, &wt, &gm, 0.0, &mut cm);
        }
        col2im(&cols, ci, h, wd, g, ho, wo, o);
    });
    ArrayD::from_shape_vec(IxDyn(&[n, ci, h, wd]), out).unwrap()
}

/// Adjoint of [`conv_forward`] in `w`: sum over the batch of gy ⊗ cols(x).
fn conv_weight_adjoint(x: &Tensor, gy: &Tensor, g: ConvGeometry) -> Tensor {
    let d = Dims {
        n: x.shape()[0],
        ci: x.shape()[1],
        h: x.shape()[2],
        w: x.shape()[3],
        co: gy.shape()[1],
        ho: gy.shape()[2],
        wo: gy.shape()[3],
    };
    assert_eq!(gy.shape()[0], d.n);
    let kk = d.ci * g.kernel * g.kernel;
    let xs = slice(x);
    let gs = slice(gy);
    let partials: Vec<Vec<f64>> = (0..d.n)
        .into_par_iter()
        .map(|i| {
            let mut cols = vec![0.0; kk * d.ho * d.wo];
            im2col(&xs[i * d.ci * d.h * d.w..(i + 1) * d.ci * d.h * d.w], d.ci, d.h, d.w, g, d.ho, d.wo, &mut cols);
            let cm = ArrayView2::from_shape((kk, d.ho * d.wo), &cols).unwrap();
            let gm = ArrayView2::from_shape(
                (d.co, d.ho * d.wo),
                &gs[i * d.co * d.ho * d.wo..(i + 1) * d.co * d.ho * d.wo],
            )
            .unwrap();
            let mut acc = vec![0.0; d.co * kk];
            let mut am = ArrayViewMut2::from_shape((d.co, kk), &mut acc).unwrap();
            general_mat_mul(1.0, &gm, &cm.t(), 0.0, &mut am);
            acc
        })
        .collect();
    // fixed-order reduction keeps results independent of thread scheduling
    let mut total = vec![0.0; d.co * kk];
    for p in &partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[d.co, d.ci, g.kernel, g.kernel]), total).unwrap()
}

struct Conv2d(ConvGeometry);
impl Backward for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, inputs: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        let (h, wd) = (x.shape()[2], x.shape()[3]);
        vec![
            Some(Var::conv2d_data_adjoint(g, w, self.0, h, wd)),
            Some(Var::conv2d_weight_adjoint(x, g, self.0)),
        ]
    }
}

struct ConvDataAdjoint(ConvGeometry);
impl Backward for ConvDataAdjoint {
    fn name(&self) -> &'static str {
        "conv2d_data_adjoint"
    }
    fn backward(&self, inputs: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        let (gy, w) = (&inputs[0], &inputs[1]);
        vec![
            Some(g.conv2d(w, self.0)),
            Some(Var::conv2d_weight_adjoint(g, gy, self.0)),
        ]
    }
}

struct ConvWeightAdjoint(ConvGeometry);
impl Backward for ConvWeightAdjoint {
    fn name(&self) -> &'static str {
        "conv2d_weight_adjoint"
    }
    fn backward(&self, inputs: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        let (x, gy) = (&inputs[0], &inputs[1]);
        let (h, wd) = (x.shape()[2], x.shape()[3]);
        vec![
            Some(Var::conv2d_data_adjoint(gy, g, self.0, h, wd)),
            Some(x.conv2d(g, self.0)),
        ]
    }
}

impl Var {
    /// Cross-correlation without bias. x `[N,Ci,H,W]`, w `[Co,Ci,k,k]`.
    pub fn conv2d(&self, w: &Var, g: ConvGeometry) -> Var {
        let v = conv_forward(self.value(), w.value(), g);
        Var::from_op(v, vec![self.clone(), w.clone()], Conv2d(g))
    }

    /// Transposed convolution: the adjoint of [`Var::conv2d`] w.r.t. its
    /// input, producing an `(h, w)` map. `w` is `[C_in_of_self, C_out, k, k]`.
    pub fn conv2d_data_adjoint(gy: &Var, w: &Var, g: ConvGeometry, h: usize, wd: usize) -> Var {
        let v = conv_data_adjoint(gy.value(), w.value(), g, h, wd);
        Var::from_op(v, vec![gy.clone(), w.clone()], ConvDataAdjoint(g))
    }

    pub fn conv2d_weight_adjoint(x: &Var, gy: &Var, g: ConvGeometry) -> Var {
        let v = conv_weight_adjoint(x.value(), gy.value(), g);
        Var::from_op(v, vec![x.clone(), gy.clone()], ConvWeightAdjoint(g))
    }
}
