//! Backward warping: bilinear sampling of an image at `p + F(p)`, with
//! out-of-frame sample positions clamped to the border.

use ndarray::{ArrayD, IxDyn};

use super::{require_first_order, Backward, Tensor, Var};

/// Sample position along one axis: base index, upper index and weight.
#[inline]
fn axis_sample(pos: f64, len: usize) -> (usize, usize, f64, bool) {
    let max = (len - 1) as f64;
    let inside = (0.0..=max).contains(&pos);
    let p = pos.clamp(0.0, max);
    if len == 1 {
        return (0, 0, 0.0, inside);
    }
    let i0 = (p.floor() as usize).min(len - 2);
    (i0, i0 + 1, p - i0 as f64, inside)
}

/// Warps `img` `[N,C,H,W]` by `flow` `[N,2,H,W]` (channel 0 = dx, 1 = dy).
pub fn warp_tensor(img: &Tensor, flow: &Tensor) -> Tensor {
    let (n, c, h, w) = dims(img);
    check_flow(img, flow);
    let xs = img.as_slice().unwrap();
    let fs = flow.as_slice().unwrap();
    let mut out = vec![0.0; n * c * h * w];
    for b in 0..n {
        let fx = &fs[(b * 2) * h * w..(b * 2 + 1) * h * w];
        let fy = &fs[(b * 2 + 1) * h * w..(b * 2 + 2) * h * w];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (x0, x1, tx, _) = axis_sample(x as f64 + fx[p], w);
                let (y0, y1, ty, _) = axis_sample(y as f64 + fy[p], h);
                for ch in 0..c {
                    let plane = &xs[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                    let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                    out[(b * c + ch) * h * w + p] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap()
}

/// Gradients of `sum(grad_out ⊙ warp(img, flow))` w.r.t. image and flow.
pub struct WarpGrad {
    pub image: Tensor,
    pub flow: Tensor,
}

impl WarpGrad {
    pub fn compute(img: &Tensor, flow: &Tensor, grad_out: &Tensor) -> WarpGrad {
        let (n, c, h, w) = dims(img);
        check_flow(img, flow);
        let xs = img.as_slice().unwrap();
        let fs = flow.as_slice().unwrap();
        let gs = grad_out.as_slice().expect("standard layout");
        let mut gi = vec![0.0; n * c * h * w];
        let mut gf = vec![0.0; n * 2 * h * w];
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let fxi = (b * 2) * h * w + p;
                    let fyi = (b * 2 + 1) * h * w + p;
                    let (x0, x1, tx, in_x) = axis_sample(x as f64 + fs[fxi], w);
                    let (y0, y1, ty, in_y) = axis_sample(y as f64 + fs[fyi], h);
                    let (mut dx, mut dy) = (0.0, 0.0);
                    for ch in 0..c {
                        let base = (b * c + ch) * h * w;
                        let g = gs[base + p];
                        let plane = &xs[base..base + h * w];
                        let (v00, v01) = (plane[y0 * w + x0], plane[y0 * w + x1]);
                        let (v10, v11) = (plane[y1 * w + x0], plane[y1 * w + x1]);
                        let gplane = &mut gi[base..base + h * w];
                        gplane[y0 * w + x0] += g * (1.0 - tx) * (1.0 - ty);
                        gplane[y0 * w + x1] += g * tx * (1.0 - ty);
                        gplane[y1 * w + x0] += g * (1.0 - tx) * ty;
                        gplane[y1 * w + x1] += g * tx * ty;
                        dx += g * ((v01 - v00) * (1.0 - ty) + (v11 - v10) * ty);
                        dy += g * ((v10 - v00) * (1.0 - tx) + (v11 - v01) * tx);
                    }
                    // clamped coordinates do not move with the flow
                    if in_x && w > 1 {
                        gf[fxi] = dx;
                    }
                    if in_y && h > 1 {
                        gf[fyi] = dy;
                    }
                }
            }
        }
        WarpGrad {
            image: ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), gi).unwrap(),
            flow: ArrayD::from_shape_vec(IxDyn(&[n, 2, h, w]), gf).unwrap(),
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize, usize, usize) {
    assert_eq!(t.ndim(), 4, "warp expects [N,C,H,W]");
    (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3])
}

fn check_flow(img: &Tensor, flow: &Tensor) {
    let (n, _, h, w) = dims(img);
    assert_eq!(flow.shape(), &[n, 2, h, w], "flow shape must match the warped frame");
}

struct Warp;
impl Backward for Warp {
    fn name(&self) -> &'static str {
        "warp"
    }
    fn backward(&self, inputs: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        require_first_order("warp");
        let grads = WarpGrad::compute(inputs[0].value(), inputs[1].value(), g.value());
        vec![Some(Var::constant(grads.image)), Some(Var::constant(grads.flow))]
    }
}

impl Var {
    /// Backward warp of `self` `[N,C,H,W]` by `flow` `[N,2,H,W]`.
    pub fn warp(&self, flow: &Var) -> Var {
        let v = warp_tensor(self.value(), flow.value());
        Var::from_op(v, vec![self.clone(), flow.clone()], Warp)
    }
}
