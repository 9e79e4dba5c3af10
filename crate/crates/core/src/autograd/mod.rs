//! A small reverse-mode automatic differentiation engine over `f64` tensors.
//!
//! Gradients are themselves graph values: when [`grad`] is called with
//! `create_graph = true` the backward pass is recorded, so the resulting
//! gradients can be differentiated again. The critic's gradient penalty
//! depends on this. Every op that can appear inside the critic has a
//! backward rule built from recorded ops; ops that only appear inside the
//! generator (warping, sigmoid) are first-order only and refuse to run
//! under `create_graph`.

mod conv;
mod linear;
mod ops;
mod warp;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

pub use conv::ConvGeometry;
pub use linear::{bilinear_matrix, resize_map, Separable};
pub use ops::max_abs_diff;
pub use warp::{warp_tensor, WarpGrad};

/// Dense `f64` tensor, always kept in standard (row-major) layout.
pub type Tensor = ArrayD<f64>;

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Restores the previous grad-recording state on drop.
pub struct GradModeGuard {
    prev: bool,
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

fn set_grad_enabled(enabled: bool) -> GradModeGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    GradModeGuard { prev }
}

/// Disables graph recording on this thread until the guard drops.
pub fn no_grad() -> GradModeGuard {
    set_grad_enabled(false)
}

pub(crate) trait Backward: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradient of the loss w.r.t. each input, given the gradient w.r.t. the
    /// output. `None` means "no contribution".
    fn backward(&self, inputs: &[Var], output: &Var, grad: &Var) -> Vec<Option<Var>>;
}

struct GradFn {
    op: Box<dyn Backward>,
    inputs: Vec<Var>,
}

struct Node {
    id: usize,
    value: Tensor,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

/// A node in the computation graph. Cheap to clone.
#[derive(Clone)]
pub struct Var(Arc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.op.name()))
            .finish()
    }
}

impl Var {
    fn leaf(value: Tensor, requires_grad: bool) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        Var(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            grad_fn: None,
        }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Tensor) -> Var {
        Var::leaf(value, false)
    }

    /// A trainable leaf.
    pub fn param(value: Tensor) -> Var {
        Var::leaf(value, true)
    }

    pub fn scalar(v: f64) -> Var {
        Var::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub(crate) fn from_op(value: Tensor, inputs: Vec<Var>, op: impl Backward + 'static) -> Var {
        let requires_grad = grad_enabled() && inputs.iter().any(Var::requires_grad);
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        Var(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            grad_fn: requires_grad.then(|| GradFn {
                op: Box::new(op),
                inputs,
            }),
        }))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    /// Value of a 0-d (or single element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.0.value.len(), 1, "item() on a tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().unwrap()
    }

    pub fn ptr_eq(&self, other: &Var) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

/// Panics when a first-order-only op is asked for a recorded backward pass.
pub(crate) fn require_first_order(op: &str) {
    assert!(
        !grad_enabled(),
        "{op} has no second-order backward; it must not sit between an input and a create_graph gradient"
    );
}

fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // (node, children pushed?)
    let mut stack = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !v.requires_grad() || !visited.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        if let Some(gf) = &v.0.grad_fn {
            for inp in &gf.inputs {
                if inp.requires_grad() && !visited.contains(&inp.id()) {
                    stack.push((inp.clone(), false));
                }
            }
        }
    }
    order
}

/// Gradients of `output` (seeded with ones) w.r.t. each of `wrt`.
///
/// Inputs that `output` does not depend on get a zero gradient. With
/// `create_graph` the returned gradients are differentiable.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
    let _mode = set_grad_enabled(create_graph);
    let keep: HashSet<usize> = wrt.iter().map(|v| v.id()).collect();
    let mut grads: HashMap<usize, Var> = HashMap::new();
    let mut kept: HashMap<usize, Var> = HashMap::new();

    if output.requires_grad() {
        grads.insert(output.id(), Var::constant(ArrayD::ones(output.value().raw_dim())));
        for node in topo_order(output).into_iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            if keep.contains(&node.id()) {
                kept.insert(node.id(), g.clone());
            }
            let Some(gf) = &node.0.grad_fn else {
                continue;
            };
            let input_grads = gf.op.backward(&gf.inputs, &node, &g);
            debug_assert_eq!(input_grads.len(), gf.inputs.len(), "{}", gf.op.name());
            for (inp, ig) in gf.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !inp.requires_grad() {
                    continue;
                }
                debug_assert_eq!(ig.shape(), inp.shape(), "grad shape from {}", gf.op.name());
                let acc = match grads.remove(&inp.id()) {
                    Some(prev) => prev.add(&ig),
                    None => ig,
                };
                grads.insert(inp.id(), acc);
            }
        }
    }

    wrt.iter()
        .map(|v| {
            kept.remove(&v.id())
                .unwrap_or_else(|| Var::constant(ArrayD::zeros(v.value().raw_dim())))
        })
        .collect()
}

/// First-order gradients as plain tensors.
pub fn backward(output: &Var, wrt: &[&Var]) -> Vec<Tensor> {
    grad(output, wrt, false)
        .into_iter()
        .map(|g| g.value().clone())
        .collect()
}
