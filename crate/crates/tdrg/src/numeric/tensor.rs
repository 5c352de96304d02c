//! Dense row-major f64 tensor with reverse-mode gradient recording.
//!
//! A `Tensor` is a cheap handle (`Rc`) onto a node of a define-by-run tape.
//! Operations in `ops.rs` record their parents and a backward closure when
//! gradients are enabled and some input requires them; `backward` replays
//! the tape in reverse topological order. Parameters are leaf tensors with
//! `requires_grad = true`; their data may be mutated in place between steps
//! (SGD updates, finite-difference nudges), which is safe because each step
//! rebuilds the tape.

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TdrgError};

static NEXT_SEQ: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled on this thread. Forward results
/// computed inside are detached leaves.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward closure: given the output gradient, the parent handles, the
/// node's own forward data and a per-parent "gradient needed" mask, return
/// one optional gradient buffer per parent.
pub(crate) type BackwardFn =
    Box<dyn Fn(&[f64], &[Tensor], &[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct OpRecord {
    pub parents: Vec<Tensor>,
    pub backward: BackwardFn,
}

pub(crate) struct TensorInner {
    /// Construction sequence number; orders tape nodes for diagnostics.
    pub seq: u64,
    /// Op label or parameter name, used in non-finite diagnostics.
    pub label: RefCell<String>,
    pub shape: Vec<usize>,
    pub data: RefCell<Vec<f64>>,
    pub requires_grad: bool,
    pub grad: RefCell<Option<Vec<f64>>>,
    pub op: Option<OpRecord>,
}

#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<TensorInner>,
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let n: usize = shape.iter().product();
    if shape.iter().any(|&d| d == 0) {
        return Err(TdrgError::dim(format!(
            "zero-sized dimension in shape {shape:?}"
        )));
    }
    if n != len {
        return Err(TdrgError::dim(format!(
            "shape {shape:?} implies {n} elements, got {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    fn new_inner(
        label: &str,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Option<OpRecord>,
    ) -> Tensor {
        Tensor {
            inner: Rc::new(TensorInner {
                seq: NEXT_SEQ.fetch_add(1, Ordering::Relaxed),
                label: RefCell::new(label.to_string()),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Detached leaf tensor.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_len(shape, data.len())?;
        Ok(Self::new_inner("leaf", shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn parameter(name: &str, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_len(shape, data.len())?;
        Ok(Self::new_inner(name, shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Self::new_inner("leaf", shape.to_vec(), vec![0.0; n], false, None)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        let n = shape.iter().product();
        Self::new_inner("leaf", shape.to_vec(), vec![v; n], false, None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::new_inner("leaf", vec![1], vec![v], false, None)
    }

    /// Internal node constructor used by every operation.
    pub(crate) fn from_op(
        label: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64], &[Tensor], &[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let record = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let op = record.then(|| OpRecord {
            parents,
            backward: Box::new(backward),
        });
        Self::new_inner(label, shape, data, record, op)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn label(&self) -> String {
        self.inner.label.borrow().clone()
    }

    pub fn set_label(&self, label: &str) {
        *self.inner.label.borrow_mut() = label.to_string();
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn value(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar extraction; the tensor must hold exactly one element.
    pub fn item(&self) -> f64 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of {} elements", d.len());
        d[0]
    }

    /// Replaces the stored values; shape must be preserved.
    pub fn set_data(&self, vals: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), vals.len());
        d.copy_from_slice(vals);
    }

    /// In-place mutation of the stored values (optimizer updates, nudges).
    pub fn apply<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        f(&mut self.inner.data.borrow_mut())
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.inner
            .grad
            .borrow()
            .as_ref()
            .map(|g| Tensor::from_vec(&self.inner.shape, g.clone()).expect("grad shape"))
    }

    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Ensures a gradient buffer exists, zero-filled if absent.
    pub fn ensure_zero_grad(&self) {
        let mut g = self.inner.grad.borrow_mut();
        if g.is_none() {
            *g = Some(vec![0.0; self.len()]);
        }
    }

    /// Detached copy: same values, no tape history, no gradient requirement.
    pub fn detach(&self) -> Tensor {
        Self::new_inner("detached", self.inner.shape.clone(), self.value(), false, None)
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    fn ptr(&self) -> *const TensorInner {
        Rc::as_ptr(&self.inner)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("label", &self.label())
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

/// Tape nodes reachable from `root`, parents before consumers.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<*const TensorInner> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = Vec::new();
    visited.insert(root.ptr());
    stack.push((root.clone(), 0));
    while let Some((node, child_idx)) = stack.last_mut() {
        let n_parents = node.inner.op.as_ref().map_or(0, |o| o.parents.len());
        if *child_idx < n_parents {
            let child = node.inner.op.as_ref().unwrap().parents[*child_idx].clone();
            *child_idx += 1;
            if visited.insert(child.ptr()) {
                stack.push((child, 0));
            }
        } else {
            let (node, _) = stack.pop().unwrap();
            order.push(node);
        }
    }
    order
}

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into the
/// `grad` buffers of every reachable leaf with `requires_grad`; leaves not on
/// the tape are left untouched (callers that want zeros for detached
/// parameters use `ensure_zero_grad`).
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.len() != 1 {
        return Err(TdrgError::contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.all_finite() {
        return Err(TdrgError::numeric(describe_first_nonfinite(loss)));
    }
    let order = topo_order(loss);
    let mut grads: HashMap<*const TensorInner, Vec<f64>> = HashMap::new();
    grads.insert(loss.ptr(), vec![1.0]);

    for node in order.iter().rev() {
        let Some(op) = node.inner.op.as_ref() else {
            continue;
        };
        // A node's gradient is complete once every consumer has been
        // processed, which reverse topological order guarantees.
        let Some(g) = grads.remove(&node.ptr()) else {
            continue;
        };
        let needs: Vec<bool> = op.parents.iter().map(|p| p.requires_grad()).collect();
        let parent_grads = {
            let out_data = node.inner.data.borrow();
            (op.backward)(&g, &op.parents, &out_data, &needs)
        };
        debug_assert_eq!(parent_grads.len(), op.parents.len());
        for (parent, pg) in op.parents.iter().zip(parent_grads) {
            if !parent.requires_grad() {
                continue;
            }
            if let Some(pg) = pg {
                debug_assert_eq!(pg.len(), parent.len());
                let buf = grads
                    .entry(parent.ptr())
                    .or_insert_with(|| vec![0.0; parent.len()]);
                for (b, v) in buf.iter_mut().zip(&pg) {
                    *b += v;
                }
            }
        }
    }

    for node in &order {
        if node.inner.op.is_none() && node.requires_grad() {
            if let Some(g) = grads.remove(&node.ptr()) {
                let mut slot = node.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => *slot = Some(g),
                }
            }
        }
    }
    Ok(())
}

/// Walks the tape under `root` in construction order and describes the first
/// tensor holding a non-finite value. Used for NaN-abort diagnostics.
pub fn describe_first_nonfinite(root: &Tensor) -> String {
    let mut nodes = topo_order(root);
    nodes.sort_by_key(|n| n.inner.seq);
    for node in nodes {
        if !node.all_finite() {
            return format!(
                "first non-finite tensor: '{}' with shape {:?}",
                node.label(),
                node.shape()
            );
        }
    }
    "no non-finite tensor found on tape".to_string()
}
