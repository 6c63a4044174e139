//! Reverse-mode automatic differentiation over dense f64 arrays.
//!
//! Define-by-run: every op builds a node holding its parents and a backward
//! closure. `Tensor::backward` walks nodes in reverse creation order (a valid
//! topological order, since parents always predate children) and accumulates
//! gradients into leaf slots. Single-threaded by design — reductions run in a
//! fixed order, so results are bit-reproducible across runs.
//!
//! Gradient tracking follows the usual rules: constants never track, leaves
//! track, an op node tracks iff any parent tracks. Inside a `no_grad` scope
//! nothing records, which keeps sampling and evaluation memory-flat.

mod buf;
pub mod fd;
pub mod nn;
pub mod ops;

pub use buf::Buf;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Runs `f` with gradient recording disabled.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

/// grad_out, node output, parents -> one optional gradient per parent.
type BackFn = Box<dyn Fn(&Buf, &Buf, &[Tensor]) -> Vec<Option<Buf>>>;

struct Node {
    id: u64,
    buf: Buf,
    parents: Vec<Tensor>,
    back: Option<BackFn>,
    tracks: bool,
    grad: RefCell<Option<Buf>>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl Tensor {
    /// A value outside the gradient graph.
    pub fn constant(buf: Buf) -> Tensor {
        Tensor(Rc::new(Node {
            id: next_id(),
            buf,
            parents: Vec::new(),
            back: None,
            tracks: false,
            grad: RefCell::new(None),
        }))
    }

    /// A differentiable leaf (parameter or probed input).
    pub fn leaf(buf: Buf) -> Tensor {
        Tensor(Rc::new(Node {
            id: next_id(),
            buf,
            parents: Vec::new(),
            back: None,
            tracks: grad_enabled(),
            grad: RefCell::new(None),
        }))
    }

    pub(crate) fn from_op(buf: Buf, parents: Vec<Tensor>, back: BackFn) -> Tensor {
        let tracks = grad_enabled() && parents.iter().any(|p| p.0.tracks);
        if tracks {
            Tensor(Rc::new(Node {
                id: next_id(),
                buf,
                parents,
                back: Some(back),
                tracks: true,
                grad: RefCell::new(None),
            }))
        } else {
            Tensor::constant(buf)
        }
    }

    pub fn buf(&self) -> &Buf {
        &self.0.buf
    }

    pub fn shape(&self) -> &[usize] {
        self.0.buf.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.0.buf.data()
    }

    pub fn item(&self) -> f64 {
        self.0.buf.item()
    }

    pub fn tracks(&self) -> bool {
        self.0.tracks
    }

    /// Gradient accumulated by the last `backward` call that reached this node.
    pub fn grad(&self) -> Option<Buf> {
        self.0.grad.borrow().clone()
    }

    /// Backpropagates d(self)/d(leaves) from this scalar.
    ///
    /// Clears stale gradients on every reachable node first, so a tensor can
    /// participate in several backward passes within a step if needed.
    pub fn backward(&self) {
        assert_eq!(self.0.buf.numel(), 1, "backward() requires a scalar");
        assert!(self.0.tracks, "backward() on a non-tracking tensor");

        // Collect the reachable subgraph.
        let mut seen: HashMap<u64, Tensor> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if seen.contains_key(&t.0.id) {
                continue;
            }
            for p in &t.0.parents {
                if p.0.tracks {
                    stack.push(p.clone());
                }
            }
            seen.insert(t.0.id, t);
        }

        let mut order: Vec<Tensor> = seen.into_values().collect();
        order.sort_by(|a, b| b.0.id.cmp(&a.0.id));
        for t in &order {
            *t.0.grad.borrow_mut() = None;
        }
        *self.0.grad.borrow_mut() = Some(Buf::scalar(1.0));

        for t in &order {
            let gout = t.0.grad.borrow().clone();
            let Some(gout) = gout else { continue };
            let Some(back) = &t.0.back else { continue };
            let grads = back(&gout, &t.0.buf, &t.0.parents);
            debug_assert_eq!(grads.len(), t.0.parents.len());
            for (p, g) in t.0.parents.iter().zip(grads) {
                let Some(g) = g else { continue };
                if !p.0.tracks {
                    continue;
                }
                assert_eq!(
                    g.shape(),
                    p.0.buf.shape(),
                    "gradient shape mismatch flowing into parent"
                );
                let mut slot = p.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.add_into(&g),
                    None => *slot = Some(g),
                }
            }
            // Inner gradients of op nodes are no longer needed once consumed.
            if t.0.back.is_some() && t.0.id != self.0.id {
                *t.0.grad.borrow_mut() = None;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn backward_through_shared_subexpression_accumulates() {
        let x = Tensor::leaf(Buf::scalar(3.0));
        let y = ops::mul(&x, &x); // x^2
        let z = ops::add(&y, &x); // x^2 + x
        z.backward();
        let g = x.grad().unwrap();
        assert!((g.item() - 7.0).abs() < 1e-12); // 2x + 1 at x=3
    }

    #[test]
    fn constants_do_not_track() {
        let c = Tensor::constant(Buf::scalar(2.0));
        let x = Tensor::leaf(Buf::scalar(5.0));
        let y = ops::mul(&x, &c);
        y.backward();
        assert!((x.grad().unwrap().item() - 2.0).abs() < 1e-12);
        assert!(c.grad().is_none());
    }

    #[test]
    fn no_grad_scope_records_nothing() {
        let x = Tensor::leaf(Buf::scalar(1.0));
        let y = no_grad(|| ops::mul(&x, &x));
        assert!(!y.tracks());
    }
}
