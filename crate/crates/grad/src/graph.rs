use std::cell::RefCell;
use std::rc::Rc;

use ndarray::ArrayD;

use crate::elem::Elem;
use crate::nn::ParamId;

/// Backward closure: takes the upstream gradient and a per-parent "is a
/// gradient needed" mask, returns one optional gradient per parent.
pub(crate) type BackFn<E> = Box<dyn Fn(&ArrayD<E>, &[bool]) -> Vec<Option<ArrayD<E>>>>;

pub(crate) struct Node<E: Elem> {
    pub value: Rc<ArrayD<E>>,
    pub parents: Vec<usize>,
    pub needs_grad: bool,
    pub backward: Option<BackFn<E>>,
    pub param: Option<ParamId>,
}

/// A Wengert tape. One graph is built per forward pass and discarded after
/// `backward`. Single-threaded by design: the trainer owns one optimization
/// thread, so ops take `&Graph` and use interior mutability.
pub struct Graph<E: Elem> {
    nodes: RefCell<Vec<Node<E>>>,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        value: ArrayD<E>,
        parents: Vec<usize>,
        needs_grad: bool,
        backward: Option<BackFn<E>>,
        param: Option<ParamId>,
    ) -> usize {
        debug_assert!(value.iter().all(|v| !v.is_nan()) || !cfg!(test));
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            needs_grad,
            backward,
            param,
        });
        id
    }

    /// A leaf whose gradient is not tracked (data, targets, frozen buffers).
    pub fn constant(&self, value: ArrayD<E>) -> Var<'_, E> {
        let id = self.push(value, Vec::new(), false, None, None);
        Var { g: self, id }
    }

    /// A leaf whose gradient is tracked (inputs under test, style codes, ...).
    pub fn leaf(&self, value: ArrayD<E>) -> Var<'_, E> {
        let id = self.push(value, Vec::new(), true, None, None);
        Var { g: self, id }
    }

    /// A parameter leaf tied to a `ParamStore` slot so optimizers can route
    /// gradients back by id.
    pub fn param(&self, slot: ParamId, value: ArrayD<E>) -> Var<'_, E> {
        let id = self.push(value, Vec::new(), true, None, Some(slot));
        Var { g: self, id }
    }

    pub(crate) fn push_op(
        &self,
        parents: Vec<usize>,
        value: ArrayD<E>,
        backward: BackFn<E>,
    ) -> usize {
        let needs = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].needs_grad)
        };
        let back = if needs { Some(backward) } else { None };
        self.push(value, parents, needs, back, None)
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<ArrayD<E>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Records an externally-defined differentiable op. `backward` receives
    /// the upstream gradient and a per-parent needs-gradient mask and must
    /// return one optional gradient (matching the parent's shape) per parent.
    pub fn custom_op<'g>(
        &'g self,
        parents: &[Var<'g, E>],
        value: ArrayD<E>,
        backward: impl Fn(&ArrayD<E>, &[bool]) -> Vec<Option<ArrayD<E>>> + 'static,
    ) -> Var<'g, E> {
        for p in parents {
            assert!(std::ptr::eq(p.g, self), "custom_op: var from another graph");
        }
        let id = self.push_op(
            parents.iter().map(|p| p.id).collect(),
            value,
            Box::new(backward),
        );
        Var { g: self, id }
    }

    /// Reverse pass from `root`, seeded with ones. Returns one gradient per
    /// node that both needed one and was reachable.
    pub fn backward(&self, root: Var<'_, E>) -> Gradients<E> {
        let nodes = self.nodes.borrow();
        assert!(
            nodes[root.id].needs_grad,
            "backward root does not require gradients"
        );
        let mut grads: Vec<Option<ArrayD<E>>> = Vec::with_capacity(root.id + 1);
        grads.resize_with(root.id + 1, || None);
        grads[root.id] = Some(ArrayD::ones(nodes[root.id].value.shape()));

        for i in (0..=root.id).rev() {
            if grads[i].is_none() || !nodes[i].needs_grad {
                continue;
            }
            let node = &nodes[i];
            let Some(back) = &node.backward else { continue };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].needs_grad)
                .collect();
            let g = grads[i].take().expect("grad present");
            let contribs = back(&g, &needs);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (slot, contrib) in contribs.into_iter().enumerate() {
                let Some(c) = contrib else { continue };
                let p = node.parents[slot];
                debug_assert_eq!(c.shape(), nodes[p].value.shape(), "gradient shape mismatch");
                match &mut grads[p] {
                    Some(acc) => *acc += &c,
                    slot_ref @ None => *slot_ref = Some(c),
                }
            }
            // Interior grads are dropped as soon as they are consumed; only
            // leaves keep theirs.
        }

        let params: Vec<(usize, ParamId)> = nodes
            .iter()
            .enumerate()
            .take(root.id + 1)
            .filter_map(|(i, n)| n.param.map(|pid| (i, pid)))
            .collect();
        Gradients { grads, params }
    }
}

/// Handle to a tape node. Cheap to copy; lifetime-bound to its graph.
pub struct Var<'g, E: Elem> {
    pub(crate) g: &'g Graph<E>,
    pub(crate) id: usize,
}

impl<E: Elem> Clone for Var<'_, E> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<E: Elem> Copy for Var<'_, E> {}

impl<'g, E: Elem> Var<'g, E> {
    pub fn graph(&self) -> &'g Graph<E> {
        self.g
    }

    pub fn value(&self) -> Rc<ArrayD<E>> {
        self.g.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Reads a scalar (0-d or single-element) value.
    pub fn scalar(&self) -> E {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on non-scalar var");
        *v.first().expect("non-empty")
    }
}

/// Result of a backward pass.
pub struct Gradients<E: Elem> {
    grads: Vec<Option<ArrayD<E>>>,
    params: Vec<(usize, ParamId)>,
}

impl<E: Elem> Gradients<E> {
    pub fn wrt(&self, v: Var<'_, E>) -> Option<&ArrayD<E>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Iterates (param slot, gradient) pairs for every parameter leaf that
    /// received a gradient.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &ArrayD<E>)> {
        self.params
            .iter()
            .filter_map(|&(node, pid)| self.grads[node].as_ref().map(|g| (pid, g)))
    }
}
