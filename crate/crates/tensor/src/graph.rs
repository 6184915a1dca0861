use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// `needs[i]` is false when input `i` does not require a gradient; the
/// implementation may return `None` for it.
pub trait Backward<F: Float> {
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>>;
}

impl<F, T> Backward<F> for T
where
    F: Float,
    T: Fn(&[&Tensor<F>], &Tensor<F>, &Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>>,
{
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        self(inputs, output, grad, needs)
    }
}

/// Pins closure argument types for the blanket [`Backward`] impl.
pub(crate) fn bw<F, C>(c: C) -> C
where
    F: Float,
    C: Fn(&[&Tensor<F>], &Tensor<F>, &Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>>,
{
    c
}

struct Node<F: Float> {
    value: Tensor<F>,
    parents: Vec<Var>,
    op: Option<Box<dyn Backward<F>>>,
    requires_grad: bool,
    tags: u8,
}

/// A concatenation observed while building the graph, with the provenance
/// tags of every input. Used to audit which signal paths get concatenated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConcatEvent {
    pub axis: usize,
    pub input_tags: Vec<u8>,
}

/// Tape of operations for one forward pass.
///
/// Nodes whose inputs never require a gradient are stored without a
/// backward closure, so inference through a frozen network costs no
/// extra memory.
pub struct Graph<F: Float> {
    nodes: Vec<Node<F>>,
    concat_events: Vec<ConcatEvent>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), concat_events: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), op: None, requires_grad, tags: 0 });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// ORs provenance bits into a node. Bits propagate to every downstream node.
    pub fn tag(&mut self, v: Var, bits: u8) {
        self.nodes[v.0].tags |= bits;
    }

    pub fn tags(&self, v: Var) -> u8 {
        self.nodes[v.0].tags
    }

    pub fn concat_events(&self) -> &[ConcatEvent] {
        &self.concat_events
    }

    pub(crate) fn concat_events_mut(&mut self) -> &mut Vec<ConcatEvent> {
        &mut self.concat_events
    }

    pub(crate) fn record_concat(&mut self, axis: usize, inputs: &[Var]) {
        let input_tags = inputs.iter().map(|&v| self.tags(v)).collect();
        self.concat_events.push(ConcatEvent { axis, input_tags });
    }

    /// Records an operation. Custom layers use this to attach hand-written
    /// backward passes.
    pub fn push_op<B>(&mut self, inputs: &[Var], value: Tensor<F>, op: B) -> Var
    where
        B: Backward<F> + 'static,
    {
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let tags = inputs.iter().fold(0, |t, &v| t | self.nodes[v.0].tags);
        let (parents, op): (Vec<Var>, Option<Box<dyn Backward<F>>>) = if requires_grad {
            (inputs.to_vec(), Some(Box::new(op)))
        } else {
            (Vec::new(), None)
        };
        self.nodes.push(Node { value, parents, op, requires_grad, tags });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let value = self.value(loss);
        if value.len() != 1 {
            return Err(TensorError::invalid(
                "backward",
                format!("loss must hold a single value, shape is {:?}", value.shape()),
            ));
        }
        self.backward_with(loss, Tensor::full(value.shape(), F::one()))
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_with(&self, root: Var, seed: Tensor<F>) -> Result<Gradients<F>> {
        if seed.shape() != self.shape(root) {
            return Err(TensorError::shape("backward_with", self.shape(root), seed.shape()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        let mut leaves: Vec<Option<Tensor<F>>> = Vec::new();
        leaves.resize_with(root.0 + 1, || None);
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads: leaves });
        }
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                None => {
                    if node.requires_grad {
                        leaves[i] = Some(g);
                    }
                }
                Some(op) => {
                    let inputs: Vec<&Tensor<F>> =
                        node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                    let needs: Vec<bool> =
                        node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
                    let pgrads = op.backward(&inputs, &node.value, &g, &needs);
                    debug_assert_eq!(pgrads.len(), node.parents.len());
                    for ((p, pg), need) in node.parents.iter().zip(pgrads).zip(needs) {
                        let Some(pg) = pg else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                        match &mut grads[p.0] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

/// Gradients of leaf nodes after a reverse pass.
pub struct Gradients<F: Float> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
