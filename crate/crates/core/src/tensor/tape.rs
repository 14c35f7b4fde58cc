use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct NodeId(pub(crate) usize);

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

/// Arguments handed to a backward closure.
pub(crate) struct BackArgs<'a> {
    /// Forward values of the node's parents, in recording order.
    pub parents: &'a [&'a Tensor],
    /// Forward value of the node itself.
    pub output: &'a Tensor,
    /// Incoming gradient, same layout as `output`.
    pub grad: &'a [f32],
    /// Which parents actually need a gradient; expensive ops may skip the rest.
    pub wants: &'a [bool],
}

type BackFn = Box<dyn Fn(&BackArgs) -> Vec<Option<Vec<f32>>>>;

struct Node<'p> {
    value: Value<'p>,
    parents: Vec<NodeId>,
    backward: Option<BackFn>,
    needs_grad: bool,
}

/// Reverse-mode gradient tape.
///
/// Ops are recorded in topological order (a node only references earlier
/// nodes), so the backward sweep is a single reverse pass that visits each
/// node exactly once. Parameters are borrowed, never copied onto the tape.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    leaf_grads: Vec<Option<Vec<f32>>>,
    flops: u64,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaf_grads: Vec::new(), flops: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count recorded by the ops so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn reset_flops(&mut self) {
        self.flops = 0;
    }

    pub(crate) fn add_flops(&mut self, n: u64) {
        self.flops += n;
    }

    /// Constant input; no gradient will flow into it.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Value::Owned(t), vec![], None, false)
    }

    /// Borrowed constant input.
    pub fn constant(&mut self, t: &'p Tensor) -> NodeId {
        self.push(Value::Borrowed(t), vec![], None, false)
    }

    /// Trainable parameter, borrowed from its owner.
    pub fn param(&mut self, t: &'p Tensor) -> NodeId {
        self.push(Value::Borrowed(t), vec![], None, true)
    }

    /// Trainable input owned by the tape (used in tests and small losses).
    pub fn param_owned(&mut self, t: Tensor) -> NodeId {
        self.push(Value::Owned(t), vec![], None, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value.get()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub(crate) fn push_op(
        &mut self,
        value: Tensor,
        parents: Vec<NodeId>,
        backward: BackFn,
    ) -> NodeId {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(Value::Owned(value), parents, Some(backward), needs)
    }

    fn push(
        &mut self,
        value: Value<'p>,
        parents: Vec<NodeId>,
        backward: Option<BackFn>,
        needs_grad: bool,
    ) -> NodeId {
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(Node { value, parents, backward, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Backward from a scalar root, seeding with 1.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        self.backward_multi(&[(root, vec![1.0])]);
    }

    /// Backward from a node with an explicit seed gradient.
    pub fn backward_seeded(&mut self, root: NodeId, seed: Vec<f32>) {
        self.backward_multi(&[(root, seed)]);
    }

    /// Backward from several roots at once; seeds accumulate.
    pub fn backward_multi(&mut self, roots: &[(NodeId, Vec<f32>)]) {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        for (root, seed) in roots {
            assert_eq!(self.value(*root).numel(), seed.len(), "seed length mismatch");
            accumulate(&mut grads[root.0], seed);
        }

        for id in (0..n).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(back) = &node.backward {
                let parent_vals: Vec<&Tensor> =
                    node.parents.iter().map(|p| self.nodes[p.0].value.get()).collect();
                let wants: Vec<bool> =
                    node.parents.iter().map(|p| self.nodes[p.0].needs_grad).collect();
                let args = BackArgs {
                    parents: &parent_vals,
                    output: node.value.get(),
                    grad: &g,
                    wants: &wants,
                };
                let contribs = back(&args);
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (p, c) in node.parents.clone().into_iter().zip(contribs) {
                    if let Some(c) = c {
                        if self.nodes[p.0].needs_grad {
                            accumulate(&mut grads[p.0], &c);
                        }
                    }
                }
            } else {
                // Leaf: keep its gradient for the caller.
                grads[id] = Some(g);
            }
        }
        self.leaf_grads = grads;
    }

    /// Gradient of a leaf after `backward*` ran; `None` if no gradient reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.leaf_grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Vec<f32>> {
        self.leaf_grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, delta: &[f32]) {
    match slot {
        Some(g) => {
            debug_assert_eq!(g.len(), delta.len());
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}
