//! Tape-based reverse-mode differentiation.
//!
//! A `Tape` records one node per operator application. Each node stores the
//! tape indices of the tracked operands plus a closure that maps the output
//! gradient to operand gradients. `backward` walks the node list from the
//! root towards index zero, accumulating gradients by operand index; a node
//! is visited at most once, so shared subexpressions cost nothing extra.
//!
//! Tracking is demand-driven: an operator whose operands are all constants
//! records nothing and returns a constant, so evaluation without gradients
//! allocates no tape memory at all.
//!
//! Backward closures operate on plain tensors and must never apply tape
//! operators; recording during `backward` is a contract violation.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{PbanError, Result};
use crate::tensor::{Scalar, Tensor};

/// Stored gradient closure: output gradient in, one gradient per tracked
/// parent out, already aligned with `Node::parents`.
type NodeBack<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    /// Tape indices of the tracked operands.
    parents: Vec<usize>,
    back: NodeBack<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Rc<RefCell<Vec<Node<T>>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            nodes: Rc::clone(&self.nodes),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn same_tape(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    /// Creates a tracked variable whose gradient `backward` will report.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        let id = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents: Vec::new(),
                back: Box::new(|_| Vec::new()),
            });
            nodes.len() - 1
        };
        Var {
            value,
            node: Some((self.clone(), id)),
        }
    }
}

/// A tensor plus an optional position on a tape.
#[derive(Clone)]
pub struct Var<T: Scalar> {
    value: Tensor<T>,
    node: Option<(Tape<T>, usize)>,
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("value", &self.value)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    /// A value that participates in the forward pass but never receives a
    /// gradient. Operators applied to constants alone stay off the tape.
    pub fn constant(value: Tensor<T>) -> Self {
        Var { value, node: None }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    fn id_on(&self, tape: &Tape<T>) -> Result<Option<usize>> {
        match &self.node {
            None => Ok(None),
            Some((t, id)) => {
                if t.same_tape(tape) {
                    Ok(Some(*id))
                } else {
                    Err(PbanError::Contract(
                        "operands recorded on different tapes".into(),
                    ))
                }
            }
        }
    }
}

/// Records one operator application.
///
/// `value` is the operator output; it is checked for NaN and infinity and
/// the operator fails rather than propagate a non-finite value. `operands`
/// lists every input in the order the `back` closure expects; the closure
/// receives a mask saying which operand gradients are actually needed and
/// returns one optional gradient per operand (`None` where masked off or
/// identically zero). If no operand is tracked the result is a constant
/// and `back` is dropped unused.
pub fn record<T: Scalar>(
    op: &'static str,
    value: Tensor<T>,
    operands: &[&Var<T>],
    back: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
) -> Result<Var<T>> {
    value.check_finite(op)?;
    let tape = match operands.iter().find_map(|v| v.node.as_ref()) {
        None => return Ok(Var::constant(value)),
        Some((tape, _)) => tape.clone(),
    };
    let mut parents = Vec::new();
    let mut select = Vec::new();
    let mut mask = vec![false; operands.len()];
    for (pos, v) in operands.iter().enumerate() {
        if let Some(id) = v.id_on(&tape)? {
            parents.push(id);
            select.push(pos);
            mask[pos] = true;
        }
    }
    let n_operands = operands.len();
    let wrapped: NodeBack<T> = Box::new(move |g| {
        let mut full = back(g, &mask);
        debug_assert_eq!(full.len(), n_operands, "back closure arity");
        select.iter().map(|&p| full[p].take()).collect()
    });
    let id = {
        let mut nodes = tape.nodes.borrow_mut();
        nodes.push(Node {
            parents,
            back: wrapped,
        });
        nodes.len() - 1
    };
    Ok(Var {
        value,
        node: Some((tape, id)),
    })
}

/// Gradients keyed by tape index, produced by `backward`.
pub struct Gradients<T: Scalar> {
    tape: Tape<T>,
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `v`, if any path connected them.
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        match &v.node {
            Some((tape, id)) if tape.same_tape(&self.tape) => self.by_node.get(*id)?.as_ref(),
            _ => None,
        }
    }

    /// Like `get`, but a disconnected variable yields zeros of its shape.
    pub fn get_or_zeros(&self, v: &Var<T>) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.shape()),
        }
    }
}

/// Reverse sweep from a single-element root.
///
/// Every gradient tensor is validated to be finite and shaped like the value
/// it differentiates; violations surface as errors instead of corrupting the
/// accumulation.
pub fn backward<T: Scalar>(root: &Var<T>) -> Result<Gradients<T>> {
    let (tape, root_id) = match &root.node {
        Some((tape, id)) => (tape.clone(), *id),
        None => {
            return Err(PbanError::Contract(
                "backward root is a constant; nothing is tracked".into(),
            ))
        }
    };
    if root.value.len() != 1 {
        return Err(PbanError::Dimension {
            op: "backward",
            msg: format!("root must hold one element, shape is {:?}", root.shape()),
        });
    }
    let nodes = tape.nodes.borrow();
    let mut by_node: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
    by_node[root_id] = Some(Tensor::ones(root.value.shape()));
    for id in (0..=root_id).rev() {
        let Some(g) = by_node[id].take() else { continue };
        let node = &nodes[id];
        if node.parents.is_empty() {
            by_node[id] = Some(g);
            continue;
        }
        let parent_grads = (node.back)(&g);
        if parent_grads.len() != node.parents.len() {
            return Err(PbanError::Contract(format!(
                "node {id} returned {} gradients for {} parents",
                parent_grads.len(),
                node.parents.len()
            )));
        }
        for (&pid, pg) in node.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            pg.check_finite("backward")?;
            match &mut by_node[pid] {
                slot @ None => *slot = Some(pg),
                Some(acc) => {
                    if acc.shape() != pg.shape() {
                        return Err(PbanError::ShapeMismatch {
                            op: "backward_accumulate",
                            lhs: acc.shape().to_vec(),
                            rhs: pg.shape().to_vec(),
                        });
                    }
                    let dst = acc.make_mut();
                    for (d, &s) in dst.iter_mut().zip(pg.as_slice()) {
                        *d += s;
                    }
                }
            }
        }
    }
    drop(nodes);
    Ok(Gradients { tape, by_node })
}
