use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use super::ops::Op;
use super::TensorError;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) struct Node {
    id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    pub(crate) op: Option<Op>,
}

/// Dense row-major `f64` tensor that records the operations producing it.
///
/// Cloning is cheap (reference counted). Values are immutable once built;
/// only the gradient accumulator changes, and only during [`Tensor::backward`].
#[derive(Clone)]
pub struct Tensor {
    pub(crate) node: Rc<Node>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("data", &self.node.data)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn check_len(data: &[f64], shape: &[usize]) -> Result<(), TensorError> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(TensorError::ShapeData {
            shape: shape.to_vec(),
            len: data.len(),
        });
    }
    Ok(())
}

impl Tensor {
    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                op: None,
            }),
        }
    }

    /// Result of an operation. The op is only retained when some parent needs
    /// a gradient, so constant subgraphs do not keep their inputs alive.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                op: requires_grad.then_some(op),
            }),
        }
    }

    /// Constant tensor; never receives a gradient.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self, TensorError> {
        check_len(&data, shape)?;
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Trainable leaf tensor.
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Result<Self, TensorError> {
        check_len(&data, shape)?;
        Ok(Self::leaf(data, shape.to_vec(), true))
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![value], Vec::new(), false)
    }

    pub fn vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::leaf(values, vec![n], false)
    }

    /// Builds a rank-2 constant from rows. All rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::ShapeData {
                    shape: vec![rows.len(), cols],
                    len: rows.iter().map(Vec::len).sum(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(data, &[rows.len(), cols])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(vec![0.0; shape.iter().product()], shape.to_vec(), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.op.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape());
        self.node.data[0]
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.node.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.node.data.clone(), self.node.shape.clone(), false)
    }

    /// Rows of a rank-2 tensor as owned vectors.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        match self.shape() {
            [rows, cols] => (0..*rows)
                .map(|r| self.data()[r * cols..(r + 1) * cols].to_vec())
                .collect(),
            _ => vec![self.data().to_vec()],
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.node.id
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
    /// into every reachable tensor that requires one.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topological_order();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);

        for tensor in order.iter().rev() {
            let Some(grad) = pending.remove(&tensor.id()) else {
                continue;
            };
            if let Some(op) = &tensor.node.op {
                for (parent, parent_grad) in op.backward(tensor, &grad) {
                    match pending.get_mut(&parent.id()) {
                        Some(acc) => acc
                            .iter_mut()
                            .zip(&parent_grad)
                            .for_each(|(a, g)| *a += g),
                        None => {
                            pending.insert(parent.id(), parent_grad);
                        }
                    }
                }
            }
            let mut slot = tensor.node.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                None => *slot = Some(grad),
            }
        }
        Ok(())
    }

    /// Post-order over the subgraph of tensors that require a gradient.
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((tensor, expanded)) = stack.pop() {
            if expanded {
                order.push(tensor);
                continue;
            }
            if !visited.insert(tensor.id()) {
                continue;
            }
            stack.push((tensor.clone(), true));
            if let Some(op) = &tensor.node.op {
                for parent in op.parents().into_iter().rev() {
                    if parent.requires_grad() && !visited.contains(&parent.id()) {
                        stack.push((parent.clone(), false));
                    }
                }
            }
        }
        order
    }
}
