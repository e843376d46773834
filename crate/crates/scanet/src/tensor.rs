//! Dense NCHW tensor with a dynamically recorded reverse-mode tape.
//!
//! Tensors are immutable after creation except for the gradient slot.
//! Every differentiable op allocates a fresh node holding references to its
//! inputs; `backward` walks the recorded graph once in reverse topological
//! order and accumulates adjoints into `requires_grad` leaves by summation.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::io::{Read, Write};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ops::Op;
use crate::scalar::Scalar;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        debug_assert!(n >= 1 && c >= 1 && h >= 1 && w >= 1);
        Shape { n, c, h, w }
    }

    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{},{}]", self.n, self.c, self.h, self.w)
    }
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) struct Inner<T: Scalar> {
    pub id: u64,
    pub shape: Shape,
    pub data: Vec<T>,
    pub requires_grad: bool,
    pub grad: RefCell<Option<Vec<T>>>,
    pub op: Op<T>,
}

/// Cheap-to-clone handle; cloning shares storage and the grad slot.
pub struct Tensor<T: Scalar>(pub(crate) Rc<Inner<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(id={}, shape={})", self.0.id, self.0.shape)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            shape.numel(),
            "data length {} != shape {} numel",
            data.len(),
            shape
        );
        Tensor(Rc::new(Inner {
            id: fresh_id(),
            shape,
            data,
            requires_grad: false,
            grad: RefCell::new(None),
            op: Op::Leaf,
        }))
    }

    /// Trainable leaf: participates in backward and receives a gradient.
    pub fn param(shape: Shape, data: Vec<T>) -> Self {
        assert_eq!(data.len(), shape.numel());
        Tensor(Rc::new(Inner {
            id: fresh_id(),
            shape,
            data,
            requires_grad: true,
            grad: RefCell::new(None),
            op: Op::Leaf,
        }))
    }

    pub(crate) fn from_op(shape: Shape, data: Vec<T>, requires_grad: bool, op: Op<T>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        // Without grad tracking the node does not need its history; dropping
        // it frees intermediates eagerly during inference.
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor(Rc::new(Inner {
            id: fresh_id(),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::from_vec(shape, vec![T::zero(); shape.numel()])
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Tensor::from_vec(shape, vec![v; shape.numel()])
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_vec(Shape::scalar(), vec![v])
    }

    pub fn shape(&self) -> Shape {
        self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.numel()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn set_grad(&self, grad: Vec<T>) {
        assert_eq!(grad.len(), self.numel(), "gradient length mismatch");
        *self.0.grad.borrow_mut() = Some(grad);
    }

    /// Replace the value, keeping identity semantics out of it: returns a new
    /// leaf with the same requires_grad flag and a cleared gradient.
    pub fn with_data(&self, data: Vec<T>) -> Self {
        assert_eq!(data.len(), self.numel());
        if self.requires_grad() {
            Tensor::param(self.shape(), data)
        } else {
            Tensor::from_vec(self.shape(), data)
        }
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[T]) {
        debug_assert_eq!(contrib.len(), self.numel());
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi = *gi + *ci;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor::from_vec(
            self.shape(),
            self.data().iter().map(|v| v.as_f64()).collect(),
        )
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor::from_vec(
            self.shape(),
            self.data().iter().map(|v| v.as_f64() as f32).collect(),
        )
    }

    /// Reverse pass from a scalar loss. Gradients accumulate by summation
    /// into every reachable requires_grad leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Collect the reachable subgraph. Creation ids are topological:
        // inputs always precede outputs, so descending id order is a valid
        // reverse-topological visit.
        let mut nodes: Vec<Tensor<T>> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.0.id) {
                continue;
            }
            t.0.op.visit_inputs(&mut |inp| stack.push(inp.clone()));
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        self.accumulate_grad(&[T::one()]);
        for node in &nodes {
            let upstream = node.0.grad.borrow().clone();
            let Some(upstream) = upstream else { continue };
            node.0.op.backward(&node.0, &upstream);
            // Interior nodes will not be read again; drop their adjoint
            // so memory stays bounded by the leaf set.
            if !matches!(node.0.op, Op::Leaf) {
                *node.0.grad.borrow_mut() = None;
            }
        }
        Ok(())
    }
}

const TENSOR_MAGIC: &[u8; 4] = b"SCTN";
const TENSOR_VERSION: u32 = 1;

/// Flat binary layout: "SCTN", version u32, 4×u64 dims, then little-endian
/// 32-bit reals in row-major order.
pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor<f32>) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    let s = t.shape();
    for d in [s.n, s.c, s.h, s.w] {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Checkpoint(format!("bad tensor magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != TENSOR_VERSION {
        return Err(Error::Checkpoint(format!("unsupported tensor version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        *d = u64::from_le_bytes(b8) as usize;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let mut data = vec![0f32; shape.numel()];
    for v in &mut data {
        r.read_exact(&mut b4)?;
        *v = f32::from_le_bytes(b4);
    }
    Ok(Tensor::from_vec(shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_indexing_is_row_major() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.numel(), 120);
        assert_eq!(s.idx(0, 0, 0, 0), 0);
        assert_eq!(s.idx(0, 0, 0, 1), 1);
        assert_eq!(s.idx(0, 0, 1, 0), 5);
        assert_eq!(s.idx(0, 1, 0, 0), 20);
        assert_eq!(s.idx(1, 0, 0, 0), 60);
    }

    #[test]
    #[should_panic]
    fn wrong_data_length_panics() {
        let _ = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f32; 3]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let t = Tensor::<f32>::param(Shape::new(1, 1, 2, 2), vec![1.0; 4]);
        assert!(matches!(t.backward(), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn tensor_roundtrip() {
        let t = Tensor::from_vec(Shape::new(1, 2, 2, 3), (0..12).map(|i| i as f32 * 0.5).collect());
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut &buf[..]).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }
}
