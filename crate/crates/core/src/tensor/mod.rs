//! Dense row-major tensors with a reverse-mode gradient tape.
//!
//! A [`Tensor`] is a cheap handle (`Arc`) to immutable data. Operations on
//! tensors that require gradients record a node holding their parents and a
//! backward closure; [`Tensor::backward`] walks that graph in reverse
//! topological order and accumulates gradients into the leaves.

mod conv;
pub mod gradcheck;
pub mod io;
mod ops;
pub mod optim;

use std::collections::HashMap;
use std::fmt;
use std::iter::Sum;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use conv::conv2d;
pub use ops::{
    add, mean, mul, narrow_channels, relu, reshape, scale, sigmoid, softmax_over_channels, stack, sum,
    upsample_bilinear_x2,
};
pub use optim::{adam_update, AdamState, Parameter};
pub(crate) use ops::logistic;

/// Element type of a tensor. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + fmt::Debug + Send + Sync + Sum + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` for row-major operands with
    /// explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
    ) {
        assert!(c.len() >= m * n);
        // SAFETY: the callers in this crate pass slices covering the strided
        // extents; `c` is bounds-checked above and written row-major.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
    ) {
        assert!(c.len() >= m * n);
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
}

/// Row-major product `a (m×k) · b (k×n)` with optional transposition of the
/// stored operands. `a` is stored `m×k` (or `k×m` when `ta`), likewise `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Scalar>(
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    beta: T,
    c: &mut [T],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(m, k, n, a, rsa, csa, b, rsb, csb, beta, c);
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Maps the upstream gradient of an op's output to one optional gradient per
/// parent (`None` for parents that need none).
pub type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Scalar> {
    op: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

/// Dense tensor handle; clones share storage and gradient slot.
pub struct Tensor<T: Scalar = f32> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.inner.node.as_ref().map(|n| n.op).unwrap_or("leaf");
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("op", &op)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                node,
            }),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("from_vec", format!("zero-sized dimension in {shape:?}")));
        }
        if numel_of(shape) != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {shape:?} needs {} elements, got {}", numel_of(shape), data.len()),
            ));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::build(shape.to_vec(), vec![value; numel_of(shape)], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![1], vec![value], false, None)
    }

    /// Leaf tensor that accumulates gradients.
    pub fn leaf(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Ok(Self::from_vec(shape, data)?.requiring_grad())
    }

    /// Copy of this tensor's values as a fresh gradient-tracking leaf.
    pub fn requiring_grad(&self) -> Self {
        Self::build(self.inner.shape.clone(), self.inner.data.clone(), true, None)
    }

    /// Copy of this tensor's values with no graph attached.
    pub fn detach(&self) -> Self {
        Self::build(self.inner.shape.clone(), self.inner.data.clone(), false, None)
    }

    /// Result of a differentiable operation. When any parent requires a
    /// gradient, `backward` is recorded and the result requires one too.
    pub fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then(|| Node {
            op,
            parents,
            backward,
        });
        Self::build(shape, data, requires_grad, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.inner.data[0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.inner.data.iter().map(|v| U::of(v.as_f64())).collect();
        Tensor::build(self.inner.shape.clone(), data, false, None)
    }

    /// Reverse-mode sweep from a scalar loss. Gradients add onto whatever
    /// the leaves already hold.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Iterative post-order DFS: parents land before their consumers.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((t, next)) = stack.pop() {
            let parents = t.inner.node.as_ref().map(|n| n.parents.as_slice()).unwrap_or(&[]);
            if next < parents.len() {
                let p = parents[next].clone();
                stack.push((t, next + 1));
                if p.requires_grad() && visited.insert(p.id()) {
                    stack.push((p, 0));
                }
            } else {
                order.push(t);
            }
        }

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.inner.node {
                Some(node) => {
                    let parent_grads = (node.backward)(&g);
                    debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "{} gradient length", node.op);
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a = *a + *b),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.inner.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

/// Shape of an NCHW tensor, or an error naming the op.
pub(crate) fn nchw<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<[usize; 4]> {
    match t.shape() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        s => Err(Error::shape(op, format!("expected NCHW input, got shape {s:?}"))),
    }
}
