use super::ops::{self, Forward, OpKind, Operand, SumAxis};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Origin {
    Leaf,
    Constant,
    Op(OpKind, Vec<usize>),
}

struct Node<T> {
    origin: Origin,
    shape: Vec<usize>,
    value: Vec<T>,
    saved: Vec<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order because
/// an op can only reference nodes that already exist.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records `t` as a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(Node {
            origin: Origin::Leaf,
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            saved: Vec::new(),
            requires_grad: t.requires_grad(),
        })
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != value.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {shape:?} needs {n} elements, got {}", value.len()),
            ));
        }
        Ok(self.push(Node {
            origin: Origin::Constant,
            shape,
            value,
            saved: Vec::new(),
            requires_grad: false,
        }))
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Vec::new(), vec![v]).expect("scalar shape")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// The single element of a scalar (or one-element) node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Applies `kind` to `inputs`, recording the result.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let operands: Vec<Operand<'_, T>> = inputs
            .iter()
            .map(|v| {
                let n = &self.nodes[v.0];
                Operand {
                    shape: &n.shape,
                    value: &n.value,
                }
            })
            .collect();
        let Forward {
            shape,
            value,
            saved,
        } = ops::forward(&kind, &operands)?;
        #[cfg(debug_assertions)]
        if operands.iter().all(|o| o.value.iter().all(|x| x.is_finite())) {
            if let OpKind::Ln { floor } = kind {
                debug_assert!(floor > 0.0 || value.iter().all(|x| x.is_finite()));
            } else if !matches!(kind, OpKind::Sqrt) {
                debug_assert!(
                    value.iter().all(|x| x.is_finite()),
                    "{kind} produced a non-finite value from finite inputs"
                );
            }
        }
        let requires_grad = !matches!(kind, OpKind::Detach)
            && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Node {
            origin: Origin::Op(kind, inputs.iter().map(|v| v.0).collect()),
            shape,
            value,
            saved,
            requires_grad,
        }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[x])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let kind = OpKind::Conv2d { stride, pad };
        match bias {
            Some(b) => self.apply(kind, &[x, w, b]),
            None => self.apply(kind, &[x, w]),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::AvgPool2, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::GlobalAvgPool, &[x])
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Flatten, &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::LogSoftmax, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sum(SumAxis::All), &[x])
    }

    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sum(SumAxis::Last), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[x])
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::L2Normalize, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[x])
    }

    pub fn ln(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.apply(OpKind::Ln { floor }, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sqrt, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::SliceRows { start, end }, &[x])
    }

    pub fn detach(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Detach, &[x])
    }

    /// `x·w + b` for `x (N, in)`, `w (in, out)`, `b (out,)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Propagates d`loss` to every leaf that requires a gradient. Leaf
    /// gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 || !root.shape.is_empty() {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut work: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        work.resize_with(loss.0 + 1, || None);
        work[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = work[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.origin {
                Origin::Leaf => {
                    if node.requires_grad {
                        ops::accumulate(&mut self.leaf_grads[i], g);
                    }
                }
                Origin::Constant => {}
                Origin::Op(kind, inputs) => {
                    let need: Vec<bool> =
                        inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
                    if !need.iter().any(|&n| n) {
                        continue;
                    }
                    let operands: Vec<Operand<'_, T>> = inputs
                        .iter()
                        .map(|&j| Operand {
                            shape: &self.nodes[j].shape,
                            value: &self.nodes[j].value,
                        })
                        .collect();
                    let out = Operand {
                        shape: &node.shape,
                        value: &node.value,
                    };
                    let grads = ops::backward(kind, &operands, &out, &node.saved, &g, &need);
                    for (&j, gj) in inputs.iter().zip(grads) {
                        if let Some(gj) = gj {
                            ops::accumulate(&mut work[j], gj);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, if it received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Copies the accumulated gradient of leaf `v` into `t`.
    pub fn write_grad(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn global_avg_pool_of_constant_input() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![2, 2, 2], vec![3.0; 8]).unwrap();
        let y = t.global_avg_pool(x).unwrap();
        assert_eq!(t.shape(y), &[2]);
        assert_eq!(t.value(y), &[3.0, 3.0]);
    }

    #[test]
    fn identity_1x1_conv_reproduces_input() {
        let mut t = Tape::<f64>::new();
        let data: Vec<f64> = (0..3 * 8 * 8).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let x = t.constant(vec![3, 8, 8], data.clone()).unwrap();
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let w = t.constant(vec![3, 3, 1, 1], w).unwrap();
        let y = t.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(t.shape(y), &[3, 8, 8]);
        assert_eq!(t.value(y), data.as_slice());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(&Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap().with_grad());
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn gradients_accumulate_until_cleared() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
        t.zero_grad();
        t.backward(s).unwrap();
        let first = t.grad(x).unwrap().to_vec();
        t.zero_grad();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), first.as_slice());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn matmul_shape_error_names_dims() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains('3') && err.contains('2'), "{err}");
    }

    #[test]
    fn unknown_op_kind() {
        assert!(matches!("softplus".parse::<OpKind>(), Err(Error::UnknownOp(_))));
        assert_eq!("conv2d".parse::<OpKind>().unwrap().name(), "conv2d");
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let d = t.detach(x).unwrap();
        let y = t.mul(x, d).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 2.0]);
    }
}
