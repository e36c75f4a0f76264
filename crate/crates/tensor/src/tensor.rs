use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{invalid, Result, TensorError};
use crate::rng::SplitMix64;
use crate::shape::numel;

/// Maps the gradient of an op's output to one optional gradient per input
/// (in the order the inputs were registered).
pub type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Reference-counted handle to an immutable tensor value and its place in
/// the gradient graph. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    fn make(
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            parents,
            backward,
        }))
    }

    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(invalid(
                "new",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::make(shape.to_vec(), Arc::new(data), false, vec![], None))
    }

    pub(crate) fn from_parts(data: Vec<f64>, shape: Vec<usize>) -> Self {
        Self::make(shape, Arc::new(data), false, vec![], None)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![v], vec![])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_parts(vec![v; numel(shape)], shape.to_vec())
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        Self::from_parts((0..numel(shape)).map(f).collect(), shape.to_vec())
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut SplitMix64) -> Self {
        Self::from_fn(shape, |_| rng.normal() * std)
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SplitMix64) -> Self {
        Self::from_fn(shape, |_| rng.uniform(lo, hi))
    }

    /// Builds the result of a custom differentiable op. `backward` receives
    /// the gradient of the output and returns one entry per parent. When no
    /// parent requires a gradient the graph edge is dropped entirely.
    pub fn from_op<F>(data: Vec<f64>, shape: Vec<usize>, parents: Vec<Tensor>, backward: F) -> Self
    where
        F: Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    {
        if parents.iter().any(|p| p.requires_grad()) {
            Self::make(shape, Arc::new(data), true, parents, Some(Box::new(backward)))
        } else {
            Self::make(shape, Arc::new(data), false, vec![], None)
        }
    }

    /// Same as [`Tensor::from_op`] but reusing an existing buffer (views).
    pub(crate) fn from_op_shared<F>(
        data: Arc<Vec<f64>>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: F,
    ) -> Self
    where
        F: Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    {
        if parents.iter().any(|p| p.requires_grad()) {
            Self::make(shape, data, true, parents, Some(Box::new(backward)))
        } else {
            Self::make(shape, data, false, vec![], None)
        }
    }

    /// A fresh leaf sharing this tensor's values that will collect a gradient.
    pub fn with_grad(&self) -> Self {
        Self::make(self.0.shape.clone(), self.0.data.clone(), true, vec![], None)
    }

    /// A leaf sharing this tensor's values that is cut from the graph.
    pub fn detach(&self) -> Self {
        Self::make(self.0.shape.clone(), self.0.data.clone(), false, vec![], None)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn data_arc(&self) -> Arc<Vec<f64>> {
        self.0.data.clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(invalid("item", format!("shape {:?} is not a scalar", self.shape())));
        }
        Ok(self.0.data[0])
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape() {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(invalid("dims4", format!("expected 4-d tensor, got {:?}", self.shape()))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape() {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(invalid("dims3", format!("expected 3-d tensor, got {:?}", self.shape()))),
        }
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Reverse-mode sweep from this single-element tensor. Leaf tensors that
    /// require a gradient accumulate into their stored gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.backward {
                Some(bw) => {
                    let pgs = bw(&g);
                    debug_assert_eq!(pgs.len(), node.0.parents.len());
                    for (p, pg) in node.0.parents.iter().zip(pgs) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = node.0.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable through gradient-requiring edges, inputs before outputs.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.0.parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

impl Drop for Node {
    // Long op chains would otherwise drop recursively, one stack frame per node.
    fn drop(&mut self) {
        let mut pending: Vec<Tensor> = std::mem::take(&mut self.parents);
        while let Some(t) = pending.pop() {
            if let Ok(mut node) = Arc::try_unwrap(t.0) {
                pending.append(&mut node.parents);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_sum_grad_is_ones() {
        let x = Tensor::new(vec![1.0, -2.0, 3.0, 0.5], &[2, 2]).unwrap().with_grad();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn square_grad_is_two_x() {
        let x = Tensor::new(vec![1.0, -2.0, 3.0], &[3]).unwrap().with_grad();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let x = Tensor::ones(&[3]).with_grad();
        assert!(matches!(x.scale(2.0).backward(), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn detached_tensor_gets_no_grad() {
        let x = Tensor::ones(&[3]).with_grad();
        let d = x.detach();
        let loss = x.add(&d).unwrap().mul(&d).unwrap().sum();
        loss.backward().unwrap();
        assert!(d.grad().is_none());
        assert_eq!(x.grad().unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*a + x*b + exp(x): dy/dx = a + b + exp(x)
        let x = Tensor::new(vec![0.3, -0.7], &[2]).unwrap().with_grad();
        let a = Tensor::new(vec![2.0, 5.0], &[2]).unwrap();
        let b = Tensor::new(vec![-1.0, 4.0], &[2]).unwrap();
        let y = x.mul(&a).unwrap().add(&x.mul(&b).unwrap()).unwrap().add(&x.exp()).unwrap();
        y.sum().backward().unwrap();
        let g = x.grad().unwrap();
        assert!((g[0] - (1.0 + 0.3f64.exp())).abs() < 1e-15);
        assert!((g[1] - (9.0 + (-0.7f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn no_graph_without_grad() {
        let x = Tensor::ones(&[4]);
        let y = x.exp().sum();
        assert!(y.is_leaf());
        assert!(!y.requires_grad());
        y.backward().unwrap();
    }

    #[test]
    fn deep_chain_drops_without_overflow() {
        let mut t = Tensor::ones(&[1]).with_grad();
        for _ in 0..200_000 {
            t = t.scale(1.0);
        }
        drop(t);
    }
}
