//! Dense f64 tensors with reverse-mode gradients.
//!
//! The op set is deliberately small: matmul, 3x3 conv (pad 1, stride 1),
//! elementwise add/sub/mul, scalar affine, ReLU, group-mean normalization,
//! mean/sum reductions, softmax cross-entropy, row L2-normalization and a
//! couple of gather/concat helpers. That is exactly what the denoiser and
//! the dual encoder need.
//!
//! Tensors are immutable values. Ops are pure functions that record the
//! computation graph whenever an input is gradient-tracked; [`backward`]
//! walks that graph once and returns per-parameter gradients. Parameter
//! updates produce fresh tensors instead of mutating in place, which keeps
//! everything safe to share across threads.

mod backward;
mod kernels;
mod ops;
pub mod io;

pub use backward::{backward, Gradients};

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Graph record: which op produced a tensor and from which parents.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Affine { x: Tensor, scale: f64 },
    Matmul(Tensor, Tensor),
    Transpose(Tensor),
    Conv2d { x: Tensor, kernel: Tensor },
    ChannelBias { x: Tensor, bias: Tensor },
    Relu(Tensor),
    GroupMeanNorm { x: Tensor, groups: usize },
    SpatialMean(Tensor),
    MeanAll(Tensor),
    SumAll(Tensor),
    SoftmaxCrossEntropy { logits: Tensor, targets: Vec<usize> },
    L2NormalizeRows(Tensor),
    GatherMeanRows { table: Tensor, lists: Vec<Vec<usize>> },
    ConcatRows(Vec<Tensor>),
}

#[derive(Debug)]
struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    op: Op,
    tracked: bool,
}

/// Immutable dense tensor of 64-bit floats in row-major order.
#[derive(Clone, Debug)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl Tensor {
    pub(crate) fn new(shape: Vec<usize>, data: Vec<f64>, op: Op, tracked: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(Inner { id: fresh_id(), shape, data: Arc::new(data), op, tracked }),
        }
    }

    /// Untracked leaf tensor from raw data.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dim(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Dim(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor::new(shape.to_vec(), data, Op::Leaf, false))
    }

    /// Gradient-tracked leaf (a trainable parameter).
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(Tensor::new(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n], Op::Leaf, false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n], Op::Leaf, false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(vec![1], vec![value], Op::Leaf, false)
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn is_tracked(&self) -> bool {
        self.inner.tracked
    }

    pub(crate) fn op(&self) -> &Op {
        &self.inner.op
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() needs a scalar, shape is {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }

    /// Same data, cut loose from the graph. Cheap (shares the buffer).
    pub fn detach(&self) -> Tensor {
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape: self.inner.shape.clone(),
                data: Arc::clone(&self.inner.data),
                op: Op::Leaf,
                tracked: false,
            }),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}

/// One named parameter: the tensor plus its trainable flag.
#[derive(Clone, Debug)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named map of model parameters. Frozen entries never receive gradients
/// and are never touched by optimizer steps.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        // A trainable parameter must be a tracked leaf so gradients reach it.
        let tensor = if trainable && !tensor.is_tracked() {
            Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, true)
        } else if !trainable && tensor.is_tracked() {
            tensor.detach()
        } else {
            tensor
        };
        self.entries.insert(name.to_string(), Param { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|p| p.trainable).unwrap_or(false)
    }

    /// Replace the data of an existing parameter, keeping its flag.
    pub fn set_data(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
        if data.len() != entry.tensor.numel() {
            return Err(Error::Dim(format!(
                "parameter {name:?} has {} elements, got {}",
                entry.tensor.numel(),
                data.len()
            )));
        }
        entry.tensor = Tensor::new(entry.tensor.shape().to_vec(), data, Op::Leaf, entry.trainable);
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
        if entry.trainable != trainable {
            entry.trainable = trainable;
            entry.tensor =
                Tensor::new(entry.tensor.shape().to_vec(), entry.tensor.data().to_vec(), Op::Leaf, trainable);
        }
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        let names: Vec<String> = self.entries.keys().cloned().collect();
        for name in names {
            self.set_trainable(&name, false).expect("name exists");
        }
    }

    /// Iterate in deterministic (sorted-name) order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_elements(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Untracked snapshot for inference; no graph is recorded through it.
    pub fn detached(&self) -> ParamSet {
        let entries = self
            .entries
            .iter()
            .map(|(k, p)| (k.clone(), Param { tensor: p.tensor.detach(), trainable: false }))
            .collect();
        ParamSet { entries }
    }

    /// Look up the name of a parameter by graph node id.
    pub(crate) fn name_of_id(&self, id: u64) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, p)| p.tensor.id() == id)
            .map(|(k, _)| k.as_str())
    }
}
