use std::ops::Index;

use crate::{Graph, NodeId, Result, Tensor, TensorError};

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph handles for a bound [`Params`], in parameter order.
#[derive(Debug, Clone)]
pub struct ParamNodes(Vec<NodeId>);

impl Index<usize> for ParamNodes {
    type Output = NodeId;

    fn index(&self, i: usize) -> &NodeId {
        &self.0[i]
    }
}

impl ParamNodes {
    pub fn ids(&self) -> &[NodeId] {
        &self.0
    }
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index. Names must be unique.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name `{name}`");
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Loads every parameter into `graph` as a leaf. Frozen bindings
    /// (`trainable == false`) are constants and cost nothing in backward.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> ParamNodes {
        ParamNodes(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        graph.param(t.clone())
                    } else {
                        graph.constant(t.clone())
                    }
                })
                .collect(),
        )
    }

    /// Adds the leaf gradients recorded in `graph` onto the parameters.
    pub fn collect_grads(&mut self, graph: &Graph, nodes: &ParamNodes) -> Result<()> {
        for (i, (t, &id)) in self.tensors.iter_mut().zip(&nodes.0).enumerate() {
            let grad = graph
                .grad(id)
                .ok_or_else(|| TensorError::MissingGradient(self.names[i].clone()))?;
            t.accumulate_grad(grad);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Overwrites values with those of `other`; layouts must agree exactly.
    pub fn copy_values_from(&mut self, other: &Params) -> Result<()> {
        self.check_layout(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn check_layout(&self, other: &Params) -> Result<()> {
        if self.names != other.names {
            return Err(TensorError::InvalidArgument(
                "parameter sets have different names".into(),
            ));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(TensorError::InvalidArgument(format!(
                    "parameter `{}`: shape {:?} vs {:?}",
                    self.names[i],
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a digest of the raw parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}
