//! Named parameter tables and the conv / linear primitives every network in
//! the crate is built from.
//!
//! Each conv or linear layer owns `<id>.weight` and `<id>.bias` in a
//! [`ParamTable`]. Layer identifiers are stable strings such as
//! `down.1.res.conv2`; LoRA adapters attach to layers by identifier.

use std::collections::BTreeMap;

use candle_core::{Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::tensor::{device, tensor_from_vec, tensor_to_vec};

pub type ParamTable = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub id: String,
    pub kind: LayerKind,
}

impl LayerShape {
    pub fn conv(id: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            id: id.into(),
            kind: LayerKind::Conv2d {
                in_channels: cin,
                out_channels: cout,
                kernel,
                stride,
            },
        }
    }

    pub fn linear(id: impl Into<String>, fin: usize, fout: usize) -> Self {
        Self {
            id: id.into(),
            kind: LayerKind::Linear {
                in_features: fin,
                out_features: fout,
            },
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            LayerKind::Linear { in_features, .. } => in_features,
        }
    }

    pub fn fan_out(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d { out_channels, .. } => out_channels,
            LayerKind::Linear { out_features, .. } => out_features,
        }
    }

    pub fn weight_dims(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![out_channels, in_channels, kernel, kernel],
            LayerKind::Linear {
                in_features,
                out_features,
            } => vec![out_features, in_features],
        }
    }

    pub fn weight_key(&self) -> String {
        format!("{}.weight", self.id)
    }

    pub fn bias_key(&self) -> String {
        format!("{}.bias", self.id)
    }
}

pub fn gaussian_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v * std
        })
        .collect()
}

/// Weights ~ N(0, 1 / fan_in), biases zero.
pub fn init_params(layers: &[LayerShape], rng: &mut impl Rng) -> Result<ParamTable> {
    let mut table = ParamTable::new();
    for layer in layers {
        let dims = layer.weight_dims();
        let n: usize = dims.iter().product();
        let std = (1.0 / layer.fan_in() as f64).sqrt();
        table.insert(layer.weight_key(), tensor_from_vec(gaussian_vec(rng, n, std), &dims)?);
        table.insert(
            layer.bias_key(),
            tensor_from_vec(vec![0.0; layer.fan_out()], &[layer.fan_out()])?,
        );
    }
    Ok(table)
}

pub fn get<'a>(table: &'a ParamTable, key: &str) -> Result<&'a Tensor> {
    table
        .get(key)
        .ok_or_else(|| Error::Missing(format!("parameter `{key}`")))
}

/// Deep copy with no autograd tracking.
pub fn detached_copy(table: &ParamTable) -> Result<ParamTable> {
    table
        .iter()
        .map(|(k, v)| Ok((k.clone(), v.detach().copy()?)))
        .collect()
}

/// Exact equality of names, shapes and values.
pub fn tables_equal(a: &ParamTable, b: &ParamTable) -> Result<bool> {
    if a.len() != b.len() {
        return Ok(false);
    }
    for ((ka, va), (kb, vb)) in a.iter().zip(b) {
        if ka != kb || va.dims() != vb.dims() || tensor_to_vec(va)? != tensor_to_vec(vb)? {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn param_count(table: &ParamTable) -> usize {
    table.values().map(|t| t.elem_count()).sum()
}

/// A parameter table whose entries are autograd variables.
pub struct VarTable {
    pub table: ParamTable,
    vars: Vec<Var>,
}

impl VarTable {
    pub fn new(params: &ParamTable) -> Result<Self> {
        let mut table = ParamTable::new();
        let mut vars = Vec::with_capacity(params.len());
        for (k, v) in params {
            let var = Var::from_tensor(&v.detach().copy()?)?;
            table.insert(k.clone(), var.as_tensor().clone());
            vars.push(var);
        }
        Ok(Self { table, vars })
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.clone()
    }

    pub fn snapshot(&self) -> Result<ParamTable> {
        detached_copy(&self.table)
    }
}

/// Adam (decoupled weight decay disabled) over a fixed variable set.
pub struct Adam {
    inner: candle_nn::AdamW,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64) -> Result<Self> {
        use candle_nn::Optimizer;
        let params = candle_nn::ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        };
        Ok(Self {
            inner: candle_nn::AdamW::new(vars, params)?,
        })
    }

    /// Backpropagates `loss` and applies one update.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        use candle_nn::Optimizer;
        let grads = loss.backward()?;
        self.inner.step(&grads)?;
        Ok(())
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::silu(x)?)
}

/// Evaluates layers from a parameter table plus any number of low-rank
/// deltas: `y = conv(x, W) + b + sum_i conv1x1(conv(x, A_i), B_i)`.
pub struct Forward<'a> {
    params: &'a ParamTable,
    adapters: &'a [&'a LoraAdapter],
}

impl<'a> Forward<'a> {
    pub fn new(params: &'a ParamTable, adapters: &'a [&'a LoraAdapter]) -> Self {
        Self { params, adapters }
    }

    pub fn plain(params: &'a ParamTable) -> Self {
        Self {
            params,
            adapters: &[],
        }
    }

    /// Same-padded convolution.
    pub fn conv(&self, id: &str, x: &Tensor, stride: usize) -> Result<Tensor> {
        let w = get(self.params, &format!("{id}.weight"))?;
        let b = get(self.params, &format!("{id}.bias"))?;
        let (cout, cin, k, _) = w.dims4()?;
        let pad = k / 2;
        let mut y = x
            .conv2d(w, pad, stride, 1, 1)?
            .broadcast_add(&b.reshape((1, cout, 1, 1))?)?;
        for adapter in self.adapters {
            if let Some(pair) = adapter.pair(id) {
                let r = pair.rank();
                let a = pair.a.reshape((r, cin, k, k))?;
                let bb = pair.b.reshape((cout, r, 1, 1))?;
                let h = x.conv2d(&a, pad, stride, 1, 1)?;
                y = (y + h.conv2d(&bb, 0, 1, 1, 1)?)?;
            }
        }
        Ok(y)
    }

    /// `x: [n, in] -> [n, out]`
    pub fn linear(&self, id: &str, x: &Tensor) -> Result<Tensor> {
        let w = get(self.params, &format!("{id}.weight"))?;
        let b = get(self.params, &format!("{id}.bias"))?;
        let mut y = x.matmul(&w.t()?)?.broadcast_add(b)?;
        for adapter in self.adapters {
            if let Some(pair) = adapter.pair(id) {
                y = (y + x.matmul(&pair.a.t()?)?.matmul(&pair.b.t()?)?)?;
            }
        }
        Ok(y)
    }
}

pub fn zeros(dims: &[usize]) -> Result<Tensor> {
    Ok(Tensor::zeros(dims, crate::tensor::DTYPE, device())?)
}
