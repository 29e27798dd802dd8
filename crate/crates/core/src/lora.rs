//! Low-rank adapters over the denoiser's conv and MLP layers.
//!
//! Every target layer with weight `W` (viewed as `fan_out x fan_in`) gets a
//! pair `A: rank x fan_in`, `B: fan_out x rank`; the effective weight is
//! `W + sum_i B_i A_i` over all applied adapters, with unit scaling. `A` is
//! drawn from N(0, 0.02^2) and `B` starts at zero, so a fresh adapter leaves
//! the network unchanged.

use std::collections::BTreeMap;

use candle_core::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{DenoiserWeights, EpsModel};
use crate::error::{Error, Result};
use crate::nn::{gaussian_vec, tables_equal, LayerShape, ParamTable};
use crate::perception::Condition;
use crate::tensor::{tensor_from_vec, LatentTensor};

pub const DEFAULT_RANK: usize = 4;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterRole {
    Pixel,
    Semantic,
}

impl AdapterRole {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterRole::Pixel => "pixel",
            AdapterRole::Semantic => "semantic",
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoraPair {
    pub layer: LayerShape,
    /// `[rank, fan_in]`
    pub a: Tensor,
    /// `[fan_out, rank]`
    pub b: Tensor,
}

impl LoraPair {
    pub fn rank(&self) -> usize {
        self.a.dims()[0]
    }

    /// `B·A` reshaped to the base layer's weight shape.
    pub fn delta(&self) -> Result<Tensor> {
        Ok(self.b.matmul(&self.a)?.reshape(self.layer.weight_dims())?)
    }
}

#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub role: AdapterRole,
    pub rank: usize,
    layers: BTreeMap<String, LoraPair>,
}

impl LoraAdapter {
    pub fn pair(&self, id: &str) -> Option<&LoraPair> {
        self.layers.get(id)
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerShape> {
        self.layers.values().map(|p| &p.layer)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Flattened `(layer-id.A | layer-id.B) -> tensor` table.
    pub fn params(&self) -> ParamTable {
        let mut t = ParamTable::new();
        for (id, p) in &self.layers {
            t.insert(format!("{id}.A"), p.a.clone());
            t.insert(format!("{id}.B"), p.b.clone());
        }
        t
    }

    pub fn from_params(
        role: AdapterRole,
        rank: usize,
        layers: &[LayerShape],
        table: &ParamTable,
    ) -> Result<Self> {
        let mut out = BTreeMap::new();
        for layer in layers {
            let get = |suffix: &str| {
                table
                    .get(&format!("{}.{suffix}", layer.id))
                    .cloned()
                    .ok_or_else(|| Error::Missing(format!("adapter tensor {}.{suffix}", layer.id)))
            };
            let (a, b) = (get("A")?, get("B")?);
            if a.dims() != [rank, layer.fan_in()] || b.dims() != [layer.fan_out(), rank] {
                return Err(Error::Shape(format!("adapter pair for `{}`", layer.id)));
            }
            out.insert(
                layer.id.clone(),
                LoraPair {
                    layer: layer.clone(),
                    a,
                    b,
                },
            );
        }
        if out.len() * 2 != table.len() {
            return Err(Error::Shape("adapter table has unexpected entries".into()));
        }
        Ok(Self {
            role,
            rank,
            layers: out,
        })
    }

    /// Copy whose `A`/`B` tensors are autograd variables.
    pub fn trainable(&self) -> Result<(LoraAdapter, Vec<Var>)> {
        let mut vars = Vec::with_capacity(self.layers.len() * 2);
        let mut layers = BTreeMap::new();
        for (id, p) in &self.layers {
            let a = Var::from_tensor(&p.a.detach().copy()?)?;
            let b = Var::from_tensor(&p.b.detach().copy()?)?;
            layers.insert(
                id.clone(),
                LoraPair {
                    layer: p.layer.clone(),
                    a: a.as_tensor().clone(),
                    b: b.as_tensor().clone(),
                },
            );
            vars.push(a);
            vars.push(b);
        }
        Ok((
            LoraAdapter {
                role: self.role,
                rank: self.rank,
                layers,
            },
            vars,
        ))
    }

    /// Deep copy with no autograd tracking.
    pub fn frozen(&self) -> Result<LoraAdapter> {
        let layers = self
            .layers
            .iter()
            .map(|(id, p)| {
                Ok((
                    id.clone(),
                    LoraPair {
                        layer: p.layer.clone(),
                        a: p.a.detach().copy()?,
                        b: p.b.detach().copy()?,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Ok(LoraAdapter {
            role: self.role,
            rank: self.rank,
            layers,
        })
    }

    pub fn same_values(&self, other: &LoraAdapter) -> Result<bool> {
        Ok(self.role == other.role
            && self.rank == other.rank
            && tables_equal(&self.params(), &other.params())?)
    }
}

/// Fresh adapter: `A ~ N(0, 0.02^2)` from a seeded generator, `B = 0`.
pub fn init_lora(
    targets: &[LayerShape],
    rank: usize,
    seed: u64,
    role: AdapterRole,
) -> Result<LoraAdapter> {
    if rank == 0 {
        return Err(Error::InvalidRange("LoRA rank must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = BTreeMap::new();
    for layer in targets {
        let limit = layer.fan_in().min(layer.fan_out());
        if rank > limit {
            return Err(Error::RankTooLarge {
                layer: layer.id.clone(),
                rank,
                limit,
            });
        }
        let a = tensor_from_vec(
            gaussian_vec(&mut rng, rank * layer.fan_in(), INIT_STD),
            &[rank, layer.fan_in()],
        )?;
        let b = tensor_from_vec(vec![0.0; layer.fan_out() * rank], &[layer.fan_out(), rank])?;
        layers.insert(
            layer.id.clone(),
            LoraPair {
                layer: layer.clone(),
                a,
                b,
            },
        );
    }
    Ok(LoraAdapter { role, rank, layers })
}

fn check_targets(base: &DenoiserWeights, adapters: &[&LoraAdapter]) -> Result<()> {
    let known = base.config().layers();
    for adapter in adapters {
        for layer in adapter.layers() {
            match known.iter().find(|k| k.id == layer.id) {
                Some(k) if k == layer => {}
                Some(_) => return Err(Error::Shape(format!("adapter layer `{}`", layer.id))),
                None => return Err(Error::UnknownLayer(layer.id.clone())),
            }
        }
    }
    Ok(())
}

/// A base denoiser evaluated with `W + sum B_i A_i` per target layer. The
/// base weights are borrowed and never modified.
#[derive(Clone)]
pub struct AdaptedDenoiser<'a> {
    base: &'a DenoiserWeights,
    adapters: Vec<&'a LoraAdapter>,
}

impl<'a> AdaptedDenoiser<'a> {
    pub fn base(&self) -> &DenoiserWeights {
        self.base
    }

    pub fn adapters(&self) -> &[&'a LoraAdapter] {
        &self.adapters
    }
}

impl EpsModel for AdaptedDenoiser<'_> {
    fn eps(&self, z: &LatentTensor, t: &[usize], cond: &[Condition]) -> Result<LatentTensor> {
        self.base.forward_unchecked(z, t, cond, &self.adapters)
    }
}

pub fn apply_adapters<'a>(
    base: &'a DenoiserWeights,
    adapters: &[&'a LoraAdapter],
) -> Result<AdaptedDenoiser<'a>> {
    check_targets(base, adapters)?;
    Ok(AdaptedDenoiser {
        base,
        adapters: adapters.to_vec(),
    })
}

/// New weights with every delta materialized: `W <- W + sum_i B_i A_i`.
pub fn merge(base: &DenoiserWeights, adapters: &[&LoraAdapter]) -> Result<DenoiserWeights> {
    check_targets(base, adapters)?;
    let mut params = base.params().clone();
    for adapter in adapters {
        for (id, pair) in &adapter.layers {
            let key = format!("{id}.weight");
            let w = params
                .get(&key)
                .ok_or_else(|| Error::UnknownLayer(id.clone()))?;
            let merged = (w + pair.delta()?)?;
            params.insert(key, merged);
        }
    }
    DenoiserWeights::from_params(base.config().clone(), base.role(), params)
}

/// The pixel adapter (frozen) and the semantic adapter (trainable) over a
/// shared base.
#[derive(Clone, Debug)]
pub struct PisaGroup {
    pub pixel: LoraAdapter,
    pub semantic: LoraAdapter,
    pixel_trainable: bool,
}

impl PisaGroup {
    /// Group for semantic-stage training; the pixel adapter is frozen.
    pub fn new(pixel: LoraAdapter, semantic: LoraAdapter) -> Result<Self> {
        if pixel.role != AdapterRole::Pixel || semantic.role != AdapterRole::Semantic {
            return Err(Error::Role {
                expected: "pixel + semantic".into(),
                found: format!("{} + {}", pixel.role.as_str(), semantic.role.as_str()),
            });
        }
        Ok(Self {
            pixel,
            semantic,
            pixel_trainable: false,
        })
    }

    pub fn pixel_trainable(&self) -> bool {
        self.pixel_trainable
    }

    pub fn adapters(&self) -> [&LoraAdapter; 2] {
        [&self.pixel, &self.semantic]
    }
}
