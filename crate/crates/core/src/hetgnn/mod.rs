//! Heterogeneous GraphSAGE over relational entity graphs.
//!
//! Each table gets its own input projection into a shared hidden space; every
//! conv layer is shared by all node and edge types and aggregates the mean of
//! the sampled incoming neighbors together with the node itself.

mod model;
mod sampler;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{hash_str, rng_for};
use crate::tensor::{ParamStore, Tensor};

pub use model::{decode_reconstruction, forward, gather_features, Standardizer};
pub use sampler::{sample_disjoint, sample_neighborhood, NeighborIndex, SampledSubgraph};

/// Per-hop neighbor caps, outward from the seeds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FanoutSpec(Vec<usize>);

impl FanoutSpec {
    pub fn new(caps: Vec<usize>) -> Self {
        FanoutSpec(caps)
    }

    pub fn caps(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for FanoutSpec {
    fn default() -> Self {
        FanoutSpec(vec![20, 10])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: 1024,
            d_hidden: 256,
            layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_hidden == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        Ok(())
    }

    pub fn check_fanout(&self, fanout: &FanoutSpec) -> Result<()> {
        if fanout.len() != self.layers {
            return Err(Error::invalid(format!(
                "fanout has {} hops but the model has {} conv layers",
                fanout.len(),
                self.layers
            )));
        }
        Ok(())
    }
}

pub fn proj_weight(table: &str) -> String {
    format!("proj.{table}.W")
}

pub fn proj_bias(table: &str) -> String {
    format!("proj.{table}.b")
}

pub fn conv_self(layer: usize) -> String {
    format!("conv{layer}.self.W")
}

pub fn conv_neigh(layer: usize) -> String {
    format!("conv{layer}.neigh.W")
}

pub fn conv_bias(layer: usize) -> String {
    format!("conv{layer}.b")
}

pub const DECODER_W: &str = "decoder.W";
pub const DECODER_B: &str = "decoder.b";

/// `fan_in × fan_out` matrix, uniform in ±1/√fan_in, seeded by the name.
pub fn init_weight(name: &str, fan_in: usize, fan_out: usize, seed: u64) -> Tensor<f32> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut rng = rng_for(seed, &[hash_str(seed, name)]);
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound) as f32)
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("consistent shape")
}

/// Projections for `tables`, `cfg.layers` shared conv layers and the decoder.
pub fn init_params(tables: &[String], cfg: &ModelConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut p = ParamStore::new();
    for t in tables {
        p.insert(
            proj_weight(t),
            init_weight(&proj_weight(t), cfg.d_in, cfg.d_hidden, seed),
        );
        p.insert(proj_bias(t), Tensor::zeros(vec![cfg.d_hidden]));
    }
    add_backbone(&mut p, cfg, seed);
    Ok(p)
}

/// Conv layers and decoder only.
pub fn add_backbone(p: &mut ParamStore<f32>, cfg: &ModelConfig, seed: u64) {
    let h = cfg.d_hidden;
    for l in 1..=cfg.layers {
        p.insert(conv_self(l), init_weight(&conv_self(l), h, h, seed));
        p.insert(conv_neigh(l), init_weight(&conv_neigh(l), h, h, seed));
        p.insert(conv_bias(l), Tensor::zeros(vec![h]));
    }
    p.insert(DECODER_W, init_weight(DECODER_W, h, cfg.d_in, seed));
    p.insert(DECODER_B, Tensor::zeros(vec![cfg.d_in]));
}
