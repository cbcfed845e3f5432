//! Inception-v3 and DenseNet-121 graph builders at full and reduced scale,
//! plus seeded random initialization.

mod densenet;
mod inception;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    ensure_valid, BatchNormSpec, ConvSpec, DenseSpec, GraphError, LayerSpec, NetworkGraph, PoolSpec,
    Rank,
};
use crate::tensor::{Padding, PoolKind, Tensor};
use crate::weights::{WeightStore, WeightsError};

pub use densenet::build_densenet121;
pub use inception::build_inception_v3;

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ZooError {
    #[error("invalid backbone config: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
}

pub type Result<T, E = ZooError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    InceptionV3,
    Densenet121,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::InceptionV3 => "inception_v3",
            Family::Densenet121 => "densenet121",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "inception_v3" | "inception" | "inceptinn" => Ok(Family::InceptionV3),
            "densenet121" | "densenet" | "denseinn" => Ok(Family::Densenet121),
            other => Err(format!("unknown backbone family {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub family: Family,
    /// Multiplies every channel width (rounded, at least 1).
    pub width_scale: f64,
    /// DenseNet: layers per dense block. Inception: number of A, C and E
    /// blocks; the grid reductions run before a non-empty C or E stage.
    pub block_repeat: Option<Vec<usize>>,
    /// DenseNet growth rate (not scaled by `width_scale`).
    pub growth_rate: usize,
    pub include_head: bool,
    pub num_classes: usize,
    pub input_channels: usize,
}

pub const DENSENET121_BLOCKS: [usize; 4] = [6, 12, 24, 16];
pub const INCEPTION_V3_BLOCKS: [usize; 3] = [3, 4, 2];

impl BackboneConfig {
    pub fn full(family: Family, num_classes: usize) -> Self {
        BackboneConfig {
            family,
            width_scale: 1.0,
            block_repeat: None,
            growth_rate: 32,
            include_head: true,
            num_classes,
            input_channels: 3,
        }
    }

    /// Inception: width 1/8 with two A blocks. DenseNet: width 1/4, blocks
    /// (2, 2), growth 8.
    pub fn tiny(family: Family, num_classes: usize) -> Self {
        match family {
            Family::InceptionV3 => BackboneConfig {
                width_scale: 0.125,
                block_repeat: Some(vec![2, 0, 0]),
                ..Self::full(family, num_classes)
            },
            Family::Densenet121 => BackboneConfig {
                width_scale: 0.25,
                block_repeat: Some(vec![2, 2]),
                growth_rate: 8,
                ..Self::full(family, num_classes)
            },
        }
    }

    pub fn blocks(&self) -> Vec<usize> {
        self.block_repeat.clone().unwrap_or_else(|| match self.family {
            Family::InceptionV3 => INCEPTION_V3_BLOCKS.to_vec(),
            Family::Densenet121 => DENSENET121_BLOCKS.to_vec(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ZooError::Config(m));
        if !(self.width_scale > 0.0 && self.width_scale <= 1.0) {
            return bad(format!("width_scale {} outside (0, 1]", self.width_scale));
        }
        if self.input_channels == 0 {
            return bad("input_channels must be >= 1".into());
        }
        if self.include_head && self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        let blocks = self.blocks();
        match self.family {
            Family::Densenet121 => {
                if blocks.is_empty() || blocks.contains(&0) {
                    return bad(format!("dense-block counts must be >= 1, got {blocks:?}"));
                }
                if self.growth_rate == 0 {
                    return bad("growth_rate must be >= 1".into());
                }
            }
            Family::InceptionV3 => {
                if blocks.len() != 3 || blocks[0] == 0 {
                    return bad(format!(
                        "inception blocks are [A, C, E] counts with A >= 1, got {blocks:?}"
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<NetworkGraph> {
        match self.family {
            Family::InceptionV3 => build_inception_v3(self),
            Family::Densenet121 => build_densenet121(self),
        }
    }
}

/// Graph under construction, with channel-width scaling.
pub(crate) struct Builder {
    pub g: NetworkGraph,
    scale: f64,
}

impl Builder {
    pub fn new(name: &str, cfg: &BackboneConfig) -> Self {
        let mut g = NetworkGraph::new(name, Rank::Two, cfg.num_classes);
        g.add(
            "input",
            LayerSpec::Input {
                channels: cfg.input_channels,
                modality: None,
            },
            &[],
        );
        Builder {
            g,
            scale: cfg.width_scale,
        }
    }

    pub fn width(&self, c: usize) -> usize {
        ((c as f64 * self.scale).round() as usize).max(1)
    }

    pub fn conv(
        &mut self,
        id: &str,
        x: (&str, usize),
        out: usize,
        k: [usize; 2],
        s: usize,
        pad: Padding,
    ) -> String {
        self.g.add(
            id,
            LayerSpec::Conv(ConvSpec {
                in_channels: x.1,
                out_channels: out,
                kernel: k.to_vec(),
                stride: vec![s, s],
                padding: vec![pad; 2],
                bias: false,
            }),
            &[x.0],
        )
    }

    pub fn bn(&mut self, id: &str, x: (&str, usize)) -> String {
        self.g.add(
            id,
            LayerSpec::BatchNorm(BatchNormSpec {
                channels: x.1,
                eps: BN_EPS,
                momentum: BN_MOMENTUM,
            }),
            &[x.0],
        )
    }

    pub fn relu(&mut self, id: &str, x: &str) -> String {
        self.g.add(id, LayerSpec::Relu, &[x])
    }

    /// conv -> batch norm -> ReLU, named `{p}.conv`, `{p}.bn`, `{p}.relu`.
    pub fn conv_bn_relu(
        &mut self,
        p: &str,
        x: (&str, usize),
        out: usize,
        k: [usize; 2],
        s: usize,
        pad: Padding,
    ) -> (String, usize) {
        let c = self.conv(&format!("{p}.conv"), x, out, k, s, pad);
        let b = self.bn(&format!("{p}.bn"), (&c, out));
        (self.relu(&format!("{p}.relu"), &b), out)
    }

    pub fn pool(&mut self, id: &str, x: &str, kind: PoolKind, w: usize, s: usize, pad: Padding) -> String {
        self.g.add(
            id,
            LayerSpec::Pool(PoolSpec {
                kind,
                window: vec![w, w],
                stride: vec![s, s],
                padding: vec![pad; 2],
            }),
            &[x],
        )
    }

    pub fn concat(&mut self, id: &str, xs: &[(String, usize)]) -> (String, usize) {
        let ids: Vec<&str> = xs.iter().map(|x| x.0.as_str()).collect();
        (self.g.add(id, LayerSpec::Concat, &ids), xs.iter().map(|x| x.1).sum())
    }

    /// Global average pool, optionally followed by dense + softmax.
    pub fn finish(mut self, x: (&str, usize), cfg: &BackboneConfig) -> Result<NetworkGraph> {
        let gap = self.g.add("head.gap", LayerSpec::GlobalAvgPool, &[x.0]);
        self.g.output = if cfg.include_head {
            let fc = self.g.add(
                "head.fc",
                LayerSpec::Dense(DenseSpec {
                    in_features: x.1,
                    units: cfg.num_classes,
                }),
                &[&gap],
            );
            self.g.add("head.softmax", LayerSpec::Softmax, &[&fc])
        } else {
            gap
        };
        ensure_valid(&self.g)?;
        Ok(self.g)
    }
}

/// Seeded weights for every slot of `g`, stored as f32.
///
/// Conv kernels are He-uniform (bound `sqrt(6 / fan_in)`), dense weights
/// Glorot-uniform (bound `sqrt(6 / (fan_in + fan_out))`), biases zero, and
/// batch norm starts at the identity (gamma 1, beta 0, mean 0, variance 1).
pub fn random_init(g: &NetworkGraph, seed: u64) -> Result<WeightStore> {
    ensure_valid(g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = WeightStore::new();
    for n in &g.nodes {
        for (i, (slot, dims)) in n.weights.iter().zip(n.layer.slot_dims()).enumerate() {
            let t: Tensor<f32> = match (&n.layer, i) {
                (LayerSpec::Conv(_), 0) => {
                    let fan_in: usize = dims[1..].iter().product();
                    uniform(&dims, (6.0 / fan_in as f64).sqrt(), &mut rng)
                }
                (LayerSpec::Dense(d), 0) => {
                    uniform(&dims, (6.0 / (d.in_features + d.units) as f64).sqrt(), &mut rng)
                }
                (LayerSpec::BatchNorm(_), 0 | 3) => full(&dims, 1.0),
                _ => full(&dims, 0.0),
            };
            w.insert(slot.clone(), t)?;
        }
    }
    Ok(w)
}

fn uniform(dims: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(dims, |_| rng.gen_range(-bound..=bound) as f32).expect("slot dims are valid")
}

fn full(dims: &[usize], v: f32) -> Tensor<f32> {
    Tensor::full(dims, v).expect("slot dims are valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = BackboneConfig::tiny(Family::Densenet121, 3);
        assert!(c.validate().is_ok());
        c.block_repeat = Some(vec![2, 0]);
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::full(Family::InceptionV3, 3);
        c.width_scale = 0.0;
        assert!(c.validate().is_err());
        c.width_scale = 1.0;
        c.block_repeat = Some(vec![0, 1, 1]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn random_init_is_seeded_and_complete() {
        let g = BackboneConfig::tiny(Family::Densenet121, 3).build().unwrap();
        let a = random_init(&g, 0).unwrap();
        assert_eq!(a, random_init(&g, 0).unwrap());
        assert_ne!(a, random_init(&g, 1).unwrap());
        g.check_weights(&a).unwrap();
    }
}
