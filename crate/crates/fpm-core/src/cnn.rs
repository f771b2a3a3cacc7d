//! Residual CNN that maps one low-res intensity image to an upsampled
//! two-channel (real, imaginary) complex field. The forward pass is
//! wired onto the differentiation tape so training and inference share
//! one implementation.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{DiffGraph, NodeId, Tensor};
use crate::error::{FpmError, Result};

/// One convolution: weight (C_out, C_in, k, k) and bias (C_out,).
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ArrayD<f64>,
    pub bias: ArrayD<f64>,
}

impl ConvLayer {
    fn he_init(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> ConvLayer {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let normal = StandardNormal;
        let weight = ArrayD::from_shape_simple_fn(IxDyn(&[c_out, c_in, k, k]), || {
            let g: f64 = normal.sample(rng);
            g * std
        });
        ConvLayer {
            weight,
            bias: ArrayD::zeros(IxDyn(&[c_out])),
        }
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Architecture knobs; the defaults are the smallest network that still
/// exercises residual structure and pixel-shuffle upsampling.
#[derive(Clone, Debug)]
pub struct CnnArch {
    pub blocks: usize,
    pub channels: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
}

impl Default for CnnArch {
    fn default() -> Self {
        CnnArch {
            blocks: 4,
            channels: 32,
            kernel: 3,
            leaky_slope: 0.1,
        }
    }
}

impl CnnArch {
    pub fn validate(&self, upsample: usize) -> Result<()> {
        if self.blocks == 0 || self.channels == 0 {
            return Err(FpmError::Config(
                "network needs at least one block and one channel".into(),
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(FpmError::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel
            )));
        }
        if upsample == 0 || self.channels % (upsample * upsample) != 0 {
            return Err(FpmError::Config(format!(
                "{} channels cannot pixel-shuffle by {upsample}",
                self.channels
            )));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(FpmError::Config(format!(
                "leaky slope must be nonnegative, got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }
}

/// The network: a head conv lifting 1 channel to C, K residual blocks of
/// two convolutions each, a pixel-shuffle by the upsample factor, and a
/// 1x1 conv down to the 2 output channels.
#[derive(Clone, Debug)]
pub struct CnnModel {
    pub head: ConvLayer,
    pub blocks: Vec<(ConvLayer, ConvLayer)>,
    pub final_conv: ConvLayer,
    pub upsample: usize,
    pub leaky_slope: f64,
}

impl CnnModel {
    /// He-initialized weights, zero biases, fully determined by the seed.
    pub fn init(arch: &CnnArch, upsample: usize, seed: u64) -> Result<CnnModel> {
        arch.validate(upsample)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = arch.channels;
        let k = arch.kernel;
        let head = ConvLayer::he_init(&mut rng, c, 1, k);
        let blocks = (0..arch.blocks)
            .map(|_| {
                (
                    ConvLayer::he_init(&mut rng, c, c, k),
                    ConvLayer::he_init(&mut rng, c, c, k),
                )
            })
            .collect();
        let final_conv = ConvLayer::he_init(&mut rng, 2, c / (upsample * upsample), 1);
        Ok(CnnModel {
            head,
            blocks,
            final_conv,
            upsample,
            leaky_slope: arch.leaky_slope,
        })
    }

    pub fn param_count(&self) -> usize {
        self.head.len()
            + self
                .blocks
                .iter()
                .map(|(a, b)| a.len() + b.len())
                .sum::<usize>()
            + self.final_conv.len()
    }

    /// All parameter arrays with stable names, in a fixed order; used for
    /// checkpointing and for registering training leaves.
    pub fn named_params(&self) -> Vec<(String, &ArrayD<f64>)> {
        let mut out = vec![
            ("head.weight".to_string(), &self.head.weight),
            ("head.bias".to_string(), &self.head.bias),
        ];
        for (i, (a, b)) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.a.weight"), &a.weight));
            out.push((format!("block{i}.a.bias"), &a.bias));
            out.push((format!("block{i}.b.weight"), &b.weight));
            out.push((format!("block{i}.b.bias"), &b.bias));
        }
        out.push(("final.weight".to_string(), &self.final_conv.weight));
        out.push(("final.bias".to_string(), &self.final_conv.bias));
        out
    }

    /// Overwrites parameters from arrays named as in
    /// [`CnnModel::named_params`]; shapes must match.
    pub fn set_param(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        let slot: &mut ArrayD<f64> = match name {
            "head.weight" => &mut self.head.weight,
            "head.bias" => &mut self.head.bias,
            "final.weight" => &mut self.final_conv.weight,
            "final.bias" => &mut self.final_conv.bias,
            _ => {
                let rest = name
                    .strip_prefix("block")
                    .ok_or_else(|| FpmError::Config(format!("unknown parameter {name}")))?;
                let (idx, field) = rest
                    .split_once('.')
                    .ok_or_else(|| FpmError::Config(format!("unknown parameter {name}")))?;
                let i: usize = idx
                    .parse()
                    .map_err(|_| FpmError::Config(format!("unknown parameter {name}")))?;
                let block = self.blocks.get_mut(i).ok_or_else(|| {
                    FpmError::Config(format!("parameter {name} outside the network"))
                })?;
                match field {
                    "a.weight" => &mut block.0.weight,
                    "a.bias" => &mut block.0.bias,
                    "b.weight" => &mut block.1.weight,
                    "b.bias" => &mut block.1.bias,
                    _ => return Err(FpmError::Config(format!("unknown parameter {name}"))),
                }
            }
        };
        if slot.shape() != value.shape() {
            return Err(FpmError::Size(format!(
                "parameter {name} has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }
}

/// Tape handles for every model parameter, in [`CnnModel::named_params`]
/// order.
pub struct CnnLeaves {
    pub ids: Vec<NodeId>,
    names: Vec<String>,
}

impl CnnLeaves {
    /// Registers every parameter as a graph leaf.
    pub fn register(g: &mut DiffGraph, model: &CnnModel) -> CnnLeaves {
        let mut ids = Vec::new();
        let mut names = Vec::new();
        for (name, array) in model.named_params() {
            ids.push(g.leaf(Tensor::Real(array.clone())));
            names.push(name);
        }
        CnnLeaves { ids, names }
    }

    /// Copies the (possibly updated) leaf values back into the model.
    pub fn write_back(&self, g: &DiffGraph, model: &mut CnnModel) -> Result<()> {
        for (id, name) in self.ids.iter().zip(&self.names) {
            model.set_param(name, g.value(*id).as_real().clone())?;
        }
        Ok(())
    }
}

/// Wires the network forward pass from a (1, H, W) input node to the
/// (2, f*H, f*W) prediction node.
pub fn forward_graph(
    g: &mut DiffGraph,
    model: &CnnModel,
    leaves: &CnnLeaves,
    input: NodeId,
) -> Result<NodeId> {
    let shape = g.value(input).shape().to_vec();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(FpmError::Size(format!(
            "network input must be (1, H, W), got {shape:?}"
        )));
    }
    let slope = model.leaky_slope;
    let mut idx = 0usize;
    let mut next = || {
        let id = leaves.ids[idx];
        idx += 1;
        id
    };
    let (hw, hb) = (next(), next());
    let mut x = g.conv2d(input, hw, hb)?;
    for _ in 0..model.blocks.len() {
        let (wa, ba, wb, bb) = (next(), next(), next(), next());
        let t = g.conv2d(x, wa, ba)?;
        let t = g.leaky_relu(t, slope)?;
        let t = g.conv2d(t, wb, bb)?;
        x = g.add(x, t)?;
    }
    let up = g.pixel_shuffle(x, model.upsample)?;
    let (fw, fb) = (next(), next());
    g.conv2d(up, fw, fb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_architecture_shapes_and_count() {
        let arch = CnnArch::default();
        let model = CnnModel::init(&arch, 2, 7).unwrap();
        assert_eq!(model.head.weight.shape(), &[32, 1, 3, 3]);
        assert_eq!(model.blocks.len(), 4);
        assert_eq!(model.final_conv.weight.shape(), &[2, 8, 1, 1]);
        let expect = (32 * 9 + 32) + 4 * 2 * (32 * 32 * 9 + 32) + (2 * 8 + 2);
        assert_eq!(model.param_count(), expect);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let arch = CnnArch::default();
        let a = CnnModel::init(&arch, 2, 3).unwrap();
        let b = CnnModel::init(&arch, 2, 3).unwrap();
        let c = CnnModel::init(&arch, 2, 4).unwrap();
        assert_eq!(a.head.weight, b.head.weight);
        assert_eq!(a.blocks[2].1.weight, b.blocks[2].1.weight);
        assert_ne!(a.head.weight, c.head.weight);
    }

    #[test]
    fn arch_validation() {
        let mut arch = CnnArch::default();
        arch.kernel = 4;
        assert!(arch.validate(2).is_err());
        let mut arch = CnnArch::default();
        arch.channels = 30;
        assert!(arch.validate(2).is_err());
        assert!(CnnArch::default().validate(2).is_ok());
    }

    #[test]
    fn forward_emits_upsampled_two_channels() {
        let arch = CnnArch {
            blocks: 2,
            channels: 8,
            kernel: 3,
            leaky_slope: 0.1,
        };
        let model = CnnModel::init(&arch, 2, 11).unwrap();
        let mut g = DiffGraph::new();
        let leaves = CnnLeaves::register(&mut g, &model);
        let input = g.leaf(Tensor::Real(ArrayD::from_shape_simple_fn(
            IxDyn(&[1, 6, 5]),
            || 0.3,
        )));
        let out = forward_graph(&mut g, &model, &leaves, input).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 12, 10]);

        let bad = g.leaf(Tensor::Real(ArrayD::zeros(IxDyn(&[6, 5]))));
        assert!(forward_graph(&mut g, &model, &leaves, bad).is_err());
    }

    #[test]
    fn set_param_round_trip_and_errors() {
        let arch = CnnArch {
            blocks: 1,
            channels: 4,
            kernel: 3,
            leaky_slope: 0.1,
        };
        let mut model = CnnModel::init(&arch, 2, 5).unwrap();
        let named: Vec<(String, ArrayD<f64>)> = model
            .named_params()
            .into_iter()
            .map(|(n, a)| (n, a.clone()))
            .collect();
        for (n, a) in &named {
            model.set_param(n, a.clone()).unwrap();
        }
        assert!(model.set_param("nope", named[0].1.clone()).is_err());
        assert!(model
            .set_param("head.bias", ArrayD::zeros(IxDyn(&[7])))
            .is_err());
        assert!(model.set_param("block9.a.weight", named[0].1.clone()).is_err());
    }
}
