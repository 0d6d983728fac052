//! Nested U-shaped encoder/decoder with dense skip connections.
//!
//! Node `(level, col)` holds features at resolution `1 / 2^level`. Column 0
//! is the encoder backbone; node `(i, j)` for `j > 0` convolves the
//! concatenation of every earlier node on its level with the upsampled
//! output of `(i + 1, j - 1)`. The head reads node `(0, depth)`.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const LEAK: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub out_ch: usize,
    pub in_ch: usize,
    pub k: usize,
}

/// One learnable tensor with a stable name used by checkpoints.
#[derive(Debug, Clone)]
pub(crate) struct NamedParam {
    pub name: String,
    pub var: Var,
}

#[derive(Debug, Clone)]
struct Conv {
    weight: usize,
    bias: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct Block {
    first: Conv,
    second: Conv,
}

#[derive(Debug, Clone)]
pub(crate) struct UNetPlusPlus {
    depth: usize,
    /// `nodes[level][col]`
    nodes: Vec<Vec<Block>>,
    head: Conv,
    pub params: Vec<NamedParam>,
}

pub(crate) fn level_width(base: usize, level: usize) -> usize {
    base << level
}

struct Builder<'a> {
    params: Vec<NamedParam>,
    rng: ChaCha8Rng,
    device: &'a Device,
}

impl Builder<'_> {
    fn tensor(&mut self, name: String, dims: &[usize], bound: f64) -> Result<usize> {
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| if bound > 0.0 { self.rng.gen_range(-bound..bound) } else { 0.0 })
            .collect();
        let var = Var::from_tensor(&Tensor::from_vec(data, dims, self.device)?)?;
        self.params.push(NamedParam { name, var });
        Ok(self.params.len() - 1)
    }

    fn conv(&mut self, name: &str, s: ConvShape, gain: f64) -> Result<Conv> {
        let fan_in = (s.in_ch * s.k * s.k) as f64;
        // Kaiming-uniform bound for a leaky ReLU.
        let bound = gain * (6.0 / ((1.0 + LEAK * LEAK) * fan_in)).sqrt();
        let weight = self.tensor(format!("{name}.weight"), &[s.out_ch, s.in_ch, s.k, s.k], bound)?;
        let bias = self.tensor(format!("{name}.bias"), &[s.out_ch], 0.0)?;
        Ok(Conv {
            weight,
            bias,
            pad: s.k / 2,
        })
    }

    fn block(&mut self, name: &str, in_ch: usize, out_ch: usize) -> Result<Block> {
        Ok(Block {
            first: self.conv(&format!("{name}.conv1"), ConvShape { out_ch, in_ch, k: 3 }, 1.0)?,
            second: self.conv(&format!("{name}.conv2"), ConvShape { out_ch, in_ch: out_ch, k: 3 }, 1.0)?,
        })
    }
}

fn leaky_relu(x: &Tensor) -> candle_core::Result<Tensor> {
    // 0.9 * relu(x) + 0.1 * x
    (x.relu()? * (1.0 - LEAK))? + (x * LEAK)?
}

/// Nearest-neighbour 2x upsampling built from reshape and broadcast.
/// candle's own `upsample_nearest2d` backward overwrites rather than
/// accumulates the input gradient, which breaks nodes with several
/// consumers.
fn upsample2(x: &Tensor) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .reshape((n, c, 2 * h, 2 * w))
}

impl UNetPlusPlus {
    pub fn new(depth: usize, base_width: usize, in_ch: usize, out_ch: usize, seed: u64, device: &Device) -> Result<Self> {
        if depth == 0 || base_width == 0 {
            return Err(Error::InvalidArgument("depth and base_width must be positive".into()));
        }
        let mut b = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device,
        };
        let mut nodes: Vec<Vec<Block>> = (0..=depth).map(|_| Vec::new()).collect();
        // Build column by column so that parameter order is independent of
        // how the forward pass walks the graph.
        for col in 0..=depth {
            for (level, row) in nodes.iter_mut().enumerate().take(depth - col + 1) {
                let width = level_width(base_width, level);
                let in_ch = if col == 0 {
                    if level == 0 {
                        in_ch
                    } else {
                        level_width(base_width, level - 1)
                    }
                } else {
                    col * width + level_width(base_width, level + 1)
                };
                row.push(b.block(&format!("x{level}{col}"), in_ch, width)?);
            }
        }
        // Small head so that a fresh model starts close to zero noise.
        let head = b.conv("head", ConvShape { out_ch, in_ch: base_width, k: 1 }, 0.1)?;
        Ok(Self {
            depth,
            nodes,
            head,
            params: b.params,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    fn conv(&self, c: &Conv, x: &Tensor, dtype: DType) -> candle_core::Result<Tensor> {
        let w = self.params[c.weight].var.as_tensor().to_dtype(dtype)?;
        let b = self.params[c.bias].var.as_tensor().to_dtype(dtype)?;
        let y = x.conv2d(&w, c.pad, 1, 1, 1)?;
        y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)
    }

    fn block(&self, blk: &Block, x: &Tensor, dtype: DType) -> candle_core::Result<Tensor> {
        let h = leaky_relu(&self.conv(&blk.first, x, dtype)?)?;
        leaky_relu(&self.conv(&blk.second, &h, dtype)?)
    }

    /// Raw (pre-activation) head output for an NCHW batch whose spatial
    /// dims are multiples of `2^depth`.
    pub fn forward(&self, x: &Tensor, dtype: DType) -> candle_core::Result<Tensor> {
        let x = x.to_dtype(dtype)?;
        let mut grid: Vec<Vec<Tensor>> = (0..=self.depth).map(|_| Vec::new()).collect();
        for level in 0..=self.depth {
            let input = if level == 0 {
                x.clone()
            } else {
                grid[level - 1][0].avg_pool2d(2)?
            };
            let node = self.block(&self.nodes[level][0], &input, dtype)?;
            grid[level].push(node);
        }
        for col in 1..=self.depth {
            for level in 0..=(self.depth - col) {
                let below = &grid[level + 1][col - 1];
                let up = upsample2(below)?;
                let mut parts: Vec<&Tensor> = grid[level].iter().collect();
                parts.push(&up);
                let cat = Tensor::cat(&parts, 1)?;
                let node = self.block(&self.nodes[level][col], &cat, dtype)?;
                grid[level].push(node);
            }
        }
        self.conv(&self.head, &grid[0][self.depth], dtype)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_layout_is_stable() {
        let net = UNetPlusPlus::new(2, 4, 3, 3, 0, &Device::Cpu).unwrap();
        let names: Vec<_> = net.params.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names[0], "x00.conv1.weight");
        assert_eq!(*names.last().unwrap(), "head.bias");
        // 6 nodes x 2 convs x (weight, bias) + head
        assert_eq!(names.len(), 6 * 4 + 2);
        // node (0, 2) sees two level-0 maps and one upsampled level-1 map
        let x02 = net.params.iter().find(|p| p.name == "x02.conv1.weight").unwrap();
        assert_eq!(x02.var.dims(), &[4, 2 * 4 + 8, 3, 3]);
    }

    #[test]
    fn forward_preserves_spatial_shape() {
        let net = UNetPlusPlus::new(3, 4, 3, 3, 1, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 3, 16, 24), DType::F64, &Device::Cpu).unwrap();
        let y = net.forward(&x, DType::F64).unwrap();
        assert_eq!(y.dims(), &[1, 3, 16, 24]);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let dev = Device::Cpu;
        let net = UNetPlusPlus::new(2, 4, 3, 3, 3, &dev).unwrap();
        let x = Tensor::from_vec((0..3 * 144).map(|i| ((i * 7) % 11) as f64 / 11.0).collect::<Vec<f64>>(), (1, 3, 12, 12), &dev)
            .unwrap();
        let r = Tensor::from_vec((0..3 * 144).map(|i| ((i * 5) % 17) as f64 / 17.0 - 0.5).collect::<Vec<f64>>(), (1, 3, 12, 12), &dev)
            .unwrap();
        let obj = || net.forward(&x, DType::F64).unwrap().tanh().unwrap().mul(&r).unwrap().sum_all().unwrap();
        let grads = obj().backward().unwrap();
        // every node of a depth-2 net, including those with several consumers
        for p in net.params.iter().filter(|p| p.name.ends_with("conv2.bias")) {
            let base: Vec<f64> = p.var.as_tensor().to_vec1().unwrap();
            let analytic: Vec<f64> = grads.get(&p.var).unwrap().to_vec1().unwrap();
            let at = |d: f64| {
                let mut v = base.clone();
                v[1] += d;
                p.var.set(&Tensor::from_vec(v, base.len(), &dev).unwrap()).unwrap();
                obj().to_scalar::<f64>().unwrap()
            };
            let fd = (at(1e-6) - at(-1e-6)) / 2e-6;
            p.var.set(&Tensor::from_vec(base.clone(), base.len(), &dev).unwrap()).unwrap();
            let err = (fd - analytic[1]).abs() / fd.abs().max(1e-9);
            assert!(err < 1e-4, "{}: analytic {} vs fd {fd}", p.name, analytic[1]);
        }
    }
}
