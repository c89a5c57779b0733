//! The blind-spot network.
//!
//! Structure: a 1x1 entry convolution, two parallel branches, and a 1x1
//! fusion head. Each branch opens with a centrally masked convolution of
//! radius `r` (3x3 or 5x5) and continues with residual blocks of 3x3
//! convolutions dilated by `d > r`. Any path from input pixel `q` to output
//! pixel `p` then has offset `p - q = a + d*k` with `a` a non-zero masked
//! tap, so `p == q` would need `d | a` in both coordinates, which `|a| <= r < d`
//! rules out. The output at a pixel never reads that pixel's input.

use serde::{Deserialize, Serialize};

use super::conv::{Conv2d, ConvGrad};
use super::tensor::{Activations, Real};
use crate::error::{Error, Result};
use crate::seed::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsnConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub blocks_per_branch: usize,
    /// Dilations of the 3x3-masked and 5x5-masked branches.
    pub branch_dilations: (usize, usize),
    pub seed: u64,
}

/// He gain for layers feeding a rectifier.
const RELU_GAIN: f64 = std::f64::consts::SQRT_2;
/// Residual deltas and the output layer start small.
const LINEAR_GAIN: f64 = 0.5;

/// Kernel sizes of the masked convolutions opening each branch.
pub const MASKED_KERNELS: [usize; 2] = [3, 5];

impl BsnConfig {
    /// Full-size network: 128 channels, 9 blocks per branch.
    pub fn standard(in_channels: usize) -> Self {
        Self {
            in_channels,
            base_channels: 128,
            blocks_per_branch: 9,
            branch_dilations: (2, 3),
            seed: 0,
        }
    }

    /// Desk-scale network: 32 channels, 2 blocks per branch.
    pub fn tiny(in_channels: usize) -> Self {
        Self {
            base_channels: 32,
            blocks_per_branch: 2,
            ..Self::standard(in_channels)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::Config(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.base_channels < 2 {
            return Err(Error::Config("base_channels must be >= 2".into()));
        }
        if self.blocks_per_branch == 0 {
            return Err(Error::Config("blocks_per_branch must be >= 1".into()));
        }
        let dil = [self.branch_dilations.0, self.branch_dilations.1];
        for (k, d) in MASKED_KERNELS.iter().zip(dil) {
            if d <= k / 2 {
                return Err(Error::Config(format!(
                    "dilation {d} after a masked {k}x{k} convolution would reach the blind spot; need > {}",
                    k / 2
                )));
            }
        }
        Ok(())
    }

    /// Largest offset between an output pixel and any input pixel it reads.
    pub fn receptive_radius(&self) -> usize {
        let dil = [self.branch_dilations.0, self.branch_dilations.1];
        MASKED_KERNELS
            .iter()
            .zip(dil)
            .map(|(k, d)| k / 2 + self.blocks_per_branch * d)
            .max()
            .unwrap_or(0)
    }

    /// Smallest accepted input side: every dilated tap must be able to land
    /// inside the image, otherwise the block weights see nothing but padding.
    pub fn min_input_side(&self) -> usize {
        self.branch_dilations.0.max(self.branch_dilations.1) + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block<T> {
    dilated: Conv2d<T>,
    pointwise: Conv2d<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct Branch<T> {
    masked: Conv2d<T>,
    blocks: Vec<Block<T>>,
    tail: Conv2d<T>,
}

/// The blind-spot denoiser `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bsn<T> {
    config: BsnConfig,
    entry: Conv2d<T>,
    branches: [Branch<T>; 2],
    head: [Conv2d<T>; 3],
}

/// Gradients for every layer, in [`Bsn::named_layers`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct BsnGrads<T> {
    pub layers: Vec<ConvGrad<T>>,
}

impl<T: Real> BsnGrads<T> {
    pub fn zeros_like(model: &Bsn<T>) -> Self {
        Self {
            layers: model.layers().into_iter().map(ConvGrad::zeros_like).collect(),
        }
    }

    /// Flat views in parameter order (weight, bias per layer).
    pub fn slices(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|g| [g.weight.as_slice(), g.bias.as_slice()])
            .collect()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a.weight.iter_mut().zip(&b.weight).chain(a.bias.iter_mut().zip(&b.bias)) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in &mut self.layers {
            for x in g.weight.iter_mut().chain(g.bias.iter_mut()) {
                *x = *x * factor;
            }
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        self.slices().concat()
    }
}

/// Intermediate activations kept for the backward pass.
struct BranchTape<T> {
    masked_out: Activations<T>,
    block_inputs: Vec<Activations<T>>,
    block_mids: Vec<Activations<T>>,
    tail_in: Activations<T>,
    tail_out: Activations<T>,
}

struct Tape<T> {
    input: Activations<T>,
    entry_out: Activations<T>,
    branches: Vec<BranchTape<T>>,
    fused: Activations<T>,
    head_mid: [Activations<T>; 2],
}

impl<T: Real> Bsn<T> {
    pub fn new(config: BsnConfig) -> Result<Self> {
        Self::build(config, true)
    }

    /// A network whose first branch convolutions keep their centre tap.
    /// It does not have the blind-spot property; it exists as a negative
    /// control for [`crate::nn::blind_spot_audit`].
    pub fn new_unmasked(config: BsnConfig) -> Result<Self> {
        Self::build(config, false)
    }

    fn build(config: BsnConfig, masked: bool) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let mut rng = seed::stream(config.seed, &[tag::INIT]);
        let dil = [config.branch_dilations.0, config.branch_dilations.1];

        let mut entry = Conv2d::pointwise(config.in_channels, c);
        entry.init_uniform(&mut rng, RELU_GAIN);
        let branches = [0, 1].map(|b| {
            let mut masked_conv = Conv2d::new(c, c, MASKED_KERNELS[b], 1, masked);
            masked_conv.init_uniform(&mut rng, RELU_GAIN);
            let blocks = (0..config.blocks_per_branch)
                .map(|_| {
                    let mut dilated = Conv2d::new(c, c, 3, dil[b], false);
                    dilated.init_uniform(&mut rng, RELU_GAIN);
                    let mut pointwise = Conv2d::pointwise(c, c);
                    pointwise.init_uniform(&mut rng, LINEAR_GAIN);
                    Block { dilated, pointwise }
                })
                .collect();
            let mut tail = Conv2d::pointwise(c, c);
            tail.init_uniform(&mut rng, RELU_GAIN);
            Branch {
                masked: masked_conv,
                blocks,
                tail,
            }
        });
        let half = (c / 2).max(1);
        let mut head = [
            Conv2d::pointwise(2 * c, c),
            Conv2d::pointwise(c, half),
            Conv2d::pointwise(half, config.in_channels),
        ];
        head[0].init_uniform(&mut rng, RELU_GAIN);
        head[1].init_uniform(&mut rng, RELU_GAIN);
        head[2].init_uniform(&mut rng, LINEAR_GAIN);
        Ok(Self {
            config,
            entry,
            branches,
            head,
        })
    }

    pub fn config(&self) -> &BsnConfig {
        &self.config
    }

    /// Every layer in a fixed order, with stable names.
    pub fn named_layers(&self) -> Vec<(String, &Conv2d<T>)> {
        let mut out = vec![("entry".to_string(), &self.entry)];
        for (b, br) in self.branches.iter().enumerate() {
            out.push((format!("branch{b}.masked"), &br.masked));
            for (i, blk) in br.blocks.iter().enumerate() {
                out.push((format!("branch{b}.block{i}.dilated"), &blk.dilated));
                out.push((format!("branch{b}.block{i}.pointwise"), &blk.pointwise));
            }
            out.push((format!("branch{b}.tail"), &br.tail));
        }
        for (i, h) in self.head.iter().enumerate() {
            out.push((format!("head{i}"), h));
        }
        out
    }

    pub fn layers(&self) -> Vec<&Conv2d<T>> {
        self.named_layers().into_iter().map(|(_, l)| l).collect()
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        let mut out = vec![&mut self.entry];
        for br in self.branches.iter_mut() {
            out.push(&mut br.masked);
            for blk in br.blocks.iter_mut() {
                out.push(&mut blk.dilated);
                out.push(&mut blk.pointwise);
            }
            out.push(&mut br.tail);
        }
        out.extend(self.head.iter_mut());
        out
    }

    /// Mutable flat parameter views, aligned with [`BsnGrads::slices`].
    pub fn parameter_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|l| l.parameter_count()).sum()
    }

    /// Zeroes the last 1x1 convolution so the network outputs exactly zero.
    pub fn zero_output_layer(&mut self) {
        let last = &mut self.head[2];
        last.weight.iter_mut().for_each(|w| *w = T::zero());
        last.bias.iter_mut().for_each(|w| *w = T::zero());
    }

    /// Same architecture in another scalar type.
    pub fn cast<U: Real>(&self) -> Bsn<U> {
        let mut out = Bsn::<U>::build(self.config, self.branches[0].masked.masked).expect("valid config");
        for (dst, src) in out.layers_mut().into_iter().zip(self.layers()) {
            for (d, s) in dst.weight.iter_mut().zip(&src.weight).chain(dst.bias.iter_mut().zip(&src.bias)) {
                *d = U::from_f64(s.to_f64().expect("finite")).expect("representable");
            }
        }
        out
    }

    pub fn check_input(&self, x: &Activations<T>) -> Result<()> {
        if x.channels != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} channels, input has {}",
                self.config.in_channels, x.channels
            )));
        }
        let min = self.config.min_input_side();
        if x.height < min || x.width < min {
            return Err(Error::InputTooSmall {
                height: x.height,
                width: x.width,
                min,
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Activations<T>) -> Result<Activations<T>> {
        self.check_input(x)?;
        Ok(self.run(x, None))
    }

    fn run(&self, x: &Activations<T>, tape: Option<&mut Option<Tape<T>>>) -> Activations<T> {
        let keep = tape.is_some();
        let mut entry_out = self.entry.forward(x);
        entry_out.relu_in_place();

        let mut branch_tapes = Vec::new();
        let mut tails = Vec::with_capacity(2);
        for br in &self.branches {
            let mut h = br.masked.forward(&entry_out);
            h.relu_in_place();
            let masked_out = if keep { Some(h.clone()) } else { None };
            let mut block_inputs = Vec::new();
            let mut block_mids = Vec::new();
            for blk in &br.blocks {
                let mut mid = blk.dilated.forward(&h);
                mid.relu_in_place();
                let delta = blk.pointwise.forward(&mid);
                if keep {
                    block_inputs.push(h.clone());
                    block_mids.push(mid);
                }
                h.add_assign(&delta);
            }
            let mut t = br.tail.forward(&h);
            t.relu_in_place();
            if keep {
                branch_tapes.push(BranchTape {
                    masked_out: masked_out.expect("kept"),
                    block_inputs,
                    block_mids,
                    tail_in: h,
                    tail_out: t.clone(),
                });
            }
            tails.push(t);
        }

        let fused = Activations::concat_channels(&[&tails[0], &tails[1]]);
        let mut m0 = self.head[0].forward(&fused);
        m0.relu_in_place();
        let mut m1 = self.head[1].forward(&m0);
        m1.relu_in_place();
        let out = self.head[2].forward(&m1);

        if let Some(slot) = tape {
            *slot = Some(Tape {
                input: x.clone(),
                entry_out,
                branches: branch_tapes,
                fused,
                head_mid: [m0, m1],
            });
        }
        out
    }

    /// Runs the network, hands the output to `head` (which returns a loss
    /// value and its gradient with respect to the output) and backpropagates.
    pub fn value_and_grad<F>(&self, x: &Activations<T>, head: F) -> Result<(T, BsnGrads<T>)>
    where
        F: FnOnce(&Activations<T>) -> Result<(T, Activations<T>)>,
    {
        self.check_input(x)?;
        let mut tape = None;
        let out = self.run(x, Some(&mut tape));
        let (value, dout) = head(&out)?;
        if !dout.same_shape(&out) {
            return Err(Error::Shape("loss gradient does not match network output".into()));
        }
        let tape = tape.expect("tape recorded");
        Ok((value, self.backward(&tape, &dout)))
    }

    fn backward(&self, tape: &Tape<T>, dout: &Activations<T>) -> BsnGrads<T> {
        let mut grads = BsnGrads::zeros_like(self);
        // Layer indices follow `named_layers`.
        let per_branch = 2 + 2 * self.config.blocks_per_branch;
        let head_base = 1 + 2 * per_branch;

        let [m0, m1] = &tape.head_mid;
        let mut d = self.head[2]
            .backward(m1, dout, &mut grads.layers[head_base + 2], true)
            .expect("input grad");
        d.relu_backward_in_place(m1);
        let mut d = self.head[1]
            .backward(m0, &d, &mut grads.layers[head_base + 1], true)
            .expect("input grad");
        d.relu_backward_in_place(m0);
        let dfused = self.head[0]
            .backward(&tape.fused, &d, &mut grads.layers[head_base], true)
            .expect("input grad");
        let c = self.config.base_channels;
        let dtails = dfused.split_channels(&[c, c]);

        let mut dentry: Option<Activations<T>> = None;
        for (b, (br, bt)) in self.branches.iter().zip(&tape.branches).enumerate() {
            let base = 1 + b * per_branch;
            let mut dt = dtails[b].clone();
            dt.relu_backward_in_place(&bt.tail_out);
            let mut dh = br
                .tail
                .backward(&bt.tail_in, &dt, &mut grads.layers[base + per_branch - 1], true)
                .expect("input grad");
            for (i, blk) in br.blocks.iter().enumerate().rev() {
                let li = base + 1 + 2 * i;
                let mut dmid = blk
                    .pointwise
                    .backward(&bt.block_mids[i], &dh, &mut grads.layers[li + 1], true)
                    .expect("input grad");
                dmid.relu_backward_in_place(&bt.block_mids[i]);
                let dblock = blk
                    .dilated
                    .backward(&bt.block_inputs[i], &dmid, &mut grads.layers[li], true)
                    .expect("input grad");
                dh.add_assign(&dblock);
            }
            dh.relu_backward_in_place(&bt.masked_out);
            let de = br
                .masked
                .backward(&tape.entry_out, &dh, &mut grads.layers[base], true)
                .expect("input grad");
            match dentry.as_mut() {
                Some(acc) => acc.add_assign(&de),
                None => dentry = Some(de),
            }
        }
        let mut de = dentry.expect("two branches");
        de.relu_backward_in_place(&tape.entry_out);
        self.entry.backward(&tape.input, &de, &mut grads.layers[0], false);
        grads
    }
}
