//! The UNet autoencoder built from holistic scan blocks.
//!
//! Stage layout for a `1 x H x W` input with base width `C`:
//!
//! ```text
//! input projection  3x3 conv 1 -> C              C  x H   x W     (E1 after blocks)
//! encoder 1         blocks @ C
//! downsample        2x2/2 conv C -> 2C           2C x H/2 x W/2   (E2 after blocks)
//! encoder 2         blocks @ 2C
//! downsample        2x2/2 conv 2C -> 4C          4C x H/4 x W/4
//! bottleneck        blocks @ 4C
//! upsample          2x2/2 transposed 4C -> 2C, concat E2 -> 4C
//! decoder 2         blocks @ 4C
//! upsample          2x2/2 transposed 4C -> C, concat E1 -> 2C
//! decoder 1         blocks @ 2C
//! reduce            1x1 conv 2C -> C
//! output projection 3x3 conv C -> 1
//! ```
//!
//! Every LEFN expands to `lefn_expansion` times its stage width.

mod checkpoint;
mod erf;
mod flops;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use erf::{effective_receptive_field, ConvBaseline, Differentiable};
pub use flops::{count_flops, FlopEntry, FlopKind, FlopReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ConvTranspose2x2, ParamStore};
use crate::tensor::Tensor;
use crate::vision::HolisticScanBlock;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Base feature width `C`.
    pub channels: usize,
    pub blocks_per_stage: usize,
    /// State size `N` of every selective scan.
    pub state_size: usize,
    /// Side length of the square input patch.
    pub side: usize,
    /// LEFN hidden width as a multiple of the stage width.
    pub lefn_expansion: usize,
    /// Adds the input map to the output projection.
    pub global_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            blocks_per_stage: 2,
            state_size: 16,
            side: 40,
            lefn_expansion: 4,
            global_residual: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !self.channels.is_multiple_of(2) {
            return Err(Error::domain(format!(
                "feature width must be positive and even, got {}",
                self.channels
            )));
        }
        if self.side == 0 || !self.side.is_multiple_of(4) {
            return Err(Error::domain(format!(
                "input side must be a positive multiple of 4, got {}",
                self.side
            )));
        }
        if self.state_size == 0 || self.lefn_expansion == 0 {
            return Err(Error::domain("state size and LEFN expansion must be at least 1"));
        }
        Ok(())
    }
}

/// Shape of one stage output recorded by [`Model::forward_traced`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageShape {
    pub stage: &'static str,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    input_proj: Conv2d,
    encoder1: Vec<HolisticScanBlock>,
    down1: Conv2d,
    encoder2: Vec<HolisticScanBlock>,
    down2: Conv2d,
    bottleneck: Vec<HolisticScanBlock>,
    up2: ConvTranspose2x2,
    decoder2: Vec<HolisticScanBlock>,
    up1: ConvTranspose2x2,
    decoder1: Vec<HolisticScanBlock>,
    reduce: Conv2d,
    output_proj: Conv2d,
}

/// Gradients of a forward pass with respect to parameters (in store order)
/// and the input map.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

fn blocks(
    store: &mut ParamStore,
    name: &str,
    count: usize,
    width: usize,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<HolisticScanBlock> {
    (0..count)
        .map(|i| {
            HolisticScanBlock::new(
                store,
                &format!("{name}.{i}"),
                width,
                width * cfg.lefn_expansion,
                cfg.state_size,
                rng,
            )
        })
        .collect()
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let c = config.channels;
        let n = config.blocks_per_stage;
        let mut s = ParamStore::new();
        let input_proj = Conv2d::new(&mut s, "input_proj", 1, c, 3, 1, 1, rng);
        let encoder1 = blocks(&mut s, "encoder1", n, c, &config, rng);
        let down1 = Conv2d::new(&mut s, "down1", c, 2 * c, 2, 2, 0, rng);
        let encoder2 = blocks(&mut s, "encoder2", n, 2 * c, &config, rng);
        let down2 = Conv2d::new(&mut s, "down2", 2 * c, 4 * c, 2, 2, 0, rng);
        let bottleneck = blocks(&mut s, "bottleneck", n, 4 * c, &config, rng);
        let up2 = ConvTranspose2x2::new(&mut s, "up2", 4 * c, 2 * c, rng);
        let decoder2 = blocks(&mut s, "decoder2", n, 4 * c, &config, rng);
        let up1 = ConvTranspose2x2::new(&mut s, "up1", 4 * c, c, rng);
        let decoder1 = blocks(&mut s, "decoder1", n, 2 * c, &config, rng);
        let reduce = Conv2d::new(&mut s, "reduce", 2 * c, c, 1, 1, 0, rng);
        let output_proj = Conv2d::new(&mut s, "output_proj", c, 1, 3, 1, 1, rng);
        Ok(Self {
            config,
            params: s,
            input_proj,
            encoder1,
            down1,
            encoder2,
            down2,
            bottleneck,
            up2,
            decoder2,
            up1,
            decoder1,
            reduce,
            output_proj,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// All holistic scan blocks in evaluation order.
    pub fn blocks(&self) -> impl Iterator<Item = &HolisticScanBlock> {
        self.encoder1
            .iter()
            .chain(&self.encoder2)
            .chain(&self.bottleneck)
            .chain(&self.decoder2)
            .chain(&self.decoder1)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.side;
        if shape != [1, s, s] {
            return Err(Error::domain(format!(
                "model expects a 1 x {s} x {s} input, got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Records the computation on `tape`. `p` must come from binding this
    /// model's parameters onto the same tape.
    pub fn graph(&self, tape: &mut Tape, p: &Bound, x: Var, mut trace: Option<&mut Vec<StageShape>>) -> Result<Var> {
        self.check_input(tape.value(x).shape())?;
        let mut record = |tape: &Tape, stage: &'static str, v: Var| {
            if let Some(t) = trace.as_deref_mut() {
                t.push(StageShape {
                    stage,
                    shape: tape.value(v).shape().to_vec(),
                });
            }
        };
        let run = |tape: &mut Tape, blocks: &[HolisticScanBlock], mut h: Var| -> Result<Var> {
            for b in blocks {
                h = b.forward(tape, p, h)?;
            }
            Ok(h)
        };

        let h = self.input_proj.forward(tape, p, x)?;
        record(tape, "input_projection", h);
        let e1 = run(tape, &self.encoder1, h)?;
        record(tape, "encoder1", e1);
        let h = self.down1.forward(tape, p, e1)?;
        record(tape, "downsample1", h);
        let e2 = run(tape, &self.encoder2, h)?;
        record(tape, "encoder2", e2);
        let h = self.down2.forward(tape, p, e2)?;
        record(tape, "downsample2", h);
        let h = run(tape, &self.bottleneck, h)?;
        record(tape, "bottleneck", h);
        let h = self.up2.forward(tape, p, h)?;
        record(tape, "upsample2", h);
        let h = tape.concat_channels(h, e2)?;
        record(tape, "skip2", h);
        let h = run(tape, &self.decoder2, h)?;
        record(tape, "decoder2", h);
        let h = self.up1.forward(tape, p, h)?;
        record(tape, "upsample1", h);
        let h = tape.concat_channels(h, e1)?;
        record(tape, "skip1", h);
        let h = run(tape, &self.decoder1, h)?;
        record(tape, "decoder1", h);
        let h = self.reduce.forward(tape, p, h)?;
        record(tape, "reduce", h);
        let mut out = self.output_proj.forward(tape, p, h)?;
        if self.config.global_residual {
            out = tape.add(out, x)?;
        }
        record(tape, "output", out);
        Ok(out)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(x)?.0)
    }

    /// Forward pass that also returns the shape after every stage.
    pub fn forward_traced(&self, x: &Tensor) -> Result<(Tensor, Vec<StageShape>)> {
        self.check_input(x.shape())?;
        if !x.is_finite() {
            return Err(Error::NonFinite("model input".into()));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let mut trace = Vec::new();
        let out = self.graph(&mut tape, &p, xv, Some(&mut trace))?;
        Ok((tape.value(out).clone(), trace))
    }

    /// Reverse-mode gradients of `sum(upstream * forward(x))`.
    pub fn backward(&self, x: &Tensor, upstream: &Tensor) -> Result<Gradients> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = self.graph(&mut tape, &p, xv, None)?;
        let mut grads = tape.backward(out, upstream.clone())?;
        Ok(Gradients {
            params: self.collect_param_grads(&mut grads, &p),
            input: grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape())),
        })
    }

    /// L1 loss of `forward(x)` against `target` and its parameter gradients.
    pub fn loss_and_grad(&self, x: &Tensor, target: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = self.graph(&mut tape, &p, xv, None)?;
        let loss = tape.l1_loss(out, target)?;
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss, Tensor::scalar(1.0))?;
        Ok((value, self.collect_param_grads(&mut grads, &p)))
    }

    /// L1 loss without building gradients.
    pub fn loss(&self, x: &Tensor, target: &Tensor) -> Result<f64> {
        let pred = self.forward(x)?;
        crate::training::l1_loss(&pred, target)
    }

    fn collect_param_grads(&self, grads: &mut crate::autodiff::Grads, p: &Bound) -> Vec<Tensor> {
        self.params
            .ids()
            .map(|id| {
                grads
                    .take(p.var(id))
                    .unwrap_or_else(|| Tensor::zeros(self.params.get(id).shape()))
            })
            .collect()
    }
}
