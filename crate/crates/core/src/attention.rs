//! Multiplicative attention blocks.
//!
//! Every block squeezes its input to a small descriptor, maps it through a
//! two-layer bottleneck and a sigmoid, and rescales the input with the
//! resulting weights in `(0, 1)`.

use rand::Rng;

use crate::error::{FusionError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{kaiming_uniform, ParamId, ParamStore, Tensor};

/// Spatial attention kernel size.
pub const SPATIAL_KERNEL: usize = 7;
/// Hidden width of the RGB calibration bottleneck.
pub const CALIBRATION_HIDDEN: usize = 8;
/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

/// Reduction ratio for a `channels`-wide squeeze.
///
/// 16 for wide inputs, smaller for narrow ones so the bottleneck keeps at
/// least four units. Always divides `channels`.
pub fn reduction_ratio(channels: usize) -> usize {
    let mut r = 16.min(channels / 4).max(1);
    while !channels.is_multiple_of(r) {
        r -= 1;
    }
    r
}

fn add_dense<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: String,
    out: usize,
    inp: usize,
    rng: &mut R,
) -> Result<ParamId> {
    store.add(name, kaiming_uniform(&[out, inp], inp, rng))
}

/// Squeeze-and-excitation over channels: `W = sigmoid(w2 relu(w1 avgpool(f)))`.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub channels: usize,
    pub reduction: usize,
    w1: ParamId,
    w2: ParamId,
}

impl ChannelAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut R) -> Result<Self> {
        Self::with_reduction(store, prefix, channels, reduction_ratio(channels), rng)
    }

    pub fn with_reduction<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(FusionError::invalid(format!(
                "reduction {reduction} does not divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            channels,
            reduction,
            w1: add_dense(store, format!("{prefix}.w1"), hidden, channels, rng)?,
            w2: add_dense(store, format!("{prefix}.w2"), channels, hidden, rng)?,
        })
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w1, self.w2]
    }

    /// Per-channel weights, shape `[C]`.
    pub fn weights(&self, tape: &mut Tape, p: &[Var], f: Var) -> Result<Var> {
        let (c, _, _) = tape.value(f).chw()?;
        if c != self.channels {
            return Err(FusionError::shape(format!(
                "channel attention configured for {} channels, got {c}",
                self.channels
            )));
        }
        let pooled = tape.global_avg_pool(f)?;
        let hidden = tape.linear(pooled, p[self.w1.index()], None)?;
        let hidden = tape.relu(hidden)?;
        let logits = tape.linear(hidden, p[self.w2.index()], None)?;
        tape.sigmoid(logits)
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], f: Var) -> Result<Var> {
        let w = self.weights(tape, p, f)?;
        tape.scale_channels(f, w)
    }
}

/// `W = sigmoid(conv([avg_c(f); max_c(f)]))`, one weight per pixel.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub kernel: usize,
    conv: ParamId,
    bias: ParamId,
}

impl SpatialAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        Self::with_kernel(store, prefix, SPATIAL_KERNEL, rng)
    }

    pub fn with_kernel<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, kernel: usize, rng: &mut R) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(FusionError::invalid(format!("spatial attention kernel must be odd, got {kernel}")));
        }
        let fan_in = 2 * kernel * kernel;
        Ok(Self {
            kernel,
            conv: store.add(format!("{prefix}.weight"), kaiming_uniform(&[1, 2, kernel, kernel], fan_in, rng))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[1]))?,
        })
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.conv, self.bias]
    }

    /// Weight map, shape `[1,H,W]`.
    pub fn weights(&self, tape: &mut Tape, p: &[Var], f: Var) -> Result<Var> {
        let pooled = tape.spatial_pool_pair(f)?;
        let logits = tape.conv2d(pooled, p[self.conv.index()], Some(p[self.bias.index()]))?;
        tape.sigmoid(logits)
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], f: Var) -> Result<Var> {
        let w = self.weights(tape, p, f)?;
        tape.scale_pixels(f, w)
    }
}

/// Channel attention followed by spatial attention.
#[derive(Debug, Clone)]
pub struct Cbam {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

impl Cbam {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            channel: ChannelAttention::new(store, &format!("{prefix}.channel"), channels, rng)?,
            spatial: SpatialAttention::new(store, &format!("{prefix}.spatial"), rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], f: Var) -> Result<Var> {
        let f = self.channel.forward(tape, p, f)?;
        self.spatial.forward(tape, p, f)
    }
}

/// Per-channel gains for a magnitude spectrum:
/// `W = sigmoid(w4 prelu(w3 avgpool(|F|)))`.
#[derive(Debug, Clone)]
pub struct FrequencyAttention {
    pub channels: usize,
    w3: ParamId,
    w4: ParamId,
    slope: ParamId,
}

impl FrequencyAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut R) -> Result<Self> {
        let hidden = channels / reduction_ratio(channels);
        Ok(Self {
            channels,
            w3: add_dense(store, format!("{prefix}.w3"), hidden, channels, rng)?,
            w4: add_dense(store, format!("{prefix}.w4"), channels, hidden, rng)?,
            slope: store.add(format!("{prefix}.prelu"), Tensor::scalar(PRELU_INIT))?,
        })
    }

    pub fn params(&self) -> [ParamId; 3] {
        [self.w3, self.w4, self.slope]
    }

    pub fn weights(&self, tape: &mut Tape, p: &[Var], mag: Var) -> Result<Var> {
        let (c, _, _) = tape.value(mag).chw()?;
        if c != self.channels {
            return Err(FusionError::shape(format!(
                "frequency attention configured for {} channels, got {c}",
                self.channels
            )));
        }
        let pooled = tape.global_avg_pool(mag)?;
        let hidden = tape.linear(pooled, p[self.w3.index()], None)?;
        let hidden = tape.prelu(hidden, p[self.slope.index()])?;
        let logits = tape.linear(hidden, p[self.w4.index()], None)?;
        tape.sigmoid(logits)
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], mag: Var) -> Result<Var> {
        let w = self.weights(tape, p, mag)?;
        tape.scale_channels(mag, w)
    }
}

/// Initial bias of the calibration output layer; the gains start near
/// `sigmoid(2) = 0.88` so the gate is mostly open at initialization.
pub const CALIBRATION_GATE_INIT: f64 = 2.0;

/// Final RGB rebalancing:
/// `E_final = E * sigmoid(w2 relu(w1 avgpool(E) + b1) + b2)`.
#[derive(Debug, Clone)]
pub struct ChannelCalibration {
    pub hidden: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl ChannelCalibration {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        Self::with_hidden(store, prefix, CALIBRATION_HIDDEN, rng)
    }

    pub fn with_hidden<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            hidden,
            w1: add_dense(store, format!("{prefix}.w1"), hidden, 3, rng)?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden]))?,
            w2: add_dense(store, format!("{prefix}.w2"), 3, hidden, rng)?,
            b2: store.add(format!("{prefix}.b2"), Tensor::full(&[3], CALIBRATION_GATE_INIT))?,
        })
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn weights(&self, tape: &mut Tape, p: &[Var], e: Var) -> Result<Var> {
        let (c, _, _) = tape.value(e).chw()?;
        if c != 3 {
            return Err(FusionError::shape(format!("channel calibration needs 3 channels, got {c}")));
        }
        let pooled = tape.global_avg_pool(e)?;
        let hidden = tape.linear(pooled, p[self.w1.index()], Some(p[self.b1.index()]))?;
        let hidden = tape.relu(hidden)?;
        let logits = tape.linear(hidden, p[self.w2.index()], Some(p[self.b2.index()]))?;
        tape.sigmoid(logits)
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], e: Var) -> Result<Var> {
        let w = self.weights(tape, p, e)?;
        tape.scale_channels(e, w)
    }
}
