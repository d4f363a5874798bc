//! The complete enhancement network.
//!
//! Per RGB channel: a spatial branch (dedicated kernel size, optional
//! CBAM, residual), a frequency branch (FFT magnitude lifted by 1x1 convs,
//! optional frequency attention, original phase, inverse FFT) and a
//! frequency-guided fusion conv. The three fused maps, each with its input
//! channel added back, feed an inter-channel head: `T_d`, `T_f` (which also
//! sees the raw frequency features), global CBAM, the decoder `T_e` whose
//! output is added to the input logits before the sigmoid, and finally RGB
//! calibration.

use std::fmt;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{Cbam, ChannelCalibration, FrequencyAttention, PRELU_INIT};
use crate::error::{FusionError, Result};
use crate::gradcheck::Differentiable;
use crate::tape::{Tape, Var};
use crate::tensor::{kaiming_uniform, ParamId, ParamStore, Tensor};

/// Epsilon of the per-channel magnitude normalization.
pub const NORM_EPS: f64 = 1e-5;
/// Smallest spatial extent accepted by [`FusionModel::forward`].
pub const MIN_EXTENT: usize = 8;
/// Base width of the "tiny" preset.
pub const TINY_WIDTH: usize = 4;
/// Base width of the "paper" preset (about 0.28M parameters).
pub const PAPER_WIDTH: usize = 38;
/// Initial weight scale of the last decoder conv, so the output starts close
/// to the input instead of saturating the sigmoid.
pub const OUTPUT_INIT_SCALE: f64 = 0.1;
/// Input values are clamped to `[SKIP_CLAMP, 1 - SKIP_CLAMP]` before the logit skip.
pub const SKIP_CLAMP: f64 = 0.01;

/// Input colour channel handled by a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rgb {
    R,
    G,
    B,
}

impl Rgb {
    pub const ALL: [Rgb; 3] = [Rgb::R, Rgb::G, Rgb::B];

    /// Spatial kernel size dedicated to this channel.
    pub fn kernel(self) -> usize {
        match self {
            Rgb::R => 3,
            Rgb::G => 5,
            Rgb::B => 7,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Rgb::R => "R",
            Rgb::G => "G",
            Rgb::B => "B",
        }
    }
}

/// Component toggles for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationConfig {
    pub freq_attention: bool,
    pub freq_branch: bool,
    pub freq_fusion: bool,
    pub chan_calib: bool,
    pub local_attention: bool,
    pub global_attention: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self::FULL
    }
}

impl AblationConfig {
    pub const FULL: Self = Self {
        freq_attention: true,
        freq_branch: true,
        freq_fusion: true,
        chan_calib: true,
        local_attention: true,
        global_attention: true,
    };

    /// Preset keys in table order.
    pub const PRESETS: [&'static str; 9] = [
        "full",
        "no_freq_attn",
        "no_freq_branch",
        "no_freq_fusion",
        "no_chan_calib",
        "no_local_attn",
        "no_global_attn",
        "spatial_only",
        "minimal",
    ];

    pub fn preset(name: &str) -> Result<Self> {
        let f = Self::FULL;
        let cfg = match name {
            "full" => f,
            "no_freq_attn" => Self { freq_attention: false, ..f },
            // Attention over a removed branch cannot exist, so it goes too.
            "no_freq_branch" => Self {
                freq_branch: false,
                freq_attention: false,
                ..f
            },
            "no_freq_fusion" => Self { freq_fusion: false, ..f },
            "no_chan_calib" => Self { chan_calib: false, ..f },
            "no_local_attn" => Self { local_attention: false, ..f },
            "no_global_attn" => Self { global_attention: false, ..f },
            "spatial_only" => Self {
                freq_attention: false,
                freq_branch: false,
                freq_fusion: false,
                ..f
            },
            "minimal" => Self {
                freq_attention: false,
                freq_branch: false,
                freq_fusion: false,
                chan_calib: false,
                local_attention: false,
                global_attention: false,
            },
            other => {
                return Err(FusionError::invalid(format!(
                    "unknown ablation preset `{other}` (expected one of {})",
                    Self::PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    /// Human-readable row label for a preset key.
    pub fn label(name: &str) -> Option<&'static str> {
        Some(match name {
            "full" => "Full Model",
            "no_freq_attn" => "No Frequency Attention",
            "no_freq_branch" => "No Frequency Branch",
            "no_freq_fusion" => "No Frequency Guided Fusion",
            "no_chan_calib" => "No Channel Calibration",
            "no_local_attn" => "No Local Attention",
            "no_global_attn" => "No Global Attention",
            "spatial_only" => "Spatial Only",
            "minimal" => "Minimal Model",
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.freq_attention && !self.freq_branch {
            return Err(FusionError::invalid(
                "frequency attention requires the frequency branch",
            ));
        }
        Ok(())
    }

    pub fn to_bits(self) -> u32 {
        [
            self.freq_attention,
            self.freq_branch,
            self.freq_fusion,
            self.chan_calib,
            self.local_attention,
            self.global_attention,
        ]
        .iter()
        .enumerate()
        .fold(0, |acc, (i, &on)| acc | ((on as u32) << i))
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        if bits >> 6 != 0 {
            return Err(FusionError::invalid(format!("unknown ablation bits {bits:#x}")));
        }
        let on = |i: u32| bits & (1 << i) != 0;
        let cfg = Self {
            freq_attention: on(0),
            freq_branch: on(1),
            freq_fusion: on(2),
            chan_calib: on(3),
            local_attention: on(4),
            global_attention: on(5),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Architecture description: base width plus toggles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Feature maps per branch (`C`). The head runs at `2C`.
    pub width: usize,
    pub ablation: AblationConfig,
}

impl ModelConfig {
    pub fn new(width: usize, ablation: AblationConfig) -> Result<Self> {
        if width < 2 || !width.is_multiple_of(2) {
            return Err(FusionError::invalid(format!("base width must be even and >= 2, got {width}")));
        }
        ablation.validate()?;
        Ok(Self { width, ablation })
    }

    /// `"tiny"` or `"paper"` with every component enabled.
    pub fn preset(name: &str) -> Result<Self> {
        Self::new(width_preset(name)?, AblationConfig::FULL)
    }

    pub fn head_width(&self) -> usize {
        2 * self.width
    }
}

/// Base width of a named size preset.
pub fn width_preset(name: &str) -> Result<usize> {
    match name {
        "tiny" => Ok(TINY_WIDTH),
        "paper" => Ok(PAPER_WIDTH),
        other => Err(FusionError::invalid(format!("unknown width preset `{other}` (expected tiny or paper)"))),
    }
}

/// Rewrites a non-finite error so it names the model stage.
fn at<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        FusionError::NonFinite { stage: op } => FusionError::NonFinite {
            stage: format!("{stage} ({op})"),
        },
        other => other,
    })
}

/// Convolution weight plus optional bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cout: usize,
        cin: usize,
        k: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{prefix}.weight"), kaiming_uniform(&[cout, cin, k, k], cin * k * k, rng))?;
        let bias = if bias {
            Some(store.add(format!("{prefix}.bias"), Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Shrinks the initial weights; used on the last decoder layer.
    fn scaled(self, store: &mut ParamStore, factor: f64) -> Self {
        store.get_mut(self.weight).tensor.data_mut().iter_mut().for_each(|v| *v *= factor);
        self
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.weight.index()], self.bias.map(|b| p[b.index()]))
    }
}

/// Multi-scale spatial path of one channel: `f3 = A(f1) + f1`.
#[derive(Debug, Clone)]
pub struct SpatialBranch {
    pub channel: Rgb,
    pub conv: Conv,
    pub attention: Option<Cbam>,
}

impl SpatialBranch {
    pub fn forward(&self, tape: &mut Tape, p: &[Var], d: Var) -> Result<Var> {
        let (c, _, _) = tape.value(d).chw()?;
        if c != 1 {
            return Err(FusionError::shape(format!("spatial branch takes one channel, got {c}")));
        }
        let f1 = self.conv.forward(tape, p, d)?;
        let f2 = match &self.attention {
            Some(cbam) => cbam.forward(tape, p, f1)?,
            None => f1,
        };
        tape.add(f2, f1)
    }
}

/// Frequency path of one channel.
///
/// The unitary magnitude `|F| / sqrt(HW)` is lifted to `C` maps by
/// `1x1 conv -> PReLU -> 1x1 conv`, normalized per channel, optionally
/// reweighted by frequency attention, clamped at zero, paired with the
/// input's phase and inverted.
///
/// Attention pools the lifted maps *before* normalization: after it every
/// channel mean is exactly `beta`, which would leave the attention blind to
/// the input.
#[derive(Debug, Clone)]
pub struct FrequencyBranch {
    pub lift: Conv,
    pub slope: ParamId,
    pub mix: Conv,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub attention: Option<FrequencyAttention>,
}

impl FrequencyBranch {
    /// Refined magnitude before phase recombination.
    pub fn refine(&self, tape: &mut Tape, p: &[Var], mag: Var) -> Result<Var> {
        let h = self.lift.forward(tape, p, mag)?;
        let h = tape.prelu(h, p[self.slope.index()])?;
        let lifted = self.mix.forward(tape, p, h)?;
        let normed = tape.channel_norm(lifted, p[self.gamma.index()], p[self.beta.index()], NORM_EPS)?;
        let h = match &self.attention {
            Some(att) => {
                let w = att.weights(tape, p, lifted)?;
                tape.scale_channels(normed, w)?
            }
            None => normed,
        };
        tape.clamp_min_zero(h)
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], d: Var) -> Result<Var> {
        let (c, _, _) = tape.value(d).chw()?;
        if c != 1 {
            return Err(FusionError::shape(format!("frequency branch takes one channel, got {c}")));
        }
        let (_, h, w) = tape.value(d).chw()?;
        let mag = tape.fft_magnitude(d)?;
        let mag = tape.mul_scalar(mag, 1.0 / ((h * w) as f64).sqrt())?;
        let phase = tape.fft_phase(d)?;
        let refined = self.refine(tape, p, mag)?;
        let (width, _, _) = tape.value(refined).chw()?;
        let phase = tape.concat(&vec![phase; width])?;
        tape.polar_inverse(refined, phase)
    }
}

/// Frequency-guided fusion: `relu(conv1x1([f_spatial; f_freq]))`.
#[derive(Debug, Clone, Copy)]
pub struct Fgf {
    pub conv: Conv,
}

impl Fgf {
    pub fn forward(&self, tape: &mut Tape, p: &[Var], spatial: Var, freq: Var) -> Result<Var> {
        if tape.value(spatial).shape() != tape.value(freq).shape() {
            return Err(FusionError::shape(format!(
                "fusion inputs differ: spatial {:?}, frequency {:?}",
                tape.value(spatial).shape(),
                tape.value(freq).shape()
            )));
        }
        let cat = tape.concat(&[spatial, freq])?;
        let fused = self.conv.forward(tape, p, cat)?;
        tape.relu(fused)
    }
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub spatial: SpatialBranch,
    pub frequency: Option<FrequencyBranch>,
    pub fgf: Option<Fgf>,
}

/// Global CBAM plus a 1x1 projection of the concatenated residual features.
#[derive(Debug, Clone)]
pub struct GlobalAttention {
    pub cbam: Cbam,
    pub context: Conv,
}

#[derive(Debug, Clone)]
pub struct Head {
    pub t_d: Conv,
    pub t_f: Conv,
    pub global: Option<GlobalAttention>,
    pub t_e1: Conv,
    pub t_e2: Conv,
    pub calibration: Option<ChannelCalibration>,
}

/// Parameter count of one named module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleCount {
    pub module: String,
    pub scalars: usize,
}

#[derive(Debug, Clone)]
pub struct FusionModel {
    config: ModelConfig,
    store: ParamStore,
    pub branches: Vec<Branch>,
    pub head: Head,
    modules: Vec<(String, Range<usize>)>,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    modules: Vec<(String, Range<usize>)>,
}

impl Builder<'_> {
    fn module<T>(&mut self, name: &str, f: impl FnOnce(&mut ParamStore) -> Result<T>) -> Result<T> {
        let start = self.store.len();
        let out = f(self.store)?;
        self.modules.push((name.to_string(), start..self.store.len()));
        Ok(out)
    }
}

impl FusionModel {
    /// Builds the network with weights drawn from a ChaCha stream seeded by
    /// `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.ablation.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let c = config.width;
        let hd = config.head_width();
        let ab = config.ablation;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            modules: Vec::new(),
        };

        let mut branches = Vec::with_capacity(3);
        for ch in Rgb::ALL {
            let pre = format!("branch.{}", ch.name());
            let spatial = b.module(&format!("{pre}.spatial"), |s| {
                let conv = Conv::new(s, &format!("{pre}.spatial.conv"), c, 1, ch.kernel(), true, rng)?;
                let attention = if ab.local_attention {
                    Some(Cbam::new(s, &format!("{pre}.spatial.cbam"), c, rng)?)
                } else {
                    None
                };
                Ok(SpatialBranch {
                    channel: ch,
                    conv,
                    attention,
                })
            })?;
            let frequency = if ab.freq_branch {
                Some(b.module(&format!("{pre}.frequency"), |s| {
                    let fp = format!("{pre}.frequency");
                    Ok(FrequencyBranch {
                        lift: Conv::new(s, &format!("{fp}.lift"), c, 1, 1, true, rng)?,
                        slope: s.add(format!("{fp}.prelu"), Tensor::scalar(PRELU_INIT))?,
                        mix: Conv::new(s, &format!("{fp}.mix"), c, c, 1, true, rng)?,
                        gamma: s.add(format!("{fp}.norm.gamma"), Tensor::full(&[c], 1.0))?,
                        beta: s.add(format!("{fp}.norm.beta"), Tensor::zeros(&[c]))?,
                        attention: if ab.freq_attention {
                            Some(FrequencyAttention::new(s, &format!("{fp}.attention"), c, rng)?)
                        } else {
                            None
                        },
                    })
                })?)
            } else {
                None
            };
            let fgf = if ab.freq_branch && ab.freq_fusion {
                Some(b.module(&format!("{pre}.fgf"), |s| {
                    Ok(Fgf {
                        conv: Conv::new(s, &format!("{pre}.fgf.conv"), c, 2 * c, 1, true, rng)?,
                    })
                })?)
            } else {
                None
            };
            branches.push(Branch {
                spatial,
                frequency,
                fgf,
            });
        }

        let t_d = b.module("head.t_d", |s| Conv::new(s, "head.t_d", hd, 3 * c, 3, true, rng))?;
        let t_f_in = if ab.freq_branch { hd + 3 * c } else { hd };
        let t_f = b.module("head.t_f", |s| Conv::new(s, "head.t_f", hd, t_f_in, 3, true, rng))?;
        let global = if ab.global_attention {
            Some(b.module("head.global", |s| {
                Ok(GlobalAttention {
                    cbam: Cbam::new(s, "head.global.cbam", hd, rng)?,
                    context: Conv::new(s, "head.global.context", hd, 3 * c, 1, true, rng)?,
                })
            })?)
        } else {
            None
        };
        let (t_e1, t_e2) = b.module("head.t_e", |s| {
            Ok((
                Conv::new(s, "head.t_e.0", hd / 2, hd, 3, true, rng)?,
                Conv::new(s, "head.t_e.1", 3, hd / 2, 3, true, rng)?.scaled(s, OUTPUT_INIT_SCALE),
            ))
        })?;
        let calibration = if ab.chan_calib {
            Some(b.module("calibration", |s| ChannelCalibration::new(s, "calibration", rng))?)
        } else {
            None
        };
        let modules = b.modules;

        Ok(Self {
            config,
            store,
            branches,
            head: Head {
                t_d,
                t_f,
                global,
                t_e1,
                t_e2,
                calibration,
            },
            modules,
        })
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Scalar count per module, in construction order. Sums to
    /// [`num_parameters`](Self::num_parameters).
    pub fn parameter_breakdown(&self) -> Vec<ModuleCount> {
        self.modules
            .iter()
            .map(|(name, ids)| ModuleCount {
                module: name.clone(),
                scalars: ids.clone().map(|i| self.store.get(ParamId(i)).numel()).sum(),
            })
            .collect()
    }

    /// Enhances one `[3,H,W]` image with values in `[0,1]`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        check_input(input)?;
        let mut tape = Tape::new();
        let p = tape.bind(&self.store);
        let x = tape.constant(input.clone());
        let out = self.forward_on(&mut tape, &p, x)?;
        Ok(tape.value(out).clone())
    }

    /// Records the forward pass on `tape`; `p` comes from [`Tape::bind`].
    pub fn forward_on(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let (c, h, w) = tape.value(x).chw()?;
        if c != 3 || h < MIN_EXTENT || w < MIN_EXTENT {
            return Err(FusionError::shape(format!(
                "expected [3,H,W] with H,W >= {MIN_EXTENT}, got {:?}",
                tape.value(x).shape()
            )));
        }
        let mut residuals = Vec::with_capacity(3);
        let mut freqs = Vec::with_capacity(3);
        for branch in &self.branches {
            let ch = branch.spatial.channel;
            let name = ch.name();
            let d = tape.select_channel(x, ch.index())?;
            let f3 = at(&format!("branch.{name}.spatial"), branch.spatial.forward(tape, p, d))?;
            let fused = match &branch.frequency {
                Some(fb) => {
                    let ff = at(&format!("branch.{name}.frequency"), fb.forward(tape, p, d))?;
                    freqs.push(ff);
                    match &branch.fgf {
                        Some(fgf) => at(&format!("branch.{name}.fgf"), fgf.forward(tape, p, f3, ff))?,
                        None => f3,
                    }
                }
                None => f3,
            };
            residuals.push(at(&format!("branch.{name}.residual"), tape.add_plane(fused, d))?);
        }
        let head = &self.head;
        let concat = tape.concat(&residuals)?;
        let f_d = at("head.t_d", head.t_d.forward(tape, p, concat).and_then(|v| tape.relu(v)))?;
        let t_f_in = if freqs.is_empty() {
            f_d
        } else {
            let mut parts = vec![f_d];
            parts.extend(&freqs);
            tape.concat(&parts)?
        };
        let fusion = at("head.t_f", head.t_f.forward(tape, p, t_f_in).and_then(|v| tape.relu(v)))?;
        let attn = match &head.global {
            Some(g) => at("head.global", (|| {
                let a = g.cbam.forward(tape, p, fusion)?;
                let ctx = g.context.forward(tape, p, concat)?;
                tape.add(a, ctx)
            })())?,
            None => fusion,
        };
        let e = at("head.t_e", (|| {
            let e = head.t_e1.forward(tape, p, attn)?;
            let e = tape.relu(e)?;
            let e = head.t_e2.forward(tape, p, e)?;
            let skip = tape.constant(input_logits(tape.value(x))?);
            let e = tape.add(e, skip)?;
            tape.sigmoid(e)
        })())?;
        match &head.calibration {
            Some(cal) => at("calibration", cal.forward(tape, p, e)),
            None => Ok(e),
        }
    }
}

/// Logit of the input image, clamped away from 0 and 1. Added before the
/// output sigmoid so the decoder learns a correction of the input.
fn input_logits(x: &Tensor) -> Result<Tensor> {
    let data = x
        .data()
        .iter()
        .map(|v| {
            let v = v.clamp(SKIP_CLAMP, 1.0 - SKIP_CLAMP);
            (v / (1.0 - v)).ln()
        })
        .collect();
    Tensor::new(x.shape(), data)
}

fn check_input(input: &Tensor) -> Result<()> {
    let (c, h, w) = input.chw()?;
    if c != 3 || h < MIN_EXTENT || w < MIN_EXTENT {
        return Err(FusionError::shape(format!(
            "expected [3,H,W] with H,W >= {MIN_EXTENT}, got {:?}",
            input.shape()
        )));
    }
    if input.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(FusionError::invalid("input pixels must lie in [0, 1]"));
    }
    Ok(())
}

impl Differentiable for FusionModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward_var(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<Var> {
        self.forward_on(tape, params, input)
    }
}

impl fmt::Display for FusionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "FusionModel (width {}, {} parameters)", self.config.width, self.num_parameters())?;
        for m in self.parameter_breakdown() {
            writeln!(f, "  {:<24} {:>9}", m.module, m.scalars)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(ab: AblationConfig) -> FusionModel {
        FusionModel::new(ModelConfig::new(TINY_WIDTH, ab).unwrap(), 42).unwrap()
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        Tensor::uniform(&[3, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn presets_validate_and_round_trip_bits() {
        for name in AblationConfig::PRESETS {
            let cfg = AblationConfig::preset(name).unwrap();
            assert_eq!(AblationConfig::from_bits(cfg.to_bits()).unwrap(), cfg);
            assert!(AblationConfig::label(name).is_some());
        }
        assert!(AblationConfig::preset("nope").is_err());
        let bad = AblationConfig {
            freq_branch: false,
            ..AblationConfig::FULL
        };
        assert!(bad.validate().is_err());
        assert!(FusionModel::new(ModelConfig { width: 4, ablation: bad }, 0).is_err());
    }

    #[test]
    fn single_conv_count() {
        let mut s = ParamStore::new();
        Conv::new(&mut s, "c", 1, 1, 3, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.num_scalars(), 10);
    }

    #[test]
    fn breakdown_sums_to_total() {
        for name in AblationConfig::PRESETS {
            let m = tiny(AblationConfig::preset(name).unwrap());
            let sum: usize = m.parameter_breakdown().iter().map(|b| b.scalars).sum();
            assert_eq!(sum, m.num_parameters(), "{name}");
        }
    }

    #[test]
    fn output_shape_and_range() {
        let m = tiny(AblationConfig::FULL);
        for (h, w) in [(8, 8), (37, 41), (16, 31)] {
            let y = m.forward(&image(h, w, 1)).unwrap();
            assert_eq!(y.shape(), &[3, h, w]);
            assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = tiny(AblationConfig::FULL);
        assert!(m.forward(&image(7, 8, 0)).is_err());
        assert!(m.forward(&Tensor::zeros(&[1, 8, 8])).is_err());
        assert!(m.forward(&Tensor::full(&[3, 8, 8], 1.5)).is_err());
    }

    #[test]
    fn every_preset_runs() {
        let x = image(9, 12, 3);
        for name in AblationConfig::PRESETS {
            let m = tiny(AblationConfig::preset(name).unwrap());
            assert_eq!(m.forward(&x).unwrap().shape(), x.shape(), "{name}");
        }
    }

    #[test]
    fn non_finite_names_stage() {
        let mut m = tiny(AblationConfig::FULL);
        let id = m.params().id_of("head.t_e.1.bias").unwrap();
        m.params_mut().get_mut(id).tensor.data_mut()[0] = f64::MAX;
        let id = m.params().id_of("head.t_e.1.weight").unwrap();
        m.params_mut().get_mut(id).tensor.data_mut().fill(f64::MAX);
        match m.forward(&image(8, 8, 0)) {
            Err(FusionError::NonFinite { stage }) => assert!(stage.starts_with("head.t_e"), "{stage}"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
