//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use fusion_core::attention::{Cbam, ChannelAttention, ChannelCalibration, FrequencyAttention, SpatialAttention};
use fusion_core::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_t(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::uniform(shape, lo, hi, &mut rng(seed))
}

/// Every attention mechanism with freshly drawn parameters.
pub struct AttentionSet {
    pub store: ParamStore,
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
    pub cbam: Cbam,
    pub frequency: FrequencyAttention,
    pub calibration: ChannelCalibration,
}

impl AttentionSet {
    /// Default initialization with every parameter then multiplied by a
    /// random factor in [0, 2].
    pub fn fuzzed(channels: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let channel = ChannelAttention::new(&mut store, "ca", channels, &mut r).unwrap();
        let spatial = SpatialAttention::new(&mut store, "sa", &mut r).unwrap();
        let cbam = Cbam::new(&mut store, "cbam", channels, &mut r).unwrap();
        let frequency = FrequencyAttention::new(&mut store, "fa", channels, &mut r).unwrap();
        let calibration = ChannelCalibration::new(&mut store, "cal", &mut r).unwrap();
        for p in store.iter_mut() {
            let s = r.gen_range(0.0..2.0);
            p.tensor.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        Self {
            store,
            channel,
            spatial,
            cbam,
            frequency,
            calibration,
        }
    }

    /// Emitted weights of all four mechanisms plus the CBAM output, for a
    /// feature map `f` ([C,H,W]), a magnitude `mag` (same shape, >= 0) and
    /// an image `e` ([3,H,W]).
    pub fn emitted(&self, f: &Tensor, mag: &Tensor, e: &Tensor) -> (Vec<Vec<f64>>, Tensor) {
        let mut t = Tape::new();
        let p = t.bind(&self.store);
        let (fv, mv, ev) = (t.constant(f.clone()), t.constant(mag.clone()), t.constant(e.clone()));
        let ws = [
            self.channel.weights(&mut t, &p, fv).unwrap(),
            self.spatial.weights(&mut t, &p, fv).unwrap(),
            self.frequency.weights(&mut t, &p, mv).unwrap(),
            self.calibration.weights(&mut t, &p, ev).unwrap(),
        ];
        let out = self.cbam.forward(&mut t, &p, fv).unwrap();
        (ws.iter().map(|&w| t.value(w).data().to_vec()).collect(), t.value(out).clone())
    }
}

/// Random feature map, magnitude and image for one fuzz case.
pub fn attention_inputs(channels: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut r = rng(seed);
    let h = r.gen_range(2..10);
    let w = r.gen_range(2..10);
    let scale = r.gen_range(0.01..5.0);
    let f = rand_t(&[channels, h, w], -scale, scale, seed ^ 0x11);
    let mag = rand_t(&[channels, h, w], 0.0, scale, seed ^ 0x22);
    let e = rand_t(&[3, h, w], 0.0, 1.0, seed ^ 0x33);
    (f, mag, e)
}
