//! Camera timing model, discretized light signals and the tanh
//! reparameterization used by the optimizer.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::image::CHANNELS;
use crate::optim::{Adam, AdamConfig};

/// Standard sRGB display gamma.
pub const SRGB_GAMMA: f64 = 2.2;

const RATIO_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraTimings {
    /// Effective per-row readout time in microseconds. One signal slot lasts this long.
    pub readout_us: f64,
    pub exposure_us: f64,
    pub rows: usize,
    pub cols: usize,
    pub gamma: f64,
}

impl CameraTimings {
    pub fn new(readout_us: f64, exposure_us: f64, rows: usize, cols: usize, gamma: f64) -> Result<Self> {
        let t = Self {
            readout_us,
            exposure_us,
            rows,
            cols,
            gamma,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.readout_us.is_finite() && self.readout_us > 0.0) {
            return Err(Error::InvalidTimings(format!(
                "readout_us must be positive, got {}",
                self.readout_us
            )));
        }
        if !(self.exposure_us.is_finite() && self.exposure_us >= self.readout_us) {
            return Err(Error::InvalidTimings(format!(
                "exposure_us ({}) must be at least readout_us ({})",
                self.exposure_us, self.readout_us
            )));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::InvalidTimings(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidTimings("rows and cols must be at least 1".into()));
        }
        Ok(())
    }

    pub fn with_exposure(&self, exposure_us: f64) -> Result<Self> {
        Self::new(self.readout_us, exposure_us, self.rows, self.cols, self.gamma)
    }

    /// `t_e / t_r`, snapped to the nearest integer when within rounding noise.
    pub fn exposure_ratio(&self) -> f64 {
        let ratio = self.exposure_us / self.readout_us;
        let nearest = ratio.round();
        if (ratio - nearest).abs() < RATIO_SNAP * ratio.max(1.0) {
            nearest
        } else {
            ratio
        }
    }

    /// Number of signal slots a row's exposure touches, `ceil(t_e / t_r)`.
    pub fn window_slots(&self) -> usize {
        self.exposure_ratio().ceil() as usize
    }

    /// Start of row `y` relative to the frame start, in microseconds.
    pub fn row_start_us(&self, y: usize) -> f64 {
        y as f64 * self.readout_us
    }
}

/// Signal length for a timing: `rows + ceil(exposure / readout)`.
pub fn signal_length(timings: &CameraTimings) -> usize {
    timings.rows + timings.window_slots()
}

/// Time-averaging weights of one row's exposure over consecutive signal slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ShutterKernel {
    weights: Vec<f64>,
}

impl ShutterKernel {
    pub fn new(timings: &CameraTimings) -> Self {
        let ratio = timings.exposure_ratio();
        let n = timings.window_slots();
        let full = 1.0 / ratio;
        let mut weights = vec![full; n];
        let frac = ratio - ratio.floor();
        if frac > 0.0 {
            weights[n - 1] = frac / ratio;
        }
        Self { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

pub fn build_shutter_kernel(timings: &CameraTimings) -> ShutterKernel {
    ShutterKernel::new(timings)
}

/// Periodic attacker waveform, one value per channel per readout slot.
#[derive(Debug, Clone, PartialEq)]
pub struct LightSignal {
    timings: CameraTimings,
    length: usize,
    /// Channel-major, `values[ch * length + i]`.
    values: Vec<f64>,
}

impl LightSignal {
    pub fn new(timings: CameraTimings, values: Vec<f64>) -> Result<Self> {
        timings.validate()?;
        let length = signal_length(&timings);
        if values.len() != CHANNELS * length {
            return Err(Error::shape(format!(
                "signal needs {CHANNELS} x {length} values, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(format!("signal value {bad} outside [0, 1]")));
        }
        Ok(Self {
            timings,
            length,
            values,
        })
    }

    pub fn constant(timings: CameraTimings, level: f64) -> Result<Self> {
        let length = signal_length(&timings);
        Self::new(timings, vec![level; CHANNELS * length])
    }

    pub fn timings(&self) -> &CameraTimings {
        &self.timings
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, ch: usize) -> &[f64] {
        &self.values[ch * self.length..(ch + 1) * self.length]
    }

    pub fn value(&self, ch: usize, i: usize) -> f64 {
        self.values[ch * self.length + i]
    }

    pub fn is_constant(&self) -> bool {
        (0..CHANNELS).all(|ch| {
            let c = self.channel(ch);
            c.iter().all(|&v| v == c[0])
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let channel_values = (0..CHANNELS)
            .map(|ch| {
                let body: Vec<String> = self.channel(ch).iter().map(|v| format!("{v:.16e}")).collect();
                RawValue::from_string(format!("[{}]", body.join(", ")))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let doc = SignalDocOut {
            format: SIGNAL_FORMAT,
            version: SIGNAL_VERSION,
            readout_us: self.timings.readout_us,
            exposure_us: self.timings.exposure_us,
            rows: self.timings.rows,
            cols: self.timings.cols,
            gamma: self.timings.gamma,
            channels: CHANNELS,
            length: self.length,
            values: channel_values,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SignalDocIn = serde_json::from_str(text)?;
        if doc.format != SIGNAL_FORMAT {
            return Err(Error::Parse(format!("not a signal document: format {:?}", doc.format)));
        }
        if doc.version != SIGNAL_VERSION {
            return Err(Error::Parse(format!("unsupported signal version {}", doc.version)));
        }
        if doc.channels != CHANNELS || doc.values.len() != CHANNELS {
            return Err(Error::shape(format!("expected {CHANNELS} channels")));
        }
        let timings = CameraTimings::new(doc.readout_us, doc.exposure_us, doc.rows, doc.cols, doc.gamma)?;
        if let Some(len) = doc.length {
            if len != signal_length(&timings) {
                return Err(Error::shape(format!(
                    "declared length {len} disagrees with timings ({})",
                    signal_length(&timings)
                )));
            }
        }
        Self::new(timings, doc.values.concat())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

const SIGNAL_FORMAT: &str = "stripelight-signal";
const SIGNAL_VERSION: u32 = 1;

#[derive(Serialize)]
struct SignalDocOut {
    format: &'static str,
    version: u32,
    readout_us: f64,
    exposure_us: f64,
    rows: usize,
    cols: usize,
    gamma: f64,
    channels: usize,
    length: usize,
    values: Vec<Box<RawValue>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SignalDocIn {
    format: String,
    version: u32,
    readout_us: f64,
    exposure_us: f64,
    rows: usize,
    cols: usize,
    gamma: f64,
    channels: usize,
    #[serde(default)]
    length: Option<usize>,
    values: Vec<Vec<f64>>,
}

/// `0.5 * (tanh(v) + 1)`, element-wise.
pub fn reparameterize(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| 0.5 * (x.tanh() + 1.0)).collect()
}

/// Chain rule through [`reparameterize`]: `upstream * 0.5 * (1 - tanh^2(v))`.
pub fn reparameterize_backward(v: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    if v.len() != upstream.len() {
        return Err(Error::shape(format!(
            "upstream gradient has {} entries, variables have {}",
            upstream.len(),
            v.len()
        )));
    }
    Ok(v.iter()
        .zip(upstream)
        .map(|(&x, &g)| {
            let t = x.tanh();
            g * 0.5 * (1.0 - t * t)
        })
        .collect())
}

/// Unconstrained signal variables plus their Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerVariables {
    pub timings: CameraTimings,
    pub v: Vec<f64>,
    pub adam: Adam,
}

impl OptimizerVariables {
    /// Draws `v` i.i.d. uniform in `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(timings: CameraTimings, config: AdamConfig, rng: &mut R) -> Self {
        let n = CHANNELS * signal_length(&timings);
        let v = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self {
            timings,
            v,
            adam: Adam::new(n, config),
        }
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn signal(&self) -> LightSignal {
        LightSignal::new(self.timings, reparameterize(&self.v))
            .expect("tanh reparameterization stays within [0, 1]")
    }

    /// Applies one Adam descent step given the gradient with respect to the signal values.
    pub fn descend(&mut self, signal_grad: &[f64]) -> Result<()> {
        let grad_v = reparameterize_backward(&self.v, signal_grad)?;
        self.adam.step(&mut self.v, &grad_v);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn timings(rows: usize, te: f64, tr: f64) -> CameraTimings {
        CameraTimings::new(tr, te, rows, rows, SRGB_GAMMA).unwrap()
    }

    #[test]
    fn signal_length_examples() {
        assert_eq!(signal_length(&timings(252, 500.0, 120.0)), 257);
        assert_eq!(signal_length(&timings(17, 120.0, 120.0)), 18);
        assert_eq!(signal_length(&timings(224, 1333.0, 120.0)), 236);
    }

    #[test]
    fn exact_multiples_do_not_round_up() {
        // 0.3 / 0.1 is 2.9999999999999996 in binary floating point.
        assert_eq!(timings(10, 0.3, 0.1).window_slots(), 3);
        assert_eq!(timings(10, 240.0, 120.0).window_slots(), 2);
    }

    #[test]
    fn rejects_invalid_timings() {
        assert!(CameraTimings::new(0.0, 10.0, 4, 4, 2.2).is_err());
        assert!(CameraTimings::new(10.0, 5.0, 4, 4, 2.2).is_err());
        assert!(CameraTimings::new(10.0, 10.0, 0, 4, 2.2).is_err());
        assert!(CameraTimings::new(10.0, 10.0, 4, 4, 0.0).is_err());
    }

    /// Integrates a 1 us-resolution box over the exposure window and
    /// accumulates how much of it lands in each readout slot.
    fn kernel_oracle(te_us: u32, tr_us: u32) -> Vec<f64> {
        let n = te_us.div_ceil(tr_us) as usize;
        let mut w = vec![0.0; n];
        for t in 0..te_us {
            w[(t / tr_us) as usize] += 1.0 / te_us as f64;
        }
        w
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(ShutterKernel::new(&timings(4, 120.0, 120.0)).weights(), &[1.0]);
        assert_eq!(ShutterKernel::new(&timings(4, 240.0, 120.0)).weights(), &[0.5, 0.5]);
        let k = ShutterKernel::new(&timings(4, 180.0, 120.0));
        let oracle = kernel_oracle(180, 120);
        assert_eq!(oracle.len(), 2);
        for (a, b) in k.weights().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!((k.weights()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((k.weights()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_matches_integration_oracle() {
        for (te, tr) in [(500, 120), (1333, 120), (37, 10), (60, 20), (99, 7)] {
            let k = ShutterKernel::new(&timings(4, te as f64, tr as f64));
            let oracle = kernel_oracle(te, tr);
            assert_eq!(k.len(), oracle.len());
            for (a, b) in k.weights().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reparameterize_examples() {
        assert_eq!(reparameterize(&[0.0]), vec![0.5]);
        assert!((reparameterize(&[20.0])[0] - 1.0).abs() < 1e-12);
        // 0.5 * (tanh(1) + 1) = 1 / (1 + e^-2)
        let oracle = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((reparameterize(&[1.0])[0] - oracle).abs() < 1e-15);
        assert!((reparameterize(&[1.0])[0] - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn reparameterize_backward_examples() {
        assert_eq!(reparameterize_backward(&[0.0], &[1.0]).unwrap(), vec![0.5]);
        assert!(reparameterize_backward(&[20.0], &[1.0]).unwrap()[0] < 1e-12);
        assert!(reparameterize_backward(&[0.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn reparameterize_backward_matches_finite_differences() {
        let h = 1e-5;
        let mut rng = crate::rng::stream_rng(7, 0);
        for _ in 0..200 {
            let v: f64 = rng.random_range(-4.0..4.0);
            let up: f64 = rng.random_range(-2.0..2.0);
            let fd = up * (reparameterize(&[v + h])[0] - reparameterize(&[v - h])[0]) / (2.0 * h);
            let an = reparameterize_backward(&[v], &[up]).unwrap()[0];
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-6), "v={v}: {fd} vs {an}");
        }
    }

    #[test]
    fn signal_file_round_trip() {
        let t = timings(5, 250.0, 120.0);
        let mut rng = crate::rng::stream_rng(1, 0);
        let values: Vec<f64> = (0..3 * signal_length(&t)).map(|_| rng.random()).collect();
        let sig = LightSignal::new(t, values).unwrap();
        let text = sig.to_json().unwrap();
        assert!(text.contains("e-1") || text.contains("e0"));
        assert_eq!(LightSignal::from_json(&text).unwrap(), sig);
    }

    #[test]
    fn signal_rejects_wrong_length_and_range() {
        let t = timings(5, 250.0, 120.0);
        assert!(LightSignal::new(t, vec![0.5; 3 * 7]).is_err());
        let mut vals = vec![0.5; 3 * 8];
        vals[4] = 1.5;
        assert!(LightSignal::new(t, vals).is_err());
    }

    proptest! {
        #[test]
        fn reparameterize_is_bounded_and_symmetric(v in -15.0f64..15.0) {
            let p = reparameterize(&[v])[0];
            let q = reparameterize(&[-v])[0];
            prop_assert!(p > 0.0 && p < 1.0);
            prop_assert!((p + q - 1.0).abs() < 1e-12);
        }

        #[test]
        fn kernel_weights_sum_to_one(tr in 1.0f64..200.0, ratio in 1.0f64..40.0) {
            let t = CameraTimings::new(tr, tr * ratio, 8, 8, 2.2).unwrap();
            let k = ShutterKernel::new(&t);
            prop_assert_eq!(k.len(), t.window_slots());
            prop_assert!((k.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(k.weights().iter().all(|&w| w > 0.0));
        }

        #[test]
        fn random_variables_build_a_valid_signal(rows in 1usize..40, ratio in 1.0f64..8.0, seed in 0u64..1000) {
            let t = CameraTimings::new(10.0, 10.0 * ratio, rows, 3, 2.2).unwrap();
            let mut rng = crate::rng::stream_rng(seed, 0);
            let vars = OptimizerVariables::random(t, AdamConfig::default(), &mut rng);
            let sig = vars.signal();
            prop_assert_eq!(sig.len(), signal_length(&t));
            prop_assert!(vars.v.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }
}
