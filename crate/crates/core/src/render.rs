//! Radiometric rolling-shutter image formation and its adjoint.
//!
//! A row's attacker-light gain is the exposure-weighted average of the
//! (cyclically offset) periodic signal over the slots the row integrates.
//! The gain blends the ambient and fully-lit captures in gamma space:
//! `out = (amb^g + gain * max(full^g - amb^g, 0))^(1/g)`.

use crate::camera::{CameraTimings, LightSignal, ShutterKernel};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

/// Ambient-only and fully-lit captures of the same scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub ambient: Image,
    pub full: Image,
}

impl ScenePair {
    pub fn new(ambient: Image, full: Image) -> Result<Self> {
        if !ambient.same_dims(&full) {
            return Err(Error::shape(format!(
                "ambient is {:?} but full is {:?}",
                ambient.dims(),
                full.dims()
            )));
        }
        for (name, img) in [("ambient", &ambient), ("full", &full)] {
            if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::OutOfRange(format!("{name} image sample {v} outside [0, 1]")));
            }
        }
        Ok(Self { ambient, full })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.ambient.dims()
    }

    /// Largest linearized attacker-light contribution over all samples.
    pub fn headroom(&self, gamma: f64) -> f64 {
        self.ambient
            .data()
            .iter()
            .zip(self.full.data())
            .map(|(&a, &f)| (f.powf(gamma) - a.powf(gamma)).max(0.0))
            .fold(0.0, f64::max)
    }
}

/// Per-channel, per-row attacker-light gain.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGain {
    rows: usize,
    /// `values[ch * rows + y]`
    values: Vec<f64>,
}

impl RowGain {
    pub fn new(rows: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != CHANNELS * rows {
            return Err(Error::shape(format!(
                "row gain needs {CHANNELS} x {rows} values, got {}",
                values.len()
            )));
        }
        Ok(Self { rows, values })
    }

    pub fn constant(rows: usize, g: f64) -> Self {
        Self {
            rows,
            values: vec![g; CHANNELS * rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, ch: usize, y: usize) -> f64 {
        self.values[ch * self.rows + y]
    }
}

/// `out[ch][i] = values[ch][(i + delta) mod len]` for a channel-major `CHANNELS x len` buffer.
pub fn cyclic_shift(values: &[f64], len: usize, delta: usize) -> Result<Vec<f64>> {
    if values.len() != CHANNELS * len {
        return Err(Error::shape(format!(
            "buffer of {} values is not {CHANNELS} x {len}",
            values.len()
        )));
    }
    if delta > len {
        return Err(Error::OutOfRange(format!("offset {delta} exceeds period {len}")));
    }
    let mut out = Vec::with_capacity(values.len());
    for ch in 0..CHANNELS {
        let src = &values[ch * len..(ch + 1) * len];
        out.extend((0..len).map(|i| src[(i + delta) % len]));
    }
    Ok(out)
}

fn check_signal(signal: &LightSignal, camera: &CameraTimings) -> Result<()> {
    let st = signal.timings();
    if st.rows != camera.rows {
        return Err(Error::shape(format!(
            "signal built for {} rows, camera has {}",
            st.rows, camera.rows
        )));
    }
    if (st.readout_us - camera.readout_us).abs() > 1e-9 * camera.readout_us {
        return Err(Error::shape(format!(
            "signal slot {} us differs from camera readout {} us",
            st.readout_us, camera.readout_us
        )));
    }
    Ok(())
}

/// Row gains of a raw channel-major signal buffer of period `len`.
///
/// Row `y` averages slots `y + delta .. y + delta + window` (mod `len`).
/// For a signal sized for its own exposure no wraparound happens inside a frame.
pub fn row_gain_raw(values: &[f64], len: usize, delta: usize, kernel: &ShutterKernel, rows: usize) -> Result<RowGain> {
    if values.len() != CHANNELS * len || len == 0 {
        return Err(Error::shape(format!(
            "buffer of {} values is not {CHANNELS} x {len}",
            values.len()
        )));
    }
    if delta > len {
        return Err(Error::OutOfRange(format!("offset {delta} exceeds period {len}")));
    }
    let w = kernel.weights();
    let mut out = vec![0.0; CHANNELS * rows];
    for ch in 0..CHANNELS {
        let src = &values[ch * len..(ch + 1) * len];
        for y in 0..rows {
            let start = y + delta;
            let mut acc = 0.0;
            for (j, &wj) in w.iter().enumerate() {
                acc += wj * src[(start + j) % len];
            }
            out[ch * rows + y] = acc;
        }
    }
    RowGain::new(rows, out)
}

/// Adjoint of [`row_gain_raw`]: scatters row-gain gradients back onto signal slots.
pub fn row_gain_backward_raw(grad_gain: &RowGain, len: usize, delta: usize, kernel: &ShutterKernel) -> Vec<f64> {
    let rows = grad_gain.rows();
    let w = kernel.weights();
    let mut out = vec![0.0; CHANNELS * len];
    for ch in 0..CHANNELS {
        let dst = &mut out[ch * len..(ch + 1) * len];
        for y in 0..rows {
            let g = grad_gain.get(ch, y);
            if g == 0.0 {
                continue;
            }
            let start = y + delta;
            for (j, &wj) in w.iter().enumerate() {
                dst[(start + j) % len] += wj * g;
            }
        }
    }
    out
}

pub fn row_gain(signal: &LightSignal, delta: usize, kernel: &ShutterKernel) -> Result<RowGain> {
    let rows = signal.timings().rows;
    row_gain_raw(signal.values(), signal.len(), delta, kernel, rows)
}

/// Scene pair pre-linearized for repeated composition at a fixed gamma.
#[derive(Debug, Clone)]
pub struct LinearScene {
    ambient: Image,
    full: Image,
    ambient_lin: Vec<f64>,
    /// `max(full^g - amb^g, 0)`
    diff_lin: Vec<f64>,
    gamma: f64,
}

impl LinearScene {
    pub fn new(scene: &ScenePair, gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::OutOfRange(format!("gamma must be positive, got {gamma}")));
        }
        let ambient_lin: Vec<f64> = scene.ambient.data().iter().map(|a| a.powf(gamma)).collect();
        let diff_lin = scene
            .full
            .data()
            .iter()
            .zip(&ambient_lin)
            .map(|(f, a)| (f.powf(gamma) - a).max(0.0))
            .collect();
        Ok(Self {
            ambient: scene.ambient.clone(),
            full: scene.full.clone(),
            ambient_lin,
            diff_lin,
            gamma,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.ambient.dims()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn headroom(&self) -> f64 {
        self.diff_lin.iter().copied().fold(0.0, f64::max)
    }

    pub fn compose(&self, gain: &RowGain) -> Result<Image> {
        let (h, w) = self.dims();
        if gain.rows() != h {
            return Err(Error::shape(format!("row gain has {} rows, image has {h}", gain.rows())));
        }
        let inv = 1.0 / self.gamma;
        let amb = self.ambient.data();
        let full = self.full.data();
        let mut out = vec![0.0; amb.len()];
        for ch in 0..CHANNELS {
            for y in 0..h {
                let g = gain.get(ch, y);
                let base_idx = (ch * h + y) * w;
                for i in base_idx..base_idx + w {
                    let d = self.diff_lin[i];
                    out[i] = if g == 0.0 || d == 0.0 {
                        amb[i]
                    } else if g == 1.0 {
                        full[i]
                    } else {
                        (self.ambient_lin[i] + g * d).powf(inv).clamp(0.0, 1.0)
                    };
                }
            }
        }
        Image::from_planar(h, w, out)
    }

    /// Gradient of a scalar loss with respect to the row gains, given the
    /// composed image and the loss gradient with respect to it.
    ///
    /// Uses `d out / d gain = diff * out / (gamma * base)`. Saturated pixels
    /// contribute nothing.
    pub fn compose_backward(&self, gain: &RowGain, rendered: &Image, upstream: &Image) -> Result<RowGain> {
        let (h, w) = self.dims();
        if rendered.dims() != (h, w) || upstream.dims() != (h, w) || gain.rows() != h {
            return Err(Error::shape("compose backward inputs disagree on dimensions"));
        }
        let out = rendered.data();
        let up = upstream.data();
        let mut grad = vec![0.0; CHANNELS * h];
        for ch in 0..CHANNELS {
            for y in 0..h {
                let g = gain.get(ch, y);
                let base_idx = (ch * h + y) * w;
                let mut acc = 0.0;
                for i in base_idx..base_idx + w {
                    let d = self.diff_lin[i];
                    let o = out[i];
                    if d == 0.0 || up[i] == 0.0 || o <= 0.0 || o >= 1.0 {
                        continue;
                    }
                    let base = self.ambient_lin[i] + g * d;
                    if base <= 0.0 {
                        continue;
                    }
                    acc += up[i] * d * o / (self.gamma * base);
                }
                grad[ch * h + y] = acc;
            }
        }
        RowGain::new(h, grad)
    }
}

pub fn compose(scene: &ScenePair, gain: &RowGain, gamma: f64) -> Result<Image> {
    LinearScene::new(scene, gamma)?.compose(gain)
}

/// Renders a scene under a signal for a particular camera.
///
/// Works on a prepared [`LinearScene`] so the gamma linearization is paid once
/// per scene rather than once per render.
#[derive(Debug, Clone)]
pub struct Renderer {
    scene: LinearScene,
    kernel: ShutterKernel,
    camera: CameraTimings,
}

impl Renderer {
    pub fn new(scene: &ScenePair, camera: &CameraTimings) -> Result<Self> {
        camera.validate()?;
        if scene.dims() != (camera.rows, camera.cols) {
            return Err(Error::shape(format!(
                "scene is {:?}, camera expects {}x{}",
                scene.dims(),
                camera.rows,
                camera.cols
            )));
        }
        Ok(Self {
            scene: LinearScene::new(scene, camera.gamma)?,
            kernel: ShutterKernel::new(camera),
            camera: *camera,
        })
    }

    pub fn linear_scene(&self) -> &LinearScene {
        &self.scene
    }

    pub fn kernel(&self) -> &ShutterKernel {
        &self.kernel
    }

    pub fn camera(&self) -> &CameraTimings {
        &self.camera
    }

    pub fn gain(&self, signal: &LightSignal, delta: usize) -> Result<RowGain> {
        check_signal(signal, &self.camera)?;
        row_gain_raw(signal.values(), signal.len(), delta, &self.kernel, self.camera.rows)
    }

    pub fn render(&self, signal: &LightSignal, delta: usize) -> Result<Image> {
        let gain = self.gain(signal, delta)?;
        self.scene.compose(&gain)
    }

    /// Forward render returning the gain as well, for a later [`Renderer::backward`].
    pub fn render_with_gain(&self, signal: &LightSignal, delta: usize) -> Result<(Image, RowGain)> {
        let gain = self.gain(signal, delta)?;
        let img = self.scene.compose(&gain)?;
        Ok((img, gain))
    }

    /// Gradient with respect to the signal values (channel-major `CHANNELS x len`).
    pub fn backward(
        &self,
        signal: &LightSignal,
        delta: usize,
        gain: &RowGain,
        rendered: &Image,
        upstream: &Image,
    ) -> Result<Vec<f64>> {
        let grad_gain = self.scene.compose_backward(gain, rendered, upstream)?;
        Ok(row_gain_backward_raw(&grad_gain, signal.len(), delta, &self.kernel))
    }
}

pub fn render(scene: &ScenePair, signal: &LightSignal, delta: usize, camera: &CameraTimings) -> Result<Image> {
    Renderer::new(scene, camera)?.render(signal, delta)
}

pub fn render_backward(
    scene: &ScenePair,
    signal: &LightSignal,
    delta: usize,
    camera: &CameraTimings,
    upstream: &Image,
) -> Result<Vec<f64>> {
    let renderer = Renderer::new(scene, camera)?;
    if upstream.dims() != scene.dims() {
        return Err(Error::shape(format!(
            "upstream gradient is {:?}, scene is {:?}",
            upstream.dims(),
            scene.dims()
        )));
    }
    let (img, gain) = renderer.render_with_gain(signal, delta)?;
    renderer.backward(signal, delta, &gain, &img, upstream)
}
