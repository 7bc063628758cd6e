//! Per-attribute fake quantizers with learnable bit-widths.
//!
//! The bit-width is `b = log2(q_m^t / d + 1) + 1`, clamped to the class's
//! bounds. Values are snapped to a symmetric grid of `2^(round(b)-1) - 1`
//! levels per side over `[-r, r]`, where `r` tracks an EMA of the batch
//! absolute maximum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::SceneGradients;
use crate::scene::{AttributeClass, GaussianScene};

pub const DEFAULT_EMA_MOMENTUM: f64 = 0.99;
/// Floor for clip ranges so that all-zero blocks still quantize.
pub const MIN_RANGE: f64 = 1e-12;
/// Tolerance used to decide whether a bit bound is active.
const BOUND_TOL: f64 = 1e-9;

/// Inclusive bit-width bounds for one attribute class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitBounds {
    pub lo: u32,
    pub hi: u32,
}

impl BitBounds {
    pub const fn new(lo: u32, hi: u32) -> Self {
        Self { lo, hi }
    }
}

/// Per-attribute bit ranges, indexed like [`AttributeClass::ALL`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitRangePreset {
    pub bounds: [BitBounds; 6],
}

impl BitRangePreset {
    pub const COMPRESSIVE: BitRangePreset = BitRangePreset {
        bounds: [
            BitBounds::new(12, 16),
            BitBounds::new(8, 8),
            BitBounds::new(8, 8),
            BitBounds::new(6, 6),
            BitBounds::new(8, 8),
            BitBounds::new(7, 8),
        ],
    };

    pub const COMPETITIVE: BitRangePreset = BitRangePreset {
        bounds: [
            BitBounds::new(14, 16),
            BitBounds::new(10, 10),
            BitBounds::new(10, 10),
            BitBounds::new(8, 10),
            BitBounds::new(10, 10),
            BitBounds::new(8, 10),
        ],
    };

    pub fn uniform(bits: u32) -> Self {
        Self { bounds: [BitBounds::new(bits, bits); 6] }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "compressive" => Ok(Self::COMPRESSIVE),
            "competitive" => Ok(Self::COMPETITIVE),
            other => Err(Error::InvalidConfig(format!(
                "unknown bit preset '{other}' (expected compressive or competitive)"
            ))),
        }
    }

    pub fn get(&self, attr: AttributeClass) -> BitBounds {
        self.bounds[attr.index()]
    }
}

/// Raw (unclamped) bit-width.
pub fn raw_bitwidth(q_m: f64, t: f64, d: f64) -> f64 {
    (q_m.powf(t) / d + 1.0).log2() + 1.0
}

/// Exponent `t` at which the raw bit-width equals `bits`.
pub fn exponent_for_bits(q_m: f64, d: f64, bits: f64) -> f64 {
    (d * (2f64.powf(bits - 1.0) - 1.0)).ln() / q_m.ln()
}

/// Grid scale `s = (2^(b-1) - 1) / r`.
pub fn grid_scale(bits: f64, range: f64) -> f64 {
    (2f64.powf(bits - 1.0) - 1.0) / range
}

/// Symmetric uniform quantization of one scalar at an integer bit-width.
pub fn quantize_scalar(x: f64, bits: u32, range: f64) -> f64 {
    let s = grid_scale(bits as f64, range);
    // Adding +0 maps a rounded -0 to +0, matching a decoded zero code.
    (s * x.clamp(-range, range)).round() / s + 0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerState {
    pub attribute: AttributeClass,
    pub q_m: f64,
    pub t: f64,
    pub d: f64,
    /// Clip range; `None` until the first batch is observed.
    pub range: Option<f64>,
    pub bounds: BitBounds,
    pub ema_momentum: f64,
}

impl QuantizerState {
    /// Starts at `q_m = 2, d = 1` with `t` placing the raw bit-width at the upper bound.
    pub fn new(attribute: AttributeClass, bounds: BitBounds) -> Self {
        let (q_m, d) = (2.0, 1.0);
        Self {
            attribute,
            q_m,
            t: exponent_for_bits(q_m, d, bounds.hi as f64),
            d,
            range: None,
            bounds,
            ema_momentum: DEFAULT_EMA_MOMENTUM,
        }
    }

    pub fn raw_bitwidth(&self) -> f64 {
        raw_bitwidth(self.q_m, self.t, self.d)
    }

    /// Bit-width clamped to the bounds.
    pub fn bitwidth(&self) -> f64 {
        self.raw_bitwidth().clamp(self.bounds.lo as f64, self.bounds.hi as f64)
    }

    /// Integer bit-width used to build the grid.
    pub fn grid_bits(&self) -> u32 {
        self.bitwidth().round() as u32
    }

    pub fn range_value(&self) -> f64 {
        self.range.expect("clip range used before any batch was observed")
    }

    pub fn fake_quantize(&self, values: &[f64]) -> Vec<f64> {
        let (bits, r) = (self.grid_bits(), self.range_value());
        values.iter().map(|&x| quantize_scalar(x, bits, r)).collect()
    }

    /// EMA update of the clip range from a batch's absolute maximum.
    pub fn update_range(&mut self, batch: &[f64]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let m = batch.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        let next = match self.range {
            None => m,
            Some(r) => self.ema_momentum * r + (1.0 - self.ema_momentum) * m,
        };
        self.range = Some(next.max(MIN_RANGE));
        Ok(())
    }

    /// Clipped straight-through gradient for the full-precision values.
    pub fn ste_backward(&self, upstream: &[f64], values: &[f64]) -> Result<Vec<f64>> {
        if upstream.len() != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "upstream gradient has {} entries, values have {}",
                upstream.len(),
                values.len()
            )));
        }
        let r = self.range_value();
        Ok(upstream.iter().zip(values).map(|(g, x)| if x.abs() <= r { *g } else { 0.0 }).collect())
    }

    /// Moves `t` onto the violated bound so the raw bit-width is feasible.
    pub fn project_bits(&mut self) -> Result<()> {
        if !(self.q_m > 1.0) {
            return Err(Error::IllPosedProjection { attribute: self.attribute.name(), q_m: self.q_m });
        }
        let raw = self.raw_bitwidth();
        let (lo, hi) = (self.bounds.lo as f64, self.bounds.hi as f64);
        if raw < lo {
            self.t = exponent_for_bits(self.q_m, self.d, lo);
        } else if raw > hi {
            self.t = exponent_for_bits(self.q_m, self.d, hi);
        }
        Ok(())
    }

    /// True when the raw bit-width sits outside the bounds, so the clamp
    /// blocks gradients to `(q_m, t, d)`.
    pub fn clamp_active(&self) -> bool {
        let raw = self.raw_bitwidth();
        raw < self.bounds.lo as f64 - BOUND_TOL || raw > self.bounds.hi as f64 + BOUND_TOL
    }

    /// `d b / d (q_m, t, d)`, zero when the clamp is active.
    pub fn bitwidth_gradient(&self) -> [f64; 3] {
        if self.clamp_active() {
            return [0.0; 3];
        }
        let u = self.q_m.powf(self.t) / self.d;
        let db_du = 1.0 / ((u + 1.0) * std::f64::consts::LN_2);
        [
            db_du * self.t * self.q_m.powf(self.t - 1.0) / self.d,
            db_du * u * self.q_m.ln(),
            db_du * -u / self.d,
        ]
    }

    /// `d x_hat / d b` for each value, with rounding treated as identity and
    /// `b` continuous inside the grid scale.
    pub fn value_bit_sensitivity(&self, values: &[f64]) -> Vec<f64> {
        let r = self.range_value();
        let bits = self.grid_bits();
        let bc = self.bitwidth();
        let p = 2f64.powf(bc - 1.0);
        let k = std::f64::consts::LN_2 * p / (p - 1.0);
        values
            .iter()
            .map(|&x| {
                let xc = x.clamp(-r, r);
                (xc - quantize_scalar(x, bits, r)) * k
            })
            .collect()
    }

    /// Gradients of a loss with respect to `(q_m, t, d)` given its gradient
    /// with respect to the quantized values.
    pub fn parameter_gradients(&self, upstream: &[f64], values: &[f64]) -> [f64; 3] {
        let db = self.bitwidth_gradient();
        if db == [0.0; 3] {
            return db;
        }
        let dl_db: f64 =
            self.value_bit_sensitivity(values).iter().zip(upstream).map(|(s, g)| s * g).sum();
        db.map(|v| v * dl_db)
    }
}

/// Gradients for `(q_m, t, d)` per attribute class.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QuantizerGradients(pub [[f64; 3]; 6]);

impl QuantizerGradients {
    pub fn add_assign(&mut self, o: &QuantizerGradients) {
        for (a, b) in self.0.iter_mut().zip(&o.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().flatten().for_each(|v| *v *= k);
    }
}

/// One quantizer per attribute class. With `shared` set, all classes use the
/// bit-width parameters of the first state and keep only their own clip range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerBank {
    pub states: Vec<QuantizerState>,
    pub shared: bool,
}

impl QuantizerBank {
    pub fn new(preset: &BitRangePreset) -> Self {
        let states =
            AttributeClass::ALL.iter().map(|a| QuantizerState::new(*a, preset.get(*a))).collect();
        Self { states, shared: false }
    }

    /// All classes driven by one set of bit-width parameters.
    pub fn shared(bounds: BitBounds) -> Self {
        let mut bank = Self::new(&BitRangePreset { bounds: [bounds; 6] });
        bank.shared = true;
        bank
    }

    pub fn state(&self, attr: AttributeClass) -> &QuantizerState {
        &self.states[attr.index()]
    }

    pub fn state_mut(&mut self, attr: AttributeClass) -> &mut QuantizerState {
        &mut self.states[attr.index()]
    }

    /// Clamped bit-widths per class.
    pub fn bitwidths(&self) -> [f64; 6] {
        std::array::from_fn(|k| self.states[k].bitwidth())
    }

    pub fn grid_bits(&self) -> [u32; 6] {
        std::array::from_fn(|k| self.states[k].grid_bits())
    }

    /// EMA range update from the alive rows of each block.
    pub fn update_ranges(&mut self, scene: &GaussianScene) -> Result<()> {
        for st in &mut self.states {
            let batch = alive_values(scene, st.attribute);
            if batch.is_empty() {
                continue;
            }
            st.update_range(&batch)?;
        }
        Ok(())
    }

    pub fn ranges_ready(&self) -> bool {
        self.states.iter().all(|s| s.range.is_some())
    }

    /// Copy of the scene with every block passed through its quantizer.
    pub fn quantize_scene(&self, scene: &GaussianScene) -> GaussianScene {
        let mut out = scene.clone();
        for st in &self.states {
            if st.attribute.dim(scene.sh_degree) == 0 {
                continue;
            }
            let q = st.fake_quantize(&scene.gather(st.attribute));
            out.scatter(st.attribute, &q);
        }
        out
    }

    /// Given gradients with respect to the quantized scene, returns the
    /// clipped straight-through gradients for the scene and the gradients
    /// for every quantizer's `(q_m, t, d)`.
    pub fn chain(
        &self,
        scene: &GaussianScene,
        upstream: &SceneGradients,
    ) -> (SceneGradients, QuantizerGradients) {
        let mut scene_grads = SceneGradients::zeros_like(scene);
        let mut quant = QuantizerGradients::default();
        for st in &self.states {
            let attr = st.attribute;
            if attr.dim(scene.sh_degree) == 0 {
                continue;
            }
            let values = scene.gather(attr);
            let up = upstream.get(attr);
            let ste = st.ste_backward(up, &values).expect("gradient blocks match the scene");
            scene_grads.get_mut(attr).copy_from_slice(&ste);
            quant.0[attr.index()] = st.parameter_gradients(up, &values);
        }
        if self.shared {
            let mut total = [0.0; 3];
            for g in &quant.0 {
                for k in 0..3 {
                    total[k] += g[k];
                }
            }
            quant.0 = [total; 6];
        }
        (scene_grads, quant)
    }

    /// Projects every quantizer onto its bit bounds.
    pub fn project(&mut self) -> Result<()> {
        for st in &mut self.states {
            st.project_bits()?;
        }
        Ok(())
    }

    /// Sets the upper bit bound of every class, keeping `lo <= hi`.
    pub fn set_upper_bounds(&mut self, hi: [u32; 6]) {
        for (st, h) in self.states.iter_mut().zip(hi) {
            st.bounds.hi = h.max(st.bounds.lo);
        }
    }

    /// Copies the first state's bit-width parameters to the others when shared.
    pub fn sync_shared(&mut self) {
        if !self.shared {
            return;
        }
        let (q_m, t, d, bounds) = {
            let s = &self.states[0];
            (s.q_m, s.t, s.d, s.bounds)
        };
        for st in &mut self.states[1..] {
            st.q_m = q_m;
            st.t = t;
            st.d = d;
            st.bounds = bounds;
        }
    }
}

fn alive_values(scene: &GaussianScene, attr: AttributeClass) -> Vec<f64> {
    let d = attr.dim(scene.sh_degree);
    let all = scene.gather(attr);
    let mut out = Vec::with_capacity(all.len());
    for (i, row) in all.chunks_exact(d.max(1)).enumerate().take(scene.len()) {
        if scene.alive[i] {
            out.extend_from_slice(row);
        }
    }
    out
}
