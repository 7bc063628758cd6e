//! Adaptive-moment updates with saliency-masked rows, projected quantizer
//! steps, prune-mask scheduling and prune events.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qadg::DependencyGraph;
use crate::quantizer::{QuantizerBank, QuantizerGradients};
use crate::render::SceneGradients;
use crate::scene::{AttributeClass, GaussianScene};

/// Keeps the bit-width formula well posed after a quantizer step.
const QM_MIN: f64 = 1.05;
const D_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    /// Means use `lr * means_lr_scale`.
    pub means_lr_scale: f64,
    pub quantizer_lr: f64,
    /// Scene learning rates decay exponentially to this fraction of their
    /// start value over a run.
    pub lr_final_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 1.6e-2, means_lr_scale: 0.1, quantizer_lr: 1e-3, lr_final_ratio: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimConfig {
    /// Scene learning-rate multiplier at iteration `t` of `total`.
    pub fn decay(&self, t: usize, total: usize) -> f64 {
        self.lr_final_ratio.powf(t as f64 / total.max(1) as f64)
    }

    pub fn block_lr(&self, attr: AttributeClass) -> f64 {
        if attr == AttributeClass::Means {
            self.lr * self.means_lr_scale
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub cfg: OptimConfig,
    pub step: u64,
    /// Multiplies the scene learning rates (not the quantizer's).
    pub lr_scale: f64,
    pub m: [Vec<f64>; 6],
    pub v: [Vec<f64>; 6],
    pub quant_m: [[f64; 3]; 6],
    pub quant_v: [[f64; 3]; 6],
    /// True for rows scheduled for removal at the next prune event.
    pub prune_mask: Vec<bool>,
}

impl OptimState {
    pub fn new(scene: &GaussianScene, cfg: OptimConfig) -> Self {
        let zeros = |a: AttributeClass| vec![0.0; scene.len() * a.dim(scene.sh_degree)];
        Self {
            cfg,
            step: 0,
            lr_scale: 1.0,
            m: AttributeClass::ALL.map(zeros),
            v: AttributeClass::ALL.map(zeros),
            quant_m: [[0.0; 3]; 6],
            quant_v: [[0.0; 3]; 6],
            prune_mask: vec![false; scene.len()],
        }
    }

    /// One adaptive-moment step. Rows that are masked or dead keep their
    /// parameters and moments. When `quant` is given, the quantizer
    /// parameters take a step too and are projected back onto their bounds
    /// (unless `project` is false).
    pub fn masked_step(
        &mut self,
        scene: &mut GaussianScene,
        grads: &SceneGradients,
        quant: Option<(&mut QuantizerBank, &QuantizerGradients)>,
        project: bool,
    ) -> Result<()> {
        if grads.len != scene.len() || self.prune_mask.len() != scene.len() {
            return Err(Error::DimensionMismatch(format!(
                "scene has {} rows, gradients {}, mask {}",
                scene.len(),
                grads.len,
                self.prune_mask.len()
            )));
        }
        if let Some(attr) = grads.first_non_finite() {
            return Err(Error::NonFiniteGradient(attr.name()));
        }
        if let Some((_, qg)) = &quant {
            if qg.0.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient("quantizer"));
            }
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let adam = |theta: &mut f64, m: &mut f64, v: &mut f64, g: f64, lr: f64| {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            *theta -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
        };

        for attr in AttributeClass::ALL {
            let d = attr.dim(scene.sh_degree);
            if d == 0 {
                continue;
            }
            let lr = c.block_lr(attr) * self.lr_scale;
            let mut values = scene.gather(attr);
            let g = grads.get(attr);
            let (m, v) = (&mut self.m[attr.index()], &mut self.v[attr.index()]);
            for i in 0..scene.len() {
                if self.prune_mask[i] || !scene.alive[i] {
                    continue;
                }
                for k in i * d..(i + 1) * d {
                    adam(&mut values[k], &mut m[k], &mut v[k], g[k], lr);
                }
            }
            scene.scatter(attr, &values);
        }

        if let Some((bank, qg)) = quant {
            let active = if bank.shared { 1 } else { bank.states.len() };
            for (k, st) in bank.states.iter_mut().enumerate().take(active) {
                let mut p = [st.q_m, st.t, st.d];
                for j in 0..3 {
                    adam(&mut p[j], &mut self.quant_m[k][j], &mut self.quant_v[k][j], qg.0[k][j], c.quantizer_lr);
                }
                st.q_m = p[0].max(QM_MIN);
                st.t = p[1];
                st.d = p[2].max(D_MIN);
            }
            bank.sync_shared();
            if project {
                bank.project()?;
            }
        }
        Ok(())
    }

    /// Keeps moments and mask of the surviving rows only.
    fn retain_rows(&mut self, keep: &[bool], sh_degree: usize) {
        for attr in AttributeClass::ALL {
            let d = attr.dim(sh_degree);
            for block in [&mut self.m[attr.index()], &mut self.v[attr.index()]] {
                let old = std::mem::take(block);
                *block = old
                    .chunks_exact(d.max(1))
                    .zip(keep)
                    .filter(|(_, k)| **k)
                    .flat_map(|(row, _)| row.iter().copied())
                    .take(keep.iter().filter(|k| **k).count() * d)
                    .collect();
            }
        }
        self.prune_mask = vec![false; keep.iter().filter(|k| **k).count()];
    }
}

/// Masks the `alive - k_t` alive Gaussians with the lowest saliency; equal
/// scores mask the lower index first.
pub fn schedule_prune_mask(saliency: &[f64], alive: &[bool], k_t: usize) -> Result<Vec<bool>> {
    if saliency.len() != alive.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} saliency scores for {} gaussians",
            saliency.len(),
            alive.len()
        )));
    }
    if k_t == 0 {
        return Err(Error::InvalidArgument("prune target must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..alive.len()).filter(|&i| alive[i]).collect();
    if k_t > order.len() {
        return Err(Error::InvalidArgument(format!("prune target {k_t} exceeds {} alive gaussians", order.len())));
    }
    order.sort_by(|&a, &b| saliency[a].total_cmp(&saliency[b]).then(a.cmp(&b)));
    let mut mask = vec![false; alive.len()];
    for &i in &order[..order.len() - k_t] {
        mask[i] = true;
    }
    Ok(mask)
}

/// Removes the rows in `mask` from the scene, the graph and the optimizer
/// moments; survivors are renumbered in index order.
pub fn prune_event(
    scene: &GaussianScene,
    graph: &DependencyGraph,
    state: &mut OptimState,
    mask: &[bool],
) -> Result<(GaussianScene, DependencyGraph)> {
    if mask.len() != scene.len() || graph.n != scene.len() {
        return Err(Error::DimensionMismatch(format!(
            "mask {} / graph {} / scene {} rows",
            mask.len(),
            graph.n,
            scene.len()
        )));
    }
    let mut graph = graph.clone();
    let mut masked = scene.clone();
    for (i, m) in mask.iter().enumerate() {
        if *m && scene.alive[i] {
            graph.propagate_prune(i)?;
            masked.alive[i] = false;
        }
    }
    state.retain_rows(&masked.alive, scene.sh_degree);
    Ok((masked.compact(), graph.compacted()))
}

/// `K_t = N - floor(t (N - K) / n_events)` for events `t = 1..=n_events`.
pub fn linear_prune_targets(n: usize, k: usize, n_events: usize) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::InvalidArgument(format!("target {k} exceeds {n} gaussians")));
    }
    if n_events == 0 {
        return Err(Error::InvalidArgument("at least one prune event is required".into()));
    }
    Ok((1..=n_events).map(|t| n - t * (n - k) / n_events).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_follow_the_linear_ramp() {
        let t = linear_prune_targets(100_000, 50_000, 5).unwrap();
        assert_eq!(t[2], 70_000);
        assert_eq!(*t.last().unwrap(), 50_000);
        assert_eq!(linear_prune_targets(10, 3, 1).unwrap(), vec![3]);
        assert!(linear_prune_targets(3, 10, 2).is_err());
    }

    #[test]
    fn mask_keeps_the_top_scores() {
        let s = [0.5, 0.1, 0.9, 0.1];
        let alive = [true; 4];
        assert_eq!(schedule_prune_mask(&s, &alive, 4).unwrap(), vec![false; 4]);
        assert_eq!(schedule_prune_mask(&s, &alive, 1).unwrap(), vec![true, true, false, true]);
        // Tie between 1 and 3: the lower index goes first.
        assert_eq!(schedule_prune_mask(&s, &alive, 3).unwrap(), vec![false, true, false, false]);
        assert!(schedule_prune_mask(&s, &alive, 0).is_err());
    }
}
