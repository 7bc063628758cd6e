//! Render-aware saliency: transmittance-weighted contribution, screen-space
//! gradient response and pixel coverage, fused by a convex combination after
//! max-normalization. Also the parameter-space Taylor score used as a
//! baseline.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::qadg::sample_views;
use crate::render::{self, LossConfig, RenderOptions, RenderOutput};
use crate::scene::{AttributeClass, Camera, GaussianScene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaliencyWeights {
    pub transmittance: f64,
    pub gradient: f64,
    pub coverage: f64,
}

impl Default for SaliencyWeights {
    fn default() -> Self {
        Self { transmittance: 0.5, gradient: 0.3, coverage: 0.2 }
    }
}

impl SaliencyWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.transmittance, self.gradient, self.coverage];
        if w.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("saliency weights must be non-negative, got {w:?}")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("saliency weights sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyVector {
    pub s_trans: Vec<f64>,
    pub s_grad: Vec<f64>,
    pub s_cov: Vec<f64>,
    pub s_fused: Vec<f64>,
    pub weights: SaliencyWeights,
    pub view_indices: Vec<usize>,
}

impl SaliencyVector {
    pub fn k_views(&self) -> usize {
        self.view_indices.len()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "index,s_trans,s_grad,s_cov,s_fused")?;
        for i in 0..self.s_fused.len() {
            writeln!(
                f,
                "{i},{:e},{:e},{:e},{:e}",
                self.s_trans[i], self.s_grad[i], self.s_cov[i], self.s_fused[i]
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Mean over views of each Gaussian's `sum_p T * alpha`.
pub fn saliency_trans(outputs: &[RenderOutput]) -> Result<Vec<f64>> {
    mean_over_views(outputs, |o| o.per_gaussian_transmittance.clone())
}

/// Mean over views of each Gaussian's covered pixel count.
pub fn saliency_cov(outputs: &[RenderOutput]) -> Result<Vec<f64>> {
    mean_over_views(outputs, |o| o.per_gaussian_pixel_count.iter().map(|c| *c as f64).collect())
}

fn mean_over_views(outputs: &[RenderOutput], f: impl Fn(&RenderOutput) -> Vec<f64>) -> Result<Vec<f64>> {
    let first = outputs.first().ok_or_else(|| Error::InvalidArgument("saliency needs at least one view".into()))?;
    let mut acc = vec![0.0; f(first).len()];
    for o in outputs {
        for (a, v) in acc.iter_mut().zip(f(o)) {
            *a += v;
        }
    }
    let k = outputs.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}

fn check_targets(cameras: &[&Camera], targets: &[&Image]) -> Result<()> {
    if cameras.is_empty() {
        return Err(Error::InvalidArgument("saliency needs at least one view".into()));
    }
    if cameras.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} views but {} target images",
            cameras.len(),
            targets.len()
        )));
    }
    Ok(())
}

/// `|sum over views and row scalars of dL1/dtheta|` per Gaussian: the
/// first-order loss change under a uniform perturbation of the whole row.
pub fn saliency_grad(scene: &GaussianScene, cameras: &[&Camera], targets: &[&Image]) -> Result<Vec<f64>> {
    check_targets(cameras, targets)?;
    let mut acc = vec![0.0; scene.len()];
    for (cam, target) in cameras.iter().zip(targets) {
        let out = render::backward(scene, cam, target, &LossConfig::l1_only())?;
        for (i, a) in acc.iter_mut().enumerate() {
            *a += out.grads.row_sum(i);
        }
    }
    Ok(acc.into_iter().map(f64::abs).collect())
}

/// `|sum_k g_k theta_k|` over each Gaussian's row, with the training loss.
pub fn taylor_saliency(scene: &GaussianScene, cameras: &[&Camera], targets: &[&Image]) -> Result<Vec<f64>> {
    check_targets(cameras, targets)?;
    let mut acc = vec![0.0; scene.len()];
    for (cam, target) in cameras.iter().zip(targets) {
        let out = render::backward(scene, cam, target, &LossConfig::default())?;
        for attr in AttributeClass::ALL {
            let d = attr.dim(scene.sh_degree);
            if d == 0 {
                continue;
            }
            let theta = scene.gather(attr);
            for (i, a) in acc.iter_mut().enumerate() {
                let g = out.grads.row(attr, i);
                *a += g.iter().zip(&theta[i * d..(i + 1) * d]).map(|(g, t)| g * t).sum::<f64>();
            }
        }
    }
    Ok(acc.into_iter().map(f64::abs).collect())
}

/// Max-normalizes each component over alive Gaussians and mixes them.
pub fn fuse(
    s_trans: Vec<f64>,
    s_grad: Vec<f64>,
    s_cov: Vec<f64>,
    weights: SaliencyWeights,
    alive: &[bool],
) -> Result<SaliencyVector> {
    weights.validate()?;
    let n = alive.len();
    if s_trans.len() != n || s_grad.len() != n || s_cov.len() != n {
        return Err(Error::DimensionMismatch("saliency components disagree on length".into()));
    }
    let normalized = |v: &[f64]| -> Vec<f64> {
        let m = v.iter().zip(alive).filter(|(_, a)| **a).fold(0.0f64, |m, (x, _)| m.max(*x));
        v.iter()
            .zip(alive)
            .map(|(x, a)| if *a && m > 0.0 { x / m } else { 0.0 })
            .collect()
    };
    let (t, g, c) = (normalized(&s_trans), normalized(&s_grad), normalized(&s_cov));
    let s_fused = (0..n)
        .map(|i| {
            let f = weights.transmittance * t[i] + weights.gradient * g[i] + weights.coverage * c[i];
            f.min(1.0)
        })
        .collect();
    Ok(SaliencyVector { s_trans, s_grad, s_cov, s_fused, weights, view_indices: Vec::new() })
}

/// Which per-Gaussian score drives pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyMode {
    RenderAware,
    Taylor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyConfig {
    pub k_views: usize,
    pub weights: SaliencyWeights,
    pub coverage_epsilon: f64,
    pub mode: SaliencyMode,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            k_views: 8,
            weights: SaliencyWeights::default(),
            coverage_epsilon: render::DEFAULT_COVERAGE_EPSILON,
            mode: SaliencyMode::RenderAware,
        }
    }
}

/// Samples `k_views` cameras (seeded) and scores every Gaussian of `scene`.
pub fn compute_saliency(
    scene: &GaussianScene,
    cameras: &[Camera],
    targets: &[Image],
    cfg: &SaliencyConfig,
    seed: u64,
) -> Result<SaliencyVector> {
    if cameras.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} cameras but {} target images",
            cameras.len(),
            targets.len()
        )));
    }
    let views = sample_views(cameras.len(), cfg.k_views, seed)?;
    let cams: Vec<&Camera> = views.iter().map(|&v| &cameras[v]).collect();
    let tgts: Vec<&Image> = views.iter().map(|&v| &targets[v]).collect();
    let mut out = match cfg.mode {
        SaliencyMode::RenderAware => {
            let opts = RenderOptions { coverage_epsilon: cfg.coverage_epsilon, ..RenderOptions::default() };
            let renders =
                cams.iter().map(|c| render::render_with(scene, c, &opts)).collect::<Result<Vec<_>>>()?;
            let t = saliency_trans(&renders)?;
            let c = saliency_cov(&renders)?;
            let g = saliency_grad(scene, &cams, &tgts)?;
            fuse(t, g, c, cfg.weights, &scene.alive)?
        }
        SaliencyMode::Taylor => {
            let t = taylor_saliency(scene, &cams, &tgts)?;
            let zeros = vec![0.0; scene.len()];
            let w = SaliencyWeights { transmittance: 1.0, gradient: 0.0, coverage: 0.0 };
            let mut v = fuse(t, zeros.clone(), zeros, w, &scene.alive)?;
            v.weights = cfg.weights;
            v
        }
    };
    out.view_indices = views;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_alive_gaussian_scores_one() {
        let v = fuse(vec![0.3], vec![2.0], vec![5.0], SaliencyWeights::default(), &[true]).unwrap();
        assert!((v.s_fused[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dead_gaussians_score_zero_and_do_not_set_the_max() {
        let v = fuse(
            vec![1.0, 10.0],
            vec![1.0, 10.0],
            vec![1.0, 10.0],
            SaliencyWeights::default(),
            &[true, false],
        )
        .unwrap();
        assert_eq!(v.s_fused[1], 0.0);
        assert!((v.s_fused[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weights_are_validated() {
        let bad = SaliencyWeights { transmittance: -0.1, gradient: 0.6, coverage: 0.5 };
        assert!(fuse(vec![1.0], vec![1.0], vec![1.0], bad, &[true]).is_err());
        let bad = SaliencyWeights { transmittance: 0.5, gradient: 0.5, coverage: 0.5 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_view_set_is_an_error() {
        assert!(saliency_trans(&[]).is_err());
    }
}
