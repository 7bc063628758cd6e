//! Rate-distortion bit allocation across attribute classes.
//!
//! Under the high-rate model a class with per-scalar spread `sigma`,
//! rendering sensitivity `lambda` and `d` scalars per Gaussian contributes
//! `d * lambda^2 * sigma^2 / 12 * 2^(-2b)` of distortion at `b` bits. The
//! reverse-water-filling split assigns each class
//! `b_mean + log2(lambda sigma) - mean_a log2(lambda_a sigma_a)`.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{self, RenderOptions};
use crate::scene::{AttributeClass, Camera, GaussianScene};
use crate::svg::{Plot, Series};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeStat {
    pub name: String,
    pub d: usize,
    pub sigma: f64,
    pub lambda: f64,
}

impl AttributeStat {
    /// `lambda^2 sigma^2`.
    pub fn weight(&self) -> f64 {
        (self.lambda * self.sigma).powi(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeStats {
    pub attributes: Vec<AttributeStat>,
}

impl AttributeStats {
    pub fn total_dim(&self) -> usize {
        self.attributes.iter().map(|a| a.d).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(Error::InvalidArgument("no attributes".into()));
        }
        for a in &self.attributes {
            if a.d == 0 {
                return Err(Error::InvalidArgument(format!("attribute {} has d = 0", a.name)));
            }
            if !(a.sigma > 0.0) || !a.sigma.is_finite() {
                return Err(Error::ZeroVariance(a.name.clone()));
            }
            if !(a.lambda >= 0.0) || !a.lambda.is_finite() {
                return Err(Error::InvalidArgument(format!("attribute {} has lambda {}", a.name, a.lambda)));
            }
        }
        Ok(())
    }

    /// Predicted distortion of an allocation.
    pub fn distortion(&self, bits: &[f64]) -> f64 {
        self.attributes
            .iter()
            .zip(bits)
            .map(|(a, b)| a.d as f64 * a.weight() / 12.0 * 2f64.powf(-2.0 * b))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub names: Vec<String>,
    pub bits: Vec<f64>,
    pub mean_bits: f64,
    pub budget: f64,
    pub distortion: f64,
}

/// Per-scalar standard deviation of every block (alive rows) and the
/// per-scalar RMS rendering sensitivity, estimated from `probes` random
/// unit directions per block with central differences, averaged over cameras.
pub fn estimate_stats(
    scene: &GaussianScene,
    cameras: &[Camera],
    probes: usize,
    step: f64,
    seed: u64,
    opts: &RenderOptions,
) -> Result<AttributeStats> {
    if cameras.is_empty() {
        return Err(Error::InvalidArgument("sensitivity estimation needs at least one camera".into()));
    }
    if probes == 0 {
        return Err(Error::InvalidArgument("probe count must be at least 1".into()));
    }
    let scene = scene.compact();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attributes = Vec::new();
    for attr in AttributeClass::ALL {
        let d = attr.dim(scene.sh_degree);
        if d == 0 {
            continue;
        }
        let values = scene.gather(attr);
        let sigma = std_dev(&values);
        if !(sigma > 0.0) {
            return Err(Error::ZeroVariance(attr.name().to_string()));
        }
        let n = values.len();
        let mut lambda = 0.0;
        for cam in cameras {
            let mut sq = 0.0;
            for _ in 0..probes {
                let dir: Vec<f64> = (0..n)
                    .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 } / (n as f64).sqrt())
                    .collect();
                let shifted = |sign: f64| -> Result<Vec<f64>> {
                    let mut s = scene.clone();
                    let v: Vec<f64> = values.iter().zip(&dir).map(|(x, u)| x + sign * step * u).collect();
                    s.scatter(attr, &v);
                    Ok(render::render_with(&s, cam, opts)?.image.data)
                };
                let (p, m) = (shifted(1.0)?, shifted(-1.0)?);
                sq += p.iter().zip(&m).map(|(a, b)| ((a - b) / (2.0 * step)).powi(2)).sum::<f64>();
            }
            lambda += (sq / probes as f64).sqrt();
        }
        attributes.push(AttributeStat {
            name: attr.name().to_string(),
            d,
            sigma,
            lambda: lambda / cameras.len() as f64,
        });
    }
    Ok(AttributeStats { attributes })
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Reverse-water-filling allocation with an unweighted mean term.
pub fn closed_form_allocation(stats: &AttributeStats, budget: f64) -> Result<Allocation> {
    stats.validate()?;
    if let Some(a) = stats.attributes.iter().find(|a| a.lambda == 0.0) {
        return Err(Error::ZeroSensitivity(a.name.clone()));
    }
    let mean_bits = budget / stats.total_dim() as f64;
    let logs: Vec<f64> = stats.attributes.iter().map(|a| a.weight().log2()).collect();
    // Deviations from the first log keep symmetric instances exactly uniform.
    let mean_dev = logs.iter().map(|l| l - logs[0]).sum::<f64>() / logs.len() as f64;
    let bits: Vec<f64> = logs.iter().map(|l| mean_bits + 0.5 * ((l - logs[0]) - mean_dev)).collect();
    Ok(allocation(stats, bits, budget))
}

fn allocation(stats: &AttributeStats, bits: Vec<f64>, budget: f64) -> Allocation {
    Allocation {
        names: stats.attributes.iter().map(|a| a.name.clone()).collect(),
        distortion: stats.distortion(&bits),
        mean_bits: budget / stats.total_dim() as f64,
        budget,
        bits,
    }
}

/// Exact minimizer of the predicted distortion over bit-widths on a grid
/// (at least one step each) subject to `sum d_a b_a <= budget`. Ties go to
/// the lexicographically smallest vector.
pub fn oracle_allocation(stats: &AttributeStats, budget: f64, grid_step: f64) -> Result<Allocation> {
    stats.validate()?;
    if ![1.0, 0.5, 0.25].contains(&grid_step) {
        return Err(Error::InvalidArgument(format!("grid step {grid_step} not in {{1, 0.5, 0.25}}")));
    }
    let n = stats.attributes.len();
    if n > 8 {
        return Err(Error::InvalidArgument(format!("oracle supports at most 8 attributes, got {n}")));
    }
    let minimum = grid_step * stats.total_dim() as f64;
    if budget < minimum {
        return Err(Error::InfeasibleBudget { budget, minimum });
    }
    let units = (budget / grid_step + 1e-9).floor() as usize;
    let dims: Vec<usize> = stats.attributes.iter().map(|a| a.d).collect();
    let cost = |a: usize, u: usize| {
        let s = &stats.attributes[a];
        s.d as f64 * s.weight() / 12.0 * 2f64.powf(-2.0 * u as f64 * grid_step)
    };
    // best[a][used]: least distortion of classes a.. given `used` budget units.
    let mut best = vec![vec![f64::INFINITY; units + 1]; n + 1];
    best[n].iter_mut().for_each(|v| *v = 0.0);
    let min_after: Vec<usize> = (0..=n).map(|a| dims[a..].iter().sum()).collect();
    for a in (0..n).rev() {
        for used in 0..=units {
            let mut m = f64::INFINITY;
            let mut u = 1;
            while used + dims[a] * u + min_after[a + 1] <= units {
                m = m.min(cost(a, u) + best[a + 1][used + dims[a] * u]);
                u += 1;
            }
            best[a][used] = m;
        }
    }
    let mut bits = Vec::with_capacity(n);
    let mut used = 0;
    for a in 0..n {
        let target = best[a][used];
        let tol = 1e-12 * target.abs().max(f64::MIN_POSITIVE);
        let mut u = 1;
        loop {
            let next = used + dims[a] * u;
            if cost(a, u) + best[a + 1][next] <= target + tol {
                used = next;
                break;
            }
            u += 1;
        }
        bits.push(u as f64 * grid_step);
    }
    Ok(allocation(stats, bits, budget))
}

/// Distortion of the uniform allocation minus that of the closed form.
pub fn uniform_gap(stats: &AttributeStats, budget: f64) -> Result<f64> {
    let closed = closed_form_allocation(stats, budget)?;
    let uniform = vec![closed.mean_bits; stats.attributes.len()];
    Ok(stats.distortion(&uniform) - closed.distortion)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitRow {
    pub name: String,
    pub empirical: f64,
    pub theoretical: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub rows: Vec<FitRow>,
    pub mean_abs_error: f64,
    /// No pair of classes is ordered one way empirically and the other way
    /// in theory (ties on either side are not contradictions).
    pub ordering_match: bool,
}

pub fn empirical_fit_report(converged_bits: &[f64], stats: &AttributeStats, budget: f64) -> Result<FitReport> {
    if converged_bits.len() != stats.attributes.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} converged bit-widths for {} attributes",
            converged_bits.len(),
            stats.attributes.len()
        )));
    }
    let closed = closed_form_allocation(stats, budget)?;
    let rows: Vec<FitRow> = stats
        .attributes
        .iter()
        .zip(converged_bits)
        .zip(&closed.bits)
        .map(|((a, e), t)| FitRow { name: a.name.clone(), empirical: *e, theoretical: *t, abs_error: (e - t).abs() })
        .collect();
    let mean_abs_error = rows.iter().map(|r| r.abs_error).sum::<f64>() / rows.len() as f64;
    let ordering_match = rows.iter().enumerate().all(|(i, a)| {
        rows[i + 1..].iter().all(|b| (a.empirical - b.empirical) * (a.theoretical - b.theoretical) >= 0.0)
    });
    Ok(FitReport { rows, mean_abs_error, ordering_match })
}

impl FitReport {
    pub fn write_csv(&self, path: impl AsRef<Path>, provenance: &str) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# {provenance}")?;
        writeln!(f, "attribute,empirical_bits,theoretical_bits,abs_error")?;
        for r in &self.rows {
            writeln!(f, "{},{},{},{}", r.name, r.empirical, r.theoretical, r.abs_error)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn to_svg(&self) -> String {
        let series = self
            .rows
            .iter()
            .map(|r| Series { label: r.name.clone(), points: vec![(r.theoretical, r.empirical)], line: false })
            .collect();
        Plot {
            title: "Empirical vs rate-distortion bit allocation".into(),
            x_label: "theoretical bits".into(),
            y_label: "converged bits".into(),
            log_x: false,
            diagonal: true,
            series,
        }
        .to_svg()
    }
}
