//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the binary exits non-zero when any of them fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use g3d_core::bitalloc::{closed_form_allocation, oracle_allocation, uniform_gap, AttributeStat, AttributeStats};
use g3d_core::codec::{self, QuantizedCheckpoint, HEADER_LEN};
use g3d_core::qadg::{build_qadg, DependencyGraph};
use g3d_core::quantizer::{raw_bitwidth, BitBounds, BitRangePreset, QuantizerBank, QuantizerState};
use g3d_core::render::{self, LossConfig};
use g3d_core::saliency::{compute_saliency, saliency_grad, saliency_trans, taylor_saliency, SaliencyConfig};
use g3d_core::scene::{AttributeClass, Camera, Gaussian, GaussianScene};
use g3d_core::schedule::{
    self, FixtureConfig, FloorMode, RunConfig, RunResult, SequentialResult, TrainingData,
};
use g3d_core::synth::{synthesize_scene, synthesize_scene_with, Layout, SynthOptions};
use g3d_core::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- C1

fn quantizer_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_ratio: f64 = 0.0;
    for bits in 2..=16u32 {
        let r: f64 = rng.random_range(0.01..50.0);
        let mut st = QuantizerState::new(AttributeClass::Means, BitBounds::new(bits, bits));
        st.range = Some(r);
        ensure(st.grid_bits() == bits, || format!("state at {bits} bits reports {}", st.grid_bits()))?;
        let xs: Vec<f64> = (0..100_000).map(|_| rng.random_range(-r..=r)).collect();
        let q = st.fake_quantize(&xs);
        let half_step = 0.5 * r / (2f64.powi(bits as i32 - 1) - 1.0);
        // A few ulps of slack for the divide after rounding.
        let slack = 4.0 * f64::EPSILON * r;
        for (x, y) in xs.iter().zip(&q) {
            let err = (x - y).abs();
            worst_ratio = worst_ratio.max(err / half_step);
            ensure(err <= half_step + slack, || format!("{bits} bits: |{x} - {y}| = {err:e} > {half_step:e}"))?;
        }
        let qq = st.fake_quantize(&q);
        ensure(q.iter().zip(&qq).all(|(a, b)| a.to_bits() == b.to_bits()), || format!("{bits} bits: not idempotent"))?;
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(5), || format!("took {}", secs(t)))?;
    Ok(format!("15 widths x 1e5 scalars, worst error {:.4} half-steps, idempotent, {}", worst_ratio, secs(t)))
}

// ---------------------------------------------------------------- C2

fn bit_formula() -> Outcome {
    for q_m in [1.1, 1.5, 2.0, 4.0] {
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=200 {
            let t = k as f64 * 0.1;
            let b = raw_bitwidth(q_m, t, 1.0);
            ensure(b > prev, || format!("q_m {q_m}: b({t}) = {b} not above {prev}"))?;
            prev = b;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut states = 0;
    while states < 100 {
        let lo = rng.random_range(2..=12u32);
        let hi = lo + rng.random_range(0..=4u32);
        let mut st = QuantizerState::new(AttributeClass::ShAc, BitBounds::new(lo, hi));
        st.q_m = rng.random_range(1.1..4.0);
        st.d = rng.random_range(0.1..10.0);
        st.t = rng.random_range(-5.0..40.0);
        let raw = st.raw_bitwidth();
        let target = if raw < lo as f64 {
            lo as f64
        } else if raw > hi as f64 {
            hi as f64
        } else {
            continue;
        };
        st.project_bits().map_err(|e| e.to_string())?;
        let err = (st.raw_bitwidth() - target).abs();
        worst = worst.max(err);
        ensure(err <= 1e-9, || format!("projection missed bound {target} by {err:e}"))?;
        states += 1;
    }
    Ok(format!("monotone for 4 bases; 100 projections, worst miss {worst:e}"))
}

// ---------------------------------------------------------------- C3

fn stats_from(d: usize, weights_log2: &[f64]) -> AttributeStats {
    AttributeStats {
        attributes: weights_log2
            .iter()
            .enumerate()
            .map(|(k, l)| AttributeStat { name: format!("a{k}"), d, sigma: 1.0, lambda: 2f64.powf(0.5 * l) })
            .collect(),
    }
}

fn bit_allocation_vs_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..=6);
        let d = rng.random_range(1..=4);
        let logs: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
        let mean_bits = rng.random_range(6.0..12.0);
        let stats = stats_from(d, &logs);
        let budget = mean_bits * (n * d) as f64;
        let closed = closed_form_allocation(&stats, budget).map_err(|e| e.to_string())?;
        let oracle = oracle_allocation(&stats, budget, 0.25).map_err(|e| e.to_string())?;
        for (c, o) in closed.bits.iter().zip(&oracle.bits) {
            worst = worst.max((c - o).abs());
        }
        ensure(worst <= 0.25 + 1e-9, || format!("closed {:?} vs oracle {:?}", closed.bits, oracle.bits))?;
        let gap = uniform_gap(&stats, budget).map_err(|e| e.to_string())?;
        let spread = logs.iter().any(|l| *l != logs[0]);
        ensure(!spread || gap > 0.0, || format!("gap {gap:e} on a non-symmetric instance"))?;
    }
    let mut symmetric = 0;
    for _ in 0..20 {
        let n = rng.random_range(2..=6);
        let d = rng.random_range(1..=4);
        let l = rng.random_range(-6.0..6.0);
        let mean_bits = rng.random_range(24..48) as f64 * 0.25;
        let stats = stats_from(d, &vec![l; n]);
        let budget = mean_bits * (n * d) as f64;
        let closed = closed_form_allocation(&stats, budget).map_err(|e| e.to_string())?;
        let oracle = oracle_allocation(&stats, budget, 0.25).map_err(|e| e.to_string())?;
        ensure(closed.bits.iter().all(|b| *b == closed.mean_bits), || format!("closed form {:?} not uniform", closed.bits))?;
        ensure(oracle.bits.iter().all(|b| *b == mean_bits), || format!("oracle {:?} not uniform", oracle.bits))?;
        let gap = uniform_gap(&stats, budget).map_err(|e| e.to_string())?;
        ensure(gap == 0.0, || format!("gap {gap:e} on a symmetric instance"))?;
        symmetric += 1;
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(30), || format!("took {}", secs(t)))?;
    Ok(format!("50 instances, worst |closed - oracle| {worst:.3} bit; {symmetric} symmetric exact; {}", secs(t)))
}

// ---------------------------------------------------------------- C4

fn random_scene(rng: &mut ChaCha8Rng, k: usize, sh_degree: usize) -> GaussianScene {
    let mut scene = GaussianScene::empty(sh_degree);
    let stride = 3 * (sh_degree + 1) * (sh_degree + 1);
    for _ in 0..k {
        scene.push(Gaussian {
            mean: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            log_scale: std::array::from_fn(|_| rng.random_range(-4.0..-1.0)),
            quat: std::array::from_fn(|_| rng.random_range(0.1..1.0)),
            opacity_logit: rng.random_range(-2.0..3.0),
            sh: (0..stride).map(|_| rng.random_range(-0.5..0.5)).collect(),
        });
    }
    scene
}

fn storage_constant() -> Outcome {
    let per_gaussian = codec::bytes_per_gaussian(8.64, 3);
    ensure(per_gaussian == 8.64 * 59.0 / 8.0, || format!("bytes/gaussian {per_gaussian}"))?;
    let shown = format!("{per_gaussian:.1}");
    ensure(shown == "63.7", || format!("8.64 bits gives {shown} bytes"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..20 {
        let k = rng.random_range(1..300);
        let preset = match rng.random_range(0..3) {
            0 => BitRangePreset::COMPRESSIVE,
            1 => BitRangePreset::COMPETITIVE,
            _ => BitRangePreset::uniform(rng.random_range(2..=16)),
        };
        let scene = random_scene(&mut rng, k, 3);
        let mut bank = QuantizerBank::new(&preset);
        bank.update_ranges(&scene).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("c{case}.g3dq"));
        let written = codec::encode(&scene, &bank, &path).map_err(|e| e.to_string())?;
        let on_disk = std::fs::metadata(&path).map_err(|e| e.to_string())?.len() as usize;
        // Header plus every attribute block padded to whole bytes.
        let dims = [3usize, 3, 4, 1, 3, 45];
        let bits = bank.grid_bits();
        let expected = HEADER_LEN + (0..6).map(|a| (k * dims[a] * bits[a] as usize).div_ceil(8)).sum::<usize>();
        ensure(written == on_disk && on_disk == expected, || {
            format!("K={k} bits {bits:?}: wrote {written}, file {on_disk}, expected {expected}")
        })?;
    }
    Ok(format!("8.64 bits -> {per_gaussian:.2} bytes/gaussian; 20 files match the closed-form length"))
}

// ---------------------------------------------------------------- C5

fn loss_of(scene: &GaussianScene, cam: &Camera, target: &Image, cfg: &LossConfig) -> f64 {
    let img = render::render(scene, cam).unwrap().image;
    render::image_loss(&img, target, cfg).unwrap().0
}

fn renderer_gradients() -> Outcome {
    let start = Instant::now();
    let opts = SynthOptions { n_cameras: 2, ..SynthOptions::default() };
    let fx = synthesize_scene_with(21, 48, Layout::RandomBlob, &opts).map_err(|e| e.to_string())?;
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (cam, target) in fx.cameras.iter().zip(&fx.images) {
        let scene = &fx.initial;
        let analytic = render::backward(scene, cam, target, &cfg).map_err(|e| e.to_string())?.grads;
        for attr in AttributeClass::ALL {
            // 21 scalars per block and view; SH DC and AC together make the fifth class.
            let values = scene.gather(attr);
            let mut tested = 0;
            let mut tries = 0;
            while tested < 21 && tries < 400 {
                tries += 1;
                let k = rng.random_range(0..values.len());
                let row = k / attr.dim(scene.sh_degree);
                if render::project(scene, cam, row).map_err(|e| e.to_string())?.is_none() {
                    continue;
                }
                let nudged = |delta: f64| {
                    let mut s = scene.clone();
                    let mut v = values.clone();
                    v[k] += delta;
                    s.scatter(attr, &v);
                    loss_of(&s, cam, target, &cfg)
                };
                let fd = (nudged(h) - nudged(-h)) / (2.0 * h);
                let an = analytic.get(attr)[k];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-7);
                worst = worst.max(rel);
                ensure(rel <= 1e-4, || format!("{} #{k}: analytic {an:e} fd {fd:e} rel {rel:e}", attr.name()))?;
                tested += 1;
                checked += 1;
            }
        }
    }
    let t = start.elapsed();
    ensure(checked >= 200, || format!("only {checked} scalars checked"))?;
    ensure(t < Duration::from_secs(60), || format!("took {}", secs(t)))?;
    Ok(format!("{checked} scalars, worst relative error {worst:.2e}, {}", secs(t)))
}

// ---------------------------------------------------------------- C6

fn occlusion_pair() -> Outcome {
    let fx = synthesize_scene(7, 64, Layout::OcclusionPair).map_err(|e| e.to_string())?;
    let (front, rear) = fx.occlusion_pair.ok_or("fixture has no occlusion pair")?;
    let scene = &fx.initial;
    let cams: Vec<&Camera> = fx.cameras.iter().collect();
    let tgts: Vec<&Image> = fx.images.iter().collect();
    let renders: Vec<_> = cams.iter().map(|c| render::render(scene, c)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let t = saliency_trans(&renders).map_err(|e| e.to_string())?;
    let g = saliency_grad(scene, &cams, &tgts).map_err(|e| e.to_string())?;
    let ty = taylor_saliency(scene, &cams, &tgts).map_err(|e| e.to_string())?;
    let ratio = |v: &[f64]| v[rear] / v[front];
    let (rt, rg, rty) = (ratio(&t), ratio(&g), ratio(&ty));
    ensure(rt < 1e-3 && rg < 1e-3 && rty > 1e-2, || format!("trans {rt:e} grad {rg:e} taylor {rty:e}"))?;
    Ok(format!("occluded/occluder: trans {rt:.1e}, grad {rg:.1e}, taylor {rty:.1e}"))
}

// ---------------------------------------------------------------- C7

fn saliency_variance() -> Outcome {
    // The 64-Gaussian fixture seen from a denser ring so that the sampled
    // view subsets actually differ between seeds.
    let opts = SynthOptions { n_cameras: 32, ..SynthOptions::default() };
    let fx = synthesize_scene_with(0, 64, Layout::RandomBlob, &opts).map_err(|e| e.to_string())?;
    let cfg = SaliencyConfig { k_views: 8, ..SaliencyConfig::default() };
    let mut runs = Vec::new();
    for seed in 0..20 {
        let s = compute_saliency(&fx.ground_truth, &fx.cameras, &fx.images, &cfg, seed).map_err(|e| e.to_string())?;
        runs.push(s.s_trans);
    }
    let n = fx.ground_truth.len();
    let mean: Vec<f64> = (0..n).map(|i| runs.iter().map(|r| r[i]).sum::<f64>() / 20.0).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| mean[*b].total_cmp(&mean[*a]));
    let top = &order[..n / 4];
    let rse: Vec<f64> = top
        .iter()
        .map(|&i| {
            let var = runs.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / 19.0;
            var.sqrt() / mean[i]
        })
        .collect();
    let avg = rse.iter().sum::<f64>() / rse.len() as f64;
    let max = rse.iter().cloned().fold(0.0, f64::max);
    let rel_var = rse.iter().map(|r| r * r).sum::<f64>() / rse.len() as f64;
    let detail = format!(
        "top-quartile relative standard error {:.2}% mean, {:.2}% max (relative variance {:.2}%)",
        100.0 * avg,
        100.0 * max,
        100.0 * rel_var
    );
    ensure(avg < 0.05, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- C8

fn truncated_degree(src: &GaussianScene, sh_degree: usize, n: usize) -> GaussianScene {
    let mut out = GaussianScene::empty(sh_degree);
    let keep = 3 * (sh_degree + 1) * (sh_degree + 1);
    for i in 0..n {
        let mut g = src.gaussian(i);
        g.sh.truncate(keep);
        out.push(g);
    }
    out
}

fn min_time(reps: usize, mut f: impl FnMut()) -> Duration {
    (0..reps)
        .map(|_| {
            let s = Instant::now();
            f();
            s.elapsed()
        })
        .min()
        .unwrap()
}

fn qadg_structure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let src = synthesize_scene(8, 128, Layout::RandomBlob).map_err(|e| e.to_string())?;
    for _ in 0..20 {
        let n = rng.random_range(1..=128);
        let l = rng.random_range(0..=3);
        let scene = truncated_degree(&src.ground_truth, l, n);
        let g = build_qadg(&scene, &src.cameras, 4, rng.random()).map_err(|e| e.to_string())?;
        ensure(g.node_count() == n * (1 + 5 + l + 1), || format!("N={n} l={l}: {} nodes", g.node_count()))?;
        ensure(g.containment_edge_count() == n * (5 + l + 1), || {
            format!("N={n} l={l}: {} containment edges", g.containment_edge_count())
        })?;
        ensure(g.order_edges.iter().all(|e| e.rear != e.front && e.rear < n && e.front < n), || "bad order edge".into())?;
        ensure(g.order_edges.windows(2).all(|w| (w[0].rear, w[0].front) < (w[1].rear, w[1].front)), || {
            "order edges unsorted".into()
        })?;
    }
    let fx = synthesize_scene(0, 64, Layout::RandomBlob).map_err(|e| e.to_string())?;
    let k = 8;
    let build = min_time(5, || {
        build_qadg(&fx.ground_truth, &fx.cameras, k, 0).unwrap();
    });
    let views: Vec<usize> = g3d_core::qadg::sample_views(fx.cameras.len(), k, 0).map_err(|e| e.to_string())?;
    let renders = min_time(5, || {
        for &v in &views {
            render::render(&fx.ground_truth, &fx.cameras[v]).unwrap();
        }
    });
    let ratio = build.as_secs_f64() / renders.as_secs_f64();
    ensure(ratio <= 2.0, || format!("build {} vs {k} renders {} (x{ratio:.2})", secs(build), secs(renders)))?;
    let _ = DependencyGraph::structural(&fx.ground_truth);
    Ok(format!("20 graphs match closed-form counts; build/render time x{ratio:.2}"))
}

// ---------------------------------------------------------------- C9

fn short_config(rng: &mut ChaCha8Rng, i: u64) -> RunConfig {
    let floor = if i % 5 == 4 {
        FloorMode::Absolute { db: rng.random_range(30.0..60.0) }
    } else {
        FloorMode::VanillaMinus { db: rng.random_range(-1.0..3.0) }
    };
    RunConfig {
        boundaries: [120, 200, 320, 360],
        saliency_period: 60,
        k_target: Some(rng.random_range(16..=64)),
        floor,
        seed: i,
        fixture: FixtureConfig { seed: i, ..FixtureConfig::default() },
        ..RunConfig::default()
    }
}

fn floor_safety() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut met, mut aborted) = (0, 0);
    for i in 0..25 {
        let cfg = short_config(&mut rng, i);
        let data = TrainingData::synthetic(&cfg.fixture).map_err(|e| e.to_string())?;
        let r = schedule::run(&cfg, &data).map_err(|e| e.to_string())?;
        let s = &r.state;
        if s.psnr_final >= s.tau {
            met += 1;
        } else if s.prune_events.iter().any(|e| e.aborted) {
            aborted += 1;
        } else {
            return Err(format!("config {i}: final {:.3} dB below floor {:.3} dB without an abort record", s.psnr_final, s.tau));
        }
    }
    Ok(format!("25 runs: {met} above the floor, {aborted} with an abort record, 0 silent violations"))
}

// ---------------------------------------------------------------- C10-C13

struct PipelineRuns {
    sequential: SequentialResult,
    matched: RunResult,
    heterogeneous: RunResult,
    uniform6: RunResult,
}

fn pipeline_runs() -> Result<PipelineRuns, String> {
    let cfg = RunConfig::default();
    let data = TrainingData::synthetic(&cfg.fixture).map_err(|e| e.to_string())?;
    let (vanilla, _) = schedule::warmup(&cfg, &data).map_err(|e| e.to_string())?;
    let sequential =
        schedule::sequential_baseline(&cfg, &vanilla, &data.cameras, &data.images).map_err(|e| e.to_string())?;
    let k = schedule::matched_k(&cfg, sequential.k, data.scene.len(), data.scene.sh_degree).map_err(|e| e.to_string())?;
    let matched = schedule::run(&RunConfig { k_target: Some(k), ..cfg.clone() }, &data).map_err(|e| e.to_string())?;

    let fixed_k = RunConfig { k_target: Some(48), floor: FloorMode::Off, ..cfg.clone() };
    let heterogeneous = schedule::run(&fixed_k, &data).map_err(|e| e.to_string())?;
    let uniform6 = schedule::ablation_mode(&fixed_k, "uniform6", &data).map_err(|e| e.to_string())?;
    Ok(PipelineRuns { sequential, matched, heterogeneous, uniform6 })
}

fn joint_vs_sequential(p: &PipelineRuns) -> Outcome {
    let (s, j) = (&p.sequential, &p.matched.state);
    ensure(j.storage_final <= s.storage_bytes, || {
        format!("joint uses {} bytes, sequential {}", j.storage_final, s.storage_bytes)
    })?;
    let gain = j.psnr_final - s.psnr;
    ensure(gain >= 0.5, || format!("joint {:.2} dB vs sequential {:.2} dB", j.psnr_final, s.psnr))?;
    Ok(format!(
        "joint {:.2} dB at {} B (K={}) vs sequential {:.2} dB at {} B (K={}): +{gain:.2} dB",
        j.psnr_final,
        j.storage_final,
        p.matched.scene.len(),
        s.psnr,
        s.storage_bytes,
        s.k
    ))
}

fn uniform_ablation(p: &PipelineRuns) -> Outcome {
    let (h, u) = (&p.heterogeneous, &p.uniform6);
    ensure(h.scene.len() == u.scene.len(), || format!("K differs: {} vs {}", h.scene.len(), u.scene.len()))?;
    ensure(u.state.psnr_final < h.state.psnr_final, || {
        format!("uniform6 {:.2} dB vs preset {:.2} dB", u.state.psnr_final, h.state.psnr_final)
    })?;
    Ok(format!(
        "K={}: uniform6 {:.2} dB < preset {:.2} dB ({:+.2} dB)",
        h.scene.len(),
        u.state.psnr_final,
        h.state.psnr_final,
        u.state.psnr_final - h.state.psnr_final
    ))
}

fn cooldown_no_regression(p: &PipelineRuns) -> Outcome {
    let mut parts = Vec::new();
    for (label, r) in [("matched", &p.matched), ("fixed-K", &p.heterogeneous), ("uniform6", &p.uniform6)] {
        let s = &r.state;
        ensure(s.psnr_final >= s.psnr_end_joint - 0.05, || {
            format!("{label}: end of cool-down {:.3} dB vs end of joint {:.3} dB", s.psnr_final, s.psnr_end_joint)
        })?;
        ensure(s.storage_final == s.storage_end_joint, || {
            format!("{label}: storage {} -> {}", s.storage_end_joint, s.storage_final)
        })?;
        parts.push(format!("{label} {:+.3} dB", s.psnr_final - s.psnr_end_joint));
    }
    Ok(format!("{}; storage unchanged", parts.join(", ")))
}

fn entropy_headroom(p: &PipelineRuns) -> Outcome {
    let checkpoints = [
        ("sequential", &p.sequential.scene, &p.sequential.bank),
        ("matched", &p.matched.scene, &p.matched.bank),
        ("fixed-K", &p.heterogeneous.scene, &p.heterogeneous.bank),
        ("uniform6", &p.uniform6.scene, &p.uniform6.bank),
    ];
    let mut parts = Vec::new();
    for (label, scene, bank) in checkpoints {
        let ckpt = QuantizedCheckpoint::from_scene(scene, bank).map_err(|e| e.to_string())?;
        let back = QuantizedCheckpoint::from_bytes(&ckpt.to_bytes().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        ensure(back == ckpt, || format!("{label}: checkpoint bytes do not round-trip"))?;
        let h = codec::shannon_entropy(&ckpt).map_err(|e| e.to_string())?;
        ensure(h.entropy <= h.mean_bits + 1e-12, || format!("{label}: H {} > {}", h.entropy, h.mean_bits))?;
        let gz = codec::lossless_headroom(&ckpt).map_err(|e| e.to_string())?;
        ensure(gz.reduction_pct <= h.headroom_pct + 5.0, || {
            format!("{label}: gzip {:.1}% vs headroom {:.1}%", gz.reduction_pct, h.headroom_pct)
        })?;
        parts.push(format!("{label} H={:.2}/{:.2} gzip {:.1}%", h.entropy, h.mean_bits, gz.reduction_pct));
    }
    Ok(parts.join("; "))
}

// ---------------------------------------------------------------- C14

fn cli_binary() -> Result<PathBuf, String> {
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let profile_dir = exe.parent().and_then(Path::parent).ok_or("cannot locate the target directory")?;
    let bin = profile_dir.join(format!("g3d{}", std::env::consts::EXE_SUFFIX));
    if !bin.exists() {
        let status = Command::new(env!("CARGO"))
            .args(["build", "--quiet", "-p", "g3d-cli"])
            .current_dir(env!("CARGO_MANIFEST_DIR"))
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), || "building the CLI failed".into())?;
    }
    ensure(bin.exists(), || format!("{} not found", bin.display()))?;
    Ok(bin)
}

fn g3d(bin: &Path, threads: usize, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(bin).args(args).env("G3D_THREADS", threads.to_string()).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("g3d {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))?;
    Ok(out.stdout)
}

fn collect_files(dir: &Path, base: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            collect_files(&p, base, out);
        } else {
            out.insert(p.strip_prefix(base).unwrap().display().to_string(), std::fs::read(&p).unwrap());
        }
    }
}

fn cli_session(bin: &Path, threads: usize, root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let cfg = RunConfig {
        boundaries: [40, 60, 100, 120],
        saliency_period: 20,
        k_views: 4,
        k_target: Some(16),
        fixture: FixtureConfig { n_gaussians: 24, n_cameras: 4, width: 32, height: 32, ..FixtureConfig::default() },
        ..RunConfig::default()
    };
    std::fs::create_dir_all(root).map_err(|e| e.to_string())?;
    let p = |s: &str| root.join(s).display().to_string();
    std::fs::write(root.join("config.json"), serde_json::to_string(&cfg).unwrap()).map_err(|e| e.to_string())?;
    let c = p("config.json");
    let mut stdout = BTreeMap::new();
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("init", vec!["init-synthetic".into(), "--seed".into(), "3".into(), "--n-gaussians".into(), "24".into(),
            "--n-cameras".into(), "4".into(), "--width".into(), "32".into(), "--height".into(), "32".into(),
            "--out".into(), p("data")]),
        ("train", vec!["train".into(), "--config".into(), c.clone(), "--data".into(), p("data"), "--out".into(), p("run")]),
        ("seq", vec!["train".into(), "--config".into(), c.clone(), "--baseline".into(), "sequential".into(),
            "--data".into(), p("data"), "--out".into(), p("seq")]),
        ("compress", vec!["compress".into(), "--scene".into(), p("run/scene.g3d"), "--quantizers".into(),
            p("run/quantizers.json"), "--out".into(), p("run.g3dq")]),
        ("eval", vec!["eval".into(), "--config".into(), c.clone(), "--input".into(), p("run.g3dq"), "--data".into(),
            p("data"), "--out".into(), p("eval.json")]),
        ("entropy", vec!["entropy".into(), "--input".into(), p("run.g3dq"), "--out".into(), p("entropy.json")]),
        ("sweep", vec!["sweep".into(), "--config".into(), c.clone(), "--k-targets".into(), "10,20".into(),
            "--parallel".into(), "2".into(), "--data".into(), p("data"), "--out".into(), p("sweep")]),
        ("bitalloc", vec!["bitalloc".into(), "--scene".into(), p("run/scene.g3d"), "--data".into(), p("data"),
            "--budget-bits".into(), "400".into(), "--grid-step".into(), "0.25".into(), "--converged".into(),
            p("run/summary.json"), "--out".into(), p("bitalloc")]),
    ];
    for (label, args) in &runs {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        stdout.insert(format!("stdout:{label}"), g3d(bin, threads, &args)?);
    }
    collect_files(root, root, &mut stdout);
    Ok(stdout)
}

fn determinism() -> Outcome {
    let bin = cli_binary()?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    // Paths are printed in some outputs, so both sessions use the same root.
    let root = dir.path().join("session");
    let first = cli_session(&bin, 1, &root)?;
    std::fs::remove_dir_all(&root).map_err(|e| e.to_string())?;
    let second = cli_session(&bin, 3, &root)?;
    ensure(first.keys().eq(second.keys()), || "different output file sets".into())?;
    for (name, bytes) in &first {
        ensure(second[name] == *bytes, || format!("{name} differs between G3D_THREADS=1 and 3"))?;
    }
    let checked = first.keys().filter(|k| k.ends_with(".csv") || k.ends_with(".json")).count();
    Ok(format!("8 commands, {} outputs ({checked} CSV/JSON) byte-identical across 1 and 3 threads", first.len()))
}

// ---------------------------------------------------------------- driver

fn main() {
    let mut results: Vec<(String, Outcome)> = Vec::new();
    let mut record = |id: &str, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(&mut *f))
            .unwrap_or_else(|e| Err(e.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let status = if outcome.is_ok() { "PASS" } else { "FAIL" };
        let detail = match &outcome {
            Ok(s) | Err(s) => s,
        };
        println!("{status} {id} {name}: {detail} [{}]", secs(start.elapsed()));
        results.push((id.to_string(), outcome));
    };

    record("C1", "quantizer exactness", &mut quantizer_exactness);
    record("C2", "bit-width formula", &mut bit_formula);
    record("C3", "bit allocation vs oracle", &mut bit_allocation_vs_oracle);
    record("C4", "storage constant", &mut storage_constant);
    record("C5", "renderer gradients", &mut renderer_gradients);
    record("C6", "occlusion-pair saliency", &mut occlusion_pair);
    record("C7", "saliency variance", &mut saliency_variance);
    record("C8", "dependency graph structure", &mut qadg_structure);
    record("C9", "floor safety", &mut floor_safety);

    let runs = catch_unwind(pipeline_runs).unwrap_or_else(|_| Err("pipeline runs panicked".into()));
    let with_runs = |f: fn(&PipelineRuns) -> Outcome| -> Outcome {
        match &runs {
            Ok(p) => f(p),
            Err(e) => Err(format!("pipeline runs failed: {e}")),
        }
    };
    record("C10", "joint vs sequential", &mut || with_runs(joint_vs_sequential));
    record("C11", "uniform-bit ablation", &mut || with_runs(uniform_ablation));
    record("C12", "cool-down no-regression", &mut || with_runs(cooldown_no_regression));
    record("C13", "entropy headroom", &mut || with_runs(entropy_headroom));
    record("C14", "determinism", &mut determinism);

    let failed: Vec<&str> = results.iter().filter(|(_, o)| o.is_err()).map(|(id, _)| id.as_str()).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(" "));
        std::process::exit(1);
    }
}
