//! `g3d`: fixture generation, training, compression, evaluation, sweeps,
//! bit-allocation analysis, entropy reports and plots.
//!
//! Failures print one `error: ...` line on stderr and exit with status 1.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use g3d_core::bitalloc::{self, AttributeStat, AttributeStats};
use g3d_core::codec::{self, QuantizedCheckpoint};
use g3d_core::image::{mean_psnr, ssim};
use g3d_core::render::{self, RenderOptions};
use g3d_core::schedule::{self, Ablation, FloorMode, RunConfig, TrainingData};
use g3d_core::svg::{Plot, Series};
use g3d_core::synth::{synthesize_scene_with, Layout, SynthOptions};
use g3d_core::{AttributeClass, GaussianScene, QuantizerBank};

#[derive(Parser, Debug)]
#[command(name = "g3d", version, about = "Joint pruning and mixed-precision quantization of Gaussian splats")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration JSON; unset fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
struct RunFlags {
    #[arg(long, value_parser = ["compressive", "competitive"])]
    preset: Option<String>,
    /// Nominal storage budget in megabytes (10^6 bytes).
    #[arg(long)]
    budget_mb: Option<f64>,
    #[arg(long)]
    k_target: Option<usize>,
    /// Absolute PSNR floor in dB.
    #[arg(long)]
    tau_db: Option<f64>,
    #[arg(long, value_parser = ["none", "taylor-saliency", "shared-bits", "no-cooldown", "no-projection", "uniform6"])]
    ablation: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a synthetic scene, its cameras and ground-truth views.
    InitSynthetic {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "random-blob")]
        layout: String,
        #[arg(long, default_value_t = 64)]
        n_gaussians: usize,
        #[arg(long, default_value_t = 8)]
        n_cameras: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs the staged training schedule (or the sequential baseline).
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, value_parser = ["sequential"])]
        baseline: Option<String>,
        /// Directory written by init-synthetic; synthesized from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Packs a trained scene and its quantizers into a `.g3dq` file.
    Compress {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        quantizers: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR/SSIM and storage of a checkpoint or scene against ground-truth views.
    Eval {
        #[command(flatten)]
        common: Common,
        /// `.g3dq` checkpoint or `.g3d` scene.
        #[arg(long)]
        input: PathBuf,
        /// Quantizers applied to a `.g3d` scene before rendering.
        #[arg(long)]
        quantizers: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One training run per budget or Gaussian target; writes an R-D CSV and SVG.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, value_delimiter = ',')]
        budgets_mb: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        k_targets: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rate-distortion bit allocation from attribute statistics.
    Bitalloc {
        #[command(flatten)]
        common: Common,
        /// Statistics JSON `{attribute: {d, sigma, lambda}}`.
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Estimate statistics from this scene and the data directory's cameras.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Total bits per Gaussian.
        #[arg(long)]
        budget_bits: f64,
        /// Also solve on this grid (1, 0.5 or 0.25 bits).
        #[arg(long)]
        grid_step: Option<f64>,
        /// Training summary whose converged bit-widths are compared.
        #[arg(long)]
        converged: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-order entropy and gzip headroom of a checkpoint.
    Entropy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerates an SVG from a metrics, sweep or bit-allocation CSV.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = configure_threads().and_then(|_| dispatch(cli.command)) {
        let msg = format!("{e:#}").replace('\n', " ");
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("G3D_THREADS") {
        let n: usize = v.parse().with_context(|| format!("G3D_THREADS={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::InitSynthetic { common, layout, n_gaussians, n_cameras, width, height, out } => {
            init_synthetic(&common, &layout, n_gaussians, n_cameras, width, height, &out)
        }
        Command::Train { common, run, baseline, data, out } => train(&common, &run, baseline.as_deref(), data, &out),
        Command::Compress { common, scene, quantizers, out } => compress(&common, &scene, &quantizers, &out),
        Command::Eval { common, input, quantizers, data, out } => eval(&common, &input, quantizers, data, out),
        Command::Sweep { common, run, budgets_mb, k_targets, parallel, data, out } => {
            sweep(&common, &run, &budgets_mb, &k_targets, parallel, data, &out)
        }
        Command::Bitalloc { common, stats, scene, data, budget_bits, grid_step, converged, out } => {
            bitalloc_cmd(&common, stats, scene, data, budget_bits, grid_step, converged, &out)
        }
        Command::Entropy { common, input, out } => entropy(&common, &input, out),
        Command::Plot { csv, out, .. } => plot(&csv, &out),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_json_file(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_run_flags(cfg: &mut RunConfig, flags: &RunFlags) -> Result<()> {
    if let Some(p) = &flags.preset {
        cfg.preset = p.clone();
    }
    if let Some(b) = flags.budget_mb {
        cfg.budget_bytes = Some(b * 1e6);
    }
    if let Some(k) = flags.k_target {
        cfg.k_target = Some(k);
    }
    if let Some(t) = flags.tau_db {
        cfg.floor = FloorMode::Absolute { db: t };
    }
    if let Some(a) = &flags.ablation {
        cfg.ablation = Ablation::from_name(a)?;
    }
    cfg.validate()?;
    Ok(())
}

fn config_hash(cfg: &RunConfig) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(cfg)?);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

fn provenance(cfg: &RunConfig) -> Result<String> {
    Ok(format!("g3d {} config={} seed={}", env!("CARGO_PKG_VERSION"), config_hash(cfg)?, cfg.seed))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn emit_json(out: Option<&Path>, value: &impl Serialize) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn training_data(cfg: &RunConfig, dir: Option<&Path>) -> Result<TrainingData> {
    match dir {
        Some(d) => TrainingData::load_dir(d).with_context(|| format!("loading data from {}", d.display())),
        None => Ok(TrainingData::synthetic(&cfg.fixture)?),
    }
}

fn init_synthetic(
    common: &Common,
    layout: &str,
    n: usize,
    n_cameras: usize,
    width: usize,
    height: usize,
    out: &Path,
) -> Result<()> {
    let seed = common.seed.unwrap_or(0);
    let opts = SynthOptions { n_cameras, width, height, ..SynthOptions::default() };
    let s = synthesize_scene_with(seed, n, Layout::from_name(layout)?, &opts)?;
    let data = TrainingData { scene: s.initial, cameras: s.cameras, images: s.images };
    data.save_dir(out)?;
    s.ground_truth.save(out.join("ground_truth.g3d"))?;
    write_json(
        &out.join("fixture.json"),
        &json!({"layout": layout, "n_gaussians": n, "n_cameras": n_cameras, "width": width, "height": height, "seed": seed}),
    )
}

fn train(common: &Common, flags: &RunFlags, baseline: Option<&str>, data: Option<PathBuf>, out: &Path) -> Result<()> {
    let mut cfg = load_config(common)?;
    apply_run_flags(&mut cfg, flags)?;
    let data = training_data(&cfg, data.as_deref())?;
    fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let prov = provenance(&cfg)?;
    if baseline == Some("sequential") {
        let (vanilla, metrics) = schedule::warmup(&cfg, &data)?;
        let seq = schedule::sequential_baseline(&cfg, &vanilla, &data.cameras, &data.images)?;
        schedule::write_metrics_csv(&metrics, out.join("metrics.csv"), &prov)?;
        seq.scene.save(out.join("scene.g3d"))?;
        write_json(&out.join("quantizers.json"), &seq.bank)?;
        return write_json(
            &out.join("summary.json"),
            &json!({"provenance": prov, "baseline": "sequential", "k": seq.k, "psnr_final": seq.psnr, "storage_final": seq.storage_bytes}),
        );
    }
    let result = schedule::run(&cfg, &data)?;
    schedule::write_metrics_csv(&result.metrics, out.join("metrics.csv"), &prov)?;
    result.scene.save(out.join("scene.g3d"))?;
    write_json(&out.join("quantizers.json"), &result.bank)?;
    write_json(&out.join("summary.json"), &json!({"provenance": prov, "state": result.state}))
}

fn load_bank(path: &Path) -> Result<QuantizerBank> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn compress(_common: &Common, scene: &Path, quantizers: &Path, out: &Path) -> Result<()> {
    let scene = GaussianScene::load(scene).with_context(|| format!("loading {}", scene.display()))?;
    let bank = load_bank(quantizers)?;
    let bytes = codec::encode(&scene, &bank, out)?;
    let k = scene.alive_count();
    let vanilla = codec::vanilla_bytes(k, scene.sh_degree);
    let report = json!({
        "k": k,
        "bytes": bytes,
        "mean_bits": codec::mean_bits(&bank.grid_bits(), scene.sh_degree),
        "vanilla_bytes": vanilla,
        "compression_ratio": if bytes > 0 { vanilla as f64 / bytes as f64 } else { 0.0 },
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn eval(common: &Common, input: &Path, quantizers: Option<PathBuf>, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let data = training_data(&cfg, data.as_deref())?;
    let (scene, storage) = if input.extension().is_some_and(|e| e == "g3dq") {
        let bytes = fs::metadata(input).with_context(|| format!("reading {}", input.display()))?.len() as usize;
        (codec::decode(input).with_context(|| format!("decoding {}", input.display()))?.0, Some(bytes))
    } else {
        let scene = GaussianScene::load(input).with_context(|| format!("loading {}", input.display()))?.compact();
        match quantizers {
            Some(q) => {
                let bank = load_bank(&q)?;
                let storage = schedule::storage_bytes(scene.len(), scene.sh_degree, &bank);
                (bank.quantize_scene(&scene), Some(storage))
            }
            None => (scene, None),
        }
    };
    let renders = data
        .cameras
        .iter()
        .map(|c| render::render_with(&scene, c, &RenderOptions::default()).map(|o| o.image))
        .collect::<g3d_core::Result<Vec<_>>>()?;
    let psnr = mean_psnr(renders.iter().zip(&data.images))?;
    let mut ssim_total = 0.0;
    for (r, t) in renders.iter().zip(&data.images) {
        ssim_total += ssim(r, t)?;
    }
    let report = json!({
        "k": scene.len(),
        "views": renders.len(),
        "psnr": psnr,
        "ssim": ssim_total / renders.len() as f64,
        "storage_bytes": storage,
    });
    emit_json(out.as_deref(), &report)
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    label: String,
    k: usize,
    storage_bytes: usize,
    psnr: f64,
}

fn sweep(
    common: &Common,
    flags: &RunFlags,
    budgets_mb: &[f64],
    k_targets: &[usize],
    parallel: usize,
    data: Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let mut base = load_config(common)?;
    apply_run_flags(&mut base, flags)?;
    let mut points: Vec<(String, RunConfig)> = Vec::new();
    for &b in budgets_mb {
        let cfg = RunConfig { budget_bytes: Some(b * 1e6), k_target: None, ..base.clone() };
        points.push((format!("budget_{b}mb"), cfg));
    }
    for &k in k_targets {
        let cfg = RunConfig { k_target: Some(k), ..base.clone() };
        points.push((format!("k_{k}"), cfg));
    }
    if points.is_empty() {
        bail!("sweep needs at least one --budgets-mb or --k-targets value");
    }
    let data = training_data(&base, data.as_deref())?;
    fs::create_dir_all(out)?;
    let run_point = |(label, cfg): &(String, RunConfig)| -> Result<SweepRow> {
        let dir = out.join(label);
        fs::create_dir_all(&dir)?;
        write_json(&dir.join("config.json"), cfg)?;
        let r = schedule::run(cfg, &data)?;
        schedule::write_metrics_csv(&r.metrics, dir.join("metrics.csv"), &provenance(cfg)?)?;
        r.scene.save(dir.join("scene.g3d"))?;
        write_json(&dir.join("quantizers.json"), &r.bank)?;
        write_json(&dir.join("summary.json"), &json!({"provenance": provenance(cfg)?, "state": r.state}))?;
        Ok(SweepRow { label: label.clone(), k: r.scene.len(), storage_bytes: r.state.storage_final, psnr: r.state.psnr_final })
    };
    let rows: Vec<SweepRow> = if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(parallel).build()?;
        pool.install(|| points.par_iter().map(run_point).collect::<Result<Vec<_>>>())?
    } else {
        points.iter().map(run_point).collect::<Result<Vec<_>>>()?
    };
    let mut csv = format!("# {}\nlabel,k,storage_bytes,psnr\n", provenance(&base)?);
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.label, r.k, r.storage_bytes, r.psnr));
    }
    fs::write(out.join("rd.csv"), csv)?;
    fs::write(out.join("rd.svg"), rd_plot(&rows).to_svg())?;
    Ok(())
}

fn rd_plot(rows: &[SweepRow]) -> Plot {
    let mut pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.storage_bytes as f64, r.psnr)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Plot {
        title: "Rate-distortion".into(),
        x_label: "storage (bytes, log scale)".into(),
        y_label: "PSNR (dB)".into(),
        log_x: true,
        diagonal: false,
        series: vec![Series { label: "joint".into(), points: pts, line: true }],
    }
}

/// Stats JSON entries in attribute-class order when the names are classes.
fn stats_from_json(text: &str) -> Result<AttributeStats> {
    #[derive(serde::Deserialize)]
    struct Entry {
        d: usize,
        sigma: f64,
        lambda: f64,
    }
    let map: BTreeMap<String, Entry> = serde_json::from_str(text)?;
    let mut entries: Vec<(String, Entry)> = map.into_iter().collect();
    entries.sort_by_key(|(name, _)| (AttributeClass::from_name(name).map_or(usize::MAX, |a| a.index()), name.clone()));
    Ok(AttributeStats {
        attributes: entries
            .into_iter()
            .map(|(name, e)| AttributeStat { name, d: e.d, sigma: e.sigma, lambda: e.lambda })
            .collect(),
    })
}

fn stats_to_json(stats: &AttributeStats) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> = stats
        .attributes
        .iter()
        .map(|a| (a.name.clone(), json!({"d": a.d, "sigma": a.sigma, "lambda": a.lambda})))
        .collect();
    serde_json::Value::Object(map)
}

#[allow(clippy::too_many_arguments)]
fn bitalloc_cmd(
    common: &Common,
    stats: Option<PathBuf>,
    scene: Option<PathBuf>,
    data: Option<PathBuf>,
    budget_bits: f64,
    grid_step: Option<f64>,
    converged: Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(common)?;
    fs::create_dir_all(out)?;
    let stats = match (stats, scene) {
        (Some(p), _) => stats_from_json(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
        (None, Some(scene)) => {
            let scene = GaussianScene::load(&scene).with_context(|| format!("loading {}", scene.display()))?;
            let data = training_data(&cfg, data.as_deref())?;
            let stats = bitalloc::estimate_stats(&scene, &data.cameras, 8, 1e-5, cfg.seed, &RenderOptions::default())?;
            write_json(&out.join("stats.json"), &stats_to_json(&stats))?;
            stats
        }
        (None, None) => bail!("bitalloc needs --stats or --scene"),
    };
    let closed = bitalloc::closed_form_allocation(&stats, budget_bits)?;
    let oracle = grid_step.map(|g| bitalloc::oracle_allocation(&stats, budget_bits, g)).transpose()?;
    let gap = bitalloc::uniform_gap(&stats, budget_bits)?;
    write_json(&out.join("allocation.json"), &json!({"closed_form": closed, "oracle": oracle, "uniform_gap": gap}))?;
    let mut series =
        vec![Series { label: "closed form".into(), points: enumerate_bits(&closed.bits), line: true }];
    if let Some(o) = &oracle {
        series.push(Series { label: "grid oracle".into(), points: enumerate_bits(&o.bits), line: true });
    }
    let plot = Plot {
        title: "Bit allocation".into(),
        x_label: "attribute index".into(),
        y_label: "bits".into(),
        log_x: false,
        diagonal: false,
        series,
    };
    fs::write(out.join("allocation.svg"), plot.to_svg())?;
    if let Some(path) = converged {
        let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path)?)?;
        let bits: Vec<f64> = serde_json::from_value(summary["state"]["converged_bits"].clone())
            .with_context(|| format!("{} has no state.converged_bits", path.display()))?;
        let by_name: Vec<f64> = stats
            .attributes
            .iter()
            .map(|a| {
                AttributeClass::from_name(&a.name)
                    .map(|c| bits[c.index()])
                    .with_context(|| format!("attribute {} is not a quantizer class", a.name))
            })
            .collect::<Result<_>>()?;
        let report = bitalloc::empirical_fit_report(&by_name, &stats, budget_bits)?;
        report.write_csv(out.join("fit.csv"), &provenance(&cfg)?)?;
        fs::write(out.join("fit.svg"), report.to_svg())?;
        write_json(&out.join("fit.json"), &report)?;
    }
    Ok(())
}

fn enumerate_bits(bits: &[f64]) -> Vec<(f64, f64)> {
    bits.iter().enumerate().map(|(k, b)| (k as f64, *b)).collect()
}

fn entropy(_common: &Common, input: &Path, out: Option<PathBuf>) -> Result<()> {
    let ckpt = QuantizedCheckpoint::from_bytes(&fs::read(input).with_context(|| format!("reading {}", input.display()))?)?;
    let shannon = codec::shannon_entropy(&ckpt)?;
    let gzip = codec::lossless_headroom(&ckpt)?;
    emit_json(out.as_deref(), &json!({"file_bytes": ckpt.file_len(), "shannon": shannon, "gzip": gzip}))
}

fn plot(csv: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(csv).with_context(|| format!("reading {}", csv.display()))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().context("empty CSV")?.split(',').collect();
    let rows: Vec<Vec<&str>> = lines.filter(|l| !l.is_empty()).map(|l| l.split(',').collect()).collect();
    let col = |name: &str| header.iter().position(|h| *h == name).with_context(|| format!("CSV has no {name} column"));
    let num = |row: &Vec<&str>, k: usize| -> Result<f64> {
        row.get(k).context("short CSV row")?.parse::<f64>().with_context(|| format!("bad number in column {k}"))
    };
    let plot = if header.contains(&"psnr_train") {
        let (it, p) = (col("iter")?, col("psnr_train")?);
        let points = rows.iter().map(|r| Ok((num(r, it)?, num(r, p)?))).collect::<Result<Vec<_>>>()?;
        Plot {
            title: "Training PSNR".into(),
            x_label: "iteration".into(),
            y_label: "PSNR (dB)".into(),
            log_x: false,
            diagonal: false,
            series: vec![Series { label: "train view".into(), points, line: true }],
        }
    } else if header.contains(&"storage_bytes") {
        let (s, p, k) = (col("storage_bytes")?, col("psnr")?, col("k")?);
        let rows = rows
            .iter()
            .map(|r| {
                Ok(SweepRow { label: r[0].to_string(), k: num(r, k)? as usize, storage_bytes: num(r, s)? as usize, psnr: num(r, p)? })
            })
            .collect::<Result<Vec<_>>>()?;
        rd_plot(&rows)
    } else if header.contains(&"empirical_bits") {
        let (e, t) = (col("empirical_bits")?, col("theoretical_bits")?);
        let series = rows
            .iter()
            .map(|r| Ok(Series { label: r[0].to_string(), points: vec![(num(r, t)?, num(r, e)?)], line: false }))
            .collect::<Result<Vec<_>>>()?;
        Plot {
            title: "Empirical vs rate-distortion bit allocation".into(),
            x_label: "theoretical bits".into(),
            y_label: "converged bits".into(),
            log_x: false,
            diagonal: true,
            series,
        }
    } else {
        bail!("unrecognized CSV header {:?}", header.join(","));
    };
    fs::write(out, plot.to_svg())?;
    Ok(())
}
