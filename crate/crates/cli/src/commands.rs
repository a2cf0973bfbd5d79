use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use granular_dq::e2b::{calibrate as run_calibration, AtcConfig, CalibratedThresholds, E2BConfig};
use granular_dq::entropy::{build_entropy_stats, EntropyConfig, StatsFile};
use granular_dq::gbc::{GbcConfig, GbcModel};
use granular_dq::image_io::{load_image, save_image};
use granular_dq::metrics::{fab, format_reduction, RunReport};
use granular_dq::patch::extract_patches;
use granular_dq::plan::parse_bit_list;
use granular_dq::srnet::{run_pipeline, PipelineOptions, QuantModel, SrConfig};
use granular_dq::{BitCode, PatchPlan, Tensor};

use crate::{
    CalibrateArgs, EntropyArgs, Failure, InferArgs, InitArgs, ReportArgs, StatsArgs, SweepArgs,
};

type Res<T> = Result<T, Failure>;

/// Everything that determines a run, echoed into its report.
#[derive(Debug, Clone, Serialize)]
struct RunConfig {
    command: String,
    version: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    patch_size: usize,
    overlap: usize,
    entropy: EntropyConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    sr: Option<SrConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gbc: Option<GbcConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    thresholds: Option<CalibratedThresholds>,
    seed: u64,
    deterministic: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    force_bit: Option<BitCode>,
}

fn entropy_config(a: &EntropyArgs) -> Res<EntropyConfig> {
    let mut cfg = EntropyConfig {
        bins: a.bins,
        interpretation: a.entropy_mode,
        ..EntropyConfig::default()
    };
    if let Some(s) = a.sigma {
        cfg = cfg.with_sigma(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_fractions(s: &str) -> Res<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Failure::usage(format!("bad threshold {t:?} in {s:?}")))
        })
        .collect()
}

fn require(path: &Path, what: &str) -> Res<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::artifact(format!("{what} not found: {}", path.display())))
    }
}

fn artifact<T>(r: granular_dq::Result<T>) -> Res<T> {
    r.map_err(|e| Failure::artifact(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Res<()> {
    fs::write(path, text).map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

/// Image files in a directory, sorted by name.
fn corpus_files(dir: &Path) -> Res<Vec<PathBuf>> {
    require(dir, "corpus directory")?;
    let entries = fs::read_dir(dir).map_err(|e| Failure::artifact(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pgm" | "pnm"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::artifact(format!("no images in {}", dir.display())));
    }
    Ok(files)
}

pub fn init(a: &InitArgs) -> Res<()> {
    let sr = SrConfig {
        scale: a.scale,
        feat_channels: a.feat_channels,
        blocks: a.blocks,
        ..SrConfig::default()
    };
    let gbc = GbcConfig {
        candidate_bits: parse_bit_list(&a.bits)?,
        tau: a.tau,
        ..GbcConfig::default()
    };
    QuantModel::<f32>::random(sr, a.seed)?.save(&a.model)?;
    // distinct stream for the controller so the two models are independent
    GbcModel::<f32>::random(gbc, a.seed.wrapping_add(0x9E37_79B9))?.save(&a.gbc)?;
    Ok(())
}

pub fn stats(a: &StatsArgs) -> Res<()> {
    let cfg = entropy_config(&a.entropy)?;
    let mut patches: Vec<Tensor<f64>> = Vec::new();
    for f in corpus_files(&a.corpus)? {
        let img = artifact(load_image::<f64>(&f))?;
        let (_, ps) = extract_patches(&img, a.patch_size, a.overlap)?;
        patches.extend(ps);
    }
    let s = build_entropy_stats(patches, &cfg)?;
    StatsFile::new(&s, &cfg).write(&a.out)?;
    if let Some(h) = &a.histogram {
        let mut csv = String::from("bin_lo,bin_hi,count\n");
        for (lo, hi, n) in s.histogram(a.hist_bins) {
            writeln!(csv, "{lo},{hi},{n}").expect("string write");
        }
        write_text(h, &csv)?;
    }
    println!("M={} h_min={:.6} h_max={:.6} digest={}", s.m, s.h_min, s.h_max, s.digest());
    Ok(())
}

pub fn calibrate(a: &CalibrateArgs) -> Res<()> {
    require(&a.stats, "stats file")?;
    let stats = artifact(StatsFile::read(&a.stats).and_then(|f| f.stats()))?;
    let cfg = E2BConfig {
        thresholds: parse_fractions(&a.thresholds)?,
        bit_codes: parse_bit_list(&a.bit_codes)?,
        gamma: a.gamma,
    };
    let atc = AtcConfig {
        batch_size: a.batch_size,
        select: a.atc_select,
        seed: a.seed,
    };
    let cal = run_calibration(&stats, &cfg, &atc)?;
    cal.thresholds.write(&a.out)?;
    if a.trace {
        let header: Vec<String> = (1..=cfg.thresholds.len()).map(|i| format!("t{i}")).collect();
        println!("iteration,{}", header.join(","));
        for (i, ts) in cal.trajectory.iter().enumerate() {
            let row: Vec<String> = ts.iter().map(|t| t.to_string()).collect();
            println!("{i},{}", row.join(","));
        }
    }
    log::info!("{} updates, fractions {:?}", cal.thresholds.iterations, cal.thresholds.fractions);
    Ok(())
}

struct Artifacts {
    model: QuantModel<f32>,
    gbc: Option<GbcModel<f32>>,
    thresholds: Option<CalibratedThresholds>,
}

fn load_artifacts(model: &Path, gbc: Option<&Path>, thr: Option<&Path>, forced: bool) -> Res<Artifacts> {
    require(model, "model")?;
    let model = artifact(QuantModel::<f32>::load(model))?;
    let (gbc, thresholds) = if forced {
        (None, None)
    } else {
        let g = gbc.ok_or_else(|| Failure::artifact("--gbc is required unless --force-bit is given"))?;
        let t = thr.ok_or_else(|| Failure::artifact("--thresholds is required unless --force-bit is given"))?;
        require(g, "controller model")?;
        require(t, "thresholds file")?;
        (
            Some(artifact(GbcModel::<f32>::load(g))?),
            Some(artifact(CalibratedThresholds::read(t))?),
        )
    };
    Ok(Artifacts { model, gbc, thresholds })
}

pub fn infer(a: &InferArgs) -> Res<()> {
    let entropy = entropy_config(&a.entropy)?;
    let art = load_artifacts(&a.model, a.gbc.as_deref(), a.thresholds.as_deref(), a.force_bit.is_some())?;
    require(&a.input, "input image")?;
    let image = artifact(load_image::<f32>(&a.input))?;
    let hr = match &a.hr {
        Some(p) => {
            require(p, "reference image")?;
            Some(artifact(load_image::<f32>(p))?)
        }
        None => None,
    };
    let opts = PipelineOptions {
        patch_size: a.patch_size,
        overlap: a.overlap,
        entropy: entropy.clone(),
        deterministic: a.deterministic,
        seed: a.seed,
        force_bit: a.force_bit,
        timing: a.timing,
    };
    let out = run_pipeline(
        &art.model,
        art.gbc.as_ref(),
        art.thresholds.as_ref(),
        &image,
        hr.as_ref(),
        &opts,
    )
    .map_err(|e| Failure::inference(e.to_string()))?;
    if !out.audit.is_clean() {
        return Err(Failure::inference(format!("layer-invariance audit failed: {:?}", out.audit)));
    }

    let mut inputs = BTreeMap::from([("model".to_string(), show(&a.model)), ("image".to_string(), show(&a.input))]);
    if let Some(g) = &a.gbc {
        inputs.insert("gbc".into(), show(g));
    }
    if let Some(t) = &a.thresholds {
        inputs.insert("thresholds".into(), show(t));
    }
    if let Some(h) = &a.hr {
        inputs.insert("hr".into(), show(h));
    }
    let config = RunConfig {
        command: "infer".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        inputs,
        outputs: BTreeMap::from([("image".to_string(), show(&a.out)), ("report".to_string(), show(&a.report))]),
        patch_size: a.patch_size,
        overlap: a.overlap,
        entropy,
        sr: Some(art.model.config.clone()),
        gbc: art.gbc.as_ref().map(|g| g.config.clone()),
        thresholds: art.thresholds.clone(),
        seed: a.seed,
        deterministic: a.deterministic,
        force_bit: a.force_bit,
    };
    let report = RunReport {
        metrics: out.metrics,
        audit: out.audit,
        config: serde_json::to_value(&config).map_err(|e| Failure::usage(e.to_string()))?,
    };

    save_image(&out.sr, &a.out)?;
    let json = report.to_json()?;
    write_text(&a.report, &json)?;
    // outputs must parse back
    let back = fs::read_to_string(&a.report).map_err(|e| Failure::usage(e.to_string()))?;
    RunReport::from_json(&back)?;
    load_image::<f32>(&a.out)?;

    let m = &report.metrics;
    println!(
        "patches={} fab={:.3} psnr={} ssim={:.4} bitops={}",
        m.per_patch.len(),
        m.fab,
        m.psnr_db.map_or("inf".into(), |p| format!("{p:.3}")),
        m.ssim,
        m.bitops_display
    );
    Ok(())
}

#[derive(Debug, Default)]
struct SweepRow {
    config: String,
    thresholds: String,
    fab: f64,
    psnr: f64,
    ssim: f64,
    bitops_ratio: f64,
    status: String,
}

fn sweep_row(
    model: &QuantModel<f32>,
    gbc: &GbcModel<f32>,
    images: &[Tensor<f32>],
    thr: &CalibratedThresholds,
    opts: &PipelineOptions,
) -> granular_dq::Result<(f64, f64, f64, f64)> {
    let mut plans: Vec<PatchPlan> = Vec::new();
    let (mut psnr_sum, mut psnr_n, mut ssim_sum, mut ops_sum, mut full_sum) = (0.0, 0usize, 0.0, 0.0, 0.0);
    for img in images {
        let out = run_pipeline(model, Some(gbc), Some(thr), img, None, opts)?;
        let n = out.plans.len() as f64;
        ops_sum += out.metrics.bitops * n;
        full_sum += out.metrics.bitops / out.metrics.bitops_ratio * n;
        if let Some(p) = out.metrics.psnr_db {
            psnr_sum += p;
            psnr_n += 1;
        }
        ssim_sum += out.metrics.ssim;
        plans.extend(out.plans);
    }
    let psnr = if psnr_n == 0 { f64::INFINITY } else { psnr_sum / psnr_n as f64 };
    Ok((fab(&plans)?, psnr, ssim_sum / images.len() as f64, ops_sum / full_sum))
}

pub fn sweep(a: &SweepArgs) -> Res<()> {
    let entropy = entropy_config(&a.entropy)?;
    let art = load_artifacts(&a.model, Some(&a.gbc), None, true)?;
    require(&a.gbc, "controller model")?;
    let gbc = artifact(GbcModel::<f32>::load(&a.gbc))?;
    require(&a.stats, "stats file")?;
    let stats = artifact(StatsFile::read(&a.stats).and_then(|f| f.stats()))?;
    let images = corpus_files(&a.corpus)?
        .iter()
        .map(|f| artifact(load_image::<f32>(f)))
        .collect::<Res<Vec<_>>>()?;
    let bit_grid: Vec<&str> = a.grid.split(';').map(str::trim).filter(|s| !s.is_empty()).collect();
    let thr_grid: Vec<&str> = a.threshold_grid.split(';').map(str::trim).filter(|s| !s.is_empty()).collect();
    if bit_grid.is_empty() || thr_grid.is_empty() {
        return Err(Failure::usage("sweep grid is empty"));
    }
    let opts = PipelineOptions {
        patch_size: a.patch_size,
        entropy,
        deterministic: a.deterministic,
        seed: a.seed,
        ..PipelineOptions::default()
    };

    let mut rows = Vec::new();
    for bits in &bit_grid {
        for fracs in &thr_grid {
            let mut row = SweepRow {
                config: bits.to_string(),
                thresholds: fracs.to_string(),
                ..SweepRow::default()
            };
            let result = (|| -> granular_dq::Result<(f64, f64, f64, f64)> {
                let cfg = E2BConfig {
                    thresholds: parse_fractions(fracs).map_err(|f| granular_dq::Error::Contract(f.message))?,
                    bit_codes: parse_bit_list(bits)?,
                    gamma: a.gamma,
                };
                let atc = AtcConfig {
                    seed: a.seed,
                    ..AtcConfig::default()
                };
                let thr = run_calibration(&stats, &cfg, &atc)?.thresholds;
                sweep_row(&art.model, &gbc, &images, &thr, &opts)
            })();
            match result {
                Ok((f, p, s, r)) => {
                    (row.fab, row.psnr, row.ssim, row.bitops_ratio) = (f, p, s, r);
                    row.status = "ok".into();
                }
                Err(e) => {
                    log::warn!("sweep row {bits} / {fracs} failed: {e}");
                    row.status = format!("failed: {}", e.to_string().replace(',', ";"));
                }
            }
            rows.push(row);
        }
    }

    let mut csv = String::from("config,thresholds,fab,psnr_db,ssim,bitops_ratio,status\n");
    for r in &rows {
        writeln!(
            csv,
            "\"{}\",\"{}\",{:.6},{:.6},{:.6},{:.6},{}",
            r.config, r.thresholds, r.fab, r.psnr, r.ssim, r.bitops_ratio, r.status
        )
        .expect("string write");
    }
    write_text(&a.out, &csv)?;
    print!("{csv}");
    if rows.iter().any(|r| r.status != "ok") {
        return Err(Failure::inference("some sweep rows failed"));
    }
    Ok(())
}

pub fn report(a: &ReportArgs) -> Res<()> {
    let mut csv = String::from("report,patches,fab,psnr_db,ssim,l1,bitops,params\n");
    let mut all: Vec<f64> = Vec::new();
    for path in &a.reports {
        require(path, "report")?;
        let text = fs::read_to_string(path).map_err(|e| Failure::artifact(format!("{}: {e}", path.display())))?;
        let r = artifact(RunReport::from_json(&text))?;
        let m = &r.metrics;
        let recomputed = m.per_patch.iter().map(|p| f64::from(p.final_bit.bits())).sum::<f64>()
            / m.per_patch.len().max(1) as f64;
        if (recomputed - m.fab).abs() > 1e-9 {
            return Err(Failure::usage(format!(
                "{}: fab {} disagrees with per-patch mean {recomputed}",
                path.display(),
                m.fab
            )));
        }
        all.extend(m.per_patch.iter().map(|p| f64::from(p.final_bit.bits())));
        let psnr = m.psnr_db.map_or("inf".to_string(), |p| format!("{p:.3}"));
        println!(
            "{}  patches={} FAB={:.2} PSNR={} SSIM={:.4} BitOPs={} Params={}",
            path.display(),
            m.per_patch.len(),
            m.fab,
            psnr,
            m.ssim,
            format_reduction(m.bitops, m.bitops_ratio),
            m.params_display
        );
        writeln!(
            csv,
            "\"{}\",{},{:.6},{},{:.6},{:.6},\"{}\",\"{}\"",
            path.display(),
            m.per_patch.len(),
            m.fab,
            psnr,
            m.ssim,
            m.l1,
            m.bitops_display,
            m.params_display
        )
        .expect("string write");
    }
    if a.reports.len() > 1 && !all.is_empty() {
        println!("overall FAB={:.3} over {} patches", all.iter().sum::<f64>() / all.len() as f64, all.len());
    }
    if let Some(p) = &a.csv {
        write_text(p, &csv)?;
    }
    Ok(())
}
