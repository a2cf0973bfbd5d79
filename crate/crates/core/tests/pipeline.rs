use granular_dq::container::Container;
use granular_dq::conv::upsample_bicubic;
use granular_dq::e2b::{calibrate, resolve_thresholds, AtcConfig, E2BConfig};
use granular_dq::entropy::{build_entropy_stats, patch_entropy, EntropyConfig, StatsFile};
use granular_dq::gbc::{allocate_bits, decide, softmax, GbcConfig, GbcModel};
use granular_dq::metrics::psnr;
use granular_dq::patch::{extract_patches, stitch_patches};
use granular_dq::srnet::{forward_quantized, load_model, run_pipeline, PipelineOptions, QuantModel, SrConfig};
use granular_dq::synth::textured_image;
use granular_dq::{BitCode, GbcModel32, QuantModel32, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> SrConfig {
    SrConfig {
        feat_channels: 8,
        blocks: 2,
        ..SrConfig::default()
    }
}

#[test]
fn patch_order_does_not_change_stitched_output() {
    let model = QuantModel32::random(small(), 5).unwrap();
    let img = textured_image::<f32>(1, 3, 40, 52, 0.5);
    let (grid, patches) = extract_patches(&img, 16, 4).unwrap();
    let bits: Vec<BitCode> = (0..patches.len()).map(|i| BitCode([4, 5, 6, 8][i % 4])).collect();
    let forward = |i: usize| forward_quantized(&model, &patches[i], bits[i]).unwrap();

    let in_order: Vec<_> = (0..patches.len()).map(forward).collect();
    let mut reversed: Vec<(usize, Tensor<f32>)> = (0..patches.len()).rev().map(|i| (i, forward(i))).collect();
    reversed.sort_by_key(|(i, _)| *i);
    let reversed: Vec<_> = reversed.into_iter().map(|(_, t)| t).collect();

    let a = stitch_patches(&grid, &in_order, 2).unwrap();
    let b = stitch_patches(&grid, &reversed, 2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_body_pipeline_is_exact_bicubic() {
    let model = QuantModel::<f64>::zero(small()).unwrap();
    let img = textured_image::<f64>(2, 3, 30, 30, 0.8);
    let opts = PipelineOptions {
        patch_size: 30,
        force_bit: Some(BitCode(4)),
        ..PipelineOptions::default()
    };
    let bic = upsample_bicubic(&img, 2).unwrap().clamp(0.0, 1.0);
    let out = run_pipeline(&model, None, None, &img, Some(&bic), &opts).unwrap();
    assert!(psnr(&out.sr, &bic, 1.0).unwrap().is_infinite());
    assert!(out.metrics.psnr_infinite);
    assert_eq!(out.metrics.psnr_db, None);
}

#[test]
fn model_file_round_trip_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gdq");
    let m = QuantModel32::random(SrConfig { scale: 4, ..small() }, 8).unwrap();
    m.save(&path).unwrap();
    let back: QuantModel32 = load_model(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.tail.weight.dims().batch, 48);

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.gdq");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let err = QuantModel32::load(&cut).unwrap_err().to_string();
    assert!(err.contains("failed to load model"), "{err}");
    assert!(QuantModel32::load(dir.path().join("missing.gdq")).is_err());

    // a controller file is not an SR model
    let g = dir.path().join("g.gdq");
    GbcModel32::random(GbcConfig::default(), 1).unwrap().save(&g).unwrap();
    assert!(QuantModel32::load(&g).is_err());
    assert_eq!(GbcModel32::load(&g).unwrap(), GbcModel32::random(GbcConfig::default(), 1).unwrap());
}

#[test]
fn model_tensors_are_64_byte_aligned() {
    let m = QuantModel32::random(small(), 0).unwrap();
    let bytes = m.to_container().unwrap().to_bytes().unwrap();
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let manifest: serde_json::Value = serde_json::from_slice(&bytes[16..16 + n]).unwrap();
    for t in manifest["tensors"].as_array().unwrap() {
        assert_eq!(t["offset"].as_u64().unwrap() % 64, 0);
        assert_eq!(t["dtype"], "f32");
    }
    assert_eq!(manifest["meta"]["weights"][0]["bit"], 8);
    assert_eq!(Container::from_bytes(&bytes).unwrap().kind, "srnet");
}

#[test]
fn stats_entries_match_recomputation() {
    let cfg = EntropyConfig::default();
    let images: Vec<Tensor<f32>> = (0..3).map(|i| textured_image(i, 3, 96, 120, i as f64 / 2.0)).collect();
    let mut patches = Vec::new();
    for img in &images {
        patches.extend(extract_patches(img, 48, 0).unwrap().1);
    }
    let expected_m = patches.len();
    let stats = build_entropy_stats(patches.clone(), &cfg).unwrap();
    assert_eq!(stats.m, expected_m);
    for p in patches.iter().step_by(3) {
        let e = patch_entropy(p, &cfg).unwrap();
        assert!(stats.values.contains(&e));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    StatsFile::new(&stats, &cfg).write(&path).unwrap();
    let again = build_entropy_stats(patches, &cfg).unwrap();
    assert_eq!(StatsFile::read(&path).unwrap().digest, again.digest());
}

#[test]
fn calibration_gamma_one_keeps_fractions() {
    let stats = granular_dq::entropy::EntropyStats::from_values((0..50).map(|i| i as f64 * 0.1).collect()).unwrap();
    let cfg = E2BConfig {
        gamma: 1.0,
        ..E2BConfig::default()
    };
    let cal = calibrate(&stats, &cfg, &AtcConfig::default()).unwrap();
    assert_eq!(cal.thresholds.fractions, vec![0.5, 0.9]);
    assert_eq!(cal.thresholds, {
        let mut r = resolve_thresholds(&stats, &cfg).unwrap();
        r.iterations = cal.thresholds.iterations;
        r.source_digest = cal.thresholds.source_digest.clone();
        r
    });
    // 50 entries in batches of 16: four updates
    assert_eq!(cal.thresholds.iterations, 4);
    let single = calibrate(&stats, &cfg, &AtcConfig { batch_size: 64, ..AtcConfig::default() }).unwrap();
    assert_eq!(single.thresholds.iterations, 1);
}

#[test]
fn gumbel_low_temperature_and_shift_invariance() {
    let cands = [BitCode(4), BitCode(6), BitCode(8)];
    let d = decide::<ChaCha8Rng>(&[0.0, 1.0, 0.5], &cands, 0.01, None).unwrap();
    assert_eq!(d.bit, BitCode(6));
    assert!(d.p > 0.999_999);

    let mut r1 = ChaCha8Rng::seed_from_u64(3);
    let mut r2 = ChaCha8Rng::seed_from_u64(3);
    let a = decide(&[0.2, -0.4, 1.1], &cands, 1.0, Some(&mut r1)).unwrap();
    let b = decide(&[5.2, 4.6, 6.1], &cands, 1.0, Some(&mut r2)).unwrap();
    assert_eq!(a.theta, b.theta);
    assert!((a.p - b.p).abs() < 1e-12);
    let s = softmax(&[1.0, 2.0, 3.0], 1.0);
    assert!((s[2] - 0.665_240_955_774_821_6).abs() < 1e-12);
}

#[test]
fn sampled_allocation_varies_with_seed_only() {
    let g = GbcModel::<f32>::random(GbcConfig::default(), 0).unwrap();
    let patches: Vec<Tensor<f32>> = (0..12).map(|i| textured_image(i, 3, 32, 32, 0.5)).collect();
    let a = allocate_bits(&patches, &g, false, 1).unwrap();
    assert_eq!(a, allocate_bits(&patches, &g, false, 1).unwrap());
    let differs = (2..10).any(|s| allocate_bits(&patches, &g, false, s).unwrap() != a);
    assert!(differs);
}

#[test]
fn grayscale_input_runs_as_rgb() {
    let model = QuantModel32::random(small(), 0).unwrap();
    let img = textured_image::<f32>(4, 1, 20, 24, 0.5);
    let opts = PipelineOptions {
        force_bit: Some(BitCode(6)),
        ..PipelineOptions::default()
    };
    let out = run_pipeline(&model, None, None, &img, None, &opts).unwrap();
    assert_eq!(out.sr.dims().channels, 3);
    assert_eq!((out.sr.dims().height, out.sr.dims().width), (40, 48));
}
