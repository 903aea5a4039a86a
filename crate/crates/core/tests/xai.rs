use pollen_core::detect::{detect_grains, DetectParams};
use pollen_core::embed::{AttentionCapture, Embedder, Embedding, VitConfig, VitWeights};
use pollen_core::metrics::fit_centroids_named;
use pollen_core::pipeline::{run_pipeline, PipelineOptions};
use pollen_core::prep::{prepare_grain, NormalizedCrop, PrepConfig};
use pollen_core::synth::SynthSpec;
use pollen_core::xai::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn crop(side: usize, seed: u64) -> NormalizedCrop {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = (0..3 * side * side).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    NormalizedCrop::new(side, t).unwrap()
}

#[test]
fn small_config_grid_is_18_by_18() {
    let cfg = VitConfig::small();
    let t = cfg.num_tokens();
    let cap = AttentionCapture {
        heads: cfg.heads,
        tokens: t,
        grid: cfg.grid(),
        hidden: cfg.hidden,
        attention: vec![1.0 / t as f64; cfg.heads * t * t],
        qkv: vec![0.0; t * 3 * cfg.hidden],
        qkv_grad: None,
    };
    let maps = cls_attention_map(&cap, &cfg).unwrap();
    assert_eq!(maps.len(), 6);
    assert!(maps.iter().all(|m| m.len() == 18 * 18));
    assert!(cls_attention_map(&cap, &VitConfig::tiny()).is_err());
}

#[test]
fn real_capture_heatmap_is_normalised_and_homogeneous() {
    let cfg = VitConfig::tiny();
    let w = VitWeights::seeded(cfg.clone(), 21).unwrap();
    let c = crop(42, 3);
    let centroid = Embedding::normalized(&[0.3, -0.1, 0.5, 0.2, -0.4, 0.1, 0.0, 0.6]).unwrap();
    let cap = w.explain(&c, &centroid).unwrap().unwrap();
    let hm = weighted_heatmap(&cap, &cfg).unwrap();
    assert_eq!((hm.width, hm.height), (42, 42));
    assert!(hm.values.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(hm.values.iter().copied().fold(0.0, f64::max), 1.0);
    let h = head_weights(&cap).unwrap();
    for scale in [0.5, 3.0, 1e4] {
        let scaled: Vec<f64> = h.iter().map(|v| v * scale).collect();
        let other = weighted_heatmap_with(&cap, &cfg, &scaled).unwrap();
        assert_eq!(other.argmax(), hm.argmax());
        assert!(other.values.iter().zip(&hm.values).all(|(a, b)| (a - b).abs() < 1e-9));
    }
    assert_eq!(capture_heatmap(&cap, 42).unwrap(), hm);
}

#[test]
fn pipeline_emits_one_heatmap_per_grain() {
    let spec = SynthSpec::parse("400x300:80,80,40,1;300,90,40,2;180,220,40,3").unwrap();
    let w = VitWeights::seeded(VitConfig::tiny(), 4).unwrap();
    let img = spec.image();
    let sal = spec.saliency(0.9, 0.05);
    let grains = detect_grains(&sal, &DetectParams::default()).unwrap();
    let prep = PrepConfig { side: 42, ..PrepConfig::default() };
    let pts: Vec<Vec<f64>> =
        grains.iter().map(|g| w.embed(&prepare_grain(&img, g, &prep).unwrap()).unwrap().into_values()).collect();
    let cs = fit_centroids_named(&pts, &["A", "B", "C"]).unwrap();
    let opts = PipelineOptions { emit_heatmaps: true, ..PipelineOptions::default() };
    let out = run_pipeline("scene", &img, &sal, &w, &cs, &opts).unwrap();
    assert_eq!(out.heatmaps.len(), 3);
    assert_eq!(out.heatmaps.iter().map(|h| h.grain_id).collect::<Vec<_>>(), [Some(0), Some(1), Some(2)]);
    let blended = blend_heatmap(&img, &out.heatmaps[0], DEFAULT_BLEND).unwrap();
    assert_eq!((blended.width(), blended.height()), (400, 300));
}
