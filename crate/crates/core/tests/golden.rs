mod common;

use std::cell::RefCell;
use std::path::PathBuf;

use avse_core::dsp::MaskFrame;
use avse_core::embed::synthetic_embeddings;
use avse_core::engine::{run_offline, run_offline_with, SessionConfig};
use avse_core::masknet::{MaskNet, ModelConfig, ModelWeights};
use avse_core::wav::{read_wav, write_wav, WavEncoding};
use avse_core::Waveform;

const MODEL_SEED: u64 = 11;
const EMBED_SEED: u64 = 5;

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

/// Rounded to f32 so the stored input WAV reproduces it exactly.
fn fixture_input() -> Vec<f64> {
    let v = common::voiced(32000, 3);
    let n = common::noise(32000, 4, 0.05);
    v.iter().zip(&n).map(|(a, b)| (a + b) as f32 as f64).collect()
}

/// Enhanced output and masks from the library.
fn engine_run() -> (Vec<f64>, Vec<MaskFrame>) {
    let w = ModelWeights::random(ModelConfig::tiny(), MODEL_SEED).unwrap();
    let net = MaskNet::from_weights(&w).unwrap();
    let x = Waveform::new(fixture_input(), 16000).unwrap();
    let emb = synthetic_embeddings(50, 512, EMBED_SEED).unwrap();
    let cfg = SessionConfig::default();
    let out = run_offline(&cfg, &net, &x, &emb).unwrap();

    // Same run through the mask-source hook to capture the masks.
    let captured = RefCell::new(Vec::new());
    let again = run_offline_with(&cfg, &x, |noisy| {
        let bins = noisy.bins();
        let compressed: Vec<f32> = noisy.data().iter().map(|c| c.norm().powf(0.3) as f32).collect();
        assert_eq!(compressed.len(), noisy.frames() * bins);
        let m = net.predict_sequence(&compressed, |t| emb.frame(t / 4), cfg.execution)?;
        *captured.borrow_mut() = m.clone();
        Ok(m)
    })
    .unwrap();
    assert_eq!(out.samples, again.samples);
    (out.samples, captured.into_inner())
}

fn read_masks(path: &std::path::Path) -> Vec<f64> {
    std::fs::read(path)
        .unwrap()
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect()
}

#[test]
fn golden_output_is_reproduced() {
    let (out, masks) = engine_run();
    let flat: Vec<f64> = masks.iter().flat_map(|m| m.values().iter().copied()).collect();
    let wav_path = data_dir().join("golden_enhanced.wav");
    let mask_path = data_dir().join("golden_masks.f64");
    if std::env::var_os("AVSE_REGEN_GOLDEN").is_some() {
        std::fs::create_dir_all(data_dir()).unwrap();
        let input = Waveform::new(fixture_input(), 16000).unwrap();
        write_wav(data_dir().join("golden_input.wav"), &input, WavEncoding::Float32).unwrap();
        write_wav(&wav_path, &Waveform::new(out.clone(), 16000).unwrap(), WavEncoding::Float32).unwrap();
        let bytes: Vec<u8> = flat.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&mask_path, bytes).unwrap();
    }
    let input = read_wav(data_dir().join("golden_input.wav"), 16000).unwrap();
    assert_eq!(input.samples, fixture_input());
    let golden = read_wav(&wav_path, 16000).unwrap();
    assert_eq!(golden.len(), out.len());
    let d = common::max_abs_diff(&golden.samples, &out);
    assert!(d < 1e-6, "output differs from golden by {d}");
    let golden_masks = read_masks(&mask_path);
    assert_eq!(golden_masks.len(), flat.len());
    let d = common::max_abs_diff(&golden_masks, &flat);
    assert!(d < 1e-6, "masks differ from golden by {d}");
}

#[test]
fn engine_matches_scalar_oracle_pipeline() {
    let (out, masks) = engine_run();
    let w = ModelWeights::random(ModelConfig::tiny(), MODEL_SEED).unwrap();
    let emb = synthetic_embeddings(50, 512, EMBED_SEED).unwrap();
    let (oracle_out, oracle_masks) = common::pipeline(&w, &fixture_input(), |v| {
        emb.frame(v).iter().map(|&x| x as f64).collect()
    });
    assert_eq!(oracle_masks.len(), masks.len());
    let mut worst = 0.0f64;
    for (a, b) in oracle_masks.iter().zip(&masks) {
        worst = worst.max(common::max_abs_diff(a, b.values()));
    }
    assert!(worst < 1e-5, "mask deviation {worst}");
    let d = common::max_abs_diff(&oracle_out, &out);
    assert!(d < 1e-5, "output deviation {d}");
    assert!(out[..1920].iter().all(|v| *v == 0.0));
    assert!(out[1920..].iter().any(|v| *v != 0.0));
}
