//! Training/evaluation mixture synthesis: 5-second segments of a target and a
//! randomly chosen different source, with the interferer scaled to an SNR
//! drawn uniformly from [-5, 5] dB.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::rng::FixtureRng;
use crate::wav;

pub const SNR_RANGE_DB: (f64, f64) = (-5.0, 5.0);
pub const CLIP_SECONDS: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub duration_s: f64,
}

/// Parse `path<TAB>duration_s` lines; blank lines and `#` comments skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let (path, dur) = line.split_once('\t').ok_or_else(|| {
            Error::invalid(format!("manifest line {}: expected path<TAB>duration", n + 1))
        })?;
        let duration_s: f64 = dur.trim().parse().map_err(|_| {
            Error::invalid(format!("manifest line {}: bad duration {dur:?}", n + 1))
        })?;
        if !(duration_s.is_finite() && duration_s >= 0.0) {
            return Err(Error::invalid(format!(
                "manifest line {}: bad duration {dur:?}",
                n + 1
            )));
        }
        out.push(ManifestEntry {
            path: PathBuf::from(path),
            duration_s,
        });
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = parse_manifest(&text)?;
    // Relative source paths resolve against the manifest's directory.
    if let Some(dir) = path.parent() {
        for e in &mut entries {
            if e.path.is_relative() {
                e.path = dir.join(&e.path);
            }
        }
    }
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub target_path: PathBuf,
    pub interferer_path: PathBuf,
    pub snr_db: f64,
    pub target_offset_s: f64,
    pub interferer_offset_s: f64,
    pub duration_s: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureRecord {
    pub mixture: Waveform,
    pub target: Waveform,
    pub interferer_scaled: Waveform,
    pub requested_snr_db: f64,
    pub achieved_snr_db: f64,
    /// Joint divisor applied to all stems to keep the mixture within
    /// [-1, 1]; 1.0 when no normalisation was needed.
    pub peak_factor: f64,
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|s| s * s).sum()
}

/// `10 * log10(sum target^2 / sum noise^2)`.
pub fn measure_snr(target: &[f64], noise: &[f64]) -> Result<f64> {
    let et = energy(target);
    let en = energy(noise);
    if et <= 0.0 {
        return Err(Error::UndefinedSnr("target"));
    }
    if en <= 0.0 {
        return Err(Error::UndefinedSnr("noise"));
    }
    Ok(10.0 * (et / en).log10())
}

/// Gain `g` such that `measure_snr(target, g * noise) == snr_db`.
pub fn snr_gain(target: &[f64], noise: &[f64], snr_db: f64) -> Result<f64> {
    let et = energy(target);
    let en = energy(noise);
    if et <= 0.0 {
        return Err(Error::UndefinedSnr("target"));
    }
    if en <= 0.0 {
        return Err(Error::UndefinedSnr("noise"));
    }
    Ok((et / (en * 10f64.powf(snr_db / 10.0))).sqrt())
}

pub fn scale_noise_for_snr(target: &[f64], noise: &[f64], snr_db: f64) -> Result<Vec<f64>> {
    let g = snr_gain(target, noise, snr_db)?;
    Ok(noise.iter().map(|n| n * g).collect())
}

fn segment(w: &Waveform, offset_s: f64, duration_s: f64, what: &str) -> Result<Vec<f64>> {
    let start = (offset_s * w.sample_rate as f64).round() as usize;
    let len = (duration_s * w.sample_rate as f64).round() as usize;
    if start + len > w.len() {
        return Err(Error::invalid(format!(
            "{what} too short: need {} samples from offset {start}, have {}",
            len,
            w.len()
        )));
    }
    Ok(w.samples[start..start + len].to_vec())
}

/// Mix in-memory sources according to `spec` (paths in `spec` are ignored).
pub fn mix_waveforms(target: &Waveform, interferer: &Waveform, spec: &MixtureSpec) -> Result<MixtureRecord> {
    if target.sample_rate != interferer.sample_rate {
        return Err(Error::invalid(format!(
            "sample rate mismatch: {} vs {}",
            target.sample_rate, interferer.sample_rate
        )));
    }
    if !(spec.duration_s > 0.0) {
        return Err(Error::invalid("duration must be positive"));
    }
    let rate = target.sample_rate;
    let t = segment(target, spec.target_offset_s, spec.duration_s, "target")?;
    let n = segment(interferer, spec.interferer_offset_s, spec.duration_s, "interferer")?;
    let mut scaled = scale_noise_for_snr(&t, &n, spec.snr_db)?;
    let mut t = t;
    let mut mix: Vec<f64> = t.iter().zip(&scaled).map(|(a, b)| a + b).collect();
    let peak = mix.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let peak_factor = if peak > 1.0 { peak } else { 1.0 };
    if peak_factor != 1.0 {
        for x in [&mut t, &mut scaled, &mut mix] {
            x.iter_mut().for_each(|s| *s /= peak_factor);
        }
    }
    let achieved = measure_snr(&t, &scaled)?;
    Ok(MixtureRecord {
        mixture: Waveform::new(mix, rate)?,
        target: Waveform::new(t, rate)?,
        interferer_scaled: Waveform::new(scaled, rate)?,
        requested_snr_db: spec.snr_db,
        achieved_snr_db: achieved,
        peak_factor,
    })
}

/// Load both sources from disk and mix them.
pub fn make_mixture(spec: &MixtureSpec) -> Result<MixtureRecord> {
    let target = wav::read_wav(&spec.target_path, crate::SAMPLE_RATE)?;
    let interferer = wav::read_wav(&spec.interferer_path, crate::SAMPLE_RATE)?;
    mix_waveforms(&target, &interferer, spec)
}

/// Draw `count` specs from `manifest`, reproducible from `seed`.
///
/// For each spec, draws happen in this order from one [`FixtureRng`]: target
/// index (`next % n`), interferer step (`1 + next % (n - 1)`, added to the
/// target index modulo `n` so it always differs), SNR (`-5 + 10 * u`),
/// target offset and interferer offset (`u * (duration - 5)`, clamped at 0).
/// Each spec also records a per-spec seed (`next`).
pub fn draw_specs(manifest: &[ManifestEntry], count: usize, seed: u64) -> Result<Vec<MixtureSpec>> {
    let n = manifest.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "manifest needs at least 2 sources, has {n}"
        )));
    }
    let mut rng = FixtureRng::new(seed);
    let (lo, hi) = SNR_RANGE_DB;
    Ok((0..count)
        .map(|_| {
            let ti = rng.index(n);
            let ii = (ti + 1 + rng.index(n - 1)) % n;
            let snr_db = rng.uniform(lo, hi);
            let slack = |e: &ManifestEntry| (e.duration_s - CLIP_SECONDS).max(0.0);
            let target_offset_s = round_ms(rng.unit_f64() * slack(&manifest[ti]));
            let interferer_offset_s = round_ms(rng.unit_f64() * slack(&manifest[ii]));
            MixtureSpec {
                target_path: manifest[ti].path.clone(),
                interferer_path: manifest[ii].path.clone(),
                snr_db,
                target_offset_s,
                interferer_offset_s,
                duration_s: CLIP_SECONDS,
                seed: rng.next_u64(),
            }
        })
        .collect())
}

/// Offsets are kept on a millisecond grid so they survive JSON round trips
/// and map to whole samples.
fn round_ms(s: f64) -> f64 {
    (s * 1000.0).floor() / 1000.0
}

/// Mix a batch of specs. Parallel and sequential execution produce
/// identical records.
pub fn make_batch(specs: &[MixtureSpec], exec: Execution) -> Vec<Result<MixtureRecord>> {
    exec::map_slice(exec, specs, make_mixture)
}

/// Sidecar metadata line for one generated record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSidecar {
    pub index: usize,
    pub mixture: String,
    pub target: String,
    pub interferer: String,
    pub target_source: PathBuf,
    pub interferer_source: PathBuf,
    pub snr_db: f64,
    pub achieved_snr_db: f64,
    pub target_offset_s: f64,
    pub interferer_offset_s: f64,
    pub duration_s: f64,
    pub peak_factor: f64,
    pub seed: u64,
}

/// Write the three stems of each record plus a `metadata.jsonl` sidecar.
pub fn write_batch(
    outdir: impl AsRef<Path>,
    specs: &[MixtureSpec],
    records: &[MixtureRecord],
    encoding: wav::WavEncoding,
) -> Result<()> {
    let outdir = outdir.as_ref();
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    if specs.is_empty() {
        return Ok(());
    }
    let mut lines = String::new();
    for (i, (spec, rec)) in specs.iter().zip(records).enumerate() {
        let names = [
            format!("{i:05}_mix.wav"),
            format!("{i:05}_target.wav"),
            format!("{i:05}_interferer.wav"),
        ];
        for (name, w) in names
            .iter()
            .zip([&rec.mixture, &rec.target, &rec.interferer_scaled])
        {
            wav::write_wav(outdir.join(name), w, encoding)?;
        }
        let side = MixtureSidecar {
            index: i,
            mixture: names[0].clone(),
            target: names[1].clone(),
            interferer: names[2].clone(),
            target_source: spec.target_path.clone(),
            interferer_source: spec.interferer_path.clone(),
            snr_db: spec.snr_db,
            achieved_snr_db: rec.achieved_snr_db,
            target_offset_s: spec.target_offset_s,
            interferer_offset_s: spec.interferer_offset_s,
            duration_s: spec.duration_s,
            peak_factor: rec.peak_factor,
            seed: spec.seed,
        };
        lines.push_str(&serde_json::to_string(&side).expect("sidecar serialises"));
        lines.push('\n');
    }
    let meta = outdir.join("metadata.jsonl");
    std::fs::write(&meta, lines).map_err(|e| Error::io(meta, e))
}
