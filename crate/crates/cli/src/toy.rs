//! Synthetic toy corpus: each speaker is a fixed mixture of sinusoids,
//! recorded over several "videos" that each apply their own channel
//! coloration, with per-utterance phase, syllable gating and noise.
//!
//! The front end normalizes every frequency bin over time, which erases
//! any stationary level. Identity therefore has to live in the temporal
//! structure: a speaker's components switch on and off together in
//! syllables, so their rows carry a shared blocky pattern while the
//! remaining rows hold only white noise.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;
use vexkit::frontend::{write_wav, FrontendError, Waveform, SAMPLE_RATE_HZ};
use vexkit::manifest::{save_manifest, Gender, Manifest, ManifestError, SpeakerRecord, Split, UtteranceRecord};
use vexkit::rng::substream;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid toy spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyBenchSpec {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub videos_per_speaker: usize,
    pub duration_s: f64,
    /// Sinusoids per speaker signature.
    pub components: usize,
    /// Additive white noise standard deviation relative to the unit
    /// component amplitude.
    pub noise_level: f64,
    /// Maximum per-video gain change of each component, as a fraction.
    pub channel_variation: f64,
    pub seed: u64,
}

impl Default for ToyBenchSpec {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            utterances_per_speaker: 30,
            videos_per_speaker: 3,
            duration_s: 4.0,
            components: 4,
            noise_level: 0.3,
            channel_variation: 0.3,
            seed: 0,
        }
    }
}

impl ToyBenchSpec {
    pub fn validate(&self) -> Result<(), ToyError> {
        let bad = |m: &str| Err(ToyError::Spec(m.to_string()));
        if self.n_speakers < 2 {
            return bad("need at least 2 speakers");
        }
        if self.utterances_per_speaker == 0 || self.videos_per_speaker == 0 || self.components == 0 {
            return bad("utterances, videos and components must be positive");
        }
        if !(self.duration_s >= 0.1 && self.duration_s <= 60.0) {
            return bad("duration must lie in [0.1, 60] seconds");
        }
        if !(self.noise_level >= 0.0) || !(0.0..1.0).contains(&self.channel_variation) {
            return bad("noise_level must be >= 0 and channel_variation in [0, 1)");
        }
        Ok(())
    }
}

/// A speaker's fixed sinusoid mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct Signature {
    pub freqs_hz: Vec<f64>,
    pub amps: Vec<f64>,
}

/// Signatures for every speaker; component frequencies are log-uniform in
/// 150..3500 Hz and, while the band has room, at least 25 Hz apart across
/// the whole corpus.
pub fn signatures(spec: &ToyBenchSpec) -> Vec<Signature> {
    let mut rng = substream(spec.seed, "toy-signatures", 0);
    let mut used: Vec<f64> = Vec::new();
    (0..spec.n_speakers)
        .map(|_| {
            let mut freqs = Vec::with_capacity(spec.components);
            let mut attempts = 0;
            while freqs.len() < spec.components {
                attempts += 1;
                let f = (150f64.ln() + rng.gen::<f64>() * (3500f64 / 150.0).ln()).exp();
                if attempts > 1000 || used.iter().all(|u| (u - f).abs() >= 25.0) {
                    used.push(f);
                    freqs.push(f);
                }
            }
            freqs.sort_by(f64::total_cmp);
            let amps = (0..spec.components).map(|_| rng.gen_range(0.5..1.0)).collect();
            Signature { freqs_hz: freqs, amps }
        })
        .collect()
}

pub fn speaker_id(i: usize) -> String {
    format!("spk{i:03}")
}

/// Renders one utterance. Deterministic in `(spec.seed, speaker, utt)`.
pub fn render(spec: &ToyBenchSpec, sig: &Signature, speaker: usize, utt: usize) -> Waveform {
    let video = utt % spec.videos_per_speaker;
    let mut chan = substream(spec.seed, "toy-channel", (speaker * 1000 + video) as u64);
    let gains: Vec<f64> = (0..sig.freqs_hz.len())
        .map(|_| 1.0 + spec.channel_variation * chan.gen_range(-1.0..1.0))
        .collect();
    let tilt = spec.channel_variation * chan.gen_range(-1.0..1.0);
    let mut rng = substream(spec.seed, "toy-utterance", (speaker * 100_000 + utt) as u64);
    let phases: Vec<f64> = sig.freqs_hz.iter().map(|_| rng.gen::<f64>() * TAU).collect();
    let n = (spec.duration_s * SAMPLE_RATE_HZ as f64).round() as usize;
    let sr = SAMPLE_RATE_HZ as f64;
    let gate = syllable_gate(n, sr, &mut rng);
    let noise = Normal::new(0.0, spec.noise_level.max(1e-300)).expect("valid std");
    let weights: Vec<f64> = sig
        .freqs_hz
        .iter()
        .zip(&sig.amps)
        .zip(&gains)
        .map(|((f, a), g)| a * g * (1.0 + tilt * (f / 1000.0 - 1.0)).max(0.1))
        .collect();
    let mut samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let voiced: f64 = sig
                .freqs_hz
                .iter()
                .zip(&weights)
                .zip(&phases)
                .map(|((f, w), p)| w * (TAU * f * t + p).sin())
                .sum();
            let n = if spec.noise_level > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            gate[i] * voiced + n
        })
        .collect();
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    samples.iter_mut().for_each(|v| *v *= 0.5 / peak);
    Waveform::new(samples)
}

/// On/off envelope made of syllables 80..300 ms long, each voiced with
/// probability 0.6, with 10 ms raised-cosine ramps between levels.
fn syllable_gate(n: usize, sr: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut levels = Vec::with_capacity(n);
    while levels.len() < n {
        let len = (rng.gen_range(0.08..0.3) * sr) as usize;
        let on = if rng.gen_bool(0.6) { 1.0 } else { 0.0 };
        levels.extend(std::iter::repeat(on).take(len.max(1)));
    }
    levels.truncate(n);
    let ramp = (0.01 * sr) as usize;
    let mut gate = levels.clone();
    for i in 1..n {
        if levels[i] != levels[i - 1] {
            let (from, to) = (levels[i - 1], levels[i]);
            for j in 0..ramp.min(n - i) {
                let x = 0.5 - 0.5 * (std::f64::consts::PI * j as f64 / ramp as f64).cos();
                gate[i + j] = from + (to - from) * x;
            }
        }
    }
    gate
}

/// Manifest of the toy corpus with audio paths relative to its directory.
/// Speakers alternate male/female and pair off into USA/UK, giving four
/// (nationality, gender) groups of equal size for 20 speakers.
pub fn toy_manifest(spec: &ToyBenchSpec) -> Result<Manifest, ToyError> {
    let speakers = (0..spec.n_speakers)
        .map(|i| SpeakerRecord {
            speaker_id: speaker_id(i),
            gender: if i % 2 == 0 { Gender::Male } else { Gender::Female },
            nationality: if (i / 2) % 2 == 0 { "USA" } else { "UK" }.to_string(),
            split: Split::Dev,
        })
        .collect();
    let mut utterances = Vec::new();
    for s in 0..spec.n_speakers {
        for u in 0..spec.utterances_per_speaker {
            let v = u % spec.videos_per_speaker;
            utterances.push(UtteranceRecord {
                utterance_id: format!("{}/v{v}/u{u:03}", speaker_id(s)),
                speaker_id: speaker_id(s),
                video_id: format!("{}-v{v}", speaker_id(s)),
                audio_path: PathBuf::from(format!("wav/{}_v{v}_u{u:03}.wav", speaker_id(s))),
                duration_s: spec.duration_s,
            });
        }
    }
    Ok(Manifest::new(speakers, utterances)?)
}

/// Writes WAV files and `manifest.txt` under `out`; returns the manifest path.
pub fn generate(spec: &ToyBenchSpec, out: &Path) -> Result<PathBuf, ToyError> {
    spec.validate()?;
    let sigs = signatures(spec);
    let manifest = toy_manifest(spec)?;
    std::fs::create_dir_all(out.join("wav"))?;
    for (i, u) in manifest.utterances().iter().enumerate() {
        let (s, n) = (i / spec.utterances_per_speaker, i % spec.utterances_per_speaker);
        write_wav(out.join(&u.audio_path), &render(spec, &sigs[s], s, n))?;
    }
    let path = out.join("manifest.txt");
    save_manifest(&manifest, &path)?;
    Ok(path)
}
