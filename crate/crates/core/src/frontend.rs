//! Raw waveform to per-bin normalized magnitude spectrograms.
//!
//! Conventions: 16 kHz input, 400-sample (25 ms) Hamming window, 160-sample
//! (10 ms) hop, 1024-point zero-padded FFT keeping bins 1..=512. Three
//! seconds of audio give 298 frames; [`utterance_spectrogram`] reflect-pads
//! one frame on each side so a 3 s segment is exactly 512 x 300.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

pub const SAMPLE_RATE_HZ: u32 = 16_000;
pub const WINDOW_SAMPLES: usize = 400;
pub const HOP_SAMPLES: usize = 160;
pub const FFT_LEN: usize = 1024;
pub const FREQ_BINS: usize = 512;
pub const CROP_FRAMES: usize = 300;
pub const NUM_TEST_CROPS: usize = 10;

const CACHE_MAGIC: &[u8; 4] = b"VXSP";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("waveform has {samples} samples, need at least {needed}")]
    TooShort { samples: usize, needed: usize },
    #[error("sample rate {0} Hz, expected {SAMPLE_RATE_HZ} Hz")]
    SampleRate(u32),
    #[error("unsupported audio format: {0}")]
    Format(String),
    #[error("normalization needs at least two frames")]
    SingleFrame,
    #[error("spectrogram cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate_hz: SAMPLE_RATE_HZ,
        }
    }
}

/// Reads 16-bit mono PCM, scaled to [-1, 1).
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, FrontendError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(FrontendError::Format(format!(
            "{} channel(s), {}-bit {:?}",
            spec.channels, spec.bits_per_sample, spec.sample_format
        )));
    }
    if spec.sample_rate != SAMPLE_RATE_HZ {
        return Err(FrontendError::SampleRate(spec.sample_rate));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Waveform {
        samples,
        sample_rate_hz: spec.sample_rate,
    })
}

/// Writes 16-bit mono PCM, clipping to the representable range.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<(), FrontendError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Magnitude spectrogram stored row-major as `[FREQ_BINS x frames]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    values: Vec<f64>,
    frames: usize,
    pub normalized: bool,
}

impl Spectrogram {
    pub fn from_values(values: Vec<f64>, frames: usize) -> Self {
        assert!(frames >= 1, "spectrogram needs at least one frame");
        assert_eq!(values.len(), FREQ_BINS * frames, "values must be 512 x frames");
        Self {
            values,
            frames,
            normalized: false,
        }
    }

    pub fn freq_bins(&self) -> usize {
        FREQ_BINS
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, bin: usize) -> &[f64] {
        &self.values[bin * self.frames..(bin + 1) * self.frames]
    }

    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }

    /// Frames `[offset, offset + len)` taken cyclically.
    pub fn window(&self, offset: usize, len: usize) -> Spectrogram {
        let mut values = Vec::with_capacity(FREQ_BINS * len);
        for bin in 0..FREQ_BINS {
            let row = self.row(bin);
            if offset + len <= self.frames {
                values.extend_from_slice(&row[offset..offset + len]);
            } else {
                values.extend((0..len).map(|t| row[(offset + t) % self.frames]));
            }
        }
        Spectrogram {
            values,
            frames: len,
            normalized: self.normalized,
        }
    }
}

/// Symmetric Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Reusable FFT plan and window for [`spectrogram`].
pub struct SpectrogramPlan {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl Default for SpectrogramPlan {
    fn default() -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(FFT_LEN),
            window: hamming(WINDOW_SAMPLES),
        }
    }
}

impl SpectrogramPlan {
    pub fn compute(&self, w: &Waveform) -> Result<Spectrogram, FrontendError> {
        if w.sample_rate_hz != SAMPLE_RATE_HZ {
            return Err(FrontendError::SampleRate(w.sample_rate_hz));
        }
        let n = w.samples.len();
        if n < WINDOW_SAMPLES {
            return Err(FrontendError::TooShort {
                samples: n,
                needed: WINDOW_SAMPLES,
            });
        }
        let frames = (n - WINDOW_SAMPLES) / HOP_SAMPLES + 1;
        let mut values = vec![0.0; FREQ_BINS * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_LEN];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let seg = &w.samples[t * HOP_SAMPLES..t * HOP_SAMPLES + WINDOW_SAMPLES];
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < WINDOW_SAMPLES {
                    Complex::new(seg[i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for bin in 0..FREQ_BINS {
                values[bin * frames + t] = buf[bin + 1].norm();
            }
        }
        Ok(Spectrogram::from_values(values, frames))
    }
}

/// Unnormalized magnitude spectrogram with `floor((len - 400) / 160) + 1` frames.
pub fn spectrogram(w: &Waveform) -> Result<Spectrogram, FrontendError> {
    SpectrogramPlan::default().compute(w)
}

/// Mirrors `pad` frames on each side of the time axis (edge frame not repeated).
pub fn reflect_pad_frames(s: &Spectrogram, pad: usize) -> Spectrogram {
    if pad == 0 {
        return s.clone();
    }
    let t = s.frames;
    let reflect = |i: isize| -> usize {
        if t == 1 {
            return 0;
        }
        let period = 2 * (t as isize - 1);
        let m = i.rem_euclid(period);
        (if m < t as isize { m } else { period - m }) as usize
    };
    let frames = t + 2 * pad;
    let mut values = Vec::with_capacity(FREQ_BINS * frames);
    for bin in 0..FREQ_BINS {
        let row = s.row(bin);
        values.extend((0..frames).map(|j| row[reflect(j as isize - pad as isize)]));
    }
    Spectrogram {
        values,
        frames,
        normalized: s.normalized,
    }
}

/// Spectrogram of a whole utterance with the one-frame reflect padding
/// that makes 3 s of audio exactly [`CROP_FRAMES`] wide.
pub fn utterance_spectrogram(plan: &SpectrogramPlan, w: &Waveform) -> Result<Spectrogram, FrontendError> {
    Ok(reflect_pad_frames(&plan.compute(w)?, 1))
}

/// Per-frequency-bin mean and variance normalization (population variance).
/// Constant rows become all-zero rows.
pub fn normalize(s: &Spectrogram) -> Result<Spectrogram, FrontendError> {
    if s.frames < 2 {
        return Err(FrontendError::SingleFrame);
    }
    let t = s.frames as f64;
    let mut values = s.values.clone();
    for row in values.chunks_mut(s.frames) {
        let mean = row.iter().sum::<f64>() / t;
        row.iter_mut().for_each(|v| *v -= mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / t;
        // rows that are constant up to rounding
        if var <= 1e-24 * (1.0 + mean * mean) {
            row.fill(0.0);
            continue;
        }
        let inv = 1.0 / var.sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(Spectrogram {
        values,
        frames: s.frames,
        normalized: true,
    })
}

/// Contiguous `frames`-wide slice at a uniform random offset; shorter inputs
/// are cyclically repeated.
pub fn random_crop<R: Rng + ?Sized>(s: &Spectrogram, frames: usize, rng: &mut R) -> Spectrogram {
    if s.frames <= frames {
        return s.window(0, frames);
    }
    let offset = rng.gen_range(0..=s.frames - frames);
    s.window(offset, frames)
}

/// Offsets of the ten evenly spaced test crops, rounded half-up.
pub fn ten_crop_offsets(frames: usize) -> [usize; NUM_TEST_CROPS] {
    let span = frames.saturating_sub(CROP_FRAMES);
    let steps = NUM_TEST_CROPS - 1;
    std::array::from_fn(|i| (2 * i * span + steps) / (2 * steps))
}

/// Ten [`CROP_FRAMES`]-wide crops evenly spaced over the utterance.
pub fn ten_crops(s: &Spectrogram) -> Vec<Spectrogram> {
    ten_crop_offsets(s.frames)
        .iter()
        .map(|&o| s.window(o, CROP_FRAMES))
        .collect()
}

/// Writes a spectrogram cache: magic `VXSP`, `u32` version, `u32` rows,
/// `u32` cols, then row-major little-endian `f32` values.
pub fn write_cache(mut w: impl Write, s: &Spectrogram) -> Result<(), FrontendError> {
    let mut buf = Vec::with_capacity(16 + 4 * s.values.len());
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(FREQ_BINS as u32).to_le_bytes());
    buf.extend_from_slice(&(s.frames as u32).to_le_bytes());
    for &v in &s.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_cache(mut r: impl Read) -> Result<Spectrogram, FrontendError> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)?;
    if &head[..4] != CACHE_MAGIC {
        return Err(FrontendError::Cache("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap()) as usize;
    if word(4) != CACHE_VERSION as usize {
        return Err(FrontendError::Cache(format!("unsupported version {}", word(4))));
    }
    let (rows, cols) = (word(8), word(12));
    if rows != FREQ_BINS || cols == 0 {
        return Err(FrontendError::Cache(format!("unexpected shape {rows} x {cols}")));
    }
    let mut buf = vec![0u8; rows * cols * 4];
    r.read_exact(&mut buf)?;
    let values = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Spectrogram::from_values(values, cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(frames: usize) -> Spectrogram {
        Spectrogram::from_values(
            (0..FREQ_BINS * frames).map(|i| (i % frames) as f64).collect(),
            frames,
        )
    }

    #[test]
    fn three_seconds_is_298_then_300() {
        let w = Waveform::new(vec![0.1; 48_000]);
        let s = spectrogram(&w).unwrap();
        assert_eq!((s.freq_bins(), s.frames()), (512, 298));
        let u = utterance_spectrogram(&SpectrogramPlan::default(), &w).unwrap();
        assert_eq!(u.frames(), 300);
        // reflect padding mirrors frame 1 around frame 0
        assert_eq!(u.get(10, 0), s.get(10, 1));
        assert_eq!(u.get(10, 299), s.get(10, 296));
    }

    #[test]
    fn zero_waveform_zero_spectrogram() {
        let s = spectrogram(&Waveform::new(vec![0.0; 1000])).unwrap();
        assert!(s.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_errors() {
        assert!(matches!(
            spectrogram(&Waveform::new(vec![0.0; 399])),
            Err(FrontendError::TooShort { samples: 399, needed: 400 })
        ));
        let w = Waveform {
            samples: vec![0.0; 1000],
            sample_rate_hz: 8000,
        };
        assert!(matches!(spectrogram(&w), Err(FrontendError::SampleRate(8000))));
    }

    #[test]
    fn normalize_small_rows() {
        let mut values = vec![0.0; FREQ_BINS * 2];
        values[0] = 1.0;
        values[1] = 3.0;
        let n = normalize(&Spectrogram::from_values(values, 2)).unwrap();
        assert_eq!(n.row(0), &[-1.0, 1.0]);
        assert!(n.normalized);

        let c = normalize(&Spectrogram::from_values(vec![5.0; FREQ_BINS * 3], 3)).unwrap();
        assert!(c.values().iter().all(|&v| v == 0.0));

        let single = Spectrogram::from_values(vec![1.0; FREQ_BINS], 1);
        assert!(matches!(normalize(&single), Err(FrontendError::SingleFrame)));
    }

    #[test]
    fn crops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let exact = ramp(300);
        assert_eq!(random_crop(&exact, 300, &mut rng), exact);

        let short = ramp(100);
        let c = random_crop(&short, 300, &mut rng);
        assert_eq!(c.frames(), 300);
        assert!((0..300).all(|t| c.get(7, t) == (t % 100) as f64));

        let long = ramp(600);
        let a = random_crop(&long, 300, &mut ChaCha8Rng::seed_from_u64(5));
        let b = random_crop(&long, 300, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let offset = a.get(0, 0) as usize;
        assert!(offset <= 300);
        let mut replay = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(offset, replay.gen_range(0..=300usize));
    }

    #[test]
    fn ten_crop_spacing() {
        assert_eq!(ten_crop_offsets(300), [0; 10]);
        assert_eq!(ten_crop_offsets(1200), [0, 100, 200, 300, 400, 500, 600, 700, 800, 900]);
        assert_eq!(ten_crop_offsets(310), [0, 1, 2, 3, 4, 6, 7, 8, 9, 10]);
        assert_eq!(ten_crop_offsets(120), [0; 10]);
        let crops = ten_crops(&ramp(300));
        assert_eq!(crops.len(), 10);
        assert!(crops.iter().all(|c| c == &crops[0]));
        let short = ten_crops(&ramp(50));
        assert!(short.iter().all(|c| c.frames() == 300));
    }

    #[test]
    fn cache_roundtrip_and_errors() {
        let s = Spectrogram::from_values((0..FREQ_BINS * 3).map(|i| i as f64 * 0.5).collect(), 3);
        let mut buf = Vec::new();
        write_cache(&mut buf, &s).unwrap();
        assert_eq!(&buf[..4], b"VXSP");
        assert_eq!(read_cache(buf.as_slice()).unwrap(), s);
        buf[0] = b'X';
        assert!(matches!(read_cache(buf.as_slice()), Err(FrontendError::Cache(_))));
    }

    #[test]
    fn wav_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new((0..800).map(|i| ((i as f64) * 0.01).sin() * 0.5).collect());
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.samples.len(), 800);
        for (a, b) in back.samples.iter().zip(&w.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }
}
