//! Mel filterbank and short-time power spectra.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, peak height 1, `[n_mels, n_fft/2 + 1]`.
pub fn mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    sample_rate: f64,
    fmin: f64,
    fmax: f64,
) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let mel_lo = hz_to_mel(fmin);
    let mel_hi = hz_to_mel(fmax);
    // n_mels + 2 edge points, mel-uniform.
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate / n_fft as f64;
            let w = if f >= lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f <= hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            fb[[m, k]] = w.max(0.0);
        }
    }
    fb
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Framewise power spectra: `[T, n_fft/2 + 1]` for hop-spaced windows
/// (no padding; the last partial window is dropped).
pub fn power_spectrogram(
    samples: &[f32],
    window: &[f64],
    hop: usize,
    n_fft: usize,
) -> Array2<f64> {
    let win_len = window.len();
    let t_frames = if samples.len() < win_len {
        0
    } else {
        (samples.len() - win_len) / hop + 1
    };
    let n_bins = n_fft / 2 + 1;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut out = Array2::zeros((t_frames, n_bins));
    let mut buf = vec![Complex::new(0.0f64, 0.0); n_fft];
    for t in 0..t_frames {
        for v in buf.iter_mut() {
            *v = Complex::new(0.0, 0.0);
        }
        let start = t * hop;
        for i in 0..win_len {
            buf[i] = Complex::new(samples[start + i] as f64 * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            out[[t, k]] = buf[k].norm_sqr();
        }
    }
    out
}
