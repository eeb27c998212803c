//! Raw-input preprocessing for the modality tokenizers: image patchify and
//! magnitude spectrograms. These run outside the autograd graph since raw
//! inputs carry no parameters.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Splits `[batch × h × w × c]` images into non-overlapping `p × p`
/// patches, returning `[batch × patches × p·p·c]` in row-major patch order.
pub fn patchify(images: &[f64], batch: usize, h: usize, w: usize, c: usize, p: usize) -> Result<Vec<f64>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::Tensor(mpsl_tensor::TensorError::InvalidShape {
            op: "patchify",
            msg: format!("{h}×{w} is not divisible into {p}×{p} patches"),
        }));
    }
    if images.len() != batch * h * w * c {
        return Err(Error::Data(format!(
            "expected {batch}×{h}×{w}×{c} image values, got {}",
            images.len()
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(images.len());
    for b in 0..batch {
        let img = &images[b * h * w * c..(b + 1) * h * w * c];
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..p {
                    let row = (py * p + y) * w + px * p;
                    out.extend_from_slice(&img[row * c..(row + p) * c]);
                }
            }
        }
    }
    Ok(out)
}

/// Magnitude spectrogram laid out as a `[bins × frames_padded]` image:
/// Hann-windowed frames of `frame` samples every `hop`, bins `0..frame/2`,
/// time axis zero-padded to `frames_padded`.
pub struct Spectrogram {
    frame: usize,
    hop: usize,
    window: Vec<f64>,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl Spectrogram {
    pub fn new(frame: usize, hop: usize) -> Self {
        let window = (0..frame)
            .map(|t| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * t as f64 / frame as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(frame);
        Self { frame, hop, window, fft }
    }

    pub fn bins(&self) -> usize {
        self.frame / 2
    }

    pub fn frames(&self, len: usize) -> usize {
        if len < self.frame {
            0
        } else {
            1 + (len - self.frame) / self.hop
        }
    }

    pub fn compute(&self, signal: &[f64], frames_padded: usize) -> Result<Vec<f64>> {
        let frames = self.frames(signal.len());
        if frames == 0 {
            return Err(Error::Data(format!(
                "audio signal of {} samples is shorter than one {}-sample frame",
                signal.len(),
                self.frame
            )));
        }
        if frames > frames_padded {
            return Err(Error::Data(format!("{frames} frames exceed the padded width {frames_padded}")));
        }
        let bins = self.bins();
        let mut out = vec![0.0; bins * frames_padded];
        let mut buf = vec![Complex::new(0.0, 0.0); self.frame];
        for f in 0..frames {
            let start = f * self.hop;
            for (t, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(signal[start + t] * self.window[t], 0.0);
            }
            self.fft.process(&mut buf);
            for k in 0..bins {
                out[k * frames_padded + f] = buf[k].norm();
            }
        }
        Ok(out)
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_order_is_row_major() {
        // 1 image, 4×4, 1 channel, values 0..16; patch 2.
        let img: Vec<f64> = (0..16).map(f64::from).collect();
        let out = patchify(&img, 1, 4, 4, 1, 2).unwrap();
        assert_eq!(&out[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&out[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&out[12..16], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn patchify_rejects_indivisible() {
        assert!(patchify(&[0.0; 25], 1, 5, 5, 1, 2).is_err());
    }

    #[test]
    fn short_signal_is_a_data_error() {
        let s = Spectrogram::new(64, 32);
        assert!(matches!(s.compute(&[0.0; 63], 4), Err(Error::Data(_))));
    }

    fn brute_force(signal: &[f64], window: &[f64], frame: usize, hop: usize, padded: usize) -> Vec<f64> {
        let frames = 1 + (signal.len() - frame) / hop;
        let bins = frame / 2;
        let mut out = vec![0.0; bins * padded];
        for f in 0..frames {
            for k in 0..bins {
                let (mut re, mut im) = (0.0, 0.0);
                for t in 0..frame {
                    let x = signal[f * hop + t] * window[t];
                    let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / frame as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                out[k * padded + f] = (re * re + im * im).sqrt();
            }
        }
        out
    }

    #[test]
    fn impulse_matches_direct_dft() {
        let s = Spectrogram::new(64, 32);
        let mut signal = vec![0.0; 256];
        signal[77] = 1.0;
        let fast = s.compute(&signal, 8).unwrap();
        let slow = brute_force(&signal, s.window(), 64, 32, 8);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn sinusoid_concentrates_in_its_bin() {
        let s = Spectrogram::new(64, 32);
        let k = 5;
        let signal: Vec<f64> = (0..256)
            .map(|t| (2.0 * std::f64::consts::PI * k as f64 * t as f64 / 64.0).sin())
            .collect();
        let spec = s.compute(&signal, 8).unwrap();
        for f in 0..7 {
            let col: Vec<f64> = (0..32).map(|b| spec[b * 8 + f]).collect();
            let peak = col.iter().cloned().enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
            assert_eq!(peak, k);
            for (b, v) in col.iter().enumerate() {
                if b.abs_diff(k) > 1 {
                    assert!(*v < 1e-9, "bin {b} leaked {v}");
                }
            }
        }
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram() {
        let s = Spectrogram::new(64, 32);
        assert!(s.compute(&[0.0; 128], 4).unwrap().iter().all(|v| *v == 0.0));
    }
}
