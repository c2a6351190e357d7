use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{BandDefinition, STD_GUARD};
use crate::diffengine::Tensor;
use crate::error::{Error, Result};

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    thread_local! {
        static PLANNER: std::cell::RefCell<FftPlanner<f64>> = std::cell::RefCell::new(FftPlanner::new());
    }
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

fn spectrum(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    plan(x.len(), false).process(&mut buf);
    buf
}

/// Bins `k` in `1..=W/2` whose frequency `k * rate / W` lies in `[low, high)`.
/// The DC bin is never retained.
pub fn band_bins(band: &BandDefinition, rate: f64, window: usize) -> Result<Vec<usize>> {
    let bins: Vec<usize> = (1..=window / 2)
        .filter(|&k| {
            let f = k as f64 * rate / window as f64;
            f >= band.low_hz && f < band.high_hz
        })
        .collect();
    if bins.is_empty() {
        return Err(Error::EmptyBand {
            band: band.band.name().to_string(),
            rate_hz: rate,
            window,
        });
    }
    Ok(bins)
}

/// `[N, W]` window to `[N, d]` in-band DFT magnitudes, scaled by `1/sqrt(W)`
/// (unitary transform, so a white unit-variance channel has unit mean power per bin).
pub fn spectral_features(window: &Tensor, band: &BandDefinition, rate: f64) -> Result<Tensor> {
    let (n, w) = matrix_dims(window)?;
    if w < 8 {
        return Err(Error::Contract(format!("window of {w} samples, need at least 8")));
    }
    let bins = band_bins(band, rate, w)?;
    let scale = 1.0 / (w as f64).sqrt();
    let mut out = Vec::with_capacity(n * bins.len());
    for c in 0..n {
        let spec = spectrum(window.row(c));
        out.extend(bins.iter().map(|&k| spec[k].norm() * scale));
    }
    Tensor::new(vec![n, bins.len()], out)
}

/// Inverse transform of only the given positive-frequency bins (and their mirrors).
pub fn band_limited(window: &Tensor, bins: &[usize]) -> Result<Tensor> {
    let (n, w) = matrix_dims(window)?;
    let mut keep = vec![false; w];
    for &k in bins {
        keep[k] = true;
        keep[(w - k) % w] = true;
    }
    let inverse = plan(w, true);
    let mut out = Vec::with_capacity(n * w);
    for c in 0..n {
        let mut spec = spectrum(window.row(c));
        for (k, z) in spec.iter_mut().enumerate() {
            if !keep[k] {
                *z = Complex64::new(0.0, 0.0);
            }
        }
        inverse.process(&mut spec);
        out.extend(spec.iter().map(|z| z.re / w as f64));
    }
    Tensor::new(vec![n, w], out)
}

/// Magnitude of the analytic signal of each row.
pub fn envelope(window: &Tensor) -> Result<Tensor> {
    let (n, w) = matrix_dims(window)?;
    let inverse = plan(w, true);
    let mut out = Vec::with_capacity(n * w);
    for c in 0..n {
        let mut spec = spectrum(window.row(c));
        for (k, z) in spec.iter_mut().enumerate() {
            let weight = if k == 0 || (w % 2 == 0 && k == w / 2) {
                1.0
            } else if k < (w + 1) / 2 {
                2.0
            } else {
                0.0
            };
            *z *= weight;
        }
        inverse.process(&mut spec);
        out.extend(spec.iter().map(|z| z.norm() / w as f64));
    }
    Tensor::new(vec![n, w], out)
}

/// `|Pearson(x_i, x_j)|` off the diagonal, zero on it; zero-variance channels give 0.
pub fn amplitude_correlation(window: &Tensor) -> Tensor {
    let (n, w) = matrix_dims(window).expect("amplitude_correlation takes a matrix");
    let centered: Vec<Option<Vec<f64>>> = (0..n)
        .map(|c| {
            let row = window.row(c);
            let mean = row.iter().sum::<f64>() / w as f64;
            let dev: Vec<f64> = row.iter().map(|v| v - mean).collect();
            let norm = dev.iter().map(|v| v * v).sum::<f64>().sqrt();
            // population std = norm / sqrt(w)
            (norm / (w as f64).sqrt() >= STD_GUARD).then(|| dev.iter().map(|v| v / norm).collect())
        })
        .collect();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            if let (Some(a), Some(b)) = (&centered[i], &centered[j]) {
                let r = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().abs().min(1.0);
                out.set(&[i, j], r);
                out.set(&[j, i], r);
            }
        }
    }
    out
}

fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, w] => Ok((*n, *w)),
        s => Err(Error::Shape(format!("expected a [channels, samples] matrix, got {s:?}"))),
    }
}
