//! Recordings and their conversion into dynamic graph sequences: per-window
//! spectral node features and absolute-Pearson adjacency.

pub mod io;
pub mod spectral;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffengine::Tensor;
use crate::error::{Error, Result};

pub use spectral::{amplitude_correlation, band_bins, band_limited, envelope, spectral_features};

/// Standard deviations below this are treated as a constant channel.
pub const STD_GUARD: f64 = 1e-12;

/// One subject's multichannel signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub channels: Vec<String>,
    /// `channels.len()` rows of equal length.
    pub samples: Vec<Vec<f64>>,
    pub sample_rate_hz: f64,
    pub label: usize,
}

impl Recording {
    pub fn n_channels(&self) -> usize {
        self.samples.len()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    /// Checks the structural invariants; `n_classes` bounds the label when given.
    pub fn validate(&self, n_classes: Option<usize>) -> Result<()> {
        if self.samples.len() < 2 {
            return Err(Error::Validation(format!(
                "recording '{}' has {} channel(s), need at least 2",
                self.subject_id,
                self.samples.len()
            )));
        }
        if self.channels.len() != self.samples.len() {
            return Err(Error::Validation("channel names do not match channel count".into()));
        }
        let len = self.n_samples();
        if len == 0 || self.samples.iter().any(|c| c.len() != len) {
            return Err(Error::Validation("channels must be non-empty and equally long".into()));
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(Error::Validation(format!("sample rate {} Hz", self.sample_rate_hz)));
        }
        if let Some(c) = n_classes {
            if self.label >= c {
                return Err(Error::Validation(format!("label {} >= {c} classes", self.label)));
            }
        }
        if self.samples.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Validation("non-finite sample".into()));
        }
        Ok(())
    }
}

pub fn default_channel_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("C{i}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowingSpec {
    pub window_samples: usize,
    pub stride_samples: usize,
}

impl WindowingSpec {
    pub fn new(window_samples: usize, stride_samples: usize) -> Result<Self> {
        let spec = WindowingSpec {
            window_samples,
            stride_samples,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// One-second windows with 50% overlap.
    pub fn for_rate(sample_rate_hz: f64) -> Result<Self> {
        let window = sample_rate_hz.round() as usize;
        Self::new(window, (window / 2).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_samples < 8 {
            return Err(Error::Config(format!(
                "window of {} samples, need at least 8",
                self.window_samples
            )));
        }
        if self.stride_samples == 0 || self.stride_samples > self.window_samples {
            return Err(Error::Config(format!(
                "stride {} must be in 1..={}",
                self.stride_samples, self.window_samples
            )));
        }
        Ok(())
    }

    /// `floor((len - window) / stride) + 1`, or `None` when `len < window`.
    pub fn n_windows(&self, len: usize) -> Option<usize> {
        (len >= self.window_samples).then(|| (len - self.window_samples) / self.stride_samples + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Delta,
    Theta,
    Alpha,
    Beta,
    Gamma,
    Broadband,
}

impl Band {
    pub const ALL: [Band; 6] = [
        Band::Delta,
        Band::Theta,
        Band::Alpha,
        Band::Beta,
        Band::Gamma,
        Band::Broadband,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Band::Delta => "delta",
            Band::Theta => "theta",
            Band::Alpha => "alpha",
            Band::Beta => "beta",
            Band::Gamma => "gamma",
            Band::Broadband => "broadband",
        }
    }

    /// Clinical band edges in Hz, `[low, high)`.
    pub fn edges(self) -> (f64, f64) {
        match self {
            Band::Delta => (0.5, 4.0),
            Band::Theta => (4.0, 8.0),
            Band::Alpha => (8.0, 13.0),
            Band::Beta => (13.0, 30.0),
            Band::Gamma => (30.0, 45.0),
            Band::Broadband => (0.5, 45.0),
        }
    }

    pub fn definition(self) -> BandDefinition {
        let (low_hz, high_hz) = self.edges();
        BandDefinition {
            band: self,
            low_hz,
            high_hz,
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Band::ALL
            .into_iter()
            .find(|b| b.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown band '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandDefinition {
    pub band: Band,
    pub low_hz: f64,
    pub high_hz: f64,
}

impl BandDefinition {
    pub fn new(band: Band, low_hz: f64, high_hz: f64) -> Result<Self> {
        if !(0.0 <= low_hz && low_hz < high_hz) {
            return Err(Error::Config(format!("band [{low_hz}, {high_hz}) is empty")));
        }
        Ok(BandDefinition {
            band,
            low_hz,
            high_hz,
        })
    }
}

/// Which signal the edge stream correlates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmplitudeKind {
    /// The (band-limited) z-scored window itself.
    #[default]
    Raw,
    /// Magnitude of the analytic signal.
    Envelope,
}

impl fmt::Display for AmplitudeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AmplitudeKind::Raw => "raw",
            AmplitudeKind::Envelope => "envelope",
        })
    }
}

impl FromStr for AmplitudeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "raw" => Ok(AmplitudeKind::Raw),
            "envelope" => Ok(AmplitudeKind::Envelope),
            _ => Err(Error::Config(format!("unknown amplitude kind '{s}' (raw|envelope)"))),
        }
    }
}

/// What a node token carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeFeatureKind {
    /// Orthonormal DFT magnitudes of the in-band bins.
    #[default]
    Spectral,
    /// The windowed time samples.
    RawSamples,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceOptions {
    pub node_features: NodeFeatureKind,
    pub amplitude: AmplitudeKind,
}

impl Default for SequenceOptions {
    fn default() -> Self {
        SequenceOptions {
            node_features: NodeFeatureKind::Spectral,
            amplitude: AmplitudeKind::Raw,
        }
    }
}

/// Per-window node features `[T, N, d]` and adjacency `[T, N, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicGraphSequence {
    pub node_features: Tensor,
    pub adjacency: Tensor,
    pub band: Band,
}

impl DynamicGraphSequence {
    pub fn n_windows(&self) -> usize {
        self.adjacency.shape()[0]
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.shape()[2]
    }

    /// Reorders channels: new channel `k` is old channel `perm[k]`.
    pub fn permute_channels(&self, perm: &[usize]) -> DynamicGraphSequence {
        let (t, n, d) = (self.n_windows(), self.n_nodes(), self.feature_dim());
        let mut x = Tensor::zeros(&[t, n, d]);
        let mut a = Tensor::zeros(&[t, n, n]);
        for w in 0..t {
            for (k, &src) in perm.iter().enumerate() {
                for f in 0..d {
                    x.set(&[w, k, f], self.node_features.at(&[w, src, f]));
                }
                for (l, &src2) in perm.iter().enumerate() {
                    a.set(&[w, k, l], self.adjacency.at(&[w, src, src2]));
                }
            }
        }
        DynamicGraphSequence {
            node_features: x,
            adjacency: a,
            band: self.band,
        }
    }
}

/// Mean 0 and population standard deviation 1 per channel; constant channels become zeros.
pub fn zscore_channels(rec: &Recording) -> Recording {
    let samples = rec.samples.iter().map(|c| zscore(c)).collect();
    Recording {
        samples,
        ..rec.clone()
    }
}

pub(crate) fn zscore(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < STD_GUARD {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - mean) / std).collect()
}

/// Splits into `[N, window]` matrices; trailing samples that do not fill a window are dropped.
pub fn segment_windows(rec: &Recording, spec: &WindowingSpec) -> Result<Vec<Tensor>> {
    spec.validate()?;
    let len = rec.n_samples();
    let t = spec.n_windows(len).ok_or_else(|| {
        Error::InsufficientData(format!(
            "{len} samples cannot fill a {}-sample window",
            spec.window_samples
        ))
    })?;
    let w = spec.window_samples;
    (0..t)
        .map(|k| {
            let start = k * spec.stride_samples;
            let data = rec
                .samples
                .iter()
                .flat_map(|c| c[start..start + w].iter().copied())
                .collect();
            Tensor::new(vec![rec.n_channels(), w], data)
        })
        .collect()
}

pub fn build_sequence(
    rec: &Recording,
    spec: &WindowingSpec,
    band: &BandDefinition,
) -> Result<DynamicGraphSequence> {
    build_sequence_with(rec, spec, band, &SequenceOptions::default())
}

/// z-score, window, then per-window node features and adjacency.
///
/// Non-broadband runs correlate the band-limited reconstruction of each window.
pub fn build_sequence_with(
    rec: &Recording,
    spec: &WindowingSpec,
    band: &BandDefinition,
    opts: &SequenceOptions,
) -> Result<DynamicGraphSequence> {
    rec.validate(None)?;
    let rate = rec.sample_rate_hz;
    let z = zscore_channels(rec);
    let windows = segment_windows(&z, spec)?;
    let n = rec.n_channels();
    let w = spec.window_samples;
    let bins = band_bins(band, rate, w)?;
    let d = match opts.node_features {
        NodeFeatureKind::Spectral => bins.len(),
        NodeFeatureKind::RawSamples => w,
    };
    let t = windows.len();
    let mut x = Vec::with_capacity(t * n * d);
    let mut a = Vec::with_capacity(t * n * n);
    for win in &windows {
        let limited = if band.band == Band::Broadband {
            win.clone()
        } else {
            band_limited(win, &bins)?
        };
        match opts.node_features {
            NodeFeatureKind::Spectral => x.extend_from_slice(spectral_features(win, band, rate)?.data()),
            NodeFeatureKind::RawSamples => x.extend_from_slice(limited.data()),
        }
        let amp = match opts.amplitude {
            AmplitudeKind::Raw => limited,
            AmplitudeKind::Envelope => envelope(&limited)?,
        };
        a.extend_from_slice(amplitude_correlation(&amp).data());
    }
    Ok(DynamicGraphSequence {
        node_features: Tensor::new(vec![t, n, d], x)?,
        adjacency: Tensor::new(vec![t, n, n], a)?,
        band: band.band,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(samples: Vec<Vec<f64>>, rate: f64) -> Recording {
        Recording {
            subject_id: "s".into(),
            channels: default_channel_names(samples.len()),
            samples,
            sample_rate_hz: rate,
            label: 0,
        }
    }

    #[test]
    fn zscore_examples() {
        assert_eq!(zscore(&[5.0, 5.0, 5.0, 5.0]), vec![0.0; 4]);
        assert_eq!(zscore(&[1.0, -1.0, 1.0, -1.0]), vec![1.0, -1.0, 1.0, -1.0]);
        let z = zscore(&[0.0, 2.0, 4.0]);
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in z.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn window_counts() {
        let spec = WindowingSpec::new(250, 125).unwrap();
        assert_eq!(spec.n_windows(1000), Some(7));
        assert_eq!(spec.n_windows(250), Some(1));
        assert_eq!(spec.n_windows(249), None);
        let short = rec(vec![vec![0.0; 249], vec![1.0; 249]], 250.0);
        assert!(matches!(segment_windows(&short, &spec), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn windowing_spec_validation() {
        assert!(WindowingSpec::new(7, 2).is_err());
        assert!(WindowingSpec::new(16, 17).is_err());
        assert!(WindowingSpec::new(16, 0).is_err());
        assert_eq!(WindowingSpec::for_rate(100.0).unwrap(), WindowingSpec::new(100, 50).unwrap());
    }

    #[test]
    fn identical_channels_are_fully_connected() {
        let x: Vec<f64> = (0..400).map(|i| (i as f64 * 0.37).sin() + (i as f64 * 0.05).cos()).collect();
        let r = rec(vec![x.clone(), x], 100.0);
        let seq = build_sequence(&r, &WindowingSpec::new(100, 50).unwrap(), &Band::Broadband.definition()).unwrap();
        for t in 0..seq.n_windows() {
            assert_eq!(seq.adjacency.at(&[t, 0, 0]), 0.0);
            assert!((seq.adjacency.at(&[t, 0, 1]) - 1.0).abs() < 1e-12);
            assert_eq!(seq.adjacency.at(&[t, 0, 1]), seq.adjacency.at(&[t, 1, 0]));
        }
    }

    #[test]
    fn sequence_shape_composition() {
        let samples: Vec<Vec<f64>> = (0..4)
            .map(|c| (0..1000).map(|i| ((i * (c + 3)) as f64 * 0.01).sin()).collect())
            .collect();
        let r = rec(samples, 250.0);
        let seq = build_sequence(&r, &WindowingSpec::new(250, 125).unwrap(), &Band::Broadband.definition()).unwrap();
        assert_eq!(seq.adjacency.shape(), &[7, 4, 4]);
        // bins k with k*250/250 Hz in [0.5, 45)
        assert_eq!(seq.node_features.shape(), &[7, 4, 44]);
    }

    #[test]
    fn gamma_band_bin_count() {
        let samples: Vec<Vec<f64>> = (0..2)
            .map(|c| (0..300).map(|i| ((i * (c + 2)) as f64 * 0.3).sin()).collect())
            .collect();
        let r = rec(samples, 100.0);
        let spec = WindowingSpec::new(100, 50).unwrap();
        let seq = build_sequence(&r, &spec, &Band::Gamma.definition()).unwrap();
        // bin k has frequency k * 100 / 100 Hz, so [30, 45) keeps k = 30..=44
        assert_eq!(seq.feature_dim(), 15);
        assert_eq!(seq.band, Band::Gamma);
    }

    #[test]
    fn raw_sample_node_features() {
        let samples: Vec<Vec<f64>> = (0..3)
            .map(|c| (0..200).map(|i| ((i + c) as f64 * 0.7).sin()).collect())
            .collect();
        let r = rec(samples, 50.0);
        let opts = SequenceOptions {
            node_features: NodeFeatureKind::RawSamples,
            ..Default::default()
        };
        let seq = build_sequence_with(&r, &WindowingSpec::new(50, 25).unwrap(), &Band::Broadband.definition(), &opts)
            .unwrap();
        assert_eq!(seq.feature_dim(), 50);
    }

    #[test]
    fn band_parsing() {
        assert_eq!("Alpha".parse::<Band>().unwrap(), Band::Alpha);
        assert!("kappa".parse::<Band>().is_err());
    }

    #[test]
    fn single_channel_rejected() {
        let r = rec(vec![vec![0.0; 10]], 10.0);
        assert!(matches!(r.validate(None), Err(Error::Validation(_))));
    }
}
