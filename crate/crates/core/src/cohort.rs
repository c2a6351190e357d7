//! Synthetic cohorts with planted class-specific connectivity, additive noise,
//! and stratified subject-level splits.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::io::{load_recording, save_recording, Manifest, ManifestEntry, Split};
use crate::signal::{default_channel_names, zscore_channels, Recording};
use crate::streams::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedEdge {
    pub i: usize,
    pub j: usize,
    /// Weight of the shared latent in both channels, in (0, 1].
    pub coupling: f64,
}

/// Per-channel background rhythms of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandProfile {
    pub rhythm_freqs_hz: Vec<f64>,
    pub rhythm_amplitudes: Vec<f64>,
}

impl BandProfile {
    pub fn uniform(freqs: &[f64], amplitude: f64) -> BandProfile {
        BandProfile {
            rhythm_freqs_hz: freqs.to_vec(),
            rhythm_amplitudes: vec![amplitude; freqs.len()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_channels: usize,
    pub subjects_per_class: usize,
    pub n_classes: usize,
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    /// Per class.
    pub planted: Vec<Vec<PlantedEdge>>,
    /// Per class: latent frequency of the `q`-th planted edge (cycled if shorter).
    pub latent_freqs_hz: Vec<Vec<f64>>,
    /// Per class.
    pub band_profile: Vec<BandProfile>,
    pub background_noise_std: f64,
    pub train_fraction: f64,
    /// Adds every other class's planted latents in quadrature (zero correlation),
    /// so node power spectra carry no class information and only connectivity does.
    pub quadrature_decoys: bool,
}

const DEFAULT_COUPLING: f64 = 0.8;
const JITTER: f64 = 0.1;

fn edges(pairs: &[(usize, usize)], coupling: f64) -> Vec<PlantedEdge> {
    pairs.iter().map(|&(i, j)| PlantedEdge { i, j, coupling }).collect()
}

impl Default for CohortSpec {
    /// 16 channels, 2 classes of 40 subjects, 30 s at 100 Hz, 6 disjoint planted
    /// edges per class.
    fn default() -> Self {
        let rhythms = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 15.0, 17.0, 19.0, 21.0, 23.0, 26.0, 29.0, 32.0, 36.0, 40.0];
        CohortSpec {
            n_channels: 16,
            subjects_per_class: 40,
            n_classes: 2,
            sample_rate_hz: 100.0,
            duration_s: 30.0,
            planted: vec![
                edges(&[(0, 1), (2, 3), (4, 5), (6, 7), (8, 9), (10, 11)], DEFAULT_COUPLING),
                edges(&[(1, 2), (3, 4), (5, 6), (7, 8), (12, 13), (14, 15)], DEFAULT_COUPLING),
            ],
            latent_freqs_hz: vec![
                vec![8.0, 9.0, 10.0, 11.0, 12.0, 13.0],
                vec![14.0, 16.0, 18.0, 20.0, 22.0, 24.0],
            ],
            band_profile: vec![BandProfile::uniform(&rhythms, 0.6); 2],
            background_noise_std: 0.5,
            train_fraction: 0.8,
            quadrature_decoys: false,
        }
    }
}

impl CohortSpec {
    /// Class difference confined to alpha-band latents; sampled at 50 Hz so the
    /// gamma band lies above Nyquist.
    pub fn alpha_only() -> CohortSpec {
        let rhythms = [2.0, 3.0, 5.0, 6.0, 15.0, 17.0, 20.0, 23.0];
        CohortSpec {
            n_channels: 8,
            subjects_per_class: 30,
            n_classes: 2,
            sample_rate_hz: 50.0,
            duration_s: 20.0,
            planted: vec![
                edges(&[(0, 1), (2, 3), (4, 5), (6, 7)], DEFAULT_COUPLING),
                edges(&[(1, 2), (3, 4), (5, 6), (0, 7)], DEFAULT_COUPLING),
            ],
            latent_freqs_hz: vec![vec![8.5, 9.5], vec![11.0, 12.0]],
            band_profile: vec![BandProfile::uniform(&rhythms, 0.6); 2],
            background_noise_std: 0.5,
            train_fraction: 0.8,
            quadrature_decoys: false,
        }
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if self.n_channels < 2 {
            return fail(format!("{} channels, need at least 2", self.n_channels));
        }
        if self.n_classes < 2 {
            return fail("need at least 2 classes".into());
        }
        if self.subjects_per_class < 2 {
            return fail(format!(
                "{} subject(s) per class cannot be split into train and test",
                self.subjects_per_class
            ));
        }
        if !(self.sample_rate_hz > 0.0 && self.duration_s > 0.0) || self.n_samples() == 0 {
            return fail("sample rate and duration must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(format!("train fraction {} outside (0, 1)", self.train_fraction));
        }
        if !(self.background_noise_std >= 0.0) {
            return fail("background noise must be nonnegative".into());
        }
        if self.planted.len() != self.n_classes
            || self.band_profile.len() != self.n_classes
            || self.latent_freqs_hz.len() != self.n_classes
        {
            return fail("planted edges, latent frequencies and band profiles must be given per class".into());
        }
        for (c, class_edges) in self.planted.iter().enumerate() {
            let mut seen = BTreeSet::new();
            for e in class_edges {
                if e.i == e.j || e.i >= self.n_channels || e.j >= self.n_channels {
                    return fail(format!("class {c}: invalid edge ({}, {})", e.i, e.j));
                }
                if !(e.coupling > 0.0 && e.coupling <= 1.0) {
                    return fail(format!("class {c}: coupling {} outside (0, 1]", e.coupling));
                }
                if !seen.insert((e.i.min(e.j), e.i.max(e.j))) {
                    return fail(format!("class {c}: edge ({}, {}) planted twice", e.i, e.j));
                }
            }
            let latents = self.latent_freqs_hz.get(c).map(Vec::as_slice).unwrap_or(&[]);
            if !class_edges.is_empty() && latents.is_empty() {
                return fail(format!("class {c}: planted edges need latent frequencies"));
            }
            if latents.iter().any(|&f| !(f > 0.0)) {
                return fail(format!("class {c}: latent frequencies must be positive"));
            }
        }
        for (c, p) in self.band_profile.iter().enumerate() {
            if p.rhythm_freqs_hz.len() != self.n_channels || p.rhythm_amplitudes.len() != self.n_channels {
                return fail(format!("class {c}: band profile needs one rhythm per channel"));
            }
            if p.rhythm_freqs_hz.iter().any(|&f| !(f > 0.0)) || p.rhythm_amplitudes.iter().any(|&a| !(a >= 0.0)) {
                return fail(format!("class {c}: rhythm frequencies must be positive, amplitudes nonnegative"));
            }
        }
        for a in 0..self.n_classes {
            for b in a + 1..self.n_classes {
                if self.planted_set(a) == self.planted_set(b)
                    && self.band_profile[a] == self.band_profile[b]
                    && self.latent_freqs_hz[a] == self.latent_freqs_hz[b]
                {
                    return fail(format!("classes {a} and {b} are indistinguishable"));
                }
            }
        }
        Ok(())
    }

    fn planted_set(&self, class: usize) -> BTreeSet<(usize, usize, u64)> {
        self.planted[class]
            .iter()
            .map(|e| (e.i.min(e.j), e.i.max(e.j), e.coupling.to_bits()))
            .collect()
    }

    /// Ground-truth unordered pairs `(i, j)`, `i < j`, per class.
    pub fn ground_truth(&self) -> BTreeMap<usize, Vec<(usize, usize)>> {
        self.planted
            .iter()
            .enumerate()
            .map(|(c, es)| (c, es.iter().map(|e| (e.i.min(e.j), e.i.max(e.j))).collect()))
            .collect()
    }
}

/// Recordings with labels, split assignment and planted ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCohort {
    pub n_classes: usize,
    pub sample_rate_hz: f64,
    pub channels: Vec<String>,
    pub recordings: Vec<Recording>,
    pub splits: Vec<Split>,
    pub planted: BTreeMap<usize, Vec<(usize, usize)>>,
}

/// Uniform on (0, 1].
fn unit_open_low(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) + 1) as f64 / (1u64 << 53) as f64
}

/// Standard normal draws by the Box–Muller transform.
pub fn gaussian(rng: &mut impl RngCore, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let r = (-2.0 * unit_open_low(rng).ln()).sqrt();
        let theta = 2.0 * PI * unit_open_low(rng);
        out.push(r * theta.cos());
        out.push(r * theta.sin());
    }
    out.truncate(n);
    out
}

fn add_sinusoid(x: &mut [f64], amplitude: f64, freq: f64, phase: f64, rate: f64) {
    for (t, v) in x.iter_mut().enumerate() {
        *v += amplitude * (2.0 * PI * freq * t as f64 / rate + phase).sin();
    }
}

fn subject_id(class: usize, index: usize) -> String {
    format!("c{class}-s{index:03}")
}

fn generate_subject(spec: &CohortSpec, class: usize, index: usize, seed: u64) -> Recording {
    let n = spec.n_channels;
    let len = spec.n_samples();
    let rate = spec.sample_rate_hz;
    let mut rng = streams::stream(seed, &[tag::SUBJECT, class as u64, index as u64]);
    let jittered = |amplitude: f64, rng: &mut rand_chacha::ChaCha8Rng| {
        let phase = rng.gen_range(0.0..2.0 * PI);
        (amplitude * rng.gen_range(1.0 - JITTER..=1.0 + JITTER), phase)
    };

    let profile = &spec.band_profile[class];
    let mut samples = vec![vec![0.0; len]; n];
    for (ch, x) in samples.iter_mut().enumerate() {
        let (amp, phase) = jittered(profile.rhythm_amplitudes[ch], &mut rng);
        add_sinusoid(x, amp, profile.rhythm_freqs_hz[ch], phase, rate);
    }
    let own = spec.ground_truth().remove(&class).unwrap_or_default();
    for (c, class_edges) in spec.planted.iter().enumerate() {
        let latents = &spec.latent_freqs_hz[c];
        for (q, e) in class_edges.iter().enumerate() {
            let lag = if c == class {
                0.0
            } else if spec.quadrature_decoys && !own.contains(&(e.i.min(e.j), e.i.max(e.j))) {
                PI / 2.0
            } else {
                continue;
            };
            let freq = latents[q % latents.len()];
            let (amp, phase) = jittered(e.coupling, &mut rng);
            add_sinusoid(&mut samples[e.i], amp, freq, phase, rate);
            add_sinusoid(&mut samples[e.j], amp, freq, phase + lag, rate);
        }
    }
    if spec.background_noise_std > 0.0 {
        for (ch, x) in samples.iter_mut().enumerate() {
            let mut noise_rng = streams::stream(seed, &[tag::SUBJECT, class as u64, index as u64, tag::NOISE, ch as u64]);
            for (v, g) in x.iter_mut().zip(gaussian(&mut noise_rng, len)) {
                *v += spec.background_noise_std * g;
            }
        }
    }
    Recording {
        subject_id: subject_id(class, index),
        channels: default_channel_names(n),
        samples,
        sample_rate_hz: rate,
        label: class,
    }
}

/// Deterministic in `(spec, seed)`; subjects are split with `spec.train_fraction`.
pub fn generate_cohort(spec: &CohortSpec, seed: u64) -> Result<LabeledCohort> {
    spec.validate()?;
    let recordings: Vec<Recording> = (0..spec.n_classes)
        .flat_map(|c| (0..spec.subjects_per_class).map(move |s| (c, s)))
        .map(|(c, s)| generate_subject(spec, c, s, seed))
        .collect();
    let cohort = LabeledCohort {
        n_classes: spec.n_classes,
        sample_rate_hz: spec.sample_rate_hz,
        channels: default_channel_names(spec.n_channels),
        splits: vec![Split::Train; recordings.len()],
        recordings,
        planted: spec.ground_truth(),
    };
    subject_split(&cohort, spec.train_fraction, seed)
}

/// Adds `N(0, sigma²)` noise to the z-scored recording; `sigma = 0` returns it unchanged.
///
/// Each channel's noise is keyed by subject id and channel name.
pub fn add_noise(rec: &Recording, sigma: f64, seed: u64) -> Result<Recording> {
    if !(sigma >= 0.0) {
        return Err(Error::Validation(format!("noise sigma {sigma} must be nonnegative")));
    }
    if sigma == 0.0 {
        return Ok(rec.clone());
    }
    let mut out = zscore_channels(rec);
    let subject = streams::text_key(&rec.subject_id);
    for (name, x) in out.channels.iter().zip(out.samples.iter_mut()) {
        let mut rng = streams::stream(seed, &[tag::NOISE, subject, streams::text_key(name)]);
        for (v, g) in x.iter_mut().zip(gaussian(&mut rng, rec.n_samples())) {
            *v += sigma * g;
        }
    }
    Ok(out)
}

/// Stratified split: `floor(fraction · n_c)` train subjects per class.
pub fn subject_split(cohort: &LabeledCohort, train_fraction: f64, seed: u64) -> Result<LabeledCohort> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Validation(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut splits = vec![Split::Test; cohort.recordings.len()];
    for class in 0..cohort.n_classes {
        let mut members: Vec<usize> = (0..cohort.recordings.len())
            .filter(|&k| cohort.recordings[k].label == class)
            .collect();
        if members.len() < 2 {
            return Err(Error::Validation(format!(
                "class {class} has {} subject(s), need at least 2",
                members.len()
            )));
        }
        let n_train = (train_fraction * members.len() as f64).floor() as usize;
        if n_train == 0 || n_train == members.len() {
            return Err(Error::Validation(format!(
                "fraction {train_fraction} leaves class {class} without train or test subjects"
            )));
        }
        members.shuffle(&mut streams::stream(seed, &[tag::SPLIT, class as u64]));
        for &k in &members[..n_train] {
            splits[k] = Split::Train;
        }
    }
    Ok(LabeledCohort {
        splits,
        ..cohort.clone()
    })
}

impl LabeledCohort {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.recordings.len()).filter(|&k| self.splits[k] == split).collect()
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn planted_for(&self, label: usize) -> Option<&[(usize, usize)]> {
        self.planted.get(&label).map(Vec::as_slice)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            n_classes: self.n_classes,
            sample_rate_hz: self.sample_rate_hz,
            channels: self.channels.clone(),
            subjects: self
                .recordings
                .iter()
                .zip(&self.splits)
                .map(|(r, &split)| ManifestEntry {
                    subject_id: r.subject_id.clone(),
                    path: PathBuf::from(format!("{}.sgrc", r.subject_id)),
                    label: r.label,
                    split,
                })
                .collect(),
            planted: self.planted.iter().map(|(c, e)| (c.to_string(), e.clone())).collect(),
        }
    }

    /// Writes one recording file per subject plus the manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = self.manifest();
        for (rec, entry) in self.recordings.iter().zip(&manifest.subjects) {
            save_recording(rec, &dir.join(&entry.path))?;
        }
        manifest.save(dir)
    }

    pub fn load(dir: &Path) -> Result<LabeledCohort> {
        let manifest = Manifest::load(dir)?;
        let mut recordings = Vec::with_capacity(manifest.subjects.len());
        for entry in &manifest.subjects {
            let mut rec = load_recording(&dir.join(&entry.path))?;
            if rec.n_channels() != manifest.channels.len() {
                return Err(Error::Validation(format!(
                    "{} has {} channels, manifest lists {}",
                    entry.path.display(),
                    rec.n_channels(),
                    manifest.channels.len()
                )));
            }
            rec.subject_id = entry.subject_id.clone();
            rec.channels = manifest.channels.clone();
            rec.label = entry.label;
            rec.validate(Some(manifest.n_classes))?;
            recordings.push(rec);
        }
        let mut planted = BTreeMap::new();
        for (key, pairs) in &manifest.planted {
            let class: usize = key
                .parse()
                .map_err(|_| Error::Format(format!("planted key '{key}' is not a class index")))?;
            planted.insert(class, pairs.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect());
        }
        Ok(LabeledCohort {
            n_classes: manifest.n_classes,
            sample_rate_hz: manifest.sample_rate_hz,
            channels: manifest.channels,
            splits: manifest.subjects.iter().map(|e| e.split).collect(),
            recordings,
            planted,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CohortSpec {
        CohortSpec {
            subjects_per_class: 5,
            duration_s: 4.0,
            ..CohortSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_cohort(&small_spec(), 3).unwrap();
        let b = generate_cohort(&small_spec(), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(&small_spec(), 4).unwrap();
        assert_ne!(a.recordings[0].samples, c.recordings[0].samples);
    }

    #[test]
    fn split_counts() {
        let spec = CohortSpec {
            duration_s: 1.0,
            ..CohortSpec::default()
        };
        let cohort = generate_cohort(&spec, 1).unwrap();
        for class in 0..2 {
            let train = cohort
                .indices(Split::Train)
                .into_iter()
                .filter(|&k| cohort.recordings[k].label == class)
                .count();
            let test = cohort
                .indices(Split::Test)
                .into_iter()
                .filter(|&k| cohort.recordings[k].label == class)
                .count();
            assert_eq!((train, test), (32, 8));
        }
        assert_eq!(subject_split(&cohort, 0.8, 9).unwrap(), subject_split(&cohort, 0.8, 9).unwrap());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let one = CohortSpec {
            subjects_per_class: 1,
            ..small_spec()
        };
        assert!(matches!(generate_cohort(&one, 1), Err(Error::Validation(_))));
        let mut dup = small_spec();
        dup.planted[0].push(PlantedEdge { i: 1, j: 0, coupling: 0.5 });
        assert!(dup.validate().is_err());
        let mut same = small_spec();
        same.planted[1] = same.planted[0].clone();
        same.latent_freqs_hz[1] = same.latent_freqs_hz[0].clone();
        assert!(same.validate().is_err());
        let mut strong = small_spec();
        strong.planted[0][0].coupling = 1.5;
        assert!(strong.validate().is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let rec = &generate_cohort(&small_spec(), 1).unwrap().recordings[0];
        assert_eq!(&add_noise(rec, 0.0, 5).unwrap(), rec);
        assert!(add_noise(rec, -1.0, 5).is_err());
    }

    #[test]
    fn box_muller_moments() {
        let mut rng = streams::stream(0, &[9]);
        let g = gaussian(&mut rng, 1_000_000);
        let mean = g.iter().sum::<f64>() / 1e6;
        let var = g.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 1e6;
        assert!(mean.abs() < 0.005 && (var.sqrt() - 1.0).abs() < 0.005);
    }
}
