//! Discrete speech units: a pluggable quantizer (internal k-means over
//! log-mel + delta descriptors, or externally computed units via the
//! file-based adapter seam), run-length deduplication into (units,
//! durations), and the inverse expansion.

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::features;
use crate::io::{Container, Waveform};
use crate::scalar::{resample_nearest, Scalar};
use ndarray::{Array1, Array2, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::path::Path;

/// Run-length encoded unit sequence. No two consecutive units are equal and
/// every duration is at least one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitSequence {
    pub units: Vec<i64>,
    pub durations: Vec<i64>,
}

impl UnitSequence {
    pub fn new(units: Vec<i64>, durations: Vec<i64>) -> Result<Self> {
        let seq = UnitSequence { units, durations };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.units.len() != self.durations.len() {
            return Err(Error::Shape(format!(
                "units ({}) and durations ({}) differ in length",
                self.units.len(),
                self.durations.len()
            )));
        }
        if self.units.is_empty() {
            return Err(Error::Shape("empty unit sequence".into()));
        }
        if self.durations.iter().any(|&d| d < 1) {
            return Err(Error::Shape("durations must be >= 1".into()));
        }
        if self.units.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Shape("consecutive units must differ".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.durations.iter().map(|&d| d as usize).sum()
    }
}

/// Collapse consecutive repeats into (units, durations).
pub fn deduplicate(frames: &[i64]) -> Result<UnitSequence> {
    if frames.is_empty() {
        return Err(Error::Shape("cannot deduplicate an empty sequence".into()));
    }
    let mut units = Vec::new();
    let mut durations: Vec<i64> = Vec::new();
    for &f in frames {
        match units.last() {
            Some(&last) if last == f => *durations.last_mut().unwrap() += 1,
            _ => {
                units.push(f);
                durations.push(1);
            }
        }
    }
    Ok(UnitSequence { units, durations })
}

/// Duplicate each unit by its duration; exact inverse of `deduplicate`.
pub fn expand(seq: &UnitSequence) -> Vec<i64> {
    let mut out = Vec::with_capacity(seq.total_frames());
    for (&u, &d) in seq.units.iter().zip(&seq.durations) {
        out.extend(std::iter::repeat(u).take(d as usize));
    }
    out
}

/// Fitted fallback quantizer: k-means centroids over standardized
/// log-mel + delta frame descriptors.
#[derive(Debug, Clone)]
pub struct UnitVocabulary<F: Scalar> {
    pub centroids: Array2<F>,
    pub mean: Array1<F>,
    pub std: Array1<F>,
}

impl<F: Scalar> UnitVocabulary<F> {
    pub fn size(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.meta.insert("kind".into(), "unit_vocabulary".into());
        c.meta.insert("size".into(), self.size().to_string());
        c.meta.insert("dim".into(), self.feature_dim().to_string());
        c.insert("centroids", &self.centroids.clone().into_dyn());
        c.insert("mean", &self.mean.clone().into_dyn());
        c.insert("std", &self.std.clone().into_dyn());
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        if c.meta.get("kind").map(String::as_str) != Some("unit_vocabulary") {
            return Err(Error::CorruptContainer(
                "not a unit vocabulary container".into(),
            ));
        }
        let centroids: ArrayD<F> = c.get("centroids")?;
        let mean: ArrayD<F> = c.get("mean")?;
        let std: ArrayD<F> = c.get("std")?;
        Ok(UnitVocabulary {
            centroids: centroids
                .into_dimensionality()
                .map_err(|e| Error::CorruptContainer(e.to_string()))?,
            mean: mean
                .into_dimensionality()
                .map_err(|e| Error::CorruptContainer(e.to_string()))?,
            std: std
                .into_dimensionality()
                .map_err(|e| Error::CorruptContainer(e.to_string()))?,
        })
    }

    /// Content hash used to pair checkpoints with the vocabulary they were
    /// trained against.
    pub fn content_hash(&self) -> String {
        self.to_container().content_hash()
    }
}

/// Per-frame descriptor: log-mel bands plus first-order deltas.
fn frame_descriptors<F: Scalar>(wav: &Waveform<F>, cfg: &SystemConfig) -> Result<Array2<F>> {
    let mel = features::mel_spectrogram(wav, cfg)?;
    let n = mel.n_frames();
    let d = mel.bands();
    let mut out = Array2::zeros((n, 2 * d));
    for i in 0..n {
        for j in 0..d {
            out[[i, j]] = mel.frames[[i, j]];
            let prev = if i == 0 {
                mel.frames[[0, j]]
            } else {
                mel.frames[[i - 1, j]]
            };
            out[[i, d + j]] = mel.frames[[i, j]] - prev;
        }
    }
    Ok(out)
}

fn squared_distance<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<F>()
}

/// Standardized descriptors are clipped to this many sigmas.
const STANDARDIZED_CLIP: f64 = 4.0;

/// Fit the unit vocabulary with seeded k-means++ and Lloyd iterations.
/// Deterministic for a fixed corpus order and seed.
pub fn fit_vocabulary<F: Scalar>(
    corpus: &[Waveform<F>],
    size: usize,
    cfg: &SystemConfig,
    seed: u64,
) -> Result<UnitVocabulary<F>> {
    if size < 2 {
        return Err(Error::InsufficientData(
            "vocabulary size must be >= 2".into(),
        ));
    }
    let mut rows: Vec<Array2<F>> = Vec::new();
    for wav in corpus {
        rows.push(frame_descriptors(wav, cfg)?);
    }
    let total: usize = rows.iter().map(|r| r.nrows()).sum();
    if total < 10 * size {
        return Err(Error::InsufficientData(format!(
            "{total} frames for {size} clusters; need at least {}",
            10 * size
        )));
    }
    let dim = rows[0].ncols();
    let mut data = Array2::zeros((total, dim));
    let mut at = 0;
    for r in rows {
        data.slice_mut(ndarray::s![at..at + r.nrows(), ..]).assign(&r);
        at += r.nrows();
    }

    // standardize with a relative floor on the per-dimension scale:
    // near-constant dimensions must not dominate distances after division
    let mean = data.mean_axis(Axis(0)).expect("nonempty data");
    let mut raw_std = vec![0.0f64; dim];
    for j in 0..dim {
        let col = data.column(j);
        let m = mean[j];
        let var = col.iter().map(|&x| (x - m) * (x - m)).sum::<F>() / F::cast_usize(total);
        raw_std[j] = var.sqrt().f64();
    }
    let max_std = raw_std.iter().cloned().fold(0.0f64, f64::max);
    let floor = (0.05 * max_std).max(1e-8);
    let std: Array1<F> = raw_std.iter().map(|&s| F::cast(s.max(floor))).collect();
    // standardize and winsorize: onset/offset frames otherwise become
    // extreme outliers that capture k-means++ seeds
    let clip = F::cast(STANDARDIZED_CLIP);
    for i in 0..total {
        for j in 0..dim {
            let z = (data[[i, j]] - mean[j]) / std[j];
            data[[i, j]] = z.max(-clip).min(clip);
        }
    }

    const RESTARTS: u64 = 3;
    let mut best: Option<(f64, Array2<F>)> = None;
    for r in 0..RESTARTS {
        let (centroids, inertia) = kmeans(&data, size, cfg.kmeans_iters, seed.wrapping_add(r));
        if best.as_ref().map_or(true, |(bi, _)| inertia < *bi) {
            best = Some((inertia, centroids));
        }
    }
    let centroids = best.expect("at least one restart").1;
    Ok(UnitVocabulary {
        centroids,
        mean,
        std,
    })
}

/// Squared distances of every row to every centroid via
/// `|x|^2 - 2 x.c + |c|^2`; the argmin per row is the assignment.
fn assignment_pass<F: Scalar>(
    data: &Array2<F>,
    data_sq: &[F],
    centroids: &Array2<F>,
    assign: &mut [usize],
) -> (bool, f64) {
    let k = centroids.nrows();
    let cross = data.dot(&centroids.t());
    let cent_sq: Vec<F> = (0..k)
        .map(|c| centroids.row(c).iter().map(|&v| v * v).sum())
        .collect();
    let mut changed = false;
    let mut inertia = 0.0f64;
    for i in 0..data.nrows() {
        let mut best = 0usize;
        let mut best_d = F::infinity();
        for c in 0..k {
            let d = data_sq[i] - F::cast(2.0) * cross[[i, c]] + cent_sq[c];
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        if assign[i] != best {
            assign[i] = best;
            changed = true;
        }
        inertia += best_d.f64().max(0.0);
    }
    (changed, inertia)
}

fn kmeans<F: Scalar>(data: &Array2<F>, k: usize, max_iters: usize, seed: u64) -> (Array2<F>, f64) {
    let n = data.nrows();
    let dim = data.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centers: Vec<usize> = Vec::with_capacity(k);
    centers.push(rng.random_range(0..n));
    let mut dist2: Vec<f64> = (0..n)
        .map(|i| {
            squared_distance(
                data.row(i).as_slice().unwrap(),
                data.row(centers[0]).as_slice().unwrap(),
            )
            .f64()
        })
        .collect();
    while centers.len() < k {
        let sum: f64 = dist2.iter().sum();
        let next = if sum <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random_range(0.0..sum);
            let mut pick = n - 1;
            for (i, &d) in dist2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centers.push(next);
        for i in 0..n {
            let d = squared_distance(
                data.row(i).as_slice().unwrap(),
                data.row(next).as_slice().unwrap(),
            )
            .f64();
            if d < dist2[i] {
                dist2[i] = d;
            }
        }
    }
    let mut centroids = Array2::zeros((k, dim));
    for (c, &idx) in centers.iter().enumerate() {
        centroids.row_mut(c).assign(&data.row(idx));
    }

    // Lloyd iterations with empty-cluster reassignment
    let data_sq: Vec<F> = (0..n)
        .map(|i| data.row(i).iter().map(|&v| v * v).sum())
        .collect();
    let mut assign = vec![0usize; n];
    let mut inertia = f64::INFINITY;
    for _ in 0..max_iters {
        let (mut changed, pass_inertia) = assignment_pass(data, &data_sq, &centroids, &mut assign);
        inertia = pass_inertia;
        let mut counts = vec![0usize; k];
        let mut sums = Array2::<F>::zeros((k, dim));
        for i in 0..n {
            counts[assign[i]] += 1;
            let mut row = sums.row_mut(assign[i]);
            row += &data.row(i);
        }
        for c in 0..k {
            if counts[c] == 0 {
                // move the empty centroid onto the point farthest from its
                // assigned centroid so every cluster owns at least one frame
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = squared_distance(
                            data.row(a).as_slice().unwrap(),
                            centroids.row(assign[a]).as_slice().unwrap(),
                        );
                        let db = squared_distance(
                            data.row(b).as_slice().unwrap(),
                            centroids.row(assign[b]).as_slice().unwrap(),
                        );
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids.row_mut(c).assign(&data.row(far));
                assign[far] = c;
                changed = true;
            } else {
                let inv = F::one() / F::cast_usize(counts[c]);
                for j in 0..dim {
                    centroids[[c, j]] = sums[[c, j]] * inv;
                }
            }
        }
        if !changed {
            break;
        }
    }
    (centroids, inertia)
}

/// Assign one unit id per analysis frame.
pub fn quantize<F: Scalar>(
    wav: &Waveform<F>,
    vocab: &UnitVocabulary<F>,
    cfg: &SystemConfig,
) -> Result<Vec<i64>> {
    let desc = frame_descriptors(wav, cfg)?;
    if desc.nrows() == 0 {
        return Err(Error::TooShort {
            got: wav.samples.len(),
            need: cfg.window_samples,
        });
    }
    if desc.ncols() != vocab.feature_dim() {
        return Err(Error::Shape(format!(
            "descriptor dim {} != vocabulary dim {}",
            desc.ncols(),
            vocab.feature_dim()
        )));
    }
    let clip = F::cast(STANDARDIZED_CLIP);
    let mut out = Vec::with_capacity(desc.nrows());
    let mut scratch = vec![F::zero(); desc.ncols()];
    for i in 0..desc.nrows() {
        for j in 0..desc.ncols() {
            let z = (desc[[i, j]] - vocab.mean[j]) / vocab.std[j];
            scratch[j] = z.max(-clip).min(clip);
        }
        let mut best = 0usize;
        let mut best_d = F::infinity();
        for c in 0..vocab.size() {
            let d = squared_distance(&scratch, vocab.centroids.row(c).as_slice().unwrap());
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        out.push(best as i64);
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct UnitAdapterRecord {
    hop_seconds: f64,
    units: Vec<i64>,
}

/// Ingest externally computed per-frame units for a WAV. Looks for
/// `<dir>/<stem>.units.json` with `{"hop_seconds": .., "units": [..]}` and
/// nearest-neighbor aligns to `target_frames`.
pub fn units_from_adapter(dir: &str, wav_path: &Path, target_frames: usize) -> Result<Vec<i64>> {
    let stem = wav_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Adapter(format!("bad wav path {}", wav_path.display())))?;
    let record_path = Path::new(dir).join(format!("{stem}.units.json"));
    let text = std::fs::read_to_string(&record_path).map_err(|e| Error::io(&record_path, e))?;
    let record: UnitAdapterRecord =
        serde_json::from_str(&text).map_err(|e| Error::Adapter(format!("unit record: {e}")))?;
    if record.units.is_empty() {
        return Err(Error::Adapter("unit record holds no units".into()));
    }
    if record.hop_seconds <= 0.0 {
        return Err(Error::Adapter("unit record hop must be positive".into()));
    }
    Ok(resample_nearest(&record.units, target_frames))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> SystemConfig {
        SystemConfig::default()
    }

    /// Harmonic tone with a fade and a low noise floor, so the synthetic
    /// corpus has the broadband floor real recordings have.
    fn tone(hz: f64, seconds: f64) -> Waveform<f32> {
        let rate = 16_000u32;
        let n = (rate as f64 * seconds) as usize;
        let fade = (0.02 * rate as f64) as usize;
        let mut noise_state = 0x2545F4914F6CDD1Du64.wrapping_add(hz as u64);
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / rate as f64;
                let env = ((i.min(n - 1 - i) as f64 / fade as f64).min(1.0)).max(0.0);
                noise_state ^= noise_state << 13;
                noise_state ^= noise_state >> 7;
                noise_state ^= noise_state << 17;
                let noise = (noise_state as f64 / u64::MAX as f64 - 0.5) * 2e-3;
                (env
                    * (0.5 * (2.0 * std::f64::consts::PI * hz * t).sin()
                        + 0.25 * (2.0 * std::f64::consts::PI * 2.0 * hz * t).sin())
                    + noise) as f32
            })
            .collect();
        Waveform::new(samples, rate)
    }

    #[test]
    fn dedup_examples() {
        let seq = deduplicate(&[5, 5, 7, 7, 7, 2]).unwrap();
        assert_eq!(seq.units, vec![5, 7, 2]);
        assert_eq!(seq.durations, vec![2, 3, 1]);

        let seq = deduplicate(&[3, 3, 3]).unwrap();
        assert_eq!(seq.units, vec![3]);
        assert_eq!(seq.durations, vec![3]);

        let seq = deduplicate(&[1, 2, 1]).unwrap();
        assert_eq!(seq.units, vec![1, 2, 1]);
        assert_eq!(seq.durations, vec![1, 1, 1]);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(deduplicate(&[]).is_err());
    }

    #[test]
    fn expand_inverts_dedup() {
        let seq = UnitSequence::new(vec![5, 7, 2], vec![2, 3, 1]).unwrap();
        assert_eq!(expand(&seq), vec![5, 5, 7, 7, 7, 2]);
        let seq = UnitSequence::new(vec![3], vec![1]).unwrap();
        assert_eq!(expand(&seq), vec![3]);
    }

    proptest! {
        #[test]
        fn round_trip_identity(frames in proptest::collection::vec(0i64..20, 1..200)) {
            let seq = deduplicate(&frames).unwrap();
            seq.validate().unwrap();
            prop_assert_eq!(expand(&seq), frames);
        }
    }

    #[test]
    fn fit_is_deterministic_and_quantize_aligns_with_mel() {
        let corpus: Vec<Waveform<f32>> = vec![tone(200.0, 0.6), tone(1200.0, 0.6)];
        let v1 = fit_vocabulary(&corpus, 4, &cfg(), 42).unwrap();
        let v2 = fit_vocabulary(&corpus, 4, &cfg(), 42).unwrap();
        assert_eq!(v1.centroids, v2.centroids);

        let wav = tone(300.0, 0.5);
        let frames = quantize(&wav, &v1, &cfg()).unwrap();
        let mel = features::mel_spectrogram(&wav, &cfg()).unwrap();
        assert_eq!(frames.len(), mel.n_frames());
        let again = quantize(&wav, &v1, &cfg()).unwrap();
        assert_eq!(frames, again);
    }

    #[test]
    fn two_tone_corpus_separates_cleanly() {
        let a = tone(200.0, 2.0);
        let b = tone(2000.0, 2.0);
        let vocab = fit_vocabulary(&[a.clone(), b.clone()], 2, &cfg(), 7).unwrap();
        let fa = quantize(&a, &vocab, &cfg()).unwrap();
        let fb = quantize(&b, &vocab, &cfg()).unwrap();
        let purity = |frames: &[i64]| {
            let ones = frames.iter().filter(|&&u| u == 1).count();
            let frac = ones as f64 / frames.len() as f64;
            frac.max(1.0 - frac)
        };
        assert!(purity(&fa) >= 0.95, "tone A purity {}", purity(&fa));
        assert!(purity(&fb) >= 0.95, "tone B purity {}", purity(&fb));
        // and the two tones land on distinct dominant units
        let dominant = |frames: &[i64]| {
            let ones = frames.iter().filter(|&&u| u == 1).count();
            (ones * 2 > frames.len()) as i64
        };
        assert_ne!(dominant(&fa), dominant(&fb));
    }

    #[test]
    fn insufficient_data_is_rejected() {
        let corpus: Vec<Waveform<f32>> = vec![tone(200.0, 0.2)];
        assert!(matches!(
            fit_vocabulary(&corpus, 200, &cfg(), 1),
            Err(Error::InsufficientData(_))
        ));
        assert!(fit_vocabulary(&corpus, 1, &cfg(), 1).is_err());
    }

    #[test]
    fn vocabulary_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vocab");
        let corpus: Vec<Waveform<f32>> = vec![tone(200.0, 0.6), tone(900.0, 0.6)];
        let vocab = fit_vocabulary(&corpus, 3, &cfg(), 5).unwrap();
        vocab.save(&path).unwrap();
        let loaded = UnitVocabulary::<f32>::load(&path).unwrap();
        assert_eq!(loaded.centroids, vocab.centroids);
        assert_eq!(loaded.content_hash(), vocab.content_hash());
    }
}
