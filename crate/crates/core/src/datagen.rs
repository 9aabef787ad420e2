//! Synthetic interval datasets: an AR(1) source turned into interval
//! streams by either a midtread quantizer (uniform timestamps) or a
//! swinging-door compressor (non-uniform timestamps), plus splitting and
//! standardization.
//!
//! Everything is deterministic given a seed. The generator is ChaCha8 with
//! ziggurat-sampled Gaussians, recorded by name in the dataset manifest so
//! datasets are reproducible across platforms.

use crate::core::{CoreError, Interval, IntervalSequence};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Sequence length of every dataset sequence.
pub const SEQ_LEN: usize = 100;
/// Total sequences per dataset.
pub const TOTAL_SEQS: usize = 288;
/// Training-split size.
pub const TRAIN_SEQS: usize = 192;
/// Validation-split size.
pub const VAL_SEQS: usize = 64;
/// Test-split size.
pub const TEST_SEQS: usize = 32;
/// Quantizer half-step for the uniform source.
pub const QUANTIZER_EPS: f64 = 0.1;
/// Compression deviation for the swinging-door source.
pub const COMP_DEV: f64 = 0.1;
/// RNG recorded in manifests.
pub const GENERATOR_NAME: &str = "chacha8 + ziggurat standard normal";

#[derive(Debug, Error)]
pub enum DatagenError {
    /// Compression kept too few points even after growing the source.
    #[error("insufficient data: needed {needed} compressed intervals, got {got}")]
    InsufficientData { needed: usize, got: usize },
    /// Training centroids are constant; standardization is undefined.
    #[error("zero variance in training centroids")]
    ZeroVariance,
    #[error("missing `dataset` section in manifest")]
    MissingManifest,
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// First-order autoregressive source `z_t = phi z_{t-1} + w_t`.
#[derive(Debug, Clone, Copy)]
pub struct Ar1Config {
    pub phi: f64,
    pub innovation_variance: f64,
    pub n: usize,
    pub seed: u64,
}

impl Ar1Config {
    /// The defaults used by the built-in datasets.
    pub fn new(n: usize, seed: u64) -> Ar1Config {
        Ar1Config {
            phi: 0.9,
            innovation_variance: 0.1,
            n,
            seed,
        }
    }
}

/// Generates the series; timestamps are implicitly `0..n-1`.
///
/// `z_0 = w_0`. With zero innovation variance the series is the
/// deterministic impulse response from `z_0 = 1` (a test hook: no random
/// draws at all).
pub fn ar1_generate(cfg: &Ar1Config) -> Vec<f64> {
    assert!(cfg.phi.abs() < 1.0, "ar1 needs |phi| < 1, got {}", cfg.phi);
    assert!(cfg.innovation_variance >= 0.0, "negative variance");
    let mut z = Vec::with_capacity(cfg.n);
    if cfg.innovation_variance == 0.0 {
        let mut v = 1.0;
        for _ in 0..cfg.n {
            z.push(v);
            v *= cfg.phi;
        }
        return z;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.innovation_variance.sqrt()).expect("finite std");
    let mut prev = 0.0;
    for _ in 0..cfg.n {
        let v = cfg.phi * prev + noise.sample(&mut rng);
        z.push(v);
        prev = v;
    }
    z
}

/// Midtread quantizer: `y_t = round(z_t / 2eps) * 2eps` at unit spacing,
/// every interval carrying the same half-width `eps`.
///
/// Rounding ties go away from zero (the `f64::round` rule), so the
/// consistency bound `|z_t - y_t| <= eps` holds with equality only at tie
/// points.
pub fn midtread_quantize(z: &[f64], eps: f64) -> IntervalSequence {
    assert!(eps > 0.0, "quantizer half-step must be positive");
    let items: Vec<Interval> = z
        .iter()
        .enumerate()
        .map(|(t, &v)| {
            let y = (v / (2.0 * eps)).round() * (2.0 * eps);
            Interval::new(t as f64, y, eps)
        })
        .collect();
    IntervalSequence::new(items).expect("uniform grid is strictly increasing")
}

/// Swinging-door trend compression.
///
/// A point is covered while the chord from the last retained point stays
/// inside the corridor of slopes that keeps every intermediate point within
/// `comp_dev` of the line; when the corridor rejects a chord, the previous
/// point is retained and becomes the new door pivot. Retained points keep
/// their exact source values and carry `comp_dev` as half-width. First and
/// last samples are always retained.
///
/// Testing the chord (not merely corridor non-emptiness) is what makes the
/// replay guarantee exact: linear interpolation between retained points
/// deviates from every dropped sample by at most `comp_dev`.
pub fn swinging_door_compress(x: &[f64], z: &[f64], comp_dev: f64) -> IntervalSequence {
    assert!(comp_dev > 0.0, "compression deviation must be positive");
    assert_eq!(x.len(), z.len(), "timestamp/value length mismatch");
    assert!(x.len() >= 2, "need at least two samples");

    let mut retained: Vec<Interval> = vec![Interval::new(x[0], z[0], comp_dev)];
    let mut anchor = (x[0], z[0]);
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    let mut held: Option<(f64, f64)> = None;

    for (&xp, &zp) in x.iter().zip(z).skip(1) {
        let admit = |anchor: (f64, f64), lo: &mut f64, hi: &mut f64| -> bool {
            let dx = xp - anchor.0;
            let chord = (zp - anchor.1) / dx;
            if chord < *lo || chord > *hi {
                return false;
            }
            *lo = lo.max((zp - comp_dev - anchor.1) / dx);
            *hi = hi.min((zp + comp_dev - anchor.1) / dx);
            true
        };
        if admit(anchor, &mut lo, &mut hi) {
            held = Some((xp, zp));
            continue;
        }
        let (hx, hz) = held.expect("first point after an anchor is always admitted");
        retained.push(Interval::new(hx, hz, comp_dev));
        anchor = (hx, hz);
        lo = f64::NEG_INFINITY;
        hi = f64::INFINITY;
        let fresh = admit(anchor, &mut lo, &mut hi);
        debug_assert!(fresh, "empty corridor admits any chord");
        held = Some((xp, zp));
    }
    if let Some((hx, hz)) = held {
        retained.push(Interval::new(hx, hz, comp_dev));
    }
    IntervalSequence::new(retained).expect("retained timestamps are strictly increasing")
}

/// Which synthetic pipeline produced a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    /// AR(1) through the midtread quantizer, uniform timestamps.
    S1,
    /// AR(1) through swinging-door compression, non-uniform timestamps.
    S2,
}

impl std::str::FromStr for SourceKind {
    type Err = String;
    fn from_str(s: &str) -> Result<SourceKind, String> {
        match s {
            "s1" => Ok(SourceKind::S1),
            "s2" => Ok(SourceKind::S2),
            other => Err(format!("unknown source `{other}` (expected s1 or s2)")),
        }
    }
}

impl std::fmt::Display for SourceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SourceKind::S1 => "s1",
            SourceKind::S2 => "s2",
        })
    }
}

/// Training-split centroid statistics.
///
/// `std` is the population standard deviation of the concatenated training
/// centroids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

impl Standardization {
    /// Maps an interval into standardized units: `y' = (y - mean)/std`,
    /// `eps' = eps/std`, timestamps unchanged.
    pub fn apply(&self, i: &Interval) -> Interval {
        Interval::new(i.x, (i.y - self.mean) / self.std, i.eps / self.std)
    }

    /// Inverse of [`Standardization::apply`].
    pub fn invert(&self, i: &Interval) -> Interval {
        Interval::new(i.x, i.y * self.std + self.mean, i.eps * self.std)
    }

    fn apply_seq(&self, s: &IntervalSequence) -> IntervalSequence {
        IntervalSequence::new(s.as_slice().iter().map(|i| self.apply(i)).collect())
            .expect("standardization preserves timestamps")
    }

    fn invert_seq(&self, s: &IntervalSequence) -> IntervalSequence {
        IntervalSequence::new(s.as_slice().iter().map(|i| self.invert(i)).collect())
            .expect("standardization preserves timestamps")
    }
}

/// Computes training statistics from concatenated centroids.
pub fn compute_standardization(
    train: &[IntervalSequence],
) -> Result<Standardization, DatagenError> {
    let count: usize = train.iter().map(|s| s.len()).sum();
    assert!(count > 0, "empty training split");
    let mean = train
        .iter()
        .flat_map(|s| s.as_slice())
        .map(|i| i.y)
        .sum::<f64>()
        / count as f64;
    let var = train
        .iter()
        .flat_map(|s| s.as_slice())
        .map(|i| (i.y - mean) * (i.y - mean))
        .sum::<f64>()
        / count as f64;
    // Constant centroids leave only accumulation roundoff (~eps^2 relative
    // to the mean), far below any genuine spread.
    if var <= 1e-24 * (1.0 + mean * mean) {
        return Err(DatagenError::ZeroVariance);
    }
    Ok(Standardization {
        mean,
        std: var.sqrt(),
    })
}

/// A generated dataset: raw (unstandardized) splits plus the training
/// statistics needed to standardize them.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<IntervalSequence>,
    pub val: Vec<IntervalSequence>,
    pub test: Vec<IntervalSequence>,
    pub standardization: Standardization,
}

impl DatasetSplit {
    /// Applies the stored training statistics to every split.
    pub fn standardized(&self) -> DatasetSplit {
        let f = |v: &[IntervalSequence]| v.iter().map(|s| self.standardization.apply_seq(s)).collect();
        DatasetSplit {
            train: f(&self.train),
            val: f(&self.val),
            test: f(&self.test),
            standardization: self.standardization,
        }
    }

    /// Inverse of [`DatasetSplit::standardized`].
    pub fn destandardized(&self) -> DatasetSplit {
        let f = |v: &[IntervalSequence]| v.iter().map(|s| self.standardization.invert_seq(s)).collect();
        DatasetSplit {
            train: f(&self.train),
            val: f(&self.val),
            test: f(&self.test),
            standardization: self.standardization,
        }
    }
}

/// Provenance stored next to the dataset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: SourceKind,
    pub seed: u64,
    /// Quantizer half-step (uniform source only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    /// Compression deviation (swinging-door source only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comp_dev: Option<f64>,
    pub standardization: Standardization,
    pub generator: String,
}

/// Rebases timestamps so each sequence starts at zero; only gaps matter to
/// the interpolator, and rebased sequences are independent of their position
/// in the source stream.
fn rebase(chunk: &[Interval]) -> IntervalSequence {
    let x0 = chunk[0].x;
    IntervalSequence::new(
        chunk
            .iter()
            .map(|i| Interval::new(i.x - x0, i.y, i.eps))
            .collect(),
    )
    .expect("rebasing preserves ordering")
}

/// Generates a full dataset: 288 sequences of 100 intervals split
/// 192/64/32 at random, with standardization statistics from the training
/// split. Sequence data stays raw; apply [`DatasetSplit::standardized`]
/// before training on it.
pub fn build_dataset(
    source: SourceKind,
    seed: u64,
) -> Result<(DatasetSplit, DatasetManifest), DatagenError> {
    let needed = TOTAL_SEQS * SEQ_LEN;
    let intervals: Vec<Interval> = match source {
        SourceKind::S1 => {
            let z = ar1_generate(&Ar1Config::new(needed, seed));
            midtread_quantize(&z, QUANTIZER_EPS).as_slice().to_vec()
        }
        SourceKind::S2 => {
            // Compression drops points, so grow the source until enough
            // remain. Regenerating with the same seed extends the same
            // series, keeping the prefix identical.
            let mut n = 2 * needed;
            let mut compressed = None;
            for _ in 0..8 {
                let z = ar1_generate(&Ar1Config::new(n, seed));
                let x: Vec<f64> = (0..n).map(|t| t as f64).collect();
                let c = swinging_door_compress(&x, &z, COMP_DEV);
                if c.len() >= needed {
                    compressed = Some(c);
                    break;
                }
                n *= 2;
            }
            let c = compressed.ok_or(DatagenError::InsufficientData {
                needed,
                got: 0,
            })?;
            c.as_slice()[..needed].to_vec()
        }
    };

    let sequences: Vec<IntervalSequence> = intervals
        .chunks_exact(SEQ_LEN)
        .map(rebase)
        .collect();
    debug_assert_eq!(sequences.len(), TOTAL_SEQS);

    // The split assignment draws from a separate RNG stream so it does not
    // disturb the noise sequence.
    let mut split_rng = ChaCha8Rng::seed_from_u64(seed);
    split_rng.set_stream(1);
    let mut order: Vec<usize> = (0..TOTAL_SEQS).collect();
    order.shuffle(&mut split_rng);
    let pick = |range: std::ops::Range<usize>| -> Vec<IntervalSequence> {
        order[range].iter().map(|&i| sequences[i].clone()).collect()
    };
    let train = pick(0..TRAIN_SEQS);
    let val = pick(TRAIN_SEQS..TRAIN_SEQS + VAL_SEQS);
    let test = pick(TRAIN_SEQS + VAL_SEQS..TOTAL_SEQS);

    let standardization = compute_standardization(&train)?;
    let manifest = DatasetManifest {
        source,
        seed,
        eps: (source == SourceKind::S1).then_some(QUANTIZER_EPS),
        comp_dev: (source == SourceKind::S2).then_some(COMP_DEV),
        standardization,
        generator: GENERATOR_NAME.to_string(),
    };
    Ok((
        DatasetSplit {
            train,
            val,
            test,
            standardization,
        },
        manifest,
    ))
}

#[derive(Serialize, Deserialize)]
struct DatasetRow {
    seq_id: usize,
    t: usize,
    x: f64,
    y: f64,
    eps: f64,
}

fn write_split(path: &Path, seqs: &[IntervalSequence], first_id: usize) -> Result<(), DatagenError> {
    let mut w = csv::Writer::from_path(path)?;
    for (k, s) in seqs.iter().enumerate() {
        for (t, i) in s.as_slice().iter().enumerate() {
            w.serialize(DatasetRow {
                seq_id: first_id + k,
                t,
                x: i.x,
                y: i.y,
                eps: i.eps,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_split(path: &Path) -> Result<Vec<IntervalSequence>, DatagenError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut seqs: Vec<IntervalSequence> = Vec::new();
    let mut current: Vec<Interval> = Vec::new();
    let mut current_id: Option<usize> = None;
    for row in r.deserialize::<DatasetRow>() {
        let row = row?;
        if current_id.is_some() && current_id != Some(row.seq_id) {
            seqs.push(IntervalSequence::new(std::mem::take(&mut current))?);
        }
        current_id = Some(row.seq_id);
        current.push(Interval::new(row.x, row.y, row.eps));
    }
    if !current.is_empty() {
        seqs.push(IntervalSequence::new(current)?);
    }
    Ok(seqs)
}

/// Writes `train.csv`, `val.csv`, and `test.csv` with raw values (the
/// shortest-roundtrip float encoding reparses bit-exactly).
///
/// The manifest travels in the output directory's `manifest.json`, written
/// by the caller alongside its own run metadata under a `dataset` key.
pub fn save_dataset(dir: &Path, split: &DatasetSplit) -> Result<(), DatagenError> {
    std::fs::create_dir_all(dir)?;
    write_split(&dir.join("train.csv"), &split.train, 0)?;
    write_split(&dir.join("val.csv"), &split.val, split.train.len())?;
    write_split(
        &dir.join("test.csv"),
        &split.test,
        split.train.len() + split.val.len(),
    )?;
    Ok(())
}

/// Reads a dataset directory written by [`save_dataset`] plus a
/// `manifest.json` containing a `dataset` section.
pub fn load_dataset(dir: &Path) -> Result<(DatasetSplit, DatasetManifest), DatagenError> {
    let raw = std::fs::read_to_string(dir.join("manifest.json"))?;
    let value: serde_json::Value = serde_json::from_str(&raw)?;
    let section = value.get("dataset").ok_or(DatagenError::MissingManifest)?;
    let manifest: DatasetManifest = serde_json::from_value(section.clone())?;
    let split = DatasetSplit {
        train: read_split(&dir.join("train.csv"))?,
        val: read_split(&dir.join("val.csv"))?,
        test: read_split(&dir.join("test.csv"))?,
        standardization: manifest.standardization,
    };
    Ok((split, manifest))
}
