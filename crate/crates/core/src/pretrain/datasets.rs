use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::rng::{fill_standard_normal, RngStreams};
use crate::optim::trace::fmt_f64;

/// Global scale applied after standardisation.
pub const S_SCALE: f64 = 2.2;

/// Raw blob centres before standardisation.
pub const BLOB_CENTERS: [[f64; 2]; 4] = [[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]];
pub const BLOB_STD: f64 = 0.25;
pub const MOONS_NOISE: f64 = 0.1;
pub const CIRCLES_NOISE: f64 = 0.05;
pub const CIRCLES_FACTOR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoMoons,
    Circles,
    Blobs,
}

impl DatasetKind {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "two_moons" | "moons" => Ok(Self::TwoMoons),
            "circles" => Ok(Self::Circles),
            "blobs" => Ok(Self::Blobs),
            other => Err(config_err(format!("unknown dataset kind '{other}' (two_moons, circles, blobs)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::TwoMoons => "two_moons",
            Self::Circles => "circles",
            Self::Blobs => "blobs",
        }
    }
}

/// Standardised and scaled 2-d samples, row-major `N × 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset2D {
    pub kind: Option<DatasetKind>,
    pub samples: Vec<f64>,
    /// Raw mean and standard deviation used by the preprocessing.
    pub raw_mean: [f64; 2],
    pub raw_std: [f64; 2],
}

impl Dataset2D {
    pub fn len(&self) -> usize {
        self.samples.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.samples[2 * i..2 * i + 2]
    }

    /// Maps a raw-space point into the preprocessed space.
    pub fn transform(&self, raw: [f64; 2]) -> [f64; 2] {
        [0, 1].map(|j| S_SCALE * (raw[j] - self.raw_mean[j]) / self.raw_std[j])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "x1,x2")?;
        for p in self.samples.chunks_exact(2) {
            writeln!(w, "{},{}", fmt_f64(p[0]), fmt_f64(p[1]))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads an `x1,x2` CSV as already-preprocessed samples.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut samples = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let mut cells = line.split(',');
            for _ in 0..2 {
                let v = cells
                    .next()
                    .and_then(|c| c.trim().parse::<f64>().ok())
                    .ok_or_else(|| config_err(format!("{}: bad row {}", path.display(), i + 1)))?;
                samples.push(v);
            }
        }
        if samples.len() < 4 {
            return Err(config_err(format!("{}: need at least two rows", path.display())));
        }
        Ok(Self {
            kind: None,
            samples,
            raw_mean: [0.0; 2],
            raw_std: [S_SCALE; 2],
        })
    }
}

fn linspace(lo: f64, hi: f64, n: usize, i: usize) -> f64 {
    if n <= 1 {
        lo
    } else {
        lo + (hi - lo) * i as f64 / (n - 1) as f64
    }
}

fn raw_samples(kind: DatasetKind, n: usize, streams: &RngStreams) -> Vec<f64> {
    let mut rng = streams.stream("dataset", 0);
    let mut out = Vec::with_capacity(2 * n);
    match kind {
        DatasetKind::TwoMoons => {
            let n_outer = n / 2;
            let n_inner = n - n_outer;
            for i in 0..n_outer {
                let t = linspace(0.0, PI, n_outer, i);
                out.extend_from_slice(&[t.cos(), t.sin()]);
            }
            for i in 0..n_inner {
                let t = linspace(0.0, PI, n_inner, i);
                out.extend_from_slice(&[1.0 - t.cos(), 0.5 - t.sin()]);
            }
            add_noise(&mut out, MOONS_NOISE, &mut rng);
        }
        DatasetKind::Circles => {
            let n_outer = n / 2;
            let n_inner = n - n_outer;
            for (count, radius) in [(n_outer, 1.0), (n_inner, CIRCLES_FACTOR)] {
                for i in 0..count {
                    let t = 2.0 * PI * i as f64 / count as f64;
                    out.extend_from_slice(&[radius * t.cos(), radius * t.sin()]);
                }
            }
            add_noise(&mut out, CIRCLES_NOISE, &mut rng);
        }
        DatasetKind::Blobs => {
            let mut z = [0.0; 2];
            for i in 0..n {
                let c = BLOB_CENTERS[i % BLOB_CENTERS.len()];
                fill_standard_normal(&mut rng, &mut z);
                out.extend_from_slice(&[c[0] + BLOB_STD * z[0], c[1] + BLOB_STD * z[1]]);
            }
        }
    }
    out
}

fn add_noise<R: Rng>(xs: &mut [f64], std: f64, rng: &mut R) {
    let mut z = vec![0.0; xs.len()];
    fill_standard_normal(rng, &mut z);
    for (x, e) in xs.iter_mut().zip(z) {
        *x += std * e;
    }
}

/// Samples `n` points of the named 2-d toy distribution, then standardises
/// each coordinate and scales it by [`S_SCALE`].
pub fn generate_dataset(kind: DatasetKind, n: usize, seed: u64) -> Result<Dataset2D> {
    if n < 2 {
        return Err(config_err("a dataset needs at least two points"));
    }
    let mut samples = raw_samples(kind, n, &RngStreams::new(seed));
    let mut mean = [0.0; 2];
    let mut std = [0.0; 2];
    for j in 0..2 {
        let m = samples.iter().skip(j).step_by(2).sum::<f64>() / n as f64;
        let var = samples.iter().skip(j).step_by(2).map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        if !(var > 0.0) {
            return Err(Error::NonFinite {
                what: "dataset standard deviation",
                index: j,
            });
        }
        mean[j] = m;
        std[j] = var.sqrt();
    }
    if n == 2 {
        // Two points standardise to ±s; setting them directly keeps the mean exactly zero.
        for j in 0..2 {
            let s = (samples[j] - samples[2 + j]).signum() * S_SCALE;
            samples[j] = s;
            samples[2 + j] = -s;
        }
    } else {
        for p in samples.chunks_exact_mut(2) {
            for j in 0..2 {
                p[j] = S_SCALE * (p[j] - mean[j]) / std[j];
            }
        }
    }
    Ok(Dataset2D {
        kind: Some(kind),
        samples,
        raw_mean: mean,
        raw_std: std,
    })
}

/// Blob centres in the preprocessed space of `data`.
pub fn blob_centers(data: &Dataset2D) -> Vec<[f64; 2]> {
    BLOB_CENTERS.iter().map(|c| data.transform(*c)).collect()
}
