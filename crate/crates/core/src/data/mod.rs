//! Synthetic texture-segmentation data, image ingestion and on-disk
//! formats.
//!
//! Every sample is a grayscale image in which random-walk blobs differ
//! from the background only in the spatial frequency of a sinusoidal
//! texture: both classes share the same mean intensity, so a model has to
//! see texture to separate them.

mod image_io;
pub mod tensor_file;

pub use image_io::load_image;
pub use tensor_file::{read_tensor, write_tensor};

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::spectral;

/// Generator parameters and split sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Background texture frequency in cycles per pixel.
    pub low_freq: f64,
    /// Blob texture frequency in cycles per pixel.
    pub high_freq: f64,
    pub amplitude: f64,
    pub mean: f64,
    pub blob_min: usize,
    pub blob_max: usize,
    /// Radius of the disks stamped along each random walk, in pixels.
    pub blob_radius: f64,
    /// Fraction of the image the blobs grow to cover, drawn per sample.
    pub coverage_min: f64,
    pub coverage_max: f64,
    pub noise_sigma: f64,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 2,
            low_freq: 0.125,
            high_freq: 0.375,
            amplitude: 0.25,
            mean: 0.5,
            blob_min: 1,
            blob_max: 3,
            blob_radius: 7.0,
            coverage_min: 0.45,
            coverage_max: 0.55,
            noise_sigma: 0.05,
            train: 400,
            test: 100,
            seed: 0,
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("dataset manifest: {m}")));
        if self.height < 4 || self.width < 4 {
            return bad("images must be at least 4x4");
        }
        if self.num_classes != 2 {
            return bad("the texture generator produces exactly 2 classes");
        }
        for f in [self.low_freq, self.high_freq] {
            if !(f > 0.0 && f <= 0.5) {
                return bad("texture frequencies must lie in (0, 0.5]");
            }
        }
        if self.low_freq >= self.high_freq {
            return bad("low_freq must be below high_freq");
        }
        if !(self.amplitude >= 0.0 && self.noise_sigma >= 0.0 && self.blob_radius > 0.0) {
            return bad("amplitude, noise and radius must be non-negative");
        }
        if !(0.0 < self.coverage_min && self.coverage_min <= self.coverage_max && self.coverage_max < 1.0) {
            return bad("coverage range must satisfy 0 < min <= max < 1");
        }
        if self.blob_min > self.blob_max {
            return bad("blob_min exceeds blob_max");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("num_classes", self.num_classes);
        kv.set("low_freq", self.low_freq);
        kv.set("high_freq", self.high_freq);
        kv.set("amplitude", self.amplitude);
        kv.set("mean", self.mean);
        kv.set("blob_min", self.blob_min);
        kv.set("blob_max", self.blob_max);
        kv.set("blob_radius", self.blob_radius);
        kv.set("coverage_min", self.coverage_min);
        kv.set("coverage_max", self.coverage_max);
        kv.set("noise_sigma", self.noise_sigma);
        kv.set("train", self.train);
        kv.set("test", self.test);
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let m = Self {
            height: kv.parse_or("height", d.height)?,
            width: kv.parse_or("width", d.width)?,
            num_classes: kv.parse_or("num_classes", d.num_classes)?,
            low_freq: kv.parse_or("low_freq", d.low_freq)?,
            high_freq: kv.parse_or("high_freq", d.high_freq)?,
            amplitude: kv.parse_or("amplitude", d.amplitude)?,
            mean: kv.parse_or("mean", d.mean)?,
            blob_min: kv.parse_or("blob_min", d.blob_min)?,
            blob_max: kv.parse_or("blob_max", d.blob_max)?,
            blob_radius: kv.parse_or("blob_radius", d.blob_radius)?,
            coverage_min: kv.parse_or("coverage_min", d.coverage_min)?,
            coverage_max: kv.parse_or("coverage_max", d.coverage_max)?,
            noise_sigma: kv.parse_or("noise_sigma", d.noise_sigma)?,
            train: kv.parse_or("train", d.train)?,
            test: kv.parse_or("test", d.test)?,
            seed: kv.parse_or("seed", d.seed)?,
        };
        m.validate()?;
        Ok(m)
    }
}

/// One generated or loaded sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// `H×W×1` intensities in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `H×W` class ids stored as floats.
    pub mask: Tensor<f32>,
    pub seed: u64,
}

impl SampleRecord {
    pub fn labels(&self) -> Vec<usize> {
        self.mask.data().iter().map(|&v| v as usize).collect()
    }

    pub fn class_fraction(&self, class: usize) -> f64 {
        let n = self.mask.numel();
        self.mask.data().iter().filter(|&&v| v as usize == class).count() as f64 / n as f64
    }
}

fn texture(u: f64, v: f64, freq: f64, theta: f64, phase: f64) -> f64 {
    (2.0 * PI * freq * (u * theta.cos() + v * theta.sin()) + phase).sin()
}

/// Grows the blob mask: each of `blobs` walkers stamps disks while taking
/// unit-length steps with a slowly drifting heading, until the covered
/// fraction reaches `target`.
fn grow_blobs(m: &DatasetManifest, blobs: usize, target: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let (h, w) = (m.height, m.width);
    let mut mask = vec![false; h * w];
    if blobs == 0 {
        return mask;
    }
    let r = m.blob_radius;
    let mut walkers: Vec<(f64, f64, f64)> = (0..blobs)
        .map(|_| {
            (
                rng.random_range(r..(h as f64 - r).max(r + 1.0)),
                rng.random_range(r..(w as f64 - r).max(r + 1.0)),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let goal = (target * (h * w) as f64).round() as usize;
    let mut covered = 0usize;
    let max_steps = 200 * h * w;
    let mut step = 0;
    while covered < goal && step < max_steps {
        let (y, x, heading) = &mut walkers[step % blobs];
        let (i0, i1) = (((*y - r).floor().max(0.0)) as usize, ((*y + r).ceil() as usize).min(h - 1));
        let (j0, j1) = (((*x - r).floor().max(0.0)) as usize, ((*x + r).ceil() as usize).min(w - 1));
        for i in i0..=i1 {
            for j in j0..=j1 {
                let (dy, dx) = (i as f64 - *y, j as f64 - *x);
                if dy * dy + dx * dx <= r * r && !mask[i * w + j] {
                    mask[i * w + j] = true;
                    covered += 1;
                    if covered >= goal {
                        return mask;
                    }
                }
            }
        }
        *heading += rng.random_range(-0.6..0.6);
        *y += 1.5 * heading.sin();
        *x += 1.5 * heading.cos();
        if *y < 0.0 || *y > (h - 1) as f64 {
            *heading = -*heading;
            *y = y.clamp(0.0, (h - 1) as f64);
        }
        if *x < 0.0 || *x > (w - 1) as f64 {
            *heading = PI - *heading;
            *x = x.clamp(0.0, (w - 1) as f64);
        }
        step += 1;
    }
    mask
}

/// Generates sample `index` of the dataset; its RNG is seeded with
/// `manifest.seed + index`.
pub fn generate_sample(m: &DatasetManifest, index: u64) -> Result<SampleRecord> {
    m.validate()?;
    let seed = m.seed.wrapping_add(index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs = rng.random_range(m.blob_min..=m.blob_max);
    let target = rng.random_range(m.coverage_min..=m.coverage_max);
    let mask = grow_blobs(m, blobs, target, &mut rng);
    let (t_bg, p_bg) = (rng.random_range(0.0..PI), rng.random_range(0.0..2.0 * PI));
    let (t_fg, p_fg) = (rng.random_range(0.0..PI), rng.random_range(0.0..2.0 * PI));
    let noise = Normal::new(0.0, m.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let (h, w) = (m.height, m.width);
    let mut img = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (u, v) = (i as f64, j as f64);
            let t = if mask[i * w + j] {
                texture(u, v, m.high_freq, t_fg, p_fg)
            } else {
                texture(u, v, m.low_freq, t_bg, p_bg)
            };
            let val = m.mean + m.amplitude * t + noise.sample(&mut rng);
            img.push(val.clamp(0.0, 1.0) as f32);
        }
    }
    Ok(SampleRecord {
        image: Tensor::new(&[h, w, 1], img)?,
        mask: Tensor::new(&[h, w], mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?,
        seed,
    })
}

/// Train and test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

/// Generates both splits; test samples follow the training ones in the
/// seed sequence.
pub fn gen_texture_dataset(m: &DatasetManifest) -> Result<Dataset> {
    m.validate()?;
    let train = (0..m.train as u64).map(|i| generate_sample(m, i)).collect::<Result<Vec<_>>>()?;
    let test = (0..m.test as u64)
        .map(|i| generate_sample(m, m.train as u64 + i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: m.clone(),
        train,
        test,
    })
}

/// Separation statistics of one sample: absolute difference of the class
/// mean intensities, and the high-band and low-band energy ratios
/// foreground/background and background/foreground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureCheck {
    pub mean_gap: f64,
    pub high_band_ratio: f64,
    pub low_band_ratio: f64,
}

/// Measures a sample's texture separation with the spectral tools: each
/// class region is mean-centred, zeroed elsewhere and split into energy
/// inside and outside half the Nyquist radius.
pub fn texture_check(s: &SampleRecord) -> Result<TextureCheck> {
    let (h, w) = (s.mask.shape()[0], s.mask.shape()[1]);
    let img = s.image.data();
    let mut bands = [(0.0, 0.0); 2];
    let mut means = [0.0; 2];
    for (c, band) in bands.iter_mut().enumerate() {
        let sel: Vec<bool> = s.mask.data().iter().map(|&v| v as usize == c).collect();
        let n = sel.iter().filter(|&&b| b).count();
        if n == 0 {
            return Err(Error::Numerical(format!("class {c} absent from sample")));
        }
        let mean = img.iter().zip(&sel).filter(|(_, &b)| b).map(|(&v, _)| v as f64).sum::<f64>() / n as f64;
        means[c] = mean;
        let centred: Vec<f64> = img.iter().zip(&sel).map(|(&v, &b)| if b { v as f64 - mean } else { 0.0 }).collect();
        let x = Tensor::new(&[h, w, 1], centred)?;
        *band = spectral::band_energies(&x, spectral::DEFAULT_CUTOFF)?;
    }
    let ((bg_low, bg_high), (fg_low, fg_high)) = (bands[0], bands[1]);
    Ok(TextureCheck {
        mean_gap: (means[0] - means[1]).abs(),
        high_band_ratio: fg_high / bg_high.max(f64::MIN_POSITIVE),
        low_band_ratio: bg_low / fg_low.max(f64::MIN_POSITIVE),
    })
}

pub const MANIFEST_FILE: &str = "manifest.cfg";

fn split_dir(dir: &Path, split: &str) -> std::path::PathBuf {
    dir.join(split)
}

/// Writes `dir/manifest.cfg` plus `dir/{train,test}/NNNNN.image.bin` and
/// `NNNNN.mask.bin` tensor files.
pub fn save_dataset(dir: impl AsRef<Path>, d: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mp = dir.join(MANIFEST_FILE);
    std::fs::write(&mp, d.manifest.to_kv().to_string()).map_err(|e| Error::io(&mp, e))?;
    for (split, samples) in [("train", &d.train), ("test", &d.test)] {
        let sd = split_dir(dir, split);
        std::fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        for (i, s) in samples.iter().enumerate() {
            write_tensor(sd.join(format!("{i:05}.image.bin")), &s.image)?;
            write_tensor(sd.join(format!("{i:05}.mask.bin")), &s.mask)?;
        }
    }
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = DatasetManifest::from_kv(&KeyValues::load(dir.join(MANIFEST_FILE))?)?;
    let load_split = |split: &str, n: usize, offset: u64| -> Result<Vec<SampleRecord>> {
        let sd = split_dir(dir, split);
        (0..n)
            .map(|i| {
                let image: Tensor<f32> = read_tensor(sd.join(format!("{i:05}.image.bin")))?;
                let mask: Tensor<f32> = read_tensor(sd.join(format!("{i:05}.mask.bin")))?;
                if image.shape() != [manifest.height, manifest.width, 1] || mask.shape() != [manifest.height, manifest.width] {
                    return Err(Error::Format(format!("{split} sample {i} does not match the manifest geometry")));
                }
                Ok(SampleRecord {
                    image,
                    mask,
                    seed: manifest.seed.wrapping_add(offset + i as u64),
                })
            })
            .collect()
    };
    let train = load_split("train", manifest.train, 0)?;
    let test = load_split("test", manifest.test, manifest.train as u64)?;
    Ok(Dataset { manifest, train, test })
}
