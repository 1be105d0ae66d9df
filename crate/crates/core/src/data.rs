//! Synthetic multi-sample identity datasets.
//!
//! Each identity is a prototype image drawn uniformly in [0,1] per pixel;
//! its samples are the prototype plus clamped Gaussian pixel noise. With a
//! small noise sigma, same-identity samples cluster in pixel space and thus
//! in the embedding space of any Lipschitz embedder, which is what makes the
//! gray-box scenario meaningful without training a model.
//!
//! On disk a dataset is a directory holding `manifest.json` plus one binary
//! PGM (P5, maxval 65535) or PPM (P6, maxval 65535) file per sample.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the PRNG recorded in manifests, so datasets are reproducible
/// across builds of this crate.
pub const PRNG_NAME: &str = "chacha20";

/// Seeding scheme recorded in manifests: one ChaCha20 stream seeded with the
/// 64-bit generator seed, consumed identity by identity in order (prototype
/// first, then each sample's noise).
pub const SEEDING_SCHEME: &str = "single-stream-sequential";

const PIXEL_MAXVAL: u16 = u16::MAX;

/// Pixel tensor in [0,1]: row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::dims(format!(
                "pixel count {} does not match {}x{}x{}",
                pixels.len(),
                width,
                height,
                channels
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("pixel value {p} outside [0,1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Skips the [0,1] range check. Used by the finite-difference gradient
    /// oracle, whose probe points leave the box by the step h.
    pub(crate) fn unclamped(
        width: usize,
        height: usize,
        channels: usize,
        pixels: Vec<f64>,
    ) -> Result<Self> {
        if pixels.len() != width * height * channels {
            return Err(Error::dims("pixel count mismatch"));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Constant-valued image; handy in tests.
    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }
}

/// Synthetic dataset: identities with multiple samples each.
#[derive(Debug, Clone)]
pub struct IdentityDataset {
    pub identities: Vec<(String, Vec<Image>)>,
    pub image_dims: (usize, usize, usize),
    pub generator_seed: u64,
    pub intra_noise_sigma: f64,
}

impl IdentityDataset {
    pub fn n_identities(&self) -> usize {
        self.identities.len()
    }

    pub fn samples_per_identity(&self) -> usize {
        self.identities.first().map_or(0, |(_, s)| s.len())
    }

    pub fn identity(&self, id: &str) -> Option<&[Image]> {
        self.identities
            .iter()
            .find(|(name, _)| name == id)
            .map(|(_, samples)| samples.as_slice())
    }

    /// All samples flattened in manifest order, tagged with identity id and
    /// sample index.
    pub fn flat_samples(&self) -> Vec<(&str, usize, &Image)> {
        self.identities
            .iter()
            .flat_map(|(id, samples)| {
                samples
                    .iter()
                    .enumerate()
                    .map(move |(i, img)| (id.as_str(), i, img))
            })
            .collect()
    }
}

/// Generate a dataset of `n_identities`, each with `samples_per_identity`
/// images: prototype pixels i.i.d. uniform in [0,1], samples =
/// clamp(prototype + N(0, sigma^2)). Fully deterministic given `seed`.
pub fn generate_dataset(
    n_identities: usize,
    samples_per_identity: usize,
    dims: (usize, usize, usize),
    intra_noise_sigma: f64,
    seed: u64,
) -> Result<IdentityDataset> {
    let (w, h, c) = dims;
    if n_identities == 0 {
        return Err(Error::invalid("n_identities must be positive"));
    }
    if samples_per_identity < 2 {
        return Err(Error::invalid(
            "samples_per_identity must be >= 2 (gray-box needs a non-enrolled target image)",
        ));
    }
    if w == 0 || h == 0 || (c != 1 && c != 3) {
        return Err(Error::invalid("dims must be positive with 1 or 3 channels"));
    }
    if !(intra_noise_sigma >= 0.0) {
        return Err(Error::invalid("intra_noise_sigma must be >= 0"));
    }

    let n_px = w * h * c;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let id_width = (n_identities.max(2) - 1).to_string().len().max(3);

    let mut identities = Vec::with_capacity(n_identities);
    for idx in 0..n_identities {
        let prototype: Vec<f64> = (0..n_px).map(|_| rng.gen::<f64>()).collect();
        let mut samples = Vec::with_capacity(samples_per_identity);
        for _ in 0..samples_per_identity {
            let pixels: Vec<f64> = prototype
                .iter()
                .map(|&p| {
                    let noise: f64 = standard_normal(&mut rng);
                    (p + intra_noise_sigma * noise).clamp(0.0, 1.0)
                })
                .collect();
            samples.push(Image::new(w, h, c, pixels)?);
        }
        identities.push((format!("id_{idx:0id_width$}"), samples));
    }

    Ok(IdentityDataset {
        identities,
        image_dims: dims,
        generator_seed: seed,
        intra_noise_sigma,
    })
}

/// Box-Muller; two uniforms per draw keeps the stream layout trivial to
/// describe in the manifest.
pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    width: usize,
    height: usize,
    channels: usize,
    generator_seed: u64,
    intra_noise_sigma: f64,
    prng: String,
    seeding_scheme: String,
    identities: Vec<ManifestIdentity>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestIdentity {
    id: String,
    samples: Vec<String>,
}

/// Write a dataset to `dir`: `manifest.json` plus one image file per sample.
pub fn save_dataset(dataset: &IdentityDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (w, h, c) = dataset.image_dims;
    let ext = if c == 1 { "pgm" } else { "ppm" };

    let mut entries = Vec::new();
    for (id, samples) in &dataset.identities {
        let mut files = Vec::new();
        for (i, img) in samples.iter().enumerate() {
            let name = format!("{id}_s{i:02}.{ext}");
            write_pnm(img, dir.join(&name))?;
            files.push(name);
        }
        entries.push(ManifestIdentity {
            id: id.clone(),
            samples: files,
        });
    }

    let manifest = Manifest {
        format_version: 1,
        width: w,
        height: h,
        channels: c,
        generator_seed: dataset.generator_seed,
        intra_noise_sigma: dataset.intra_noise_sigma,
        prng: PRNG_NAME.to_string(),
        seeding_scheme: SEEDING_SCHEME.to_string(),
        identities: entries,
    };
    let file = fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &manifest)?;
    Ok(())
}

/// Load a dataset saved by [`save_dataset`]. Pixel values round-trip with
/// error at most 1/65535 per channel.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<IdentityDataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::Format {
        path: manifest_path.clone(),
        reason: format!("missing or unreadable manifest: {e}"),
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;

    let dims = (manifest.width, manifest.height, manifest.channels);
    let mut identities = Vec::with_capacity(manifest.identities.len());
    for entry in &manifest.identities {
        let mut samples = Vec::with_capacity(entry.samples.len());
        for name in &entry.samples {
            let path = dir.join(name);
            let img = read_pnm(&path)?;
            if img.dims() != dims {
                return Err(Error::Format {
                    path,
                    reason: format!(
                        "image dims {:?} disagree with manifest {:?}",
                        img.dims(),
                        dims
                    ),
                });
            }
            samples.push(img);
        }
        identities.push((entry.id.clone(), samples));
    }

    Ok(IdentityDataset {
        identities,
        image_dims: dims,
        generator_seed: manifest.generator_seed,
        intra_noise_sigma: manifest.intra_noise_sigma,
    })
}

/// Write one image as 16-bit binary PGM (1 channel) or PPM (3 channels).
pub fn write_pnm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = BufWriter::new(fs::File::create(path)?);
    write!(
        out,
        "{magic}\n{} {}\n{}\n",
        img.width(),
        img.height(),
        PIXEL_MAXVAL
    )?;
    let mut buf = Vec::with_capacity(img.len() * 2);
    for &p in img.pixels() {
        let q = (p * f64::from(PIXEL_MAXVAL)).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Read a 16-bit binary PGM/PPM written by [`write_pnm`].
pub fn read_pnm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;

    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    let mut pos = 0usize;
    let magic = next_token(&bytes, &mut pos).ok_or_else(|| bad("missing magic"))?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(&format!("unsupported magic {other}"))),
    };
    let width: usize = next_token(&bytes, &mut pos)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad width"))?;
    let height: usize = next_token(&bytes, &mut pos)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad height"))?;
    let maxval: u32 = next_token(&bytes, &mut pos)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad maxval"))?;
    if maxval != u32::from(PIXEL_MAXVAL) {
        return Err(bad(&format!("expected maxval {PIXEL_MAXVAL}, got {maxval}")));
    }
    // Exactly one whitespace byte separates the header from raster data.
    pos += 1;

    let n_px = width * height * channels;
    let raster = bytes
        .get(pos..pos + 2 * n_px)
        .ok_or_else(|| bad("truncated raster"))?;
    let pixels: Vec<f64> = raster
        .chunks_exact(2)
        .map(|b| f64::from(u16::from_be_bytes([b[0], b[1]])) / f64::from(PIXEL_MAXVAL))
        .collect();
    Image::new(width, height, channels, pixels)
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    // Skips whitespace and `#` comments, per the Netpbm header grammar.
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if *pos > start {
        Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    } else {
        None
    }
}

#[allow(dead_code)]
fn _manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}
