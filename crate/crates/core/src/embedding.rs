//! Differentiable feature embedding behind a model interface.
//!
//! The embedder maps an image to a unit-norm feature vector; objectives are
//! differentiated through it via vector-Jacobian products, so attack code
//! never needs a tape. The reference model is a single random linear layer
//! with a tanh nonlinearity followed by L2 normalization:
//!
//! `f(x) = normalize(tanh(W * flatten(x) + b))`
//!
//! with W drawn i.i.d. Gaussian(0, 1/n_pixels) and b = 0. One nonlinearity is
//! enough to make the attack optimization non-convex while keeping analytic
//! gradients short; deeper models can implement the same trait.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::{standard_normal, Image};
use crate::error::{Error, Result};

/// Unit-norm embedding output (L2 norm 1 within 1e-6).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    /// Wraps a vector that is already unit-norm.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let norm: f64 = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "feature vector norm {norm} not within 1e-6 of 1"
            )));
        }
        Ok(Self { values })
    }

    /// Normalizes an arbitrary nonzero vector.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self> {
        let norm: f64 = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::ZeroVector);
        }
        for v in &mut values {
            *v /= norm;
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dot(&self, other: &FeatureVector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::dims(format!(
                "feature dims {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }
}

/// Gradient with respect to image pixels; same shape as the image, values
/// unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientImage {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f64>,
}

impl GradientImage {
    pub fn new(dims: (usize, usize, usize), values: Vec<f64>) -> Result<Self> {
        let (width, height, channels) = dims;
        if values.len() != width * height * channels {
            return Err(Error::dims(format!(
                "gradient length {} does not match {:?}",
                values.len(),
                dims
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Deterministic differentiable embedding model.
pub trait EmbeddingModel: Send + Sync {
    fn input_dims(&self) -> (usize, usize, usize);

    fn feature_dim(&self) -> usize;

    /// Unit-norm embedding of `image`; pure in (parameters, image).
    fn embed(&self, image: &Image) -> Result<FeatureVector>;

    /// Exact vector-Jacobian product: returns `(df/dx)^T * feature_cograd`,
    /// including the Jacobian of the output normalization.
    fn input_gradient(&self, image: &Image, feature_cograd: &[f64]) -> Result<GradientImage>;
}

const MODEL_MAGIC: &[u8; 4] = b"EMBD";
const MODEL_VERSION: u32 = 1;

/// Reference embedder: `normalize(tanh(W x + b))` with seeded Gaussian W.
#[derive(Debug, Clone)]
pub struct ReferenceEmbedder {
    width: usize,
    height: usize,
    channels: usize,
    feature_dim: usize,
    seed: u64,
    /// Row-major `feature_dim x n_pixels`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ReferenceEmbedder {
    /// Draws W i.i.d. Gaussian with variance 1/n_pixels from `seed`; this
    /// keeps tanh pre-activations well away from saturation for [0,1] inputs.
    pub fn new(input_dims: (usize, usize, usize), feature_dim: usize, seed: u64) -> Result<Self> {
        let (w, h, c) = input_dims;
        if w == 0 || h == 0 || (c != 1 && c != 3) {
            return Err(Error::invalid("input dims must be positive with 1 or 3 channels"));
        }
        if feature_dim < 2 {
            return Err(Error::invalid("feature_dim must be >= 2"));
        }
        let n_px = w * h * c;
        let std = (1.0 / n_px as f64).sqrt();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let weights: Vec<f64> = (0..feature_dim * n_px)
            .map(|_| std * standard_normal(&mut rng))
            .collect();
        Ok(Self {
            width: w,
            height: h,
            channels: c,
            feature_dim,
            seed,
            weights,
            bias: vec![0.0; feature_dim],
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn n_pixels(&self) -> usize {
        self.width * self.height * self.channels
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        if image.dims() != self.input_dims() {
            return Err(Error::dims(format!(
                "image dims {:?} vs model input {:?}",
                image.dims(),
                self.input_dims()
            )));
        }
        Ok(())
    }

    /// Pre-activations `W x + b`.
    pub fn pre_activations(&self, image: &Image) -> Result<Vec<f64>> {
        self.check_input(image)?;
        let n = self.n_pixels();
        let x = image.pixels();
        let mut pre = self.bias.clone();
        for (k, p) in pre.iter_mut().enumerate() {
            let row = &self.weights[k * n..(k + 1) * n];
            *p += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        Ok(pre)
    }

    /// Serialize parameters: magic, version, seed, dims, raw little-endian
    /// f64 weights and bias. Reload reproduces embeddings bitwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        out.write_all(MODEL_MAGIC)?;
        out.write_all(&MODEL_VERSION.to_le_bytes())?;
        out.write_all(&self.seed.to_le_bytes())?;
        for v in [self.width, self.height, self.channels, self.feature_dim] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        for w in self.weights.iter().chain(&self.bias) {
            out.write_all(&w.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut input = BufReader::new(fs::File::open(path)?);
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };

        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != MODEL_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(&mut input).map_err(|_| bad("truncated"))?;
        if version != MODEL_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut seed_bytes = [0u8; 8];
        input.read_exact(&mut seed_bytes).map_err(|_| bad("truncated"))?;
        let seed = u64::from_le_bytes(seed_bytes);
        let width = read_u32(&mut input).map_err(|_| bad("truncated"))? as usize;
        let height = read_u32(&mut input).map_err(|_| bad("truncated"))? as usize;
        let channels = read_u32(&mut input).map_err(|_| bad("truncated"))? as usize;
        let feature_dim = read_u32(&mut input).map_err(|_| bad("truncated"))? as usize;

        let n = width * height * channels;
        let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(count);
            let mut b = [0u8; 8];
            for _ in 0..count {
                input.read_exact(&mut b).map_err(|_| bad("truncated"))?;
                out.push(f64::from_le_bytes(b));
            }
            Ok(out)
        };
        let weights = read_f64s(feature_dim * n)?;
        let bias = read_f64s(feature_dim)?;

        Ok(Self {
            width,
            height,
            channels,
            feature_dim,
            seed,
            weights,
            bias,
        })
    }
}

fn read_u32(input: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl EmbeddingModel for ReferenceEmbedder {
    fn input_dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn embed(&self, image: &Image) -> Result<FeatureVector> {
        let pre = self.pre_activations(image)?;
        FeatureVector::normalized(pre.into_iter().map(f64::tanh).collect())
    }

    fn input_gradient(&self, image: &Image, feature_cograd: &[f64]) -> Result<GradientImage> {
        self.check_input(image)?;
        if feature_cograd.len() != self.feature_dim {
            return Err(Error::dims(format!(
                "cograd length {} vs feature_dim {}",
                feature_cograd.len(),
                self.feature_dim
            )));
        }

        let pre = self.pre_activations(image)?;
        let z: Vec<f64> = pre.iter().map(|a| a.tanh()).collect();
        let norm: f64 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::ZeroVector);
        }
        let f: Vec<f64> = z.iter().map(|v| v / norm).collect();

        // Normalization Jacobian: d(z/|z|)^T u = (u - f (f.u)) / |z|.
        let fu: f64 = f.iter().zip(feature_cograd).map(|(a, b)| a * b).sum();
        // Then the tanh Jacobian diag(1 - z^2).
        let back: Vec<f64> = z
            .iter()
            .zip(&f)
            .zip(feature_cograd)
            .map(|((zi, fi), ui)| (1.0 - zi * zi) * (ui - fi * fu) / norm)
            .collect();

        let n = self.n_pixels();
        let mut grad = vec![0.0; n];
        for (k, &bk) in back.iter().enumerate() {
            if bk == 0.0 {
                continue;
            }
            let row = &self.weights[k * n..(k + 1) * n];
            for (g, w) in grad.iter_mut().zip(row) {
                *g += bk * w;
            }
        }
        GradientImage::new(self.input_dims(), grad)
    }
}

/// Central finite differences of a scalar objective over every pixel:
/// `(J(x + h e_i) - J(x - h e_i)) / 2h`. Independent gradient oracle used to
/// verify analytic vector-Jacobian products.
pub fn finite_diff_gradient<F>(objective: F, image: &Image, h: f64) -> Result<GradientImage>
where
    F: Fn(&Image) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::invalid("h must be positive"));
    }
    let (w, hh, c) = image.dims();
    let base = image.pixels().to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        // Probe points may leave [0,1] by h; the embedding is defined there.
        let jp = objective(&Image::unclamped(w, hh, c, plus)?)?;
        let jm = objective(&Image::unclamped(w, hh, c, minus)?)?;
        grad[i] = (jp - jm) / (2.0 * h);
    }
    GradientImage::new(image.dims(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    fn image(seed: u64, dims: (usize, usize, usize)) -> Image {
        let d = generate_dataset(1, 2, dims, 0.0, seed).unwrap();
        d.identities[0].1[0].clone()
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let m = ReferenceEmbedder::new((8, 8, 1), 16, 3).unwrap();
        let img = image(1, (8, 8, 1));
        let a = m.embed(&img).unwrap();
        let b = m.embed(&img).unwrap();
        let norm: f64 = a.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = ReferenceEmbedder::new((8, 8, 1), 16, 9).unwrap();
        let b = ReferenceEmbedder::new((8, 8, 1), 16, 9).unwrap();
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let m = ReferenceEmbedder::new((8, 8, 1), 16, 3).unwrap();
        let img = image(1, (4, 4, 1));
        assert!(m.embed(&img).is_err());
        let good = image(1, (8, 8, 1));
        assert!(m.input_gradient(&good, &vec![0.0; 5]).is_err());
    }

    #[test]
    fn zero_cograd_gives_zero_gradient() {
        let m = ReferenceEmbedder::new((8, 8, 1), 16, 3).unwrap();
        let img = image(2, (8, 8, 1));
        let g = m.input_gradient(&img, &vec![0.0; 16]).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn preactivations_stay_unsaturated() {
        // Gaussian(0, 1/n) weights on [0,1] inputs: mean |pre| should sit
        // well below 1, keeping tanh in its responsive range.
        let m = ReferenceEmbedder::new((10, 10, 1), 32, 5).unwrap();
        let d = generate_dataset(50, 2, (10, 10, 1), 0.0, 77).unwrap();
        let mut total = 0.0;
        let mut count = 0usize;
        for (_, _, img) in d.flat_samples().into_iter().take(100) {
            for a in m.pre_activations(img).unwrap() {
                total += a.abs();
                count += 1;
            }
        }
        assert!(total / (count as f64) < 1.0);
    }

    #[test]
    fn basis_cograd_matches_finite_differences() {
        let m = ReferenceEmbedder::new((6, 6, 1), 8, 17).unwrap();
        let img = image(3, (6, 6, 1));
        for k in [0usize, 3, 7] {
            let mut cograd = vec![0.0; 8];
            cograd[k] = 1.0;
            let analytic = m.input_gradient(&img, &cograd).unwrap();
            let numeric = finite_diff_gradient(
                |x| Ok(m.embed(x)?.values()[k]),
                &img,
                1e-4,
            )
            .unwrap();
            let err = max_rel_err(analytic.values(), numeric.values());
            assert!(err <= 1e-4, "component {k}: rel err {err}");
        }
    }

    #[test]
    fn finite_diff_on_linear_and_constant_objectives() {
        let img = image(4, (5, 5, 1));
        let g = finite_diff_gradient(|x| Ok(x.pixels().iter().sum()), &img, 1e-4).unwrap();
        for v in g.values() {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let g0 = finite_diff_gradient(|_| Ok(42.0), &img, 1e-4).unwrap();
        assert!(g0.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dissimilarity_lipschitz_regression() {
        // Recorded desk-scale bound, not a theoretical claim: a 0.003-inf-ball
        // perturbation moves the dissimilarity to a fixed anchor by < 0.05.
        let m = ReferenceEmbedder::new((16, 16, 1), 32, 8).unwrap();
        let d = generate_dataset(10, 2, (16, 16, 1), 0.05, 13).unwrap();
        let anchor = m.embed(&d.identities[0].1[0]).unwrap();
        let mut worst: f64 = 0.0;
        for (idx, (_, samples)) in d.identities.iter().enumerate().skip(1) {
            let img = &samples[0];
            let delta = if idx % 2 == 0 { 0.003 } else { -0.003 };
            let shifted: Vec<f64> = img
                .pixels()
                .iter()
                .map(|p| (p + delta).clamp(0.0, 1.0))
                .collect();
            let shifted = Image::new(16, 16, 1, shifted).unwrap();
            let d0 = crate::metrics::dissimilarity(&m.embed(img).unwrap(), &anchor).unwrap();
            let d1 = crate::metrics::dissimilarity(&m.embed(&shifted).unwrap(), &anchor).unwrap();
            worst = worst.max((d0 - d1).abs());
        }
        assert!(worst < 0.05, "observed {worst}");
    }

    #[test]
    fn model_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let m = ReferenceEmbedder::new((8, 8, 1), 512, 123).unwrap();
        m.save(&path).unwrap();
        let back = ReferenceEmbedder::load(&path).unwrap();
        assert_eq!(back.feature_dim(), 512);
        assert_eq!(back.seed(), 123);
        let img = image(6, (8, 8, 1));
        assert_eq!(m.embed(&img).unwrap().values(), back.embed(&img).unwrap().values());
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .filter(|(_, g)| g.abs() > 1e-8)
            .map(|(x, g)| ((x - g) / g).abs())
            .fold(0.0, f64::max)
    }
}
