//! Generative decoder and pixel-level losses.
//!
//! The decoder turns a unit embedding back into an image. Its target is the
//! momentum mean image of the sample's identity, and its loss is
//! `GLoss = L1 + (1 − SSIM) / 2`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{LatseError, Result};
use crate::net::{EmbeddingBatch, ForwardCache, NetGrads, NetParams};

/// Image height and width; images are stored flattened row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Decoded images plus the forward state needed for backprop.
#[derive(Debug, Clone)]
pub struct GenOutput {
    /// N × H·W, every pixel in (0, 1).
    pub images: Array2<f64>,
    pub cache: ForwardCache,
}

pub fn decode(gen: &NetParams, emb: &EmbeddingBatch) -> Result<GenOutput> {
    if gen.topology.input_dim() != emb.dim() {
        return Err(LatseError::Shape(format!(
            "decoder expects {}-dim embeddings, got {}",
            gen.topology.input_dim(),
            emb.dim()
        )));
    }
    let cache = gen.forward(&emb.vectors)?;
    Ok(GenOutput {
        images: cache.output().clone(),
        cache,
    })
}

/// Decoder parameter gradients and ∂L/∂(embedding) for given pixel gradients.
pub fn decoder_backward(
    gen: &NetParams,
    out: &GenOutput,
    grad_pixels: &Array2<f64>,
) -> (NetGrads, Array2<f64>) {
    let (grads, input) = gen.backward(&out.cache, grad_pixels, true);
    (grads, input.expect("input gradient requested"))
}

/// Momentum mean image of one identity.
#[derive(Debug, Clone, PartialEq)]
pub struct GenTarget {
    pub identity: usize,
    pub image: Array1<f64>,
    pub momentum: f64,
    pub initialized: bool,
}

impl GenTarget {
    pub fn new(identity: usize, pixels: usize, momentum: f64) -> Self {
        Self {
            identity,
            image: Array1::zeros(pixels),
            momentum,
            initialized: false,
        }
    }

    /// `y ← (1 − momentum)·x + momentum·y`; the first sample is copied verbatim.
    pub fn update(&mut self, identity: usize, sample: ArrayView1<'_, f64>) -> Result<()> {
        if identity != self.identity {
            return Err(LatseError::IdentityMismatch {
                expected: self.identity,
                found: identity,
            });
        }
        if sample.len() != self.image.len() {
            return Err(LatseError::Shape(format!(
                "sample has {} pixels, target {}",
                sample.len(),
                self.image.len()
            )));
        }
        if !self.initialized {
            self.image.assign(&sample);
            self.initialized = true;
            return Ok(());
        }
        let m = self.momentum;
        self.image
            .iter_mut()
            .zip(sample.iter())
            .for_each(|(y, &x)| *y = (1.0 - m) * x + m * *y);
        Ok(())
    }
}

/// Functional form of [`GenTarget::update`].
pub fn update_target(target: &GenTarget, identity: usize, sample: ArrayView1<'_, f64>) -> Result<GenTarget> {
    let mut next = target.clone();
    next.update(identity, sample)?;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimConfig {
    /// Odd side length of the Gaussian window.
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
    pub dynamic_range: f64,
    /// When false, GLoss reduces to its L1 term.
    pub enabled: bool,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self::for_range(1.0)
    }
}

impl SsimConfig {
    /// Window 11, sigma 1.5, `c1 = (0.01·L)²`, `c2 = (0.03·L)²`.
    pub fn for_range(dynamic_range: f64) -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            c1: (0.01 * dynamic_range).powi(2),
            c2: (0.03 * dynamic_range).powi(2),
            dynamic_range,
            enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(LatseError::Config(format!(
                "ssim window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0 && self.sigma > 0.0) {
            return Err(LatseError::Config("ssim c1, c2, sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps. Images smaller than the window use the
/// largest odd window that fits.
fn gaussian_taps(cfg: &SsimConfig, shape: ImageShape) -> Vec<f64> {
    let fit = shape.height.min(shape.width);
    let size = if cfg.window <= fit {
        cfg.window
    } else if fit % 2 == 1 {
        fit
    } else {
        fit - 1
    };
    let half = (size / 2) as f64;
    let mut taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * cfg.sigma * cfg.sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Separable "valid" Gaussian filter.
fn filter_valid(img: &[f64], shape: ImageShape, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (h, w) = (shape.height, shape.width);
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        let row = &img[y * w..(y + 1) * w];
        let dst = &mut tmp[y * wo..(y + 1) * wo];
        for (u, &t) in taps.iter().enumerate() {
            dst.iter_mut().zip(&row[u..u + wo]).for_each(|(d, s)| *d += t * s);
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for (v, &t) in taps.iter().enumerate() {
            let src = &tmp[(y + v) * wo..(y + v + 1) * wo];
            let dst = &mut out[y * wo..(y + 1) * wo];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += t * s);
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a map back onto the image grid.
fn filter_valid_adjoint(map: &[f64], shape: ImageShape, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (h, w) = (shape.height, shape.width);
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..ho {
        let src = &map[y * wo..(y + 1) * wo];
        for (v, &t) in taps.iter().enumerate() {
            let dst = &mut tmp[(y + v) * wo..(y + v + 1) * wo];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += t * s);
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let src = &tmp[y * wo..(y + 1) * wo];
        let row = &mut out[y * w..(y + 1) * w];
        for (u, &t) in taps.iter().enumerate() {
            row[u..u + wo].iter_mut().zip(src).for_each(|(d, s)| *d += t * s);
        }
    }
    out
}

struct SsimParts {
    value: f64,
    /// ∂SSIM/∂a when requested.
    grad_a: Option<Vec<f64>>,
}

fn ssim_parts(a: &[f64], b: &[f64], shape: ImageShape, cfg: &SsimConfig, want_grad: bool) -> SsimParts {
    let taps = gaussian_taps(cfg, shape);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, shape, &taps);
    let mu_b = filter_valid(b, shape, &taps);
    let s_aa = filter_valid(&aa, shape, &taps);
    let s_bb = filter_valid(&bb, shape, &taps);
    let s_ab = filter_valid(&ab, shape, &taps);
    let count = mu_a.len();
    let inv = 1.0 / count as f64;
    let (c1, c2) = (cfg.c1, cfg.c2);

    let mut total = 0.0;
    let mut d_mu = vec![0.0; if want_grad { count } else { 0 }];
    let mut d_saa = d_mu.clone();
    let mut d_sab = d_mu.clone();
    for p in 0..count {
        let (ma, mb) = (mu_a[p], mu_b[p]);
        let var_a = s_aa[p] - ma * ma;
        let var_b = s_bb[p] - mb * mb;
        let cov = s_ab[p] - ma * mb;
        let n1 = 2.0 * ma * mb + c1;
        let n2 = 2.0 * cov + c2;
        let d1 = ma * ma + mb * mb + c1;
        let d2 = var_a + var_b + c2;
        let s = n1 * n2 / (d1 * d2);
        total += s;
        if want_grad {
            d_mu[p] = inv * s * (2.0 * mb / n1 - 2.0 * mb / n2 - 2.0 * ma / d1 + 2.0 * ma / d2);
            d_saa[p] = -inv * s / d2;
            d_sab[p] = inv * s * 2.0 / n2;
        }
    }
    let grad_a = want_grad.then(|| {
        let g_mu = filter_valid_adjoint(&d_mu, shape, &taps);
        let g_aa = filter_valid_adjoint(&d_saa, shape, &taps);
        let g_ab = filter_valid_adjoint(&d_sab, shape, &taps);
        (0..a.len())
            .map(|q| g_mu[q] + 2.0 * a[q] * g_aa[q] + b[q] * g_ab[q])
            .collect()
    });
    SsimParts {
        value: total * inv,
        grad_a,
    }
}

fn check_pair(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Result<ImageShape> {
    if a.dim() != b.dim() {
        return Err(LatseError::Shape(format!(
            "ssim operands {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (h, w) = a.dim();
    if h == 0 || w == 0 {
        return Err(LatseError::Empty("zero-sized image".into()));
    }
    Ok(ImageShape::new(h, w))
}

/// Mean structural similarity over all fully contained Gaussian windows.
pub fn ssim(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, cfg: &SsimConfig) -> Result<f64> {
    let shape = check_pair(&a, &b)?;
    let a: Vec<f64> = a.iter().copied().collect();
    let b: Vec<f64> = b.iter().copied().collect();
    Ok(ssim_parts(&a, &b, shape, cfg, false).value)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    cfg: &SsimConfig,
) -> Result<(f64, Array2<f64>)> {
    let shape = check_pair(&a, &b)?;
    let av: Vec<f64> = a.iter().copied().collect();
    let bv: Vec<f64> = b.iter().copied().collect();
    let parts = ssim_parts(&av, &bv, shape, cfg, true);
    let grad = Array2::from_shape_vec((shape.height, shape.width), parts.grad_a.unwrap())
        .expect("shape preserved");
    Ok((parts.value, grad))
}

/// `(1 − SSIM) / 2`.
pub fn sim_loss(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, cfg: &SsimConfig) -> Result<f64> {
    Ok((1.0 - ssim(a, b, cfg)?) / 2.0)
}

/// Batch generative loss.
#[derive(Debug, Clone)]
pub struct GLoss {
    /// Mean over samples of `L1 + SimLoss`.
    pub loss: f64,
    pub l1: f64,
    pub sim: f64,
    /// ∂loss/∂(generated pixels), N × H·W.
    pub grad: Array2<f64>,
}

/// GLoss between generated images and their targets, both N × H·W.
pub fn gloss(
    generated: &Array2<f64>,
    targets: &Array2<f64>,
    shape: ImageShape,
    cfg: &SsimConfig,
) -> Result<GLoss> {
    if generated.dim() != targets.dim() || generated.ncols() != shape.pixels() {
        return Err(LatseError::Shape(format!(
            "generated {:?}, targets {:?}, image {}x{}",
            generated.dim(),
            targets.dim(),
            shape.height,
            shape.width
        )));
    }
    let n = generated.nrows();
    if n == 0 {
        return Err(LatseError::Empty("empty image batch".into()));
    }
    let inv_n = 1.0 / n as f64;
    let inv_p = 1.0 / shape.pixels() as f64;
    let mut grad = Array2::zeros(generated.dim());
    let (mut l1_total, mut sim_total) = (0.0, 0.0);
    for i in 0..n {
        let g = generated.row(i);
        let t = targets.row(i);
        let g = g.as_slice().map(<[f64]>::to_vec).unwrap_or_else(|| g.to_vec());
        let t = t.as_slice().map(<[f64]>::to_vec).unwrap_or_else(|| t.to_vec());
        let mut row = grad.row_mut(i);
        let mut l1 = 0.0;
        for (q, (gv, tv)) in g.iter().zip(&t).enumerate() {
            let d = gv - tv;
            l1 += d.abs();
            // subgradient 0 at a tie
            row[q] = if d > 0.0 {
                inv_p * inv_n
            } else if d < 0.0 {
                -inv_p * inv_n
            } else {
                0.0
            };
        }
        l1_total += l1 * inv_p;
        if cfg.enabled {
            let parts = ssim_parts(&g, &t, shape, cfg, true);
            sim_total += (1.0 - parts.value) / 2.0;
            for (r, d) in row.iter_mut().zip(parts.grad_a.unwrap()) {
                *r += -0.5 * d * inv_n;
            }
        }
    }
    let l1 = l1_total * inv_n;
    let sim = sim_total * inv_n;
    Ok(GLoss {
        loss: l1 + sim,
        l1,
        sim,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{fd_oracle, max_rel_error, Topology};
    use crate::rng;
    use ndarray::{array, Array2};
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::rng(seed);
        Array2::from_shape_simple_fn((h, w), || r.gen_range(0.0..1.0))
    }

    #[test]
    fn ssim_identity() {
        let a = random_image(16, 16, 1);
        let v = ssim(a.view(), a.view(), &SsimConfig::default()).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        assert!(sim_loss(a.view(), a.view(), &SsimConfig::default()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_images() {
        let cfg = SsimConfig {
            c1: 1e-4,
            ..SsimConfig::default()
        };
        let a = Array2::zeros((16, 16));
        let b = Array2::ones((16, 16));
        let v = ssim(a.view(), b.view(), &cfg).unwrap();
        assert!((v - 1e-4 / (1.0 + 1e-4)).abs() < 1e-12, "{v}");
    }

    #[test]
    fn ssim_symmetric_and_bounded() {
        for seed in 0..10 {
            let a = random_image(14, 13, seed);
            let b = random_image(14, 13, seed + 100);
            let cfg = SsimConfig::default();
            let ab = ssim(a.view(), b.view(), &cfg).unwrap();
            let ba = ssim(b.view(), a.view(), &cfg).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn ssim_shape_mismatch() {
        let a = random_image(4, 4, 1);
        let b = random_image(4, 5, 1);
        assert!(ssim(a.view(), b.view(), &SsimConfig::default()).is_err());
    }

    #[test]
    fn small_images_shrink_window() {
        let a = random_image(4, 6, 2);
        let b = random_image(4, 6, 3);
        let v = ssim(a.view(), b.view(), &SsimConfig::default()).unwrap();
        assert!(v.is_finite());
        assert_eq!(gaussian_taps(&SsimConfig::default(), ImageShape::new(4, 6)).len(), 3);
    }

    #[test]
    fn adjoint_matches_filter() {
        // <F x, y> == <x, F^T y>
        let shape = ImageShape::new(12, 15);
        let taps = gaussian_taps(&SsimConfig::default(), shape);
        let x = random_image(12, 15, 4).into_raw_vec_and_offset().0;
        let y = random_image(2, 5, 5).into_raw_vec_and_offset().0;
        let fx = filter_valid(&x, shape, &taps);
        let fty = filter_valid_adjoint(&y, shape, &taps);
        let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&fty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn ssim_gradient_matches_fd() {
        let cfg = SsimConfig::default();
        for seed in 0..5 {
            let a = random_image(13, 12, seed);
            let b = random_image(13, 12, seed + 50);
            let (_, g) = ssim_with_grad(a.view(), b.view(), &cfg).unwrap();
            let numeric = fd_oracle(
                |p| {
                    let img = Array2::from_shape_vec((13, 12), p.to_vec()).unwrap();
                    ssim(img.view(), b.view(), &cfg).unwrap()
                },
                a.as_slice().unwrap(),
                1e-6,
            );
            let err = max_rel_error(g.as_slice().unwrap(), &numeric);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn target_updates() {
        let mut t = GenTarget::new(3, 4, 0.9);
        t.update(3, Array1::zeros(4).view()).unwrap();
        t.update(3, Array1::ones(4).view()).unwrap();
        for &v in t.image.iter() {
            assert!((v - 0.1).abs() < 1e-15);
        }
        let x = array![0.2, 0.4, 0.6, 0.8];
        let mut z = t.clone();
        z.momentum = 0.0;
        z.update(3, x.view()).unwrap();
        assert_eq!(z.image, x);
        let fixed = update_target(&z, 3, x.view()).unwrap();
        assert_eq!(fixed.image, x);
        assert!(matches!(
            t.update(4, x.view()),
            Err(LatseError::IdentityMismatch { expected: 3, found: 4 })
        ));
    }

    #[test]
    fn first_observation_is_copied() {
        let mut t = GenTarget::new(0, 2, 0.9);
        t.update(0, array![0.3, 0.7].view()).unwrap();
        assert!(t.initialized);
        assert_eq!(t.image, array![0.3, 0.7]);
    }

    #[test]
    fn gloss_examples() {
        let cfg = SsimConfig::default();
        let x = random_image(2, 144, 8);
        let g = gloss(&x, &x, ImageShape::new(12, 12), &cfg).unwrap();
        assert!(g.loss.abs() < 1e-12);
        assert!(g.grad.iter().all(|v| v.abs() < 1e-12));

        let off = SsimConfig {
            enabled: false,
            ..cfg
        };
        let g = gloss(&array![[0.0, 1.0]], &array![[1.0, 1.0]], ImageShape::new(1, 2), &off).unwrap();
        assert_eq!(g.l1, 0.5);
        assert_eq!(g.loss, 0.5);
        assert!(gloss(&array![[0.0, 1.0]], &array![[1.0]], ImageShape::new(1, 2), &off).is_err());
    }

    #[test]
    fn zero_decoder_outputs_half() {
        let dec = NetParams::zeros(Topology::decoder(3, &[4], 6)).unwrap();
        let emb = EmbeddingBatch::normalize(&array![[1.0, 2.0, 3.0]]).unwrap();
        let out = decode(&dec, &emb).unwrap();
        assert!(out.images.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn decode_identical_inputs() {
        let dec = NetParams::init(Topology::decoder(3, &[4], 6), 5).unwrap();
        let emb = EmbeddingBatch::normalize(&array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]).unwrap();
        let out = decode(&dec, &emb).unwrap();
        assert_eq!(out.images.row(0), out.images.row(1));
        let bad = EmbeddingBatch::normalize(&array![[1.0, 2.0]]).unwrap();
        assert!(decode(&dec, &bad).is_err());
    }
}
