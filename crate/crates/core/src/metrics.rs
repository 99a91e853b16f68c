//! Structure-fidelity metrics and the information-hiding diagnostics.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Domain, Image};
use crate::synthbench::{Dataset, Split, StructureMode};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Blur width of the shared high-pass filter.
pub const HIGHPASS_SIGMA: f64 = 2.0;
/// Seed of the Gaussian probe noise.
pub const PROBE_SEED: u64 = 0x5EED_0F_D1A6;

/// Mean and population standard deviation of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Result<Stats> {
        if values.is_empty() {
            return Err(Error::EmptyBatch("statistics of an empty set"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Stats { mean, std: var.sqrt() })
    }
}

/// Normalized 1-D Gaussian taps spanning `len` samples.
pub fn gaussian_kernel(len: usize, sigma: f64) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..len).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable filtering of an `h × w` plane keeping only positions where the
/// window fits (output `(h − n + 1) × (w − n + 1)`).
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, &k);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, &k);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Mean structural similarity over every 11×11 Gaussian window (σ 1.5,
/// K1 0.01, K2 0.03, dynamic range 1), averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "ssim of {}×{}×{} and {}×{}×{} images",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        )));
    }
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {}×{}",
            a.height(),
            a.width()
        )));
    }
    let s: f64 = (0..a.channels())
        .map(|c| ssim_plane(a.plane(c), b.plane(c), a.height(), a.width()))
        .sum();
    Ok(s / a.channels() as f64)
}

fn single_channel_pair(pred: &Image, gt: &Image) -> Result<()> {
    if pred.channels() != 1 || !pred.same_shape(gt) {
        return Err(Error::Shape(format!(
            "depth comparison needs two single-channel images of equal size, got {}×{}×{} and {}×{}×{}",
            pred.channels(),
            pred.height(),
            pred.width(),
            gt.channels(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

/// Root-mean-square depth error on the 8-bit scale.
pub fn rmse_depth(pred: &Image, gt: &Image) -> Result<f64> {
    single_channel_pair(pred, gt)?;
    let mse = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (255.0 * (p - g)).powi(2))
        .sum::<f64>()
        / pred.data().len() as f64;
    Ok(mse.sqrt())
}

/// Per-channel global histogram equalization over 256 levels.
pub fn histogram_equalize(img: &Image) -> Image {
    let hw = img.height() * img.width();
    let mut out = Vec::with_capacity(img.data().len());
    for c in 0..img.channels() {
        let levels: Vec<usize> = img.plane(c).iter().map(|&v| crate::image::quantize(v, 255) as usize).collect();
        let mut cdf = [0usize; 256];
        for &l in &levels {
            cdf[l] += 1;
        }
        for i in 1..256 {
            cdf[i] += cdf[i - 1];
        }
        let cdf_min = *cdf.iter().find(|&&v| v > 0).unwrap_or(&0);
        let denom = (hw - cdf_min) as f64;
        out.extend(levels.iter().map(|&l| {
            if denom > 0.0 {
                (cdf[l] - cdf_min) as f64 / denom
            } else {
                0.0
            }
        }));
    }
    Image::from_clamped(img.domain, img.channels(), img.height(), img.width(), out).expect("shape preserved")
}

/// Gaussian blur of one plane with edge replication, radius ⌈3σ⌉.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k = gaussian_kernel(2 * r as usize + 1, sigma);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (-r..=r).map(|d| k[(d + r) as usize] * plane[y * w + clamp(x as isize + d, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r).map(|d| k[(d + r) as usize] * rows[clamp(y as isize + d, h) * w + x]).sum();
        }
    }
    out
}

/// `x − GaussianBlur(x, σ = 2)` for every channel, flattened channel-first.
pub fn highpass(img: &Image) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    (0..img.channels())
        .flat_map(|c| {
            let p = img.plane(c);
            let blur = gaussian_blur(p, h, w, HIGHPASS_SIGMA);
            p.iter().zip(blur).map(|(x, b)| x - b).collect::<Vec<_>>()
        })
        .collect()
}

/// Pearson correlation; 0 when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / (saa.sqrt() * sbb.sqrt())
}

/// `|pearson(highpass(luminance(v)), highpass(texture))|`.
pub fn leak_correlation(v: &Image, texture: &Image) -> Result<f64> {
    let g = v.luminance();
    if g.height() != texture.height() || g.width() != texture.width() || texture.channels() != 1 {
        return Err(Error::Shape("texture layer does not match the structure output".into()));
    }
    Ok(pearson(&highpass(&g), &highpass(texture)).abs())
}

/// The two translation directions of a model, on network tensors in [−1, 1].
pub trait Translator {
    /// Appearance → structure (`G_vc`).
    fn to_structure(&self, appearance: &Tensor<f32>) -> Result<Tensor<f32>>;
    /// Structure → appearance (`G_oc`).
    fn to_appearance(&self, structure: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// A [`Translator`] built from two closures.
pub struct FnTranslator<F, G> {
    pub structure: F,
    pub appearance: G,
}

impl<F, G> Translator for FnTranslator<F, G>
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
    G: Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
{
    fn to_structure(&self, a: &Tensor<f32>) -> Result<Tensor<f32>> {
        (self.structure)(a)
    }

    fn to_appearance(&self, b: &Tensor<f32>) -> Result<Tensor<f32>> {
        (self.appearance)(b)
    }
}

fn structure_image(model: &dyn Translator, appearance: &Image) -> Result<Image> {
    let t = model.to_structure(&appearance.to_tensor())?;
    Image::from_tensor(&t, 0, Domain::Structure)
}

/// Per-image mean absolute error, on the 8-bit scale, between `v` and
/// `G_vc(G_oc(v))`.
pub fn cycle_depth_accuracy(model: &dyn Translator, structures: &[Image]) -> Result<Stats> {
    let errs = structures
        .iter()
        .map(|v| {
            let x = v.to_tensor::<f32>();
            let back = model.to_structure(&model.to_appearance(&x)?)?;
            if back.shape() != x.shape() {
                return Err(Error::Shape(format!(
                    "cycle output {:?} does not match input {:?}",
                    back.shape(),
                    x.shape()
                )));
            }
            // tensors live in [−1, 1]: one image unit is two tensor units
            let mae = x.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>()
                / x.len() as f64;
            Ok(255.0 * mae / 2.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Stats::of(&errs)
}

/// Texture leak of `G_vc` over (appearance, texture layer) pairs.
pub fn texture_leak_score(model: &dyn Translator, items: &[(Image, Image)]) -> Result<Stats> {
    let scores = items
        .iter()
        .map(|(a, tex)| leak_correlation(&structure_image(model, a)?, tex))
        .collect::<Result<Vec<_>>>()?;
    Stats::of(&scores)
}

/// Mean `|G_oc(v) − G_oc(v + n)|` in image units for `v = G_vc(a)` and
/// `n ~ N(0, ε²)` drawn from a fixed seed; `v + n` is not clamped.
pub fn noise_sensitivity(model: &dyn Translator, appearances: &[Image], eps: f64) -> Result<Stats> {
    if !(eps > 0.0) {
        return Err(Error::Param(format!("probe amplitude must be positive, got {eps}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    // image units → tensor units
    let normal = Normal::new(0.0, 2.0 * eps).expect("positive std");
    let scores = appearances
        .iter()
        .map(|a| {
            let v = model.to_structure(&a.to_tensor())?;
            let clean = model.to_appearance(&v)?;
            let mut noisy_in = v.clone();
            for x in noisy_in.data_mut() {
                *x += normal.sample(&mut rng) as f32;
            }
            let noisy = model.to_appearance(&noisy_in)?;
            let s = clean.data().iter().zip(noisy.data()).map(|(p, q)| (p - q).abs() as f64).sum::<f64>()
                / clean.len().max(1) as f64;
            Ok(s / 2.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Stats::of(&scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseProbe {
    pub eps: f64,
    pub sensitivity: Stats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub checkpoint: String,
    pub mode: StructureMode,
    pub split: Split,
    pub count: usize,
    pub ssim: Stats,
    pub rmse_8bit: Option<Stats>,
    pub cycle_depth_accuracy_8bit: Option<Stats>,
    pub texture_leak: Stats,
    pub noise_sensitivity: Vec<NoiseProbe>,
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Default probe amplitudes for [`evaluate`].
pub const PROBE_EPS: [f64; 2] = [0.01, 0.05];

/// Evaluates `model` on a paired split. SSIM, texture leak and noise
/// sensitivity are computed in both modes; RMSE and cycle depth accuracy in
/// depth mode only.
pub fn evaluate(
    model: &dyn Translator,
    dataset: &Dataset,
    split: Split,
    variant: &str,
    checkpoint: &str,
) -> Result<MetricsReport> {
    let items = dataset.paired(split)?;
    if items.is_empty() {
        return Err(Error::Dataset(format!("split {} is empty", split.dir_name())));
    }
    let mode = dataset.manifest.mode;
    let mut ssims = Vec::new();
    let mut rmses = Vec::new();
    let mut leak_items = Vec::new();
    for item in &items {
        let v = structure_image(model, &item.appearance)?;
        if !v.same_shape(&item.structure) {
            return Err(Error::Shape(format!(
                "model output {}×{}×{} does not match the {} structure images",
                v.channels(),
                v.height(),
                v.width(),
                mode.name()
            )));
        }
        ssims.push(ssim(&v, &item.structure)?);
        if mode == StructureMode::Depth {
            rmses.push(rmse_depth(&v, &item.structure)?);
        }
        let latent = dataset.latent(item)?;
        leak_items.push((item.appearance.clone(), latent.texture_layer));
    }
    let appearances: Vec<Image> = items.iter().map(|i| i.appearance.clone()).collect();
    let structures: Vec<Image> = items.iter().map(|i| i.structure.clone()).collect();
    let noise_sensitivity = PROBE_EPS
        .iter()
        .map(|&eps| {
            Ok(NoiseProbe {
                eps,
                sensitivity: noise_sensitivity(model, &appearances, eps)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        variant: variant.into(),
        checkpoint: checkpoint.into(),
        mode,
        split,
        count: items.len(),
        ssim: Stats::of(&ssims)?,
        rmse_8bit: if mode == StructureMode::Depth { Some(Stats::of(&rmses)?) } else { None },
        cycle_depth_accuracy_8bit: if mode == StructureMode::Depth {
            Some(cycle_depth_accuracy(model, &structures)?)
        } else {
            None
        },
        texture_leak: texture_leak_score(model, &leak_items)?,
        noise_sensitivity,
    })
}

/// Tiles rows of images into one RGB sheet; gray panels are replicated.
/// Every panel must share height and width.
pub fn contact_sheet(rows: &[Vec<Image>]) -> Result<Image> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or(Error::EmptyBatch("contact sheet without panels"))?;
    let (h, w) = (first.height(), first.width());
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (sh, sw) = (rows.len() * h, cols * w);
    let mut data = vec![0.0; 3 * sh * sw];
    for (r, row) in rows.iter().enumerate() {
        for (c, panel) in row.iter().enumerate() {
            if panel.height() != h || panel.width() != w {
                return Err(Error::Shape("contact sheet panels must share their size".into()));
            }
            for ch in 0..3 {
                let src = panel.plane(if panel.channels() == 3 { ch } else { 0 });
                for y in 0..h {
                    let dst = ch * sh * sw + (r * h + y) * sw + c * w;
                    data[dst..dst + w].copy_from_slice(&src[y * w..(y + 1) * w]);
                }
            }
        }
    }
    Image::new(Domain::Structure, 3, sh, sw, data)
}
