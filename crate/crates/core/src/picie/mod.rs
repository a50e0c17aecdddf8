//! Label-free segmentation by clustering per-pixel features under photometric
//! invariance and geometric equivariance constraints.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{ColorJitter, Dataset, Image, Mask};
use crate::error::{config, invalid, shape, Error, Result};
use crate::losses::LossValue;
use crate::metrics::{hungarian_miou, ClusterMatch};
use crate::models::{DifferentiableModel, Mode, Model};
use crate::optim::{Optimizer, OptimizerConfig, ScheduleConfig};
use crate::tensor::Tensor;

pub use crate::data::geometry::GeometricTransform;

/// Colour jitter with positions unchanged; the output stays in `[0, 1]`.
pub fn photometric_transform(image: &Image, jitter: &ColorJitter, seed: u64) -> Image {
    jitter.apply_seeded(image, seed)
}

/// Anything a geometric transform can act on.
pub trait Geometric: Sized {
    fn apply_geometric(&self, t: GeometricTransform) -> Result<Self>;
}

impl<T: Copy + Default> Geometric for crate::data::Plane<T> {
    fn apply_geometric(&self, t: GeometricTransform) -> Result<Self> {
        Ok(t.apply_plane(self))
    }
}

impl Geometric for Tensor {
    fn apply_geometric(&self, t: GeometricTransform) -> Result<Self> {
        t.apply_tensor(self)
    }
}

pub fn apply_geometric<X: Geometric>(t: GeometricTransform, x: &X) -> Result<X> {
    x.apply_geometric(t)
}

/// Per-pixel embeddings of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatureMap {
    /// `B×D×h×w`.
    pub values: Tensor,
    pub geometry: Option<GeometricTransform>,
}

impl PixelFeatureMap {
    pub fn new(values: Tensor, geometry: Option<GeometricTransform>) -> Result<Self> {
        values.dims4()?;
        if !values.all_finite() {
            return Err(Error::NonFinite("pixel features".into()));
        }
        Ok(Self { values, geometry })
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    /// Feature vector of pixel `(y, x)` in image `b`.
    pub fn vector(&self, b: usize, y: usize, x: usize) -> Vec<f64> {
        let s = self.values.shape();
        let (d, h, w) = (s[1], s[2], s[3]);
        (0..d).map(|c| self.values.data()[((b * d + c) * h + y) * w + x]).collect()
    }
}

/// Source of dense per-pixel features.
pub trait PixelExtractor {
    /// `B×C×H×W` images to `B×D×h×w` features.
    fn pixel_features(&self, x: &Tensor) -> Result<Tensor>;
}

impl PixelExtractor for Model {
    fn pixel_features(&self, x: &Tensor) -> Result<Tensor> {
        if !self.spec().family.is_segmenter() {
            return Err(invalid("pixel features need a dense (segmentation) backbone"));
        }
        self.forward(x)
    }
}

/// Mirror padding by `pad` pixels on every side, edge pixels not repeated.
pub fn reflect_pad(t: &Tensor, pad: usize) -> Result<Tensor> {
    let (b, c, h, w) = t.dims4()?;
    if pad == 0 {
        return Ok(t.clone());
    }
    if pad >= h || pad >= w {
        return Err(shape(format!("reflection pad {pad} needs a map larger than {h}×{w}")));
    }
    let (oh, ow) = (h + 2 * pad, w + 2 * pad);
    let mirror = |i: usize, n: usize| {
        let i = i as isize - pad as isize;
        let n = n as isize;
        (if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i }) as usize
    };
    let src = t.data();
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let dst = out.data_mut();
    for plane in 0..b * c {
        for y in 0..oh {
            let sy = mirror(y, h);
            for x in 0..ow {
                dst[(plane * oh + y) * ow + x] = src[(plane * h + sy) * w + mirror(x, w)];
            }
        }
    }
    Ok(out)
}

/// Removes `pad` pixels from every side.
pub fn crop(t: &Tensor, pad: usize) -> Result<Tensor> {
    let (b, c, h, w) = t.dims4()?;
    if 2 * pad >= h || 2 * pad >= w {
        return Err(shape(format!("cannot crop {pad} from {h}×{w}")));
    }
    let (oh, ow) = (h - 2 * pad, w - 2 * pad);
    let src = t.data();
    Ok(Tensor::from_fn(&[b, c, oh, ow], |i| {
        let (plane, r) = (i / (oh * ow), i % (oh * ow));
        src[(plane * h + r / ow + pad) * w + r % ow + pad]
    }))
}

/// Adjoint of [`crop`]: places `t` in the centre of a zero map padded by `pad`.
fn uncrop(t: &Tensor, pad: usize) -> Result<Tensor> {
    let (b, c, h, w) = t.dims4()?;
    let (oh, ow) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let dst = out.data_mut();
    for (i, &v) in t.data().iter().enumerate() {
        let (plane, r) = (i / (h * w), i % (h * w));
        dst[(plane * oh + r / w + pad) * ow + r % w + pad] = v;
    }
    Ok(out)
}

/// Per-image, per-channel zero mean and unit variance (channels with no spread are only centred).
pub fn standardize_images(t: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = t.dims4()?;
    let hw = h * w;
    let mut out = t.clone();
    for plane in out.data_mut().chunks_mut(hw).take(b * c) {
        let mean = plane.iter().sum::<f64>() / hw as f64;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw as f64;
        let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
        for v in plane.iter_mut() {
            *v = (*v - mean) * scale;
        }
    }
    Ok(out)
}

const NORM_EPS: f64 = 1e-3;

/// Scales every pixel's feature vector to (nearly) unit length, `x / √(‖x‖² + ε²)`;
/// returns the map and the smoothed norms.
pub fn normalize_pixels(t: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (b, d, h, w) = t.dims4()?;
    let hw = h * w;
    let mut out = t.clone();
    let mut norms = vec![0.0; b * hw];
    let data = out.data_mut();
    for n in 0..b {
        for p in 0..hw {
            let sq: f64 = (0..d).map(|c| data[(n * d + c) * hw + p].powi(2)).sum();
            let norm = (sq + NORM_EPS * NORM_EPS).sqrt();
            norms[n * hw + p] = norm;
            for c in 0..d {
                data[(n * d + c) * hw + p] /= norm;
            }
        }
    }
    Ok((out, norms))
}

/// Gradient through [`normalize_pixels`]: `(g − (g·u)u)/s` per pixel, with `u = x/s`.
fn normalize_backward(unit: &Tensor, norms: &[f64], grad: &Tensor) -> Result<Tensor> {
    let (b, d, h, w) = unit.dims4()?;
    let hw = h * w;
    let mut out = grad.clone();
    let (u, dst) = (unit.data(), out.data_mut());
    for n in 0..b {
        for p in 0..hw {
            let dot: f64 = (0..d).map(|c| u[(n * d + c) * hw + p] * grad.data()[(n * d + c) * hw + p]).sum();
            for c in 0..d {
                let i = (n * d + c) * hw + p;
                dst[i] = (dst[i] - dot * u[i]) / norms[n * hw + p];
            }
        }
    }
    Ok(out)
}

/// A dense backbone run on a mirror-padded input, its output cropped back and
/// optionally scaled to unit length per pixel. The padding keeps zero-padding
/// artifacts away from the image border.
#[derive(Debug, Clone)]
pub struct PicieExtractor {
    pub model: Model,
    pub pad: usize,
    pub normalize: bool,
    pub standardize: bool,
}

impl PicieExtractor {
    /// The padded network input for a batch of images.
    fn prepare(&self, x: &Tensor) -> Result<Tensor> {
        if self.standardize {
            reflect_pad(&standardize_images(x)?, self.pad)
        } else {
            reflect_pad(x, self.pad)
        }
    }
}

impl PixelExtractor for PicieExtractor {
    fn pixel_features(&self, x: &Tensor) -> Result<Tensor> {
        let f = crop(&self.model.pixel_features(&self.prepare(x)?)?, self.pad)?;
        if self.normalize {
            Ok(normalize_pixels(&f)?.0)
        } else {
            Ok(f)
        }
    }
}

/// A `1×1` linear map, `D×C` weights plus bias; no spatial mixing.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseExtractor {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl PixelExtractor for PointwiseExtractor {
    fn pixel_features(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let d = self.weight.len();
        if self.bias.len() != d || self.weight.iter().any(|r| r.len() != c) {
            return Err(shape(format!("pointwise weights do not map {c} channels to {d}")));
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&[b, d, h, w]);
        let (src, dst) = (x.data(), out.data_mut());
        for n in 0..b {
            for (o, row) in self.weight.iter().enumerate() {
                for p in 0..hw {
                    let mut v = self.bias[o];
                    for (i, wt) in row.iter().enumerate() {
                        v += wt * src[(n * c + i) * hw + p];
                    }
                    dst[(n * d + o) * hw + p] = v;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub k: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl ClusterModel {
    pub fn new(centroids: Vec<Vec<f64>>) -> Result<Self> {
        let k = centroids.len();
        let d = centroids.first().map_or(0, Vec::len);
        if k == 0 || d == 0 || centroids.iter().any(|c| c.len() != d) {
            return Err(invalid("centroids must be a non-empty K×D array"));
        }
        if centroids.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("centroids".into()));
        }
        for i in 0..k {
            for j in 0..i {
                if sq_dist(&centroids[i], &centroids[j]).sqrt() <= 1e-9 {
                    return Err(invalid(format!("centroids {j} and {i} coincide")));
                }
            }
        }
        Ok(Self { centroids, k })
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].len()
    }

    /// Nearest centroid; ties go to the lower id.
    pub fn assign(&self, v: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centroids.iter().enumerate() {
            let d = sq_dist(v, c);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Sum of squared distances to the nearest centroid.
    pub fn objective(&self, points: &[Vec<f64>]) -> f64 {
        points.iter().map(|p| sq_dist(p, &self.centroids[self.assign(p)])).sum()
    }

    /// Cluster id of every pixel, image-major then row-major.
    pub fn assign_map(&self, f: &PixelFeatureMap) -> Result<Vec<u8>> {
        let (b, d, h, w) = f.values.dims4()?;
        if d != self.dim() {
            return Err(shape(format!("{d}-dim features for {}-dim centroids", self.dim())));
        }
        let mut out = Vec::with_capacity(b * h * w);
        for n in 0..b {
            for y in 0..h {
                for x in 0..w {
                    out.push(self.assign(&f.vector(n, y, x)) as u8);
                }
            }
        }
        Ok(out)
    }
}

fn distinct_at_least(points: &[Vec<f64>], k: usize) -> bool {
    let mut seen: Vec<&Vec<f64>> = Vec::with_capacity(k);
    for p in points {
        if !seen.contains(&p) {
            seen.push(p);
            if seen.len() >= k {
                return true;
            }
        }
    }
    false
}

/// k-means++ seeding: each further centre is drawn with probability proportional
/// to its squared distance from the nearest chosen centre.
pub fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Result<ClusterModel> {
    if k == 0 {
        return Err(invalid("k must be positive"));
    }
    if !distinct_at_least(points, k) {
        return Err(invalid(format!("fewer than {k} distinct points to cluster")));
    }
    let mut centres = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let mut r = rng.random_range(0.0..total);
        let mut pick = d2.iter().rposition(|&v| v > 0.0).unwrap_or(0);
        for (i, &v) in d2.iter().enumerate() {
            if v > 0.0 && r < v {
                pick = i;
                break;
            }
            r -= v;
        }
        let c = points[pick].clone();
        for (slot, p) in d2.iter_mut().zip(points) {
            *slot = slot.min(sq_dist(p, &c));
        }
        centres.push(c);
    }
    ClusterModel::new(centres)
}

/// Mini-batch k-means: k-means++ seeding, then `passes` shuffled sweeps over the
/// points in batches of `batch`, each centre moving by `1/count` towards its points.
pub fn minibatch_kmeans(points: &[Vec<f64>], k: usize, passes: usize, batch: usize, seed: u64) -> Result<ClusterModel> {
    if points.iter().any(|p| p.len() != points[0].len()) {
        return Err(shape("points of mixed dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = kmeans_plus_plus(points, k, &mut rng)?;
    let mut counts = vec![0u64; k];
    let mut order: Vec<usize> = (0..points.len()).collect();
    for _ in 0..passes {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch.max(1)) {
            let labels: Vec<usize> = chunk.iter().map(|&i| model.assign(&points[i])).collect();
            for (&i, &c) in chunk.iter().zip(&labels) {
                counts[c] += 1;
                let eta = 1.0 / counts[c] as f64;
                for (m, v) in model.centroids[c].iter_mut().zip(&points[i]) {
                    *m += eta * (v - *m);
                }
            }
        }
    }
    ClusterModel::new(model.centroids)
}

/// Full-batch Lloyd iterations from `init`; returns the model and the objective
/// before each iteration and after the last. Empty clusters keep their centre.
pub fn lloyd(points: &[Vec<f64>], init: &ClusterModel, iters: usize) -> Result<(ClusterModel, Vec<f64>)> {
    let mut model = init.clone();
    let mut trace = vec![model.objective(points)];
    for _ in 0..iters {
        let d = model.dim();
        let mut sums = vec![vec![0.0; d]; model.k];
        let mut counts = vec![0usize; model.k];
        for p in points {
            let c = model.assign(p);
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let centroids = sums
            .into_iter()
            .zip(&counts)
            .zip(&model.centroids)
            .map(|((s, &n), old)| if n == 0 { old.clone() } else { s.iter().map(|v| v / n as f64).collect() })
            .collect();
        model = ClusterModel::new(centroids)?;
        trace.push(model.objective(points));
    }
    Ok((model, trace))
}

/// Clustering loss with gradients for both feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct PicieLoss {
    /// Components `within_1`, `within_2`, `cross_12`, `cross_21`; value is their sum.
    pub value: LossValue,
    pub grad_f1: Tensor,
    pub grad_f2: Tensor,
    pub labels_1: Vec<u8>,
    pub labels_2: Vec<u8>,
}

/// Mean pixel cross-entropy of `f` against `labels` with logits `−‖f − μ_k‖²/τ`;
/// accumulates the gradient into `grad`.
fn centroid_ce(f: &Tensor, labels: &[u8], clusters: &ClusterModel, temperature: f64, grad: &mut Tensor) -> f64 {
    let s = f.shape();
    let (b, d, hw) = (s[0], s[1], s[2] * s[3]);
    let n = (b * hw) as f64;
    let k = clusters.k;
    let mut total = 0.0;
    let mut v = vec![0.0; d];
    let mut logits = vec![0.0; k];
    for img in 0..b {
        for p in 0..hw {
            for (c, slot) in v.iter_mut().enumerate() {
                *slot = f.data()[(img * d + c) * hw + p];
            }
            for (j, mu) in clusters.centroids.iter().enumerate() {
                logits[j] = -sq_dist(&v, mu) / temperature;
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let y = labels[img * hw + p] as usize;
            total += m + z.ln() - logits[y];
            // dCE/dlogit_j = (p_j − [j = y])/n; dlogit_j/df = −2(f − μ_j)/τ
            for (j, mu) in clusters.centroids.iter().enumerate() {
                let coef = ((logits[j] - m).exp() / z - f64::from(u8::from(j == y))) / n * (-2.0 / temperature);
                for c in 0..d {
                    grad.data_mut()[(img * d + c) * hw + p] += coef * (v[c] - mu[c]);
                }
            }
        }
    }
    total / n
}

/// Within-view and cross-view clustering loss. `f1` is the plain view's features
/// with `t` applied afterwards, `f2` the features of the transformed view.
pub fn picie_step_loss(
    f1: &PixelFeatureMap,
    f2: &PixelFeatureMap,
    clusters: &ClusterModel,
    t: GeometricTransform,
) -> Result<PicieLoss> {
    picie_step_loss_with(f1, f2, clusters, t, 1.0)
}

pub fn picie_step_loss_with(
    f1: &PixelFeatureMap,
    f2: &PixelFeatureMap,
    clusters: &ClusterModel,
    t: GeometricTransform,
    temperature: f64,
) -> Result<PicieLoss> {
    if f1.values.shape() != f2.values.shape() {
        return Err(shape(format!("aligned features {:?} vs {:?}", f1.values.shape(), f2.values.shape())));
    }
    for f in [f1, f2] {
        if f.geometry.is_some_and(|g| g != t) {
            return Err(invalid(format!("feature map carries {:?}, step uses {t:?}", f.geometry)));
        }
    }
    if !(temperature > 0.0) {
        return Err(config("temperature must be positive"));
    }
    let labels_1 = clusters.assign_map(f1)?;
    let labels_2 = clusters.assign_map(f2)?;
    let mut grad_f1 = Tensor::zeros(f1.values.shape());
    let mut grad_f2 = Tensor::zeros(f2.values.shape());
    let w1 = centroid_ce(&f1.values, &labels_1, clusters, temperature, &mut grad_f1);
    let w2 = centroid_ce(&f2.values, &labels_2, clusters, temperature, &mut grad_f2);
    let c12 = centroid_ce(&f1.values, &labels_2, clusters, temperature, &mut grad_f1);
    let c21 = centroid_ce(&f2.values, &labels_1, clusters, temperature, &mut grad_f2);
    let mut value = LossValue::single("within_1", w1);
    value.components.insert("within_2".into(), w2);
    value.components.insert("cross_12".into(), c12);
    value.components.insert("cross_21".into(), c21);
    value.value = w1 + w2 + c12 + c21;
    Ok(PicieLoss {
        value,
        grad_f1,
        grad_f2,
        labels_1,
        labels_2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PicieConfig {
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub epochs: usize,
    pub k: usize,
    pub batch_size: usize,
    pub jitter: ColorJitter,
    /// Pixels sampled per image for the per-epoch clustering.
    pub pixels_per_image: usize,
    pub kmeans_passes: usize,
    pub kmeans_batch: usize,
    pub temperature: f64,
    /// Images per forward pass during feature extraction.
    pub extract_batch: usize,
    /// Mirror padding added around each input before feature extraction.
    pub reflect_pad: usize,
    /// Unit-length pixel features.
    pub normalize: bool,
    /// Per-image channel standardization of the network input.
    pub standardize: bool,
}

impl Default for PicieConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::sgd(),
            schedule: ScheduleConfig::step(),
            epochs: 50,
            k: 2,
            batch_size: 8,
            jitter: ColorJitter::default(),
            pixels_per_image: 128,
            kmeans_passes: 5,
            kmeans_batch: 1024,
            temperature: 0.1,
            extract_batch: 16,
            reflect_pad: 8,
            normalize: true,
            standardize: true,
        }
    }
}

impl PicieConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.schedule.validate(self.optimizer.lr)?;
        if self.k < 2 || self.k > u8::MAX as usize {
            return Err(config(format!("cluster count {} outside 2..=255", self.k)));
        }
        if self.batch_size == 0 || self.pixels_per_image == 0 || self.extract_batch == 0 {
            return Err(config("batch sizes and pixel samples must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(config("temperature must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicieEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub within: f64,
    pub cross: f64,
    /// Share of sampled pixels per cluster at the start of the epoch.
    pub cluster_shares: Vec<f64>,
    pub kmeans_objective: f64,
}

#[derive(Debug, Clone)]
pub struct PicieRun {
    pub extractor: PicieExtractor,
    pub clusters: ClusterModel,
    pub history: Vec<PicieEpoch>,
}

fn extract(model: &impl PixelExtractor, images: &[&Image], chunk: usize) -> Result<Vec<Tensor>> {
    images
        .chunks(chunk)
        .map(|c| model.pixel_features(&Image::batch_tensor(c)?))
        .collect()
}

/// Clusters a per-image pixel sample of the current features; errors with
/// [`Error::Collapse`] if every sampled pixel falls in one cluster.
fn recluster(model: &PicieExtractor, images: &[&Image], cfg: &PicieConfig, rng: &mut ChaCha8Rng) -> Result<(ClusterModel, Vec<f64>, f64)> {
    let mut points = Vec::with_capacity(images.len() * cfg.pixels_per_image);
    for f in extract(model, images, cfg.extract_batch)? {
        let fm = PixelFeatureMap::new(f, None)?;
        let s = fm.values.shape().to_vec();
        for b in 0..s[0] {
            for _ in 0..cfg.pixels_per_image {
                points.push(fm.vector(b, rng.random_range(0..s[2]), rng.random_range(0..s[3])));
            }
        }
    }
    let clusters = minibatch_kmeans(&points, cfg.k, cfg.kmeans_passes, cfg.kmeans_batch, rng.random())
        .map_err(|e| Error::Collapse(format!("features cannot support {} clusters: {e}", cfg.k)))?;
    let mut counts = vec![0usize; cfg.k];
    for p in &points {
        counts[clusters.assign(p)] += 1;
    }
    let shares: Vec<f64> = counts.iter().map(|&c| c as f64 / points.len() as f64).collect();
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Collapse(format!(
            "all {} sampled pixels fall in one cluster; the extractor predicts a single segment",
            points.len()
        )));
    }
    let objective = clusters.objective(&points) / points.len() as f64;
    Ok((clusters, shares, objective))
}

/// Alternates per-epoch clustering of the extractor's pixel features with gradient
/// steps on [`picie_step_loss`]. Reads images only.
pub fn train_picie(model: Model, images: &Dataset, cfg: &PicieConfig, seed: u64) -> Result<PicieRun> {
    cfg.validate()?;
    if !model.spec().family.is_segmenter() {
        return Err(invalid("unsupervised segmentation needs a dense backbone"));
    }
    if images.is_empty() {
        return Err(invalid("no images to cluster"));
    }
    let mut ex = PicieExtractor {
        model,
        pad: cfg.reflect_pad,
        normalize: cfg.normalize,
        standardize: cfg.standardize,
    };
    ex.model.set_mode(Mode::Train);
    let imgs: Vec<&Image> = images.images().collect();
    let side = imgs[0].height();
    let square = imgs.iter().all(|i| i.height() == side && i.width() == side);
    let transforms: Vec<GeometricTransform> = GeometricTransform::ALL
        .into_iter()
        .filter(|t| square || !t.swaps_axes())
        .collect();
    let mut opt = Optimizer::new(cfg.optimizer, ex.model.params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..imgs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch, cfg.optimizer.lr);
        let (clusters, shares, objective) = recluster(&ex, &imgs, cfg, &mut rng)?;
        order.shuffle(&mut rng);
        let (mut sum, mut within, mut cross, mut steps) = (0.0, 0.0, 0.0, 0);
        for idx in order.chunks(cfg.batch_size) {
            let t = transforms[rng.random_range(0..transforms.len())];
            let v1: Vec<Image> = idx.iter().map(|&i| photometric_transform(imgs[i], &cfg.jitter, rng.random())).collect();
            let v2: Vec<Image> = idx
                .iter()
                .map(|&i| t.apply_plane(&photometric_transform(imgs[i], &cfg.jitter, rng.random())))
                .collect();
            let pad = ex.pad;
            let mut g = Graph::new();
            let bound = ex.model.params().bind(&mut g);
            let x1 = g.constant(ex.prepare(&Image::batch_tensor(&v1.iter().collect::<Vec<_>>())?)?);
            let x2 = g.constant(ex.prepare(&Image::batch_tensor(&v2.iter().collect::<Vec<_>>())?)?);
            let y1 = ex.model.forward_with(&mut g, &bound, x1)?;
            let y2 = ex.model.forward_with(&mut g, &bound, x2)?;
            let (r1, r2) = (crop(g.value(y1), pad)?, crop(g.value(y2), pad)?);
            let (n1, s1) = if ex.normalize { normalize_pixels(&r1)? } else { (r1, Vec::new()) };
            let (n2, s2) = if ex.normalize { normalize_pixels(&r2)? } else { (r2, Vec::new()) };
            let f1 = PixelFeatureMap::new(t.apply_tensor(&n1)?, Some(t))?;
            let f2 = PixelFeatureMap::new(n2.clone(), Some(t))?;
            let loss = picie_step_loss_with(&f1, &f2, &clusters, t, cfg.temperature)?;
            if !loss.value.value.is_finite() {
                return Err(Error::NonFinite(format!("clustering loss at epoch {epoch}")));
            }
            let (mut d1, mut d2) = (t.inverse().apply_tensor(&loss.grad_f1)?, loss.grad_f2.clone());
            if ex.normalize {
                d1 = normalize_backward(&n1, &s1, &d1)?;
                d2 = normalize_backward(&n2, &s2, &d2)?;
            }
            let (seed1, seed2) = (uncrop(&d1, pad)?, uncrop(&d2, pad)?);
            let mut grads = g.backward_many(vec![(y1, seed1), (y2, seed2)])?;
            let per = bound.grads(&mut grads, ex.model.params());
            opt.step(ex.model.params_mut(), &per, lr)?;
            let c = &loss.value.components;
            sum += loss.value.value;
            within += c["within_1"] + c["within_2"];
            cross += c["cross_12"] + c["cross_21"];
            steps += 1;
        }
        let n = steps.max(1) as f64;
        history.push(PicieEpoch {
            epoch,
            lr,
            loss: sum / n,
            within: within / n,
            cross: cross / n,
            cluster_shares: shares,
            kmeans_objective: objective,
        });
    }
    let (clusters, _, _) = recluster(&ex, &imgs, cfg, &mut rng)?;
    ex.model.set_mode(Mode::Eval);
    Ok(PicieRun {
        extractor: ex,
        clusters,
        history,
    })
}

/// Nearest-centroid cluster map, resized (nearest) to the image resolution.
pub fn segment_unsupervised(model: &impl PixelExtractor, clusters: &ClusterModel, image: &Image) -> Result<Mask> {
    let f = PixelFeatureMap::new(model.pixel_features(&Image::batch_tensor(&[image])?)?, None)?;
    let labels = clusters.assign_map(&f)?;
    let s = f.values.shape();
    let (fh, fw) = (s[2], s[3]);
    let (h, w, _) = image.dims();
    Ok(Mask::from_fn(h, w, 1, |y, x, _| labels[(y * fh / h) * fw + x * fw / w]))
}

/// Hungarian-matched IoU of the cluster maps against ground-truth masks, pooled over all pixels.
pub fn evaluate_unsupervised(
    model: &impl PixelExtractor,
    clusters: &ClusterModel,
    images: &[&Image],
    masks: &[&Mask],
    classes: usize,
) -> Result<ClusterMatch> {
    if images.len() != masks.len() || images.is_empty() {
        return Err(invalid("need one mask per image"));
    }
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for (img, m) in images.iter().zip(masks) {
        if img.height() != m.height() || img.width() != m.width() {
            return Err(shape("mask and image sizes differ"));
        }
        pred.extend_from_slice(segment_unsupervised(model, clusters, img)?.data());
        gt.extend_from_slice(m.data());
    }
    hungarian_miou(&pred, &gt, clusters.k, classes)
}

#[cfg(test)]
mod tests;
