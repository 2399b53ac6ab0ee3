//! Deterministic generator of labeled synthetic mass images, plus a
//! rule-based label oracle that never shares parameters with the learned
//! system.
//!
//! Shape controls the support: round (axis ratio ~1), oval (ratio 1.5-2.2),
//! irregular (radial polygon with >=25% per-vertex radius jitter). Margin
//! controls the boundary profile: circumscribed (hard edge, 90-10 falloff
//! under 1 px), ill-defined (smooth falloff of 6+ px), spiculated (8-16
//! radial spikes of length >= 8 px on a hard boundary).

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{BiradsDescription, DatasetRecord, MassImage, Taxonomy, IMAGE_SIZE};
use crate::imageops::box_blur3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Per-category record count override (margin index, shape index, count).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCount {
    pub margin: usize,
    pub shape: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub per_category_count: usize,
    /// Overrides replace the base count for specific categories; zero is
    /// allowed here so census-style datasets can leave categories empty.
    pub overrides: Vec<CategoryCount>,
    pub noise_level: f64,
    pub image_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            per_category_count: 20,
            overrides: Vec::new(),
            noise_level: 0.02,
            image_size: IMAGE_SIZE,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.per_category_count == 0 {
            return Err(SynthError::Contract(
                "per_category_count must be >= 1".into(),
            ));
        }
        if !(0.0..=0.2).contains(&self.noise_level) {
            return Err(SynthError::Contract(format!(
                "noise_level {} outside [0, 0.2]",
                self.noise_level
            )));
        }
        if self.image_size != IMAGE_SIZE {
            return Err(SynthError::Contract(format!(
                "image_size must be {IMAGE_SIZE}"
            )));
        }
        Ok(())
    }

    fn count_for(&self, margin: usize, shape: usize) -> usize {
        self.overrides
            .iter()
            .find(|o| o.margin == margin && o.shape == shape)
            .map(|o| o.count)
            .unwrap_or(self.per_category_count)
    }
}

// Margin profile constants (logistic edge softness, px).
const EDGE_SOFT_HARD: f64 = 0.2;
const EDGE_SOFT_BLUR_LO: f64 = 1.7;
const EDGE_SOFT_BLUR_HI: f64 = 2.2;
// Spike geometry.
const SPIKE_LEN_LO: f64 = 8.0;
const SPIKE_LEN_HI: f64 = 13.0;
const SPIKE_HALFWIDTH_LO: f64 = 0.03;
const SPIKE_HALFWIDTH_HI: f64 = 0.055;

/// Star-convex radial support description.
struct Support {
    theta0: f64,
    kind: SupportKind,
}

enum SupportKind {
    Ellipse { a: f64, b: f64 },
    Polygon { radii: Vec<f64> },
}

impl Support {
    /// Boundary radius along direction `theta` (image coordinates).
    fn radius(&self, theta: f64) -> f64 {
        let phi = theta - self.theta0;
        match &self.kind {
            SupportKind::Ellipse { a, b } => {
                let c = phi.cos() * b;
                let s = phi.sin() * a;
                a * b / (c * c + s * s).sqrt()
            }
            SupportKind::Polygon { radii } => {
                let v = radii.len() as f64;
                let t = (phi.rem_euclid(std::f64::consts::TAU)) / std::f64::consts::TAU * v;
                let i = t.floor() as usize % radii.len();
                let j = (i + 1) % radii.len();
                let frac = t - t.floor();
                radii[i] * (1.0 - frac) + radii[j] * frac
            }
        }
    }
}

struct Spike {
    angle: f64,
    len: f64,
    halfwidth: f64,
}

/// RMS of a cyclic sequence after removing its mean and first two Fourier
/// harmonics.
fn non_ellipse_rms(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mut cleaned: Vec<f64> = values.to_vec();
    for h in 0..=2usize {
        let mut re = 0.0;
        let mut im = 0.0;
        for (k, &v) in values.iter().enumerate() {
            let ang = std::f64::consts::TAU * h as f64 * k as f64 / n;
            re += v * ang.cos();
            im += v * ang.sin();
        }
        re /= n;
        im /= n;
        let scale = if h == 0 { 1.0 } else { 2.0 };
        for (k, c) in cleaned.iter_mut().enumerate() {
            let ang = std::f64::consts::TAU * h as f64 * k as f64 / n;
            *c -= scale * (re * ang.cos() + im * ang.sin());
        }
    }
    (cleaned.iter().map(|v| v * v).sum::<f64>() / n).sqrt()
}

fn wrap_angle(d: f64) -> f64 {
    let mut d = d.rem_euclid(std::f64::consts::TAU);
    if d > std::f64::consts::PI {
        d -= std::f64::consts::TAU;
    }
    d
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Renders one labeled synthetic mass. Deterministic given the rng state.
pub fn synth_mass(
    margin: usize,
    shape: usize,
    noise_level: f64,
    rng: &mut impl Rng,
) -> MassImage {
    let s = IMAGE_SIZE as f64;
    let cx = s / 2.0 + uniform(rng, -2.0, 2.0);
    let cy = s / 2.0 + uniform(rng, -2.0, 2.0);
    let r0 = uniform(rng, 11.0, 15.0);
    let theta0 = uniform(rng, 0.0, std::f64::consts::PI);
    let core = uniform(rng, 0.75, 0.9);
    let bg = uniform(rng, 0.04, 0.1);

    let kind = match shape {
        // round: axis ratio within 5% of 1
        0 => {
            let ratio = uniform(rng, 0.95, 1.05);
            SupportKind::Ellipse {
                a: r0 * ratio.sqrt(),
                b: r0 / ratio.sqrt(),
            }
        }
        // oval: clearly elongated
        1 => {
            let ratio = uniform(rng, 1.6, 2.2);
            SupportKind::Ellipse {
                a: r0 * ratio.sqrt(),
                b: r0 / ratio.sqrt(),
            }
        }
        // irregular: radial polygon with per-vertex jitter >= 25%; redraw
        // until the jitter carries real non-ellipse structure (content an
        // ellipse fit cannot absorb: everything beyond the mean, the
        // center-shift harmonic, and the ellipticity harmonic)
        _ => {
            let nv = 8 + (rng.random::<u32>() % 4) as usize;
            let radii: Vec<f64> = loop {
                let jitter: Vec<f64> = (0..nv).map(|_| uniform(rng, -0.5, 0.5)).collect();
                let mean = jitter.iter().sum::<f64>() / nv as f64;
                if mean.abs() <= 0.15 && non_ellipse_rms(&jitter) >= 0.24 {
                    break jitter.into_iter().map(|j| r0 * (1.0 + j)).collect();
                }
            };
            SupportKind::Polygon { radii }
        }
    };
    let support = Support { theta0, kind };

    let (edge_soft, spikes) = match margin {
        // circumscribed: hard edge
        0 => (EDGE_SOFT_HARD, Vec::new()),
        // ill-defined: wide smooth falloff
        1 => (uniform(rng, EDGE_SOFT_BLUR_LO, EDGE_SOFT_BLUR_HI), Vec::new()),
        // spiculated: hard edge plus 8..=16 radial spikes, radiating from
        // jittered equally spaced slots so no two spikes merge
        _ => {
            let n_spikes = 8 + (rng.random::<u32>() % 9) as usize;
            let slot = std::f64::consts::TAU / n_spikes as f64;
            let rotation = uniform(rng, 0.0, std::f64::consts::TAU);
            let spikes = (0..n_spikes)
                .map(|j| Spike {
                    angle: rotation + (j as f64 + uniform(rng, -0.3, 0.3)) * slot,
                    len: uniform(rng, SPIKE_LEN_LO, SPIKE_LEN_HI),
                    halfwidth: uniform(rng, SPIKE_HALFWIDTH_LO, SPIKE_HALFWIDTH_HI),
                })
                .collect();
            (EDGE_SOFT_HARD, spikes)
        }
    };

    let mut pixels = Array2::from_shape_fn((IMAGE_SIZE, IMAGE_SIZE), |(y, x)| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let r = (dx * dx + dy * dy).sqrt();
        let theta = dy.atan2(dx);
        let mut boundary = support.radius(theta);
        for sp in &spikes {
            let u = wrap_angle(theta - sp.angle) / sp.halfwidth;
            if u.abs() < 1.0 {
                let bump = (1.0 - u * u).powi(2);
                boundary += sp.len * bump;
            }
        }
        let d = boundary - r; // positive inside
        bg + (core - bg) / (1.0 + (-d / edge_soft).exp())
    });

    if noise_level > 0.0 {
        let dist = Normal::new(0.0, noise_level).expect("positive std");
        pixels.mapv_inplace(|p| p + dist.sample(rng));
    }
    MassImage::from_clamped(pixels).expect("clamped render")
}

/// Builds the full labeled dataset: `count` records per category in
/// (margin, shape) row-major order, each rendered from its own
/// deterministic rng stream so category shards are order-independent.
pub fn synth_dataset(
    config: &SynthConfig,
    taxonomy: &Taxonomy,
) -> Result<Vec<DatasetRecord>, SynthError> {
    config.validate()?;
    for o in &config.overrides {
        if o.margin >= taxonomy.margin_count() || o.shape >= taxonomy.shape_count() {
            return Err(SynthError::Contract(format!(
                "override ({}, {}) outside the taxonomy",
                o.margin, o.shape
            )));
        }
    }
    let mut records = Vec::new();
    let mut stream: u64 = 0;
    for margin in 0..taxonomy.margin_count() {
        for shape in 0..taxonomy.shape_count() {
            let count = config.count_for(margin, shape);
            for i in 0..count {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(stream + i as u64);
                let image = synth_mass(margin, shape, config.noise_level, &mut rng);
                records.push(DatasetRecord {
                    id: format!(
                        "{}-{}-{i:03}",
                        taxonomy.margin_names()[margin],
                        taxonomy.shape_names()[shape]
                    ),
                    image,
                    description: BiradsDescription { margin, shape },
                });
            }
            // fixed stream stride per category keeps shards independent of
            // other categories' counts
            stream += 1 << 20;
        }
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Rule-based oracle
// ---------------------------------------------------------------------------

/// Decision thresholds for [`oracle_label`].
const ERODE_RADIUS: f64 = 4.0;
const SPIKE_EXCESS_PX: f64 = 4.0;
const SPIKE_MIN_COUNT: usize = 4;
const SPIKE_RUN_MIN: usize = 2;
const SPIKE_RUN_MAX: usize = 12;
const EDGE_WIDTH_HARD_PX: f64 = 2.6;
const RESIDUAL_IRREGULAR: f64 = 0.06;
const RATIO_OVAL: f64 = 1.3;

/// Geometry measurements extracted from an image; the oracle's decisions
/// are thresholds over these.
#[derive(Debug, Clone, Copy)]
pub struct OracleMeasurements {
    /// Count of narrow radial protrusions above the smoothed boundary.
    pub spike_count: usize,
    /// Median 75%-to-25% intensity crossing distance along rays, px.
    pub edge_width: f64,
    /// Axis ratio of the moments-fitted ellipse (>= 1).
    pub axis_ratio: f64,
    /// RMS deviation of the smoothed boundary radius from the fitted
    /// ellipse, relative to the mean radius.
    pub ellipse_residual: f64,
    /// Whether a usable blob was found at all.
    pub valid: bool,
}

fn sample_bilinear(img: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    let yc = y.clamp(0.0, (h - 1) as f64);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = yc - y0 as f64;
    let fx = xc - x0 as f64;
    img[[y0, x0]] * (1.0 - fy) * (1.0 - fx)
        + img[[y0, x1]] * (1.0 - fy) * fx
        + img[[y1, x0]] * fy * (1.0 - fx)
        + img[[y1, x1]] * fy * fx
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[idx]
}

fn disc_offsets(radius: f64) -> Vec<(i64, i64)> {
    let r = radius.ceil() as i64;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dy * dy + dx * dx) as f64) <= radius * radius {
                offsets.push((dy, dx));
            }
        }
    }
    offsets
}

/// Morphological opening by a disc (erosion then dilation): removes
/// protrusions thinner than the disc diameter while restoring the boundary
/// everywhere else.
fn open_disc(mask: &Array2<bool>, radius: f64) -> Array2<bool> {
    let (h, w) = mask.dim();
    let offsets = disc_offsets(radius);
    let eroded = Array2::from_shape_fn((h, w), |(y, x)| {
        offsets.iter().all(|&(dy, dx)| {
            let yy = y as i64 + dy;
            let xx = x as i64 + dx;
            yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 && mask[[yy as usize, xx as usize]]
        })
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        offsets.iter().any(|&(dy, dx)| {
            let yy = y as i64 + dy;
            let xx = x as i64 + dx;
            yy >= 0
                && xx >= 0
                && yy < h as i64
                && xx < w as i64
                && eroded[[yy as usize, xx as usize]]
        })
    })
}

/// Ellipse fitted to a star-convex region given by its polar boundary
/// radius, via the region's second moments; returns (semi-major,
/// semi-minor, orientation, centroid offset).
fn polar_ellipse_fit(r: &[f64]) -> (f64, f64, f64, (f64, f64)) {
    let k = r.len() as f64;
    let dtheta = std::f64::consts::TAU / k;
    let (mut area, mut mx, mut my) = (0.0, 0.0, 0.0);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (i, &rr) in r.iter().enumerate() {
        let theta = i as f64 * dtheta;
        let (s, c) = theta.sin_cos();
        let r2 = rr * rr;
        let r3 = r2 * rr;
        let r4 = r3 * rr;
        area += r2 / 2.0 * dtheta;
        mx += r3 / 3.0 * c * dtheta;
        my += r3 / 3.0 * s * dtheta;
        sxx += r4 / 4.0 * c * c * dtheta;
        syy += r4 / 4.0 * s * s * dtheta;
        sxy += r4 / 4.0 * s * c * dtheta;
    }
    if area < 1.0 {
        return (1.0, 1.0, 0.0, (0.0, 0.0));
    }
    let cx = mx / area;
    let cy = my / area;
    let sxx = sxx / area - cx * cx;
    let syy = syy / area - cy * cy;
    let sxy = sxy / area - cx * cy;
    let tr = sxx + syy;
    let disc = ((sxx - syy).powi(2) + 4.0 * sxy * sxy).sqrt();
    let l1 = ((tr + disc) / 2.0).max(1e-9);
    let l2 = ((tr - disc) / 2.0).max(1e-9);
    let theta_fit = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    (2.0 * l1.sqrt(), 2.0 * l2.sqrt(), theta_fit, (cx, cy))
}

/// Extracts boundary geometry from an image.
pub fn measure(image: &MassImage) -> OracleMeasurements {
    let invalid = OracleMeasurements {
        spike_count: 0,
        edge_width: 0.0,
        axis_ratio: 1.0,
        ellipse_residual: 0.0,
        valid: false,
    };
    let raw = image.pixels();
    let blurred = box_blur3(&raw.view());

    let mut sorted: Vec<f64> = blurred.iter().cloned().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let bg = percentile(&sorted, 0.10);
    // blobs may cover only a small fraction of the frame, so the core
    // estimate comes from the extreme tail
    let core = percentile(&sorted, 0.995);
    if core - bg < 0.05 {
        return invalid;
    }
    let mid = (core + bg) / 2.0;

    // spike-free support: erode the mask until thin protrusions vanish;
    // broad shape lobes are much wider than the disc and survive
    let mask = Array2::from_shape_fn(blurred.dim(), |(y, x)| blurred[[y, x]] >= mid);
    let mut eroded = open_disc(&mask, ERODE_RADIUS);
    let mut er_count = eroded.iter().filter(|&&b| b).count();
    if er_count < 12 {
        // very concave supports can vanish under the full disc; fall back
        // to a gentler opening, then to the raw mask
        eroded = open_disc(&mask, 2.0);
        er_count = eroded.iter().filter(|&&b| b).count();
        if er_count < 12 {
            eroded = mask.clone();
            er_count = eroded.iter().filter(|&&b| b).count();
        }
        if er_count < 12 {
            return invalid;
        }
    }
    let (mut cy, mut cx) = (0.0, 0.0);
    for ((y, x), &b) in eroded.indexed_iter() {
        if b {
            cy += y as f64;
            cx += x as f64;
        }
    }
    cy /= er_count as f64;
    cx /= er_count as f64;

    const K: usize = 360;
    let r_max = (IMAGE_SIZE / 2 - 1) as f64;

    // outermost boundary of the eroded support
    let mut r_core = vec![0.0f64; K];
    for (k, r) in r_core.iter_mut().enumerate() {
        let theta = k as f64 / K as f64 * std::f64::consts::TAU;
        let (dy, dx) = (theta.sin(), theta.cos());
        let mut rr = r_max;
        let mut found = 0.0;
        while rr >= 0.0 {
            let yy = (cy + dy * rr).round();
            let xx = (cx + dx * rr).round();
            if yy >= 0.0
                && xx >= 0.0
                && (yy as usize) < IMAGE_SIZE
                && (xx as usize) < IMAGE_SIZE
                && eroded[[yy as usize, xx as usize]]
            {
                found = rr;
                break;
            }
            rr -= 0.5;
        }
        *r = found;
    }

    // outermost mid-crossing of the raw intensity (captures spikes; at the
    // noise levels the oracle is rated for, background excursions above
    // `mid` are many sigma away)
    let mut r_raw = vec![0.0f64; K];
    for (k, r) in r_raw.iter_mut().enumerate() {
        let theta = k as f64 / K as f64 * std::f64::consts::TAU;
        let (dy, dx) = (theta.sin(), theta.cos());
        let mut rr = r_max;
        let mut found = 0.0;
        while rr >= 0.0 {
            let v = sample_bilinear(raw, cy + dy * rr, cx + dx * rr);
            if v >= mid {
                found = rr;
                break;
            }
            rr -= 0.5;
        }
        *r = found;
    }

    // spikes: narrow runs rising well above the de-eroded support boundary
    let spiked: Vec<bool> = (0..K)
        .map(|k| r_raw[k] - r_core[k] > SPIKE_EXCESS_PX)
        .collect();
    let start = (0..K).find(|&k| !spiked[k]).unwrap_or(0);
    let mut spike_count = 0usize;
    let mut run = 0usize;
    for i in 0..K {
        if spiked[(start + i) % K] {
            run += 1;
        } else {
            if (SPIKE_RUN_MIN..=SPIKE_RUN_MAX).contains(&run) {
                spike_count += 1;
            }
            run = 0;
        }
    }
    if (SPIKE_RUN_MIN..=SPIKE_RUN_MAX).contains(&run) {
        spike_count += 1;
    }

    let a0 = r_core.iter().sum::<f64>() / K as f64;
    if a0 < 2.0 {
        return invalid;
    }

    // ellipse fitted to the eroded boundary, then the boundary's RMS
    // deviation from it; the fitted center offset is honored so that
    // residuals measure shape, not centering error
    let (a_fit, b_fit, theta_fit, (ox, oy)) = polar_ellipse_fit(&r_core);
    let axis_ratio = a_fit / b_fit;
    let (sin_f, cos_f) = theta_fit.sin_cos();
    let qx = (ox * cos_f + oy * sin_f) / a_fit;
    let qy = (-ox * sin_f + oy * cos_f) / b_fit;
    let mut res2 = 0.0;
    for (k, &r) in r_core.iter().enumerate() {
        let theta = k as f64 / K as f64 * std::f64::consts::TAU;
        let (st, ct) = theta.sin_cos();
        let px = (ct * cos_f + st * sin_f) / a_fit;
        let py = (-ct * sin_f + st * cos_f) / b_fit;
        // outward radius at which the ray hits the offset ellipse
        let aa = px * px + py * py;
        let bb = -2.0 * (px * qx + py * qy);
        let cc = qx * qx + qy * qy - 1.0;
        let disc = (bb * bb - 4.0 * aa * cc).max(0.0);
        let r_fit = (-bb + disc.sqrt()) / (2.0 * aa);
        res2 += (r - r_fit).powi(2);
    }
    let ellipse_residual = (res2 / K as f64).sqrt() / a0;

    // edge falloff: 60th-percentile 75%->25% crossing distance over 32
    // rays, measured on the un-blurred image with subpixel sampling
    let hi_level = bg + 0.75 * (core - bg);
    let lo_level = bg + 0.25 * (core - bg);
    let mut widths = Vec::new();
    for k in 0..32 {
        let theta = k as f64 / 32.0 * std::f64::consts::TAU;
        let (dy, dx) = (theta.sin(), theta.cos());
        let baseline = r_core[(k * (K / 32)) % K];
        let mut r_hi = None;
        let mut r_lo = None;
        let mut rr = (baseline - 12.0).max(0.0);
        while rr <= r_max {
            let v = sample_bilinear(raw, cy + dy * rr, cx + dx * rr);
            if r_hi.is_none() && v <= hi_level {
                r_hi = Some(rr);
            }
            if v <= lo_level {
                r_lo = Some(rr);
                break;
            }
            rr += 0.25;
        }
        if let (Some(hi), Some(lo)) = (r_hi, r_lo) {
            widths.push((lo - hi).max(0.0));
        }
    }
    if widths.is_empty() {
        return invalid;
    }
    widths.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let edge_width = widths[(widths.len() - 1) * 13 / 20];

    OracleMeasurements {
        spike_count,
        edge_width,
        axis_ratio,
        ellipse_residual,
        valid: true,
    }
}

/// Rule-based classifier recovering (margin, shape) from rendered
/// geometry. Total: any input yields some valid category pair.
pub fn oracle_label(image: &MassImage) -> BiradsDescription {
    let m = measure(image);
    if !m.valid {
        return BiradsDescription { margin: 0, shape: 0 };
    }
    let margin = if m.spike_count >= SPIKE_MIN_COUNT {
        2
    } else if m.edge_width <= EDGE_WIDTH_HARD_PX {
        0
    } else {
        1
    };
    let shape = if m.ellipse_residual > RESIDUAL_IRREGULAR {
        2
    } else if m.axis_ratio > RATIO_OVAL {
        1
    } else {
        0
    };
    BiradsDescription { margin, shape }
}
