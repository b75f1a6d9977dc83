//! Synthetic brain-like phantoms with known label maps.
//!
//! Each template is a gray "skull" ellipse holding a white tissue ellipse
//! and a few small deep-structure ellipses, all at fixed class intensities.
//! Truth images are exact draws from the Gaussian mixture over templates, so
//! the analytic prior used during reconstruction is the true data law.

use std::f64::consts::PI;

use rand::Rng;

use crate::degradation::{apply_forward, DegradationConfig};
use crate::diffusion::GaussianMixturePrior;
use crate::error::{invalid, Error, Result};
use crate::image::{Image, LabelMap};
use crate::rng::{derive_seed, gaussian_image, rng_from_seed};

pub const BACKGROUND: u8 = 0;
pub const WHITE: u8 = 1;
pub const GRAY: u8 = 2;
pub const DEEP: u8 = 3;

const NOISE_TAG: u64 = 0x6e_6f69_7365;
const PICK_TAG: u64 = 0x7069_636b;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub size: usize,
    /// Intensity interval per class, indexed by label.
    pub class_bands: Vec<(f64, f64)>,
    pub n_templates: usize,
    pub sigma_p: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let half = 0.105;
        let bands = [0.08, 0.95, 0.37, 0.66]
            .iter()
            .map(|c| (c - half, c + half))
            .collect();
        Self {
            size: 72,
            class_bands: bands,
            n_templates: 8,
            sigma_p: 0.05,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn n_classes(&self) -> usize {
        self.class_bands.len()
    }

    pub fn band_center(&self, class_id: u8) -> f64 {
        let (lo, hi) = self.class_bands[class_id as usize];
        0.5 * (lo + hi)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(invalid("size", "must be at least 32"));
        }
        if self.class_bands.len() != 4 {
            return Err(invalid("class_bands", "exactly four classes are generated"));
        }
        if self.n_templates == 0 {
            return Err(invalid("n_templates", "must be positive"));
        }
        if !(self.sigma_p >= 0.0) || !self.sigma_p.is_finite() {
            return Err(invalid("sigma_p", "must be finite and non-negative"));
        }
        let mut sorted = self.class_bands.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        if sorted.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(invalid("class_bands", "each band needs lo < hi"));
        }
        if sorted.windows(2).any(|w| w[1].0 - w[0].1 < 0.08 - 1e-12) {
            return Err(invalid("class_bands", "bands must be separated by at least 0.08"));
        }
        Ok(())
    }

    pub fn canonical_lines(&self) -> Vec<String> {
        let bands: Vec<String> = self
            .class_bands
            .iter()
            .map(|(lo, hi)| format!("{lo}:{hi}"))
            .collect();
        vec![
            format!("phantom_bands={}", bands.join(";")),
            format!("phantom_seed={}", self.seed),
            format!("phantom_size={}", self.size),
            format!("prior_K={}", self.n_templates),
            format!("prior_sigma_p={}", self.sigma_p),
        ]
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, px: f64, py: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = px - self.cx;
        let dy = py - self.cy;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Deterministic template `index` of `spec`.
pub fn generate_template(spec: &PhantomSpec, index: usize) -> Result<(Image, LabelMap)> {
    spec.validate()?;
    if index >= spec.n_templates {
        return Err(invalid("index", format!("{index} >= K={}", spec.n_templates)));
    }
    let mut rng = rng_from_seed(derive_seed(spec.seed, index as u64));
    let n = spec.size as f64;
    let c = n / 2.0;
    let scale = n / 72.0;
    let mut jitter = |lo: f64, hi: f64| rng.random_range(lo..hi);

    let skull = Ellipse {
        cx: c + jitter(-1.0, 1.0) * scale,
        cy: c + jitter(-1.0, 1.0) * scale,
        a: jitter(28.0, 31.0) * scale,
        b: jitter(31.0, 34.0) * scale,
        theta: jitter(-0.15, 0.15),
    };
    let white = Ellipse {
        cx: skull.cx + jitter(-2.0, 2.0) * scale,
        cy: skull.cy + jitter(-2.0, 2.0) * scale,
        a: jitter(17.0, 21.0) * scale,
        b: jitter(20.0, 24.0) * scale,
        theta: jitter(-0.3, 0.3),
    };
    let n_deep = 2 + (jitter(0.0, 3.0) as usize).min(2);
    let base = jitter(0.0, 2.0 * PI);
    let mut deep = Vec::with_capacity(n_deep);
    for j in 0..n_deep {
        let angle = base + 2.0 * PI * j as f64 / n_deep as f64 + jitter(-0.25, 0.25);
        let r = jitter(8.0, 11.0) * scale;
        deep.push(Ellipse {
            cx: white.cx + r * angle.cos(),
            cy: white.cy + r * angle.sin(),
            a: jitter(3.0, 4.2) * scale,
            b: jitter(3.0, 4.2) * scale,
            theta: jitter(0.0, PI),
        });
    }

    let size = spec.size;
    let mut labels = vec![BACKGROUND; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let l = &mut labels[y * size + x];
            if skull.contains(px, py) {
                *l = GRAY;
            }
            if white.contains(px, py) {
                *l = WHITE;
            }
            if deep.iter().any(|e| e.contains(px, py)) {
                *l = DEEP;
            }
        }
    }
    let labels = LabelMap::new(size, size, labels)?;
    let img = Image::from_fn(size, size, |x, y| spec.band_center(labels.get(x, y)));
    Ok((img, labels))
}

/// All templates of `spec` with their label maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub templates: Vec<Image>,
    pub labels: Vec<LabelMap>,
}

impl Phantom {
    pub fn new(spec: PhantomSpec) -> Result<Self> {
        let (templates, labels) = (0..spec.n_templates)
            .map(|k| generate_template(&spec, k))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Ok(Self {
            spec,
            templates,
            labels,
        })
    }

    pub fn weights(&self) -> Vec<f64> {
        vec![1.0 / self.templates.len() as f64; self.templates.len()]
    }

    /// The Gaussian mixture the truths are drawn from.
    pub fn prior(&self) -> Result<GaussianMixturePrior> {
        GaussianMixturePrior::new(self.templates.clone(), self.weights(), self.spec.sigma_p)
    }
}

/// Picks a template with probability `weights[k]`, adds `N(0, σ_p²)` per
/// pixel and clamps to `[0, 1]`. Returns the image and the template index.
pub fn sample_truth(templates: &[Image], weights: &[f64], sigma_p: f64, seed: u64) -> Result<(Image, usize)> {
    if templates.is_empty() {
        return Err(Error::Empty("templates"));
    }
    if weights.len() != templates.len() {
        return Err(invalid("weights", "one weight per template required"));
    }
    let u: f64 = rng_from_seed(derive_seed(seed, PICK_TAG)).random::<f64>() * weights.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut k = templates.len() - 1;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            k = i;
            break;
        }
    }
    let t = &templates[k];
    if sigma_p == 0.0 {
        return Ok((t.clone(), k));
    }
    let noise = gaussian_image(t.width(), t.height(), derive_seed(seed, NOISE_TAG));
    Ok((t.axpy(sigma_p, &noise)?.map(|v| v.clamp(0.0, 1.0)), k))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Global sample index; determines every seed of the sample.
    pub index: u64,
    pub seed: u64,
    pub template: usize,
    pub x_true: Image,
    pub y: Image,
    pub labels: LabelMap,
}

/// `n` samples with indices `first_index..first_index + n`. Truths depend
/// only on `(seed, index)`, so datasets under different degradations share
/// them; disjoint index ranges give disjoint truths.
pub fn make_dataset(
    phantom: &Phantom,
    cfg: &DegradationConfig,
    n: usize,
    first_index: u64,
    seed: u64,
) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    cfg.validate_for(phantom.spec.size, phantom.spec.size)?;
    let weights = phantom.weights();
    (first_index..first_index + n as u64)
        .map(|index| {
            let s = derive_seed(seed, index);
            let (x_true, template) = sample_truth(&phantom.templates, &weights, phantom.spec.sigma_p, s)?;
            let y = apply_forward(&x_true, cfg, Some(derive_seed(s, NOISE_TAG)))?;
            Ok(Sample {
                index,
                seed: s,
                template,
                labels: phantom.labels[template].clone(),
                x_true,
                y,
            })
        })
        .collect()
}
