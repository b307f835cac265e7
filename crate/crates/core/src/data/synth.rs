//! Seeded synthetic cohorts standing in for restricted imaging data.
//!
//! Each subject is an elliptical "brain" phantom with a darker ventricle.
//! Atrophy shrinks the brain and widens the ventricle over the visits, faster
//! for progressive subjects. Biomarkers drift in each marker's direction of
//! decline at a class-dependent rate.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BiomarkerRow, Diagnosis, Label, Visit, NUM_BIOMARKERS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rendered slices per image, one per channel.
pub const IMAGE_CHANNELS: usize = 3;

/// Population scale of one biomarker. `direction` is +1 when the value
/// rises with disease, −1 when it falls and 0 when it carries no signal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiomarkerTrend {
    pub mean: f64,
    pub sd: f64,
    pub direction: f64,
}

const fn trend(mean: f64, sd: f64, direction: f64) -> BiomarkerTrend {
    BiomarkerTrend { mean, sd, direction }
}

/// In [`super::BIOMARKERS`] order.
pub const BIOMARKER_TRENDS: [BiomarkerTrend; NUM_BIOMARKERS] = [
    trend(1.6, 0.9, 1.0),
    trend(10.5, 4.5, 1.0),
    trend(17.0, 6.5, 1.0),
    trend(5.5, 2.5, 1.0),
    trend(27.0, 1.8, -1.0),
    trend(33.0, 10.0, -1.0),
    trend(3.8, 2.6, -1.0),
    trend(4.6, 2.5, 1.0),
    trend(56.0, 32.0, 1.0),
    trend(3.2, 4.0, 1.0),
    trend(42_000.0, 22_000.0, 1.0),
    trend(6_700.0, 1_100.0, -1.0),
    trend(1_010_000.0, 105_000.0, -1.0),
    trend(3_500.0, 750.0, -1.0),
    trend(17_000.0, 2_600.0, -1.0),
    trend(19_200.0, 2_900.0, -1.0),
    trend(1_530_000.0, 160_000.0, 0.0),
];

/// Mean and standard deviation of a per-subject draw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub sd: f64,
}

impl Spread {
    pub const fn new(mean: f64, sd: f64) -> Self {
        Self { mean, sd }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.mean + self.sd * z
    }
}

/// Parameters of one class's progression.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassProfile {
    /// Fractional brain-radius loss per year.
    pub atrophy: Spread,
    /// Baseline biomarker offset, in population SDs along each marker's direction.
    pub marker_shift: f64,
    /// Biomarker drift per year, in population SDs.
    pub marker_slope: Spread,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCohortConfig {
    pub n_smci: usize,
    pub n_pmci: usize,
    pub seed: u64,
    pub image_side: usize,
    pub smci: ClassProfile,
    pub pmci: ClassProfile,
    /// Pixel noise SD on images with values in [0, 1].
    pub image_noise: f64,
    /// Per-visit biomarker noise, in population SDs.
    pub marker_noise: f64,
    /// Probability that a subject's data follow the other class.
    pub label_noise: f64,
    /// Probability that a non-baseline visit is absent.
    pub missing_visit_rate: f64,
    /// Probability that a single biomarker value is recorded as missing.
    pub missing_value_rate: f64,
}

impl Default for SyntheticCohortConfig {
    fn default() -> Self {
        Self {
            n_smci: 390,
            n_pmci: 140,
            seed: 2024,
            image_side: 64,
            smci: ClassProfile {
                atrophy: Spread::new(0.01, 0.005),
                marker_shift: 0.0,
                marker_slope: Spread::new(0.1, 0.2),
            },
            pmci: ClassProfile {
                atrophy: Spread::new(0.04, 0.01),
                marker_shift: 0.8,
                marker_slope: Spread::new(0.5, 0.2),
            },
            image_noise: 0.02,
            marker_noise: 0.3,
            label_noise: 0.02,
            missing_visit_rate: 0.1,
            missing_value_rate: 0.01,
        }
    }
}

impl SyntheticCohortConfig {
    /// Both classes drawn from the same distribution with no noise, atrophy
    /// or drift, so labels are unpredictable from the data.
    pub fn null_signal() -> Self {
        let profile = ClassProfile {
            atrophy: Spread::new(0.0, 0.0),
            marker_shift: 0.0,
            marker_slope: Spread::new(0.0, 0.0),
        };
        Self {
            smci: profile,
            pmci: profile,
            image_noise: 0.0,
            marker_noise: 0.0,
            label_noise: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side < crate::stem::MIN_INPUT_SIDE {
            return Err(Error::config(format!(
                "image side {} below {}",
                self.image_side,
                crate::stem::MIN_INPUT_SIDE
            )));
        }
        for (name, p) in [
            ("label_noise", self.label_noise),
            ("missing_visit_rate", self.missing_visit_rate),
            ("missing_value_rate", self.missing_value_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} is not a probability")));
            }
        }
        let sds = [
            self.image_noise,
            self.marker_noise,
            self.smci.atrophy.sd,
            self.pmci.atrophy.sd,
            self.smci.marker_slope.sd,
            self.pmci.marker_slope.sd,
        ];
        if sds.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::config("spreads and noise levels must be non-negative"));
        }
        Ok(())
    }

    fn profile(&self, label: Label) -> &ClassProfile {
        match label {
            Label::Smci => &self.smci,
            Label::Pmci => &self.pmci,
        }
    }
}

/// Geometry of one rendered brain, in pixels and radians.
#[derive(Clone, Copy, Debug)]
struct Phantom {
    radius: f64,
    aspect: f64,
    theta: f64,
    cy: f64,
    cx: f64,
    ventricle: f64,
}

impl Phantom {
    fn sample<R: Rng>(rng: &mut R, side: usize, scale: f64, ventricle: f64) -> Self {
        let s = side as f64;
        let z: f64 = StandardNormal.sample(rng);
        let zv: f64 = StandardNormal.sample(rng);
        Self {
            radius: 0.36 * s * scale * (1.0 + 0.04 * z),
            aspect: rng.random_range(0.78..0.95),
            theta: rng.random_range(0.0..std::f64::consts::PI),
            cy: (s - 1.0) / 2.0 + rng.random_range(-1.0..1.0),
            cx: (s - 1.0) / 2.0 + rng.random_range(-1.0..1.0),
            ventricle: ventricle * (1.0 + 0.08 * zv),
        }
    }

    /// Brain radius scaled by `1 − loss` with the ventricle widening twice as fast.
    fn atrophied(&self, loss: f64) -> Self {
        Self {
            radius: self.radius * (1.0 - loss),
            ventricle: self.ventricle * (1.0 + 2.0 * loss),
            ..*self
        }
    }

    /// Three adjacent axial slices. Values are stored at `f32` precision so
    /// that images written to disk read back identically.
    fn render<R: Rng>(&self, side: usize, noise: f64, rng: &mut R) -> Tensor {
        let (sin, cos) = self.theta.sin_cos();
        let edge = |rho: f64, r: f64| crate::tensor::sigmoid_value((1.0 - rho) * r / 0.8);
        let mut data = Vec::with_capacity(IMAGE_CHANNELS * side * side);
        for ch in 0..IMAGE_CHANNELS {
            let z = 0.15 * (ch as f64 - 1.0);
            let r = self.radius * (1.0 - z * z).sqrt();
            let rv = r * self.ventricle;
            for y in 0..side {
                for x in 0..side {
                    let (dy, dx) = (y as f64 - self.cy, x as f64 - self.cx);
                    let (u, v) = (cos * dy + sin * dx, -sin * dy + cos * dx);
                    let rho = ((u / r).powi(2) + (v / (r * self.aspect)).powi(2)).sqrt();
                    let rho_v = ((u / rv).powi(2) + (v / (rv * self.aspect * 0.6)).powi(2)).sqrt();
                    let mut value = edge(rho, r) * (1.0 - 0.7 * edge(rho_v, rv));
                    if noise > 0.0 {
                        let n: f64 = StandardNormal.sample(rng);
                        value += noise * n;
                    }
                    data.push(f64::from(value as f32));
                }
            }
        }
        Tensor::new(&[IMAGE_CHANNELS, side, side], data).expect("image size")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSubject {
    pub id: String,
    pub label: Label,
    /// Class the images and biomarkers were drawn from; differs from
    /// `label` for subjects hit by label noise.
    pub trajectory: Label,
    /// `3×S×S` image per visit; `None` for a missed visit.
    pub images: [Option<Tensor>; Visit::COUNT],
    /// One row per attended visit.
    pub biomarkers: Vec<BiomarkerRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCohort {
    pub subjects: Vec<SyntheticSubject>,
}

impl SyntheticCohort {
    pub fn labels(&self) -> BTreeMap<String, Label> {
        self.subjects.iter().map(|s| (s.id.clone(), s.label)).collect()
    }

    pub fn biomarker_rows(&self) -> Vec<BiomarkerRow> {
        self.subjects.iter().flat_map(|s| s.biomarkers.iter().cloned()).collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.subjects.iter().filter(|s| s.label == label).count()
    }
}

fn subject_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Generates the longitudinal cohort. The result depends only on `cfg`.
pub fn synth_generate(cfg: &SyntheticCohortConfig) -> Result<SyntheticCohort> {
    cfg.validate()?;
    let total = cfg.n_smci + cfg.n_pmci;
    let subjects = (0..total)
        .into_par_iter()
        .map(|i| {
            let label = if i < cfg.n_smci { Label::Smci } else { Label::Pmci };
            generate_subject(cfg, i, label)
        })
        .collect();
    Ok(SyntheticCohort { subjects })
}

fn generate_subject(cfg: &SyntheticCohortConfig, index: usize, label: Label) -> SyntheticSubject {
    let mut rng = subject_rng(cfg.seed, index);
    let id = format!("S{:04}", index + 1);
    // label noise swaps the class a trajectory is drawn from, so the
    // recorded class counts stay exactly as configured
    let trajectory = if rng.random_bool(cfg.label_noise) {
        match label {
            Label::Smci => Label::Pmci,
            Label::Pmci => Label::Smci,
        }
    } else {
        label
    };
    let profile = cfg.profile(trajectory);

    let phantom = Phantom::sample(&mut rng, cfg.image_side, 0.92, 0.34);
    let atrophy = profile.atrophy.sample(&mut rng).max(0.0);
    let slope = profile.marker_slope.sample(&mut rng);
    let latent: Vec<f64> = (0..NUM_BIOMARKERS).map(|_| StandardNormal.sample(&mut rng)).collect();

    let mut images: [Option<Tensor>; Visit::COUNT] = Default::default();
    let mut biomarkers = Vec::new();
    for visit in Visit::ALL {
        // draw the attendance coin for every visit so the stream layout is fixed
        let missed = rng.random_bool(cfg.missing_visit_rate) && visit != Visit::Bl;
        let years = visit.months() / 12.0;
        let image = phantom.atrophied(atrophy * years).render(cfg.image_side, cfg.image_noise, &mut rng);
        let mut values = [None; NUM_BIOMARKERS];
        for (k, t) in BIOMARKER_TRENDS.iter().enumerate() {
            let n: f64 = StandardNormal.sample(&mut rng);
            let drop = rng.random_bool(cfg.missing_value_rate);
            let z = latent[k] + t.direction * (profile.marker_shift + slope * years) + cfg.marker_noise * n;
            values[k] = (!drop).then_some(t.mean + t.sd * z);
        }
        if !missed {
            images[visit.index()] = Some(image);
            biomarkers.push(BiomarkerRow {
                subject_id: id.clone(),
                visit,
                values,
            });
        }
    }
    SyntheticSubject {
        id,
        label,
        trajectory,
        images,
        biomarkers,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticCohortConfig {
    pub per_class: usize,
    pub seed: u64,
    pub image_side: usize,
    pub image_noise: f64,
}

impl Default for DiagnosticCohortConfig {
    fn default() -> Self {
        Self {
            per_class: 60,
            seed: 7,
            image_side: 64,
            image_noise: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticImage {
    pub id: String,
    pub diagnosis: Diagnosis,
    pub image: Tensor,
}

/// Cross-sectional CN/MCI/AD images for training the feature extractor.
/// Brain size falls and ventricle size rises from CN to AD.
pub fn synth_diagnostic(cfg: &DiagnosticCohortConfig) -> Result<Vec<DiagnosticImage>> {
    if cfg.image_side < crate::stem::MIN_INPUT_SIDE {
        return Err(Error::config(format!("image side {} too small", cfg.image_side)));
    }
    if !(cfg.image_noise >= 0.0) {
        return Err(Error::config("image noise must be non-negative"));
    }
    Ok((0..cfg.per_class * Diagnosis::ALL.len())
        .into_par_iter()
        .map(|i| {
            let diagnosis = Diagnosis::ALL[i % Diagnosis::ALL.len()];
            let (scale, ventricle) = match diagnosis {
                Diagnosis::Cn => (1.0, 0.28),
                Diagnosis::Mci => (0.92, 0.34),
                Diagnosis::Ad => (0.84, 0.44),
            };
            let mut rng = subject_rng(cfg.seed, i);
            let phantom = Phantom::sample(&mut rng, cfg.image_side, scale, ventricle);
            DiagnosticImage {
                id: format!("D{:04}", i + 1),
                diagnosis,
                image: phantom.render(cfg.image_side, cfg.image_noise, &mut rng),
            }
        })
        .collect())
}
