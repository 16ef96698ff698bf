//! Seeded synthetic multi-domain corpora.
//!
//! Each domain draws its series from one [`SignalKind`]. A domain with a
//! [`LayoutConfig`] places its variates on a fixed 2D/3D layout and mixes a
//! few latent sources, dropped at random positions per sample, with
//! Gaussian distance weights, so geometric neighbours correlate.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Corpus, DomainSpec, Label, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub domains: Vec<SynthDomain>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthDomain {
    pub name: String,
    pub variates: usize,
    pub samples: usize,
    /// Series length in time points.
    pub length: usize,
    /// Shortest series length; lengths are drawn uniformly from
    /// `min_length..=length`. Defaults to `length`.
    #[serde(default)]
    pub min_length: Option<usize>,
    #[serde(default = "default_frequency")]
    pub frequency_hz: f64,
    #[serde(default)]
    pub noise: f64,
    pub signal: SignalKind,
    #[serde(default)]
    pub layout: Option<LayoutConfig>,
}

fn default_frequency() -> f64 {
    100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalKind {
    /// Two sinusoids with periods drawn from `[min_period, max_period]`.
    Oscillatory { min_period: f64, max_period: f64 },
    /// Class `c` oscillates with period `periods[c]` (±3 % jitter).
    Classes { periods: Vec<f64> },
    /// `sin(base) + a·sin(secondary)` with target `a ~ U[min, max]`; the
    /// ratio survives channel-wise normalisation.
    RelativeAmplitude { base_period: f64, secondary_period: f64, min: f64, max: f64 },
    /// Single sinusoid with a fixed period and random phase.
    Periodic { period: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutConfig {
    /// 2 or 3.
    pub dims: usize,
    #[serde(default = "default_sources")]
    pub sources: usize,
    #[serde(default = "default_length_scale")]
    pub length_scale: f64,
    /// Sources are drawn uniformly from `[-extent, extent]^dims`; layouts
    /// lie within the unit ball.
    #[serde(default = "default_source_extent")]
    pub source_extent: f64,
    /// Propagation speed in layout units per step; each variate receives a
    /// source delayed by distance / speed. `None` mixes without delay.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<f64>,
    #[serde(default)]
    pub field: LayoutField,
    #[serde(default)]
    pub shape: LayoutShape,
}

/// Placement of the planted variate positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutShape {
    /// Sunflower spiral filling the unit disk (2D) or a Fibonacci
    /// hemisphere (3D).
    #[default]
    Filled,
    /// Evenly spaced on the unit circle (2D) or a Fibonacci unit sphere
    /// (3D); no variate lies on a boundary.
    Closed,
}

/// How source signals reach the variates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutField {
    /// Point sources weighted by `exp(-d²/2ℓ²)`.
    #[default]
    Sources,
    /// Unit-amplitude plane waves with random directions; a variate at `p`
    /// receives wave `k` delayed by `(u_k·p + 1) / speed`.
    Waves,
}

const DEFAULT_WAVE_SPEED: f64 = 0.05;

fn default_sources() -> usize {
    6
}

fn default_source_extent() -> f64 {
    1.2
}

fn default_length_scale() -> f64 {
    0.45
}

/// Per-sample latent drawn once and shared by all variates.
enum Latent {
    None,
    Class(usize),
    Amplitude(f64),
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Config("synthetic corpus declares no domains".into()));
        }
        let mut names = std::collections::HashSet::new();
        for d in &self.domains {
            if !names.insert(d.name.as_str()) {
                return Err(Error::Config(format!("domain `{}` declared twice", d.name)));
            }
            if d.samples == 0 {
                return Err(Error::Config(format!("domain `{}` has zero samples", d.name)));
            }
            if d.variates == 0 || d.length == 0 {
                return Err(Error::Config(format!(
                    "domain `{}` needs at least one variate and one time point",
                    d.name
                )));
            }
            if let Some(min) = d.min_length {
                if min == 0 || min > d.length {
                    return Err(Error::Config(format!("domain `{}`: min_length must lie in 1..=length", d.name)));
                }
            }
            match &d.signal {
                SignalKind::Oscillatory { min_period, max_period } => {
                    if !(*min_period > 0.0 && max_period >= min_period) {
                        return Err(Error::Config(format!("domain `{}`: bad period band", d.name)));
                    }
                }
                SignalKind::Classes { periods } => {
                    if periods.len() < 2 || periods.iter().any(|p| *p <= 0.0) {
                        return Err(Error::Config(format!(
                            "domain `{}`: need at least two positive class periods",
                            d.name
                        )));
                    }
                }
                SignalKind::RelativeAmplitude { base_period, secondary_period, min, max } => {
                    if *base_period <= 0.0 || *secondary_period <= 0.0 || min > max {
                        return Err(Error::Config(format!("domain `{}`: bad amplitude config", d.name)));
                    }
                }
                SignalKind::Periodic { period } => {
                    if *period <= 0.0 {
                        return Err(Error::Config(format!("domain `{}`: period must be positive", d.name)));
                    }
                }
            }
            if let Some(l) = &d.layout {
                if !(l.dims == 2 || l.dims == 3)
                    || l.sources == 0
                    || l.length_scale <= 0.0
                    || !(l.source_extent > 0.0)
                    || l.speed.is_some_and(|c| !(c > 0.0))
                {
                    return Err(Error::Config(format!(
                        "domain `{}`: layout needs dims 2 or 3, ≥1 source, positive length scale",
                        d.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Deterministic variate coordinates: a sunflower disk (2D) or a Fibonacci
/// hemisphere (3D).
pub fn planted_layout(variates: usize, dims: usize, shape: LayoutShape) -> Matrix {
    let golden = PI * (3.0 - 5f64.sqrt());
    let n = variates as f64;
    Matrix::from_fn(variates, dims, |i, k| {
        let u = (i as f64 + 0.5) / n;
        let (theta, r, z) = match (dims, shape) {
            (2, LayoutShape::Filled) => (i as f64 * golden, u.sqrt(), 0.0),
            (2, LayoutShape::Closed) => (2.0 * PI * i as f64 / n, 1.0, 0.0),
            (_, LayoutShape::Filled) => (i as f64 * golden, (1.0 - u * u).sqrt(), u),
            (_, LayoutShape::Closed) => {
                let z = 1.0 - 2.0 * u;
                (i as f64 * golden, (1.0 - z * z).sqrt(), z)
            }
        };
        match k {
            0 => r * theta.cos(),
            1 => r * theta.sin(),
            _ => z,
        }
    })
}

pub fn synth_corpus(config: &SynthConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = Corpus::default();
    for d in &config.domains {
        let variates = (0..d.variates).map(|i| format!("{}{i}", d.name)).collect();
        let spec = Arc::new(DomainSpec::new(d.name.clone(), variates, d.variates > 1, d.frequency_hz)?);
        corpus.domains.push(Arc::clone(&spec));
        let layout = d.layout.as_ref().map(|l| planted_layout(d.variates, l.dims, l.shape));
        if let Some(l) = &layout {
            corpus.layouts.insert(d.name.clone(), l.clone());
        }
        for i in 0..d.samples {
            let length = match d.min_length {
                Some(min) if min < d.length => rng.random_range(min..=d.length),
                _ => d.length,
            };
            let latent = match &d.signal {
                SignalKind::Classes { periods } => Latent::Class(i % periods.len()),
                SignalKind::RelativeAmplitude { min, max, .. } => {
                    Latent::Amplitude(if max > min { rng.random_range(*min..*max) } else { *min })
                }
                _ => Latent::None,
            };
            let mut values = match (&d.layout, &layout) {
                (Some(cfg), Some(pos)) => mixed_sources(d, cfg, pos, &latent, length, &mut rng),
                _ => {
                    let rows: Vec<Vec<f64>> =
                        (0..d.variates).map(|_| channel(&d.signal, &latent, length, &mut rng)).collect();
                    Matrix::from_rows(&rows)
                }
            };
            if d.noise > 0.0 {
                for v in values.as_mut_slice() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *v += d.noise * n;
                }
            }
            let label = match latent {
                Latent::Class(c) => Some(Label::Class(c)),
                Latent::Amplitude(a) => Some(Label::Target(vec![a])),
                Latent::None => None,
            };
            corpus.samples.push(TimeSeriesSample::new(Arc::clone(&spec), values, label)?);
        }
    }
    Ok(corpus)
}

fn channel(kind: &SignalKind, latent: &Latent, length: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let phase = |rng: &mut ChaCha8Rng| rng.random_range(0.0..2.0 * PI);
    let wave = |period: f64, phase: f64, amp: f64| move |t: usize| amp * (2.0 * PI * t as f64 / period + phase).sin();
    match (kind, latent) {
        (SignalKind::Oscillatory { min_period, max_period }, _) => {
            let draw = |rng: &mut ChaCha8Rng| {
                if max_period > min_period {
                    rng.random_range(*min_period..*max_period)
                } else {
                    *min_period
                }
            };
            let (p1, p2) = (draw(rng), draw(rng));
            let (f1, f2) = (phase(rng), phase(rng));
            let a2 = rng.random_range(0.2..0.8);
            let w1 = wave(p1, f1, 1.0);
            let w2 = wave(p2, f2, a2);
            (0..length).map(|t| w1(t) + w2(t)).collect()
        }
        (SignalKind::Classes { periods }, Latent::Class(c)) => {
            let p = periods[*c] * rng.random_range(0.97..1.03);
            let w = wave(p, phase(rng), 1.0);
            (0..length).map(w).collect()
        }
        (SignalKind::RelativeAmplitude { base_period, secondary_period, .. }, Latent::Amplitude(a)) => {
            let w1 = wave(*base_period, phase(rng), 1.0);
            let w2 = wave(*secondary_period, phase(rng), *a);
            (0..length).map(|t| w1(t) + w2(t)).collect()
        }
        (SignalKind::Periodic { period }, _) => {
            let w = wave(*period, phase(rng), 1.0);
            (0..length).map(w).collect()
        }
        _ => unreachable!("latent drawn for a different signal kind"),
    }
}

fn mixed_sources(
    d: &SynthDomain,
    cfg: &LayoutConfig,
    positions: &Matrix,
    latent: &Latent,
    length: usize,
    rng: &mut ChaCha8Rng,
) -> Matrix {
    let dims = cfg.dims;
    let speed = cfg.speed.unwrap_or(DEFAULT_WAVE_SPEED);
    let reach = match cfg.field {
        LayoutField::Sources => cfg.speed.map_or(0.0, |c| (dims as f64).sqrt() * 2.0 * cfg.source_extent / c),
        LayoutField::Waves => 2.0 / speed,
    };
    let lead = reach.ceil() as usize + usize::from(reach > 0.0);
    let sources: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.sources)
        .map(|_| {
            let at: Vec<f64> = match cfg.field {
                LayoutField::Sources => {
                    (0..dims).map(|_| rng.random_range(-cfg.source_extent..cfg.source_extent)).collect()
                }
                LayoutField::Waves => loop {
                    let u: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(&mut *rng)).collect();
                    let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if n > 1e-6 {
                        break u.iter().map(|x| x / n).collect();
                    }
                },
            };
            (at, channel(&d.signal, latent, length + lead, rng))
        })
        .collect();
    let two_l2 = 2.0 * cfg.length_scale * cfg.length_scale;
    let mut out = Matrix::zeros(d.variates, length);
    for v in 0..d.variates {
        let p = positions.row(v);
        // (weight, delay) per source
        let links: Vec<(f64, f64)> = sources
            .iter()
            .map(|(at, _)| match cfg.field {
                LayoutField::Sources => {
                    let d2: f64 = at.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
                    ((-d2 / two_l2).exp(), cfg.speed.map_or(0.0, |c| d2.sqrt() / c))
                }
                LayoutField::Waves => {
                    let along: f64 = at.iter().zip(p).map(|(u, x)| u * x).sum();
                    (1.0, (along + 1.0).max(0.0) / speed)
                }
            })
            .collect();
        let norm = links.iter().map(|(w, _)| w * w).sum::<f64>().sqrt().max(1e-12);
        let row = out.row_mut(v);
        for ((w, delay), (_, s)) in links.iter().zip(&sources) {
            // sample the source at t + lead - delay, linearly interpolated
            let shift = (lead as f64 - delay).max(0.0);
            let (base, frac) = (shift.floor() as usize, shift - shift.floor());
            for (t, o) in row.iter_mut().enumerate() {
                let a = s[t + base];
                let b = s[(t + base + 1).min(s.len() - 1)];
                *o += w / norm * (a + frac * (b - a));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_domains() -> SynthConfig {
        SynthConfig {
            domains: vec![
                SynthDomain {
                    name: "a".into(),
                    variates: 3,
                    samples: 10,
                    length: 96,
                    min_length: None,
                    frequency_hz: 100.0,
                    noise: 0.05,
                    signal: SignalKind::Oscillatory { min_period: 8.0, max_period: 30.0 },
                    layout: None,
                },
                SynthDomain {
                    name: "b".into(),
                    variates: 1,
                    samples: 10,
                    length: 120,
                    min_length: Some(60),
                    frequency_hz: 1.0,
                    noise: 0.0,
                    signal: SignalKind::Classes { periods: vec![10.0, 40.0] },
                    layout: None,
                },
            ],
        }
    }

    #[test]
    fn shapes_and_counts_follow_config() {
        let c = synth_corpus(&two_domains(), 3).unwrap();
        assert_eq!(c.samples.len(), 20);
        assert!(c.samples[..10].iter().all(|s| s.values.shape() == (3, 96)));
        assert!(c.samples[10..].iter().all(|s| s.num_variates() == 1 && (60..=120).contains(&s.len())));
        assert!(matches!(c.samples[11].label, Some(Label::Class(1))));
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = synth_corpus(&two_domains(), 42).unwrap();
        let b = synth_corpus(&two_domains(), 42).unwrap();
        let c = synth_corpus(&two_domains(), 43).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(synth_corpus(&SynthConfig { domains: vec![] }, 0).is_err());
        let mut cfg = two_domains();
        cfg.domains[0].samples = 0;
        assert!(synth_corpus(&cfg, 0).is_err());
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn closed_layouts_lie_on_the_unit_sphere() {
        for dims in [2, 3] {
            let l = planted_layout(19, dims, LayoutShape::Closed);
            for v in 0..19 {
                let n: f64 = l.row(v).iter().map(|x| x * x).sum();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
        let ring = planted_layout(4, 2, LayoutShape::Closed);
        assert!((ring.get(1, 1) - 1.0).abs() < 1e-12 && ring.get(1, 0).abs() < 1e-12);
    }

    #[test]
    fn planted_layout_correlation_decays_with_distance() {
        let cfg = SynthConfig {
            domains: vec![SynthDomain {
                name: "eeg".into(),
                variates: 19,
                samples: 200,
                length: 192,
                min_length: None,
                frequency_hz: 256.0,
                noise: 0.05,
                signal: SignalKind::Oscillatory { min_period: 6.0, max_period: 48.0 },
                layout: Some(LayoutConfig {
                    dims: 2,
                    sources: 6,
                    length_scale: 0.45,
                    source_extent: 1.2,
                    speed: None,
                    field: LayoutField::Sources,
                    shape: LayoutShape::Filled,
                }),
            }],
        };
        let c = synth_corpus(&cfg, 11).unwrap();
        let layout = &c.layouts["eeg"];
        // pairwise (distance, mean correlation over samples)
        let mut pairs = Vec::new();
        for i in 0..19 {
            for j in i + 1..19 {
                let corr: f64 = c.samples.iter().map(|s| pearson(s.values.row(i), s.values.row(j))).sum::<f64>()
                    / c.samples.len() as f64;
                let d = ((layout.get(i, 0) - layout.get(j, 0)).powi(2) + (layout.get(i, 1) - layout.get(j, 1)).powi(2))
                    .sqrt();
                pairs.push((d, corr));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // binned means must strictly decrease with distance
        let bins = 6;
        let per = pairs.len() / bins;
        let means: Vec<f64> =
            (0..bins).map(|b| pairs[b * per..(b + 1) * per].iter().map(|p| p.1).sum::<f64>() / per as f64).collect();
        for w in means.windows(2) {
            assert!(w[0] > w[1], "binned correlations not decreasing: {means:?}");
        }
        // Spearman rank correlation between distance and correlation
        let rank = |vals: Vec<f64>| {
            let mut idx: Vec<usize> = (0..vals.len()).collect();
            idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
            let mut r = vec![0.0; vals.len()];
            for (k, &i) in idx.iter().enumerate() {
                r[i] = k as f64;
            }
            r
        };
        let rd = rank(pairs.iter().map(|p| p.0).collect());
        let rc = rank(pairs.iter().map(|p| p.1).collect());
        let rho = pearson(&rd, &rc);
        assert!(rho < -0.9, "spearman {rho}");
    }
}
