//! Annealing-relaxed channel indicators.
//!
//! Every prunable channel `i` of an indicator site carries an auxiliary
//! parameter `alpha_i`. During search the channel output is scaled by the
//! relaxed indicator `H_T(alpha) = sigmoid(alpha / T)`; the temperature `T`
//! anneals towards zero so the relaxed values converge to a hard 0/1 mask.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{stable_sigmoid, ParamStore, Real, Tape, Tensor, Var};

/// Parameter-store tag used for auxiliary indicator parameters.
pub const INDICATOR_TAG: u8 = 1;

/// Keep threshold used for the recoverability trace.
pub const TRACE_THRESHOLD: f64 = 0.5;

/// `H_T(alpha) = 1 / (1 + exp(-alpha / T))`.
pub fn relaxed_indicator(alpha: f64, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::Temperature(temperature));
    }
    Ok(stable_sigmoid(alpha / temperature))
}

/// Derivative of [`relaxed_indicator`] with respect to `alpha`.
pub fn relaxed_indicator_grad(alpha: f64, temperature: f64) -> Result<f64> {
    let h = relaxed_indicator(alpha, temperature)?;
    Ok(h * (1.0 - h) / temperature)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// `sigma(n) = 49 n / N + 1`
    Linear,
    /// `sigma(n) = 49 (1 - cos(pi/2 * n / N)) + 1`
    Cosine,
    /// `sigma(n) = 99 n / N + 1`
    #[serde(rename = "smallT", alias = "smallt")]
    SmallT,
    /// `sigma(n) = 1`: no annealing.
    Fixed,
}

impl std::str::FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            "smallt" => Ok(Self::SmallT),
            "fixed" => Ok(Self::Fixed),
            other => Err(format!("unknown schedule kind `{other}`")),
        }
    }
}

/// Epoch-indexed temperature annealing `T(n) = T0 / sigma(n)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub kind: ScheduleKind,
    pub t0: f64,
    pub n_max: usize,
}

impl TemperatureSchedule {
    pub fn new(kind: ScheduleKind, t0: f64, n_max: usize) -> Result<Self> {
        if !(t0 > 0.0) {
            return Err(Error::Temperature(t0));
        }
        Ok(Self { kind, t0, n_max })
    }

    pub fn sigma(&self, epoch: usize) -> Result<f64> {
        if epoch > self.n_max {
            return Err(Error::EpochOutOfRange {
                epoch,
                n_max: self.n_max,
            });
        }
        // A zero-length search never leaves sigma(0).
        let progress = if self.n_max == 0 {
            0.0
        } else {
            epoch as f64 / self.n_max as f64
        };
        Ok(match self.kind {
            ScheduleKind::Linear => 49.0 * progress + 1.0,
            ScheduleKind::Cosine => {
                49.0 * (1.0 - (std::f64::consts::FRAC_PI_2 * progress).cos()) + 1.0
            }
            ScheduleKind::SmallT => 99.0 * progress + 1.0,
            ScheduleKind::Fixed => 1.0,
        })
    }

    pub fn temperature_at(&self, epoch: usize) -> Result<f64> {
        Ok(self.t0 / self.sigma(epoch)?)
    }
}

/// How a relaxed indicator becomes a keep/drop decision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum BinarizeRule {
    /// Keep iff `alpha > 0`: the `T -> 0` limit of `H_T`.
    Sign,
    /// Keep iff `H_T(alpha) >= threshold` at the current temperature.
    Threshold { threshold: f64 },
}

/// One indicator site: a vector of auxiliary parameters gating the output
/// channels of one or more layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteInfo {
    pub name: String,
    pub len: usize,
    /// Layer indices whose output channels this site masks.
    pub masks: Vec<usize>,
}

/// Per-site auxiliary parameters and the current temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct IndicatorSet {
    alphas: ParamStore<f32>,
    temperature: f64,
    sites: Vec<SiteInfo>,
}

impl IndicatorSet {
    /// Draws every auxiliary parameter from `N(mean, std^2)`.
    pub fn init<R: Rng + ?Sized>(
        sites: Vec<SiteInfo>,
        mean: f64,
        std: f64,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let normal = Normal::new(mean, std).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let alphas = sites
            .iter()
            .map(|s| (0..s.len).map(|_| normal.sample(rng) as f32).collect())
            .collect();
        Self::from_alphas(sites, alphas, temperature)
    }

    pub fn from_alphas(sites: Vec<SiteInfo>, alphas: Vec<Vec<f32>>, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Temperature(temperature));
        }
        if sites.len() != alphas.len() {
            return Err(Error::Site {
                site: sites.len().min(alphas.len()),
                detail: format!("{} sites but {} alpha vectors", sites.len(), alphas.len()),
            });
        }
        let mut store = ParamStore::new(INDICATOR_TAG);
        for (i, (site, a)) in sites.iter().zip(alphas).enumerate() {
            if a.len() != site.len {
                return Err(Error::Site {
                    site: i,
                    detail: format!("expected {} entries, got {}", site.len, a.len()),
                });
            }
            let t = Tensor::new(&[site.len], a)?.with_grad();
            store.push(format!("alpha.{}", site.name), t);
        }
        Ok(Self {
            alphas: store,
            temperature,
            sites,
        })
    }

    pub fn sites(&self) -> &[SiteInfo] {
        &self.sites
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn total_channels(&self) -> usize {
        self.sites.iter().map(|s| s.len).sum()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, t: f64) -> Result<()> {
        if !(t > 0.0) {
            return Err(Error::Temperature(t));
        }
        self.temperature = t;
        Ok(())
    }

    pub fn alpha(&self, site: usize) -> &[f32] {
        self.alphas.get(site).tensor.data()
    }

    pub fn alpha_mut(&mut self, site: usize) -> &mut [f32] {
        self.alphas.get_mut(site).tensor.data_mut()
    }

    pub fn alphas(&self) -> Vec<Vec<f32>> {
        (0..self.num_sites()).map(|s| self.alpha(s).to_vec()).collect()
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.alphas
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.alphas
    }

    /// Relaxed indicator values of one site at the current temperature.
    pub fn relaxed(&self, site: usize) -> Vec<f64> {
        let t = self.temperature;
        self.alpha(site)
            .iter()
            .map(|&a| stable_sigmoid(a as f64 / t))
            .collect()
    }

    pub fn relaxed_all(&self) -> Vec<Vec<f64>> {
        (0..self.num_sites()).map(|s| self.relaxed(s)).collect()
    }

    /// Records the relaxed indicators of every site on `tape`.
    ///
    /// When `track` is false the values enter as constants and no gradient
    /// reaches the auxiliary parameters.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, track: bool) -> Result<Vec<Var>> {
        let store = track.then(|| self.alphas.cast::<T>());
        (0..self.num_sites())
            .map(|s| match &store {
                Some(store) => {
                    let leaf = tape.param_with(store, s, true);
                    tape.sigmoid_scaled(leaf, T::of(self.temperature))
                }
                None => {
                    let vals = self.relaxed(s).into_iter().map(T::of).collect();
                    tape.constant(&[self.sites[s].len], vals)
                }
            })
            .collect()
    }

    /// Per-site keep masks.
    pub fn binarize(&self, rule: BinarizeRule) -> Vec<Vec<bool>> {
        (0..self.num_sites())
            .map(|s| match rule {
                BinarizeRule::Sign => self.alpha(s).iter().map(|&a| a > 0.0).collect(),
                BinarizeRule::Threshold { threshold } => {
                    self.relaxed(s).into_iter().map(|h| h >= threshold).collect()
                }
            })
            .collect()
    }

    /// Number of channels per site whose relaxed indicator exceeds `threshold`.
    pub fn trace_counts(&self, threshold: f64) -> Vec<usize> {
        (0..self.num_sites())
            .map(|s| self.relaxed(s).into_iter().filter(|&h| h > threshold).count())
            .collect()
    }

    /// Fraction of entries with `min(H, 1 - H) < tol`.
    pub fn binarized_fraction(&self, tol: f64) -> f64 {
        let total = self.total_channels();
        if total == 0 {
            return 1.0;
        }
        let near = self
            .relaxed_all()
            .into_iter()
            .flatten()
            .filter(|&h| h.min(1.0 - h) < tol)
            .count();
        near as f64 / total as f64
    }

    /// Mean of `min(H, 1 - H)` over every entry.
    pub fn mean_discrepancy(&self) -> f64 {
        let total = self.total_channels().max(1);
        self.relaxed_all()
            .into_iter()
            .flatten()
            .map(|h| h.min(1.0 - h))
            .sum::<f64>()
            / total as f64
    }
}
