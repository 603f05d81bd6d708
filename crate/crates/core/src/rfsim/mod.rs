//! Synthetic dual-band RF world: log-distance path loss, a spatially
//! correlated shadow field shared between bands, piecewise-constant temporal
//! drift, per-epoch offsets and an RSSI-dependent loss model. The survey
//! simulator and the fingerprint database live in the submodules.

mod db;
mod survey;

pub use db::{Flag, FingerprintDatabase, FingerprintSample, Location};
pub use survey::{
    scan_positions, simulate_survey, sojourn_at, MotionParams, PowerModel, Stop, SurveyMode, Surveyor,
    TimeEnergyReport, Timeline,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::gridmap::{BinaryGrid, Cell};
use crate::rng::{hash_keys, hashed_normal};
use crate::{Error, Result};

pub const RSSI_MIN: f64 = -100.0;
pub const RSSI_MAX: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Band {
    #[serde(rename = "2.4")]
    B24,
    #[serde(rename = "5")]
    B5,
}

impl Band {
    pub const BOTH: [Band; 2] = [Band::B24, Band::B5];

    pub fn index(self) -> usize {
        match self {
            Band::B24 => 0,
            Band::B5 => 1,
        }
    }

    pub fn other(self) -> Band {
        match self {
            Band::B24 => Band::B5,
            Band::B5 => Band::B24,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Band::B24 => "2.4",
            Band::B5 => "5",
        }
    }

    pub fn parse(s: &str) -> Option<Band> {
        match s.trim() {
            "2.4" | "B24" | "b24" => Some(Band::B24),
            "5" | "B5" | "b5" => Some(Band::B5),
            _ => None,
        }
    }
}

impl std::fmt::Display for Band {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandParams {
    /// Received power at `d0`, dBm.
    pub tx_power_term: f64,
    /// Path-loss exponent.
    pub beta: f64,
    /// Standard deviation of the static shadow field, dB.
    pub shadow_sigma: f64,
    /// Reference distance, m.
    #[serde(default = "default_d0")]
    pub d0: f64,
}

fn default_d0() -> f64 {
    1.0
}

impl BandParams {
    pub const DEFAULT_24: BandParams = BandParams {
        tx_power_term: -30.0,
        beta: 2.8,
        shadow_sigma: 4.0,
        d0: 1.0,
    };
    pub const DEFAULT_5: BandParams = BandParams {
        tx_power_term: -33.0,
        beta: 3.2,
        shadow_sigma: 4.0,
        d0: 1.0,
    };

    fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.shadow_sigma >= 0.0 && self.d0 > 0.0)
            || !self.tx_power_term.is_finite()
        {
            return Err(Error::InvalidParameter(format!(
                "band parameters out of range: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessPoint {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub b24: BandParams,
    pub b5: BandParams,
}

impl AccessPoint {
    pub fn new(id: u32, x: f64, y: f64) -> Self {
        Self {
            id,
            x,
            y,
            b24: BandParams::DEFAULT_24,
            b5: BandParams::DEFAULT_5,
        }
    }

    pub fn band(&self, band: Band) -> &BandParams {
        match band {
            Band::B24 => &self.b24,
            Band::B5 => &self.b5,
        }
    }

    pub fn band_mut(&mut self, band: Band) -> &mut BandParams {
        match band {
            Band::B24 => &mut self.b24,
            Band::B5 => &mut self.b5,
        }
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    pub p_floor: f64,
    pub rssi_50: f64,
    pub slope: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            p_floor: 0.03,
            rssi_50: -90.0,
            slope: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalParams {
    /// Mean length of a period of stable RSSI, s.
    pub mean_stable_s: f64,
    /// Std of the per-period offset, dB.
    pub temporal_sigma: f64,
    /// Std of the per-epoch offset of each AP and band, dB.
    pub epoch_shift_sigma: f64,
}

impl Default for TemporalParams {
    fn default() -> Self {
        Self {
            mean_stable_s: 65.0,
            temporal_sigma: 1.5,
            epoch_shift_sigma: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShadowParams {
    /// Distance at which the field correlation falls to 1/e, m.
    pub correlation_length_m: f64,
    /// Correlation between the 2.4 GHz and 5 GHz shadow fields.
    pub band_rho: f64,
}

impl Default for ShadowParams {
    fn default() -> Self {
        Self {
            correlation_length_m: 2.0,
            band_rho: 0.9,
        }
    }
}

/// Everything needed to generate a world for a given floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    pub n_aps: usize,
    pub b24: BandParams,
    pub b5: BandParams,
    pub loss: LossParams,
    pub temporal: TemporalParams,
    pub shadow: ShadowParams,
    /// Per-scan measurement noise, dB.
    pub scan_noise_sigma: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            n_aps: 8,
            b24: BandParams::DEFAULT_24,
            b5: BandParams::DEFAULT_5,
            loss: LossParams::default(),
            temporal: TemporalParams::default(),
            shadow: ShadowParams::default(),
            scan_noise_sigma: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfWorld {
    pub aps: Vec<AccessPoint>,
    pub loss: LossParams,
    pub temporal: TemporalParams,
    pub shadow: ShadowParams,
    pub scan_noise_sigma: f64,
    /// Seed of the static shadow field, temporal tracks and epoch offsets.
    pub field_seed: u64,
}

const TAG_SHADOW: u64 = 0x5348_4144;
const TAG_TEMPORAL: u64 = 0x5445_4d50;
const TAG_EPOCH: u64 = 0x4550_4f43;
const COMMON: u64 = 2;

impl RfWorld {
    pub fn new(aps: Vec<AccessPoint>, field_seed: u64) -> Self {
        Self {
            aps,
            loss: LossParams::default(),
            temporal: TemporalParams::default(),
            shadow: ShadowParams::default(),
            scan_noise_sigma: 2.0,
            field_seed,
        }
    }

    /// Place `params.n_aps` APs over the free space with best-candidate
    /// sampling, which spreads them out without a regular pattern.
    pub fn generate(params: &WorldParams, free: &BinaryGrid, rng: &mut ChaCha8Rng) -> Result<Self> {
        let free_px: Vec<usize> = (0..free.cells.len()).filter(|&i| free.cells[i] == Cell::Free).collect();
        if free_px.is_empty() {
            return Err(Error::InvalidParameter("no free space to place APs".into()));
        }
        let g = &free.geometry;
        let mut placed: Vec<(f64, f64)> = Vec::with_capacity(params.n_aps);
        for _ in 0..params.n_aps {
            let mut best = None;
            let mut best_d = f64::NEG_INFINITY;
            for _ in 0..24 {
                let (x, y) = g.coords(free_px[rng.gen_range(0..free_px.len())]);
                let p = g.pixel_to_world(x as f64, y as f64);
                let d = placed
                    .iter()
                    .map(|q| (p.0 - q.0).hypot(p.1 - q.1))
                    .fold(f64::INFINITY, f64::min);
                if d > best_d {
                    best_d = d;
                    best = Some(p);
                }
            }
            placed.push(best.expect("at least one candidate"));
        }
        let aps = placed
            .into_iter()
            .enumerate()
            .map(|(i, (x, y))| AccessPoint {
                id: i as u32,
                x,
                y,
                b24: params.b24,
                b5: params.b5,
            })
            .collect();
        let world = Self {
            aps,
            loss: params.loss,
            temporal: params.temporal,
            shadow: params.shadow,
            scan_noise_sigma: params.scan_noise_sigma,
            field_seed: rng.gen(),
        };
        world.validate()?;
        Ok(world)
    }

    pub fn validate(&self) -> Result<()> {
        for ap in &self.aps {
            ap.b24.validate()?;
            ap.b5.validate()?;
        }
        let l = &self.loss;
        if !(0.0..1.0).contains(&l.p_floor) || !(l.slope > 0.0) {
            return Err(Error::InvalidParameter(format!("loss parameters out of range: {l:?}")));
        }
        let t = &self.temporal;
        if !(t.mean_stable_s > 0.0) || t.temporal_sigma < 0.0 || t.epoch_shift_sigma < 0.0 {
            return Err(Error::InvalidParameter(format!("temporal parameters out of range: {t:?}")));
        }
        let s = &self.shadow;
        if !(s.correlation_length_m > 0.0) || !(-1.0..=1.0).contains(&s.band_rho) {
            return Err(Error::InvalidParameter(format!("shadow parameters out of range: {s:?}")));
        }
        if self.scan_noise_sigma < 0.0 {
            return Err(Error::InvalidParameter("scan_noise_sigma < 0".into()));
        }
        Ok(())
    }

    pub fn ap_index(&self, ap_id: u32) -> Option<usize> {
        self.aps.iter().position(|a| a.id == ap_id)
    }

    /// Unit-variance shadow field values `[2.4, 5]` of AP `ap_idx` at `pos`.
    pub fn shadow_unit(&self, ap_idx: usize, pos: (f64, f64)) -> [f64; 2] {
        let f = GaussianField::new(self.shadow.correlation_length_m);
        let key = |c: u64| [self.field_seed, TAG_SHADOW, ap_idx as u64, c];
        let common = f.eval(pos, &key(COMMON));
        let (w0, w1, own) = band_weights(self.shadow.band_rho);
        [
            w0 * common + own * f.eval(pos, &key(0)),
            w1 * common + own * f.eval(pos, &key(1)),
        ]
    }

    /// Static shadow in dB for both bands.
    pub fn shadow_db(&self, ap_idx: usize, pos: (f64, f64)) -> [f64; 2] {
        let u = self.shadow_unit(ap_idx, pos);
        let ap = &self.aps[ap_idx];
        [u[0] * ap.b24.shadow_sigma, u[1] * ap.b5.shadow_sigma]
    }

    pub fn epoch_shift(&self, ap_idx: usize, band: Band, epoch: u32) -> f64 {
        if epoch == 0 {
            return 0.0;
        }
        self.temporal.epoch_shift_sigma
            * hashed_normal(&[self.field_seed, TAG_EPOCH, ap_idx as u64, band.index() as u64, epoch as u64])
    }

    /// Temporal offsets `[2.4, 5]` at time `t` of an epoch. Stable periods
    /// have exponential lengths; both bands share period boundaries and
    /// mix their levels with the same correlation as the shadow field.
    pub fn temporal_offset(&self, ap_idx: usize, epoch: u32, t: f64) -> [f64; 2] {
        let tp = &self.temporal;
        if tp.temporal_sigma == 0.0 {
            return [0.0; 2];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(hash_keys(&[
            self.field_seed,
            TAG_TEMPORAL,
            ap_idx as u64,
            epoch as u64,
        ]));
        let exp = Exp::new(1.0 / tp.mean_stable_s).expect("positive rate");
        // the first period starts at a random phase so t = 0 is not special
        let mut end = rng.gen::<f64>() * exp.sample(&mut rng);
        loop {
            let zc: f64 = StandardNormal.sample(&mut rng);
            let z0: f64 = StandardNormal.sample(&mut rng);
            let z1: f64 = StandardNormal.sample(&mut rng);
            if t < end {
                let (w0, w1, own) = band_weights(self.shadow.band_rho);
                return [
                    tp.temporal_sigma * (w0 * zc + own * z0),
                    tp.temporal_sigma * (w1 * zc + own * z1),
                ];
            }
            end += exp.sample(&mut rng);
        }
    }

    /// Time-averaged RSSI of an epoch at `pos`: path loss, static shadow and
    /// epoch offset, before clamping.
    pub fn expected_rssi(&self, ap_idx: usize, band: Band, pos: (f64, f64), epoch: u32) -> f64 {
        let ap = &self.aps[ap_idx];
        rssi_mean(ap, band, pos) + self.shadow_db(ap_idx, pos)[band.index()] + self.epoch_shift(ap_idx, band, epoch)
    }

    /// Noise-free part of a scan at `pos` for every AP and band.
    pub fn static_levels(&self, pos: (f64, f64), epoch: u32) -> Vec<[f64; 2]> {
        (0..self.aps.len())
            .map(|i| {
                let ap = &self.aps[i];
                let s = self.shadow_db(i, pos);
                [
                    rssi_mean(ap, Band::B24, pos) + s[0] + self.epoch_shift(i, Band::B24, epoch),
                    rssi_mean(ap, Band::B5, pos) + s[1] + self.epoch_shift(i, Band::B5, epoch),
                ]
            })
            .collect()
    }

    /// Scan from precomputed static levels (see [`RfWorld::static_levels`]).
    pub fn scan_with_levels(&self, levels: &[[f64; 2]], t: f64, epoch: u32, rng: &mut ChaCha8Rng) -> Vec<Reading> {
        let mut out = Vec::with_capacity(2 * levels.len());
        for (i, lv) in levels.iter().enumerate() {
            let temporal = self.temporal_offset(i, epoch, t);
            for band in Band::BOTH {
                let b = band.index();
                let noise: f64 = if self.scan_noise_sigma > 0.0 {
                    self.scan_noise_sigma * Distribution::<f64>::sample(&StandardNormal, rng)
                } else {
                    0.0
                };
                let rssi = clamp_rssi(lv[b] + temporal[b] + noise);
                let lost = rng.gen::<f64>() < loss_probability(rssi, &self.loss);
                out.push(Reading {
                    ap_id: self.aps[i].id,
                    band,
                    rssi: (!lost).then_some(rssi),
                });
            }
        }
        out
    }
}

/// Weights of the shared and own unit components of the two bands, so
/// each band has unit variance and the pair has correlation `rho`.
fn band_weights(rho: f64) -> (f64, f64, f64) {
    let w = rho.abs().sqrt();
    (w, w.copysign(rho), (1.0 - rho.abs()).max(0.0).sqrt())
}

/// One (AP, band) entry of a scan; `None` when the beacon was missed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reading {
    pub ap_id: u32,
    pub band: Band,
    pub rssi: Option<f64>,
}

pub fn clamp_rssi(v: f64) -> f64 {
    v.clamp(RSSI_MIN, RSSI_MAX)
}

/// Deterministic log-distance path loss; distances below `d0` are clamped.
pub fn rssi_mean(ap: &AccessPoint, band: Band, pos: (f64, f64)) -> f64 {
    let p = ap.band(band);
    let d = (pos.0 - ap.x).hypot(pos.1 - ap.y).max(p.d0);
    p.tx_power_term - 10.0 * p.beta * (d / p.d0).log10()
}

/// One RSSI reading of `world.aps[ap_idx]`, clamped to [-100, 0] dBm.
pub fn sample_rssi(
    world: &RfWorld,
    ap_idx: usize,
    band: Band,
    pos: (f64, f64),
    t: f64,
    epoch: u32,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let b = band.index();
    let noise: f64 = if world.scan_noise_sigma > 0.0 {
        world.scan_noise_sigma * Distribution::<f64>::sample(&StandardNormal, rng)
    } else {
        0.0
    };
    clamp_rssi(world.expected_rssi(ap_idx, band, pos, epoch) + world.temporal_offset(ap_idx, epoch, t)[b] + noise)
}

pub fn loss_probability(rssi: f64, loss: &LossParams) -> f64 {
    let z = (loss.rssi_50 - rssi) / loss.slope;
    loss.p_floor + (1.0 - loss.p_floor) / (1.0 + (-z).exp())
}

/// One scan: a reading per (AP, band), each lost independently.
pub fn simulate_scan(world: &RfWorld, pos: (f64, f64), t: f64, epoch: u32, rng: &mut ChaCha8Rng) -> Vec<Reading> {
    let levels = world.static_levels(pos, epoch);
    world.scan_with_levels(&levels, t, epoch, rng)
}

/// White noise on a square lattice smoothed by a Gaussian kernel and
/// renormalized to unit variance at every point. Lattice normals are hashed
/// from their node index, so the field can be read anywhere without bounds.
struct GaussianField {
    spacing: f64,
    kernel_sd: f64,
    reach: i64,
}

impl GaussianField {
    fn new(correlation_length: f64) -> Self {
        // smoothing white noise with sd s gives correlation exp(-d²/4s²)
        let kernel_sd = correlation_length / 2.0;
        let spacing = kernel_sd / 2.0;
        Self {
            spacing,
            kernel_sd,
            reach: (3.0 * kernel_sd / spacing).ceil() as i64,
        }
    }

    fn weights(&self, c: f64) -> (i64, Vec<f64>) {
        let base = (c / self.spacing).floor() as i64;
        let lo = base - self.reach + 1;
        let w = (0..2 * self.reach)
            .map(|k| {
                let d = (lo + k) as f64 * self.spacing - c;
                (-0.5 * (d / self.kernel_sd).powi(2)).exp()
            })
            .collect();
        (lo, w)
    }

    fn eval(&self, pos: (f64, f64), key: &[u64; 4]) -> f64 {
        let (x0, wx) = self.weights(pos.0);
        let (y0, wy) = self.weights(pos.1);
        let mut acc = 0.0;
        for (j, &wyj) in wy.iter().enumerate() {
            let iy = (y0 + j as i64) as u64;
            let mut row = 0.0;
            for (i, &wxi) in wx.iter().enumerate() {
                let ix = (x0 + i as i64) as u64;
                row += wxi * hashed_normal(&[key[0], key[1], key[2], key[3], ix, iy]);
            }
            acc += wyj * row;
        }
        let nx: f64 = wx.iter().map(|w| w * w).sum();
        let ny: f64 = wy.iter().map(|w| w * w).sum();
        acc / (nx * ny).sqrt()
    }
}
