//! Lost-signal recovery. For each AP the difference between its 2.4 GHz and
//! 5 GHz RSSI is a smooth function of position, so a band that was missed
//! can be predicted from the band that was heard. The difference field is
//! learned per region with ε-SVR; scans that missed both bands get the
//! -100 dBm placeholder.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::rfsim::{clamp_rssi, Band, FingerprintDatabase, Flag, Location};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvrParams {
    pub c: f64,
    pub epsilon_db: f64,
    /// RBF width, 1/m². `None` picks 1/(2·median²) of pairwise distances.
    pub gamma: Option<f64>,
    pub tolerance: f64,
    pub min_samples: usize,
    pub max_iter: usize,
}

impl Default for SvrParams {
    fn default() -> Self {
        Self {
            c: 10.0,
            epsilon_db: 1.0,
            gamma: None,
            tolerance: 1e-3,
            min_samples: 10,
            max_iter: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Predict24From5,
    Predict5From24,
}

impl Direction {
    pub fn target(self) -> Band {
        match self {
            Direction::Predict24From5 => Band::B24,
            Direction::Predict5From24 => Band::B5,
        }
    }

    pub fn for_target(band: Band) -> Direction {
        match band {
            Band::B24 => Direction::Predict24From5,
            Band::B5 => Direction::Predict5From24,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffSample {
    pub x: f64,
    pub y: f64,
    /// P_2.4 − P_5, dB.
    pub delta_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Model {
    Svr {
        /// `(x, y, coefficient)` of every support vector.
        support: Vec<(f64, f64, f64)>,
        gamma: f64,
        bias: f64,
    },
    FallbackConstant { value: f64 },
}

/// Predicts `target − source` RSSI at a position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffRegressor {
    pub ap_id: u32,
    pub direction: Direction,
    pub model: Model,
    pub params: SvrParams,
}

impl DiffRegressor {
    pub fn predict(&self, pos: (f64, f64)) -> f64 {
        match &self.model {
            Model::FallbackConstant { value } => *value,
            Model::Svr { support, gamma, bias } => {
                bias + support
                    .iter()
                    .map(|&(x, y, c)| c * (-gamma * ((x - pos.0).powi(2) + (y - pos.1).powi(2))).exp())
                    .sum::<f64>()
            }
        }
    }

    pub fn is_fallback(&self) -> bool {
        matches!(self.model, Model::FallbackConstant { .. })
    }
}

/// One sample per location of `region` (all regions when `None`) where
/// both bands of `ap_id` were measured.
pub fn collect_diff_samples_in(db: &FingerprintDatabase, ap_id: u32, region: Option<usize>) -> Vec<DiffSample> {
    diff_samples_at(db, &db.locations(), ap_id, region)
}

fn diff_samples_at(db: &FingerprintDatabase, locs: &[Location], ap_id: u32, region: Option<usize>) -> Vec<DiffSample> {
    locs.iter()
        .filter(|l| region.is_none_or(|r| r == l.region_id))
        .filter_map(|l| {
            let a = db.find_at(l, ap_id, Band::B24)?;
            let b = db.find_at(l, ap_id, Band::B5)?;
            let (a, b) = (&db.samples[a], &db.samples[b]);
            (a.flag == Flag::Measured && b.flag == Flag::Measured).then_some(DiffSample {
                x: l.x,
                y: l.y,
                delta_db: a.rssi - b.rssi,
            })
        })
        .collect()
}

pub fn collect_diff_samples(db: &FingerprintDatabase, ap_id: u32) -> Vec<DiffSample> {
    collect_diff_samples_in(db, ap_id, None)
}

/// Fit the regressor predicting `direction.target()` from the other band.
pub fn fit_diff_regressor(samples: &[DiffSample], ap_id: u32, direction: Direction, params: &SvrParams) -> DiffRegressor {
    let sign = match direction {
        Direction::Predict24From5 => 1.0,
        Direction::Predict5From24 => -1.0,
    };
    let xs: Vec<(f64, f64)> = samples.iter().map(|s| (s.x, s.y)).collect();
    let ys: Vec<f64> = samples.iter().map(|s| sign * s.delta_db).collect();
    let model = if samples.len() < params.min_samples.max(1) {
        let value = if ys.is_empty() { 0.0 } else { ys.iter().sum::<f64>() / ys.len() as f64 };
        Model::FallbackConstant { value }
    } else {
        let gamma = params.gamma.unwrap_or_else(|| median_gamma(&xs));
        let (coef, bias) = svr_smo(&xs, &ys, gamma, params);
        let support = xs
            .iter()
            .zip(&coef)
            .filter(|(_, &c)| c != 0.0)
            .map(|(&(x, y), &c)| (x, y, c))
            .collect();
        Model::Svr { support, gamma, bias }
    };
    DiffRegressor {
        ap_id,
        direction,
        model,
        params: *params,
    }
}

/// 1/(2·m²) for the median pairwise distance m; 1 if all points coincide.
pub fn median_gamma(xs: &[(f64, f64)]) -> f64 {
    let mut d: Vec<f64> = Vec::with_capacity(xs.len() * xs.len().saturating_sub(1) / 2);
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            d.push((xs[i].0 - xs[j].0).hypot(xs[i].1 - xs[j].1));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, &mut m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if m > 0.0 {
        1.0 / (2.0 * m * m)
    } else {
        1.0
    }
}

/// ε-SVR dual solved by SMO with second-order working-set selection.
///
/// Variables `a[0..n]` pair with +1 labels and `a[n..2n]` with -1; the
/// dual is min ½aᵀQa + pᵀa, yᵀa = 0, 0 ≤ a ≤ C with Q_ij = y_i·y_j·K.
/// Returns per-sample coefficients `a_i − a_{i+n}` and the bias.
fn svr_smo(xs: &[(f64, f64)], ys: &[f64], gamma: f64, params: &SvrParams) -> (Vec<f64>, f64) {
    let n = xs.len();
    let c = params.c;
    let kern: Vec<f64> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            (-gamma * ((xs[i].0 - xs[j].0).powi(2) + (xs[i].1 - xs[j].1).powi(2))).exp()
        })
        .collect();
    let m = 2 * n;
    let sign = |t: usize| if t < n { 1.0 } else { -1.0 };
    let k = |s: usize, t: usize| kern[(s % n) * n + t % n];
    let q = |s: usize, t: usize| sign(s) * sign(t) * k(s, t);
    let mut a = vec![0.0; m];
    let mut grad: Vec<f64> = (0..m)
        .map(|t| if t < n { params.epsilon_db - ys[t] } else { params.epsilon_db + ys[t - n] })
        .collect();
    let up = |a: &[f64], t: usize| if t < n { a[t] < c } else { a[t] > 0.0 };
    let low = |a: &[f64], t: usize| if t < n { a[t] > 0.0 } else { a[t] < c };
    const TAU: f64 = 1e-12;

    for _ in 0..params.max_iter {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..m {
            if up(&a, t) && -sign(t) * grad[t] > gmax {
                gmax = -sign(t) * grad[t];
                i = t;
            }
        }
        let mut gmin = f64::INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..m {
            if !low(&a, t) {
                continue;
            }
            let v = -sign(t) * grad[t];
            gmin = gmin.min(v);
            if i == usize::MAX {
                continue;
            }
            let b = gmax - v;
            if b > 0.0 {
                let mut curv = k(i, i) + k(t, t) - 2.0 * sign(i) * sign(t) * q(i, t);
                if curv <= 0.0 {
                    curv = TAU;
                }
                let obj = -b * b / curv;
                if obj < best {
                    best = obj;
                    j = t;
                }
            }
        }
        if i == usize::MAX || j == usize::MAX || gmax - gmin < params.tolerance {
            break;
        }
        let (old_i, old_j) = (a[i], a[j]);
        let (yi, yj) = (sign(i), sign(j));
        let mut curv = k(i, i) + k(j, j) - 2.0 * yi * yj * q(i, j);
        if curv <= 0.0 {
            curv = TAU;
        }
        if yi != yj {
            let delta = (-grad[i] - grad[j]) / curv;
            let diff = a[i] - a[j];
            a[i] += delta;
            a[j] += delta;
            if diff > 0.0 {
                if a[j] < 0.0 {
                    a[j] = 0.0;
                    a[i] = diff;
                }
            } else if a[i] < 0.0 {
                a[i] = 0.0;
                a[j] = -diff;
            }
            if diff > 0.0 {
                if a[i] > c {
                    a[i] = c;
                    a[j] = c - diff;
                }
            } else if a[j] > c {
                a[j] = c;
                a[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / curv;
            let sum = a[i] + a[j];
            a[i] -= delta;
            a[j] += delta;
            if sum > c {
                if a[i] > c {
                    a[i] = c;
                    a[j] = sum - c;
                }
            } else if a[j] < 0.0 {
                a[j] = 0.0;
                a[i] = sum;
            }
            if sum > c {
                if a[j] > c {
                    a[j] = c;
                    a[i] = sum - c;
                }
            } else if a[i] < 0.0 {
                a[i] = 0.0;
                a[j] = sum;
            }
        }
        let (di, dj) = (a[i] - old_i, a[j] - old_j);
        for t in 0..m {
            grad[t] += q(t, i) * di + q(t, j) * dj;
        }
    }

    // rho from free variables, or the midpoint of the feasible interval
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..m {
        let yg = sign(t) * grad[t];
        let at_upper = a[t] >= c;
        let at_lower = a[t] <= 0.0;
        if at_upper {
            if sign(t) < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if at_lower {
            if sign(t) > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 { sum_free / n_free as f64 } else { (ub + lb) / 2.0 };
    let coef = (0..n).map(|t| a[t] - a[t + n]).collect();
    (coef, -rho)
}

/// Regressors for every (region, AP, direction) of a database.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegressorSet {
    pub by_key: BTreeMap<(usize, u32, Direction), DiffRegressor>,
}

impl RegressorSet {
    pub fn get(&self, region: usize, ap_id: u32, direction: Direction) -> Option<&DiffRegressor> {
        self.by_key.get(&(region, ap_id, direction))
    }

    pub fn fallback_count(&self) -> usize {
        self.by_key.values().filter(|r| r.is_fallback()).count()
    }
}

/// Fit both directions for every AP in every region, on that region's
/// dual-measured locations. Regions without any such location fall back to
/// the floor-wide mean difference of the AP.
pub fn fit_regressors(db: &FingerprintDatabase, params: &SvrParams) -> RegressorSet {
    let mut set = RegressorSet::default();
    let locs = db.locations();
    for ap in db.ap_ids() {
        let all = diff_samples_at(db, &locs, ap, None);
        for region in db.region_ids() {
            let local = diff_samples_at(db, &locs, ap, Some(region));
            for dir in [Direction::Predict24From5, Direction::Predict5From24] {
                let r = if local.is_empty() {
                    fit_diff_regressor(&all, ap, dir, &SvrParams { min_samples: usize::MAX, ..*params })
                } else {
                    fit_diff_regressor(&local, ap, dir, params)
                };
                set.by_key.insert((region, ap, dir), r);
            }
        }
    }
    set
}

/// Fill single-band losses from the other band; dual losses stay at the
/// -100 dBm placeholder flagged Lost. Other rows are untouched.
pub fn recover_lost(db: &FingerprintDatabase, regressors: &RegressorSet) -> FingerprintDatabase {
    let mut out = db.clone();
    let aps = db.ap_ids();
    for loc in db.locations() {
        for &ap in &aps {
            let (Some(i24), Some(i5)) = (db.find_at(&loc, ap, Band::B24), db.find_at(&loc, ap, Band::B5)) else {
                continue;
            };
            let (s24, s5) = (&db.samples[i24], &db.samples[i5]);
            let (lost, source) = match (s24.is_lost(), s5.is_lost()) {
                (true, false) => (i24, s5),
                (false, true) => (i5, s24),
                _ => continue,
            };
            if !source.flag.is_valid() {
                continue;
            }
            let dir = Direction::for_target(db.samples[lost].band);
            let Some(reg) = regressors.get(loc.region_id, ap, dir) else {
                continue;
            };
            let s = &mut out.samples[lost];
            s.rssi = clamp_rssi(source.rssi + reg.predict(loc.pos()));
            s.flag = Flag::RecoveredDual;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rfsim::FingerprintSample;

    fn row(x: f64, ap: u32, band: Band, rssi: Option<f64>) -> FingerprintSample {
        FingerprintSample {
            epoch: 0,
            region_id: 0,
            x,
            y: 0.0,
            ap_id: ap,
            band,
            rssi: rssi.unwrap_or(-100.0),
            flag: if rssi.is_some() { Flag::Measured } else { Flag::Lost },
            t: 0.0,
        }
    }

    #[test]
    fn no_dual_rows_give_no_samples() {
        let db = FingerprintDatabase {
            epoch: 0,
            samples: vec![row(0.0, 0, Band::B24, Some(-50.0)), row(0.0, 0, Band::B5, None)],
        };
        assert!(collect_diff_samples(&db, 0).is_empty());
    }

    #[test]
    fn dual_rows_give_differences() {
        let mut samples = Vec::new();
        for i in 0..5 {
            samples.push(row(i as f64, 0, Band::B24, Some(-50.0 - i as f64)));
            samples.push(row(i as f64, 0, Band::B5, Some(-60.0)));
        }
        let db = FingerprintDatabase { epoch: 0, samples };
        let d = collect_diff_samples(&db, 0);
        assert_eq!(d.len(), 5);
        for (i, s) in d.iter().enumerate() {
            assert_eq!(s.delta_db, 10.0 - i as f64);
        }
    }

    #[test]
    fn constant_difference_is_reproduced() {
        let samples: Vec<DiffSample> = (0..30)
            .map(|i| DiffSample {
                x: (i % 6) as f64 * 0.8,
                y: (i / 6) as f64 * 0.8,
                delta_db: 4.0,
            })
            .collect();
        let r = fit_diff_regressor(&samples, 0, Direction::Predict24From5, &SvrParams::default());
        assert!(!r.is_fallback());
        for s in &samples {
            assert!((r.predict((s.x, s.y)) - 4.0).abs() <= 1.0 + 1e-9);
        }
        let back = fit_diff_regressor(&samples, 0, Direction::Predict5From24, &SvrParams::default());
        assert!((back.predict((1.0, 1.0)) + 4.0).abs() <= 1.0 + 1e-9);
    }

    #[test]
    fn too_few_samples_fall_back_to_mean() {
        let samples: Vec<DiffSample> = [1.0, 2.0, 6.0]
            .iter()
            .enumerate()
            .map(|(i, &d)| DiffSample {
                x: i as f64,
                y: 0.0,
                delta_db: d,
            })
            .collect();
        let r = fit_diff_regressor(&samples, 7, Direction::Predict24From5, &SvrParams::default());
        assert_eq!(r.model, Model::FallbackConstant { value: 3.0 });
    }

    #[test]
    fn single_band_loss_uses_prediction() {
        let db = FingerprintDatabase {
            epoch: 0,
            samples: vec![row(0.0, 0, Band::B24, None), row(0.0, 0, Band::B5, Some(-60.0))],
        };
        let mut set = RegressorSet::default();
        set.by_key.insert(
            (0, 0, Direction::Predict24From5),
            DiffRegressor {
                ap_id: 0,
                direction: Direction::Predict24From5,
                model: Model::FallbackConstant { value: 4.0 },
                params: SvrParams::default(),
            },
        );
        let out = recover_lost(&db, &set);
        assert_eq!(out.samples[0].rssi, -56.0);
        assert_eq!(out.samples[0].flag, Flag::RecoveredDual);
        assert_eq!(out.samples[1], db.samples[1]);
    }

    #[test]
    fn dual_loss_stays_lost() {
        let db = FingerprintDatabase {
            epoch: 0,
            samples: vec![row(0.0, 0, Band::B24, None), row(0.0, 0, Band::B5, None)],
        };
        let set = fit_regressors(&db, &SvrParams::default());
        let out = recover_lost(&db, &set);
        assert_eq!(out, db);
    }
}
