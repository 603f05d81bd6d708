//! Gaussian-process regression of RSSI over position, the largest
//! normalized residual (LNR) test for gross errors, and the two ways of
//! repairing flagged samples: shifting last epoch's value by the AP's
//! estimated offset, or sending the robot back to re-measure.

use serde::{Deserialize, Serialize};

use crate::rfsim::{Band, FingerprintDatabase, Flag};
use crate::{Error, Result};

/// Squared-exponential kernel σ_f²·exp(−‖Δ‖²/2l²) plus white noise σ².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpHyper {
    pub sigma_f: f64,
    pub length_scale: f64,
    pub noise_sigma: f64,
}

impl GpHyper {
    pub const DEFAULT: GpHyper = GpHyper {
        sigma_f: 6.0,
        length_scale: 2.0,
        noise_sigma: 3.0,
    };

    pub fn kernel(&self, a: (f64, f64), b: (f64, f64)) -> f64 {
        let d2 = (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2);
        self.sigma_f * self.sigma_f * (-0.5 * d2 / (self.length_scale * self.length_scale)).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpParams {
    pub sigma_f_range: (f64, f64),
    pub length_scale_range: (f64, f64),
    pub noise_sigma_range: (f64, f64),
    /// Log-spaced grid points per hyperparameter.
    pub grid_points: usize,
    pub refine_rounds: usize,
    /// Hyperparameters are fitted on at most this many evenly strided
    /// samples; the model itself always uses all of them.
    pub max_fit_points: usize,
    /// LNR threshold.
    pub t: f64,
    /// LNR stops after removing this fraction of the samples.
    pub max_removed_fraction: f64,
    pub min_samples: usize,
    /// After LNR converges, refit the hyperparameters on the retained
    /// samples and run it again from the full set, up to this many times.
    pub refit_passes: usize,
}

impl Default for GpParams {
    fn default() -> Self {
        Self {
            sigma_f_range: (2.0, 12.0),
            length_scale_range: (0.8, 8.0),
            noise_sigma_range: (1.0, 6.0),
            grid_points: 4,
            refine_rounds: 3,
            max_fit_points: 60,
            t: 1.96,
            max_removed_fraction: 0.3,
            min_samples: 5,
            refit_passes: 1,
        }
    }
}

/// Lower Cholesky factor of an n×n symmetric matrix (row-major). Jitter is
/// added to the diagonal, growing tenfold, until the factorization works.
fn cholesky_with_jitter(mut a: Vec<f64>, n: usize) -> Result<(Vec<f64>, f64)> {
    let trace = (0..n).map(|i| a[i * n + i]).sum::<f64>() / n.max(1) as f64;
    let mut jitter = 0.0;
    for attempt in 0..12 {
        if attempt > 0 {
            let add = if jitter == 0.0 { 1e-10 * trace.max(1e-300) } else { jitter * 9.0 };
            for i in 0..n {
                a[i * n + i] += add;
            }
            jitter += add;
            log::warn!("cholesky failed; adding diagonal jitter {jitter:.3e}");
        }
        if let Some(l) = cholesky(&a, n) {
            return Ok((l, jitter));
        }
    }
    Err(Error::InvalidParameter("covariance matrix is not positive definite".into()))
}

fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Some(l)
}

/// Solve L·x = b in place.
fn forward(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solve Lᵀ·x = b in place.
fn backward(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpModel {
    pub hyper: GpHyper,
    pub train_x: Vec<(f64, f64)>,
    pub train_y: Vec<f64>,
    /// Constant prior mean.
    pub mean: f64,
    /// Lower Cholesky factor of K(X, X) + σ²I, row-major.
    pub factor: Vec<f64>,
    alpha: Vec<f64>,
    pub jitter: f64,
}

impl GpModel {
    /// Zero prior mean.
    pub fn fit(x: &[(f64, f64)], y: &[f64], hyper: GpHyper) -> Result<Self> {
        Self::fit_with_mean(x, y, hyper, 0.0)
    }

    /// Prior mean set to the sample mean of `y`.
    pub fn fit_centered(x: &[(f64, f64)], y: &[f64], hyper: GpHyper) -> Result<Self> {
        let m = if y.is_empty() { 0.0 } else { y.iter().sum::<f64>() / y.len() as f64 };
        Self::fit_with_mean(x, y, hyper, m)
    }

    pub fn fit_with_mean(x: &[(f64, f64)], y: &[f64], hyper: GpHyper, mean: f64) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::InvalidParameter("x and y lengths differ".into()));
        }
        let n = x.len();
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = hyper.kernel(x[i], x[j]);
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
            k[i * n + i] += hyper.noise_sigma * hyper.noise_sigma;
        }
        let (factor, jitter) = cholesky_with_jitter(k, n)?;
        let mut alpha: Vec<f64> = y.iter().map(|v| v - mean).collect();
        forward(&factor, n, &mut alpha);
        backward(&factor, n, &mut alpha);
        Ok(Self {
            hyper,
            train_x: x.to_vec(),
            train_y: y.to_vec(),
            mean,
            factor,
            alpha,
            jitter,
        })
    }

    pub fn len(&self) -> usize {
        self.train_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_x.is_empty()
    }

    /// Log marginal likelihood of the training targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.len();
        let fit: f64 = self
            .train_y
            .iter()
            .zip(&self.alpha)
            .map(|(y, a)| (y - self.mean) * a)
            .sum();
        let logdet: f64 = (0..n).map(|i| self.factor[i * n + i].ln()).sum();
        -0.5 * fit - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Predictive mean and variance (including the noise term) at `x_star`.
pub fn gp_predict(model: &GpModel, x_star: &[(f64, f64)]) -> (Vec<f64>, Vec<f64>) {
    let n = model.len();
    let h = &model.hyper;
    let prior = h.sigma_f * h.sigma_f + h.noise_sigma * h.noise_sigma;
    let mut mu = Vec::with_capacity(x_star.len());
    let mut var = Vec::with_capacity(x_star.len());
    let mut ks = vec![0.0; n];
    for &xs in x_star {
        for (k, &xt) in ks.iter_mut().zip(&model.train_x) {
            *k = h.kernel(xs, xt);
        }
        mu.push(model.mean + ks.iter().zip(&model.alpha).map(|(k, a)| k * a).sum::<f64>());
        forward(&model.factor, n, &mut ks);
        let v = prior - ks.iter().map(|v| v * v).sum::<f64>();
        var.push(v.max(1e-12 * prior));
    }
    (mu, var)
}

/// r^N_i = (y_i − μ*_i)/√var*_i with predictions at the training inputs.
pub fn normalized_residuals(model: &GpModel) -> Vec<f64> {
    let (mu, var) = gp_predict(model, &model.train_x);
    model
        .train_y
        .iter()
        .zip(mu.iter().zip(&var))
        .map(|(y, (m, v))| (y - m) / v.sqrt())
        .collect()
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![(lo * hi).sqrt()];
    }
    (0..n)
        .map(|k| (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / (n - 1) as f64).exp())
        .collect()
}

fn strided<T: Copy>(v: &[T], max: usize) -> Vec<T> {
    if v.len() <= max || max == 0 {
        return v.to_vec();
    }
    (0..max).map(|k| v[k * v.len() / max]).collect()
}

fn centered_lml(x: &[(f64, f64)], y: &[f64], h: GpHyper) -> f64 {
    GpModel::fit_centered(x, y, h).map_or(f64::NEG_INFINITY, |m| m.log_marginal_likelihood())
}

/// Maximize the log marginal likelihood of the mean-centred targets over a
/// log grid, then refine one coordinate at a time within the grid bounds.
pub fn fit_hyperparameters(x: &[(f64, f64)], y: &[f64], params: &GpParams) -> GpHyper {
    if x.len() < params.min_samples.max(1) {
        return GpHyper::DEFAULT;
    }
    let x = strided(x, params.max_fit_points);
    let y = strided(y, params.max_fit_points);
    let grids = [
        log_grid(params.sigma_f_range.0, params.sigma_f_range.1, params.grid_points),
        log_grid(params.length_scale_range.0, params.length_scale_range.1, params.grid_points),
        log_grid(params.noise_sigma_range.0, params.noise_sigma_range.1, params.grid_points),
    ];
    let mut best = (f64::NEG_INFINITY, GpHyper::DEFAULT);
    for &sf in &grids[0] {
        for &l in &grids[1] {
            for &s in &grids[2] {
                let h = GpHyper {
                    sigma_f: sf,
                    length_scale: l,
                    noise_sigma: s,
                };
                let v = centered_lml(&x, &y, h);
                if v > best.0 {
                    best = (v, h);
                }
            }
        }
    }
    let ranges = [params.sigma_f_range, params.length_scale_range, params.noise_sigma_range];
    let mut step: Vec<f64> = ranges
        .iter()
        .map(|r| (r.1 / r.0).powf(1.0 / (params.grid_points.max(2) - 1) as f64).sqrt())
        .collect();
    for _ in 0..params.refine_rounds {
        for c in 0..3 {
            for f in [step[c], 1.0 / step[c]] {
                let mut h = best.1;
                let p = match c {
                    0 => &mut h.sigma_f,
                    1 => &mut h.length_scale,
                    _ => &mut h.noise_sigma,
                };
                *p = (*p * f).clamp(ranges[c].0, ranges[c].1);
                let v = centered_lml(&x, &y, h);
                if v > best.0 {
                    best = (v, h);
                }
            }
            step[c] = step[c].sqrt();
        }
    }
    best.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LnrStatus {
    Converged,
    NonConverged,
    /// Stopped because fewer than the minimum number of samples remained.
    TooFewRemaining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outlier {
    pub index: usize,
    pub r_n: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// Residuals of the retained samples at termination, by input index
    /// (`None` for removed samples).
    pub residuals: Vec<Option<f64>>,
    /// Removed samples in removal order.
    pub outliers: Vec<Outlier>,
    pub iterations: usize,
    pub status: LnrStatus,
    pub hyper: GpHyper,
}

/// Index of the largest |r|, lowest index on ties.
fn argmax_abs(r: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in r.iter().enumerate() {
        if best.is_none_or(|b| v.abs() > r[b].abs()) {
            best = Some(i);
        }
    }
    best
}

/// Iteratively remove the sample with the largest normalized residual while
/// it exceeds `params.t`. Hyperparameters stay fixed within a pass and the
/// prior mean is re-centred on the remaining samples. Given hyperparameters
/// are used as is; otherwise they are fitted on all samples, and refitted
/// on the retained ones for up to `params.refit_passes` further passes while
/// the outlier set keeps changing.
pub fn lnr_detect(x: &[(f64, f64)], y: &[f64], params: &GpParams, hyper: Option<GpHyper>) -> Result<ResidualReport> {
    let n = x.len();
    if n < params.min_samples.max(1) {
        return Err(Error::TooFewSamples {
            needed: params.min_samples,
            got: n,
        });
    }
    if x.len() != y.len() {
        return Err(Error::InvalidParameter("x and y lengths differ".into()));
    }
    if let Some(h) = hyper {
        return lnr_pass(x, y, params, h);
    }
    let mut report = lnr_pass(x, y, params, fit_hyperparameters(x, y, params))?;
    for _ in 0..params.refit_passes {
        if report.outliers.is_empty() {
            break;
        }
        let keep: Vec<usize> = (0..n).filter(|&i| report.residuals[i].is_some()).collect();
        let kx: Vec<(f64, f64)> = keep.iter().map(|&i| x[i]).collect();
        let ky: Vec<f64> = keep.iter().map(|&i| y[i]).collect();
        let h = fit_hyperparameters(&kx, &ky, params);
        if h == report.hyper {
            break;
        }
        let mut next = lnr_pass(x, y, params, h)?;
        next.iterations += report.iterations;
        let same = outlier_set(&next) == outlier_set(&report);
        report = next;
        if same {
            break;
        }
    }
    Ok(report)
}

fn outlier_set(r: &ResidualReport) -> Vec<usize> {
    let mut v: Vec<usize> = r.outliers.iter().map(|o| o.index).collect();
    v.sort_unstable();
    v
}

fn lnr_pass(x: &[(f64, f64)], y: &[f64], params: &GpParams, hyper: GpHyper) -> Result<ResidualReport> {
    let n = x.len();
    let max_iter = (params.max_removed_fraction * n as f64).floor() as usize;
    let mut active: Vec<usize> = (0..n).collect();
    let mut outliers = Vec::new();
    let mut iterations = 0;
    loop {
        let ax: Vec<(f64, f64)> = active.iter().map(|&i| x[i]).collect();
        let ay: Vec<f64> = active.iter().map(|&i| y[i]).collect();
        let model = GpModel::fit_centered(&ax, &ay, hyper)?;
        let r = normalized_residuals(&model);
        iterations += 1;
        let k = argmax_abs(&r).expect("non-empty active set");
        let status = if r[k].abs() <= params.t {
            Some(LnrStatus::Converged)
        } else if outliers.len() >= max_iter {
            Some(LnrStatus::NonConverged)
        } else if active.len() - 1 < params.min_samples {
            Some(LnrStatus::TooFewRemaining)
        } else {
            None
        };
        if let Some(status) = status {
            let mut residuals = vec![None; n];
            for (&i, &v) in active.iter().zip(&r) {
                residuals[i] = Some(v);
            }
            return Ok(ResidualReport {
                residuals,
                outliers,
                iterations,
                status,
                hyper,
            });
        }
        outliers.push(Outlier {
            index: active[k],
            r_n: r[k],
        });
        active.remove(k);
    }
}

/// One LNR job: the samples of an (AP, band, region) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectReport {
    pub ap: u32,
    pub band: Band,
    pub region: usize,
    /// Database row of each job input.
    pub rows: Vec<usize>,
    pub report: Option<ResidualReport>,
}

impl DetectReport {
    /// Database rows flagged as outliers.
    pub fn outlier_rows(&self) -> Vec<usize> {
        self.report
            .as_ref()
            .map(|r| r.outliers.iter().map(|o| self.rows[o.index]).collect())
            .unwrap_or_default()
    }

    pub fn hyper(&self) -> Option<GpHyper> {
        self.report.as_ref().map(|r| r.hyper)
    }

    pub fn summary(&self, db: &FingerprintDatabase) -> DetectSummary {
        let outliers = self
            .report
            .as_ref()
            .map(|r| {
                r.outliers
                    .iter()
                    .map(|o| {
                        let row = self.rows[o.index];
                        let s = &db.samples[row];
                        FlaggedSample {
                            row,
                            x: s.x,
                            y: s.y,
                            rssi: s.rssi,
                            r_n: o.r_n,
                        }
                    })
                    .collect()
            })
            .unwrap_or_default();
        DetectSummary {
            ap: self.ap,
            band: self.band,
            region: self.region,
            samples: self.rows.len(),
            outliers,
            iterations: self.report.as_ref().map_or(0, |r| r.iterations),
            status: self.report.as_ref().map(|r| r.status),
            hyper: self.hyper(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedSample {
    /// Database row.
    pub row: usize,
    pub x: f64,
    pub y: f64,
    pub rssi: f64,
    pub r_n: f64,
}

/// Serializable per-job detection result; `status` and `hyper` are absent
/// for jobs too small to test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectSummary {
    pub ap: u32,
    pub band: Band,
    pub region: usize,
    pub samples: usize,
    pub outliers: Vec<FlaggedSample>,
    pub iterations: usize,
    pub status: Option<LnrStatus>,
    pub hyper: Option<GpHyper>,
}

/// Rows that enter detection and map building: everything except samples
/// already known to be bad.
pub fn usable(flag: Flag) -> bool {
    flag != Flag::Abnormal
}

/// Group usable rows by (AP, band, region), ordered by key.
pub fn jobs(db: &FingerprintDatabase) -> Vec<((u32, Band, usize), Vec<usize>)> {
    let mut map: std::collections::BTreeMap<(u32, Band, usize), Vec<usize>> = Default::default();
    for (i, s) in db.samples.iter().enumerate() {
        if usable(s.flag) {
            map.entry((s.ap_id, s.band, s.region_id)).or_default().push(i);
        }
    }
    map.into_iter().collect()
}

/// Run LNR on every (AP, band, region) job with enough samples.
pub fn detect_all(db: &FingerprintDatabase, params: &GpParams) -> Result<Vec<DetectReport>> {
    jobs(db)
        .into_iter()
        .map(|((ap, band, region), rows)| {
            let x: Vec<(f64, f64)> = rows.iter().map(|&i| db.samples[i].pos()).collect();
            let y: Vec<f64> = rows.iter().map(|&i| db.samples[i].rssi).collect();
            let report = if rows.len() >= params.min_samples {
                Some(lnr_detect(&x, &y, params, None)?)
            } else {
                None
            };
            Ok(DetectReport {
                ap,
                band,
                region,
                rows,
                report,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftParams {
    pub min_pairs: usize,
    /// Samples of the two epochs closer than this count as co-located, m.
    pub pair_radius_m: f64,
    /// Estimate one shift per region instead of one per (AP, band) over
    /// the whole floor.
    pub per_region: bool,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self {
            min_pairs: 5,
            pair_radius_m: 0.4,
            per_region: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftEstimate {
    pub ap_id: u32,
    pub band: Band,
    /// `None` for a floor-wide estimate.
    pub region_id: Option<usize>,
    pub shift_db: f64,
    pub pairs: usize,
}

fn clean_for_shift(flag: Flag) -> bool {
    matches!(flag, Flag::Measured | Flag::Resurveyed)
}

/// Nearest previous-epoch row of the same (AP, band, region) within the
/// pairing radius.
fn nearest_previous(
    previous: &FingerprintDatabase,
    ap: u32,
    band: Band,
    region: Option<usize>,
    pos: (f64, f64),
    radius: f64,
    accept: impl Fn(Flag) -> bool,
) -> Option<usize> {
    let mut best = None;
    let mut best_d = radius * radius;
    for (i, s) in previous.samples.iter().enumerate() {
        if s.ap_id != ap || s.band != band || region.is_some_and(|r| r != s.region_id) || !accept(s.flag) {
            continue;
        }
        let d = (s.x - pos.0).powi(2) + (s.y - pos.1).powi(2);
        if d <= best_d && best.is_none_or(|_| d < best_d) {
            best_d = d;
            best = Some(i);
        }
    }
    best
}

/// Median of (current − previous) over co-located clean pairs of one
/// region, or of the whole floor when `region` is `None`. Rows listed in
/// `exclude` (e.g. the outliers being repaired) are left out.
pub fn estimate_shift(
    current: &FingerprintDatabase,
    previous: &FingerprintDatabase,
    ap: u32,
    band: Band,
    region: Option<usize>,
    exclude: &[usize],
    params: &ShiftParams,
) -> Result<ShiftEstimate> {
    let mut excluded = exclude.to_vec();
    excluded.sort_unstable();
    let mut diffs: Vec<f64> = current
        .samples
        .iter()
        .enumerate()
        .filter(|(i, s)| {
            s.ap_id == ap
                && s.band == band
                && region.is_none_or(|r| r == s.region_id)
                && clean_for_shift(s.flag)
                && excluded.binary_search(i).is_err()
        })
        .filter_map(|(_, s)| {
            nearest_previous(previous, ap, band, region, s.pos(), params.pair_radius_m, clean_for_shift)
                .map(|j| s.rssi - previous.samples[j].rssi)
        })
        .collect();
    if diffs.len() < params.min_pairs.max(1) {
        return Err(Error::NoShiftAvailable {
            pairs: diffs.len(),
            needed: params.min_pairs,
        });
    }
    diffs.sort_by(f64::total_cmp);
    let m = diffs.len();
    let shift_db = if m % 2 == 1 { diffs[m / 2] } else { 0.5 * (diffs[m / 2 - 1] + diffs[m / 2]) };
    Ok(ShiftEstimate {
        ap_id: ap,
        band,
        region_id: region,
        shift_db,
        pairs: m,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RepairOutcome {
    pub db: FingerprintDatabase,
    /// Distinct (region, position) pairs to re-measure, in row order.
    pub resurvey: Vec<(usize, (f64, f64))>,
    /// Rows waiting for the resurvey (flagged Abnormal).
    pub pending_rows: Vec<usize>,
    pub shifted_rows: Vec<usize>,
    pub shifts: Vec<ShiftEstimate>,
}

/// Repair every outlier row: from the previous epoch plus the estimated
/// shift when possible, otherwise flag it Abnormal and list its location
/// for resurvey. Rows outside the outlier set are never touched.
pub fn repair_abnormal(
    db: &FingerprintDatabase,
    jobs: &[DetectSummary],
    previous: Option<&FingerprintDatabase>,
    params: &ShiftParams,
) -> RepairOutcome {
    let mut out = RepairOutcome {
        db: db.clone(),
        ..Default::default()
    };
    let mut all_rows: Vec<usize> = jobs.iter().flat_map(|j| j.outliers.iter().map(|o| o.row)).collect();
    all_rows.sort_unstable();
    let mut cache: std::collections::BTreeMap<(u32, Band, Option<usize>), Option<ShiftEstimate>> = Default::default();
    for rep in jobs {
        if rep.outliers.is_empty() {
            continue;
        }
        let shift = previous.and_then(|prev| {
            let region = params.per_region.then_some(rep.region);
            let est = *cache.entry((rep.ap, rep.band, region)).or_insert_with(|| {
                let e = estimate_shift(db, prev, rep.ap, rep.band, region, &all_rows, params).ok();
                if let Some(e) = e {
                    out.shifts.push(e);
                }
                e
            });
            est.map(|e| (prev, e))
        });
        for row in rep.outliers.iter().map(|o| o.row) {
            let s = db.samples[row];
            let repaired = shift.as_ref().and_then(|(prev, est)| {
                nearest_previous(prev, s.ap_id, s.band, Some(s.region_id), s.pos(), params.pair_radius_m, |f| f.is_valid())
                    .map(|j| crate::rfsim::clamp_rssi(prev.samples[j].rssi + est.shift_db))
            });
            let target = &mut out.db.samples[row];
            match repaired {
                Some(v) => {
                    target.rssi = v;
                    target.flag = Flag::RecoveredShift;
                    out.shifted_rows.push(row);
                }
                None => {
                    target.flag = Flag::Abnormal;
                    out.pending_rows.push(row);
                    let key = (s.region_id, s.pos());
                    if !out.resurvey.contains(&key) {
                        out.resurvey.push(key);
                    }
                }
            }
        }
    }
    out.pending_rows.sort_unstable();
    out
}
