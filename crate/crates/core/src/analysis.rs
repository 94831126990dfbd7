//! Exponent fits and consistency checks on estimate series.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};
use crate::estimators::EstimateRecord;
use crate::rng::{stream_id, RngStream, StreamRng};
use crate::stats::{mean, percentile_interval, resample_indices, stderr_of_mean, variance, weighted_linear_fit};

const TAG_ANALYSIS: u64 = 0x616e_6c79;
const R_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitWindow {
    pub r_min: f64,
    pub r_max: f64,
    /// Direct-estimator radii from the first one with fewer avoiding
    /// replicas than this are dropped.
    pub min_avoiding: u64,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for FitWindow {
    fn default() -> Self {
        Self {
            r_min: 1.0,
            r_max: f64::INFINITY,
            min_avoiding: 20,
            bootstrap: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    WlsLogLinear,
    RatioOfRatios,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excluded {
    pub r: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub xi_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub r_window: (f64, f64),
    pub method: FitMethod,
    pub intercept: f64,
    pub radii: Vec<f64>,
    pub residual_rms: f64,
    pub max_abs_residual: f64,
    pub r_squared: f64,
    /// Bootstrap standard deviation of `xi_hat`.
    pub xi_stderr: f64,
    pub excluded: Vec<Excluded>,
}

/// Radii used by a fit, with the reasons others were dropped.
fn window<'a>(series: &[&'a EstimateRecord], w: &FitWindow) -> (Vec<&'a EstimateRecord>, Vec<Excluded>) {
    let mut sorted: Vec<&EstimateRecord> = series.to_vec();
    sorted.sort_by(|a, b| a.r.total_cmp(&b.r));
    let mut used = Vec::new();
    let mut excluded = Vec::new();
    let mut thin = false;
    for rec in sorted {
        let reason = if rec.r < w.r_min - R_EPS || rec.r > w.r_max + R_EPS {
            Some("outside window".to_string())
        } else if thin || (rec.estimator == "direct" && rec.avoiding_replicas < w.min_avoiding) {
            thin = true;
            Some(format!("fewer than {} avoiding replicas", w.min_avoiding))
        } else if !(rec.p_hat > 0.0) {
            Some("nonpositive estimate".to_string())
        } else {
            None
        };
        match reason {
            Some(reason) => excluded.push(Excluded { r: rec.r, reason }),
            None => used.push(rec),
        }
    }
    (used, excluded)
}

/// Weighted fit of `log p` on `r`; weights `(p / se)^2` when every standard
/// error is positive, equal otherwise.
fn wls(rs: &[f64], ps: &[f64], ses: &[f64]) -> Option<crate::stats::LinearFit> {
    if ps.iter().any(|&p| !(p > 0.0)) {
        return None;
    }
    let y: Vec<f64> = ps.iter().map(|p| p.ln()).collect();
    let w: Vec<f64> = if ses.iter().all(|&s| s > 0.0) {
        ps.iter().zip(ses).map(|(p, s)| (p / s).powi(2)).collect()
    } else {
        vec![1.0; ps.len()]
    };
    weighted_linear_fit(rs, &y, &w)
}

fn resampled(samples: &[f64], idx: &[usize]) -> (f64, f64) {
    let v: Vec<f64> = idx.iter().map(|&i| samples[i]).collect();
    (mean(&v).clamp(0.0, 1.0), stderr_of_mean(&v))
}

/// Bootstrap replicates of `(p, se)` per record. Records with per-replica
/// samples of a common length are resampled jointly; records without
/// samples get a normal perturbation of their estimate.
struct Resampler<'a> {
    recs: Vec<&'a EstimateRecord>,
    joint: bool,
}

impl<'a> Resampler<'a> {
    fn new(recs: Vec<&'a EstimateRecord>) -> Self {
        let n = recs.first().map_or(0, |r| r.samples.len());
        let joint = n > 1 && recs.iter().all(|r| r.samples.len() == n && r.estimator == "direct");
        Self { recs, joint }
    }

    fn draw_with(&self, idx: Option<&[usize]>, rng: &mut StreamRng) -> (Vec<f64>, Vec<f64>) {
        let mut ps = Vec::with_capacity(self.recs.len());
        let mut ses = Vec::with_capacity(self.recs.len());
        for rec in &self.recs {
            let (p, se) = match idx {
                Some(idx) if self.joint => resampled(&rec.samples, idx),
                _ if rec.samples.len() > 1 => resampled(&rec.samples, &resample_indices(rec.samples.len(), rng)),
                _ => ((rec.p_hat + rec.stderr * rng.normal()).clamp(0.0, 1.0), rec.stderr),
            };
            ps.push(p);
            ses.push(se);
        }
        (ps, ses)
    }
}

/// Slope fit of `log p_hat` against `r` over the window; `xi_hat = -slope`,
/// with a percentile bootstrap interval over replicas.
pub fn fit_exponent(series: &[&EstimateRecord], w: &FitWindow) -> Result<ExponentFit> {
    let (used, excluded) = window(series, w);
    if used.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "{} radii with positive estimates in the window, need 3",
            used.len()
        )));
    }
    let rs: Vec<f64> = used.iter().map(|r| r.r).collect();
    let ps: Vec<f64> = used.iter().map(|r| r.p_hat).collect();
    let ses: Vec<f64> = used.iter().map(|r| r.stderr).collect();
    let fit = wls(&rs, &ps, &ses).ok_or_else(|| Error::InsufficientData("degenerate fit".into()))?;
    let xi_hat = -fit.slope;
    let sampler = Resampler::new(used.clone());
    let mut rng = RngStream::new(w.seed, stream_id(&[TAG_ANALYSIS, 0])).rng();
    let n = used[0].samples.len();
    let mut xis = Vec::with_capacity(w.bootstrap);
    for _ in 0..w.bootstrap {
        let idx = sampler.joint.then(|| resample_indices(n, &mut rng));
        let (bp, bs) = sampler.draw_with(idx.as_deref(), &mut rng);
        if let Some(f) = wls(&rs, &bp, &bs) {
            xis.push(-f.slope);
        }
    }
    let xi_stderr = variance(&xis).sqrt();
    let (lo, hi) = if xis.is_empty() {
        (xi_hat, xi_hat)
    } else {
        percentile_interval(&mut xis, 0.05)
    };
    let max_abs_residual = rs
        .iter()
        .zip(&ps)
        .map(|(r, p)| (p.ln() - fit.intercept - fit.slope * r).abs())
        .fold(0.0, f64::max);
    Ok(ExponentFit {
        xi_hat,
        ci_low: lo.min(xi_hat),
        ci_high: hi.max(xi_hat),
        r_window: (rs[0], *rs.last().unwrap()),
        method: FitMethod::WlsLogLinear,
        intercept: fit.intercept,
        radii: rs,
        residual_rms: fit.residual_rms,
        max_abs_residual,
        r_squared: fit.r_squared,
        xi_stderr,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmultTriple {
    pub r: f64,
    pub s: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub sigma: f64,
    /// `rhs + 2 sigma - lhs`; negative means a violation.
    pub margin: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmultReport {
    pub triples: Vec<SubmultTriple>,
    pub all_hold: bool,
}

/// Checks `p(r + s + 1) <= p(r) p(s) + 2 sigma` for every available triple
/// with `r <= s`.
pub fn check_submultiplicativity(series: &[&EstimateRecord]) -> SubmultReport {
    let find = |r: f64| series.iter().find(|x| (x.r - r).abs() < R_EPS);
    let mut triples = Vec::new();
    for a in series {
        for b in series {
            if b.r < a.r - R_EPS {
                continue;
            }
            let Some(c) = find(a.r + b.r + 1.0) else { continue };
            let rhs = a.p_hat * b.p_hat;
            let sigma = (c.stderr.powi(2) + (b.p_hat * a.stderr).powi(2) + (a.p_hat * b.stderr).powi(2)).sqrt();
            let margin = rhs + 2.0 * sigma - c.p_hat;
            triples.push(SubmultTriple {
                r: a.r,
                s: b.r,
                lhs: c.p_hat,
                rhs,
                sigma,
                margin,
                holds: margin >= 0.0,
            });
        }
    }
    SubmultReport {
        all_hold: triples.iter().all(|t| t.holds),
        triples,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub radii: Vec<f64>,
    /// `p_hat(r) e^{r xi_hat}`.
    pub normalized: Vec<f64>,
    pub c1: f64,
    pub c2: f64,
    pub ratio: f64,
    pub band_tol: f64,
    pub holds: bool,
}

/// Spread of `p_hat(r) e^{r xi_hat}` over the fit's radii.
pub fn check_band(series: &[&EstimateRecord], fit: &ExponentFit, band_tol: f64) -> BandReport {
    let mut radii = Vec::new();
    let mut normalized = Vec::new();
    for &r in &fit.radii {
        if let Some(rec) = series.iter().find(|x| (x.r - r).abs() < R_EPS) {
            radii.push(r);
            normalized.push(rec.p_hat * (r * fit.xi_hat).exp());
        }
    }
    let c1 = normalized.iter().copied().fold(f64::INFINITY, f64::min);
    let c2 = normalized.iter().copied().fold(0.0, f64::max);
    let ratio = if c1 > 0.0 { c2 / c1 } else { f64::INFINITY };
    BandReport {
        radii,
        normalized,
        c1,
        c2,
        ratio,
        band_tol,
        holds: ratio <= band_tol,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    /// Ascending, starting at 0.
    pub alphas: Vec<f64>,
    pub xi_hat: Vec<f64>,
    pub xi_stderr: Vec<f64>,
    /// `xi_hat(alpha) - xi_hat(0)`.
    pub gaps: Vec<f64>,
    /// Bootstrap stderr of each gap on coupled replicas.
    pub gap_stderr: Vec<f64>,
    /// `xi_hat` nondecreasing between consecutive alphas within 2 sigma.
    pub monotone: Vec<bool>,
    /// Gap nonnegative within 2 sigma.
    pub nonnegative: Vec<bool>,
    pub all_monotone: bool,
    pub all_nonnegative: bool,
}

/// Fits one exponent per alpha; gaps and their spreads come from a joint
/// replica bootstrap when the series are coupled.
pub fn continuity_sweep(series_by_alpha: &[(f64, Vec<&EstimateRecord>)], w: &FitWindow) -> Result<ContinuityReport> {
    let mut entries: Vec<&(f64, Vec<&EstimateRecord>)> = series_by_alpha.iter().collect();
    entries.sort_by(|a, b| a.0.total_cmp(&b.0));
    if entries.first().map(|e| e.0) != Some(0.0) {
        return Err(crate::error::invalid("alphas", "the sweep needs alpha = 0"));
    }
    let fits: Vec<ExponentFit> = entries
        .iter()
        .map(|(_, s)| fit_exponent(s, w))
        .collect::<Result<_>>()?;
    // Common radii keep the bootstrap fits comparable across alphas.
    let mut common: Vec<f64> = fits[0].radii.clone();
    common.retain(|r| fits.iter().all(|f| f.radii.iter().any(|x| (x - r).abs() < R_EPS)));
    let used: Vec<Vec<&EstimateRecord>> = entries
        .iter()
        .map(|(_, s)| {
            common
                .iter()
                .filter_map(|&r| s.iter().copied().find(|x| (x.r - r).abs() < R_EPS))
                .collect()
        })
        .collect();
    let samplers: Vec<Resampler> = used.iter().map(|u| Resampler::new(u.clone())).collect();
    let n = used[0].first().map_or(0, |r| r.samples.len());
    let joint = common.len() >= 3 && samplers.iter().all(|s| s.joint) && used.iter().all(|u| u[0].samples.len() == n);
    let k = entries.len();
    let mut draws: Vec<Vec<f64>> = vec![Vec::new(); k];
    let mut rng = RngStream::new(w.seed, stream_id(&[TAG_ANALYSIS, 1])).rng();
    if common.len() >= 3 {
        for _ in 0..w.bootstrap {
            let idx = joint.then(|| resample_indices(n, &mut rng));
            let xs: Option<Vec<f64>> = samplers
                .iter()
                .map(|s| {
                    let (p, se) = s.draw_with(idx.as_deref(), &mut rng);
                    wls(&common, &p, &se).map(|f| -f.slope)
                })
                .collect();
            if let Some(xs) = xs {
                for (d, x) in draws.iter_mut().zip(xs) {
                    d.push(x);
                }
            }
        }
    }
    let diff_sd = |a: usize, b: usize| -> f64 {
        if draws[a].len() > 1 {
            let d: Vec<f64> = draws[a].iter().zip(&draws[b]).map(|(x, y)| x - y).collect();
            variance(&d).sqrt()
        } else {
            (fits[a].xi_stderr.powi(2) + fits[b].xi_stderr.powi(2)).sqrt()
        }
    };
    let xi_hat: Vec<f64> = fits.iter().map(|f| f.xi_hat).collect();
    let gaps: Vec<f64> = xi_hat.iter().map(|x| x - xi_hat[0]).collect();
    let gap_stderr: Vec<f64> = (0..k).map(|i| if i == 0 { 0.0 } else { diff_sd(i, 0) }).collect();
    let monotone: Vec<bool> = (0..k)
        .map(|i| i == 0 || xi_hat[i] - xi_hat[i - 1] >= -2.0 * diff_sd(i, i - 1))
        .collect();
    let nonnegative: Vec<bool> = (0..k).map(|i| gaps[i] >= -2.0 * gap_stderr[i]).collect();
    Ok(ContinuityReport {
        alphas: entries.iter().map(|e| e.0).collect(),
        xi_stderr: fits.iter().map(|f| f.xi_stderr).collect(),
        xi_hat,
        gaps,
        gap_stderr,
        all_monotone: monotone.iter().all(|&b| b),
        all_nonnegative: nonnegative.iter().all(|&b| b),
        monotone,
        nonnegative,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionReport {
    pub dimension: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// The whole interval lies above 1.
    pub above_one: bool,
}

/// `max(2 - xi, 0)` with the interval mapped through the same function.
pub fn dimension_report(fit: &ExponentFit) -> DimensionReport {
    let d = |x: f64| (2.0 - x).max(0.0);
    let lo = d(fit.ci_high);
    DimensionReport {
        dimension: d(fit.xi_hat),
        ci_low: lo,
        ci_high: d(fit.ci_low),
        above_one: lo > 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub estimator: String,
    pub alpha: f64,
    pub k: usize,
    pub lambda: f64,
    pub r: f64,
    pub p_hat: f64,
    pub stderr: f64,
    pub log_p: f64,
    /// Delta-method standard error of `log p_hat`.
    pub log_stderr: f64,
}

pub fn plot_rows(records: &[EstimateRecord]) -> Vec<PlotRow> {
    records
        .iter()
        .map(|r| PlotRow {
            estimator: r.estimator.clone(),
            alpha: r.alpha,
            k: r.k,
            lambda: r.lambda,
            r: r.r,
            p_hat: r.p_hat,
            stderr: r.stderr,
            log_p: r.p_hat.ln(),
            log_stderr: if r.p_hat > 0.0 { r.stderr / r.p_hat } else { f64::INFINITY },
        })
        .collect()
}

pub fn write_plot_csv(records: &[EstimateRecord], w: impl Write) -> Result<()> {
    crate::io::write_csv(&plot_rows(records), w)
}
