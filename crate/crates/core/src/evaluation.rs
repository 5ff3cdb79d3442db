//! NMSE scoring, the two-stage filtering report (raw / fitted / decoded),
//! forecast-horizon measurement, and the transfer protocol that applies a
//! trained model to a trajectory it never saw.

use crate::data::{integrate_lorenz, measure_x, LorenzParams, Provenance, ScalingRecord, Segment, SegmentedSeries};
use crate::dynamics::{forecast, measure};
use crate::embedding::{encode, DelayConfig};
use crate::error::{Error, Result};
use crate::nn::{bind, Mode};
use crate::autodiff::{Dual, Tape};
use crate::training::{infer_initial_state, measure_mode, Phase, TrainBundle, TrainOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Σ(truth−pred)² / Σ(truth−mean(truth))².
pub fn nmse(truth: &[f64], pred: &[f64]) -> Result<f64> {
    if truth.len() != pred.len() || truth.len() < 2 {
        return Err(Error::Usage(format!(
            "nmse needs two equal-length series of at least 2 points, got {} and {}",
            truth.len(),
            pred.len()
        )));
    }
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let denom = truth.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>();
    if denom == 0.0 {
        return Err(Error::Numeric("nmse is undefined against a constant series".into()));
    }
    let num = truth.iter().zip(pred).map(|(&t, &p)| (t - p) * (t - p)).sum::<f64>();
    Ok(num / denom)
}

/// One filtering row: the raw noisy signal, the smooth fit, and (when the
/// autoencoder is in play) the decoded signal, each scored against clean.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRow {
    pub nmse_raw: f64,
    pub nmse_fit: f64,
    pub nmse_decoded: Option<f64>,
}

pub fn filtering_report(
    clean: &[f64],
    noisy: &[f64],
    fit: &[f64],
    decoded: Option<&[f64]>,
) -> Result<FilterRow> {
    Ok(FilterRow {
        nmse_raw: nmse(clean, noisy)?,
        nmse_fit: nmse(clean, fit)?,
        nmse_decoded: decoded.map(|d| nmse(clean, d)).transpose()?,
    })
}

/// The fitted signal over the training split: each segment's fit network
/// evaluated at its own sample times (eval mode), overlaps dropped on
/// reassembly. Returns (times, values), still in scaled units.
pub fn fit_series(
    bundle: &TrainBundle,
    data: &SegmentedSeries,
    delay: &DelayConfig,
    dt: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    per_segment_series(bundle, data, delay, dt, |u_row, _| u_row[0])
}

/// The decoded signal N_d(N_e(ũ(t)))[0] over the training split; the fit
/// network extrapolates ξ slightly below −1 for the oldest delays near each
/// segment's start.
pub fn decoded_series(
    bundle: &TrainBundle,
    data: &SegmentedSeries,
    delay: &DelayConfig,
    dt: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = delay.m;
    let mut out_times = Vec::new();
    let mut out_vals = Vec::new();
    let ov = (data.overlap / dt).round() as usize;
    for (i, seg) in data.segments.iter().enumerate() {
        let skip = if i == 0 { 0 } else { ov + 1 };
        let times = &seg.times[skip..];
        let u_rows = delay_eval(bundle, i, seg, times, delay)?;
        let rows = times.len();
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut obs = Vec::new();
        let bound_e = bind(&tape, &bundle.theta_e);
        let bound_d = bind(&tape, &bundle.theta_d);
        let x = Dual::constant(tape.leaf(&u_rows, rows, m));
        let u = encode(&bound_e, x, &bundle.mask.w, Mode::Eval, &mut rng, None, &mut obs)?;
        let y = bound_d.forward(u, Mode::Eval, &mut rng, None, &mut obs)?;
        let yv = y.primal.value();
        out_times.extend_from_slice(times);
        out_vals.extend((0..rows).map(|r| yv[r * m]));
    }
    Ok((out_times, out_vals))
}

/// ũ(t) rows for arbitrary times within one segment, eval mode, without the
/// sampling-domain restriction (the network is defined everywhere).
fn delay_eval(
    bundle: &TrainBundle,
    seg_idx: usize,
    seg: &Segment,
    times: &[f64],
    delay: &DelayConfig,
) -> Result<Vec<f64>> {
    let (t0, t1) = (seg.times[0], *seg.times.last().unwrap());
    let (mid, half) = (0.5 * (t0 + t1), 0.5 * (t1 - t0));
    let tape = Tape::new();
    let bound_u = bind(&tape, &bundle.theta_u[seg_idx]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut obs = Vec::new();
    let rows = times.len();
    let mut cols = Vec::with_capacity(delay.m);
    for j in 0..delay.m {
        let xi: Vec<f64> =
            times.iter().map(|&t| (t - j as f64 * delay.tau - mid) / half).collect();
        let x = Dual::constant(tape.leaf(&xi, rows, 1));
        cols.push(bound_u.forward(x, Mode::Eval, &mut rng, None, &mut obs)?.primal.value());
    }
    let mut out = Vec::with_capacity(rows * delay.m);
    for r in 0..rows {
        for col in cols.iter() {
            out.push(col[r]);
        }
    }
    Ok(out)
}

fn per_segment_series(
    bundle: &TrainBundle,
    data: &SegmentedSeries,
    delay: &DelayConfig,
    dt: f64,
    pick: impl Fn(&[f64], usize) -> f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = delay.m;
    let mut out_times = Vec::new();
    let mut out_vals = Vec::new();
    let ov = (data.overlap / dt).round() as usize;
    for (i, seg) in data.segments.iter().enumerate() {
        let skip = if i == 0 { 0 } else { ov + 1 };
        let times = &seg.times[skip..];
        let u_rows = delay_eval(bundle, i, seg, times, delay)?;
        for (r, &t) in times.iter().enumerate() {
            out_times.push(t);
            out_vals.push(pick(&u_rows[r * m..(r + 1) * m], r));
        }
    }
    Ok((out_times, out_vals))
}

/// Largest T (in the series' time units) such that |pred − truth| stays
/// within tol·(max−min of truth) for every sample at or before T. Samples
/// are taken to sit at dt, 2dt, ... after the forecast origin.
pub fn forecast_horizon(truth: &[f64], pred: &[f64], dt: f64, tol: f64) -> f64 {
    let range = match (
        truth.iter().cloned().reduce(f64::min),
        truth.iter().cloned().reduce(f64::max),
    ) {
        (Some(lo), Some(hi)) => hi - lo,
        _ => return 0.0,
    };
    let band = tol * range;
    let mut ok = 0usize;
    for (t, p) in truth.iter().zip(pred) {
        if (t - p).abs() <= band {
            ok += 1;
        } else {
            break;
        }
    }
    ok as f64 * dt
}

/// Whether every forecast value stays inside the truth bounding box scaled
/// by `factor` about its center.
pub fn bounded_within(truth: &[f64], pred: &[f64], factor: f64) -> bool {
    let (Some(lo), Some(hi)) = (
        truth.iter().cloned().reduce(f64::min),
        truth.iter().cloned().reduce(f64::max),
    ) else {
        return false;
    };
    let center = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo) * factor;
    pred.iter().all(|&p| p.is_finite() && (p - center).abs() <= half)
}

/// Initial conditions exercised by the transfer protocol.
#[allow(clippy::approx_constant)] // 3.14 is a literal coordinate, not π
pub const TRANSFER_ICS: [[f64; 3]; 3] =
    [[1.02, 0.05, -1.67], [3.14, -1.59, 2.65], [2.00, 3.00, 4.25]];

#[derive(Debug, Clone)]
pub struct TransferResult {
    /// Forecast sample times (absolute, starting one step after t0).
    pub times: Vec<f64>,
    pub pred: Vec<f64>,
    pub truth: Vec<f64>,
    pub horizon: f64,
}

/// Apply a trained model to a fresh trajectory: integrate the true system
/// from `ic`, fit a window around `t0` with the embedding and dynamics
/// frozen, forecast `steps` onward, and score against the continuation.
/// Measurement-unit outputs (the scaling is inverted).
#[allow(clippy::too_many_arguments)]
pub fn transfer_experiment(
    ic: [f64; 3],
    bundle: &TrainBundle,
    phase: Phase,
    scaling: &ScalingRecord,
    opt: &TrainOptions,
    dt: f64,
    t0: f64,
    window_half: f64,
    steps: usize,
    infer_iters: usize,
    seed: u64,
    tol: f64,
) -> Result<TransferResult> {
    if window_half * 2.0 < opt.delay.horizon() {
        return Err(Error::Config(format!(
            "transfer window of length {} is shorter than the delay horizon {}",
            window_half * 2.0,
            opt.delay.horizon()
        )));
    }
    let total_steps = ((t0 + window_half) / dt).round() as usize + steps;
    let traj = integrate_lorenz(ic, dt, total_steps, &LorenzParams::default())?;
    let series = measure_x(&traj, dt, Provenance::default());

    let lo = t0 - window_half - 1e-9;
    let hi = t0 + window_half + 1e-9;
    let mut w_times = Vec::new();
    let mut w_vals = Vec::new();
    for (&t, &v) in series.times.iter().zip(&series.values) {
        if t >= lo && t <= hi {
            w_times.push(t);
            w_vals.push(scaling.apply(v));
        }
    }
    let window = Segment { times: w_times, values: w_vals };
    let (u0, _) = infer_initial_state(&window, t0, bundle, phase, opt, infer_iters, seed)?;

    let states = forecast(&bundle.theta_f, &bundle.mask.w, &u0, dt, steps)?;
    let scaled = measure(&states[1..], measure_mode(phase), Some(&bundle.theta_d))?;
    let pred: Vec<f64> = scaled.iter().map(|&v| scaling.invert(v)).collect();

    let i0 = (t0 / dt).round() as usize;
    let truth: Vec<f64> = (1..=steps).map(|k| series.values[i0 + k]).collect();
    let times: Vec<f64> = (1..=steps).map(|k| series.times[i0 + k]).collect();
    let horizon = forecast_horizon(&truth, &pred, dt, tol);
    Ok(TransferResult { times, pred, truth, horizon })
}

/// CSV lines for filtering rows: `label,nmse_raw,nmse_fit,nmse_decoded`.
pub fn filter_csv(rows: &[(String, FilterRow)]) -> String {
    use crate::data::format_f64;
    let mut out = String::from("label,nmse_raw,nmse_fit,nmse_decoded\n");
    for (label, r) in rows {
        out.push_str(&format!(
            "{label},{},{},{}\n",
            format_f64(r.nmse_raw),
            format_f64(r.nmse_fit),
            r.nmse_decoded.map(format_f64).unwrap_or_default()
        ));
    }
    out
}

/// Human-readable table of the same rows.
pub fn filter_table(rows: &[(String, FilterRow)]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<12} {:>12} {:>12} {:>12}\n", "case", "raw", "fit", "decoded"));
    for (label, r) in rows {
        out.push_str(&format!(
            "{:<12} {:>12.3e} {:>12.3e} {:>12}\n",
            label,
            r.nmse_raw,
            r.nmse_fit,
            r.nmse_decoded.map(|d| format!("{d:.3e}")).unwrap_or_else(|| "-".into())
        ));
    }
    out
}
