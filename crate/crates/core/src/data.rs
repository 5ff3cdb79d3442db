//! Synthetic data generation (Lorenz-63), noise masking, rescaling, and
//! segmentation into overlapping training batches.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LorenzParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        LorenzParams { sigma: 10.0, rho: 28.0, beta: 8.0 / 3.0 }
    }
}

/// Lorenz-63 right-hand side, generic so dual numbers can ride through.
pub fn lorenz_rhs<T: Real>(s: &[T; 3], p: &LorenzParams) -> [T; 3] {
    let (x, y, z) = (s[0], s[1], s[2]);
    let sigma = T::from_f64(p.sigma);
    let rho = T::from_f64(p.rho);
    let beta = T::from_f64(p.beta);
    [sigma * (y - x), x * (rho - z) - y, x * y - beta * z]
}

/// One fixed RK4 step. Data generation and forecasting share this exact
/// code path, so identical fields produce bitwise-identical trajectories.
pub fn rk4_step(f: &impl Fn(&[f64]) -> Vec<f64>, y: &[f64], dt: f64) -> Vec<f64> {
    let k1 = f(y);
    let y2: Vec<f64> = y.iter().zip(&k1).map(|(&a, &k)| a + 0.5 * dt * k).collect();
    let k2 = f(&y2);
    let y3: Vec<f64> = y.iter().zip(&k2).map(|(&a, &k)| a + 0.5 * dt * k).collect();
    let k3 = f(&y3);
    let y4: Vec<f64> = y.iter().zip(&k3).map(|(&a, &k)| a + dt * k).collect();
    let k4 = f(&y4);
    (0..y.len())
        .map(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Integrate an arbitrary field; returns n_steps+1 states including y0.
pub fn integrate_field(
    f: &impl Fn(&[f64]) -> Vec<f64>,
    y0: &[f64],
    dt: f64,
    n_steps: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(n_steps + 1);
    out.push(y0.to_vec());
    for step in 0..n_steps {
        let next = rk4_step(f, out.last().unwrap(), dt);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "integration diverged at step {} (t = {})",
                step + 1,
                (step + 1) as f64 * dt
            )));
        }
        out.push(next);
    }
    Ok(out)
}

/// Fixed-step RK4 trajectory of Lorenz-63.
pub fn integrate_lorenz(
    ic: [f64; 3],
    dt: f64,
    n_steps: usize,
    p: &LorenzParams,
) -> Result<Vec<[f64; 3]>> {
    assert!(dt > 0.0 && n_steps >= 1, "integrate_lorenz preconditions");
    let p = *p;
    let f = move |y: &[f64]| -> Vec<f64> {
        let s = [y[0], y[1], y[2]];
        lorenz_rhs(&s, &p).to_vec()
    };
    let states = integrate_field(&f, &ic, dt, n_steps)?;
    Ok(states.into_iter().map(|v| [v[0], v[1], v[2]]).collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub ic: Option<[f64; 3]>,
    pub dt: Option<f64>,
    pub eta: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub meta: Provenance,
}

impl TimeSeries {
    pub fn new(times: Vec<f64>, values: Vec<f64>, meta: Provenance) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::Usage("time/value length mismatch".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Usage("times must be strictly increasing".into()));
        }
        Ok(TimeSeries { times, values, meta })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Population standard deviation of the values.
    pub fn std(&self) -> f64 {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        (self.values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
    }
}

/// x-coordinate measurement series from a Lorenz trajectory.
pub fn measure_x(traj: &[[f64; 3]], dt: f64, meta: Provenance) -> TimeSeries {
    let times: Vec<f64> = (0..traj.len()).map(|i| i as f64 * dt).collect();
    let values: Vec<f64> = traj.iter().map(|s| s[0]).collect();
    TimeSeries { times, values, meta }
}

/// Additive Gaussian noise with σ = η · std(values).
pub fn add_noise(series: &TimeSeries, eta: f64, rng: &mut ChaCha8Rng) -> TimeSeries {
    assert!(eta >= 0.0, "eta must be nonnegative");
    if eta == 0.0 {
        return series.clone();
    }
    let sigma = eta * series.std();
    let normal = Normal::new(0.0, sigma).unwrap();
    let values: Vec<f64> = series.values.iter().map(|&v| v + normal.sample(rng)).collect();
    let mut meta = series.meta.clone();
    meta.eta = Some(eta);
    TimeSeries { times: series.times.clone(), values, meta }
}

/// Affine map to [−1, 1]: scaled = (x − shift) / scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub shift: f64,
    pub scale: f64,
}

impl ScalingRecord {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.shift) / self.scale
    }

    pub fn invert(&self, y: f64) -> f64 {
        y * self.scale + self.shift
    }
}

/// Rescale so the training split (t ≤ train_end) maps min→−1, max→+1; the
/// same map applies to all splits, without clipping.
pub fn rescale(series: &TimeSeries, train_end: f64) -> Result<(TimeSeries, ScalingRecord)> {
    let train_vals: Vec<f64> = series
        .times
        .iter()
        .zip(&series.values)
        .filter(|(&t, _)| t <= train_end + 1e-12)
        .map(|(_, &v)| v)
        .collect();
    if train_vals.len() < 2 {
        return Err(Error::Config("training split too short to rescale".into()));
    }
    let lo = train_vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = train_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Err(Error::Numeric("constant training split: degenerate scale".into()));
    }
    let rec = ScalingRecord { shift: (hi + lo) / 2.0, scale: (hi - lo) / 2.0 };
    let values: Vec<f64> = series.values.iter().map(|&v| rec.apply(v)).collect();
    Ok((TimeSeries { times: series.times.clone(), values, meta: series.meta.clone() }, rec))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentedSeries {
    pub segments: Vec<Segment>,
    /// Time overlap between consecutive segments, (m−1)·τ.
    pub overlap: f64,
    pub val: Segment,
    pub test: Segment,
}

/// Split into train/val/test by time, then cut the training split into S
/// segments of near-equal length whose consecutive pairs share exactly
/// (m−1)τ of time (ov+1 grid samples). Requires a uniform grid.
pub fn split_and_segment(
    series: &TimeSeries,
    s: usize,
    m: usize,
    tau: f64,
    train_end: f64,
    val_end: f64,
) -> Result<SegmentedSeries> {
    assert!(s >= 1 && m >= 2 && tau > 0.0, "split_and_segment preconditions");
    let n = series.len();
    if n < 2 {
        return Err(Error::Config("series too short".into()));
    }
    let dt = series.times[1] - series.times[0];
    if series
        .times
        .windows(2)
        .any(|w| ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1.0))
    {
        return Err(Error::Config("segmentation requires a uniform time grid".into()));
    }
    let overlap = (m - 1) as f64 * tau;
    let ov = (overlap / dt).round() as usize;
    if (ov as f64 * dt - overlap).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "overlap (m-1)tau = {overlap} is not a multiple of dt = {dt}"
        )));
    }
    let n_train = series.times.iter().take_while(|&&t| t <= train_end + 1e-12).count();
    let n_val_end = series.times.iter().take_while(|&&t| t <= val_end + 1e-12).count();
    if n_train < 2 {
        return Err(Error::Config("empty training split".into()));
    }
    let span = series.times[n_train - 1] - series.times[0];
    if span <= s as f64 * overlap {
        return Err(Error::Config(format!(
            "training span {span} does not admit {s} segments with overlap {overlap}"
        )));
    }
    // Segment sample counts: S lengths summing to n_train + (S−1)(ov+1),
    // each within one sample of the others.
    let total = n_train + (s - 1) * (ov + 1);
    let q = total / s;
    let r = total % s;
    if q < ov + 2 {
        return Err(Error::Config(
            "segments would be shorter than their mutual overlap".into(),
        ));
    }
    let mut segments = Vec::with_capacity(s);
    let mut start = 0usize;
    for i in 0..s {
        let len = if i < r { q + 1 } else { q };
        let end = start + len;
        segments.push(Segment {
            times: series.times[start..end].to_vec(),
            values: series.values[start..end].to_vec(),
        });
        if i + 1 < s {
            start = end - (ov + 1);
        }
    }
    debug_assert_eq!(
        start + segments.last().unwrap().times.len(),
        n_train,
        "segments must tile the training split"
    );
    let val = Segment {
        times: series.times[n_train..n_val_end].to_vec(),
        values: series.values[n_train..n_val_end].to_vec(),
    };
    let test = Segment {
        times: series.times[n_val_end..].to_vec(),
        values: series.values[n_val_end..].to_vec(),
    };
    Ok(SegmentedSeries { segments, overlap, val, test })
}

/// Reassemble the training series from segments by dropping each successor's
/// leading overlap; inverse of `split_and_segment` on the training split.
pub fn reassemble(seg: &SegmentedSeries, dt: f64) -> (Vec<f64>, Vec<f64>) {
    let ov = (seg.overlap / dt).round() as usize;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (i, sgt) in seg.segments.iter().enumerate() {
        let skip = if i == 0 { 0 } else { ov + 1 };
        times.extend_from_slice(&sgt.times[skip..]);
        values.extend_from_slice(&sgt.values[skip..]);
    }
    (times, values)
}

/// Write `time,value` CSV with optional `# key value` comment headers.
pub fn write_series(path: &Path, series: &TimeSeries, comments: &[String]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for c in comments {
        writeln!(file, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["time", "value"])?;
    for (t, v) in series.times.iter().zip(&series.values) {
        w.write_record(&[format_f64(*t), format_f64(*v)])?;
    }
    w.flush()?;
    Ok(())
}

/// Write `time,x,y,z` CSV for a generated trajectory.
pub fn write_trajectory(
    path: &Path,
    traj: &[[f64; 3]],
    dt: f64,
    comments: &[String],
) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for c in comments {
        writeln!(file, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["time", "x", "y", "z"])?;
    for (i, s) in traj.iter().enumerate() {
        w.write_record(&[
            format_f64(i as f64 * dt),
            format_f64(s[0]),
            format_f64(s[1]),
            format_f64(s[2]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Read a `time,value` CSV (header required; `#` comment lines allowed;
/// uneven spacing accepted).
pub fn read_series(path: &Path) -> Result<TimeSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    {
        let headers = rdr.headers()?;
        if headers.len() < 2 || &headers[0] != "time" || &headers[1] != "value" {
            return Err(Error::Usage(format!(
                "expected header time,value in {}",
                path.display()
            )));
        }
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let t: f64 = rec[0]
            .parse()
            .map_err(|e| Error::Usage(format!("bad time field {:?}: {e}", &rec[0])))?;
        let v: f64 = rec[1]
            .parse()
            .map_err(|e| Error::Usage(format!("bad value field {:?}: {e}", &rec[1])))?;
        times.push(t);
        values.push(v);
    }
    TimeSeries::new(times, values, Provenance::default())
}

/// Shortest round-trip decimal rendering (bit-exact on re-parse);
/// serde_json uses ryu internally, reused here for identical rendering in
/// every emitted file.
pub fn format_f64(v: f64) -> String {
    serde_json::to_string(&v).unwrap_or_else(|_| v.to_string())
}
