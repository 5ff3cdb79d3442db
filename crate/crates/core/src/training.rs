//! Joint training: per segment, one shared graph yields four losses, and four
//! reverse passes taken at the same pre-update point drive four parameter
//! groups (the segment's fit network, the encoder, the decoder, and the
//! dynamics network). Mask statistics update at epoch boundaries from the
//! pool of states visited during the epoch.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols_dual, Dual, Gradients, Tape, Var};
use crate::data::{format_f64, Segment, SegmentedSeries};
use crate::dynamics::{
    divergence_batch, dyn_matrix_batch, forecast, loss_div, loss_ode, measure,
    ode_residual_batch, MeasureMode,
};
use crate::embedding::{decode, encode, fnn_fractions, loss_exp, loss_rec, DelayConfig, MaskState};
use crate::error::{Error, Result};
use crate::evaluation::nmse;
use crate::nn::{
    bind, init_network, BnObservation, BoundNetwork, Mode, NetworkParams, NetworkSpec,
    OutputActivation,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// State space reconstructed by the method of delay (mask only).
    Delay,
    /// State space produced by the masked encoder.
    Autoencoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second-moment buffers per trainable array, bias-corrected updates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub cfg: AdamParams,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &NetworkParams, cfg: AdamParams) -> Self {
        let mut m: Vec<Vec<f64>> = Vec::with_capacity(params.trainable_len());
        params.visit_trainable(&mut |_, a| m.push(vec![0.0; a.len()]));
        AdamState { cfg, step: 0, m: m.clone(), v: m }
    }

    pub fn apply(&mut self, params: &mut NetworkParams, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), self.m.len(), "gradient group count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let scale = self.cfg.lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
        let eps = self.cfg.epsilon;
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut k = 0;
        params.visit_trainable_mut(&mut |arr| {
            let (g, m, v) = (&grads[k], &mut ms[k], &mut vs[k]);
            assert_eq!(g.len(), arr.len(), "gradient length mismatch");
            for j in 0..arr.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                arr[j] -= scale * m[j] / (v[j].sqrt() + eps);
            }
            k += 1;
        });
    }
}

/// Everything the learned model consists of.
#[derive(Debug, Clone)]
pub struct TrainBundle {
    pub theta_u: Vec<NetworkParams>,
    pub theta_e: NetworkParams,
    pub theta_d: NetworkParams,
    pub theta_f: NetworkParams,
    pub mask: MaskState,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub delay: DelayConfig,
    /// Sample count M per segment visit (ODE and divergence batches).
    pub batch: usize,
    pub hidden_width: usize,
    pub fit_blocks: usize,
    pub coder_blocks: usize,
    pub dropout: f64,
    pub corrupt_sigma: f64,
    pub lambda_u: f64,
    pub lambda_e1: f64,
    pub lambda_e2: f64,
    pub lambda_f: f64,
    /// Mask moving-average rate; 0 freezes the mask.
    pub alpha: f64,
    pub epsilon: f64,
    /// Cap on pooled rows entering the epoch-boundary neighbor scan.
    pub fnn_cap: usize,
    pub adam: AdamParams,
    /// Segment updates per phase (an epoch is one sweep over all segments).
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    /// Epochs between validation forecasts.
    pub val_every: usize,
    pub init_seed: u64,
    pub train_seed: u64,
    /// Embedding used after pretraining: `Autoencoder` switches the second
    /// phase to the masked encoder; `Delay` keeps the method of delay
    /// throughout.
    pub mode: Phase,
}

impl TrainOptions {
    pub fn network_specs(&self, m: usize) -> (NetworkSpec, NetworkSpec, NetworkSpec, NetworkSpec) {
        let u = NetworkSpec::new(1, 1, self.fit_blocks, self.hidden_width, OutputActivation::Tanh, self.dropout);
        let e = NetworkSpec::new(m, m, self.coder_blocks, self.hidden_width, OutputActivation::Tanh, self.dropout);
        let d = NetworkSpec::new(m, m, self.coder_blocks, self.hidden_width, OutputActivation::Tanh, self.dropout);
        let f = NetworkSpec::new(m, m * m, self.coder_blocks, self.hidden_width, OutputActivation::Linear, self.dropout);
        (u, e, d, f)
    }
}

/// Mutable training state; checkpoints capture all of it, so a resumed run
/// continues the exact trajectory of an uninterrupted one.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub bundle: TrainBundle,
    pub adam_u: Vec<AdamState>,
    pub adam_e: AdamState,
    pub adam_d: AdamState,
    pub adam_f: AdamState,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub best_bundle: Option<TrainBundle>,
    pub best_phase: Option<Phase>,
}

pub fn init_trainer(segments: usize, opt: &TrainOptions) -> TrainerState {
    assert!(segments >= 1 && opt.batch >= 2, "init_trainer preconditions");
    let m = opt.delay.m;
    let (spec_u, spec_e, spec_d, spec_f) = opt.network_specs(m);
    let mut rng = ChaCha8Rng::seed_from_u64(opt.init_seed);
    // Draw order fixes the initialization: fit networks first, then encoder,
    // decoder, dynamics.
    let theta_u: Vec<NetworkParams> =
        (0..segments).map(|_| init_network(&spec_u, &mut rng)).collect();
    let theta_e = init_network(&spec_e, &mut rng);
    let theta_d = init_network(&spec_d, &mut rng);
    let theta_f = init_network(&spec_f, &mut rng);
    let adam_u = theta_u.iter().map(|p| AdamState::new(p, opt.adam)).collect();
    let adam_e = AdamState::new(&theta_e, opt.adam);
    let adam_d = AdamState::new(&theta_d, opt.adam);
    let adam_f = AdamState::new(&theta_f, opt.adam);
    let mask = MaskState::full(m, opt.epsilon, opt.alpha, Default::default());
    TrainerState {
        bundle: TrainBundle { theta_u, theta_e, theta_d, theta_f, mask },
        adam_u,
        adam_e,
        adam_d,
        adam_f,
        rng: ChaCha8Rng::seed_from_u64(opt.train_seed),
        epoch: 0,
        best_val: None,
        best_bundle: None,
        best_phase: None,
    }
}

/// Per-segment affine map of time onto [−1, 1]; the fit network sees ξ and
/// its output is differentiated through dξ/dt = 1/half.
#[derive(Debug, Clone, Copy)]
struct SegCtx {
    mid: f64,
    half: f64,
    /// ODE sampling window: delay vectors must stay inside the segment.
    t_lo: f64,
    t_hi: f64,
}

fn seg_ctx(seg: &Segment, delay: &DelayConfig) -> Result<SegCtx> {
    let (t0, t1) = (seg.times[0], *seg.times.last().unwrap());
    let half = 0.5 * (t1 - t0);
    let t_lo = t0 + delay.horizon();
    if half <= 0.0 || t_lo >= t1 {
        return Err(Error::Usage(format!(
            "segment [{t0}, {t1}] is shorter than the delay horizon {}",
            delay.horizon()
        )));
    }
    Ok(SegCtx { mid: 0.5 * (t0 + t1), half, t_lo, t_hi: t1 })
}

struct SegmentGraph<'t> {
    bound_u: BoundNetwork<'t>,
    bound_e: Option<BoundNetwork<'t>>,
    bound_d: Option<BoundNetwork<'t>>,
    bound_f: BoundNetwork<'t>,
    l_fit: Var<'t>,
    l_ode: Var<'t>,
    l_div: Var<'t>,
    l_rec: Option<Var<'t>>,
    l_exp: Option<Var<'t>>,
    obs_u: Vec<BnObservation>,
    obs_e: Vec<BnObservation>,
    obs_d: Vec<BnObservation>,
    obs_f: Vec<BnObservation>,
    /// Delay vectors at the sampled times, pooled for the mask update.
    delay_rows: Vec<f64>,
    rec_floored: bool,
}

/// Reconstruct the delay state ũ(t) at given times as a dual batch: each
/// coordinate is the fit network at ξ(t − jτ), with tangent seeded by the
/// time-normalization rate.
#[allow(clippy::too_many_arguments)]
fn delay_state<'t>(
    tape: &'t Tape,
    bound_u: &BoundNetwork<'t>,
    times: &[f64],
    ctx: &SegCtx,
    delay: &DelayConfig,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    obs: &mut Vec<BnObservation>,
) -> Result<Dual<'t>> {
    let rows = times.len();
    let seed = tape.leaf(&vec![1.0 / ctx.half; rows], rows, 1);
    let mut parts = Vec::with_capacity(delay.m);
    for j in 0..delay.m {
        let xi: Vec<f64> = times
            .iter()
            .map(|&t| (t - j as f64 * delay.tau - ctx.mid) / ctx.half)
            .collect();
        let x = Dual::with_tangent(tape.leaf(&xi, rows, 1), seed);
        parts.push(bound_u.forward(x, mode, rng, None, obs)?);
    }
    Ok(concat_cols_dual(&parts))
}

/// The fit-loss formula on plain values: Σ(s − p)² / (N·σ_s²) with σ_s² the
/// population variance of the targets. Shift-invariant; 1 when p ≡ mean(s).
pub fn normalized_sse(targets: &[f64], preds: &[f64]) -> Result<f64> {
    if targets.len() != preds.len() || targets.len() < 2 {
        return Err(Error::Usage("normalized_sse needs equal lengths of at least 2".into()));
    }
    let n = targets.len();
    let mean = targets.iter().sum::<f64>() / n as f64;
    let var = targets.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return Err(Error::Numeric("targets are constant; normalized SSE undefined".into()));
    }
    let mut sse = 0.0;
    for (&t, &p) in targets.iter().zip(preds) {
        let r = p - t;
        sse += r * r;
    }
    Ok(sse * (1.0 / (n as f64 * var)))
}

fn fit_loss<'t>(
    tape: &'t Tape,
    bound_u: &BoundNetwork<'t>,
    seg: &Segment,
    ctx: &SegCtx,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    obs: &mut Vec<BnObservation>,
) -> Result<Var<'t>> {
    let n = seg.times.len();
    let mean = seg.values.iter().sum::<f64>() / n as f64;
    let var = seg.values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return Err(Error::Numeric("segment values are constant; fit loss undefined".into()));
    }
    let xi: Vec<f64> = seg.times.iter().map(|&t| (t - ctx.mid) / ctx.half).collect();
    let x = Dual::constant(tape.leaf(&xi, n, 1));
    let y = bound_u.forward(x, mode, rng, None, obs)?;
    let target = tape.leaf(&seg.values, n, 1);
    Ok((y.primal - target).square().sum_all().scale(1.0 / (n as f64 * var)))
}

#[allow(clippy::too_many_arguments)]
fn build_segment_graph<'t>(
    tape: &'t Tape,
    seg: &Segment,
    ctx: &SegCtx,
    bundle: &TrainBundle,
    seg_idx: usize,
    phase: Phase,
    opt: &TrainOptions,
    rng: &mut ChaCha8Rng,
) -> Result<SegmentGraph<'t>> {
    let m = opt.delay.m;
    let d = bundle.mask.d;
    let w = bundle.mask.w.clone();
    let big_m = opt.batch;

    let bound_u = bind(tape, &bundle.theta_u[seg_idx]);
    let bound_f = bind(tape, &bundle.theta_f);
    let (bound_e, bound_d) = match phase {
        Phase::Delay => (None, None),
        Phase::Autoencoder => {
            (Some(bind(tape, &bundle.theta_e)), Some(bind(tape, &bundle.theta_d)))
        }
    };

    let mut obs_u = Vec::new();
    let mut obs_e = Vec::new();
    let mut obs_d = Vec::new();
    let mut obs_f = Vec::new();

    let l_fit = fit_loss(tape, &bound_u, seg, ctx, Mode::Train, rng, &mut obs_u)?;

    let times: Vec<f64> = (0..big_m)
        .map(|_| ctx.t_lo + rng.gen::<f64>() * (ctx.t_hi - ctx.t_lo))
        .collect();
    let u_tilde =
        delay_state(tape, &bound_u, &times, ctx, &opt.delay, Mode::Train, rng, &mut obs_u)?;
    let delay_rows = u_tilde.primal.value();

    let (u, l_rec, l_exp, rec_floored) = match phase {
        Phase::Delay => (u_tilde.mul_row_const(&w), None, None, false),
        Phase::Autoencoder => {
            let enc = bound_e.as_ref().unwrap();
            let dec = bound_d.as_ref().unwrap();
            let u = encode(
                enc,
                u_tilde,
                &w,
                Mode::Train,
                rng,
                Some(opt.corrupt_sigma),
                &mut obs_e,
            )?;
            let u_hat = decode(dec, Dual::constant(u.primal), Mode::Train, rng, &mut obs_d)?;
            let (l_rec, floored) =
                loss_rec(u_hat.primal, u_tilde.primal, &u.primal.value(), d);
            let l_exp = loss_exp(u.primal, d);
            (u, Some(l_rec), Some(l_exp), floored)
        }
    };

    let a = dyn_matrix_batch(&bound_f, Dual::constant(u.primal), &w, Mode::Train, rng, &mut obs_f)?;
    let l_ode = loss_ode(ode_residual_batch(u, a.primal), d);

    let states: Vec<f64> = (0..big_m * m).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect();
    let state_leaf = tape.leaf(&states, big_m, m);
    let div = divergence_batch(&bound_f, state_leaf, &w, d, Mode::Train, rng, &mut obs_f)?;
    let l_div = loss_div(div, d);

    for (name, loss) in [("fit", Some(l_fit)), ("ode", Some(l_ode)), ("div", Some(l_div)), ("rec", l_rec), ("exp", l_exp)] {
        if let Some(l) = loss {
            if !l.scalar_value().is_finite() {
                return Err(Error::Numeric(format!(
                    "loss {name} is not finite on segment {seg_idx}"
                )));
            }
        }
    }

    Ok(SegmentGraph {
        bound_u,
        bound_e,
        bound_d,
        bound_f,
        l_fit,
        l_ode,
        l_div,
        l_rec,
        l_exp,
        obs_u,
        obs_e,
        obs_d,
        obs_f,
        delay_rows,
        rec_floored,
    })
}

fn collect_grads(bound: &BoundNetwork<'_>, grads: &Gradients) -> Vec<Vec<f64>> {
    bound.leaves().iter().map(|&l| grads.get(l).to_vec()).collect()
}

/// Per-epoch loss means, plus the embedding dimension after the epoch's
/// mask update and the validation score when one was computed.
#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_fit: f64,
    pub l_rec: f64,
    pub l_ode: f64,
    pub l_div: f64,
    pub l_exp: f64,
    pub d: usize,
    pub val_nmse: Option<f64>,
    /// Reconstruction-loss normalizer hit its floor on this many segments.
    pub rec_floor_hits: usize,
}

pub const METRICS_HEADER: &str = "epoch,L_fit,L_rec,L_ode,L_div,L_exp,d,val_nmse";

pub fn metrics_csv_row(m: &EpochMetrics) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        m.epoch,
        format_f64(m.l_fit),
        format_f64(m.l_rec),
        format_f64(m.l_ode),
        format_f64(m.l_div),
        format_f64(m.l_exp),
        m.d,
        m.val_nmse.map(format_f64).unwrap_or_default()
    )
}

/// Loss values observed during one segment visit.
#[derive(Debug, Clone)]
pub struct SegmentStats {
    pub l_fit: f64,
    pub l_rec: f64,
    pub l_ode: f64,
    pub l_div: f64,
    pub l_exp: f64,
    pub rec_floored: bool,
    /// The M delay vectors sampled during the visit (row-major M×m), pooled
    /// by the caller for the epoch-boundary mask update.
    pub delay_rows: Vec<f64>,
}

/// One inner-loop body: build the segment's graph, take all reverse passes
/// at the current parameters, then apply the per-group updates — the
/// segment's own fit network and the dynamics network always; the encoder
/// and decoder only on the autoencoder path.
pub fn segment_update(
    data: &SegmentedSeries,
    seg_idx: usize,
    phase: Phase,
    state: &mut TrainerState,
    opt: &TrainOptions,
) -> Result<SegmentStats> {
    let ctx = seg_ctx(&data.segments[seg_idx], &opt.delay)?;
    let tape = Tape::new();
    let g = build_segment_graph(
        &tape,
        &data.segments[seg_idx],
        &ctx,
        &state.bundle,
        seg_idx,
        phase,
        opt,
        &mut state.rng,
    )?;

    let l_u = g.l_fit + g.l_ode.scale(opt.lambda_u);
    let l_f = g.l_ode + g.l_div.scale(opt.lambda_f);
    let grads_u = collect_grads(&g.bound_u, &tape.backward(l_u)?);
    let grads_f = collect_grads(&g.bound_f, &tape.backward(l_f)?);
    let grads_ed = match phase {
        Phase::Delay => None,
        Phase::Autoencoder => {
            let l_rec = g.l_rec.unwrap();
            let l_e =
                l_rec + g.l_ode.scale(opt.lambda_e1) + g.l_exp.unwrap().scale(opt.lambda_e2);
            let ge = collect_grads(g.bound_e.as_ref().unwrap(), &tape.backward(l_e)?);
            let gd = collect_grads(g.bound_d.as_ref().unwrap(), &tape.backward(l_rec)?);
            Some((ge, gd))
        }
    };

    state.adam_u[seg_idx].apply(&mut state.bundle.theta_u[seg_idx], &grads_u);
    state.adam_f.apply(&mut state.bundle.theta_f, &grads_f);
    if let Some((ge, gd)) = grads_ed {
        state.adam_e.apply(&mut state.bundle.theta_e, &ge);
        state.adam_d.apply(&mut state.bundle.theta_d, &gd);
    }
    state.bundle.theta_u[seg_idx].update_running_stats(&g.obs_u);
    state.bundle.theta_f.update_running_stats(&g.obs_f);
    state.bundle.theta_e.update_running_stats(&g.obs_e);
    state.bundle.theta_d.update_running_stats(&g.obs_d);

    Ok(SegmentStats {
        l_fit: g.l_fit.scalar_value(),
        l_rec: g.l_rec.map(Var::scalar_value).unwrap_or(0.0),
        l_ode: g.l_ode.scalar_value(),
        l_div: g.l_div.scalar_value(),
        l_exp: g.l_exp.map(Var::scalar_value).unwrap_or(0.0),
        rec_floored: g.rec_floored,
        delay_rows: g.delay_rows,
    })
}

/// One sweep over all segments, then the epoch-boundary mask update from the
/// pooled delay vectors. Increments the epoch counter.
pub fn train_epoch(
    data: &SegmentedSeries,
    phase: Phase,
    state: &mut TrainerState,
    opt: &TrainOptions,
) -> Result<EpochMetrics> {
    let s = data.segments.len();
    let m = opt.delay.m;
    let mut pool: Vec<f64> = Vec::with_capacity(s * opt.batch * m);
    let mut sums = [0.0; 5];
    let mut rec_floor_hits = 0usize;

    for i in 0..s {
        let stats = segment_update(data, i, phase, state, opt)?;
        pool.extend_from_slice(&stats.delay_rows);
        sums[0] += stats.l_fit;
        sums[1] += stats.l_rec;
        sums[2] += stats.l_ode;
        sums[3] += stats.l_div;
        sums[4] += stats.l_exp;
        rec_floor_hits += stats.rec_floored as usize;
    }

    if opt.alpha > 0.0 {
        let rows = pool.len() / m;
        let batch = if rows > opt.fnn_cap {
            let mut idx =
                rand::seq::index::sample(&mut state.rng, rows, opt.fnn_cap).into_vec();
            idx.sort_unstable();
            let mut sub = Vec::with_capacity(opt.fnn_cap * m);
            for r in idx {
                sub.extend_from_slice(&pool[r * m..(r + 1) * m]);
            }
            sub
        } else {
            pool
        };
        let rows = batch.len() / m;
        let gamma_hat = fnn_fractions(&batch, rows, m, &state.bundle.mask.thresholds)?;
        state.bundle.mask.update(&gamma_hat);
    }

    state.epoch += 1;
    let inv = 1.0 / s as f64;
    Ok(EpochMetrics {
        epoch: state.epoch,
        l_fit: sums[0] * inv,
        l_rec: sums[1] * inv,
        l_ode: sums[2] * inv,
        l_div: sums[3] * inv,
        l_exp: sums[4] * inv,
        d: state.bundle.mask.d,
        val_nmse: None,
        rec_floor_hits,
    })
}

/// Latent state at time t, read off the fit network of the segment that
/// contains t (eval mode), mapped through the phase's embedding.
pub fn state_at(
    bundle: &TrainBundle,
    phase: Phase,
    seg: &Segment,
    seg_idx: usize,
    t: f64,
    delay: &DelayConfig,
) -> Result<Vec<f64>> {
    let ctx = seg_ctx(seg, delay)?;
    if t < ctx.t_lo - 1e-9 || t > ctx.t_hi + 1e-9 {
        return Err(Error::Usage(format!(
            "state requested at t = {t}, outside the segment's sampling window"
        )));
    }
    let tape = Tape::new();
    let bound_u = bind(&tape, &bundle.theta_u[seg_idx]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut obs = Vec::new();
    let u_tilde =
        delay_state(&tape, &bound_u, &[t], &ctx, delay, Mode::Eval, &mut rng, &mut obs)?;
    let u = match phase {
        Phase::Delay => u_tilde.mul_row_const(&bundle.mask.w),
        Phase::Autoencoder => {
            let bound_e = bind(&tape, &bundle.theta_e);
            encode(&bound_e, u_tilde, &bundle.mask.w, Mode::Eval, &mut rng, None, &mut obs)?
        }
    };
    Ok(u.primal.value())
}

pub fn measure_mode(phase: Phase) -> MeasureMode {
    match phase {
        Phase::Delay => MeasureMode::DelayIdentity,
        Phase::Autoencoder => MeasureMode::Decoder,
    }
}

/// Forecast across the validation window from the train-end state with the
/// dynamics frozen, and score the measured output against the held-out
/// values. A diverging forecast scores infinity rather than aborting.
pub fn validation_nmse(
    bundle: &TrainBundle,
    phase: Phase,
    data: &SegmentedSeries,
    delay: &DelayConfig,
    dt: f64,
) -> Result<f64> {
    let n_val = data.val.times.len();
    if n_val == 0 {
        return Err(Error::Usage("validation split is empty".into()));
    }
    let seg_idx = data.segments.len() - 1;
    let seg = &data.segments[seg_idx];
    let t_end = *seg.times.last().unwrap();
    let u0 = state_at(bundle, phase, seg, seg_idx, t_end, delay)?;
    let states = match forecast(&bundle.theta_f, &bundle.mask.w, &u0, dt, n_val) {
        Ok(s) => s,
        Err(Error::Numeric(_)) => return Ok(f64::INFINITY),
        Err(e) => return Err(e),
    };
    let pred = measure(&states[1..], measure_mode(phase), Some(&bundle.theta_d))?;
    nmse(&data.val.values, &pred)
}

#[derive(Debug, Clone)]
pub struct ScheduleResult {
    pub state: TrainerState,
    /// Bundle minimizing validation NMSE (the final bundle if no validation
    /// forecast ever succeeded), and the phase it was trained in.
    pub best: TrainBundle,
    pub best_phase: Phase,
    pub best_val: Option<f64>,
    pub metrics: Vec<EpochMetrics>,
}

fn epochs_for(iters: usize, segments: usize) -> usize {
    iters.div_ceil(segments)
}

pub fn phase_for_epoch(epoch: usize, phase1_epochs: usize, mode: Phase) -> Phase {
    if epoch < phase1_epochs {
        Phase::Delay
    } else {
        mode
    }
}

/// Run the two-phase schedule (delay pretraining, then autoencoder
/// fine-tuning), validating every `val_every` epochs and checkpointing on
/// improvement. `on_epoch` sees each epoch's metrics as they are produced.
pub fn run_schedule(
    data: &SegmentedSeries,
    dt: f64,
    opt: &TrainOptions,
    resume: Option<TrainerState>,
    checkpoint_path: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<ScheduleResult> {
    let s = data.segments.len();
    if s == 0 {
        return Err(Error::Usage("no training segments".into()));
    }
    assert!(opt.val_every >= 1, "val_every must be positive");
    let phase1_epochs = epochs_for(opt.phase1_iters, s);
    let total_epochs = phase1_epochs + epochs_for(opt.phase2_iters, s);

    let mut state = resume.unwrap_or_else(|| init_trainer(s, opt));
    if state.bundle.theta_u.len() != s {
        return Err(Error::Config(format!(
            "checkpoint carries {} fit networks but the data has {s} segments",
            state.bundle.theta_u.len()
        )));
    }
    let mut metrics = Vec::with_capacity(total_epochs.saturating_sub(state.epoch));

    while state.epoch < total_epochs {
        let phase = phase_for_epoch(state.epoch, phase1_epochs, opt.mode);
        let mut em = train_epoch(data, phase, &mut state, opt)?;
        let last_of_phase = state.epoch == phase1_epochs || state.epoch == total_epochs;
        if state.epoch.is_multiple_of(opt.val_every) || last_of_phase {
            let score = validation_nmse(&state.bundle, phase, data, &opt.delay, dt)?;
            em.val_nmse = Some(score);
            if score.is_finite() && state.best_val.is_none_or(|b| score < b) {
                state.best_val = Some(score);
                state.best_bundle = Some(state.bundle.clone());
                state.best_phase = Some(phase);
                if let Some(path) = checkpoint_path {
                    write_checkpoint(path, &state)?;
                }
            }
        }
        on_epoch(&em)?;
        metrics.push(em);
    }

    if let Some(path) = checkpoint_path {
        write_checkpoint(path, &state)?;
    }
    let best = state.best_bundle.clone().unwrap_or_else(|| state.bundle.clone());
    let best_phase = state
        .best_phase
        .unwrap_or(phase_for_epoch(total_epochs.saturating_sub(1), phase1_epochs, opt.mode));
    Ok(ScheduleResult { state: state.clone(), best, best_phase, best_val: state.best_val, metrics })
}

/// Fit a fresh network to a short observation window with the embedding and
/// dynamics frozen, and return the latent state at t0. This is how the model
/// is applied to data it was not trained on.
pub fn infer_initial_state(
    window: &Segment,
    t0: f64,
    bundle: &TrainBundle,
    phase: Phase,
    opt: &TrainOptions,
    iters: usize,
    seed: u64,
) -> Result<(Vec<f64>, NetworkParams)> {
    let ctx = seg_ctx(window, &opt.delay)?;
    if t0 < ctx.t_lo - 1e-9 || t0 > ctx.t_hi + 1e-9 {
        return Err(Error::Usage(format!(
            "t0 = {t0} is outside the window's sampling range [{}, {}]",
            ctx.t_lo, ctx.t_hi
        )));
    }
    let (spec_u, _, _, _) = opt.network_specs(opt.delay.m);
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params_u = init_network(&spec_u, &mut init_rng);
    let mut adam = AdamState::new(&params_u, opt.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let w = bundle.mask.w.clone();
    let d = bundle.mask.d;

    for _ in 0..iters {
        let tape = Tape::new();
        let bound_u = bind(&tape, &params_u);
        let mut obs_u = Vec::new();
        let mut obs_frozen = Vec::new();
        let l_fit = fit_loss(&tape, &bound_u, window, &ctx, Mode::Train, &mut rng, &mut obs_u)?;
        let times: Vec<f64> = (0..opt.batch)
            .map(|_| ctx.t_lo + rng.gen::<f64>() * (ctx.t_hi - ctx.t_lo))
            .collect();
        let u_tilde = delay_state(
            &tape, &bound_u, &times, &ctx, &opt.delay, Mode::Train, &mut rng, &mut obs_u,
        )?;
        // Frozen networks run in eval mode: running statistics, no dropout,
        // no corruption.
        let u = match phase {
            Phase::Delay => u_tilde.mul_row_const(&w),
            Phase::Autoencoder => {
                let bound_e = bind(&tape, &bundle.theta_e);
                encode(&bound_e, u_tilde, &w, Mode::Eval, &mut rng, None, &mut obs_frozen)?
            }
        };
        let bound_f = bind(&tape, &bundle.theta_f);
        let a = dyn_matrix_batch(
            &bound_f,
            Dual::constant(u.primal),
            &w,
            Mode::Eval,
            &mut rng,
            &mut obs_frozen,
        )?;
        let l_ode = loss_ode(ode_residual_batch(u, a.primal), d);
        let loss = l_fit + l_ode.scale(opt.lambda_u);
        if !loss.scalar_value().is_finite() {
            return Err(Error::Numeric("window fit loss is not finite".into()));
        }
        let grads = collect_grads(&bound_u, &tape.backward(loss)?);
        adam.apply(&mut params_u, &grads);
        params_u.update_running_stats(&obs_u);
    }

    let probe = TrainBundle {
        theta_u: vec![params_u.clone()],
        theta_e: bundle.theta_e.clone(),
        theta_d: bundle.theta_d.clone(),
        theta_f: bundle.theta_f.clone(),
        mask: bundle.mask.clone(),
    };
    let u0 = state_at(&probe, phase, window, 0, t0, &opt.delay)?;
    Ok((u0, params_u))
}

// --- checkpoint serialization -------------------------------------------

fn bundle_to_json(b: &TrainBundle) -> serde_json::Value {
    serde_json::json!({
        "theta_u": b.theta_u.iter().map(NetworkParams::to_path_map).collect::<Vec<_>>(),
        "theta_e": b.theta_e.to_path_map(),
        "theta_d": b.theta_d.to_path_map(),
        "theta_f": b.theta_f.to_path_map(),
        "mask": b.mask,
    })
}

fn bundle_from_json(v: &serde_json::Value) -> Result<TrainBundle> {
    let nets = |key: &str| -> Result<NetworkParams> {
        NetworkParams::from_path_map(
            v.get(key).ok_or_else(|| Error::Config(format!("checkpoint missing {key}")))?,
        )
    };
    let theta_u = v
        .get("theta_u")
        .and_then(|u| u.as_array())
        .ok_or_else(|| Error::Config("checkpoint missing theta_u".into()))?
        .iter()
        .map(NetworkParams::from_path_map)
        .collect::<Result<Vec<_>>>()?;
    let mask: MaskState = serde_json::from_value(
        v.get("mask").ok_or_else(|| Error::Config("checkpoint missing mask".into()))?.clone(),
    )?;
    Ok(TrainBundle {
        theta_u,
        theta_e: nets("theta_e")?,
        theta_d: nets("theta_d")?,
        theta_f: nets("theta_f")?,
        mask,
    })
}

pub fn trainer_to_json(state: &TrainerState) -> serde_json::Value {
    serde_json::json!({
        "format": "lode-checkpoint-v1",
        "epoch": state.epoch,
        "bundle": bundle_to_json(&state.bundle),
        "adam_u": state.adam_u,
        "adam_e": state.adam_e,
        "adam_d": state.adam_d,
        "adam_f": state.adam_f,
        "rng": state.rng,
        "best_val": state.best_val,
        "best_bundle": state.best_bundle.as_ref().map(bundle_to_json),
        "best_phase": state.best_phase,
    })
}

pub fn trainer_from_json(v: &serde_json::Value) -> Result<TrainerState> {
    if v.get("format").and_then(|f| f.as_str()) != Some("lode-checkpoint-v1") {
        return Err(Error::Config("unrecognized checkpoint format".into()));
    }
    let field = |key: &str| -> Result<&serde_json::Value> {
        v.get(key).ok_or_else(|| Error::Config(format!("checkpoint missing {key}")))
    };
    let bundle = bundle_from_json(field("bundle")?)?;
    Ok(TrainerState {
        bundle,
        adam_u: serde_json::from_value(field("adam_u")?.clone())?,
        adam_e: serde_json::from_value(field("adam_e")?.clone())?,
        adam_d: serde_json::from_value(field("adam_d")?.clone())?,
        adam_f: serde_json::from_value(field("adam_f")?.clone())?,
        rng: serde_json::from_value(field("rng")?.clone())?,
        epoch: serde_json::from_value(field("epoch")?.clone())?,
        best_val: serde_json::from_value(field("best_val")?.clone())?,
        best_bundle: match field("best_bundle")? {
            serde_json::Value::Null => None,
            b => Some(bundle_from_json(b)?),
        },
        best_phase: serde_json::from_value(field("best_phase")?.clone())?,
    })
}

/// Atomic checkpoint write (temp file in the same directory, then rename).
pub fn write_checkpoint(path: &Path, state: &TrainerState) -> Result<()> {
    let json = serde_json::to_string(&trainer_to_json(state))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, json)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<TrainerState> {
    let text = std::fs::read_to_string(path)?;
    trainer_from_json(&serde_json::from_str(&text)?)
}
