//! The latent neural ODE du/dt = A(u)·u with the mask-informed attention
//! matrix A = (w·wᵀ) ⊙ N_f(u), its residual and divergence losses, and
//! fixed-step forecasting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Dual, Tape, Var};
use crate::data::integrate_field;
use crate::error::Result;
use crate::nn::{bind, BnObservation, BoundNetwork, Mode, NetworkParams};

/// Row mask w⊗w over the flattened m×m matrix entries.
pub fn attention_mask(w: &[f64]) -> Vec<f64> {
    let m = w.len();
    let mut mask = vec![0.0; m * m];
    for r in 0..m {
        for c in 0..m {
            mask[r * m + c] = w[r] * w[c];
        }
    }
    mask
}

/// Batched A(u) as flattened rows: (w·wᵀ) ⊙ N_f(u), shape M×m². The tangent
/// channel of `u` (if any) rides through N_f, which the divergence needs.
pub fn dyn_matrix_batch<'t>(
    net_f: &BoundNetwork<'t>,
    u: Dual<'t>,
    w: &[f64],
    mode: Mode,
    rng: &mut ChaCha8Rng,
    obs: &mut Vec<BnObservation>,
) -> Result<Dual<'t>> {
    Ok(net_f.forward(u, mode, rng, None, obs)?.mul_row_const(&attention_mask(w)))
}

/// Deviation batch e = du/dt − A(u)·u. The time derivative comes from the
/// tangent channel of `u`; A is evaluated on the primal state.
pub fn ode_residual_batch<'t>(u: Dual<'t>, a_masked: Var<'t>) -> Var<'t> {
    u.tangent_or_zero() - a_masked.bmv(u.primal)
}

/// (1/(M·d)) ΣΣ e²; masked columns are exactly zero so summing all of them
/// is equivalent to summing the embedded ones.
pub fn loss_ode<'t>(residuals: Var<'t>, d: usize) -> Var<'t> {
    assert!(d >= 1, "embedding dimension is at least 1");
    let m_rows = residuals.rows();
    residuals
        .square()
        .sum_all()
        .scale(1.0 / (m_rows as f64 * d as f64))
}

/// Divergence of F(u) = A(u)·u per batch row, via one forward-mode pass per
/// embedded coordinate: ∂F_i/∂u_i = A_ii + Σ_j (∂A_ij/∂u_i)·u_j.
pub fn divergence_batch<'t>(
    net_f: &BoundNetwork<'t>,
    states: Var<'t>,
    w: &[f64],
    d: usize,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    obs: &mut Vec<BnObservation>,
) -> Result<Var<'t>> {
    let tape = states.tape();
    let rows = states.rows();
    let m = states.cols();
    let mut per_coord = Vec::with_capacity(d);
    for i in 0..d {
        let mut basis = vec![0.0; m];
        basis[i] = 1.0;
        let dir_rows: Vec<f64> = (0..rows).flat_map(|_| basis.clone()).collect();
        let dir = tape.leaf(&dir_rows, rows, m);
        let u = Dual::with_tangent(states, dir);
        let a = dyn_matrix_batch(net_f, u, w, mode, rng, obs)?;
        let f = a.bmv(u);
        // Keep only column i of the directional derivative of F.
        per_coord.push(f.tangent_or_zero().mul_row_const(&basis));
    }
    let mut acc = per_coord[0];
    for term in &per_coord[1..] {
        acc = acc + *term;
    }
    // Row sums via a ones vector: M×m → M×1.
    let ones = tape.leaf(&vec![1.0; m], m, 1);
    Ok(acc.matmul(ones))
}

/// Divergence at a single state (eval mode), for oracles and inspection.
pub fn divergence(params_f: &NetworkParams, u: &[f64], w: &[f64], d: usize) -> Result<f64> {
    let tape = Tape::new();
    let net = bind(&tape, params_f);
    let states = tape.leaf(u, 1, u.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut obs = Vec::new();
    let div = divergence_batch(&net, states, w, d, Mode::Eval, &mut rng, &mut obs)?;
    Ok(div.value()[0])
}

/// (1/(M·d)) Σ relu(div F(u_s))²: penalizes expanding regions only.
pub fn loss_div<'t>(divergences: Var<'t>, d: usize) -> Var<'t> {
    let m_rows = divergences.rows();
    divergences
        .relu()
        .square()
        .sum_all()
        .scale(1.0 / (m_rows as f64 * d as f64))
}

/// The learned field u ↦ A(u)·u as a plain function (eval mode), suitable
/// for the shared RK4 integrator. Non-finite inputs yield NaN outputs, which
/// the integrator reports as divergence.
pub fn learned_field<'a>(params_f: &'a NetworkParams, w: &[f64]) -> impl Fn(&[f64]) -> Vec<f64> + 'a {
    let w = w.to_vec();
    move |u: &[f64]| -> Vec<f64> {
        let tape = Tape::new();
        let net = bind(&tape, params_f);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut obs = Vec::new();
        let state = Dual::constant(tape.leaf(u, 1, u.len()));
        match dyn_matrix_batch(&net, state, &w, Mode::Eval, &mut rng, &mut obs) {
            Ok(a) => a.primal.bmv(state.primal).value(),
            Err(_) => vec![f64::NAN; u.len()],
        }
    }
}

/// Fixed-step RK4 trajectory of the learned system; returns n+1 states.
pub fn forecast(
    params_f: &NetworkParams,
    w: &[f64],
    u0: &[f64],
    dt: f64,
    n_steps: usize,
) -> Result<Vec<Vec<f64>>> {
    let field = learned_field(params_f, w);
    integrate_field(&field, u0, dt, n_steps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasureMode {
    /// Method of delay: the measurement is the first state coordinate.
    DelayIdentity,
    /// Autoencoder: the measurement is the first coordinate of N_d(state).
    Decoder,
}

/// Convert latent states to the scalar measurement series (still in scaled
/// units; the caller applies the inverse scaling).
pub fn measure(
    states: &[Vec<f64>],
    mode: MeasureMode,
    params_d: Option<&NetworkParams>,
) -> Result<Vec<f64>> {
    match mode {
        MeasureMode::DelayIdentity => Ok(states.iter().map(|s| s[0]).collect()),
        MeasureMode::Decoder => {
            let params = params_d.expect("decoder mode requires decoder parameters");
            let m = states[0].len();
            let flat: Vec<f64> = states.iter().flat_map(|s| s.iter().copied()).collect();
            let tape = Tape::new();
            let net = bind(&tape, params);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut obs = Vec::new();
            let x = Dual::constant(tape.leaf(&flat, states.len(), m));
            let y = net.forward(x, Mode::Eval, &mut rng, None, &mut obs)?;
            let yv = y.primal.value();
            let cols = y.primal.cols();
            Ok((0..states.len()).map(|i| yv[i * cols]).collect())
        }
    }
}
