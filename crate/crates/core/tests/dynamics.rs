use lode_core::autodiff::{Dual, Tape};
use lode_core::data::integrate_field;
use lode_core::dynamics::{
    attention_mask, divergence, divergence_batch, dyn_matrix_batch, forecast, learned_field,
    loss_div, loss_ode, measure, ode_residual_batch, MeasureMode,
};
use lode_core::nn::{bind, init_network, Mode, NetworkParams, NetworkSpec, OutputActivation};
use lode_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Network that outputs the same vector for every input: all weights and
/// biases zero except the output bias.
fn constant_net(input: usize, out: &[f64]) -> NetworkParams {
    let spec = NetworkSpec::new(input, out.len(), 1, 4, OutputActivation::Linear, 0.0);
    let mut params = init_network(&spec, &mut ChaCha8Rng::seed_from_u64(0));
    params.entry_weight.iter_mut().for_each(|v| *v = 0.0);
    params.entry_bias.iter_mut().for_each(|v| *v = 0.0);
    for sl in params.sublayers.iter_mut() {
        sl.weight.iter_mut().for_each(|v| *v = 0.0);
        sl.bias.iter_mut().for_each(|v| *v = 0.0);
    }
    params.out_weight.iter_mut().for_each(|v| *v = 0.0);
    params.out_bias.copy_from_slice(out);
    params
}

fn random_states(rng: &mut ChaCha8Rng, rows: usize, m: usize) -> Vec<f64> {
    (0..rows * m).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

#[test]
fn attention_mask_is_the_mask_outer_product() {
    let mask = attention_mask(&[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    for r in 0..6 {
        for c in 0..6 {
            let expect = if r < 3 && c < 3 { 1.0 } else { 0.0 };
            assert_eq!(mask[r * 6 + c], expect, "entry ({r}, {c})");
        }
    }
}

#[test]
fn masked_rows_and_columns_of_the_dynamics_matrix_are_exactly_zero() {
    let m = 4;
    let spec = NetworkSpec::new(m, m * m, 2, 12, OutputActivation::Tanh, 0.0);
    let params = init_network(&spec, &mut ChaCha8Rng::seed_from_u64(31));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let states = random_states(&mut rng, 3, m);
    let w = [1.0, 1.0, 0.0, 0.0];

    let tape = Tape::new();
    let net = bind(&tape, &params);
    let u = Dual::constant(tape.leaf(&states, 3, m));
    let mut obs = Vec::new();
    let a = dyn_matrix_batch(&net, u, &w, Mode::Eval, &mut rng, &mut obs)
        .unwrap()
        .primal
        .value();
    for row in 0..3 {
        for i in 0..m {
            for j in 0..m {
                let v = a[row * m * m + i * m + j];
                if i >= 2 || j >= 2 {
                    assert_eq!(v, 0.0, "row {row} entry ({i}, {j})");
                } else {
                    assert_ne!(v, 0.0);
                }
            }
        }
    }
}

#[test]
fn full_mask_leaves_the_dynamics_matrix_untouched() {
    let m = 3;
    let spec = NetworkSpec::new(m, m * m, 1, 8, OutputActivation::Tanh, 0.0);
    let params = init_network(&spec, &mut ChaCha8Rng::seed_from_u64(4));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let states = random_states(&mut rng, 2, m);

    let tape = Tape::new();
    let net = bind(&tape, &params);
    let u = Dual::constant(tape.leaf(&states, 2, m));
    let mut obs = Vec::new();
    let masked = dyn_matrix_batch(&net, u, &[1.0; 3], Mode::Eval, &mut rng, &mut obs)
        .unwrap()
        .primal
        .value();
    let raw = net
        .forward(u, Mode::Eval, &mut rng, None, &mut obs)
        .unwrap()
        .primal
        .value();
    assert_eq!(masked, raw);
}

#[test]
fn residual_vanishes_when_the_tangent_solves_the_linear_system() {
    // A = [−1] constant: states with tangent −u satisfy du/dt = A·u exactly
    let params = constant_net(1, &[-1.0]);
    let states = [0.5, -1.2, 2.0];
    let tangents: Vec<f64> = states.iter().map(|u| -1.0 * u).collect();

    let tape = Tape::new();
    let net = bind(&tape, &params);
    let u = Dual::with_tangent(tape.leaf(&states, 3, 1), tape.leaf(&tangents, 3, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut obs = Vec::new();
    let a = dyn_matrix_batch(&net, u, &[1.0], Mode::Eval, &mut rng, &mut obs).unwrap();
    let e = ode_residual_batch(u, a.primal);
    assert_eq!(e.value(), vec![0.0, 0.0, 0.0]);
    assert_eq!(loss_ode(e, 1).value(), vec![0.0]);
}

#[test]
fn residual_is_the_bare_tangent_under_zero_dynamics() {
    // A = 0 and u = sin(t): e = du/dt = cos(t), which is 1 at t = 0
    let params = constant_net(1, &[0.0]);
    let tape = Tape::new();
    let net = bind(&tape, &params);
    let u = Dual::with_tangent(tape.leaf(&[0.0], 1, 1), tape.leaf(&[1.0], 1, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut obs = Vec::new();
    let a = dyn_matrix_batch(&net, u, &[1.0], Mode::Eval, &mut rng, &mut obs).unwrap();
    let e = ode_residual_batch(u, a.primal);
    assert_eq!(e.value(), vec![1.0]);
    assert_eq!(loss_ode(e, 1).value(), vec![1.0]);
}

#[test]
fn constant_state_under_zero_dynamics_has_zero_residual() {
    let params = constant_net(2, &[0.0, 0.0, 0.0, 0.0]);
    let tape = Tape::new();
    let net = bind(&tape, &params);
    let u = Dual::constant(tape.leaf(&[0.7, -0.3], 1, 2));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut obs = Vec::new();
    let a = dyn_matrix_batch(&net, u, &[1.0, 1.0], Mode::Eval, &mut rng, &mut obs).unwrap();
    let e = ode_residual_batch(u, a.primal);
    assert_eq!(e.value(), vec![0.0, 0.0]);
}

#[test]
fn masked_coordinates_of_the_residual_are_exactly_zero() {
    let m = 3;
    let spec = NetworkSpec::new(m, m * m, 1, 8, OutputActivation::Tanh, 0.0);
    let params = init_network(&spec, &mut ChaCha8Rng::seed_from_u64(12));
    let w = [1.0, 1.0, 0.0];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let states = random_states(&mut rng, 4, m);
    let tangents = random_states(&mut rng, 4, m);

    let tape = Tape::new();
    let net = bind(&tape, &params);
    // the state and its tangent both carry the mask, as in training
    let primal = tape.leaf(&states, 4, m).mul_row_const(&w);
    let tangent = tape.leaf(&tangents, 4, m).mul_row_const(&w);
    let u = Dual::with_tangent(primal, tangent);
    let mut obs = Vec::new();
    let a = dyn_matrix_batch(&net, u, &w, Mode::Eval, &mut rng, &mut obs).unwrap();
    let e = ode_residual_batch(u, a.primal).value();
    for row in 0..4 {
        assert_eq!(e[row * m + 2], 0.0, "masked coordinate in row {row}");
        assert_ne!(e[row * m], 0.0);
    }
}

#[test]
fn network_tangent_matches_finite_differences_in_time() {
    // the tangent channel of N_u(ξ) is the time derivative the residual uses
    let spec = NetworkSpec::new(1, 1, 2, 10, OutputActivation::Tanh, 0.0);
    let params = init_network(&spec, &mut ChaCha8Rng::seed_from_u64(44));
    let eval = |x: f64| -> f64 {
        let tape = Tape::new();
        let net = bind(&tape, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut obs = Vec::new();
        let input = Dual::constant(tape.leaf(&[x], 1, 1));
        net.forward(input, Mode::Eval, &mut rng, None, &mut obs).unwrap().primal.value()[0]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let x = rng.gen_range(-1.0..1.0);
        let tape = Tape::new();
        let net = bind(&tape, &params);
        let mut fwd_rng = ChaCha8Rng::seed_from_u64(0);
        let mut obs = Vec::new();
        let input = Dual::with_tangent(tape.leaf(&[x], 1, 1), tape.leaf(&[1.0], 1, 1));
        let y = net.forward(input, Mode::Eval, &mut fwd_rng, None, &mut obs).unwrap();
        let got = y.tangent_or_zero().value()[0];
        let h = 1e-5;
        let fd = (eval(x + h) - eval(x - h)) / (2.0 * h);
        let rel = (got - fd).abs() / 1.0f64.max(got.abs());
        assert!(rel < 1e-4, "at x = {x}: tangent {got}, fd {fd}");
    }
}

#[test]
fn ode_loss_normalizes_by_batch_and_dimension() {
    let tape = Tape::new();
    let e = tape.leaf(&[1.0, 1.0, 1.0, 1.0], 2, 2);
    assert_eq!(loss_ode(e, 2).value(), vec![1.0]);
    // quadratic in the residual scale
    let e2 = tape.leaf(&[2.0, 2.0, 2.0, 2.0], 2, 2);
    assert_eq!(loss_ode(e2, 2).value(), vec![4.0]);
}

#[test]
fn divergence_of_a_constant_matrix_field_is_its_trace() {
    // A constant ⇒ ∂A/∂u = 0 ⇒ div(A·u) = Σ A_ii over embedded coordinates
    let a = [1.5, 0.3, 0.2, -0.5];
    let params = constant_net(2, &a);
    let div = divergence(&params, &[0.4, -0.8], &[1.0, 1.0], 2).unwrap();
    assert_eq!(div, 1.0);

    let identity = constant_net(2, &[1.0, 0.0, 0.0, 1.0]);
    let div = divergence(&identity, &[0.1, 0.2], &[1.0, 1.0], 2).unwrap();
    assert_eq!(div, 2.0);
}

#[test]
fn embedded_divergence_ignores_masked_coordinates() {
    // with d = 1 only A_00 contributes from a constant matrix
    let a = [1.5, 0.3, 0.2, -0.5];
    let params = constant_net(2, &a);
    let div = divergence(&params, &[0.4, -0.8], &[1.0, 0.0], 1).unwrap();
    assert_eq!(div, 1.5);
}

#[test]
fn divergence_matches_finite_differences_of_the_learned_field() {
    let m = 3;
    let spec = NetworkSpec::new(m, m * m, 1, 12, OutputActivation::Tanh, 0.0);
    let params = init_network(&spec, &mut ChaCha8Rng::seed_from_u64(77));
    for (w, d) in [([1.0, 1.0, 1.0], 3usize), ([1.0, 1.0, 0.0], 2)] {
        let field = learned_field(&params, &w);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let u: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = divergence(&params, &u, &w, d).unwrap();
            let h = 1e-5;
            let mut fd = 0.0;
            for i in 0..d {
                let mut up = u.clone();
                let mut dn = u.clone();
                up[i] += h;
                dn[i] -= h;
                fd += (field(&up)[i] - field(&dn)[i]) / (2.0 * h);
            }
            let rel = (got - fd).abs() / 1.0f64.max(got.abs());
            assert!(rel < 1e-4, "divergence {got} vs fd {fd}");
        }
    }
}

#[test]
fn divergence_batch_handles_many_states_at_once() {
    let m = 2;
    let spec = NetworkSpec::new(m, m * m, 1, 8, OutputActivation::Tanh, 0.0);
    let params = init_network(&spec, &mut ChaCha8Rng::seed_from_u64(13));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let states = random_states(&mut rng, 5, m);

    let tape = Tape::new();
    let net = bind(&tape, &params);
    let leaf = tape.leaf(&states, 5, m);
    let mut obs = Vec::new();
    let batch = divergence_batch(&net, leaf, &[1.0, 1.0], 2, Mode::Eval, &mut rng, &mut obs)
        .unwrap()
        .value();
    assert_eq!(batch.len(), 5);
    for (i, &b) in batch.iter().enumerate() {
        let single = divergence(&params, &states[i * m..(i + 1) * m], &[1.0, 1.0], 2).unwrap();
        assert_eq!(b, single, "row {i}");
    }
}

#[test]
fn divergence_penalty_only_counts_expansion() {
    let tape = Tape::new();
    let negative = tape.leaf(&[-3.0, -0.1, -7.5], 3, 1);
    assert_eq!(loss_div(negative, 1).value(), vec![0.0]);
    let single = tape.leaf(&[1.0], 1, 1);
    assert_eq!(loss_div(single, 1).value(), vec![1.0]);
    let mixed = tape.leaf(&[-2.0, 3.0], 2, 1);
    assert_eq!(loss_div(mixed, 1).value(), vec![4.5]);
}

#[test]
fn forecast_of_pure_decay_matches_the_runge_kutta_polynomial() {
    let params = constant_net(1, &[-1.0]);
    let states = forecast(&params, &[1.0], &[1.0], 0.1, 1).unwrap();
    assert_eq!(states.len(), 2);
    // one RK4 step of u' = −u from 1: 1 − h + h²/2 − h³/6 + h⁴/24
    assert!((states[1][0] - 0.9048375).abs() < 1e-9);
    // the learned constant field and a hand-written closure integrate identically
    let oracle = integrate_field(&|u: &[f64]| vec![-u[0]], &[1.0], 0.1, 1).unwrap();
    assert_eq!(states, oracle);
}

#[test]
fn forecast_of_zero_dynamics_is_frozen() {
    let params = constant_net(2, &[0.0; 4]);
    let u0 = [0.3, -0.9];
    let states = forecast(&params, &[1.0, 1.0], &u0, 0.05, 10).unwrap();
    for s in &states {
        assert_eq!(s.as_slice(), &u0);
    }
}

#[test]
fn masked_coordinates_stay_frozen_during_forecasts() {
    let m = 2;
    let spec = NetworkSpec::new(m, m * m, 1, 8, OutputActivation::Tanh, 0.0);
    let params = init_network(&spec, &mut ChaCha8Rng::seed_from_u64(21));
    let u0 = [0.5, -0.25];
    let states = forecast(&params, &[1.0, 0.0], &u0, 0.02, 25).unwrap();
    for s in &states {
        assert_eq!(s[1], u0[1]);
    }
    assert_ne!(states.last().unwrap()[0], u0[0]);
}

#[test]
fn non_finite_states_surface_as_integration_failures() {
    let params = constant_net(1, &[-1.0]);
    let field = learned_field(&params, &[1.0]);
    assert!(field(&[f64::NAN])[0].is_nan());
    let run = forecast(&params, &[1.0], &[f64::NAN], 0.1, 3);
    assert!(matches!(run, Err(Error::Numeric(_))));
}

#[test]
fn delay_measurement_reads_the_first_coordinate() {
    let states = vec![vec![1.0, 2.0, 3.0], vec![-0.5, 0.0, 0.25]];
    let out = measure(&states, MeasureMode::DelayIdentity, None).unwrap();
    assert_eq!(out, vec![1.0, -0.5]);
}

#[test]
fn identity_decoder_measurement_equals_delay_measurement() {
    let m = 3;
    let spec = NetworkSpec::new(m, m, 1, m, OutputActivation::Linear, 0.0);
    let mut params = init_network(&spec, &mut ChaCha8Rng::seed_from_u64(6));
    params.entry_weight.iter_mut().for_each(|v| *v = 0.0);
    params.out_weight.iter_mut().for_each(|v| *v = 0.0);
    for sl in params.sublayers.iter_mut() {
        sl.weight.iter_mut().for_each(|v| *v = 0.0);
    }
    for i in 0..m {
        params.entry_weight[i * m + i] = 1.0;
        params.out_weight[i * m + i] = 1.0;
    }
    let states = vec![vec![0.4, -0.8, 0.1], vec![-0.2, 0.6, 0.9]];
    let decoded = measure(&states, MeasureMode::Decoder, Some(&params)).unwrap();
    let delay = measure(&states, MeasureMode::DelayIdentity, None).unwrap();
    assert_eq!(decoded, delay);
}

#[test]
fn bounded_decoder_measurements_stay_in_range() {
    let m = 2;
    let spec = NetworkSpec::new(m, m, 2, 8, OutputActivation::Tanh, 0.0);
    let params = init_network(&spec, &mut ChaCha8Rng::seed_from_u64(15));
    let states: Vec<Vec<f64>> = (0..20)
        .map(|i| vec![(i as f64) * 3.0 - 30.0, (i as f64) * -2.0 + 20.0])
        .collect();
    let out = measure(&states, MeasureMode::Decoder, Some(&params)).unwrap();
    assert!(out.iter().all(|v| v.abs() <= 1.0));
}
