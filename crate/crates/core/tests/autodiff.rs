mod common;

use common::{build_program, fd_program_grads, random_leaves, random_program, rel_err};
use lode_core::autodiff::{concat_cols, jvp, Dual64, Tape};
use lode_core::data::{lorenz_rhs, LorenzParams};
use lode_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn square_gradient_by_hand() {
    let tape = Tape::new();
    let x = tape.scalar(3.0);
    let g = tape.backward(x.square()).unwrap();
    assert_eq!(g.scalar(x), 6.0);
}

#[test]
fn tanh_gradient_at_zero() {
    let tape = Tape::new();
    let x = tape.scalar(0.0);
    let g = tape.backward(x.tanh()).unwrap();
    assert_eq!(g.scalar(x), 1.0);
}

#[test]
fn product_plus_linear_gradients_by_hand() {
    // f(x, y) = x·y + y at (2, 5) → ∂f/∂x = 5, ∂f/∂y = 3
    let tape = Tape::new();
    let x = tape.scalar(2.0);
    let y = tape.scalar(5.0);
    let f = x * y + y;
    let g = tape.backward(f).unwrap();
    assert_eq!(g.scalar(x), 5.0);
    assert_eq!(g.scalar(y), 3.0);
}

#[test]
fn backward_rejects_matrix_root() {
    let tape = Tape::new();
    let x = tape.leaf(&[1.0, 2.0, 3.0, 4.0], 2, 2);
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
}

#[test]
fn ceil_stop_grad_blocks_adjoints() {
    // f(x) = ceil(x)·x with the ceil gradient-stopped: only the mask path
    // carries an adjoint, so ∂f/∂x = ceil(x).
    let tape = Tape::new();
    let x = tape.scalar(1.5);
    let f = x.ceil_stop_grad() * x;
    assert_eq!(f.scalar_value(), 3.0);
    let g = tape.backward(f).unwrap();
    assert_eq!(g.scalar(x), 2.0);
}

/// Reverse gradients vs central differences for one program at one point.
fn assert_program_grads(prog: &common::GraphProgram, leaves: &[Vec<f64>], tol: f64) {
    let tape = Tape::new();
    let (root, vars) = build_program(&tape, prog, leaves);
    let grads = tape.backward(root).unwrap();
    let fd = fd_program_grads(prog, leaves, 1e-5);
    for (var, fd_grad) in vars.iter().zip(&fd) {
        for (&a, &b) in grads.get(*var).iter().zip(fd_grad) {
            assert!(
                rel_err(a, b) < tol,
                "gradient mismatch: reverse {a} vs central difference {b}\nprogram: {prog:?}"
            );
        }
    }
}

#[test]
fn every_primitive_matches_central_differences() {
    // One tiny program per primitive, checked at a fixed generic point.
    use common::GInstr::*;
    let progs: Vec<Vec<common::GInstr>> = vec![
        vec![Add(0, 1)],
        vec![Sub(0, 1)],
        vec![Mul(0, 1)],
        vec![MatMul(0, 1)],
        vec![MatMulTn(0, 1)],
        vec![Tanh(0)],
        vec![Neg(0)],
        vec![Square(0)],
        vec![Scale(0)],
        vec![AddConst(0)],
        vec![AddRow(0)],
        vec![SubRow(0)],
        vec![MulRow(0)],
        vec![Mul(0, 0)], // repeated operand: adjoints must accumulate
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let leaves = random_leaves(&mut rng);
    for instrs in progs {
        for mean_first in [false, true] {
            let prog = common::GraphProgram { instrs: instrs.clone(), mean_first };
            assert_program_grads(&prog, &leaves, 1e-5);
        }
    }
}

#[test]
fn relu_sqrt_index_bmv_match_central_differences() {
    // Primitives excluded from random composites: relu (checked away from
    // its kink), sqrt (needs positive input), index, and bmv.
    let tape = Tape::new();
    let x = tape.leaf(&[0.7, -1.3, 2.1, -0.4], 2, 2);
    let root = x.relu().sum_all() + x.square().add_const(0.5).sqrt().sum_all() + x.index(1, 0);
    let g = tape.backward(root).unwrap();

    let eval = |v: &[f64]| -> f64 {
        let t = Tape::new();
        let x = t.leaf(v, 2, 2);
        (x.relu().sum_all() + x.square().add_const(0.5).sqrt().sum_all() + x.index(1, 0))
            .scalar_value()
    };
    let base = [0.7, -1.3, 2.1, -0.4];
    for k in 0..4 {
        let mut p = base;
        p[k] += 1e-5;
        let mut m = base;
        m[k] -= 1e-5;
        let fd = (eval(&p) - eval(&m)) / 2e-5;
        assert!(rel_err(g.get(x)[k], fd) < 1e-5);
    }

    // bmv: rows of `a` are flattened 2×2 matrices applied to rows of `u`.
    let a_val = [0.3, -0.8, 1.1, 0.5, -0.2, 0.9, 0.4, -1.5];
    let u_val = [1.2, -0.7, 0.3, 1.9];
    let tape = Tape::new();
    let a = tape.leaf(&a_val, 2, 4);
    let u = tape.leaf(&u_val, 2, 2);
    let root = a.bmv(u).square().sum_all();
    let g = tape.backward(root).unwrap();
    let eval = |av: &[f64], uv: &[f64]| -> f64 {
        let t = Tape::new();
        let a = t.leaf(av, 2, 4);
        let u = t.leaf(uv, 2, 2);
        a.bmv(u).square().sum_all().scalar_value()
    };
    for k in 0..8 {
        let (mut p, mut m) = (a_val, a_val);
        p[k] += 1e-5;
        m[k] -= 1e-5;
        let fd = (eval(&p, &u_val) - eval(&m, &u_val)) / 2e-5;
        assert!(rel_err(g.get(a)[k], fd) < 1e-5, "bmv grad wrt a[{k}]");
    }
    for k in 0..4 {
        let (mut p, mut m) = (u_val, u_val);
        p[k] += 1e-5;
        m[k] -= 1e-5;
        let fd = (eval(&a_val, &p) - eval(&a_val, &m)) / 2e-5;
        assert!(rel_err(g.get(u)[k], fd) < 1e-5, "bmv grad wrt u[{k}]");
    }
}

#[test]
fn concat_cols_routes_gradients_to_both_parts() {
    let tape = Tape::new();
    let a = tape.leaf(&[1.0, 2.0], 2, 1);
    let b = tape.leaf(&[3.0, 4.0], 2, 1);
    let c = concat_cols(&[a, b]);
    assert_eq!(c.value(), vec![1.0, 3.0, 2.0, 4.0]);
    let root = c.mul_row_const(&[2.0, 5.0]).sum_all();
    let g = tape.backward(root).unwrap();
    assert_eq!(g.get(a), &[2.0, 2.0]);
    assert_eq!(g.get(b), &[5.0, 5.0]);
}

#[test]
fn random_composite_graphs_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..200 {
        let prog = random_program(&mut rng);
        let leaves = random_leaves(&mut rng);
        assert_program_grads(&prog, &leaves, 1e-5);
    }
}

#[test]
fn jvp_examples_by_hand() {
    // f(x) = [x₁², x₂] at (3, 1), direction (1, 0) → (6, 0)
    let f = |x: &[Dual64]| vec![x[0] * x[0], x[1]];
    let t = jvp(f, &[3.0, 1.0], &[1.0, 0.0]).unwrap();
    assert_eq!(t, vec![6.0, 0.0]);

    // zero direction → zero tangent for any f
    let g = |x: &[Dual64]| vec![x[0].tanh() * x[1].exp(), x[1].sin() + x[0]];
    let t = jvp(g, &[0.3, -0.7], &[0.0, 0.0]).unwrap();
    assert_eq!(t, vec![0.0, 0.0]);

    // Lorenz right-hand side at (1,1,1), direction e₁ → Jacobian column 1 =
    // (−σ, ρ−z, y) = (−10, 27, 1)
    let p = LorenzParams::default();
    let lorenz = |x: &[Dual64]| lorenz_rhs(&[x[0], x[1], x[2]], &p).to_vec();
    let t = jvp(lorenz, &[1.0, 1.0, 1.0], &[1.0, 0.0, 0.0]).unwrap();
    assert!((t[0] + 10.0).abs() < 1e-12);
    assert!((t[1] - 27.0).abs() < 1e-12);
    assert!((t[2] - 1.0).abs() < 1e-12);
}

#[test]
fn jvp_rejects_dimension_mismatch() {
    let f = |x: &[Dual64]| vec![x[0]];
    assert!(matches!(jvp(f, &[1.0, 2.0], &[1.0]), Err(Error::Usage(_))));
}

#[test]
fn jvp_is_linear_in_the_direction() {
    let p = LorenzParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = |x: &[Dual64]| {
        let r = lorenz_rhs(&[x[0], x[1], x[2]], &p);
        vec![r[0].tanh(), r[1] * x[0], r[2] + x[1].sin()]
    };
    for _ in 0..50 {
        let point: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let combo: Vec<f64> = v.iter().zip(&w).map(|(&vi, &wi)| a * vi + b * wi).collect();
        let lhs = jvp(f, &point, &combo).unwrap();
        let jv = jvp(f, &point, &v).unwrap();
        let jw = jvp(f, &point, &w).unwrap();
        for i in 0..3 {
            let rhs = a * jv[i] + b * jw[i];
            assert!((lhs[i] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }
}

#[test]
fn jvp_basis_sums_match_finite_difference_jacobian_rows() {
    let p = LorenzParams::default();
    let f = |x: &[Dual64]| lorenz_rhs(&[x[0], x[1], x[2]], &p).to_vec();
    let fp = |x: &[f64]| {
        lorenz_rhs(&[x[0], x[1], x[2]], &p).to_vec()
    };
    let point = [0.4, -1.1, 0.8];
    let h = 1e-5;
    for i in 0..3 {
        let mut forward_sum = 0.0;
        for j in 0..3 {
            let mut dir = [0.0; 3];
            dir[j] = 1.0;
            forward_sum += jvp(f, &point, &dir).unwrap()[i];
        }
        let mut fd_sum = 0.0;
        for j in 0..3 {
            let (mut pp, mut pm) = (point, point);
            pp[j] += h;
            pm[j] -= h;
            fd_sum += (fp(&pp)[i] - fp(&pm)[i]) / (2.0 * h);
        }
        assert!(rel_err(forward_sum, fd_sum) < 1e-5);
    }
}

#[test]
fn tangent_channel_nests_inside_reverse_mode() {
    // u(t) = tanh(w·t): the forward-mode tangent du/dt = w·(1 − tanh²(wt))
    // is itself a graph node, so reverse mode can differentiate it by w.
    use lode_core::autodiff::Dual;
    let (w0, t0) = (0.8, 0.6);
    let tape = Tape::new();
    let w = tape.leaf(&[w0], 1, 1);
    let t = tape.leaf(&[t0], 1, 1);
    let seed = tape.leaf(&[1.0], 1, 1);
    let u = Dual::with_tangent(t, seed).matmul_param(w).tanh();
    let dudt = u.tangent_or_zero();

    let th = (w0 * t0).tanh();
    let sech2 = 1.0 - th * th;
    assert!((dudt.scalar_value() - w0 * sech2).abs() < 1e-12);

    // ∂/∂w [w·sech²(wt)] = sech²(wt) − 2w·t·tanh(wt)·sech²(wt)
    let g = tape.backward(dudt).unwrap();
    let expect = sech2 - 2.0 * w0 * t0 * th * sech2;
    assert!(rel_err(g.get(w)[0], expect) < 1e-10);
}
