#![allow(dead_code)]

use lode_core::autodiff::{Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const GDIM: usize = 3;

/// One step of a randomly generated composite graph. Operands index the
/// value stack; every intermediate is GDIM×GDIM so any pair composes.
#[derive(Clone, Copy, Debug)]
pub enum GInstr {
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    MatMulTn(usize, usize),
    Tanh(usize),
    Neg(usize),
    Square(usize),
    Scale(usize),
    AddConst(usize),
    AddRow(usize),
    SubRow(usize),
    MulRow(usize),
}

#[derive(Clone, Debug)]
pub struct GraphProgram {
    pub instrs: Vec<GInstr>,
    /// Reduce via mean_rows before the final sum.
    pub mean_first: bool,
}

/// Leaves: two GDIM×GDIM matrices and one 1×GDIM row, all entries in [−2, 2].
pub fn random_leaves(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    };
    vec![draw(rng, GDIM * GDIM), draw(rng, GDIM * GDIM), draw(rng, GDIM)]
}

pub fn random_program(rng: &mut ChaCha8Rng) -> GraphProgram {
    let depth = rng.gen_range(1..=8usize);
    let mut instrs = Vec::with_capacity(depth);
    let mut stack = 2usize; // matrix leaves on the stack; the row leaf is separate
    for _ in 0..depth {
        let a = rng.gen_range(0..stack);
        let b = rng.gen_range(0..stack);
        let instr = match rng.gen_range(0..13u32) {
            0 => GInstr::Add(a, b),
            1 => GInstr::Sub(a, b),
            2 => GInstr::Mul(a, b),
            3 => GInstr::MatMul(a, b),
            4 => GInstr::MatMulTn(a, b),
            5 => GInstr::Tanh(a),
            6 => GInstr::Neg(a),
            7 => GInstr::Square(a),
            8 => GInstr::Scale(a),
            9 => GInstr::AddConst(a),
            10 => GInstr::AddRow(a),
            11 => GInstr::SubRow(a),
            _ => GInstr::MulRow(a),
        };
        instrs.push(instr);
        stack += 1;
    }
    GraphProgram { instrs, mean_first: rng.gen() }
}

/// Materialize the program on a tape. Returns the scalar root and the leaf
/// vars in the same order as `leaves`.
pub fn build_program<'t>(
    tape: &'t Tape,
    prog: &GraphProgram,
    leaves: &[Vec<f64>],
) -> (Var<'t>, Vec<Var<'t>>) {
    let m0 = tape.leaf(&leaves[0], GDIM, GDIM);
    let m1 = tape.leaf(&leaves[1], GDIM, GDIM);
    let row = tape.leaf(&leaves[2], 1, GDIM);
    let mut stack = vec![m0, m1];
    for instr in &prog.instrs {
        let v = match *instr {
            GInstr::Add(a, b) => stack[a] + stack[b],
            GInstr::Sub(a, b) => stack[a] - stack[b],
            GInstr::Mul(a, b) => stack[a] * stack[b],
            // matmuls are damped so depth-8 chains stay well-conditioned
            GInstr::MatMul(a, b) => stack[a].matmul(stack[b]).scale(0.3),
            GInstr::MatMulTn(a, b) => stack[a].matmul_tn(stack[b]).scale(0.3),
            GInstr::Tanh(a) => stack[a].tanh(),
            GInstr::Neg(a) => -stack[a],
            GInstr::Square(a) => stack[a].tanh().square(),
            GInstr::Scale(a) => stack[a].scale(0.7),
            GInstr::AddConst(a) => stack[a].add_const(0.4),
            GInstr::AddRow(a) => stack[a].add_row(row),
            GInstr::SubRow(a) => stack[a].sub_row(row),
            GInstr::MulRow(a) => stack[a].mul_row(row),
        };
        stack.push(v);
    }
    let last = *stack.last().unwrap();
    let root = if prog.mean_first { last.mean_rows().sum_all() } else { last.sum_all() };
    (root, vec![m0, m1, row])
}

pub fn eval_program(prog: &GraphProgram, leaves: &[Vec<f64>]) -> f64 {
    let tape = Tape::new();
    let (root, _) = build_program(&tape, prog, leaves);
    root.scalar_value()
}

/// Relative error with an absolute floor at 1: |a−b| / max(1, |a|, |b|).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// Central finite differences of a scalar program over every leaf entry.
pub fn fd_program_grads(prog: &GraphProgram, leaves: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(leaves.len());
    for li in 0..leaves.len() {
        let mut g = vec![0.0; leaves[li].len()];
        for (k, slot) in g.iter_mut().enumerate() {
            let mut plus = leaves.to_vec();
            plus[li][k] += h;
            let mut minus = leaves.to_vec();
            minus[li][k] -= h;
            *slot = (eval_program(prog, &plus) - eval_program(prog, &minus)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}
