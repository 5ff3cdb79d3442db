//! Residual MLPs with batch normalization, tanh activations, dropout, and
//! optional input corruption. One forward implementation serves both plain
//! evaluation and graph construction (values are eager on the tape).
//!
//! Batch statistics in train mode are detached: normalization uses the
//! current batch mean/variance as constants, so gradients flow only through
//! the normalized activations, the scale, and the shift. Running statistics
//! are updated outside the graph and serve eval mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual, Tape, Var};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Tanh,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub blocks: usize,
    pub width: usize,
    pub output_activation: OutputActivation,
    pub dropout_rate: f64,
}

impl NetworkSpec {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        blocks: usize,
        width: usize,
        output_activation: OutputActivation,
        dropout_rate: f64,
    ) -> Self {
        assert!(width > 0 && blocks >= 1, "invalid network spec");
        assert!((0.0..1.0).contains(&dropout_rate), "dropout rate must be in [0,1)");
        NetworkSpec { input_dim, output_dim, blocks, width, output_activation, dropout_rate }
    }
}

/// One sub-layer: batch-norm followed by an affine map (tanh applied by the
/// caller). Running stats feed eval mode only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SublayerParams {
    pub bn_scale: Vec<f64>,
    pub bn_shift: Vec<f64>,
    pub bn_mean: Vec<f64>,
    pub bn_var: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub spec: NetworkSpec,
    pub entry_weight: Vec<f64>,
    pub entry_bias: Vec<f64>,
    /// blocks × 2 sub-layers.
    pub sublayers: Vec<SublayerParams>,
    pub out_weight: Vec<f64>,
    pub out_bias: Vec<f64>,
}

/// Zero-mean normal init scaled by fan-in; batch-norm starts as identity
/// with running stats (0, 1).
pub fn init_network(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> NetworkParams {
    let w = spec.width;
    let mut draw = |fan_in: usize, n: usize| -> Vec<f64> {
        let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
        (0..n).map(|_| dist.sample(rng)).collect()
    };
    let entry_weight = draw(spec.input_dim, spec.input_dim * w);
    let entry_bias = vec![0.0; w];
    let mut sublayers = Vec::with_capacity(spec.blocks * 2);
    for _ in 0..spec.blocks * 2 {
        sublayers.push(SublayerParams {
            bn_scale: vec![1.0; w],
            bn_shift: vec![0.0; w],
            bn_mean: vec![0.0; w],
            bn_var: vec![1.0; w],
            weight: draw(w, w * w),
            bias: vec![0.0; w],
        });
    }
    let out_weight = draw(w, w * spec.output_dim);
    let out_bias = vec![0.0; spec.output_dim];
    NetworkParams { spec: spec.clone(), entry_weight, entry_bias, sublayers, out_weight, out_bias }
}

impl NetworkParams {
    /// Trainable arrays in canonical order, with checkpoint paths.
    pub fn visit_trainable<'a>(&'a self, f: &mut impl FnMut(String, &'a Vec<f64>)) {
        f("entry/weight".into(), &self.entry_weight);
        f("entry/bias".into(), &self.entry_bias);
        for (i, sl) in self.sublayers.iter().enumerate() {
            let p = format!("block{}/sub{}", i / 2, i % 2);
            f(format!("{p}/bn_scale"), &sl.bn_scale);
            f(format!("{p}/bn_shift"), &sl.bn_shift);
            f(format!("{p}/weight"), &sl.weight);
            f(format!("{p}/bias"), &sl.bias);
        }
        f("out/weight".into(), &self.out_weight);
        f("out/bias".into(), &self.out_bias);
    }

    pub fn visit_trainable_mut(&mut self, f: &mut impl FnMut(&mut Vec<f64>)) {
        f(&mut self.entry_weight);
        f(&mut self.entry_bias);
        for sl in self.sublayers.iter_mut() {
            f(&mut sl.bn_scale);
            f(&mut sl.bn_shift);
            f(&mut sl.weight);
            f(&mut sl.bias);
        }
        f(&mut self.out_weight);
        f(&mut self.out_bias);
    }

    pub fn trainable_len(&self) -> usize {
        let mut n = 0;
        self.visit_trainable(&mut |_, _| n += 1);
        n
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_trainable(&mut |_, v| n += v.len());
        n
    }

    /// All arrays including running statistics (checkpoint contents).
    pub fn visit_all<'a>(&'a self, f: &mut impl FnMut(String, &'a Vec<f64>)) {
        f("entry/weight".into(), &self.entry_weight);
        f("entry/bias".into(), &self.entry_bias);
        for (i, sl) in self.sublayers.iter().enumerate() {
            let p = format!("block{}/sub{}", i / 2, i % 2);
            f(format!("{p}/bn_scale"), &sl.bn_scale);
            f(format!("{p}/bn_shift"), &sl.bn_shift);
            f(format!("{p}/bn_mean"), &sl.bn_mean);
            f(format!("{p}/bn_var"), &sl.bn_var);
            f(format!("{p}/weight"), &sl.weight);
            f(format!("{p}/bias"), &sl.bias);
        }
        f("out/weight".into(), &self.out_weight);
        f("out/bias".into(), &self.out_bias);
    }

    /// Blend observed batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, obs: &[BnObservation]) {
        for o in obs {
            let sl = &mut self.sublayers[o.sublayer];
            for j in 0..sl.bn_mean.len() {
                sl.bn_mean[j] = (1.0 - BN_MOMENTUM) * sl.bn_mean[j] + BN_MOMENTUM * o.mean[j];
                sl.bn_var[j] = (1.0 - BN_MOMENTUM) * sl.bn_var[j] + BN_MOMENTUM * o.var[j];
            }
        }
    }

    /// Checkpoint form: spec header plus a map from parameter path to the
    /// row-major array, covering running statistics as well.
    pub fn to_path_map(&self) -> serde_json::Value {
        let mut arrays = serde_json::Map::new();
        self.visit_all(&mut |path, v| {
            arrays.insert(path, serde_json::json!(v));
        });
        serde_json::json!({ "spec": self.spec, "arrays": arrays })
    }

    pub fn from_path_map(value: &serde_json::Value) -> Result<NetworkParams> {
        let spec: NetworkSpec = serde_json::from_value(
            value
                .get("spec")
                .ok_or_else(|| Error::Config("checkpoint network missing spec".into()))?
                .clone(),
        )?;
        let arrays = value
            .get("arrays")
            .and_then(|a| a.as_object())
            .ok_or_else(|| Error::Config("checkpoint network missing arrays".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = init_network(&spec, &mut rng);
        let mut missing: Option<String> = None;
        params.visit_all_mut(&mut |path, dst| {
            let Some(src) = arrays.get(&path).and_then(|a| a.as_array()) else {
                missing.get_or_insert(path);
                return;
            };
            if src.len() != dst.len() {
                missing.get_or_insert(format!("{path} (length {} != {})", src.len(), dst.len()));
                return;
            }
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s.as_f64().unwrap_or(f64::NAN);
            }
        });
        if let Some(path) = missing {
            return Err(Error::Config(format!("checkpoint array bad or absent: {path}")));
        }
        Ok(params)
    }

    fn visit_all_mut(&mut self, f: &mut impl FnMut(String, &mut Vec<f64>)) {
        f("entry/weight".into(), &mut self.entry_weight);
        f("entry/bias".into(), &mut self.entry_bias);
        for (i, sl) in self.sublayers.iter_mut().enumerate() {
            let p = format!("block{}/sub{}", i / 2, i % 2);
            f(format!("{p}/bn_scale"), &mut sl.bn_scale);
            f(format!("{p}/bn_shift"), &mut sl.bn_shift);
            f(format!("{p}/bn_mean"), &mut sl.bn_mean);
            f(format!("{p}/bn_var"), &mut sl.bn_var);
            f(format!("{p}/weight"), &mut sl.weight);
            f(format!("{p}/bias"), &mut sl.bias);
        }
        f("out/weight".into(), &mut self.out_weight);
        f("out/bias".into(), &mut self.out_bias);
    }
}

/// Batch statistics observed by one batch-norm application in train mode.
#[derive(Debug, Clone)]
pub struct BnObservation {
    pub sublayer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A network bound to a tape: one leaf per trainable array, shared across
/// every forward call on this tape so gradients accumulate over calls.
pub struct BoundNetwork<'t> {
    spec: NetworkSpec,
    leaves: Vec<Var<'t>>,
    /// Running stats snapshot for eval mode (per sub-layer).
    running: Vec<(Vec<f64>, Vec<f64>)>,
}

pub fn bind<'t>(tape: &'t Tape, params: &NetworkParams) -> BoundNetwork<'t> {
    let w = params.spec.width;
    let mut leaves = Vec::with_capacity(params.trainable_len());
    let mut shapes: Vec<(usize, usize)> = Vec::new();
    shapes.push((params.spec.input_dim, w));
    shapes.push((1, w));
    for _ in 0..params.sublayers.len() {
        shapes.push((1, w));
        shapes.push((1, w));
        shapes.push((w, w));
        shapes.push((1, w));
    }
    shapes.push((w, params.spec.output_dim));
    shapes.push((1, params.spec.output_dim));
    let mut k = 0;
    params.visit_trainable(&mut |_, arr| {
        let (r, c) = shapes[k];
        leaves.push(tape.leaf(arr, r, c));
        k += 1;
    });
    BoundNetwork {
        spec: params.spec.clone(),
        leaves,
        running: params.sublayers.iter().map(|s| (s.bn_mean.clone(), s.bn_var.clone())).collect(),
    }
}

impl<'t> BoundNetwork<'t> {
    pub fn leaves(&self) -> &[Var<'t>] {
        &self.leaves
    }

    fn leaf(&self, sub: Option<usize>, slot: usize) -> Var<'t> {
        // Layout per bind(): entry (0,1), then 4 per sub-layer, then out.
        match sub {
            None if slot < 2 => self.leaves[slot],
            None => self.leaves[self.leaves.len() - 4 + slot],
            Some(i) => self.leaves[2 + i * 4 + (slot - 2)],
        }
    }

    /// Batch-norm → affine for one sub-layer; returns pre-activation.
    fn sublayer(
        &self,
        x: Dual<'t>,
        sub: usize,
        mode: Mode,
        obs: &mut Vec<BnObservation>,
    ) -> Result<Dual<'t>> {
        let tape = tape_of(x);
        let width = self.spec.width;
        let (mean, var) = match mode {
            Mode::Train => {
                let v = x.primal.value();
                let rows = x.primal.rows();
                let mut mean = vec![0.0; width];
                let mut varv = vec![0.0; width];
                for j in 0..width {
                    let mut acc = 0.0;
                    for i in 0..rows {
                        acc += v[i * width + j];
                    }
                    mean[j] = acc / rows as f64;
                    let mut acc2 = 0.0;
                    for i in 0..rows {
                        let d = v[i * width + j] - mean[j];
                        acc2 += d * d;
                    }
                    varv[j] = acc2 / rows as f64;
                }
                if varv.contains(&0.0) {
                    return Err(Error::Usage(
                        "batch-norm variance degenerate (batch too small or constant)".into(),
                    ));
                }
                obs.push(BnObservation { sublayer: sub, mean: mean.clone(), var: varv.clone() });
                (mean, varv)
            }
            Mode::Eval => self.running[sub].clone(),
        };
        let inv_std: Vec<f64> = var.iter().map(|&s| 1.0 / (s + BN_EPSILON).sqrt()).collect();
        let offset: Vec<f64> = mean.iter().zip(&inv_std).map(|(&m, &i)| -m * i).collect();
        let offset_leaf = tape.leaf(&offset, 1, width);
        let normalized = x.mul_row_const(&inv_std).add_row_param(offset_leaf);
        let scaled = normalized
            .mul_row_param(self.leaf(Some(sub), 2))
            .add_row_param(self.leaf(Some(sub), 3));
        Ok(scaled
            .matmul_param(self.leaf(Some(sub), 4))
            .add_row_param(self.leaf(Some(sub), 5)))
    }

    /// Residual block: x + tanh∘affine∘bn applied twice.
    pub fn residual_block(
        &self,
        x: Dual<'t>,
        block: usize,
        mode: Mode,
        obs: &mut Vec<BnObservation>,
    ) -> Result<Dual<'t>> {
        let h1 = self.sublayer(x, block * 2, mode, obs)?.tanh();
        let h2 = self.sublayer(h1, block * 2 + 1, mode, obs)?.tanh();
        Ok(x + h2)
    }

    /// Full forward pass. `corrupt_sigma` adds train-mode Gaussian input
    /// noise (denoising-encoder hook); dropout applies just before the
    /// output layer.
    pub fn forward(
        &self,
        x: Dual<'t>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        corrupt_sigma: Option<f64>,
        obs: &mut Vec<BnObservation>,
    ) -> Result<Dual<'t>> {
        let tape = tape_of(x);
        let rows = x.primal.rows();
        let cols = x.primal.cols();
        if rows == 0 {
            return Err(Error::Usage("mlp_forward: empty batch".into()));
        }
        if cols != self.spec.input_dim {
            return Err(Error::Usage(format!(
                "mlp_forward: input has {} columns, spec expects {}",
                cols, self.spec.input_dim
            )));
        }
        if let Some(bad) = x.primal.value().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "mlp_forward: non-finite input at flat index {bad}"
            )));
        }
        let mut h = x;
        if let (Mode::Train, Some(sigma)) = (mode, corrupt_sigma) {
            let normal = Normal::new(0.0, sigma).unwrap();
            let noise: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            let noise_leaf = tape.leaf(&noise, rows, cols);
            h = Dual { primal: h.primal + noise_leaf, tangent: h.tangent };
        }
        h = h.matmul_param(self.leaf(None, 0)).add_row_param(self.leaf(None, 1));
        for b in 0..self.spec.blocks {
            h = self.residual_block(h, b, mode, obs)?;
        }
        if mode == Mode::Train && self.spec.dropout_rate > 0.0 {
            let keep = 1.0 - self.spec.dropout_rate;
            let mask: Vec<f64> = (0..rows * self.spec.width)
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let mask_leaf = tape.leaf(&mask, rows, self.spec.width);
            h = h.mul_mask(mask_leaf);
        }
        h = h.matmul_param(self.leaf(None, 2)).add_row_param(self.leaf(None, 3));
        Ok(match self.spec.output_activation {
            OutputActivation::Tanh => h.tanh(),
            OutputActivation::Linear => h,
        })
    }
}

fn tape_of<'t>(x: Dual<'t>) -> &'t Tape {
    x.primal.tape()
}
