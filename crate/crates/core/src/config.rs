//! Experiment configuration: one flat struct covering data generation,
//! embedding, networks, training, and evaluation, loadable from TOML or
//! JSON. Defaults encode the full-scale protocol; desk runs override sizes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{DelayConfig, FnnThresholds};
use crate::error::{Error, Result};
use crate::training::{AdamParams, Phase, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    // -- data generation ---------------------------------------------------
    pub ic: [f64; 3],
    pub dt: f64,
    /// Integration steps; the series has steps+1 samples.
    pub steps: usize,
    /// Noise level as a fraction of the signal's standard deviation.
    pub eta: f64,
    pub noise_seed: u64,
    /// Train/validation/test split boundaries (times).
    pub train_end: f64,
    pub val_end: f64,

    // -- embedding ----------------------------------------------------------
    pub m: usize,
    pub tau: f64,
    /// Mask threshold ε on the smoothed FNN fractions.
    pub epsilon: f64,
    /// Mask moving-average rate α; 0 freezes the mask at full dimension.
    pub alpha: f64,
    pub r_tol: f64,
    pub a_tol: f64,
    /// Row cap for the epoch-boundary neighbor scan.
    pub fnn_cap: usize,

    // -- networks -----------------------------------------------------------
    pub hidden_width: usize,
    pub fit_blocks: usize,
    pub coder_blocks: usize,
    pub dropout: f64,
    pub corrupt_sigma: f64,

    // -- training -----------------------------------------------------------
    /// Segment count S.
    pub segments: usize,
    /// Sample count M per segment visit.
    pub batch: usize,
    pub lambda_u: f64,
    pub lambda_e1: f64,
    pub lambda_e2: f64,
    pub lambda_f: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Segment updates in the delay-pretraining phase.
    pub phase1_iters: usize,
    /// Segment updates in the second phase (see `mode`).
    pub phase2_iters: usize,
    pub val_every: usize,
    pub init_seed: u64,
    pub train_seed: u64,
    /// `autoencoder` switches phase two to the masked encoder; `delay`
    /// trains the method of delay throughout.
    pub mode: Phase,

    // -- evaluation ---------------------------------------------------------
    /// Window-fit updates when inferring a state from fresh data.
    pub infer_iters: usize,
    pub horizon_tol: f64,

    // -- paths (optional; commands take flags that override these) ----------
    pub data_path: Option<PathBuf>,
    pub clean_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            ic: [0.0, 1.0, 1.05],
            dt: 0.05,
            steps: 10_200,
            eta: 0.0,
            noise_seed: 7,
            train_end: 490.0,
            val_end: 500.0,
            m: 6,
            tau: 0.1,
            epsilon: 0.01,
            alpha: 0.1,
            r_tol: 10.0,
            a_tol: 2.0,
            fnn_cap: 4096,
            hidden_width: 32,
            fit_blocks: 3,
            coder_blocks: 5,
            dropout: 0.1,
            corrupt_sigma: 0.5,
            segments: 128,
            batch: 64,
            lambda_u: 1.0,
            lambda_e1: 1.0,
            lambda_e2: 1.0,
            lambda_f: 1.0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            phase1_iters: 15_000,
            phase2_iters: 15_000,
            val_every: 10,
            init_seed: 1,
            train_seed: 2,
            mode: Phase::Autoencoder,
            infer_iters: 300,
            horizon_tol: 0.2,
            data_path: None,
            clean_path: None,
            checkpoint_path: None,
            metrics_path: None,
        }
    }
}

impl ExperimentConfig {
    // Negated comparisons are deliberate: NaN must fail validation.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    /// The subset of checks that apply to series generation alone, with no
    /// training split or network involved.
    pub fn validate_series(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.steps < 2 {
            return bad("steps must be at least 2");
        }
        if self.eta < 0.0 {
            return bad("eta must be nonnegative");
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_series()?;
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.m < 2 {
            return bad("m must be at least 2");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.segments < 1 || self.batch < 2 {
            return bad("segments must be >= 1 and batch >= 2");
        }
        if self.hidden_width < 1 || self.fit_blocks < 1 || self.coder_blocks < 1 {
            return bad("network sizes must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.val_every < 1 {
            return bad("val_every must be at least 1");
        }
        if !(self.train_end < self.val_end) {
            return bad("train_end must precede val_end");
        }
        let span = self.steps as f64 * self.dt;
        if self.val_end >= span {
            return bad("val_end must leave room for a test split");
        }
        if self.fnn_cap < 2 {
            return bad("fnn_cap must be at least 2");
        }
        Ok(())
    }

    pub fn delay(&self) -> DelayConfig {
        DelayConfig::new(self.m, self.tau)
    }

    pub fn thresholds(&self) -> FnnThresholds {
        FnnThresholds { r_tol: self.r_tol, a_tol: self.a_tol }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            delay: self.delay(),
            batch: self.batch,
            hidden_width: self.hidden_width,
            fit_blocks: self.fit_blocks,
            coder_blocks: self.coder_blocks,
            dropout: self.dropout,
            corrupt_sigma: self.corrupt_sigma,
            lambda_u: self.lambda_u,
            lambda_e1: self.lambda_e1,
            lambda_e2: self.lambda_e2,
            lambda_f: self.lambda_f,
            alpha: self.alpha,
            epsilon: self.epsilon,
            fnn_cap: self.fnn_cap,
            adam: AdamParams {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.adam_eps,
            },
            phase1_iters: self.phase1_iters,
            phase2_iters: self.phase2_iters,
            val_every: self.val_every,
            init_seed: self.init_seed,
            train_seed: self.train_seed,
            mode: self.mode,
        }
    }
}

/// Parse TOML unless the extension says `.json`.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: ExperimentConfig = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let text = if path.extension().is_some_and(|e| e == "json") {
        serde_json::to_string_pretty(cfg)?
    } else {
        toml::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?
    };
    std::fs::write(path, text)?;
    Ok(())
}

/// Short hex digest of the canonical (JSON) rendering, stamped into output
/// headers so artifacts are traceable to their configuration.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let canonical = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    let mut hex = String::with_capacity(16);
    for b in &digest[..8] {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}
