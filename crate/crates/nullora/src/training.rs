//! Desk-scale optimization harness: MSE loss, SGD/AdamW, a central
//! finite-difference gradient oracle, synthetic planted-null-space tasks and
//! the training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adapter::{AdapterError, AdapterLayer, GradientSet};
use crate::matrix::DenseMatrix;
use crate::numerics::{self, NumericsError, DEFAULT_TAU};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Default central-difference step for the gradient oracle.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("shape mismatch: {what}")]
    Shape { what: String },
    #[error("invalid config: {what}")]
    InvalidConfig { what: String },
    #[error("invalid task: {what}")]
    InvalidTask { what: String },
    #[error("training diverged at step {step}: loss={loss:e}, grad_norm={grad_norm:e}")]
    Diverged {
        step: usize,
        loss: f64,
        grad_norm: f64,
    },
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

/// Training hyperparameters. Defaults mirror the usual AdamW setup
/// (lr 1e-4, weight decay 0.05) with the scaling vector exempt from decay.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Training steps; one step is a full shuffled pass over the dataset
    /// (one optimizer update per minibatch).
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub seed: u64,
    pub decay_exempt_s: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 64,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.05,
            seed: 0,
            decay_exempt_s: true,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainingError> {
        if self.steps < 1 {
            return Err(TrainingError::InvalidConfig {
                what: "steps must be >= 1".into(),
            });
        }
        if self.batch_size < 1 {
            return Err(TrainingError::InvalidConfig {
                what: "batch_size must be >= 1".into(),
            });
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(TrainingError::InvalidConfig {
                what: "learning_rate must be > 0".into(),
            });
        }
        Ok(())
    }
}

/// Synthetic task whose target update lies exactly in the null space of the
/// synthesized weight, so a null-mode adapter can represent it exactly.
#[derive(Debug, Clone)]
pub struct PlantedTask {
    pub w0: DenseMatrix,
    pub delta_star: DenseMatrix,
    pub inputs: DenseMatrix,
    pub targets: DenseMatrix,
}

/// One logged training snapshot, evaluated on the full dataset.
#[derive(Debug, Clone, Copy)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub null_residual: f64,
    pub effective_rank: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub records: Vec<TrainRecord>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// CSV columns: step,loss,grad_norm,null_residual,effective_rank.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,loss,grad_norm,null_residual,effective_rank")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.step, r.loss, r.grad_norm, r.null_residual, r.effective_rank
            )?;
        }
        Ok(())
    }
}

/// Mean squared error over a batch of columns:
/// `loss = |Y - T|_F^2 / (2 batch)`, gradient `G = (Y - T) / batch`.
pub fn mse_loss(y: &DenseMatrix, t: &DenseMatrix) -> Result<(f64, DenseMatrix), TrainingError> {
    if y.rows() != t.rows() || y.cols() != t.cols() {
        return Err(TrainingError::Shape {
            what: format!(
                "prediction {}x{} vs target {}x{}",
                y.rows(),
                y.cols(),
                t.rows(),
                t.cols()
            ),
        });
    }
    let batch = y.cols() as f64;
    let diff = y.sub(t);
    let loss = diff.data().iter().map(|x| x * x).sum::<f64>() / (2.0 * batch);
    Ok((loss, diff.scale(1.0 / batch)))
}

/// Per-parameter optimizer state (first/second moments, step counter).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    t: u64,
    m_b: Vec<f64>,
    v_b: Vec<f64>,
    m_a: Vec<f64>,
    v_a: Vec<f64>,
    m_s: Vec<f64>,
    v_s: Vec<f64>,
}

impl OptimizerState {
    pub fn new(layer: &AdapterLayer) -> Self {
        let nb = layer.b().data().len();
        let na = layer.a().data().len();
        let ns = layer.s().len();
        Self {
            t: 0,
            m_b: vec![0.0; nb],
            v_b: vec![0.0; nb],
            m_a: vec![0.0; na],
            v_a: vec![0.0; na],
            m_s: vec![0.0; ns],
            v_s: vec![0.0; ns],
        }
    }
}

/// One optimizer step over the layer's trainables. SGD couples the decay
/// into the gradient; AdamW applies it decoupled. The scaling vector is
/// exempt from decay when `cfg.decay_exempt_s` is set.
pub fn optimizer_step(
    layer: &mut AdapterLayer,
    grads: &GradientSet,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) {
    let wd_s = if cfg.decay_exempt_s { 0.0 } else { cfg.weight_decay };
    let lr = cfg.learning_rate;
    let (b, a, s) = layer.trainables_mut();
    match cfg.optimizer {
        OptimizerKind::Sgd => {
            sgd_update(b.data_mut(), grads.db.data(), lr, cfg.weight_decay);
            sgd_update(a.data_mut(), grads.da.data(), lr, cfg.weight_decay);
            sgd_update(s, &grads.ds, lr, wd_s);
        }
        OptimizerKind::AdamW => {
            state.t += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
            adamw_update(
                b.data_mut(),
                grads.db.data(),
                &mut state.m_b,
                &mut state.v_b,
                lr,
                cfg.weight_decay,
                bc1,
                bc2,
            );
            adamw_update(
                a.data_mut(),
                grads.da.data(),
                &mut state.m_a,
                &mut state.v_a,
                lr,
                cfg.weight_decay,
                bc1,
                bc2,
            );
            adamw_update(s, &grads.ds, &mut state.m_s, &mut state.v_s, lr, wd_s, bc1, bc2);
        }
    }
}

fn sgd_update(params: &mut [f64], grads: &[f64], lr: f64, wd: f64) {
    debug_assert_eq!(params.len(), grads.len());
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * (g + wd * *p);
    }
}

#[allow(clippy::too_many_arguments)]
fn adamw_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    wd: f64,
    bc1: f64,
    bc2: f64,
) {
    debug_assert_eq!(params.len(), grads.len());
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        let p = params[i];
        params[i] = p - lr * m_hat / (v_hat.sqrt() + ADAM_EPS) - lr * wd * p;
    }
}

/// Central finite differences of `mse_loss(forward(X), T)` with respect to
/// every trainable scalar, one at a time. The oracle for `backward`.
pub fn fd_gradient(
    layer: &AdapterLayer,
    x: &DenseMatrix,
    t: &DenseMatrix,
    h: f64,
) -> Result<GradientSet, TrainingError> {
    assert!(h > 0.0, "fd step must be positive");
    let nb = layer.b().data().len();
    let na = layer.a().data().len();
    let ns = layer.s().len();
    let total = nb + na + ns;

    let eval = |idx: usize| -> Result<f64, TrainingError> {
        let mut plus = layer.clone();
        bump(&mut plus, idx, h);
        let (loss_plus, _) = mse_loss(&plus.forward(x)?, t)?;
        let mut minus = layer.clone();
        bump(&mut minus, idx, -h);
        let (loss_minus, _) = mse_loss(&minus.forward(x)?, t)?;
        Ok((loss_plus - loss_minus) / (2.0 * h))
    };

    #[cfg(feature = "parallel")]
    let flat: Result<Vec<f64>, TrainingError> = (0..total).into_par_iter().map(eval).collect();
    #[cfg(not(feature = "parallel"))]
    let flat: Result<Vec<f64>, TrainingError> = (0..total).map(eval).collect();
    let flat = flat?;

    Ok(GradientSet {
        db: DenseMatrix::new(layer.b().rows(), layer.b().cols(), flat[..nb].to_vec())
            .expect("fd shape"),
        da: DenseMatrix::new(layer.a().rows(), layer.a().cols(), flat[nb..nb + na].to_vec())
            .expect("fd shape"),
        ds: flat[nb + na..].to_vec(),
    })
}

fn bump(layer: &mut AdapterLayer, idx: usize, delta: f64) {
    let nb = layer.b().data().len();
    let na = layer.a().data().len();
    let (b, a, s) = layer.trainables_mut();
    if idx < nb {
        b.data_mut()[idx] += delta;
    } else if idx < nb + na {
        a.data_mut()[idx - nb] += delta;
    } else {
        s[idx - nb - na] += delta;
    }
}

/// Synthesizes a rank-deficient weight with singular values in [1, 10], a
/// target update lying exactly in its null spaces, and a Gaussian dataset
/// labeled by `(W0 + delta_star) X`. Deterministic per seed.
pub fn gen_planted_task(
    d_out: usize,
    d_in: usize,
    nullity: usize,
    n_samples: usize,
    seed: u64,
) -> Result<PlantedTask, TrainingError> {
    let min_dim = d_out.min(d_in);
    if nullity < 1 || nullity > min_dim {
        return Err(TrainingError::InvalidTask {
            what: format!("nullity {nullity} must be in 1..={min_dim} for {d_out}x{d_in}"),
        });
    }
    if n_samples < 1 {
        return Err(TrainingError::InvalidTask {
            what: "n_samples must be >= 1".into(),
        });
    }
    let rank = min_dim - nullity;
    let u1 = numerics::random_orthonormal(d_out, rank, numerics::derive_seed(seed, 1))?;
    let v1 = numerics::random_orthonormal(d_in, rank, numerics::derive_seed(seed, 2))?;
    let mut rng = ChaCha8Rng::seed_from_u64(numerics::derive_seed(seed, 3));
    let mut sigmas: Vec<f64> = (0..rank)
        .map(|_| 1.0 + 9.0 * rand::Rng::gen::<f64>(&mut rng))
        .collect();
    sigmas.sort_by(|x, y| y.total_cmp(x));
    let w0 = u1.scale_cols(&sigmas).matmul(&v1.t());

    // Exact null bases by construction: the orthonormal complements of the
    // range factors.
    let u_null = numerics::orthonormal_complement(&u1);
    let v_null = numerics::orthonormal_complement(&v1);
    let u_hat = u_null.select_cols(&(0..nullity).collect::<Vec<_>>());
    let v_hat = v_null.select_cols(&(0..nullity).collect::<Vec<_>>()).t();
    let coeff = numerics::gaussian_matrix(nullity, nullity, numerics::derive_seed(seed, 4), 1.0);
    let delta_star = u_hat.matmul(&coeff).matmul(&v_hat);

    let inputs = numerics::gaussian_matrix(d_in, n_samples, numerics::derive_seed(seed, 5), 1.0);
    let targets = w0.add(&delta_star).matmul(&inputs);
    Ok(PlantedTask {
        w0,
        delta_star,
        inputs,
        targets,
    })
}

/// Runs `cfg.steps` training steps on the layer, mutating it in place. One
/// step is a full pass over the dataset: a freshly seeded shuffle followed by
/// one optimizer update per minibatch. Logged snapshots (step 0, every
/// `log_every`, final step) are evaluated on the full dataset.
pub fn train(
    layer: &mut AdapterLayer,
    inputs: &DenseMatrix,
    targets: &DenseMatrix,
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainingError> {
    cfg.validate()?;
    if inputs.rows() != layer.d_in() || targets.rows() != layer.d_out() {
        return Err(TrainingError::Shape {
            what: format!(
                "layer {}x{} vs task inputs {} rows / targets {} rows",
                layer.d_out(),
                layer.d_in(),
                inputs.rows(),
                targets.rows()
            ),
        });
    }
    if inputs.cols() != targets.cols() || inputs.cols() == 0 {
        return Err(TrainingError::Shape {
            what: format!(
                "inputs have {} samples, targets {}",
                inputs.cols(),
                targets.cols()
            ),
        });
    }

    let n = inputs.cols();
    let mut history = TrainHistory::default();
    history.records.push(snapshot(layer, inputs, targets, 0)?);

    let mut state = OptimizerState::new(layer);
    let mut rng = ChaCha8Rng::seed_from_u64(numerics::derive_seed(cfg.seed, 0xB47C));
    let mut order: Vec<usize> = (0..n).collect();
    for step in 1..=cfg.steps {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.min(n)) {
            let xb = inputs.select_cols(batch);
            let tb = targets.select_cols(batch);
            let y = layer.forward(&xb)?;
            let (loss, g) = mse_loss(&y, &tb)?;
            let grads = layer.backward(&xb, &g)?;
            if !loss.is_finite() {
                return Err(TrainingError::Diverged {
                    step,
                    loss,
                    grad_norm: grads.norm(),
                });
            }
            optimizer_step(layer, &grads, &mut state, cfg);
        }
        if step % cfg.log_every == 0 && step != cfg.steps {
            history.records.push(snapshot(layer, inputs, targets, step)?);
        }
    }
    history
        .records
        .push(snapshot(layer, inputs, targets, cfg.steps)?);
    let last = history.records.last().expect("final snapshot");
    if !last.loss.is_finite() {
        return Err(TrainingError::Diverged {
            step: cfg.steps,
            loss: last.loss,
            grad_norm: last.grad_norm,
        });
    }
    Ok(history)
}

fn snapshot(
    layer: &AdapterLayer,
    inputs: &DenseMatrix,
    targets: &DenseMatrix,
    step: usize,
) -> Result<TrainRecord, TrainingError> {
    let y = layer.forward(inputs)?;
    let (loss, g) = mse_loss(&y, targets)?;
    let grads = layer.backward(inputs, &g)?;
    let effective_rank = layer.effective_rank(DEFAULT_TAU)?.rank_stacked_b;
    Ok(TrainRecord {
        step,
        loss,
        grad_norm: grads.norm(),
        null_residual: layer.null_residual(),
        effective_rank,
    })
}
