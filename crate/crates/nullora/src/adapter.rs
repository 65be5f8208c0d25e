//! The adapted linear layer: cross-frozen low-rank factors with per-channel
//! scaling, optionally confined to the null space of the frozen weight.
//!
//! In `NullLora` mode the update is
//!
//! ```text
//! dW = U_hat (U_hat^T B) S1 A_f  +  B_f S2 A
//! ```
//!
//! with `B_f = U_hat` a left-null-space basis of `W0` and `A_f` a right-null-
//! space basis, so `W0^T dW = 0` for every value of the trainables `B`, `A`,
//! `s`. The projector `P = U_hat U_hat^T` is folded into every product via
//! `U_hat^T B` and never materialized; optimizer steps can push `B` anywhere,
//! the out-of-null-space part is simply inert.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::DenseMatrix;
use crate::numerics::{self, NumericsError};

/// Guard against 0/0 in normalized residuals.
const RESIDUAL_EPS: f64 = 1e-300;

/// Fixed seed for the random probes used by invariant verification.
const VERIFY_SEED: u64 = 0x4E4C_5254; // "NLRT"

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("layer '{layer}': {what} has shape {got_rows}x{got_cols}, expected {want_rows}x{want_cols}")]
    ShapeMismatch {
        layer: String,
        what: &'static str,
        want_rows: usize,
        want_cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("layer '{layer}': rank must be an even positive integer, got {r}")]
    RankNotEven { layer: String, r: usize },
    #[error("layer '{layer}': rank {r} exceeds the maximum {max} for a {d_out}x{d_in} weight")]
    RankTooLarge {
        layer: String,
        r: usize,
        max: usize,
        d_out: usize,
        d_in: usize,
    },
    #[error("layer '{layer}': non-finite values in {what}")]
    NonFinite { layer: String, what: &'static str },
    #[error("layer '{layer}': {source}")]
    Numerics {
        layer: String,
        source: NumericsError,
    },
    #[error("layer '{layer}': {what}")]
    Invalid { layer: String, what: String },
}

/// How the adapter was initialized and how its update is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterMode {
    /// Frozen factors are null-space bases of `W0`; the trainable
    /// up-projection is confined by `P = U_hat U_hat^T`.
    NullLora,
    /// Frozen factors are random orthonormal matrices, no projection.
    AblationRandom,
    /// Plain low-rank update `(alpha/r) B A`, no frozen factors.
    VanillaLora,
}

impl AdapterMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AdapterMode::NullLora => "null",
            AdapterMode::AblationRandom => "ablation",
            AdapterMode::VanillaLora => "lora",
        }
    }

    pub fn parse(s: &str) -> Option<AdapterMode> {
        match s {
            "null" => Some(AdapterMode::NullLora),
            "ablation" => Some(AdapterMode::AblationRandom),
            "lora" => Some(AdapterMode::VanillaLora),
            _ => None,
        }
    }
}

/// One adapted linear layer.
///
/// Shapes, with `q = r/2` in the cross-frozen modes:
/// `W0: d_out x d_in`, `B_f, B, U_hat: d_out x q`, `A_f, A: q x d_in`,
/// `s: r`. In `VanillaLora` mode `B: d_out x r`, `A: r x d_in`, frozen
/// factors are empty and `s` is unused.
#[derive(Debug, Clone)]
pub struct AdapterLayer {
    name: String,
    w0: DenseMatrix,
    mode: AdapterMode,
    r: usize,
    b_frozen: DenseMatrix,
    a_frozen: DenseMatrix,
    b: DenseMatrix,
    a: DenseMatrix,
    s: Vec<f64>,
    u_hat: Option<DenseMatrix>,
    lora_alpha: f64,
}

/// Gradients of the trainables of one layer.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub db: DenseMatrix,
    pub da: DenseMatrix,
    pub ds: Vec<f64>,
}

impl GradientSet {
    pub fn zeros_like(layer: &AdapterLayer) -> Self {
        Self {
            db: DenseMatrix::zeros(layer.b.rows(), layer.b.cols()),
            da: DenseMatrix::zeros(layer.a.rows(), layer.a.cols()),
            ds: vec![0.0; layer.s.len()],
        }
    }

    /// Euclidean norm over all gradient entries.
    pub fn norm(&self) -> f64 {
        let sum: f64 = self.db.data().iter().map(|x| x * x).sum::<f64>()
            + self.da.data().iter().map(|x| x * x).sum::<f64>()
            + self.ds.iter().map(|x| x * x).sum::<f64>();
        sum.sqrt()
    }
}

/// Numerical ranks of the realized update factors.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EffectiveRank {
    pub rank_stacked_b: usize,
    pub rank_stacked_a: usize,
    pub rank_delta: usize,
}

/// One verified invariant: what was measured against which tolerance.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InvariantCheck {
    pub measured: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Results of [`AdapterLayer::verify_invariants`]; checks that do not apply
/// to the layer's mode are absent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvariantReport {
    pub checks: BTreeMap<String, InvariantCheck>,
}

impl InvariantReport {
    fn record(&mut self, name: &str, measured: f64, tolerance: f64) {
        self.checks.insert(
            name.to_string(),
            InvariantCheck {
                measured,
                tolerance,
                pass: measured <= tolerance,
            },
        );
    }

    pub fn pass(&self) -> bool {
        self.checks.values().all(|c| c.pass)
    }
}

/// Tolerance profile for invariant verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TolProfile {
    #[default]
    Default,
    Strict,
}

struct Tolerances {
    w0t_delta: f64,
    norm_decomposition: f64,
    projection_fixes_frozen: f64,
    frozen_orthonormal: f64,
    merge_equivalence: f64,
}

impl TolProfile {
    fn tolerances(self) -> Tolerances {
        match self {
            TolProfile::Default => Tolerances {
                w0t_delta: 1e-8,
                norm_decomposition: 1e-8,
                projection_fixes_frozen: 1e-10,
                frozen_orthonormal: 1e-10,
                merge_equivalence: 1e-10,
            },
            TolProfile::Strict => Tolerances {
                w0t_delta: 1e-10,
                norm_decomposition: 1e-10,
                projection_fixes_frozen: 1e-12,
                frozen_orthonormal: 1e-12,
                merge_equivalence: 1e-11,
            },
        }
    }

    pub fn parse(s: &str) -> Option<TolProfile> {
        match s {
            "default" => Some(TolProfile::Default),
            "strict" => Some(TolProfile::Strict),
            _ => None,
        }
    }
}

impl AdapterLayer {
    /// Null-space initialization with rank self-adaptation: `r/2` is the
    /// smaller of the two nullities at threshold `tau`, optionally capped at
    /// `max_rank/2`, keeping the null directions with the smallest associated
    /// singular values. Full-rank weights are skipped (`Ok(None)`).
    pub fn init_null_lora(
        name: &str,
        w0: DenseMatrix,
        tau: f64,
        max_rank: Option<usize>,
    ) -> Result<Option<Self>, AdapterError> {
        if !w0.is_finite() {
            return Err(AdapterError::NonFinite {
                layer: name.to_string(),
                what: "W0",
            });
        }
        let bases = numerics::null_bases(&w0, tau).map_err(|source| AdapterError::Numerics {
            layer: name.to_string(),
            source,
        })?;
        let nullity_left = bases.left.cols();
        let nullity_right = bases.right.rows();
        let mut q = nullity_left.min(nullity_right);
        if let Some(max_rank) = max_rank {
            q = q.min(max_rank / 2);
        }
        if q == 0 {
            return Ok(None);
        }
        // Bases list directions in SVD output order with the completion at
        // the end, so the tail holds the smallest singular values.
        let left_tail: Vec<usize> = (nullity_left - q..nullity_left).collect();
        let right_tail: Vec<usize> = (nullity_right - q..nullity_right).collect();
        let b_frozen = bases.left.select_cols(&left_tail);
        let a_frozen = bases.right.select_rows(&right_tail);
        let (d_out, d_in) = (w0.rows(), w0.cols());
        Ok(Some(Self {
            name: name.to_string(),
            u_hat: Some(b_frozen.clone()),
            w0,
            mode: AdapterMode::NullLora,
            r: 2 * q,
            b: DenseMatrix::zeros(d_out, q),
            a: DenseMatrix::zeros(q, d_in),
            s: vec![1.0; 2 * q],
            b_frozen,
            a_frozen,
            lora_alpha: 0.0,
        }))
    }

    /// Ablation of the null-space constraint: frozen factors are seeded
    /// random orthonormal matrices and no projection is applied.
    pub fn init_ablation(
        name: &str,
        w0: DenseMatrix,
        r: usize,
        seed: u64,
    ) -> Result<Self, AdapterError> {
        if r == 0 || !r.is_multiple_of(2) {
            return Err(AdapterError::RankNotEven {
                layer: name.to_string(),
                r,
            });
        }
        let (d_out, d_in) = (w0.rows(), w0.cols());
        let min_dim = d_out.min(d_in);
        let q = r / 2;
        if q > min_dim {
            return Err(AdapterError::RankTooLarge {
                layer: name.to_string(),
                r,
                max: 2 * min_dim,
                d_out,
                d_in,
            });
        }
        if !w0.is_finite() {
            return Err(AdapterError::NonFinite {
                layer: name.to_string(),
                what: "W0",
            });
        }
        let b_frozen = numerics::random_orthonormal(d_out, q, numerics::derive_seed(seed, 0))
            .expect("q <= d_out");
        let a_frozen = numerics::random_orthonormal(d_in, q, numerics::derive_seed(seed, 1))
            .expect("q <= d_in")
            .transpose();
        Ok(Self {
            name: name.to_string(),
            w0,
            mode: AdapterMode::AblationRandom,
            r,
            b_frozen,
            a_frozen,
            b: DenseMatrix::zeros(d_out, q),
            a: DenseMatrix::zeros(q, d_in),
            s: vec![1.0; r],
            u_hat: None,
            lora_alpha: 0.0,
        })
    }

    /// Plain LoRA baseline: `dW = (alpha/r) B A` with `B = 0` and `A` seeded
    /// Gaussian of standard deviation `1/sqrt(d_in)`. `alpha` defaults to `r`.
    pub fn init_vanilla_lora(
        name: &str,
        w0: DenseMatrix,
        r: usize,
        seed: u64,
    ) -> Result<Self, AdapterError> {
        let (d_out, d_in) = (w0.rows(), w0.cols());
        let min_dim = d_out.min(d_in);
        if r == 0 || r > min_dim {
            return Err(AdapterError::RankTooLarge {
                layer: name.to_string(),
                r,
                max: min_dim,
                d_out,
                d_in,
            });
        }
        if !w0.is_finite() {
            return Err(AdapterError::NonFinite {
                layer: name.to_string(),
                what: "W0",
            });
        }
        let std = 1.0 / (d_in as f64).sqrt();
        let a = numerics::gaussian_matrix(r, d_in, numerics::derive_seed(seed, 2), std);
        Ok(Self {
            name: name.to_string(),
            w0,
            mode: AdapterMode::VanillaLora,
            r,
            b_frozen: DenseMatrix::zeros(d_out, 0),
            a_frozen: DenseMatrix::zeros(0, d_in),
            b: DenseMatrix::zeros(d_out, r),
            a,
            s: Vec::new(),
            u_hat: None,
            lora_alpha: r as f64,
        })
    }

    /// Reassembles a layer from persisted parts, validating every shape.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        name: &str,
        w0: DenseMatrix,
        mode: AdapterMode,
        r: usize,
        b_frozen: DenseMatrix,
        a_frozen: DenseMatrix,
        b: DenseMatrix,
        a: DenseMatrix,
        s: Vec<f64>,
        u_hat: Option<DenseMatrix>,
        lora_alpha: f64,
    ) -> Result<Self, AdapterError> {
        let (d_out, d_in) = (w0.rows(), w0.cols());
        let invalid = |what: String| AdapterError::Invalid {
            layer: name.to_string(),
            what,
        };
        let expect_shape = |what: &'static str, m: &DenseMatrix, rows: usize, cols: usize| {
            if m.rows() != rows || m.cols() != cols {
                Err(AdapterError::ShapeMismatch {
                    layer: name.to_string(),
                    what,
                    want_rows: rows,
                    want_cols: cols,
                    got_rows: m.rows(),
                    got_cols: m.cols(),
                })
            } else {
                Ok(())
            }
        };
        match mode {
            AdapterMode::NullLora | AdapterMode::AblationRandom => {
                if r == 0 || !r.is_multiple_of(2) {
                    return Err(AdapterError::RankNotEven {
                        layer: name.to_string(),
                        r,
                    });
                }
                let q = r / 2;
                expect_shape("B_f", &b_frozen, d_out, q)?;
                expect_shape("A_f", &a_frozen, q, d_in)?;
                expect_shape("B", &b, d_out, q)?;
                expect_shape("A", &a, q, d_in)?;
                if s.len() != r {
                    return Err(invalid(format!("s has length {}, expected {r}", s.len())));
                }
                match (mode, &u_hat) {
                    (AdapterMode::NullLora, Some(u)) => expect_shape("U_hat", u, d_out, q)?,
                    (AdapterMode::NullLora, None) => {
                        return Err(invalid("missing projection basis U_hat".to_string()))
                    }
                    (_, Some(_)) => {
                        return Err(invalid("unexpected U_hat outside null mode".to_string()))
                    }
                    (_, None) => {}
                }
            }
            AdapterMode::VanillaLora => {
                if r == 0 {
                    return Err(invalid("rank must be positive".to_string()));
                }
                expect_shape("B", &b, d_out, r)?;
                expect_shape("A", &a, r, d_in)?;
                if !s.is_empty() {
                    return Err(invalid("vanilla mode carries no scaling vector".to_string()));
                }
                if u_hat.is_some() {
                    return Err(invalid("unexpected U_hat outside null mode".to_string()));
                }
            }
        }
        for (what, m) in [("W0", &w0), ("B_f", &b_frozen), ("A_f", &a_frozen), ("B", &b), ("A", &a)]
        {
            if !m.is_finite() {
                return Err(AdapterError::NonFinite {
                    layer: name.to_string(),
                    what,
                });
            }
        }
        if !s.iter().all(|x| x.is_finite()) {
            return Err(AdapterError::NonFinite {
                layer: name.to_string(),
                what: "s",
            });
        }
        Ok(Self {
            name: name.to_string(),
            w0,
            mode,
            r,
            b_frozen,
            a_frozen,
            b,
            a,
            s,
            u_hat,
            lora_alpha,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn w0(&self) -> &DenseMatrix {
        &self.w0
    }

    pub fn mode(&self) -> AdapterMode {
        self.mode
    }

    /// Total adapter rank `r`.
    pub fn rank(&self) -> usize {
        self.r
    }

    /// `r/2` in the cross-frozen modes, `r` in vanilla mode.
    pub fn half_rank(&self) -> usize {
        match self.mode {
            AdapterMode::VanillaLora => self.r,
            _ => self.r / 2,
        }
    }

    pub fn d_out(&self) -> usize {
        self.w0.rows()
    }

    pub fn d_in(&self) -> usize {
        self.w0.cols()
    }

    pub fn b_frozen(&self) -> &DenseMatrix {
        &self.b_frozen
    }

    pub fn a_frozen(&self) -> &DenseMatrix {
        &self.a_frozen
    }

    pub fn b(&self) -> &DenseMatrix {
        &self.b
    }

    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    pub fn u_hat(&self) -> Option<&DenseMatrix> {
        self.u_hat.as_ref()
    }

    pub fn lora_alpha(&self) -> f64 {
        self.lora_alpha
    }

    /// Mutable access to the trainables, for optimizers and oracles.
    pub fn trainables_mut(&mut self) -> (&mut DenseMatrix, &mut DenseMatrix, &mut [f64]) {
        (&mut self.b, &mut self.a, &mut self.s)
    }

    /// Replaces the trainables wholesale, validating shapes.
    pub fn set_trainables(
        &mut self,
        b: DenseMatrix,
        a: DenseMatrix,
        s: Vec<f64>,
    ) -> Result<(), AdapterError> {
        if b.rows() != self.b.rows()
            || b.cols() != self.b.cols()
            || a.rows() != self.a.rows()
            || a.cols() != self.a.cols()
            || s.len() != self.s.len()
        {
            return Err(AdapterError::Invalid {
                layer: self.name.clone(),
                what: "trainable shapes do not match the layer".to_string(),
            });
        }
        self.b = b;
        self.a = a;
        self.s = s;
        Ok(())
    }

    /// Number of trainable scalars: `r/2 (d_out + d_in) + r` in the
    /// cross-frozen modes, `r (d_out + d_in)` in vanilla mode.
    pub fn trainable_count(&self) -> usize {
        self.b.data().len() + self.a.data().len() + self.s.len()
    }

    fn s1(&self) -> &[f64] {
        &self.s[..self.r / 2]
    }

    fn s2(&self) -> &[f64] {
        &self.s[self.r / 2..]
    }

    /// `P B` computed as `U_hat (U_hat^T B)` without materializing `P`.
    fn projected_b(&self) -> DenseMatrix {
        let u_hat = self.u_hat.as_ref().expect("null mode");
        u_hat.matmul(&u_hat.t().matmul(&self.b))
    }

    /// The realized incremental update `dW` as a dense matrix.
    pub fn delta_weight(&self) -> DenseMatrix {
        match self.mode {
            AdapterMode::NullLora => {
                let term1 = self.projected_b().scale_cols(self.s1()).matmul(&self.a_frozen);
                let term2 = self.b_frozen.scale_cols(self.s2()).matmul(&self.a);
                term1.add(&term2)
            }
            AdapterMode::AblationRandom => {
                let term1 = self.b.scale_cols(self.s1()).matmul(&self.a_frozen);
                let term2 = self.b_frozen.scale_cols(self.s2()).matmul(&self.a);
                term1.add(&term2)
            }
            AdapterMode::VanillaLora => self
                .b
                .matmul(&self.a)
                .scale(self.lora_alpha / self.r as f64),
        }
    }

    fn check_input(
        &self,
        what: &'static str,
        m: &DenseMatrix,
        rows: usize,
    ) -> Result<(), AdapterError> {
        if m.rows() != rows {
            return Err(AdapterError::ShapeMismatch {
                layer: self.name.clone(),
                what,
                want_rows: rows,
                want_cols: m.cols(),
                got_rows: m.rows(),
                got_cols: m.cols(),
            });
        }
        Ok(())
    }

    /// `Y = W0 X + dW X` through the low-rank factors; never forms `dW`.
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix, AdapterError> {
        self.check_input("input", x, self.d_in())?;
        let base = self.w0.matmul(x);
        let delta_x = match self.mode {
            AdapterMode::NullLora => {
                let z1 = self.a_frozen.matmul(x).scale_rows(self.s1());
                let z2 = self.a.matmul(x).scale_rows(self.s2());
                self.projected_b().matmul(&z1).add(&self.b_frozen.matmul(&z2))
            }
            AdapterMode::AblationRandom => {
                let z1 = self.a_frozen.matmul(x).scale_rows(self.s1());
                let z2 = self.a.matmul(x).scale_rows(self.s2());
                self.b.matmul(&z1).add(&self.b_frozen.matmul(&z2))
            }
            AdapterMode::VanillaLora => self
                .b
                .matmul(&self.a.matmul(x))
                .scale(self.lora_alpha / self.r as f64),
        };
        Ok(base.add(&delta_x))
    }

    /// Analytic gradients of a scalar loss with upstream gradient `G` at
    /// batch input `X`: with `M = G X^T`,
    /// `dB = P M A_f^T S1`, `dA = S2 B_f^T M`,
    /// `ds_i = diag(B^T P M A_f^T)_i` for the first half and
    /// `diag(B_f^T M A^T)_{i - r/2}` for the second.
    pub fn backward(&self, x: &DenseMatrix, g: &DenseMatrix) -> Result<GradientSet, AdapterError> {
        self.check_input("input", x, self.d_in())?;
        self.check_input("upstream gradient", g, self.d_out())?;
        if x.cols() != g.cols() {
            return Err(AdapterError::ShapeMismatch {
                layer: self.name.clone(),
                what: "upstream gradient batch",
                want_rows: self.d_out(),
                want_cols: x.cols(),
                got_rows: g.rows(),
                got_cols: g.cols(),
            });
        }
        match self.mode {
            AdapterMode::NullLora => {
                let u_hat = self.u_hat.as_ref().expect("null mode");
                let af_x = self.a_frozen.matmul(x); // q x batch
                let a_x = self.a.matmul(x); // q x batch
                let bft_g = self.b_frozen.t().matmul(g); // q x batch
                // U^T M A_f^T = (U^T G)(A_f X)^T
                let ut_m_aft = u_hat.t().matmul(g).matmul(&af_x.t()); // q x q
                let db = u_hat.matmul(&ut_m_aft).scale_cols(self.s1());
                let da = bft_g.matmul(&x.t()).scale_rows(self.s2());
                let m1 = self.b.t().matmul(u_hat).matmul(&ut_m_aft); // q x q
                let m2 = bft_g.matmul(&a_x.t()); // q x q
                let ds = diag(&m1).into_iter().chain(diag(&m2)).collect();
                Ok(GradientSet { db, da, ds })
            }
            AdapterMode::AblationRandom => {
                let af_x = self.a_frozen.matmul(x);
                let a_x = self.a.matmul(x);
                let bft_g = self.b_frozen.t().matmul(g);
                let m_aft = g.matmul(&af_x.t()); // d_out x q = M A_f^T
                let db = m_aft.scale_cols(self.s1());
                let da = bft_g.matmul(&x.t()).scale_rows(self.s2());
                let m1 = self.b.t().matmul(&m_aft);
                let m2 = bft_g.matmul(&a_x.t());
                let ds = diag(&m1).into_iter().chain(diag(&m2)).collect();
                Ok(GradientSet { db, da, ds })
            }
            AdapterMode::VanillaLora => {
                let scale = self.lora_alpha / self.r as f64;
                let a_x = self.a.matmul(x);
                let db = g.matmul(&a_x.t()).scale(scale);
                let da = self.b.t().matmul(g).matmul(&x.t()).scale(scale);
                Ok(GradientSet {
                    db,
                    da,
                    ds: Vec::new(),
                })
            }
        }
    }

    /// Merged weight `W' = W0 + dW` for adapter-free inference.
    pub fn merge(&self) -> DenseMatrix {
        self.w0.add(&self.delta_weight())
    }

    /// Normalized null-space residual `|W0^T dW|_F / (|W0|_F |dW|_F + eps)`.
    pub fn null_residual(&self) -> f64 {
        self.null_residual_of(&self.delta_weight())
    }

    fn null_residual_of(&self, delta: &DenseMatrix) -> f64 {
        let num = self.w0.t().matmul(delta).fro_norm();
        num / (self.w0.fro_norm() * delta.fro_norm() + RESIDUAL_EPS)
    }

    /// Numerical ranks of the stacked update factors and of `dW` itself.
    ///
    /// The B-side stack is the raw `[B S1 | B_f S2]` (`d_out x r`), the
    /// A-side stack `[A_f; A]` (`r x d_in`); vanilla mode ranks its own `B`
    /// and `A`. The projector is deliberately left out of the B-side stack:
    /// in null mode `P B` and `B_f` both live in span(U_hat), which caps the
    /// projected stack at rank `r/2`, while the redundancy question is
    /// whether the trained half learned directions independent of the frozen
    /// basis.
    pub fn effective_rank(&self, tau: f64) -> Result<EffectiveRank, AdapterError> {
        let wrap = |source| AdapterError::Numerics {
            layer: self.name.clone(),
            source,
        };
        let (stacked_b, stacked_a) = match self.mode {
            AdapterMode::NullLora | AdapterMode::AblationRandom => (
                self.b
                    .scale_cols(self.s1())
                    .hcat(&self.b_frozen.scale_cols(self.s2())),
                self.a_frozen.vcat(&self.a),
            ),
            AdapterMode::VanillaLora => (self.b.clone(), self.a.clone()),
        };
        let rank_of = |m: &DenseMatrix| -> Result<usize, NumericsError> {
            Ok(numerics::numerical_rank(&numerics::svd(m)?.sigma, tau))
        };
        Ok(EffectiveRank {
            rank_stacked_b: rank_of(&stacked_b).map_err(wrap)?,
            rank_stacked_a: rank_of(&stacked_a).map_err(wrap)?,
            rank_delta: rank_of(&self.delta_weight()).map_err(wrap)?,
        })
    }

    /// Measures the layer's structural invariants. Failures are report
    /// entries, never errors. Mode-dependent checks are omitted where they
    /// do not apply.
    pub fn verify_invariants(&self, profile: TolProfile) -> InvariantReport {
        let t = profile.tolerances();
        let mut report = InvariantReport {
            checks: BTreeMap::new(),
        };
        let delta = self.delta_weight();
        let merged = self.w0.add(&delta);

        if self.mode == AdapterMode::NullLora {
            report.record(
                "w0t_delta_orthogonality",
                self.null_residual_of(&delta),
                t.w0t_delta,
            );

            // |W'x|^2 = |W0 x|^2 + |dW x|^2 over random unit probes.
            let mut probes = numerics::gaussian_matrix(self.d_in(), 16, VERIFY_SEED, 1.0);
            normalize_columns(&mut probes);
            let wpx = merged.matmul(&probes);
            let w0x = self.w0.matmul(&probes);
            let dx = delta.matmul(&probes);
            let mut worst = 0.0_f64;
            for j in 0..probes.cols() {
                let np = col_norm_sq(&wpx, j);
                let n0 = col_norm_sq(&w0x, j);
                let nd = col_norm_sq(&dx, j);
                if np > 0.0 {
                    worst = worst.max((np - n0 - nd).abs() / np);
                }
            }
            report.record("norm_decomposition", worst, t.norm_decomposition);

            let u_hat = self.u_hat.as_ref().expect("null mode");
            let pbf = u_hat.matmul(&u_hat.t().matmul(&self.b_frozen));
            report.record(
                "projection_fixes_frozen",
                pbf.max_abs_diff(&self.b_frozen),
                t.projection_fixes_frozen,
            );
        }

        if self.mode != AdapterMode::VanillaLora {
            let gb = self.b_frozen.t().matmul(&self.b_frozen);
            let ga = self.a_frozen.matmul(&self.a_frozen.t());
            let q = self.r / 2;
            let dev = gb
                .max_abs_diff(&DenseMatrix::identity(q))
                .max(ga.max_abs_diff(&DenseMatrix::identity(q)));
            report.record("frozen_orthonormal", dev, t.frozen_orthonormal);
        }

        let x = numerics::gaussian_matrix(self.d_in(), 8, VERIFY_SEED + 1, 1.0);
        let via_merge = merged.matmul(&x);
        let via_forward = self.forward(&x).expect("probe shapes are consistent");
        report.record(
            "merge_forward_equivalence",
            via_merge.max_abs_diff(&via_forward),
            t.merge_equivalence,
        );

        report
    }
}

fn diag(m: &DenseMatrix) -> Vec<f64> {
    (0..m.rows().min(m.cols())).map(|i| m.get(i, i)).collect()
}

fn col_norm_sq(m: &DenseMatrix, j: usize) -> f64 {
    (0..m.rows()).map(|i| m.get(i, j) * m.get(i, j)).sum()
}

fn normalize_columns(m: &mut DenseMatrix) {
    for j in 0..m.cols() {
        let n = col_norm_sq(m, j).sqrt();
        if n > 0.0 {
            for i in 0..m.rows() {
                let x = m.get(i, j);
                m.set(i, j, x / n);
            }
        }
    }
}
