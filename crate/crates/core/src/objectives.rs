//! Loss terms: kernel dependence (HSIC), BPR, and the in-batch contrastive loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HsicConfig {
    pub sigma_sq: f64,
    /// Scale each input row to unit length before the kernel.
    pub normalize_inputs: bool,
}

impl HsicConfig {
    pub fn new(sigma_sq: f64, normalize_inputs: bool) -> Result<Self> {
        if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
            return Err(Error::Config(format!(
                "kernel bandwidth {sigma_sq} must be > 0"
            )));
        }
        Ok(HsicConfig {
            sigma_sq,
            normalize_inputs,
        })
    }
}

/// `K_ij = exp(−‖x_i − x_j‖² / (2σ²))`.
pub fn rbf_kernel(tape: &mut Tape, x: Var, cfg: HsicConfig) -> Result<Var> {
    let x = if cfg.normalize_inputs {
        tape.l2_row_normalize(x, NORM_EPS)?
    } else {
        x
    };
    let d = tape.pairwise_sq_dist(x)?;
    let scaled = tape.scale(d, -1.0 / (2.0 * cfg.sigma_sq))?;
    tape.exp(scaled)
}

/// Biased estimate `(n−1)⁻² Tr(K_X H K_Y H)`, computed as `Σ (H K_X H) ∘ K_Y / (n−1)²`.
pub fn hsic_estimate(
    tape: &mut Tape,
    x: Var,
    y: Var,
    cfg_x: HsicConfig,
    cfg_y: HsicConfig,
) -> Result<Var> {
    let n = tape.shape(x).0;
    if n < 2 {
        return Err(Error::BatchSize { got: n, need: 2 });
    }
    if tape.shape(y).0 != n {
        return Err(Error::Contract(format!(
            "dependence inputs have {n} and {} rows",
            tape.shape(y).0
        )));
    }
    let kx = rbf_kernel(tape, x, cfg_x)?;
    let ky = rbf_kernel(tape, y, cfg_y)?;
    let centered = tape.double_center(kx)?;
    let prod = tape.mul(centered, ky)?;
    let total = tape.sum(prod)?;
    tape.scale(total, 1.0 / ((n - 1) * (n - 1)) as f64)
}

/// `Σ_k HSIC(Z^k, M^k)` over a batch of items.
pub fn fib_loss(tape: &mut Tape, projected: &[Var], raw: &[Var], cfg: HsicConfig) -> Result<Var> {
    if projected.len() != raw.len() || projected.is_empty() {
        return Err(Error::Contract(format!(
            "{} projected batches for {} feature batches",
            projected.len(),
            raw.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&z, &m) in projected.iter().zip(raw) {
        if tape.shape(z).0 != tape.shape(m).0 {
            return Err(Error::Contract(format!(
                "projected batch has {} rows, feature batch {}",
                tape.shape(z).0,
                tape.shape(m).0
            )));
        }
        let h = hsic_estimate(tape, z, m, cfg, cfg)?;
        total = Some(match total {
            Some(t) => tape.add(t, h)?,
            None => h,
        });
    }
    Ok(total.expect("at least one modality"))
}

/// `HSIC(Y', Y)` with the reference branch treated as a constant.
pub fn gib_loss(tape: &mut Tape, masked: Var, reference: Var, cfg: HsicConfig) -> Result<Var> {
    let reference = tape.detach(reference)?;
    hsic_estimate(tape, masked, reference, cfg, cfg)
}

/// `−mean ln σ(pos − neg)`.
pub fn bpr_loss(tape: &mut Tape, pos: Var, neg: Var) -> Result<Var> {
    let diff = tape.sub(pos, neg)?;
    let ls = tape.log_sigmoid(diff)?;
    let m = tape.mean(ls)?;
    tape.neg(m)
}

/// `λ Σ_θ ‖θ‖²`.
pub fn l2_penalty(tape: &mut Tape, params: &[Var], lambda: f64) -> Result<Var> {
    let mut total = tape.constant(Matrix::scalar(0.0))?;
    for &p in params {
        let sq = tape.mul(p, p)?;
        let s = tape.sum(sq)?;
        total = tape.add(total, s)?;
    }
    tape.scale(total, lambda)
}

/// `−mean_a log softmax(logits_a)_a`: row `a`'s positive is column `a`.
pub fn diagonal_infonce(tape: &mut Tape, logits: Var) -> Result<Var> {
    let (b, c) = tape.shape(logits);
    if b != c {
        return Err(Error::dim("diagonal_infonce", format!("{b}x{c} logits")));
    }
    if b < 2 {
        return Err(Error::BatchSize { got: b, need: 2 });
    }
    let ls = tape.log_softmax_rows(logits)?;
    let eye = tape.constant(Matrix::identity(b))?;
    let diag = tape.mul(ls, eye)?;
    let s = tape.sum(diag)?;
    tape.scale(s, -1.0 / b as f64)
}

/// Cosine-similarity InfoNCE between paired rows of `users` and `items`, with
/// the other items in the batch as negatives.
pub fn stage2_infonce(tape: &mut Tape, users: Var, items: Var, tau: f64) -> Result<Var> {
    if tape.shape(users) != tape.shape(items) {
        return Err(Error::dim(
            "stage2_infonce",
            format!(
                "{:?} users vs {:?} items",
                tape.shape(users),
                tape.shape(items)
            ),
        ));
    }
    if tape.shape(users).0 < 2 {
        return Err(Error::BatchSize {
            got: tape.shape(users).0,
            need: 2,
        });
    }
    if tau <= 0.0 {
        return Err(Error::Contract("temperature must be positive".into()));
    }
    let u = tape.l2_row_normalize(users, NORM_EPS)?;
    let v = tape.l2_row_normalize(items, NORM_EPS)?;
    let vt = tape.transpose(v)?;
    let cos = tape.mat_mul(u, vt)?;
    let logits = tape.scale(cos, 1.0 / tau)?;
    diagonal_infonce(tape, logits)
}

/// Scalar values of every loss term for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub fib: f64,
    pub gib: f64,
    pub reg: f64,
    pub stage2: f64,
    pub total_stage1: f64,
}

impl LossBreakdown {
    pub fn stage1(rec: f64, fib: f64, gib: f64, reg: f64, alpha: f64, beta: f64) -> Self {
        LossBreakdown {
            rec,
            fib,
            gib,
            reg,
            stage2: 0.0,
            total_stage1: rec + alpha * fib + beta * gib + reg,
        }
    }

    /// Running mean update used to average batches within an epoch.
    pub fn accumulate(&mut self, other: &LossBreakdown, count: usize) {
        let w = 1.0 / count as f64;
        let mix = |a: &mut f64, b: f64| *a += (b - *a) * w;
        mix(&mut self.rec, other.rec);
        mix(&mut self.fib, other.fib);
        mix(&mut self.gib, other.gib);
        mix(&mut self.reg, other.reg);
        mix(&mut self.stage2, other.stage2);
        mix(&mut self.total_stage1, other.total_stage1);
    }
}

/// `rec + α·fib + β·gib + reg` on the tape; absent terms contribute nothing.
pub fn stage1_total(
    tape: &mut Tape,
    rec: Var,
    reg: Var,
    fib: Option<Var>,
    gib: Option<Var>,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let mut total = tape.add(rec, reg)?;
    if let Some(f) = fib {
        let w = tape.scale(f, alpha)?;
        total = tape.add(total, w)?;
    }
    if let Some(g) = gib {
        let w = tape.scale(g, beta)?;
        total = tape.add(total, w)?;
    }
    Ok(total)
}
