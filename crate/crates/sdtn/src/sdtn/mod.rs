//! The SDTN optimizer: fits a fully-connected tensor network to a
//! hyperspectral patch by gradient descent on a combined objective of
//! reconstruction error, gradient-domain low-rank penalties, Tikhonov
//! regularization, and an optional supervised classification term, with an
//! energy-threshold rank adaptation pass.

use crate::error::{Result, SdtnError};
use crate::linalg;
use crate::tensor::{diff_operator, DenseTensor, FactorSet, RankMatrix, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Low-rank pair (U_k, V_k) for the forward-differenced mode-k unfolding of
/// factor G_k. U_k is (I_k - 1) x r_k, V_k is r_k x (number of unfolding
/// columns).
#[derive(Debug, Clone, PartialEq)]
pub struct GradLowRankPair {
    pub mode: usize,
    pub u: DenseTensor,
    pub v: DenseTensor,
    pub rank: usize,
}

/// All loss weights and the step schedule. `lr(iter) = lr0 * decay^(iter /
/// decay_every)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    /// When set, each step halves the learning rate until the loss decreases
    /// (monotone mode). Default follows the plain schedule.
    pub backtracking: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            alpha: 0.1,
            beta: 1.0,
            gamma: 0.1,
            lambda1: 1e-3,
            lambda2: 1e-3,
            lambda3: 1e-3,
            lr0: 0.001,
            decay: 0.9,
            decay_every: 10_000,
            max_iters: 5_000,
            tol: 1e-8,
            seed: 0,
            backtracking: false,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(SdtnError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.lr0 > 0.0) {
            return Err(SdtnError::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(SdtnError::Config(format!(
                "decay must be in (0, 1], got {}",
                self.decay
            )));
        }
        if self.decay_every == 0 {
            return Err(SdtnError::Config("decay_every must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(SdtnError::Config(format!("tol must be > 0, got {}", self.tol)));
        }
        Ok(())
    }

    pub fn lr(&self, iter: usize) -> f64 {
        self.lr0 * self.decay.powi((iter / self.decay_every) as i32)
    }
}

/// Affine classifier over the spatially pooled reconstruction, used by the
/// supervised term when SDTN runs standalone.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    /// M x B weight matrix (B = extent of the last mode).
    pub weight: DenseTensor,
    /// M biases.
    pub bias: DenseTensor,
}

impl Classifier {
    pub fn n_classes(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Full optimizer state: factors, low-rank pairs, optional classifier, and
/// the loss trace.
#[derive(Debug, Clone)]
pub struct SdtnState {
    pub factors: FactorSet,
    pub glr: Vec<GradLowRankPair>,
    pub classifier: Option<Classifier>,
    pub iter: usize,
    pub loss_history: Vec<f64>,
}

/// The individual loss terms, each already multiplied by its weight. The
/// total objective is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub reconstruction: f64,
    pub gradient_penalty: f64,
    pub regularization: f64,
    pub classification: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.gradient_penalty + self.regularization + self.classification
    }
}

/// Gradients for every optimized block.
#[derive(Debug, Clone)]
pub struct SdtnGrad {
    pub factors: Vec<DenseTensor>,
    pub u: Vec<DenseTensor>,
    pub v: Vec<DenseTensor>,
    pub classifier: Option<(DenseTensor, DenseTensor)>,
}

const LOG_CLAMP: f64 = 1e-12;
const STOP_WINDOW: usize = 50;

fn uniform_tensor(dims: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> DenseTensor {
    let count: usize = dims.iter().product();
    let data: Vec<f64> = (0..count).map(|_| rng.gen_range(-scale..scale)).collect();
    DenseTensor::from_dims(dims, data).expect("consistent dims")
}

fn factor_init_scale(ranks: &RankMatrix, k: usize) -> f64 {
    let n = ranks.order();
    let bond_product: usize = (0..n)
        .filter(|&m| m != k)
        .map(|m| ranks.get(m.min(k), m.max(k)))
        .product();
    (1.0 / bond_product as f64).sqrt()
}

fn init_glr_pair(
    factor_dims: &[usize],
    mode: usize,
    rank: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradLowRankPair> {
    let ik = factor_dims[mode];
    if ik < 2 {
        return Err(SdtnError::Value(format!(
            "mode {mode} extent {ik} too small for the gradient-domain penalty"
        )));
    }
    let cols: usize = factor_dims
        .iter()
        .enumerate()
        .filter(|&(m, _)| m != mode)
        .map(|(_, &d)| d)
        .product();
    if rank == 0 || rank > (ik - 1).min(cols) {
        return Err(SdtnError::Value(format!(
            "low-rank dimension {rank} out of range for mode {mode} (max {})",
            (ik - 1).min(cols)
        )));
    }
    let u = DenseTensor::zeros_dims(&[ik - 1, rank])?;
    let std = (1.0 / rank as f64).sqrt();
    let v_data: Vec<f64> = (0..rank * cols)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    let v = DenseTensor::from_dims(&[rank, cols], v_data)?;
    Ok(GradLowRankPair { mode, u, v, rank })
}

/// Seed a fresh optimizer state: factors i.i.d. uniform scaled per mode,
/// U_k = 0, V_k Gaussian. Deterministic given the seed.
pub fn init_state(
    shape: &Shape,
    ranks: &RankMatrix,
    glr_ranks: &[usize],
    seed: u64,
) -> Result<SdtnState> {
    let n = shape.order();
    if ranks.order() != n {
        return Err(SdtnError::Shape(format!(
            "rank matrix order {} does not match tensor order {n}",
            ranks.order()
        )));
    }
    if glr_ranks.len() != n {
        return Err(SdtnError::Shape(format!(
            "expected {n} low-rank dimensions, got {}",
            glr_ranks.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut factors = Vec::with_capacity(n);
    for k in 0..n {
        let dims = ranks.factor_dims(k, shape.dims());
        let scale = factor_init_scale(ranks, k);
        factors.push(uniform_tensor(&dims, scale, &mut rng));
    }
    let factors = FactorSet::new(ranks.clone(), factors)?;
    let mut glr = Vec::with_capacity(n);
    for k in 0..n {
        glr.push(init_glr_pair(
            factors.factor(k).dims(),
            k,
            glr_ranks[k],
            &mut rng,
        )?);
    }
    Ok(SdtnState {
        factors,
        glr,
        classifier: None,
        iter: 0,
        loss_history: Vec::new(),
    })
}

impl SdtnState {
    /// Attach a supervised classifier head (affine map over the spatially
    /// pooled reconstruction). Weights are seeded small; deterministic.
    pub fn with_classifier(mut self, n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(SdtnError::Value("classifier needs at least 2 classes".into()));
        }
        let bands = *self.factors.data_dims().last().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1a5);
        let scale = (1.0 / bands as f64).sqrt();
        let weight = uniform_tensor(&[n_classes, bands], scale, &mut rng);
        let bias = DenseTensor::zeros_dims(&[n_classes])?;
        self.classifier = Some(Classifier { weight, bias });
        Ok(self)
    }

    pub fn glr_ranks(&self) -> Vec<usize> {
        self.glr.iter().map(|p| p.rank).collect()
    }
}

fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean over the spatial modes (all but the last), yielding one value per
/// last-mode index.
fn spatial_pool(t: &DenseTensor) -> (Vec<f64>, usize) {
    let dims = t.dims();
    let bands = *dims.last().unwrap();
    let spatial: usize = dims[..dims.len() - 1].iter().product();
    let mut pooled = vec![0.0; bands];
    for (i, &v) in t.data().iter().enumerate() {
        pooled[i % bands] += v;
    }
    for p in &mut pooled {
        *p /= spatial as f64;
    }
    (pooled, spatial)
}

fn classifier_probs(c: &Classifier, pooled: &[f64]) -> Vec<f64> {
    let m = c.n_classes();
    let bands = c.weight.dims()[1];
    let mut logits = vec![0.0; m];
    for i in 0..m {
        let mut acc = c.bias.data()[i];
        for b in 0..bands {
            acc += c.weight.data()[i * bands + b] * pooled[b];
        }
        logits[i] = acc;
    }
    softmax_vec(&logits)
}

/// Mean cross-entropy of explicit probability rows against 1-based labels.
/// Rows must already sum to 1 (within 1e-8); the log is clamped at 1e-12.
pub fn classification_loss(probs: &DenseTensor, labels: &[usize]) -> Result<f64> {
    if probs.order() != 2 {
        return Err(SdtnError::Shape("probability matrix must be 2-d".into()));
    }
    let (batch, m) = (probs.dims()[0], probs.dims()[1]);
    if labels.len() != batch {
        return Err(SdtnError::Shape(format!(
            "{batch} probability rows but {} labels",
            labels.len()
        )));
    }
    if batch == 0 {
        return Err(SdtnError::Value("empty batch".into()));
    }
    let mut total = 0.0;
    for (row, &label) in labels.iter().enumerate() {
        if label < 1 || label > m {
            return Err(SdtnError::Value(format!(
                "label {label} out of range 1..={m}"
            )));
        }
        let r = &probs.data()[row * m..(row + 1) * m];
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > 1e-8 {
            return Err(SdtnError::Value(format!(
                "probability row {row} sums to {sum}, not 1"
            )));
        }
        total -= r[label - 1].max(LOG_CLAMP).ln();
    }
    Ok(total / batch as f64)
}

struct PenaltyPieces {
    /// D_k * unfold(G_k, k) - U_k V_k, per mode.
    residuals: Vec<DenseTensor>,
}

fn penalty_pieces(state: &SdtnState) -> Result<PenaltyPieces> {
    let mut residuals = Vec::with_capacity(state.glr.len());
    for pair in &state.glr {
        let g = state.factors.factor(pair.mode);
        let unf = g.unfold(pair.mode)?;
        let d = diff_operator(g.dims()[pair.mode])?;
        let mut e = d.matmul(&unf)?;
        let uv = pair.u.matmul(&pair.v)?;
        e.axpy(-1.0, &uv)?;
        residuals.push(e);
    }
    Ok(PenaltyPieces { residuals })
}

/// Evaluate the SDTN objective. `label` (1-based) activates the supervised
/// term; the state must then carry a classifier.
pub fn sdtn_loss(
    state: &SdtnState,
    x: &DenseTensor,
    label: Option<usize>,
    hp: &Hyperparams,
) -> Result<LossTerms> {
    if x.dims() != state.factors.data_dims() {
        return Err(SdtnError::Shape(format!(
            "data dims {:?} do not match factor dims {:?}",
            x.dims(),
            state.factors.data_dims()
        )));
    }
    let recon = state.factors.reconstruct()?;
    let reconstruction = 0.5 * recon.sub(x)?.sq_norm();

    let pieces = penalty_pieces(state)?;
    let gradient_penalty =
        0.5 * hp.alpha * pieces.residuals.iter().map(|e| e.sq_norm()).sum::<f64>();

    let mut regularization = 0.0;
    for (pair, g) in state.glr.iter().zip(state.factors.factors()) {
        regularization += hp.lambda1 * pair.u.sq_norm()
            + hp.lambda2 * pair.v.sq_norm()
            + hp.lambda3 * g.sq_norm();
    }

    let classification = match label {
        None => 0.0,
        Some(lbl) => {
            let c = state.classifier.as_ref().ok_or_else(|| {
                SdtnError::Value("supervised loss requested but no classifier attached".into())
            })?;
            if lbl < 1 || lbl > c.n_classes() {
                return Err(SdtnError::Value(format!(
                    "label {lbl} out of range 1..={}",
                    c.n_classes()
                )));
            }
            let (pooled, _) = spatial_pool(&recon);
            let probs = classifier_probs(c, &pooled);
            hp.beta * -(probs[lbl - 1].max(LOG_CLAMP).ln())
        }
    };

    Ok(LossTerms {
        reconstruction,
        gradient_penalty,
        regularization,
        classification,
    })
}

/// Analytic gradients of [`sdtn_loss`]. `extra_recon_grad`, when present, is
/// an additional upstream dL/d(reconstruction) contribution (used for joint
/// training where the reconstruction feeds a downstream network).
pub fn sdtn_grad_with_upstream(
    state: &SdtnState,
    x: &DenseTensor,
    label: Option<usize>,
    hp: &Hyperparams,
    extra_recon_grad: Option<&DenseTensor>,
) -> Result<SdtnGrad> {
    if x.dims() != state.factors.data_dims() {
        return Err(SdtnError::Shape(format!(
            "data dims {:?} do not match factor dims {:?}",
            x.dims(),
            state.factors.data_dims()
        )));
    }
    let recon = state.factors.reconstruct()?;
    // upstream gradient at the reconstruction: residual + classification
    // pathway + any external contribution
    let mut upstream = recon.sub(x)?;
    if let Some(extra) = extra_recon_grad {
        upstream.axpy(1.0, extra)?;
    }

    let mut classifier_grad = None;
    if let Some(lbl) = label {
        let c = state.classifier.as_ref().ok_or_else(|| {
            SdtnError::Value("supervised loss requested but no classifier attached".into())
        })?;
        let m = c.n_classes();
        if lbl < 1 || lbl > m {
            return Err(SdtnError::Value(format!("label {lbl} out of range 1..={m}")));
        }
        let (pooled, spatial) = spatial_pool(&recon);
        let probs = classifier_probs(c, &pooled);
        let bands = c.weight.dims()[1];
        let mut dlogits = probs;
        dlogits[lbl - 1] -= 1.0;
        for d in &mut dlogits {
            *d *= hp.beta;
        }
        let mut dw = vec![0.0; m * bands];
        let mut dpooled = vec![0.0; bands];
        for i in 0..m {
            for b in 0..bands {
                dw[i * bands + b] = dlogits[i] * pooled[b];
                dpooled[b] += c.weight.data()[i * bands + b] * dlogits[i];
            }
        }
        // pooled value b is the mean over spatial positions
        let inv = 1.0 / spatial as f64;
        for (i, v) in upstream.data_mut().iter_mut().enumerate() {
            *v += dpooled[i % bands] * inv;
        }
        classifier_grad = Some((
            DenseTensor::from_dims(&[m, bands], dw)?,
            DenseTensor::from_dims(&[m], dlogits)?,
        ));
    }

    let mut factor_grads = state.factors.environment_all(&upstream)?;

    let pieces = penalty_pieces(state)?;
    let mut u_grads = Vec::with_capacity(state.glr.len());
    let mut v_grads = Vec::with_capacity(state.glr.len());
    for (pair, e) in state.glr.iter().zip(&pieces.residuals) {
        let g = state.factors.factor(pair.mode);
        let d = diff_operator(g.dims()[pair.mode])?;
        // d/dG_k of (alpha/2)||E||^2 with E = D*unfold - UV
        let mut dg_unf = d.transpose()?.matmul(e)?;
        dg_unf.scale(hp.alpha);
        let folded = DenseTensor::fold(&dg_unf, pair.mode, g.shape())?;
        factor_grads[pair.mode].axpy(1.0, &folded)?;
        // Tikhonov on the factor
        factor_grads[pair.mode].axpy(2.0 * hp.lambda3, g)?;

        let mut du = e.matmul(&pair.v.transpose()?)?;
        du.scale(-hp.alpha);
        du.axpy(2.0 * hp.lambda1, &pair.u)?;
        u_grads.push(du);

        let mut dv = pair.u.transpose()?.matmul(e)?;
        dv.scale(-hp.alpha);
        dv.axpy(2.0 * hp.lambda2, &pair.v)?;
        v_grads.push(dv);
    }

    Ok(SdtnGrad {
        factors: factor_grads,
        u: u_grads,
        v: v_grads,
        classifier: classifier_grad,
    })
}

pub fn sdtn_grad(
    state: &SdtnState,
    x: &DenseTensor,
    label: Option<usize>,
    hp: &Hyperparams,
) -> Result<SdtnGrad> {
    sdtn_grad_with_upstream(state, x, label, hp, None)
}

/// In-place gradient step on every optimized array in the state.
pub fn apply_step(state: &mut SdtnState, grad: &SdtnGrad, lr: f64) -> Result<()> {
    for (g, dg) in state.factors.factors_mut().iter_mut().zip(&grad.factors) {
        g.axpy(-lr, dg)?;
    }
    for (pair, (du, dv)) in state.glr.iter_mut().zip(grad.u.iter().zip(&grad.v)) {
        pair.u.axpy(-lr, du)?;
        pair.v.axpy(-lr, dv)?;
    }
    if let (Some(c), Some((dw, db))) = (state.classifier.as_mut(), grad.classifier.as_ref()) {
        c.weight.axpy(-lr, dw)?;
        c.bias.axpy(-lr, db)?;
    }
    Ok(())
}

/// Run gradient descent from an existing state (warm start). Mutates the
/// state in place and extends its loss history.
pub fn fit_state(
    state: &mut SdtnState,
    x: &DenseTensor,
    label: Option<usize>,
    hp: &Hyperparams,
) -> Result<()> {
    hp.validate()?;
    let mut loss = sdtn_loss(state, x, label, hp)?.total();
    if !loss.is_finite() {
        return Err(SdtnError::Divergence { iter: state.iter });
    }
    state.loss_history.push(loss);
    let history_start = state.loss_history.len() - 1;
    for step in 0..hp.max_iters {
        let grad = sdtn_grad(state, x, label, hp)?;
        let mut lr = hp.lr(state.iter);
        if hp.backtracking {
            let saved = state.clone();
            let mut accepted = false;
            for _ in 0..40 {
                apply_step(state, &grad, lr)?;
                let candidate = sdtn_loss(state, x, label, hp)?.total();
                if candidate.is_finite() && candidate <= loss {
                    loss = candidate;
                    accepted = true;
                    break;
                }
                *state = saved.clone();
                lr *= 0.5;
            }
            if !accepted {
                // gradient no longer yields descent at any step size
                state.loss_history.push(loss);
                state.iter += 1;
                break;
            }
        } else {
            apply_step(state, &grad, lr)?;
            loss = sdtn_loss(state, x, label, hp)?.total();
            if !loss.is_finite() {
                return Err(SdtnError::Divergence { iter: state.iter });
            }
        }
        state.loss_history.push(loss);
        state.iter += 1;
        let hist = &state.loss_history[history_start..];
        if hist.len() > STOP_WINDOW {
            let prev = hist[hist.len() - 1 - STOP_WINDOW];
            let cur = hist[hist.len() - 1];
            if (prev - cur).abs() / prev.abs().max(1e-300) < hp.tol {
                break;
            }
        }
        let _ = step;
    }
    Ok(())
}

/// Initialize and fit in one call.
pub fn fit(
    x: &DenseTensor,
    ranks: &RankMatrix,
    glr_ranks: &[usize],
    hp: &Hyperparams,
) -> Result<SdtnState> {
    let mut state = init_state(x.shape(), ranks, glr_ranks, hp.seed)?;
    fit_state(&mut state, x, None, hp)?;
    Ok(state)
}

/// Reconstruction of the fitted factors: the feature tensor handed to the
/// downstream classifier.
pub fn extract_features(state: &SdtnState) -> Result<DenseTensor> {
    state.factors.reconstruct()
}

/// Thresholds for the energy-based rank adaptation pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankPolicy {
    /// Trailing singular-value mass (relative to total) below which bond
    /// directions are dropped.
    pub eps_trunc: f64,
    /// Relative reconstruction error above which every pair rank grows by 1.
    pub eps_grow: f64,
    /// Cap for grown ranks.
    pub rank_max: usize,
}

impl Default for RankPolicy {
    fn default() -> Self {
        RankPolicy {
            eps_trunc: 1e-4,
            eps_grow: 5e-2,
            rank_max: 8,
        }
    }
}

/// One adaptation pass: per bond, gauge the counterpart factor orthonormal,
/// read the bond's singular-value mass, and truncate trailing directions
/// whose aggregate share falls below `eps_trunc`; afterwards, if the relative
/// reconstruction error still exceeds `eps_grow`, grow every pair rank by one
/// (capped). Returns a re-initialized state warm-started from the adapted
/// factors. No-op when no threshold fires.
pub fn adapt_ranks(state: &SdtnState, x: &DenseTensor, policy: &RankPolicy) -> Result<SdtnState> {
    let n = state.factors.order();
    let mut ranks = state.factors.ranks().clone();
    let mut factors: Vec<DenseTensor> = state.factors.factors().to_vec();
    let data_dims = state.factors.data_dims().to_vec();

    for j in 0..n {
        for k in (j + 1)..n {
            let r = ranks.get(j, k);
            if r <= 1 {
                continue;
            }
            // bond (j,k) sits at axis k of G_j and axis j of G_k
            let bj = factors[j].unfold(k)?; // r x rest_j
            let bk = factors[k].unfold(j)?; // r x rest_k

            // gauge: orthonormalize G_j along the bond, push the triangular
            // part into G_k so its bond matricization carries the pair's
            // true singular-value mass
            let a = linalg::to_dmatrix(&bj.transpose()?)?; // rest_j x r
            let qr = a.qr();
            let q = qr.q(); // rest_j x min(rest_j, r)
            let rmat = qr.r(); // min x r
            let bk_m = linalg::to_dmatrix(&bk)?;
            let pushed = &rmat * &bk_m; // min x rest_k

            let svd = linalg::svd(&pushed)?;
            let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
            let cur = svd.singular_values.len();
            let mut keep = cur;
            if total > 0.0 {
                let mut tail = 0.0;
                while keep > 1 {
                    let add = svd.singular_values[keep - 1];
                    if tail + add * add <= policy.eps_trunc * total {
                        tail += add * add;
                        keep -= 1;
                    } else {
                        break;
                    }
                }
            } else {
                keep = 1;
            }

            if keep == r {
                continue;
            }
            // new bond content: G_k gets Sigma' V'^T, G_j gets (Q U')^T
            let u_kept = svd.u.columns(0, keep).into_owned();
            let vt_kept = svd.v_t.rows(0, keep).into_owned();
            let mut sv = vt_kept.clone();
            for (i, mut row) in sv.row_iter_mut().enumerate() {
                row *= svd.singular_values[i];
            }
            let new_bj = (q * u_kept).transpose(); // keep x rest_j
            ranks.set_pair(j, k, keep);
            let dims_j = ranks.factor_dims(j, &data_dims);
            let dims_k = ranks.factor_dims(k, &data_dims);
            factors[j] = DenseTensor::fold(
                &linalg::from_dmatrix(&new_bj),
                k,
                &Shape::new(dims_j)?,
            )?;
            factors[k] = DenseTensor::fold(
                &linalg::from_dmatrix(&sv),
                j,
                &Shape::new(dims_k)?,
            )?;
        }
    }

    // growth: if the truncated network still misses the data, widen every bond
    let trial = FactorSet::new(ranks.clone(), factors.clone())?;
    let rel_err = {
        let rec = trial.reconstruct()?;
        rec.sub(x)?.frobenius_norm() / x.frobenius_norm().max(1e-300)
    };
    if rel_err > policy.eps_grow {
        let mut grown = ranks.clone();
        let mut any = false;
        for j in 0..n {
            for k in (j + 1)..n {
                let r = ranks.get(j, k);
                if r < policy.rank_max {
                    grown.set_pair(j, k, r + 1);
                    any = true;
                }
            }
        }
        if any {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ state.iter as u64);
            let mut new_factors = Vec::with_capacity(n);
            for k in 0..n {
                let dims = grown.factor_dims(k, &data_dims);
                let scale = 1e-2 * factor_init_scale(&grown, k);
                let mut g = uniform_tensor(&dims, scale.max(1e-8), &mut rng);
                embed(&factors[k], &mut g);
                new_factors.push(g);
            }
            ranks = grown;
            factors = new_factors;
        }
    }

    let new_set = FactorSet::new(ranks, factors)?;
    // rebuild the low-rank pairs against the new unfolding widths, capping
    // each r_k where the bond shrank
    let mut rng = ChaCha8Rng::seed_from_u64(0xadab ^ state.iter as u64);
    let mut glr = Vec::with_capacity(n);
    for k in 0..n {
        let dims = new_set.factor(k).dims();
        let cols: usize = dims
            .iter()
            .enumerate()
            .filter(|&(m, _)| m != k)
            .map(|(_, &d)| d)
            .product();
        let rank = state.glr[k].rank.min((dims[k] - 1).min(cols)).max(1);
        glr.push(init_glr_pair(dims, k, rank, &mut rng)?);
    }
    Ok(SdtnState {
        factors: new_set,
        glr,
        classifier: state.classifier.clone(),
        iter: 0,
        loss_history: Vec::new(),
    })
}

/// Copy `small` into the leading block of `big` (same order, extents of
/// `small` bounded by those of `big`).
fn embed(small: &DenseTensor, big: &mut DenseTensor) {
    let n = small.order();
    let sd = small.dims().to_vec();
    let mut idx = vec![0usize; n];
    for &v in small.data() {
        big.set(&idx, v);
        for m in (0..n).rev() {
            idx[m] += 1;
            if idx[m] < sd[m] {
                break;
            }
            idx[m] = 0;
        }
    }
}

/// Fit-then-adapt loop: refits after every adaptation until the ranks stop
/// changing (or `max_rounds` passes).
pub fn fit_adaptive(
    x: &DenseTensor,
    ranks: &RankMatrix,
    glr_ranks: &[usize],
    hp: &Hyperparams,
    policy: &RankPolicy,
    max_rounds: usize,
) -> Result<SdtnState> {
    let mut state = fit(x, ranks, glr_ranks, hp)?;
    for _ in 0..max_rounds {
        let adapted = adapt_ranks(&state, x, policy)?;
        if adapted.factors.ranks() == state.factors.ranks() {
            return Ok(state);
        }
        state = adapted;
        fit_state(&mut state, x, None, hp)?;
    }
    Ok(state)
}
