//! The classification stage: dual 3D/2D convolution pathways over the
//! tensor-network features, depthwise-separable fusion with channel
//! attention, and an affine classification head, trained jointly with the
//! per-patch decomposition.
//!
//! Three operating modes share the machinery: the full model (`Trn`), the
//! decomposition with a plain pooled classifier head (`SdtnOnly`), and the
//! ablation that feeds raw patches through the network with every tensor
//! term disabled (`CnnBaseline`).

use crate::data::{extract_patch, HsiScene};
use crate::error::{Result, SdtnError};
use crate::nn::{
    channel_attention, depthwise_separable, sgd_step, Conv2dSpec, Conv3dSpec, Graph, Padding, Var,
};
use crate::sdtn::{
    apply_step, fit, sdtn_grad_with_upstream, sdtn_loss, Hyperparams, SdtnGrad, SdtnState,
};
use crate::tensor::{DenseTensor, RankMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Full joint model: decomposition features into the dual-pathway net.
    Trn,
    /// Decomposition features into a pooled affine classifier only.
    SdtnOnly,
    /// Raw patches into the net; all tensor terms disabled.
    CnnBaseline,
}

/// Architecture of the classification network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrnConfig {
    pub patch_size: usize,
    pub bands: usize,
    pub n_classes: usize,
    pub mode: Mode,
    pub conv3d: Conv3dSpec,
    pub conv2d: Conv2dSpec,
    pub dw_kernel: [usize; 2],
    pub fused_channels: usize,
    pub attention_reduction: usize,
}

impl TrnConfig {
    /// Paper-scale defaults: 8 spectral-spatial 3D filters (7x3x3), 16
    /// spatial 2D filters (3x3), 32 fused channels, attention reduction 4.
    pub fn defaults(patch_size: usize, bands: usize, n_classes: usize, mode: Mode) -> Self {
        TrnConfig {
            patch_size,
            bands,
            n_classes,
            mode,
            conv3d: Conv3dSpec {
                in_channels: 1,
                out_channels: 8,
                kernel: [7, 3, 3],
                stride: 1,
                padding: Padding::Same,
            },
            conv2d: Conv2dSpec {
                in_channels: bands,
                out_channels: 16,
                kernel: [3, 3],
                stride: 1,
                padding: Padding::Same,
            },
            dw_kernel: [3, 3],
            fused_channels: 32,
            attention_reduction: 4,
        }
    }

    /// Channel count entering the fusion block:
    /// conv3d filters x bands (flattened) + conv2d filters.
    pub fn fused_in_channels(&self) -> usize {
        self.conv3d.out_channels * self.bands + self.conv2d.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size % 2 == 0 || self.patch_size == 0 {
            return Err(SdtnError::Config(format!(
                "patch size {} must be odd",
                self.patch_size
            )));
        }
        if self.n_classes < 2 {
            return Err(SdtnError::Config("need at least 2 classes".into()));
        }
        if self.bands == 0 {
            return Err(SdtnError::Config("band count must be positive".into()));
        }
        if self.mode != Mode::SdtnOnly {
            if self.conv3d.in_channels != 1 {
                return Err(SdtnError::Config(
                    "3D pathway expects a single input channel".into(),
                ));
            }
            if self.conv2d.in_channels != self.bands {
                return Err(SdtnError::Config(format!(
                    "2D pathway input channels {} must equal band count {}",
                    self.conv2d.in_channels, self.bands
                )));
            }
            if self.conv3d.stride != 1
                || self.conv2d.stride != 1
                || self.conv3d.padding != Padding::Same
                || self.conv2d.padding != Padding::Same
            {
                return Err(SdtnError::Config(
                    "pathways must use stride 1 and same padding so the fused maps align".into(),
                ));
            }
            if self.fused_channels == 0 || self.attention_reduction == 0 {
                return Err(SdtnError::Config(
                    "fused channels and attention reduction must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// A labeled stack of patches (the full training batch).
#[derive(Debug, Clone)]
pub struct TrnBatch {
    pub patches: Vec<DenseTensor>,
    /// 1-based class ids, parallel to `patches`.
    pub labels: Vec<usize>,
}

impl TrnBatch {
    pub fn new(patches: Vec<DenseTensor>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if patches.len() != labels.len() {
            return Err(SdtnError::Shape(format!(
                "{} patches but {} labels",
                patches.len(),
                labels.len()
            )));
        }
        if patches.is_empty() {
            return Err(SdtnError::Value("batch is empty".into()));
        }
        for &l in &labels {
            if l < 1 || l > n_classes {
                return Err(SdtnError::Value(format!(
                    "label {l} outside 1..={n_classes}"
                )));
            }
        }
        Ok(TrnBatch { patches, labels })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Network parameters, ordered as in [`TrnModel::param_names`].
#[derive(Debug, Clone)]
pub struct TrnModel {
    pub config: TrnConfig,
    pub params: Vec<DenseTensor>,
}

fn glorot(dims: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> DenseTensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let count: usize = dims.iter().product();
    let data: Vec<f64> = (0..count).map(|_| rng.gen_range(-bound..bound)).collect();
    DenseTensor::from_dims(dims, data).expect("static dims")
}

/// Handles into a built forward graph.
pub struct BuiltNet {
    pub input: Var,
    pub logits: Var,
    /// Post-attention feature map (absent in `SdtnOnly` mode).
    pub fused: Option<Var>,
    /// Raw squared distance between the input and its reprojection from the
    /// fused features (present only when the model carries a projection).
    pub consistency: Option<Var>,
    pub params: Vec<Var>,
}

impl TrnModel {
    pub fn param_names(&self) -> Vec<&'static str> {
        match self.config.mode {
            Mode::SdtnOnly => vec!["classifier.weight", "classifier.bias"],
            Mode::Trn => vec![
                "conv3d.weight",
                "conv3d.bias",
                "conv2d.weight",
                "conv2d.bias",
                "depthwise.weight",
                "depthwise.bias",
                "pointwise.weight",
                "pointwise.bias",
                "attention.fc1.weight",
                "attention.fc1.bias",
                "attention.fc2.weight",
                "attention.fc2.bias",
                "classifier.weight",
                "classifier.bias",
                "projection.weight",
                "projection.bias",
            ],
            Mode::CnnBaseline => vec![
                "conv3d.weight",
                "conv3d.bias",
                "conv2d.weight",
                "conv2d.bias",
                "depthwise.weight",
                "depthwise.bias",
                "pointwise.weight",
                "pointwise.bias",
                "attention.fc1.weight",
                "attention.fc1.bias",
                "attention.fc2.weight",
                "attention.fc2.bias",
                "classifier.weight",
                "classifier.bias",
            ],
        }
    }

    /// Glorot-uniform convolution and attention weights, zero biases, and a
    /// zeroed classification head (an untrained model is exactly uniform).
    pub fn init(config: TrnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11);
        let (p, b, m) = (config.patch_size, config.bands, config.n_classes);
        let mut params = Vec::new();
        if config.mode == Mode::SdtnOnly {
            params.push(DenseTensor::zeros_dims(&[m, b])?);
            params.push(DenseTensor::zeros_dims(&[m])?);
            return Ok(TrnModel { config, params });
        }
        let k3: usize = config.conv3d.kernel.iter().product();
        params.push(glorot(
            &config.conv3d.weight_dims(),
            config.conv3d.in_channels * k3,
            config.conv3d.out_channels * k3,
            &mut rng,
        ));
        params.push(DenseTensor::zeros_dims(&[config.conv3d.out_channels])?);
        let k2: usize = config.conv2d.kernel.iter().product();
        params.push(glorot(
            &config.conv2d.weight_dims(),
            config.conv2d.in_channels * k2,
            config.conv2d.out_channels * k2,
            &mut rng,
        ));
        params.push(DenseTensor::zeros_dims(&[config.conv2d.out_channels])?);
        let c = config.fused_in_channels();
        let kd: usize = config.dw_kernel.iter().product();
        params.push(glorot(
            &[c, config.dw_kernel[0], config.dw_kernel[1]],
            kd,
            kd,
            &mut rng,
        ));
        params.push(DenseTensor::zeros_dims(&[c])?);
        let f = config.fused_channels;
        params.push(glorot(&[f, c, 1, 1], c, f, &mut rng));
        params.push(DenseTensor::zeros_dims(&[f])?);
        let h = crate::nn::attention_hidden(f, config.attention_reduction);
        params.push(glorot(&[h, f], f, h, &mut rng));
        params.push(DenseTensor::zeros_dims(&[h])?);
        params.push(glorot(&[f, h], h, f, &mut rng));
        params.push(DenseTensor::zeros_dims(&[f])?);
        params.push(DenseTensor::zeros_dims(&[m, f * p * p])?);
        params.push(DenseTensor::zeros_dims(&[m])?);
        if config.mode == Mode::Trn {
            params.push(glorot(&[b, f, 1, 1], f, b, &mut rng));
            params.push(DenseTensor::zeros_dims(&[b])?);
        }
        Ok(TrnModel { config, params })
    }

    /// Build the forward pass for one `[P, P, B]` input into `g`.
    pub fn build(&self, g: &mut Graph, h: &DenseTensor) -> Result<BuiltNet> {
        let (p, b) = (self.config.patch_size, self.config.bands);
        if h.dims() != [p, p, b] {
            return Err(SdtnError::Shape(format!(
                "input dims {:?} do not match configured [{p}, {p}, {b}]",
                h.dims()
            )));
        }
        let input = g.leaf(h.clone());
        let chw = g.permute(input, &[2, 0, 1])?;
        let params: Vec<Var> = self.params.iter().map(|t| g.leaf(t.clone())).collect();
        if self.config.mode == Mode::SdtnOnly {
            let pooled = g.gap(chw)?;
            let logits = g.affine(pooled, params[0], params[1])?;
            return Ok(BuiltNet {
                input,
                logits,
                fused: None,
                consistency: None,
                params,
            });
        }
        let x3 = g.reshape(chw, &[1, b, p, p])?;
        let c3 = g.conv3d(x3, params[0], params[1], &self.config.conv3d)?;
        let c3 = g.relu(c3);
        let c3 = g.reshape(c3, &[self.config.conv3d.out_channels * b, p, p])?;
        let c2 = g.conv2d(chw, params[2], params[3], &self.config.conv2d)?;
        let c2 = g.relu(c2);
        let cat = g.concat_channels(c3, c2)?;
        let ds = depthwise_separable(
            g,
            cat,
            params[4],
            params[5],
            params[6],
            params[7],
            Padding::Same,
        )?;
        let ds = g.relu(ds);
        let fused = channel_attention(g, ds, params[8], params[9], params[10], params[11])?;
        let flat = g.reshape(fused, &[self.config.fused_channels * p * p])?;
        let logits = g.affine(flat, params[12], params[13])?;
        let consistency = if self.config.mode == Mode::Trn {
            let spec = Conv2dSpec {
                in_channels: self.config.fused_channels,
                out_channels: b,
                kernel: [1, 1],
                stride: 1,
                padding: Padding::Valid,
            };
            let proj = g.conv2d(fused, params[14], params[15], &spec)?;
            Some(g.sq_diff(chw, proj)?)
        } else {
            None
        };
        Ok(BuiltNet {
            input,
            logits,
            fused: Some(fused),
            consistency,
            params,
        })
    }

    /// Class probabilities for one input.
    pub fn forward(&self, h: &DenseTensor) -> Result<Vec<f64>> {
        Ok(self.forward_parts(h)?.0)
    }

    /// Probabilities plus the fused feature map (when the mode has one),
    /// for term-by-term inspection.
    pub fn forward_parts(&self, h: &DenseTensor) -> Result<(Vec<f64>, Option<DenseTensor>)> {
        let mut g = Graph::new();
        let net = self.build(&mut g, h)?;
        let probs = g.softmax(net.logits)?;
        let fused = net.fused.map(|v| g.value(v).clone());
        Ok((g.value(probs).data().to_vec(), fused))
    }

    /// Argmax class (1-based); ties break to the lowest id.
    pub fn predict(&self, h: &DenseTensor) -> Result<usize> {
        let probs = self.forward(h)?;
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        Ok(best + 1)
    }
}

/// The joint objective, term by term. Tensor terms are sums over the batch;
/// classification is the batch-mean cross-entropy scaled by beta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrnLossTerms {
    pub reconstruction: f64,
    pub gradient_penalty: f64,
    pub regularization: f64,
    pub classification: f64,
    pub consistency: f64,
}

impl TrnLossTerms {
    pub fn total(&self) -> f64 {
        self.reconstruction
            + self.gradient_penalty
            + self.regularization
            + self.classification
            + self.consistency
    }
}

fn check_batch(model: &TrnModel, states: &[SdtnState], batch: &TrnBatch) -> Result<()> {
    if batch.patches.is_empty() {
        return Err(SdtnError::Value("batch is empty".into()));
    }
    for &l in &batch.labels {
        if l < 1 || l > model.config.n_classes {
            return Err(SdtnError::Value(format!(
                "label {l} outside 1..={}",
                model.config.n_classes
            )));
        }
    }
    match model.config.mode {
        Mode::CnnBaseline => {
            if !states.is_empty() {
                return Err(SdtnError::Value(
                    "baseline mode takes no decomposition states".into(),
                ));
            }
        }
        _ => {
            if states.len() != batch.patches.len() {
                return Err(SdtnError::Shape(format!(
                    "{} states for {} patches",
                    states.len(),
                    batch.patches.len()
                )));
            }
        }
    }
    Ok(())
}

struct PatchPass {
    model_grads: Vec<DenseTensor>,
    input_grad: DenseTensor,
    xent: f64,
    consistency: f64,
}

fn patch_pass(model: &TrnModel, h: &DenseTensor, label: usize, hp: &Hyperparams, n: usize) -> Result<PatchPass> {
    let mut g = Graph::new();
    let net = model.build(&mut g, h)?;
    let xent = g.softmax_xent(net.logits, label - 1)?;
    let mut loss = g.scale(xent, hp.beta / n as f64);
    let mut cons_val = 0.0;
    if let Some(cons) = net.consistency {
        cons_val = g.scalar(cons);
        let scaled = g.scale(cons, hp.gamma);
        loss = g.add(loss, scaled)?;
    }
    g.backward(loss)?;
    Ok(PatchPass {
        model_grads: net.params.iter().map(|&v| g.grad(v).clone()).collect(),
        input_grad: g.grad(net.input).clone(),
        xent: g.scalar(xent),
        consistency: cons_val,
    })
}

/// Full-batch gradients of the joint objective with respect to the network
/// parameters and every per-patch decomposition state, plus the loss terms.
pub fn trn_grad(
    model: &TrnModel,
    states: &[SdtnState],
    batch: &TrnBatch,
    hp: &Hyperparams,
) -> Result<(Vec<DenseTensor>, Vec<SdtnGrad>, TrnLossTerms)> {
    check_batch(model, states, batch)?;
    let n = batch.len();
    let mut model_grads: Vec<DenseTensor> = model
        .params
        .iter()
        .map(|t| DenseTensor::zeros_dims(t.dims()).expect("valid dims"))
        .collect();
    let mut sdtn_grads = Vec::new();
    let mut terms = TrnLossTerms {
        reconstruction: 0.0,
        gradient_penalty: 0.0,
        regularization: 0.0,
        classification: 0.0,
        consistency: 0.0,
    };
    let mut xent_sum = 0.0;
    let mut cons_sum = 0.0;
    for i in 0..n {
        let h = match model.config.mode {
            Mode::CnnBaseline => batch.patches[i].clone(),
            _ => states[i].factors.reconstruct()?,
        };
        let pass = patch_pass(model, &h, batch.labels[i], hp, n)?;
        for (acc, g) in model_grads.iter_mut().zip(&pass.model_grads) {
            acc.axpy(1.0, g)?;
        }
        xent_sum += pass.xent;
        cons_sum += pass.consistency;
        if model.config.mode != Mode::CnnBaseline {
            let lt = sdtn_loss(&states[i], &batch.patches[i], None, hp)?;
            terms.reconstruction += lt.reconstruction;
            terms.gradient_penalty += lt.gradient_penalty;
            terms.regularization += lt.regularization;
            sdtn_grads.push(sdtn_grad_with_upstream(
                &states[i],
                &batch.patches[i],
                None,
                hp,
                Some(&pass.input_grad),
            )?);
        }
    }
    terms.classification = hp.beta * xent_sum / n as f64;
    terms.consistency = hp.gamma * cons_sum;
    Ok((model_grads, sdtn_grads, terms))
}

/// The joint objective without gradients.
pub fn trn_loss(
    model: &TrnModel,
    states: &[SdtnState],
    batch: &TrnBatch,
    hp: &Hyperparams,
) -> Result<TrnLossTerms> {
    let (_, _, terms) = trn_grad(model, states, batch, hp)?;
    Ok(terms)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub lr: f64,
    pub reconstruction: f64,
    pub gradient_penalty: f64,
    pub regularization: f64,
    pub classification: f64,
    pub consistency: f64,
    pub total: f64,
}

const STOP_WINDOW: usize = 50;

/// Fit one unsupervised decomposition per patch (parallel across patches;
/// each fit is seeded from `hp.seed` plus the patch index).
pub fn fit_patch_states(
    patches: &[DenseTensor],
    ranks: &RankMatrix,
    glr_ranks: &[usize],
    hp: &Hyperparams,
) -> Result<Vec<SdtnState>> {
    patches
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut hp_i = hp.clone();
            hp_i.seed = hp.seed.wrapping_add(i as u64);
            fit(x, ranks, glr_ranks, &hp_i)
        })
        .collect()
}

/// Joint full-batch gradient descent on the network and the per-patch
/// decompositions. `on_iter` receives one record per iteration.
pub fn train(
    model: &mut TrnModel,
    states: &mut [SdtnState],
    batch: &TrnBatch,
    hp: &Hyperparams,
    max_iters: usize,
    mut on_iter: impl FnMut(&TrainRecord),
) -> Result<()> {
    hp.validate()?;
    check_batch(model, states, batch)?;
    let mut history: Vec<f64> = Vec::new();
    for iter in 0..max_iters {
        let (model_grads, sdtn_grads, terms) = trn_grad(model, states, batch, hp)?;
        let total = terms.total();
        if !total.is_finite() {
            return Err(SdtnError::Divergence { iter });
        }
        let lr = hp.lr(iter);
        on_iter(&TrainRecord {
            iter,
            lr,
            reconstruction: terms.reconstruction,
            gradient_penalty: terms.gradient_penalty,
            regularization: terms.regularization,
            classification: terms.classification,
            consistency: terms.consistency,
            total,
        });
        sgd_step(&mut model.params, &model_grads, iter, hp)?;
        for (state, grad) in states.iter_mut().zip(&sdtn_grads) {
            apply_step(state, grad, lr)?;
        }
        history.push(total);
        if history.len() > STOP_WINDOW {
            let prev = history[history.len() - 1 - STOP_WINDOW];
            if (prev - total).abs() / prev.abs().max(1e-300) < hp.tol {
                break;
            }
        }
    }
    Ok(())
}

fn nearest_state<'a>(
    coords: &[(usize, usize)],
    states: &'a [SdtnState],
    row: usize,
    col: usize,
) -> &'a SdtnState {
    let mut best = 0;
    let mut best_d = usize::MAX;
    for (i, &(r, c)) in coords.iter().enumerate() {
        let dr = r.abs_diff(row);
        let dc = c.abs_diff(col);
        let d = dr * dr + dc * dc;
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    &states[best]
}

/// Classify every pixel of a scene. Non-baseline modes refit the
/// decomposition per pixel, warm-started from the nearest training patch.
/// Pixels are independent and processed in parallel; output is a row-major
/// `[H, W]` label image.
pub fn predict_map(
    model: &TrnModel,
    scene: &HsiScene,
    train_coords: &[(usize, usize)],
    train_states: &[SdtnState],
    hp: &Hyperparams,
    infer_iters: usize,
) -> Result<Vec<u16>> {
    if scene.bands() != model.config.bands {
        return Err(SdtnError::Shape(format!(
            "scene has {} bands, model expects {}",
            scene.bands(),
            model.config.bands
        )));
    }
    let refit = model.config.mode != Mode::CnnBaseline;
    if refit && (train_states.is_empty() || train_states.len() != train_coords.len()) {
        return Err(SdtnError::Value(
            "per-pixel refit needs one state per training coordinate".into(),
        ));
    }
    let (h, w) = (scene.height(), scene.width());
    let mut hp_inf = hp.clone();
    hp_inf.max_iters = infer_iters;
    (0..h * w)
        .into_par_iter()
        .map(|idx| {
            let (row, col) = (idx / w, idx % w);
            let patch = extract_patch(scene, row, col, model.config.patch_size)?;
            let features = if refit {
                let mut state = nearest_state(train_coords, train_states, row, col).clone();
                crate::sdtn::fit_state(&mut state, &patch, None, &hp_inf)?;
                state.factors.reconstruct()?
            } else {
                patch
            };
            Ok(model.predict(&features)? as u16)
        })
        .collect()
}

#[cfg(test)]
mod tests;
