//! Central finite-difference verification of every analytic gradient in the
//! crate: each network layer, the classification loss, each term of the
//! decomposition objective, and the full joint objective.
//!
//! A [`Case`] packages a scalar function of a parameter list together with
//! its claimed gradient; [`check`] probes a deterministic sample of
//! coordinates with central differences. [`run_all`] assembles >= 20 random
//! instances per component and reports the maximum relative error of each.

use crate::error::Result;
use crate::nn::{self, Conv2dSpec, Conv3dSpec, Graph, Padding, Var};
use crate::sdtn::{
    init_state, sdtn_grad, sdtn_loss, Hyperparams, SdtnGrad, SdtnState,
};
use crate::tensor::{DenseTensor, RankMatrix, Shape};
use crate::trn::{trn_grad, trn_loss, Mode, TrnBatch, TrnConfig, TrnModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::rc::Rc;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Maximum allowed relative error, scale-floored at 1e-2.
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates probed per parameter tensor.
const PROBES: usize = 4;

type EvalFn = dyn Fn(&[DenseTensor]) -> Result<f64>;
type GradFn = dyn Fn(&[DenseTensor]) -> Result<Vec<DenseTensor>>;

/// One differentiable instance: a scalar function of `params` and its
/// claimed analytic gradient, both as closures over the same parameter list.
pub struct Case {
    pub name: String,
    pub params: Vec<DenseTensor>,
    pub eval: Box<EvalFn>,
    pub grad: Box<GradFn>,
}

/// Verify a case: returns the maximum relative error over the probed
/// coordinates of every parameter.
pub fn check(case: &Case) -> Result<f64> {
    let analytic = (case.grad)(&case.params)?;
    let mut params = case.params.clone();
    let mut worst: f64 = 0.0;
    for pi in 0..params.len() {
        let count = params[pi].count();
        for probe in 0..PROBES.min(count) {
            let e = (probe * 7919) % count;
            let orig = params[pi].data()[e];
            params[pi].data_mut()[e] = orig + STEP;
            let up = (case.eval)(&params)?;
            params[pi].data_mut()[e] = orig - STEP;
            let down = (case.eval)(&params)?;
            params[pi].data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * STEP);
            let a = analytic[pi].data()[e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-2);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Verdict for one component family.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Full verification report; deterministic for a fixed seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub components: Vec<ComponentReport>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> DenseTensor {
    let count: usize = dims.iter().product();
    let data: Vec<f64> = (0..count).map(|_| rng.gen_range(lo..hi)).collect();
    DenseTensor::from_dims(dims, data).expect("static dims")
}

/// Random values bounded away from zero, so kinked activations (ReLU) stay
/// on one side of the kink under the finite-difference step.
fn rand_tensor_off_kink(rng: &mut ChaCha8Rng, dims: &[usize]) -> DenseTensor {
    let count: usize = dims.iter().product();
    let data: Vec<f64> = (0..count)
        .map(|_| {
            let mag = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    DenseTensor::from_dims(dims, data).expect("static dims")
}

type BuildFn = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Case whose scalar is built on the reverse-mode graph; the analytic
/// gradient is the graph's own backward pass.
fn graph_case(name: &str, params: Vec<DenseTensor>, build: Rc<BuildFn>) -> Case {
    let b_eval = Rc::clone(&build);
    let b_grad = build;
    Case {
        name: name.to_string(),
        params,
        eval: Box::new(move |ps| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().map(|t| g.leaf(t.clone())).collect();
            let out = b_eval(&mut g, &vars)?;
            Ok(g.scalar(out))
        }),
        grad: Box::new(move |ps| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().map(|t| g.leaf(t.clone())).collect();
            let out = b_grad(&mut g, &vars)?;
            g.backward(out)?;
            Ok(vars.iter().map(|&v| g.grad(v).clone()).collect())
        }),
    }
}

/// ||t||^2 as a graph scalar, for layers whose output is a map.
fn sq_norm_of(g: &mut Graph, v: Var) -> Result<Var> {
    let zeros = g.leaf(DenseTensor::zeros_dims(g.value(v).dims())?);
    g.sq_diff(v, zeros)
}

fn nn_layer_cases(rng: &mut ChaCha8Rng) -> Vec<(String, Vec<Case>)> {
    let mut families: Vec<(String, Vec<Case>)> = Vec::new();
    let mut family = |name: &str, cases: Vec<Case>| {
        families.push((name.to_string(), cases));
    };

    let mut conv3d = Vec::new();
    for _ in 0..20 {
        let (ci, co) = (rng.gen_range(1..3), rng.gen_range(1..3));
        let (d, h, w) = (rng.gen_range(2..4), rng.gen_range(2..4), rng.gen_range(2..4));
        let k = [rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3)];
        let padding = if rng.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
        let spec = Conv3dSpec {
            in_channels: ci,
            out_channels: co,
            kernel: [k[0].min(d), k[1].min(h), k[2].min(w)],
            stride: 1,
            padding,
        };
        let x = rand_tensor(rng, &[ci, d, h, w], -1.0, 1.0);
        let wt = rand_tensor(rng, &spec.weight_dims(), -1.0, 1.0);
        let b = rand_tensor(rng, &[co], -1.0, 1.0);
        let s = spec.clone();
        conv3d.push(graph_case(
            "conv3d",
            vec![x, wt, b],
            Rc::new(move |g, v| {
                let y = g.conv3d(v[0], v[1], v[2], &s)?;
                sq_norm_of(g, y)
            }),
        ));
    }
    family("conv3d", conv3d);

    let mut conv2d = Vec::new();
    for _ in 0..20 {
        let (ci, co) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(2..5), rng.gen_range(2..5));
        let spec = Conv2dSpec {
            in_channels: ci,
            out_channels: co,
            kernel: [rng.gen_range(1..3).min(h), rng.gen_range(1..3).min(w)],
            stride: 1,
            padding: if rng.gen_bool(0.5) { Padding::Same } else { Padding::Valid },
        };
        let x = rand_tensor(rng, &[ci, h, w], -1.0, 1.0);
        let wt = rand_tensor(rng, &spec.weight_dims(), -1.0, 1.0);
        let b = rand_tensor(rng, &[co], -1.0, 1.0);
        let s = spec.clone();
        conv2d.push(graph_case(
            "conv2d",
            vec![x, wt, b],
            Rc::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], &s)?;
                sq_norm_of(g, y)
            }),
        ));
    }
    family("conv2d", conv2d);

    let mut dw = Vec::new();
    for _ in 0..20 {
        let c = rng.gen_range(1..4);
        let (h, w) = (rng.gen_range(3..5), rng.gen_range(3..5));
        let x = rand_tensor(rng, &[c, h, w], -1.0, 1.0);
        let wt = rand_tensor(rng, &[c, 3, 3], -1.0, 1.0);
        let b = rand_tensor(rng, &[c], -1.0, 1.0);
        dw.push(graph_case(
            "depthwise-conv2d",
            vec![x, wt, b],
            Rc::new(move |g, v| {
                let y = g.depthwise_conv2d(v[0], v[1], v[2], Padding::Same)?;
                sq_norm_of(g, y)
            }),
        ));
    }
    family("depthwise-conv2d", dw);

    let mut sep = Vec::new();
    for _ in 0..20 {
        let (c, co) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(3..5), rng.gen_range(3..5));
        let x = rand_tensor(rng, &[c, h, w], -1.0, 1.0);
        let dw_w = rand_tensor(rng, &[c, 3, 3], -1.0, 1.0);
        let dw_b = rand_tensor(rng, &[c], -1.0, 1.0);
        let pw_w = rand_tensor(rng, &[co, c, 1, 1], -1.0, 1.0);
        let pw_b = rand_tensor(rng, &[co], -1.0, 1.0);
        sep.push(graph_case(
            "depthwise-separable",
            vec![x, dw_w, dw_b, pw_w, pw_b],
            Rc::new(move |g, v| {
                let y = nn::depthwise_separable(g, v[0], v[1], v[2], v[3], v[4], Padding::Same)?;
                sq_norm_of(g, y)
            }),
        ));
    }
    family("depthwise-separable", sep);

    let mut concat = Vec::new();
    for _ in 0..20 {
        let (ca, cb) = (rng.gen_range(1..3), rng.gen_range(1..3));
        let (h, w) = (rng.gen_range(2..4), rng.gen_range(2..4));
        let a = rand_tensor(rng, &[ca, h, w], -1.0, 1.0);
        let b = rand_tensor(rng, &[cb, h, w], -1.0, 1.0);
        concat.push(graph_case(
            "concat-channels",
            vec![a, b],
            Rc::new(move |g, v| {
                let y = g.concat_channels(v[0], v[1])?;
                sq_norm_of(g, y)
            }),
        ));
    }
    family("concat-channels", concat);

    let mut gap = Vec::new();
    for _ in 0..20 {
        let c = rng.gen_range(1..5);
        let (h, w) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let x = rand_tensor(rng, &[c, h, w], -1.0, 1.0);
        gap.push(graph_case(
            "gap",
            vec![x],
            Rc::new(move |g, v| {
                let y = g.gap(v[0])?;
                sq_norm_of(g, y)
            }),
        ));
    }
    family("gap", gap);

    let mut affine = Vec::new();
    for _ in 0..20 {
        let (i, o) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let x = rand_tensor(rng, &[i], -1.0, 1.0);
        let w = rand_tensor(rng, &[o, i], -1.0, 1.0);
        let b = rand_tensor(rng, &[o], -1.0, 1.0);
        affine.push(graph_case(
            "affine",
            vec![x, w, b],
            Rc::new(move |g, v| {
                let y = g.affine(v[0], v[1], v[2])?;
                sq_norm_of(g, y)
            }),
        ));
    }
    family("affine", affine);

    let mut relu = Vec::new();
    for _ in 0..20 {
        let n = rng.gen_range(2..8);
        let x = rand_tensor_off_kink(rng, &[n]);
        relu.push(graph_case(
            "relu",
            vec![x],
            Rc::new(move |g, v| {
                let y = g.relu(v[0]);
                sq_norm_of(g, y)
            }),
        ));
    }
    family("relu", relu);

    let mut sigmoid = Vec::new();
    for _ in 0..20 {
        let n = rng.gen_range(2..8);
        let x = rand_tensor(rng, &[n], -2.0, 2.0);
        sigmoid.push(graph_case(
            "sigmoid",
            vec![x],
            Rc::new(move |g, v| {
                let y = g.sigmoid(v[0]);
                sq_norm_of(g, y)
            }),
        ));
    }
    family("sigmoid", sigmoid);

    let mut att = Vec::new();
    for _ in 0..20 {
        let c = rng.gen_range(2..5);
        let hdim = nn::attention_hidden(c, 2);
        let (h, w) = (rng.gen_range(2..4), rng.gen_range(2..4));
        let x = rand_tensor(rng, &[c, h, w], -1.0, 1.0);
        let w1 = rand_tensor(rng, &[hdim, c], -1.0, 1.0);
        let b1 = rand_tensor_off_kink(rng, &[hdim]);
        let w2 = rand_tensor(rng, &[c, hdim], -1.0, 1.0);
        let b2 = rand_tensor(rng, &[c], -1.0, 1.0);
        att.push(graph_case(
            "channel-attention",
            vec![x, w1, b1, w2, b2],
            Rc::new(move |g, v| {
                let y = nn::channel_attention(g, v[0], v[1], v[2], v[3], v[4])?;
                sq_norm_of(g, y)
            }),
        ));
    }
    family("channel-attention", att);

    let mut softmax = Vec::new();
    for _ in 0..20 {
        let n = rng.gen_range(2..6);
        let x = rand_tensor(rng, &[n], -2.0, 2.0);
        softmax.push(graph_case(
            "softmax",
            vec![x],
            Rc::new(move |g, v| {
                let y = g.softmax(v[0])?;
                sq_norm_of(g, y)
            }),
        ));
    }
    family("softmax", softmax);

    let mut xent = Vec::new();
    for _ in 0..20 {
        let n = rng.gen_range(2..6);
        let label = rng.gen_range(0..n);
        let x = rand_tensor(rng, &[n], -2.0, 2.0);
        xent.push(graph_case(
            "classification-loss",
            vec![x],
            Rc::new(move |g, v| g.softmax_xent(v[0], label)),
        ));
    }
    family("classification-loss", xent);

    families
}

/// Rebuild a state from the flat parameter list used by the term cases:
/// factors, then every U, then every V, then (optionally) classifier W, b.
fn state_from_params(template: &SdtnState, params: &[DenseTensor]) -> SdtnState {
    let n = template.factors.factors().len();
    let mut state = template.clone();
    for k in 0..n {
        state.factors.factors_mut()[k] = params[k].clone();
    }
    for k in 0..n {
        state.glr[k].u = params[n + k].clone();
        state.glr[k].v = params[2 * n + k].clone();
    }
    if let Some(c) = state.classifier.as_mut() {
        c.weight = params[3 * n].clone();
        c.bias = params[3 * n + 1].clone();
    }
    state
}

fn state_params(state: &SdtnState) -> Vec<DenseTensor> {
    let mut params: Vec<DenseTensor> = state.factors.factors().to_vec();
    for pair in &state.glr {
        params.push(pair.u.clone());
    }
    for pair in &state.glr {
        params.push(pair.v.clone());
    }
    if let Some(c) = &state.classifier {
        params.push(c.weight.clone());
        params.push(c.bias.clone());
    }
    params
}

fn flatten_grad(grad: &SdtnGrad, with_classifier: bool) -> Vec<DenseTensor> {
    let mut out = grad.factors.clone();
    out.extend(grad.u.iter().cloned());
    out.extend(grad.v.iter().cloned());
    if with_classifier {
        let (dw, db) = grad.classifier.clone().expect("classifier grads");
        out.push(dw);
        out.push(db);
    }
    out
}

fn sub_grads(a: Vec<DenseTensor>, b: Vec<DenseTensor>) -> Result<Vec<DenseTensor>> {
    a.into_iter().zip(b).map(|(x, y)| x.sub(&y)).collect()
}

/// A random decomposition instance with noise-free random data.
fn random_sdtn_instance(
    rng: &mut ChaCha8Rng,
    supervised: bool,
) -> Result<(SdtnState, DenseTensor)> {
    let dims = vec![
        rng.gen_range(2..4usize),
        rng.gen_range(2..4usize),
        rng.gen_range(2..4usize),
    ];
    let ranks = RankMatrix::uniform(3, 2)?;
    let x = rand_tensor(rng, &dims, -1.0, 1.0);
    let mut state = init_state(&Shape::new(dims)?, &ranks, &[1, 1, 1], rng.gen())?;
    // move U/V off their zero init so their gradients are informative
    for pair in &mut state.glr {
        let u = rand_tensor(rng, pair.u.dims(), -0.5, 0.5);
        pair.u = u;
    }
    if supervised {
        state = state.with_classifier(2, rng.gen())?;
        let c = state.classifier.as_mut().unwrap();
        c.weight = rand_tensor(rng, c.weight.dims(), -0.5, 0.5);
        c.bias = rand_tensor(rng, c.bias.dims(), -0.5, 0.5);
    }
    Ok((state, x))
}

/// One case for an isolated objective term, realized as a difference of the
/// full gradient with and without the term's coefficient.
fn sdtn_term_case(
    name: &'static str,
    rng: &mut ChaCha8Rng,
) -> Result<Case> {
    let supervised = name == "sdtn-classification" || name == "sdtn-full";
    let (state, x) = random_sdtn_instance(rng, supervised)?;
    let label = if supervised { Some(1 + (rng.gen::<usize>() % 2)) } else { None };
    let mut hp = Hyperparams::default();
    hp.alpha = 0.0;
    hp.lambda1 = 0.0;
    hp.lambda2 = 0.0;
    hp.lambda3 = 0.0;
    hp.beta = 0.0;
    let base_hp = hp.clone();
    match name {
        "sdtn-reconstruction" => {}
        "sdtn-gradient-penalty" => hp.alpha = 0.7,
        "sdtn-regularization" => {
            hp.lambda1 = 0.3;
            hp.lambda2 = 0.2;
            hp.lambda3 = 0.4;
        }
        "sdtn-classification" => hp.beta = 0.8,
        "sdtn-full" => {
            hp.alpha = 0.7;
            hp.lambda1 = 0.3;
            hp.lambda2 = 0.2;
            hp.lambda3 = 0.4;
            hp.beta = 0.8;
        }
        other => panic!("unknown term family {other}"),
    }
    let params = state_params(&state);
    let template_eval = state.clone();
    let template_grad = state.clone();
    let (x_eval, x_grad) = (x.clone(), x);
    let (hp_eval, hp_grad) = (hp.clone(), hp);
    let isolate = name != "sdtn-full";
    let term_label = label;
    Ok(Case {
        name: name.to_string(),
        params,
        eval: Box::new(move |ps| {
            let s = state_from_params(&template_eval, ps);
            let terms = sdtn_loss(&s, &x_eval, term_label, &hp_eval)?;
            Ok(match name {
                "sdtn-reconstruction" => terms.reconstruction,
                "sdtn-gradient-penalty" => terms.gradient_penalty,
                "sdtn-regularization" => terms.regularization,
                "sdtn-classification" => terms.classification,
                _ => terms.total(),
            })
        }),
        grad: Box::new(move |ps| {
            let s = state_from_params(&template_grad, ps);
            let full = flatten_grad(&sdtn_grad(&s, &x_grad, term_label, &hp_grad)?, supervised);
            if !isolate {
                return Ok(full);
            }
            // subtract the reconstruction-only gradient to isolate the term
            let base = sdtn_grad(&s, &x_grad, None, &base_hp)?;
            let mut base = flatten_grad(&base, false);
            if supervised {
                // unsupervised pass carries no classifier entries
                base.push(DenseTensor::zeros_dims(full[full.len() - 2].dims())?);
                base.push(DenseTensor::zeros_dims(full[full.len() - 1].dims())?);
            }
            let mut isolated = sub_grads(full, base)?;
            if name == "sdtn-reconstruction" {
                // the term *is* the base; return it as-is
                isolated = flatten_grad(&sdtn_grad(&s, &x_grad, None, &base_hp)?, false);
            }
            Ok(isolated)
        }),
    })
}

fn joint_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let cfg = TrnConfig {
        patch_size: 3,
        bands: 2,
        n_classes: 2,
        mode: Mode::Trn,
        conv3d: Conv3dSpec {
            in_channels: 1,
            out_channels: 1,
            kernel: [2, 2, 2],
            stride: 1,
            padding: Padding::Same,
        },
        conv2d: Conv2dSpec {
            in_channels: 2,
            out_channels: 2,
            kernel: [2, 2],
            stride: 1,
            padding: Padding::Same,
        },
        dw_kernel: [3, 3],
        fused_channels: 2,
        attention_reduction: 2,
    };
    let mut model = TrnModel::init(cfg, rng.gen())?;
    for p in &mut model.params {
        for v in p.data_mut() {
            *v = rng.gen_range(-0.4..0.4);
        }
    }
    let patch = rand_tensor(rng, &[3, 3, 2], -1.0, 1.0);
    let ranks = RankMatrix::uniform(3, 2)?;
    let state = init_state(&Shape::new(vec![3, 3, 2])?, &ranks, &[1, 1, 1], rng.gen())?;
    let label = 1 + (rng.gen::<usize>() % 2);
    let mut hp = Hyperparams::default();
    hp.alpha = 0.3;
    hp.beta = 0.7;
    hp.gamma = 0.2;
    let n_model = model.params.len();
    let mut params = model.params.clone();
    params.extend(state_params(&state));
    let batch = TrnBatch::new(vec![patch], vec![label], 2)?;
    let (model_e, model_g) = (model.clone(), model);
    let (state_e, state_g) = (state.clone(), state);
    let (batch_e, batch_g) = (batch.clone(), batch);
    let (hp_e, hp_g) = (hp.clone(), hp);
    Ok(Case {
        name: "joint-objective".to_string(),
        params,
        eval: Box::new(move |ps| {
            let mut m = model_e.clone();
            m.params = ps[..n_model].to_vec();
            let s = state_from_params(&state_e, &ps[n_model..]);
            Ok(trn_loss(&m, &[s], &batch_e, &hp_e)?.total())
        }),
        grad: Box::new(move |ps| {
            let mut m = model_g.clone();
            m.params = ps[..n_model].to_vec();
            let s = state_from_params(&state_g, &ps[n_model..]);
            let (mg, sg, _) = trn_grad(&m, &[s], &batch_g, &hp_g)?;
            let mut out = mg;
            out.extend(flatten_grad(&sg[0], false));
            Ok(out)
        }),
    })
}

/// Run every verification family with >= 20 instances each.
pub fn run_all(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut components = Vec::new();
    let mut run_family = |name: &str, cases: Vec<Case>| -> Result<()> {
        let mut worst: f64 = 0.0;
        let instances = cases.len();
        for case in &cases {
            worst = worst.max(check(case)?);
        }
        components.push(ComponentReport {
            name: name.to_string(),
            instances,
            max_rel_error: worst,
            passed: worst <= TOLERANCE,
        });
        Ok(())
    };
    for (name, cases) in nn_layer_cases(&mut rng) {
        run_family(&name, cases)?;
    }
    for term in [
        "sdtn-reconstruction",
        "sdtn-gradient-penalty",
        "sdtn-regularization",
        "sdtn-classification",
        "sdtn-full",
    ] {
        let cases: Vec<Case> = (0..20)
            .map(|_| sdtn_term_case(term, &mut rng))
            .collect::<Result<_>>()?;
        run_family(term, cases)?;
    }
    let cases: Vec<Case> = (0..20).map(|_| joint_case(&mut rng)).collect::<Result<_>>()?;
    run_family("joint-objective", cases)?;
    Ok(CheckReport {
        seed,
        tolerance: TOLERANCE,
        components,
    })
}
