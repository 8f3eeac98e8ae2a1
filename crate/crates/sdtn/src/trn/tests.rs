use super::*;
use crate::sdtn::sdtn_grad;
use rand::Rng;

fn tiny_config(mode: Mode) -> TrnConfig {
    TrnConfig {
        patch_size: 5,
        bands: 4,
        n_classes: 2,
        mode,
        conv3d: Conv3dSpec {
            in_channels: 1,
            out_channels: 2,
            kernel: [3, 3, 3],
            stride: 1,
            padding: Padding::Same,
        },
        conv2d: Conv2dSpec {
            in_channels: 4,
            out_channels: 3,
            kernel: [3, 3],
            stride: 1,
            padding: Padding::Same,
        },
        dw_kernel: [3, 3],
        fused_channels: 4,
        attention_reduction: 2,
    }
}

fn rand_patch(rng: &mut ChaCha8Rng, p: usize, b: usize) -> DenseTensor {
    let data: Vec<f64> = (0..p * p * b).map(|_| rng.gen_range(-1.0..1.0)).collect();
    DenseTensor::from_dims(&[p, p, b], data).unwrap()
}

fn randomize(model: &mut TrnModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in &mut model.params {
        for v in p.data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
}

fn quick_states(patches: &[DenseTensor], hp: &Hyperparams, iters: usize) -> Vec<SdtnState> {
    let n = patches[0].order();
    let ranks = RankMatrix::uniform(n, 2).unwrap();
    let mut hp = hp.clone();
    hp.max_iters = iters;
    fit_patch_states(patches, &ranks, &[1; 3], &hp).unwrap()
}

#[test]
fn untrained_model_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for mode in [Mode::Trn, Mode::CnnBaseline, Mode::SdtnOnly] {
        let model = TrnModel::init(tiny_config(mode), 3).unwrap();
        let probs = model.forward(&rand_patch(&mut rng, 5, 4)).unwrap();
        assert_eq!(probs.len(), 2);
        for p in &probs {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }
}

#[test]
fn probabilities_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut model = TrnModel::init(tiny_config(Mode::Trn), 3).unwrap();
    randomize(&mut model, 7);
    for _ in 0..5 {
        let probs = model.forward(&rand_patch(&mut rng, 5, 4)).unwrap();
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn forward_matches_hand_composed_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = tiny_config(Mode::Trn);
    let mut model = TrnModel::init(cfg.clone(), 5).unwrap();
    randomize(&mut model, 11);
    let h = rand_patch(&mut rng, 5, 4);

    // independent composition of the pipeline from the nn primitives
    let mut g = Graph::new();
    let input = g.leaf(h.clone());
    let chw = g.permute(input, &[2, 0, 1]).unwrap();
    let pv: Vec<Var> = model.params.iter().map(|t| g.leaf(t.clone())).collect();
    let x3 = g.reshape(chw, &[1, 4, 5, 5]).unwrap();
    let c3 = g.conv3d(x3, pv[0], pv[1], &cfg.conv3d).unwrap();
    let c3 = g.relu(c3);
    let c3 = g.reshape(c3, &[8, 5, 5]).unwrap();
    let c2 = g.conv2d(chw, pv[2], pv[3], &cfg.conv2d).unwrap();
    let c2 = g.relu(c2);
    let cat = g.concat_channels(c3, c2).unwrap();
    let dw = g.depthwise_conv2d(cat, pv[4], pv[5], Padding::Same).unwrap();
    let pw_spec = Conv2dSpec {
        in_channels: 11,
        out_channels: 4,
        kernel: [1, 1],
        stride: 1,
        padding: Padding::Valid,
    };
    let pw = g.conv2d(dw, pv[6], pv[7], &pw_spec).unwrap();
    let act = g.relu(pw);
    let pooled = g.gap(act).unwrap();
    let a1 = g.affine(pooled, pv[8], pv[9]).unwrap();
    let a1 = g.relu(a1);
    let a2 = g.affine(a1, pv[10], pv[11]).unwrap();
    let gate = g.sigmoid(a2);
    let fused = g.channel_scale(gate, act).unwrap();
    let flat = g.reshape(fused, &[4 * 25]).unwrap();
    let logits = g.affine(flat, pv[12], pv[13]).unwrap();
    let probs = g.softmax(logits).unwrap();
    let expected = g.value(probs).data().to_vec();

    let got = model.forward(&h).unwrap();
    assert_eq!(got, expected);
}

#[test]
fn loss_reduces_to_sdtn_when_decoupled() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let patches: Vec<DenseTensor> = (0..3).map(|_| rand_patch(&mut rng, 5, 4)).collect();
    let mut hp = Hyperparams::default();
    hp.beta = 0.0;
    hp.gamma = 0.0;
    let states = quick_states(&patches, &hp, 5);
    let batch = TrnBatch::new(patches.clone(), vec![1, 2, 1], 2).unwrap();
    let mut model = TrnModel::init(tiny_config(Mode::Trn), 5).unwrap();
    randomize(&mut model, 13);
    let terms = trn_loss(&model, &states, &batch, &hp).unwrap();
    assert_eq!(terms.classification, 0.0);
    assert_eq!(terms.consistency, 0.0);
    let expected: f64 = states
        .iter()
        .zip(&patches)
        .map(|(s, x)| sdtn_loss(s, x, None, &hp).unwrap().total())
        .sum();
    assert!((terms.total() - expected).abs() < 1e-12 * expected.abs().max(1.0));
}

#[test]
fn loss_matches_term_by_term_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let patches: Vec<DenseTensor> = (0..2).map(|_| rand_patch(&mut rng, 5, 4)).collect();
    let labels = vec![2usize, 1];
    let mut hp = Hyperparams::default();
    hp.alpha = 0.3;
    hp.beta = 0.7;
    hp.gamma = 0.2;
    let states = quick_states(&patches, &hp, 4);
    let batch = TrnBatch::new(patches.clone(), labels.clone(), 2).unwrap();
    let mut model = TrnModel::init(tiny_config(Mode::Trn), 5).unwrap();
    randomize(&mut model, 17);
    let terms = trn_loss(&model, &states, &batch, &hp).unwrap();

    // reconstruction: direct residual against each patch
    let recon: f64 = states
        .iter()
        .zip(&patches)
        .map(|(s, x)| 0.5 * s.factors.reconstruct().unwrap().sub(x).unwrap().sq_norm())
        .sum();
    assert!((terms.reconstruction - recon).abs() < 1e-10);

    // classification: mean cross-entropy of the forward probabilities
    let mut xent = 0.0;
    let mut cons = 0.0;
    for (s, &lbl) in states.iter().zip(&labels) {
        let features = s.factors.reconstruct().unwrap();
        let (probs, fused) = model.forward_parts(&features).unwrap();
        xent += -probs[lbl - 1].ln();
        // consistency: 1x1 projection applied with plain loops
        let fused = fused.unwrap();
        let (w, b) = (&model.params[14], &model.params[15]);
        let href = features.permute(&[2, 0, 1]).unwrap();
        for band in 0..4 {
            for s_idx in 0..25 {
                let mut proj = b.data()[band];
                for c in 0..4 {
                    proj += w.data()[band * 4 + c] * fused.data()[c * 25 + s_idx];
                }
                let d = href.data()[band * 25 + s_idx] - proj;
                cons += d * d;
            }
        }
    }
    let n = patches.len() as f64;
    assert!((terms.classification - hp.beta * xent / n).abs() < 1e-10);
    assert!((terms.consistency - hp.gamma * cons).abs() < 1e-9);
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let patches: Vec<DenseTensor> = (0..2).map(|_| rand_patch(&mut rng, 5, 4)).collect();
    let labels = vec![1usize, 2];
    let mut hp = Hyperparams::default();
    hp.alpha = 0.3;
    hp.beta = 0.7;
    hp.gamma = 0.2;
    let states = quick_states(&patches, &hp, 4);
    let batch = TrnBatch::new(patches, labels, 2).unwrap();
    let mut model = TrnModel::init(tiny_config(Mode::Trn), 5).unwrap();
    randomize(&mut model, 19);

    let (model_grads, sdtn_grads, _) = trn_grad(&model, &states, &batch, &hp).unwrap();
    let step = 1e-5;
    let check = |analytic: f64, fd: f64, what: &str| {
        let scale = analytic.abs().max(fd.abs()).max(1e-2);
        assert!(
            (analytic - fd).abs() / scale <= 1e-4,
            "{what}: analytic {analytic} vs fd {fd}"
        );
    };

    // every network parameter group, a few coordinates each
    for (pi, grad) in model_grads.iter().enumerate() {
        let count = model.params[pi].count();
        for probe in 0..3.min(count) {
            let e = (probe * 7919) % count;
            let orig = model.params[pi].data()[e];
            model.params[pi].data_mut()[e] = orig + step;
            let up = trn_loss(&model, &states, &batch, &hp).unwrap().total();
            model.params[pi].data_mut()[e] = orig - step;
            let down = trn_loss(&model, &states, &batch, &hp).unwrap().total();
            model.params[pi].data_mut()[e] = orig;
            check(grad.data()[e], (up - down) / (2.0 * step), &format!("param {pi}[{e}]"));
        }
    }

    // factors, U, V of the first patch state
    let mut states = states;
    for k in 0..3 {
        let count = states[0].factors.factor(k).count();
        for probe in 0..3.min(count) {
            let e = (probe * 104729) % count;
            let orig = states[0].factors.factor(k).data()[e];
            states[0].factors.factors_mut()[k].data_mut()[e] = orig + step;
            let up = trn_loss(&model, &states, &batch, &hp).unwrap().total();
            states[0].factors.factors_mut()[k].data_mut()[e] = orig - step;
            let down = trn_loss(&model, &states, &batch, &hp).unwrap().total();
            states[0].factors.factors_mut()[k].data_mut()[e] = orig;
            check(
                sdtn_grads[0].factors[k].data()[e],
                (up - down) / (2.0 * step),
                &format!("factor {k}[{e}]"),
            );
        }
        let e = 0;
        let orig = states[0].glr[k].u.data()[e];
        states[0].glr[k].u.data_mut()[e] = orig + step;
        let up = trn_loss(&model, &states, &batch, &hp).unwrap().total();
        states[0].glr[k].u.data_mut()[e] = orig - step;
        let down = trn_loss(&model, &states, &batch, &hp).unwrap().total();
        states[0].glr[k].u.data_mut()[e] = orig;
        check(sdtn_grads[0].u[k].data()[e], (up - down) / (2.0 * step), "u");
        let orig = states[0].glr[k].v.data()[e];
        states[0].glr[k].v.data_mut()[e] = orig + step;
        let up = trn_loss(&model, &states, &batch, &hp).unwrap().total();
        states[0].glr[k].v.data_mut()[e] = orig - step;
        let down = trn_loss(&model, &states, &batch, &hp).unwrap().total();
        states[0].glr[k].v.data_mut()[e] = orig;
        check(sdtn_grads[0].v[k].data()[e], (up - down) / (2.0 * step), "v");
    }
}

#[test]
fn gamma_zero_decouples_factor_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let patches: Vec<DenseTensor> = (0..2).map(|_| rand_patch(&mut rng, 5, 4)).collect();
    let mut hp = Hyperparams::default();
    hp.beta = 0.0;
    hp.gamma = 0.0;
    let states = quick_states(&patches, &hp, 3);
    let batch = TrnBatch::new(patches.clone(), vec![1, 2], 2).unwrap();
    let mut model = TrnModel::init(tiny_config(Mode::Trn), 5).unwrap();
    randomize(&mut model, 23);
    let (_, sdtn_grads, _) = trn_grad(&model, &states, &batch, &hp).unwrap();
    for (i, grad) in sdtn_grads.iter().enumerate() {
        let plain = sdtn_grad(&states[i], &patches[i], None, &hp).unwrap();
        for (a, b) in grad.factors.iter().zip(&plain.factors) {
            assert_eq!(a.data(), b.data());
        }
    }
}

#[test]
fn baseline_touches_no_tensor_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let patches: Vec<DenseTensor> = (0..3).map(|_| rand_patch(&mut rng, 5, 4)).collect();
    let hp = Hyperparams::default();
    let batch = TrnBatch::new(patches, vec![1, 2, 1], 2).unwrap();
    let mut model = TrnModel::init(tiny_config(Mode::CnnBaseline), 5).unwrap();
    randomize(&mut model, 29);
    let (_, sdtn_grads, terms) = trn_grad(&model, &[], &batch, &hp).unwrap();
    assert!(sdtn_grads.is_empty());
    assert_eq!(terms.reconstruction, 0.0);
    assert_eq!(terms.gradient_penalty, 0.0);
    assert_eq!(terms.regularization, 0.0);
    assert_eq!(terms.consistency, 0.0);
}

fn separable_batch(n_per_class: usize, noise: f64, seed: u64) -> (Vec<DenseTensor>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patches = Vec::new();
    let mut labels = Vec::new();
    for class in 1..=3usize {
        for _ in 0..n_per_class {
            let data: Vec<f64> = (0..5 * 5 * 4)
                .map(|i| {
                    let band = i % 4;
                    let base = if band == class - 1 { 1.0 } else { 0.0 };
                    base + rng.gen_range(-noise..noise)
                })
                .collect();
            patches.push(DenseTensor::from_dims(&[5, 5, 4], data).unwrap());
            labels.push(class);
        }
    }
    (patches, labels)
}

fn train_hp() -> Hyperparams {
    let mut hp = Hyperparams::default();
    hp.lr0 = 0.05;
    hp.alpha = 0.1;
    hp.beta = 1.0;
    hp.gamma = 0.01;
    hp.tol = 1e-16;
    hp
}

#[test]
fn separable_data_reaches_full_training_accuracy() {
    let (patches, labels) = separable_batch(10, 0.05, 31);
    let hp = train_hp();
    let mut states = quick_states(&patches, &hp, 40);
    let mut cfg = tiny_config(Mode::Trn);
    cfg.n_classes = 3;
    let mut model = TrnModel::init(cfg, 5).unwrap();
    let batch = TrnBatch::new(patches.clone(), labels.clone(), 3).unwrap();
    train(&mut model, &mut states, &batch, &hp, 150, |_| {}).unwrap();
    let correct = states
        .iter()
        .zip(&labels)
        .filter(|(s, &lbl)| {
            model.predict(&s.factors.reconstruct().unwrap()).unwrap() == lbl
        })
        .count();
    assert_eq!(correct, labels.len(), "training accuracy below 100%");
}

#[test]
fn baseline_converges_with_tensor_terms_zero() {
    let (patches, labels) = separable_batch(10, 0.05, 37);
    let hp = train_hp();
    let mut cfg = tiny_config(Mode::CnnBaseline);
    cfg.n_classes = 3;
    let mut model = TrnModel::init(cfg, 5).unwrap();
    let batch = TrnBatch::new(patches.clone(), labels.clone(), 3).unwrap();
    let mut records = Vec::new();
    train(&mut model, &mut [], &batch, &hp, 150, |r| records.push(*r)).unwrap();
    assert!(!records.is_empty());
    for r in &records {
        assert_eq!(r.reconstruction, 0.0);
        assert_eq!(r.gradient_penalty, 0.0);
        assert_eq!(r.regularization, 0.0);
        assert_eq!(r.consistency, 0.0);
    }
    assert!(records.last().unwrap().total < records[0].total);
    let correct = patches
        .iter()
        .zip(&labels)
        .filter(|(p, &lbl)| model.predict(p).unwrap() == lbl)
        .count();
    assert_eq!(correct, labels.len());
}

#[test]
fn training_is_deterministic() {
    let (patches, labels) = separable_batch(3, 0.05, 41);
    let hp = train_hp();
    let batch = TrnBatch::new(patches.clone(), labels, 3).unwrap();
    let run = || {
        let mut states = quick_states(&patches, &hp, 10);
        let mut cfg = tiny_config(Mode::Trn);
        cfg.n_classes = 3;
        let mut model = TrnModel::init(cfg, 5).unwrap();
        let mut last = 0.0;
        train(&mut model, &mut states, &batch, &hp, 20, |r| last = r.total).unwrap();
        last
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
}

#[test]
fn constant_scene_gives_constant_map_with_scene_dims() {
    let cube = DenseTensor::from_dims(&[4, 6, 4], vec![0.3; 4 * 6 * 4]).unwrap();
    let scene = HsiScene::new(cube, vec![1; 24]).unwrap();
    let mut model = TrnModel::init(tiny_config(Mode::CnnBaseline), 5).unwrap();
    randomize(&mut model, 43);
    let hp = Hyperparams::default();
    let map = predict_map(&model, &scene, &[], &[], &hp, 0).unwrap();
    assert_eq!(map.len(), 24);
    assert!(map.iter().all(|&l| l == map[0]));
}

fn halves_scene() -> (HsiScene, Vec<(usize, usize)>, Vec<usize>) {
    // left half spectrum peaks in band 0, right half in band 1
    let (h, w, b) = (6, 6, 4);
    let mut data = vec![0.0; h * w * b];
    let mut labels = vec![0u16; h * w];
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    for r in 0..h {
        for c in 0..w {
            let class = if c < w / 2 { 1 } else { 2 };
            labels[r * w + c] = class as u16;
            for band in 0..b {
                let base = if band == class - 1 { 1.0 } else { 0.0 };
                data[(r * w + c) * b + band] = base + rng.gen_range(-0.05..0.05);
            }
        }
    }
    let scene = HsiScene::new(DenseTensor::from_dims(&[h, w, b], data).unwrap(), labels).unwrap();
    let coords = vec![(1, 0), (4, 2), (1, 4), (4, 5)];
    let lbls = coords
        .iter()
        .map(|&(r, c)| scene.label_at(r, c) as usize)
        .collect();
    (scene, coords, lbls)
}

fn train_on_scene(scene: &HsiScene, coords: &[(usize, usize)], labels: &[usize]) -> (TrnModel, Vec<SdtnState>) {
    let patches: Vec<DenseTensor> = coords
        .iter()
        .map(|&(r, c)| extract_patch(scene, r, c, 5).unwrap())
        .collect();
    let mut hp = train_hp();
    hp.lr0 = 0.1;
    let mut states = quick_states(&patches, &hp, 30);
    let cfg = tiny_config(Mode::SdtnOnly);
    let mut model = TrnModel::init(cfg, 5).unwrap();
    let batch = TrnBatch::new(patches, labels.to_vec(), 2).unwrap();
    train(&mut model, &mut states, &batch, &hp, 200, |_| {}).unwrap();
    (model, states)
}

#[test]
fn predict_map_recovers_training_pixels_and_is_permutation_equivariant() {
    let (scene, coords, labels) = halves_scene();
    let hp = train_hp();
    let (model, states) = train_on_scene(&scene, &coords, &labels);
    let map = predict_map(&model, &scene, &coords, &states, &hp, 10).unwrap();
    assert_eq!(map.len(), 36);
    for &(r, c) in &coords {
        assert_eq!(map[r * 6 + c], scene.label_at(r, c));
    }
    // swap class ids and retrain: the map must swap identically
    let swapped: Vec<usize> = labels.iter().map(|&l| 3 - l).collect();
    let (model2, states2) = train_on_scene(&scene, &coords, &swapped);
    let map2 = predict_map(&model2, &scene, &coords, &states2, &hp, 10).unwrap();
    for (a, b) in map.iter().zip(&map2) {
        assert_eq!(*b, 3 - *a);
    }
}

#[test]
fn shape_and_config_validation() {
    let cfg = tiny_config(Mode::Trn);
    let model = TrnModel::init(cfg.clone(), 5).unwrap();
    let bad = DenseTensor::zeros_dims(&[3, 3, 4]).unwrap();
    assert!(model.forward(&bad).is_err());
    let mut even = cfg.clone();
    even.patch_size = 4;
    assert!(even.validate().is_err());
    let mut one_class = cfg.clone();
    one_class.n_classes = 1;
    assert!(one_class.validate().is_err());
    let mut strided = cfg;
    strided.conv2d.stride = 2;
    assert!(strided.validate().is_err());
    // band mismatch in predict_map
    let cube = DenseTensor::from_dims(&[3, 3, 2], vec![0.1; 18]).unwrap();
    let scene = HsiScene::new(cube, vec![1; 9]).unwrap();
    let model = TrnModel::init(tiny_config(Mode::CnnBaseline), 5).unwrap();
    assert!(predict_map(&model, &scene, &[], &[], &Hyperparams::default(), 0).is_err());
}
