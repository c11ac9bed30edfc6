use std::sync::Arc;

use air_core::data::WindowSample;
use air_core::gradsuite::random_sample;
use air_core::layers::Dense;
use air_core::model::blocks::{AttentionLayer, DescriptionFusion, Fc, TimeMmdFusion};
use air_core::model::checkpoint;
use air_core::model::{
    Architecture, Backbone, ForecastModel, ModelConfig, ModelId, ModelMode, Variant,
};
use air_core::{Error, Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn id(variant: Variant, architecture: Architecture) -> ModelId {
    ModelId {
        variant,
        architecture,
    }
}

/// Small but non-degenerate configuration for behavioural tests.
fn small(architecture: Architecture) -> ModelConfig {
    ModelConfig {
        architecture,
        channels: 5,
        targets: vec![0, 3],
        latent: 4,
        codebook_size: 6,
        d_model: 8,
        embedding_dim: 12,
        description_dim: 10,
        description_proj: 4,
        generator_hidden: 16,
        fusion_hidden: 16,
        ..ModelConfig::default()
    }
}

fn set(store: &mut ParamStore, id: air_core::ParamId, values: &[f64]) {
    store.get_mut(id).data_mut().copy_from_slice(values);
}

fn zero(store: &mut ParamStore, id: air_core::ParamId) {
    store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
}

fn dense_apply(store: &ParamStore, d: &Dense, x: &[f64]) -> Vec<f64> {
    let w = store.get(d.weight).data();
    let b = store.get(d.bias).data();
    (0..d.out_dim)
        .map(|o| b[o] + (0..d.in_dim).map(|i| w[o * d.in_dim + i] * x[i]).sum::<f64>())
        .collect()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn output_shape_is_targets_by_horizon_for_every_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for arch in Architecture::ALL {
        let base = small(arch);
        for variant in [
            Variant::Vanilla,
            Variant::AirF,
            Variant::AirFp,
            Variant::Air,
            Variant::Timemmd,
        ] {
            let cfg = id(variant, arch).configure(&base);
            let model = ForecastModel::new(cfg.clone(), 1).unwrap();
            let s = random_sample(&cfg, &mut rng);
            let p = model.predict(&s).unwrap();
            assert_eq!(p.shape(), &[2, 20], "{variant:?} {arch:?}");
            assert!(p.is_finite());
            let f = model.forecast(&s, "m", 4).unwrap();
            assert_eq!(f.values.len(), 2);
            assert!(f.values.iter().all(|r| r.len() == 20));
        }
    }
}

#[test]
fn batched_forward_matches_single_sample_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for arch in Architecture::ALL {
        let cfg = id(Variant::Air, arch).configure(&small(arch));
        let model = ForecastModel::new(cfg.clone(), 2).unwrap();
        let samples: Vec<WindowSample> = (0..3).map(|_| random_sample(&cfg, &mut rng)).collect();
        let refs: Vec<&WindowSample> = samples.iter().collect();
        let batched = model.predict_batch(&refs).unwrap();
        for (s, b) in samples.iter().zip(&batched) {
            let single = model.predict(s).unwrap();
            assert!(max_abs_diff(&single, b) < 1e-12, "{arch:?}");
        }
    }
}

#[test]
fn vanilla_ignores_every_text_embedding() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for arch in Architecture::ALL {
        let cfg = small(arch);
        let model = ForecastModel::new(cfg.clone(), 3).unwrap();
        let a = random_sample(&cfg, &mut rng);
        let mut b = random_sample(&cfg, &mut rng);
        b.x = a.x.clone();
        assert_ne!(a.key_driver, b.key_driver);
        assert_eq!(model.predict(&a).unwrap(), model.predict(&b).unwrap());
    }
}

#[test]
fn vanilla_has_no_routing_parameters() {
    for arch in Architecture::ALL {
        let model = ForecastModel::new(small(arch), 0).unwrap();
        assert!(model.key_driver_routing.is_none() && model.outlook_routing.is_none());
        for (name, _) in model.store.manifest() {
            assert!(!name.starts_with("route"), "{name}");
            assert!(!name.starts_with("describe"), "{name}");
        }
    }
}

#[test]
fn every_routed_layer_has_exactly_one_head() {
    for arch in Architecture::ALL {
        let cfg = id(Variant::Air, arch).configure(&small(arch));
        let model = ForecastModel::new(cfg.clone(), 0).unwrap();
        let (routed_features, routed_predictors) = match &model.backbone {
            Backbone::Tsmixer(m) => (
                m.blocks
                    .iter()
                    .map(|b| b.time.is_routed() as usize + b.feature.is_routed() as usize)
                    .sum::<usize>(),
                m.predictors.iter().filter(|p| p.is_routed()).count(),
            ),
            Backbone::Tcn(m) => (
                m.convs.iter().filter(|c| c.is_routed()).count(),
                m.predictor.is_routed() as usize,
            ),
            Backbone::Itransformer(m) => (
                m.blocks.iter().filter(|b| b.attention.is_routed()).count(),
                m.predictors.iter().filter(|p| p.is_routed()).count(),
            ),
        };
        let kd = model.key_driver_routing.as_ref().unwrap().num_heads();
        let ol = model.outlook_routing.as_ref().unwrap().num_heads();
        assert_eq!(kd, routed_features, "{arch:?}");
        assert_eq!(ol, routed_predictors, "{arch:?}");
        assert!(kd > 0 && ol > 0);
    }
}

#[test]
fn identical_embeddings_give_identical_air_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for arch in Architecture::ALL {
        let cfg = id(Variant::Air, arch).configure(&small(arch));
        let model = ForecastModel::new(cfg.clone(), 5).unwrap();
        let a = random_sample(&cfg, &mut rng);
        let b = a.clone();
        assert_eq!(model.predict(&a).unwrap(), model.predict(&b).unwrap());
    }
}

fn kd_indices(model: &ForecastModel, s: &WindowSample) -> Vec<usize> {
    let mut g = Graph::with_params(&model.store);
    let out = model.forward_batch(&mut g, &[s]).unwrap();
    out.key_driver
        .unwrap()
        .indices
        .iter()
        .map(|per_head| per_head[0])
        .collect()
}

fn all_indices(model: &ForecastModel, s: &WindowSample) -> Vec<usize> {
    let mut g = Graph::with_params(&model.store);
    let out = model.forward_batch(&mut g, &[s]).unwrap();
    [out.key_driver, out.outlook]
        .into_iter()
        .flatten()
        .flat_map(|r| r.indices.into_iter().map(|h| h[0]))
        .collect()
}

#[test]
fn moving_key_driver_to_another_codebook_cell_changes_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for arch in Architecture::ALL {
        let cfg = id(Variant::Air, arch).configure(&small(arch));
        let model = ForecastModel::new(cfg.clone(), 7).unwrap();
        let a = random_sample(&cfg, &mut rng);
        let ia = kd_indices(&model, &a);
        let mut found = false;
        for _ in 0..200 {
            let mut b = a.clone();
            b.key_driver = random_sample(&cfg, &mut rng).key_driver;
            if kd_indices(&model, &b)[0] != ia[0] {
                assert_ne!(model.predict(&a).unwrap(), model.predict(&b).unwrap(), "{arch:?}");
                found = true;
                break;
            }
        }
        assert!(found, "no embedding reached another cell for {arch:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn equal_quantized_routing_gives_bit_identical_forecasts(
        seed in 0u64..1000,
        scale in 1e-9f64..1e-3,
        arch in prop::sample::select(Architecture::ALL.to_vec()),
    ) {
        let cfg = id(Variant::Air, arch).configure(&small(arch));
        let model = ForecastModel::new(cfg.clone(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_sample(&cfg, &mut rng);
        let mut b = a.clone();
        let noise = random_sample(&cfg, &mut rng);
        for (v, n) in b.key_driver.iter_mut().zip(&noise.key_driver) {
            *v += scale * n;
        }
        for (v, n) in b.outlook.iter_mut().zip(&noise.outlook) {
            *v += scale * n;
        }
        prop_assume!(all_indices(&model, &a) == all_indices(&model, &b));
        prop_assert_eq!(model.predict(&a).unwrap(), model.predict(&b).unwrap());
    }
}

/// Uniform routing (zero generator heads) with VQ off collapses every
/// routed FC to a dense layer `W2 · diag(1/L) · W1`; a vanilla model carrying
/// the collapsed weights must agree.
#[test]
fn vanilla_equals_air_under_uniform_routing() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base = small(Architecture::Tsmixer);
    let air_cfg = id(Variant::AirFp, Architecture::Tsmixer).configure(&base);
    let mut air = ForecastModel::new(air_cfg.clone(), 9).unwrap();
    for module in [&air.key_driver_routing, &air.outlook_routing] {
        for head in &module.as_ref().unwrap().generator.heads {
            zero(&mut air.store, head.weight);
            set(&mut air.store, head.bias, &vec![0.7; base.latent]);
        }
    }
    let uniform = vec![1.0 / base.latent as f64; base.latent];

    let mut vanilla = ForecastModel::new(base.clone(), 10).unwrap();
    let (Backbone::Tsmixer(a), Backbone::Tsmixer(v)) = (&air.backbone, &vanilla.backbone) else {
        unreachable!()
    };
    let pairs: Vec<(&Fc, &Fc)> = a
        .blocks
        .iter()
        .zip(&v.blocks)
        .flat_map(|(ab, vb)| [(&ab.time, &vb.time), (&ab.feature, &vb.feature)])
        .chain(a.predictors.iter().zip(&v.predictors))
        .collect();
    let mut copies = Vec::new();
    for (af, vf) in pairs {
        let (Fc::Routed(rd), Fc::Plain(d)) = (af, vf) else {
            panic!("unexpected layer kinds")
        };
        let (m, b) = rd.collapse_to_dense(&air.store, &uniform).unwrap();
        copies.push((d.weight, m.data().to_vec(), d.bias, b));
    }
    for (w, m, bias, b) in copies {
        set(&mut vanilla.store, w, &m);
        set(&mut vanilla.store, bias, &b);
    }
    for _ in 0..3 {
        let s = random_sample(&air_cfg, &mut rng);
        let pa = air.predict(&s).unwrap();
        let pv = vanilla.predict(&s).unwrap();
        assert!(max_abs_diff(&pa, &pv) < 1e-12, "{}", max_abs_diff(&pa, &pv));
    }
}

/// The reverse construction: given a reference dense layer, `W1 = L·I`,
/// `W2 = W` makes the uniformly routed factorization reproduce it exactly.
#[test]
fn uniformly_routed_dense_reproduces_a_reference_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let reference = Dense::new(&mut store, "ref", 4, 3, &mut rng);
    set(&mut store, reference.bias, &[0.1, -0.2, 0.3]);
    let routed = air_core::layers::RoutedDense::new(&mut store, "r", 4, 4, 3, &mut rng);
    let mut w1 = vec![0.0; 16];
    for i in 0..4 {
        w1[i * 4 + i] = 4.0;
    }
    set(&mut store, routed.w1, &w1);
    zero(&mut store, routed.b1);
    let w = store.get(reference.weight).data().to_vec();
    let b = store.get(reference.bias).data().to_vec();
    set(&mut store, routed.w2, &w);
    set(&mut store, routed.b2, &b);
    let x = Tensor::normal(&[5, 4], 1.0, &mut rng);
    let mut g = Graph::with_params(&store);
    let xv = g.constant(x.clone());
    let r = g.constant(Tensor::row(vec![0.25; 4]));
    let y_routed = routed.forward(&mut g, xv, r).unwrap();
    let y_ref = reference.forward(&mut g, xv).unwrap();
    assert!(max_abs_diff(g.value(y_routed), g.value(y_ref)) < 1e-14);
}

#[test]
fn identity_mixers_pass_the_lookback_to_the_predictor() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = ModelConfig {
        blocks: 1,
        ..small(Architecture::Tsmixer)
    };
    let mut model = ForecastModel::new(cfg.clone(), 14).unwrap();
    let Backbone::Tsmixer(m) = model.backbone.clone() else {
        unreachable!()
    };
    for fc in [&m.blocks[0].time, &m.blocks[0].feature] {
        let Fc::Plain(d) = fc else { unreachable!() };
        zero(&mut model.store, d.weight);
        zero(&mut model.store, d.bias);
    }
    let s = random_sample(&cfg, &mut rng);
    let p = model.predict(&s).unwrap();
    for (j, &target) in cfg.targets.iter().enumerate() {
        let Fc::Plain(head) = &m.predictors[j] else {
            unreachable!()
        };
        let expected = dense_apply(&model.store, head, s.x.row_slice(target));
        for (a, b) in p.row_slice(j).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn tcn_with_zero_convs_reads_the_last_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cfg = small(Architecture::Tcn);
    let mut model = ForecastModel::new(cfg.clone(), 16).unwrap();
    let Backbone::Tcn(m) = model.backbone.clone() else {
        unreachable!()
    };
    for conv in &m.convs {
        let air_core::model::blocks::ConvLayer::Plain(c) = conv else {
            unreachable!()
        };
        zero(&mut model.store, c.kernel);
        zero(&mut model.store, c.bias);
    }
    let Fc::Plain(head) = &m.predictor else {
        unreachable!()
    };
    let bias: Vec<f64> = (0..head.out_dim).map(|i| 0.01 * i as f64 - 0.2).collect();
    set(&mut model.store, head.bias, &bias);

    let mut s = random_sample(&cfg, &mut rng);
    s.x = Tensor::zeros(&[cfg.channels, cfg.lookback]);
    assert_eq!(model.predict(&s).unwrap().data(), bias.as_slice());

    let levels = [0.5, -1.0, 2.0, 0.0, 3.0];
    let rows: Vec<Vec<f64>> = levels.iter().map(|&c| vec![c; cfg.lookback]).collect();
    s.x = Tensor::from_rows(&rows).unwrap();
    let expected = dense_apply(&model.store, head, &levels);
    let got = model.predict(&s).unwrap();
    for (a, b) in got.data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// Perturbation oracle for the causal receptive field. Kernel 3 with
/// dilations 1, 2, 4 reaches 2·(1+2+4) = 14 steps back per stack pass.
#[test]
fn tcn_receptive_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let changed = |cfg: &ModelConfig, t: usize, rng: &mut ChaCha8Rng| {
        let model = ForecastModel::new(cfg.clone(), 18).unwrap();
        let s = random_sample(cfg, rng);
        let mut p = s.clone();
        let mut x = p.x.data().to_vec();
        for c in 0..cfg.channels {
            x[c * cfg.lookback + t] += 0.5;
        }
        p.x = Tensor::matrix(cfg.channels, cfg.lookback, x).unwrap();
        model.predict(&s).unwrap() != model.predict(&p).unwrap()
    };
    let one = ModelConfig {
        blocks: 1,
        ..small(Architecture::Tcn)
    };
    for t in 0..5 {
        assert!(!changed(&one, t, &mut rng), "t={t} is outside one pass");
    }
    for t in [5, 10, 19] {
        assert!(changed(&one, t, &mut rng), "t={t} is inside one pass");
    }
    let two = small(Architecture::Tcn);
    for t in [0, 19] {
        assert!(changed(&two, t, &mut rng), "two passes reach t={t}");
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn matvec_right(x: &[f64], w: &Tensor) -> Vec<f64> {
    // x · W for W of shape in × out.
    let (n_in, n_out) = (w.rows(), w.cols());
    (0..n_out)
        .map(|o| (0..n_in).map(|i| x[i] * w.at(i, o)).sum())
        .collect()
}

/// With a single variate token the attention weights over keys are all one,
/// so each encoder block is a closed form in the value path.
#[test]
fn itransformer_single_variate_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for variant in [Variant::Vanilla, Variant::AirF] {
        let cfg = id(variant, Architecture::Itransformer).configure(&ModelConfig {
            channels: 1,
            targets: vec![0],
            ..small(Architecture::Itransformer)
        });
        let model = ForecastModel::new(cfg.clone(), 20).unwrap();
        let Backbone::Itransformer(m) = &model.backbone else {
            unreachable!()
        };
        let s = random_sample(&cfg, &mut rng);
        let mut g = Graph::with_params(&model.store);
        let out = model.forward_batch(&mut g, &[&s]).unwrap();
        let routes: Vec<Vec<f64>> = out
            .key_driver
            .as_ref()
            .map(|r| r.weights.iter().map(|w| g.value(*w).data().to_vec()).collect())
            .unwrap_or_default();
        let got = g.value(out.prediction).data().to_vec();

        let x = match &model.description_fusion {
            Some(f) => {
                let p = dense_apply(&model.store, &f.projection, s.descriptions.row_slice(0));
                let joined: Vec<f64> = s.x.row_slice(0).iter().chain(&p).copied().collect();
                dense_apply(&model.store, &f.fc, &joined)
            }
            None => s.x.row_slice(0).to_vec(),
        };
        let mut tok = dense_apply(&model.store, &m.embed, &x);
        for (i, block) in m.blocks.iter().enumerate() {
            let att = match &block.attention {
                AttentionLayer::Plain(a) => {
                    let v = matvec_right(&tok, model.store.get(a.wv));
                    matvec_right(&v, model.store.get(a.wo))
                }
                AttentionLayer::Routed(a) => {
                    let v = matvec_right(&tok, model.store.get(a.wv));
                    let q = matvec_right(&tok, model.store.get(a.wq));
                    let z = model.store.get(a.latents);
                    let scale = 1.0 / (a.d_model as f64).sqrt();
                    let scores: Vec<f64> = (0..a.latent)
                        .map(|l| scale * (0..a.d_model).map(|k| q[k] * z.at(l, k)).sum::<f64>())
                        .collect();
                    let a2 = softmax(&scores);
                    let gain: f64 = (0..a.latent).map(|l| a2[l] * routes[i][l]).sum();
                    let v: Vec<f64> = v.iter().map(|x| gain * x).collect();
                    matvec_right(&v, model.store.get(a.wo))
                }
            };
            for (t, a) in tok.iter_mut().zip(&att) {
                *t += a;
            }
            let f: Vec<f64> = dense_apply(&model.store, &block.ffn_in, &tok)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let f = dense_apply(&model.store, &block.ffn_out, &f);
            for (t, a) in tok.iter_mut().zip(&f) {
                *t += a;
            }
        }
        let Fc::Plain(head) = &m.predictors[0] else {
            unreachable!()
        };
        let expected = dense_apply(&model.store, head, &tok);
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{variant:?}: {a} vs {b}");
        }
    }
}

#[test]
fn itransformer_ignores_order_of_non_target_variates() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = ModelConfig {
        targets: vec![0],
        ..small(Architecture::Itransformer)
    };
    let model = ForecastModel::new(cfg.clone(), 22).unwrap();
    let s = random_sample(&cfg, &mut rng);
    let order = [0, 3, 1, 4, 2];
    let rows: Vec<Vec<f64>> = order.iter().map(|&c| s.x.row_slice(c).to_vec()).collect();
    let mut p = s.clone();
    p.x = Tensor::from_rows(&rows).unwrap();
    let d = max_abs_diff(&model.predict(&s).unwrap(), &model.predict(&p).unwrap());
    assert!(d < 1e-12, "{d}");
}

#[test]
fn routing_in_a_plain_layer_is_a_contract_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut store = ParamStore::new();
    let plain = Fc::new(&mut store, "p", 3, 2, false, 2, &mut rng);
    let routed = Fc::new(&mut store, "r", 3, 2, true, 2, &mut rng);
    let mut g = Graph::with_params(&store);
    let x = g.constant(Tensor::normal(&[1, 3], 1.0, &mut rng));
    let r = g.constant(Tensor::row(vec![0.5, 0.5]));
    assert!(matches!(plain.forward(&mut g, x, Some(r)), Err(Error::Contract(_))));
    assert!(matches!(routed.forward(&mut g, x, None), Err(Error::Contract(_))));
}

#[test]
fn mismatched_sample_is_a_contract_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let cfg = small(Architecture::Tsmixer);
    let model = ForecastModel::new(cfg.clone(), 0).unwrap();
    let mut s = random_sample(&cfg, &mut rng);
    s.x = Tensor::zeros(&[cfg.channels, cfg.lookback + 1]);
    assert!(matches!(model.predict(&s), Err(Error::Contract(_))));
}

#[test]
fn description_fusion_identity_and_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut store = ParamStore::new();
    let fusion = DescriptionFusion::new(&mut store, "d", 6, 5, 3, &mut rng);
    let x = Tensor::normal(&[4, 6], 1.0, &mut rng);
    let desc = Tensor::normal(&[4, 5], 1.0, &mut rng);

    // Freshly initialized: the series block is the identity.
    let run = |store: &ParamStore, x: &Tensor, d: &Tensor| {
        let mut g = Graph::with_params(store);
        let (xv, dv) = (g.constant(x.clone()), g.constant(d.clone()));
        let y = fusion.forward(&mut g, xv, dv).unwrap();
        g.value(y).clone()
    };
    zero(&mut store, fusion.projection.weight);
    assert_eq!(run(&store, &x, &desc), x);

    // Random weights: permuting channels permutes outputs.
    for id in [fusion.projection.weight, fusion.projection.bias, fusion.fc.weight, fusion.fc.bias] {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::normal(&shape, 0.5, &mut rng);
    }
    let y = run(&store, &x, &desc);
    let order = [2, 0, 3, 1];
    let px = Tensor::from_rows(&order.iter().map(|&c| x.row_slice(c).to_vec()).collect::<Vec<_>>()).unwrap();
    let pd = Tensor::from_rows(&order.iter().map(|&c| desc.row_slice(c).to_vec()).collect::<Vec<_>>()).unwrap();
    let py = run(&store, &px, &pd);
    for (k, &c) in order.iter().enumerate() {
        assert_eq!(py.row_slice(k), y.row_slice(c));
    }

    // Hand-composed projection, concatenation and affine map.
    for c in 0..4 {
        let p = dense_apply(&store, &fusion.projection, desc.row_slice(c));
        let joined: Vec<f64> = x.row_slice(c).iter().chain(&p).copied().collect();
        let expected = dense_apply(&store, &fusion.fc, &joined);
        for (a, b) in y.row_slice(c).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn missing_description_is_a_config_error_naming_the_channel() {
    let mut d = air_core::data::ChannelDescriptions::new(2);
    d.insert("oil", vec![1.0, 0.0]).unwrap();
    let err = d.matrix_for(&["oil".into(), "gas".into()]).unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("gas")), "{err}");
}

#[test]
fn timemmd_starts_at_the_unimodal_forecast() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for arch in Architecture::ALL {
        let base = small(arch);
        let vanilla = ForecastModel::new(base.clone(), 27).unwrap();
        let tm = ForecastModel::new(id(Variant::Timemmd, arch).configure(&base), 27).unwrap();
        assert_eq!(tm.config.mode, ModelMode::Timemmd);
        let s = random_sample(&base, &mut rng);
        assert_eq!(vanilla.predict(&s).unwrap(), tm.predict(&s).unwrap(), "{arch:?}");
    }
}

#[test]
fn timemmd_fusion_is_order_sensitive_and_checks_dimension() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let mut store = ParamStore::new();
    let fusion = TimeMmdFusion::new(&mut store, "t", 4, 8, 6, &mut rng);
    *store.get_mut(fusion.out.weight) = Tensor::normal(&[6, 8], 1.0, &mut rng);
    let base = Tensor::normal(&[1, 6], 1.0, &mut rng);
    let kd = Tensor::normal(&[1, 4], 1.0, &mut rng);
    let ol = Tensor::normal(&[1, 4], 1.0, &mut rng);
    let run = |a: &Tensor, b: &Tensor| {
        let mut g = Graph::with_params(&store);
        let (bv, av, ov) = (g.constant(base.clone()), g.constant(a.clone()), g.constant(b.clone()));
        fusion.forward(&mut g, bv, av, ov).map(|y| g.value(y).clone())
    };
    let straight = run(&kd, &ol).unwrap();
    let swapped = run(&ol, &kd).unwrap();
    assert!(max_abs_diff(&straight, &swapped) > 1e-6);

    // Direct evaluation oracle.
    let joined: Vec<f64> = kd.data().iter().chain(ol.data()).copied().collect();
    let h: Vec<f64> = dense_apply(&store, &fusion.hidden, &joined)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let proj = dense_apply(&store, &fusion.out, &h);
    for ((a, b), p) in straight.data().iter().zip(base.data()).zip(&proj) {
        assert!((a - (b + p)).abs() < 1e-12);
    }

    let short = Tensor::normal(&[1, 3], 1.0, &mut rng);
    assert!(matches!(run(&short, &ol), Err(Error::Dimension { .. })));
}

/// Independent parameter-count formula per architecture and variant.
fn expected_parameters(cfg: &ModelConfig) -> usize {
    let (t, h, c, l) = (cfg.lookback, cfg.horizon, cfg.channels, cfg.latent);
    let nt = cfg.targets.len();
    let dense = |i: usize, o: usize| i * o + o;
    let routed = |i: usize, o: usize| i * l + l + l * o + o;
    let fc = |i: usize, o: usize, r: bool| if r { routed(i, o) } else { dense(i, o) };
    let (f, p) = (cfg.air_on_features, cfg.air_on_predictor);
    let backbone = match cfg.architecture {
        Architecture::Tsmixer => {
            cfg.blocks * (fc(t, t, f) + fc(c, c, f)) + nt * fc(t, h, p)
        }
        Architecture::Tcn => {
            let k = cfg.kernel_size;
            let conv = if f { l * c * k + l + c * l + c } else { c * c * k + c };
            cfg.blocks * cfg.dilations.len() * conv + fc(c, nt * h, p)
        }
        Architecture::Itransformer => {
            let d = cfg.d_model;
            let attention = if f { l * d + 4 * d * d } else { 4 * d * d };
            dense(t, d) + cfg.blocks * (attention + 2 * dense(d, d)) + nt * fc(d, h, p)
        }
    };
    let (e, gh) = (cfg.embedding_dim, cfg.generator_hidden);
    let module = |heads: usize| {
        dense(e, gh) + dense(gh, gh) + heads * dense(gh, l)
            + if cfg.vq_enabled { cfg.codebook_size * l } else { 0 }
    };
    let mut total = backbone;
    if cfg.mode == ModelMode::Air {
        total += dense(cfg.description_dim, cfg.description_proj)
            + dense(t + cfg.description_proj, t);
    }
    if f {
        total += module(cfg.feature_heads());
    }
    if p {
        total += module(cfg.predictor_heads());
    }
    if cfg.mode == ModelMode::Timemmd {
        total += dense(2 * e, cfg.fusion_hidden) + dense(cfg.fusion_hidden, nt * h);
    }
    total
}

#[test]
fn parameter_counts_match_formula_and_are_stable() {
    for mid in ModelId::all() {
        let cfg = mid.configure(&ModelConfig {
            architecture: mid.architecture,
            ..ModelConfig::default()
        });
        let a = ForecastModel::new(cfg.clone(), 0).unwrap();
        let b = ForecastModel::new(cfg.clone(), 99).unwrap();
        assert_eq!(a.num_parameters(), expected_parameters(&cfg), "{mid}");
        assert_eq!(a.num_parameters(), b.num_parameters());
    }
    // Regression constants for the default configuration.
    let count = |s: &str| {
        let mid: ModelId = s.parse().unwrap();
        let cfg = mid.configure(&ModelConfig {
            architecture: mid.architecture,
            ..ModelConfig::default()
        });
        ForecastModel::new(cfg, 0).unwrap().num_parameters()
    };
    assert_eq!(count("vanilla-tsmixer"), 1824);
    assert_eq!(count("vanilla-tcn"), 1560);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let dir = tempfile::tempdir().unwrap();
    for arch in Architecture::ALL {
        let cfg = id(Variant::Air, arch).configure(&small(arch));
        let mut model = ForecastModel::new(cfg.clone(), 31).unwrap();
        let ids: Vec<_> = model.store.ids().collect();
        for pid in ids {
            let shape = model.store.get(pid).shape().to_vec();
            *model.store.get_mut(pid) = Tensor::normal(&shape, 0.3, &mut rng);
        }
        let path = dir.path().join(format!("{arch:?}.ckpt"));
        checkpoint::save(&model, &path).unwrap();
        let loaded = checkpoint::load(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.store.flat_values(), model.store.flat_values());
        let s = random_sample(&cfg, &mut rng);
        assert_eq!(loaded.predict(&s).unwrap(), model.predict(&s).unwrap());

        let mut bytes = checkpoint::to_bytes(&model).unwrap();
        bytes.truncate(bytes.len() - 8);
        assert!(checkpoint::from_bytes(&bytes, "truncated").is_err());
        let mut bytes = checkpoint::to_bytes(&model).unwrap();
        bytes[0] = b'X';
        assert!(checkpoint::from_bytes(&bytes, "magic").is_err());
    }
}

#[test]
fn model_ids_round_trip() {
    let all = ModelId::all();
    assert_eq!(all.len(), 15);
    for mid in &all {
        let parsed: ModelId = mid.to_string().parse().unwrap();
        assert_eq!(&parsed, mid);
    }
    let err = "air-lstm".parse::<ModelId>().unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("air-tsmixer")), "{err}");
}

#[test]
fn per_sample_descriptions_are_supported() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let cfg = id(Variant::Air, Architecture::Tsmixer).configure(&small(Architecture::Tsmixer));
    let model = ForecastModel::new(cfg.clone(), 33).unwrap();
    let a = random_sample(&cfg, &mut rng);
    let mut b = random_sample(&cfg, &mut rng);
    let shared = a.descriptions.clone();
    b.descriptions = Arc::new((*shared).clone());
    // Equal content in distinct allocations takes the stacked path.
    let mut c = b.clone();
    c.descriptions = shared;
    let p1 = model.predict_batch(&[&a, &b]).unwrap();
    let p2 = model.predict_batch(&[&a, &c]).unwrap();
    assert!(max_abs_diff(&p1[1], &p2[1]) < 1e-12);
}
