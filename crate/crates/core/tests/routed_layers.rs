use air_core::layers::{RoutedDense, RoutedLatentAttention};
use air_core::routing::{RoutingConfig, RoutingModule};
use air_core::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

/// Plain triple loop over the collapsed weight, independent of the graph.
fn dense_rows(x: &[f64], rows: usize, w: &Tensor, b: &[f64]) -> Vec<f64> {
    let (n_out, n_in) = (w.rows(), w.cols());
    let mut y = Vec::with_capacity(rows * n_out);
    for r in 0..rows {
        for o in 0..n_out {
            let mut acc = b[o];
            for i in 0..n_in {
                acc += w.at(o, i) * x[r * n_in + i];
            }
            y.push(acc);
        }
    }
    y
}

fn routing_module(seed: u64, d: usize, l: usize, k: usize, vq: bool) -> (ParamStore, RoutingModule) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = RoutingConfig {
        embedding_dim: d,
        hidden: 8,
        latent: l,
        codebook_size: k,
        vq_enabled: vq,
        rescale: false,
    };
    let m = RoutingModule::new(&mut store, "route", &cfg, 2, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    (store, m)
}

fn attention(seed: u64, n: usize, d: usize, l: usize, heads: usize) -> (ParamStore, RoutedLatentAttention, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let att = RoutedLatentAttention::new(&mut store, "att", d, 2 * heads, 3, l, heads, &mut rng).unwrap();
    let x = Tensor::matrix(n, d, uniform(&mut rng, n * d, 1.0)).unwrap();
    let r = Tensor::row(uniform(&mut rng, l, 1.0));
    (store, att, x, r)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn routed_dense_equals_collapsed_dense(
        seed in any::<u64>(), n_in in 1usize..7, latent in 1usize..7, n_out in 1usize..7, rows in 1usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = RoutedDense::new(&mut store, "rd", n_in, latent, n_out, &mut rng);
        randomize(&mut store, &mut rng);
        let x = uniform(&mut rng, rows * n_in, 2.0);
        let r = uniform(&mut rng, latent, 1.0);

        let mut g = Graph::with_params(&store);
        let xv = g.constant(Tensor::matrix(rows, n_in, x.clone()).unwrap());
        let rv = g.constant(Tensor::row(r.clone()));
        let y = layer.forward(&mut g, xv, rv).unwrap();

        let (w, b) = layer.collapse_to_dense(&store, &r).unwrap();
        let expect = dense_rows(&x, rows, &w, &b);
        let diff = g.value(y).data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(diff <= 1e-12, "{diff}");
    }

    #[test]
    fn routing_weights_are_probability_vectors(
        seed in any::<u64>(), vq in any::<bool>(), l in 1usize..9, k in 1usize..6,
    ) {
        let (store, m) = routing_module(seed, 5, l, k, vq);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let e = Tensor::matrix(3, 5, uniform(&mut rng, 15, 3.0)).unwrap();
        let mut g = Graph::with_params(&store);
        let ev = g.constant(e);
        let out = m.route_batch(&mut g, ev).unwrap();
        for &w in &out.weights {
            for row in g.value(w).data().chunks(l) {
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn vq_pre_softmax_is_the_brute_force_nearest_row(seed in any::<u64>(), l in 1usize..9, k in 1usize..9) {
        let (store, m) = routing_module(seed, 4, l, k, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let e = Tensor::matrix(4, 4, uniform(&mut rng, 16, 3.0)).unwrap();
        let mut g = Graph::with_params(&store);
        let ev = g.constant(e);
        let out = m.route_batch(&mut g, ev).unwrap();
        let cb = store.get(m.codebook.as_ref().unwrap().entries);
        for h in 0..m.num_heads() {
            let z = g.value(out.logits[h]).data();
            let q = g.value(out.pre_softmax[h]).data();
            for b in 0..4 {
                let zr = &z[b * l..(b + 1) * l];
                // First strictly smaller distance wins, so ties keep the lowest index.
                let mut best = (f64::INFINITY, 0);
                for j in 0..k {
                    let d: f64 = zr.iter().zip(cb.row_slice(j)).map(|(a, c)| (a - c) * (a - c)).sum();
                    if d < best.0 {
                        best = (d, j);
                    }
                }
                prop_assert_eq!(out.indices[h][b], best.1);
                let qr = &q[b * l..(b + 1) * l];
                prop_assert!(qr.iter().zip(cb.row_slice(best.1)).all(|(a, c)| a.to_bits() == c.to_bits()));
            }
        }
    }

    #[test]
    fn straight_through_copies_the_gradient(seed in any::<u64>(), l in 1usize..9, k in 1usize..6) {
        let (store, m) = routing_module(seed, 4, l, k, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let e = Tensor::matrix(2, 4, uniform(&mut rng, 8, 3.0)).unwrap();
        let mut g = Graph::with_params(&store);
        let ev = g.constant(e);
        let out = m.route_batch(&mut g, ev).unwrap();
        let mut terms = Vec::new();
        for &w in &out.weights {
            let c = g.constant(Tensor::matrix(2, l, uniform(&mut rng, 2 * l, 1.0)).unwrap());
            let p = g.mul(w, c).unwrap();
            terms.push(g.sum(p));
        }
        let all = g.concat_cols(&terms).unwrap();
        let loss = g.sum(all);
        let grads = g.backward(loss).unwrap();
        for h in 0..m.num_heads() {
            let dz = grads.wrt(out.logits[h]).unwrap();
            let dq = grads.wrt(out.pre_softmax[h]).unwrap();
            let diff = dz.iter().zip(dq).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(diff <= 1e-12, "{diff}");
        }
    }

    #[test]
    fn attention_maps_are_row_stochastic(
        seed in any::<u64>(), n in 1usize..7, l in 1usize..6, heads in 1usize..3,
    ) {
        let (store, att, x, r) = attention(seed, n, 3, l, heads);
        let mut g = Graph::with_params(&store);
        let (xv, rv) = (g.constant(x), g.constant(r));
        let (_, maps) = att.forward_with_maps(&mut g, xv, rv).unwrap();
        for m in maps.latent_from_keys.iter().chain(&maps.queries_from_latents) {
            for row in 0..m.rows() {
                prop_assert!((m.row_slice(row).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
        prop_assert_eq!(maps.latent_from_keys[0].shape(), &[l, n]);
        prop_assert_eq!(maps.queries_from_latents[0].shape(), &[n, l]);
    }

    #[test]
    fn attention_output_of_a_query_ignores_key_order(
        seed in any::<u64>(), n in 2usize..7, l in 1usize..6, shift in 1usize..6,
    ) {
        let (store, att, x, r) = attention(seed, n, 3, l, 1);
        // Rotate the rows: every token keeps its content, so each query's
        // output must follow it to its new position.
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| x.row_slice(p).to_vec()).collect();
        let xp = Tensor::from_rows(&rows).unwrap();
        let mut g = Graph::with_params(&store);
        let (xv, xpv, rv) = (g.constant(x), g.constant(xp), g.constant(r));
        let y = att.forward(&mut g, xv, rv).unwrap();
        let yp = att.forward(&mut g, xpv, rv).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            let a = g.value(yp).row_slice(i);
            let b = g.value(y).row_slice(p);
            let diff = a.iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            prop_assert!(diff <= 1e-12, "{diff}");
        }
    }

    #[test]
    fn single_latent_gives_identical_query_outputs(seed in any::<u64>(), n in 1usize..8) {
        let (store, att, x, r) = attention(seed, n, 3, 1, 1);
        let mut g = Graph::with_params(&store);
        let (xv, rv) = (g.constant(x), g.constant(r));
        let y = att.forward(&mut g, xv, rv).unwrap();
        let first = g.value(y).row_slice(0).to_vec();
        for i in 1..n {
            prop_assert!(g.value(y).row_slice(i).iter().zip(&first).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
