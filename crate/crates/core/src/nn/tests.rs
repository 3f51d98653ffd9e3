use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
}

/// Compares analytic gradients of `f` with central differences computed in
/// f32. `f` must reduce to a scalar and be smooth near the sampled inputs.
fn check_grad(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[NodeId]) -> NodeId) {
    let eval = |inputs: &[Tensor]| -> f64 {
        let mut g = Graph::inference();
        let ids: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &ids);
        g.value(out).item() as f64
    };
    let mut g = Graph::default();
    let ids: Vec<_> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &ids);
    let grads = g.backward(out);
    let h = 1e-2f32;
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.wrt(*id).expect("input has a gradient");
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h as f64);
            let a = analytic.data()[i] as f64;
            let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-2));
            assert!(err < 2e-2, "input {k} element {i}: analytic {a}, numeric {numeric}");
        }
    }
}

fn weighted_sum(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.shape(x), &mut rng);
    let w = g.constant(w);
    let p = g.mul(x, w);
    g.sum_all(p)
}

#[test]
fn conv2d_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for geom in [ConvGeom::same(3), ConvGeom::strided(3, 2), ConvGeom::same(4), ConvGeom { stride: 1, pad: [0; 4] }] {
        let k = if geom.pad[0] == 2 { 4 } else if geom.pad == [0; 4] { 1 } else { 3 };
        let x = random(&[2, 3, 6, 5], &mut rng);
        let w = random(&[4, 3, k, k], &mut rng);
        let b = random(&[4], &mut rng);
        check_grad(vec![x, w, b], |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), geom);
            weighted_sum(g, y, 7)
        });
    }
}

#[test]
fn conv2d_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[1, 2, 7, 6], &mut rng);
    let w = random(&[3, 2, 4, 4], &mut rng);
    let geom = ConvGeom::same(4);
    let y = kernels::conv2d_forward(&x, &w, None, geom);
    let (_, _, oh, ow) = y.dims4();
    for o in 0..3 {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for c in 0..2 {
                    for ky in 0..4 {
                        for kx in 0..4 {
                            let iy = oy as isize + ky as isize - geom.pad[0] as isize;
                            let ix = ox as isize + kx as isize - geom.pad[2] as isize;
                            if iy >= 0 && iy < 7 && ix >= 0 && ix < 6 {
                                acc += (x.at4(0, c, iy as usize, ix as usize) * w.at4(o, c, ky, kx)) as f64;
                            }
                        }
                    }
                }
                assert!((y.at4(0, o, oy, ox) as f64 - acc).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn elementwise_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[2, 2, 3, 3], &mut rng);
    let b = random(&[2, 2, 3, 3], &mut rng);
    check_grad(vec![a.clone(), b.clone()], |g, ids| {
        let s = g.add(ids[0], ids[1]);
        let d = g.sub(s, ids[1]);
        let d = g.sub(d, ids[1]);
        let m = g.mul(d, ids[0]);
        let e = g.exp(m);
        let q = g.sqr(ids[1]);
        let sg = g.sigmoid(q);
        let t = g.add(e, sg);
        let t = g.scale(t, 0.7);
        let t = g.add_scalar(t, 3.0);
        weighted_sum(g, t, 9)
    });
    // Keep inputs away from the kinks of relu and abs.
    let a = a.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    check_grad(vec![a], |g, ids| {
        let r = g.relu(ids[0]);
        let b = g.abs(ids[0]);
        let t = g.add(r, b);
        weighted_sum(g, t, 10)
    });
}

#[test]
fn pelu_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[1, 1, 4, 4], &mut rng).map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    let p = Tensor::new([3], vec![0.8, 1.3, 1.1]);
    check_grad(vec![x, p], |g, ids| {
        let y = g.pelu(ids[0], ids[1]);
        weighted_sum(g, y, 11)
    });
}

#[test]
fn resampling_and_shape_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[2, 3, 3, 4], &mut rng);
    let b = random(&[2, 1, 3, 4], &mut rng);
    check_grad(vec![a, b], |g, ids| {
        let up = g.upsample_nearest2x(ids[0]);
        let r = g.resize_bilinear(up, 5, 11);
        let rep = g.repeat_channels(ids[1], 2);
        let cat = g.concat_channels(&[ids[0], rep]);
        let sl = g.slice_channels(cat, 1, 3);
        let cb = g.concat_batch(&[sl, ids[0]]);
        let sel = g.select_batch(cb, 2);
        let s1 = weighted_sum(g, r, 12);
        let s2 = weighted_sum(g, cb, 13);
        let s3 = weighted_sum(g, sel, 14);
        let t = g.add(s1, s2);
        g.add(t, s3)
    });
}

#[test]
fn attention_style_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[2, 3, 4, 4], &mut rng);
    check_grad(vec![x], |g, ids| {
        let m = g.mean_spatial(ids[0]);
        let s = g.sigmoid(m);
        let y = g.scale_channels(ids[0], s);
        weighted_sum(g, y, 15)
    });
}

#[test]
fn matrix_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[4, 3], &mut rng);
    let b = random(&[3, 5], &mut rng);
    let bt = random(&[5, 3], &mut rng);
    let r = random(&[5], &mut rng);
    check_grad(vec![a, b, bt, r], |g, ids| {
        let p = g.matmul(ids[0], ids[1], false);
        let q = g.matmul(ids[0], ids[2], true);
        let s = g.add(p, q);
        let s = g.add_row(s, ids[3]);
        weighted_sum(g, s, 16)
    });
}

#[test]
fn row_op_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[2, 3, 2, 3], &mut rng);
    check_grad(vec![x], |g, ids| {
        let rows = g.nchw_to_rows(ids[0]);
        let n = g.l2_normalize_rows(rows, 1e-8);
        let gathered = g.gather_rows(n, &[0, 3, 3, 7]);
        let back = g.rows_to_nchw(n, 2, 2, 3);
        let s1 = weighted_sum(g, back, 17);
        let s2 = weighted_sum(g, gathered, 18);
        g.add(s1, s2)
    });
}

#[test]
fn l2_normalize_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[5, 3], &mut rng);
    check_grad(vec![x], |g, ids| {
        let n = g.l2_normalize_rows(ids[0], 1e-8);
        weighted_sum(g, n, 20)
    });
}

#[test]
fn layout_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[2, 3, 2, 3], &mut rng);
    check_grad(vec![x], |g, ids| {
        let rows = g.nchw_to_rows(ids[0]);
        let back = g.rows_to_nchw(rows, 2, 2, 3);
        let s1 = weighted_sum(g, back, 17);
        let ga = g.gather_rows(rows, &[0, 3, 3, 7]);
        let s2 = weighted_sum(g, ga, 21);
        g.add(s1, s2)
    });
}

#[test]
fn softmax_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[2, 3, 2, 2], &mut rng);
    check_grad(vec![x], |g, ids| {
        let l = g.log_softmax_channels(ids[0]);
        let s = g.softmax_channels(ids[0]);
        let r = g.reshape(s, &[24]);
        let m = g.mean_all(r);
        let w = weighted_sum(g, l, 19);
        g.add(m, w)
    });
}

#[test]
fn softmax_is_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut g = Graph::inference();
    let x = g.constant(random(&[2, 2, 5, 5], &mut rng).map(|v| v * 30.0));
    let s = g.softmax_channels(x);
    let v = g.value(s);
    for n in 0..2 {
        for p in 0..25 {
            let total = v.plane(n, 0)[p] + v.plane(n, 1)[p];
            assert!((total - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn topk_pads_short_rows() {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::new([1, 2], vec![0.25, 0.75]));
    let k = g.topk_desc(x, 3, -1.0);
    assert_eq!(g.value(k).data(), &[0.75, 0.25, -1.0]);
}

#[test]
fn trainable_filter_limits_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let a = Linear::new(&mut store, "head.a", 3, 2, &mut rng);
    let b = Linear::new(&mut store, "body.b", 2, 1, &mut rng);
    let mut g = Graph::new(Trainable::Prefixes(vec!["head.".into()]));
    let x = g.constant(random(&[4, 3], &mut rng));
    let h = a.forward(&mut g, &store, x);
    let y = b.forward(&mut g, &store, h);
    let loss = g.sum_all(y);
    let grads = g.backward(loss);
    assert!(grads.param(a.w).is_some());
    assert!(grads.param(b.w).is_none());
}

#[test]
fn adam_reduces_a_quadratic() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::new([2], vec![3.0, -2.0]));
    let mut opt = Adam::new(0.1);
    for _ in 0..300 {
        let mut g = Graph::default();
        let x = g.param(&store, id);
        let s = g.sqr(x);
        let l = g.sum_all(s);
        let grads = g.backward(l);
        opt.step(&mut store, &grads);
    }
    assert!(store.value(id).sq_norm() < 1e-2);
}

#[test]
fn params_round_trip_through_a_file() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    Conv2d::same(&mut store, "c", 2, 3, 3, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.safetensors");
    let extra = vec![("adam.m.c.weight".to_string(), Tensor::zeros([3, 2, 3, 3]))];
    let meta = [("step".to_string(), "5".to_string())].into_iter().collect();
    store.save(&path, &extra, meta).unwrap();
    let mut fresh = ParamStore::new();
    Conv2d::same(&mut fresh, "c", 2, 3, 3, &mut ChaCha8Rng::seed_from_u64(99));
    let (rest, meta) = fresh.load(&path).unwrap();
    for id in store.ids() {
        assert_eq!(store.value(id), fresh.value(id));
    }
    assert!(rest.contains_key("adam.m.c.weight"));
    assert_eq!(meta.get("step").map(String::as_str), Some("5"));
}

#[test]
fn topk_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // Well separated values so central differences never reorder a row.
    let mut vals: Vec<f32> = (0..24).map(|i| i as f32 * 0.1 - 1.2).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    let x = Tensor::new([4, 6], vals);
    check_grad(vec![x], |g, ids| {
        let k = g.topk_desc(ids[0], 4, -1.0);
        weighted_sum(g, k, 22)
    });
}
