use mpi_nli::encoder::EncodedPair;
use mpi_nli::routing::{self, dynamic_route, inject, squash, vote, Router, RoutingConfig, RoutingTrace, RoutingVariant, VoteTensor};
use mpi_nli::{Graph, ParamStore, Perspective, RngStream, Tensor};
use proptest::prelude::*;

type Mat = Vec<Vec<f64>>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn squash_vec(v: &[f64]) -> Vec<f64> {
    let n2 = dot(v, v);
    if n2 == 0.0 {
        return vec![0.0; v.len()];
    }
    let f = n2 / (1.0 + n2) / n2.sqrt();
    v.iter().map(|x| x * f).collect()
}

fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn rows(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

/// Straight-line routing-by-agreement over `u[i][l]` vectors.
fn route_oracle(u: &[Mat], r: usize) -> (Mat, Vec<Mat>) {
    let (t, nl) = (u.len(), u[0].len());
    let d = u[0][0].len();
    let mut b = vec![vec![0.0; nl]; t];
    let mut caps = vec![vec![0.0; d]; nl];
    let mut weights = Vec::new();
    for _ in 0..r {
        let c: Mat = b.iter().map(|row| softmax_vec(row)).collect();
        for l in 0..nl {
            let mut s = vec![0.0; d];
            for i in 0..t {
                for k in 0..d {
                    s[k] += c[i][l] * u[i][l][k];
                }
            }
            caps[l] = squash_vec(&s);
        }
        for i in 0..t {
            for l in 0..nl {
                b[i][l] += dot(&u[i][l], &caps[l]);
            }
        }
        weights.push(c);
    }
    (caps, weights)
}

fn votes_from<'g>(g: &'g Graph, u: &[Mat]) -> VoteTensor<'g> {
    let nl = u[0].len();
    let perspectives = Perspective::routed(nl == 4);
    let votes = (0..nl)
        .map(|l| g.constant(Tensor::from_rows(&u.iter().map(|tok| tok[l].clone()).collect::<Vec<_>>()).unwrap()))
        .collect();
    VoteTensor { perspectives, votes }
}

fn random_votes(rng: &mut RngStream, t: usize, nl: usize, d: usize) -> Vec<Mat> {
    (0..t)
        .map(|_| (0..nl).map(|_| (0..d).map(|_| rng.uniform(-1.5, 1.5)).collect()).collect())
        .collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn router(variant: RoutingVariant, d_low: usize, d_high: usize, r: usize, seed: u64) -> (ParamStore, Router) {
    let mut store = ParamStore::new();
    let cfg = RoutingConfig {
        iterations: r,
        variant,
        d_high,
        orphan: false,
    };
    let router = Router::new(&mut store, &mut RngStream::new(seed), cfg, d_low).unwrap();
    (store, router)
}

#[test]
fn squash_examples() {
    let g = Graph::new();
    let e = squash(g.constant(Tensor::row(&[0.6, 0.0, 0.8]))).unwrap().value();
    assert!(max_diff(e.data(), &[0.3, 0.0, 0.4]) < 1e-15);
    let v = squash(g.constant(Tensor::row(&[3.0, 4.0]))).unwrap().value();
    assert!(max_diff(v.data(), &[15.0 / 26.0, 20.0 / 26.0]) < 1e-15);
    assert!((v.data()[0] - 0.5769).abs() < 1e-4 && (v.data()[1] - 0.7692).abs() < 1e-4);
    let z = squash(g.constant(Tensor::zeros(&[2, 3]))).unwrap().value();
    assert!(z.data().iter().all(|&x| x == 0.0));
}

#[test]
fn squash_acts_per_row() {
    let g = Graph::new();
    let out = squash(g.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap()))
        .unwrap()
        .value();
    assert!(max_diff(out.row_slice(0), &squash_vec(&[3.0, 4.0])) < 1e-15);
    assert_eq!(out.row_slice(1), &[0.0, 0.0]);
    assert!(max_diff(out.row_slice(2), &[0.5, 0.0]) < 1e-15);
}

#[test]
fn vote_cases() {
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(1);
    let ids: Vec<_> = Perspective::RELATIONS
        .iter()
        .map(|p| (*p, store.add(format!("w{p}"), rng.uniform_tensor(&[3, 2], -1.0, 1.0)).unwrap()))
        .collect();
    let s = rng.uniform_tensor(&[4, 3], -1.0, 1.0);
    let g = Graph::new();
    let u = vote(&g, &store, g.constant(s.clone()), &ids).unwrap();
    assert_eq!(u.tokens(), 4);
    let dense = u.to_tensor();
    assert_eq!(dense.shape(), &[4, 3, 2]);
    for i in 0..4 {
        for (l, &(_, w)) in ids.iter().enumerate() {
            let w = store.value(w);
            for k in 0..2 {
                let want: f64 = (0..3).map(|j| s.get(i, j) * w.get(j, k)).sum();
                assert!((dense.data()[(i * 3 + l) * 2 + k] - want).abs() < 1e-15);
                assert!((u.votes[l].value().get(i, k) - want).abs() < 1e-15);
            }
        }
    }

    let zero = vote(&g, &store, g.constant(Tensor::zeros(&[2, 3])), &ids).unwrap();
    assert!(zero.to_tensor().data().iter().all(|&x| x == 0.0));

    let mut sq = ParamStore::new();
    let eye: Vec<_> = Perspective::RELATIONS
        .iter()
        .map(|p| (*p, sq.add(format!("e{p}"), Tensor::identity(3)).unwrap()))
        .collect();
    let g = Graph::new();
    let id = vote(&g, &sq, g.constant(s.clone()), &eye).unwrap();
    for v in &id.votes {
        assert_eq!(v.value().data(), s.data());
    }
}

#[test]
fn single_token_single_iteration() {
    let mut rng = RngStream::new(2);
    let u = random_votes(&mut rng, 1, 3, 4);
    let g = Graph::new();
    let (caps, trace) = dynamic_route(&votes_from(&g, &u), 1).unwrap();
    assert!(trace.weights[0][0].iter().all(|&c| (c - 1.0 / 3.0).abs() < 1e-15));
    for l in 0..3 {
        let scaled: Vec<f64> = u[0][l].iter().map(|x| x / 3.0).collect();
        assert!(max_diff(caps[l].value().data(), &squash_vec(&scaled)) < 1e-15);
    }
}

#[test]
fn identical_votes_keep_weights_uniform() {
    let mut rng = RngStream::new(3);
    let u: Vec<Mat> = (0..5)
        .map(|_| {
            let v: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
            vec![v.clone(), v.clone(), v]
        })
        .collect();
    let g = Graph::new();
    let (_, trace) = dynamic_route(&votes_from(&g, &u), 5).unwrap();
    for it in &trace.weights {
        for row in it {
            assert!(row.iter().all(|&c| (c - 1.0 / 3.0).abs() < 1e-15), "{row:?}");
        }
    }
}

#[test]
fn three_iterations_match_straight_line_oracle() {
    for seed in 0..5 {
        let mut rng = RngStream::new(10 + seed);
        let u = random_votes(&mut rng, 4, 3, 5);
        let g = Graph::new();
        let (caps, trace) = dynamic_route(&votes_from(&g, &u), 3).unwrap();
        let (want, weights) = route_oracle(&u, 3);
        for l in 0..3 {
            assert!(max_diff(caps[l].value().data(), &want[l]) < 1e-13);
        }
        for (it, w) in trace.weights.iter().zip(&weights) {
            for (a, b) in it.iter().zip(w) {
                assert!(max_diff(a, b) < 1e-13);
            }
        }
    }
}

fn check_trace(trace: &RoutingTrace) {
    assert_eq!(trace.logits.len(), trace.iterations);
    assert!(trace.logits[0].iter().flatten().all(|&b| b == 0.0));
    for it in 0..trace.iterations {
        for row in &trace.weights[it] {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            assert!(row.iter().all(|&c| c >= 0.0));
        }
        for &n in &trace.capsule_norms[it] {
            assert!((0.0..1.0).contains(&n));
        }
        if it + 1 < trace.iterations {
            for (i, row) in trace.logits[it + 1].iter().enumerate() {
                for (l, &b) in row.iter().enumerate() {
                    let replay = trace.logits[it][i][l] + trace.agreements[it][i][l];
                    assert_eq!(b, replay);
                }
            }
        }
    }
}

#[test]
fn vanilla_shapes_and_premise_independence() {
    let (store, router) = router(RoutingVariant::Vanilla, 6, 4, 3, 4);
    let mut rng = RngStream::new(5);
    let s_p = rng.uniform_tensor(&[3, 6], -1.0, 1.0);
    let g = Graph::new();
    let a = router
        .route(&g, &store, &EncodedPair { s_p: g.constant(s_p.clone()), s_h: g.constant(rng.uniform_tensor(&[2, 6], -1.0, 1.0)) })
        .unwrap();
    let b = router
        .route(&g, &store, &EncodedPair { s_p: g.constant(s_p), s_h: g.constant(rng.uniform_tensor(&[5, 6], -1.0, 1.0)) })
        .unwrap();
    assert_eq!(a.perspectives.dim(), 8);
    assert_eq!(a.perspectives.vectors.len(), 3);
    assert_eq!(a.traces[0].side, "premise");
    assert_eq!(a.traces[0].weights, b.traces[0].weights);
    for ((_, va), (_, vb)) in a.perspectives.vectors.iter().zip(&b.perspectives.vectors) {
        assert_eq!(&va.value().data()[..4], &vb.value().data()[..4]);
    }
    for t in &a.traces {
        check_trace(t);
    }
}

#[test]
fn perspective_norm_is_rms_of_capsule_norms() {
    let (store, router) = router(RoutingVariant::Vanilla, 6, 4, 2, 6);
    let mut rng = RngStream::new(7);
    let g = Graph::new();
    let enc = EncodedPair {
        s_p: g.constant(rng.uniform_tensor(&[3, 6], -1.0, 1.0)),
        s_h: g.constant(rng.uniform_tensor(&[4, 6], -1.0, 1.0)),
    };
    let routed = router.route(&g, &store, &enc).unwrap();
    let (np, nh) = (&routed.traces[0].capsule_norms[1], &routed.traces[1].capsule_norms[1]);
    for (l, n) in routed.perspectives.norm_values().iter().enumerate() {
        let want = ((np[l] * np[l] + nh[l] * nh[l]) / 2.0).sqrt();
        assert!((n - want).abs() < 1e-14);
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn snoop_single_iteration_hand_trace() {
    let (store, router) = router(RoutingVariant::Snoop, 3, 2, 1, 8);
    let gate = router.snoop.as_ref().unwrap();
    let (gw, gb) = (store.value(gate.linear.w).clone(), store.value(gate.linear.b).get(0, 0));
    let mut rng = RngStream::new(9);
    let s_p = rng.uniform_tensor(&[2, 3], -1.0, 1.0);
    let s_h = rng.uniform_tensor(&[2, 3], -1.0, 1.0);
    let g = Graph::new();
    let routed = router
        .route(&g, &store, &EncodedPair { s_p: g.constant(s_p.clone()), s_h: g.constant(s_h.clone()) })
        .unwrap();

    let project = |s: &Tensor, l: usize| -> Mat {
        let w = store.value(router.transforms[l].1);
        (0..2).map(|i| (0..2).map(|k| (0..3).map(|j| s.get(i, j) * w.get(j, k)).sum()).collect()).collect()
    };
    let alpha = |own: &[f64], other: &[f64]| {
        let x: Vec<f64> = own.iter().chain(other).copied().collect();
        sigmoid((0..4).map(|k| x[k] * gw.get(k, 0)).sum::<f64>() + gb)
    };
    for l in 0..3 {
        let (up, uh) = (project(&s_p, l), project(&s_h, l));
        let mean = |u: &Mat| -> Vec<f64> { (0..2).map(|k| (u[0][k] + u[1][k]) / 3.0).collect() };
        let (vp, vh) = (squash_vec(&mean(&up)), squash_vec(&mean(&uh)));
        let (ap, ah) = (alpha(&vp, &vh), alpha(&vh, &vp));
        let (tp, th) = (&routed.traces[0], &routed.traces[1]);
        assert!((tp.alphas.as_ref().unwrap()[0][l] - ap).abs() < 1e-14);
        assert!((th.alphas.as_ref().unwrap()[0][l] - ah).abs() < 1e-14);
        for i in 0..2 {
            let want_p = dot(&up[i], &vp) + ap * dot(&up[i], &vh);
            let want_h = dot(&uh[i], &vh) + ah * dot(&uh[i], &vp);
            assert!((tp.agreements[0][i][l] - want_p).abs() < 1e-14);
            assert!((th.agreements[0][i][l] - want_h).abs() < 1e-14);
        }
        let v = routed.perspectives.vectors[l].1.value();
        assert!(max_diff(&v.data()[..2], &vp) < 1e-14);
        assert!(max_diff(&v.data()[2..], &vh) < 1e-14);
    }
}

#[test]
fn snoop_alphas_stay_in_open_interval() {
    for seed in 0..20 {
        let (store, router) = router(RoutingVariant::Snoop, 4, 3, 3, seed);
        let mut rng = RngStream::new(100 + seed);
        let g = Graph::new();
        let enc = EncodedPair {
            s_p: g.constant(rng.uniform_tensor(&[3, 4], -3.0, 3.0)),
            s_h: g.constant(rng.uniform_tensor(&[4, 4], -3.0, 3.0)),
        };
        let routed = router.route(&g, &store, &enc).unwrap();
        for t in &routed.traces {
            let alphas = t.alphas.as_ref().unwrap();
            assert_eq!(alphas.len(), 3);
            assert!(alphas.iter().flatten().all(|&a| a > 0.0 && a < 1.0));
            check_trace(t);
        }
    }
}

#[test]
fn inject_cases() {
    let g = Graph::new();
    let mut rng = RngStream::new(11);
    let w = rng.uniform_tensor(&[3, 3], -1.0, 1.0);
    let s_h = rng.uniform_tensor(&[4, 3], -1.0, 1.0);

    let one = rng.uniform_tensor(&[1, 3], -1.0, 1.0);
    let out = inject(g.constant(one.clone()), g.constant(s_h.clone()), g.constant(w.clone())).unwrap().value();
    assert_eq!(out.shape(), &[4, 6]);
    for j in 0..4 {
        assert_eq!(&out.row_slice(j)[..3], s_h.row_slice(j));
        assert!(max_diff(&out.row_slice(j)[3..], one.row_slice(0)) < 1e-15);
    }

    let s_p = rng.uniform_tensor(&[5, 3], -1.0, 1.0);
    let zero = inject(g.constant(s_p.clone()), g.constant(s_h.clone()), g.constant(Tensor::zeros(&[3, 3])))
        .unwrap()
        .value();
    let mean: Vec<f64> = (0..3).map(|k| (0..5).map(|i| s_p.get(i, k)).sum::<f64>() / 5.0).collect();
    for j in 0..4 {
        assert!(max_diff(&zero.row_slice(j)[3..], &mean) < 1e-15);
    }

    let out = inject(g.constant(s_p.clone()), g.constant(s_h.clone()), g.constant(w.clone())).unwrap().value();
    let (p, h) = (rows(&s_p), rows(&s_h));
    for j in 0..4 {
        let scores: Vec<f64> = (0..5)
            .map(|i| (0..3).map(|a| (0..3).map(|b| p[i][a] * w.get(a, b) * h[j][b]).sum::<f64>()).sum())
            .collect();
        let att = softmax_vec(&scores);
        assert!((att.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let summary: Vec<f64> = (0..3).map(|k| (0..5).map(|i| att[i] * p[i][k]).sum()).collect();
        assert!(max_diff(&out.row_slice(j)[3..], &summary) < 1e-14);
    }
}

#[test]
fn injection_routes_hypothesis_only() {
    let (store, router) = router(RoutingVariant::Injection, 4, 3, 3, 12);
    let mut rng = RngStream::new(13);
    let g = Graph::new();
    let enc = EncodedPair {
        s_p: g.constant(rng.uniform_tensor(&[3, 4], -1.0, 1.0)),
        s_h: g.constant(rng.uniform_tensor(&[5, 4], -1.0, 1.0)),
    };
    let routed = router.route(&g, &store, &enc).unwrap();
    assert_eq!(routed.perspectives.dim(), 3);
    assert_eq!(routed.traces.len(), 1);
    assert_eq!(routed.traces[0].side, "hypothesis");
    assert_eq!(routed.traces[0].weights[0].len(), 5);
    check_trace(&routed.traces[0]);
}

#[test]
fn orphan_routes_but_never_feeds_prediction() {
    let mut store = ParamStore::new();
    let cfg = RoutingConfig {
        iterations: 2,
        variant: RoutingVariant::Vanilla,
        d_high: 3,
        orphan: true,
    };
    let router = Router::new(&mut store, &mut RngStream::new(14), cfg, 4).unwrap();
    let mut rng = RngStream::new(15);
    let g = Graph::new();
    let enc = EncodedPair {
        s_p: g.constant(rng.uniform_tensor(&[3, 4], -1.0, 1.0)),
        s_h: g.constant(rng.uniform_tensor(&[2, 4], -1.0, 1.0)),
    };
    let routed = router.route(&g, &store, &enc).unwrap();
    assert_eq!(routed.traces[0].perspectives.len(), 4);
    assert_eq!(routed.traces[0].weights[0][0].len(), 4);
    assert_eq!(routed.perspectives.vectors.len(), 3);
    assert!(routed.perspectives.get(Perspective::Orphan).is_none());
}

#[test]
fn zero_iterations_is_a_config_error() {
    let g = Graph::new();
    let u = random_votes(&mut RngStream::new(16), 2, 3, 2);
    assert!(dynamic_route(&votes_from(&g, &u), 0).is_err());
    let cfg = RoutingConfig {
        iterations: 0,
        variant: RoutingVariant::Vanilla,
        d_high: 2,
        orphan: false,
    };
    assert!(Router::new(&mut ParamStore::new(), &mut RngStream::new(0), cfg, 2).is_err());
}

#[test]
fn trace_serializes_expected_fields() {
    let (store, router) = router(RoutingVariant::Snoop, 3, 2, 2, 17);
    let mut rng = RngStream::new(18);
    let g = Graph::new();
    let enc = EncodedPair {
        s_p: g.constant(rng.uniform_tensor(&[2, 3], -1.0, 1.0)),
        s_h: g.constant(rng.uniform_tensor(&[2, 3], -1.0, 1.0)),
    };
    let trace = &router.route(&g, &store, &enc).unwrap().traces[1];
    let json = serde_json::to_value(trace).unwrap();
    for key in ["variant", "iterations", "tokens", "weights", "alphas", "capsule_norms"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    assert_eq!(json["variant"], "snoop");
    assert_eq!(json["perspectives"][1], "NE");
    let back: RoutingTrace = serde_json::from_value(json).unwrap();
    assert_eq!(&back, trace);
}

fn permutation_case(variant: RoutingVariant, seed: u64, m: usize, n: usize) -> f64 {
    let (store, router) = router(variant, 4, 3, 3, seed);
    let mut rng = RngStream::new(seed).fork(9);
    let s_p = rng.uniform_tensor(&[m, 4], -2.0, 2.0);
    let s_h = rng.uniform_tensor(&[n, 4], -2.0, 2.0);
    let mut pp: Vec<usize> = (0..m).collect();
    let mut ph: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut pp);
    rng.shuffle(&mut ph);
    let perm = |t: &Tensor, p: &[usize]| Tensor::from_rows(&p.iter().map(|&i| t.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let g = Graph::new();
    let a = router.route(&g, &store, &EncodedPair { s_p: g.constant(s_p.clone()), s_h: g.constant(s_h.clone()) }).unwrap();
    let b = router
        .route(&g, &store, &EncodedPair { s_p: g.constant(perm(&s_p, &pp)), s_h: g.constant(perm(&s_h, &ph)) })
        .unwrap();
    let flat = |r: &routing::Routed| -> Vec<f64> { r.perspectives.vectors.iter().flat_map(|(_, v)| v.value().data().to_vec()).collect() };
    max_diff(&flat(&a), &flat(&b))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn routing_trace_invariants(seed in 0u64..10_000, t in 1usize..9, d in 1usize..6, r in 1usize..6, orphan: bool) {
        let nl = if orphan { 4 } else { 3 };
        let u = random_votes(&mut RngStream::new(seed), t, nl, d);
        let g = Graph::new();
        let (caps, trace) = dynamic_route(&votes_from(&g, &u), r).unwrap();
        prop_assert_eq!(trace.iterations, r);
        prop_assert_eq!(caps.len(), nl);
        check_trace(&trace);
    }

    #[test]
    fn routed_capsules_ignore_token_order(seed in 0u64..10_000, m in 1usize..7, n in 1usize..7, v in 0usize..3) {
        let variant = [RoutingVariant::Vanilla, RoutingVariant::Snoop, RoutingVariant::Injection][v];
        prop_assert!(permutation_case(variant, seed, m, n) <= 1e-10);
    }

    #[test]
    fn squash_norm_and_direction(values in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let g = Graph::new();
        let out = squash(g.constant(Tensor::row(&values))).unwrap().value();
        let n2 = dot(&values, &values);
        let got = dot(out.data(), out.data()).sqrt();
        prop_assert!((got - n2 / (1.0 + n2)).abs() <= 1e-12);
        prop_assert!(got < 1.0);
        if n2 > 0.0 {
            let cos = dot(out.data(), &values) / (got * n2.sqrt());
            prop_assert!(got == 0.0 || (cos - 1.0).abs() < 1e-12);
        }
    }
}
