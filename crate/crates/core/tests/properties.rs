//! Property tests for the structural invariants of each module.

use aqa_causal::causal_graph::{default_graph, validate, CausalEdge, CausalGraph, VariableId};
use aqa_causal::fusion::{sigmoid_fuse, FeatureStream, StreamId};
use aqa_causal::gat::{self, attention_coeffs, gat_layer, GatLayer};
use aqa_causal::heads::{decode_boundaries, TransitionProbs};
use aqa_causal::metrics::{aiou, relative_l2, sample_iou, spearman, AIOU_THRESHOLDS};
use aqa_causal::numerics::{causal_mask, grad_check, layer_norm, softmax_masked, Graph, ParamStore, Tensor};
use aqa_causal::tca::{self, tca_forward, tca_scores, StageBoundaries};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn sized_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| matrix(r, c, 5.0))
}

fn gat_store(seed: u64, d: usize, h: usize) -> ParamStore {
    let mut s = ParamStore::new();
    gat::init_params(&mut s, &mut ChaCha8Rng::seed_from_u64(seed), d, h).unwrap();
    s
}

fn tca_store(seed: u64, d: usize, heads: usize) -> ParamStore {
    let mut s = ParamStore::new();
    tca::init_params(&mut s, &mut ChaCha8Rng::seed_from_u64(seed), d, heads).unwrap();
    s
}

fn permute_rows(x: &Tensor, order: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = order.iter().map(|&i| x.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn assert_rows_close(a: &Tensor, b: &Tensor, tol: f64) -> Result<(), TestCaseError> {
    prop_assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        prop_assert!((x - y).abs() <= tol, "{} vs {}", x, y);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_softmax_rows_are_distributions(x in sized_matrix(7, 7).prop_filter("square", |t| t.rows() == t.cols())) {
        let a = softmax_masked(&x, &causal_mask(x.rows())).unwrap();
        for i in 0..a.rows() {
            let s: f64 = a.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for j in 0..a.cols() {
                prop_assert!(a.get(i, j) >= 0.0);
                if j > i {
                    prop_assert_eq!(a.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn gat_attention_is_row_stochastic_per_block(t in 1usize..5, d in 1usize..6, h in 1usize..6, seed in any::<u64>(), scale in 0.1f64..10.0) {
        let x = Tensor::matrix(4 * t, d, (0..4 * t * d).map(|i| scale * ((i as f64 * 0.37 + seed as f64 % 7.0).sin())).collect()).unwrap();
        let store = gat_store(seed, d, h);
        for layer in [GatLayer::First, GatLayer::Second] {
            let a = attention_coeffs(&x, &store, layer).unwrap();
            prop_assert_eq!(a.shape(), &[4 * t, 4][..]);
            for i in 0..a.rows() {
                prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(a.row(i).iter().all(|v| *v >= 0.0 && *v <= 1.0));
            }
        }
    }

    #[test]
    fn gat_is_equivariant_to_node_and_snippet_permutations(
        x in (1usize..4, 1usize..5).prop_flat_map(|(t, d)| matrix(4 * t, d, 3.0)),
        seed in any::<u64>(),
        shuffle in any::<u64>(),
    ) {
        let t = x.rows() / 4;
        let store = gat_store(seed, x.cols(), 3);
        let out = gat_layer(&x, &store, GatLayer::First).unwrap();

        // permute snippets as blocks and nodes within each block
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
        let mut blocks: Vec<usize> = (0..t).collect();
        rand::seq::SliceRandom::shuffle(&mut blocks[..], &mut rng);
        let mut within: Vec<usize> = (0..4).collect();
        rand::seq::SliceRandom::shuffle(&mut within[..], &mut rng);
        let order: Vec<usize> = blocks.iter().flat_map(|b| within.iter().map(move |n| 4 * b + n)).collect();

        let permuted = gat_layer(&permute_rows(&x, &order), &store, GatLayer::First).unwrap();
        assert_rows_close(&permuted, &permute_rows(&out, &order), 1e-12)?;
    }

    #[test]
    fn gat_snippets_do_not_exchange_messages(
        x in (2usize..5, 1usize..5).prop_flat_map(|(t, d)| matrix(4 * t, d, 3.0)),
        noise in matrix(4, 4, 3.0),
        seed in any::<u64>(),
    ) {
        let store = gat_store(seed, x.cols(), 2);
        let before = gat_layer(&x, &store, GatLayer::First).unwrap();
        let mut edited = x.clone();
        for n in 0..4 {
            for c in 0..x.cols() {
                edited.set(n, c, edited.get(n, c) + noise.get(n, c % 4));
            }
        }
        let after = gat_layer(&edited, &store, GatLayer::First).unwrap();
        for i in 4..x.rows() {
            prop_assert_eq!(before.row(i), after.row(i));
        }
    }

    #[test]
    fn tca_attention_is_causal_and_row_stochastic(heads in 1usize..4, dh in 1usize..4, seed in any::<u64>(), s in matrix(3, 9, 4.0)) {
        let d = heads * dh;
        let s = Tensor::matrix(3, d, s.data()[..3 * d].to_vec()).unwrap();
        let store = tca_store(seed, d, heads);
        let per_head = tca_scores(&s, &store).unwrap();
        prop_assert_eq!(per_head.len(), heads);
        for a in per_head {
            for i in 0..3 {
                prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for j in i + 1..3 {
                    prop_assert_eq!(a.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn tca_output_ignores_later_stages(seed in any::<u64>(), s in matrix(3, 4, 4.0), later in matrix(3, 4, 4.0), row in 0usize..2) {
        let store = tca_store(seed, 4, 2);
        let (base, _) = tca_forward(&s, &store).unwrap();
        let mut edited = s.clone();
        for i in row + 1..3 {
            for c in 0..4 {
                edited.set(i, c, later.get(i, c));
            }
        }
        let (moved, _) = tca_forward(&edited, &store).unwrap();
        for i in 0..=row {
            prop_assert_eq!(base.row(i), moved.row(i));
        }
    }

    #[test]
    fn fused_magnitude_never_exceeds_original(o in matrix(4, 5, 50.0), m in matrix(4, 5, 50.0)) {
        let f = sigmoid_fuse(
            &FeatureStream::new(StreamId::QueryOriginal, o.clone()).unwrap(),
            &FeatureStream::new(StreamId::QueryMask, m).unwrap(),
        ).unwrap();
        for (fv, ov) in f.values.data().iter().zip(o.data()) {
            prop_assert!(fv.abs() <= ov.abs());
            prop_assert!(fv * ov >= 0.0);
        }
    }

    #[test]
    fn decoded_boundaries_are_always_valid(p in (3usize..20).prop_flat_map(|t| prop::collection::vec(0.0f64..1.0, 2 * t))) {
        let len = p.len() / 2;
        // ties are common with the coarse grid
        let p: Vec<f64> = p.iter().map(|v| (v * 4.0).round() / 4.0).collect();
        let probs = TransitionProbs { p: Tensor::matrix(len, 2, p).unwrap() };
        let b = decode_boundaries(&probs).unwrap();
        prop_assert!(0 < b.t1 && b.t1 < b.t2 && b.t2 < len);
        prop_assert!(StageBoundaries::new(b.t1, b.t2, len).is_ok());
    }

    #[test]
    fn layer_norm_standardises_rows(x in sized_matrix(5, 8).prop_filter("needs width", |t| t.cols() >= 2)) {
        let n = x.cols();
        let out = layer_norm(&x, &Tensor::full(1, n, 1.0), &Tensor::zeros(1, n)).unwrap();
        for i in 0..x.rows() {
            let r = x.row(i);
            let mu = r.iter().sum::<f64>() / n as f64;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
            let o = out.row(i);
            let m = o.iter().sum::<f64>() / n as f64;
            let v = o.iter().map(|y| (y - m).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((v - var / (var + aqa_causal::numerics::LAYER_NORM_EPS)).abs() < 1e-9);
        }
    }

    #[test]
    fn metrics_stay_in_range(
        pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 2..40),
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let Ok(rho) = spearman(&a, &b) {
            prop_assert!((-1.0..=1.0).contains(&rho));
            let shifted: Vec<f64> = b.iter().map(|v| v.exp().min(1e300) + 3.0 * v).collect();
            prop_assert!((spearman(&a, &shifted).unwrap() - rho).abs() < 1e-12);
        }
        if let Ok(r) = relative_l2(&a, &b) {
            prop_assert!(r >= 0.0);
        }
        if let Ok(r) = relative_l2(&a, &a) {
            prop_assert_eq!(r, 0.0);
        }
    }

    #[test]
    fn iou_scores_stay_in_unit_interval(
        cuts in prop::collection::vec((1usize..10, 1usize..10), 1..12),
        len in 20usize..30,
    ) {
        let ivs: Vec<_> = cuts.iter().map(|&(a, b)| {
            let (t1, t2) = (a, a + b);
            StageBoundaries::new(t1, t2, len).unwrap().intervals(len)
        }).collect();
        let rev: Vec<_> = ivs.iter().rev().cloned().collect();
        for (t, p) in ivs.iter().zip(&rev) {
            let iou = sample_iou(t, p).unwrap();
            prop_assert!((0.0..=1.0).contains(&iou));
            prop_assert_eq!(sample_iou(t, t).unwrap(), 1.0);
        }
        let scores = aiou(&ivs, &rev, &AIOU_THRESHOLDS).unwrap();
        prop_assert!(scores.values().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(scores["aiou@0.5"] >= scores["aiou@0.75"]);
    }

    #[test]
    fn acyclic_rank_respecting_graphs_validate(mask in any::<u64>()) {
        let ids = VariableId::ALL;
        let mut edges = Vec::new();
        let mut bit = 0;
        for &a in &ids {
            for &b in &ids {
                if a.rank() < b.rank() {
                    if mask >> (bit % 64) & 1 == 1 {
                        edges.push(CausalEdge::genuine(a, b));
                    } else if bit % 3 == 0 {
                        edges.push(CausalEdge::spurious(b, a));
                    }
                    bit += 1;
                }
            }
        }
        let g = CausalGraph::with_nodes(&ids, edges.clone());
        prop_assert!(validate(&g).is_empty(), "{:?}", validate(&g));

        // any backwards genuine edge is reported
        if let Some(e) = edges.iter().find(|e| e.kind == aqa_causal::causal_graph::EdgeKind::Genuine) {
            let mut bad = edges.clone();
            bad.push(CausalEdge::genuine(e.target, e.source));
            prop_assert!(!validate(&CausalGraph::with_nodes(&ids, bad)).is_empty());
        }
    }

    #[test]
    fn graph_ops_pass_gradient_check(seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut rand_t = |r: usize, c: usize| Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        store.insert("x", rand_t(4, 3)).unwrap();
        store.insert("w", rand_t(3, 4)).unwrap();
        store.insert("row", rand_t(1, 4)).unwrap();
        store.insert("gain", rand_t(1, 4)).unwrap();
        store.insert("k", rand_t(1, 1)).unwrap();
        let mask = causal_mask(4);
        let loss = |g: &mut Graph, s: &ParamStore| {
            let x = g.param(s, "x")?;
            let w = g.param(s, "w")?;
            let row = g.param(s, "row")?;
            let gain = g.param(s, "gain")?;
            let k = g.param(s, "k")?;
            let h = g.matmul(x, w)?;
            let h = g.add_row(h, row)?;
            let a = g.softmax_rows(h, Some(&mask))?;
            let e = g.elu(h);
            let l = g.leaky_relu(h, 0.2);
            let m = g.mul(a, e)?;
            let m = g.add(m, l)?;
            let n = g.layer_norm(m, gain, row)?;
            let sg = g.sigmoid(n);
            let ls = g.log_sigmoid(n);
            let t = g.transpose(sg);
            let p = g.matmul(t, ls)?;
            let p = g.scale_by(p, k)?;
            let q = g.exp(k);
            let q = g.log(q);
            let c = g.concat_cols(&[p, p])?;
            let r = g.gather_rows(c, &[3, 0, 0])?;
            let mean = g.mean(r);
            let tot = g.add(mean, q)?;
            Ok(g.scale(tot, 0.5))
        };
        for r in grad_check(loss, &store, 1e-6, 1e-5).unwrap() {
            prop_assert!(r.passed, "{:?}", r);
        }
    }
}

#[test]
fn default_graph_is_valid() {
    assert!(validate(&default_graph()).is_empty());
}
