use embrank_core::data::{generate_synthetic, SyntheticConfig};
use embrank_core::pair::{ModelConfig, ModelPair};
use embrank_core::training::{
    infonce_from_similarities, infonce_term, loss_gradients, ranknet_loss, ranknet_term, LossConfig, LossTerm,
    SampleSource,
};
use embrank_core::{Graph, Tensor, Var};
use proptest::prelude::*;

const TAU: f64 = 0.05;

fn scalars(g: &mut Graph, xs: &[f64]) -> Vec<Var> {
    xs.iter().map(|x| g.constant(Tensor::scalar(*x))).collect()
}

fn ordered_pairs(labels: &[u32]) -> usize {
    let mut p = 0;
    for a in labels {
        for b in labels {
            if a < b {
                p += 1;
            }
        }
    }
    p
}

#[test]
fn infonce_uniform_similarities() {
    for n_neg in 1..=64 {
        for s in [-0.9, -0.1, 0.0, 0.37, 1.0] {
            let mut g = Graph::new();
            let v = scalars(&mut g, &vec![s; n_neg + 1]);
            let l = infonce_from_similarities(&mut g, v[0], &v[1..], TAU).unwrap();
            let expected = (1.0 + n_neg as f64).ln();
            assert!((g.value(l).item() - expected).abs() < 1e-10, "n={n_neg} s={s}");
        }
    }
}

#[test]
fn infonce_identical_embeddings() {
    let e = Tensor::vector(vec![0.3, -1.2, 0.5, 2.0]).unwrap();
    for n_neg in [1, 3, 15] {
        let mut g = Graph::new();
        let q = g.constant(e.clone());
        let p = g.constant(e.clone());
        let negs: Vec<Var> = (0..n_neg).map(|_| g.constant(e.clone())).collect();
        let l = infonce_term(&mut g, q, p, &negs, TAU).unwrap();
        assert!((g.value(l).item() - (1.0 + n_neg as f64).ln()).abs() < 1e-10);
    }
}

#[test]
fn ranknet_equal_scores() {
    let lists: [&[u32]; 5] = [&[0, 1], &[0, 1, 2, 3], &[0, 0, 1, 1, 2], &[2, 0, 1, 0, 3, 3, 1], &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]];
    for labels in lists {
        let mut g = Graph::new();
        let s = scalars(&mut g, &vec![0.42; labels.len()]);
        let l = ranknet_term(&mut g, &s, labels, TAU).unwrap();
        let p = ordered_pairs(labels) as f64;
        assert!((g.value(l).item() - p * 2f64.ln()).abs() < 1e-10, "{labels:?}");
    }
    // batch form averages over lists
    let mut g = Graph::new();
    let a = scalars(&mut g, &[0.1; 3]);
    let b = scalars(&mut g, &[0.7; 4]);
    let l = ranknet_loss(&mut g, &[(a, vec![0, 1, 2]), (b, vec![0, 1, 1, 2])], TAU).unwrap();
    let expected = (3.0 + 5.0) * 2f64.ln() / 2.0;
    assert!((g.value(l).item() - expected).abs() < 1e-10);
}

/// ∇(λ·InfoNCE + RankNet) = λ·∇InfoNCE + ∇RankNet on real model parameters.
#[test]
fn combined_gradient_is_linear() {
    let cfg = SyntheticConfig {
        n_topics: 4,
        n_docs: 60,
        n_queries: 6,
        n_eval_queries: 2,
        stage1_pool: 20,
        stage1_candidates: 8,
        stage2_negatives: 6,
        stage2_hard_negatives: 3,
        ..SyntheticConfig::default()
    };
    let data = generate_synthetic(4, &cfg).unwrap();
    let model = ModelConfig {
        dim: 8,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 16,
        init_std: 0.3,
        ..ModelConfig::default()
    };
    let pair = ModelPair::new(&model, data.vocab.len(), Default::default(), 2).unwrap();
    let src = SampleSource::from_dataset(&data);
    let batch: Vec<_> = data.stage1.iter().take(3).collect();
    for lambda in [0.1, 0.0, 2.5] {
        let loss = LossConfig {
            lambda,
            ..LossConfig::default()
        };
        let c = loss_gradients(&pair, &src, &batch, &loss, LossTerm::Combined).unwrap();
        let i = loss_gradients(&pair, &src, &batch, &loss, LossTerm::InfoNce).unwrap();
        let r = loss_gradients(&pair, &src, &batch, &loss, LossTerm::RankNet).unwrap();
        let mut worst: f64 = 0.0;
        for (cs, (is, rs)) in [(&c.encoder, (&i.encoder, &r.encoder)), (&c.reranker, (&i.reranker, &r.reranker))] {
            for (ct, (it, rt)) in cs.iter().zip(is.iter().zip(rs)) {
                for (cv, (iv, rv)) in ct.iter().zip(it.iter().zip(rt)) {
                    worst = worst.max((cv - (lambda * iv + rv)).abs());
                }
            }
        }
        assert!(worst < 1e-10, "lambda {lambda}: max deviation {worst:e}");
    }
}

fn permute<T: Clone>(xs: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&i| xs[i].clone()).collect()
}

proptest! {
    #[test]
    fn ranknet_ignores_candidate_order(
        (scores, labels, perm) in (2usize..12).prop_flat_map(|n| (
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec(0u32..4, n),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        ))
    ) {
        prop_assume!(ordered_pairs(&labels) > 0);
        let mut g = Graph::new();
        let s = scalars(&mut g, &scores);
        let a = ranknet_term(&mut g, &s, &labels, TAU).unwrap();
        let sp = scalars(&mut g, &permute(&scores, &perm));
        let b = ranknet_term(&mut g, &sp, &permute(&labels, &perm), TAU).unwrap();
        let (a, b) = (g.value(a).item(), g.value(b).item());
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn infonce_decreases_with_positive_similarity(
        pos in -0.9f64..0.8,
        bump in 0.01f64..0.2,
        negs in prop::collection::vec(-1.0f64..1.0, 1..10),
    ) {
        let mut g = Graph::new();
        let p0 = g.constant(Tensor::scalar(pos));
        let p1 = g.constant(Tensor::scalar(pos + bump));
        let n = scalars(&mut g, &negs);
        let a = infonce_from_similarities(&mut g, p0, &n, TAU).unwrap();
        let b = infonce_from_similarities(&mut g, p1, &n, TAU).unwrap();
        prop_assert!(g.value(b).item() < g.value(a).item());
    }

    #[test]
    fn infonce_increases_with_negative_similarity(
        pos in -1.0f64..1.0,
        negs in prop::collection::vec(-1.0f64..0.8, 1..10),
        which in 0usize..10,
        bump in 0.01f64..0.2,
    ) {
        let k = which % negs.len();
        let mut raised = negs.clone();
        raised[k] += bump;
        let mut g = Graph::new();
        let p = g.constant(Tensor::scalar(pos));
        let n0 = scalars(&mut g, &negs);
        let n1 = scalars(&mut g, &raised);
        let a = infonce_from_similarities(&mut g, p, &n0, TAU).unwrap();
        let b = infonce_from_similarities(&mut g, p, &n1, TAU).unwrap();
        prop_assert!(g.value(b).item() > g.value(a).item());
    }

    #[test]
    fn ranknet_prefers_correct_order(
        hi in 0.0f64..1.0,
        gap in 0.01f64..1.0,
    ) {
        let mut g = Graph::new();
        let right = scalars(&mut g, &[hi, hi - gap]);
        let wrong = scalars(&mut g, &[hi - gap, hi]);
        let a = ranknet_term(&mut g, &right, &[0, 1], TAU).unwrap();
        let b = ranknet_term(&mut g, &wrong, &[0, 1], TAU).unwrap();
        prop_assert!(g.value(a).item() < 2f64.ln());
        prop_assert!(g.value(b).item() > 2f64.ln());
    }
}
