//! Pooling algebra, alignment-loss properties, InfoNCE oracles and
//! gradient checks through the model graphs.

use proptest::prelude::*;
use rand::RngExt;

use sspool_core::alignloss::{alignment_contrastive_loss, alignment_loss_graph, pooled, AlignLossConfig};
use sspool_core::diffcore::{finite_difference_check, DiffError, finite_difference_check_with, Coverage, Graph, ParamSet, Tensor};
use sspool_core::encoder::{
    cpc_loss, cpc_loss_graph, encode_frames, contextualize, ContextNet, CpcConfig, EncoderModel, FrameKind,
    FrameSequence, ModelConfig, NegativeDraw,
};
use sspool_core::dsp::AudioBuffer;
use sspool_core::rng;
use sspool_core::softpool::{
    attention_weights, boundary_graph, pool_graph, soft_pool_heads, BoundarySequence, UnderflowPolicy,
};

fn lift<T>(r: Result<T, sspool_core::encoder::ModelError>) -> Result<T, DiffError> {
    r.map_err(|e| DiffError::Contract(e.to_string()))
}

fn random_matrix(r: &mut rng::Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| 2.0 * r.random::<f64>() - 1.0).collect()).unwrap()
}

/// Random 0/1 boundaries starting with a boundary at frame 0.
fn ideal_boundaries(r: &mut rng::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|i| if i == 0 || r.random::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect()
}

/// Mean of `z` rows over each segment id (1-based cumulative count).
fn segment_means(z: &Tensor<f64>, b: &[f64]) -> Vec<Vec<f64>> {
    let (n, d) = z.dims2();
    let m = b.iter().sum::<f64>() as usize;
    let mut sums = vec![vec![0.0; d]; m];
    let mut counts = vec![0usize; m];
    let mut seg = 0usize;
    for i in 0..n {
        if b[i] == 1.0 {
            seg += 1;
        }
        counts[seg - 1] += 1;
        for j in 0..d {
            sums[seg - 1][j] += z.row(i)[j];
        }
    }
    sums.iter().zip(&counts).map(|(s, &c)| s.iter().map(|v| v / c as f64).collect()).collect()
}

fn frames(z: Tensor<f64>) -> FrameSequence<f64> {
    FrameSequence::new(z, FrameKind::Z).unwrap()
}

#[test]
fn attention_rows_sum_to_one() {
    let mut r = rng::stream(11, 0);
    for _ in 0..100 {
        let n: usize = r.random_range(4..60);
        let probs: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let b = BoundarySequence::from_probs(probs).unwrap();
        let m = n.div_ceil(4);
        let alpha = attention_weights(&b.cum, m, 0.5).unwrap().alpha;
        for i in 0..m {
            let s: f64 = alpha.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row {i} sums to {s}");
            assert!(alpha.row(i).iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn averaging_pooling_limit() {
    let mut r = rng::stream(12, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = r.random_range(4..48);
        let b = ideal_boundaries(&mut r, n);
        let z = random_matrix(&mut r, n, 6);
        let means = segment_means(&z, &b);
        let s = soft_pool_heads(&frames(z), &BoundarySequence::from_probs(b).unwrap(), means.len(), 0.01).unwrap();
        for (m, mean) in means.iter().enumerate() {
            for (a, e) in s.values.row(m).iter().zip(mean) {
                worst = worst.max((a - e).abs());
            }
        }
    }
    assert!(worst < 1e-6, "max deviation {worst:e}");
}

#[test]
fn attention_centres_are_monotonic() {
    let mut r = rng::stream(13, 0);
    for _ in 0..100 {
        let n: usize = r.random_range(8..80);
        let probs: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let b = BoundarySequence::from_probs(probs).unwrap();
        let m = n.div_ceil(4);
        let alpha = attention_weights(&b.cum, m, 0.5).unwrap().alpha;
        let centres: Vec<f64> =
            (0..m).map(|i| alpha.row(i).iter().enumerate().map(|(j, a)| a * j as f64).sum()).collect();
        for w in centres.windows(2) {
            assert!(w[0] <= w[1] + 1e-9, "{centres:?}");
        }
    }
}

#[test]
fn duplicated_frames_pool_identically() {
    let mut r = rng::stream(14, 0);
    for k in [2usize, 3] {
        for _ in 0..20 {
            let n = r.random_range(4..32);
            let b = ideal_boundaries(&mut r, n);
            let z = random_matrix(&mut r, n, 5);
            let m = b.iter().sum::<f64>() as usize;
            let dz: Vec<f64> = (0..n).flat_map(|i| std::iter::repeat_n(z.row(i).to_vec(), k).flatten()).collect();
            let db: Vec<f64> = b.iter().flat_map(|&v| std::iter::once(v).chain(std::iter::repeat_n(0.0, k - 1))).collect();
            let s = soft_pool_heads(&frames(z.clone()), &BoundarySequence::from_probs(b.clone()).unwrap(), m, 0.01).unwrap();
            let sd = soft_pool_heads(
                &frames(Tensor::new(vec![n * k, 5], dz).unwrap()),
                &BoundarySequence::from_probs(db).unwrap(),
                m,
                0.01,
            )
            .unwrap();
            for (a, e) in s.values.data().iter().zip(sd.values.data()) {
                assert!((a - e).abs() < 1e-5, "k={k}: {a} vs {e}");
            }
        }
    }
}

#[test]
fn pooling_gradients_match_finite_differences() {
    let mut r = rng::stream(15, 0);
    let model: EncoderModel<f64> =
        EncoderModel::verification_point(ModelConfig { d: 4, boundary_hidden: 3, ..ModelConfig::default() }, 3).unwrap();
    for _ in 0..5 {
        let n = 10;
        // z and the boundary scorer parameters
        let mut point: ParamSet<f64> =
            model.params.iter().filter(|(k, _)| k.starts_with("bnd.")).map(|(k, v)| (k.clone(), v.clone())).collect();
        point.insert("z", random_matrix(&mut r, n, 4));
        point.insert("proj", random_matrix(&mut r, 3, 4));
        let err = finite_difference_check(&point, 1e-5, |g| {
            let z = g.var("z")?;
            let b = lift(boundary_graph(g, z))?;
            let s = lift(pool_graph(g, z, b, 3, 0.5, UnderflowPolicy::Stable))?;
            let p = g.var("proj")?;
            let m = g.mul(s, p)?;
            g.sum(m)
        })
        .unwrap();
        assert!(err < 1e-4, "z/scorer: {err:e}");

        // b directly
        let mut point = ParamSet::new();
        point.insert("z", random_matrix(&mut r, n, 4));
        point.insert(
            "b",
            // a_N near the head count so no frame sits deep in every kernel's tail
            Tensor::new(vec![n, 1], (0..n).map(|_| 0.15 + 0.3 * r.random::<f64>()).collect()).unwrap(),
        );
        point.insert("proj", random_matrix(&mut r, 3, 4));
        let err = finite_difference_check(&point, 1e-6, |g| {
            let z = g.var("z")?;
            let b = g.var("b")?;
            let s = lift(pool_graph(g, z, b, 3, 0.5, UnderflowPolicy::Stable))?;
            let p = g.var("proj")?;
            let m = g.mul(s, p)?;
            g.sum(m)
        })
        .unwrap();
        assert!(err < 1e-4, "b: {err:e}");
    }
}

#[test]
fn alignment_gradients_match_finite_differences() {
    let mut r = rng::stream(16, 0);
    for flag in [false, true] {
        let cfg = AlignLossConfig { tau: 0.3, include_positive_in_denominator: flag };
        for _ in 0..5 {
            let mut point = ParamSet::new();
            point.insert("s", random_matrix(&mut r, 4, 3));
            point.insert("sa", random_matrix(&mut r, 4, 3));
            let err = finite_difference_check(&point, 1e-5, |g| {
                let s = g.var("s")?;
                let sa = g.var("sa")?;
                lift(alignment_loss_graph(g, s, sa, &cfg))
            })
            .unwrap();
            assert!(err < 1e-4, "flag {flag}: {err:e}");
        }
    }
}

fn pooled_strategy() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..6).prop_flat_map(|m| {
        (
            Just(m),
            prop::collection::vec(-2.0f64..2.0, m * 3),
            prop::collection::vec(-2.0f64..2.0, m * 3),
            prop::collection::vec(0.1f64..10.0, 2 * m),
        )
    })
}

proptest! {
    #[test]
    fn alignment_loss_is_scale_invariant((m, s, sa, scales) in pooled_strategy(), tau in 0.05f64..2.0, flag: bool) {
        let cfg = AlignLossConfig { tau, include_positive_in_denominator: flag };
        let base = alignment_contrastive_loss(&pooled(m, 3, s.clone()).unwrap(), &pooled(m, 3, sa.clone()).unwrap(), &cfg).unwrap();
        let scale = |v: &[f64], off: usize| -> Vec<f64> {
            v.iter().enumerate().map(|(i, x)| x * scales[off + i / 3]).collect()
        };
        let scaled = alignment_contrastive_loss(
            &pooled(m, 3, scale(&s, 0)).unwrap(),
            &pooled(m, 3, scale(&sa, m)).unwrap(),
            &cfg,
        ).unwrap();
        prop_assert!((base.total - scaled.total).abs() <= 1e-9 * base.total.abs().max(1.0));
    }

    /// The self-similarity (or, under the flag, the positive) sits in the
    /// denominator, so no term can go below zero in either form.
    #[test]
    fn alignment_terms_are_non_negative((m, s, sa, _) in pooled_strategy(), tau in 0.05f64..2.0, flag: bool) {
        let cfg = AlignLossConfig { tau, include_positive_in_denominator: flag };
        let l = alignment_contrastive_loss(&pooled(m, 3, s).unwrap(), &pooled(m, 3, sa).unwrap(), &cfg).unwrap();
        for t in l.terms {
            prop_assert!(t >= -1e-12, "{t}");
        }
    }

    #[test]
    fn cpc_loss_ignores_negative_order(seed in 0u64..1000) {
        let n = 14;
        let cpc = CpcConfig { k_steps: 3, n_negatives: 5 };
        let mut r = rng::stream(seed, 1);
        let model: EncoderModel<f64> = EncoderModel::init(ModelConfig { d: 4, cpc: cpc.clone(), ..ModelConfig::default() }, seed).unwrap();
        let z = random_matrix(&mut r, n, 4);
        let c = random_matrix(&mut r, n, 4);
        let draw = NegativeDraw::sample(n, &cpc, seed).unwrap();
        let mut permuted = draw.clone();
        let w = 1 + cpc.n_negatives;
        for chunk in permuted.candidates.chunks_mut(w) {
            chunk[1..].reverse();
            chunk[1..].rotate_left(2);
        }
        let eval = |d: &NegativeDraw| {
            let mut g = model.graph().unwrap();
            let zn = g.constant(z.clone()).unwrap();
            let cn = g.constant(c.clone()).unwrap();
            let l = cpc_loss_graph(&mut g, zn, cn, d).unwrap();
            g.value(l).data()[0]
        };
        prop_assert!((eval(&draw) - eval(&permuted)).abs() < 1e-12);
    }
}

/// Chance-level oracle: with unit-norm independent embeddings and an
/// identity head, scores are i.i.d. and the expected loss of each term is
/// close to `ln(1 + n_negatives)`.
#[test]
fn infonce_chance_level_monte_carlo() {
    let mut r = rng::stream(17, 0);
    let (d, n, negatives) = (64usize, 8usize, 7usize);
    let cpc = CpcConfig { k_steps: 1, n_negatives: negatives };
    let mut model: EncoderModel<f64> =
        EncoderModel::init(ModelConfig { d, cpc: cpc.clone(), ..ModelConfig::default() }, 0).unwrap();
    let eye = Tensor::new(vec![d, d], (0..d * d).map(|i| if i / d == i % d { 1.0 } else { 0.0 }).collect()).unwrap();
    *model.params.get_mut("head.01.w").unwrap() = eye;
    let unit = |r: &mut rng::Rng| -> Vec<f64> {
        // gaussian via Box-Muller, then normalize
        let v: Vec<f64> = (0..d)
            .map(|_| {
                let (u1, u2) = (r.random::<f64>().max(1e-300), r.random::<f64>());
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    };
    let draws = 1000;
    let mut total = 0.0;
    for i in 0..draws {
        let z: Vec<f64> = (0..n).flat_map(|_| unit(&mut r)).collect();
        let c: Vec<f64> = (0..n).flat_map(|_| unit(&mut r)).collect();
        let z = FrameSequence::new(Tensor::new(vec![n, d], z).unwrap(), FrameKind::Z).unwrap();
        let c = FrameSequence::new(Tensor::new(vec![n, d], c).unwrap(), FrameKind::C).unwrap();
        total += cpc_loss(&z, &c, &model, i).unwrap();
    }
    let mean = total / draws as f64;
    assert!((mean - 8f64.ln()).abs() < 0.1, "mean {mean} vs ln 8 = {}", 8f64.ln());
}

#[test]
fn cpc_loss_starts_near_chance() {
    let model: EncoderModel<f32> = EncoderModel::init(ModelConfig::default(), 21).unwrap();
    let mut r = rng::stream(21, 0);
    let mut total = 0.0;
    for i in 0..3 {
        let samples: Vec<f32> = (0..16_000).map(|_| 0.3 * (2.0 * r.random::<f32>() - 1.0)).collect();
        let audio = AudioBuffer::new(samples, 16_000).unwrap();
        let z = encode_frames(&audio, &model).unwrap();
        let c = contextualize(&z, &model).unwrap();
        total += cpc_loss(&z, &c, &model, i).unwrap();
    }
    let mean = total / 3.0;
    assert!((mean - 9f64.ln()).abs() < 0.2, "{mean}");
}

#[test]
fn cpc_gradients_reach_every_encoder_parameter() {
    let cpc = CpcConfig { k_steps: 2, n_negatives: 3 };
    for context in [ContextNet::Gru, ContextNet::Lstm] {
        let cfg = ModelConfig { d: 3, context, boundary_hidden: 2, cpc: cpc.clone() };
        let model: EncoderModel<f64> = EncoderModel::verification_point(cfg.clone(), 5).unwrap();
        let mut r = rng::stream(5, 0);
        let x = Tensor::new(vec![1600, 1], (0..1600).map(|_| 2.0 * r.random::<f64>() - 1.0).collect()).unwrap();
        let draw = NegativeDraw::sample(10, &cpc, 9).unwrap();
        let point: ParamSet<f64> =
            model.params.iter().filter(|(k, _)| !k.starts_with("bnd.")).map(|(k, v)| (k.clone(), v.clone())).collect();
        let err = finite_difference_check_with(&point, 1e-5, Coverage::Sample { per_tensor: 12, seed: 1 }, |g: &mut Graph<f64>| {
            let xn = g.constant(x.clone())?;
            let z = lift(sspool_core::encoder::encode_graph(g, xn))?;
            let c = lift(sspool_core::encoder::context_graph(g, &cfg, z))?;
            lift(cpc_loss_graph(g, z, c, &draw))
        })
        .unwrap();
        assert!(err < 1e-4, "{context:?}: {err:e}");
    }
}


