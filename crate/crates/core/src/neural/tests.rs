use super::*;
use crate::tensor::{gradient_check, Tensor};
use proptest::prelude::*;

const V: usize = 12;

fn config(variant: Variant, hidden: usize) -> ModelConfig {
    ModelConfig {
        variant,
        layers: 2,
        hidden,
        vocab_size: V,
        vocab_hash: "test".into(),
    }
}

fn model(variant: Variant, seed: u64) -> NeuralLm {
    NeuralLm::with_init_scale(config(variant, 5), seed, 0.5).unwrap()
}

fn all_variants() -> [Variant; 4] {
    [Variant::Lstm, Variant::Cache { beta: 0.2 }, Variant::Attention, Variant::Pointer]
}

fn record() -> EncodedRecord {
    EncodedRecord {
        transcript: vec![5, 7, 6],
        metadata: vec![8, 6, 9, 6],
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x (1 x n) * W (n x m)` by explicit loops.
fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (n, m) = (w.shape[0], w.shape[1]);
    assert_eq!(x.len(), n);
    (0..m).map(|j| (0..n).map(|i| x[i] * w.values[i * m + j]).sum()).collect()
}

fn param<'a>(m: &'a NeuralLm, name: &str) -> &'a Tensor {
    m.params().get(m.params().id(name).unwrap())
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

#[test]
fn single_token_metadata_gives_one_state() {
    let m = model(Variant::Attention, 1);
    let enc = m.encode_metadata(&[NO_META]).unwrap();
    assert_eq!(enc.len(), 1);
    assert_eq!(enc.hidden.len(), 5);
}

#[test]
fn encoder_is_deterministic_and_order_sensitive() {
    let m = model(Variant::Pointer, 2);
    let a = m.encode_metadata(&[4, 5, 6]).unwrap();
    let b = m.encode_metadata(&[4, 5, 6]).unwrap();
    assert_eq!(a, b);
    let c = m.encode_metadata(&[6, 5, 4]).unwrap();
    assert_ne!(a.hidden, c.hidden);
}

#[test]
fn singleton_attention_is_one() {
    let m = model(Variant::Attention, 3);
    let ctx = m.prepare(&[7]).unwrap();
    let s = m.start(ctx.clone()).unwrap();
    let att = m.attend(&s, ctx.encoder.as_ref().unwrap()).unwrap();
    assert_eq!(att.weights, vec![1.0]);
}

#[test]
fn identical_states_split_attention_evenly() {
    let m = model(Variant::Attention, 4);
    let ctx = m.prepare(&[7]).unwrap();
    let s = m.start(ctx).unwrap();
    let row = vec![0.3, -0.2, 0.1, 0.5, -0.4];
    let enc = EncoderStates {
        hidden: [row.clone(), row.clone()].concat(),
        dim: 5,
        tokens: vec![4, 4],
    };
    let att = m.attend(&s, &enc).unwrap();
    assert_eq!(att.weights, vec![0.5, 0.5]);
    for (c, r) in att.context.iter().zip(&row) {
        assert!((c - r).abs() < 1e-15);
    }
}

#[test]
fn attention_matches_reimplementation() {
    let m = model(Variant::Pointer, 5);
    let ctx = m.prepare(&[4, 9, 6, 6, 10]).unwrap();
    let s = m.advance(&m.start(ctx.clone()).unwrap(), 5).unwrap();
    let enc = ctx.encoder.as_ref().unwrap();
    let att = m.attend(&s, enc).unwrap();

    let q: Vec<f64> = vec_mat(s.top(), param(&m, "attn.w"))
        .iter()
        .zip(&param(&m, "attn.b").values)
        .map(|(a, b)| a + b)
        .collect();
    let scores: Vec<f64> = (0..enc.len()).map(|i| dot(&q, enc.row(i))).collect();
    let alpha = softmax(&scores);
    let mut c = vec![0.0; 5];
    for (i, a) in alpha.iter().enumerate() {
        for (k, h) in enc.row(i).iter().enumerate() {
            c[k] += a * h;
        }
    }
    for (x, y) in att.weights.iter().zip(&alpha) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!((att.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    for (k, (x, y)) in att.context.iter().zip(&c).enumerate() {
        assert!((x - y).abs() < 1e-12);
        // convex combination stays within the coordinate-wise hull
        let lo = (0..enc.len()).map(|i| enc.row(i)[k]).fold(f64::INFINITY, f64::min);
        let hi = (0..enc.len()).map(|i| enc.row(i)[k]).fold(f64::NEG_INFINITY, f64::max);
        assert!(*x >= lo - 1e-12 && *x <= hi + 1e-12);
    }
}

#[test]
fn attention_ignores_constant_logit_shift() {
    // Shifting b_z by a multiple of a vector orthogonal... instead shift the
    // scores directly: adding u to every h^i adds q.u to every score.
    let m = model(Variant::Attention, 6);
    let ctx = m.prepare(&[4, 9, 6]).unwrap();
    let s = m.start(ctx.clone()).unwrap();
    let enc = ctx.encoder.clone().unwrap();
    let base = m.attend(&s, &enc).unwrap();
    let scores: Vec<f64> = {
        let q: Vec<f64> = vec_mat(s.top(), param(&m, "attn.w"))
            .iter()
            .zip(&param(&m, "attn.b").values)
            .map(|(a, b)| a + b)
            .collect();
        (0..enc.len()).map(|i| dot(&q, enc.row(i))).collect()
    };
    let shifted: Vec<f64> = scores.iter().map(|x| x + 3.7).collect();
    for (a, b) in softmax(&scores).iter().zip(softmax(&shifted)) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in base.weights.iter().zip(softmax(&shifted)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zero_output_weights_give_uniform_distribution() {
    for variant in [Variant::Lstm, Variant::Attention] {
        let mut m = model(variant, 7);
        for name in ["out.w1", "out.b1", "out.w2", "out.b2"] {
            let id = m.params().id(name).unwrap();
            m.params_mut().get_mut(id).values.iter_mut().for_each(|v| *v = 0.0);
        }
        let ctx = m.prepare(&[4]).unwrap();
        let s = m.start(ctx.clone()).unwrap();
        let att = ctx.encoder.as_ref().map(|enc| m.attend(&s, enc).unwrap());
        let d = m.vocab_distribution(&s, att.as_ref()).unwrap();
        for p in d.as_slice() {
            assert!((p - 1.0 / V as f64).abs() < 1e-15);
        }
    }
}

#[test]
fn vocab_distribution_matches_reimplementation() {
    let m = model(Variant::Attention, 8);
    let ctx = m.prepare(&[4, 9]).unwrap();
    let s = m.start(ctx.clone()).unwrap();
    let att = m.attend(&s, ctx.encoder.as_ref().unwrap()).unwrap();
    let d = m.vocab_distribution(&s, Some(&att)).unwrap();
    assert!((d.total() - 1.0).abs() < 1e-6);

    let input: Vec<f64> = s.top().iter().chain(&att.context).copied().collect();
    let hid: Vec<f64> = vec_mat(&input, param(&m, "out.w1"))
        .iter()
        .zip(&param(&m, "out.b1").values)
        .map(|(a, b)| a + b)
        .collect();
    let logits: Vec<f64> = vec_mat(&hid, param(&m, "out.w2"))
        .iter()
        .zip(&param(&m, "out.b2").values)
        .map(|(a, b)| a + b)
        .collect();
    for (x, y) in d.as_slice().iter().zip(softmax(&logits)) {
        assert!((x - y).abs() < 1e-12);
    }
    // the attention model's full distribution is exactly this one
    let full = m.distribution(&s).unwrap();
    for (x, y) in full.as_slice().iter().zip(d.as_slice()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn gen_switch_limits() {
    let mut m = model(Variant::Pointer, 9);
    let ctx = m.prepare(&[4, 9]).unwrap();
    let s = m.start(ctx.clone()).unwrap();
    let att = m.attend(&s, ctx.encoder.as_ref().unwrap()).unwrap();
    let p = m.gen_switch(&s, &att).unwrap();
    assert!(p > 0.0 && p < 1.0);

    let w = m.params().id("gen.w").unwrap();
    let b = m.params().id("gen.b").unwrap();
    m.params_mut().get_mut(w).values.iter_mut().for_each(|v| *v = 0.0);
    m.params_mut().get_mut(b).values[0] = 0.0;
    assert_eq!(m.gen_switch(&s, &att).unwrap(), 0.5);
    m.params_mut().get_mut(b).values[0] = -40.0;
    assert!(m.gen_switch(&s, &att).unwrap() < 1e-15);
}

#[test]
fn gen_switch_gradient_matches_finite_differences() {
    let m = model(Variant::Pointer, 10);
    let ctx = m.prepare(&[4, 9, 6]).unwrap();
    let s = m.start(ctx.clone()).unwrap();
    let att = m.attend(&s, ctx.encoder.as_ref().unwrap()).unwrap();
    let mut params = m.params().clone();
    let report = gradient_check(
        |g| {
            let z = g.row(s.top().to_vec())?;
            let c = g.row(att.context.clone())?;
            let embed = g.param(g.params().id("embed")?);
            let y = g.row_select(embed, &[s.last_token])?;
            let p = m.gen_switch_nodes(g, c, z, y)?;
            Ok::<_, NeuralError>(g.sum(p))
        },
        &mut params,
        1e-4,
    )
    .unwrap();
    let gen = report.entries.iter().find(|e| e.name == "gen.w").unwrap();
    assert!(gen.max_rel_error < 1e-4, "{gen:?}");
    assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
}

#[test]
fn pointer_mixture_boundaries() {
    let p = TokenDistribution(vec![0.1, 0.2, 0.3, 0.4]);
    let same = pointer_mixture(&p, &[0.7, 0.3], &[1, 3], 1.0);
    assert_eq!(same, p);
    let copy = pointer_mixture(&p, &[1.0], &[2], 0.0);
    assert_eq!(copy.as_slice(), &[0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn pointer_mixture_sums_repeated_positions() {
    let p = TokenDistribution(vec![0.25; 4]);
    let (a, b) = (1, 2);
    let alpha = [0.2, 0.5, 0.3];
    let meta = [a, b, a];
    let out = pointer_mixture(&p, &alpha, &meta, 0.4);
    // brute force over positions
    for w in 0..4 {
        let mut copy = 0.0;
        for i in 0..3 {
            if meta[i] == w {
                copy += alpha[i];
            }
        }
        let expect = 0.4 * 0.25 + 0.6 * copy;
        assert!((out.prob(w) - expect).abs() < 1e-15);
    }
    assert!((out.prob(a) - (0.1 + 0.30)).abs() < 1e-12);
    assert!((out.prob(b) - (0.1 + 0.30)).abs() < 1e-12);
    assert!((out.total() - 1.0).abs() < 1e-12);
}

#[test]
fn cache_interpolation_arithmetic() {
    let p = TokenDistribution(vec![0.1, 0.2, 0.3, 0.4]);
    assert_eq!(cache_interpolate(&p, &[1, 2], 0.0), p);
    assert_eq!(cache_interpolate(&p, &[NO_META], 0.3), p);
    let (a, b) = (1, 2);
    let out = cache_interpolate(&p, &[a, a, b], 0.3);
    let expect = [0.07, 0.14 + 0.2, 0.21 + 0.1, 0.28];
    for (x, y) in out.as_slice().iter().zip(expect) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!((out.total() - 1.0).abs() < 1e-12);
}

#[test]
fn graph_mixtures_match_pure_functions() {
    // pointer
    let m = model(Variant::Pointer, 11);
    let meta = vec![4, 9, 4, 6];
    let ctx = m.prepare(&meta).unwrap();
    let s = m.advance(&m.start(ctx).unwrap(), 7).unwrap();
    let det = m.step_details(&s).unwrap();
    let att = det.attention.clone().unwrap();
    let pure = pointer_mixture(&det.p_vocab, &att.weights, &meta, det.p_gen.unwrap());
    assert_eq!(pure, det.distribution);

    // cache against the LSTM it wraps
    let lstm = model(Variant::Lstm, 12);
    let cache = lstm.with_variant(Variant::Cache { beta: 0.1 }).unwrap();
    let s_l = lstm.start(lstm.prepare(&meta).unwrap()).unwrap();
    let s_c = cache.start(cache.prepare(&meta).unwrap()).unwrap();
    let base = lstm.distribution(&s_l).unwrap();
    let got = cache.distribution(&s_c).unwrap();
    let want = cache_interpolate(&base, &meta, 0.1);
    for (x, y) in got.as_slice().iter().zip(want.as_slice()) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn distributions_normalise_for_every_variant() {
    for (i, variant) in all_variants().into_iter().enumerate() {
        let m = model(variant, 20 + i as u64);
        let ctx = m.prepare(&[4, 8, NO_META]).unwrap();
        let mut s = m.start(ctx).unwrap();
        for w in [5, 6, 7, 3] {
            let d = m.distribution(&s).unwrap();
            assert!(d.as_slice().iter().all(|&p| p >= 0.0));
            assert!((d.total() - 1.0).abs() < 1e-6, "{variant:?}");
            let lds = m.log_distribution(&s).unwrap();
            let total: f64 = lds.iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
            s = m.advance(&s, w).unwrap();
        }
    }
}

#[test]
fn chain_rule_and_determinism() {
    for (i, variant) in all_variants().into_iter().enumerate() {
        let m = model(variant, 30 + i as u64);
        let rec = record();
        let incremental = m.incremental_log_prob(&rec).unwrap();
        let again = m.incremental_log_prob(&rec).unwrap();
        assert_eq!(incremental, again);
        let per_token = m.token_log_probs(&rec).unwrap();
        assert_eq!(per_token.len(), rec.transcript.len() + 1);
        let batched: f64 = per_token.iter().sum();
        assert!((incremental - batched).abs() < 1e-12, "{variant:?}: {incremental} vs {batched}");
    }
}

#[test]
fn advancing_a_copy_leaves_original_untouched() {
    let m = model(Variant::Pointer, 40);
    let s = m.start(m.prepare(&[4, 5]).unwrap()).unwrap();
    let snapshot = s.clone();
    let _ = m.advance(&s, 6).unwrap();
    assert_eq!(s, snapshot);
}

#[test]
fn per_token_nll_gradients_match_finite_differences() {
    for (i, variant) in all_variants().into_iter().enumerate() {
        let m = NeuralLm::with_init_scale(config(variant, 3), 50 + i as u64, 0.5).unwrap();
        let rec = EncodedRecord {
            transcript: vec![5, 6],
            metadata: vec![6, 9, 6],
        };
        let mut params = m.params().clone();
        let report = gradient_check(
            |g| {
                let n = m.nll_nodes::<ChaCha8Rng>(g, &rec, None)?;
                Ok::<_, NeuralError>(g.scale(n.loss, 1.0 / n.tokens as f64))
            },
            &mut params,
            1e-4,
        )
        .unwrap();
        assert!(
            report.passed(),
            "{variant:?}: {:?}",
            report.failures().collect::<Vec<_>>()
        );
    }
}

#[test]
fn checkpoint_round_trip_checks_vocabulary() {
    use crate::corpus::UtteranceRecord;
    let recs = vec![UtteranceRecord::new("a", "x y z w v u", "q r s")];
    let vocab = Vocabulary::build(&recs);
    let cfg = ModelConfig {
        variant: Variant::Pointer,
        layers: 1,
        hidden: 4,
        vocab_size: vocab.len(),
        vocab_hash: vocab.hash(),
    };
    let m = NeuralLm::new(cfg, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let back = NeuralLm::load(&path, &vocab).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(back.params(), m.params());

    let other = Vocabulary::build(&[UtteranceRecord::new("b", "x y z w v t", "q r s")]);
    assert!(matches!(
        NeuralLm::load(&path, &other),
        Err(NeuralError::VocabMismatch { .. })
    ));
}

#[test]
fn variant_conversion_rules() {
    let lstm = model(Variant::Lstm, 60);
    assert!(lstm.with_variant(Variant::Cache { beta: 0.2 }).is_ok());
    assert!(lstm.with_variant(Variant::Pointer).is_err());
    let cfg = config(Variant::Cache { beta: 1.5 }, 4);
    assert!(NeuralLm::new(cfg, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pointer_mixture_is_a_distribution(
        logits in proptest::collection::vec(-3.0f64..3.0, V),
        raw_alpha in proptest::collection::vec(0.01f64..1.0, 1..6),
        seed in 0usize..1000,
        p_gen in 0.0f64..=1.0,
    ) {
        let p = TokenDistribution(softmax(&logits));
        let z: f64 = raw_alpha.iter().sum();
        let alpha: Vec<f64> = raw_alpha.iter().map(|a| a / z).collect();
        let meta: Vec<usize> = (0..alpha.len()).map(|i| (seed + 7 * i) % V).collect();
        let out = pointer_mixture(&p, &alpha, &meta, p_gen);
        prop_assert!(out.as_slice().iter().all(|&x| x >= 0.0));
        prop_assert!((out.total() - 1.0).abs() < 1e-9);
    }
}
