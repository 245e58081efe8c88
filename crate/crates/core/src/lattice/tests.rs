use super::*;
use crate::corpus::UtteranceRecord;
use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig, Strategy};

fn vocab() -> Vocabulary {
    let recs = vec![
        UtteranceRecord::new("1", "hello world a b c d", ""),
        UtteranceRecord::new("2", "cat cap cot dog e f g h", ""),
    ];
    Vocabulary::build(&recs)
}

fn words(v: &Vocabulary, ids: &[usize]) -> Vec<String> {
    v.decode(ids)
}

#[test]
fn single_arc_lattice() {
    let v = vocab();
    let l = parse_lattice("0 1 hello am=-1.0 lm=-2.0; final 1", &v).unwrap();
    let paths = l.enumerate_paths(10).unwrap();
    assert_eq!(paths.len(), 1);
    assert_eq!(words(&v, &paths[0].words), ["hello"]);
    assert_eq!((paths[0].am, paths[0].lm), (-1.0, -2.0));
}

const DIAMOND: &str = "UTT d\n0 1 a -1 -2\n0 1 b -0.5 -3\n1 2 c -0.25 -0.125\nF 2\n";

#[test]
fn diamond_paths_and_sums() {
    let v = vocab();
    let l = parse_lattice(DIAMOND, &v).unwrap();
    assert_eq!(l.id, "d");
    let paths = l.enumerate_paths(2).unwrap();
    assert_eq!(paths.len(), 2);
    assert_eq!(words(&v, &paths[0].words), ["a", "c"]);
    assert_eq!((paths[0].am, paths[0].lm), (-1.25, -2.125));
    assert_eq!((paths[1].am, paths[1].lm), (-0.75, -3.125));
    assert!(matches!(l.enumerate_paths(1), Err(LatticeError::TooManyPaths { count: 2, limit: 1 })));
}

#[test]
fn validation_errors() {
    let v = vocab();
    assert_eq!(
        parse_lattice("0 1 a -1 -1\n1 2 b -1 -1\n2 1 c -1 -1\nF 2", &v),
        Err(LatticeError::Cycle(1))
    );
    assert_eq!(parse_lattice("0 1 a -1 -1\n0 3 b -1 -1\nF 1", &v), Err(LatticeError::Dangling(2)));
    assert_eq!(
        parse_lattice("0 1 zebra -1 -1\nF 1", &v),
        Err(LatticeError::UnknownWord("zebra".into()))
    );
    assert_eq!(parse_lattice("0 1 <unk> -1 -1\nF 1", &v), Err(LatticeError::UnknownWord("<unk>".into())));
    assert!(matches!(parse_lattice("0 1 a -1\nF 1", &v), Err(LatticeError::Parse { line: 1, .. })));
    assert!(matches!(parse_lattice("0 1 a x -1\nF 1", &v), Err(LatticeError::Parse { .. })));
    assert!(matches!(parse_lattice("0 1 a -1 -1", &v), Err(LatticeError::Parse { .. })));
}

#[test]
fn multiple_blocks_and_round_trip() {
    let v = vocab();
    let text = format!("{DIAMOND}\nUTT e\n0 1 hello 0.1 -0.30000000000000004\nF 1\n");
    let ls = parse_lattices(&text, &v).unwrap();
    assert_eq!(ls.len(), 2);
    assert_eq!(ls[1].arc(0).lm, -0.30000000000000004);
    let back = parse_lattices(&write_lattices(&ls, &v), &v).unwrap();
    assert_eq!(back, ls);
}

fn chain_of_diamonds(k: usize) -> Lattice {
    let mut arcs = Vec::new();
    for i in 0..k {
        for (j, w) in [4, 5].into_iter().enumerate() {
            arcs.push(Arc { src: i, dst: i + 1, word: w, am: -(i as f64) - j as f64 * 0.5, lm: -0.25 * j as f64 });
        }
    }
    Lattice::from_parts("c", k + 1, arcs, &[k]).unwrap()
}

#[test]
fn chain_of_diamonds_has_power_of_two_paths() {
    for k in 1..=8 {
        let l = chain_of_diamonds(k);
        assert_eq!(l.path_count(), 1 << k);
        let paths = l.enumerate_paths(1 << k).unwrap();
        assert_eq!(paths.len(), 1 << k);
        let mut seqs: Vec<_> = paths.iter().map(|p| p.words.clone()).collect();
        seqs.sort();
        seqs.dedup();
        assert_eq!(seqs.len(), 1 << k);
    }
}

#[test]
fn first_pass_best_picks_dominant_arc_and_breaks_ties_by_states() {
    let v = vocab();
    let l = parse_lattice(DIAMOND, &v).unwrap();
    // a: -1.25 - 2.125 = -3.375 ; b: -0.75 - 3.125 = -3.875
    assert_eq!(words(&v, &l.first_pass_best(1.0).unwrap().words), ["a", "c"]);
    // with acoustics weighted up, b wins
    assert_eq!(words(&v, &l.first_pass_best(10.0).unwrap().words), ["b", "c"]);

    let tie = parse_lattice("0 2 a -1 -1\n2 3 b -1 -1\n0 1 c -1 -1\n1 3 d -1 -1\nF 3", &v).unwrap();
    for _ in 0..3 {
        let best = tie.first_pass_best(1.0).unwrap();
        assert_eq!(best.states, vec![0, 1, 3]);
        assert_eq!(words(&v, &best.words), ["c", "d"]);
    }
}

/// Random DAG over `n` states with forward arcs, trimmed.
fn random_dag(seed: u64, max_paths: u128) -> Lattice {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let n = rng.gen_range(2..8);
        let mut arcs = Vec::new();
        for src in 0..n - 1 {
            let fan = rng.gen_range(1..=3);
            for _ in 0..fan {
                let dst = rng.gen_range(src + 1..n);
                // coarse scores make exact ties common
                let am = -(rng.gen_range(0..4) as f64) * 0.5;
                let lm = -(rng.gen_range(0..4) as f64) * 0.25;
                arcs.push(Arc { src, dst, word: rng.gen_range(4..12), am, lm });
            }
        }
        let mut finals = vec![n - 1];
        if n > 2 && rng.gen_bool(0.3) {
            finals.push(rng.gen_range(1..n - 1));
        }
        let Ok(l) = Lattice::from_parts("r", n, arcs, &finals).and_then(|l| l.trim()) else { continue };
        if l.path_count() <= max_paths {
            return l;
        }
    }
}

#[test]
fn first_pass_best_matches_brute_force() {
    for seed in 0..100 {
        let l = random_dag(seed, 64);
        let paths = l.enumerate_paths(64).unwrap();
        for scale in [1.0, 0.5] {
            let mut best = &paths[0];
            for p in &paths[1..] {
                if better(p.score(&l, scale), &p.states, &p.arcs, best.score(&l, scale), &best.states, &best.arcs) {
                    best = p;
                }
            }
            let got = l.first_pass_best(scale).unwrap();
            assert_eq!(&got, best, "seed {seed}");
        }
    }
}

#[test]
fn path_scores_equal_arc_sums() {
    for seed in 0..50 {
        let l = random_dag(seed, 64);
        for p in l.enumerate_paths(64).unwrap() {
            let am: f64 = p.arcs.iter().map(|&a| l.arc(a).am).sum();
            let lm: f64 = p.arcs.iter().map(|&a| l.arc(a).lm).sum();
            assert!((p.am - am).abs() < 1e-12 && (p.lm - lm).abs() < 1e-12);
            for w in p.arcs.windows(2) {
                assert_eq!(l.arc(w[0]).dst, l.arc(w[1]).src);
            }
            assert_eq!(p.words, p.arcs.iter().map(|&a| l.arc(a).word).collect::<Vec<_>>());
            assert!(l.is_final(*p.states.last().unwrap()));
        }
    }
}

#[test]
fn trim_removes_dead_states() {
    let arcs = vec![
        Arc { src: 0, dst: 1, word: 4, am: 0.0, lm: 0.0 },
        Arc { src: 0, dst: 2, word: 5, am: 0.0, lm: 0.0 },
        Arc { src: 3, dst: 1, word: 6, am: 0.0, lm: 0.0 },
    ];
    let l = Lattice::from_parts("t", 4, arcs, &[1]).unwrap();
    assert!(!l.is_trimmed());
    let t = l.trim().unwrap();
    assert_eq!(t.num_states(), 2);
    assert_eq!(t.arcs().len(), 1);
    assert!(t.is_trimmed());
    assert_eq!(t.trim().unwrap(), t);
    let dead = Lattice::from_parts("x", 3, vec![Arc { src: 1, dst: 2, word: 4, am: 0.0, lm: 0.0 }], &[2]).unwrap();
    assert_eq!(dead.trim(), Err(LatticeError::NoPath));
}

#[test]
fn confusion_model_matches_brute_force() {
    let v = vocab();
    let cm = ConfusionModel::build(&v, 2);
    for a in NUM_RESERVED..v.len() {
        let mut expect: Vec<usize> = (NUM_RESERVED..v.len())
            .filter(|&b| b != a && strsim::levenshtein(v.word(a), v.word(b)) <= 2)
            .collect();
        expect.sort();
        let got: Vec<usize> = cm.neighbours(a).iter().map(|&(w, _)| w).collect();
        assert_eq!(got, expect);
    }
    let cat = v.id("cat");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = cm.sample(cat, 3, &mut rng);
    assert_eq!(s.len(), 3);
    assert!(!s.contains(&cat));
    let mut d = s.clone();
    d.sort();
    d.dedup();
    assert_eq!(d.len(), 3);
}

fn reference(v: &Vocabulary) -> Vec<usize> {
    ["cat", "dog", "a", "hello", "cap"].iter().map(|w| v.id(w)).collect()
}

#[test]
fn synthetic_lattice_boundaries() {
    let v = vocab();
    let cm = ConfusionModel::build(&v, 2);
    let r = reference(&v);
    for seed in 0..20 {
        let cfg = LatticeSynthConfig { width: 4, noise: 0.0, gap: 4.0 };
        let l = synthesize_lattice("s", &r, &cm, &cfg, seed).unwrap();
        assert_eq!(l.first_pass_best(1.0).unwrap().words, r);

        let chain = synthesize_lattice("s", &r, &cm, &LatticeSynthConfig { width: 1, ..cfg }, seed).unwrap();
        assert_eq!(chain.arcs().len(), r.len());
        assert_eq!(chain.enumerate_paths(1).unwrap()[0].words, r);
    }
    assert_eq!(
        synthesize_lattice("s", &[], &cm, &LatticeSynthConfig::default(), 0),
        Err(LatticeError::EmptyReference)
    );
}

#[test]
fn synthetic_lattice_contains_reference_and_is_deterministic() {
    let v = vocab();
    let cm = ConfusionModel::build(&v, 2);
    let r = reference(&v);
    let cfg = LatticeSynthConfig { width: 3, noise: 0.5, gap: 2.0 };
    let mut any_error = false;
    for seed in 0..50 {
        let l = synthesize_lattice("s", &r, &cm, &cfg, seed).unwrap();
        assert_eq!(l, synthesize_lattice("s", &r, &cm, &cfg, seed).unwrap());
        assert!(l.is_trimmed());
        l.check_words(v.len()).unwrap();
        let paths = l.enumerate_paths(usize::MAX).unwrap();
        assert!(paths.iter().any(|p| p.words == r));
        any_error |= l.first_pass_best(1.0).unwrap().words != r;
    }
    assert!(any_error, "noise 0.5 should cause some first-pass errors");
}

fn toy_ngram(v: &Vocabulary) -> NgramModel {
    let sents: Vec<Vec<usize>> = ["cat dog a hello cap", "cat cap a", "dog dog hello", "a b c d"]
        .iter()
        .map(|s| s.split(' ').map(|w| v.id(w)).collect())
        .collect();
    NgramModel::train(&sents, v.len(), 3, 0.75).unwrap()
}

#[test]
fn first_pass_lm_scores_are_exact_sentence_probabilities() {
    let v = vocab();
    let cm = ConfusionModel::build(&v, 2);
    let ng = toy_ngram(&v);
    let r = reference(&v);
    for seed in 0..10 {
        let raw = synthesize_lattice("s", &r, &cm, &LatticeSynthConfig { width: 3, noise: 0.3, gap: 2.0 }, seed).unwrap();
        let l = apply_first_pass_lm(&raw, &ng).unwrap();
        assert!(l.is_trimmed());
        let mut before: Vec<(Vec<usize>, f64)> =
            raw.enumerate_paths(10_000).unwrap().into_iter().map(|p| (p.words, p.am)).collect();
        let paths = l.enumerate_paths(10_000).unwrap();
        let mut after: Vec<(Vec<usize>, f64)> = paths.iter().map(|p| (p.words.clone(), p.am)).collect();
        before.sort_by(|a, b| a.0.cmp(&b.0));
        after.sort_by(|a, b| a.0.cmp(&b.0));
        assert_eq!(before.len(), after.len());
        for (x, y) in before.iter().zip(&after) {
            assert_eq!(x.0, y.0);
            assert!((x.1 - y.1).abs() < 1e-12);
        }
        for p in &paths {
            assert!((p.lm - ng.sentence_log_prob(&p.words)).abs() < 1e-9);
        }
    }
}

fn arb_lattice() -> impl Strategy<Value = Lattice> {
    (any::<u64>(), 1u128..200).prop_map(|(seed, cap)| {
        let mut l = random_dag(seed, cap);
        // vary scores beyond the coarse grid used for tie tests
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let arcs: Vec<Arc> = l
            .arcs()
            .iter()
            .map(|a| Arc { am: -rng.gen::<f64>() * 10.0, lm: -rng.gen::<f64>() * 1e-3, ..*a })
            .collect();
        let finals: Vec<usize> = l.finals().collect();
        l = Lattice::from_parts("p", l.num_states(), arcs, &finals).unwrap();
        l
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn serialisation_round_trips(l in arb_lattice()) {
        let v = vocab();
        let back = parse_lattice(&l.to_text(&v), &v).unwrap();
        prop_assert_eq!(&back, &l);
        let a: Vec<_> = l.enumerate_paths(1000).unwrap();
        let b: Vec<_> = back.enumerate_paths(1000).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn trim_is_idempotent(seed in any::<u64>(), extra in 0usize..4) {
        let base = random_dag(seed, 1000);
        let n = base.num_states();
        let mut arcs = base.arcs().to_vec();
        // hang unreachable and dead-end states off the lattice
        for i in 0..extra {
            arcs.push(Arc { src: n + i, dst: n - 1, word: 4, am: 0.0, lm: 0.0 });
            arcs.push(Arc { src: 0, dst: n + extra + i, word: 5, am: 0.0, lm: 0.0 });
        }
        let finals: Vec<usize> = base.finals().collect();
        let l = Lattice::from_parts("t", n + 2 * extra, arcs, &finals).unwrap();
        let once = l.trim().unwrap();
        prop_assert!(once.is_trimmed());
        prop_assert_eq!(once.trim().unwrap(), once.clone());
        prop_assert_eq!(once.enumerate_paths(1000).unwrap(), base.enumerate_paths(1000).unwrap());
    }
}
