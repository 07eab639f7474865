mod common;

use common::*;
use memrouter_core::builder::*;
use memrouter_core::data::Corpus;
use memrouter_core::memfile::*;
use memrouter_core::model::token_nlls;
use memrouter_core::store::*;
use memrouter_core::{pi, Directive, Error, GatingVector, ModelConfig, MoeModel, Parametric, RoutingPlan};
use proptest::prelude::*;
use rand::Rng;

fn corpus(seqs: Vec<Vec<usize>>) -> Corpus {
    Corpus {
        domain_id: 0,
        vocab_size: 11,
        sequences: seqs,
    }
}

fn small_corpus(seed: u64, n: usize, len: usize) -> Corpus {
    let mut r = rng(seed);
    corpus((0..n).map(|_| random_tokens(&mut r, len, 11)).collect())
}

/// `L_t` with every position routed by the given logits (`[t][slot]`).
fn loss_with_logits(model: &MoeModel, tokens: &[usize], logits: &[Vec<Vec<f64>>], t: usize) -> f64 {
    let mut plan = RoutingPlan::all_parametric(model.config(), tokens.len());
    for (pos, row) in logits.iter().enumerate() {
        for (slot, &layer) in model.config().moe_layers.iter().enumerate() {
            plan.set_at(layer, pos, Directive::Learnable(row[slot].clone())).unwrap();
        }
    }
    token_nlls(&model.forward(tokens, plan).unwrap().logits, tokens)[t]
}

fn scaled_model(seed: u64, factor: f64) -> MoeModel {
    let m = tiny_model(seed);
    let params = m
        .param_names()
        .zip(m.params())
        .map(|(n, p)| {
            let mut t = p.as_ref().clone();
            if !n.ends_with("norm") {
                t.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
            t
        })
        .collect();
    MoeModel::from_parts(m.config().clone(), params).unwrap()
}

#[test]
fn collect_keys_counts_and_determinism() {
    let m = MoeModel::init(ModelConfig::default(), 1).unwrap();
    let c = Corpus {
        domain_id: 0,
        vocab_size: 64,
        sequences: vec![(0..9).collect()],
    };
    let keys = collect_keys(&m, &c).unwrap();
    let count: usize = keys[0].iter().map(|k| k.rows()).sum();
    assert_eq!(count, 4 * 9);
    assert_eq!(keys, collect_keys(&m, &c).unwrap());
    let empty = Corpus {
        sequences: vec![],
        ..c
    };
    assert!(collect_keys(&m, &empty).unwrap().is_empty());
}

#[test]
fn zero_steps_keep_parametric_logits() {
    let m = tiny_model(2);
    let toks = random_tokens(&mut rng(1), 6, 11);
    let out = optimize_token_logits(
        &m,
        &toks,
        &BuildParams {
            steps: 0,
            ..BuildParams::default()
        },
    )
    .unwrap();
    assert_eq!(out.optimized, out.initial);
    for (t, row) in out.initial.iter().enumerate() {
        for (slot, r) in row.iter().enumerate() {
            let oracle = m.router_logits(out.keys[slot].row(t), slot).unwrap();
            assert!(r.iter().zip(&oracle).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }
}

#[test]
fn zero_learning_rate_reproduces_parametric_gating() {
    let m = tiny_model(3);
    let toks = random_tokens(&mut rng(2), 6, 11);
    for mode in [BuildMode::Strict, BuildMode::Fast] {
        let p = BuildParams {
            eta: 0.0,
            steps: 1,
            mode,
            accept_only_improving: false,
        };
        let out = optimize_token_logits(&m, &toks, &p).unwrap();
        let base = m.forward(&toks, Parametric).unwrap();
        for (t, row) in out.optimized.iter().enumerate() {
            for (slot, r) in row.iter().enumerate() {
                assert_eq!(&pi(r, 2, false).unwrap(), &base.gatings[slot][t]);
            }
        }
    }
}

#[test]
fn strict_gradient_matches_central_differences() {
    let m = tiny_model(4);
    let toks = random_tokens(&mut rng(3), 4, 11);
    let (initial, grads, _, _) = strict_logit_gradients(&m, &toks).unwrap();
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for (t, g) in grads.iter().enumerate() {
        let g = g.as_ref().unwrap();
        for slot in 0..2 {
            for i in 0..4 {
                let mut r = initial.clone();
                r[t][slot][i] += h;
                let plus = loss_with_logits(&m, &toks, &r, t);
                r[t][slot][i] -= 2.0 * h;
                let minus = loss_with_logits(&m, &toks, &r, t);
                let fd = (plus - minus) / (2.0 * h);
                worst = worst.max((fd - g[slot][i]).abs() / g[slot][i].abs().max(1e-8));
            }
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
    assert!(strict_gradient_check(&m, &toks, h).unwrap() < 1e-4);
    assert!(strict_gradient_check(&m, &toks, 0.0).is_err());
}

#[test]
fn fast_mode_is_flagged() {
    let m = tiny_model(5);
    let c = small_corpus(4, 3, 6);
    let p = BuildParams {
        mode: BuildMode::Fast,
        ..BuildParams::default()
    };
    let (mem, report, _) = build_memory(&m, &c, &p, SimilarityConfig::default()).unwrap();
    assert!(report.approximate);
    assert!(!report.warnings.is_empty());
    assert_eq!(mem.layers[0].len(), 15);
}

#[test]
fn memory_pairs_parametric_keys_with_optimised_values() {
    let m = tiny_model(6);
    let c = small_corpus(5, 4, 7);
    let (mem, report, _) = build_memory(&m, &c, &BuildParams::default(), SimilarityConfig::default()).unwrap();
    assert_eq!(report.target_tokens, 4 * 6);
    let keys = collect_keys(&m, &c).unwrap();
    for (slot, lm) in mem.layers.iter().enumerate() {
        assert_eq!(lm.len(), 24);
        let mut row = 0;
        for seq in &keys {
            for t in 0..6 {
                assert_eq!(lm.key(row), seq[slot].row(t));
                assert_eq!(lm.value(row).nonzeros(), 2);
                row += 1;
            }
        }
    }
    assert!(report.mean_nll_after_joint <= report.mean_nll_before);
}

#[test]
fn length_one_sequences_give_empty_memory() {
    let m = tiny_model(7);
    let c = corpus(vec![vec![1], vec![4]]);
    let (mem, report, _) = build_memory(&m, &c, &BuildParams::default(), SimilarityConfig::default()).unwrap();
    assert_eq!(mem.total_entries(), 0);
    assert_eq!(report.target_tokens, 0);
}

#[test]
fn duplicate_keys_are_kept() {
    let m = tiny_model(8);
    let c = corpus(vec![vec![1, 2, 3], vec![1, 2, 3]]);
    let (mem, _, _) = build_memory(&m, &c, &BuildParams::default(), SimilarityConfig::default()).unwrap();
    assert_eq!(mem.layers[0].len(), 4);
    assert_eq!(mem.layers[0].key(0), mem.layers[0].key(2));
}

#[test]
fn accept_only_improving_never_stores_a_worse_value() {
    // large weights make the loss strongly curved in the routing logits
    let m = scaled_model(9, 4.0);
    let c = small_corpus(6, 4, 8);
    let p = BuildParams {
        eta: 10.0,
        accept_only_improving: true,
        ..BuildParams::default()
    };
    let (mem, report, _) = build_memory(&m, &c, &p, SimilarityConfig::default()).unwrap();
    let mut row = 0;
    for seq in &c.sequences {
        for t in 0..seq.len() - 1 {
            let stored: Vec<GatingVector> = mem.layers.iter().map(|l| l.value(row).clone()).collect();
            let with = token_nll_with_override(&m, seq, t, &stored).unwrap();
            let base = token_nlls(&m.forward(seq, Parametric).unwrap().logits, seq)[t];
            assert!(with <= base, "token {row}: {with} > {base}");
            row += 1;
        }
    }
    // a large step overshoots somewhere, so the filter had work to do
    assert!(report.rejected > 0);
}

#[test]
fn tiny_steps_never_worsen_a_token() {
    let m = tiny_model(10);
    let c = small_corpus(7, 4, 8);
    let p = BuildParams {
        eta: 1e-4,
        ..BuildParams::default()
    };
    let (mem, _, _) = build_memory(&m, &c, &p, SimilarityConfig::default()).unwrap();
    let mut row = 0;
    for seq in &c.sequences {
        let base = token_nlls(&m.forward(seq, Parametric).unwrap().logits, seq);
        for (t, b) in base.iter().enumerate() {
            let stored: Vec<GatingVector> = mem.layers.iter().map(|l| l.value(row).clone()).collect();
            assert!(token_nll_with_override(&m, seq, t, &stored).unwrap() <= b + 1e-9);
            row += 1;
        }
    }
}

#[test]
fn memory_file_round_trip() {
    let m = tiny_model(11);
    let c = small_corpus(8, 3, 6);
    let (mem, _, _) = build_memory(&m, &c, &BuildParams::default(), SimilarityConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.mem");
    save_memory(&mem, &p).unwrap();
    let loaded = load_memory(&p).unwrap();
    // storage is f32: a loaded memory round-trips exactly
    let q = dir.path().join("b.mem");
    save_memory(&loaded, &q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    assert_eq!(load_memory(&q).unwrap(), loaded);
    for (a, b) in mem.layers.iter().zip(&loaded.layers) {
        assert_eq!(a.gamma(), b.gamma());
        assert!(a.keys().iter().zip(b.keys()).all(|(x, y)| (x - y).abs() <= 1e-6 * x.abs().max(1.0)));
        for (u, v) in a.values().iter().zip(b.values()) {
            assert!(u.max_abs_diff(v) < 1e-7);
        }
    }
    loaded.check_compatible(&m, Some(&mem.fingerprint)).unwrap();
}

#[test]
fn empty_memory_round_trips() {
    let m = tiny_model(12);
    let mem = MemorySet::empty(&m, "00".into(), Kernel::Cosine);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.mem");
    save_memory(&mem, &p).unwrap();
    assert_eq!(load_memory(&p).unwrap(), mem);
}

#[test]
fn mismatched_model_is_rejected() {
    let m = tiny_model(13);
    let mem = MemorySet::empty(&m, "00".into(), Kernel::Rbf);
    let wide = MoeModel::init(
        ModelConfig {
            model_dim: 12,
            ..tiny_config()
        },
        0,
    )
    .unwrap();
    assert!(matches!(mem.check_compatible(&wide, None), Err(Error::Mismatch { .. })));
    let more = MoeModel::init(
        ModelConfig {
            num_experts: 5,
            ..tiny_config()
        },
        0,
    )
    .unwrap();
    assert!(matches!(mem.check_compatible(&more, None), Err(Error::Mismatch { .. })));
    assert!(matches!(mem.check_compatible(&m, Some("ff")), Err(Error::Mismatch { .. })));
}

#[test]
fn corrupt_memory_files_are_rejected() {
    let m = tiny_model(14);
    let (mem, _, _) = build_memory(&m, &small_corpus(9, 2, 4), &BuildParams::default(), SimilarityConfig::default()).unwrap();
    let bytes = encode_memory(&mem).unwrap();
    let path = std::path::Path::new("x.mem");
    let mut bad = bytes.clone();
    bad[3] = b'Z';
    assert!(matches!(decode_memory(&bad, path), Err(Error::BadMagic { .. })));
    assert!(matches!(decode_memory(&bytes[..bytes.len() - 2], path), Err(Error::Truncated { .. })));
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = std::str::from_utf8(&bytes[16..16 + header_len]).unwrap();
    let edited = json.replace("\"format_version\":1", "\"format_version\":7");
    let mut v = bytes[..8].to_vec();
    v.extend_from_slice(&(edited.len() as u64).to_le_bytes());
    v.extend_from_slice(edited.as_bytes());
    v.extend_from_slice(&bytes[16 + header_len..]);
    assert!(matches!(decode_memory(&v, path), Err(Error::Mismatch { .. })));
}

fn brute_force(keys: &[Vec<f64>], x: &[f64], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = keys
        .iter()
        .enumerate()
        .map(|(i, key)| (key.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum(), i))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|p| p.1).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn query_matches_scan_and_sort(seed in 0u64..10_000, m in 1usize..300, d in 1usize..12, k in 1usize..20) {
        let mut r = rng(seed);
        // a coarse grid makes exact distance ties common
        let keys: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| r.random_range(-2i32..=2) as f64).collect()).collect();
        let values = (0..m).map(|i| GatingVector::one_hot(3, i % 3)).collect();
        let mem = LayerMemory::new(0, d, 3, keys.concat(), values, SimilarityConfig::default()).unwrap();
        let x: Vec<f64> = (0..d).map(|_| r.random_range(-2i32..=2) as f64).collect();
        let got = mem.query(&x, k).unwrap();
        prop_assert_eq!(&got.indices, &brute_force(&keys, &x, k));
        prop_assert!(got.distances.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(got.similarities.iter().all(|s| (0.0..=1.0).contains(s)));
    }

    #[test]
    fn rbf_is_symmetric_and_decreasing(seed in 0u64..10_000, gamma in 0.01f64..10.0) {
        let mut r = rng(seed);
        let x: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        let s = similarity(&x, &y, Kernel::Rbf, gamma);
        prop_assert_eq!(s, similarity(&y, &x, Kernel::Rbf, gamma));
        prop_assert!(s < 1.0 || x == y);
        let far: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + 2.0 * (b - a)).collect();
        prop_assert!(similarity(&x, &far, Kernel::Rbf, gamma) <= s);
        prop_assert!((0.0..=1.0).contains(&similarity(&x, &y, Kernel::Cosine, gamma)));
    }
}
