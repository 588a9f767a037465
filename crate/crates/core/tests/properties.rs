//! Property tests for the invariants each module promises.

use proptest::prelude::*;

use presslm::align::{load_vocab_embeddings, AlignConfig, AlignedFeatures, AlignmentWeights, AttentionScale, VocabSource};
use presslm::autodiff::{ParamStore, Tape};
use presslm::clients::HashEmbedding;
use presslm::dataset::{sample_knowledge, score_final};
use presslm::gradcheck::{finite_diff_grad, max_relative_error};
use presslm::metrics::{self, bleu, clipped_matches, lcs_len, meteor, rouge_l, semantic_f, EvalPair, MetricSelection};
use presslm::model::{ModelConfig, SitModel};
use presslm::ops;
use presslm::pressure::{
    compute_stats, load_pressure_map, synth_posture, template_annotation, write_binary, write_csv, Blob, MapFormat, PressureMap,
    SensorGeometry, SyntheticPostureSpec,
};
use presslm::prompt::{
    assemble_prompt, build_stat_context, build_structure_context, render_token_stream, unescape_text, escape_text, ByteTokenizer,
    ContextBlock, ContextLevel, StreamItem, TaskInstruction, TaskType,
};
use presslm::rng;
use presslm::sensor::{patchify, EmbeddingConfig, SensorEncoder};
use presslm::Tensor;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn sized_tensor() -> impl Strategy<Value = Tensor> {
    (1usize..=8, 1usize..=8).prop_flat_map(|(r, c)| tensor(r, c))
}

fn map_strategy() -> impl Strategy<Value = PressureMap> {
    (1usize..=9, 1usize..=9).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0f64..=1.0, h * w).prop_map(move |v| PressureMap::new(h, w, v).unwrap())
    })
}

fn words() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["the", "seat", "left", "hip", "load", "is", "even", ".", "rear"]), 0..12)
        .prop_map(|w| w.join(" "))
}

/// Quadratic LCS by exhaustive recursion with memo, independent of the library.
fn brute_lcs(a: &[String], b: &[String]) -> usize {
    fn go(a: &[String], b: &[String], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len()]; a.len()];
    go(a, b, 0, 0, &mut memo)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(x in sized_tensor(), shift in -50.0f64..50.0) {
        let s = ops::softmax_rows(&x).unwrap();
        for i in 0..s.rows() {
            prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let shifted = ops::softmax_rows(&x.map(|v| v + shift)).unwrap();
        prop_assert!(max_abs_diff(&s, &shifted) < 1e-6);
    }

    #[test]
    fn matmul_layer_norm_chain_matches_finite_differences(a in sized_tensor(), seed in 0u64..1000) {
        let (r, c) = a.dims2().unwrap();
        let mut g = rng::seeded(seed);
        let b = rng::normal_tensor(&[c, 3], 1.0, &mut g);
        let gain = rng::normal_tensor(&[3], 1.0, &mut g);
        let probe = rng::normal_tensor(&[r, 3], 1.0, &mut g);
        let f = |a: &Tensor, tape: &mut Tape| {
            let av = tape.input(a.clone());
            let bv = tape.constant(b.clone());
            let y = tape.matmul(av, bv).unwrap();
            let gv = tape.constant(gain.clone());
            let bias = tape.constant(Tensor::zeros(&[3]));
            let y = tape.layer_norm(y, gv, bias, 1e-5).unwrap();
            let y = tape.gelu(y);
            let p = tape.constant(probe.clone());
            let y = tape.mul(y, p).unwrap();
            (av, tape.sum(y))
        };
        let mut tape = Tape::new();
        let (av, loss) = f(&a, &mut tape);
        let grads = tape.backward(loss).unwrap();
        let numeric = finite_diff_grad(|x| { let mut t = Tape::new(); let (_, l) = f(x, &mut t); t.value(l).data()[0] }, &a, 1e-4);
        prop_assert!(max_relative_error(grads.get(av).unwrap(), &numeric) < 1e-4);
    }

    #[test]
    fn seeded_dropout_is_bit_identical(x in sized_tensor(), seed in any::<u64>()) {
        let a = ops::dropout(&x, 0.4, true, &mut rng::seeded(seed)).unwrap();
        let b = ops::dropout(&x, 0.4, true, &mut rng::seeded(seed)).unwrap();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn stats_match_a_single_pass_recount(map in map_strategy()) {
        let st = compute_stats(&map);
        let v = map.values();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        prop_assert_eq!(st.max, v.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        prop_assert_eq!(st.min, v.iter().cloned().fold(f64::INFINITY, f64::min));
        prop_assert_eq!(st.mean, mean.clamp(st.min, st.max));
        prop_assert!((st.variance - var).abs() < 1e-15);
    }

    #[test]
    fn unit_range_load_is_idempotent(map in map_strategy()) {
        let g = SensorGeometry { rows: map.height(), cols: map.width(), value_min: 0.0, value_max: 1.0, ..Default::default() };
        let mut csv = Vec::new();
        write_csv(&mut csv, &map, &g).unwrap();
        let back = load_pressure_map(csv.as_slice(), MapFormat::Csv, &g).unwrap();
        prop_assert_eq!(back.values(), map.values());
    }

    #[test]
    fn binary_round_trip_within_f32(map in map_strategy()) {
        let g = SensorGeometry { rows: map.height(), cols: map.width(), ..Default::default() };
        let mut buf = Vec::new();
        write_binary(&mut buf, &map, &g).unwrap();
        let back = load_pressure_map(buf.as_slice(), MapFormat::Binary, &g).unwrap();
        for (a, b) in back.values().iter().zip(map.values()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn synthesis_ignores_blob_order(blobs in prop::collection::vec((0.0f64..15.0, 0.0f64..15.0, 0.1f64..1.0, 0.5f64..4.0), 1..5), seed in any::<u64>()) {
        let g = SensorGeometry { rows: 16, cols: 16, ..Default::default() };
        let mk = |bs: Vec<Blob>| SyntheticPostureSpec { posture_label: "upright".into(), blobs: bs, noise_floor: 0.02 };
        let list: Vec<Blob> = blobs.iter().map(|&(row, col, amplitude, sigma)| Blob { row, col, amplitude, std: sigma }).collect();
        let mut rev = list.clone();
        rev.reverse();
        let a = synth_posture(&mk(list), &g, seed).unwrap();
        let b = synth_posture(&mk(rev), &g, seed).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mirroring_inverts_the_side_ratio(map in map_strategy()) {
        let ratio = |m: &PressureMap| presslm::pressure::left_right_ratio(m);
        if let (Some(a), Some(b)) = (ratio(&map), ratio(&map.mirrored())) {
            if a.is_finite() && a > 0.0 {
                prop_assert!((a * b - 1.0).abs() < 1e-9);
                let mirrored = map.mirrored();
                let text = template_annotation(&mirrored, &compute_stats(&mirrored), None);
                let printed = format!("ratio {:.2}", b);
                prop_assert!(text.contains(&printed), "{}", text);
            } else {
                prop_assert!(b == 0.0 || b.is_infinite());
            }
        }
    }

    #[test]
    fn patchify_then_unpatchify_rebuilds_the_padded_map(map in map_strategy(), s in 1usize..=4) {
        prop_assume!(s <= map.height().min(map.width()));
        let grid = patchify(&map, s).unwrap();
        let (rows, cols, values) = grid.unpatchify();
        prop_assert_eq!(rows, map.height().div_ceil(s) * s);
        prop_assert_eq!(cols, map.width().div_ceil(s) * s);
        for r in 0..rows {
            for c in 0..cols {
                let want = if r < map.height() && c < map.width() { map.at(r, c) } else { 0.0 };
                prop_assert_eq!(values[r * cols + c], want);
            }
        }
    }

    #[test]
    fn alignment_output_is_n_by_hidden_for_any_vocab(n in 1usize..6, v in 1usize..40, seed in any::<u64>()) {
        let mut store = ParamStore::new();
        let vocab = load_vocab_embeddings(&VocabSource::Random { seed }, &mut store, v, 6).unwrap();
        let cfg = AlignConfig { heads: 2, embed_dim: 4, hidden_dim: 6, dropout: 0.0, scale: AttentionScale::ModelWidth, top_m: None };
        let align = AlignmentWeights::new(&mut store, cfg, 6, &mut rng::seeded(seed)).unwrap();
        let x = rng::normal_tensor(&[n, 4], 1.0, &mut rng::seeded(seed ^ 1));
        let out = align.align(&store, &x, &vocab, false, &mut rng::seeded(0)).unwrap();
        prop_assert_eq!(out.values.shape(), &[n, 6]);
    }

    #[test]
    fn escaping_round_trips(s in ".{0,40}", marker in prop::sample::select(vec!["<sensor>", "</sensor>", "\\", ""])) {
        let text = format!("{s}{marker}{s}");
        prop_assert_eq!(unescape_text(&escape_text(&text)), text.clone());
        // Every surviving marker sits behind an odd run of backslashes.
        let escaped = escape_text(&text);
        for (at, _) in escaped.match_indices("<sensor>").chain(escaped.match_indices("</sensor>")) {
            let run = escaped[..at].chars().rev().take_while(|&c| c == '\\').count();
            prop_assert!(run % 2 == 1, "{}", escaped);
        }
    }

    #[test]
    fn distinct_instructions_serialize_distinctly(a in ".{0,30}", b in ".{0,30}", n in 1usize..6) {
        prop_assume!(a != b);
        let g = SensorGeometry::default();
        let st = compute_stats(&PressureMap::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let f = AlignedFeatures { values: Tensor::zeros(&[n, 4]) };
        let mk = |t: &str| assemble_prompt(&f, &build_structure_context(&g), &build_stat_context(&st), &TaskInstruction::new(TaskType::Question, t)).unwrap();
        let (pa, pb) = (mk(&a), mk(&b));
        prop_assert_ne!(pa.serialize(), pb.serialize());
        let stream = render_token_stream(&pa, &ByteTokenizer, 1 << 16).unwrap();
        prop_assert_eq!(stream.soft_rows(), n);
        prop_assert_eq!(pa.soft_token_count(), n);
    }

    #[test]
    fn final_score_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, d in 0.0f64..=0.5, alpha in 0.01f64..0.99) {
        let base = score_final(a, b, alpha).unwrap();
        prop_assert!(score_final((a + d).min(1.0), b, alpha).unwrap() >= base);
        prop_assert!(score_final(a, (b + d).min(1.0), alpha).unwrap() >= base);
    }

    #[test]
    fn knowledge_sample_is_an_ordered_subset(len in 0usize..20, m in 1usize..8, seed in any::<u64>()) {
        let ranked: Vec<usize> = (0..len).collect();
        let got = sample_knowledge(&ranked, m, seed);
        prop_assert_eq!(got.len(), m.min(len));
        prop_assert!(got.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn metrics_stay_in_unit_interval(c in words(), r in words()) {
        prop_assume!(!r.trim().is_empty());
        let p = HashEmbedding::default();
        for v in [bleu(&c, &[&r], 4), rouge_l(&c, &r), meteor(&c, &r), semantic_f(&c, &r, &p).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
    }

    #[test]
    fn lcs_matches_exhaustive_recursion(c in words(), r in words()) {
        let (a, b) = (metrics::tokenize(&c), metrics::tokenize(&r));
        prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
    }

    #[test]
    fn clipped_counts_never_exceed_either_side(c in words(), r in words(), n in 1usize..=4) {
        let (a, b) = (metrics::tokenize(&c), metrics::tokenize(&r));
        let (m, total) = clipped_matches(&a, std::slice::from_ref(&b), n);
        prop_assert!(m <= total);
        prop_assert!(m <= b.len().saturating_sub(n - 1));
    }

    #[test]
    fn benchmark_ignores_corpus_order(pairs in prop::collection::vec((words(), words(), 0usize..4), 1..8)) {
        let pairs: Vec<Option<EvalPair>> = pairs
            .into_iter()
            .enumerate()
            .filter(|(_, (_, r, _))| !r.trim().is_empty())
            .map(|(i, (c, r, t))| Some(EvalPair { id: i.to_string(), task_type: TaskType::ALL[t], candidate: c, reference: r }))
            .collect();
        prop_assume!(!pairs.is_empty());
        let p = HashEmbedding::default();
        let fwd = metrics::run_benchmark(&pairs, MetricSelection::surface(), &p, None, "").unwrap();
        let mut rev = pairs.clone();
        rev.reverse();
        let bwd = metrics::run_benchmark(&rev, MetricSelection::surface(), &p, None, "").unwrap();
        for (task, m) in &fwd.per_task {
            for (name, v) in &m.means {
                prop_assert!((v - bwd.per_task[task].means[name]).abs() < 1e-12);
            }
        }
        // Means agree with a hand average over the per-pair values.
        let bleus: Vec<f64> = fwd.pairs.iter().filter_map(|p| p.bleu).collect();
        let hand = bleus.iter().sum::<f64>() / bleus.len() as f64;
        prop_assert!((fwd.overall.means["bleu"] - hand).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn later_tokens_never_reach_earlier_logits(t in 1usize..12, byte in 1usize..256) {
        let model = SitModel::new(ModelConfig::tiny(), 2).unwrap();
        let items: Vec<StreamItem> = b"sit up, please".iter().map(|&b| StreamItem::Hard(b as usize)).collect();
        let mut changed = items.clone();
        changed[t] = StreamItem::Hard(byte);
        let a = model.stream_logits(&items, &[], None).unwrap();
        let b = model.stream_logits(&changed, &[], None).unwrap();
        for i in 0..t {
            prop_assert_eq!(a.row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn positions_live_only_in_the_positional_table(i in 0usize..4, j in 0usize..4, seed in any::<u64>()) {
        prop_assume!(i != j);
        let cfg = EmbeddingConfig { patch_size: 2, embed_dim: 8, noise_std: 0.0, encoder_depth: 1, encoder_heads: 2, ff_multiplier: 2, ..Default::default() };
        let mut store = ParamStore::new();
        let enc = SensorEncoder::new(&mut store, cfg, 4, &mut rng::seeded(seed)).unwrap();
        let map = PressureMap::new(4, 4, (0..16).map(|k| (k as f64 * 0.37 + seed as f64 * 1e-3).fract()).collect()).unwrap();
        let grid = patchify(&map, 2).unwrap();
        let tokens = |store: &ParamStore, grid: &presslm::sensor::PatchGrid| {
            let mut tape = Tape::new();
            let v = enc.tokens(&mut tape, store, grid).unwrap();
            tape.value(v).clone()
        };
        let mut swapped_grid = grid.clone();
        swap_rows(&mut swapped_grid.patches, i, j);
        let mut swapped_store = store.clone();
        let mut pos = store.value(enc.pos).clone();
        swap_rows(&mut pos, i, j);
        swapped_store.set_value(enc.pos, pos).unwrap();
        let mut expect = tokens(&store, &grid);
        swap_rows(&mut expect, i, j);
        prop_assert!(max_abs_diff(&tokens(&swapped_store, &swapped_grid), &expect) < 1e-12);
        // Swapping only the positional rows must change the encoder output.
        prop_assert!(max_abs_diff(&enc.embed(&swapped_store, &grid).unwrap(), &enc.embed(&store, &grid).unwrap()) > 1e-6);
        prop_assert_eq!(bits(&enc.embed(&store, &grid).unwrap()), bits(&enc.embed(&store, &grid).unwrap()));
    }
}

fn swap_rows(t: &mut Tensor, i: usize, j: usize) {
    let a = t.row(i).to_vec();
    let b = t.row(j).to_vec();
    t.row_mut(i).copy_from_slice(&b);
    t.row_mut(j).copy_from_slice(&a);
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn context_blocks_reject_feature_level_text() {
    assert!(ContextBlock::text(ContextLevel::Feature, "x").is_err());
}
