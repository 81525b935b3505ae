use std::fs;

use optree::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use optree::dataset::{dataset_generate, generate_samples, load_dataset, DataConfig, Sample};
use optree::features::{Pooling, PooledFeature};
use optree::formula::tree_to_formula;
use optree::loss::similarity_matrix;
use optree::metrics::{levenshtein, levenshtein_str, metric_suite};
use optree::nn::{Model, NetConfig};
use optree::ots::{ots_to_tree, tree_to_ots, ConstVec, Ots};
use optree::render::render_image;
use optree::report::{similarity_report, summarize};
use optree::teacher::HashTeacher;
use optree::train::{batch_indices, pretrain, pretrain_step, TrainConfig, TrainState};
use optree::tree::{sample_tree, GenConfig};
use optree::vocab::{OperatorVocab, TokenId};
use optree::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain recursive edit distance with a memo table.
fn lev_ref(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], memo: &mut [[Option<usize>; 8]; 8]) -> usize {
        if let Some(v) = memo[a.len()][b.len()] {
            return v;
        }
        let v = match (a.split_last(), b.split_last()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = go(ra, rb, memo) + usize::from(x != y);
                sub.min(go(ra, b, memo) + 1).min(go(a, rb, memo) + 1)
            }
        };
        memo[a.len()][b.len()] = Some(v);
        v
    }
    go(a, b, &mut [[None; 8]; 8])
}

fn all_sequences(max_len: usize, alphabet: u8) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut layer = vec![Vec::new()];
    for _ in 0..max_len {
        layer = layer
            .iter()
            .flat_map(|s: &Vec<u8>| {
                (0..alphabet).map(move |c| {
                    let mut t = s.clone();
                    t.push(c);
                    t
                })
            })
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

#[test]
fn levenshtein_examples() {
    assert_eq!(levenshtein_str("abc", "abc"), 0);
    assert_eq!(levenshtein_str("abc", "abd"), 1);
    assert_eq!(levenshtein_str("", "abc"), 3);
    assert_eq!(levenshtein_str("kitten", "sitting"), 3);
    assert_eq!(levenshtein(&[TokenId(2), TokenId(7)], &[TokenId(2), TokenId(8), TokenId(3)]), 2);
}

#[test]
fn levenshtein_matches_recursive_reference_exhaustively() {
    let seqs = all_sequences(6, 3);
    assert_eq!(seqs.len(), 1093);
    for a in &seqs {
        for b in &seqs {
            assert_eq!(levenshtein(a, b), lev_ref(a, b), "{a:?} {b:?}");
        }
    }
}

#[test]
fn levenshtein_is_a_metric_on_samples() {
    let seqs = all_sequences(5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20_000 {
        let a = &seqs[rng.random_range(0..seqs.len())];
        let b = &seqs[rng.random_range(0..seqs.len())];
        let c = &seqs[rng.random_range(0..seqs.len())];
        assert!(levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c));
        assert_eq!(levenshtein(a, b) == 0, a == b);
        assert_eq!(levenshtein(a, b), levenshtein(b, a));
    }
}

fn targets(n: usize) -> (Vec<Ots>, Vec<ConstVec>) {
    let v = OperatorVocab::standard(1);
    let cfg = GenConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    (0..n as u64)
        .map(|seed| {
            let tree = sample_tree(&cfg, seed).unwrap();
            let vals: Vec<f64> = (0..tree.n_consts()).map(|_| rng.random_range(-2.0..2.0)).collect();
            (tree_to_ots(&tree, &v, 24).unwrap(), ConstVec::padded(&vals, 8).unwrap())
        })
        .unzip()
}

#[test]
fn identical_predictions_score_one() {
    let v = OperatorVocab::standard(1);
    let (t, c) = targets(30);
    let r = metric_suite(&t, &t, Some(&c), &c, &v).unwrap();
    assert_eq!((r.acc_r, r.s_rl, r.s_rl_tilde), (1.0, 1.0, 1.0));
    let r = metric_suite(&t, &t, None, &c, &v).unwrap();
    assert_eq!((r.acc_r, r.s_rl, r.s_rl_tilde), (1.0, 1.0, 1.0));
}

#[test]
fn malformed_predictions_gate_formula_similarity() {
    let v = OperatorVocab::standard(1);
    let (t, c) = targets(20);
    // BOS followed directly by EOS never reconstructs.
    let bad: Vec<Ots> = (0..20)
        .map(|_| Ots::from_tokens(&[v.bos(), v.eos()], 24, v.pad()).unwrap())
        .collect();
    let r = metric_suite(&bad, &t, None, &c, &v).unwrap();
    assert_eq!(r.acc_r, 0.0);
    assert_eq!(r.s_rl_tilde, 0.0);
    assert!(r.s_rl > 0.0);
}

#[test]
fn metric_suite_matches_per_sample_recompute() {
    let v = OperatorVocab::standard(1);
    let (t, c) = targets(60);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut preds = Vec::new();
    let mut pcs = Vec::new();
    for i in 0..60 {
        let p = match i % 3 {
            // Another target: well formed, usually different.
            0 => t[(i * 7 + 1) % 60].clone(),
            // Random body: mostly malformed.
            1 => {
                let len = rng.random_range(1..22);
                let mut ids = vec![v.bos()];
                ids.extend((0..len).map(|_| TokenId(rng.random_range(5..=19))));
                ids.push(v.eos());
                Ots::from_tokens(&ids, 24, v.pad()).unwrap()
            }
            // A one-token edit of the target.
            _ => {
                let mut ids = t[i].tokens().to_vec();
                let k = rng.random_range(1..ids.len() - 1);
                ids[k] = TokenId(rng.random_range(5..=19));
                Ots::from_tokens(&ids, 24, v.pad()).unwrap()
            }
        };
        preds.push(p);
        let vals: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        pcs.push(ConstVec::from_values(&vals));
    }
    let r = metric_suite(&preds, &t, Some(&pcs), &c, &v).unwrap();

    let (mut acc, mut srl, mut srl_t) = (0.0, 0.0, 0.0);
    let placeholder = ConstVec::from_values(&[0.0; 24]);
    for i in 0..60 {
        let p: Vec<u32> = preds[i].tokens().iter().map(|x| x.0).collect();
        let q: Vec<u32> = t[i].tokens().iter().map(|x| x.0).collect();
        let d = lev_dp(&p, &q);
        srl += (q.len() as f64 - d as f64) / q.len() as f64;
        let target_formula = tree_to_formula(&ots_to_tree(&t[i], &c[i], &v).unwrap(), &c[i]).unwrap();
        if let Ok(tree) = ots_to_tree(&preds[i], &placeholder, &v) {
            acc += 1.0;
            let f = tree_to_formula(&tree, &pcs[i]).unwrap();
            let a: Vec<char> = f.chars().collect();
            let b: Vec<char> = target_formula.chars().collect();
            let fd = lev_dp(&a, &b);
            srl_t += (b.len() as f64 - fd as f64) / b.len() as f64;
        }
    }
    assert!((r.acc_r - acc / 60.0).abs() < 1e-12);
    assert!((r.s_rl - srl / 60.0).abs() < 1e-12);
    assert!((r.s_rl_tilde - srl_t / 60.0).abs() < 1e-12);
    assert!(r.acc_r > 0.3 && r.acc_r < 1.0, "{}", r.acc_r);
}

/// Full-table edit distance, kept separate from the library's two-row form.
fn lev_dp<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let s = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = s.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

#[test]
fn metric_suite_rejects_mismatched_lengths() {
    let v = OperatorVocab::standard(1);
    let (t, c) = targets(3);
    assert!(matches!(
        metric_suite(&t[..2], &t, None, &c, &v),
        Err(Error::LengthMismatch { pred: 2, target: 3 })
    ));
}

#[test]
fn literal_sequence_similarity_can_go_negative() {
    let v = OperatorVocab::standard(1);
    let (t, c) = targets(40);
    let i = (0..40).min_by_key(|&i| t[i].true_len()).unwrap();
    let long = (0..40).max_by_key(|&i| t[i].true_len()).unwrap();
    let r = metric_suite(&t[long..=long], &t[i..=i], None, &c[i..=i], &v).unwrap();
    let d = levenshtein(t[long].tokens(), t[i].tokens()) as f64;
    let l = t[i].true_len() as f64;
    assert_eq!(r.s_rl, (l - d) / l);
    if d > l {
        assert!(r.s_rl < 0.0);
    }
}

fn small_data_cfg(n: usize, ipp: usize) -> DataConfig {
    let mut dc = DataConfig::default();
    dc.n_skeletons = n;
    dc.images_per_skeleton = ipp;
    dc.seed = 17;
    dc
}

#[test]
fn single_record_dataset_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small_data_cfg(1, 1);
    let ma = dataset_generate(&cfg, a.path()).unwrap();
    let mb = dataset_generate(&cfg, b.path()).unwrap();
    assert_eq!(ma.n_records, 1);
    assert_eq!(ma.content_hash, mb.content_hash);
    for f in ["index.jsonl", "images.f32", "manifest.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn pairs_per_skeleton_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset_generate(&small_data_cfg(6, 3), dir.path()).unwrap();
    assert_eq!((m.n_records, m.n_skeletons), (18, 6));
    let (_, samples) = load_dataset(dir.path()).unwrap();
    for k in 0..6 {
        assert_eq!(samples.iter().filter(|s| s.skeleton == k).count(), 3);
    }
}

#[test]
fn stored_records_rederive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_data_cfg(25, 2);
    dataset_generate(&cfg, dir.path()).unwrap();
    let (m, samples) = load_dataset(dir.path()).unwrap();
    let v = m.config.vocab().unwrap();
    let grid = m.config.grid().unwrap();
    for s in &samples {
        let tree = ots_to_tree(&s.ots, &s.consts, &v).unwrap();
        assert_eq!(tree_to_ots(&tree, &v, 24).unwrap(), s.ots);
        assert_eq!(tree_to_formula(&tree, &s.consts).unwrap(), s.formula);
        for &c in s.consts.visible().unwrap() {
            assert!((-2.0..=2.0).contains(&c));
        }
        let img = render_image(&tree, &s.consts, &grid, s.image.noise_sigma(), s.image.seed()).unwrap();
        assert_eq!(img.finite_mask(), s.image.finite_mask());
        // Stored pixels are f32.
        for (a, b) in img.values().iter().zip(s.image.values()) {
            assert_eq!(*a as f32 as f64, *b);
        }
    }
    // The in-memory generator agrees with what was written.
    let fresh = generate_samples(&cfg).unwrap();
    assert_eq!(fresh.len(), samples.len());
    for (a, b) in fresh.iter().zip(&samples) {
        assert_eq!((&a.ots, &a.formula, a.seed), (&b.ots, &b.formula, b.seed));
    }
}

fn toy_state(steps: u64) -> (Vec<Sample>, TrainConfig, TrainState) {
    let mut dc = DataConfig::default();
    dc.gen.node_range = [3, 7];
    dc.n_skeletons = 12;
    dc.images_per_skeleton = 1;
    let data = generate_samples(&dc).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        steps,
        queue_capacity: 16,
        n_neg: 8,
        ..TrainConfig::default()
    };
    let net = NetConfig {
        d_f: 16,
        heads: 2,
        ..NetConfig::default()
    };
    let st = TrainState::new(Model::new(net).unwrap(), &cfg).unwrap();
    (data, cfg, st)
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let (data, cfg, mut st) = toy_state(3);
    let teacher = HashTeacher::new(48, 1);
    pretrain(&mut st, &data, &teacher, &cfg, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    save_checkpoint(&st, &p1).unwrap();
    let back = load_checkpoint(&p1, Some(st.model.config())).unwrap();
    save_checkpoint(&back, &p2).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    assert_eq!(back.step, 3);
    assert_eq!(back.queues, st.queues);
    assert_eq!(back.adam.t, st.adam.t);
    assert_eq!(back.model.temperatures(), st.model.temperatures());
}

#[test]
fn checkpoint_rejects_other_width() {
    let (_, _, st) = toy_state(1);
    let bytes = encode_checkpoint(&st).unwrap();
    let other = NetConfig {
        d_f: 32,
        heads: 2,
        ..NetConfig::default()
    };
    assert!(matches!(decode_checkpoint(&bytes, Some(&other)), Err(Error::Version(_))));
    assert!(decode_checkpoint(&bytes, Some(st.model.config())).is_ok());
}

#[test]
fn resumed_training_equals_straight_run() {
    let teacher = HashTeacher::new(48, 1);
    let (data, cfg20, mut straight) = toy_state(20);
    pretrain(&mut straight, &data, &teacher, &cfg20, |_| {}).unwrap();

    // Stop after 10 steps of the same 20-step plan, so the schedule matches.
    let (_, _, mut first) = toy_state(20);
    let schedule = cfg20.schedule(data.len());
    while first.step < 10 {
        let idx = batch_indices(data.len(), cfg20.batch_size, cfg20.seed, first.step);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
        pretrain_step(&mut first, &batch, &teacher, &cfg20, &schedule).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&first, &path).unwrap();
    let mut resumed = load_checkpoint(&path, None).unwrap();
    pretrain(&mut resumed, &data, &teacher, &cfg20, |_| {}).unwrap();
    assert_eq!(encode_checkpoint(&resumed).unwrap(), encode_checkpoint(&straight).unwrap());
}

#[test]
fn one_sample_report_is_one_by_one() {
    let (data, _, st) = toy_state(1);
    let teacher = HashTeacher::new(48, 1);
    let dir = tempfile::tempdir().unwrap();
    let r = similarity_report(
        &st.model,
        &[&data[0]],
        &teacher,
        Pooling::FirstToken,
        Pooling::Mean,
        Some(dir.path()),
    )
    .unwrap();
    for (_, m) in r.matrices() {
        assert_eq!(m.dim(), (1, 1));
        assert!(m[[0, 0]].abs() <= 1.0 + 1e-12);
    }
    for f in ["img_ots.csv", "img_formula.csv", "ots_formula.csv", "summary.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
}

#[test]
fn within_modality_matrix_is_symmetric_with_unit_diagonal() {
    let (data, _, st) = toy_state(1);
    let feats: Vec<PooledFeature> = data
        .iter()
        .map(|s| optree::features::pool_first_token(&st.model.encode_funcimg(&s.image).unwrap()))
        .collect();
    let m = similarity_matrix(&feats, &feats);
    for i in 0..m.nrows() {
        assert!((m[[i, i]] - 1.0).abs() < 1e-12);
        for j in 0..m.ncols() {
            assert!((m[[i, j]] - m[[j, i]]).abs() < 1e-15);
        }
    }
    let teacher = HashTeacher::new(48, 1);
    let refs: Vec<&Sample> = data.iter().collect();
    let r = similarity_report(&st.model, &refs, &teacher, Pooling::FirstToken, Pooling::Mean, None).unwrap();
    let asym = r
        .img_ots
        .indexed_iter()
        .map(|((i, j), v)| (v - r.img_ots[[j, i]]).abs())
        .fold(0.0, f64::max);
    assert!(asym > 1e-6);
}

#[test]
fn untrained_model_shows_no_alignment() {
    let mut dc = DataConfig::default();
    dc.gen.node_range = [3, 7];
    dc.n_skeletons = 50;
    dc.images_per_skeleton = 1;
    let data = generate_samples(&dc).unwrap();
    let refs: Vec<&Sample> = data.iter().collect();
    let m = Model::new(NetConfig::default()).unwrap();
    let teacher = HashTeacher::new(48, 1);
    let r = similarity_report(&m, &refs, &teacher, Pooling::FirstToken, Pooling::Mean, None).unwrap();
    for (name, mat) in r.matrices() {
        let s = summarize(mat);
        assert!(s.gap().abs() < 0.1, "{name}: {}", s.gap());
    }
}
