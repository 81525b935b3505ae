use ndarray::Array2;
use optree::autodiff::Graph;
use optree::dataset::{generate_samples, DataConfig, Sample};
use optree::features::{FeatureMatrix, Modality};
use optree::gradcheck::{gradcheck_strict, GradCheckConfig};
use optree::loss::loss_total;
use optree::nn::{Activation, Model, NetConfig};
use optree::ots::{tree_to_ots, ConstVec, Ots};
use optree::render::{render_image, FuncImage, MeshGrid};
use optree::teacher::{HashTeacher, Teacher};
use optree::train::{
    batch_items, pretrain_forward, pretrain_step, reduce_parts, shard_forward_backward, teacher_batch,
    TrainConfig, TrainState,
};
use optree::tree::{sample_tree, GenConfig};
use optree::vocab::OperatorVocab;
use optree::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> NetConfig {
    NetConfig {
        d_f: 16,
        heads: 2,
        ..NetConfig::default()
    }
}

fn small() -> Model {
    Model::new(small_config()).unwrap()
}

fn sample(seed: u64) -> (Ots, ConstVec, FuncImage) {
    let cfg = GenConfig::default();
    let vocab = OperatorVocab::standard(1);
    let mut s = seed;
    loop {
        let tree = sample_tree(&cfg, s).unwrap();
        let values: Vec<f64> = (0..tree.n_consts()).map(|i| 0.5 + i as f64 * 0.25).collect();
        let consts = ConstVec::padded(&values, 8).unwrap();
        if let (Ok(ots), Ok(img)) = (
            tree_to_ots(&tree, &vocab, 24),
            render_image(&tree, &consts, &MeshGrid::standard(), 0.001, s),
        ) {
            return (ots, consts, img);
        }
        s += 1000;
    }
}

fn random_cond(rows: usize, width: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = Array2::from_shape_simple_fn((rows, width), || rng.random_range(-1.0..1.0));
    FeatureMatrix::new(v, Modality::Image).unwrap()
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn frob(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Rebuilds the image with one stored value shifted by `delta`.
fn perturb_pixel(img: &FuncImage, index: usize, delta: f32) -> FuncImage {
    let grid = MeshGrid::standard();
    let meta = img.meta(&grid, 0);
    let mut bytes = img.to_f32_bytes();
    let b = &mut bytes[4 * index..4 * index + 4];
    let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) + delta;
    b.copy_from_slice(&v.to_le_bytes());
    FuncImage::from_parts(&meta, &bytes).unwrap()
}

#[test]
fn encoder_shapes() {
    let m = small();
    let (ots, consts, img) = sample(1);
    let hi = m.encode_funcimg(&img).unwrap();
    assert_eq!((hi.n_tokens(), hi.width()), (9, 16));
    let ho = m.encode_ots(&ots, &consts, None).unwrap();
    assert_eq!((ho.n_tokens(), ho.width()), (32, 16));
    let ho = m.encode_ots(&ots, &consts, Some(&hi)).unwrap();
    assert_eq!((ho.n_tokens(), ho.width()), (32, 16));
    let logits = m.decode_ots(&ots, &consts.masked(), &hi).unwrap();
    assert_eq!(logits.dim(), (23, 19));
}

#[test]
fn eval_mode_is_deterministic() {
    let a = small();
    let b = small();
    let (ots, consts, img) = sample(2);
    let hi = a.encode_funcimg(&img).unwrap();
    assert_eq!(hi, b.encode_funcimg(&img).unwrap());
    assert_eq!(
        a.encode_ots(&ots, &consts, Some(&hi)).unwrap(),
        b.encode_ots(&ots, &consts, Some(&hi)).unwrap()
    );
    assert_eq!(
        a.decode_ots(&ots, &consts.masked(), &hi).unwrap(),
        b.decode_ots(&ots, &consts.masked(), &hi).unwrap()
    );
}

#[test]
fn pixel_perturbation_bounded_by_measured_lipschitz() {
    let m = small();
    let (_, _, img) = sample(3);
    let grid = MeshGrid::standard();
    // Round through f32 once so the base image matches the perturbed ones.
    let base_img = FuncImage::from_parts(&img.meta(&grid, 0), &img.to_f32_bytes()).unwrap();
    let base = m.encode_funcimg(&base_img).unwrap().values().clone();
    let n = base_img.values().len();

    let probe = 1e-2f32;
    let mut lip: f64 = 0.0;
    for i in 0..n {
        let p = perturb_pixel(&base_img, i, probe);
        let step = (p.values().iter().nth(i).unwrap() - base_img.values().iter().nth(i).unwrap()).abs();
        let h = m.encode_funcimg(&p).unwrap();
        lip = lip.max(frob(h.values(), &base) / step);
    }
    assert!(lip > 0.0 && lip.is_finite());

    let small_step = 1e-3f32;
    for i in (0..n).step_by(7) {
        let p = perturb_pixel(&base_img, i, small_step);
        let step = (p.values().iter().nth(i).unwrap() - base_img.values().iter().nth(i).unwrap()).abs();
        let h = m.encode_funcimg(&p).unwrap();
        let change = frob(h.values(), &base);
        assert!(change <= 1.05 * lip * step, "pixel {i}: {change} > {lip} * {step}");
    }
}

#[test]
fn absent_and_zero_condition_differ() {
    let m = small();
    let (ots, consts, _) = sample(4);
    let none = m.encode_ots(&ots, &consts, None).unwrap();
    let zero = FeatureMatrix::new(Array2::zeros((9, 16)), Modality::Image).unwrap();
    let with_zero = m.encode_ots(&ots, &consts, Some(&zero)).unwrap();
    assert!(max_abs_diff(none.values(), with_zero.values()) > 1e-6);
}

#[test]
fn condition_width_is_checked() {
    let m = small();
    let (ots, consts, _) = sample(4);
    let wide = random_cond(9, 32, 0);
    assert!(matches!(
        m.encode_ots(&ots, &consts, Some(&wide)),
        Err(Error::CondWidth { got: 32, expected: 16 })
    ));
}

#[test]
fn masked_constants_hide_their_values() {
    let m = small();
    let (ots, _, img) = sample(5);
    let hi = m.encode_funcimg(&img).unwrap();
    let a = ConstVec::padded(&[0.5, -1.0, 2.0], 8).unwrap().masked();
    let b = ConstVec::padded(&[9.0, 3.0, -7.5], 8).unwrap().masked();
    assert_eq!(
        m.encode_ots(&ots, &a, Some(&hi)).unwrap(),
        m.encode_ots(&ots, &b, Some(&hi)).unwrap()
    );
    // Visible constants do reach the output.
    let va = ConstVec::padded(&[0.5, -1.0, 2.0], 8).unwrap();
    let vb = ConstVec::padded(&[9.0, 3.0, -7.5], 8).unwrap();
    assert_ne!(
        m.encode_ots(&ots, &va, Some(&hi)).unwrap(),
        m.encode_ots(&ots, &vb, Some(&hi)).unwrap()
    );
}

#[test]
fn decoder_rejects_visible_constants() {
    let m = small();
    let (ots, consts, img) = sample(6);
    let hi = m.encode_funcimg(&img).unwrap();
    let visible = ConstVec::padded(&[1.0], 8).unwrap();
    assert!(matches!(m.decode_ots(&ots, &visible, &hi), Err(Error::Shape(_))));
    assert!(m.decode_ots(&ots, &consts.masked(), &hi).is_ok());
}

#[test]
fn decoder_is_causal() {
    let m = small();
    let (ots, _, img) = sample(7);
    let hi = m.encode_funcimg(&img).unwrap();
    let prefix: Vec<_> = ots.padded()[..23].to_vec();
    let base = m.decode_prefix(&prefix, &hi).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in [0usize, 3, 10, 21] {
        let mut changed = prefix.clone();
        for t in changed.iter_mut().skip(k + 1) {
            *t = optree::vocab::TokenId(rng.random_range(1..=19));
        }
        let out = m.decode_prefix(&changed, &hi).unwrap();
        for r in 0..=k {
            for c in 0..19 {
                assert_eq!(out[[r, c]], base[[r, c]], "row {r} after editing > {k}");
            }
        }
        assert!(max_abs_diff(&out, &base) > 0.0);
    }
}

#[test]
fn shuffled_condition_changes_logits() {
    let m = small();
    let (ots, consts, _) = sample(8);
    let cond = random_cond(9, 16, 3);
    let mut rows: Vec<usize> = (0..9).collect();
    rows.rotate_left(4);
    let shuffled = FeatureMatrix::new(cond.values().select(ndarray::Axis(0), &rows), Modality::Image).unwrap();
    let a = m.decode_ots(&ots, &consts.masked(), &cond).unwrap();
    let b = m.decode_ots(&ots, &consts.masked(), &shuffled).unwrap();
    assert!(max_abs_diff(&a, &b) > 1e-8);
}

#[test]
fn zero_match_head_gives_zero_logits() {
    let mut m = small();
    for name in ["match.w", "match.b"] {
        let id = m.params.id(name).unwrap();
        m.params.value_mut(id).fill(0.0);
    }
    let h = random_cond(32, 16, 4);
    assert_eq!(m.match_head(&h), [0.0, 0.0]);
}

#[test]
fn match_head_reads_only_token_zero() {
    let m = small();
    let a = random_cond(32, 16, 5);
    let mut bv = random_cond(32, 16, 6).values().clone();
    bv.row_mut(0).assign(&a.values().row(0));
    let b = FeatureMatrix::new(bv, Modality::Ots).unwrap();
    assert_eq!(m.match_head(&a), m.match_head(&b));
}

#[test]
fn match_head_gradient_matches_differences() {
    let m = small();
    let h = random_cond(32, 16, 7).values().clone();
    let weights = ndarray::array![[0.7, -1.3]];
    let loss = |p: &optree::params::ParamStore| {
        let mm = Model::from_params(small_config(), p.clone()).unwrap();
        let mut g = Graph::new(&mm.params);
        let x = g.constant(h.clone());
        let z = mm.match_graph(&mut g, x);
        let w = g.constant(weights.clone());
        let zw = g.mul(z, w);
        let l = g.sum_all(zw);
        (g.scalar(l), g.backward(l).params)
    };
    let (_, grads) = loss(&m.params);
    let mut params = m.params.clone();
    for slot in 0..params.len() {
        let keep = params.slot(slot).name.starts_with("match.");
        params.set_trainable(slot, keep);
    }
    let r = gradcheck_strict(
        &mut params,
        &grads,
        |p| Ok(loss(p).0),
        &GradCheckConfig {
            n_coords: 34,
            step: 1e-5,
            floor: 1e-8,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(r.worst() < 1e-4, "{}", r.worst());
    assert_eq!(r.coords.len(), 34);
}

#[test]
fn identity_embedder_copies_rows() {
    let mut m = Model::new(NetConfig {
        teacher_width: 16,
        embedder_hidden: 16,
        embedder_activation: Activation::Identity,
        ..small_config()
    })
    .unwrap();
    m.set_embedder_identity().unwrap();
    let th = random_cond(5, 16, 8).values().clone();
    let out = m.teacher_embedder(&th).unwrap();
    assert_eq!(out.values(), &th);
    // Non-square layouts cannot be identity.
    assert!(small().set_embedder_identity().is_err());
}

#[test]
fn embedder_is_row_wise() {
    let m = small();
    let th = random_cond(6, 48, 9).values().clone();
    let perm = [3usize, 0, 5, 1, 4, 2];
    let permuted = th.select(ndarray::Axis(0), &perm);
    let a = m.teacher_embedder(&th).unwrap();
    let b = m.teacher_embedder(&permuted).unwrap();
    for (r, &p) in perm.iter().enumerate() {
        for c in 0..16 {
            assert!((b.values()[[r, c]] - a.values()[[p, c]]).abs() < 1e-14);
        }
    }
}

#[test]
fn embedder_parameter_count() {
    for (dm, w, df) in [(48usize, 64usize, 16usize), (10, 3, 8), (32, 32, 32)] {
        let m = Model::new(NetConfig {
            d_f: df,
            heads: 2,
            teacher_width: dm,
            embedder_hidden: w,
            ..NetConfig::default()
        })
        .unwrap();
        assert_eq!(m.embedder_param_count(), dm * w + w * df + w + df);
    }
}

#[test]
fn embedder_rejects_wrong_width() {
    let m = small();
    assert!(matches!(m.teacher_embedder(&Array2::zeros((3, 47))), Err(Error::Shape(_))));
}

fn toy_data(n: usize) -> Vec<Sample> {
    let mut dc = DataConfig::default();
    dc.gen.node_range = [3, 7];
    dc.n_skeletons = n;
    dc.images_per_skeleton = 1;
    generate_samples(&dc).unwrap()
}

fn toy_train() -> TrainConfig {
    TrainConfig {
        queue_capacity: 8,
        n_neg: 4,
        detach_keys: false,
        ..TrainConfig::default()
    }
}

#[test]
fn pretrain_loss_gradient_matches_differences() {
    let data = toy_data(4);
    let cfg = small_config();
    let teacher = HashTeacher::new(cfg.teacher_width, 1);
    let tc = toy_train();
    let st = TrainState::new(Model::new(cfg.clone()).unwrap(), &tc).unwrap();
    let batch: Vec<&Sample> = data.iter().collect();
    let (plan, out) = pretrain_forward(&st, &batch, &teacher, &tc).unwrap();
    let hidden = teacher_batch(&teacher, &batch).unwrap();
    let grads = out.grads.unwrap();
    let mut params = st.model.params.clone();
    let n = batch.len();
    let r = gradcheck_strict(
        &mut params,
        &grads,
        |p| {
            let m = Model::from_params(cfg.clone(), p.clone())?;
            let items = batch_items(&batch, &hidden, &plan);
            let o = shard_forward_backward(&m, &items, &plan, &tc, n, false)?;
            Ok(loss_total(&reduce_parts(&[o.sums], n), &tc.weights))
        },
        &GradCheckConfig {
            n_coords: 200,
            step: 1e-4,
            floor: 1e-6,
            tolerance: 1e-4,
            seed: 3,
        },
    )
    .unwrap();
    assert_eq!(r.coords.len(), 200);
    assert!(r.worst() < 1e-4);
}

#[test]
fn corrupted_pretrain_gradient_is_reported() {
    let data = toy_data(4);
    let cfg = small_config();
    let teacher = HashTeacher::new(cfg.teacher_width, 1);
    let tc = toy_train();
    let st = TrainState::new(Model::new(cfg.clone()).unwrap(), &tc).unwrap();
    let batch: Vec<&Sample> = data.iter().collect();
    let (plan, out) = pretrain_forward(&st, &batch, &teacher, &tc).unwrap();
    let hidden = teacher_batch(&teacher, &batch).unwrap();
    let mut grads = out.grads.unwrap();
    let id = st.model.params.id("match.b").unwrap();
    grads[id].as_mut().unwrap()[[0, 0]] += 1.0;
    let mut params = st.model.params.clone();
    for slot in 0..params.len() {
        params.set_trainable(slot, slot == id);
    }
    let n = batch.len();
    let r = gradcheck_strict(
        &mut params,
        &grads,
        |p| {
            let m = Model::from_params(cfg.clone(), p.clone())?;
            let items = batch_items(&batch, &hidden, &plan);
            let o = shard_forward_backward(&m, &items, &plan, &tc, n, false)?;
            Ok(loss_total(&reduce_parts(&[o.sums], n), &tc.weights))
        },
        &GradCheckConfig {
            n_coords: 2,
            step: 1e-4,
            floor: 1e-6,
            ..Default::default()
        },
    );
    match r {
        Err(Error::GradCheckFailure(t)) => assert_eq!(t, vec!["match.b".to_string()]),
        other => panic!("expected failure, got {other:?}"),
    }
}

#[test]
fn decoder_shares_encoder_storage() {
    let m = small();
    let aliases = m.params.aliases();
    assert!(!aliases.is_empty());
    for (alias, target) in &aliases {
        assert!(alias.starts_with("ots_dec.") && target.starts_with("ots_enc."));
        assert_eq!(m.params.id(alias).unwrap(), m.params.id(target).unwrap());
    }

    let (ots, consts, img) = sample(9);
    let hi = m.encode_funcimg(&img).unwrap();
    let before = m.decode_ots(&ots, &consts.masked(), &hi).unwrap();
    let edit = |name: &str| {
        let mut e = m.clone();
        let id = e.params.id(name).unwrap();
        e.params.value_mut(id).mapv_inplace(|v| v * 1.5 + 0.01);
        e.decode_ots(&ots, &consts.masked(), &hi).unwrap()
    };
    let via_enc = edit("ots_enc.block0.attn.wq");
    let via_dec = edit("ots_dec.block0.attn.wq");
    assert!(max_abs_diff(&before, &via_enc) > 1e-8);
    assert_eq!(via_enc, via_dec);
}

#[test]
fn teacher_is_untouched_by_training() {
    let data = toy_data(8);
    let cfg = small_config();
    let teacher = HashTeacher::new(cfg.teacher_width, 1);
    let before: Vec<Array2<f64>> = data.iter().map(|s| teacher.extract(&s.formula).unwrap().values).collect();
    let tc = TrainConfig {
        queue_capacity: 8,
        n_neg: 4,
        ..TrainConfig::default()
    };
    let mut st = TrainState::new(Model::new(cfg).unwrap(), &tc).unwrap();
    let schedule = tc.schedule(data.len());
    let batch: Vec<&Sample> = data.iter().take(4).collect();
    for _ in 0..3 {
        pretrain_step(&mut st, &batch, &teacher, &tc, &schedule).unwrap();
    }
    // The student holds no teacher tensors; only the adapter trains.
    assert!(st.model.params.slots().iter().all(|s| !s.name.starts_with("teacher")));
    for (s, b) in data.iter().zip(&before) {
        let after = teacher.extract(&s.formula).unwrap().values;
        assert!(after.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
