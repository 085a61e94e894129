use put_core::io::metrics::token_metrics;
use put_core::io::{toy_corpus, ConditionSet, Image, Mask, SemanticMap};
use put_core::pvqvae::{PVqVae, PvqvaeConfig};
use put_core::rng::stream;
use put_core::sampler::{PutModels, SamplingSession, K1};
use put_core::transformer::{
    load_transformer, nll_loss, random_quantize_inputs, save_transformer, substitute_unknown_categories, target_tokens,
    transformer_loss, ConditionEncoders, ConditionFeatures, TransformerConfig, TransformerSample,
    TransformerTrainConfig, TransformerTrainer, UqTransformer,
};
use put_tensor::gradcheck::check;
use put_tensor::{LrSchedule, Parallelism, Real, Tape, Tensor};
use rand::Rng;

mod common;

use common::{distinct, lift, seeded_pvqvae};

fn random_features(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = stream(seed, &[]);
    Tensor::from_fn([rows, cols], |_| rng.random_range(-1.0..1.0))
}

#[test]
fn blend_matches_convex_combination() {
    let model = UqTransformer::new(TransformerConfig::toy(), 1).unwrap();
    let ids = model.embedding_params();
    let cfg = model.config().clone();
    let mut rng = stream(2, &[]);
    let pool = [0.0f32, 0.25, 0.5, 1.0];
    let ratios: Vec<f32> = (0..cfg.cells()).map(|_| pool[rng.random_range(0..4)]).collect();
    let features = random_features(cfg.cells(), cfg.feature_dim, 3);

    let mut tape = Tape::new();
    let bound = tape.bind(model.params(), false);
    let f = tape.constant(features.clone());
    let blended = model.embed_input(&mut tape, &bound, f, &ratios).unwrap();
    let projected = tape.linear(f, bound[ids.proj_w], Some(bound[ids.proj_b])).unwrap();
    let (blended, projected) = (tape.value(blended).clone(), tape.value(projected).clone());

    let w = model.params().get(ids.proj_w);
    let b = model.params().get(ids.proj_b);
    let fm = model.params().get(ids.mask);
    let fp = model.params().get(ids.pos);
    let dp = cfg.input_dim;
    for c in 0..cfg.cells() {
        let m = f64::from(ratios[c]);
        for j in 0..dp {
            // Projection against an f64 matrix product.
            let mut acc = f64::from(b.data()[j]);
            for k in 0..cfg.feature_dim {
                acc += f64::from(features.data()[c * cfg.feature_dim + k]) * f64::from(w.data()[k * dp + j]);
            }
            let p = f64::from(projected.data()[c * dp + j]);
            assert!((p - acc).abs() < 1e-5, "projection {p} vs {acc}");
            let want = m * p + (1.0 - m) * f64::from(fm.data()[j]) + f64::from(fp.data()[c * dp + j]);
            let got = f64::from(blended.data()[c * dp + j]);
            assert!((got - want).abs() < 1e-6, "cell {c} col {j}: {got} vs {want}");
        }
    }
}

#[test]
fn condition_concat_places_blocks() {
    let cfg = TransformerConfig::toy_conditioned();
    let model = UqTransformer::new(cfg.clone(), 4).unwrap();
    let ids = model.embedding_params();
    let d = cfg.condition_dim;
    let sem = random_features(cfg.cells(), d, 5);
    let mut tape = Tape::new();
    let bound = tape.bind(model.params(), false);
    let emb = tape.constant(random_features(cfg.cells(), cfg.input_dim, 6));
    let s = tape.constant(sem.clone());
    let out = model.concat_conditions(&mut tape, &bound, emb, Some(s), None).unwrap();
    let out = tape.value(out).clone();
    let emb = tape.value(emb).clone();
    assert_eq!(out.shape(), &[cfg.cells(), cfg.hidden_dim]);
    let ph = model.params().get(ids.ph_str.unwrap());
    for c in 0..cfg.cells() {
        let row = out.row(c);
        assert_eq!(&row[..cfg.input_dim], emb.row(c));
        assert_eq!(&row[cfg.input_dim..cfg.input_dim + d], sem.row(c));
        assert_eq!(&row[cfg.input_dim + d..], ph.data());
    }
}

#[test]
fn unconditioned_model_has_no_placeholders() {
    let model = UqTransformer::new(TransformerConfig::toy(), 0).unwrap();
    assert!(model.embedding_params().ph_sem.is_none());
    let mut tape = Tape::new();
    let bound = tape.bind(model.params(), false);
    let emb = tape.constant(Tensor::zeros([64, 64]));
    assert!(model.concat_conditions(&mut tape, &bound, emb, None, None).is_err());
}

#[test]
fn probability_rows_sum_to_one() {
    for cfg in [TransformerConfig::toy(), TransformerConfig::toy_conditioned()] {
        let model = UqTransformer::new(cfg.clone(), 7).unwrap();
        let features = random_features(cfg.cells(), cfg.feature_dim, 8);
        let ratios: Vec<f32> = (0..cfg.cells()).map(|i| if i % 3 == 0 { 0.5 } else { 1.0 }).collect();
        let p = model.probabilities(&features, &ratios, &ConditionFeatures::none()).unwrap();
        assert_eq!(p.shape(), &[cfg.cells(), cfg.vocab]);
        for c in 0..cfg.cells() {
            let s: f64 = p.row(c).iter().map(|&v| f64::from(v)).sum();
            assert!((s - 1.0).abs() < 1e-5, "row {c} sums to {s}");
        }
    }
}

#[test]
fn depth_zero_is_linear_softmax() {
    let cfg = TransformerConfig {
        depth: 0,
        ..TransformerConfig::toy()
    };
    let model = UqTransformer::new(cfg.clone(), 9).unwrap();
    let features = random_features(cfg.cells(), cfg.feature_dim, 10);
    let ratios = vec![1.0; cfg.cells()];
    let p = model.probabilities(&features, &ratios, &ConditionFeatures::none()).unwrap();

    let ids = model.embedding_params();
    let (hw, hb) = model.head_params();
    let get = |id| model.params().get(id).data().iter().map(|&v| f64::from(v)).collect::<Vec<f64>>();
    let (pw, pb, pos, hw, hb) = (get(ids.proj_w), get(ids.proj_b), get(ids.pos), get(hw), get(hb));
    let (d, dp, k) = (cfg.feature_dim, cfg.input_dim, cfg.vocab);
    for c in 0..cfg.cells() {
        let x: Vec<f64> = (0..dp)
            .map(|j| pb[j] + pos[c * dp + j] + (0..d).map(|i| f64::from(features.row(c)[i]) * pw[i * dp + j]).sum::<f64>())
            .collect();
        let logits: Vec<f64> = (0..k).map(|t| hb[t] + (0..dp).map(|j| x[j] * hw[j * k + t]).sum::<f64>()).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for t in 0..k {
            let want = (logits[t] - max).exp() / z;
            assert!((f64::from(p.row(c)[t]) - want).abs() < 1e-5);
        }
    }
}

#[test]
fn output_depends_on_cell_position() {
    let cfg = TransformerConfig::toy();
    let model = UqTransformer::new(cfg.clone(), 11).unwrap();
    let features = random_features(cfg.cells(), cfg.feature_dim, 12);
    let ratios = vec![1.0; cfg.cells()];
    let p = model.probabilities(&features, &ratios, &ConditionFeatures::none()).unwrap();
    let mut swapped = features.clone();
    let d = cfg.feature_dim;
    let (a, b) = (features.row(3).to_vec(), features.row(40).to_vec());
    swapped.data_mut()[3 * d..4 * d].copy_from_slice(&b);
    swapped.data_mut()[40 * d..41 * d].copy_from_slice(&a);
    let q = model.probabilities(&swapped, &ratios, &ConditionFeatures::none()).unwrap();
    assert_ne!(p.row(3), q.row(40));
    assert_ne!(p.row(40), q.row(3));
}

#[test]
fn uniform_logits_give_log_k() {
    let k = 128;
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::zeros([64, k]));
    let targets: Vec<usize> = (0..64).map(|i| i * 7 % k).collect();
    let cells: Vec<usize> = (0..64).step_by(3).collect();
    let loss = transformer_loss(&mut tape, logits, &targets, &cells).unwrap();
    assert!((loss.value - (k as f64).ln()).abs() < 1e-12);
    assert!(!loss.empty);
}

#[test]
fn empty_cell_set_is_flagged_zero() {
    let mut tape = Tape::<f32>::new();
    let logits = tape.constant(Tensor::zeros([4, 3]));
    let loss = transformer_loss(&mut tape, logits, &[0, 1, 2, 0], &[]).unwrap();
    assert!(loss.empty);
    assert_eq!(loss.value, 0.0);
}

#[test]
fn loss_rejects_bad_targets() {
    let mut tape = Tape::<f32>::new();
    let logits = tape.constant(Tensor::zeros([2, 3]));
    assert!(transformer_loss(&mut tape, logits, &[0, 3], &[1]).is_err());
    assert!(transformer_loss(&mut tape, logits, &[0, 1], &[2]).is_err());
}

#[test]
fn nll_on_probabilities_matches_loss() {
    let logits = random_features(10, 6, 13);
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let p = tape.softmax(l).unwrap();
    let targets = [0, 1, 2, 3, 4, 5, 0, 1, 2, 3];
    let cells = [1, 4, 7, 9];
    let loss = transformer_loss(&mut tape, l, &targets, &cells).unwrap();
    let (nll, empty) = nll_loss(tape.value(p), &targets, &cells).unwrap();
    assert!(!empty);
    assert!((nll - f64::from(loss.value)).abs() < 1e-5);
}

fn token_loss_gradients<T: Real>(tol: f64, floor: f64) {
    let mut rng = stream(14, &[]);
    let logits: Tensor<T> = Tensor::from_fn([12, 7], |_| T::from_f64c(rng.random_range(-2.0..2.0)));
    let targets: Vec<usize> = (0..12).map(|i| (i * 5) % 7).collect();
    let cells = [0usize, 2, 3, 7, 11];
    let report = check(&[logits], 1e-3, floor, |t, v| {
        Ok(lift(transformer_loss(t, v[0], &targets, &cells))?.total)
    })
    .unwrap();
    assert!(report.max_rel_error < tol, "{report:?}");
}

#[test]
fn transformer_loss_gradients_f64() {
    token_loss_gradients::<f64>(1e-4, 1e-3);
}

#[test]
fn transformer_loss_gradients_f32() {
    token_loss_gradients::<f32>(1e-2, 1e-1);
}

#[test]
fn random_quantization_rate() {
    let f = Tensor::zeros([64, 4]);
    let q = Tensor::ones([64, 4]);
    let mut rng = stream(15, &[]);
    let (mut hits, mut total) = (0usize, 0usize);
    for _ in 0..500 {
        let (out, replaced) = random_quantize_inputs(&f, &q, 0.3, &mut rng).unwrap();
        for (r, &hit) in replaced.iter().enumerate() {
            assert_eq!(out.row(r)[0] == 1.0, hit);
        }
        hits += replaced.iter().filter(|&&h| h).count();
        total += replaced.len();
    }
    let rate = hits as f64 / total as f64;
    assert!((rate - 0.3).abs() < 0.02, "rate {rate}");
}

#[test]
fn unknown_substitution_count_is_uniform() {
    // Three known categories and four free unknown ids: n uniform over 0..=3.
    let map = SemanticMap::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
    let mut rng = stream(16, &[]);
    let mut hist = [0usize; 4];
    let draws = 8000;
    for _ in 0..draws {
        let (out, pairs) = substitute_unknown_categories(&map, 5, 4, &mut rng).unwrap();
        hist[pairs.len()] += 1;
        let targets: std::collections::BTreeSet<u16> = pairs.iter().map(|p| p.1).collect();
        assert_eq!(targets.len(), pairs.len());
        for (i, &id) in map.ids.iter().enumerate() {
            match pairs.iter().find(|p| p.0 == id) {
                Some(&(_, to)) => assert!(out.ids[i] == to && (5..9).contains(&to)),
                None => assert_eq!(out.ids[i], id),
            }
        }
    }
    for (n, &count) in hist.iter().enumerate() {
        let freq = count as f64 / draws as f64;
        assert!((freq - 0.25).abs() < 0.02, "n = {n}: {freq}");
    }
}

fn tiny_pair(seed: u64) -> (PVqVae, UqTransformer) {
    let p = PVqVae::new(PvqvaeConfig::toy(), seed).unwrap();
    let t = UqTransformer::new(TransformerConfig::toy().for_pvqvae(p.config()), seed).unwrap();
    (p, t)
}

fn short_schedule(config: &mut TransformerTrainConfig, total: u64) {
    config.lr = LrSchedule {
        warmup_steps: total / 10,
        total_steps: total,
        ..LrSchedule::transformer(total)
    };
}

#[test]
fn training_leaves_pvqvae_frozen() {
    let (pvqvae, mut model) = tiny_pair(17);
    let before = (pvqvae.fingerprint(), model.fingerprint());
    let mut tc = TransformerTrainConfig::new(20, 17);
    short_schedule(&mut tc, 20);
    let mut trainer = TransformerTrainer::new(tc);
    let batch: Vec<_> = toy_corpus(2, 32, 32, 17).into_iter().map(|s| TransformerSample::new(s.image)).collect();
    for _ in 0..3 {
        trainer.train_step(&mut model, &pvqvae, None, &batch).unwrap();
    }
    assert_eq!(pvqvae.fingerprint(), before.0);
    assert_ne!(model.fingerprint(), before.1);
}

#[test]
fn parallel_and_sequential_transformer_steps_agree() {
    let batch: Vec<_> = toy_corpus(3, 32, 32, 18).into_iter().map(|s| TransformerSample::new(s.image)).collect();
    let run = |mode| {
        let (pvqvae, mut model) = tiny_pair(18);
        let mut tc = TransformerTrainConfig::new(10, 18);
        tc.parallelism = mode;
        short_schedule(&mut tc, 10);
        let mut trainer = TransformerTrainer::new(tc);
        let recs: Vec<_> = (0..3).map(|_| trainer.train_step(&mut model, &pvqvae, None, &batch).unwrap()).collect();
        (model.fingerprint(), recs)
    };
    assert_eq!(run(Parallelism::Sequential), run(Parallelism::Parallel));
}

#[test]
fn fully_kept_sample_contributes_no_loss() {
    let (pvqvae, mut model) = tiny_pair(19);
    let mut trainer = TransformerTrainer::new(TransformerTrainConfig::new(10, 19));
    let img = toy_corpus(1, 32, 32, 19).remove(0).image;
    let batch = [TransformerSample::new(img).with_mask(Mask::full(32, 32))];
    let before = model.fingerprint();
    let rec = trainer.train_step(&mut model, &pvqvae, None, &batch).unwrap();
    assert_eq!((rec.empty, rec.masked_cells, rec.loss), (1, 0, 0.0));
    assert_eq!(model.fingerprint(), before);
}

#[test]
fn condition_dropout_frequency() {
    let pcfg = PvqvaeConfig::toy();
    let pvqvae = PVqVae::new(pcfg.clone(), 20).unwrap();
    let tcfg = TransformerConfig::toy_conditioned().for_pvqvae(&pcfg);
    let model = UqTransformer::new(tcfg.clone(), 20).unwrap();
    let encoders = ConditionEncoders::new(&pcfg, &tcfg, 20).unwrap();
    let toy = toy_corpus(1, 32, 32, 20).remove(0);
    let sample = TransformerSample::new(toy.image).with_conditions(ConditionSet {
        semantic: Some(toy.semantic),
        sketch: Some(toy.sketch),
    });
    let trainer = TransformerTrainer::new(TransformerTrainConfig::new(10, 20));
    let n = 1500;
    let mut dropped = [0usize; 2];
    for i in 0..n {
        let prep = trainer.prepare(&model, &pvqvae, Some(&encoders), &sample, i).unwrap();
        for k in 0..2 {
            dropped[k] += usize::from(prep.dropped[k]);
        }
        assert_eq!(prep.conditions.semantic.is_none(), prep.dropped[0]);
        assert_eq!(prep.conditions.sketch.is_none(), prep.dropped[1]);
    }
    for d in dropped {
        let rate = d as f64 / n as f64;
        assert!((rate - 0.3).abs() < 0.04, "drop rate {rate}");
    }
}

#[test]
fn checkpoint_round_trip_with_encoders() {
    let dir = tempfile::tempdir().unwrap();
    let pcfg = PvqvaeConfig::toy();
    let tcfg = TransformerConfig::toy_conditioned().for_pvqvae(&pcfg);
    let model = UqTransformer::new(tcfg.clone(), 21).unwrap();
    let encoders = ConditionEncoders::new(&pcfg, &tcfg, 21).unwrap();
    let trainer = TransformerTrainer::new(TransformerTrainConfig::new(10, 21));
    let path = dir.path().join("t.ckpt");
    save_transformer(&path, &model, Some(&encoders), Some(&trainer)).unwrap();
    let (back, enc, _) = load_transformer(&path).unwrap();
    assert_eq!(back.fingerprint(), model.fingerprint());
    let enc = enc.unwrap();
    assert_eq!(enc.semantic.fingerprint(), encoders.semantic.fingerprint());
    assert_eq!(enc.classes(), 12);
}

#[test]
fn mismatched_pvqvae_is_rejected() {
    let pvqvae = PVqVae::new(PvqvaeConfig::toy(), 22).unwrap();
    let cfg = TransformerConfig {
        vocab: 64,
        ..TransformerConfig::toy()
    };
    let mut model = UqTransformer::new(cfg, 22).unwrap();
    let mut trainer = TransformerTrainer::new(TransformerTrainConfig::new(10, 22));
    let batch = [TransformerSample::new(Image::filled(32, 32, 3, 0.5))];
    let err = trainer.train_step(&mut model, &pvqvae, None, &batch).unwrap_err();
    assert_eq!(err.kind(), "config-mismatch");
}

#[test]
fn overfits_a_single_masked_image() {
    let image = toy_corpus(1, 32, 32, 23).remove(0).image;
    let pvqvae = seeded_pvqvae(&image, 23);
    let mut model = UqTransformer::new(TransformerConfig::toy(), 23).unwrap();
    let mask = Mask::from_fn(32, 32, |_, x| x >= 16);
    let mut tc = TransformerTrainConfig::new(500, 23);
    short_schedule(&mut tc, 500);
    tc.batch_size = 1;
    let mut trainer = TransformerTrainer::new(tc);
    let batch = [TransformerSample::new(image.clone()).with_mask(mask.clone())];
    let mut loss = f32::INFINITY;
    for _ in 0..500 {
        loss = trainer.train_step(&mut model, &pvqvae, None, &batch).unwrap().loss;
        if loss < 0.1 {
            break;
        }
    }
    assert!(loss < 0.1, "loss {loss}");

    let targets = target_tokens(&pvqvae, &image).unwrap();
    let mi = pvqvae.mask_image(&image, &mask).unwrap();
    let cells = mi.masked_cells();
    assert_eq!(cells.len(), 32);
    assert!(distinct(cells.iter().map(|&c| targets[c])) >= 4);
    let f = pvqvae.encode_masked(&mi).unwrap();
    let probs = model.probabilities(&f, mi.cell_ratios(), &ConditionFeatures::none()).unwrap();
    let acc = token_metrics(&probs, &targets, &cells).unwrap().acc_at_max_prob;
    assert!(acc > 0.9, "acc@maxprob {acc}");

    let models = PutModels::new(pvqvae, model, None).unwrap();
    let mut session = SamplingSession::for_sample(&models, &image, &mask, &ConditionSet::none(), 0, 0).unwrap();
    session.run(&models, K1::Top(20), 1).unwrap();
    let hits = cells.iter().filter(|&&c| session.grid().tokens[c] == targets[c]).count();
    assert!(hits as f64 / cells.len() as f64 > 0.9, "{hits}/{}", cells.len());
}
