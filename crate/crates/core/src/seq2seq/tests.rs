use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{gen_synthetic, LanguageId, ParallelCorpus, Sentence, SyntheticParams};
use crate::nn::{finite_diff_check, Tensor2};

fn ids(n: usize) -> Vec<LanguageId> {
    (0..n).map(|i| LanguageId::new(format!("l{i}")).unwrap()).collect()
}

fn config(langs: usize, vocab: usize, variant: EncoderVariant, nhid: usize, depth: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        languages: ids(langs),
        vocab_sizes: vec![vocab; langs],
        encoder: EncoderConfig { variant, depth, nhid, emb_dim: 4, dropout_p: 0.2 },
        decoder: DecoderConfig { depth, nhid: nhid + 1, dropout_p: 0.2 },
        seed,
    }
}

fn random_corpus(langs: usize, rows: usize, vocab: u32, seed: u64) -> ParallelCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let columns = (0..langs)
        .map(|_| {
            (0..rows)
                .map(|_| {
                    let n = rng.gen_range(1..=5);
                    Sentence { tokens: (0..n).map(|_| rng.gen_range(0..vocab)).collect(), text: String::new() }
                })
                .collect()
        })
        .collect();
    ParallelCorpus::new(ids(langs), columns).unwrap()
}

fn path(src: &[usize], tgt: &[usize]) -> TrainingPath {
    let l = ids(4);
    TrainingPath::new(src.iter().map(|&i| l[i].clone()).collect(), tgt.iter().map(|&i| l[i].clone()).collect()).unwrap()
}

#[test]
fn representation_dimension_follows_variant() {
    let mut c = config(3, 10, EncoderVariant::BidirectionalMaxpool, 512, 1, 0);
    c.encoder.emb_dim = 8;
    c.decoder.nhid = 4;
    let m = init_model::<f32>(c.clone()).unwrap();
    assert_eq!(m.repr_dim(), 1024);
    c.encoder.variant = EncoderVariant::StackedLastState;
    assert_eq!(init_model::<f32>(c).unwrap().repr_dim(), 512);
}

#[test]
fn init_is_deterministic_and_seed_sensitive() {
    let c = config(3, 10, EncoderVariant::BidirectionalMaxpool, 3, 2, 42);
    let a = init_model::<f32>(c.clone()).unwrap();
    assert_eq!(a, init_model::<f32>(c.clone()).unwrap());
    let mut c2 = c;
    c2.seed = 43;
    assert_ne!(a.flatten(), init_model::<f32>(c2).unwrap().flatten());
}

#[test]
fn inconsistent_configs_rejected() {
    let mut c = config(3, 10, EncoderVariant::StackedLastState, 3, 1, 0);
    c.vocab_sizes.pop();
    assert!(init_model::<f32>(c).is_err());
    let c = config(1, 10, EncoderVariant::StackedLastState, 3, 1, 0);
    assert!(init_model::<f32>(c).is_err());
    let mut c = config(2, 10, EncoderVariant::StackedLastState, 3, 1, 0);
    c.encoder.dropout_p = 1.0;
    assert!(init_model::<f32>(c).is_err());
    let mut c = config(2, 10, EncoderVariant::StackedLastState, 3, 1, 0);
    c.languages[1] = c.languages[0].clone();
    assert!(init_model::<f32>(c).is_err());
}

#[test]
fn encode_is_fixed_size_and_repeatable() {
    for variant in [EncoderVariant::StackedLastState, EncoderVariant::BidirectionalMaxpool] {
        let m = init_model::<f32>(config(2, 50, variant, 6, 2, 1)).unwrap();
        let l = &ids(2)[0];
        let short: Vec<u32> = (0..3).collect();
        let long: Vec<u32> = (0..40).map(|i| i % 50).collect();
        let a = encode(&m, &short, l).unwrap();
        let b = encode(&m, &long, l).unwrap();
        assert_eq!(a.dim(), m.repr_dim());
        assert_eq!(b.dim(), m.repr_dim());
        assert_eq!(a, encode(&m, &short, l).unwrap());
    }
}

#[test]
fn encode_errors() {
    let m = init_model::<f32>(config(2, 10, EncoderVariant::StackedLastState, 3, 1, 1)).unwrap();
    assert!(matches!(encode(&m, &[], &ids(2)[0]), Err(crate::Error::EmptySentence)));
    let xx = LanguageId::new("xx").unwrap();
    assert!(matches!(encode(&m, &[1], &xx), Err(crate::Error::UnknownLanguage(_))));
    assert!(encode(&m, &[10], &ids(2)[0]).is_err());
}

#[test]
fn batch_encoding_matches_single() {
    for variant in [EncoderVariant::StackedLastState, EncoderVariant::BidirectionalMaxpool] {
        let m = init_model::<f32>(config(2, 30, variant, 5, 2, 3)).unwrap();
        let corpus = random_corpus(2, 12, 30, 9);
        let l = &ids(2)[1];
        let sents: Vec<&[u32]> = corpus.column(l).unwrap().iter().map(|s| s.tokens.as_slice()).collect();
        let batch = encode_batch(&m, &sents, l).unwrap();
        for (b, s) in sents.iter().enumerate() {
            let single = encode(&m, s, l).unwrap();
            for (x, y) in batch.row(b).iter().zip(&single.values) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}

fn emb(v: &[f64]) -> SentenceEmbedding<f64> {
    SentenceEmbedding { values: v.to_vec(), language: ids(1)[0].clone(), unit_norm: false }
}

#[test]
fn combine_avg_examples() {
    let v = emb(&[0.3, -1.5, 2.0]);
    assert_eq!(combine_avg(&[v.clone(), v.clone()]).unwrap().values, v.values);
    assert_eq!(combine_avg(std::slice::from_ref(&v)).unwrap(), v);
    let c = combine_avg(&[emb(&[1.0, 0.0]), emb(&[0.0, 1.0])]).unwrap();
    assert_eq!(c.values, vec![0.5, 0.5]);
    assert_eq!(c.language.as_str(), "mixed");
    let w = emb(&[1.0, 1.0, 1.0]);
    let k = 4;
    let mut list = vec![v.clone(); k];
    list.push(w.clone());
    let got = combine_avg(&list).unwrap();
    for j in 0..3 {
        let want = (k as f64 * v.values[j] + w.values[j]) / (k as f64 + 1.0);
        assert!((got.values[j] - want).abs() < 1e-12);
    }
    assert!(combine_avg::<f64>(&[]).is_err());
    assert!(combine_avg(&[emb(&[1.0]), emb(&[1.0, 2.0])]).is_err());
}

#[test]
fn normalized_embedding_has_unit_norm() {
    let e = emb(&[3.0, 4.0]).normalized();
    assert!(e.unit_norm);
    assert!((e.norm() - 1.0).abs() < 1e-6);
}

#[test]
fn zero_output_projection_gives_uniform_loss() {
    let mut m = init_model::<f64>(config(2, 9, EncoderVariant::BidirectionalMaxpool, 3, 1, 5)).unwrap();
    m.decoders[1].out_w.fill(0.0);
    m.decoders[1].out_b.fill(0.0);
    let v = (0..m.repr_dim()).map(|i| i as f64 - 1.0).collect::<Vec<_>>();
    let out = decode_nll(&m, &emb(&v), &[1, 2, 3], &ids(2)[1]).unwrap();
    assert!((out.loss - (11f64).ln()).abs() < 1e-12);
}

#[test]
fn decode_nll_overfits_one_example() {
    let mut m = init_model::<f64>(config(2, 12, EncoderVariant::StackedLastState, 4, 1, 6)).unwrap();
    let target = [3, 1, 4, 1, 5];
    let lang = ids(2)[1].clone();
    let e = emb(&[0.1, -0.2, 0.3, 0.05]);
    let first = decode_nll(&m, &e, &target, &lang).unwrap().loss;
    let mut last = first;
    for _ in 0..100 {
        let out = decode_nll(&m, &e, &target, &lang).unwrap();
        last = out.loss;
        let (mut p, g) = out.grads.pair_with(&mut m);
        crate::nn::clip_and_sgd_step(&mut p, &g, 0.5, 5.0).unwrap();
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn decode_nll_embedding_gradient_matches_finite_differences() {
    let m = init_model::<f64>(config(2, 7, EncoderVariant::BidirectionalMaxpool, 2, 2, 8)).unwrap();
    let target = [1, 6, 0, 2];
    let lang = ids(2)[0].clone();
    let v: Vec<f64> = (0..m.repr_dim()).map(|i| 0.3 * (i as f64).sin()).collect();
    let err = finite_diff_check(
        |x| {
            let out = decode_nll(&m, &emb(x), &target, &lang).unwrap();
            (out.loss, out.d_embedding)
        },
        &v,
        1e-5,
        usize::MAX,
        0,
    );
    assert!(err < 1e-4, "{err}");
}

fn model_gradcheck(variant: EncoderVariant, nhid: usize, depth: usize, seed: u64, p: &TrainingPath) -> f64 {
    let model = init_model::<f64>(config(4, 6, variant, nhid, depth, seed)).unwrap();
    let corpus = random_corpus(4, 3, 6, seed + 100);
    let rows = [0, 1, 2];
    let theta = model.flatten();
    let mut work = model.clone();
    finite_diff_check(
        |x| {
            work.load_flat(x);
            let out = path_loss(&work, p, &corpus, &rows, None, true).unwrap();
            let g = out.grads.unwrap().flatten(&work);
            (out.loss, g)
        },
        &theta,
        1e-5,
        400,
        seed,
    )
}

#[test]
fn whole_model_gradients_match_finite_differences() {
    for variant in [EncoderVariant::StackedLastState, EncoderVariant::BidirectionalMaxpool] {
        for (nhid, depth) in [(2, 1), (3, 2)] {
            for p in [path(&[0], &[1, 2]), path(&[0, 2], &[3])] {
                let err = model_gradcheck(variant, nhid, depth, 11, &p);
                assert!(err < 1e-4, "{variant:?} nhid={nhid} depth={depth} {p}: {err}");
            }
        }
    }
}

#[test]
fn one_to_one_step_touches_only_its_components() {
    let mut m = init_model::<f32>(config(4, 8, EncoderVariant::BidirectionalMaxpool, 3, 1, 2)).unwrap();
    let before = m.clone();
    let corpus = random_corpus(4, 6, 8, 3);
    let opts = StepOptions { lr: 0.1, clip_norm: 2.0, dropout: true };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    train_minibatch(&mut m, &path(&[1], &[3]), &corpus, &[0, 1, 2, 3], &opts, &mut rng).unwrap();
    for p in [0, 2] {
        assert_eq!(m.encoders[p], before.encoders[p]);
        assert_eq!(m.decoders[p], before.decoders[p]);
        assert_eq!(m.embeddings[p], before.embeddings[p]);
    }
    assert_eq!(m.encoders[3], before.encoders[3]);
    assert_eq!(m.decoders[1], before.decoders[1]);
    assert_ne!(m.encoders[1], before.encoders[1]);
    assert_ne!(m.decoders[3], before.decoders[3]);
    assert_ne!(m.bridge, before.bridge);
    let used: std::collections::HashSet<u32> =
        [0, 1, 2, 3].iter().flat_map(|&r| corpus.column_at(1)[r].tokens.clone()).collect();
    for t in 0..8u32 {
        if !used.contains(&t) {
            assert_eq!(m.embeddings[1].row(t as usize), before.embeddings[1].row(t as usize));
        }
    }
}

#[test]
fn one_to_two_loss_is_mean_of_standalone_decoders() {
    let m = init_model::<f64>(config(3, 9, EncoderVariant::BidirectionalMaxpool, 3, 1, 4)).unwrap();
    let corpus = random_corpus(3, 1, 9, 5);
    let out = path_loss(&m, &path(&[0], &[1, 2]), &corpus, &[0], None, false).unwrap();
    let l = ids(3);
    let e = encode(&m, &corpus.column_at(0)[0].tokens, &l[0]).unwrap();
    let d1 = decode_nll(&m, &e, &corpus.column_at(1)[0].tokens, &l[1]).unwrap().loss;
    let d2 = decode_nll(&m, &e, &corpus.column_at(2)[0].tokens, &l[2]).unwrap().loss;
    assert!((out.per_target[0] - d1).abs() < 1e-12);
    assert!((out.per_target[1] - d2).abs() < 1e-12);
    assert!((out.loss - 0.5 * (d1 + d2)).abs() < 1e-12);
}

#[test]
fn duplicate_sources_reduce_to_one_to_one() {
    let mut m = init_model::<f64>(config(3, 9, EncoderVariant::StackedLastState, 3, 1, 4)).unwrap();
    m.encoders[1] = m.encoders[0].clone();
    m.embeddings[1] = m.embeddings[0].clone();
    let mut corpus = random_corpus(3, 5, 9, 6);
    let col0 = corpus.column_at(0).to_vec();
    for (l, col) in corpus.columns_mut() {
        if l.as_str() == "l1" {
            *col = col0.clone();
        }
    }
    let rows = [0, 1, 2, 3, 4];
    let single = path_loss(&m, &path(&[0], &[2]), &corpus, &rows, None, false).unwrap().loss;
    let double = path_loss(&m, &path(&[0, 1], &[2]), &corpus, &rows, None, false).unwrap().loss;
    assert!((single - double).abs() < 1e-12);
}

#[test]
fn missing_column_is_an_error() {
    let mut m = init_model::<f32>(config(4, 8, EncoderVariant::StackedLastState, 3, 1, 2)).unwrap();
    let corpus = random_corpus(3, 4, 8, 3);
    let opts = StepOptions { lr: 0.1, clip_norm: 2.0, dropout: false };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(train_minibatch(&mut m, &path(&[0], &[3]), &corpus, &[0, 1], &opts, &mut rng).is_err());
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let m = init_model::<f32>(config(3, 8, EncoderVariant::BidirectionalMaxpool, 3, 2, 2)).unwrap();
    let bytes = checkpoint_bytes(&m).unwrap();
    assert_eq!(&bytes[..4], b"MLSE");
    assert_eq!(checkpoint_from_bytes(&bytes).unwrap(), m);
    assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(checkpoint_from_bytes(&extra).is_err());
    let mut bad = bytes;
    bad[0] = b'X';
    assert!(checkpoint_from_bytes(&bad).is_err());
}

#[test]
fn lr_halves_only_without_improvement() {
    let mut s = LrSchedule::new(0.01, 0.5, 1e-4);
    let mut lrs = Vec::new();
    for ppl in [10.0, 11.0, 9.0, 9.0, 8.0] {
        lrs.push(s.lr);
        assert!(s.observe(ppl));
    }
    assert_eq!(lrs, vec![0.01, 0.01, 0.005, 0.005, 0.0025]);
    let mut s = LrSchedule::new(1.5e-4, 0.5, 1e-4);
    s.observe(1.0);
    assert!(!s.observe(1.0));
}

fn tiny_setup() -> (ParallelCorpus, ParallelCorpus, ModelParams<f32>, PathSchedule) {
    let params = SyntheticParams { seed: 3, languages: 3, sentences: 120, vocab_size: 20, swap_prob: 0.1 };
    let corpus = gen_synthetic(&params).unwrap();
    let (train, dev) = crate::corpus::split_dev(&corpus, 20, 1).unwrap();
    let mut cfg = config(3, 20, EncoderVariant::BidirectionalMaxpool, 4, 1, 9);
    cfg.languages = params.language_ids();
    let model = init_model(cfg).unwrap();
    let schedule = PathSchedule::one_to_n(&params.language_ids()).unwrap();
    (train, dev, model, schedule)
}

#[test]
fn training_is_deterministic_and_monitoring_is_passive() {
    let (train, dev, model, schedule) = tiny_setup();
    let cfg = TrainConfig { epochs: 2, batch_size: 16, lr: 0.5, ..TrainConfig::default() };
    let mut a = model.clone();
    let ra = run_training(&mut a, &train, &dev, &schedule, &cfg).unwrap();
    let mut b = model.clone();
    let rb = run_training(&mut b, &train, &dev, &schedule, &cfg).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
    assert!(ra.epochs.iter().all(|e| e.dev_sim_error.is_some()));
    let mut c = model;
    let quiet = TrainConfig { eval_similarity: false, ..cfg };
    let rc = run_training(&mut c, &train, &dev, &schedule, &quiet).unwrap();
    assert_eq!(checkpoint_bytes(&a).unwrap(), checkpoint_bytes(&c).unwrap());
    assert!(rc.epochs.iter().all(|e| e.dev_sim_error.is_none()));
    assert_eq!(ra.log_text().lines().count(), 3);
}

#[test]
fn oversized_learning_rate_triggers_halving() {
    let (train, dev, model, schedule) = tiny_setup();
    let cfg = TrainConfig { epochs: 6, batch_size: 16, lr: 40.0, clip_norm: 1e6, ..TrainConfig::default() };
    let mut m = model;
    let report = match run_training(&mut m, &train, &dev, &schedule, &cfg) {
        Ok(r) => r,
        Err(crate::Error::Diverged { .. }) => panic!("diverged"),
        Err(e) => panic!("{e}"),
    };
    let lrs: Vec<f64> = report.epochs.iter().map(|e| e.lr).collect();
    assert_eq!(lrs[0], 40.0);
    assert!(lrs.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] * 0.5), "{lrs:?}");
    assert!(lrs.iter().any(|&l| l < 40.0), "{lrs:?}");
}

#[test]
fn batch_rows_must_exist() {
    let m = init_model::<f32>(config(2, 8, EncoderVariant::StackedLastState, 3, 1, 2)).unwrap();
    let corpus = random_corpus(2, 2, 8, 3);
    let l = ids(2);
    let p = TrainingPath::new(vec![l[0].clone()], vec![l[1].clone()]).unwrap();
    assert!(path_loss(&m, &p, &corpus, &[5], None, false).is_err());
    assert!(path_loss(&m, &p, &corpus, &[], None, false).is_err());
    let _ = Tensor2::<f32>::zeros(1, 1);
}
