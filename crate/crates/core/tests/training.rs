mod common;

use candle_core::DType;
use mmger::synthdata::{Generator, GeneratorConfig, Utterance};
use mmger::trainer::{evaluate, Trainer};
use mmger::Error;

use common::{tiny_config, tiny_lm, tiny_model, tiny_utterances};

#[test]
fn resume_from_checkpoint_is_bit_exact() {
    let data = tiny_utterances(20);
    let cfg = tiny_config();
    let vocab = common::tiny_generator().config.vocab().unwrap();

    let mut straight = Trainer::new(&cfg, tiny_lm(vocab, DType::F32), 2, DType::F32).unwrap();
    straight.fit(&data, None, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.safetensors");
    let mut first = Trainer::new(&cfg, tiny_lm(vocab, DType::F32), 2, DType::F32).unwrap();
    first.fit(&data, Some(3), None).unwrap();
    first.save_checkpoint(&path).unwrap();
    let mut resumed = Trainer::load_checkpoint(&path, tiny_lm(vocab, DType::F32)).unwrap();
    assert_eq!(resumed.position(), 3);
    resumed.fit(&data, None, None).unwrap();

    assert_eq!(
        straight.model().store().checksum().unwrap(),
        resumed.model().store().checksum().unwrap()
    );
    let tail: Vec<u64> = straight.history()[3..]
        .iter()
        .map(|r| r.total.to_bits())
        .collect();
    let again: Vec<u64> = resumed
        .history()
        .iter()
        .map(|r| r.total.to_bits())
        .collect();
    assert_eq!(tail, again);
}

#[test]
fn checkpoint_rejects_a_different_language_model() {
    let cfg = tiny_config();
    let vocab = common::tiny_generator().config.vocab().unwrap();
    let trainer = Trainer::new(&cfg, tiny_lm(vocab, DType::F32), 2, DType::F32).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.safetensors");
    trainer.save_checkpoint(&path).unwrap();

    let other = {
        let mut store = mmger::nn::ParamStore::new(99, DType::F32);
        let lm_cfg = tiny_lm(vocab, DType::F32).config().clone();
        mmger::lm::LanguageModel::new(&mut store, vocab, &lm_cfg).unwrap();
        mmger::lm::FrozenLm::from_weights(vocab, &lm_cfg, &store.snapshot(), DType::F32, 1.0)
            .unwrap()
    };
    assert!(matches!(
        Trainer::load_checkpoint(&path, other),
        Err(Error::Checksum { .. })
    ));
}

#[test]
fn infeasible_utterances_are_skipped_and_counted() {
    let mut data = tiny_utterances(4);
    // two frames cannot carry a three-symbol transcript
    data[1].transcript = vec![1, 2, 3];
    data[1].num_frames = 2;
    let f = data[1].feature_dim;
    data[1].frames.truncate(2 * f);
    let cfg = tiny_config();
    let vocab = common::tiny_generator().config.vocab().unwrap();
    let mut trainer = Trainer::new(&cfg, tiny_lm(vocab, DType::F32), 2, DType::F32).unwrap();
    let refs: Vec<&Utterance> = data.iter().collect();
    let rec = trainer.train_step(&refs).unwrap().unwrap();
    assert_eq!(rec.utterances, 3);
    assert_eq!(rec.skipped_infeasible, 1);
    assert_eq!(trainer.skipped_infeasible(), 1);
    assert!(rec.total.is_finite());
}

#[test]
fn stop_gradient_cuts_corrector_loss_from_the_classifier() {
    let utts = tiny_utterances(4);
    let refs: Vec<&Utterance> = utts.iter().collect();
    for stop in [false, true] {
        let mut cfg = tiny_config();
        cfg.trainer.stop_gradient_accent = stop;
        let model = tiny_model(&cfg, DType::F64);
        let (terms, _) = model.losses(&refs).unwrap();
        let grads = terms.l_llm.unwrap().backward().unwrap();
        let store = model.store();
        let grad_norm = |name: &str| {
            let v = store.var(name).unwrap();
            grads
                .get(v.as_tensor())
                .map(|g| {
                    g.sqr()
                        .unwrap()
                        .sum_all()
                        .unwrap()
                        .to_scalar::<f64>()
                        .unwrap()
                })
                .unwrap_or(0.0)
        };
        assert!(grad_norm("ar.accent_proj.weight") > 0.0);
        let classifier = grad_norm("ar.classifier.1.weight");
        if stop {
            assert_eq!(classifier, 0.0);
        } else {
            assert!(classifier > 0.0);
        }
    }
}

#[test]
fn eval_report_separates_accented_speech() {
    let cfg = tiny_config();
    let model = tiny_model(&cfg, DType::F32);
    let utts = tiny_utterances(10);
    let (report, rows) = evaluate(&model, &utts, "dev").unwrap();
    assert_eq!(rows.len(), 10);
    assert_eq!(report.per_accent.len(), 2);
    assert_eq!(
        report
            .per_accent
            .iter()
            .map(|a| a.utterances)
            .sum::<usize>(),
        10
    );
    assert!((report.cer_accented - report.per_accent[1].cer).abs() < 1e-12);
    assert!(report.cer_pair().contains(" / "));
}

/// A CTC-only recognizer that never hears accented speech does worse on it.
#[test]
fn accents_are_harder_for_a_standard_only_recognizer() {
    let gen = Generator::new(GeneratorConfig::default()).unwrap();
    let standard: Vec<Utterance> = gen
        .split("train", 1600)
        .unwrap()
        .into_iter()
        .filter(|u| u.accent == 0)
        .collect();
    let dev = gen.split("dev", 200).unwrap();
    let mut cfg = mmger::trainer::MmgerConfig::default();
    cfg.trainer.enable_lm_path = false;
    cfg.trainer.enable_ar_path = false;
    cfg.trainer.lambda = 1.0;
    cfg.trainer.mu = 0.0;
    cfg.trainer.epochs = 6;
    cfg.trainer.optimizer.warmup_steps = 50;
    let vocab = gen.config.vocab().unwrap();
    let mut trainer = Trainer::new(&cfg, tiny_lm(vocab, DType::F32), 4, DType::F32).unwrap();
    trainer.fit(&standard, None, None).unwrap();
    let (report, _) = evaluate(trainer.model(), &dev, "dev").unwrap();
    let cer0 = report.per_accent[0].baseline_cer;
    assert!(report.baseline_cer_accented > cer0, "{report}");
}
