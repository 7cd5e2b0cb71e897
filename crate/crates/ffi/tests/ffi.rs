use std::ffi::{CStr, CString};
use std::fs;
use std::ptr;

use candle_core::{DType, Device, Tensor};
use mmger::encoders::{AdapterConfig, EncoderConfig};
use mmger::lm::{FrozenLm, LanguageModel, LmConfig};
use mmger::nn::ParamStore;
use mmger::synthdata::SymbolVocab;
use mmger::trainer::{EncodersConfig, MmgerConfig, Trainer};
use mmger_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mmger_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn regularize_and_cer() {
    let labels = [0u32, 3, 3, 0, 3, 2, 2, 0];
    let mut out = [0u32; 8];
    let mut len = 0usize;
    let st = unsafe {
        mmger_regularize(
            labels.as_ptr(),
            labels.len(),
            out.as_mut_ptr(),
            out.len(),
            &mut len,
        )
    };
    assert_eq!(st, MmgerStatus::Ok);
    assert_eq!(&out[..len], &[3, 3, 2]);

    let st =
        unsafe { mmger_regularize(labels.as_ptr(), labels.len(), out.as_mut_ptr(), 2, &mut len) };
    assert_eq!(st, MmgerStatus::InvalidArgument);
    assert_eq!(len, 3);
    assert!(last_error().contains("need 3"));

    let mut c = 0.0;
    let st = unsafe { mmger_cer([1u32, 9, 3].as_ptr(), 3, [1u32, 2, 3].as_ptr(), 3, &mut c) };
    assert_eq!(st, MmgerStatus::Ok);
    assert!((c - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(last_error(), "");
    let st = unsafe { mmger_cer([1u32].as_ptr(), 1, ptr::null(), 0, &mut c) };
    assert_eq!(st, MmgerStatus::InvalidArgument);
}

#[test]
fn ctc_loss_matches_library() {
    let (t, c) = (5, 4);
    let logits: Vec<f64> = (0..t * c)
        .map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0)
        .collect();
    let target = [1u32, 2, 2];
    let mut loss = 0.0;
    let mut grad = vec![0.0; t * c];
    let st = unsafe {
        mmger_ctc_loss(
            logits.as_ptr(),
            t,
            c,
            target.as_ptr(),
            3,
            &mut loss,
            grad.as_mut_ptr(),
        )
    };
    assert_eq!(st, MmgerStatus::Ok);
    let tensor = Tensor::from_vec(logits.clone(), (t, c), &Device::Cpu).unwrap();
    let expected = mmger::ctc::ctc_loss(&tensor, &target)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
    assert!((loss - expected).abs() < 1e-12);
    // every row of the gradient of a softmax NLL sums to zero
    for row in grad.chunks(c) {
        assert!(row.iter().sum::<f64>().abs() < 1e-9);
    }

    let st = unsafe {
        mmger_ctc_loss(
            logits.as_ptr(),
            t,
            c,
            [1u32, 1, 1].as_ptr(),
            3,
            &mut loss,
            ptr::null_mut(),
        )
    };
    assert_eq!(st, MmgerStatus::Ok);
    assert!(loss.is_finite());
    let st = unsafe {
        mmger_ctc_loss(
            logits.as_ptr(),
            2,
            c,
            target.as_ptr(),
            3,
            &mut loss,
            ptr::null_mut(),
        )
    };
    assert_eq!(st, MmgerStatus::Ok);
    assert_eq!(loss, f64::INFINITY);
    let st = unsafe {
        mmger_ctc_loss(
            ptr::null(),
            t,
            c,
            target.as_ptr(),
            3,
            &mut loss,
            ptr::null_mut(),
        )
    };
    assert_eq!(st, MmgerStatus::InvalidArgument);
    assert!(last_error().contains("logits"));
}

const TINY_DATA: &str = r#"
[synthdata]
num_symbols = 6
feature_dim = 4
num_accents = 2
shift_strengths = [0.0, 0.5]
length_range = [2, 4]
pairs_per_accent = 2
branching = 3
train_size = 6
dev_size = 4
test_size = 4

[encoders.shared]
input_dim = 4
[encoders.asr]
input_dim = 4
"#;

#[test]
fn corpus_dataset_and_model_handles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.toml");
    fs::write(&cfg_path, TINY_DATA).unwrap();
    let data_dir = dir.path().join("data");
    let st = unsafe {
        mmger_generate_corpus(
            cstr(cfg_path.to_str().unwrap()).as_ptr(),
            cstr(data_dir.to_str().unwrap()).as_ptr(),
        )
    };
    assert_eq!(st, MmgerStatus::Ok, "{}", last_error());

    let mut ds = ptr::null_mut();
    let st = unsafe {
        mmger_dataset_open(
            cstr(data_dir.to_str().unwrap()).as_ptr(),
            cstr("dev").as_ptr(),
            &mut ds,
        )
    };
    assert_eq!(st, MmgerStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { mmger_dataset_len(ds) }, 4);
    let (mut accent, mut frames) = (0usize, 0usize);
    assert_eq!(
        unsafe { mmger_dataset_info(ds, 1, &mut accent, &mut frames) },
        MmgerStatus::Ok
    );
    assert_eq!(accent, 1);
    assert!(frames >= 2);
    let mut buf = [0u32; 16];
    let mut len = 0;
    assert_eq!(
        unsafe { mmger_dataset_transcript(ds, 0, buf.as_mut_ptr(), buf.len(), &mut len) },
        MmgerStatus::Ok
    );
    assert!((2..=4).contains(&len));
    assert_eq!(
        unsafe { mmger_dataset_info(ds, 9, ptr::null_mut(), ptr::null_mut()) },
        MmgerStatus::InvalidArgument
    );

    let vocab = SymbolVocab::new(6).unwrap();
    let lm_cfg = LmConfig {
        dim: 8,
        num_layers: 1,
        num_heads: 2,
        ffn_dim: 16,
        context_cap: 96,
    };
    let mut store = ParamStore::new(1, DType::F32);
    LanguageModel::new(&mut store, vocab, &lm_cfg).unwrap();
    let lm = FrozenLm::from_weights(vocab, &lm_cfg, &store.snapshot(), DType::F32, 1.0).unwrap();
    let lm_path = dir.path().join("lm.safetensors");
    lm.save(&lm_path).unwrap();
    let enc = EncoderConfig {
        input_dim: 4,
        num_layers: 1,
        model_dim: 8,
        ffn_dim: 16,
        num_heads: 2,
        tap_layers: vec![1],
        ..EncoderConfig::default()
    };
    let mut cfg = MmgerConfig {
        encoders: EncodersConfig {
            shared: enc.clone(),
            asr: enc,
            adapter: AdapterConfig {
                num_layers: 1,
                num_heads: 2,
                ffn_dim: 16,
            },
        },
        ..MmgerConfig::default()
    };
    cfg.arfusion.fusion_dim = 4;
    cfg.arfusion.classifier_hidden = 4;
    let ckpt = dir.path().join("ckpt.safetensors");
    Trainer::new(&cfg, lm, 2, DType::F32)
        .unwrap()
        .save_checkpoint(&ckpt)
        .unwrap();

    let mut model = ptr::null_mut();
    let st = unsafe {
        mmger_model_open(
            cstr(ckpt.to_str().unwrap()).as_ptr(),
            cstr(lm_path.to_str().unwrap()).as_ptr(),
            &mut model,
        )
    };
    assert_eq!(st, MmgerStatus::Ok, "{}", last_error());
    let mut out = vec![0u32; 64];
    let mut predicted = 0usize;
    let st = unsafe {
        mmger_model_decode(
            model,
            ds,
            2,
            out.as_mut_ptr(),
            out.len(),
            &mut len,
            &mut predicted,
        )
    };
    assert_eq!(st, MmgerStatus::Ok, "{}", last_error());
    assert!(predicted < 2);
    assert!(out[..len].iter().all(|&s| vocab.is_symbol(s)));

    let mut missing = ptr::null_mut();
    let st = unsafe {
        mmger_model_open(
            cstr(dir.path().join("nope.safetensors").to_str().unwrap()).as_ptr(),
            cstr(lm_path.to_str().unwrap()).as_ptr(),
            &mut missing,
        )
    };
    assert_eq!(st, MmgerStatus::Io);
    assert!(last_error().contains("nope.safetensors"));
    assert!(missing.is_null());

    unsafe {
        mmger_model_free(model);
        mmger_dataset_free(ds);
        mmger_dataset_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_api() {
    let header =
        fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/mmger.h")).unwrap();
    for name in [
        "MMGER_STATUS_OK",
        "MMGER_STATUS_CHECKSUM",
        "typedef struct MmgerDataset MmgerDataset",
        "mmger_ctc_loss",
        "mmger_model_decode",
        "mmger_last_error_message",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}
