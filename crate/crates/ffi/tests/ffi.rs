use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use stare_core::baselines::{LstmModel, RecurrentConfig};
use stare_core::model::{EncoderModel, ModelConfig, SequenceClassifier, Task};
use stare_core::traj::{map_cell, CellId, Vocabulary};
use stare_ffi::*;

fn vocab() -> Vocabulary {
    Vocabulary::from_cells(16, 600, (1..=4).map(|i| CellId { zoom: 16, index: i }), 3, 2, 2).unwrap()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe {
        stare_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn batch(v: &Vocabulary) -> Vec<Vec<u32>> {
    let s = v.special_ids;
    vec![
        vec![s.bos, 1, 2, s.sep, 6, 7, s.eos],
        vec![s.bos, 3, 0, s.sep, 5, 0, s.eos],
        vec![s.bos, 4, 1, s.sep, 7, 7, s.eos],
    ]
}

#[test]
fn vocabulary_handle_reports_sizes_and_cells() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("vocab.json");
    let v = vocab();
    v.save(&p).unwrap();
    let mut h: *mut StareVocab = ptr::null_mut();
    unsafe {
        assert_eq!(stare_vocab_load(cpath(&p).as_ptr(), &mut h), StareStatus::Ok);
        assert_eq!(stare_vocab_size(h), v.size());
        assert_eq!(stare_vocab_seq_len(h), 7);
        assert_eq!(stare_vocab_cell_token(h, 16, 3), 3);
        assert_eq!(stare_vocab_cell_token(h, 16, 99), -1);
        assert_eq!(stare_vocab_cell_token(h, 15, 3), -1);
        stare_vocab_free(h);
        assert_eq!(stare_vocab_size(ptr::null()), 0);
    }
}

#[test]
fn predictions_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let v = vocab();
    let enc = EncoderModel::new(ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        ..ModelConfig::for_vocab(&v, Task::Classification, 3)
    })
    .unwrap();
    let lstm = LstmModel::new(RecurrentConfig::for_vocab(&v, 3, true)).unwrap();
    let (pe, pl) = (dir.path().join("enc.json"), dir.path().join("lstm.json"));
    enc.save(&pe).unwrap();
    lstm.save(&pl).unwrap();

    let b = batch(&v);
    let refs: Vec<&[u32]> = b.iter().map(Vec::as_slice).collect();
    let flat: Vec<u32> = b.concat();
    for (path, want) in [(&pe, enc.predict_proba(&refs).unwrap()), (&pl, lstm.predict_proba(&refs).unwrap())] {
        let mut m: *mut StareModel = ptr::null_mut();
        unsafe {
            assert_eq!(stare_model_load(cpath(path).as_ptr(), &mut m), StareStatus::Ok);
            assert_eq!(stare_model_n_classes(m), 3);
            let mut out = vec![0.0; 9];
            let st = stare_model_predict(m, flat.as_ptr(), 3, 7, out.as_mut_ptr(), out.len());
            assert_eq!(st, StareStatus::Ok);
            assert_eq!(out, want.concat());

            let st = stare_model_predict(m, flat.as_ptr(), 3, 7, out.as_mut_ptr(), 8);
            assert_eq!(st, StareStatus::BufferTooSmall);
            assert!(last_error().contains("need 9"));
            let bad = [v.special_ids.bos, 99, 0, 0, 0, 0, 0];
            let st = stare_model_predict(m, bad.as_ptr(), 1, 7, out.as_mut_ptr(), out.len());
            assert_eq!(st, StareStatus::InvalidArgument);
            stare_model_free(m);
        }
    }
}

#[test]
fn masked_location_models_refuse_class_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let v = vocab();
    let m = EncoderModel::new(ModelConfig {
        d_model: 8,
        n_heads: 1,
        n_layers: 1,
        d_ff: 8,
        ..ModelConfig::for_vocab(&v, Task::Mlm, 1)
    })
    .unwrap();
    let p = dir.path().join("mlm.json");
    m.save(&p).unwrap();
    let flat = batch(&v).concat();
    let mut h: *mut StareModel = ptr::null_mut();
    let mut out = [0.0; 8];
    unsafe {
        assert_eq!(stare_model_load(cpath(&p).as_ptr(), &mut h), StareStatus::Ok);
        assert_eq!(stare_model_n_classes(h), 0);
        assert_eq!(stare_model_predict(h, flat.as_ptr(), 1, 7, out.as_mut_ptr(), 8), StareStatus::WrongTask);
        stare_model_free(h);
    }
}

#[test]
fn failures_return_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let missing = cpath(&dir.path().join("nope.json"));
    let mut v: *mut StareVocab = ptr::null_mut();
    let mut m: *mut StareModel = ptr::null_mut();
    unsafe {
        assert_eq!(stare_vocab_load(ptr::null(), &mut v), StareStatus::NullPointer);
        assert_eq!(stare_vocab_load(missing.as_ptr(), ptr::null_mut()), StareStatus::NullPointer);
        assert_eq!(stare_vocab_load(missing.as_ptr(), &mut v), StareStatus::NotFound);
        assert!(last_error().contains("nope.json"));
        assert_eq!(stare_model_load(missing.as_ptr(), &mut m), StareStatus::NotFound);

        let junk = dir.path().join("junk.json");
        std::fs::write(&junk, "{\"not\": \"a checkpoint\"}").unwrap();
        assert_eq!(stare_vocab_load(cpath(&junk).as_ptr(), &mut v), StareStatus::Parse);
        assert_eq!(stare_model_load(cpath(&junk).as_ptr(), &mut m), StareStatus::Parse);
        assert!(v.is_null() && m.is_null());

        let bad_utf8 = [0xffu8 as c_char, 0];
        assert_eq!(stare_model_load(bad_utf8.as_ptr(), &mut m), StareStatus::InvalidUtf8);

        let mut out = [0.0; 3];
        assert_eq!(stare_model_predict(ptr::null(), ptr::null(), 1, 1, out.as_mut_ptr(), 3), StareStatus::NullPointer);

        // truncation keeps the full length as the return value
        let mut tiny = [0 as c_char; 4];
        let n = stare_last_error(tiny.as_mut_ptr(), tiny.len());
        assert!(n > 3);
        assert_eq!(CStr::from_ptr(tiny.as_ptr()).to_bytes().len(), 3);
        stare_model_free(ptr::null_mut());
        stare_vocab_free(ptr::null_mut());
    }
}

#[test]
fn geometry_helpers_agree_with_core() {
    let mut idx = 0u64;
    unsafe {
        assert_eq!(stare_map_cell(38.85, -77.3, 16, &mut idx), StareStatus::Ok);
        assert_eq!(stare_map_cell(95.0, 0.0, 16, &mut idx), StareStatus::InvalidArgument);
        assert_eq!(stare_map_cell(0.0, 0.0, 16, ptr::null_mut()), StareStatus::NullPointer);
    }
    assert_eq!(idx, map_cell(38.85, -77.3, 16).unwrap().index);
    assert_eq!(stare_duration_blocks(2700, 1800), 2);
    assert_eq!(stare_duration_blocks(4500, 1800), 2);
    assert_eq!(stare_duration_blocks(10, 1800), 1);
    assert_eq!(stare_duration_blocks(10, 0), 0);
    let ver = unsafe { CStr::from_ptr(stare_version()) };
    assert_eq!(ver.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn generated_header_compiles_as_c_and_cpp() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/stare.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "stare_vocab_load",
        "stare_vocab_free",
        "stare_model_load",
        "stare_model_predict",
        "stare_model_free",
        "stare_last_error",
        "typedef struct StareModel StareModel",
        "STARE_STATUS_BUFFER_TOO_SMALL = 7",
    ] {
        assert!(text.contains(f), "header lacks {f}");
    }
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let Ok(o) =
            Command::new(compiler).args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang]).arg(&header).output()
        else {
            eprintln!("{compiler} not available, skipping");
            continue;
        };
        assert!(o.status.success(), "{compiler}: {}", String::from_utf8_lossy(&o.stderr));
    }
}
