use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use gmcml::render::{render_dataset, Modes, RenderConfig};
use gmcml::trainer::{RunOptions, TrainConfig, TrainData, Trainer};
use gmcml::zigzag::ClassifierConfig;
use gmcml_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; gmcml_last_error_length() + 1];
    unsafe {
        gmcml_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn render_config() -> GmcmlRenderConfig {
    GmcmlRenderConfig {
        seed: 5,
        classes: 2,
        per_class: 6,
        test_per_class: 2,
        resolution: 16,
        modes: GmcmlModes::Both,
        subdivision: 1,
    }
}

#[test]
fn dataset_handle_matches_core_render() {
    let mut ds = ptr::null_mut();
    assert_eq!(
        unsafe { gmcml_dataset_render(&render_config(), &mut ds) },
        GmcmlStatus::Ok
    );
    let expected = render_dataset(&RenderConfig {
        seed: 5,
        classes: 2,
        per_class: 6,
        test_per_class: 2,
        resolution: 16,
        modes: Modes::Both,
        subdivision: 1,
    })
    .unwrap();
    assert_eq!(unsafe { gmcml_dataset_len(ds) }, expected.len());
    let mut image = vec![0.0; 3 * 16 * 16];
    let mut mask = vec![0.0; 3 * 16 * 16];
    let mut info = GmcmlSampleInfo {
        category: 99,
        pose: [0.0; 3],
        light: 0.0,
        split: GmcmlSplit::Test,
    };
    for (i, p) in expected.iter().enumerate() {
        let st = unsafe {
            gmcml_dataset_get(
                ds,
                i,
                image.as_mut_ptr(),
                image.len(),
                mask.as_mut_ptr(),
                mask.len(),
                &mut info,
            )
        };
        assert_eq!(st, GmcmlStatus::Ok);
        assert_eq!(image, p.o.data());
        assert_eq!(mask, p.m.data());
        assert_eq!(info.category, p.category);
        assert_eq!(info.pose, p.pose);
    }
    let st = unsafe {
        gmcml_dataset_get(
            ds,
            expected.len(),
            ptr::null_mut(),
            0,
            ptr::null_mut(),
            0,
            ptr::null_mut(),
        )
    };
    assert_eq!(st, GmcmlStatus::OutOfRange);
    assert!(last_error().contains("outside dataset"));
    let st = unsafe { gmcml_dataset_get(ds, 0, image.as_mut_ptr(), 10, ptr::null_mut(), 0, ptr::null_mut()) };
    assert_eq!(st, GmcmlStatus::BufferTooSmall);

    let dir = tempfile::tempdir().unwrap();
    let c_dir = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { gmcml_dataset_write(ds, c_dir.as_ptr()) }, GmcmlStatus::Ok);
    assert!(dir.path().join("meta.jsonl").exists());
    unsafe { gmcml_dataset_free(ds) };
}

#[test]
fn invalid_render_config_reports_error() {
    let mut cfg = render_config();
    cfg.classes = 13;
    let mut ds = ptr::null_mut();
    assert_eq!(
        unsafe { gmcml_dataset_render(&cfg, &mut ds) },
        GmcmlStatus::InvalidArgument
    );
    assert!(ds.is_null());
    assert!(last_error().contains("13"));
    assert_eq!(
        unsafe { gmcml_dataset_render(ptr::null(), &mut ds) },
        GmcmlStatus::NullPointer
    );
}

#[test]
fn model_handle_matches_core_inference() {
    let pairs = render_dataset(&RenderConfig {
        seed: 2,
        classes: 2,
        per_class: 8,
        test_per_class: 1,
        resolution: 16,
        modes: Modes::Both,
        subdivision: 1,
    })
    .unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        pretrain_epochs: 1,
        finetune_epochs: 1,
        classifier: ClassifierConfig {
            classes: 2,
            ..Default::default()
        },
        generative: gmcml::generative::GenerativeConfig {
            resolution: 16,
            ..Default::default()
        },
        ..Default::default()
    };
    let data = TrainData::new(&pairs, &cfg).unwrap();
    let mut trainer = Trainer::new(cfg).unwrap();
    trainer.run(&data, &RunOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.bin");
    trainer.save(&ckpt).unwrap();

    let c_path = CString::new(ckpt.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { gmcml_model_load(c_path.as_ptr(), &mut model) },
        GmcmlStatus::Ok
    );
    let (mut s, mut k, mut d) = (0, 0, 0);
    assert_eq!(
        unsafe { gmcml_model_dims(model, &mut s, &mut k, &mut d) },
        GmcmlStatus::Ok
    );
    assert_eq!((s, k), (16, 2));

    let x = &pairs[0].o;
    let expected = trainer.model.infer(&[x]).unwrap().remove(0);
    assert_eq!(d, expected.descriptor.len());
    let mut mask = vec![0.0; 3 * s * s];
    let mut desc = vec![0.0; d];
    let mut logits = vec![0.0; k];
    let st = unsafe {
        gmcml_model_infer(
            model,
            x.data().as_ptr(),
            x.numel(),
            mask.as_mut_ptr(),
            mask.len(),
            desc.as_mut_ptr(),
            desc.len(),
            logits.as_mut_ptr(),
            logits.len(),
        )
    };
    assert_eq!(st, GmcmlStatus::Ok);
    assert_eq!(mask, expected.mask.data());
    assert_eq!(desc, expected.descriptor);
    assert_eq!(logits, expected.logits);

    let st = unsafe {
        gmcml_model_infer(
            model,
            x.data().as_ptr(),
            5,
            ptr::null_mut(),
            0,
            ptr::null_mut(),
            0,
            ptr::null_mut(),
            0,
        )
    };
    assert_eq!(st, GmcmlStatus::ShapeMismatch);
    unsafe { gmcml_model_free(model) };

    let missing = CString::new(dir.path().join("absent.bin").to_str().unwrap()).unwrap();
    let mut none = ptr::null_mut();
    assert_ne!(
        unsafe { gmcml_model_load(missing.as_ptr(), &mut none) },
        GmcmlStatus::Ok
    );
    assert!(none.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn error_message_truncates_and_terminates() {
    let mut ds = ptr::null_mut();
    unsafe { gmcml_dataset_render(ptr::null(), &mut ds) };
    let mut buf = [1 as std::ffi::c_char; 4];
    let n = unsafe { gmcml_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert_eq!(n, 3);
    assert_eq!(buf[3], 0);
    let v = unsafe { CStr::from_ptr(gmcml_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/gmcml.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "gmcml_last_error_length",
        "gmcml_last_error_message",
        "gmcml_version",
        "gmcml_model_load",
        "gmcml_model_free",
        "gmcml_model_dims",
        "gmcml_model_infer",
        "gmcml_dataset_render",
        "gmcml_dataset_free",
        "gmcml_dataset_len",
        "gmcml_dataset_get",
        "gmcml_dataset_write",
        "typedef struct GmcmlModel GmcmlModel",
        "GMCML_STATUS_BUFFER_TOO_SMALL = 8",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    if let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .output()
    {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
