use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use infomask_ffi::*;

const TINY: &str = r#"{"encoder": {"image_height": 16, "image_width": 16, "d_model": 16, "n_heads": 2,
  "n_layers": 1, "mlp_ratio": 2, "n_frames": 3, "text_layers": 1, "embed_dim": 16, "temporal_layers": 1,
  "temporal_heads": 2, "disc_hidden": 8}, "batch_size": 4, "steps": 3}"#;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    unsafe {
        im_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/infomask.h")).unwrap();
    let lib = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = lib
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for f in exports {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    for t in ["typedef struct ImModel ImModel", "typedef struct ImTrainer ImTrainer", "IM_STATUS_BUFFER_TOO_SMALL"] {
        assert!(header.contains(t), "{t}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(cc.status.success());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    std::fs::write(
        &src,
        "#include \"infomask.h\"\nint f(void) { ImModel *m = 0; ImRetrieval r; (void)r; \
         return im_model_new(0, 1, &m) == IM_STATUS_OK; }\n",
    )
    .unwrap();
    let o = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn metrics_and_dsl() {
    let s = [0.9, 0.8, 0.1, 0.2, 0.7, 0.6, 0.5, 0.4, 0.3];
    let mut r = ImRetrieval::default();
    assert_eq!(unsafe { im_rank_metrics(s.as_ptr(), 3, &mut r) }, ImStatus::Ok);
    assert!((r.r1 - 200.0 / 3.0).abs() < 1e-12);
    assert!((r.mnr - 5.0 / 3.0).abs() < 1e-12);
    assert_eq!(r.rsum, r.r1 + r.r5 + r.r10);

    let flat = [0.3; 4];
    let mut out = [0.0; 4];
    assert_eq!(unsafe { im_dsl_adjust(flat.as_ptr(), 2, 0.0, out.as_mut_ptr()) }, ImStatus::Ok);
    assert!(out.iter().all(|v| (v - 0.15).abs() < 1e-15));

    assert_eq!(unsafe { im_rank_metrics(ptr::null(), 3, &mut r) }, ImStatus::NullPointer);
    assert!(last_error().contains("null"));
    let bad = [0.0, f64::NAN, 0.0, 0.0];
    assert_eq!(unsafe { im_rank_metrics(bad.as_ptr(), 2, &mut r) }, ImStatus::NonFinite);
    assert_eq!(unsafe { im_dsl_adjust(flat.as_ptr(), 0, 0.0, out.as_mut_ptr()) }, ImStatus::InvalidArgument);
}

#[test]
fn informed_mask_through_c() {
    let (m, h, t) = (2, 1, 5);
    let attn: Vec<f64> = (0..m * h * t * t)
        .map(|i| {
            let (row, col) = ((i / t) % t, i % t);
            if row == 0 {
                (col + 1) as f64 / 15.0
            } else {
                0.2
            }
        })
        .collect();
    let mut idx = [0usize; 4];
    let mut n = 0usize;
    let st = unsafe { im_informed_mask(attn.as_ptr(), m, h, t, 0, 1, 0.5, true, idx.as_mut_ptr(), 4, &mut n) };
    assert_eq!(st, ImStatus::Ok);
    let mut got = idx[..n].to_vec();
    got.sort_unstable();
    assert_eq!(got, vec![2, 3]);
    let st = unsafe { im_informed_mask(attn.as_ptr(), m, h, t, 0, 1, 0.5, false, idx.as_mut_ptr(), 1, &mut n) };
    assert_eq!(st, ImStatus::BufferTooSmall);
    assert_eq!(n, 2);
    let st = unsafe { im_informed_mask(attn.as_ptr(), m, h, t, 1, 0, 0.5, true, idx.as_mut_ptr(), 4, &mut n) };
    assert_ne!(st, ImStatus::Ok);
}

#[test]
fn train_save_load_and_score() {
    let cfg = CString::new(TINY).unwrap();
    let mut data = ptr::null_mut();
    let mut trainer = ptr::null_mut();
    unsafe {
        assert_eq!(im_dataset_generate(8, 1, cfg.as_ptr(), &mut data), ImStatus::Ok);
        assert_eq!(im_dataset_len(data), 8);
        assert_eq!(im_trainer_new(cfg.as_ptr(), &mut trainer), ImStatus::Ok);
        let mut losses = ImLosses::default();
        for step in 0..2 {
            assert_eq!(im_trainer_step(trainer, data, &mut losses), ImStatus::Ok, "{}", last_error());
            assert_eq!(losses.step, step);
            assert!(losses.total.is_finite() && losses.total > 0.0);
        }
        assert_eq!(im_trainer_steps_done(trainer), 2);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("t.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(im_trainer_save(trainer, path.as_ptr()), ImStatus::Ok);

        let mut a = ptr::null_mut();
        let mut b = ptr::null_mut();
        assert_eq!(im_trainer_model(trainer, &mut a), ImStatus::Ok);
        assert_eq!(im_model_load(path.as_ptr(), &mut b), ImStatus::Ok);
        let mut sa = vec![0.0; 64];
        let mut sb = vec![0.0; 64];
        assert_eq!(im_similarity(a, data, sa.as_mut_ptr(), 64), ImStatus::Ok);
        assert_eq!(im_similarity(b, data, sb.as_mut_ptr(), 64), ImStatus::Ok);
        assert_eq!(sa, sb);
        assert_eq!(im_similarity(a, data, sa.as_mut_ptr(), 10), ImStatus::BufferTooSmall);

        let mut resumed = ptr::null_mut();
        assert_eq!(im_trainer_load(path.as_ptr(), &mut resumed), ImStatus::Ok);
        assert_eq!(im_trainer_steps_done(resumed), 2);

        let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
        let mut c = ptr::null_mut();
        assert_eq!(im_model_load(missing.as_ptr(), &mut c), ImStatus::Io);
        assert!(c.is_null());

        // the default geometry does not fit this corpus
        let mut wide = ptr::null_mut();
        assert_eq!(im_model_new(ptr::null(), 0, &mut wide), ImStatus::Ok);
        assert_ne!(im_similarity(wide, data, sa.as_mut_ptr(), 64), ImStatus::Ok);

        im_model_free(wide);
        im_model_free(a);
        im_model_free(b);
        im_trainer_free(resumed);
        im_trainer_free(trainer);
        im_dataset_free(data);
        im_model_free(ptr::null_mut());
    }
}

#[test]
fn bad_config_reports_message() {
    let cfg = CString::new(r#"{"r_h": 3.0}"#).unwrap();
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { im_trainer_new(cfg.as_ptr(), &mut t) }, ImStatus::Config);
    assert!(last_error().contains("r_h"));
    assert!(t.is_null());
    let version = unsafe { CStr::from_ptr(im_version()) };
    assert_eq!(version.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
