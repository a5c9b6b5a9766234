use std::ffi::{CStr, CString};
use std::ptr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symcorr::correlation::{
    contribution_index, symmetric_attention, Affine, ScProjector, ScaleMode, SupportPack,
    TokenMatrix,
};
use symcorr::pruning::greedy_select;
use symcorr::tensor::Matrix;
use symcorr_ffi::*;

const D: usize = 4;

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

struct Fixture {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    query: Vec<f64>,
    supports: Vec<f64>,
    counts: Vec<usize>,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = vec![3, 5, 2];
    let total: usize = counts.iter().sum();
    Fixture {
        w1: randn(&mut rng, D * D),
        b1: randn(&mut rng, D),
        w2: randn(&mut rng, D * D),
        b2: randn(&mut rng, D),
        query: randn(&mut rng, 6 * D),
        supports: randn(&mut rng, total * D),
        counts,
    }
}

fn projector(f: &Fixture) -> *mut SymcorrProjector {
    let mut p = ptr::null_mut();
    let s = unsafe {
        symcorr_projector_new(
            D,
            f.w1.as_ptr(),
            f.b1.as_ptr(),
            f.w2.as_ptr(),
            f.b2.as_ptr(),
            &mut p,
        )
    };
    assert_eq!(s, SymcorrStatus::Ok);
    p
}

fn reference(f: &Fixture) -> (ScProjector, SupportPack, TokenMatrix) {
    let aff = |w: &[f64], b: &[f64]| {
        Affine::new(
            Matrix::new(D, D, w.to_vec()).unwrap(),
            Matrix::new(1, D, b.to_vec()).unwrap(),
        )
        .unwrap()
    };
    let p = ScProjector::new(aff(&f.w1, &f.b1), aff(&f.w2, &f.b2)).unwrap();
    let mut head = 0;
    let items = f
        .counts
        .iter()
        .map(|&n| {
            let t = TokenMatrix::new(
                Matrix::new(n, D, f.supports[head * D..(head + n) * D].to_vec()).unwrap(),
            );
            head += n;
            t.unwrap()
        })
        .collect();
    let xq = TokenMatrix::new(Matrix::new(6, D, f.query.clone()).unwrap()).unwrap();
    (p, SupportPack::new(items).unwrap(), xq)
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(symcorr_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn attention_and_contribution_match_library() {
    let f = fixture(1);
    let p = projector(&f);
    let mut a = ptr::null_mut();
    let s = unsafe {
        symcorr_symmetric_attention(
            p,
            f.query.as_ptr(),
            6,
            f.supports.as_ptr(),
            f.counts.as_ptr(),
            f.counts.len(),
            D,
            SymcorrScale::SqrtD,
            &mut a,
        )
    };
    assert_eq!(s, SymcorrStatus::Ok);
    let (mut rows, mut cols) = (0, 0);
    assert_eq!(
        unsafe { symcorr_attention_shape(a, &mut rows, &mut cols) },
        SymcorrStatus::Ok
    );
    assert_eq!((rows, cols), (6, 10));
    let mut values = vec![0.0; rows * cols];
    assert_eq!(
        unsafe { symcorr_attention_values(a, values.as_mut_ptr(), values.len()) },
        SymcorrStatus::Ok
    );

    let (rp, pack, xq) = reference(&f);
    let expected = symmetric_attention(&pack, &xq, &rp, ScaleMode::SqrtD).unwrap();
    assert_eq!(values, expected.values().data());

    let mut deltas = vec![0.0; 3];
    assert_eq!(
        unsafe { symcorr_contribution_index(a, deltas.as_mut_ptr(), 3) },
        SymcorrStatus::Ok
    );
    let report = contribution_index(&expected).unwrap();
    assert_eq!(deltas, report.per_support_delta);
    let mut dev = 0.0;
    assert_eq!(
        unsafe { symcorr_deviation(a, 1, &mut dev) },
        SymcorrStatus::Ok
    );
    assert_eq!(dev, deltas[1] - (deltas[0] + deltas[2]) / 2.0);

    // wrong buffer size is a contract error, not a write
    assert_eq!(
        unsafe { symcorr_contribution_index(a, deltas.as_mut_ptr(), 2) },
        SymcorrStatus::Contract
    );
    assert!(last_error().contains("supports"));
    unsafe {
        symcorr_attention_free(a);
        symcorr_projector_free(p);
    }
}

#[test]
fn prune_terms_and_selection() {
    let f = fixture(2);
    let p = projector(&f);
    let mut terms = vec![0.0; 3];
    let s = unsafe {
        symcorr_prune_terms(
            p,
            f.query.as_ptr(),
            6,
            f.supports.as_ptr(),
            f.counts.as_ptr(),
            3,
            D,
            terms.as_mut_ptr(),
        )
    };
    assert_eq!(s, SymcorrStatus::Ok);
    let (rp, pack, xq) = reference(&f);
    let q = rp.project(&xq.mean_token()).unwrap();
    for (i, item) in pack.items().iter().enumerate() {
        let sp = rp.project(&item.mean_token()).unwrap();
        let dot: f64 = sp.data().iter().zip(q.data()).map(|(a, b)| a * b).sum();
        assert!((dot - terms[i]).abs() < 1e-12);
    }
    for algorithm in [SymcorrPruneAlgorithm::Greedy, SymcorrPruneAlgorithm::TopK] {
        let mut selected = [0usize; 2];
        let (mut objective, mut evals) = (0.0, 0);
        let s = unsafe {
            symcorr_prune_select(
                terms.as_ptr(),
                3,
                2,
                algorithm,
                selected.as_mut_ptr(),
                &mut objective,
                &mut evals,
            )
        };
        assert_eq!(s, SymcorrStatus::Ok);
        let expected = greedy_select(&terms, 2).unwrap();
        let mut got = selected.to_vec();
        let mut want = expected.selected.clone();
        got.sort_unstable();
        want.sort_unstable();
        assert_eq!(got, want);
        assert!((objective - expected.objective).abs() < 1e-12);
        assert!(evals <= 2 * 3);
    }
    let mut selected = [0usize; 4];
    let (mut objective, mut evals) = (0.0, 0);
    let s = unsafe {
        symcorr_prune_select(
            terms.as_ptr(),
            3,
            4,
            SymcorrPruneAlgorithm::Greedy,
            selected.as_mut_ptr(),
            &mut objective,
            &mut evals,
        )
    };
    assert_ne!(s, SymcorrStatus::Ok);
    unsafe { symcorr_projector_free(p) };
}

#[test]
fn warm_start_scales_query_projection() {
    let f = fixture(3);
    let mut p = ptr::null_mut();
    assert_eq!(
        unsafe { symcorr_projector_warm_start(D, f.w1.as_ptr(), f.b1.as_ptr(), &mut p) },
        SymcorrStatus::Ok
    );
    let mut a = ptr::null_mut();
    let s = unsafe {
        symcorr_symmetric_attention(
            p,
            f.query.as_ptr(),
            6,
            f.supports.as_ptr(),
            f.counts.as_ptr(),
            3,
            D,
            SymcorrScale::D,
            &mut a,
        )
    };
    assert_eq!(s, SymcorrStatus::Ok);
    let mut values = vec![0.0; 60];
    assert_eq!(
        unsafe { symcorr_attention_values(a, values.as_mut_ptr(), 60) },
        SymcorrStatus::Ok
    );
    for row in values.chunks(10) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    unsafe {
        symcorr_attention_free(a);
        symcorr_projector_free(p);
    }
}

#[test]
fn null_and_shape_errors() {
    let mut p = ptr::null_mut();
    let s = unsafe {
        symcorr_projector_new(
            D,
            ptr::null(),
            ptr::null(),
            ptr::null(),
            ptr::null(),
            &mut p,
        )
    };
    assert_eq!(s, SymcorrStatus::NullPointer);
    assert!(last_error().contains("f1_weight"));
    assert!(p.is_null());

    let f = fixture(4);
    let s = unsafe {
        symcorr_projector_new(
            D,
            f.w1.as_ptr(),
            f.b1.as_ptr(),
            f.w2.as_ptr(),
            f.b2.as_ptr(),
            ptr::null_mut(),
        )
    };
    assert_eq!(s, SymcorrStatus::NullPointer);

    let mut a = ptr::null_mut();
    let s = unsafe {
        symcorr_symmetric_attention(
            ptr::null(),
            f.query.as_ptr(),
            6,
            f.supports.as_ptr(),
            f.counts.as_ptr(),
            3,
            D,
            SymcorrScale::SqrtD,
            &mut a,
        )
    };
    assert_eq!(s, SymcorrStatus::NullPointer);

    // zero supports
    let p = projector(&f);
    let s = unsafe {
        symcorr_symmetric_attention(
            p,
            f.query.as_ptr(),
            6,
            f.supports.as_ptr(),
            f.counts.as_ptr(),
            0,
            D,
            SymcorrScale::SqrtD,
            &mut a,
        )
    };
    assert_ne!(s, SymcorrStatus::Ok);
    assert!(!last_error().is_empty());
    unsafe {
        symcorr_projector_free(p);
        symcorr_projector_free(ptr::null_mut());
        symcorr_attention_free(ptr::null_mut());
        symcorr_layer_stack_free(ptr::null_mut());
    }
}

#[test]
fn layer_stack_file_round_trip() {
    let rows = [1usize, 4];
    let data: Vec<f64> = (0..5 * 3).map(|i| i as f64 * 0.25 - 1.0).collect();
    let mut stack = ptr::null_mut();
    assert_eq!(
        unsafe { symcorr_layer_stack_new(2, rows.as_ptr(), 3, data.as_ptr(), &mut stack) },
        SymcorrStatus::Ok
    );
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("x.fts").to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { symcorr_layer_stack_write(stack, path.as_ptr()) },
        SymcorrStatus::Ok
    );

    let mut back = ptr::null_mut();
    assert_eq!(
        unsafe { symcorr_layer_stack_read(path.as_ptr(), &mut back) },
        SymcorrStatus::Ok
    );
    let mut n = 0;
    assert_eq!(
        unsafe { symcorr_layer_stack_len(back, &mut n) },
        SymcorrStatus::Ok
    );
    assert_eq!(n, 2);
    let (mut r, mut c) = (0, 0);
    assert_eq!(
        unsafe { symcorr_layer_stack_shape(back, 1, &mut r, &mut c) },
        SymcorrStatus::Ok
    );
    assert_eq!((r, c), (4, 3));
    let mut layer = vec![0.0; 12];
    assert_eq!(
        unsafe { symcorr_layer_stack_copy(back, 1, layer.as_mut_ptr(), 12) },
        SymcorrStatus::Ok
    );
    assert_eq!(layer, &data[3..]);
    assert_eq!(
        unsafe { symcorr_layer_stack_shape(back, 2, &mut r, &mut c) },
        SymcorrStatus::Contract
    );

    // non-square layer
    let mut bad = ptr::null_mut();
    let rows = [3usize];
    assert_eq!(
        unsafe { symcorr_layer_stack_new(1, rows.as_ptr(), 3, data.as_ptr(), &mut bad) },
        SymcorrStatus::Contract
    );
    let missing = CString::new(dir.path().join("missing.fts").to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { symcorr_layer_stack_read(missing.as_ptr(), &mut bad) },
        SymcorrStatus::Io
    );
    std::fs::write(dir.path().join("junk.fts"), b"nope").unwrap();
    let junk = CString::new(dir.path().join("junk.fts").to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { symcorr_layer_stack_read(junk.as_ptr(), &mut bad) },
        SymcorrStatus::Format
    );
    unsafe {
        symcorr_layer_stack_free(stack);
        symcorr_layer_stack_free(back);
    }
}

#[test]
fn header_declares_every_export() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/symcorr.h")).unwrap();
    let source =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = source
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() > 15);
    for name in exports {
        assert!(
            header.contains(&format!("{name}(")),
            "{name} missing from header"
        );
    }
    assert!(header.contains("typedef struct SymcorrProjector SymcorrProjector;"));
    assert!(header.contains("SYMCORR_STATUS_OK = 0"));
}

/// Compiles a C program against the generated header and the static
/// library, then runs it.
#[test]
fn c_program_links_and_runs() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/<this test> -> target/<profile>
    let profile_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let lib = profile_dir.join("libsymcorr_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let exe = std::path::PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("symcorr_smoke");
    let status = std::process::Command::new(std::env::var("CC").unwrap_or_else(|_| "cc".into()))
        .arg(root.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(root.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("a C compiler is installed");
    assert!(status.success());
    let out = std::process::Command::new(&exe).output().unwrap();
    assert!(
        out.status.success(),
        "C program exited with {:?}",
        out.status.code()
    );
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("delta "));
}
