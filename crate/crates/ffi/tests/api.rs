use std::ffi::{CStr, CString};
use std::ptr;

use unlearn_forge::concepts::ConceptTable;
use unlearn_forge::diffusion::{train_base, BaseTrainConfig, DenoiserArch, NoiseSchedule};
use unlearn_forge_ffi::*;

fn last_error() -> String {
    unsafe {
        let n = uf_last_error_message(ptr::null_mut(), 0);
        let mut buf = vec![0 as std::ffi::c_char; n];
        uf_last_error_message(buf.as_mut_ptr(), n);
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn table(seed: u64) -> *mut UfTable {
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { uf_table_default(seed, &mut t) }, UfStatus::Ok);
    t
}

#[test]
fn table_queries() {
    let t = table(7);
    unsafe {
        assert_eq!(uf_table_len(t), 5);
        assert_eq!(uf_table_len(ptr::null()), 0);
        let mut buf = [0 as std::ffi::c_char; 16];
        let mut needed = 0;
        assert_eq!(
            uf_table_concept_id(t, 4, buf.as_mut_ptr(), buf.len(), &mut needed),
            UfStatus::Ok
        );
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), "starry");
        assert_eq!(needed, 7);
        assert_eq!(
            uf_table_concept_id(t, 9, buf.as_mut_ptr(), buf.len(), &mut needed),
            UfStatus::InvalidArgument
        );
        assert!(last_error().contains("out of range"));

        let id = CString::new("east").unwrap();
        let mut idx = 99;
        assert_eq!(uf_table_index_of(t, id.as_ptr(), &mut idx), UfStatus::Ok);
        assert_eq!(idx, 2);
        assert!(last_error().is_empty());

        let pts = [2.0, 2.0, -2.0, -2.0, 2.0, -2.0, -2.0, 2.0];
        let mut cls = [0usize; 4];
        assert_eq!(
            uf_table_classify(t, pts.as_ptr(), 4, cls.as_mut_ptr()),
            UfStatus::Ok
        );
        assert_eq!(cls, [0, 1, 2, 3]);

        let json = CString::new(ConceptTable::default_table(7).to_json()).unwrap();
        let mut t2 = ptr::null_mut();
        assert_eq!(uf_table_from_json(json.as_ptr(), &mut t2), UfStatus::Ok);
        assert_eq!(uf_table_len(t2), 5);
        let bad = CString::new("{").unwrap();
        assert_eq!(uf_table_from_json(bad.as_ptr(), &mut t2), UfStatus::Config);
        uf_table_free(t2);
        uf_table_free(t);
        uf_table_free(ptr::null_mut());
    }
}

#[test]
fn null_arguments_are_reported() {
    unsafe {
        assert_eq!(uf_table_default(7, ptr::null_mut()), UfStatus::NullPointer);
        assert!(last_error().contains("out is null"));
        let mut out = 0.0;
        assert_eq!(
            uf_frechet(ptr::null(), 3, ptr::null(), 3, &mut out),
            UfStatus::NullPointer
        );
        assert!(!CStr::from_ptr(uf_version()).to_bytes().is_empty());
    }
}

#[test]
fn metrics_and_surgery() {
    unsafe {
        let gu = [1.0, -1.0];
        let gr = [0.0, 1.0];
        let mut g = [0.0; 2];
        assert_eq!(
            uf_surgery(gu.as_ptr(), gr.as_ptr(), 2, 0.5, g.as_mut_ptr()),
            UfStatus::Ok
        );
        assert_eq!(g, [1.0, -0.5]);
        assert_eq!(
            uf_surgery(gu.as_ptr(), gr.as_ptr(), 2, -1.0, g.as_mut_ptr()),
            UfStatus::Config
        );

        let a = [0.0, 0.0];
        let b = [1.0, 0.0];
        let mut m = 0.0;
        assert_eq!(
            uf_mmd(a.as_ptr(), 1, b.as_ptr(), 1, 1.0, &mut m),
            UfStatus::Ok
        );
        assert!((m * m - 0.7869387).abs() < 1e-7);

        let p = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let q: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(i, v)| if i % 2 == 0 { v + 3.0 } else { *v })
            .collect();
        let mut d = 0.0;
        assert_eq!(
            uf_frechet(p.as_ptr(), 4, q.as_ptr(), 4, &mut d),
            UfStatus::Ok
        );
        assert!((d - 3.0).abs() < 1e-12);
        assert_eq!(
            uf_frechet(p.as_ptr(), 2, q.as_ptr(), 4, &mut d),
            UfStatus::Failed
        );
        assert!(last_error().contains("at least 3"));
    }
}

#[test]
fn snapshots_load_and_sample() {
    let core_table = ConceptTable::default_table(7);
    let cfg = BaseTrainConfig {
        steps: 20,
        batch: 16,
        arch: DenoiserArch {
            hidden: vec![16],
            ..Default::default()
        },
        ..Default::default()
    };
    let sched = NoiseSchedule::cosine(10).unwrap();
    let snap = train_base(&core_table, &sched, &cfg).unwrap().snapshot;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    snap.save(&path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();

    let t = table(7);
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(uf_snapshot_load(cpath.as_ptr(), t, &mut s), UfStatus::Ok);
        let mut id = [0 as std::ffi::c_char; 17];
        assert_eq!(uf_snapshot_id(s, id.as_mut_ptr(), id.len()), UfStatus::Ok);
        assert_eq!(CStr::from_ptr(id.as_ptr()).to_str().unwrap(), snap.id());

        let mut a = vec![0.0; 20];
        let mut b = vec![0.0; 20];
        assert_eq!(
            uf_snapshot_sample(s, t, 0, 10, 3, a.as_mut_ptr()),
            UfStatus::Ok
        );
        assert_eq!(
            uf_snapshot_sample(s, t, 0, 10, 3, b.as_mut_ptr()),
            UfStatus::Ok
        );
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(
            uf_snapshot_sample(s, t, 0, 0, 3, a.as_mut_ptr()),
            UfStatus::Config
        );
        uf_snapshot_free(s);

        let other = table(8);
        assert_eq!(
            uf_snapshot_load(cpath.as_ptr(), other, &mut s),
            UfStatus::HashMismatch
        );
        let missing = CString::new(dir.path().join("nope.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(
            uf_snapshot_load(missing.as_ptr(), t, &mut s),
            UfStatus::MissingArtifact
        );
        uf_table_free(other);
        uf_table_free(t);
    }
}
