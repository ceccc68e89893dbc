use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use fvg_core::dataio::{read_dataset, synth_generate, write_dataset, Dataset, SynthConfig};
use sha2::{Digest, Sha256};

fn digest_records(ds: &Dataset) -> Vec<u8> {
    let mut h = Sha256::new();
    for r in &ds.records {
        h.update(r.id.as_bytes());
        h.update((r.label as u64).to_le_bytes());
        for x in r
            .feat_full
            .iter()
            .chain(&r.feat_fg)
            .chain(r.z_clip.iter().flatten())
        {
            h.update(x.to_bits().to_le_bytes());
        }
        h.update(r.area_ratio.to_bits().to_le_bytes());
    }
    for x in ds.banks.feats_backbone.iter().chain(&ds.banks.feats_prior) {
        h.update(x.to_bits().to_le_bytes());
    }
    h.finalize().to_vec()
}

fn digest_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, Sha256::digest(fs::read(&p).unwrap()).to_vec())
        })
        .collect()
}

#[test]
fn thousand_record_round_trip_preserves_checksums() {
    // 4 base classes x 10 shots + 8 classes x 120 eval = 1000 records
    let cfg = SynthConfig {
        shots: 10,
        eval_per_class: 120,
        ..SynthConfig::new(11, 8, 32)
    };
    let ds = synth_generate(&cfg).unwrap();
    assert_eq!(ds.records.len(), 1000);
    let before = digest_records(&ds);

    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    write_dataset(&ds, &a).unwrap();
    let back = read_dataset(&a).unwrap();
    assert_eq!(digest_records(&back), before);
    assert_eq!(back, ds);

    write_dataset(&back, &b).unwrap();
    assert_eq!(digest_dir(&a), digest_dir(&b));
}

fn nearest(feat: &[f32], protos: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, p) in protos.iter().enumerate() {
        let s: f64 = feat.iter().zip(p).map(|(&x, y)| f64::from(x) * y).sum();
        if s > best.1 {
            best = (k, s);
        }
    }
    best.0
}

#[test]
fn foreground_view_is_easier_for_nearest_prototype() {
    let ds = synth_generate(&SynthConfig::new(7, 8, 64)).unwrap();
    let c = ds.class_count();
    // the generator's prototypes are not stored; the backbone bank holds
    // noisy copies of them
    let protos: Vec<Vec<f64>> = (0..c)
        .map(|k| {
            ds.banks.feats_backbone[k * ds.dim..(k + 1) * ds.dim]
                .iter()
                .map(|&x| f64::from(x))
                .collect()
        })
        .collect();
    let eval = ds.eval();
    let acc = |pick: fn(&fvg_core::dataio::SampleRecord) -> &[f32]| {
        eval.iter()
            .filter(|r| nearest(pick(r), &protos) == r.label)
            .count() as f64
            / eval.len() as f64
    };
    let fg = acc(|r| &r.feat_fg);
    let full = acc(|r| &r.feat_full);
    assert!(fg - full >= 0.10, "fg {fg:.3} full {full:.3}");
}
