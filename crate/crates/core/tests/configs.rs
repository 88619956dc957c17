use std::path::PathBuf;

use codepmp::config::{load, RunConfig, Stage, SynthConfig};
use codepmp::schedule::ScheduleKind;
use codepmp::sweep::SweepSpec;

fn shipped() -> Vec<PathBuf> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    files.sort();
    files
}

#[test]
fn every_shipped_config_parses_and_validates() {
    let files = shipped();
    assert!(files.len() >= 12);
    for f in files {
        let name = f.file_stem().unwrap().to_string_lossy().into_owned();
        if name.starts_with("synth") {
            let c: SynthConfig = load(&f, &[]).unwrap();
            assert!(c.n_pairs > 0, "{name}");
        } else if name.starts_with("sweep") {
            let s: SweepSpec = load(&f, &[]).unwrap();
            s.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        } else {
            let c: RunConfig = load(&f, &[]).unwrap();
            c.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}

#[test]
fn table_presets_carry_the_published_values() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let get = |n: &str| -> RunConfig { load(&dir.join(format!("{n}.toml")), &[]).unwrap() };
    let rows = [
        ("pmp-1.5b", Stage::Pmp, 1024, 3e-6, ScheduleKind::Wsd, 0.03, 0.1, 0.1),
        ("pmp-7b", Stage::Pmp, 1024, 1e-6, ScheduleKind::Wsd, 0.03, 0.1, 0.1),
        ("rm-math-1.5b", Stage::RmFinetune, 64, 1e-6, ScheduleKind::Wcd, 0.03, 0.0, 0.0),
        ("rm-math-7b", Stage::RmFinetune, 64, 3e-7, ScheduleKind::Wcd, 0.03, 0.0, 0.0),
        ("rm-logic-1.5b", Stage::RmFinetune, 64, 1e-5, ScheduleKind::Wcd, 0.25, 0.0, 0.0),
        ("rm-logic-7b", Stage::RmFinetune, 64, 1e-5, ScheduleKind::Wcd, 0.25, 0.0, 0.0),
    ];
    for (name, stage, bs, lr, kind, warm, decay, wd) in rows {
        let c = get(name);
        assert_eq!(c.stage, stage, "{name}");
        assert_eq!((c.epoch, c.bs, c.max_length), (1, bs, 1024), "{name}");
        assert_eq!((c.lr, c.lr_scheduler), (lr, kind), "{name}");
        assert_eq!((c.warmup_ratio, c.decay_ratio, c.weight_decay), (warm, decay, wd), "{name}");
    }
}
