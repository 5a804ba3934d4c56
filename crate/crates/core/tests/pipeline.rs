use std::path::Path;

use evasim::corpus::GenConfig;
use evasim::detect::DetectorId;
use evasim::pipeline::{detect_corpus, read_split, run_all, Layout, PipelineConfig, Report, REPORT_SCHEMA};

fn config(threads: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(5);
    cfg.corpus = GenConfig {
        seed: 5,
        n_benign: 16,
        n_malware: 16,
        ..GenConfig::default()
    };
    cfg.max_iterations = 3;
    cfg.threads = threads;
    cfg
}

fn run(root: &Path, threads: usize) -> (Layout, Report) {
    let layout = Layout::under(root);
    let report = run_all(&layout, &config(threads)).unwrap();
    (layout, report)
}

fn read(layout: &Layout, rel: &str) -> Vec<u8> {
    std::fs::read(layout.out.join(rel)).unwrap()
}

#[test]
fn small_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, report) = run(&tmp.path().join("a"), 1);

    // the written report validates against the bundled schema and reads back
    let text = read(&a, "report/report.json");
    let value: serde_json::Value = serde_json::from_slice(&text).unwrap();
    let schema: serde_json::Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    let compiled = jsonschema::JSONSchema::compile(&schema).unwrap();
    if let Err(errors) = compiled.validate(&value) {
        let msgs: Vec<String> = errors.map(|e| format!("{} at {}", e, e.instance_path)).collect();
        panic!("schema violations: {msgs:?}");
    }
    let back: Report = serde_json::from_slice(&text).unwrap();
    assert_eq!(back.sets.len(), report.sets.len());
    let mut broken = value.clone();
    broken.as_object_mut().unwrap().remove("seed");
    assert!(!compiled.is_valid(&broken));

    assert_eq!(report.evaluation_set.benign + report.evaluation_set.malware, 16);
    let names: Vec<&str> = report.sets.iter().map(|s| s.name.as_str()).collect();
    for want in ["rawbyte", "knn", "ctph", "ctph_chunks_ipr"] {
        assert!(names.contains(&want), "{names:?}");
    }
    let csv = String::from_utf8(read(&a, "report/tables.csv")).unwrap();
    assert!(csv.lines().count() > report.sets.len());

    // the hash detector holds the evaluation half, so it recognizes every original
    let ctph = report.baseline.iter().find(|r| r.name == "ctph").unwrap();
    assert_eq!((ctph.cm.fp, ctph.cm.fn_), (0, 0));
    let split = read_split(&a).unwrap();
    for line in detect_corpus(&a, 1).unwrap() {
        if split.test.contains(&line.id) {
            assert_eq!(line.verdicts[DetectorId::Ctph as usize].label, line.label);
        }
    }

    // a second run with a different worker count writes the same artefacts
    let (b, _) = run(&tmp.path().join("b"), 2);
    for rel in ["report/report.json", "report/tables.csv"] {
        assert_eq!(read(&a, rel), read(&b, rel), "{rel}");
    }
    for set in &report.sets {
        let dir = format!("attacks/{}/traces", set.name);
        let mut files: Vec<_> = std::fs::read_dir(a.out.join(&dir))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        files.sort();
        assert!(!files.is_empty());
        for f in files {
            let rel = format!("{dir}/{}", f.to_string_lossy());
            assert_eq!(read(&a, &rel), read(&b, &rel), "{rel}");
        }
    }
}

#[test]
fn training_refuses_a_missing_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = Layout::under(tmp.path());
    assert!(evasim::pipeline::train(&layout, &evasim::pipeline::TrainOptions::new(0), 1).is_err());
}
