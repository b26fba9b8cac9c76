//! End-to-end tests of the `cofiner` binary: exit codes, run-directory
//! layout, determinism of artifacts, and the suite outputs.

use cofiner::corpus::{generate_synthetic, write_conll, SyntheticSpec};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicU32, Ordering};

static DIR_COUNTER: AtomicU32 = AtomicU32::new(0);

fn scratch_dir(tag: &str) -> PathBuf {
    let n = DIR_COUNTER.fetch_add(1, Ordering::SeqCst);
    let dir = std::env::temp_dir().join(format!("cofiner-cli-{}-{tag}-{n}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cofiner"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Tiny fixture: fine/coarse/test conll files plus a config pointing at them.
fn write_fixture(dir: &Path) -> PathBuf {
    let spec = SyntheticSpec {
        coarse_types: 2,
        fine_per_coarse: 2,
        markers_per_fine: 4,
        filler_vocab: 30,
        fine_sentences: 24,
        coarse_sentences: 40,
        min_len: 4,
        max_len: 8,
        entity_density: 0.4,
        max_entity_len: 2,
        rho: 0.0,
    };
    let data = generate_synthetic(&spec, 5).unwrap();
    let mut test_spec = spec.clone();
    test_spec.fine_sentences = 40;
    test_spec.coarse_sentences = 0;
    let test = generate_synthetic(&test_spec, 99).unwrap().fine;
    write_conll(&data.fine, dir.join("fine.conll")).unwrap();
    write_conll(&data.coarse, dir.join("coarse.conll")).unwrap();
    write_conll(&test, dir.join("test.conll")).unwrap();
    let config = format!(
        "data.fine = {}\n\
         data.coarse = {}\n\
         data.test = {}\n\
         model.vocab_size = 128\n\
         model.embed_dim = 8\n\
         model.hidden_dim = 16\n\
         coarse_model.epochs = 2\n\
         step1.epochs = 2\n\
         joint.epochs = 2\n\
         batch_size = 8\n",
        dir.join("fine.conll").display(),
        dir.join("coarse.conll").display(),
        dir.join("test.conll").display(),
    );
    let path = dir.join("tiny.conf");
    std::fs::write(&path, config).unwrap();
    path
}

#[test]
fn help_and_usage_errors() {
    assert_code(&run(&["help"]), 0);
    assert_code(&run(&[]), 2);
    assert_code(&run(&["frobnicate"]), 2);
    assert_code(&run(&["sample", "--bogus"]), 2); // flag without value
    assert_code(&run(&["sample", "--in", "x.conll"]), 2); // missing flags
    assert_code(&run(&["suite", "nonsense", "--seeds", "1"]), 2);
}

#[test]
fn sample_writes_corpus_and_stats_deterministically() {
    let dir = scratch_dir("sample");
    write_fixture(&dir);
    let fine = dir.join("fine.conll");
    let out1 = dir.join("shot1.conll");
    let out2 = dir.join("shot2.conll");
    let st = run(&[
        "sample",
        "--in",
        fine.to_str().unwrap(),
        "--k",
        "2",
        "--seed",
        "7",
        "--out",
        out1.to_str().unwrap(),
    ]);
    assert_code(&st, 0);
    let st2 = run(&[
        "sample",
        "--in",
        fine.to_str().unwrap(),
        "--k",
        "2",
        "--seed",
        "7",
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert_code(&st2, 0);
    let a = std::fs::read(&out1).unwrap();
    let b = std::fs::read(&out2).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "same flags produce identical outputs");
    let stats = std::fs::read_to_string(format!("{}.stats.tsv", out1.display())).unwrap();
    assert!(stats.starts_with("entity_type\tcount\tstatus\n"));
    for line in stats.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        let count: usize = cols[1].parse().unwrap();
        assert!(cols[2] == "exhausted" || (2..=7).contains(&count), "{line}");
    }
    // argument error -> 2, missing file -> 1
    assert_code(
        &run(&[
            "sample",
            "--in",
            fine.to_str().unwrap(),
            "--k",
            "0",
            "--seed",
            "1",
            "--out",
            "x",
        ]),
        2,
    );
    assert_code(
        &run(&[
            "sample",
            "--in",
            "no-such-file.conll",
            "--k",
            "2",
            "--seed",
            "1",
            "--out",
            "x",
        ]),
        1,
    );
}

#[test]
fn train_produces_full_run_layout() {
    let dir = scratch_dir("train");
    let conf = write_fixture(&dir);
    let run_dir = dir.join("run");
    let out = run(&[
        "train",
        "--config",
        conf.to_str().unwrap(),
        "--seed",
        "3",
        "--run-dir",
        run_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("test_span_f1\t"), "stdout: {stdout}");
    for file in [
        "config-snapshot.conf",
        "checkpoints/step1.ckpt",
        "checkpoints/final.ckpt",
        "checkpoints/coarse-0.ckpt",
        "matrices/coarse-0.tsv",
        "masks/coarse-0.mask",
        "schemas/fine.types",
        "schemas/coarse-0.types",
        "reports/metrics.tsv",
        "reports/audit-coarse-0.tsv",
        "reports/summary.tsv",
    ] {
        assert!(run_dir.join(file).exists(), "missing {file}");
    }
    let metrics = std::fs::read_to_string(run_dir.join("reports/metrics.tsv")).unwrap();
    assert!(metrics.starts_with("epoch\tstage\tcorpus\tloss\tdev_span_f1\n"));
    // training without --seed is a usage error
    assert_code(&run(&["train", "--config", conf.to_str().unwrap()]), 2);
    // an existing run dir requires --force
    let again = run(&[
        "train",
        "--config",
        conf.to_str().unwrap(),
        "--seed",
        "3",
        "--run-dir",
        run_dir.to_str().unwrap(),
    ]);
    assert_code(&again, 1);
    let forced = run(&[
        "train",
        "--config",
        conf.to_str().unwrap(),
        "--seed",
        "3",
        "--run-dir",
        run_dir.to_str().unwrap(),
        "--force",
    ]);
    assert_code(&forced, 0);
}

#[test]
fn train_modes_and_determinism() {
    let dir = scratch_dir("modes");
    let conf = write_fixture(&dir);
    // no-coarse with epochs (1, 3) and (3, 1) must agree: both reduce to
    // fine-only training for 4 epochs
    let mut checkpoints = Vec::new();
    for (tag, s1, joint) in [("a", "1", "3"), ("b", "3", "1")] {
        let run_dir = dir.join(format!("nc-{tag}"));
        let out = run(&[
            "train",
            "--config",
            conf.to_str().unwrap(),
            "--seed",
            "11",
            "--mode",
            "no-coarse",
            "--step1-epochs",
            s1,
            "--joint-epochs",
            joint,
            "--run-dir",
            run_dir.to_str().unwrap(),
        ]);
        assert_code(&out, 0);
        checkpoints.push(std::fs::read(run_dir.join("checkpoints/final.ckpt")).unwrap());
    }
    assert_eq!(
        checkpoints[0], checkpoints[1],
        "no-coarse training reduces to plain fine-only training"
    );
    // no-filtering mode trains with an all-true mask
    let nf_dir = dir.join("nf");
    let out = run(&[
        "train",
        "--config",
        conf.to_str().unwrap(),
        "--seed",
        "11",
        "--mode",
        "no-filtering",
        "--run-dir",
        nf_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let mask = std::fs::read_to_string(nf_dir.join("masks/coarse-0.mask")).unwrap();
    let body: String = mask.lines().skip(1).collect();
    assert!(body.chars().all(|c| c == '1'), "all-true mask expected");
}

#[test]
fn matrix_audit_eval_roundtrip() {
    let dir = scratch_dir("inspect");
    let conf = write_fixture(&dir);
    let run_dir = dir.join("run");
    assert_code(
        &run(&[
            "train",
            "--config",
            conf.to_str().unwrap(),
            "--seed",
            "4",
            "--run-dir",
            run_dir.to_str().unwrap(),
        ]),
        0,
    );
    let m = run(&["matrix", "--run", run_dir.to_str().unwrap(), "--print"]);
    assert_code(&m, 0);
    let tsv = String::from_utf8_lossy(&m.stdout);
    assert!(tsv.starts_with("fine_type\t"), "matrix tsv: {tsv}");
    assert_eq!(
        tsv.lines().count(),
        1 + 4,
        "header plus one row per fine type"
    );

    let a = run(&["audit", "--run", run_dir.to_str().unwrap()]);
    assert_code(&a, 0);
    let audit = String::from_utf8_lossy(&a.stdout);
    assert!(audit.starts_with("coarse_type\ttokens\tfiltered\tproportion\tdelta_f1\n"));

    // fine-schema eval of the final checkpoint
    let e = run(&[
        "eval",
        "--model",
        run_dir.join("checkpoints/final.ckpt").to_str().unwrap(),
        "--data",
        dir.join("test.conll").to_str().unwrap(),
        "--report-tsv",
        dir.join("eval.tsv").to_str().unwrap(),
    ]);
    assert_code(&e, 0);
    assert!(String::from_utf8_lossy(&e.stdout).contains("micro"));
    let report = std::fs::read_to_string(dir.join("eval.tsv")).unwrap();
    assert!(report.starts_with("type\tgold\tpredicted\tcorrect\t"));

    // coarse-schema eval through the exported matrix
    let e2 = run(&[
        "eval",
        "--model",
        run_dir.join("checkpoints/final.ckpt").to_str().unwrap(),
        "--data",
        dir.join("coarse.conll").to_str().unwrap(),
        "--matrix",
        run_dir.join("matrices/coarse-0.tsv").to_str().unwrap(),
    ]);
    assert_code(&e2, 0);

    // head/schema mismatch without a matrix is an argument error
    let e3 = run(&[
        "eval",
        "--model",
        run_dir.join("checkpoints/final.ckpt").to_str().unwrap(),
        "--data",
        dir.join("coarse.conll").to_str().unwrap(),
    ]);
    assert_code(&e3, 2);
}

#[test]
fn suite_kshot_topk_ablation() {
    let dir = scratch_dir("suite");
    let conf = write_fixture(&dir);
    let run1 = dir.join("kshot1");
    let out = run(&[
        "suite",
        "kshot",
        "--config",
        conf.to_str().unwrap(),
        "--k",
        "1,2",
        "--seeds",
        "1,2",
        "--run-dir",
        run1.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let tsv = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(tsv.contains("NOT-REPRODUCIBLE-AT-DESK-SCALE"));
    assert!(
        tsv.contains("metric\t1\t2"),
        "one column per requested K: {tsv}"
    );
    assert!(run1.join("reports/kshot-curve.tsv").exists());
    // --jobs parallelism must not change the output
    let run2 = dir.join("kshot2");
    let out2 = run(&[
        "suite",
        "kshot",
        "--config",
        conf.to_str().unwrap(),
        "--k",
        "1,2",
        "--seeds",
        "1,2",
        "--jobs",
        "2",
        "--run-dir",
        run2.to_str().unwrap(),
    ]);
    assert_code(&out2, 0);
    assert_eq!(
        tsv,
        String::from_utf8_lossy(&out2.stdout),
        "jobs changed results"
    );

    let run3 = dir.join("topk");
    let out3 = run(&[
        "suite",
        "topk",
        "--config",
        conf.to_str().unwrap(),
        "--k",
        "1,all",
        "--kshot",
        "2",
        "--seeds",
        "1",
        "--run-dir",
        run3.to_str().unwrap(),
    ]);
    assert_code(&out3, 0);
    let sweep = String::from_utf8_lossy(&out3.stdout);
    assert!(sweep.starts_with("k\tmean_f1"), "{sweep}");
    assert!(
        sweep.contains("\nall\t"),
        "k column covers requested values: {sweep}"
    );

    let run4 = dir.join("ablation");
    let out4 = run(&[
        "suite",
        "ablation",
        "--config",
        conf.to_str().unwrap(),
        "--seed",
        "2",
        "--run-dir",
        run4.to_str().unwrap(),
    ]);
    assert_code(&out4, 0);
    let table = String::from_utf8_lossy(&out4.stdout);
    assert!(table.starts_with("variant\tdev_f1\ttest_f1\n"));
    for variant in ["full", "no_filtering", "no_coarse"] {
        assert!(table.contains(variant), "missing {variant} in {table}");
    }
}
