//! Config + flags -> corpora and training plan.
//!
//! Data comes either from CoNLL files (`data.fine`, `data.coarse`, optional
//! `data.dev` / `data.test`) or from the built-in synthetic benchmark
//! (`data.synthetic = benchmark`, tunable through `synthetic.*` keys). A
//! `sample.k` key K-shot-samples the fine corpus before training.

use crate::flags::Flags;
use cofiner::corpus::{generate_synthetic, read_conll, sample_kshot, Corpus, SyntheticSpec};
use cofiner::f2c::TopK;
use cofiner::trainer::{ConfigMap, TrainPlan};
use cofiner::{Error, Result};
use std::path::{Path, PathBuf};

/// Flags that override a config key 1:1.
const KEY_FLAGS: &[(&str, &str)] = &[
    ("seed", "seed"),
    ("sample-k", "sample.k"),
    ("batch-size", "batch_size"),
    ("step1-epochs", "step1.epochs"),
    ("joint-epochs", "joint.epochs"),
    ("coarse-model-epochs", "coarse_model.epochs"),
    ("vocab-size", "model.vocab_size"),
    ("embed-dim", "model.embed_dim"),
    ("window", "model.window"),
    ("hidden-dim", "model.hidden_dim"),
    ("dropout", "model.dropout"),
    ("learning-rate", "optim.learning_rate"),
    ("weight-decay", "optim.weight_decay"),
    ("fine", "data.fine"),
    ("coarse", "data.coarse"),
    ("dev", "data.dev"),
    ("test", "data.test"),
    ("synthetic", "data.synthetic"),
];

const SWITCH_FLAGS: &[(&str, &str)] = &[
    ("learnable-matrix", "mode.learnable_matrix"),
    ("fine-first", "mode.fine_first"),
    ("reset-optimizer", "mode.reset_optimizer"),
    ("refilter-every-epoch", "mode.refilter_every_epoch"),
];

pub const TRAIN_SWITCHES: &[&str] = &[
    "force",
    "print",
    "learnable-matrix",
    "fine-first",
    "reset-optimizer",
    "refilter-every-epoch",
];

/// Load the config file (if any) and fold CLI flags over it.
pub fn resolve_config(flags: &Flags) -> Result<ConfigMap> {
    let mut cfg = match flags.get("config") {
        Some(path) => ConfigMap::load(path)?,
        None => ConfigMap::default(),
    };
    for (flag, key) in KEY_FLAGS {
        if let Some(v) = flags.get(flag) {
            cfg.set(key, v);
        }
    }
    for (flag, key) in SWITCH_FLAGS {
        if flags.has(flag) {
            cfg.set(key, "true");
        }
    }
    if let Some(mode) = flags.get("mode") {
        match mode {
            "no-filtering" => cfg.set("mode.no_filtering", "true"),
            "no-coarse" => cfg.set("mode.no_coarse", "true"),
            "full" => {}
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown --mode {other:?} (expected no-filtering, no-coarse or full)"
                )))
            }
        }
    }
    Ok(cfg)
}

fn synthetic_spec(cfg: &ConfigMap) -> Result<SyntheticSpec> {
    let mut spec = SyntheticSpec::benchmark();
    spec.markers_per_fine = 8;
    if let Some(v) = cfg.get_usize("synthetic.coarse_types")? {
        spec.coarse_types = v;
    }
    if let Some(v) = cfg.get_usize("synthetic.fine_per_coarse")? {
        spec.fine_per_coarse = v;
    }
    if let Some(v) = cfg.get_usize("synthetic.markers_per_fine")? {
        spec.markers_per_fine = v;
    }
    if let Some(v) = cfg.get_usize("synthetic.filler_vocab")? {
        spec.filler_vocab = v;
    }
    if let Some(v) = cfg.get_usize("synthetic.fine_sentences")? {
        spec.fine_sentences = v;
    }
    if let Some(v) = cfg.get_usize("synthetic.coarse_sentences")? {
        spec.coarse_sentences = v;
    }
    if let Some(v) = cfg.get_f64("synthetic.rho")? {
        spec.rho = v;
    }
    if let Some(v) = cfg.get_usize("synthetic.min_len")? {
        spec.min_len = v;
    }
    if let Some(v) = cfg.get_usize("synthetic.max_len")? {
        spec.max_len = v;
    }
    Ok(spec)
}

/// The corpora a run or suite works with.
pub struct DataBundle {
    /// Fine corpus before any K-shot sampling (suites sample from it).
    pub fine_pool: Corpus,
    pub coarse: Vec<Corpus>,
    pub dev: Option<Corpus>,
    pub test: Option<Corpus>,
}

pub fn load_data(cfg: &ConfigMap, seed: u64) -> Result<DataBundle> {
    if let Some(kind) = cfg.get("data.synthetic") {
        if kind != "benchmark" {
            return Err(Error::InvalidArgument(format!(
                "unknown data.synthetic = {kind:?} (only \"benchmark\")"
            )));
        }
        let spec = synthetic_spec(cfg)?;
        let data = generate_synthetic(&spec, seed)?;
        let mut test_spec = spec.clone();
        test_spec.fine_sentences = cfg.get_usize("synthetic.test_sentences")?.unwrap_or(300);
        test_spec.coarse_sentences = 0;
        let test = generate_synthetic(&test_spec, seed ^ 0xfeed_babe)?.fine;
        return Ok(DataBundle {
            fine_pool: data.fine,
            coarse: vec![data.coarse],
            dev: None,
            test: Some(test),
        });
    }
    let fine_path = cfg.get("data.fine").ok_or_else(|| {
        Error::InvalidArgument("config needs data.fine (or data.synthetic)".into())
    })?;
    let fine_pool = read_conll(fine_path, None)?.corpus;
    let mut coarse = Vec::new();
    if let Some(paths) = cfg.get("data.coarse") {
        for p in paths.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            coarse.push(read_conll(p, None)?.corpus);
        }
    }
    let dev = match cfg.get("data.dev") {
        Some(p) => Some(read_conll(p, Some(&fine_pool.schema))?.corpus),
        None => None,
    };
    let test = match cfg.get("data.test") {
        Some(p) => Some(read_conll(p, Some(&fine_pool.schema))?.corpus),
        None => None,
    };
    Ok(DataBundle {
        fine_pool,
        coarse,
        dev,
        test,
    })
}

/// Assemble the plan: sample the fine corpus when `sample.k` is set, then
/// apply every plan-level key.
pub fn build_plan(cfg: &ConfigMap, data: DataBundle, seed: u64) -> Result<TrainPlan> {
    let fine = match cfg.get_usize("sample.k")? {
        Some(k) if k > 0 => sample_kshot(&data.fine_pool, k, seed)?.corpus,
        _ => data.fine_pool,
    };
    let mut plan = TrainPlan::new(fine, data.coarse, seed);
    plan.dev = data.dev;
    plan.test = data.test;
    apply_plan_keys(cfg, &mut plan)?;
    plan.validate()?;
    Ok(plan)
}

pub fn apply_plan_keys(cfg: &ConfigMap, plan: &mut TrainPlan) -> Result<()> {
    if let Some(v) = cfg.get_usize("model.vocab_size")? {
        plan.vocab_size = v;
    }
    if let Some(v) = cfg.get_usize("model.embed_dim")? {
        plan.embed_dim = v;
    }
    if let Some(v) = cfg.get_usize("model.window")? {
        plan.window = v;
    }
    if let Some(v) = cfg.get_usize("model.hidden_dim")? {
        plan.hidden_dim = v;
    }
    if let Some(v) = cfg.get_f32("model.dropout")? {
        plan.dropout = v;
    }
    if let Some(v) = cfg.get_f32("optim.learning_rate")? {
        plan.optim.learning_rate = v;
    }
    if let Some(v) = cfg.get_f32("optim.weight_decay")? {
        plan.optim.weight_decay = v;
    }
    if let Some(v) = cfg.get_usize("coarse_model.epochs")? {
        plan.coarse_model_epochs = v;
    }
    if let Some(v) = cfg.get_usize("step1.epochs")? {
        plan.step1_epochs = v;
    }
    if let Some(v) = cfg.get_usize("joint.epochs")? {
        plan.joint_epochs = v;
    }
    if let Some(v) = cfg.get_usize("batch_size")? {
        plan.batch_size = v;
    }
    if let Some(v) = cfg.get("k") {
        plan.topk = v.parse::<TopK>()?;
    }
    if let Some(v) = cfg.get_bool("mode.no_filtering")? {
        plan.no_filtering = v;
    }
    if let Some(v) = cfg.get_bool("mode.no_coarse")? {
        plan.no_coarse = v;
    }
    if let Some(v) = cfg.get_bool("mode.learnable_matrix")? {
        plan.learnable_matrix = v;
    }
    if let Some(v) = cfg.get_bool("mode.fine_first")? {
        plan.fine_first = v;
    }
    if let Some(v) = cfg.get_bool("mode.reset_optimizer")? {
        plan.reset_optimizer = v;
    }
    if let Some(v) = cfg.get_bool("mode.refilter_every_epoch")? {
        plan.refilter_every_epoch = v;
    }
    if let Some(v) = cfg.get("joint.normalize") {
        plan.normalize_surviving = match v {
            "total" => false,
            "surviving" => true,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "joint.normalize = {other:?} (expected total or surviving)"
                )))
            }
        };
    }
    Ok(())
}

/// Resolve the run directory: `--run-dir`, else `$COFINER_RUN_DIR/<label>`,
/// else `./runs/<label>`. The directory is created atomically; an existing
/// one requires `--force`.
pub fn prepare_run_dir(flags: &Flags, label: &str) -> Result<PathBuf> {
    let dir = match flags.get("run-dir") {
        Some(d) => PathBuf::from(d),
        None => {
            let root = std::env::var("COFINER_RUN_DIR").unwrap_or_else(|_| "runs".into());
            Path::new(&root).join(label)
        }
    };
    if let Some(parent) = dir.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    match std::fs::create_dir(&dir) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
            if !flags.has("force") {
                return Err(Error::InvalidState(format!(
                    "run directory {} exists; pass --force to reuse it",
                    dir.display()
                )));
            }
        }
        Err(e) => return Err(Error::io(dir.display().to_string(), e)),
    }
    for sub in ["checkpoints", "matrices", "masks", "reports", "schemas"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
    }
    Ok(dir)
}
