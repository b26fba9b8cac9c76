//! Training orchestration.
//!
//! Step 1 trains the fine model on the fine corpus. Step 2 trains one coarse
//! tagger per coarse corpus and builds that corpus's F2C matrix from its
//! reannotation of the fine corpus. Step 3 builds the consistency mask with
//! the frozen step-1 model. Step 4 trains jointly, alternating one pass over
//! each coarse corpus and one pass over the fine corpus per epoch, with the
//! optimizer state carried over from step 1.
//!
//! Every pass derives its shuffle/dropout randomness from (run seed, corpus
//! role, pass index), so recombining stages never shifts another stage's
//! stream: `no_coarse` joint training is bit-identical to simply continuing
//! fine-only training.

mod config;

pub use config::ConfigMap;

use crate::corpus::{Corpus, TagSchema};
use crate::eval::evaluate;
use crate::f2c::{count_cooccurrence, normalize, refine_topk, F2CMatrix, Provenance, TopK};
use crate::filtering::{build_mask, ConsistencyMask};
use crate::model::{
    backward, checkpoint_bytes, coarse_loss_normalized, featurize, fine_loss, forward,
    load_checkpoint_bytes, optimizer_step, CoarseNorm, ModelConfig, OptimConfig, OptimizerState,
    TokenClassifier,
};
use crate::rng::{fnv1a, stream, Rng};
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Everything one training run needs.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub fine: Corpus,
    pub coarse: Vec<Corpus>,
    /// Explicit dev corpus; when absent, 10% of the fine sentences are held
    /// out for logging.
    pub dev: Option<Corpus>,
    pub test: Option<Corpus>,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub window: usize,
    pub hidden_dim: usize,
    pub dropout: f32,
    pub optim: OptimConfig,
    pub coarse_model_epochs: usize,
    pub step1_epochs: usize,
    pub joint_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub topk: TopK,
    pub no_filtering: bool,
    pub no_coarse: bool,
    pub learnable_matrix: bool,
    /// Run the fine pass before the coarse passes within each joint epoch.
    pub fine_first: bool,
    pub reset_optimizer: bool,
    pub refilter_every_epoch: bool,
    /// Reserved variant: divide the coarse loss by surviving tokens instead
    /// of the sentence's token count. Off by default.
    pub normalize_surviving: bool,
}

impl TrainPlan {
    pub fn new(fine: Corpus, coarse: Vec<Corpus>, seed: u64) -> Self {
        TrainPlan {
            fine,
            coarse,
            dev: None,
            test: None,
            vocab_size: 4096,
            embed_dim: 32,
            window: 2,
            hidden_dim: 64,
            dropout: 0.1,
            optim: OptimConfig::default(),
            coarse_model_epochs: 20,
            step1_epochs: 30,
            joint_epochs: 30,
            batch_size: 16,
            seed,
            topk: TopK::default(),
            no_filtering: false,
            no_coarse: false,
            learnable_matrix: false,
            fine_first: false,
            reset_optimizer: false,
            refilter_every_epoch: false,
            normalize_surviving: false,
        }
    }

    /// Clone the settings onto a different fine corpus and seed.
    pub fn derive(&self, fine: Corpus, seed: u64) -> TrainPlan {
        TrainPlan {
            fine,
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fine.is_empty() {
            return Err(Error::InvalidArgument("fine corpus is empty".into()));
        }
        if self.step1_epochs < 1 || self.joint_epochs < 1 {
            return Err(Error::InvalidArgument(
                "epoch counts must be at least 1".into(),
            ));
        }
        if !self.coarse.is_empty() && self.coarse_model_epochs < 1 {
            return Err(Error::InvalidArgument(
                "epoch counts must be at least 1".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        for c in &self.coarse {
            if self.fine.schema.num_types() <= c.schema.num_types() {
                return Err(Error::InvalidArgument(format!(
                    "coarse corpus {:?} has {} types, not fewer than the fine corpus's {}",
                    c.name,
                    c.schema.num_types(),
                    self.fine.schema.num_types()
                )));
            }
        }
        self.fine_model_config().validate()?;
        Ok(())
    }

    fn model_config(&self, num_tags: usize, role: &str) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            embed_dim: self.embed_dim,
            window: self.window,
            hidden_dim: self.hidden_dim,
            num_tags,
            dropout: self.dropout,
            seed: stream(self.seed, role, 0),
        }
    }

    pub fn fine_model_config(&self) -> ModelConfig {
        self.model_config(self.fine.schema.num_tags(), "fine-model")
    }

    fn corpus_fingerprint(out: &mut String, c: &Corpus) {
        let _ = write!(
            out,
            "|{}:{}:{}:{}",
            c.name,
            c.len(),
            c.total_tokens(),
            c.schema.entity_types().join(",")
        );
    }

    /// Stable fingerprint of the plan, used to tag artifacts.
    pub fn hash(&self) -> String {
        let mut s = String::new();
        Self::corpus_fingerprint(&mut s, &self.fine);
        for c in &self.coarse {
            Self::corpus_fingerprint(&mut s, c);
        }
        if let Some(d) = &self.dev {
            Self::corpus_fingerprint(&mut s, d);
        }
        let _ = write!(
            s,
            "|v{}e{}w{}h{}d{}|lr{}wd{}|ep{},{},{}|b{}|s{}|k{}|f{}{}{}{}{}{}{}",
            self.vocab_size,
            self.embed_dim,
            self.window,
            self.hidden_dim,
            self.dropout,
            self.optim.learning_rate,
            self.optim.weight_decay,
            self.coarse_model_epochs,
            self.step1_epochs,
            self.joint_epochs,
            self.batch_size,
            self.seed,
            self.topk,
            u8::from(self.no_filtering),
            u8::from(self.no_coarse),
            u8::from(self.learnable_matrix),
            u8::from(self.fine_first),
            u8::from(self.reset_optimizer),
            u8::from(self.refilter_every_epoch),
            u8::from(self.normalize_surviving),
        );
        format!("{:016x}", fnv1a(s.as_bytes()))
    }

    fn step1_key(&self, fine_train: &Corpus) -> u64 {
        let mut s = String::new();
        Self::corpus_fingerprint(&mut s, fine_train);
        let _ = write!(
            s,
            "|v{}e{}w{}h{}d{}|lr{}wd{}b1{}b2{}eps{}|ep{}|b{}|s{}",
            self.vocab_size,
            self.embed_dim,
            self.window,
            self.hidden_dim,
            self.dropout,
            self.optim.learning_rate,
            self.optim.weight_decay,
            self.optim.beta1,
            self.optim.beta2,
            self.optim.epsilon,
            self.step1_epochs,
            self.batch_size,
            self.seed
        );
        fnv1a(s.as_bytes())
    }

    fn coarse_key(&self, corpus: &Corpus, index: usize) -> u64 {
        let mut s = String::new();
        Self::corpus_fingerprint(&mut s, corpus);
        let _ = write!(
            s,
            "|i{index}|v{}e{}w{}h{}d{}|lr{}wd{}|ep{}|b{}|s{}",
            self.vocab_size,
            self.embed_dim,
            self.window,
            self.hidden_dim,
            self.dropout,
            self.optim.learning_rate,
            self.optim.weight_decay,
            self.coarse_model_epochs,
            self.batch_size,
            self.seed
        );
        fnv1a(s.as_bytes())
    }
}

/// One line of the metric log.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub epoch: usize,
    pub stage: String,
    pub corpus: String,
    pub loss: f64,
    pub dev_f1: Option<f64>,
}

/// Render the metric log as TSV (columns epoch, stage, corpus, loss,
/// dev_span_f1).
pub fn metrics_tsv(rows: &[MetricRow]) -> String {
    let mut out = String::from("epoch\tstage\tcorpus\tloss\tdev_span_f1\n");
    for r in rows {
        let dev = r
            .dev_f1
            .map(|f| format!("{f:.6}"))
            .unwrap_or_else(|| "".into());
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{}",
            r.epoch, r.stage, r.corpus, r.loss, dev
        );
    }
    out
}

/// A model plus optimizer state and per-corpus pass counters.
///
/// Pass counters key the randomness streams: the i-th pass over a given
/// corpus role always uses the same shuffle and dropout stream, no matter
/// which stage issues it.
#[derive(Debug, Clone)]
pub struct Session {
    pub model: TokenClassifier,
    pub opt: OptimizerState,
    seed: u64,
    batch_size: usize,
    passes: BTreeMap<String, u64>,
}

impl Session {
    pub fn new(
        config: ModelConfig,
        optim: OptimConfig,
        seed: u64,
        batch_size: usize,
    ) -> Result<Self> {
        let model = TokenClassifier::new(config)?;
        let opt = OptimizerState::new(&model, optim);
        Ok(Session {
            model,
            opt,
            seed,
            batch_size,
            passes: BTreeMap::new(),
        })
    }

    fn pass_rng(&mut self, role: &str) -> Rng {
        let counter = self.passes.entry(role.to_string()).or_insert(0);
        *counter += 1;
        Rng::new(stream(self.seed, role, *counter))
    }

    /// One shuffled pass of plain cross-entropy training over a corpus.
    /// Returns the mean per-sentence loss.
    pub fn supervised_pass(&mut self, corpus: &Corpus, role: &str) -> Result<f64> {
        let mut rng = self.pass_rng(role);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        rng.shuffle(&mut order);
        let mut total_loss = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(self.batch_size) {
            let scale = 1.0 / batch.len() as f32;
            for &si in batch {
                let sent = &corpus.sentences[si];
                let buckets = featurize(sent, &self.model.config);
                let (probs, cache) = forward(&self.model, &buckets, true, Some(&mut rng));
                let mut fl = fine_loss(&probs, &sent.tags)?;
                for d in fl.dprobs.iter_mut() {
                    *d *= scale;
                }
                backward(&mut self.model, &cache, &fl.dprobs)?;
                total_loss += fl.loss;
            }
            optimizer_step(&mut self.model, &mut self.opt);
            steps += 1;
        }
        debug_assert_eq!(steps, corpus.len().div_ceil(self.batch_size));
        Ok(total_loss / corpus.len() as f64)
    }

    /// One shuffled pass of masked coarse training. Sentences whose mask is
    /// entirely false contribute zero loss and zero gradient, so they are
    /// skipped outright; a batch with no surviving sentence takes no optimizer
    /// step (an all-false mask makes the pass a true no-op).
    pub fn coarse_pass(
        &mut self,
        corpus: &Corpus,
        matrix: &mut F2CMatrix,
        mask: &ConsistencyMask,
        role: &str,
        norm: CoarseNorm,
    ) -> Result<f64> {
        if mask.sentence_masks.len() != corpus.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask covers {} sentences, corpus has {}",
                mask.sentence_masks.len(),
                corpus.len()
            )));
        }
        let mut rng = self.pass_rng(role);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        rng.shuffle(&mut order);
        let mut total_loss = 0.0;
        let mut processed = 0usize;
        let mut skipped = 0usize;
        let mut steps = 0usize;
        let learnable = matrix.learnable_enabled();
        for batch in order.chunks(self.batch_size) {
            let active: Vec<usize> = batch
                .iter()
                .copied()
                .filter(|&si| mask.sentence(si).iter().any(|&b| b))
                .collect();
            skipped += batch.len() - active.len();
            if active.is_empty() {
                continue;
            }
            let scale = 1.0 / active.len() as f32;
            for &si in &active {
                let sent = &corpus.sentences[si];
                let buckets = featurize(sent, &self.model.config);
                let (probs, cache) = forward(&self.model, &buckets, true, Some(&mut rng));
                let mut cl =
                    coarse_loss_normalized(&probs, matrix, &sent.tags, mask.sentence(si), norm)?;
                for d in cl.dprobs.iter_mut() {
                    *d *= scale;
                }
                backward(&mut self.model, &cache, &cl.dprobs)?;
                if learnable {
                    for d in cl.d_coarse.iter_mut() {
                        *d *= scale as f64;
                    }
                    matrix.accumulate_learnable(&probs, &cl.d_coarse)?;
                }
                total_loss += cl.loss;
                processed += 1;
            }
            optimizer_step(&mut self.model, &mut self.opt);
            if learnable {
                matrix.learnable_step(&self.opt.config)?;
            }
            steps += 1;
        }
        if skipped == 0 {
            debug_assert_eq!(steps, corpus.len().div_ceil(self.batch_size));
        }
        Ok(if processed > 0 {
            total_loss / processed as f64
        } else {
            0.0
        })
    }
}

/// Split off a 10% dev set when the plan has no explicit one. The remaining
/// training sentences keep their original order.
pub fn fine_split(plan: &TrainPlan) -> Result<(Corpus, Option<Corpus>)> {
    if plan.dev.is_some() {
        return Ok((plan.fine.clone(), None));
    }
    let n = plan.fine.len();
    let dev_n = n / 10;
    if dev_n == 0 {
        return Ok((plan.fine.clone(), None));
    }
    let mut rng = Rng::new(stream(plan.seed, "devsplit", 0));
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let mut is_dev = vec![false; n];
    for &i in idx.iter().take(dev_n) {
        is_dev[i] = true;
    }
    let mut train_sents = Vec::with_capacity(n - dev_n);
    let mut dev_sents = Vec::with_capacity(dev_n);
    for (s, &d) in plan.fine.sentences.iter().zip(&is_dev) {
        if d {
            dev_sents.push(s.clone());
        } else {
            train_sents.push(s.clone());
        }
    }
    Ok((
        Corpus::new(
            plan.fine.name.clone(),
            plan.fine.schema.clone(),
            train_sents,
        )?,
        Some(Corpus::new(
            format!("{}-dev", plan.fine.name),
            plan.fine.schema.clone(),
            dev_sents,
        )?),
    ))
}

/// Step 1 standalone: train the fine model only. This is also the `w/o
/// coarse` baseline.
pub fn train_fine(plan: &TrainPlan) -> Result<(Session, Vec<MetricRow>)> {
    plan.validate()?;
    let (fine_train, dev_holdout) = fine_split(plan)?;
    let dev = plan.dev.as_ref().or(dev_holdout.as_ref());
    let mut session = Session::new(
        plan.fine_model_config(),
        plan.optim.clone(),
        plan.seed,
        plan.batch_size,
    )?;
    let mut metrics = Vec::new();
    run_fine_stage(
        &mut session,
        &fine_train,
        dev,
        plan.step1_epochs,
        "step1",
        &mut metrics,
    )?;
    Ok((session, metrics))
}

fn run_fine_stage(
    session: &mut Session,
    fine_train: &Corpus,
    dev: Option<&Corpus>,
    epochs: usize,
    stage: &str,
    metrics: &mut Vec<MetricRow>,
) -> Result<()> {
    for epoch in 1..=epochs {
        let loss = session.supervised_pass(fine_train, "fine")?;
        let dev_f1 = match dev {
            Some(d) if !d.is_empty() => {
                Some(evaluate(&session.model, None, d, &d.schema)?.micro.f1)
            }
            _ => None,
        };
        metrics.push(MetricRow {
            epoch,
            stage: stage.to_string(),
            corpus: fine_train.name.clone(),
            loss,
            dev_f1,
        });
    }
    Ok(())
}

/// Step 2 support: train a tagger over the coarse schema, used solely to
/// reannotate the fine corpus. Identical machinery to fine training.
pub fn train_coarse_model(
    plan: &TrainPlan,
    coarse: &Corpus,
    index: usize,
) -> Result<(Session, Vec<MetricRow>)> {
    if coarse.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "coarse corpus {:?} is empty",
            coarse.name
        )));
    }
    let role = format!("coarse-model:{index}");
    let config = plan.model_config(coarse.schema.num_tags(), &role);
    let mut session = Session::new(config, plan.optim.clone(), plan.seed, plan.batch_size)?;
    let mut metrics = Vec::new();
    for epoch in 1..=plan.coarse_model_epochs {
        let loss = session.supervised_pass(coarse, &role)?;
        metrics.push(MetricRow {
            epoch,
            stage: "coarse-model".to_string(),
            corpus: coarse.name.clone(),
            loss,
            dev_f1: None,
        });
    }
    Ok((session, metrics))
}

/// Step 2: reannotate the fine corpus with the coarse model, count
/// co-occurrences, keep the top-k, normalize, expand to tag level.
pub fn build_matrix_step(
    coarse_model: &TokenClassifier,
    fine_train: &Corpus,
    coarse_schema: &TagSchema,
    k: TopK,
    provenance: Provenance,
) -> Result<F2CMatrix> {
    if coarse_model.config.num_tags != coarse_schema.num_tags() {
        return Err(Error::ShapeMismatch(format!(
            "coarse model head has {} tags, schema has {}",
            coarse_model.config.num_tags,
            coarse_schema.num_tags()
        )));
    }
    let predictions: Vec<Vec<usize>> = fine_train
        .sentences
        .iter()
        .map(|s| crate::eval::predict_tags(coarse_model, s))
        .collect();
    let counts = count_cooccurrence(fine_train, coarse_schema, &predictions)?;
    let refined = refine_topk(&counts, k);
    let mut matrix = normalize(&refined);
    matrix.k_used = k;
    matrix.provenance = provenance;
    Ok(matrix)
}

/// Per-coarse-corpus artifacts of one run.
#[derive(Debug, Clone)]
pub struct CoarseStage {
    pub corpus_name: String,
    pub model_bytes: Vec<u8>,
    pub matrix: F2CMatrix,
    pub mask: ConsistencyMask,
}

/// Everything a run produces, tagged with the plan hash and seed.
#[derive(Debug)]
pub struct RunArtifacts {
    pub plan_hash: String,
    pub seed: u64,
    pub step1_checkpoint: Vec<u8>,
    pub final_checkpoint: Vec<u8>,
    pub final_model: TokenClassifier,
    pub stages: Vec<CoarseStage>,
    pub metrics: Vec<MetricRow>,
    pub dev_f1: Option<f64>,
    pub test_f1: Option<f64>,
}

/// Reusable intermediate results shared between ablation variants: the step-1
/// session and the trained coarse taggers do not depend on the variant flags.
#[derive(Default)]
pub struct PipelineCache {
    step1: Option<(u64, Session, Vec<MetricRow>)>,
    coarse_models: BTreeMap<u64, (Vec<u8>, Vec<MetricRow>)>,
    pub step1_hits: usize,
    pub coarse_hits: usize,
}

/// Run the full four-step pipeline.
pub fn run_pipeline(plan: &TrainPlan) -> Result<RunArtifacts> {
    run_pipeline_cached(plan, &mut PipelineCache::default())
}

/// Run the pipeline, reusing cached step-1 / coarse-model results when the
/// relevant plan prefix matches.
pub fn run_pipeline_cached(plan: &TrainPlan, cache: &mut PipelineCache) -> Result<RunArtifacts> {
    plan.validate()?;
    let (fine_train, dev_holdout) = fine_split(plan)?;
    let dev = plan.dev.as_ref().or(dev_holdout.as_ref());
    let mut metrics: Vec<MetricRow> = Vec::new();

    // step 1: fine-only training
    let s1_key = plan.step1_key(&fine_train);
    let mut session = match &cache.step1 {
        Some((key, session, rows)) if *key == s1_key => {
            cache.step1_hits += 1;
            metrics.extend(rows.iter().cloned());
            session.clone()
        }
        _ => {
            let mut session = Session::new(
                plan.fine_model_config(),
                plan.optim.clone(),
                plan.seed,
                plan.batch_size,
            )?;
            let mut rows = Vec::new();
            run_fine_stage(
                &mut session,
                &fine_train,
                dev,
                plan.step1_epochs,
                "step1",
                &mut rows,
            )?;
            cache.step1 = Some((s1_key, session.clone(), rows.clone()));
            metrics.extend(rows);
            session
        }
    };
    let step1_checkpoint = checkpoint_bytes(&session.model);

    // steps 2 + 3: per-coarse-corpus matrix and mask
    let mut stages: Vec<CoarseStage> = Vec::new();
    if !plan.no_coarse {
        for (i, coarse) in plan.coarse.iter().enumerate() {
            let ckey = plan.coarse_key(coarse, i);
            let (model_bytes, rows) = match cache.coarse_models.get(&ckey) {
                Some((bytes, rows)) => {
                    cache.coarse_hits += 1;
                    (bytes.clone(), rows.clone())
                }
                None => {
                    let (csession, rows) = train_coarse_model(plan, coarse, i)?;
                    let bytes = checkpoint_bytes(&csession.model);
                    cache
                        .coarse_models
                        .insert(ckey, (bytes.clone(), rows.clone()));
                    (bytes, rows)
                }
            };
            metrics.extend(rows);
            let coarse_model = load_checkpoint_bytes(&model_bytes)?;
            let mut matrix = build_matrix_step(
                &coarse_model,
                &fine_train,
                &coarse.schema,
                plan.topk,
                Provenance {
                    coarse_model: format!("coarse-model:{i}:{}", coarse.name),
                    fine_corpus: fine_train.name.clone(),
                },
            )?;
            let mask = if plan.no_filtering {
                ConsistencyMask::all_true(coarse)
            } else {
                build_mask(&session.model, &matrix, coarse)?
            };
            if plan.learnable_matrix {
                matrix.enable_learnable();
            }
            stages.push(CoarseStage {
                corpus_name: coarse.name.clone(),
                model_bytes,
                matrix,
                mask,
            });
        }
    }

    if plan.reset_optimizer {
        session.opt.reset();
    }

    train_joint(
        plan,
        &mut session,
        &mut stages,
        &fine_train,
        dev,
        &mut metrics,
    )?;

    let final_checkpoint = checkpoint_bytes(&session.model);
    let dev_f1 = match dev {
        Some(d) if !d.is_empty() => Some(evaluate(&session.model, None, d, &d.schema)?.micro.f1),
        _ => None,
    };
    let test_f1 = match &plan.test {
        Some(t) => Some(evaluate(&session.model, None, t, &t.schema)?.micro.f1),
        None => None,
    };
    Ok(RunArtifacts {
        plan_hash: plan.hash(),
        seed: plan.seed,
        step1_checkpoint,
        final_checkpoint,
        final_model: session.model,
        stages,
        metrics,
        dev_f1,
        test_f1,
    })
}

/// Step 4: alternating joint training. Per epoch, one masked pass over each
/// coarse corpus in plan order (with that corpus's matrix and mask), then one
/// plain pass over the fine corpus; `fine_first` swaps the order. The session
/// carries the optimizer state over from step 1. Dev span-F1 is logged once
/// per epoch.
pub fn train_joint(
    plan: &TrainPlan,
    session: &mut Session,
    stages: &mut [CoarseStage],
    fine_train: &Corpus,
    dev: Option<&Corpus>,
    metrics: &mut Vec<MetricRow>,
) -> Result<()> {
    if !plan.no_coarse && stages.len() != plan.coarse.len() {
        return Err(Error::InvalidState(format!(
            "joint training needs step 2-3 artifacts for all {} coarse corpora, got {}",
            plan.coarse.len(),
            stages.len()
        )));
    }
    let norm = if plan.normalize_surviving {
        CoarseNorm::Surviving
    } else {
        CoarseNorm::TotalTokens
    };
    for epoch in 1..=plan.joint_epochs {
        let mut fine_row_pending = true;
        let run_fine = |session: &mut Session, metrics: &mut Vec<MetricRow>| -> Result<()> {
            let loss = session.supervised_pass(fine_train, "fine")?;
            metrics.push(MetricRow {
                epoch,
                stage: "joint".to_string(),
                corpus: fine_train.name.clone(),
                loss,
                dev_f1: None,
            });
            Ok(())
        };
        if plan.fine_first {
            run_fine(session, metrics)?;
            fine_row_pending = false;
        }
        for (i, stage) in stages.iter_mut().enumerate() {
            if plan.refilter_every_epoch && !plan.no_filtering {
                stage.mask = build_mask(&session.model, &stage.matrix, &plan.coarse[i])?;
            }
            let loss = session.coarse_pass(
                &plan.coarse[i],
                &mut stage.matrix,
                &stage.mask,
                &format!("joint-coarse:{i}"),
                norm,
            )?;
            metrics.push(MetricRow {
                epoch,
                stage: "joint".to_string(),
                corpus: stage.corpus_name.clone(),
                loss,
                dev_f1: None,
            });
        }
        if fine_row_pending {
            run_fine(session, metrics)?;
        }
        let dev_f1 = match dev {
            Some(d) if !d.is_empty() => {
                Some(evaluate(&session.model, None, d, &d.schema)?.micro.f1)
            }
            _ => None,
        };
        if let Some(last) = metrics.last_mut() {
            last.dev_f1 = dev_f1;
        }
    }
    Ok(())
}

/// One ablation variant's scores.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub dev_f1: Option<f64>,
    pub test_f1: Option<f64>,
}

#[derive(Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub step1_cache_hits: usize,
    pub coarse_cache_hits: usize,
}

impl AblationTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant\tdev_f1\ttest_f1\n");
        for r in &self.rows {
            let fmt = |v: Option<f64>| v.map(|f| format!("{f:.6}")).unwrap_or_else(|| "NA".into());
            let _ = writeln!(out, "{}\t{}\t{}", r.variant, fmt(r.dev_f1), fmt(r.test_f1));
        }
        out
    }
}

/// Run the ablation battery: full pipeline, `w/o filtering`, one variant per
/// dropped coarse corpus (when there are at least two), and `w/o coarse`.
/// Variants share the step-1 checkpoint and the coarse taggers through the
/// pipeline cache.
pub fn run_ablation(plan: &TrainPlan) -> Result<AblationTable> {
    plan.validate()?;
    let mut cache = PipelineCache::default();
    let mut variants: Vec<(String, TrainPlan)> = vec![("full".into(), plan.clone())];
    {
        let mut p = plan.clone();
        p.no_filtering = true;
        variants.push(("no_filtering".into(), p));
    }
    if plan.coarse.len() >= 2 {
        for (i, c) in plan.coarse.iter().enumerate() {
            let mut p = plan.clone();
            p.coarse.remove(i);
            variants.push((format!("wo_{}", c.name), p));
        }
    }
    {
        let mut p = plan.clone();
        p.no_coarse = true;
        variants.push(("no_coarse".into(), p));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (name, vplan) in variants {
        let run = run_pipeline_cached(&vplan, &mut cache)?;
        rows.push(AblationRow {
            variant: name,
            dev_f1: run.dev_f1,
            test_f1: run.test_f1,
        });
    }
    Ok(AblationTable {
        rows,
        step1_cache_hits: cache.step1_hits,
        coarse_cache_hits: cache.coarse_hits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};
    use crate::f2c::F2CMatrix;

    fn tiny_plan(seed: u64) -> TrainPlan {
        let mut spec = SyntheticSpec::benchmark();
        spec.fine_sentences = 24;
        spec.coarse_sentences = 30;
        spec.coarse_types = 2;
        spec.fine_per_coarse = 2;
        spec.filler_vocab = 30;
        let data = generate_synthetic(&spec, 7).unwrap();
        let mut plan = TrainPlan::new(data.fine, vec![data.coarse], seed);
        plan.vocab_size = 256;
        plan.embed_dim = 8;
        plan.hidden_dim = 16;
        plan.coarse_model_epochs = 2;
        plan.step1_epochs = 2;
        plan.joint_epochs = 2;
        plan
    }

    #[test]
    fn plan_rejects_coarse_with_too_many_types() {
        let spec = SyntheticSpec {
            coarse_types: 2,
            fine_per_coarse: 2,
            markers_per_fine: 2,
            filler_vocab: 10,
            fine_sentences: 5,
            coarse_sentences: 5,
            min_len: 3,
            max_len: 5,
            entity_density: 0.5,
            max_entity_len: 1,
            rho: 0.0,
        };
        let data = generate_synthetic(&spec, 1).unwrap();
        // use the fine corpus as "coarse": 4 types, not fewer than fine's 4
        let plan = TrainPlan::new(data.fine.clone(), vec![data.fine], 1);
        assert!(plan.validate().is_err());
    }

    #[test]
    fn loss_decreases_on_repeated_data() {
        let plan = tiny_plan(3);
        let (fine_train, _) = fine_split(&plan).unwrap();
        let mut session = Session::new(
            plan.fine_model_config(),
            plan.optim.clone(),
            plan.seed,
            plan.batch_size,
        )
        .unwrap();
        let first = session.supervised_pass(&fine_train, "fine").unwrap();
        let mut last = first;
        for _ in 0..9 {
            last = session.supervised_pass(&fine_train, "fine").unwrap();
        }
        let uniform = (plan.fine.schema.num_tags() as f64).ln();
        assert!(
            first < uniform * 1.05,
            "first-epoch loss {first} vs ln(T) {uniform}"
        );
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        assert!(last < uniform, "final loss {last} above uniform baseline");
    }

    #[test]
    fn same_seed_gives_identical_checkpoints() {
        let plan = tiny_plan(11);
        let a = run_pipeline(&plan).unwrap();
        let b = run_pipeline(&plan).unwrap();
        assert_eq!(a.final_checkpoint, b.final_checkpoint);
        assert_eq!(a.step1_checkpoint, b.step1_checkpoint);
        let mut plan2 = plan.clone();
        plan2.seed = 12;
        let c = run_pipeline(&plan2).unwrap();
        assert_ne!(a.final_checkpoint, c.final_checkpoint);
    }

    #[test]
    fn no_coarse_equals_fine_only_for_summed_epochs() {
        let mut plan = tiny_plan(5);
        plan.no_coarse = true;
        plan.step1_epochs = 3;
        plan.joint_epochs = 4;
        let run = run_pipeline(&plan).unwrap();
        let mut fine_only = plan.clone();
        fine_only.step1_epochs = 7;
        let (session, _) = train_fine(&fine_only).unwrap();
        assert_eq!(run.final_checkpoint, checkpoint_bytes(&session.model));
    }

    #[test]
    fn all_false_masks_make_coarse_passes_noops() {
        let plan = tiny_plan(9);
        let (fine_train, _) = fine_split(&plan).unwrap();
        let coarse = &plan.coarse[0];
        let mut with_coarse = Session::new(
            plan.fine_model_config(),
            plan.optim.clone(),
            plan.seed,
            plan.batch_size,
        )
        .unwrap();
        let mut fine_only = with_coarse.clone();
        let mut matrix = {
            // any valid matrix; it is never exercised under an all-false mask
            let (csession, _) = train_coarse_model(&plan, coarse, 0).unwrap();
            build_matrix_step(
                &csession.model,
                &fine_train,
                &coarse.schema,
                TopK::K(1),
                Provenance::default(),
            )
            .unwrap()
        };
        let mut mask = ConsistencyMask::all_true(coarse);
        mask.sentence_masks
            .iter_mut()
            .for_each(|m| m.iter_mut().for_each(|b| *b = false));
        for _ in 0..3 {
            let loss = with_coarse
                .coarse_pass(
                    coarse,
                    &mut matrix,
                    &mask,
                    "joint-coarse:0",
                    CoarseNorm::TotalTokens,
                )
                .unwrap();
            assert_eq!(loss, 0.0);
            with_coarse.supervised_pass(&fine_train, "fine").unwrap();
            fine_only.supervised_pass(&fine_train, "fine").unwrap();
        }
        assert_eq!(
            checkpoint_bytes(&with_coarse.model),
            checkpoint_bytes(&fine_only.model)
        );
    }

    #[test]
    fn identity_matrix_coarse_pass_matches_supervised_pass() {
        // with the fine schema mapped onto itself and an all-true mask, one
        // coarse pass must take the exact same steps as a supervised pass
        let plan = tiny_plan(13);
        let (fine_train, _) = fine_split(&plan).unwrap();
        let mut a = Session::new(
            plan.fine_model_config(),
            plan.optim.clone(),
            plan.seed,
            plan.batch_size,
        )
        .unwrap();
        let mut b = a.clone();
        let mut matrix = F2CMatrix::identity(&fine_train.schema);
        let mask = ConsistencyMask::all_true(&fine_train);
        // same role so both consume the same rng stream
        let la = a
            .coarse_pass(
                &fine_train,
                &mut matrix,
                &mask,
                "fine",
                CoarseNorm::TotalTokens,
            )
            .unwrap();
        let lb = b.supervised_pass(&fine_train, "fine").unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(checkpoint_bytes(&a.model), checkpoint_bytes(&b.model));
    }

    #[test]
    fn train_joint_requires_stage_artifacts() {
        let plan = tiny_plan(15);
        let (fine_train, dev) = fine_split(&plan).unwrap();
        let mut session = Session::new(
            plan.fine_model_config(),
            plan.optim.clone(),
            plan.seed,
            plan.batch_size,
        )
        .unwrap();
        let mut no_stages: Vec<CoarseStage> = vec![];
        let err = train_joint(
            &plan,
            &mut session,
            &mut no_stages,
            &fine_train,
            dev.as_ref(),
            &mut vec![],
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidState(_)));
        // no_coarse bypasses the requirement
        let mut nc = plan;
        nc.no_coarse = true;
        train_joint(
            &nc,
            &mut session,
            &mut no_stages,
            &fine_train,
            dev.as_ref(),
            &mut vec![],
        )
        .unwrap();
    }

    #[test]
    fn surviving_normalization_changes_the_run() {
        let plan = tiny_plan(17);
        let base = run_pipeline(&plan).unwrap();
        let mut sn = plan.clone();
        sn.normalize_surviving = true;
        let alt = run_pipeline(&sn).unwrap();
        assert_ne!(base.final_checkpoint, alt.final_checkpoint);
        // and stays deterministic
        let alt2 = run_pipeline(&sn).unwrap();
        assert_eq!(alt.final_checkpoint, alt2.final_checkpoint);
    }

    #[test]
    fn ablation_reuses_step1_and_coarse_models() {
        let mut plan = tiny_plan(21);
        // two coarse corpora to get the per-corpus-dropped variants
        let half = plan.coarse[0].sentences.len() / 2;
        let c2 = Corpus::new(
            "coarse-b",
            plan.coarse[0].schema.clone(),
            plan.coarse[0].sentences.split_off(half),
        )
        .unwrap();
        plan.coarse[0].name = "coarse-a".into();
        plan.coarse.push(c2);
        let table = run_ablation(&plan).unwrap();
        let names: Vec<&str> = table.rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "full",
                "no_filtering",
                "wo_coarse-a",
                "wo_coarse-b",
                "no_coarse"
            ]
        );
        // full trains everything; the other four variants all reuse step 1,
        // and the drop-one variants reuse the surviving coarse tagger
        assert_eq!(table.step1_cache_hits, 4);
        assert!(
            table.coarse_cache_hits >= 3,
            "hits {}",
            table.coarse_cache_hits
        );
        // ablation shares nothing that changes results: no_filtering from the
        // cache equals a fresh standalone run
        let mut nf = plan.clone();
        nf.no_filtering = true;
        let fresh = run_pipeline(&nf).unwrap();
        let cached_row = &table.rows[1];
        assert_eq!(cached_row.test_f1, fresh.test_f1);
        assert_eq!(cached_row.dev_f1, fresh.dev_f1);
    }

    #[test]
    fn metric_log_covers_every_stage() {
        let plan = tiny_plan(2);
        let run = run_pipeline(&plan).unwrap();
        let stages: std::collections::BTreeSet<&str> =
            run.metrics.iter().map(|r| r.stage.as_str()).collect();
        assert!(stages.contains("step1"));
        assert!(stages.contains("coarse-model"));
        assert!(stages.contains("joint"));
        let tsv = metrics_tsv(&run.metrics);
        assert!(tsv.starts_with("epoch\tstage\tcorpus\tloss\tdev_span_f1\n"));
        // joint stage: one row per coarse corpus plus one fine row per epoch
        let joint_rows = run.metrics.iter().filter(|r| r.stage == "joint").count();
        assert_eq!(joint_rows, plan.joint_epochs * (plan.coarse.len() + 1));
    }
}
