//! Subcommand implementations.

use crate::flags::Flags;
use crate::setup::{build_plan, load_data, prepare_run_dir, resolve_config};
use cofiner::corpus::{read_conll, sample_kshot, write_conll, TagSchema};
use cofiner::eval::{evaluate, kshot_curve, topk_sweep};
use cofiner::f2c::{F2CMatrix, TopK};
use cofiner::filtering::{filtering_report, filtering_report_tsv};
use cofiner::model::load_checkpoint;
use cofiner::trainer::{
    metrics_tsv, run_ablation, run_pipeline, ConfigMap, RunArtifacts, TrainPlan,
};
use cofiner::{Error, Result};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

/// `sample`: K~(K+5)-shot sample a corpus, writing the sub-corpus and a
/// per-type stats file.
pub fn cmd_sample(flags: &Flags) -> Result<()> {
    let input = flags
        .get("in")
        .ok_or_else(|| Error::InvalidArgument("missing --in".into()))?;
    let out = flags
        .get("out")
        .ok_or_else(|| Error::InvalidArgument("missing --out".into()))?;
    let k: usize = flags
        .get("k")
        .ok_or_else(|| Error::InvalidArgument("missing --k".into()))?
        .parse()
        .map_err(|_| Error::InvalidArgument("bad --k value".into()))?;
    let seed: u64 = flags
        .get("seed")
        .ok_or_else(|| Error::InvalidArgument("missing --seed".into()))?
        .parse()
        .map_err(|_| Error::InvalidArgument("bad --seed value".into()))?;
    let read = read_conll(input, None)?;
    if read.repairs > 0 {
        eprintln!("note: repaired {} BIO violations in {input}", read.repairs);
    }
    let sample = sample_kshot(&read.corpus, k, seed)?;
    write_conll(&sample.corpus, out)?;
    let mut stats = String::from("entity_type\tcount\tstatus\n");
    for (t, &count) in sample.counts.iter().enumerate() {
        let status = if sample.exhausted.contains(&t) {
            "exhausted"
        } else {
            "ok"
        };
        let _ = writeln!(
            stats,
            "{}\t{}\t{}",
            read.corpus.schema.type_name(t),
            count,
            status
        );
    }
    let stats_path = flags
        .get("stats")
        .map(String::from)
        .unwrap_or_else(|| format!("{out}.stats.tsv"));
    write_file(Path::new(&stats_path), &stats)?;
    println!(
        "sampled {} sentences ({} entity types, k={k}, seed={seed}) -> {out}",
        sample.corpus.len(),
        sample.counts.iter().filter(|&&c| c > 0).count()
    );
    Ok(())
}

fn write_artifacts(
    dir: &Path,
    plan: &TrainPlan,
    cfg: &ConfigMap,
    run: &RunArtifacts,
) -> Result<()> {
    write_file(&dir.join("config-snapshot.conf"), &cfg.snapshot())?;
    fs::write(dir.join("checkpoints/step1.ckpt"), &run.step1_checkpoint)
        .map_err(|e| Error::io("checkpoints/step1.ckpt", e))?;
    fs::write(dir.join("checkpoints/final.ckpt"), &run.final_checkpoint)
        .map_err(|e| Error::io("checkpoints/final.ckpt", e))?;
    write_file(
        &dir.join("schemas/fine.types"),
        &plan.fine.schema.to_lines(),
    )?;
    for (i, stage) in run.stages.iter().enumerate() {
        fs::write(
            dir.join(format!("checkpoints/coarse-{i}.ckpt")),
            &stage.model_bytes,
        )
        .map_err(|e| Error::io(format!("checkpoints/coarse-{i}.ckpt"), e))?;
        stage
            .matrix
            .write_tsv(dir.join(format!("matrices/coarse-{i}.tsv")))?;
        stage
            .mask
            .write_cache(dir.join(format!("masks/coarse-{i}.mask")))?;
        write_file(
            &dir.join(format!("schemas/coarse-{i}.types")),
            &stage.matrix.coarse_schema.to_lines(),
        )?;
        let rows = filtering_report(&stage.mask, &plan.coarse[i]);
        write_file(
            &dir.join(format!("reports/audit-coarse-{i}.tsv")),
            &filtering_report_tsv(&rows),
        )?;
        for &row in &stage.matrix.fallback_rows {
            eprintln!(
                "warning: fine type {:?} never co-occurred with a coarse entity type; row fell back to uniform",
                stage.matrix.fine_schema.type_name(row)
            );
        }
    }
    write_file(&dir.join("reports/metrics.tsv"), &metrics_tsv(&run.metrics))?;
    let mut summary = format!("plan_hash\t{}\nseed\t{}\n", run.plan_hash, run.seed);
    if let Some(f1) = run.dev_f1 {
        let _ = writeln!(summary, "dev_span_f1\t{f1:.6}");
    }
    if let Some(f1) = run.test_f1 {
        let _ = writeln!(summary, "test_span_f1\t{f1:.6}");
    }
    write_file(&dir.join("reports/summary.tsv"), &summary)?;
    Ok(())
}

/// `train`: run the full pipeline and write every artifact to the run dir.
pub fn cmd_train(flags: &Flags) -> Result<()> {
    let mut cfg = resolve_config(flags)?;
    if let Some(v) = flags.get("k") {
        cfg.set("k", v); // --k sets the matrix top-k for training runs
    }
    let seed = cfg
        .get_u64("seed")?
        .ok_or_else(|| Error::InvalidArgument("training needs --seed (or a seed key)".into()))?;
    let data = load_data(&cfg, seed)?;
    let plan = build_plan(&cfg, data, seed)?;
    let dir = prepare_run_dir(flags, &format!("train-seed{seed}"))?;
    eprintln!(
        "training: fine {:?} ({} sentences), {} coarse corpora, run dir {}",
        plan.fine.name,
        plan.fine.len(),
        plan.coarse.len(),
        dir.display()
    );
    let run = run_pipeline(&plan)?;
    write_artifacts(&dir, &plan, &cfg, &run)?;
    if let Some(f1) = run.dev_f1 {
        println!("dev_span_f1\t{f1:.6}");
    }
    match run.test_f1 {
        Some(f1) => println!("test_span_f1\t{f1:.6}"),
        None => println!("test_span_f1\tNA"),
    }
    Ok(())
}

fn stage_index(flags: &Flags) -> Result<usize> {
    Ok(flags
        .get("index")
        .map(|v| v.parse::<usize>())
        .transpose()
        .map_err(|_| Error::InvalidArgument("bad --index".into()))?
        .unwrap_or(0))
}

/// `matrix`: show a trained run's F2C matrix TSV.
pub fn cmd_matrix(flags: &Flags) -> Result<()> {
    let run = flags
        .get("run")
        .ok_or_else(|| Error::InvalidArgument("missing --run".into()))?;
    let i = stage_index(flags)?;
    let path = Path::new(run).join(format!("matrices/coarse-{i}.tsv"));
    if flags.has("print") {
        let text =
            fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        print!("{text}");
    } else {
        println!("{}", path.display());
    }
    Ok(())
}

/// `audit`: emit the per-type filtering proportions of a trained run.
pub fn cmd_audit(flags: &Flags) -> Result<()> {
    let run = flags
        .get("run")
        .ok_or_else(|| Error::InvalidArgument("missing --run".into()))?;
    let i = stage_index(flags)?;
    let path = Path::new(run).join(format!("reports/audit-coarse-{i}.tsv"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    print!("{text}");
    Ok(())
}

/// `eval`: span-level evaluation of a checkpoint on a corpus.
pub fn cmd_eval(flags: &Flags) -> Result<()> {
    let model_path = flags
        .get("model")
        .ok_or_else(|| Error::InvalidArgument("missing --model".into()))?;
    let data_path = flags
        .get("data")
        .ok_or_else(|| Error::InvalidArgument("missing --data".into()))?;
    let model = load_checkpoint(model_path)?;
    let schema = match flags.get("schema") {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p.to_string(), e))?;
            Some(TagSchema::from_lines(&text)?)
        }
        None => None,
    };
    let read = read_conll(data_path, schema.as_ref())?;
    let matrix = match flags.get("matrix") {
        Some(p) => Some(F2CMatrix::read_tsv(p)?),
        None => None,
    };
    let report = evaluate(&model, matrix.as_ref(), &read.corpus, &read.corpus.schema)?;
    print!("{}", report.render_table());
    if let Some(p) = flags.get("report-tsv") {
        write_file(Path::new(p), &report.to_tsv())?;
    }
    Ok(())
}

fn parse_seeds(flags: &Flags) -> Result<Vec<u64>> {
    let list = flags
        .get_list("seeds")
        .ok_or_else(|| Error::InvalidArgument("missing --seeds".into()))?;
    list.iter()
        .map(|s| {
            s.parse::<u64>()
                .map_err(|_| Error::InvalidArgument(format!("bad seed {s:?}")))
        })
        .collect()
}

fn chunk_seeds(seeds: &[u64], jobs: usize) -> Vec<Vec<u64>> {
    let jobs = jobs.max(1).min(seeds.len().max(1));
    let per = seeds.len().div_ceil(jobs);
    seeds.chunks(per).map(<[u64]>::to_vec).collect()
}

/// `suite kshot|topk|ablation`: the experiment batteries.
pub fn cmd_suite(sub: &str, flags: &Flags) -> Result<()> {
    let cfg = resolve_config(flags)?;
    let jobs: usize = flags
        .get("jobs")
        .map(|v| v.parse::<usize>())
        .transpose()
        .map_err(|_| Error::InvalidArgument("bad --jobs".into()))?
        .unwrap_or(1);
    match sub {
        "kshot" => {
            let seeds = parse_seeds(flags)?;
            let ks: Vec<usize> = flags
                .get_list("k")
                .unwrap_or_else(|| {
                    cofiner::corpus::KSHOT_PRESETS
                        .iter()
                        .map(ToString::to_string)
                        .collect()
                })
                .iter()
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|_| Error::InvalidArgument(format!("bad k {s:?}")))
                })
                .collect::<Result<_>>()?;
            let data = load_data(&cfg, seeds[0])?;
            let pool = data.fine_pool.clone();
            let mut base = build_plan(&cfg, data, seeds[0])?;
            base.fine = pool.clone();
            let dir = prepare_run_dir(flags, "suite-kshot")?;
            let merged = run_chunked(&seeds, jobs, |chunk| kshot_curve(&base, &pool, &ks, chunk))?;
            let mut curve = merged[0].clone();
            for part in &merged[1..] {
                curve.seeds.extend(&part.seeds);
                for (tot, add) in curve.points.iter_mut().zip(&part.points) {
                    tot.per_seed.extend(&add.per_seed);
                }
            }
            for p in &mut curve.points {
                let n = p.per_seed.len() as f64;
                p.mean_f1 = p.per_seed.iter().sum::<f64>() / n;
                p.stdev_f1 = if p.per_seed.len() > 1 {
                    (p.per_seed
                        .iter()
                        .map(|x| (x - p.mean_f1).powi(2))
                        .sum::<f64>()
                        / (n - 1.0))
                        .sqrt()
                } else {
                    0.0
                };
            }
            let tsv = curve.to_tsv();
            write_file(&dir.join("reports/kshot-curve.tsv"), &tsv)?;
            print!("{tsv}");
        }
        "topk" => {
            let seeds = parse_seeds(flags)?;
            let ks: Vec<TopK> = flags
                .get_list("k")
                .ok_or_else(|| Error::InvalidArgument("missing --k (e.g. 1,2,all)".into()))?
                .iter()
                .map(|s| s.parse::<TopK>())
                .collect::<Result<_>>()?;
            let kshot: usize = flags
                .get("kshot")
                .map(|v| v.parse::<usize>())
                .transpose()
                .map_err(|_| Error::InvalidArgument("bad --kshot".into()))?
                .unwrap_or(10);
            let data = load_data(&cfg, seeds[0])?;
            let pool = data.fine_pool.clone();
            let mut base = build_plan(&cfg, data, seeds[0])?;
            base.fine = pool.clone();
            let dir = prepare_run_dir(flags, "suite-topk")?;
            let merged = run_chunked(&seeds, jobs, |chunk| {
                topk_sweep(&base, &pool, kshot, &ks, chunk)
            })?;
            let mut sweep = merged[0].clone();
            for part in &merged[1..] {
                sweep.seeds.extend(&part.seeds);
                for (tot, add) in sweep.points.iter_mut().zip(&part.points) {
                    tot.per_seed.extend(&add.per_seed);
                }
            }
            for p in &mut sweep.points {
                p.mean_f1 = p.per_seed.iter().sum::<f64>() / p.per_seed.len() as f64;
            }
            let tsv = sweep.to_tsv();
            write_file(&dir.join("reports/topk-sweep.tsv"), &tsv)?;
            print!("{tsv}");
        }
        "ablation" => {
            let seed = cfg
                .get_u64("seed")?
                .ok_or_else(|| Error::InvalidArgument("ablation needs --seed".into()))?;
            let data = load_data(&cfg, seed)?;
            let plan = build_plan(&cfg, data, seed)?;
            let dir = prepare_run_dir(flags, &format!("suite-ablation-seed{seed}"))?;
            // variants share step-1 and coarse models through a cache, so the
            // ablation always runs sequentially regardless of --jobs
            let table = run_ablation(&plan)?;
            eprintln!(
                "cache: step-1 reused {} times, coarse models reused {} times",
                table.step1_cache_hits, table.coarse_cache_hits
            );
            let tsv = table.to_tsv();
            write_file(&dir.join("reports/ablation.tsv"), &tsv)?;
            print!("{tsv}");
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown suite {other:?} (expected kshot, topk or ablation)"
            )))
        }
    }
    Ok(())
}

/// Fan seed chunks out over up to `jobs` worker threads; results come back in
/// chunk order, so the merged output is independent of scheduling.
fn run_chunked<T, F>(seeds: &[u64], jobs: usize, run: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&[u64]) -> Result<T> + Sync,
{
    let chunks = chunk_seeds(seeds, jobs);
    if chunks.len() <= 1 {
        return chunks.iter().map(|c| run(c)).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = chunks.iter().map(|_| None).collect();
    std::thread::scope(|scope| {
        for (chunk, slot) in chunks.iter().zip(slots.iter_mut()) {
            let run = &run;
            scope.spawn(move || {
                *slot = Some(run(chunk));
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("worker thread completed"))
        .collect()
}
