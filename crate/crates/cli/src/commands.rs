use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use pmss::backbone::Backbone;
use pmss::data::{disk, generate, sha256_hex};
use pmss::experiments::{one_shot, run_ablation, Axis, Memo};
use pmss::framework::{
    build_pipeline, evaluate, prepare_backbone, train as run_train, EvalMetrics, ParamCounts, RunConfig, StagePipeline,
    Strategy,
};
use pmss::gradsuite::{run_suite, CaseReport, Scope};
use pmss::spm::ClassPrior;
use serde::Serialize;

use crate::failure::{Failure, EXIT_FAILED_CHECK};
use crate::{write_json, RunArgs};

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Reads, overrides and validates the run config.
fn load_config(run: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &run.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::config("config", format!("{}: {e}", path.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = run.seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = run.steps {
        cfg.train.steps = steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The frozen backbone for a run: loaded from `--backbone` or built (and
/// pretrained) from the config.
fn load_backbone(run: &RunArgs, cfg: &RunConfig) -> Result<Backbone, Failure> {
    match &run.backbone {
        Some(path) => {
            let bb = Backbone::load(path).map_err(Failure::checkpoint)?;
            if bb.config != cfg.backbone {
                return Err(Failure::config("backbone", "the loaded backbone was built from a different backbone config"));
            }
            Ok(bb)
        }
        None => Ok(prepare_backbone(cfg)?),
    }
}

fn input_hash(cfg: &RunConfig, run: &RunArgs) -> Result<String, Failure> {
    let mut bytes = serde_json::to_vec(cfg).map_err(|e| Failure::internal(e.to_string()))?;
    if let Some(path) = &run.backbone {
        bytes.extend(std::fs::read(path).map_err(Failure::io)?);
    }
    Ok(sha256_hex(&bytes))
}

#[derive(Serialize)]
struct Manifest {
    config_path: Option<String>,
    config: RunConfig,
    seed: u64,
    backbone_path: Option<String>,
    started_unix: f64,
    finished_unix: f64,
    input_hash: String,
    out_dir: String,
    backbone_provenance: String,
    backbone_sha256_before: String,
    backbone_sha256_after: String,
    checkpoint_sha256: String,
    steps: usize,
    final_loss: Option<f64>,
    final_metrics: Option<EvalMetrics>,
}

pub fn train(run: &RunArgs, out: &Path) -> Result<(), Failure> {
    let started_unix = now();
    let cfg = load_config(run)?;
    let backbone = load_backbone(run, &cfg)?;
    let before = backbone.sha256()?;
    let data = generate(&cfg.data)?;
    let mut pipe = build_pipeline(&cfg, backbone, &data)?;
    std::fs::create_dir_all(out).map_err(Failure::io)?;
    let mut report_file = BufWriter::new(File::create(out.join("report.ndjson")).map_err(Failure::io)?);
    let tr: Vec<usize> = data.train_indices().collect();
    let va: Vec<usize> = data.val_indices().collect();
    let result = run_train(&mut pipe, &data, &tr, &va, &cfg.loss, &cfg.train, |rec| {
        let line = serde_json::to_string(rec)?;
        writeln!(report_file, "{line}")?;
        Ok(())
    });
    report_file.flush().map_err(Failure::io)?;
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            let f = Failure::from(e);
            write_json(&out.join("error.json"), &f)?;
            return Err(f);
        }
    };
    let ckpt = out.join("model.pmss");
    pipe.save(&ckpt, &cfg)?;
    let checkpoint_sha256 = sha256_hex(&std::fs::read(&ckpt).map_err(Failure::io)?);
    if let Some(m) = &report.final_metrics {
        write_json(&out.join("metrics.json"), m)?;
    }
    let manifest = Manifest {
        config_path: run.config.as_ref().map(|p| p.display().to_string()),
        seed: cfg.train.seed,
        backbone_path: run.backbone.as_ref().map(|p| p.display().to_string()),
        started_unix,
        finished_unix: now(),
        input_hash: input_hash(&cfg, run)?,
        out_dir: out.display().to_string(),
        backbone_provenance: pipe.backbone.provenance.clone(),
        backbone_sha256_before: before,
        backbone_sha256_after: pipe.backbone.sha256()?,
        checkpoint_sha256,
        steps: report.records.len(),
        final_loss: report.records.last().map(|r| r.loss),
        final_metrics: report.final_metrics.clone(),
        config: cfg,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    let loss = manifest.final_loss.map_or("-".into(), |l| format!("{l:.4}"));
    let miou = manifest.final_metrics.as_ref().map_or("-".into(), |m| format!("{:.2}", m.miou * 100.0));
    println!("trained {} steps ({}): final loss {loss}, val mIoU {miou}", manifest.steps, manifest.config.strategy);
    println!("checkpoint {} sha256 {}", ckpt.display(), manifest.checkpoint_sha256);
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    checkpoint: String,
    checkpoint_sha256: String,
    split: String,
    samples: usize,
    #[serde(flatten)]
    metrics: EvalMetrics,
}

pub fn eval(checkpoint: &Path, data_dir: Option<&Path>, split: &str, out: Option<&Path>, json: bool) -> Result<(), Failure> {
    let (pipe, cfg) = StagePipeline::load(checkpoint).map_err(Failure::checkpoint)?;
    let data = match data_dir {
        Some(dir) => disk::load(dir).map_err(|e| Failure::new(EXIT_FAILED_CHECK, "data", e.to_string()))?,
        None => generate(&cfg.data)?,
    };
    if data.spec.classes != pipe.classes() {
        return Err(Failure::config("data.classes", format!("dataset has {} classes, model {}", data.spec.classes, pipe.classes())));
    }
    let indices: Vec<usize> = match split {
        "train" => data.train_indices().collect(),
        "val" => data.val_indices().collect(),
        "all" => (0..data.len()).collect(),
        other => return Err(Failure::config("split", format!("unknown split `{other}` (train, val, all)"))),
    };
    let metrics = evaluate(&pipe, &data, &indices, cfg.train.batch, cfg.loss.ignore_index)?;
    let output = EvalOutput {
        checkpoint: checkpoint.display().to_string(),
        checkpoint_sha256: sha256_hex(&std::fs::read(checkpoint).map_err(Failure::io)?),
        split: split.to_string(),
        samples: indices.len(),
        metrics,
    };
    if let Some(dir) = out {
        write_json(&dir.join("metrics.json"), &output)?;
    }
    if json {
        println!("{}", to_json(&output)?);
    } else {
        println!("split {} ({} samples)  mIoU {:.2}", output.split, output.samples, output.metrics.miou * 100.0);
        for (c, iou) in output.metrics.per_class_iou.iter().enumerate() {
            println!("  class {c}  IoU {}", iou.map_or("  absent".into(), |v| format!("{:>8.2}", v * 100.0)));
        }
        if let Some(d) = output.metrics.dice {
            println!("  Dice {:.2}", d * 100.0);
        }
    }
    Ok(())
}

fn to_json(v: &impl Serialize) -> Result<String, Failure> {
    serde_json::to_string_pretty(v).map_err(|e| Failure::internal(e.to_string()))
}

#[derive(Serialize)]
struct CountRow {
    strategy: Strategy,
    #[serde(flatten)]
    counts: ParamCounts,
    total: usize,
}

#[derive(Serialize)]
struct SweepRow {
    label: String,
    prompt: usize,
}

#[derive(Serialize)]
struct CountOutput {
    rows: Vec<CountRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stage_sweep: Option<Vec<SweepRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    recurrent_sweep: Option<Vec<SweepRow>>,
}

/// Counts never depend on weights, so no pretraining happens here.
fn counts_for(cfg: &RunConfig) -> Result<ParamCounts, Failure> {
    cfg.validate()?;
    let bb = cfg.backbone.build()?;
    let pipe = StagePipeline::new(cfg, bb, ClassPrior::uniform(cfg.data.classes))?;
    Ok(pipe.count_params())
}

pub fn count(run: &RunArgs, sweep: bool, out: Option<&Path>, json: bool) -> Result<(), Failure> {
    let cfg = load_config(run)?;
    let mut rows = Vec::new();
    for s in Strategy::ALL {
        let counts = counts_for(&RunConfig { strategy: s, ..cfg.clone() })?;
        rows.push(CountRow { strategy: s, counts, total: counts.total() });
    }
    let (mut stage_sweep, mut recurrent_sweep) = (None, None);
    if sweep {
        let base = RunConfig { strategy: Strategy::PromptMatched, ..cfg.clone() };
        let n = cfg.backbone.num_stages();
        let mut st = Vec::new();
        for j in 1..=n + 1 {
            let mut c = base.clone();
            c.spm.stages = (1..=j).collect();
            st.push(SweepRow { label: format!("stages 1-{j}"), prompt: counts_for(&c)?.prompt });
        }
        let mut rec = Vec::new();
        for r in 1..=3 {
            let mut c = base.clone();
            c.spm.iterations = r;
            rec.push(SweepRow { label: format!("R={r}"), prompt: counts_for(&c)?.prompt });
        }
        stage_sweep = Some(st);
        recurrent_sweep = Some(rec);
    }
    let output = CountOutput { rows, stage_sweep, recurrent_sweep };
    if let Some(dir) = out {
        write_json(&dir.join("counts.json"), &output)?;
    }
    if json {
        println!("{}", to_json(&output)?);
        return Ok(());
    }
    println!("Trainable parameters (M)");
    println!("{:<16} {:>10} {:>10} {:>10} {:>12}", "strategy", "Backbone", "Prompt", "Head", "count");
    let m = |v: usize| if v == 0 { "0".to_string() } else { format!("{:.4}", v as f64 / 1e6) };
    for r in &output.rows {
        println!(
            "{:<16} {:>10} {:>10} {:>10} {:>12}",
            r.strategy.as_str(),
            m(r.counts.backbone),
            m(r.counts.prompt),
            m(r.counts.head),
            r.total
        );
    }
    for (title, rows) in [("prompted stages", &output.stage_sweep), ("recurrent iterations", &output.recurrent_sweep)] {
        if let Some(rows) = rows {
            println!("\n{:<16} {:>10} {:>12}", title, "#Params (M)", "count");
            for r in rows {
                println!("{:<16} {:>10} {:>12}", r.label, m(r.prompt), r.prompt);
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct CaseSummary {
    case: String,
    seeds: usize,
    max_rel_error: f64,
    skipped: usize,
    checked: usize,
    passed: bool,
}

#[derive(Serialize)]
struct GradcheckOutput {
    scope: Scope,
    tolerance: f64,
    seeds: Vec<u64>,
    max_rel_error: f64,
    passed: bool,
    cases: Vec<CaseSummary>,
    failures: Vec<CaseReport>,
}

pub fn gradcheck(scope: &str, seed: u64, seeds: u64, out: Option<&Path>, json: bool) -> Result<(), Failure> {
    let scope: Scope = scope.parse()?;
    if seeds == 0 {
        return Err(Failure::config("seeds", "need at least one seed"));
    }
    let report = run_suite(scope, seed, seeds)?;
    let mut cases: Vec<CaseSummary> = Vec::new();
    for c in &report.cases {
        match cases.iter_mut().find(|s| s.case == c.case) {
            Some(s) => {
                s.seeds += 1;
                s.max_rel_error = s.max_rel_error.max(c.max_rel_error);
                s.skipped += c.skipped;
                s.checked += c.checked;
                s.passed &= c.passed;
            }
            None => cases.push(CaseSummary {
                case: c.case.clone(),
                seeds: 1,
                max_rel_error: c.max_rel_error,
                skipped: c.skipped,
                checked: c.checked,
                passed: c.passed,
            }),
        }
    }
    let output = GradcheckOutput {
        scope,
        tolerance: report.tolerance,
        seeds: report.seeds.clone(),
        max_rel_error: report.max_rel_error,
        passed: report.passed,
        cases,
        failures: report.failures().cloned().collect(),
    };
    if let Some(dir) = out {
        write_json(&dir.join(format!("gradcheck_{scope}.json")), &output)?;
    }
    if json {
        println!("{}", to_json(&output)?);
    } else {
        println!("gradcheck {scope}: {} seeds from {seed}, tolerance {:.0e}", seeds, output.tolerance);
        println!("{:<26} {:>6} {:>12} {:>9}  result", "case", "seeds", "max rel err", "skipped");
        for c in &output.cases {
            let verdict = if c.passed { "pass" } else { "FAIL" };
            println!("{:<26} {:>6} {:>12.3e} {:>9}  {verdict}", c.case, c.seeds, c.max_rel_error, c.skipped);
        }
        println!("{}: max relative error {:.3e}", if output.passed { "PASS" } else { "FAIL" }, output.max_rel_error);
    }
    if output.passed {
        Ok(())
    } else {
        let names: Vec<String> = output.failures.iter().map(|f| format!("{} (seed {})", f.case, f.seed)).collect();
        Err(Failure::new(EXIT_FAILED_CHECK, "gradcheck", format!("failed: {}", names.join(", "))))
    }
}

pub fn ablate(run: &RunArgs, axis: &str, seeds: u64, out: Option<&Path>, json: bool) -> Result<(), Failure> {
    let axis: Axis = axis.parse()?;
    let cfg = load_config(run)?;
    let backbone = load_backbone(run, &cfg)?;
    let data = generate(&cfg.data)?;
    let seeds: Vec<u64> = (cfg.train.seed..cfg.train.seed + seeds).collect();
    let table = run_ablation(&cfg, axis, &seeds, &backbone, &data, &mut Memo::default(), |label, seed, miou| {
        eprintln!("{label} seed {seed}: mIoU {:.2}", miou * 100.0);
    })?;
    if let Some(dir) = out {
        write_json(&dir.join(format!("ablation_{axis}.json")), &table)?;
    }
    if json {
        println!("{}", to_json(&table)?);
    } else {
        print!("{}", table.render());
    }
    Ok(())
}

#[derive(Serialize)]
struct OneShotOutput {
    #[serde(flatten)]
    report: pmss::experiments::OneShotReport,
    dice_percent: String,
}

pub fn oneshot(run: &RunArgs, repetitions: usize, split_seed: u64, out: Option<&Path>, json: bool) -> Result<(), Failure> {
    if repetitions == 0 {
        return Err(Failure::config("repetitions", "need at least one repetition"));
    }
    let cfg = load_config(run)?;
    let backbone = load_backbone(run, &cfg)?;
    let data = generate(&cfg.data)?;
    let report = one_shot(&cfg, &backbone, &data, repetitions, split_seed)?;
    let output = OneShotOutput { dice_percent: report.summary(), report };
    if let Some(dir) = out {
        write_json(&dir.join("oneshot.json"), &output)?;
    }
    if json {
        println!("{}", to_json(&output)?);
    } else {
        for r in &output.report.runs {
            println!("repetition {} (sample {:>3})  Dice {:.2}", r.repetition, r.train_index, r.dice * 100.0);
        }
        println!("Dice (%)  {}", output.dice_percent);
    }
    Ok(())
}

pub fn pretrain(run: &RunArgs, out: &Path) -> Result<(), Failure> {
    let cfg = load_config(run)?;
    if cfg.pretrain.is_none() {
        return Err(Failure::config("pretrain", "the config has no pretraining section"));
    }
    let bb = prepare_backbone(&cfg)?;
    std::fs::create_dir_all(out).map_err(Failure::io)?;
    let path = out.join("backbone.pmss");
    bb.save(&path)?;
    println!("{}: {} (sha256 {})", path.display(), bb.provenance, bb.sha256()?);
    Ok(())
}

pub fn data(run: &RunArgs, out: &Path) -> Result<(), Failure> {
    let cfg = load_config(run)?;
    let data = generate(&cfg.data)?;
    disk::save(&data, out)?;
    println!("{} samples ({} train) written to {} (sha256 {})", data.len(), data.spec.train, out.display(), data.sha256()?);
    Ok(())
}
