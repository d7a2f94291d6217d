use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use dilnet::data::{self, scan_dataset, synth_manifest, DatasetManifest, SampleLoader, SampleRecord, Split};
use dilnet::fusion::{enumerate_combinations, extract_backbone, FrozenBackbone, FusionModel, FusionSpec};
use dilnet::gradcheck::run_scope;
use dilnet::metrics::{table_header, MetricsReport, DEFAULT_THRESHOLD};
use dilnet::train::checkpoint::ModelHeader;
use dilnet::train::{
    evaluate, load_scorer, train_stage1_with, train_stage2_with, Checkpoint, EpochRecord, FeatureBank, TrainConfig,
    TRACE_HEADER,
};
use dilnet::Variant;
use log::info;
use serde_json::{json, Value};

use crate::args::*;

/// A bad combination of flags or arguments, reported with the usage exit code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub enum Outcome {
    Done,
    /// Ran to completion but some check breached its tolerance.
    ChecksFailed,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let out = cli.out;
    match cli.command {
        Command::Prepare(a) => prepare(&out, &a),
        Command::Train(a) => train(&out, &a),
        Command::Fuse(a) => fuse(&out, &a),
        Command::Eval(a) => eval(&out, &a),
        Command::FractionSweep(a) => fraction_sweep(&out, &a),
        Command::Gradcheck(a) => gradcheck(&out, &a),
    }
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("cannot write {}", path.display()))
}

/// Effective configuration of a run, written before any work starts.
fn write_run_record(out: &Path, name: &str, command: &str, settings: Value) -> Result<()> {
    let record = json!({
        "tool": "dilnet",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "out": out,
        "settings": settings,
    });
    write_json(&out.join(format!("run-{name}.json")), &record)
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read manifest {}", path.display()))?;
    DatasetManifest::from_json(&text).with_context(|| format!("invalid manifest {}", path.display()))
}

fn reduce(manifest: DatasetManifest, fraction: Option<f64>, seed: u64) -> Result<DatasetManifest> {
    match fraction {
        Some(p) if !(p > 0.0 && p <= 1.0) => Err(usage(format!("--fraction {p} must lie in (0, 1]"))),
        Some(p) => Ok(data::fraction(&manifest, p, seed)?),
        None => Ok(manifest),
    }
}

fn checked(cfg: TrainConfig) -> Result<TrainConfig> {
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn counts_line(c: [usize; 2]) -> String {
    format!("{} parasitized, {} uninfected", c[1], c[0])
}

fn prepare(out: &Path, a: &PrepareArgs) -> Result<Outcome> {
    if !(a.split_ratio > 0.0 && a.split_ratio < 1.0) {
        return Err(usage(format!("--split-ratio {} must lie in (0, 1)", a.split_ratio)));
    }
    let mut scan_text = String::new();
    let (raw, source) = match (&a.data, a.synthetic) {
        (Some(root), _) => {
            let (m, report) = scan_dataset(root)?;
            scan_text = report.to_text();
            eprint!("{scan_text}");
            (m, json!({ "data": root, "skipped": report.skipped.len() }))
        }
        (None, Some(0)) => return Err(usage("--synthetic needs at least one sample")),
        (None, Some(n)) => (synth_manifest(n, a.seed), json!({ "synthetic": n })),
        (None, None) => unreachable!("clap requires a source"),
    };
    if raw.is_empty() {
        bail!("no decodable images found in the dataset source");
    }
    let manifest = data::split(&raw, a.split_ratio, a.seed)?;
    create_out(out)?;
    write_run_record(out, "prepare", "prepare", json!({ "source": source, "seed": a.seed, "split_ratio": a.split_ratio }))?;
    let path = out.join("manifest.json");
    fs::write(&path, manifest.to_json()?).with_context(|| format!("cannot write {}", path.display()))?;
    if !scan_text.is_empty() {
        fs::write(out.join("scan-report.txt"), &scan_text)?;
    }
    println!("records: {} ({})", manifest.len(), counts_line(manifest.class_counts()));
    println!("train: {} ({})", manifest.partition(Split::Train).len(), counts_line(manifest.partition_counts(Split::Train)));
    println!("test: {} ({})", manifest.partition(Split::Test).len(), counts_line(manifest.partition_counts(Split::Test)));
    println!("checksum: {}", manifest.checksum());
    println!("manifest: {}", path.display());
    Ok(Outcome::Done)
}

/// Appends each epoch to a CSV as soon as it finishes, so a run that fails
/// part way leaves the epochs it completed on disk.
struct TraceWriter {
    path: PathBuf,
    tag: String,
    epochs: usize,
}

impl TraceWriter {
    fn create(path: PathBuf, tag: impl Into<String>, epochs: usize) -> Result<Self> {
        fs::write(&path, format!("{TRACE_HEADER}\n")).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(Self { path, tag: tag.into(), epochs })
    }

    fn append(&self, rec: &EpochRecord) -> dilnet::Result<()> {
        let io = |e| dilnet::Error::Io { path: self.path.clone(), source: e };
        let mut f = fs::OpenOptions::new().append(true).open(&self.path).map_err(io)?;
        writeln!(f, "{}", rec.csv_line()).map_err(io)?;
        let val = match (rec.val_loss, rec.val_acc) {
            (Some(l), Some(a)) => format!(" val_loss {l:.4} val_acc {a:.4}"),
            _ => String::new(),
        };
        info!(
            "{} epoch {}/{} train_loss {:.4} train_acc {:.4}{val}",
            self.tag, rec.epoch, self.epochs, rec.train_loss, rec.train_acc
        );
        Ok(())
    }
}

fn test_records(manifest: &DatasetManifest) -> Vec<&SampleRecord> {
    manifest.partition(Split::Test)
}

fn train_member(
    dir: &Path,
    variant: Variant,
    manifest: &DatasetManifest,
    loader: &mut SampleLoader,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Option<MetricsReport>)> {
    let trace = TraceWriter::create(dir.join(format!("trace-{variant}.csv")), format!("{variant}"), cfg.epochs)?;
    let started = Instant::now();
    let outcome = train_stage1_with(variant, manifest, loader, cfg, &mut |rec| trace.append(rec))
        .with_context(|| format!("training variant {variant} failed; partial trace in {}", trace.path.display()))?;
    info!("{variant} trained in {:.1}s", started.elapsed().as_secs_f64());
    outcome.checkpoint.save(&dir.join(format!("dilationnet-{variant}.ckpt")))?;
    let test = test_records(manifest);
    let report = if test.is_empty() {
        None
    } else {
        Some(evaluate(&outcome.model, loader, &test, cfg.batch_size, DEFAULT_THRESHOLD)?)
    };
    let summary = json!({
        "variant": variant,
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.trace.len(),
        "test": report,
    });
    write_json(&dir.join(format!("report-train-{variant}.json")), &summary)?;
    Ok((outcome.checkpoint, report))
}

fn train(out: &Path, a: &TrainArgs) -> Result<Outcome> {
    let cfg = checked(a.train.apply(stage1_defaults()))?;
    let manifest = reduce(load_manifest(&a.manifest)?, a.fraction, a.fraction_seed)?;
    create_out(out)?;
    write_run_record(
        out,
        &format!("train-{}", a.variant),
        "train",
        json!({
            "variant": a.variant,
            "manifest": a.manifest,
            "manifest_checksum": manifest.checksum(),
            "fraction": a.fraction,
            "fraction_seed": a.fraction_seed,
            "train_config": cfg,
        }),
    )?;
    let mut loader = SampleLoader::cached();
    let (_, report) = train_member(out, a.variant, &manifest, &mut loader, &cfg)?;
    println!("checkpoint: {}", out.join(format!("dilationnet-{}.ckpt", a.variant)).display());
    if let Some(r) = report {
        println!("{}", table_header("Network"));
        println!("{}", r.table_row(&a.variant.to_string()));
    }
    Ok(Outcome::Done)
}

fn load_backbones(dir: &Path, members: &[Variant]) -> Result<Vec<FrozenBackbone>> {
    members
        .iter()
        .map(|&v| {
            let path = dir.join(format!("dilationnet-{v}.ckpt"));
            if !path.is_file() {
                bail!("missing checkpoint for member {v}: {}", path.display());
            }
            let ckpt = Checkpoint::load(&path).with_context(|| format!("cannot load checkpoint for member {v}"))?;
            extract_backbone(&ckpt).with_context(|| format!("checkpoint for member {v} is not a usable backbone"))
        })
        .collect()
}

fn distinct_members(members: &[Variant]) -> Result<Vec<Variant>> {
    let mut sorted = members.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != members.len() {
        return Err(usage("--members must not repeat a variant"));
    }
    if members.len() < 2 {
        return Err(usage(format!("fusion needs at least two members, got {}", members.len())));
    }
    // features concatenate in resolution order whatever order the flag lists
    Ok(sorted)
}

struct Fused {
    label: String,
    report: MetricsReport,
}

/// Train one fusion head, save its checkpoint, trace and report under `dir`
/// and score it on the test partition.
fn fuse_one(
    dir: &Path,
    spec: &FusionSpec,
    backbones: &[FrozenBackbone],
    manifest: &DatasetManifest,
    loader: &mut SampleLoader,
    bank: &mut FeatureBank,
    cfg: &TrainConfig,
) -> Result<Fused> {
    let label = spec.label();
    let chosen: Vec<FrozenBackbone> =
        spec.members.iter().map(|v| backbones.iter().find(|b| b.variant == *v).cloned().expect("member loaded")).collect();
    let trace = TraceWriter::create(dir.join(format!("trace-fusion-{label}.csv")), label.clone(), cfg.epochs)?;
    let outcome = train_stage2_with(spec, chosen, manifest, loader, cfg, bank, &mut |rec| trace.append(rec))
        .with_context(|| format!("training fusion {label} failed; partial trace in {}", trace.path.display()))?;
    outcome.checkpoint.save(&dir.join(format!("fusion-{label}.ckpt")))?;
    let test = test_records(manifest);
    if test.is_empty() {
        bail!("the manifest has no test partition to score fusion {label} on");
    }
    let report = score_fusion(&outcome.model, bank, loader, &test, cfg.batch_size)?;
    let summary = json!({
        "fusion": label,
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.trace.len(),
        "test": report,
    });
    write_json(&dir.join(format!("report-fusion-{label}.json")), &summary)?;
    Ok(Fused { label, report })
}

fn score_fusion(
    model: &FusionModel,
    bank: &mut FeatureBank,
    loader: &mut SampleLoader,
    records: &[&SampleRecord],
    batch_size: usize,
) -> Result<MetricsReport> {
    let (features, labels) = bank.gather(&model.backbones, loader, records, batch_size)?;
    let p = model.predict_features(&features)?;
    let scores: Vec<f64> = p.data().iter().map(|&v| v as f64).collect();
    let labels: Vec<u8> = labels.data().iter().map(|&y| y as u8).collect();
    Ok(MetricsReport::from_scores(&scores, &labels, DEFAULT_THRESHOLD)?)
}

fn metric_cells(r: &MetricsReport) -> String {
    r.values().iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()).collect::<Vec<_>>().join(",")
}

const METRIC_CSV_COLUMNS: &str = "accuracy,sensitivity,specificity,kappa,auc";

fn fuse(out: &Path, a: &FuseArgs) -> Result<Outcome> {
    let members = distinct_members(&a.members)?;
    let cfg = checked(a.train.apply(stage2_defaults()))?;
    let manifest = reduce(load_manifest(&a.manifest)?, a.fraction, a.fraction_seed)?;
    let ckpt_dir = a.ckpt_dir.clone().unwrap_or_else(|| out.to_path_buf());
    let backbones = load_backbones(&ckpt_dir, &members)?;
    let specs = if a.all_combinations {
        enumerate_combinations(&members)
    } else {
        vec![FusionSpec::new(&members).map_err(|e| usage(e.to_string()))?]
    };
    create_out(out)?;
    let name = if a.all_combinations { "fuse-all".to_string() } else { format!("fuse-{}", specs[0].label()) };
    write_run_record(
        out,
        &name,
        "fuse",
        json!({
            "members": members,
            "all_combinations": a.all_combinations,
            "combinations": specs.iter().map(FusionSpec::label).collect::<Vec<_>>(),
            "ckpt_dir": ckpt_dir,
            "manifest": a.manifest,
            "manifest_checksum": manifest.checksum(),
            "fraction": a.fraction,
            "fraction_seed": a.fraction_seed,
            "train_config": cfg,
        }),
    )?;
    let mut loader = SampleLoader::cached();
    let mut bank = FeatureBank::new();
    println!("{}", table_header("Network Combination"));
    let mut rows = Vec::new();
    for spec in &specs {
        let fused = fuse_one(out, spec, &backbones, &manifest, &mut loader, &mut bank, &cfg)?;
        println!("{}", fused.report.table_row(&fused.label));
        rows.push(fused);
    }
    if a.all_combinations {
        let mut csv = format!("combination,{METRIC_CSV_COLUMNS}\n");
        for r in &rows {
            writeln!(csv, "{},{}", r.label, metric_cells(&r.report))?;
        }
        let path = out.join("combinations.csv");
        fs::write(&path, csv).with_context(|| format!("cannot write {}", path.display()))?;
        println!("table: {}", path.display());
    }
    Ok(Outcome::Done)
}

fn model_label(ckpt: &Checkpoint) -> String {
    match &ckpt.model {
        ModelHeader::DilationNet { variant, .. } => variant.to_string(),
        ModelHeader::Fusion(f) => f.spec.label(),
    }
}

fn eval(out: &Path, a: &EvalArgs) -> Result<Outcome> {
    if a.batch_size == 0 {
        return Err(usage("--batch-size must be at least 1"));
    }
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(usage(format!("--threshold {} must lie in [0, 1]", a.threshold)));
    }
    if !a.ckpt.is_file() {
        bail!("checkpoint not found: {}", a.ckpt.display());
    }
    let ckpt = Checkpoint::load(&a.ckpt).with_context(|| format!("cannot load checkpoint {}", a.ckpt.display()))?;
    let model = load_scorer(&ckpt)?;
    if let Some(r) = a.resolution {
        if !model.resolutions().contains(&r) {
            return Err(usage(format!(
                "checkpoint {} consumes resolutions {:?}, not {r}",
                a.ckpt.display(),
                model.resolutions()
            )));
        }
    }
    let manifest = load_manifest(&a.manifest)?;
    let records: Vec<&SampleRecord> = match a.split.partition() {
        Some(s) => manifest.partition(s),
        None => manifest.records.iter().collect(),
    };
    if records.is_empty() {
        bail!("the {} partition of {} is empty", a.split.name(), a.manifest.display());
    }
    let label = model_label(&ckpt);
    let stem = a.ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| label.clone());
    let name = format!("eval-{stem}-{}", a.split.name());
    create_out(out)?;
    write_run_record(
        out,
        &name,
        "eval",
        json!({
            "ckpt": a.ckpt,
            "model": label,
            "manifest": a.manifest,
            "manifest_checksum": manifest.checksum(),
            "split": a.split.name(),
            "resolution": a.resolution,
            "threshold": a.threshold,
            "batch_size": a.batch_size,
        }),
    )?;
    let mut loader = SampleLoader::cached();
    let report = evaluate(model.as_ref(), &mut loader, &records, a.batch_size, a.threshold)?;
    write_json(&out.join(format!("report-{name}.json")), &report)?;
    println!("{}", report.to_json()?);
    println!("{}", table_header("Network"));
    println!("{}", report.table_row(&label));
    Ok(Outcome::Done)
}

fn fraction_sweep(out: &Path, a: &SweepArgs) -> Result<Outcome> {
    let members = distinct_members(&a.members)?;
    if a.fractions.is_empty() {
        return Err(usage("--fractions needs at least one value"));
    }
    if let Some(p) = a.fractions.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(usage(format!("fraction {p} must lie in (0, 1]")));
    }
    let cfg1 = checked(a.train.apply(stage1_defaults()))?;
    let mut cfg2 = checked(a.train.apply(stage2_defaults()))?;
    if let Some(e) = a.head_epochs {
        cfg2.epochs = e;
    }
    let spec = FusionSpec::new(&members).map_err(|e| usage(e.to_string()))?;
    let manifest = load_manifest(&a.manifest)?;
    create_out(out)?;
    write_run_record(
        out,
        "fraction-sweep",
        "fraction-sweep",
        json!({
            "manifest": a.manifest,
            "manifest_checksum": manifest.checksum(),
            "fractions": a.fractions,
            "fraction_seed": a.fraction_seed,
            "members": members,
            "stage1_config": cfg1,
            "stage2_config": cfg2,
        }),
    )?;
    let mut loader = SampleLoader::cached();
    let mut csv = format!("fraction,train_samples,{METRIC_CSV_COLUMNS}\n");
    println!("{}", table_header("Training Data"));
    for &p in &a.fractions {
        let reduced = data::fraction(&manifest, p, a.fraction_seed)?;
        let dir = out.join(format!("fraction-{p}"));
        create_out(&dir)?;
        let n_train = reduced.partition(Split::Train).len();
        info!("fraction {p}: {n_train} training samples");
        let mut backbones = Vec::new();
        for &v in &members {
            let (ckpt, _) = train_member(&dir, v, &reduced, &mut loader, &cfg1)?;
            backbones.push(extract_backbone(&ckpt)?);
        }
        let mut bank = FeatureBank::new();
        let fused = fuse_one(&dir, &spec, &backbones, &reduced, &mut loader, &mut bank, &cfg2)?;
        writeln!(csv, "{p},{n_train},{}", metric_cells(&fused.report))?;
        println!("{}", fused.report.table_row(&format!("{:.0}%", 100.0 * p)));
    }
    let path = out.join("fractions.csv");
    fs::write(&path, csv).with_context(|| format!("cannot write {}", path.display()))?;
    println!("table: {}", path.display());
    Ok(Outcome::Done)
}

fn gradcheck(out: &Path, a: &GradcheckArgs) -> Result<Outcome> {
    if a.instances == 0 {
        return Err(usage("--instances must be at least 1"));
    }
    create_out(out)?;
    let name = format!("gradcheck-{}", a.scope);
    write_run_record(
        out,
        &name,
        "gradcheck",
        json!({ "scope": a.scope.to_string(), "instances": a.instances, "seed": a.seed, "inject_fault": a.inject_fault }),
    )?;
    dilnet::conv::set_weight_grad_fault(a.inject_fault);
    let started = Instant::now();
    let results = run_scope(a.scope, a.instances, a.seed);
    dilnet::conv::set_weight_grad_fault(false);
    let results = results?;
    let mut csv = String::from("target,instances,worst_error,tolerance,worst_param,worst_seed,passed\n");
    let mut failures = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{:<22} worst {:.3e}  tol {:.0e}  param {:<16} seed {:<4} {verdict}",
            r.target, r.worst_error, r.tolerance, r.worst_param, r.worst_seed
        );
        writeln!(
            csv,
            "{},{},{:e},{:e},{},{},{}",
            r.target,
            r.instances,
            r.worst_error,
            r.tolerance,
            r.worst_param,
            r.worst_seed,
            r.passed()
        )?;
        if !r.passed() {
            failures.push(r.target);
        }
    }
    fs::write(out.join(format!("{name}.csv")), csv)?;
    info!("{} targets checked in {:.1}s", results.len(), started.elapsed().as_secs_f64());
    if failures.is_empty() {
        Ok(Outcome::Done)
    } else {
        eprintln!("gradient check failed for: {}", failures.join(", "));
        Ok(Outcome::ChecksFailed)
    }
}
