use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use instret::encoder::{
    evaluate_accuracy, load_multi, load_single, save_multi, save_single, single_training_set, train_multi,
    train_single, write_metrics_csv, EpochMetrics, MixExample, MixSource, MultiEncoder, SingleEncoder,
};
use instret::eval::{chance_baseline, eer, evaluate_retrieval, verification_trials, write_embedding_dump, LabelSet, MetricReport};
use instret::retrieval::{build_library, query as run_query, top_k, EmbeddingLibrary, LibraryClip};
use instret::rng::derive_seed;
use instret::synth::{
    generate_dataset, load_manifest, random_mix, wav::read_wav, AudioClip, ClipPool, DatasetManifest, EntryKind,
    InstrumentsFile, ManifestEntry, Split,
};
use log::info;
use ndarray::Array1;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::{CliError, Common, EvalArgs, LibraryArgs, MixMode, Protocol, QueryArgs, Stage, SynthArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

pub const RUN_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Config file, then flags.
fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if common.workers.is_some() {
        cfg.workers = common.workers;
    }
    cfg.resolve();
    Ok(cfg)
}

fn init_workers(cfg: &RunConfig, default: Option<usize>) -> Result<()> {
    let Some(n) = cfg.workers.or(default) else {
        return Ok(());
    };
    if n == 0 {
        return Err(CliError::usage("workers must be positive"));
    }
    // Fails only if a pool already exists, which keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn guard_dir(out: &Path, force: bool) -> Result<()> {
    let occupied = out.is_dir() && fs::read_dir(out)?.next().is_some();
    if (occupied || out.is_file()) && !force {
        return Err(CliError::usage(format!("{} exists; pass --force to overwrite", out.display())));
    }
    fs::create_dir_all(out)?;
    Ok(())
}

fn guard_file(out: &Path, force: bool) -> Result<()> {
    if out.exists() && !force {
        return Err(CliError::usage(format!("{} exists; pass --force to overwrite", out.display())));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} {} not found", path.display())))
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'static str,
    inputs: BTreeMap<&'a str, String>,
    config: &'a RunConfig,
}

/// Resolved config as TOML plus a JSON record of the command and its inputs.
fn write_provenance(
    config_path: &Path,
    run_path: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: BTreeMap<&str, String>,
) -> Result<()> {
    fs::write(config_path, cfg.to_toml()?)?;
    let record = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        inputs,
        config: cfg,
    };
    fs::write(run_path, serde_json::to_vec_pretty(&record)?)?;
    Ok(())
}

fn provenance_in(dir: &Path, command: &str, cfg: &RunConfig, inputs: BTreeMap<&str, String>) -> Result<()> {
    write_provenance(&dir.join(CONFIG_FILE), &dir.join(RUN_FILE), command, cfg, inputs)
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_dataset(root: &Path) -> Result<(DatasetManifest, InstrumentsFile)> {
    require(root, "dataset")?;
    load_manifest(root).map_err(|e| CliError::Usage(anyhow::Error::new(e).context(format!("reading dataset {}", root.display()))))
}

fn read_clips(manifest: &DatasetManifest, entries: &[&ManifestEntry]) -> Result<Vec<AudioClip>> {
    Ok(entries
        .par_iter()
        .map(|e| read_wav(manifest.path(&e.clip)))
        .collect::<std::result::Result<_, _>>()?)
}

fn singles(manifest: &DatasetManifest, split: Option<Split>) -> Vec<&ManifestEntry> {
    manifest.singles().filter(|e| split.map_or(true, |s| e.split == s)).collect()
}

fn pool(manifest: &DatasetManifest, entries: &[&ManifestEntry]) -> Result<ClipPool> {
    let clips = read_clips(manifest, entries)?;
    let mut pool = ClipPool::default();
    for (e, clip) in entries.iter().zip(clips) {
        pool.push(e.instruments[0].clone(), e.families[0], clip);
    }
    Ok(pool)
}

fn log_epoch(m: &EpochMetrics) {
    match m.accuracy {
        Some(a) => info!("epoch {} loss {:.4} accuracy {:.4}", m.epoch, m.loss, a),
        None => info!("epoch {} loss {:.4}", m.epoch, m.loss),
    }
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    if let Some(n) = a.instruments {
        cfg.synth.instruments = n;
    }
    if let Some(n) = a.per_instrument {
        cfg.synth.per_instrument = n;
    }
    cfg.synth.validate().map_err(|e| CliError::usage(format!("[synth] {e}")))?;
    init_workers(&cfg, None)?;
    guard_dir(&a.out, a.common.force)?;
    let manifest = generate_dataset(&cfg.synth, &a.out)?;
    provenance_in(&a.out, "synth", &cfg, BTreeMap::new())?;
    let singles = manifest.singles().count();
    let multis = manifest.entries.len() - singles;
    info!("wrote {singles} single clips and {multis} mixtures to {}", a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    if let Some(e) = a.epochs {
        cfg.single.epochs = e;
        cfg.multi.epochs = e;
    }
    cfg.encoder.validate().map_err(|e| CliError::usage(format!("[encoder] {e}")))?;
    let single_path = match a.stage {
        Stage::Single => None,
        Stage::Multi => {
            let p = a.single.clone().ok_or_else(|| CliError::usage("the multi stage needs --single <checkpoint>"))?;
            require(&p, "single-encoder checkpoint")?;
            Some(p)
        }
    };
    let (manifest, instruments) = load_dataset(&a.data)?;
    init_workers(&cfg, Some(1))?;
    guard_dir(&a.out, a.common.force)?;
    let mut inputs = BTreeMap::from([("data", a.data.display().to_string())]);
    let train_entries = singles(&manifest, Some(Split::Train));
    match single_path {
        None => {
            let labels = instruments.split.train.clone();
            let clips = read_clips(&manifest, &train_entries)?;
            let pairs = train_entries
                .iter()
                .zip(&clips)
                .map(|(e, c)| {
                    let label = labels.iter().position(|l| *l == e.instruments[0]).with_context(|| {
                        format!("{} is not a training instrument", e.instruments[0])
                    })?;
                    Ok((c, label))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut enc = SingleEncoder::<f32>::new(cfg.encoder.clone(), labels, cfg.single.seed)?;
            let data = single_training_set(&mut enc, &pairs)?;
            let history = train_single(&mut enc, &data, &cfg.single, log_epoch)?;
            info!("training accuracy {:.4}", evaluate_accuracy(&enc, &data)?);
            let saved = save_single(&a.out.join("single.json"), &enc)?;
            write_metrics_csv(&a.out.join("metrics.csv"), &history)?;
            inputs.insert("checkpoint", saved.hash);
        }
        Some(path) => {
            let (single, single_info) = load_single::<f32>(&path)?;
            let net = &cfg.multi_encoder;
            let mut multi = if net.warm_start {
                MultiEncoder::warm_start(&single, net.slots, net.warm_noise, cfg.multi.seed)?
            } else {
                let mc = cfg.multi_encoder_config();
                mc.validate().map_err(|e| CliError::usage(format!("[multi_encoder] {e}")))?;
                MultiEncoder::new(mc, net.slots, cfg.multi.seed)?
            };
            let history = match a.mix {
                MixMode::Random => {
                    let pool = pool(&manifest, &train_entries)?;
                    let available = pool.by_instrument().len();
                    if available < cfg.multi.mix.max_instruments {
                        return Err(CliError::usage(format!(
                            "[multi.mix] max_instruments {} exceeds the {available} training instruments",
                            cfg.multi.mix.max_instruments
                        )));
                    }
                    train_multi(&mut multi, Some(&single), MixSource::Random(&pool), &cfg.multi, log_epoch)?
                }
                MixMode::Manifest => {
                    let examples = mixtures(&manifest, Split::Train)?;
                    if examples.is_empty() {
                        return Err(CliError::usage(
                            "dataset has no training mixtures; set synth.multi_train or use --mix random",
                        ));
                    }
                    let examples: Vec<MixExample> = examples.into_iter().map(|(_, e)| e).collect();
                    train_multi(&mut multi, Some(&single), MixSource::Fixed(&examples), &cfg.multi, log_epoch)?
                }
            };
            let saved = save_multi(&a.out.join("multi.json"), &multi)?;
            write_metrics_csv(&a.out.join("metrics.csv"), &history)?;
            inputs.insert("single_checkpoint", single_info.hash);
            inputs.insert("checkpoint", saved.hash);
        }
    }
    let command = match a.stage {
        Stage::Single => "train single",
        Stage::Multi => "train multi",
    };
    provenance_in(&a.out, command, &cfg, inputs)
}

/// Pre-rendered mixtures of `split` with their truth id sets.
fn mixtures(manifest: &DatasetManifest, split: Split) -> Result<Vec<(LabelSet, MixExample)>> {
    let entries: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.kind == EntryKind::Multi && e.split == split)
        .collect();
    entries
        .par_iter()
        .map(|e| {
            let stems = e
                .stems
                .iter()
                .map(|s| read_wav(manifest.path(s)))
                .collect::<std::result::Result<_, _>>()?;
            let example = MixExample {
                mixture: read_wav(manifest.path(&e.clip))?,
                stems,
            };
            Ok((e.instruments.iter().cloned().collect(), example))
        })
        .collect()
}

pub fn library(a: LibraryArgs) -> Result<()> {
    let cfg = resolve(&a.common)?;
    require(&a.single, "single-encoder checkpoint")?;
    let (manifest, _) = load_dataset(&a.data)?;
    init_workers(&cfg, None)?;
    guard_file(&a.out, a.common.force)?;
    let (single, single_info) = load_single::<f32>(&a.single)?;
    let entries = singles(&manifest, cfg.library.split);
    if entries.is_empty() {
        return Err(CliError::usage("no single clips in the selected split"));
    }
    let clips = read_clips(&manifest, &entries)?;
    let lib_clips: Vec<LibraryClip<'_>> = entries
        .iter()
        .zip(&clips)
        .map(|(e, clip)| LibraryClip {
            instrument: &e.instruments[0],
            family: e.families[0],
            name: &e.clip,
            clip,
        })
        .collect();
    let lib = build_library(&single, &lib_clips, &single_info.hash)?;
    lib.write(&a.out)?;
    info!("library of {} instruments, {} dimensions", lib.len(), lib.dim());
    write_provenance(
        &sidecar(&a.out, ".config.toml"),
        &sidecar(&a.out, ".run.json"),
        "library",
        &cfg,
        BTreeMap::from([
            ("data", a.data.display().to_string()),
            ("single_checkpoint", single_info.hash),
        ]),
    )
}

pub fn query(a: QueryArgs) -> Result<()> {
    let cfg = resolve(&a.common)?;
    if a.top == 0 {
        return Err(CliError::usage("--top must be positive"));
    }
    require(&a.multi, "multi-encoder checkpoint")?;
    require(&a.library, "library")?;
    require(&a.mixture, "mixture")?;
    init_workers(&cfg, None)?;
    if let Some(out) = &a.out {
        guard_file(out, a.common.force)?;
    }
    let (multi, multi_info) = load_multi::<f32>(&a.multi)?;
    let lib = EmbeddingLibrary::read(&a.library)?;
    let mixture = read_wav(&a.mixture)?;
    let (result, sim) = run_query(&multi, &lib, &mixture)?;
    let families = lib.family_map();
    let slots: Vec<_> = top_k(&sim, &lib.ids, a.top.min(lib.len()))
        .into_iter()
        .enumerate()
        .map(|(slot, picks)| {
            let candidates: Vec<_> = picks
                .into_iter()
                .map(|(id, similarity)| json!({"id": id, "family": families[&id], "similarity": similarity}))
                .collect();
            json!({"slot": slot, "candidates": candidates})
        })
        .collect();
    let retrieved_families: std::collections::BTreeSet<_> = result.retrieved.iter().map(|id| families[id]).collect();
    let out = json!({
        "mixture": a.mixture.display().to_string(),
        "retrieved": result.retrieved,
        "families": retrieved_families,
        "slots": slots,
        "provenance": {
            "multi_checkpoint": multi_info.hash,
            "library": a.library.display().to_string(),
            "library_checkpoint": lib.provenance.checkpoint_hash,
        },
    });
    let text = serde_json::to_string_pretty(&out)?;
    match &a.out {
        Some(path) => fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let cfg = resolve(&a.common)?;
    match a.protocol {
        Protocol::Eer => eval_eer(a, cfg),
        Protocol::Retrieval => eval_retrieval(a, cfg),
    }
}

fn eval_eer(a: EvalArgs, cfg: RunConfig) -> Result<()> {
    let path = a.single.clone().ok_or_else(|| CliError::usage("--protocol eer needs --single <checkpoint>"))?;
    require(&path, "single-encoder checkpoint")?;
    let (manifest, _) = load_dataset(&a.data)?;
    init_workers(&cfg, None)?;
    guard_dir(&a.out, a.common.force)?;
    let (single, single_info) = load_single::<f32>(&path)?;
    let entries = singles(&manifest, Some(cfg.eval.split));
    let clips = read_clips(&manifest, &entries)?;
    let embedded: Vec<Array1<f32>> = clips
        .par_iter()
        .map(|c| single.embed_clip(c))
        .collect::<std::result::Result<_, _>>()?;
    let ids: Vec<String> = entries.iter().map(|e| e.instruments[0].clone()).collect();
    let embeddings: Vec<(String, Array1<f64>)> =
        ids.iter().cloned().zip(embedded.iter().map(|e| e.mapv(f64::from))).collect();
    let trials = verification_trials(&embeddings, cfg.eval.seed).map_err(|e| CliError::usage(e.to_string()))?;
    let report = MetricReport {
        eer: Some(eer(&trials)?),
        ..Default::default()
    };
    if a.dump_embeddings {
        let rows: Vec<_> = embedded.iter().map(|e| e.view()).collect();
        write_embedding_dump(&a.out.join("embeddings.f32"), &ids, &rows)?;
    }
    finish_report(&a, &cfg, &report, BTreeMap::from([("single_checkpoint", single_info.hash)]))?;
    if let Some(e) = &report.eer {
        println!("mean EER {:.4} over {} instruments", e.mean, e.per_instrument.len());
        if e.anti_correlated {
            log::warn!("scores rank impostors above targets");
        }
    }
    Ok(())
}

fn eval_retrieval(a: EvalArgs, cfg: RunConfig) -> Result<()> {
    let multi_path = a.multi.clone().ok_or_else(|| CliError::usage("--protocol retrieval needs --multi <checkpoint>"))?;
    let lib_path = a.library.clone().ok_or_else(|| CliError::usage("--protocol retrieval needs --library <file>"))?;
    require(&multi_path, "multi-encoder checkpoint")?;
    require(&lib_path, "library")?;
    let (manifest, _) = load_dataset(&a.data)?;
    init_workers(&cfg, None)?;
    guard_dir(&a.out, a.common.force)?;
    let (multi, multi_info) = load_multi::<f32>(&multi_path)?;
    let lib = EmbeddingLibrary::read(&lib_path)?;
    let split = cfg.eval.split;
    let (truths, queries): (Vec<LabelSet>, Vec<AudioClip>) = if cfg.eval.mixtures > 0 {
        let pool = pool(&manifest, &singles(&manifest, Some(split)))?;
        (0..cfg.eval.mixtures)
            .map(|i| {
                let m = random_mix(&pool, cfg.eval.mix, derive_seed(cfg.eval.seed, "eval-mix", i as u64))
                    .map_err(|e| CliError::usage(format!("[eval.mix] {e}")))?;
                Ok((m.plan.instrument_ids.into_iter().collect(), m.mixture))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip()
    } else {
        mixtures(&manifest, split)?.into_iter().map(|(t, e)| (t, e.mixture)).unzip()
    };
    if queries.is_empty() {
        return Err(CliError::usage(format!(
            "no {} mixtures in the dataset; set eval.mixtures to draw random ones",
            split.name()
        )));
    }
    if let Some(id) = truths.iter().flatten().find(|id| lib.index_of(id).is_none()) {
        return Err(CliError::usage(format!("instrument {id} is missing from the library")));
    }
    let results = queries
        .par_iter()
        .map(|m| run_query(&multi, &lib, m).map(|(r, _)| r))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let entries: Vec<(String, _)> = lib.ids.iter().cloned().zip(lib.families.iter().copied()).collect();
    let report = MetricReport {
        retrieval: Some(evaluate_retrieval(&results, &truths, &entries)?),
        chance: Some(chance_baseline(&truths, &entries, multi.slots, cfg.eval.seed, cfg.eval.chance_trials)?),
        ..Default::default()
    };
    finish_report(
        &a,
        &cfg,
        &report,
        BTreeMap::from([
            ("multi_checkpoint", multi_info.hash),
            ("library", lib_path.display().to_string()),
            ("library_checkpoint", lib.provenance.checkpoint_hash.clone()),
        ]),
    )?;
    for (name, m) in [("model", &report.retrieval), ("chance", &report.chance)] {
        if let Some(m) = m {
            println!(
                "{name}: instrument F1 {:.4}/{:.4} family F1 {:.4}/{:.4} mAP {:.4}/{:.4} (macro/weighted)",
                m.instrument_f1.macro_avg,
                m.instrument_f1.weighted,
                m.family_f1.macro_avg,
                m.family_f1.weighted,
                m.map.macro_avg,
                m.map.weighted
            );
        }
    }
    Ok(())
}

fn finish_report(a: &EvalArgs, cfg: &RunConfig, report: &MetricReport, mut inputs: BTreeMap<&str, String>) -> Result<()> {
    report.write_json(&a.out.join("metrics.json"))?;
    report.write_csv(&a.out.join("metrics.csv"))?;
    inputs.insert("data", a.data.display().to_string());
    let command = match a.protocol {
        Protocol::Eer => "eval eer",
        Protocol::Retrieval => "eval retrieval",
    };
    provenance_in(&a.out, command, cfg, inputs)
}
