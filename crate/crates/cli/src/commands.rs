//! The pipeline stages behind each subcommand. Every stage writes into a
//! fresh run directory and every file it writes records the full config
//! together with the dataset and checkpoint hashes.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ptransfer_core::data::{generate_dataset, LabeledDataset, Split};
use ptransfer_core::nn::{checkpoint, Network};
use ptransfer_core::search::{search, ScoredScheme, SearchEvent, SearchOptions, TraceRecord};
use ptransfer_core::transfer::{
    collapse_layer, evaluate_scheme, pretrain_base, sample_episodes, EpisodeFitness, EvalReport,
    EvalSetup, SchemeVector,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{derive_seed, format_layer, RunConfig, Stream};
use crate::error::{CliError, CliResult};
use crate::grid::{parse_grid, render_grid};

pub const CHECKPOINT_FILE: &str = "checkpoint.ptck";
pub const PRETRAIN_LOG: &str = "pretrain_log.jsonl";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const SCHEME_FILE: &str = "best_scheme.json";
pub const GRID_FILE: &str = "scheme_grid.txt";
pub const REPORT_FILE: &str = "report.jsonl";

/// Provenance block embedded in every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config: RunConfig,
    pub dataset_hash: String,
    pub checkpoint_hash: Option<String>,
}

/// Creates `parent/name`, or `parent/name-1`, `parent/name-2`, ... if taken.
pub fn create_run_dir(parent: &Path, name: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(parent)
        .map_err(|e| CliError::io(format!("creating {}", parent.display()), e))?;
    for n in 0.. {
        let dir = if n == 0 {
            parent.join(name)
        } else {
            parent.join(format!("{name}-{n}"))
        };
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::io(format!("creating {}", dir.display()), e)),
        }
    }
    unreachable!("run directory suffixes exhausted")
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn json_line(out: &mut impl Write, value: &Value) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")
}

fn comment_block(p: &Provenance) -> String {
    let mut s = format!(
        "# command {}\n# dataset {}\n# checkpoint {}\n# config:\n",
        p.command,
        p.dataset_hash,
        p.checkpoint_hash.as_deref().unwrap_or("none")
    );
    for line in p.config.to_toml().lines() {
        s.push_str("#   ");
        s.push_str(line);
        s.push('\n');
    }
    s
}

fn dataset(cfg: &RunConfig) -> CliResult<LabeledDataset> {
    Ok(generate_dataset(&cfg.dataset)?)
}

/// Fresh backbone and base-class softmax head under the config seed.
pub fn initial_network(cfg: &RunConfig) -> CliResult<Network> {
    let net = Network::init(
        cfg.network.input.clone(),
        cfg.layers()?,
        derive_seed(cfg.seed, Stream::Init),
    )?;
    Ok(net.with_softmax_head(cfg.dataset.n_base, derive_seed(cfg.seed, Stream::BaseHead)))
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> CliResult<PretrainOutput> {
    let ds = dataset(cfg)?;
    let dataset_hash = ds.content_hash();
    let net = initial_network(cfg)?;
    tracing::info!(
        epochs = cfg.pretrain.epochs,
        parameters = net.parameter_count(),
        "pre-training"
    );
    let (mut backbone, log) = pretrain_base(net, &ds, &cfg.pretrain_config())?;
    if let Some(layer) = cfg.benchmark.collapse_layer {
        backbone = collapse_layer(&backbone, layer, derive_seed(cfg.seed, Stream::Collapse))?;
    }
    let mut prov = Provenance {
        command: "pretrain".into(),
        config: cfg.clone(),
        dataset_hash,
        checkpoint_hash: None,
    };
    let meta = serde_json::to_string(&prov).expect("provenance serializes");
    let bytes = checkpoint::encode(&backbone, &meta);
    let hash = checkpoint::content_hash(&bytes);
    prov.checkpoint_hash = Some(hash.clone());

    let dir = create_run_dir(out, "pretrain")?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    write_file(&ckpt, &bytes)?;
    let mut text = Vec::new();
    json_line(&mut text, &json!({"kind": "header", "provenance": prov})).expect("in-memory write");
    for rec in &log {
        json_line(&mut text, &json!({"kind": "epoch", "epoch": rec.epoch, "loss": rec.loss, "accuracy": rec.accuracy}))
            .expect("in-memory write");
    }
    write_file(&dir.join(PRETRAIN_LOG), &text)?;
    if let Some(last) = log.last() {
        tracing::info!(
            loss = last.loss,
            accuracy = last.accuracy,
            "pre-training finished"
        );
    }
    Ok(PretrainOutput {
        dir,
        checkpoint: ckpt,
        checkpoint_hash: hash,
    })
}

/// Loads a checkpoint and checks it was built for the config's network.
pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> CliResult<(Network, String)> {
    let (net, _, bytes) = checkpoint::load(path)
        .map_err(|e| CliError::Runtime(format!("loading checkpoint {}: {e}", path.display())))?;
    let want = cfg.layers()?;
    if net.layers() != want.as_slice() || net.input_shape() != cfg.network.input.as_slice() {
        let mut diffs = Vec::new();
        if net.input_shape() != cfg.network.input.as_slice() {
            diffs.push(format!(
                "input: checkpoint {:?}, config {:?}",
                net.input_shape(),
                cfg.network.input
            ));
        }
        for i in 0..net.layers().len().max(want.len()) {
            let a = net.layers().get(i).map(format_layer);
            let b = want.get(i).map(format_layer);
            if a != b {
                diffs.push(format!(
                    "layer {i}: checkpoint `{}`, config `{}`",
                    a.as_deref().unwrap_or("none"),
                    b.as_deref().unwrap_or("none")
                ));
            }
        }
        return Err(CliError::config(
            "network.layers",
            format!("checkpoint does not match config ({})", diffs.join("; ")),
        ));
    }
    Ok((net, checkpoint::content_hash(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeFile {
    pub kind: String,
    pub label: String,
    pub scheme: SchemeVector,
    pub rates: Vec<f64>,
    pub fitness: Option<f64>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct SearchOutput {
    pub dir: PathBuf,
    pub best: ScoredScheme,
    pub records: Vec<TraceRecord>,
    pub frozen_fitness: f64,
}

/// Trace records of the complete generations of an earlier trace file.
pub fn read_resume_records(path: &Path) -> CliResult<Vec<TraceRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    let mut records = Vec::new();
    let mut complete = 0;
    for line in text.lines() {
        let Ok(v) = serde_json::from_str::<Value>(line) else {
            break;
        };
        match v["kind"].as_str() {
            Some("eval") => {
                let r: TraceRecord = serde_json::from_value(v["record"].clone()).map_err(|e| {
                    CliError::Runtime(format!("bad trace record in {}: {e}", path.display()))
                })?;
                records.push(r);
            }
            Some("generation") => complete = records.len(),
            _ => {}
        }
    }
    records.truncate(complete);
    Ok(records)
}

pub fn cmd_search(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    out: &Path,
    parallel: bool,
    resume: Option<&Path>,
) -> CliResult<SearchOutput> {
    let (base, checkpoint_hash) = load_checkpoint(cfg, checkpoint_path)?;
    let ds = dataset(cfg)?;
    let prov = Provenance {
        command: "search".into(),
        config: cfg.clone(),
        dataset_hash: ds.content_hash(),
        checkpoint_hash: Some(checkpoint_hash),
    };
    // Validation episodes see the same shift as the novel split.
    let val = if cfg.dataset.shift.is_some() {
        ds.with_split_shifted(Split::Validation)
    } else {
        ds
    };
    let search_cfg = cfg.search_config();
    let episodes = sample_episodes(
        &val,
        Split::Validation,
        cfg.episode,
        search_cfg.n_val_episodes,
        derive_seed(cfg.seed, Stream::Validation),
    )?;
    let fitness = EpisodeFitness {
        base: &base,
        zoo: &cfg.zoo,
        episodes,
        budget: cfg.finetune,
        head: cfg.head,
    };
    let mut options = SearchOptions {
        parallel,
        ..SearchOptions::default()
    };
    if let Some(path) = resume {
        let records = read_resume_records(path)?;
        tracing::info!(records = records.len(), "resuming from earlier trace");
        options = SearchOptions {
            parallel,
            ..SearchOptions::resume_from(&records)
        };
    }

    let dir = create_run_dir(out, "search")?;
    let open = |name: &str| {
        let p = dir.join(name);
        File::create(&p)
            .map(BufWriter::new)
            .map_err(|e| CliError::io(format!("creating {}", p.display()), e))
    };
    let mut trace_out = open(TRACE_FILE)?;
    let mut timing_out = open(TIMING_FILE)?;
    json_line(
        &mut trace_out,
        &json!({"kind": "header", "provenance": prov}),
    )
    .map_err(|e| CliError::io("writing trace", e))?;
    let start = Instant::now();
    let mut write_error: Option<std::io::Error> = None;
    let len = base.scheme_len();
    tracing::info!(budget = search_cfg.budget(), layers = len, "searching");
    let result = search(
        &search_cfg,
        len,
        |s| fitness.evaluate(s),
        &options,
        &mut |event| {
            let res = match event {
            SearchEvent::Evaluated(r) => json_line(&mut trace_out, &json!({"kind": "eval", "record": r})).and_then(|_| {
                json_line(
                    &mut timing_out,
                    &json!({"index": r.index, "cached": r.cached, "elapsed_s": start.elapsed().as_secs_f64()}),
                )
            }),
            SearchEvent::Generation(g) => {
                tracing::info!(generation = g.generation, best = g.best_fitness, "generation done");
                json_line(&mut trace_out, &json!({"kind": "generation", "record": g}))
                    .and_then(|_| trace_out.flush())
                    .and_then(|_| timing_out.flush())
            }
        };
            if let Err(e) = res {
                write_error.get_or_insert(e);
            }
        },
    );
    let (best, trace) = match result {
        Ok(v) => v,
        Err(abort) => {
            let _ = json_line(
                &mut trace_out,
                &json!({"kind": "aborted", "error": abort.error.to_string(), "evaluations": abort.trace.records.len()}),
            );
            let _ = trace_out.flush();
            return Err(CliError::Runtime(format!(
                "search aborted: {abort}; partial trace in {}",
                dir.display()
            )));
        }
    };
    json_line(&mut trace_out, &json!({"kind": "best", "record": best}))
        .and_then(|_| trace_out.flush())
        .and_then(|_| timing_out.flush())
        .map_err(|e| CliError::io("writing trace", e))?;
    if let Some(e) = write_error {
        return Err(CliError::io("writing trace", e));
    }
    let frozen_fitness = trace.records[0].fitness;
    if best.fitness < frozen_fitness {
        return Err(CliError::Runtime(format!(
            "searched fitness {} fell below the frozen baseline {frozen_fitness}",
            best.fitness
        )));
    }

    let file = SchemeFile {
        kind: "scheme".into(),
        label: "searched".into(),
        scheme: best.scheme.clone(),
        rates: best.scheme.rates(&cfg.zoo)?,
        fitness: Some(best.fitness),
        provenance: prov.clone(),
    };
    let mut text = serde_json::to_vec_pretty(&file).expect("scheme serializes");
    text.push(b'\n');
    write_file(&dir.join(SCHEME_FILE), &text)?;
    let grid = render_grid(&cfg.layers()?, &best.scheme, &cfg.zoo);
    write_file(
        &dir.join(GRID_FILE),
        format!("{grid}{}", comment_block(&prov)).as_bytes(),
    )?;
    tracing::info!(scheme = %best.scheme, fitness = best.fitness, "search finished");
    Ok(SearchOutput {
        dir,
        best,
        records: trace.records,
        frozen_fitness,
    })
}

/// Resolves `fixed`, `uniform`, `manual`, a scheme file or a grid file.
pub fn resolve_scheme(cfg: &RunConfig, arg: &str) -> CliResult<(String, SchemeVector)> {
    let len = cfg.scheme_len()?;
    let uniform = cfg.zoo.uniform_index();
    let (label, scheme) = match arg {
        "fixed" => ("fixed".to_string(), SchemeVector::frozen(len)),
        "uniform" => ("uniform".to_string(), SchemeVector::uniform(len, uniform)),
        "manual" => ("manual".to_string(), SchemeVector::last_layer(len, uniform)),
        path => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read scheme {path}: {e}")))?;
            match serde_json::from_str::<SchemeFile>(&text) {
                Ok(f) => (f.label, f.scheme),
                Err(_) => (
                    "custom".to_string(),
                    parse_grid(&text, &cfg.zoo)
                        .map_err(|e| CliError::Usage(format!("scheme {path}: {e}")))?,
                ),
            }
        }
    };
    scheme
        .validate(len, &cfg.zoo)
        .map_err(|e| CliError::Usage(format!("scheme {arg}: {e}")))?;
    Ok((label, scheme))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub kind: String,
    pub label: String,
    pub formatted: String,
    pub report: EvalReport,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct EvaluateOutput {
    pub dir: PathBuf,
    pub record: ReportRecord,
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    scheme_arg: &str,
    out: &Path,
) -> CliResult<EvaluateOutput> {
    let (label, scheme) = resolve_scheme(cfg, scheme_arg)?;
    let (base, checkpoint_hash) = load_checkpoint(cfg, checkpoint_path)?;
    let ds = dataset(cfg)?;
    let prov = Provenance {
        command: "evaluate".into(),
        config: cfg.clone(),
        dataset_hash: ds.content_hash(),
        checkpoint_hash: Some(checkpoint_hash),
    };
    let setup = EvalSetup {
        base: &base,
        zoo: &cfg.zoo,
        dataset: &ds,
        split: Split::Novel,
        shape: cfg.episode,
        budget: cfg.finetune,
        head: cfg.head,
    };
    tracing::info!(%scheme, episodes = cfg.eval.episodes, "evaluating");
    let report = evaluate_scheme(
        &setup,
        &scheme,
        cfg.eval.episodes,
        derive_seed(cfg.seed, Stream::Evaluation),
    )?;
    let record = ReportRecord {
        kind: "report".into(),
        label,
        formatted: report.formatted(),
        report,
        provenance: prov,
    };
    let dir = create_run_dir(out, "evaluate")?;
    let mut line = serde_json::to_vec(&record).expect("report serializes");
    line.push(b'\n');
    write_file(&dir.join(REPORT_FILE), &line)?;
    Ok(EvaluateOutput { dir, record })
}
