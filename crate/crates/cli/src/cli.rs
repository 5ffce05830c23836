//! Argument parsing and the subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lfcbm_core::cbl::{CblModel, CblTrainConfig};
use lfcbm_core::concepts::{run_filter_pipeline, ConceptSet, FilterConfig, FilterReport};
use lfcbm_core::edit::EditRequest;
use lfcbm_core::head::{fit_dense, fit_head, fit_path, FitOptions, PathConfig, SparseHead};
use lfcbm_core::manifest::{load_bundle, read_lines, write_lines, DatasetBundle};
use lfcbm_core::pipeline::{run_pipeline, LoadedModel, PipelineConfig};
use lfcbm_core::session::{SessionState, Split};
use lfcbm_core::synth::{generate_planted, SynthConfig};
use serde::Serialize;

use crate::server::{self, parse_classes};

#[derive(Debug, Parser)]
#[command(name = "lfcbm", version, about = "Label-free concept bottleneck models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted-concept synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "default")]
        preset: String,
    },
    /// Run filters 1-4 over a concept list.
    FilterConcepts {
        #[arg(long)]
        manifest: PathBuf,
        /// One concept per line; defaults to the manifest's list.
        #[arg(long)]
        concepts: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        activation_cutoff: Option<f64>,
    },
    /// Train the concept bottleneck layer on a filtered concept list.
    TrainCbl {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        concepts: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        max_epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit the sparse final layer on top of a trained bottleneck.
    TrainFinal {
        #[arg(long)]
        cbl: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        path_report: Option<PathBuf>,
        #[command(flatten)]
        head: HeadArgs,
    },
    /// Run every stage and write a complete model directory.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON pipeline configuration; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        head: HeadArgs,
    },
    /// Report accuracy and sparsity of a model.
    Evaluate {
        #[arg(long, conflicts_with_all = ["cbl", "head"])]
        model_dir: Option<PathBuf>,
        #[arg(long, requires = "head")]
        cbl: Option<PathBuf>,
        #[arg(long, requires = "cbl")]
        head: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Show the top concept contributions behind one prediction.
    Explain {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        input_index: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        #[arg(long)]
        json: bool,
    },
    /// Export the concept to class weight graph.
    WeightsGraph {
        #[arg(long)]
        model_dir: PathBuf,
        /// Comma-separated class names or indices; all when omitted.
        #[arg(long, default_value = "")]
        classes: String,
        #[arg(long, default_value_t = 0.05)]
        min_weight: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Final-layer edits and triage tags.
    Edit {
        #[arg(long, global = true, default_value = ".")]
        model_dir: PathBuf,
        #[command(subcommand)]
        action: EditAction,
    },
    /// Serve a model directory over HTTP.
    Serve {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct HeadArgs {
    #[arg(long, default_value_t = 0.99)]
    pub alpha: f64,
    /// Target band for mean nonzero weights per class, `lo:hi`.
    #[arg(long, value_parser = parse_band)]
    pub nnz: Option<(f64, f64)>,
    /// Band used when no path point reaches `--nnz`.
    #[arg(long, value_parser = parse_band)]
    pub fallback_nnz: Option<(f64, f64)>,
    /// Fit one λ instead of the path; 0 gives the dense head.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

impl HeadArgs {
    fn apply(&self, mut cfg: PathConfig) -> PathConfig {
        cfg.alpha = self.alpha;
        if let Some(b) = self.nnz {
            cfg.band = b;
        }
        if self.fallback_nnz.is_some() {
            cfg.fallback_band = self.fallback_nnz;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        cfg
    }
}

fn parse_band(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected lo:hi")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    if !(lo <= hi) {
        return Err(format!("empty band {lo}:{hi}"));
    }
    Ok((lo, hi))
}

#[derive(Debug, Clone, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub input: usize,
    /// Ground-truth class, by name or index.
    #[arg(long)]
    pub gt: String,
    /// Mispredicted class, by name or index.
    #[arg(long)]
    pub pred: String,
    /// Concept, by name or index.
    #[arg(long)]
    pub concept: String,
    #[arg(long, default_value_t = lfcbm_core::edit::DEFAULT_MARGIN)]
    pub b: f64,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
}

#[derive(Debug, Subcommand)]
pub enum EditAction {
    /// Print the weight change an edit would make.
    Propose(EditArgs),
    /// Apply an edit and append it to the journal.
    Apply(EditArgs),
    /// Measure an edit's effect on the validation split.
    Impact {
        /// Latest applied edit when omitted.
        #[arg(long)]
        id: Option<u64>,
        #[arg(long)]
        val: bool,
    },
    /// Undo an edit.
    Revert {
        #[arg(long)]
        id: u64,
    },
    /// Record an error type (1-4) for an input.
    Tag {
        #[arg(long)]
        input: usize,
        #[arg(long = "type")]
        error_type: u8,
        #[arg(long, default_value = "")]
        note: String,
    },
    /// Print the journal.
    List,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Restricts the bundle to the concepts listed in `file`.
fn restrict(bundle: DatasetBundle, file: Option<&Path>) -> Result<DatasetBundle> {
    let Some(file) = file else { return Ok(bundle) };
    let wanted = read_lines(file)?;
    let texts = bundle.concepts.texts();
    let idx = wanted
        .iter()
        .map(|w| {
            texts
                .iter()
                .position(|t| t == w)
                .ok_or_else(|| anyhow!("concept {w:?} is not in the manifest"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(bundle.select_concepts(&idx))
}

fn lookup(text: &str, names: &[String], what: &str) -> Result<usize> {
    names
        .iter()
        .position(|n| n == text)
        .or_else(|| text.parse().ok().filter(|&i: &usize| i < names.len()))
        .ok_or_else(|| anyhow!("unknown {what} {text:?}"))
}

#[derive(Serialize)]
struct FilterOutput<'a> {
    report: &'a FilterReport,
    concepts: &'a ConceptSet,
}

#[derive(Serialize)]
struct Evaluation {
    concepts: usize,
    classes: usize,
    lambda: f64,
    alpha: f64,
    mean_nnz: f64,
    nnz_per_class: Vec<usize>,
    train_accuracy: f64,
    val_accuracy: f64,
}

fn evaluate(cbl: &CblModel, head: &SparseHead, bundle: &DatasetBundle) -> Result<Evaluation> {
    let train = cbl.project_all(&bundle.train_features)?;
    let val = cbl.project_all(&bundle.val_features)?;
    Ok(Evaluation {
        concepts: head.num_concepts(),
        classes: head.num_classes(),
        lambda: head.lambda,
        alpha: head.alpha,
        mean_nnz: head.mean_nnz(),
        nnz_per_class: head.nnz_per_class.clone(),
        train_accuracy: head.accuracy(train.view(), &bundle.train_labels),
        val_accuracy: head.accuracy(val.view(), &bundle.val_labels),
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, seed, preset } => {
            let mut cfg = SynthConfig::preset(&preset).ok_or_else(|| anyhow!("unknown preset {preset:?}"))?;
            cfg.seed = seed;
            let data = generate_planted(&cfg)?;
            let manifest = data.write(&out)?;
            println!("{}", manifest.display());
        }
        Command::FilterConcepts {
            manifest,
            concepts,
            out,
            report,
            activation_cutoff,
        } => {
            let bundle = restrict(load_bundle(&manifest)?, concepts.as_deref())?;
            let cfg = FilterConfig {
                activation_cutoff,
                ..FilterConfig::default()
            };
            let (set, rep) = run_filter_pipeline(&bundle.concepts, &bundle, &cfg)?;
            write_lines(&out, &set.kept_texts())?;
            if let Some(path) = report {
                write_json(&path, &FilterOutput {
                    report: &rep,
                    concepts: &set,
                })?;
            }
            for stage in &rep.stages {
                println!("filter {}: {} -> {}", stage.filter.number(), stage.before, stage.after);
            }
        }
        Command::TrainCbl {
            manifest,
            concepts,
            out,
            report,
            max_epochs,
            seed,
        } => {
            let bundle = restrict(load_bundle(&manifest)?, concepts.as_deref())?;
            let cfg = CblTrainConfig {
                max_epochs,
                seed,
                ..CblTrainConfig::default()
            };
            let set = ConceptSet::from_texts(bundle.concepts.texts());
            let (model, rep) = lfcbm_core::train_cbl(&bundle, &set, &cfg)?;
            model.save(&out)?;
            if let Some(path) = report {
                write_json(&path, &rep)?;
            }
            println!(
                "{} epochs (best {}), {} concepts kept, {} dropped for low fidelity",
                rep.epochs_run,
                rep.best_epoch,
                model.num_concepts(),
                rep.dropped.len()
            );
        }
        Command::TrainFinal {
            cbl,
            manifest,
            out,
            path_report,
            head,
        } => {
            let model = CblModel::load(&cbl)?;
            let bundle = load_bundle(&manifest)?;
            let train = model.project_all(&bundle.train_features)?;
            let val = model.project_all(&bundle.val_features)?;
            let fitted = match head.lambda {
                Some(0.0) => fit_dense(train.view(), &bundle.train_labels, &bundle.class_names, &FitOptions::default())?.0,
                Some(l) => fit_head(
                    train.view(),
                    &bundle.train_labels,
                    &bundle.class_names,
                    head.alpha,
                    l,
                    &FitOptions::default(),
                    None,
                )?
                .0,
                None => {
                    let cfg = head.apply(PathConfig::default());
                    let (h, rep) = fit_path(
                        train.view(),
                        &bundle.train_labels,
                        val.view(),
                        &bundle.val_labels,
                        &bundle.class_names,
                        &cfg,
                    )?;
                    if let Some(path) = &path_report {
                        write_json(path, &rep)?;
                    }
                    if !rep.in_band {
                        eprintln!("warning: no λ on the path reached the nnz band");
                    }
                    h
                }
            }
            .quantized();
            fitted.save(&out)?;
            print_json(&evaluate(&model, &fitted, &bundle)?)?;
        }
        Command::Run {
            manifest,
            out,
            config,
            head,
        } => {
            let mut cfg: PipelineConfig = match config {
                Some(p) => serde_json::from_slice(&fs::read(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => PipelineConfig::default(),
            };
            cfg.path = head.apply(cfg.path);
            if head.lambda.is_some() {
                bail!("--lambda is only supported by train-final");
            }
            let report = run_pipeline(&manifest, &out, &cfg)?;
            print_json(&report)?;
        }
        Command::Evaluate {
            model_dir,
            cbl,
            head,
            manifest,
        } => {
            let (cbl, head, bundle) = match (model_dir, cbl, head) {
                (Some(dir), _, _) => {
                    let m = LoadedModel::load(&dir)?;
                    let bundle = match &manifest {
                        Some(p) => load_bundle(p)?,
                        None => m.load_bundle()?,
                    };
                    (m.cbl, m.head, bundle)
                }
                (None, Some(c), Some(h)) => {
                    let manifest = manifest.ok_or_else(|| anyhow!("--manifest is required with --cbl/--head"))?;
                    (CblModel::load(&c)?, SparseHead::load(&h)?, load_bundle(&manifest)?)
                }
                _ => bail!("pass --model-dir, or --cbl, --head and --manifest"),
            };
            print_json(&evaluate(&cbl, &head, &bundle)?)?;
        }
        Command::Explain {
            model_dir,
            input_index,
            k,
            split,
            json,
        } => {
            let s = SessionState::open(&model_dir, None)?;
            let view = s.explanation(split.into(), input_index, k)?;
            if json {
                print_json(&view)?;
            } else {
                let label = s.labels(split.into())[input_index];
                println!(
                    "input {input_index}: predicted {} (logit {:.4}), label {}",
                    view.class_name, view.logit, s.edits.working().class_names[label]
                );
                for e in &view.entries {
                    println!("  {:+10.4}  {:<40} w={:+.4} a={:+.4}", e.contribution, e.label, e.weight, e.activation);
                }
                println!("  {:+10.4}  bias", view.bias);
                println!("top {k} explain {:.1}% of |contribution|", view.explained_fraction * 100.0);
            }
        }
        Command::WeightsGraph {
            model_dir,
            classes,
            min_weight,
            out,
        } => {
            let s = SessionState::open(&model_dir, None)?;
            let names = &s.edits.working().class_names;
            let mut idx = parse_classes(&classes, names).map_err(|e| anyhow!(e))?;
            if idx.is_empty() {
                idx = (0..names.len()).collect();
            }
            let graph = s.weight_graph(&idx, min_weight)?;
            match out {
                Some(p) => write_json(&p, &graph)?,
                None => print_json(&graph)?,
            }
        }
        Command::Edit { model_dir, action } => edit(&model_dir, action)?,
        Command::Serve {
            model_dir,
            manifest,
            host,
            port,
        } => {
            let state = SessionState::open(&model_dir, manifest.as_deref())?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .with_context(|| format!("binding {host}:{port}"))?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                server::serve(state, listener, async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await
            })?;
        }
    }
    Ok(())
}

fn edit_request(s: &SessionState, a: &EditArgs) -> Result<EditRequest> {
    let classes = &s.edits.working().class_names;
    Ok(EditRequest {
        gt: lookup(&a.gt, classes, "class")?,
        pred: lookup(&a.pred, classes, "class")?,
        concept: lookup(&a.concept, &s.model.concept_names, "concept")?,
        margin: a.b,
        input: Some(a.input),
    })
}

fn edit(dir: &Path, action: EditAction) -> Result<()> {
    let mut s = SessionState::open(dir, None)?;
    match action {
        EditAction::Propose(a) => {
            let dw = s.propose(a.split.into(), &edit_request(&s, &a)?)?;
            println!("{dw}");
        }
        EditAction::Apply(a) => {
            let req = edit_request(&s, &a)?;
            let rec = s.apply_edit(a.split.into(), &req)?;
            s.persist()?;
            print_json(&rec)?;
        }
        EditAction::Impact { id, val: _ } => {
            let id = match id {
                Some(id) => id,
                None => s
                    .edits
                    .records()
                    .iter()
                    .rev()
                    .find(|r| r.status == lfcbm_core::EditStatus::Applied)
                    .map(|r| r.id)
                    .ok_or_else(|| anyhow!("no applied edits"))?,
            };
            let report = s.impact(id)?;
            s.persist()?;
            print_json(&report)?;
        }
        EditAction::Revert { id } => {
            let rec = s.revert_edit(id)?;
            s.persist()?;
            print_json(&rec)?;
        }
        EditAction::Tag { input, error_type, note } => {
            let tag = s.tag(input, error_type, &note)?;
            s.persist()?;
            print_json(&tag)?;
        }
        EditAction::List => print_json(&s.edits.records())?,
    }
    Ok(())
}
