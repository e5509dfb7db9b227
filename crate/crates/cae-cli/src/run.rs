//! Subcommand implementations: resolve flags against the config file, load
//! and split data, call into the core crate, and write artifacts.

use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cae_core::cae::{self, LabelPair, Mode, TrainConfig};
use cae_core::dataio::{
    atomic_write, load_csv, load_idx, load_model, normalize_fit_apply, save_matrix_csv, save_model,
    selected_features_csv, split, Dataset, NormKind, NormRecord, SplitSpec,
};
use cae_core::eval::{compare, results_to_csv, Method};
use cae_core::nn::DecoderSpec;
use cae_core::numcore::sig6;
use cae_core::selector::{feature_groups, selected_indices, AnnealSchedule};
use cae_core::{CaeError, Result};

use crate::config::Config;
use crate::{EvalArgs, GroupsArgs, HyperArgs, ModelDataArgs, SourceArgs, SplitArgs, TrainArgs};

fn require_out(flag: Option<PathBuf>, cfg: &Config) -> Result<PathBuf> {
    cfg.resolve(flag, "out")?.ok_or_else(|| {
        CaeError::Parameter("an output directory is required (--out or config 'out')".into())
    })
}

fn require_model(flag: Option<PathBuf>, cfg: &Config) -> Result<PathBuf> {
    cfg.resolve(flag, "model")?.ok_or_else(|| {
        CaeError::Parameter("a model file is required (--model or config 'model')".into())
    })
}

/// Refuse to write into a directory that already has contents unless --force.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| CaeError::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(CaeError::Parameter(format!(
                "output directory {} already has contents; pass --force to overwrite",
                dir.display()
            )));
        }
    } else {
        fs::create_dir_all(dir).map_err(|e| CaeError::io(dir, e))?;
    }
    Ok(())
}

/// A CSV first line where every cell parses as a number is data, anything
/// else is a header.
fn csv_has_header(path: &Path) -> Result<bool> {
    let file = fs::File::open(path).map_err(|e| CaeError::io(path, e))?;
    let mut line = String::new();
    std::io::BufReader::new(file)
        .read_line(&mut line)
        .map_err(|e| CaeError::io(path, e))?;
    let line = line.trim_end();
    if line.is_empty() {
        return Ok(false);
    }
    Ok(!line
        .split(',')
        .all(|cell| cell.trim().parse::<f64>().is_ok()))
}

fn load_source(args: &SourceArgs, cfg: &Config) -> Result<Dataset> {
    let data: Option<PathBuf> = cfg.resolve(args.data.clone(), "data")?;
    let labels_col: Option<String> = cfg.resolve(args.labels_col.clone(), "labels-col")?;
    let idx_images: Option<PathBuf> = cfg.resolve(args.idx_images.clone(), "idx-images")?;
    let idx_labels: Option<PathBuf> = cfg.resolve(args.idx_labels.clone(), "idx-labels")?;
    match (&data, &idx_images) {
        (Some(_), Some(_)) => Err(CaeError::Parameter(
            "pass --data or --idx-images, not both".into(),
        )),
        (None, None) => Err(CaeError::Parameter(
            "a dataset is required: --data <csv> or --idx-images <idx>".into(),
        )),
        (Some(csv), None) => {
            if idx_labels.is_some() {
                return Err(CaeError::Parameter(
                    "--idx-labels goes with --idx-images; use --labels-col for CSV data".into(),
                ));
            }
            load_csv(csv, csv_has_header(csv)?, labels_col.as_deref())
        }
        (None, Some(images)) => {
            if labels_col.is_some() {
                return Err(CaeError::Parameter(
                    "--labels-col goes with --data; use --idx-labels for IDX data".into(),
                ));
            }
            load_idx(images, idx_labels.as_deref())
        }
    }
}

fn resolve_split(args: &SplitArgs, cfg: &Config) -> Result<SplitSpec> {
    let default = SplitSpec::default();
    Ok(SplitSpec {
        train: cfg
            .resolve(args.split_train, "split-train")?
            .unwrap_or(default.train),
        val: cfg
            .resolve(args.split_val, "split-val")?
            .unwrap_or(default.val),
        test: cfg
            .resolve(args.split_test, "split-test")?
            .unwrap_or(default.test),
        seed: cfg
            .resolve(args.split_seed, "split-seed")?
            .unwrap_or(default.seed),
    })
}

fn normalize_kind(args: &SplitArgs, cfg: &Config) -> Result<Option<NormKind>> {
    let text: Option<String> = cfg.resolve(args.normalize.clone(), "normalize")?;
    match text.as_deref().map(str::trim) {
        None | Some("none") => Ok(None),
        Some("minmax") => Ok(Some(NormKind::MinMax)),
        Some("zscore") => Ok(Some(NormKind::ZScore)),
        Some(other) => Err(CaeError::Parameter(format!(
            "unknown normalization '{}' (expected none, minmax, zscore)",
            other
        ))),
    }
}

fn parse_mode(text: &str) -> Result<Mode> {
    match text.trim() {
        "unsup" | "unsupervised" => Ok(Mode::Unsupervised),
        "sup" | "supervised" => Ok(Mode::Supervised),
        other => Err(CaeError::Parameter(format!(
            "unknown mode '{}' (expected unsup or sup)",
            other
        ))),
    }
}

fn parse_decoder(text: &str, output_dim: usize) -> Result<DecoderSpec> {
    let text = text.trim();
    if text == "linear" {
        return Ok(DecoderSpec::linear(output_dim));
    }
    if let Some(rest) = text.strip_prefix("hidden:") {
        let mut sizes = Vec::new();
        for part in rest.split(',') {
            let n: usize = part.trim().parse().map_err(|_| {
                CaeError::Parameter(format!("bad hidden layer size '{}'", part.trim()))
            })?;
            sizes.push(n);
        }
        return Ok(DecoderSpec::with_hidden(sizes, output_dim));
    }
    Err(CaeError::Parameter(format!(
        "unknown decoder '{}' (expected linear or hidden:<n>[,<n>...])",
        text
    )))
}

fn class_count(ds: &Dataset) -> Result<usize> {
    match &ds.labels {
        Some(labels) if !labels.is_empty() => Ok(labels.iter().max().unwrap() + 1),
        _ => Err(CaeError::Data(
            "supervised mode needs labels (--labels-col or --idx-labels)".into(),
        )),
    }
}

struct Hyper {
    k: usize,
    seed: u64,
    epochs: usize,
    max_epochs: usize,
    t0: f64,
    tb: f64,
    stop_threshold: f64,
    lr: f64,
    batch_size: usize,
}

fn resolve_hyper(args: &HyperArgs, cfg: &Config) -> Result<Hyper> {
    let k = cfg
        .resolve(args.k, "k")?
        .ok_or_else(|| CaeError::Parameter("k is required (--k or config 'k')".into()))?
        as usize;
    let epochs = cfg.resolve(args.epochs, "epochs")?.unwrap_or(300);
    let max_epochs = cfg
        .resolve(args.max_epochs, "max-epochs")?
        .unwrap_or(3 * epochs);
    Ok(Hyper {
        k,
        seed: cfg.resolve(args.seed, "seed")?.unwrap_or(0),
        epochs,
        max_epochs,
        t0: cfg.resolve(args.t0, "t0")?.unwrap_or(10.0),
        tb: cfg.resolve(args.tb, "tb")?.unwrap_or(0.01),
        stop_threshold: cfg
            .resolve(args.stop_threshold, "stop-threshold")?
            .unwrap_or(0.99),
        lr: cfg.resolve(args.lr, "lr")?.unwrap_or(1e-3),
        batch_size: cfg.resolve(args.batch_size, "batch-size")?.unwrap_or(256),
    })
}

impl Hyper {
    fn train_config(&self, decoder: DecoderSpec, mode: Mode) -> Result<TrainConfig> {
        Ok(TrainConfig {
            k: self.k,
            schedule: AnnealSchedule::new(self.t0, self.tb, self.epochs)?,
            learning_rate: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            stop_threshold: self.stop_threshold,
            decoder,
            mode,
            seed: self.seed,
            refit_val: false,
        })
    }
}

/// Everything train and ablate share: loaded splits, the fitted
/// normalization record, and the resolved training config.
struct Setup {
    names: Vec<String>,
    train: Dataset,
    val: Dataset,
    norm: Option<NormRecord>,
}

impl Setup {
    fn build(args: &TrainArgs, cfg: &Config) -> Result<(Setup, TrainConfig)> {
        let ds = load_source(&args.source, cfg)?;
        let spec = resolve_split(&args.split, cfg)?;
        let (mut train, mut val, mut test) = split(&ds, &spec)?;
        let norm = match normalize_kind(&args.split, cfg)? {
            Some(kind) => Some(normalize_fit_apply(
                &mut train,
                &mut [&mut val, &mut test],
                kind,
            )?),
            None => None,
        };
        let mode = parse_mode(
            &cfg.resolve(args.mode.clone(), "mode")?
                .unwrap_or_else(|| "unsup".into()),
        )?;
        let output_dim = match mode {
            Mode::Unsupervised => train.d(),
            Mode::Supervised => class_count(&ds)?,
        };
        let decoder_text = cfg
            .resolve(args.decoder.clone(), "decoder")?
            .unwrap_or_else(|| "linear".into());
        let decoder = parse_decoder(&decoder_text, output_dim)?;
        let tc = resolve_hyper(&args.hyper, cfg)?.train_config(decoder, mode)?;
        let setup = Setup {
            names: ds.feature_names,
            train,
            val,
            norm,
        };
        Ok((setup, tc))
    }

    fn labels(&self, mode: Mode) -> Result<Option<LabelPair<'_>>> {
        match mode {
            Mode::Unsupervised => Ok(None),
            Mode::Supervised => match (&self.train.labels, &self.val.labels) {
                (Some(lt), Some(lv)) => Ok(Some((lt.as_slice(), lv.as_slice()))),
                _ => Err(CaeError::Data(
                    "supervised mode needs labels (--labels-col or --idx-labels)".into(),
                )),
            },
        }
    }
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = Config::load(args.config.as_deref())?;
    let out = require_out(args.out.clone(), &cfg)?;
    let (setup, tc) = Setup::build(args, &cfg)?;
    let labels = setup.labels(tc.mode)?;
    prepare_out(&out, args.force)?;
    let started = Instant::now();
    let (mut model, report) = cae::train(&setup.train.features, &setup.val.features, &tc, labels)?;
    model.feature_names = setup.names.clone();
    model.norm = setup.norm.clone();
    save_model(&model, &out.join("model.json"))?;
    atomic_write(&out.join("train_report.csv"), report.to_csv().as_bytes())?;
    let indices = selected_indices(&model.selector);
    atomic_write(
        &out.join("selected_features.csv"),
        selected_features_csv(&indices, &model.feature_names).as_bytes(),
    )?;
    let last = report.last().expect("training runs at least one epoch");
    println!(
        "{} after {} epochs in {:.1}s; validation loss {}",
        report.stop,
        report.epochs.len(),
        started.elapsed().as_secs_f64(),
        sig6(last.val_loss)
    );
    println!(
        "selected features: {}",
        indices
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    println!(
        "wrote model.json, train_report.csv, selected_features.csv to {}",
        out.display()
    );
    Ok(())
}

pub fn select(args: &ModelDataArgs) -> Result<()> {
    let cfg = Config::load(args.config.as_deref())?;
    let model_path = require_model(args.model.clone(), &cfg)?;
    let out = require_out(args.out.clone(), &cfg)?;
    let model = load_model(&model_path)?;
    let mut ds = load_source(&args.source, &cfg)?;
    if let Some(norm) = &model.norm {
        norm.apply(&mut ds.features, true)?;
    }
    prepare_out(&out, args.force)?;
    let (xs, indices) = cae::select_features(&model, &ds.features)?;
    let header: Vec<String> = indices
        .iter()
        .map(|&j| model.feature_names[j].clone())
        .collect();
    save_matrix_csv(&xs, Some(&header), &out.join("selected.csv"))?;
    println!(
        "selected features {} -> {}",
        indices
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(","),
        out.join("selected.csv").display()
    );
    Ok(())
}

pub fn impute(args: &ModelDataArgs) -> Result<()> {
    let cfg = Config::load(args.config.as_deref())?;
    let model_path = require_model(args.model.clone(), &cfg)?;
    let out = require_out(args.out.clone(), &cfg)?;
    let model = load_model(&model_path)?;
    let ds = load_source(&args.source, &cfg)?;
    prepare_out(&out, args.force)?;
    let xhat = cae::impute(&model, &ds.features)?;
    save_matrix_csv(&xhat, Some(&model.feature_names), &out.join("imputed.csv"))?;
    println!(
        "imputed {} rows x {} features -> {}",
        xhat.rows(),
        xhat.cols(),
        out.join("imputed.csv").display()
    );
    Ok(())
}

fn resolve_methods(flag: &Option<String>, cfg: &Config) -> Result<Vec<Method>> {
    let text = cfg
        .resolve(flag.clone(), "methods")?
        .unwrap_or_else(|| "cae,pca,variance-filter,random-selection".into());
    let mut methods = Vec::new();
    for part in text.split(',') {
        if part.trim().is_empty() {
            continue;
        }
        methods.push(Method::parse(part)?);
    }
    if methods.is_empty() {
        return Err(CaeError::Parameter("no methods requested".into()));
    }
    Ok(methods)
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let cfg = Config::load(args.config.as_deref())?;
    let out = require_out(args.out.clone(), &cfg)?;
    let methods = resolve_methods(&args.methods, &cfg)?;
    let ds = load_source(&args.source, &cfg)?;
    let spec = resolve_split(&args.split, &cfg)?;
    let (mut train, mut val, mut test) = split(&ds, &spec)?;
    if let Some(kind) = normalize_kind(&args.split, &cfg)? {
        normalize_fit_apply(&mut train, &mut [&mut val, &mut test], kind)?;
    }
    let tc = resolve_hyper(&args.hyper, &cfg)?
        .train_config(DecoderSpec::linear(train.d()), Mode::Unsupervised)?;
    prepare_out(&out, args.force)?;
    let rows = compare(&methods, &train, &val, &test, &tc)?;
    let csv = results_to_csv(&rows);
    atomic_write(&out.join("eval.csv"), csv.as_bytes())?;
    print!("{}", csv);
    Ok(())
}

pub fn ablate(args: &TrainArgs) -> Result<()> {
    let cfg = Config::load(args.config.as_deref())?;
    let out = require_out(args.out.clone(), &cfg)?;
    let (setup, tc) = Setup::build(args, &cfg)?;
    let labels = setup.labels(tc.mode)?;
    prepare_out(&out, args.force)?;
    let runs = cae::schedule_ablation(&setup.train.features, &setup.val.features, &tc, labels)?;
    for run in &runs {
        atomic_write(
            &out.join(format!("report_{}.csv", run.name)),
            run.report.to_csv().as_bytes(),
        )?;
        let last = run.report.last().expect("training runs at least one epoch");
        println!(
            "{}: {} after {} epochs, mean max prob {}, validation loss {}",
            run.name,
            run.report.stop,
            run.report.epochs.len(),
            sig6(last.mean_max_prob),
            sig6(last.val_loss)
        );
    }
    println!("wrote 4 schedule reports to {}", out.display());
    Ok(())
}

pub fn groups(args: &GroupsArgs) -> Result<()> {
    let cfg = Config::load(args.config.as_deref())?;
    let model_path = require_model(args.model.clone(), &cfg)?;
    let out = require_out(args.out.clone(), &cfg)?;
    let top = cfg.resolve(args.top, "top")?.unwrap_or(3);
    let model = load_model(&model_path)?;
    let ranked = feature_groups(&model.selector, top)?;
    let mut csv = String::from("node,rank,feature_index,alpha\n");
    for (node, features) in ranked.iter().enumerate() {
        for (rank, &j) in features.iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                node,
                rank + 1,
                j,
                model.selector.alpha.get(node, j)
            ));
        }
    }
    prepare_out(&out, args.force)?;
    atomic_write(&out.join("groups.csv"), csv.as_bytes())?;
    println!(
        "wrote the top {} features of each of {} nodes to {}",
        top,
        model.k,
        out.join("groups.csv").display()
    );
    Ok(())
}
