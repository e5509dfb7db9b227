//! The concrete autoencoder: selector + decoder trained jointly under
//! temperature annealing, plus feature selection and imputation with the
//! trained model.

use std::fmt;

use crate::dataio::NormRecord;
use crate::error::{CaeError, Result};
use crate::nn::{
    cross_entropy_loss, decoder_backward, decoder_forward, decoder_forward_cached, init_layers,
    mse_loss, AdamState, DecoderSpec, DenseLayer,
};
use crate::numcore::{permutation, sig6, Matrix, Rng};
use crate::selector::{
    concrete_sample, init_alpha, mean_max_of, selector_backward, selector_forward_test,
    selector_forward_train, AnnealSchedule, SelectorParams,
};

/// Reconstruction (MSE against the inputs) or classification (cross-entropy
/// against labels, with the decoder acting as a classifier head).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Unsupervised,
    Supervised,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Unsupervised => "unsupervised",
            Mode::Supervised => "supervised",
        })
    }
}

/// Everything `train` needs besides the data.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub k: usize,
    pub schedule: AnnealSchedule,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub stop_threshold: f64,
    pub decoder: DecoderSpec,
    pub mode: Mode,
    pub seed: u64,
    /// Report option: compute the validation column by refitting a linear
    /// least-squares decoder on the currently selected features each epoch
    /// instead of using the model's own decoder. Unsupervised mode only.
    pub refit_val: bool,
}

impl TrainConfig {
    /// Defaults everywhere but k and the decoder: T 10 -> 0.01 over 300
    /// epochs, up to 3x that many epochs at the floor temperature, Adam at
    /// 1e-3, batches of 256, stop at mean-max-probability 0.99.
    pub fn new(k: usize, decoder: DecoderSpec) -> TrainConfig {
        TrainConfig {
            k,
            schedule: AnnealSchedule::new(10.0, 0.01, 300).unwrap(),
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 900,
            stop_threshold: 0.99,
            decoder,
            mode: Mode::Unsupervised,
            seed: 0,
            refit_val: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(CaeError::Parameter("k must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CaeError::Parameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(CaeError::Parameter("batch size must be at least 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(CaeError::Parameter("max_epochs must be at least 1".into()));
        }
        if !(self.stop_threshold > 0.0 && self.stop_threshold <= 1.0) {
            return Err(CaeError::Parameter(format!(
                "stop threshold must lie in (0,1], got {}",
                self.stop_threshold
            )));
        }
        self.decoder.validate()
    }
}

/// A trained concrete autoencoder.
#[derive(Clone, Debug)]
pub struct CaeModel {
    pub selector: SelectorParams,
    pub decoder: Vec<DenseLayer>,
    pub decoder_spec: DecoderSpec,
    pub mode: Mode,
    pub d: usize,
    pub k: usize,
    pub feature_names: Vec<String>,
    pub norm: Option<NormRecord>,
}

impl CaeModel {
    pub fn validate(&self) -> Result<()> {
        self.selector.validate()?;
        if self.selector.k() != self.k || self.selector.d() != self.d {
            return Err(CaeError::Shape(format!(
                "selector is {}x{} but model says k={} d={}",
                self.selector.k(),
                self.selector.d(),
                self.k,
                self.d
            )));
        }
        let first = self
            .decoder
            .first()
            .ok_or_else(|| CaeError::Format("model has no decoder layers".into()))?;
        if first.in_dim() != self.k {
            return Err(CaeError::Shape(format!(
                "decoder expects {} inputs, selector provides {}",
                first.in_dim(),
                self.k
            )));
        }
        for w in self.decoder.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(CaeError::Shape(format!(
                    "decoder layers disagree: {} outputs feed {} inputs",
                    w[0].out_dim(),
                    w[1].in_dim()
                )));
            }
        }
        let out = self.decoder.last().unwrap().out_dim();
        if self.mode == Mode::Unsupervised && out != self.d {
            return Err(CaeError::Shape(format!(
                "unsupervised decoder must output {} features, outputs {}",
                self.d, out
            )));
        }
        if self.feature_names.len() != self.d {
            return Err(CaeError::Format(format!(
                "{} feature names for {} features",
                self.feature_names.len(),
                self.d
            )));
        }
        Ok(())
    }
}

/// Why training stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxEpochs,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Converged => "converged",
            StopReason::MaxEpochs => "max-epochs",
        })
    }
}

/// One row of the training curve.
#[derive(Clone, Copy, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub temperature: f64,
    pub mean_max_prob: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// The full training curve plus the stop reason.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stop: StopReason,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,temperature,mean_max_prob,train_loss,val_loss\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                sig6(r.temperature),
                sig6(r.mean_max_prob),
                sig6(r.train_loss),
                sig6(r.val_loss)
            ));
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Labels for supervised training: (train split, validation split).
pub type LabelPair<'a> = (&'a [usize], &'a [usize]);

/// Train a concrete autoencoder (the geometric annealing schedule from the
/// config). Returns the model and the per-epoch report.
pub fn train(
    x_train: &Matrix,
    x_val: &Matrix,
    config: &TrainConfig,
    labels: Option<LabelPair>,
) -> Result<(CaeModel, TrainReport)> {
    let schedule = config.schedule;
    train_with_temperature(x_train, x_val, config, labels, &move |e| {
        schedule.temperature(e)
    })
}

fn check_labels(
    x_train: &Matrix,
    x_val: &Matrix,
    config: &TrainConfig,
    labels: &Option<LabelPair>,
) -> Result<()> {
    match (config.mode, labels) {
        (Mode::Unsupervised, Some(_)) => Err(CaeError::Mode(
            "labels were supplied but the config is unsupervised".into(),
        )),
        (Mode::Supervised, None) => Err(CaeError::Mode(
            "supervised training needs train and validation labels".into(),
        )),
        (Mode::Supervised, Some((lt, lv))) => {
            if lt.len() != x_train.rows() || lv.len() != x_val.rows() {
                return Err(CaeError::Shape(format!(
                    "labels cover {}/{} rows, data has {}/{}",
                    lt.len(),
                    lv.len(),
                    x_train.rows(),
                    x_val.rows()
                )));
            }
            let classes = config.decoder.output_dim;
            for &l in lt.iter().chain(lv.iter()) {
                if l >= classes {
                    return Err(CaeError::Data(format!(
                        "label {} out of range for {} classes",
                        l, classes
                    )));
                }
            }
            Ok(())
        }
        (Mode::Unsupervised, None) => {
            if config.decoder.output_dim != x_train.cols() {
                return Err(CaeError::Parameter(format!(
                    "unsupervised decoder must output {} features, decoder spec says {}",
                    x_train.cols(),
                    config.decoder.output_dim
                )));
            }
            Ok(())
        }
    }
}

/// Validation loss in test mode (argmax selection, no noise).
fn validation_loss(
    selector: &SelectorParams,
    layers: &[DenseLayer],
    x_train: &Matrix,
    x_val: &Matrix,
    val_labels: Option<&[usize]>,
    refit_val: bool,
) -> Result<f64> {
    let (xs_val, idx) = selector_forward_test(x_val, selector)?;
    match val_labels {
        Some(lv) => {
            let logits = decoder_forward(layers, &xs_val)?;
            Ok(cross_entropy_loss(&logits, lv)?.0)
        }
        None => {
            if refit_val {
                let xs_train = x_train.select_cols(&idx)?;
                let fit = crate::eval::least_squares_fit(&xs_train, x_train)?;
                let pred = decoder_forward(std::slice::from_ref(&fit), &xs_val)?;
                Ok(mse_loss(&pred, x_val)?.0)
            } else {
                let pred = decoder_forward(layers, &xs_val)?;
                Ok(mse_loss(&pred, x_val)?.0)
            }
        }
    }
}

/// The training loop with an arbitrary temperature curve; `train` and
/// `schedule_ablation` both route here.
fn train_with_temperature(
    x_train: &Matrix,
    x_val: &Matrix,
    config: &TrainConfig,
    labels: Option<LabelPair>,
    temperature_of: &dyn Fn(usize) -> f64,
) -> Result<(CaeModel, TrainReport)> {
    config.validate()?;
    let (n, d) = (x_train.rows(), x_train.cols());
    if n == 0 {
        return Err(CaeError::Data("training split is empty".into()));
    }
    if x_val.rows() == 0 {
        return Err(CaeError::Data("validation split is empty".into()));
    }
    if config.k > d {
        return Err(CaeError::Parameter(format!(
            "cannot select k={} of d={} features",
            config.k, d
        )));
    }
    if x_val.cols() != d {
        return Err(CaeError::Shape(format!(
            "train has {} features, validation has {}",
            d,
            x_val.cols()
        )));
    }
    check_labels(x_train, x_val, config, &labels)?;

    // Independent child streams so that e.g. a different batch size cannot
    // perturb the parameter initialization.
    let root = Rng::new(config.seed);
    let mut rng_alpha = root.derive(1);
    let mut rng_decoder = root.derive(2);
    let mut rng_shuffle = root.derive(3);
    let mut rng_gumbel = root.derive(4);

    let mut selector = init_alpha(config.k, d, &mut rng_alpha)?;
    let mut layers = init_layers(&config.decoder, config.k, &mut rng_decoder)?;

    let mut block_sizes = vec![config.k * d];
    for l in &layers {
        block_sizes.push(l.weights.rows() * l.weights.cols());
        block_sizes.push(l.bias.len());
    }
    let mut adam = AdamState::new(&block_sizes, config.learning_rate);

    let mut records: Vec<EpochRecord> = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    for epoch in 0..config.max_epochs {
        let t = temperature_of(epoch);
        let order = permutation(&mut rng_shuffle, n);
        let mut loss_sum = 0.0;
        let mut mmp_sum = 0.0;
        let mut batches = 0usize;

        for chunk in order.chunks(config.batch_size) {
            let xb = x_train.gather_rows(chunk)?;
            let sample = concrete_sample(&selector, t, &mut rng_gumbel)?;
            let u = selector_forward_train(&xb, &sample)?;
            let (out, cache) = decoder_forward_cached(&layers, &u)?;
            let (loss, dloss) = match labels {
                None => mse_loss(&out, &xb)?,
                Some((lt, _)) => {
                    let batch_labels: Vec<usize> = chunk.iter().map(|&i| lt[i]).collect();
                    cross_entropy_loss(&out, &batch_labels)?
                }
            };
            if !loss.is_finite() {
                return Err(CaeError::Divergence { epoch });
            }
            loss_sum += loss * chunk.len() as f64;
            mmp_sum += mean_max_of(&sample.m);
            batches += 1;

            let (layer_grads, d_u) = decoder_backward(&layers, &cache, &dloss)?;
            let sel = selector_backward(&selector, &xb, &sample, &d_u)?;

            let mut params: Vec<&mut [f64]> = vec![selector.alpha.data_mut()];
            let mut grads: Vec<&[f64]> = vec![sel.d_alpha.data()];
            for (l, g) in layers.iter_mut().zip(layer_grads.iter()) {
                params.push(l.weights.data_mut());
                params.push(&mut l.bias);
                grads.push(g.dw.data());
                grads.push(&g.db);
            }
            adam.step(&mut params, &grads)?;

            // Adam can push a weight through zero; the selector needs strict
            // positivity for log alpha.
            for a in selector.alpha.data_mut() {
                if *a < 1e-12 {
                    *a = 1e-12;
                }
            }
        }

        let train_loss = loss_sum / n as f64;
        let mean_max_prob = mmp_sum / batches as f64;
        let val_loss = validation_loss(
            &selector,
            &layers,
            x_train,
            x_val,
            labels.map(|(_, lv)| lv),
            config.refit_val,
        )?;
        if !val_loss.is_finite() {
            return Err(CaeError::Divergence { epoch });
        }
        records.push(EpochRecord {
            epoch,
            temperature: t,
            mean_max_prob,
            train_loss,
            val_loss,
        });
        if mean_max_prob > config.stop_threshold {
            stop = StopReason::Converged;
            break;
        }
    }

    let model = CaeModel {
        selector,
        decoder: layers,
        decoder_spec: config.decoder.clone(),
        mode: config.mode,
        d,
        k: config.k,
        feature_names: (0..d).map(|j| format!("f{}", j)).collect(),
        norm: None,
    };
    Ok((
        model,
        TrainReport {
            epochs: records,
            stop,
        },
    ))
}

/// Test-mode selection: the k chosen columns of x plus their indices.
pub fn select_features(model: &CaeModel, x: &Matrix) -> Result<(Matrix, Vec<usize>)> {
    if x.cols() != model.d {
        return Err(CaeError::Shape(format!(
            "input has {} features, model expects {}",
            x.cols(),
            model.d
        )));
    }
    selector_forward_test(x, &model.selector)
}

/// Reconstruct all d features from the k selected ones.
pub fn impute(model: &CaeModel, x_s: &Matrix) -> Result<Matrix> {
    if model.mode != Mode::Unsupervised {
        return Err(CaeError::Mode(
            "imputation needs an unsupervised model; this one is supervised".into(),
        ));
    }
    if x_s.cols() != model.k {
        return Err(CaeError::Shape(format!(
            "imputation input has {} columns, model selects {}",
            x_s.cols(),
            model.k
        )));
    }
    decoder_forward(&model.decoder, x_s)
}

/// One ablation arm: a schedule name and its training report.
#[derive(Clone, Debug)]
pub struct ScheduleRun {
    pub name: &'static str,
    pub report: TrainReport,
}

/// Train four times from the same seed under different temperature curves:
/// constant T0, constant TB, the configured geometric decay, and an abrupt
/// T0 -> TB drop at B/2.
pub fn schedule_ablation(
    x_train: &Matrix,
    x_val: &Matrix,
    config: &TrainConfig,
    labels: Option<LabelPair>,
) -> Result<Vec<ScheduleRun>> {
    let s = config.schedule;
    let half = s.total_epochs / 2;
    let curves: Vec<(&'static str, Box<dyn Fn(usize) -> f64>)> = vec![
        ("const_high", Box::new(move |_| s.t0)),
        ("const_low", Box::new(move |_| s.tb)),
        ("exp", Box::new(move |e| s.temperature(e))),
        (
            "abrupt",
            Box::new(move |e| if e < half { s.t0 } else { s.tb }),
        ),
    ];
    let mut runs = Vec::with_capacity(curves.len());
    for (name, curve) in curves {
        let (_, report) = train_with_temperature(x_train, x_val, config, labels, curve.as_ref())?;
        runs.push(ScheduleRun { name, report });
    }
    Ok(runs)
}
