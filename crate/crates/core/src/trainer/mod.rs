//! Two-stage training: a contrastive encoder/projection stage, then a classifier on the frozen
//! encoder's representation.

pub mod mlp;
pub mod optim;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::domain::{LossConfig, LossKind, RngSeed, ViewBatch, ZERO_NORM_FLOOR};
use crate::error::{Error, Result};
use crate::losses::{evaluate, loss_mixed_partial, max_relative_error, LossResult};
use crate::metrics::{
    confusion_tensor_bounded, fairness_report, sensitive_info_probe, similarity_dispersion,
    FairnessReport, SimilarityDispersion,
};
use crate::numeric::{compensated_sum, dot, log_sum_exp, norm};
use crate::par;
use crate::synth::{
    generate_features, generate_imbalanced_dataset, make_two_views, Dataset, FeatureSpec,
    ImbalanceSpec,
};
use crate::theorem::decompose_supcon;

pub use mlp::{Activation, Dense, Mlp};
pub use optim::Sgd;

pub const CHECKPOINT_VERSION: u32 = 1;

const TAG_INIT: u64 = 1;
const TAG_CLF_INIT: u64 = 2;
const TAG_CLF_EPOCH: u64 = 3;
const TAG_REPR_EPOCH: u64 = 4;
const TAG_PROBE: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    Sum,
    /// Divide by the batch's total anchor weight.
    #[default]
    MeanOverAnchors,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub hidden: usize,
    pub repr_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub clf_hidden: usize,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: 32,
            repr_dim: 32,
            proj_hidden: 32,
            proj_dim: 16,
            clf_hidden: 32,
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub epochs_repr: usize,
    pub epochs_clf: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clf_learning_rate: f64,
    /// L2 penalty added to the gradient of both stages.
    pub weight_decay: f64,
    /// Gradient norm cap for the representation stage.
    pub max_grad_norm: Option<f64>,
    pub seed: RngSeed,
    pub loss_reduction: LossReduction,
    pub architecture: Architecture,
    /// Expected norm of the Gaussian jitter that cuts two views from one sample.
    pub jitter_sigma: f64,
    /// FSCL+ terms for anchors with a sensitive label, SupCon terms for the rest.
    pub partial_sensitive: bool,
    pub probe_every_epoch: bool,
    /// Log the `V = Ĉ(−V_p + V_a)` decomposition of every batch.
    pub track_v: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig {
                temperature: 0.1,
                kind: LossKind::FsclPlus,
                empty_negative_policy: Default::default(),
            },
            epochs_repr: 30,
            epochs_clf: 10,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            clf_learning_rate: 0.05,
            weight_decay: 1e-4,
            max_grad_norm: Some(1.0),
            seed: RngSeed(0),
            loss_reduction: LossReduction::MeanOverAnchors,
            architecture: Architecture::default(),
            jitter_sigma: 0.1,
            partial_sensitive: false,
            probe_every_epoch: false,
            track_v: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.epochs_repr == 0 || self.epochs_clf == 0 {
            return Err(Error::InvalidSpec("epoch counts must be positive".into()));
        }
        if self.batch_size < 4 {
            return Err(Error::InvalidSpec(format!(
                "batch_size must be at least 4, got {}",
                self.batch_size
            )));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("clf_learning_rate", self.clf_learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidSpec(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidSpec(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidSpec(format!("max_grad_norm must be positive, got {c}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidSpec(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Encoder `F` (input → representation `h`) and projection head `G` (`h` → `z`, L2-normalized).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub encoder: Mlp,
    pub projection: Mlp,
}

impl EncoderParams {
    pub fn init(input_dim: usize, arch: &Architecture, seed: RngSeed) -> Self {
        let mut rng = seed.derive(TAG_INIT).stream(0);
        let act = arch.activation;
        let encoder = Mlp::init(&[input_dim, arch.hidden, arch.repr_dim], &[act, act], &mut rng);
        let projection = Mlp::init(
            &[arch.repr_dim, arch.proj_hidden, arch.proj_dim],
            &[act, Activation::Identity],
            &mut rng,
        );
        Self {
            encoder,
            projection,
        }
    }

    /// Identity layers with linear activations throughout.
    pub fn identity(dim: usize) -> Self {
        let stack = || Mlp {
            layers: vec![Dense::identity(dim), Dense::identity(dim)],
        };
        Self {
            encoder: stack(),
            projection: stack(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn repr_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + self.projection.n_params()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.encoder.flatten();
        v.extend(self.projection.flatten());
        v
    }

    pub fn assign(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let (e, p) = flat.split_at(self.encoder.n_params());
        self.encoder.assign(e)?;
        self.projection.assign(p)
    }

    pub fn represent(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        for x in features {
            self.encoder.check_input(x)?;
        }
        Ok(par::map_slice(features, |x| self.encoder.output(x)))
    }
}

/// Representations `h` (unnormalized) and projections `z` (unit norm) for every input.
pub fn forward_encode(
    params: &EncoderParams,
    features: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let h = params.represent(features)?;
    let z = par::map_slice(&h, |h| params.projection.output(h));
    let z = z
        .into_iter()
        .enumerate()
        .map(|(index, u)| unit_or_error(u, index))
        .collect::<Result<Vec<_>>>()?;
    Ok((h, z))
}

fn unit_or_error(u: Vec<f64>, index: usize) -> Result<Vec<f64>> {
    let n = norm(&u);
    if !(n >= ZERO_NORM_FLOOR) {
        return Err(Error::ZeroVector { index, norm: n });
    }
    Ok(u.into_iter().map(|x| x / n).collect())
}

/// Loss of one batch of input views and its gradient with respect to every network parameter.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    /// Loss after the configured reduction.
    pub value: f64,
    pub loss: LossResult,
    pub gradient: Vec<f64>,
    pub projections: ViewBatch,
}

fn loss_for(z: &ViewBatch, loss: &LossConfig, partial: bool) -> Result<LossResult> {
    if partial {
        loss_mixed_partial(z, loss)
    } else {
        evaluate(z, loss)
    }
}

fn reduction_scale(result: &LossResult, reduction: LossReduction) -> f64 {
    match reduction {
        LossReduction::Sum => 1.0,
        LossReduction::MeanOverAnchors if result.anchor_weight > 0.0 => 1.0 / result.anchor_weight,
        LossReduction::MeanOverAnchors => 1.0,
    }
}

/// `inputs` carries raw view features in place of embeddings; labels and origins are used as-is.
pub fn representation_loss_and_grad(
    params: &EncoderParams,
    inputs: &ViewBatch,
    loss: &LossConfig,
    reduction: LossReduction,
    partial: bool,
) -> Result<BatchGradient> {
    for x in inputs.embeddings() {
        params.encoder.check_input(x)?;
    }
    let traces = par::map_slice(inputs.embeddings(), |x| {
        let enc = params.encoder.forward(x);
        let proj = params.projection.forward(enc.output());
        (enc, proj)
    });
    let z = traces
        .iter()
        .enumerate()
        .map(|(i, (_, p))| unit_or_error(p.output().to_vec(), i))
        .collect::<Result<Vec<_>>>()?;
    let projections = inputs.with_embeddings(z)?;
    let result = loss_for(&projections, loss, partial)?;
    let scale = reduction_scale(&result, reduction);
    let n_enc = params.encoder.n_params();
    let per_view = par::map_range(inputs.len(), |l| {
        let (enc, proj) = &traces[l];
        let zl = &projections.embeddings()[l];
        let u_norm = norm(proj.output());
        let dz: Vec<f64> = result.gradient[l].iter().map(|g| g * scale).collect();
        let radial = dot(zl, &dz);
        let du: Vec<f64> = dz
            .iter()
            .zip(zl)
            .map(|(g, z)| (g - z * radial) / u_norm)
            .collect();
        let mut grad = vec![0.0; params.n_params()];
        let (ge, gp) = grad.split_at_mut(n_enc);
        let dh = params.projection.backward(proj, &du, gp);
        params.encoder.backward(enc, &dh, ge);
        grad
    });
    let gradient = (0..params.n_params())
        .map(|k| compensated_sum(per_view.iter().map(|g| g[k])))
        .collect();
    Ok(BatchGradient {
        value: result.value * scale,
        loss: result,
        gradient,
        projections,
    })
}

/// Max relative error of the parameter gradient against central differences of the reduced loss.
pub fn pipeline_gradient_check(
    params: &EncoderParams,
    inputs: &ViewBatch,
    loss: &LossConfig,
    reduction: LossReduction,
    step: f64,
) -> Result<f64> {
    let analytic = representation_loss_and_grad(params, inputs, loss, reduction, false)?;
    let theta = params.flatten();
    let numeric = par::try_map_range(theta.len(), |k| {
        let eval = |delta: f64| -> Result<f64> {
            let mut p = params.clone();
            let mut t = theta.clone();
            t[k] += delta;
            p.assign(&t)?;
            let (_, z) = forward_encode(&p, inputs.embeddings())?;
            let r = loss_for(&inputs.with_embeddings(z)?, loss, false)?;
            Ok(r.value * reduction_scale(&r, reduction))
        };
        Ok::<_, Error>((eval(step)? - eval(-step)?) / (2.0 * step))
    })?;
    Ok(max_relative_error(&[analytic.gradient], &[numeric]))
}

/// Running sums of the SupCon decomposition over an epoch's batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VTrack {
    pub v_p: f64,
    pub v_a: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over batches of the reduced loss.
    pub loss: f64,
    /// Sum over batches of the unreduced loss.
    pub loss_sum: f64,
    pub skipped_anchors: usize,
    /// Present when tracking is on and every batch had equal positive-set sizes.
    pub v: Option<VTrack>,
    pub probe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub representation: Vec<EpochLog>,
    /// Mean cross-entropy per classifier epoch.
    pub classifier: Vec<f64>,
    pub final_report: Option<FairnessReport>,
    /// Sensitive-information probe on held-out projections after training.
    pub final_probe: Option<f64>,
    /// Dispersion of held-out projections after training.
    pub final_dispersion: Option<SimilarityDispersion>,
    /// Dispersion of held-out representations `h` after training.
    pub final_dispersion_repr: Option<SimilarityDispersion>,
}

/// Resumable state of the representation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub params: EncoderParams,
    pub velocity: Vec<f64>,
    pub log: Vec<EpochLog>,
}

pub struct RepresentationTrainer {
    config: TrainConfig,
    params: EncoderParams,
    optimizer: Sgd,
    log: Vec<EpochLog>,
}

impl RepresentationTrainer {
    pub fn new(config: TrainConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        let params = EncoderParams::init(input_dim, &config.architecture, config.seed);
        let optimizer = Sgd::new(config.learning_rate, config.momentum, params.n_params())
            .with_regularization(config.weight_decay, config.max_grad_norm);
        Ok(Self {
            config,
            params,
            optimizer,
            log: Vec::new(),
        })
    }

    pub fn from_checkpoint(cp: Checkpoint) -> Result<Self> {
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidSpec(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                cp.version
            )));
        }
        cp.config.validate()?;
        if cp.velocity.len() != cp.params.n_params() || cp.log.len() != cp.epoch {
            return Err(Error::ShapeMismatch("checkpoint state is inconsistent".into()));
        }
        let mut optimizer = Sgd::new(cp.config.learning_rate, cp.config.momentum, 0)
            .with_regularization(cp.config.weight_decay, cp.config.max_grad_norm);
        optimizer.velocity = cp.velocity;
        Ok(Self {
            config: cp.config,
            params: cp.params,
            optimizer,
            log: cp.log,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config,
            epoch: self.log.len(),
            params: self.params.clone(),
            velocity: self.optimizer.velocity.clone(),
            log: self.log.clone(),
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.log.len()
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    pub fn into_parts(self) -> (EncoderParams, Vec<EpochLog>) {
        (self.params, self.log)
    }

    /// One pass over `data` in shuffled mini-batches. The shuffle and jitter come from a stream
    /// keyed by the epoch index, so a resumed run replays exactly.
    pub fn run_epoch(&mut self, data: &Dataset, heldout: Option<&Dataset>) -> Result<&EpochLog> {
        let epoch = self.log.len();
        let cfg = self.config;
        let mut rng = cfg.seed.derive(TAG_REPR_EPOCH).stream(epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        let mut raw = Vec::new();
        let mut skipped = 0;
        let mut v_parts: Option<Vec<VTrack>> = cfg.track_v.then(Vec::new);
        let mut theta = self.params.flatten();
        for rows in order.chunks(cfg.batch_size) {
            if rows.len() < 2 {
                continue;
            }
            let view_seed = RngSeed(rng.next_u64());
            let inputs = make_two_views(&data.subset(rows), cfg.jitter_sigma, view_seed)?;
            let step = representation_loss_and_grad(
                &self.params,
                &inputs,
                &cfg.loss,
                cfg.loss_reduction,
                cfg.partial_sensitive,
            )?;
            if !step.value.is_finite() || step.gradient.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch });
            }
            if let Some(parts) = v_parts.as_mut() {
                match decompose_supcon(&step.projections, cfg.loss.temperature) {
                    Ok(d) => parts.push(VTrack {
                        v_p: d.v_p,
                        v_a: d.v_a,
                        v: d.v,
                    }),
                    Err(_) => v_parts = None,
                }
            }
            losses.push(step.value);
            raw.push(step.loss.value);
            skipped += step.loss.skipped_anchors;
            self.optimizer.step(&mut theta, &step.gradient);
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch });
            }
            self.params.assign(&theta)?;
        }
        if !self.params.encoder.is_finite() || !self.params.projection.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let probe = match heldout {
            Some(h) if cfg.probe_every_epoch => probe_projections(&self.params, h, cfg.seed)?,
            _ => None,
        };
        let v = v_parts.map(|parts| VTrack {
            v_p: compensated_sum(parts.iter().map(|p| p.v_p)),
            v_a: compensated_sum(parts.iter().map(|p| p.v_a)),
            v: compensated_sum(parts.iter().map(|p| p.v)),
        });
        self.log.push(EpochLog {
            epoch,
            loss: compensated_sum(losses.iter().copied()) / losses.len().max(1) as f64,
            loss_sum: compensated_sum(raw),
            skipped_anchors: skipped,
            v,
            probe,
        });
        Ok(self.log.last().expect("just pushed"))
    }
}

/// Probe on held-out projections, or `None` when sensitive labels are missing or constant.
pub fn probe_projections(
    params: &EncoderParams,
    heldout: &Dataset,
    seed: RngSeed,
) -> Result<Option<f64>> {
    let Some(s) = heldout.sensitive.iter().copied().collect::<Option<Vec<usize>>>() else {
        return Ok(None);
    };
    let (_, z) = forward_encode(params, &heldout.features)?;
    match sensitive_info_probe(&z, &s, seed.derive(TAG_PROBE)) {
        Ok(p) => Ok(Some(p)),
        Err(Error::SingleGroup) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn train_representation(
    data: &Dataset,
    heldout: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(EncoderParams, Vec<EpochLog>)> {
    let mut trainer = RepresentationTrainer::new(*config, data.dim())?;
    for _ in 0..config.epochs_repr {
        trainer.run_epoch(data, heldout)?;
    }
    Ok(trainer.into_parts())
}

/// Mean softmax cross-entropy of `clf` on `(h, y)` and its flat parameter gradient.
pub fn classifier_loss_and_grad(clf: &Mlp, h: &[Vec<f64>], y: &[usize]) -> (f64, Vec<f64>) {
    let n = h.len().max(1) as f64;
    let per_sample = par::map_range(h.len(), |i| {
        let trace = clf.forward(&h[i]);
        let logits = trace.output();
        let lse = log_sum_exp(logits.iter().copied());
        let loss = lse - logits[y[i]];
        let dlogits: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(c, &l)| ((l - lse).exp() - f64::from(u8::from(c == y[i]))) / n)
            .collect();
        let mut grad = vec![0.0; clf.n_params()];
        clf.backward(&trace, &dlogits, &mut grad);
        (loss, grad)
    });
    let loss = compensated_sum(per_sample.iter().map(|p| p.0)) / n;
    let grad = (0..clf.n_params())
        .map(|k| compensated_sum(per_sample.iter().map(|p| p.1[k])))
        .collect();
    (loss, grad)
}

pub fn predict(clf: &Mlp, h: &[Vec<f64>]) -> Vec<usize> {
    par::map_slice(h, |x| {
        let logits = clf.output(x);
        let mut best = 0;
        for (c, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = c;
            }
        }
        best
    })
}

/// Trains a one-hidden-layer classifier on the frozen encoder's representation. Returns the
/// classifier and its mean cross-entropy per epoch.
pub fn train_classifier(
    encoder: &EncoderParams,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(Mlp, Vec<f64>)> {
    config.validate()?;
    let h = encoder.represent(&data.features)?;
    let n_classes = data.targets.iter().max().map_or(0, |&m| m + 1).max(2);
    let arch = &config.architecture;
    let mut clf = Mlp::init(
        &[encoder.repr_dim(), arch.clf_hidden, n_classes],
        &[arch.activation, Activation::Identity],
        &mut config.seed.derive(TAG_CLF_INIT).stream(0),
    );
    let mut opt = Sgd::new(config.clf_learning_rate, config.momentum, clf.n_params())
        .with_regularization(config.weight_decay, None);
    let mut theta = clf.flatten();
    let mut epochs = Vec::with_capacity(config.epochs_clf);
    for epoch in 0..config.epochs_clf {
        let mut rng = config.seed.derive(TAG_CLF_EPOCH).stream(epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for rows in order.chunks(config.batch_size) {
            let hb: Vec<Vec<f64>> = rows.iter().map(|&i| h[i].clone()).collect();
            let yb: Vec<usize> = rows.iter().map(|&i| data.targets[i]).collect();
            let (loss, grad) = classifier_loss_and_grad(&clf, &hb, &yb);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            losses.push(loss);
            opt.step(&mut theta, &grad);
            clf.assign(&theta)?;
        }
        epochs.push(compensated_sum(losses.iter().copied()) / losses.len().max(1) as f64);
    }
    Ok((clf, epochs))
}

/// Fairness scores of the classifier on a split with known sensitive labels.
pub fn evaluate_classifier(
    encoder: &EncoderParams,
    clf: &Mlp,
    data: &Dataset,
) -> Result<FairnessReport> {
    let s: Vec<usize> = data
        .sensitive
        .iter()
        .enumerate()
        .map(|(anchor, s)| s.ok_or(Error::UnknownSensitiveLabel { anchor }))
        .collect::<Result<_>>()?;
    let h = encoder.represent(&data.features)?;
    let pred = predict(clf, &h);
    let t = confusion_tensor_bounded(&data.targets, &pred, &s, clf.output_dim(), usize::MAX)?;
    fairness_report(&t)
}

/// Synthetic α-imbalanced data for [`run_pipeline`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub alpha: f64,
    pub train_total: usize,
    pub test_total: usize,
    pub features: FeatureSpec,
    pub data_seed: RngSeed,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        Self {
            alpha: 4.0,
            train_total: 2000,
            test_total: 400,
            features: FeatureSpec {
                dim: 16,
                class_signal: 1.0,
                sensitive_signal: 2.0,
                noise_sigma: 4.0,
            },
            data_seed: RngSeed(0),
        }
    }
}

/// Train and balanced test splits.
pub fn pipeline_data(spec: &PipelineSpec) -> Result<(Dataset, Dataset)> {
    let split = generate_imbalanced_dataset(
        &ImbalanceSpec { alpha: spec.alpha },
        spec.train_total,
        spec.test_total,
        spec.data_seed,
    )?;
    let world = spec.data_seed.derive(7);
    let train = generate_features(&split.train, &spec.features, world, 0)?;
    let test = generate_features(&split.test, &spec.features, world, 1)?;
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub log: TrainLog,
    pub encoder: EncoderParams,
    pub classifier: Mlp,
}

/// Data generation, representation stage, classifier stage and held-out evaluation.
pub fn run_pipeline(
    spec: &PipelineSpec,
    kind: LossKind,
    config: &TrainConfig,
) -> Result<PipelineOutcome> {
    let (train, test) = pipeline_data(spec)?;
    let config = TrainConfig {
        loss: LossConfig { kind, ..config.loss },
        ..*config
    };
    let (encoder, representation) = train_representation(&train, Some(&test), &config)?;
    finish_pipeline(encoder, representation, &train, &test, &config)
}

/// Classifier stage and held-out diagnostics for an already trained encoder.
pub fn finish_pipeline(
    encoder: EncoderParams,
    representation: Vec<EpochLog>,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
) -> Result<PipelineOutcome> {
    let (classifier, clf_log) = train_classifier(&encoder, train, config)?;
    let report = evaluate_classifier(&encoder, &classifier, test)?;
    let final_probe = probe_projections(&encoder, test, config.seed)?;
    let (final_dispersion, final_dispersion_repr) =
        match test.sensitive.iter().copied().collect::<Option<Vec<usize>>>() {
            Some(s) => {
                let (h, z) = forward_encode(&encoder, &test.features)?;
                (
                    Some(similarity_dispersion(&z, &test.targets, &s)?),
                    Some(similarity_dispersion(&h, &test.targets, &s)?),
                )
            }
            None => (None, None),
        };
    Ok(PipelineOutcome {
        log: TrainLog {
            representation,
            classifier: clf_log,
            final_report: Some(report),
            final_probe,
            final_dispersion,
            final_dispersion_repr,
        },
        encoder,
        classifier,
    })
}
