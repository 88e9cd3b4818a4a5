//! Two-stage training: adversarial alignment (ADA), pseudo-label
//! self-training (PST) and their combinations, with per-iteration metrics.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{domain_loss, Discriminator, GrlConfig};
use crate::attention::{argmax, GumbelConfig};
use crate::data::{mix, BatchStream, Dataset, DomainData};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, ModelConfig, VisionTransformer};
use crate::pseudo_label::{Metric, PseudoLabelTable};
use crate::tensor::{Sgd, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    Ada,
    Pst,
    /// ADA and PST optimized together from the start.
    Joint,
    AdaThenPst,
    PstThenAda,
    AdaThenJoint,
}

/// Loss terms active during one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageForm {
    pub domain_loss: bool,
    pub pseudo_labels: bool,
}

impl StageForm {
    pub const ADA: StageForm = StageForm {
        domain_loss: true,
        pseudo_labels: false,
    };
    pub const PST: StageForm = StageForm {
        domain_loss: false,
        pseudo_labels: true,
    };
    pub const JOINT: StageForm = StageForm {
        domain_loss: true,
        pseudo_labels: true,
    };
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::Ada,
        Scheme::Pst,
        Scheme::Joint,
        Scheme::AdaThenPst,
        Scheme::PstThenAda,
        Scheme::AdaThenJoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Ada => "ada",
            Scheme::Pst => "pst",
            Scheme::Joint => "joint",
            Scheme::AdaThenPst => "ada-then-pst",
            Scheme::PstThenAda => "pst-then-ada",
            Scheme::AdaThenJoint => "ada-then-joint",
        }
    }

    /// Stage one form and, for two-stage schemes, stage two.
    pub fn stages(self) -> (StageForm, Option<StageForm>) {
        match self {
            Scheme::Ada => (StageForm::ADA, None),
            Scheme::Pst => (StageForm::PST, None),
            Scheme::Joint => (StageForm::JOINT, None),
            Scheme::AdaThenPst => (StageForm::ADA, Some(StageForm::PST)),
            Scheme::PstThenAda => (StageForm::PST, Some(StageForm::ADA)),
            Scheme::AdaThenJoint => (StageForm::ADA, Some(StageForm::JOINT)),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Scheme::ALL
            .into_iter()
            .find(|x| x.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown training scheme {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub iterations_1: usize,
    pub iterations_2: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub gumbel: GumbelConfig,
    pub grl: GrlConfig,
    pub model: ModelConfig,
    pub metric: Metric,
    /// Discriminator hidden width as a multiple of the embedding width.
    pub disc_hidden_ratio: usize,
    /// Evaluate every this many iterations (0: only at stage ends).
    pub eval_every: usize,
    /// Write wall-clock seconds into the metric log (otherwise 0).
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: Scheme::AdaThenJoint,
            iterations_1: 300,
            iterations_2: 150,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            seed: 0,
            gumbel: GumbelConfig::default(),
            // A from-scratch backbone this small collapses under full-strength
            // reversal; a tenth of it still aligns the domains.
            grl: GrlConfig {
                lambda_max: 0.1,
                ..GrlConfig::default()
            },
            model: ModelConfig::default(),
            metric: Metric::Cosine,
            disc_hidden_ratio: 4,
            eval_every: 0,
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.gumbel.temperature.is_nan() || self.gumbel.temperature <= 0.0 {
            return Err(Error::Config("gumbel temperature must be positive".into()));
        }
        if self.disc_hidden_ratio == 0 {
            return Err(Error::Config("disc_hidden_ratio must be at least 1".into()));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        match self.scheme.stages().1 {
            Some(_) => self.iterations_1 + self.iterations_2,
            None => self.iterations_1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub iter: usize,
    pub stage: u8,
    pub l_cls: f64,
    /// `None` when the stage has no domain loss.
    pub l_d: Option<f64>,
    pub acc_src: Option<f64>,
    pub acc_tgt: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub records: Vec<MetricRecord>,
}

pub const METRIC_HEADER: &str = "iter,stage,l_cls,l_d,acc_src,acc_tgt,seconds";

impl MetricLog {
    pub fn push(&mut self, r: MetricRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.iter <= last.iter {
                return Err(Error::Contract(format!(
                    "metric iteration {} follows {}",
                    r.iter, last.iter
                )));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = format!("{METRIC_HEADER}\n");
        for r in &self.records {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.iter,
                r.stage,
                r.l_cls,
                opt(r.l_d),
                opt(r.acc_src),
                opt(r.acc_tgt),
                r.seconds
            )
            .unwrap();
        }
        s
    }

    /// Last recorded target accuracy.
    pub fn final_target_accuracy(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.acc_tgt)
    }

    pub fn final_source_accuracy(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.acc_src)
    }
}

const EVAL_CHUNK: usize = 64;

/// Noise-free logits and features for every sample of `ds`.
pub fn predict(model: &VisionTransformer, ds: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut logits = Vec::with_capacity(ds.len() * model.config.num_classes);
    let mut feats = Vec::with_capacity(ds.len() * model.config.embed_dim);
    let ids: Vec<u32> = (0..ds.len() as u32).collect();
    for chunk in ids.chunks(EVAL_CHUNK) {
        let (l, f) = model.infer(&ds.gather(chunk))?;
        logits.extend(l);
        feats.extend(f);
    }
    Ok((logits, feats))
}

/// Fraction of samples whose arg-max prediction equals `labels`.
pub fn accuracy_from_logits(logits: &[f64], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let classes = logits.len() / labels.len();
    let hits = logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Top-1 accuracy of `model` on a labeled dataset, in evaluation mode.
pub fn evaluate(model: &VisionTransformer, ds: &Dataset) -> Result<f64> {
    let labels: Vec<usize> = (0..ds.len())
        .map(|i| {
            ds.label(i)
                .ok_or_else(|| Error::Contract("evaluation set must be labeled".into()))
        })
        .collect::<Result<_>>()?;
    let (logits, _) = predict(model, ds)?;
    Ok(accuracy_from_logits(&logits, &labels))
}

fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|x| x / z));
    }
    out
}

/// Pseudo-label table for the target training set under `model`.
pub fn pseudo_labels(model: &VisionTransformer, target: &Dataset, metric: Metric) -> Result<PseudoLabelTable> {
    let (logits, feats) = predict(model, target)?;
    let k = model.config.num_classes;
    let probs = softmax_rows(&logits, k);
    let ids: Vec<u32> = (0..target.len() as u32).collect();
    PseudoLabelTable::build(&ids, &feats, &probs, model.config.embed_dim, k, metric)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: MetricLog,
    pub warnings: Vec<String>,
}

/// Losses of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub l_cls: f64,
    pub l_d: Option<f64>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: VisionTransformer,
    pub disc: Discriminator,
    data: DomainData,
    opt_model: Sgd,
    opt_disc: Sgd,
    gumbel_rng: ChaCha8Rng,
    source_stream: BatchStream,
    target_stream: BatchStream,
    pseudo: Option<PseudoLabelTable>,
    label_override: Option<Vec<usize>>,
    iteration: usize,
    warnings: Vec<String>,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: DomainData) -> Result<Self> {
        config.validate()?;
        let src = data.source_train.dataset();
        let m = &config.model;
        if src.channels != m.in_channels || src.height != m.image_size || src.width != m.image_size {
            return Err(Error::Config(format!(
                "model expects {}x{}x{} images, data has {}x{}x{}",
                m.in_channels, m.image_size, m.image_size, src.channels, src.height, src.width
            )));
        }
        if src.num_classes != m.num_classes {
            return Err(Error::Config(format!(
                "model has {} classes, data has {}",
                m.num_classes, src.num_classes
            )));
        }
        let seed = config.seed;
        let model = VisionTransformer::new(config.model.clone(), &mut ChaCha8Rng::seed_from_u64(mix(seed, 1)))?;
        let disc = Discriminator::new(
            m.embed_dim,
            m.embed_dim * config.disc_hidden_ratio,
            &mut ChaCha8Rng::seed_from_u64(mix(seed, 2)),
        );
        let opt_model = Sgd::new(config.lr, config.momentum, config.weight_decay)?;
        let opt_disc = opt_model.clone();
        let source_stream = BatchStream::new(src.len(), config.batch_size, mix(seed, 4), true)?;
        let target_stream = BatchStream::new(data.target_train.dataset().len(), config.batch_size, mix(seed, 5), true)?;
        Ok(Trainer {
            gumbel_rng: ChaCha8Rng::seed_from_u64(mix(seed, mix(3, config.gumbel.rng_seed))),
            config,
            model,
            disc,
            data,
            opt_model,
            opt_disc,
            source_stream,
            target_stream,
            pseudo: None,
            label_override: None,
            iteration: 0,
            warnings: Vec::new(),
        })
    }

    pub fn data(&self) -> &DomainData {
        &self.data
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn pseudo_table(&self) -> Option<&PseudoLabelTable> {
        self.pseudo.as_ref()
    }

    /// Replaces pseudo-labels with fixed per-sample target labels, for
    /// oracle comparisons.
    pub fn override_target_labels(&mut self, labels: Vec<usize>) {
        self.label_override = Some(labels);
    }

    pub fn checkpoint_entries(&self) -> Vec<(String, Tensor)> {
        let mut e = self.model.checkpoint_entries();
        e.extend(self.disc.params.entries("disc."));
        e
    }

    pub fn load_checkpoint_entries(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        self.model.load_checkpoint_entries(entries)?;
        self.disc.params.load_entries("disc.", entries)
    }

    fn refresh_pseudo_labels(&mut self) -> Result<()> {
        if self.label_override.is_some() {
            return Ok(());
        }
        let table = pseudo_labels(&self.model, self.data.target_train.dataset(), self.config.metric)?;
        if table.is_degenerate() {
            self.warnings.push(format!(
                "iteration {}: all pseudo-labels fell into class {}",
                self.iteration, table.refined[0]
            ));
        }
        if !table.empty_classes.is_empty() {
            self.warnings.push(format!(
                "iteration {}: empty classes {:?}",
                self.iteration, table.empty_classes
            ));
        }
        self.pseudo = Some(table);
        Ok(())
    }

    fn target_labels(&self, ids: &[u32]) -> Vec<usize> {
        let src = match &self.label_override {
            Some(l) => l,
            None => &self.pseudo.as_ref().expect("refreshed before use").refined,
        };
        ids.iter().map(|&i| src[i as usize]).collect()
    }

    /// One optimization step under `form`.
    pub fn step(&mut self, form: StageForm) -> Result<StepLosses> {
        if form.pseudo_labels && (self.pseudo.is_none() || self.target_stream.at_epoch_start()) {
            self.refresh_pseudo_labels()?;
        }
        let s_ids = self.source_stream.next_batch();
        let t_ids = self.target_stream.next_batch();
        let (bs, bt) = (s_ids.len(), t_ids.len());
        let mut images = self.data.source_train.dataset().gather(&s_ids);
        images.extend(self.data.target_train.dataset().gather(&t_ids));
        let s_labels = self.data.source_train.labels(&s_ids);

        let lambda = self
            .config
            .grl
            .lambda(self.iteration as f64 / self.config.total_iterations().max(1) as f64);
        let mut tape = Tape::new();
        let mvars = self.model.params.bind(&mut tape);
        let dvars = self.disc.params.bind(&mut tape);
        let mut opts = ForwardOptions {
            gumbel: self.config.gumbel,
            rng: &mut self.gumbel_rng,
        };
        let out = self.model.forward(&mut tape, &mvars, &images, &mut opts)?;
        let logits_s = tape.slice(out.logits, 0, 0, bs)?;
        let mut l_cls = tape.cross_entropy(logits_s, &s_labels)?;
        if form.pseudo_labels {
            let logits_t = tape.slice(out.logits, 0, bs, bt)?;
            let lt = tape.cross_entropy(logits_t, &self.target_labels(&t_ids))?;
            l_cls = tape.add(l_cls, lt)?;
        }
        let mut total = l_cls;
        let mut l_d = None;
        if form.domain_loss {
            let reversed = tape.grl(out.feature, lambda);
            let fs = tape.slice(reversed, 0, 0, bs)?;
            let ft = tape.slice(reversed, 0, bs, bt)?;
            let ld = domain_loss(&mut tape, fs, ft, &self.disc, &dvars)?;
            total = tape.add(total, ld)?;
            l_d = Some(ld);
        }
        let losses = StepLosses {
            l_cls: tape.value(l_cls)[0],
            l_d: l_d.map(|v| tape.value(v)[0]),
        };
        if !losses.l_cls.is_finite() || losses.l_d.is_some_and(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {}: l_cls={} l_d={:?}",
                self.iteration + 1,
                losses.l_cls,
                losses.l_d
            )));
        }
        tape.backward(total)?;
        self.model.params.zero_grad();
        self.disc.params.zero_grad();
        self.model.params.pull_grads(&tape, &mvars);
        self.disc.params.pull_grads(&tape, &dvars);
        let before = (self.model.params.clone(), self.disc.params.clone());
        self.model.params.step(&mut self.opt_model);
        self.disc.params.step(&mut self.opt_disc);
        if !self.model.params.all_finite() || !self.disc.params.all_finite() {
            (self.model.params, self.disc.params) = before;
            return Err(Error::Numeric(format!(
                "non-finite parameters after iteration {}",
                self.iteration + 1
            )));
        }
        self.iteration += 1;
        Ok(losses)
    }

    fn evaluate_both(&self) -> Result<(f64, f64)> {
        Ok((
            evaluate(&self.model, &self.data.source_eval)?,
            evaluate(&self.model, &self.data.target_eval)?,
        ))
    }

    fn run_stage(
        &mut self,
        stage: u8,
        form: StageForm,
        iterations: usize,
        log: &mut MetricLog,
        start: Instant,
        on_record: &mut dyn FnMut(&MetricRecord),
    ) -> Result<()> {
        if form.pseudo_labels && iterations > 0 {
            self.refresh_pseudo_labels()?;
        }
        for k in 0..iterations {
            let losses = self.step(form)?;
            let last = k + 1 == iterations;
            let periodic = self.config.eval_every > 0 && self.iteration.is_multiple_of(self.config.eval_every);
            let (acc_src, acc_tgt) = if last || periodic {
                let (s, t) = self.evaluate_both()?;
                (Some(s), Some(t))
            } else {
                (None, None)
            };
            let record = MetricRecord {
                iter: self.iteration,
                stage,
                l_cls: losses.l_cls,
                l_d: losses.l_d,
                acc_src,
                acc_tgt,
                seconds: if self.config.record_time {
                    start.elapsed().as_secs_f64()
                } else {
                    0.0
                },
            };
            on_record(&record);
            log.push(record)?;
        }
        Ok(())
    }

    /// Runs every stage of the configured scheme. `on_stage_end` sees the
    /// trainer after each stage (for checkpointing); `on_record` sees each
    /// metric row as it is produced.
    pub fn run(
        &mut self,
        on_stage_end: &mut dyn FnMut(u8, &Trainer) -> Result<()>,
        on_record: &mut dyn FnMut(&MetricRecord),
    ) -> Result<TrainOutcome> {
        let start = Instant::now();
        let mut log = MetricLog::default();
        let (first, second) = self.config.scheme.stages();
        self.run_stage(1, first, self.config.iterations_1, &mut log, start, on_record)?;
        on_stage_end(1, self)?;
        if let Some(form) = second {
            self.run_stage(2, form, self.config.iterations_2, &mut log, start, on_record)?;
            on_stage_end(2, self)?;
        }
        Ok(TrainOutcome {
            log,
            warnings: std::mem::take(&mut self.warnings),
        })
    }

    /// [`Trainer::run`] without callbacks.
    pub fn train(&mut self) -> Result<TrainOutcome> {
        self.run(&mut |_, _| Ok(()), &mut |_| {})
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheme_names_round_trip_and_stage_forms() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert_eq!(Scheme::AdaThenJoint.stages(), (StageForm::ADA, Some(StageForm::JOINT)));
        assert_eq!(Scheme::Pst.stages(), (StageForm::PST, None));
        assert!("both".parse::<Scheme>().is_err());
    }

    #[test]
    fn constant_and_perfect_predictors() {
        let labels = [0, 1, 2, 3, 0, 1, 2, 3];
        let constant: Vec<f64> = labels.iter().flat_map(|_| [1.0, 0.0, 0.0, 0.0]).collect();
        assert_eq!(accuracy_from_logits(&constant, &labels), 0.25);
        let truth: Vec<f64> = labels
            .iter()
            .flat_map(|&y| (0..4).map(move |k| if k == y { 1.0 } else { 0.0 }))
            .collect();
        assert_eq!(accuracy_from_logits(&truth, &labels), 1.0);
    }

    #[test]
    fn metric_log_requires_increasing_iterations() {
        let rec = |iter| MetricRecord {
            iter,
            stage: 1,
            l_cls: 1.0,
            l_d: None,
            acc_src: None,
            acc_tgt: Some(0.5),
            seconds: 0.0,
        };
        let mut log = MetricLog::default();
        log.push(rec(1)).unwrap();
        assert!(log.push(rec(1)).is_err());
        let csv = log.to_csv();
        assert_eq!(csv, "iter,stage,l_cls,l_d,acc_src,acc_tgt,seconds\n1,1,1,,,0.5,0\n");
    }
}
