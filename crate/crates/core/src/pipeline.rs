//! The stream loop: encode, retrieve, attend, fuse, decode, gate, commit.
//! Also configuration, JSON-lines run logs, decoder training and the
//! component ablation grid.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::{decode, train_decoder, DecoderParams, Prediction};
use crate::encoders::{encode_image, encode_prompt, LEVEL_CHANNELS};
use crate::error::{Error, Result};
use crate::fusion::{attend_level, fuse, Adapter, FusionMode};
use crate::memory::{make_entry, BankLayout, Capacities, Level, MemoryBank, PerLevel};
use crate::metrics::{ConfusionCounts, MetricsReport, MiouPolicy};
use crate::numerics::{bilinear_resize, gap, Tensor};
use crate::scene::{
    save_mask, synth_stream, Frame, LabelMap, Polarity, PromptSpec, SarImage, StreamSpec, SynthSpec,
};
use crate::update::{
    commit, decide, semantic_discrepancy, structural_discrepancy, UpdateDecision, UpdateThresholds,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatingMode {
    /// Threshold gate on the discrepancy measures.
    #[default]
    Gated,
    /// Every image refreshes every level.
    Always,
    /// Only the first image is committed.
    Never,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Switches {
    pub fusion: FusionMode,
    pub gating: GatingMode,
    pub bank: BankLayout,
}

impl Switches {
    pub const BASELINE: Switches = Switches {
        fusion: FusionMode::Uniform,
        gating: GatingMode::Always,
        bank: BankLayout::Merged,
    };

    pub const FULL: Switches = Switches {
        fusion: FusionMode::Adaptive,
        gating: GatingMode::Gated,
        bank: BankLayout::Multi,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    /// Images in the synthetic training stream.
    #[serde(default = "TrainSpec::default_images")]
    pub images: usize,
    #[serde(default = "TrainSpec::default_seed")]
    pub seed: u64,
    #[serde(default = "TrainSpec::default_steps")]
    pub steps: usize,
    #[serde(default = "TrainSpec::default_lr")]
    pub lr: f64,
    /// Feature-collection passes; each pass runs the stream with the
    /// current decoder, then trains on the fused features it produced.
    #[serde(default = "TrainSpec::default_rounds")]
    pub rounds: usize,
}

impl TrainSpec {
    fn default_images() -> usize {
        60
    }
    fn default_seed() -> u64 {
        1017
    }
    fn default_steps() -> usize {
        150
    }
    fn default_lr() -> f64 {
        0.3
    }
    fn default_rounds() -> usize {
        2
    }
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            images: Self::default_images(),
            seed: Self::default_seed(),
            steps: Self::default_steps(),
            lr: Self::default_lr(),
            rounds: Self::default_rounds(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DecoderSource {
    Random {
        seed: u64,
        #[serde(default = "default_random_scale")]
        scale: f64,
    },
    File {
        path: PathBuf,
    },
    Train(TrainSpec),
}

fn default_random_scale() -> f64 {
    0.1
}

impl Default for DecoderSource {
    fn default() -> Self {
        DecoderSource::Train(TrainSpec::default())
    }
}

/// Input statistics folded into the level adapters, measured on a
/// synthetic calibration stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Calibration {
    pub enabled: bool,
    pub images: usize,
    pub seed: u64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            enabled: true,
            images: 60,
            seed: 1017,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Adapted feature / prompt token dimension.
    pub d: usize,
    pub capacities: Capacities,
    /// Entries retrieved per level.
    pub k: usize,
    pub thresholds: UpdateThresholds,
    pub class_weights: Vec<f64>,
    /// Scale of the fixed orthonormal level adapters.
    pub adapter_gain: f64,
    pub calibration: Calibration,
    pub switches: Switches,
    /// Keep memory across images; `false` resets the bank before each one.
    pub persist_memory: bool,
    pub seed: u64,
    pub miou_policy: MiouPolicy,
    pub decoder: DecoderSource,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            d: 32,
            capacities: Capacities::default(),
            k: 4,
            thresholds: UpdateThresholds::default(),
            class_weights: vec![1.0, 5.0],
            adapter_gain: 2.0,
            calibration: Calibration::default(),
            switches: Switches::FULL,
            persist_memory: true,
            seed: 17,
            miou_policy: MiouPolicy::default(),
            decoder: DecoderSource::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 8 {
            return Err(Error::Validation(format!("d = {} must be at least 8", self.d)));
        }
        for level in Level::ALL {
            let cap = *self.capacity(level);
            if cap == 0 {
                return Err(Error::Validation(format!("{level} capacity must be positive")));
            }
        }
        if self.k == 0 {
            return Err(Error::Validation("k must be positive".into()));
        }
        self.thresholds.validate()?;
        if self.class_weights.len() != 2 || !self.class_weights.iter().all(|&w| w > 0.0 && w.is_finite()) {
            return Err(Error::Validation(format!(
                "class_weights {:?} must be two positive numbers",
                self.class_weights
            )));
        }
        if !(self.adapter_gain > 0.0 && self.adapter_gain.is_finite()) {
            return Err(Error::Validation("adapter_gain must be positive".into()));
        }
        if self.calibration.enabled && self.calibration.images == 0 {
            return Err(Error::Validation(
                "adapter calibration needs at least one image".into(),
            ));
        }
        match &self.decoder {
            DecoderSource::Random { scale, .. } if !(scale.is_finite() && *scale >= 0.0) => {
                Err(Error::Validation("random decoder scale must be >= 0".into()))
            }
            DecoderSource::Train(t) if !(t.lr > 0.0 && t.lr.is_finite()) => {
                Err(Error::Validation("decoder training lr must be positive".into()))
            }
            DecoderSource::Train(t) if t.images == 0 => Err(Error::Validation(
                "decoder training needs at least one image".into(),
            )),
            _ => Ok(()),
        }
    }

    fn capacity(&self, level: Level) -> &usize {
        match level {
            Level::Texture => &self.capacities.texture,
            Level::Structure => &self.capacities.structure,
            Level::Semantic => &self.capacities.semantic,
        }
    }

    pub fn with_switches(&self, switches: Switches) -> Self {
        Self {
            switches,
            ..self.clone()
        }
    }

    fn adapter_seed(&self, level: Level) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(level.index() as u64 + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrace {
    pub size: usize,
    pub top_similarity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTrace {
    pub retrieved: PerLevel<RetrievalTrace>,
    pub responses: PerLevel<f64>,
    pub gamma: PerLevel<f64>,
    pub delta_sem: Option<f64>,
    pub delta_str: Option<f64>,
    pub decision: UpdateDecision,
    pub bootstrap: bool,
    pub bank_entries: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageOutcome {
    pub prediction: Prediction,
    /// Decoder input, at texture resolution.
    pub fused: Tensor,
    pub trace: ImageTrace,
}

/// Per-level, per-channel mean and standard deviation of encoder
/// features over a set of images.
pub fn feature_statistics(images: &[&SarImage]) -> Result<PerLevel<(Vec<f64>, Vec<f64>)>> {
    let pyramids = images
        .iter()
        .map(|i| encode_image(i))
        .collect::<Result<Vec<_>>>()?;
    PerLevel::from_fn(|l| l).try_map(|level, _| {
        let mut mean = vec![0.0; LEVEL_CHANNELS];
        let mut std = vec![1.0; LEVEL_CHANNELS];
        for c in 0..LEVEL_CHANNELS {
            let values = || {
                pyramids
                    .iter()
                    .flat_map(|p| p.level(level).plane(c).iter().copied())
            };
            let n = values().count() as f64;
            let m = values().sum::<f64>() / n;
            let v = values().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            mean[c] = m;
            if v.sqrt() > 1e-9 {
                std[c] = v.sqrt();
            }
        }
        Ok((mean, std))
    })
}

/// Seeded orthonormal adapters, standardized with calibration statistics
/// when enabled.
pub fn build_adapters(cfg: &PipelineConfig) -> Result<PerLevel<Adapter>> {
    let stats = if cfg.calibration.enabled {
        let frames = synth_stream(&SynthSpec {
            prompts: false,
            ..SynthSpec::standard_drift(cfg.calibration.seed, cfg.calibration.images)
        })?;
        Some(feature_statistics(
            &frames.iter().map(|f| &f.image).collect::<Vec<_>>(),
        )?)
    } else {
        None
    };
    PerLevel::from_fn(|l| l).try_map(|l, _| {
        let a = Adapter::seeded(l, LEVEL_CHANNELS, cfg.d, cfg.adapter_gain, cfg.adapter_seed(l))?;
        match &stats {
            Some(s) => a.standardized(&s.get(l).0, &s.get(l).1),
            None => Ok(a),
        }
    })
}

/// Stream state: fixed adapters and decoder plus the evolving bank.
#[derive(Clone, Debug)]
pub struct Segmenter {
    cfg: PipelineConfig,
    adapters: PerLevel<Adapter>,
    decoder: DecoderParams,
    bank: MemoryBank,
    step: u64,
}

impl Segmenter {
    pub fn new(cfg: PipelineConfig, decoder: DecoderParams) -> Result<Self> {
        cfg.validate()?;
        if decoder.dim() != cfg.d {
            return Err(Error::Validation(format!(
                "decoder dim {} does not match d = {}",
                decoder.dim(),
                cfg.d
            )));
        }
        let adapters = build_adapters(&cfg)?;
        let bank = MemoryBank::new(cfg.switches.bank, cfg.capacities)?;
        Ok(Self {
            cfg,
            adapters,
            decoder,
            bank,
            step: 0,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn decoder(&self) -> &DecoderParams {
        &self.decoder
    }

    pub fn reset_memory(&mut self) -> Result<()> {
        self.bank = MemoryBank::new(self.cfg.switches.bank, self.cfg.capacities)?;
        Ok(())
    }

    /// One full step of the loop on a single image.
    pub fn process(&mut self, image: &SarImage, prompt: &PromptSpec) -> Result<ImageOutcome> {
        if !self.cfg.persist_memory {
            self.reset_memory()?;
        }
        let (h, w) = (image.height(), image.width());
        prompt.validate(h, w)?;
        let pyramid = encode_image(image)?;
        let adapted =
            PerLevel::from_fn(|l| l).try_map(|l, _| self.adapters.get(l).adapt(pyramid.level(l)))?;
        let tokens = encode_prompt(prompt, h, w, self.cfg.d)?;

        let mut retrieved_trace = PerLevel::from_fn(|_| RetrievalTrace {
            size: 0,
            top_similarity: None,
        });
        let attended = adapted.try_map(|l, a| {
            let set = self.bank.retrieve(l, &gap(a)?, self.cfg.k)?;
            *retrieved_trace.get_mut(l) = RetrievalTrace {
                size: set.len(),
                top_similarity: set.top_similarity(),
            };
            attend_level(a, &set, &tokens)
        })?;
        let fusion = fuse(&attended, self.cfg.switches.fusion)?;
        let prediction = decode(&fusion.feature, &self.decoder, h, w)?;

        let z_t = gap(&pyramid.semantic)?;
        let f_str = &pyramid.structure;
        let bootstrap = !self.bank.proto_initialized();
        let (delta_sem, delta_str) = match (self.bank.proto_sem(), self.bank.proto_str()) {
            (Some(ps), Some(pst)) if !bootstrap => {
                let (_, sh, sw) = f_str.dims3()?;
                let pst = if pst.shape() == f_str.shape() {
                    pst.clone()
                } else {
                    bilinear_resize(pst, sh, sw)?
                };
                (
                    Some(semantic_discrepancy(&z_t, ps)?),
                    Some(structural_discrepancy(f_str, &pst)?),
                )
            }
            _ => (None, None),
        };
        let decision = match (bootstrap, self.cfg.switches.gating, delta_sem, delta_str) {
            (true, _, _, _) | (_, GatingMode::Always, _, _) => UpdateDecision::all(delta_sem, delta_str),
            (_, GatingMode::Never, _, _) => UpdateDecision::none(delta_sem, delta_str),
            (_, GatingMode::Gated, Some(ds), Some(dt)) => decide(ds, dt, &self.cfg.thresholds),
            _ => unreachable!("deltas exist once prototypes are initialized"),
        };

        if decision.any() {
            let step = self.step;
            let entries = adapted.try_map(|l, a| {
                decision
                    .flags(l)
                    .then(|| make_entry(l, a, &prediction.probs, step))
                    .transpose()
            })?;
            commit(
                &mut self.bank,
                &decision,
                entries,
                &z_t,
                f_str,
                self.cfg.thresholds.alpha,
            )?;
        }
        self.step += 1;

        Ok(ImageOutcome {
            trace: ImageTrace {
                retrieved: retrieved_trace,
                responses: fusion.responses,
                gamma: fusion.gamma,
                delta_sem,
                delta_str,
                decision,
                bootstrap,
                bank_entries: self.bank.total_entries(),
            },
            fused: fusion.feature,
            prediction,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSummary {
    pub positive_clicks: usize,
    pub negative_clicks: usize,
    pub boxes: usize,
}

impl From<&PromptSpec> for PromptSummary {
    fn from(p: &PromptSpec) -> Self {
        let pos = p
            .clicks
            .iter()
            .filter(|c| c.polarity == Polarity::Positive)
            .count();
        Self {
            positive_clicks: pos,
            negative_clicks: p.clicks.len() - pos,
            boxes: p.boxes.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub miou: Option<f64>,
    pub oil_iou: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord<'a> {
    Header {
        version: &'static str,
        images: usize,
        config: &'a PipelineConfig,
    },
    Image {
        index: usize,
        image_id: &'a str,
        #[serde(skip_serializing_if = "Option::is_none")]
        regime: Option<&'a str>,
        prompt: PromptSummary,
        #[serde(flatten)]
        trace: &'a ImageTrace,
        #[serde(skip_serializing_if = "Option::is_none")]
        metrics: Option<ImageMetrics>,
    },
    Footer {
        images: usize,
        commits: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        metrics: Option<&'a MetricsReport>,
        #[serde(skip_serializing_if = "BTreeMap::is_empty")]
        per_regime: BTreeMap<&'a str, Option<f64>>,
    },
}

impl LogRecord<'_> {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub images: usize,
    /// Images on which at least one level was committed.
    pub commits: usize,
    pub counts: Option<ConfusionCounts>,
    pub per_regime: BTreeMap<String, ConfusionCounts>,
    pub policy: MiouPolicy,
}

impl RunSummary {
    pub fn miou(&self) -> Option<f64> {
        self.counts.as_ref().and_then(|c| c.miou(self.policy).ok())
    }

    pub fn report(&self) -> Option<MetricsReport> {
        self.counts.as_ref().map(|c| c.report(self.policy))
    }
}

fn with_image<T>(image_id: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Image {
        image_id: image_id.to_string(),
        source: Box::new(e),
    })
}

fn write_line(log: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(log, "{line}")
        .and_then(|_| log.flush())
        .map_err(|e| Error::io("<run log>", e))
}

/// Observer called after every processed frame.
pub type FrameHook<'a> = dyn FnMut(&Frame, &ImageOutcome) -> Result<()> + 'a;

/// Runs frames in order through a fresh [`Segmenter`], writing the run log
/// (header, one record per frame, footer; an empty stream logs only the
/// header). `hook` sees every outcome, e.g. to write masks or collect
/// training samples.
pub fn run_frames(
    frames: &[Frame],
    cfg: &PipelineConfig,
    decoder: &DecoderParams,
    log: &mut dyn Write,
    hook: &mut FrameHook<'_>,
) -> Result<RunSummary> {
    let mut seg = Segmenter::new(cfg.clone(), decoder.clone())?;
    let classes = decoder.classes();
    write_line(
        log,
        &LogRecord::Header {
            version: VERSION,
            images: frames.len(),
            config: cfg,
        }
        .to_line(),
    )?;
    let mut counts: Option<ConfusionCounts> = None;
    let mut per_regime: BTreeMap<String, ConfusionCounts> = BTreeMap::new();
    let mut commits = 0;
    for (index, frame) in frames.iter().enumerate() {
        let outcome = with_image(&frame.image_id, seg.process(&frame.image, &frame.prompt))?;
        if outcome.trace.decision.any() {
            commits += 1;
        }
        let metrics = match &frame.truth {
            Some(truth) => {
                let mut cc = ConfusionCounts::new(classes)?;
                with_image(&frame.image_id, cc.accumulate(&outcome.prediction.hard, truth))?;
                counts.get_or_insert(ConfusionCounts::new(classes)?).merge(&cc)?;
                if let Some(r) = &frame.regime {
                    per_regime
                        .entry(r.clone())
                        .or_insert(ConfusionCounts::new(classes)?)
                        .merge(&cc)?;
                }
                Some(ImageMetrics {
                    miou: cc.miou(cfg.miou_policy).ok(),
                    oil_iou: cc.iou(1),
                })
            }
            None => None,
        };
        write_line(
            log,
            &LogRecord::Image {
                index,
                image_id: &frame.image_id,
                regime: frame.regime.as_deref(),
                prompt: (&frame.prompt).into(),
                trace: &outcome.trace,
                metrics,
            }
            .to_line(),
        )?;
        with_image(&frame.image_id, hook(frame, &outcome))?;
    }
    let summary = RunSummary {
        images: frames.len(),
        commits,
        counts,
        per_regime,
        policy: cfg.miou_policy,
    };
    if frames.is_empty() {
        return Ok(summary);
    }
    let report = summary.report();
    write_line(
        log,
        &LogRecord::Footer {
            images: summary.images,
            commits,
            metrics: report.as_ref(),
            per_regime: summary
                .per_regime
                .iter()
                .map(|(k, c)| (k.as_str(), c.miou(cfg.miou_policy).ok()))
                .collect(),
        }
        .to_line(),
    )?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedDecoder {
    pub params: DecoderParams,
    /// Loss history of each round.
    pub losses: Vec<Vec<f64>>,
}

/// Per-channel standardization of decoder inputs. Training runs in
/// standardized coordinates; since the head is affine the map folds back
/// into ordinary weights and bias.
struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(samples: &[(Tensor, LabelMap)]) -> Result<Self> {
        let d = samples[0].0.channels();
        let mut mean = vec![0.0; d];
        let mut inv_std = vec![1.0; d];
        for j in 0..d {
            let values = samples.iter().flat_map(|(f, _)| f.plane(j).iter().copied());
            let n = samples.iter().map(|(f, _)| f.plane(j).len()).sum::<usize>() as f64;
            let m = values.clone().sum::<f64>() / n;
            let var = values.map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[j] = m;
            if var.sqrt() > 1e-12 {
                inv_std[j] = 1.0 / var.sqrt();
            }
        }
        Ok(Self { mean, inv_std })
    }

    fn apply(&self, f: &Tensor) -> Result<Tensor> {
        let mut out = f.clone();
        for j in 0..self.mean.len() {
            for v in out.plane_mut(j) {
                *v = (*v - self.mean[j]) * self.inv_std[j];
            }
        }
        Ok(out)
    }

    /// Head on standardized inputs → equivalent head on raw inputs.
    fn fold(&self, p: &DecoderParams) -> Result<DecoderParams> {
        let (c, d) = (p.classes(), p.dim());
        let mut w = p.weights().data().to_vec();
        let mut b = p.bias().data().to_vec();
        for k in 0..c {
            for j in 0..d {
                w[k * d + j] *= self.inv_std[j];
                b[k] -= w[k * d + j] * self.mean[j];
            }
        }
        DecoderParams::new(Tensor::new(vec![c, d], w)?, b.into())
    }

    fn unfold(&self, p: &DecoderParams) -> Result<DecoderParams> {
        let (c, d) = (p.classes(), p.dim());
        let mut w = p.weights().data().to_vec();
        let mut b = p.bias().data().to_vec();
        for k in 0..c {
            for j in 0..d {
                b[k] += w[k * d + j] * self.mean[j];
                w[k * d + j] /= self.inv_std[j];
            }
        }
        DecoderParams::new(Tensor::new(vec![c, d], w)?, b.into())
    }
}

/// Trains the decoder head on features produced by this configuration on
/// `frames`, starting from zero weights.
pub fn train_on_frames(frames: &[Frame], cfg: &PipelineConfig, spec: &TrainSpec) -> Result<TrainedDecoder> {
    let mut params = DecoderParams::zeros(2, cfg.d)?;
    let mut losses = Vec::new();
    for _ in 0..spec.rounds {
        let mut samples = Vec::with_capacity(frames.len());
        run_frames(frames, cfg, &params, &mut io::sink(), &mut |frame, outcome| {
            if let Some(t) = &frame.truth {
                samples.push((outcome.fused.clone(), t.clone()));
            }
            Ok(())
        })?;
        if samples.is_empty() {
            return Err(Error::Validation("decoder training stream has no masks".into()));
        }
        let norm = Standardizer::fit(&samples)?;
        let standardized = samples
            .iter()
            .map(|(f, y)| Ok((norm.apply(f)?, y.clone())))
            .collect::<Result<Vec<_>>>()?;
        let start = norm.unfold(&params)?;
        let out = train_decoder(&standardized, &start, spec.lr, spec.steps, &cfg.class_weights)?;
        params = norm.fold(&out.params)?;
        losses.push(out.losses);
    }
    Ok(TrainedDecoder { params, losses })
}

/// Resolves the configured decoder. File paths are used as given.
pub fn build_decoder(cfg: &PipelineConfig) -> Result<DecoderParams> {
    cfg.validate()?;
    match &cfg.decoder {
        DecoderSource::Random { seed, scale } => DecoderParams::random(2, cfg.d, *scale, *seed),
        DecoderSource::File { path } => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            DecoderParams::parse(&text)
        }
        DecoderSource::Train(spec) => {
            let frames = synth_stream(&SynthSpec::standard_drift(spec.seed, spec.images))?;
            Ok(train_on_frames(&frames, cfg, spec)?.params)
        }
    }
}

fn preflight(frames: &[Frame], classes: usize) -> Result<()> {
    for f in frames {
        let check = || -> Result<()> {
            if f.image.height() < 8 || f.image.width() < 8 {
                return Err(Error::Validation(format!(
                    "image is {}×{}; at least 8×8 is required",
                    f.image.height(),
                    f.image.width()
                )));
            }
            f.prompt.validate(f.image.height(), f.image.width())?;
            if let Some(t) = &f.truth {
                if t.num_classes() != classes {
                    return Err(Error::Validation(format!(
                        "mask declares {} classes, decoder has {classes}",
                        t.num_classes()
                    )));
                }
                if (t.height(), t.width()) != (f.image.height(), f.image.width()) {
                    return Err(Error::Validation("mask and image sizes differ".into()));
                }
            }
            Ok(())
        };
        with_image(&f.image_id, check())?;
    }
    Ok(())
}

/// Paths written by [`run_stream`].
pub fn run_log_path(out_dir: &Path) -> PathBuf {
    out_dir.join("runlog.jsonl")
}

pub fn mask_path(out_dir: &Path, image_id: &str) -> PathBuf {
    out_dir.join("masks").join(format!("{image_id}.pgm"))
}

/// Loads and checks every asset of `spec`, then processes the stream,
/// writing `runlog.jsonl` and one class-index PGM per image (eagerly) into
/// `out_dir`.
pub fn run_stream(
    spec: &StreamSpec,
    base: &Path,
    cfg: &PipelineConfig,
    decoder: &DecoderParams,
    out_dir: &Path,
) -> Result<RunSummary> {
    cfg.validate()?;
    let frames = spec.load_frames(base)?;
    preflight(&frames, decoder.classes())?;
    let masks = out_dir.join("masks");
    fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    let log_path = run_log_path(out_dir);
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    run_frames(&frames, cfg, decoder, &mut log, &mut |frame, outcome| {
        save_mask(mask_path(out_dir, &frame.image_id), &outcome.prediction.hard)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub switches: Switches,
    pub miou: Option<f64>,
    pub oil_iou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub commits: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub images: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, switches: Switches) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.switches == switches)
    }

    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut out = format!(
            "{:<34} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "configuration", "mIoU%", "IoU1%", "Prec%", "Rec%", "commits"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<34} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
                r.name,
                pct(r.miou),
                pct(r.oil_iou),
                pct(r.precision),
                pct(r.recall),
                r.commits
            ));
        }
        out
    }
}

/// The eight component combinations: baseline, each component alone, each
/// pair, then all three.
pub fn ablation_grid() -> [(&'static str, Switches); 8] {
    let s = |fusion, gating, bank| Switches { fusion, gating, bank };
    use BankLayout::{Merged, Multi};
    use FusionMode::{Adaptive, Uniform};
    use GatingMode::{Always, Gated};
    [
        ("Baseline", s(Uniform, Always, Merged)),
        ("+ Multi-scale fusion", s(Adaptive, Always, Merged)),
        ("+ Consistent update", s(Uniform, Gated, Merged)),
        ("+ Multi-level memory bank", s(Uniform, Always, Multi)),
        ("+ Fusion + Update", s(Adaptive, Gated, Merged)),
        ("+ Fusion + Memory bank", s(Adaptive, Always, Multi)),
        ("+ Update + Memory bank", s(Uniform, Gated, Multi)),
        ("Full", s(Adaptive, Gated, Multi)),
    ]
}

/// Evaluates one configuration end to end: resolve (or train) its decoder,
/// then run the frames.
pub fn evaluate_config(frames: &[Frame], cfg: &PipelineConfig) -> Result<RunSummary> {
    let decoder = build_decoder(cfg)?;
    preflight(frames, decoder.classes())?;
    run_frames(frames, cfg, &decoder, &mut io::sink(), &mut |_, _| Ok(()))
}

/// Runs every grid configuration on the same frames, one thread each.
pub fn ablate(frames: &[Frame], base: &PipelineConfig) -> Result<AblationReport> {
    base.validate()?;
    let grid = ablation_grid();
    let results: Vec<Result<RunSummary>> = std::thread::scope(|scope| {
        let handles: Vec<_> = grid
            .iter()
            .map(|(_, sw)| {
                let cfg = base.with_switches(*sw);
                scope.spawn(move || evaluate_config(frames, &cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    });
    let mut rows = Vec::with_capacity(grid.len());
    for ((name, switches), result) in grid.iter().zip(results) {
        let summary = result?;
        let prf = summary.counts.as_ref().map(|c| c.precision_recall_f1(1));
        rows.push(AblationRow {
            name: name.to_string(),
            switches: *switches,
            miou: summary.miou(),
            oil_iou: summary.counts.as_ref().and_then(|c| c.iou(1)),
            precision: prf.and_then(|p| p.precision),
            recall: prf.and_then(|p| p.recall),
            f1: prf.and_then(|p| p.f1),
            commits: summary.commits,
        });
    }
    Ok(AblationReport {
        images: frames.len(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::synth_stream;

    fn frames(n: usize, seed: u64) -> Vec<Frame> {
        synth_stream(&SynthSpec::standard_drift(seed, n)).unwrap()
    }

    fn quick_cfg() -> PipelineConfig {
        PipelineConfig {
            decoder: DecoderSource::Random { seed: 3, scale: 0.5 },
            ..Default::default()
        }
    }

    fn segmenter(cfg: PipelineConfig) -> Segmenter {
        let dec = build_decoder(&cfg).unwrap();
        Segmenter::new(cfg, dec).unwrap()
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let cfg = PipelineConfig::from_toml(
            "k = 2\n[switches]\ngating = \"never\"\n[decoder]\nsource = \"random\"\nseed = 5\n",
        )
        .unwrap();
        assert_eq!(cfg.k, 2);
        assert_eq!(cfg.switches.gating, GatingMode::Never);
        assert_eq!(cfg.decoder, DecoderSource::Random { seed: 5, scale: 0.1 });
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn config_validation() {
        let bad = [
            PipelineConfig {
                d: 4,
                ..Default::default()
            },
            PipelineConfig {
                k: 0,
                ..Default::default()
            },
            PipelineConfig {
                class_weights: vec![1.0],
                ..Default::default()
            },
            PipelineConfig {
                class_weights: vec![1.0, -1.0],
                ..Default::default()
            },
            PipelineConfig {
                adapter_gain: 0.0,
                ..Default::default()
            },
            PipelineConfig {
                capacities: Capacities {
                    texture: 0,
                    structure: 8,
                    semantic: 8,
                },
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn first_image_bootstraps() {
        let f = frames(2, 1);
        let mut seg = segmenter(quick_cfg());
        let out = seg.process(&f[0].image, &f[0].prompt).unwrap();
        assert!(out.trace.bootstrap);
        assert!(seg.bank().groups().iter().all(|g| g.len() == 1));
        assert!(out.trace.retrieved.texture.size == 0);
        let s: f64 = Level::ALL.iter().map(|&l| *out.trace.gamma.get(l)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn repeated_image_is_not_committed() {
        let f = frames(4, 2);
        let mut seg = segmenter(quick_cfg());
        seg.process(&f[0].image, &f[0].prompt).unwrap();
        let again = seg.process(&f[0].image, &f[0].prompt).unwrap();
        assert_eq!(again.trace.delta_sem, Some(0.0));
        assert_eq!(again.trace.delta_str, Some(0.0));
        assert!(!again.trace.decision.any());
    }

    #[test]
    fn never_mode_freezes_bank() {
        let f = frames(6, 3);
        let cfg = quick_cfg().with_switches(Switches {
            gating: GatingMode::Never,
            ..Switches::FULL
        });
        let mut seg = segmenter(cfg);
        seg.process(&f[0].image, &f[0].prompt).unwrap();
        let frozen = seg.bank().clone();
        let first = seg.process(&f[1].image, &f[1].prompt).unwrap();
        for fr in &f[2..] {
            seg.process(&fr.image, &fr.prompt).unwrap();
        }
        assert_eq!(seg.bank(), &frozen);
        let later = seg.process(&f[1].image, &f[1].prompt).unwrap();
        assert_eq!(later.prediction, first.prediction);
    }

    #[test]
    fn always_mode_commits_every_image() {
        let f = frames(5, 4);
        let cfg = quick_cfg().with_switches(Switches {
            gating: GatingMode::Always,
            ..Switches::FULL
        });
        let mut seg = segmenter(cfg);
        for fr in &f {
            assert!(seg.process(&fr.image, &fr.prompt).unwrap().trace.decision.any());
        }
    }

    #[test]
    fn reset_per_image_always_bootstraps() {
        let f = frames(3, 5);
        let mut seg = segmenter(PipelineConfig {
            persist_memory: false,
            ..quick_cfg()
        });
        for fr in &f {
            assert!(seg.process(&fr.image, &fr.prompt).unwrap().trace.bootstrap);
        }
    }

    #[test]
    fn uniform_fusion_uses_equal_weights() {
        let f = frames(1, 6);
        let mut seg = segmenter(quick_cfg().with_switches(Switches::BASELINE));
        let out = seg.process(&f[0].image, &f[0].prompt).unwrap();
        assert_eq!(out.trace.gamma.texture, 1.0 / 3.0);
        assert_eq!(out.trace.gamma.semantic, 1.0 / 3.0);
    }

    #[test]
    fn run_log_shape() {
        let f = frames(4, 7);
        let cfg = quick_cfg();
        let dec = build_decoder(&cfg).unwrap();
        let mut buf = Vec::new();
        let summary = run_frames(&f, &cfg, &dec, &mut buf, &mut |_, _| Ok(())).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0]["kind"], "header");
        assert_eq!(lines[0]["config"]["k"], 4);
        assert_eq!(lines[1]["kind"], "image");
        assert_eq!(lines[1]["image_id"], f[0].image_id.as_str());
        assert!(lines[1]["gamma"]["tex"].is_number());
        assert!(lines[2]["delta_sem"].is_number());
        assert_eq!(lines[5]["kind"], "footer");
        assert!(lines[5]["metrics"]["miou"].is_number());
        assert_eq!(summary.images, 4);
    }

    #[test]
    fn empty_stream_logs_only_header() {
        let cfg = quick_cfg();
        let dec = build_decoder(&cfg).unwrap();
        let mut buf = Vec::new();
        let s = run_frames(&[], &cfg, &dec, &mut buf, &mut |_, _| Ok(())).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.contains("\"kind\":\"header\""));
        assert!(s.counts.is_none());
    }

    #[test]
    fn errors_name_the_image() {
        let mut f = frames(2, 8);
        f[1].prompt.clicks.push(crate::scene::Click {
            row: 999,
            col: 0,
            polarity: Polarity::Positive,
        });
        let cfg = quick_cfg();
        let dec = build_decoder(&cfg).unwrap();
        let err = run_frames(&f, &cfg, &dec, &mut io::sink(), &mut |_, _| Ok(())).unwrap_err();
        assert_eq!(err.image_id(), Some(f[1].image_id.as_str()));
    }

    #[test]
    fn grid_order_and_mapping() {
        let grid = ablation_grid();
        assert_eq!(grid[0].1, Switches::BASELINE);
        assert_eq!(grid[7].1, Switches::FULL);
        let mut all: Vec<_> = grid.iter().map(|g| g.1).collect();
        all.dedup();
        assert_eq!(all.len(), 8);
    }

    #[test]
    fn training_improves_fit() {
        let f = frames(8, 9);
        let cfg = PipelineConfig::default();
        let spec = TrainSpec {
            steps: 60,
            ..Default::default()
        };
        let t = train_on_frames(&f, &cfg, &spec).unwrap();
        assert_eq!(t.losses.len(), 2);
        assert!(t.losses[0][60] < t.losses[0][0]);
    }
}
