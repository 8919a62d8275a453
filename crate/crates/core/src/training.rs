//! Joint training of encoder, generator and discriminator.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::checkpoint::{AdamState, Checkpoint, CheckpointMeta, RngState};
use crate::config::ModelConfig;
use crate::data::{Batch, DatasetIndex};
use crate::error::{Error, Result};
use crate::losses::{discriminator_loss_graph, generator_loss_graph, palette_loss_graph, LossWeights};
use crate::model::Model;
use crate::nn::{Adam, Forward, ParameterSet};
use crate::palette::{PaletteGrid, PaletteHistogram};

/// Draws above this select the ground-truth palette.
pub const TEACHER_THRESHOLD: f64 = 0.8;
pub const LOG_FILE: &str = "train_log.csv";
pub const LATEST_CHECKPOINT: &str = "latest.palg";

/// Every key is optional in the TOML file; missing keys take these defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Architecture preset: `toy`, `desk` or `paper`.
    pub preset: String,
    /// Full architecture, overriding `preset` when present.
    pub model: Option<ModelConfig>,
    /// Total palette bins; must be a perfect square.
    pub bins: Option<usize>,
    pub sigma: Option<f64>,
    pub global_attention: Option<bool>,
    pub local_attention: Option<bool>,
    pub epochs: u64,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub crop_size: usize,
    pub seed: u64,
    /// Steps between numbered checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    /// Steps between log rows.
    pub log_interval: u64,
    /// Sequential data loading.
    pub deterministic: bool,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            model: None,
            bins: None,
            sigma: None,
            global_attention: None,
            local_attention: None,
            epochs: 10,
            batch_size: 16,
            lr_generator: 1e-4,
            lr_discriminator: 4e-4,
            adam_beta1: 0.0,
            adam_beta2: 0.9,
            crop_size: 64,
            seed: 0,
            checkpoint_interval: 0,
            log_interval: 10,
            deterministic: true,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The architecture after applying the preset and every override.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = match &self.model {
            Some(m) => m.clone(),
            None => ModelConfig::preset(&self.preset)?,
        };
        if let Some(bins) = self.bins {
            m.grid = PaletteGrid::square(bins, self.sigma.unwrap_or(m.grid.sigma))?;
        } else if let Some(s) = self.sigma {
            m.grid = PaletteGrid::new(m.grid.n_a, m.grid.n_b, s)?;
        }
        let a = &mut m.generator.attention;
        if let Some(g) = self.global_attention {
            a.global = g;
        }
        if let Some(l) = self.local_attention {
            a.local = l;
        }
        if !a.global && !a.local {
            a.enabled = false;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.epochs > 0 && self.batch_size > 0 && self.crop_size > 0;
        let rates = [self.lr_generator, self.lr_discriminator];
        if !positive || rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config(
                "epochs, batch_size and crop_size must be positive; learning rates non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        self.loss.validate()?;
        let m = self.model_config()?;
        if self.crop_size % m.input_multiple() != 0 {
            return Err(Error::Config(format!(
                "crop_size {} must be a multiple of {}",
                self.crop_size,
                m.input_multiple()
            )));
        }
        Ok(())
    }
}

/// `1 - step / total`.
pub fn tau_schedule(step: u64, total_steps: u64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::Invalid(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    Ok(1.0 - step as f64 / total_steps as f64)
}

/// Draws `p ~ U[tau, 1]` and reports whether the ground truth is selected.
pub fn teacher_forcing_draw<R: Rng + ?Sized>(tau: f64, rng: &mut R) -> Result<bool> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Invalid(format!("tau {tau} outside [0, 1]")));
    }
    let u: f64 = rng.random();
    Ok(tau + (1.0 - tau) * u > TEACHER_THRESHOLD)
}

/// `h_gt` when the draw exceeds the threshold, else `h_pred`.
pub fn mix_palette<R: Rng + ?Sized>(
    h_gt: &PaletteHistogram,
    h_pred: &PaletteHistogram,
    tau: f64,
    rng: &mut R,
) -> Result<PaletteHistogram> {
    if (h_gt.n_a(), h_gt.n_b()) != (h_pred.n_a(), h_pred.n_b()) {
        return Err(Error::GridMismatch {
            expected_a: h_gt.n_a(),
            expected_b: h_gt.n_b(),
            got_a: h_pred.n_a(),
            got_b: h_pred.n_b(),
        });
    }
    Ok(if teacher_forcing_draw(tau, rng)? {
        h_gt.clone()
    } else {
        h_pred.clone()
    })
}

/// Probability that [`mix_palette`] returns the ground truth.
pub fn teacher_forcing_probability(tau: f64) -> f64 {
    if tau >= TEACHER_THRESHOLD {
        1.0
    } else {
        (1.0 - TEACHER_THRESHOLD) / (1.0 - tau)
    }
}

/// Scalar terms of one step. Generator-side values are batch means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub tau: f64,
    pub d_loss: f64,
    pub d_real: f64,
    pub d_fake: f64,
    pub palette_total: f64,
    pub palette_l1: f64,
    pub palette_entropy: f64,
    pub generator_total: f64,
    pub regression: f64,
    pub histogram: f64,
    pub adversarial: f64,
    /// Images of the batch conditioned on the ground-truth palette.
    pub teacher_forced: usize,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub total_steps: u64,
    pub steps_per_epoch: u64,
    pub params: ParameterSet,
    pub opt_generator: Adam,
    pub opt_discriminator: Adam,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn tau(&self) -> f64 {
        tau_schedule(self.step.min(self.total_steps), self.total_steps).expect("clamped step")
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub state: TrainState,
}

/// Values produced by the encoder/generator pass that the discriminator
/// update consumes as constants.
struct StepInputs {
    chroma: Tensor,
    rgb_real: Tensor,
    h_gt: Tensor,
    h_in: Tensor,
    fake: Tensor,
    rgb_fake: Tensor,
}

struct GeneratorPass {
    graph: Graph,
    rgb_real: Var,
    fake: Var,
    rgb_fake: Var,
    h_pred: Var,
    h_gt: Var,
    h_in_const: Var,
    chroma: Var,
    teacher_forced: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, steps_per_epoch: u64) -> Result<Self> {
        config.validate()?;
        if steps_per_epoch == 0 {
            return Err(Error::Dataset(format!(
                "no full batch of {} fits the dataset",
                config.batch_size
            )));
        }
        let model = Model::new(config.model_config()?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = model.init(&mut rng);
        let state = TrainState {
            step: 0,
            total_steps: config.epochs * steps_per_epoch,
            steps_per_epoch,
            params,
            opt_generator: Adam::new(config.lr_generator, config.adam_beta1, config.adam_beta2),
            opt_discriminator: Adam::new(config.lr_discriminator, config.adam_beta1, config.adam_beta2),
            rng,
        };
        Ok(Self { config, model, state })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let r = &self.state.rng;
        let meta = CheckpointMeta {
            model: self.model.config.clone(),
            train: self.config.clone(),
            total_steps: self.state.total_steps,
            steps_per_epoch: self.state.steps_per_epoch,
            rng: RngState {
                seed: r.get_seed(),
                stream: r.get_stream(),
                word_pos: r.get_word_pos().to_string(),
            },
            adam_generator: placeholder_adam(),
            adam_discriminator: placeholder_adam(),
        };
        Checkpoint::new(
            self.state.step,
            meta,
            self.state.params.clone(),
            self.state.opt_generator.clone(),
            self.state.opt_discriminator.clone(),
        )
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let model = Model::new(ck.meta.model.clone())?;
        let mut rng = ChaCha8Rng::from_seed(ck.meta.rng.seed);
        rng.set_stream(ck.meta.rng.stream);
        let pos: u128 = ck
            .meta
            .rng
            .word_pos
            .parse()
            .map_err(|_| Error::Format("bad RNG position".into()))?;
        rng.set_word_pos(pos);
        Ok(Self {
            config: ck.meta.train,
            model,
            state: TrainState {
                step: ck.step,
                total_steps: ck.meta.total_steps,
                steps_per_epoch: ck.meta.steps_per_epoch,
                params: ck.params,
                opt_generator: ck.opt_generator,
                opt_discriminator: ck.opt_discriminator,
                rng,
            },
        })
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    fn non_finite(&self, term: &str) -> Error {
        Error::NonFinite {
            term: term.to_string(),
            step: self.state.step,
        }
    }

    fn check(&self, term: &str, v: f64) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.non_finite(term))
        }
    }

    /// Encoder and generator in training mode; the graph is kept for the
    /// later generator update.
    fn generator_pass(&mut self, batch: &Batch, tau: f64) -> Result<GeneratorPass> {
        let (gray_t, chroma_t) = batch.tensors()?;
        let n = batch.len();
        let grid = self.model.config.grid;
        let k = grid.bins();
        let mut mask = vec![0.0; n * k];
        let mut teacher_forced = 0;
        for row in mask.chunks_mut(k) {
            if teacher_forcing_draw(tau, &mut self.state.rng)? {
                row.fill(1.0);
                teacher_forced += 1;
            }
        }
        let z = self.model.latent_batch(n, &mut self.state.rng);

        let mut g = Graph::new();
        let gray = g.constant(gray_t);
        let chroma = g.constant(chroma_t);
        let h_gt = g.soft_histogram(chroma, &grid);
        let mut fw = Forward::new(&mut g, &self.state.params, true);
        let enc = self.model.encoder.forward(&mut fw, gray)?;
        // h_in = mask * h_gt + (1 - mask) * h_pred; gradients reach the encoder
        // only through the rows that use its prediction
        let m = fw.g.constant(Tensor::new(&[n, k], mask.clone()));
        let inv = fw.g.constant(Tensor::new(&[n, k], mask.iter().map(|v| 1.0 - v).collect()));
        let a = fw.g.mul(m, h_gt);
        let b = fw.g.mul(inv, enc.palette);
        let h_in = fw.g.add(a, b);
        let zv = fw.g.constant(z);
        let fake = self.model.generator.forward(&mut fw, gray, h_in, zv, enc.features)?;
        let rgb_fake = g.lab_to_rgb(gray, fake);
        let rgb_real = g.lab_to_rgb(gray, chroma);
        let h_in_const = g.detach(h_in);
        Ok(GeneratorPass {
            graph: g,
            rgb_real,
            fake,
            rgb_fake,
            h_pred: enc.palette,
            h_gt,
            h_in_const,
            chroma,
            teacher_forced,
        })
    }

    fn step_inputs(pass: &GeneratorPass) -> StepInputs {
        let g = &pass.graph;
        StepInputs {
            chroma: g.value(pass.chroma).clone(),
            rgb_real: g.value(pass.rgb_real).clone(),
            h_gt: g.value(pass.h_gt).clone(),
            h_in: g.value(pass.h_in_const).clone(),
            fake: g.value(pass.fake).clone(),
            rgb_fake: g.value(pass.rgb_fake).clone(),
        }
    }

    /// Hinge update of the discriminator on detached fakes. Returns
    /// `(loss, mean real score, mean fake score)`.
    fn discriminator_update(&mut self, inp: &StepInputs) -> Result<(f64, f64, f64)> {
        let mut g = Graph::new();
        let (real, fake) = {
            let mut fw = Forward::new(&mut g, &self.state.params, true);
            let c = fw.g.constant(inp.chroma.clone());
            let r = fw.g.constant(inp.rgb_real.clone());
            let h = fw.g.constant(inp.h_gt.clone());
            let real = self.model.discriminator.forward(&mut fw, c, r, h)?.score;
            let cf = fw.g.constant(inp.fake.clone());
            let rf = fw.g.constant(inp.rgb_fake.clone());
            let hf = fw.g.constant(inp.h_in.clone());
            let fake = self.model.discriminator.forward(&mut fw, cf, rf, hf)?.score;
            (real, fake)
        };
        let loss = discriminator_loss_graph(&mut g, real, fake);
        let d_loss = self.check("discriminator", g.value(loss).item())?;
        let d_real = g.value(real).mean();
        let d_fake = g.value(fake).mean();
        let grads = g.backward(loss).into_named();
        debug_assert!(grads.keys().all(|k| k.starts_with(crate::discriminator::PREFIX)));
        self.state.opt_discriminator.update(&mut self.state.params, &grads);
        if !self.state.params.all_finite() {
            return Err(self.non_finite("discriminator parameters"));
        }
        Ok((d_loss, d_real, d_fake))
    }

    /// Joint encoder + generator update against the current discriminator.
    fn generator_update(&mut self, mut pass: GeneratorPass, report: &mut LossReport) -> Result<()> {
        let grid = self.model.config.grid;
        let w = self.config.loss;
        let g = &mut pass.graph;
        let d_fake = {
            let mut fw = Forward::frozen(g, &self.state.params, true);
            self.model
                .discriminator
                .forward(&mut fw, pass.fake, pass.rgb_fake, pass.h_in_const)?
                .score
        };
        let gl = generator_loss_graph(g, pass.chroma, pass.fake, pass.h_gt, d_fake, &grid, &w);
        let pl = palette_loss_graph(g, pass.h_gt, pass.h_pred, &w);
        let total = g.add(gl.total, pl.total);
        report.generator_total = g.value(gl.total).item();
        report.regression = g.value(gl.regression).item();
        report.histogram = g.value(gl.histogram).item();
        report.adversarial = g.value(gl.adversarial).item();
        report.palette_total = g.value(pl.total).item();
        report.palette_l1 = g.value(pl.l1).item();
        report.palette_entropy = g.value(pl.entropy).item();
        for (term, v) in [
            ("regression", report.regression),
            ("histogram", report.histogram),
            ("adversarial", report.adversarial),
            ("palette_l1", report.palette_l1),
            ("palette_entropy", report.palette_entropy),
        ] {
            self.check(term, v)?;
        }
        let updates = g.take_buffer_updates();
        let grads = g.backward(total).into_named();
        debug_assert!(!grads.keys().any(|k| k.starts_with(crate::discriminator::PREFIX)));
        self.state.opt_generator.update(&mut self.state.params, &grads);
        self.state.params.apply_buffer_updates(updates);
        if !self.state.params.all_finite() {
            return Err(self.non_finite("generator parameters"));
        }
        Ok(())
    }

    /// One full step: discriminator first, then encoder and generator.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let step = self.state.step;
        self.step_inner(batch).map_err(|e| match e {
            Error::NonFinite { term, .. } => Error::NonFinite { term, step },
            e => e,
        })
    }

    fn step_inner(&mut self, batch: &Batch) -> Result<LossReport> {
        let tau = self.state.tau();
        self.state.params.power_iterate(1);
        let pass = self.generator_pass(batch, tau)?;
        let inputs = Self::step_inputs(&pass);
        let (d_loss, d_real, d_fake) = self.discriminator_update(&inputs)?;
        let mut report = LossReport {
            step: self.state.step,
            tau,
            d_loss,
            d_real,
            d_fake,
            palette_total: 0.0,
            palette_l1: 0.0,
            palette_entropy: 0.0,
            generator_total: 0.0,
            regression: 0.0,
            histogram: 0.0,
            adversarial: 0.0,
            teacher_forced: pass.teacher_forced,
        };
        self.generator_update(pass, &mut report)?;
        self.state.step += 1;
        Ok(report)
    }

    /// Trains until the schedule ends, starting from the current step.
    /// With `out`, appends CSV log rows and writes checkpoints there.
    pub fn fit(
        &mut self,
        data: &DatasetIndex,
        out: Option<&Path>,
        mut on_step: impl FnMut(&LossReport),
    ) -> Result<Vec<LossReport>> {
        let spe = data.batches(self.config.batch_size, self.config.seed, 0).len() as u64;
        if spe != self.state.steps_per_epoch {
            return Err(Error::Dataset(format!(
                "dataset yields {spe} batches per epoch, the run was set up for {}",
                self.state.steps_per_epoch
            )));
        }
        let mut log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                Some(LogWriter::open(&dir.join(LOG_FILE))?)
            }
            None => None,
        };
        let mut reports = Vec::new();
        let mut cached: Option<(u64, Vec<Vec<usize>>)> = None;
        let pool = if self.config.deterministic {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(1)
                    .build()
                    .map_err(|e| Error::Invalid(e.to_string()))?,
            )
        } else {
            None
        };
        while self.state.step < self.state.total_steps {
            let epoch = self.state.step / spe;
            let idx = (self.state.step % spe) as usize;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, data.batches(self.config.batch_size, self.config.seed, epoch)));
            }
            let ids = &cached.as_ref().expect("just set").1[idx];
            let load = || data.load_batch(ids, self.config.crop_size, self.config.seed, epoch);
            let batch = match &pool {
                Some(p) => p.install(load)?,
                None => load()?,
            };
            let report = self.train_step(&batch)?;
            on_step(&report);
            let interval = self.config.log_interval.max(1);
            if let Some(log) = log.as_mut() {
                if report.step % interval == 0 || self.state.step == self.state.total_steps {
                    log.write(&report)?;
                }
            }
            if let Some(dir) = out {
                let ci = self.config.checkpoint_interval;
                if ci > 0 && self.state.step % ci == 0 {
                    self.save_checkpoint(&checkpoint_path(dir, self.state.step))?;
                }
            }
            reports.push(report);
        }
        if let Some(dir) = out {
            self.save_checkpoint(&dir.join(LATEST_CHECKPOINT))?;
        }
        Ok(reports)
    }
}

fn placeholder_adam() -> AdamState {
    AdamState {
        lr: 0.0,
        beta1: 0.0,
        beta2: 0.0,
        eps: 0.0,
        step: 0,
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint_{step:08}.palg"))
}

struct LogWriter {
    inner: csv::Writer<std::fs::File>,
}

impl LogWriter {
    fn open(path: &Path) -> Result<Self> {
        let exists = path.metadata().map(|m| m.len() > 0).unwrap_or(false);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let inner = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
        Ok(Self { inner })
    }

    fn write(&mut self, r: &LossReport) -> Result<()> {
        self.inner
            .serialize(r)
            .and_then(|_| self.inner.flush().map_err(csv::Error::from))
            .map_err(|e| Error::Invalid(format!("writing training log: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_fixtures() {
        assert_eq!(tau_schedule(0, 10).unwrap(), 1.0);
        assert_eq!(tau_schedule(10, 10).unwrap(), 0.0);
        assert_eq!(tau_schedule(5, 10).unwrap(), 0.5);
        assert!(tau_schedule(11, 10).is_err());
    }

    #[test]
    fn mix_palette_rates() {
        let a = PaletteHistogram::one_hot(4, 4, 0, 0);
        let b = PaletteHistogram::uniform(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for tau in [1.0, 0.9] {
            for _ in 0..1000 {
                assert_eq!(mix_palette(&a, &b, tau, &mut rng).unwrap(), a);
            }
        }
        let hits = (0..10_000)
            .filter(|_| mix_palette(&a, &b, 0.0, &mut rng).unwrap() == a)
            .count();
        assert!((hits as f64 / 1e4 - 0.2).abs() <= 0.02, "{hits}");
        assert!(mix_palette(&a, &b, 1.5, &mut rng).is_err());
        assert!(mix_palette(&a, &PaletteHistogram::uniform(2, 2), 0.5, &mut rng).is_err());
    }

    #[test]
    fn config_round_trip_and_overrides() {
        let cfg = TrainConfig::from_toml_str(
            "preset = \"toy\"\nbins = 64\nlocal_attention = false\nbatch_size = 2\n[loss]\nlambda_rg = 0.0\n",
        )
        .unwrap();
        let m = cfg.model_config().unwrap();
        assert_eq!((m.grid.n_a, m.grid.n_b), (8, 8));
        assert!(!m.generator.attention.local && m.generator.attention.enabled);
        assert_eq!(cfg.loss.lambda_rg, 0.0);
        assert_eq!(cfg.loss.lambda_rec1, 5.0);
        assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        assert!(TrainConfig::from_toml_str("bins = 10\n").is_err());
        assert!(TrainConfig::from_toml_str("unknown_key = 1\n").is_err());
        assert!(TrainConfig::from_toml_str("crop_size = 40\n").is_err());
        let d = TrainConfig::default();
        assert_eq!(d.lr_discriminator / d.lr_generator, 4.0);
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            preset: "toy".into(),
            batch_size: 2,
            crop_size: 16,
            epochs: 2,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn tiny_batch(seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (gray, chroma) = (0..2)
            .map(|_| crate::colorspace::rgb_to_lab(&crate::data::synth::synth_image(16, &mut rng)).unwrap())
            .unzip();
        Batch { gray, chroma }
    }

    fn changed(a: &ParameterSet, b: &ParameterSet) -> Vec<String> {
        a.params()
            .filter(|(k, t)| b.get(k).unwrap() != *t)
            .map(|(k, _)| k.clone())
            .collect()
    }

    #[test]
    fn updates_touch_only_their_networks() {
        let mut tr = Trainer::new(tiny_config(), 4).unwrap();
        let batch = tiny_batch(1);
        let before = tr.state.params.clone();
        let pass = tr.generator_pass(&batch, 0.5).unwrap();
        let inputs = Trainer::step_inputs(&pass);
        tr.discriminator_update(&inputs).unwrap();
        let d_changed = changed(&before, &tr.state.params);
        assert!(!d_changed.is_empty());
        assert!(d_changed.iter().all(|k| k.starts_with(crate::discriminator::PREFIX)), "{d_changed:?}");

        let mid = tr.state.params.clone();
        let mut report = LossReport {
            step: 0,
            tau: 0.5,
            d_loss: 0.0,
            d_real: 0.0,
            d_fake: 0.0,
            palette_total: 0.0,
            palette_l1: 0.0,
            palette_entropy: 0.0,
            generator_total: 0.0,
            regression: 0.0,
            histogram: 0.0,
            adversarial: 0.0,
            teacher_forced: 0,
        };
        let pass = tr.generator_pass(&batch, 0.5).unwrap();
        tr.generator_update(pass, &mut report).unwrap();
        let g_changed = changed(&mid, &tr.state.params);
        assert!(g_changed.iter().any(|k| k.starts_with(crate::palette_generator::PREFIX)));
        assert!(g_changed.iter().any(|k| k.starts_with(crate::assignment_generator::PREFIX)));
        assert!(!g_changed.iter().any(|k| k.starts_with(crate::discriminator::PREFIX)));
        assert!(report.regression > 0.0 && report.palette_l1 > 0.0);
    }

    #[test]
    fn steps_are_deterministic() {
        let batch = tiny_batch(2);
        let run = || {
            let mut tr = Trainer::new(tiny_config(), 4).unwrap();
            let r: Vec<_> = (0..2).map(|_| tr.train_step(&batch).unwrap()).collect();
            (r, tr.state.params)
        };
        let (ra, pa) = run();
        let (rb, pb) = run();
        assert_eq!(ra, rb);
        assert!(changed(&pa, &pb).is_empty());
        assert_eq!(ra[1].step, 1);
        assert!(ra[0].tau > ra[1].tau);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let batches = [tiny_batch(4), tiny_batch(5), tiny_batch(6)];
        let mut full = Trainer::new(tiny_config(), 4).unwrap();
        for b in &batches {
            full.train_step(b).unwrap();
        }
        let mut first = Trainer::new(tiny_config(), 4).unwrap();
        first.train_step(&batches[0]).unwrap();
        let bytes = first.checkpoint().to_bytes();
        drop(first);
        let mut resumed = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(resumed.state.step, 1);
        for b in &batches[1..] {
            resumed.train_step(b).unwrap();
        }
        assert!(changed(&full.state.params, &resumed.state.params).is_empty());
        assert_eq!(full.state.opt_generator, resumed.state.opt_generator);
        assert_eq!(full.state.opt_discriminator, resumed.state.opt_discriminator);
        for (k, t) in full.state.params.buffers() {
            assert_eq!(resumed.state.params.buffer(k).unwrap(), t, "{k}");
        }
    }

    #[test]
    fn fit_writes_log_and_checkpoints() {
        let data_dir = tempfile::tempdir().unwrap();
        crate::data::synth::write_corpus(data_dir.path(), 4, 20, 1).unwrap();
        let data = crate::data::build_index(data_dir.path(), crate::data::Split::Train).unwrap();
        let out = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_interval: 2,
            log_interval: 1,
            ..tiny_config()
        };
        let mut tr = Trainer::new(cfg, 2).unwrap();
        let mut seen = 0;
        let reports = tr.fit(&data, Some(out.path()), |_| seen += 1).unwrap();
        assert_eq!((reports.len(), seen), (4, 4));
        assert!(checkpoint_path(out.path(), 2).exists());
        assert!(checkpoint_path(out.path(), 4).exists());
        let log = std::fs::read_to_string(out.path().join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 5);
        assert!(log.starts_with("step,tau,d_loss"));
        let back = Trainer::load_checkpoint(&out.path().join(LATEST_CHECKPOINT)).unwrap();
        assert_eq!(back.state.step, 4);
        assert!(Trainer::new(tiny_config(), 3).unwrap().fit(&data, None, |_| {}).is_err());
    }
}
