//! Joint training of the motion and refinement heads.
//!
//! Each training sample is an anchored rollout rebuilt on a fresh tape: the
//! motion head reads the sliding window, its flow is composed into the
//! running total, the anchor is advected through that total, and (when the
//! generator is in play) the refinement head cleans the propagated frame.
//! Losses from every step are averaged and differentiated in one backward
//! pass, so gradients reach every flow the composition touched. Two things
//! are deliberately opaque to the gradient: the conflict mask (its
//! thresholding has zero derivative almost everywhere) and the refined
//! frames pushed into the window (each step's input frames are constants).

use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::estimate::{estimate_variational, NetEstimator, VariationalConfig};
use crate::evolve::{EvolutionConfig, EvolutionVariant};
use crate::field::{ScalarField, Sequence};
use crate::loss::{mask_weights, LossConfig};
use crate::mask::{conflict_mask, splat_energy, MaskThresholds, SplatMode};
use crate::net::{load_checkpoint, save_checkpoint, stack_frames, GeneratorNet, MotionNet};
use crate::refine::{InpaintRefiner, NetRefiner, Refiner};
use crate::tape::{NodeId, Tape, Tensor};
use crate::warp::{gaussian_kernel, KernelConfig, KernelStencil};

/// The trainable forecaster: motion head, refinement head, and the rule
/// that evolves the carried flow (whose conv variant has weights of its
/// own).
#[derive(Clone, Debug)]
pub struct PredictorModel {
    pub motion: MotionNet,
    pub generator: GeneratorNet,
    pub evolution: EvolutionConfig,
}

impl PredictorModel {
    /// Freshly initialized heads; `window` fixes the motion head's input
    /// depth and `seed` the initialization.
    pub fn new(
        window: usize,
        base_channels: usize,
        evolution: EvolutionConfig,
        seed: u64,
    ) -> Result<Self> {
        evolution.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Ok(PredictorModel {
            motion: MotionNet::new(window, base_channels, &mut rng)?,
            generator: GeneratorNet::new(base_channels, &mut rng)?,
            evolution,
        })
    }

    /// Every trainable tensor, in checkpoint order.
    pub fn checkpoint_entries(&self) -> Vec<(String, Tensor)> {
        let mut entries = self.motion.net().checkpoint_entries("motion");
        entries.extend(self.generator.net().checkpoint_entries("generator"));
        if let EvolutionVariant::Conv(p) = &self.evolution.variant {
            entries.extend(p.checkpoint_entries("evolve"));
        }
        entries
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path.as_ref(), &self.checkpoint_entries())
    }

    /// Rebuilds a model from a checkpoint. The architecture is inferred
    /// from the stored shapes; `evolution` supplies the evolution rule,
    /// and a conv variant's weights are overwritten from the checkpoint's
    /// `evolve.*` entries.
    pub fn load(path: impl AsRef<Path>, evolution: EvolutionConfig) -> Result<Self> {
        let entries = load_checkpoint(path.as_ref())?;
        let enc1 = entries
            .iter()
            .find(|(name, _)| name == "motion.enc1.weight")
            .ok_or_else(|| Error::data("checkpoint has no motion.enc1.weight entry"))?;
        let shape = enc1.1.shape();
        if shape.len() != 4 {
            return Err(Error::data(format!(
                "motion.enc1.weight must be rank 4, got {shape:?}"
            )));
        }
        let (base_channels, window) = (shape[0], shape[1]);
        let mut model = PredictorModel::new(window, base_channels, evolution, 0)?;
        model
            .motion
            .net_mut()
            .load_checkpoint_entries("motion", &entries)?;
        model
            .generator
            .net_mut()
            .load_checkpoint_entries("generator", &entries)?;
        if let EvolutionVariant::Conv(p) = &mut model.evolution.variant {
            p.load_checkpoint_entries("evolve", &entries)?;
        }
        Ok(model)
    }

    /// The learned motion estimator, for rollout.
    pub fn net_estimator(&self) -> NetEstimator {
        NetEstimator {
            net: self.motion.clone(),
        }
    }

    /// The learned refiner, for rollout.
    pub fn net_refiner(&self) -> NetRefiner {
        NetRefiner {
            net: self.generator.clone(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut params = self.motion.net_mut().params_mut();
        params.extend(self.generator.net_mut().params_mut());
        if let EvolutionVariant::Conv(p) = &mut self.evolution.variant {
            params.extend(p.params_mut());
        }
        params
    }

    fn param_snapshot(&self) -> Vec<Tensor> {
        self.checkpoint_entries().into_iter().map(|(_, t)| t).collect()
    }

    fn restore(&mut self, snapshot: &[Tensor]) {
        for (p, s) in self.params_mut().into_iter().zip(snapshot) {
            p.data_mut().copy_from_slice(s.data());
        }
    }
}

/// Which stage supplies per-step motion during training.
#[derive(Clone, Debug)]
pub enum MotionSource {
    /// The trainable motion head; its parameters receive gradients.
    Net,
    /// A per-step variational solve on the window's newest frame pair. The
    /// solve is not differentiated through, so the motion head is left
    /// untouched and only downstream stages learn.
    Variational(VariationalConfig),
}

/// Training hyperparameters and the rollout geometry.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub loss: LossConfig,
    pub kernel: KernelConfig,
    pub thresholds: MaskThresholds,
    pub splat: SplatMode,
    /// Input frames per sample; must match the motion head's window.
    pub window: usize,
    /// Rollout steps per sample.
    pub horizon: usize,
    /// Where per-step flows come from.
    pub motion: MotionSource,
    /// Shuffle seed.
    pub seed: u64,
    /// Train and apply the refinement head; when false the loss reads the
    /// propagated frame and only the physical stage learns.
    pub use_generator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 1,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            loss: LossConfig::default(),
            kernel: KernelConfig::default(),
            thresholds: MaskThresholds::default(),
            splat: SplatMode::Bilinear,
            window: 2,
            horizon: 4,
            motion: MotionSource::Net,
            seed: 0,
            use_generator: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("training needs at least one epoch"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        if self.window == 0 || self.horizon == 0 {
            return Err(Error::config("window and horizon must be positive"));
        }
        if matches!(self.motion, MotionSource::Variational(_)) && self.window < 2 {
            return Err(Error::config(
                "variational motion needs a window of at least two frames",
            ));
        }
        self.loss.validate()
    }
}

/// What a training run produced.
#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Mean sample loss per completed epoch.
    pub epoch_loss: Vec<f64>,
    /// Epoch at which a non-finite loss appeared; the model was rolled
    /// back to the last parameters that evaluated finite.
    pub diverged_at: Option<usize>,
}

/// Adaptive-moment descent state, one slot per trainable tensor.
struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    fn new(params: &[&mut Tensor]) -> Self {
        Adam {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    /// One update from `grads` pre-multiplied by `scale`.
    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], scale: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                let gs = gv * scale;
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gs;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gs * gs;
                *pv -= cfg.learning_rate * (*mv / bc1) / ((*vv / bc2).sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Loss and flat parameter gradients for one sample (a `window + horizon`
/// frame slice). A non-finite step loss short-circuits: the caller sees the
/// non-finite total and zero gradients.
fn sample_pass(
    model: &PredictorModel,
    frames: &[ScalarField],
    cfg: &TrainConfig,
    stencil: &Rc<KernelStencil>,
    delta: &Rc<KernelStencil>,
) -> Result<(f64, Vec<Tensor>)> {
    let zero_grads = |model: &PredictorModel| {
        model
            .checkpoint_entries()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect::<Vec<_>>()
    };
    let mut tape = Tape::new();
    let anchor = tape.constant(Tensor::from_field(&frames[cfg.window - 1]));
    let mut window: Vec<ScalarField> = frames[..cfg.window].to_vec();
    let mut state: Option<(NodeId, NodeId)> = None;
    let mut motion_wirings = Vec::with_capacity(cfg.horizon);
    let mut generator_wirings = Vec::new();
    let mut evolve_wirings = Vec::new();
    let mut step_totals = Vec::with_capacity(cfg.horizon);

    for step in 0..cfg.horizon {
        let dw = match &cfg.motion {
            MotionSource::Net => {
                let input = tape.constant(stack_frames(&window)?);
                let wired = model.motion.net().wire(&mut tape, input, true)?;
                let dw = wired.output;
                motion_wirings.push(wired);
                dw
            }
            MotionSource::Variational(vcfg) => {
                let prev = &window[window.len() - 2];
                let next = &window[window.len() - 1];
                let flow = estimate_variational(prev, next, vcfg, &cfg.kernel)?.flow;
                tape.constant(Tensor::from_flow(&flow))
            }
        };

        let (composed, carry) = match state {
            None => (dw, dw),
            Some((prev_composed, prev_carry)) => {
                let carry = match &model.evolution.variant {
                    EvolutionVariant::Momentum { beta } => {
                        let scaled = tape.scale(dw, 1.0 - beta);
                        tape.add_scaled(scaled, prev_carry, *beta)
                    }
                    EvolutionVariant::Conv(params) => {
                        let warped = tape.advect(prev_carry, dw, delta.clone(), 0.0);
                        let cat = tape.concat_c(&[dw, warped]);
                        let wired = params.wire(&mut tape, cat, true)?;
                        let out = wired.output;
                        evolve_wirings.push(wired);
                        out
                    }
                };
                let warped = tape.advect(prev_composed, dw, delta.clone(), 0.0);
                (tape.add(carry, warped), carry)
            }
        };
        state = Some((composed, carry));

        let composed_flow = tape.value(composed).to_flow();
        let energy = splat_energy(&composed_flow, cfg.splat);
        let mask = conflict_mask(&energy, &cfg.thresholds)?;
        let weights = Rc::new(mask_weights(&mask, cfg.loss.alpha));

        let propagated = tape.advect(anchor, composed, stencil.clone(), cfg.kernel.padding.value);
        let pred = if cfg.use_generator {
            let mask_node = tape.constant(Tensor::from_field(mask.grid()));
            let cat = tape.concat_c(&[propagated, mask_node]);
            let wired = model.generator.net().wire(&mut tape, cat, true)?;
            let out = wired.output;
            generator_wirings.push(wired);
            out
        } else {
            propagated
        };

        let target = tape.constant(Tensor::from_field(&frames[cfg.window + step]));
        let err = tape.sub(pred, target);
        let mask_term = tape.weighted_mean_sq(err, weights);
        let div = tape.divergence(dw);
        let div_term = tape.spatial_mean_sq(div);
        let grad = tape.spatial_grad(dw);
        let smooth_term = tape.spatial_mean_sq(grad);
        let total = tape.weighted_sum(&[
            (mask_term, cfg.loss.lambda_lp),
            (div_term, cfg.loss.lambda_div),
            (smooth_term, cfg.loss.lambda_smooth),
        ]);
        if !tape.scalar(total).is_finite() {
            return Ok((tape.scalar(total), zero_grads(model)));
        }
        step_totals.push((total, 1.0 / cfg.horizon as f64));

        let refined = if cfg.use_generator {
            tape.value(pred).to_field()
        } else {
            InpaintRefiner.refine(&tape.value(propagated).to_field(), &mask)?
        };
        window.remove(0);
        window.push(refined);
    }

    let root = tape.weighted_sum(&step_totals);
    let loss = tape.scalar(root);
    let grads = tape.backward(root);
    let mut flat = zero_grads(model);

    let mut accumulate = |wirings: &[crate::net::WiredNet], offset: usize| {
        for wired in wirings {
            for (j, &pid) in wired.params.iter().enumerate() {
                if let Some(g) = grads.get(pid) {
                    for (acc, gv) in flat[offset + j].data_mut().iter_mut().zip(g.data()) {
                        *acc += gv;
                    }
                }
            }
        }
    };
    accumulate(&motion_wirings, 0);
    accumulate(&generator_wirings, 14);
    accumulate(&evolve_wirings, 28);
    Ok((loss, flat))
}

/// Runs seeded mini-batch training, returning the per-epoch loss history.
/// A non-finite batch loss aborts the run and restores the newest
/// parameters that still evaluated to a finite loss.
pub fn train(model: &mut PredictorModel, data: &[&Sequence], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    model.evolution.validate()?;
    if cfg.window != model.motion.window() {
        return Err(Error::config(format!(
            "config window {} does not match the motion head's window {}",
            cfg.window,
            model.motion.window()
        )));
    }
    if matches!(cfg.motion, MotionSource::Variational(_))
        && !cfg.use_generator
        && !matches!(model.evolution.variant, EvolutionVariant::Conv(_))
    {
        return Err(Error::config(
            "nothing to train: variational motion with the inpainting refiner leaves no learnable stage",
        ));
    }
    let need = cfg.window + cfg.horizon;
    let mut samples: Vec<(usize, usize)> = Vec::new();
    for (i, seq) in data.iter().enumerate() {
        if seq.len() >= need {
            samples.extend((0..=seq.len() - need).map(|off| (i, off)));
        }
    }
    if samples.is_empty() {
        return Err(Error::data(format!(
            "no training windows: every sequence is shorter than {need} frames"
        )));
    }

    let stencil = Rc::new(gaussian_kernel(&cfg.kernel)?);
    let delta = Rc::new(gaussian_kernel(&KernelConfig::delta())?);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params_mut());
    let mut last_good = model.param_snapshot();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut diverged_at = None;

    'epochs: for epoch in 0..cfg.epochs {
        samples.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in samples.chunks(cfg.batch_size) {
            let mut batch_total = 0.0;
            let mut grads: Vec<Tensor> = model
                .checkpoint_entries()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect();
            for &(i, off) in batch {
                let frames = &data[i].frames()[off..off + need];
                let (loss, sample_grads) = sample_pass(model, frames, cfg, &stencil, &delta)?;
                batch_total += loss;
                for (acc, g) in grads.iter_mut().zip(&sample_grads) {
                    for (a, gv) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += gv;
                    }
                }
            }
            if !batch_total.is_finite() {
                model.restore(&last_good);
                diverged_at = Some(epoch);
                break 'epochs;
            }
            last_good = model.param_snapshot();
            let scale = 1.0 / batch.len() as f64;
            adam.step(&mut model.params_mut(), &grads, scale, cfg);
            epoch_total += batch_total;
        }
        if diverged_at.is_none() {
            epoch_loss.push(epoch_total / samples.len() as f64);
        }
    }
    Ok(TrainReport {
        epoch_loss,
        diverged_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_sequence, Blob, FlowProgram, SynthSpec};
    use crate::evolve::ConvEvolveParams;

    fn training_sequence(frames: usize) -> Sequence {
        let spec = SynthSpec {
            height: 16,
            width: 16,
            blobs: vec![Blob {
                cy: 7.5,
                cx: 6.8,
                amplitude: 1.0,
                sigma: 1.2,
            }],
            flow: FlowProgram::Constant { u: 0.4, v: 0.2 },
            kappa: 0.0,
            frames,
            noise_sigma: 0.0,
        };
        synth_sequence(&spec, 3).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 5,
            horizon: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_reduces_the_loss_on_one_sequence() {
        let seq = training_sequence(4);
        let mut model =
            PredictorModel::new(2, 6, EvolutionConfig::default(), 11).unwrap();
        let cfg = TrainConfig {
            epochs: 60,
            horizon: 2,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &[&seq], &cfg).unwrap();
        assert_eq!(report.epoch_loss.len(), 60);
        assert!(report.diverged_at.is_none());
        let first = report.epoch_loss[0];
        let best = report.epoch_loss.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(
            best < 0.5 * first,
            "loss should at least halve: start {first}, best {best}"
        );
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let seq = training_sequence(4);
        let mut model =
            PredictorModel::new(2, 4, EvolutionConfig::default(), 1).unwrap();
        let before = model.param_snapshot();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..small_config()
        };
        let report = train(&mut model, &[&seq], &cfg).unwrap();
        for (b, a) in before.iter().zip(model.param_snapshot()) {
            assert_eq!(b.data(), a.data());
        }
        for pair in report.epoch_loss.windows(2) {
            assert_eq!(pair[0], pair[1]);
        }
    }

    #[test]
    fn identical_seeds_reproduce_the_run_bitwise() {
        let seq = training_sequence(5);
        let cfg = small_config();
        let run = || {
            let mut model =
                PredictorModel::new(2, 4, EvolutionConfig::momentum(0.5).unwrap(), 7).unwrap();
            let report = train(&mut model, &[&seq], &cfg).unwrap();
            (report.epoch_loss, model.param_snapshot())
        };
        let (loss_a, params_a) = run();
        let (loss_b, params_b) = run();
        assert_eq!(loss_a, loss_b);
        for (a, b) in params_a.iter().zip(&params_b) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn disabled_generator_trains_only_the_physical_stage() {
        let seq = training_sequence(4);
        let mut model =
            PredictorModel::new(2, 4, EvolutionConfig::default(), 5).unwrap();
        let generator_before: Vec<Tensor> = model
            .generator
            .net()
            .checkpoint_entries("g")
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        let motion_before: Vec<Tensor> = model
            .motion
            .net()
            .checkpoint_entries("m")
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        let cfg = TrainConfig {
            use_generator: false,
            ..small_config()
        };
        train(&mut model, &[&seq], &cfg).unwrap();
        for ((_, after), before) in model
            .generator
            .net()
            .checkpoint_entries("g")
            .iter()
            .zip(&generator_before)
        {
            assert_eq!(after.data(), before.data(), "generator must stay frozen");
        }
        let moved = model
            .motion
            .net()
            .checkpoint_entries("m")
            .iter()
            .zip(&motion_before)
            .any(|((_, after), before)| after.data() != before.data());
        assert!(moved, "motion head should have moved");
    }

    #[test]
    fn variational_motion_trains_only_the_generator() {
        let seq = training_sequence(4);
        let mut model =
            PredictorModel::new(2, 4, EvolutionConfig::default(), 7).unwrap();
        let motion_before: Vec<Tensor> = model
            .motion
            .net()
            .checkpoint_entries("m")
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        let generator_before: Vec<Tensor> = model
            .generator
            .net()
            .checkpoint_entries("g")
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        let cfg = TrainConfig {
            motion: MotionSource::Variational(VariationalConfig {
                iterations: 30,
                ..VariationalConfig::default()
            }),
            ..small_config()
        };
        let report = train(&mut model, &[&seq], &cfg).unwrap();
        assert!(report.diverged_at.is_none());
        for ((_, after), before) in model
            .motion
            .net()
            .checkpoint_entries("m")
            .iter()
            .zip(&motion_before)
        {
            assert_eq!(after.data(), before.data(), "motion head must stay frozen");
        }
        let moved = model
            .generator
            .net()
            .checkpoint_entries("g")
            .iter()
            .zip(&generator_before)
            .any(|((_, after), before)| after.data() != before.data());
        assert!(moved, "generator should have moved");

        let frozen = TrainConfig {
            motion: MotionSource::Variational(VariationalConfig::default()),
            use_generator: false,
            ..small_config()
        };
        let err = train(&mut model, &[&seq], &frozen).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "got {err:?}");
    }

    #[test]
    fn conv_evolution_parameters_receive_updates() {
        let seq = training_sequence(5);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let evolution = EvolutionConfig::conv(ConvEvolveParams::new(4, &mut rng).unwrap());
        let mut model = PredictorModel::new(2, 4, evolution, 9).unwrap();
        let before: Vec<Tensor> = match &model.evolution.variant {
            EvolutionVariant::Conv(p) => p
                .checkpoint_entries("e")
                .into_iter()
                .map(|(_, t)| t)
                .collect(),
            _ => unreachable!(),
        };
        let cfg = TrainConfig {
            epochs: 3,
            horizon: 3,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &[&seq], &cfg).unwrap();
        assert!(report.diverged_at.is_none());
        let moved = match &model.evolution.variant {
            EvolutionVariant::Conv(p) => p
                .checkpoint_entries("e")
                .iter()
                .zip(&before)
                .any(|((_, after), b)| after.data() != b.data()),
            _ => unreachable!(),
        };
        assert!(moved, "conv evolution weights should have moved");
    }

    #[test]
    fn divergence_restores_the_last_finite_parameters() {
        let seq = training_sequence(4);
        let mut model =
            PredictorModel::new(2, 4, EvolutionConfig::default(), 3).unwrap();
        let initial = model.param_snapshot();
        let cfg = TrainConfig {
            learning_rate: 1e200,
            epochs: 10,
            horizon: 2,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &[&seq], &cfg).unwrap();
        let at = report.diverged_at.expect("run must diverge");
        assert!(at >= 1, "initial parameters evaluate finite");
        assert_eq!(report.epoch_loss.len(), at);
        for (a, b) in model.param_snapshot().iter().zip(&initial) {
            if at == 1 {
                assert_eq!(a.data(), b.data(), "first-epoch revert lands on the init");
            }
            assert!(a.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn checkpoint_round_trip_restores_the_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fckp");
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let evolution = EvolutionConfig::conv(ConvEvolveParams::new(3, &mut rng).unwrap());
        let model = PredictorModel::new(3, 5, evolution, 21).unwrap();
        model.save(&path).unwrap();

        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let fresh_evolution = EvolutionConfig::conv(ConvEvolveParams::new(3, &mut rng).unwrap());
        let loaded = PredictorModel::load(&path, fresh_evolution).unwrap();
        assert_eq!(loaded.motion.window(), 3);
        for ((na, a), (nb, b)) in model
            .checkpoint_entries()
            .iter()
            .zip(loaded.checkpoint_entries().iter())
        {
            assert_eq!(na, nb);
            let worst = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(worst <= 1e-6, "{na} drifted by {worst} through the f32 file");
        }

        // Momentum evolution ignores any stored conv weights.
        let plain = PredictorModel::load(&path, EvolutionConfig::momentum(0.9).unwrap()).unwrap();
        assert!(matches!(
            plain.evolution.variant,
            EvolutionVariant::Momentum { .. }
        ));
    }

    #[test]
    fn config_and_data_preconditions_are_enforced() {
        let seq = training_sequence(4);
        let mut model =
            PredictorModel::new(2, 4, EvolutionConfig::default(), 1).unwrap();

        let mut cfg = small_config();
        cfg.epochs = 0;
        assert!(train(&mut model, &[&seq], &cfg).is_err());

        let mut cfg = small_config();
        cfg.window = 3;
        assert!(train(&mut model, &[&seq], &cfg).is_err());

        let cfg = TrainConfig {
            horizon: 5,
            ..small_config()
        };
        assert!(train(&mut model, &[&seq], &cfg).is_err(), "4 frames cannot feed 2+5");

        assert!(train(&mut model, &[], &small_config()).is_err());
    }
}
