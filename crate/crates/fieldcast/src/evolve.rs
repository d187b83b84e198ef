//! Motion-field time evolution and the anchored rollout.
//!
//! Multi-step prediction keeps two flows: the interval carry (the evolving
//! one-step motion, updated by a momentum rule or a small conv stack) and
//! the composed flow from the last observed frame to the current step.
//! Every predicted frame is warped directly from that last observed frame
//! through the composed flow, so each prediction undergoes exactly one
//! interpolation no matter how far out it sits.


use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::estimate::MotionEstimator;
use crate::field::{ScalarField, Sequence, VectorField};
use crate::mask::{conflict_mask, splat_energy, ConflictMask, MaskThresholds, SplatMode};
use crate::net::{Conv2d, WiredNet};
use crate::refine::Refiner;
use crate::tape::{NodeId, Tape, Tensor};
use crate::warp::{advect, warp_flow, KernelConfig};

/// Parameters of the conv evolution stack: two same-padded 3x3 convolutions
/// with ReLU and a linear 1x1 head, mapping the concatenation of the new
/// interval flow and the warped carry (4 channels) back to a flow (2
/// channels).
#[derive(Clone, Debug)]
pub struct ConvEvolveParams {
    conv1: Conv2d,
    conv2: Conv2d,
    head: Conv2d,
    hidden: usize,
}

impl ConvEvolveParams {
    pub fn new(hidden: usize, rng: &mut ChaCha20Rng) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::config("conv evolution hidden width must be positive"));
        }
        Ok(ConvEvolveParams {
            conv1: Conv2d::new(4, hidden, 3, 1, rng),
            conv2: Conv2d::new(hidden, hidden, 3, 1, rng),
            head: Conv2d::new(hidden, 2, 1, 1, rng),
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Parameters in checkpoint order.
    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("conv1.weight", &self.conv1.weight),
            ("conv1.bias", &self.conv1.bias),
            ("conv2.weight", &self.conv2.weight),
            ("conv2.bias", &self.conv2.bias),
            ("head.weight", &self.head.weight),
            ("head.bias", &self.head.bias),
        ]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }

    pub fn checkpoint_entries(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.named_params()
            .into_iter()
            .map(|(name, t)| (format!("{prefix}.{name}"), t.clone()))
            .collect()
    }

    pub fn load_checkpoint_entries(&mut self, prefix: &str, entries: &[(String, Tensor)]) -> Result<()> {
        let names: Vec<String> = self
            .named_params()
            .iter()
            .map(|(n, _)| format!("{prefix}.{n}"))
            .collect();
        for (name, param) in names.iter().zip(self.params_mut()) {
            let found = entries
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::data(format!("checkpoint is missing parameter {name}")))?;
            if found.1.shape() != param.shape() {
                return Err(Error::data(format!(
                    "checkpoint parameter {name} has shape {:?}, expected {:?}",
                    found.1.shape(),
                    param.shape()
                )));
            }
            param.data_mut().copy_from_slice(found.1.data());
        }
        Ok(())
    }

    /// Wires the stack onto `tape` from a `[4, h, w]` input node.
    pub fn wire(&self, tape: &mut Tape, input: NodeId, trainable: bool) -> Result<WiredNet> {
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 3 || shape[0] != 4 {
            return Err(Error::data(format!(
                "conv evolution expects a [4, h, w] input, got {shape:?}"
            )));
        }
        let mut params = Vec::with_capacity(6);
        let mut push = |tape: &mut Tape, t: &Tensor| {
            let id = if trainable {
                tape.leaf(t.clone(), true)
            } else {
                tape.constant(t.clone())
            };
            params.push(id);
            id
        };
        let (w1, b1) = (push(tape, &self.conv1.weight), push(tape, &self.conv1.bias));
        let (w2, b2) = (push(tape, &self.conv2.weight), push(tape, &self.conv2.bias));
        let (w3, b3) = (push(tape, &self.head.weight), push(tape, &self.head.bias));
        let c1 = tape.conv(input, w1, b1, 1);
        let r1 = tape.relu(c1);
        let c2 = tape.conv(r1, w2, b2, 1);
        let r2 = tape.relu(c2);
        let output = tape.conv(r2, w3, b3, 1);
        Ok(WiredNet { params, output })
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let wired = self.wire(&mut tape, x, false)?;
        Ok(tape.value(wired.output).clone())
    }
}

/// Which rule evolves the interval carry between steps.
#[derive(Clone, Debug)]
pub enum EvolutionVariant {
    /// Convex combination `(1 - beta) * dw + beta * carry`.
    Momentum { beta: f64 },
    /// Learned update from the new flow and the warped carry.
    Conv(ConvEvolveParams),
}

/// Evolution settings; only first-order evolution (one carried flow) is
/// supported.
#[derive(Clone, Debug)]
pub struct EvolutionConfig {
    pub order: usize,
    pub variant: EvolutionVariant,
}

impl EvolutionConfig {
    pub fn momentum(beta: f64) -> Result<Self> {
        let cfg = EvolutionConfig {
            order: 1,
            variant: EvolutionVariant::Momentum { beta },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn conv(params: ConvEvolveParams) -> Self {
        EvolutionConfig {
            order: 1,
            variant: EvolutionVariant::Conv(params),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.order != 1 {
            return Err(Error::config(format!(
                "only first-order evolution is supported, got order {}",
                self.order
            )));
        }
        if let EvolutionVariant::Momentum { beta } = self.variant {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::config(format!(
                    "momentum coefficient must lie in [0, 1), got {beta}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            order: 1,
            variant: EvolutionVariant::Momentum { beta: 0.0 },
        }
    }
}

/// Momentum update of the carry: `(1 - beta) * dw + beta * carry`,
/// elementwise. Accepts the closed interval `[0, 1]`: `beta = 1` freezes
/// the carry at the first interval flow.
pub fn evolve_momentum(carry: &VectorField, dw: &VectorField, beta: f64) -> Result<VectorField> {
    carry.expect_shape(dw.shape())?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config(format!(
            "momentum coefficient must lie in [0, 1], got {beta}"
        )));
    }
    let (h, w) = carry.shape();
    Ok(VectorField::from_fn(h, w, |y, x| {
        (
            (1.0 - beta) * dw.u(y, x) + beta * carry.u(y, x),
            (1.0 - beta) * dw.v(y, x) + beta * carry.v(y, x),
        )
    }))
}

/// Conv update of the carry: the stack applied to `dw` concatenated with
/// `warp_flow(carry, dw)`.
pub fn evolve_conv(carry: &VectorField, dw: &VectorField, params: &ConvEvolveParams) -> Result<VectorField> {
    carry.expect_shape(dw.shape())?;
    let warped = warp_flow(carry, dw)?;
    let input = stack_flows(dw, &warped);
    Ok(params.forward(&input)?.to_flow())
}

/// `[4, h, w]` tensor holding `a`'s components then `b`'s.
fn stack_flows(a: &VectorField, b: &VectorField) -> Tensor {
    let (h, w) = a.shape();
    let mut data = Vec::with_capacity(4 * h * w);
    data.extend_from_slice(a.u_data());
    data.extend_from_slice(a.v_data());
    data.extend_from_slice(b.u_data());
    data.extend_from_slice(b.v_data());
    Tensor::from_data(&[4, h, w], data)
}

/// Rollout state after composing some number of interval flows.
#[derive(Clone, Debug)]
pub struct EvolutionState {
    /// Flow from the last observed frame to the current prediction.
    composed: VectorField,
    /// The evolving interval carry.
    carry: VectorField,
    /// Zero-based index of the last composed step.
    step: usize,
}

impl EvolutionState {
    /// State after the first interval flow: both the composed flow and the
    /// carry are that flow.
    pub fn first(dw: VectorField) -> Self {
        EvolutionState {
            composed: dw.clone(),
            carry: dw,
            step: 0,
        }
    }

    pub fn composed(&self) -> &VectorField {
        &self.composed
    }

    pub fn carry(&self) -> &VectorField {
        &self.carry
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

/// Advances the state by one interval flow: the carry evolves first, then
/// the composed flow is rebuilt as `carry + warp_flow(composed, dw)`.
pub fn compose_step(state: &EvolutionState, dw: &VectorField, cfg: &EvolutionConfig) -> Result<EvolutionState> {
    cfg.validate()?;
    dw.expect_shape(state.composed.shape())?;
    let carry = match &cfg.variant {
        EvolutionVariant::Momentum { beta } => evolve_momentum(&state.carry, dw, *beta)?,
        EvolutionVariant::Conv(params) => evolve_conv(&state.carry, dw, params)?,
    };
    let warped = warp_flow(&state.composed, dw)?;
    let (h, w) = carry.shape();
    let composed = VectorField::from_fn(h, w, |y, x| {
        (
            carry.u(y, x) + warped.u(y, x),
            carry.v(y, x) + warped.v(y, x),
        )
    });
    Ok(EvolutionState {
        composed,
        carry,
        step: state.step + 1,
    })
}

/// Everything produced for one prediction step.
#[derive(Clone, Debug)]
pub struct RolloutStep {
    /// The estimator's interval flow for this step.
    pub flow: VectorField,
    /// Evolution state after composing that flow.
    pub state: EvolutionState,
    /// Confidence mask of the composed flow.
    pub mask: ConflictMask,
    /// The anchor frame warped through the composed flow.
    pub propagated: ScalarField,
    /// The refiner's output; appended to the sliding window.
    pub refined: ScalarField,
}

/// Settings shared by every step of a rollout.
#[derive(Clone, Debug)]
pub struct RolloutConfig {
    pub evolution: EvolutionConfig,
    pub kernel: KernelConfig,
    pub thresholds: MaskThresholds,
    pub splat: SplatMode,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            evolution: EvolutionConfig::default(),
            kernel: KernelConfig::default(),
            thresholds: MaskThresholds::default(),
            splat: SplatMode::Bilinear,
        }
    }
}

/// An in-progress rollout: the anchor frame, the sliding window feeding the
/// estimator, and the evolution state. Each [`step`](Rollout::step) warps
/// the anchor — never a predicted frame — through the composed flow.
pub struct Rollout<'a> {
    estimator: &'a dyn MotionEstimator,
    refiner: &'a dyn Refiner,
    cfg: &'a RolloutConfig,
    anchor: ScalarField,
    window: Vec<ScalarField>,
    state: Option<EvolutionState>,
}

impl<'a> Rollout<'a> {
    pub fn new(
        inputs: &Sequence,
        estimator: &'a dyn MotionEstimator,
        refiner: &'a dyn Refiner,
        cfg: &'a RolloutConfig,
    ) -> Result<Self> {
        cfg.evolution.validate()?;
        let window = inputs.frames().to_vec();
        let anchor = window.last().ok_or(Error::EmptySequence)?.clone();
        Ok(Rollout {
            estimator,
            refiner,
            cfg,
            anchor,
            window,
            state: None,
        })
    }

    /// Rebuilds a rollout mid-flight from its Markov state: the anchor, the
    /// current window, and the evolution state (if any step was taken).
    pub fn resume(
        anchor: ScalarField,
        window: Vec<ScalarField>,
        state: Option<EvolutionState>,
        estimator: &'a dyn MotionEstimator,
        refiner: &'a dyn Refiner,
        cfg: &'a RolloutConfig,
    ) -> Result<Self> {
        cfg.evolution.validate()?;
        if window.is_empty() {
            return Err(Error::EmptySequence);
        }
        for f in &window {
            anchor.expect_same_shape(f)?;
        }
        Ok(Rollout {
            estimator,
            refiner,
            cfg,
            anchor,
            window,
            state,
        })
    }

    pub fn window(&self) -> &[ScalarField] {
        &self.window
    }

    pub fn state(&self) -> Option<&EvolutionState> {
        self.state.as_ref()
    }

    /// Runs one prediction step and appends the refined frame to the
    /// window.
    pub fn step(&mut self) -> Result<RolloutStep> {
        let flow = self.estimator.estimate(&self.window)?;
        flow.expect_shape(self.anchor.shape())?;
        let state = match &self.state {
            None => EvolutionState::first(flow.clone()),
            Some(prev) => compose_step(prev, &flow, &self.cfg.evolution)?,
        };
        let propagated = advect(&self.anchor, state.composed(), &self.cfg.kernel)?;
        let energy = splat_energy(state.composed(), self.cfg.splat);
        let mask = conflict_mask(&energy, &self.cfg.thresholds)?;
        let refined = self.refiner.refine(&propagated, &mask)?;

        self.window.remove(0);
        self.window.push(refined.clone());
        self.state = Some(state.clone());
        Ok(RolloutStep {
            flow,
            state,
            mask,
            propagated,
            refined,
        })
    }
}

/// Runs `horizon` anchored prediction steps.
pub fn rollout(
    inputs: &Sequence,
    estimator: &dyn MotionEstimator,
    refiner: &dyn Refiner,
    horizon: usize,
    cfg: &RolloutConfig,
) -> Result<Vec<RolloutStep>> {
    if horizon == 0 {
        return Err(Error::config("rollout horizon must be at least 1"));
    }
    let mut roller = Rollout::new(inputs, estimator, refiner, cfg)?;
    (0..horizon).map(|_| roller.step()).collect()
}

/// Baseline that re-warps the previous prediction each step (so blur and
/// interpolation error accumulate): `frame_k = advect(frame_{k-1}, dw_k)`.
/// The estimator sees the same sliding window as [`rollout`].
pub fn chained_rollout(
    inputs: &Sequence,
    estimator: &dyn MotionEstimator,
    horizon: usize,
    kernel: &KernelConfig,
) -> Result<Vec<ScalarField>> {
    if horizon == 0 {
        return Err(Error::config("rollout horizon must be at least 1"));
    }
    let mut window = inputs.frames().to_vec();
    if window.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let dw = estimator.estimate(&window)?;
        let prev = window.last().expect("window stays non-empty");
        let frame = advect(prev, &dw, kernel)?;
        window.remove(0);
        window.push(frame.clone());
        out.push(frame);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refine::InpaintRefiner;
    use rand::{Rng, SeedableRng};

    /// Estimator that always returns a fixed flow.
    struct ConstFlow(VectorField);

    impl MotionEstimator for ConstFlow {
        fn estimate(&self, _window: &[ScalarField]) -> Result<VectorField> {
            Ok(self.0.clone())
        }
    }

    fn blob(h: usize, w: usize, cy: f64, cx: f64, sigma: f64) -> ScalarField {
        ScalarField::from_fn(h, w, |y, x| {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
    }

    fn rng_flow(rng: &mut ChaCha20Rng, h: usize, w: usize) -> VectorField {
        VectorField::from_fn(h, w, |_, _| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn momentum_extremes_select_an_input() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let carry = rng_flow(&mut rng, 5, 5);
        let dw = rng_flow(&mut rng, 5, 5);
        let zero = evolve_momentum(&carry, &dw, 0.0).unwrap();
        assert_eq!(zero.u_data(), dw.u_data());
        assert_eq!(zero.v_data(), dw.v_data());
        let one = evolve_momentum(&carry, &dw, 1.0).unwrap();
        assert_eq!(one.u_data(), carry.u_data());
        assert_eq!(one.v_data(), carry.v_data());
    }

    #[test]
    fn momentum_mixes_uniform_fields_linearly() {
        let carry = VectorField::uniform(3, 3, 1.0, 1.0);
        let dw = VectorField::zeros(3, 3);
        let out = evolve_momentum(&carry, &dw, 0.9).unwrap();
        for v in out.u_data().iter().chain(out.v_data()) {
            assert!((v - 0.9).abs() < 1e-15);
        }
    }

    #[test]
    fn momentum_output_stays_inside_the_input_envelope() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..50 {
            let carry = rng_flow(&mut rng, 6, 6);
            let dw = rng_flow(&mut rng, 6, 6);
            let beta: f64 = rng.gen_range(0.0..=1.0);
            let out = evolve_momentum(&carry, &dw, beta).unwrap();
            for y in 0..6 {
                for x in 0..6 {
                    for (o, a, b) in [
                        (out.u(y, x), carry.u(y, x), dw.u(y, x)),
                        (out.v(y, x), carry.v(y, x), dw.v(y, x)),
                    ] {
                        assert!(o >= a.min(b) - 1e-12 && o <= a.max(b) + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_evolution_with_zero_weights_returns_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut params = ConvEvolveParams::new(4, &mut rng).unwrap();
        for p in params.params_mut() {
            p.data_mut().fill(0.0);
        }
        let carry = rng_flow(&mut rng, 6, 6);
        let dw = rng_flow(&mut rng, 6, 6);
        let out = evolve_conv(&carry, &dw, &params).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    /// Builds conv parameters that compute the identity on the first two
    /// input channels: conv1 splits each channel into its positive and
    /// negative parts (so ReLU passes both), conv2 forwards them, and the
    /// 1x1 head recombines `relu(x) - relu(-x) = x` for the dw channels.
    fn passthrough_params() -> ConvEvolveParams {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut params = ConvEvolveParams::new(8, &mut rng).unwrap();
        for p in params.params_mut() {
            p.data_mut().fill(0.0);
        }
        {
            let mut mutable = params.params_mut();
            let w1 = &mut mutable[0];
            for i in 0..4 {
                let center = 4; // middle tap of the row-major 3x3 kernel
                let plus = ((i * 4 + i) * 9) + center;
                let minus = (((i + 4) * 4 + i) * 9) + center;
                w1.data_mut()[plus] = 1.0;
                w1.data_mut()[minus] = -1.0;
            }
            let w2 = &mut mutable[2];
            for c in 0..8 {
                w2.data_mut()[(c * 8 + c) * 9 + 4] = 1.0;
            }
            let w3 = &mut mutable[4];
            w3.data_mut()[0] = 1.0; // out0 <- +part of channel 0
            w3.data_mut()[4] = -1.0; // out0 <- -part of channel 0
            w3.data_mut()[8 + 1] = 1.0;
            w3.data_mut()[8 + 5] = -1.0;
        }
        params
    }

    #[test]
    fn conv_evolution_passthrough_weights_reproduce_dw() {
        let params = passthrough_params();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let carry = rng_flow(&mut rng, 6, 6);
        let dw = rng_flow(&mut rng, 6, 6);
        let out = evolve_conv(&carry, &dw, &params).unwrap();
        for (o, d) in out.u_data().iter().zip(dw.u_data()) {
            assert!((o - d).abs() < 1e-12);
        }
        for (o, d) in out.v_data().iter().zip(dw.v_data()) {
            assert!((o - d).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_evolution_matches_a_naive_convolution_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let params = ConvEvolveParams::new(3, &mut rng).unwrap();
        let carry = rng_flow(&mut rng, 4, 4);
        let dw = rng_flow(&mut rng, 4, 4);
        let out = evolve_conv(&carry, &dw, &params).unwrap();

        // Independent re-computation: same-padded direct convolution.
        let conv = |input: &[Vec<Vec<f64>>], weight: &Tensor, bias: &Tensor, k: usize| {
            let (h, w) = (input[0].len(), input[0][0].len());
            let co = bias.numel();
            let ci = input.len();
            let pad = (k - 1) / 2;
            let mut out = vec![vec![vec![0.0; w]; h]; co];
            for oc in 0..co {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = bias.data()[oc];
                        for ic in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = y as isize + ky as isize - pad as isize;
                                    let ix = x as isize + kx as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += weight.data()[((oc * ci + ic) * k + ky) * k + kx]
                                        * input[ic][iy as usize][ix as usize];
                                }
                            }
                        }
                        out[oc][y][x] = acc;
                    }
                }
            }
            out
        };
        let to_rows = |data: &[f64], h: usize, w: usize| -> Vec<Vec<f64>> {
            (0..h).map(|y| data[y * w..(y + 1) * w].to_vec()).collect()
        };
        let warped = warp_flow(&carry, &dw).unwrap();
        let input = vec![
            to_rows(dw.u_data(), 4, 4),
            to_rows(dw.v_data(), 4, 4),
            to_rows(warped.u_data(), 4, 4),
            to_rows(warped.v_data(), 4, 4),
        ];
        let named = params.named_params();
        let a1 = conv(&input, named[0].1, named[1].1, 3);
        let r1: Vec<_> = a1
            .iter()
            .map(|ch| ch.iter().map(|row| row.iter().map(|v| v.max(0.0)).collect()).collect())
            .collect();
        let a2 = conv(&r1, named[2].1, named[3].1, 3);
        let r2: Vec<Vec<Vec<f64>>> = a2
            .iter()
            .map(|ch| ch.iter().map(|row| row.iter().map(|v| v.max(0.0)).collect()).collect())
            .collect();
        let a3 = conv(&r2, named[4].1, named[5].1, 1);
        for y in 0..4 {
            for x in 0..4 {
                assert!((out.u(y, x) - a3[0][y][x]).abs() < 1e-12);
                assert!((out.v(y, x) - a3[1][y][x]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn first_state_holds_the_first_flow_twice() {
        let dw = VectorField::uniform(4, 4, 0.3, -0.2);
        let state = EvolutionState::first(dw.clone());
        assert_eq!(state.step(), 0);
        assert_eq!(state.composed().u_data(), dw.u_data());
        assert_eq!(state.carry().v_data(), dw.v_data());
    }

    #[test]
    fn uniform_flows_compose_to_multiples_in_the_interior() {
        // Flow resampling pads with zero, so the exact multiple holds only
        // for pixels whose backward chain never leaves the grid: the
        // contaminated rim grows by at most one pixel per composition.
        let cfg = EvolutionConfig::momentum(0.7).unwrap();
        let dw = VectorField::uniform(16, 16, 0.25, -0.5);
        let mut state = EvolutionState::first(dw.clone());
        for k in 2..=5 {
            state = compose_step(&state, &dw, &cfg).unwrap();
            let margin = k + 1;
            for y in margin..16 - margin {
                for x in margin..16 - margin {
                    assert!(
                        (state.composed().u(y, x) - 0.25 * k as f64).abs() < 1e-12,
                        "step {k}: composed u drifted at ({y}, {x})"
                    );
                    assert!((state.composed().v(y, x) + 0.5 * k as f64).abs() < 1e-12);
                }
            }
        }
        assert_eq!(state.step(), 4);
    }

    #[test]
    fn zero_flow_step_scales_the_carry_by_beta() {
        let cfg = EvolutionConfig::momentum(0.6).unwrap();
        let dw = VectorField::uniform(6, 6, 0.4, 0.2);
        let state = EvolutionState::first(dw.clone());
        let stepped = compose_step(&state, &VectorField::zeros(6, 6), &cfg).unwrap();
        // carry' = beta * carry; composed' = carry' + composed (zero warp).
        for y in 0..6 {
            for x in 0..6 {
                assert!((stepped.carry().u(y, x) - 0.6 * 0.4).abs() < 1e-15);
                assert!((stepped.composed().u(y, x) - (0.6 * 0.4 + 0.4)).abs() < 1e-15);
                assert!((stepped.composed().v(y, x) - (0.6 * 0.2 + 0.2)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(EvolutionConfig::momentum(1.0).is_err());
        assert!(EvolutionConfig::momentum(-0.1).is_err());
        let mut cfg = EvolutionConfig::momentum(0.5).unwrap();
        cfg.order = 2;
        assert!(cfg.validate().is_err());
        assert!(evolve_momentum(&VectorField::zeros(2, 2), &VectorField::zeros(3, 3), 0.5).is_err());
    }

    #[test]
    fn zero_flow_rollout_repeats_the_anchor() {
        let frames: Vec<ScalarField> = (0..3).map(|k| blob(16, 16, 7.5, 7.5, 2.0 + 0.1 * k as f64)).collect();
        let anchor = frames.last().unwrap().clone();
        let seq = Sequence::new(frames, 6.0).unwrap();
        let cfg = RolloutConfig::default();
        let steps = rollout(&seq, &ConstFlow(VectorField::zeros(16, 16)), &InpaintRefiner, 4, &cfg).unwrap();
        for step in &steps {
            assert_eq!(step.refined.data(), anchor.data());
            assert_eq!(step.mask.fraction_trusted(), 1.0);
        }
    }

    #[test]
    fn single_step_rollout_reduces_to_one_prediction() {
        let frames: Vec<ScalarField> = (0..2).map(|k| blob(16, 16, 7.5, 7.0 + k as f64, 2.0)).collect();
        let seq = Sequence::new(frames.clone(), 6.0).unwrap();
        let dw = VectorField::uniform(16, 16, 0.5, 0.0);
        let cfg = RolloutConfig::default();
        let steps = rollout(&seq, &ConstFlow(dw.clone()), &InpaintRefiner, 1, &cfg).unwrap();
        assert_eq!(steps.len(), 1);

        let propagated = advect(&frames[1], &dw, &cfg.kernel).unwrap();
        let energy = splat_energy(&dw, cfg.splat);
        let mask = conflict_mask(&energy, &cfg.thresholds).unwrap();
        let refined = InpaintRefiner.refine(&propagated, &mask).unwrap();
        assert_eq!(steps[0].refined.data(), refined.data());
    }

    #[test]
    fn only_the_anchor_is_ever_advected() {
        // With a uniform constant flow the composed flow is k * dw away from
        // the zero-padded rim, so each propagated frame must equal the
        // anchor advected once through that multiple - never a re-advected
        // prediction. The rim grows by at most one pixel per step.
        let frames: Vec<ScalarField> = (0..3).map(|k| blob(24, 24, 11.5, 9.5 + k as f64, 2.5)).collect();
        let anchor = frames.last().unwrap().clone();
        let seq = Sequence::new(frames, 6.0).unwrap();
        let dw = VectorField::uniform(24, 24, 0.45, -0.2);
        let cfg = RolloutConfig::default();
        let steps = rollout(&seq, &ConstFlow(dw), &InpaintRefiner, 5, &cfg).unwrap();
        for (k, step) in steps.iter().enumerate() {
            let composed = VectorField::uniform(24, 24, 0.45 * (k + 1) as f64, -0.2 * (k + 1) as f64);
            let direct = advect(&anchor, &composed, &cfg.kernel).unwrap();
            let margin = k + 2;
            let mut worst = 0.0f64;
            for y in margin..24 - margin {
                for x in margin..24 - margin {
                    worst = worst.max((step.propagated.get(y, x) - direct.get(y, x)).abs());
                }
            }
            assert!(worst < 1e-12, "step {k}: propagated deviates by {worst}");
        }
    }

    #[test]
    fn resumed_rollout_replays_identically() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let frames: Vec<ScalarField> = (0..3)
            .map(|_| ScalarField::from_fn(16, 16, |_, _| rng.gen_range(0.0..1.0)))
            .collect();
        let seq = Sequence::new(frames, 6.0).unwrap();
        let dw = VectorField::uniform(16, 16, 0.3, 0.1);
        let estimator = ConstFlow(dw);
        let cfg = RolloutConfig {
            evolution: EvolutionConfig::momentum(0.8).unwrap(),
            ..RolloutConfig::default()
        };

        let mut full = Rollout::new(&seq, &estimator, &InpaintRefiner, &cfg).unwrap();
        let mut all = Vec::new();
        let mut snapshot = None;
        for k in 0..6 {
            all.push(full.step().unwrap());
            if k == 2 {
                snapshot = Some((full.window().to_vec(), full.state().cloned()));
            }
        }

        let (window, state) = snapshot.unwrap();
        let anchor = seq.frames().last().unwrap().clone();
        let mut resumed = Rollout::resume(anchor, window, state, &estimator, &InpaintRefiner, &cfg).unwrap();
        for item in all.iter().skip(3) {
            let replay = resumed.step().unwrap();
            assert_eq!(replay.refined.data(), item.refined.data());
            assert_eq!(replay.state.composed().u_data(), item.state.composed().u_data());
        }
    }

    #[test]
    fn anchored_rollout_tracks_a_translating_blob() {
        // kappa = 0 pure translation: the anchored prediction at step k is a
        // single interpolation of the anchor, so it stays within
        // interpolation error of the exact translate.
        let (h, w) = (32, 32);
        let (u, v) = (0.5, -0.5);
        let frames: Vec<ScalarField> = (0..2)
            .map(|k| blob(h, w, 15.5 + v * k as f64, 13.5 + u * k as f64, 3.0))
            .collect();
        let seq = Sequence::new(frames, 6.0).unwrap();
        let cfg = RolloutConfig::default();
        let estimator = ConstFlow(VectorField::uniform(h, w, u, v));
        let steps = rollout(&seq, &estimator, &InpaintRefiner, 4, &cfg).unwrap();
        for (k, step) in steps.iter().enumerate() {
            let t = (k + 1) as f64;
            let exact = blob(h, w, 15.5 + v + v * t, 13.5 + u + u * t, 3.0);
            let mse = step
                .refined
                .data()
                .iter()
                .zip(exact.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / (h * w) as f64;
            assert!(mse < 1e-4, "step {k}: MSE {mse}");
        }
    }

    #[test]
    fn anchored_beats_chained_on_long_horizons() {
        let (h, w) = (32, 32);
        let (u, v) = (0.5, 0.5);
        let frames: Vec<ScalarField> = (0..2)
            .map(|k| blob(h, w, 13.5 + v * k as f64, 13.5 + u * k as f64, 3.0))
            .collect();
        let seq = Sequence::new(frames, 6.0).unwrap();
        let cfg = RolloutConfig::default();
        let estimator = ConstFlow(VectorField::uniform(h, w, u, v));
        let horizon = 8;
        let anchored = rollout(&seq, &estimator, &InpaintRefiner, horizon, &cfg).unwrap();
        let chained = chained_rollout(&seq, &estimator, horizon, &cfg.kernel).unwrap();
        let t = 1.0 + horizon as f64;
        let exact = blob(h, w, 13.5 + v * t, 13.5 + u * t, 3.0);
        let mse = |f: &ScalarField| {
            f.data()
                .iter()
                .zip(exact.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / (h * w) as f64
        };
        let mse_anchored = mse(&anchored.last().unwrap().refined);
        let mse_chained = mse(chained.last().unwrap());
        assert!(
            mse_anchored < mse_chained,
            "anchored {mse_anchored} should beat chained {mse_chained}"
        );
    }
}
