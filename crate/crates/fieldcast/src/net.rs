//! Fixed encoder-decoder convolutional networks: a motion head that maps a
//! window of frames to a flow field, and a generator head that maps a
//! propagated frame plus its confidence mask to a refined frame.
//!
//! The shared trunk is three stride-2 convolutions down (channel widths c,
//! 2c, 4c) and three upsample-convolution blocks back up, with encoder
//! activations added onto the matching decoder levels, finished by a linear
//! convolution head. All activations are ReLU; spatial shapes must be
//! divisible by 8 so the three halvings invert exactly.
//!
//! Checkpoints store parameters under a plain-text manifest (`name dims @
//! offset` per line, offsets counting 32-bit elements) followed by the
//! little-endian 32-bit float payload.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::mask::ConflictMask;
use crate::tape::{NodeId, Tape, Tensor};

/// One convolution's parameters; weights are `[out, in, k, k]`, biases
/// `[out]`.
#[derive(Clone, Debug)]
pub(crate) struct Conv2d {
    pub(crate) weight: Tensor,
    pub(crate) bias: Tensor,
    pub(crate) stride: usize,
}

impl Conv2d {
    /// He fan-in initialization for the weights, zero biases.
    pub(crate) fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut ChaCha20Rng) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite positive deviation");
        let n = out_ch * in_ch * kernel * kernel;
        let weight = Tensor::from_data(
            &[out_ch, in_ch, kernel, kernel],
            (0..n).map(|_| normal.sample(rng)).collect(),
        );
        Conv2d {
            weight,
            bias: Tensor::zeros(&[out_ch]),
            stride,
        }
    }
}

/// A network wired onto a tape: the parameter nodes (checkpoint order) and
/// the output node.
pub struct WiredNet {
    pub params: Vec<NodeId>,
    pub output: NodeId,
}

/// The fixed three-level encoder-decoder trunk.
#[derive(Clone, Debug)]
pub struct EncDec {
    in_channels: usize,
    out_channels: usize,
    base_channels: usize,
    enc1: Conv2d,
    enc2: Conv2d,
    enc3: Conv2d,
    dec1: Conv2d,
    dec2: Conv2d,
    dec3: Conv2d,
    head: Conv2d,
}

impl EncDec {
    /// Builds a fresh network. Parameters are drawn from `rng` in a fixed
    /// construction order, so equal seeds give bitwise-equal networks.
    pub fn new(in_channels: usize, out_channels: usize, base_channels: usize, rng: &mut ChaCha20Rng) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || base_channels == 0 {
            return Err(Error::config("network channel counts must be positive"));
        }
        let c = base_channels;
        Ok(EncDec {
            in_channels,
            out_channels,
            base_channels,
            enc1: Conv2d::new(in_channels, c, 3, 2, rng),
            enc2: Conv2d::new(c, 2 * c, 3, 2, rng),
            enc3: Conv2d::new(2 * c, 4 * c, 3, 2, rng),
            dec1: Conv2d::new(4 * c, 2 * c, 3, 1, rng),
            dec2: Conv2d::new(2 * c, c, 3, 1, rng),
            dec3: Conv2d::new(c, c, 3, 1, rng),
            head: Conv2d::new(c, out_channels, 3, 1, rng),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn base_channels(&self) -> usize {
        self.base_channels
    }

    /// Parameters in checkpoint order (weights before biases, encoder to
    /// head).
    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("enc1.weight", &self.enc1.weight),
            ("enc1.bias", &self.enc1.bias),
            ("enc2.weight", &self.enc2.weight),
            ("enc2.bias", &self.enc2.bias),
            ("enc3.weight", &self.enc3.weight),
            ("enc3.bias", &self.enc3.bias),
            ("dec1.weight", &self.dec1.weight),
            ("dec1.bias", &self.dec1.bias),
            ("dec2.weight", &self.dec2.weight),
            ("dec2.bias", &self.dec2.bias),
            ("dec3.weight", &self.dec3.weight),
            ("dec3.bias", &self.dec3.bias),
            ("head.weight", &self.head.weight),
            ("head.bias", &self.head.bias),
        ]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.enc1.weight,
            &mut self.enc1.bias,
            &mut self.enc2.weight,
            &mut self.enc2.bias,
            &mut self.enc3.weight,
            &mut self.enc3.bias,
            &mut self.dec1.weight,
            &mut self.dec1.bias,
            &mut self.dec2.weight,
            &mut self.dec2.bias,
            &mut self.dec3.weight,
            &mut self.dec3.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }

    fn check_input_shape(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 {
            return Err(Error::data(format!(
                "network input must be [channels, height, width], got rank {}",
                shape.len()
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if c != self.in_channels {
            return Err(Error::data(format!(
                "network expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::data(format!(
                "network input shape {h}x{w} must be divisible by 8"
            )));
        }
        Ok(())
    }

    /// Wires the forward pass onto `tape` starting from the `input` node.
    /// Parameters become leaves that require gradients when `trainable`,
    /// constants otherwise.
    pub fn wire(&self, tape: &mut Tape, input: NodeId, trainable: bool) -> Result<WiredNet> {
        self.check_input_shape(&tape.value(input).shape().to_vec())?;
        let mut params = Vec::with_capacity(14);
        let mut push = |tape: &mut Tape, t: &Tensor| {
            let id = if trainable {
                tape.leaf(t.clone(), true)
            } else {
                tape.constant(t.clone())
            };
            params.push(id);
            id
        };
        let layers = [
            &self.enc1, &self.enc2, &self.enc3, &self.dec1, &self.dec2, &self.dec3, &self.head,
        ];
        let mut ids = Vec::with_capacity(7);
        for conv in layers {
            let w = push(tape, &conv.weight);
            let b = push(tape, &conv.bias);
            ids.push((w, b, conv.stride));
        }
        let conv = |tape: &mut Tape, x, (w, b, s): (NodeId, NodeId, usize)| tape.conv(x, w, b, s);

        let e1 = {
            let c = conv(tape, input, ids[0]);
            tape.relu(c)
        };
        let e2 = {
            let c = conv(tape, e1, ids[1]);
            tape.relu(c)
        };
        let e3 = {
            let c = conv(tape, e2, ids[2]);
            tape.relu(c)
        };
        let d1 = {
            let up = tape.upsample2(e3);
            let c = conv(tape, up, ids[3]);
            let s = tape.add(c, e2);
            tape.relu(s)
        };
        let d2 = {
            let up = tape.upsample2(d1);
            let c = conv(tape, up, ids[4]);
            let s = tape.add(c, e1);
            tape.relu(s)
        };
        let d3 = {
            let up = tape.upsample2(d2);
            let c = conv(tape, up, ids[5]);
            tape.relu(c)
        };
        let output = conv(tape, d3, ids[6]);
        Ok(WiredNet { params, output })
    }

    /// Forward pass on a private tape.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let wired = self.wire(&mut tape, x, false)?;
        Ok(tape.value(wired.output).clone())
    }

    /// Reverse-mode derivatives of `dot(upstream, forward(input))`: exact
    /// gradients for every parameter (checkpoint order) and for the input.
    pub fn backward(&self, input: &Tensor, upstream: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), true);
        let wired = self.wire(&mut tape, x, true)?;
        if tape.value(wired.output).shape() != upstream.shape() {
            return Err(Error::data(format!(
                "upstream gradient shape {:?} does not match output shape {:?}",
                upstream.shape(),
                tape.value(wired.output).shape()
            )));
        }
        let root = tape.dot(wired.output, Rc::new(upstream.data().to_vec()));
        let grads = tape.backward(root);
        let param_grads = wired.params.iter().map(|&p| grads.wrt(p).clone()).collect();
        Ok((param_grads, grads.wrt(x).clone()))
    }

    /// Checkpoint entries under `prefix` (e.g. `motion.enc1.weight`).
    pub fn checkpoint_entries(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.named_params()
            .into_iter()
            .map(|(name, t)| (format!("{prefix}.{name}"), t.clone()))
            .collect()
    }

    /// Restores parameters from checkpoint entries under `prefix`; every
    /// parameter must be present with its exact shape.
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
}

/// Stacks same-shaped frames into a `[n, h, w]` tensor.
pub fn stack_frames(frames: &[ScalarField]) -> Result<Tensor> {
    let first = frames.first().ok_or(Error::EmptySequence)?;
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(frames.len() * h * w);
    for f in frames {
        first.expect_same_shape(f)?;
        data.extend_from_slice(f.data());
    }
    Ok(Tensor::from_data(&[frames.len(), h, w], data))
}

/// Learned motion head: a window of `n` frames in, one flow field out.
#[derive(Clone, Debug)]
pub struct MotionNet {
    net: EncDec,
}

impl MotionNet {
    pub fn new(window: usize, base_channels: usize, rng: &mut ChaCha20Rng) -> Result<Self> {
        Ok(MotionNet {
            net: EncDec::new(window, 2, base_channels, rng)?,
        })
    }

    pub fn window(&self) -> usize {
        self.net.in_channels()
    }

    pub fn net(&self) -> &EncDec {
        &self.net
    }

    pub(crate) fn net_mut(&mut self) -> &mut EncDec {
        &mut self.net
    }

    /// Predicts the interval flow for the step after `frames`.
    pub fn estimate_flow(&self, frames: &[ScalarField]) -> Result<VectorField> {
        if frames.len() != self.window() {
            return Err(Error::data(format!(
                "motion head expects a window of {} frames, got {}",
                self.window(),
                frames.len()
            )));
        }
        let input = stack_frames(frames)?;
        Ok(self.net.forward(&input)?.to_flow())
    }
}

/// Learned refinement head: propagated frame plus mask in, refined frame
/// out.
#[derive(Clone, Debug)]
pub struct GeneratorNet {
    net: EncDec,
}

impl GeneratorNet {
    pub fn new(base_channels: usize, rng: &mut ChaCha20Rng) -> Result<Self> {
        Ok(GeneratorNet {
            net: EncDec::new(2, 1, base_channels, rng)?,
        })
    }

    pub fn net(&self) -> &EncDec {
        &self.net
    }

    pub(crate) fn net_mut(&mut self) -> &mut EncDec {
        &mut self.net
    }

    /// Refines a propagated frame, conditioning on its confidence mask.
    pub fn refine_frame(&self, propagated: &ScalarField, mask: &ConflictMask) -> Result<ScalarField> {
        if mask.shape() != propagated.shape() {
            return Err(Error::ShapeMismatch {
                expected: propagated.shape(),
                got: mask.shape(),
            });
        }
        let input = stack_frames(&[propagated.clone(), mask.grid().clone()])?;
        Ok(self.net.forward(&input)?.to_field())
    }
}

const CKPT_MAGIC: &str = "FCKP 1";

/// Writes named tensors to `path`: a plain-text manifest (one `name dims @
/// offset` line per tensor, offsets counting 32-bit elements from the start
/// of the payload), an `END` line, then all values as little-endian 32-bit
/// floats.
pub fn save_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut header = String::from(CKPT_MAGIC);
    header.push('\n');
    let mut offset = 0usize;
    for (name, t) in entries {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::data(format!(
                "checkpoint parameter name {name:?} must be non-empty without whitespace"
            )));
        }
        if !t.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("checkpoint parameter {name}"),
            });
        }
        write!(header, "{name}").expect("writing to a string cannot fail");
        for d in t.shape() {
            write!(header, " {d}").expect("writing to a string cannot fail");
        }
        writeln!(header, " @ {offset}").expect("writing to a string cannot fail");
        offset += t.numel();
    }
    header.push_str("END\n");
    let mut bytes = header.into_bytes();
    bytes.reserve(offset * 4);
    for (_, t) in entries {
        for v in t.data() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]; errors carry the byte
/// offset of the offending header line or payload position.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let rest = &bytes[start..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format {
                offset: start as u64,
                what: "checkpoint header is truncated (no newline before payload)".into(),
            })?;
        let line = std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format {
            offset: start as u64,
            what: "checkpoint header is not valid UTF-8".into(),
        })?;
        *pos = start + end + 1;
        Ok((start, line.to_string()))
    };

    let (_, magic) = next_line(&mut pos)?;
    if magic != CKPT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            what: format!("expected checkpoint magic {CKPT_MAGIC:?}, found {magic:?}"),
        });
    }

    let mut manifest: Vec<(String, Vec<usize>, usize)> = Vec::new();
    let mut running = 0usize;
    loop {
        let (line_start, line) = next_line(&mut pos)?;
        if line == "END" {
            break;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let bad = |what: String| Error::Format {
            offset: line_start as u64,
            what,
        };
        if tokens.len() < 4 || tokens[tokens.len() - 2] != "@" {
            return Err(bad(format!(
                "manifest line {line:?} must read `name dims @ offset`"
            )));
        }
        let name = tokens[0].to_string();
        if manifest.iter().any(|(n, _, _)| *n == name) {
            return Err(bad(format!("duplicate checkpoint parameter {name}")));
        }
        let dims: Vec<usize> = tokens[1..tokens.len() - 2]
            .iter()
            .map(|t| {
                t.parse::<usize>()
                    .ok()
                    .filter(|&d| d > 0)
                    .ok_or_else(|| bad(format!("bad dimension {t:?} for {name}")))
            })
            .collect::<Result<_>>()?;
        let offset: usize = tokens[tokens.len() - 1]
            .parse()
            .map_err(|_| bad(format!("bad offset for {name}")))?;
        if offset != running {
            return Err(bad(format!(
                "parameter {name} at offset {offset}, expected contiguous {running}"
            )));
        }
        running += dims.iter().product::<usize>();
        manifest.push((name, dims, offset));
    }

    let payload = &bytes[pos..];
    if payload.len() != running * 4 {
        return Err(Error::Format {
            offset: pos as u64,
            what: format!(
                "payload holds {} bytes, manifest requires {}",
                payload.len(),
                running * 4
            ),
        });
    }
    let mut out = Vec::with_capacity(manifest.len());
    for (name, dims, offset) in manifest {
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let at = (offset + i) * 4;
            let raw: [u8; 4] = payload[at..at + 4].try_into().expect("bounds checked");
            let v = f32::from_le_bytes(raw) as f64;
            if !v.is_finite() {
                return Err(Error::Format {
                    offset: (pos + at) as u64,
                    what: format!("non-finite value in parameter {name}"),
                });
            }
            data.push(v);
        }
        out.push((name, Tensor::from_data(&dims, data)));
    }
    Ok(out)
}

/// Worst relative disagreement between [`EncDec::backward`]'s parameter
/// gradients and central finite differences of the probe scalar
/// `sum(forward(input) * upstream)`, with the [`FD_GUARD`](crate::loss::FD_GUARD)
/// denominator floor.
pub fn finite_diff_check_net(
    net: &EncDec,
    input: &Tensor,
    upstream: &Tensor,
    step: f64,
) -> Result<f64> {
    let (param_grads, _) = net.backward(input, upstream)?;
    let packed: Vec<f64> = net
        .named_params()
        .iter()
        .flat_map(|(_, t)| t.data().iter().copied())
        .collect();
    let packed_grads: Vec<f64> = param_grads
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let eval = |vals: &[f64]| {
        let mut probe = net.clone();
        let mut at = 0;
        for p in probe.params_mut() {
            let n = p.numel();
            p.data_mut().copy_from_slice(&vals[at..at + n]);
            at += n;
        }
        let out = probe.forward(input).expect("probe forward reuses a checked shape");
        out.data()
            .iter()
            .zip(upstream.data())
            .map(|(o, u)| o * u)
            .sum()
    };
    crate::loss::finite_diff_check_values(eval, &packed_grads, &packed, step)
}
