//! Row-major grid containers: scalar frames, displacement fields, and
//! frame sequences.
//!
//! Coordinates follow image convention: `x` indexes columns (width) and `y`
//! indexes rows (height). A displacement `(u, v)` moves a pixel by `u`
//! columns and `v` rows, in pixel units per frame interval.

use crate::error::{Error, Result};

/// A single gridded scalar frame, stored row-major (`data[y * width + x]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ScalarField {
    /// All-zero field of the given shape.
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    /// Field of the given shape with every pixel set to `value`.
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        ScalarField {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    /// Wraps a row-major buffer; the buffer length must equal
    /// `height * width`.
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::data(format!(
                "buffer of {} values cannot fill a {}x{} grid",
                data.len(),
                height,
                width
            )));
        }
        Ok(ScalarField {
            height,
            width,
            data,
        })
    }

    /// Builds a field by evaluating `f(y, x)` at every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        ScalarField {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    /// Row-major backing slice.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &ScalarField) -> bool {
        self.shape() == other.shape()
    }

    /// Sum of all pixel values (total mass for non-negative fields).
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest absolute pixel value.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// True when every pixel is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn expect_same_shape(&self, other: &ScalarField) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                got: other.shape(),
            });
        }
        Ok(())
    }
}

/// A per-pixel displacement field with `u` (column) and `v` (row)
/// components, both stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    height: usize,
    width: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl VectorField {
    /// Zero displacement everywhere.
    pub fn zeros(height: usize, width: usize) -> Self {
        VectorField {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
        }
    }

    /// The same displacement `(u, v)` at every pixel.
    pub fn uniform(height: usize, width: usize, u: f64, v: f64) -> Self {
        VectorField {
            height,
            width,
            u: vec![u; height * width],
            v: vec![v; height * width],
        }
    }

    /// Wraps component buffers; both must have length `height * width`.
    pub fn from_components(height: usize, width: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != height * width || v.len() != height * width {
            return Err(Error::data(format!(
                "component buffers of {} and {} values cannot fill a {}x{} grid",
                u.len(),
                v.len(),
                height,
                width
            )));
        }
        Ok(VectorField {
            height,
            width,
            u,
            v,
        })
    }

    /// Builds a field by evaluating `f(y, x) -> (u, v)` at every pixel.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Self {
        let mut u = Vec::with_capacity(height * width);
        let mut v = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let (du, dv) = f(y, x);
                u.push(du);
                v.push(dv);
            }
        }
        VectorField {
            height,
            width,
            u,
            v,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Column displacement at `(y, x)`.
    pub fn u(&self, y: usize, x: usize) -> f64 {
        self.u[y * self.width + x]
    }

    /// Row displacement at `(y, x)`.
    pub fn v(&self, y: usize, x: usize) -> f64 {
        self.v[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, u: f64, v: f64) {
        let i = y * self.width + x;
        self.u[i] = u;
        self.v[i] = v;
    }

    pub fn u_data(&self) -> &[f64] {
        &self.u
    }

    pub fn v_data(&self) -> &[f64] {
        &self.v
    }

    pub fn u_data_mut(&mut self) -> &mut [f64] {
        &mut self.u
    }

    pub fn v_data_mut(&mut self) -> &mut [f64] {
        &mut self.v
    }

    pub fn same_shape(&self, other: &VectorField) -> bool {
        self.shape() == other.shape()
    }

    /// Largest absolute component value over both channels.
    pub fn max_abs(&self) -> f64 {
        let mu = self.u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mv = self.v.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        mu.max(mv)
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(self.v.iter()).all(|v| v.is_finite())
    }

    pub(crate) fn expect_shape(&self, shape: (usize, usize)) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                got: self.shape(),
            });
        }
        Ok(())
    }
}

/// An ordered run of uniformly shaped frames sampled at a fixed time step.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    frames: Vec<ScalarField>,
    step_hours: f64,
}

impl Sequence {
    /// Wraps a non-empty frame list; all frames must share one shape.
    pub fn new(frames: Vec<ScalarField>, step_hours: f64) -> Result<Self> {
        let first = frames.first().ok_or(Error::EmptySequence)?;
        let shape = first.shape();
        for frame in &frames {
            if frame.shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    got: frame.shape(),
                });
            }
        }
        Ok(Sequence {
            frames,
            step_hours,
        })
    }

    pub fn frames(&self) -> &[ScalarField] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &ScalarField {
        &self.frames[i]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.frames[0].shape()
    }

    /// Hours between consecutive frames (metadata only).
    pub fn step_hours(&self) -> f64 {
        self.step_hours
    }

    /// Appends a frame with the sequence's shape.
    pub fn push(&mut self, frame: ScalarField) -> Result<()> {
        if frame.shape() != self.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                got: frame.shape(),
            });
        }
        self.frames.push(frame);
        Ok(())
    }

    pub fn into_frames(self) -> Vec<ScalarField> {
        self.frames
    }
}
