use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::diffkernel::Tensor;
use crate::error::{Error, Result};

/// Named slices of one motion frame: root angular velocity, root XZ linear
/// velocity, root height, local joint positions, joint velocities, 6-D joint
/// rotations and four binary foot contacts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionFrameLayout {
    pub joint_count: usize,
    /// Declared feature width; must equal the slice sum.
    pub dims: usize,
}

impl MotionFrameLayout {
    /// Layout whose width is derived from the joint count.
    pub fn with_joints(joint_count: usize) -> Self {
        MotionFrameLayout { joint_count, dims: Self::slice_sum(joint_count) }
    }

    fn slice_sum(joints: usize) -> usize {
        1 + 2 + 1 + 3 * joints + 3 * joints + 6 * joints + 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.joint_count == 0 {
            return Err(Error::invalid("layout needs at least one joint"));
        }
        let expect = Self::slice_sum(self.joint_count);
        if expect != self.dims {
            return Err(Error::invalid(format!(
                "layout slices sum to {expect} for {} joints, declared width is {}",
                self.joint_count, self.dims
            )));
        }
        Ok(())
    }

    pub fn root_angular_velocity(&self) -> Range<usize> {
        0..1
    }

    pub fn root_linear_velocity_xz(&self) -> Range<usize> {
        1..3
    }

    pub fn root_height(&self) -> Range<usize> {
        3..4
    }

    pub fn joint_positions(&self) -> Range<usize> {
        4..4 + 3 * self.joint_count
    }

    pub fn joint_velocities(&self) -> Range<usize> {
        let s = self.joint_positions().end;
        s..s + 3 * self.joint_count
    }

    pub fn joint_rotations(&self) -> Range<usize> {
        let s = self.joint_velocities().end;
        s..s + 6 * self.joint_count
    }

    pub fn foot_contact(&self) -> Range<usize> {
        let s = self.joint_rotations().end;
        s..s + 4
    }

    /// Position, velocity and rotation columns of one joint.
    pub fn joint_columns(&self, joint: usize) -> Vec<usize> {
        let p = self.joint_positions().start + 3 * joint;
        let v = self.joint_velocities().start + 3 * joint;
        let r = self.joint_rotations().start + 6 * joint;
        (p..p + 3).chain(v..v + 3).chain(r..r + 6).collect()
    }
}

impl Default for MotionFrameLayout {
    fn default() -> Self {
        Self::with_joints(4)
    }
}

/// A clip of `frames x dims` motion features, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip {
    pub id: String,
    pub fps: f64,
    data: Tensor,
}

impl MotionClip {
    pub fn new(id: impl Into<String>, fps: f64, frames: usize, dims: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || dims == 0 {
            return Err(Error::invalid(format!("clip must have frames >= 1 and dims >= 1, got {frames}x{dims}")));
        }
        let data = Tensor::new(&[frames, dims], data)?;
        if !data.all_finite() {
            return Err(Error::NonFinite { what: "motion clip".into() });
        }
        Ok(MotionClip { id: id.into(), fps, data })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dims(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn values(&self) -> &[f64] {
        self.data.data()
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.data.data_mut()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        let d = self.dims();
        self.data.data().iter().skip(c).step_by(d).copied().collect()
    }

    /// Frames `start..start + len` as a new clip.
    pub fn window(&self, start: usize, len: usize) -> Result<MotionClip> {
        if len == 0 || start + len > self.frames() {
            return Err(Error::invalid(format!("window {start}+{len} outside {} frames", self.frames())));
        }
        let d = self.dims();
        let data = self.data.data()[start * d..(start + len) * d].to_vec();
        MotionClip::new(self.id.clone(), self.fps, len, d, data)
    }
}

/// Integer caption with a validity mask; ids index a [`Vocabulary`](super::Vocabulary).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionTokens {
    pub tokens: Vec<usize>,
    pub length: usize,
    pub pad_mask: Vec<bool>,
}

impl CaptionTokens {
    /// Unpadded caption.
    pub fn new(tokens: Vec<usize>) -> Self {
        let length = tokens.len();
        CaptionTokens { pad_mask: vec![true; length], tokens, length }
    }

    /// Right-pads with `pad_id` to `len` tokens (truncating longer captions).
    pub fn padded(&self, len: usize, pad_id: usize) -> CaptionTokens {
        let valid = self.length.min(len);
        let mut tokens: Vec<usize> = self.tokens[..valid].to_vec();
        tokens.resize(len, pad_id);
        let pad_mask = (0..len).map(|i| i < valid).collect();
        CaptionTokens { tokens, length: valid, pad_mask }
    }

    pub fn valid(&self) -> &[usize] {
        &self.tokens[..self.length]
    }

    pub fn check(&self, vocab_size: usize) -> Result<()> {
        if let Some(t) = self.tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::invalid(format!("token id {t} outside vocabulary of {vocab_size}")));
        }
        if self.pad_mask.len() != self.tokens.len()
            || self.pad_mask.iter().enumerate().any(|(i, &m)| m != (i < self.length))
        {
            return Err(Error::invalid("pad mask must be true exactly on the first `length` tokens"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_joint_layout_is_56_wide() {
        let l = MotionFrameLayout::with_joints(4);
        assert_eq!(l.dims, 1 + 2 + 1 + 12 + 12 + 24 + 4);
        assert_eq!(l.dims, 56);
        assert_eq!(l.foot_contact().end, 56);
        l.validate().unwrap();
    }

    #[test]
    fn slice_mismatch_is_rejected() {
        let l = MotionFrameLayout { joint_count: 4, dims: 55 };
        assert!(l.validate().is_err());
    }

    #[test]
    fn padded_caption_mask() {
        let c = CaptionTokens::new(vec![1, 5, 9, 2]).padded(6, 0);
        assert_eq!(c.tokens, vec![1, 5, 9, 2, 0, 0]);
        assert_eq!(c.pad_mask, vec![true, true, true, true, false, false]);
        c.check(32).unwrap();
        assert!(c.check(9).is_err());
    }
}
