//! Bins-temporal shift: a parameter-free channel-group roll applied first
//! along the frames-within-bin axis, then along the bins axis.
//!
//! For features `[Bt, T, Bn, F]`, channels `[0, F/4)` are rolled by -1 (left),
//! `[F/4, F/2)` by +1 (right) and `[F/2, F)` stay in place. Rolls are cyclic.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis of the bin count `T` in a feature tensor.
pub const BINS_AXIS: usize = 1;
/// Axis of the frames-per-bin `Bn` in a feature tensor.
pub const FRAMES_AXIS: usize = 2;

/// Rank-4 `[Bt, T, Bn, F]` features with `F % 4 == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor(Tensor);

impl FeatureTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        match t.shape() {
            [_, _, _, f] if f % 4 == 0 => Ok(FeatureTensor(t)),
            [_, _, _, f] => Err(Error::shape(format!("feature width {f} is not divisible by 4"))),
            s => Err(Error::shape(format!("feature tensor must be rank 4, got {s:?}"))),
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::from_vec(&shape, data)?)
    }

    pub fn dims(&self) -> [usize; 4] {
        let s = self.0.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Rolls each channel group along `axis` (1 = bins, 2 = frames) by the
/// given shifts; `out[i] = x[(i - shift) mod L]`.
fn roll_groups(x: &FeatureTensor, axis: usize, left: isize, right: isize) -> Result<FeatureTensor> {
    if axis != BINS_AXIS && axis != FRAMES_AXIS {
        return Err(Error::shape(format!("shift axis must be 1 or 2, got {axis}")));
    }
    let [bt, t, bn, f] = x.dims();
    let q = f / 4;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let len = if axis == BINS_AXIS { t } else { bn } as isize;
    let wrap = |i: usize, shift: isize| ((i as isize - shift).rem_euclid(len)) as usize;
    for b in 0..bt {
        for ti in 0..t {
            for ni in 0..bn {
                let dst = ((b * t + ti) * bn + ni) * f;
                let from = |shift: isize| {
                    let (st, sn) = if axis == BINS_AXIS {
                        (wrap(ti, shift), ni)
                    } else {
                        (ti, wrap(ni, shift))
                    };
                    ((b * t + st) * bn + sn) * f
                };
                let (l, r) = (from(left), from(right));
                out[dst..dst + q].copy_from_slice(&src[l..l + q]);
                out[dst + q..dst + 2 * q].copy_from_slice(&src[r + q..r + 2 * q]);
                out[dst + 2 * q..dst + f].copy_from_slice(&src[dst + 2 * q..dst + f]);
            }
        }
    }
    FeatureTensor::from_vec(x.dims(), out)
}

/// One shift phase: first quarter of channels rolled left, second quarter
/// rolled right, second half untouched.
pub fn channel_split_roll(x: &FeatureTensor, axis: usize) -> Result<FeatureTensor> {
    roll_groups(x, axis, -1, 1)
}

/// Frames-within-bin phase, then bins phase.
pub fn btsm_forward(x: &FeatureTensor) -> Result<FeatureTensor> {
    let intra = channel_split_roll(x, FRAMES_AXIS)?;
    channel_split_roll(&intra, BINS_AXIS)
}

/// Transpose of [`btsm_forward`]: inverse rolls in reverse order.
pub fn btsm_backward(grad_out: &FeatureTensor) -> Result<FeatureTensor> {
    let g = roll_groups(grad_out, BINS_AXIS, 1, -1)?;
    roll_groups(&g, FRAMES_AXIS, 1, -1)
}

/// Marker layer so model inventories can list the module.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Btsm;

impl Btsm {
    pub fn param_count(&self) -> usize {
        0
    }

    pub fn forward(&self, x: &FeatureTensor) -> Result<FeatureTensor> {
        btsm_forward(x)
    }

    pub fn backward(&self, grad: &FeatureTensor) -> Result<FeatureTensor> {
        btsm_backward(grad)
    }
}
