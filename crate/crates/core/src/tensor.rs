use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bounds, Error, Result};

/// Dense row-major 4-D tensor.
///
/// The meaning of the four axes is up to the caller: feature maps use NHWC,
/// weights use ORSI (output channel, kernel row, kernel column, input channel).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Copy + Default> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![T::default(); dims.iter().product()],
        }
    }
}

impl<T: Copy> Tensor4<T> {
    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::Argument(format!(
                "tensor of dims {dims:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    for d in 0..dims[3] {
                        data.push(f([a, b, c, d]));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        ((idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]) * self.dims[3] + idx[3]
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn get(&self, idx: [usize; 4]) -> Result<T> {
        const AXES: [&str; 4] = ["axis 0", "axis 1", "axis 2", "axis 3"];
        for axis in 0..4 {
            if idx[axis] >= self.dims[axis] {
                return Err(bounds(AXES[axis], idx[axis], self.dims[axis]));
            }
        }
        Ok(self.at(idx))
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], value: T) {
        let o = self.offset(idx);
        self.data[o] = value;
    }
}

impl Tensor4<i32> {
    /// Uniform random signed values representable in `bits` bits.
    pub fn random_signed<R: Rng + ?Sized>(dims: [usize; 4], bits: u32, rng: &mut R) -> Self {
        let (lo, hi) = signed_range(bits);
        Self::from_fn(dims, |_| rng.random_range(lo..=hi))
    }
}

/// Inclusive two's-complement range of a `bits`-wide signed integer.
pub fn signed_range(bits: u32) -> (i32, i32) {
    let half = 1i32 << (bits - 1);
    (-half, half - 1)
}

pub(crate) fn check_signed_range(tensor: &Tensor4<i32>, bits: u32, what: &str) -> Result<()> {
    let (lo, hi) = signed_range(bits);
    if let Some(v) = tensor.data().iter().find(|v| **v < lo || **v > hi) {
        return Err(Error::Domain(format!(
            "{what} value {v} outside the {bits}-bit signed range [{lo}, {hi}]"
        )));
    }
    Ok(())
}
