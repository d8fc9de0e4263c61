//! Small convolutional networks with hand-written reverse-mode gradients.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference checks.

mod checkpoint;
mod conv;
mod encoder;
mod optim;

pub use checkpoint::{parse_tensor_file, read_tensor_file, tensor_file_bytes, write_tensor_file, TensorFile, MAGIC, VERSION};
pub use conv::{ConvSpec, ConvStack, StackCache};
pub use encoder::{Encoder, EncoderArch, EncoderCache, EncoderOutput};
pub use optim::{momentum_update, sgd_step, Sgd};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::{Error, Result};

/// Floating-point element type of tensors.
pub trait Real: Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + 'static {
    /// `c = beta * c + a · b` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: extents of all three operands were checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense `h x w x C` grid, cell vectors contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T = f32> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x{channels} feature map",
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![T::zero(); height * width * channels] }
    }

    pub fn from_cells(height: usize, width: usize, cells: &[Vec<T>]) -> Result<Self> {
        let channels = cells.first().map_or(0, Vec::len);
        if cells.len() != height * width || cells.iter().any(|c| c.len() != channels) {
            return Err(Error::ShapeMismatch("ragged or miscounted cells".into()));
        }
        Ok(Self { height, width, channels, data: cells.concat() })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Vector at flat cell index `i = y * width + x`.
    #[inline]
    pub fn cell(&self, i: usize) -> &[T] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> FeatureMap<U> {
        FeatureMap { height: self.height, width: self.width, channels: self.channels, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        self.map(|v| U::from(v).expect("finite cast"))
    }
}

/// A `C`-dimensional vector, optionally unit-normalised.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T = f32> {
    values: Vec<T>,
    normalized: bool,
}

impl<T: Real> Embedding<T> {
    /// Raw (unnormalised) vector.
    pub fn raw(values: Vec<T>) -> Self {
        Self { values, normalized: false }
    }

    /// L2-normalises `values`; the zero vector stays zero and is flagged as
    /// not normalised.
    pub fn normalize(values: Vec<T>) -> Self {
        let norm = l2_norm(&values);
        if norm > T::zero() {
            Self { values: values.into_iter().map(|v| v / norm).collect(), normalized: true }
        } else {
            Self { values, normalized: false }
        }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &Self) -> T {
        dot(&self.values, &other.values)
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[inline]
pub fn l2_norm<T: Real>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Maps an RGB image to a 3-channel feature map, roughly centred on zero.
pub fn image_tensor<T: Real>(img: &crate::image::RgbImage) -> FeatureMap<T> {
    let scale = T::lit(1.0 / (255.0 * 0.25));
    let shift = T::lit(2.0);
    let data = img.data().iter().map(|&v| T::from_u8(v).expect("u8") * scale - shift).collect();
    FeatureMap { height: img.height(), width: img.width(), channels: 3, data }
}
