//! Dense rank-4 tensors in NCHW layout and the `.ten` blob format.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::path::Path;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. Training runs in `f32`; gradient checks and
/// oracles instantiate the same code with `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` on row-major matrices, where
    /// `op(a)` is `m x k` and `op(b)` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

fn gemm_strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // op(x) is rows x cols; x itself is stored row-major as (rows x cols) or (cols x rows).
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                n: usize,
                k: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = gemm_strides(trans_a, m, k);
                let (rsb, csb) = gemm_strides(trans_b, k, n);
                // SAFETY: the length asserts above guarantee every index the kernel
                // touches (row-major extents m*k, k*n, m*n) lies inside the slices.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Extents in (batch, channel, height, width) order.
pub type Shape = [usize; 4];

const TEN_MAGIC: &[u8; 4] = b"CDT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Self { shape, data })
    }

    /// Like [`Tensor::new`] but also rejects NaN and infinities, for data that
    /// comes from outside the process.
    pub fn from_external(shape: Shape, data: Vec<T>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("element {i} of tensor {shape:?}")));
        }
        Self::new(shape, data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    /// Single 2-D image as a 1x1xHxW tensor.
    pub fn image(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        Self::new([1, 1, height, width], data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn item(&self, b: usize) -> &[T] {
        let n = self.item_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.item_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    /// One (height x width) plane.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let p = self.plane_len();
        let off = (b * self.shape[1] + c) * p;
        &self.data[off..off + p]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let p = self.plane_len();
        let off = (b * self.shape[1] + c) * p;
        &mut self.data[off..off + p]
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(b, c, y, x)]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    /// Concatenates tensors along the channel axis. All parts must share
    /// batch and spatial extents.
    pub fn stack_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::param("stack_channels needs at least one tensor"))?;
        let [n, _, h, w] = first.shape;
        for p in parts {
            if p.batch() != n || p.height() != h || p.width() != w {
                return Err(Error::shape(format!(
                    "cannot stack {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
        }
        let channels: usize = parts.iter().map(|p| p.channels()).sum();
        let mut data = Vec::with_capacity(n * channels * h * w);
        for b in 0..n {
            for p in parts {
                data.extend_from_slice(p.item(b));
            }
        }
        Self::new([n, channels, h, w], data)
    }

    /// Copies channel `c` of every batch item into a single-channel tensor.
    pub fn channel(&self, c: usize) -> Result<Self> {
        if c >= self.channels() {
            return Err(Error::shape(format!(
                "channel {c} out of range for {:?}",
                self.shape
            )));
        }
        let mut data = Vec::with_capacity(self.batch() * self.plane_len());
        for b in 0..self.batch() {
            data.extend_from_slice(self.plane(b, c));
        }
        Self::new([self.batch(), 1, self.height(), self.width()], data)
    }

    /// Copies the `size_y x size_x` window at (`y`, `x`) of batch item `b`,
    /// all channels, into `out` (length channels * size_y * size_x).
    pub fn crop_into(&self, b: usize, y: usize, x: usize, size_y: usize, size_x: usize, out: &mut [T]) {
        let w = self.width();
        let mut o = 0;
        for c in 0..self.channels() {
            let plane = self.plane(b, c);
            for row in y..y + size_y {
                out[o..o + size_x].copy_from_slice(&plane[row * w + x..row * w + x + size_x]);
                o += size_x;
            }
        }
    }
}

impl Tensor<f32> {
    /// Encodes as `.ten`: magic `CDT1`, u32 LE rank, u32 LE extents, f32 LE payload.
    pub fn to_ten_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 + 16 + 4 * self.data.len());
        out.extend_from_slice(TEN_MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &e in &self.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes a `.ten` blob. Ranks below 4 are left-padded with unit extents.
    pub fn from_ten_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |reason: &str| Error::format(origin, reason);
        if bytes.len() < 8 || &bytes[..4] != TEN_MAGIC {
            return Err(fail("missing CDT1 magic"));
        }
        let word = |i: usize| -> Option<u32> {
            bytes
                .get(i..i + 4)
                .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        };
        let rank = word(4).ok_or_else(|| fail("truncated header"))? as usize;
        if rank == 0 || rank > 4 {
            return Err(fail(&format!("unsupported rank {rank}")));
        }
        let mut shape = [1usize; 4];
        for i in 0..rank {
            let e = word(8 + 4 * i).ok_or_else(|| fail("truncated extents"))?;
            shape[4 - rank + i] = e as usize;
        }
        let count: usize = shape.iter().product();
        let payload = &bytes[8 + 4 * rank..];
        if payload.len() != 4 * count {
            return Err(fail(&format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                4 * count
            )));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::from_external(shape, data).map_err(|e| fail(&e.to_string()))
    }

    pub fn write_ten(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ten_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ten(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ten_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(matches!(
            Tensor::<f32>::new([1, 1, 2, 2], vec![0.0; 3]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn rejects_non_finite_external_data() {
        let r = Tensor::<f32>::from_external([1, 1, 1, 2], vec![1.0, f32::NAN]);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn stack_channels_interleaves_per_item() {
        let a = Tensor::<f32>::new([2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f32>::new([2, 1, 1, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let s = Tensor::stack_channels(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), [2, 2, 1, 2]);
        assert_eq!(s.data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
        assert_eq!(s.channel(1).unwrap(), b);
    }

    #[test]
    fn ten_header_layout() {
        let t = Tensor::<f32>::new([1, 1, 1, 2], vec![1.0, -2.0]).unwrap();
        let bytes = t.to_ten_bytes();
        assert_eq!(&bytes[..4], b"CDT1");
        assert_eq!(&bytes[4..8], &4u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &2u32.to_le_bytes());
        assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 8 + 16 + 8);
    }

    #[test]
    fn ten_truncated_payload_is_format_error() {
        let t = Tensor::<f32>::zeros([1, 2, 3, 3]);
        let bytes = t.to_ten_bytes();
        let r = Tensor::from_ten_bytes(&bytes[..bytes.len() - 2], Path::new("x.ten"));
        assert!(matches!(r, Err(Error::Format { .. })));
    }

    #[test]
    fn ten_lower_rank_is_padded() {
        let mut bytes = b"CDT1".to_vec();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        for i in 0..6 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let t = Tensor::from_ten_bytes(&bytes, Path::new("m.ten")).unwrap();
        assert_eq!(t.shape(), [1, 1, 2, 3]);
    }

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let (m, n, k) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut c = vec![0.0; m * n];
        f64::gemm(false, false, m, n, k, 1.0, &a, &b, 0.0, &mut c);
        for (x, y) in c.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
        // a^T stored as k x m, b^T stored as n x k
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        f64::gemm(true, true, m, n, k, 1.0, &at, &bt, 0.0, &mut c2);
        for (x, y) in c2.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn ten_round_trip_is_bitwise(
            dims in (1usize..3, 1usize..4, 1usize..6, 1usize..6),
            seed in any::<u64>(),
        ) {
            let shape = [dims.0, dims.1, dims.2, dims.3];
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits((seed as u32).wrapping_mul(2654435761).wrapping_add(i as u32) & 0x3fff_ffff))
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = Tensor::from_ten_bytes(&t.to_ten_bytes(), Path::new("p.ten")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
