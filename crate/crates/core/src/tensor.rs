//! Dense 4D tensors in batch–height–width–channel (NHWC) order.
//!
//! Binary layout written by [`Tensor::write_to`] (all integers little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `b"AAPT"`                         |
//! | 4      | 4    | format version, `u32` (currently 1)     |
//! | 8      | 4    | precision in bits, `u32` (32 or 64)     |
//! | 12     | 32   | dims N, H, W, C as four `u64`           |
//! | 44     | ..   | N·H·W·C elements, little-endian IEEE-754|

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[cfg(not(feature = "f32"))]
pub type Float = f64;
#[cfg(feature = "f32")]
pub type Float = f32;

/// Bit width of [`Float`] in this build.
pub const PRECISION_BITS: u32 = (std::mem::size_of::<Float>() * 8) as u32;

pub const TENSOR_MAGIC: &[u8; 4] = b"AAPT";
pub const TENSOR_VERSION: u32 = 1;
const HEADER_LEN: usize = 44;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Result<Self> {
        if n == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::shape(format!(
                "all dimensions must be >= 1, got {n}x{h}x{w}x{c}"
            )));
        }
        Ok(Shape { n, h, w, c })
    }

    pub fn numel(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    #[inline]
    pub fn offset(&self, n: usize, h: usize, w: usize, c: usize) -> usize {
        ((n * self.h + h) * self.w + w) * self.c + c
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    pub fn with_channels(&self, c: usize) -> Result<Self> {
        Shape::new(self.n, self.h, self.w, c)
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.h, self.w, self.c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<Float>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: Float) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<Float>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "{} elements supplied for shape {shape} ({} expected)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Convenience constructor from raw dims.
    pub fn new(dims: [usize; 4], data: Vec<Float>) -> Result<Self> {
        Tensor::from_vec(Shape::new(dims[0], dims[1], dims[2], dims[3])?, data)
    }

    /// A `1x1x1xlen` vector.
    pub fn vector(data: Vec<Float>) -> Result<Self> {
        Tensor::new([1, 1, 1, data.len()], data)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, bound: Float, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| rng.random_range(-1.0..1.0) as Float * bound)
            .collect();
        Tensor { shape, data }
    }

    pub fn normal<R: Rng + ?Sized>(shape: Shape, std: Float, rng: &mut R) -> Self {
        let dist = Normal::new(0.0f64, 1.0).expect("unit normal");
        let data = (0..shape.numel())
            .map(|_| dist.sample(rng) as Float * std)
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[Float] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Float] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Float> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, n: usize, h: usize, w: usize, c: usize) -> Float {
        self.data[self.shape.offset(n, h, w, c)]
    }

    pub fn set(&mut self, n: usize, h: usize, w: usize, c: usize, v: Float) {
        let o = self.shape.offset(n, h, w, c);
        self.data[o] = v;
    }

    /// Channel vector of one pixel.
    #[inline]
    pub fn pixel(&self, n: usize, h: usize, w: usize) -> &[Float] {
        let o = self.shape.offset(n, h, w, 0);
        &self.data[o..o + self.shape.c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, n: usize, h: usize, w: usize) -> &mut [Float] {
        let o = self.shape.offset(n, h, w, 0);
        let c = self.shape.c;
        &mut self.data[o..o + c]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(Float) -> Float) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(Float, Float) -> Float) -> Result<Tensor> {
        self.expect_shape(other.shape, "zip_map")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_shape(other.shape, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: Float) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> Float {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<Float> {
        self.expect_shape(other.shape, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> Float {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<Float> {
        self.expect_shape(other.shape, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn expect_shape(&self, shape: Shape, what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(format!(
                "{what}: expected {shape}, got {}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Position of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Batch item `i` as a standalone `1xHxWxC` tensor.
    pub fn item(&self, i: usize) -> Result<Tensor> {
        if i >= self.shape.n {
            return Err(Error::shape(format!(
                "batch index {i} out of range for {}",
                self.shape
            )));
        }
        let per = self.shape.h * self.shape.w * self.shape.c;
        Ok(Tensor {
            shape: Shape { n: 1, ..self.shape },
            data: self.data[i * per..(i + 1) * per].to_vec(),
        })
    }

    /// Stacks tensors of equal `HxWxC` along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack of zero tensors"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in items {
            let ts = t.shape;
            if (ts.h, ts.w, ts.c) != (s.h, s.w, s.c) {
                return Err(Error::shape(format!("stack: {ts} does not match {s}")));
            }
            n += ts.n;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(Shape::new(n, s.h, s.w, s.c)?, data)
    }

    /// Channels `[start, start + len)` of every pixel.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let c = self.shape.c;
        if len == 0 || start + len > c {
            return Err(Error::shape(format!(
                "channel slice [{start}, {}) out of range for {c} channels",
                start + len
            )));
        }
        let pixels = self.len() / c;
        let mut data = Vec::with_capacity(pixels * len);
        for p in 0..pixels {
            data.extend_from_slice(&self.data[p * c + start..p * c + start + len]);
        }
        Tensor::from_vec(self.shape.with_channels(len)?, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * std::mem::size_of::<Float>());
        self.write_to(&mut out).expect("write to Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        let mut cursor = bytes;
        let t = Tensor::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after tensor",
                cursor.len()
            )));
        }
        Ok(t)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&TENSOR_VERSION.to_le_bytes())?;
        w.write_all(&PRECISION_BITS.to_le_bytes())?;
        for d in self.shape.dims() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header).map_err(truncated)?;
        if &header[0..4] != TENSOR_MAGIC {
            return Err(Error::Format("bad tensor magic".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != TENSOR_VERSION {
            return Err(Error::Format(format!("unsupported tensor version {version}")));
        }
        let bits = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if bits != PRECISION_BITS {
            return Err(Error::Format(format!(
                "tensor stored at {bits}-bit precision, this build uses {PRECISION_BITS}-bit"
            )));
        }
        let mut dims = [0usize; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            let o = 12 + 8 * i;
            *d = u64::from_le_bytes(header[o..o + 8].try_into().unwrap()) as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])
            .map_err(|e| Error::Format(e.to_string()))?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor dims overflow".into()))?;
        let width = std::mem::size_of::<Float>();
        let mut raw = vec![0u8; numel * width];
        r.read_exact(&mut raw).map_err(truncated)?;
        let data = raw
            .chunks_exact(width)
            .map(|b| Float::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Tensor { shape, data })
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated tensor data".into())
    } else {
        Error::Io(e)
    }
}

/// Channel-wise concatenation; input `i` occupies the `i`-th contiguous channel span.
pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?;
    let s = first.shape;
    let mut total_c = 0;
    for t in xs {
        let ts = t.shape;
        if (ts.n, ts.h, ts.w) != (s.n, s.h, s.w) {
            return Err(Error::shape(format!(
                "concat: spatial/batch mismatch {ts} vs {s}"
            )));
        }
        total_c += ts.c;
    }
    let pixels = s.n * s.h * s.w;
    let mut data = Vec::with_capacity(pixels * total_c);
    for p in 0..pixels {
        for t in xs {
            let c = t.shape.c;
            data.extend_from_slice(&t.data[p * c..(p + 1) * c]);
        }
    }
    Tensor::from_vec(s.with_channels(total_c)?, data)
}

/// Inverse of [`concat_channels`]: splits into consecutive channel spans.
pub fn split_channels(x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let total: usize = sizes.iter().sum();
    if total != x.shape.c {
        return Err(Error::shape(format!(
            "split sizes sum to {total}, tensor has {} channels",
            x.shape.c
        )));
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &len in sizes {
        out.push(x.slice_channels(start, len)?);
        start += len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(n: usize, h: usize, w: usize, c: usize) -> Shape {
        Shape::new(n, h, w, c).unwrap()
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(Shape::new(1, 0, 2, 2).is_err());
        assert!(Tensor::new([1, 2, 2, 1], vec![0.0; 3]).is_err());
    }

    #[test]
    fn concat_single_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::uniform(shape(2, 3, 2, 4), 1.0, &mut rng);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
    }

    #[test]
    fn concat_two_places_first_in_low_channels() {
        let a = Tensor::full(shape(1, 2, 2, 3), 1.0);
        let b = Tensor::full(shape(1, 2, 2, 3), 2.0);
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), shape(1, 2, 2, 6));
        for h in 0..2 {
            for w in 0..2 {
                assert_eq!(y.pixel(0, h, w), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
            }
        }
    }

    #[test]
    fn concat_then_slice_recovers_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let parts: Vec<Tensor> = [1, 4, 2]
            .iter()
            .map(|&c| Tensor::uniform(shape(2, 3, 3, c), 1.0, &mut rng))
            .collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        let y = concat_channels(&refs).unwrap();
        let back = split_channels(&y, &[1, 4, 2]).unwrap();
        assert_eq!(back, parts);
    }

    #[test]
    fn concat_spatial_mismatch_errors() {
        let a = Tensor::zeros(shape(1, 2, 2, 1));
        let b = Tensor::zeros(shape(1, 3, 2, 1));
        assert!(matches!(concat_channels(&[&a, &b]), Err(Error::Shape(_))));
    }

    #[test]
    fn serialization_header_layout() {
        let t = Tensor::new([1, 1, 2, 1], vec![1.5, -2.0]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[0..4], b"AAPT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), PRECISION_BITS);
        assert_eq!(u64::from_le_bytes(b[28..36].try_into().unwrap()), 2);
        assert_eq!(b.len(), 44 + 2 * std::mem::size_of::<Float>());
        assert_eq!(Tensor::from_bytes(&b).unwrap(), t);
    }

    #[test]
    fn corrupted_or_truncated_bytes_rejected() {
        let t = Tensor::full(shape(1, 2, 2, 2), 3.0);
        let mut b = t.to_bytes();
        assert!(Tensor::from_bytes(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(matches!(Tensor::from_bytes(&b), Err(Error::Format(_))));
    }

    proptest::proptest! {
        #[test]
        fn serialization_round_trips_bit_exactly(
            dims in (1usize..3, 1usize..4, 1usize..4, 1usize..5),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = shape(dims.0, dims.1, dims.2, dims.3);
            let t = Tensor::normal(s, 3.0, &mut rng);
            let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
            proptest::prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            proptest::prop_assert_eq!(back.shape(), s);
        }
    }
}
