//! Raw little-endian array container shared by datasets and checkpoints.
//!
//! Layout: 16-byte header `"HVLA" | dtype u32 | ndim u32 | version u32`,
//! then `ndim` u32 dims, then the packed elements.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Mat;

pub const MAGIC: [u8; 4] = *b"HVLA";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("unknown dtype code {0}")]
    DType(u32),
    #[error("expected dtype {expected:?}, found {found:?}")]
    WrongDType { expected: DType, found: DType },
    #[error("expected rank {expected}, found {found}")]
    Rank { expected: usize, found: usize },
    #[error("truncated payload")]
    Truncated,
    #[error("{0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
            DType::U8 => 3,
        }
    }

    pub fn from_code(c: u32) -> Result<Self, ContainerError> {
        match c {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            3 => Ok(DType::U8),
            _ => Err(ContainerError::DType(c)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    pub fn of<T: Scalar>() -> Self {
        Self::from_code(T::DTYPE_CODE).expect("scalar dtype code")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawArray {
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl RawArray {
    pub fn from_scalars<T: Scalar>(dims: Vec<usize>, data: &[T]) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "dims do not match data"
        );
        Self {
            dtype: DType::of::<T>(),
            dims,
            bytes: T::to_le_bytes_vec(data),
        }
    }

    pub fn from_f32(dims: Vec<usize>, data: &[f32]) -> Self {
        Self::from_scalars(dims, data)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self {
            dtype: DType::U8,
            dims: vec![bytes.len()],
            bytes,
        }
    }

    pub fn from_mat<T: Scalar>(m: &Mat<T>) -> Self {
        Self::from_scalars(vec![m.rows, m.cols], &m.data)
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_scalars<T: Scalar>(&self) -> Result<Vec<T>, ContainerError> {
        let want = DType::of::<T>();
        if self.dtype != want {
            return Err(ContainerError::WrongDType {
                expected: want,
                found: self.dtype,
            });
        }
        Ok(self
            .bytes
            .chunks_exact(want.size())
            .map(T::from_le_chunk)
            .collect())
    }

    pub fn to_mat<T: Scalar>(&self) -> Result<Mat<T>, ContainerError> {
        if self.dims.len() != 2 {
            return Err(ContainerError::Rank {
                expected: 2,
                found: self.dims.len(),
            });
        }
        Ok(Mat::from_vec(
            self.dims[0],
            self.dims[1],
            self.to_scalars()?,
        ))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), ContainerError> {
        w.write_all(&MAGIC)?;
        w.write_all(&self.dtype.code().to_le_bytes())?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
        for &d in &self.dims {
            let d = u32::try_from(d)
                .map_err(|_| ContainerError::Format(format!("dim {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&self.bytes)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, ContainerError> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes"));
        let magic: [u8; 4] = header[0..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(ContainerError::Magic(magic));
        }
        let dtype = DType::from_code(word(4))?;
        let ndim = word(8) as usize;
        let version = word(12);
        if version != CONTAINER_VERSION {
            return Err(ContainerError::Version(version));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            dims.push(u32::from_le_bytes(b) as usize);
        }
        let n: usize = dims.iter().product::<usize>() * dtype.size();
        let mut bytes = vec![0u8; n];
        r.read_exact(&mut bytes).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => ContainerError::Truncated,
            _ => ContainerError::Io(e),
        })?;
        Ok(Self { dtype, dims, bytes })
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
