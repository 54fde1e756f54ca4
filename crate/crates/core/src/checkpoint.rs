//! Versioned binary checkpoint container.
//!
//! Layout (little-endian throughout): magic `SPKT`, format version u32,
//! canonical config text (u64 length + UTF-8), model dims (3 x u64), epoch
//! u64, validation AUC f64, RNG state (32-byte seed, u64 stream, u128 word
//! position), Adam step u64, then a counted list of named tensor blobs
//! (name, dtype tag, rows, cols, f64 payload). Parameters are stored as
//! f64 regardless of the in-memory scalar, which is lossless for f32.
//!
//! Invariant pinned by tests: save -> load reproduces forward outputs
//! bit-identically on the same input.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{config_from_text, config_to_text};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{ModelDims, ModelParams};
use crate::scalar::Scalar;
use crate::training::{Checkpoint, RngState};

pub const MAGIC: [u8; 4] = *b"SPKT";
pub const FORMAT_VERSION: u32 = 1;
/// dtype tag for f64 payloads (the only one defined so far).
const DTYPE_F64: u8 = 1;

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, m: &Matrix<T>) {
    put_bytes(out, name.as_bytes());
    out.push(DTYPE_F64);
    put_u64(out, m.rows() as u64);
    put_u64(out, m.cols() as u64);
    for &v in m.data() {
        out.extend_from_slice(&v.to_f64().to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Data("unexpected end of checkpoint file".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::Data("checkpoint contains invalid UTF-8".into()))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Matrix<T>)> {
        let name = self.string()?;
        let tag = self.u8()?;
        if tag != DTYPE_F64 {
            return Err(Error::Data(format!(
                "tensor {name}: unsupported dtype tag {tag}"
            )));
        }
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(T::from_f64(self.f64()?));
        }
        let m = Matrix::new(rows, cols, data)
            .map_err(|_| Error::Data(format!("tensor {name}: bad shape")))?;
        Ok((name, m))
    }
}

pub fn save_checkpoint<T: Scalar>(ck: &Checkpoint<T>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_bytes(&mut out, config_to_text(&ck.cfg).as_bytes());
    put_u64(&mut out, ck.params.dims.n_kcs as u64);
    put_u64(&mut out, ck.params.dims.n_questions as u64);
    put_u64(&mut out, ck.params.dims.l_max as u64);
    put_u64(&mut out, ck.epoch as u64);
    out.extend_from_slice(&ck.valid_auc.to_le_bytes());
    out.extend_from_slice(&ck.rng.seed);
    put_u64(&mut out, ck.rng.stream);
    out.extend_from_slice(&ck.rng.word_pos.to_le_bytes());
    put_u64(&mut out, ck.adam_t);

    let tensors = ck.params.tensors();
    let moments: Vec<(&'static str, Matrix<T>)> = vec![
        ("adam_m", Matrix::new(ck.adam_m.len(), 1, ck.adam_m.clone())?),
        ("adam_v", Matrix::new(ck.adam_v.len(), 1, ck.adam_v.clone())?),
    ];
    put_u64(&mut out, (tensors.len() + moments.len()) as u64);
    for (name, m) in &tensors {
        put_tensor(&mut out, name, m);
    }
    for (name, m) in &moments {
        put_tensor(&mut out, name, m);
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Data(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let cfg = config_from_text::<T>(&r.string()?)?;
    let dims = ModelDims {
        d: cfg.d,
        n_kcs: r.u64()? as usize,
        n_questions: r.u64()? as usize,
        l_max: r.u64()? as usize,
    };
    let epoch = r.u64()? as usize;
    let valid_auc = r.f64()?;
    let rng = RngState {
        seed: r.take(32)?.try_into().unwrap(),
        stream: r.u64()?,
        word_pos: r.u128()?,
    };
    let adam_t = r.u64()?;

    // skeleton with the right shapes; every tensor below must overwrite it
    let mut params =
        ModelParams::<T>::init(dims, cfg.flags, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected: Vec<&'static str> =
        params.tensors().iter().map(|(n, _)| *n).collect();

    let count = r.u64()? as usize;
    let mut adam_m: Option<Vec<T>> = None;
    let mut adam_v: Option<Vec<T>> = None;
    let mut seen = Vec::with_capacity(count);
    for _ in 0..count {
        let (name, m) = r.tensor::<T>()?;
        match name.as_str() {
            "adam_m" => adam_m = Some(m.into_data()),
            "adam_v" => adam_v = Some(m.into_data()),
            _ => {
                let mut slot = None;
                for (n, t) in params.tensors_mut() {
                    if n == name {
                        slot = Some(t);
                        break;
                    }
                }
                let Some(t) = slot else {
                    return Err(Error::Data(format!(
                        "checkpoint has unexpected tensor {name:?}"
                    )));
                };
                if t.rows() != m.rows() || t.cols() != m.cols() {
                    return Err(Error::Data(format!(
                        "tensor {name}: shape {}x{} does not match config {}x{}",
                        m.rows(),
                        m.cols(),
                        t.rows(),
                        t.cols()
                    )));
                }
                *t = m;
                seen.push(name);
            }
        }
    }
    for name in &expected {
        if !seen.iter().any(|s| s.as_str() == *name) {
            return Err(Error::Data(format!("checkpoint is missing tensor {name:?}")));
        }
    }
    let (Some(adam_m), Some(adam_v)) = (adam_m, adam_v) else {
        return Err(Error::Data("checkpoint is missing optimizer moments".into()));
    };
    if r.at != buf.len() {
        return Err(Error::Data("trailing bytes after checkpoint payload".into()));
    }
    Ok(Checkpoint { params, cfg, epoch, valid_auc, rng, adam_m, adam_v, adam_t })
}
