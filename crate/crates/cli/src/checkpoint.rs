//! Binary checkpoints: magic + version header, the canonical config echo,
//! epoch/step counters, RNG states, ordered parameter records (name, shape,
//! little-endian f64 payload) and Adam moments. A checkpoint is loadable
//! without the original config file and re-saves byte-identically.

use crate::error::{CliError, Result};
use std::io::{Read, Write};
use std::path::Path;
use tandem_core::Tensor;

const MAGIC: &[u8; 4] = b"TNDM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub epoch: u64,
    pub step: u64,
    /// train (dropout), data-order, teacher-phase data-order streams
    pub rng_states: [[u64; 4]; 3],
    pub params: Vec<(String, Tensor)>,
    pub adam_step: u64,
    pub moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64_slice(&mut self, vs: &[f64]) -> Result<()> {
        for v in vs {
            self.inner.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.u64(s.len() as u64)?;
        self.inner.write_all(s.as_bytes())?;
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CliError::Data("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CliError::Data("checkpoint holds invalid UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = std::fs::File::create(path)?;
        let mut w = Writer {
            inner: std::io::BufWriter::new(file),
        };
        w.inner.write_all(MAGIC)?;
        w.u32(VERSION)?;
        w.str(&self.config_text)?;
        w.u64(self.epoch)?;
        w.u64(self.step)?;
        for state in &self.rng_states {
            for &word in state {
                w.u64(word)?;
            }
        }
        w.u64(self.params.len() as u64)?;
        for (name, tensor) in &self.params {
            w.str(name)?;
            w.u32(tensor.rank() as u32)?;
            for &extent in tensor.shape() {
                w.u64(extent as u64)?;
            }
            w.f64_slice(tensor.data())?;
        }
        w.u64(self.adam_step)?;
        w.u64(self.moments.len() as u64)?;
        for (name, m, v) in &self.moments {
            w.str(name)?;
            w.u64(m.len() as u64)?;
            w.f64_slice(m)?;
            w.f64_slice(v)?;
        }
        w.inner.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| CliError::Data(format!("cannot open checkpoint {}: {e}", path.display())))?
            .read_to_end(&mut buf)?;
        let mut r = Reader { buf: &buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CliError::Data(format!(
                "{} is not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CliError::Data(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let config_text = r.str()?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let mut rng_states = [[0u64; 4]; 3];
        for state in &mut rng_states {
            for word in state.iter_mut() {
                *word = r.u64()?;
            }
        }
        let n_params = r.u64()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let data = r.f64_vec(n)?;
            let tensor = Tensor::new(shape, data)
                .map_err(|e| CliError::Data(format!("bad tensor record: {e}")))?;
            params.push((name, tensor.with_grad()));
        }
        let adam_step = r.u64()?;
        let n_moments = r.u64()? as usize;
        let mut moments = Vec::with_capacity(n_moments);
        for _ in 0..n_moments {
            let name = r.str()?;
            let n = r.u64()? as usize;
            let m = r.f64_vec(n)?;
            let v = r.f64_vec(n)?;
            moments.push((name, m, v));
        }
        if r.pos != buf.len() {
            return Err(CliError::Data("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint {
            config_text,
            epoch,
            step,
            rng_states,
            params,
            adam_step,
            moments,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tandem_core::Rng;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = Rng::new(3);
        Checkpoint {
            config_text: "task = classify\nseed = 3\n".into(),
            epoch: 2,
            step: 314,
            rng_states: [Rng::new(1).state(), Rng::new(2).state(), Rng::new(3).state()],
            params: vec![
                ("a.w".into(), Tensor::randn(&[3, 2], 1.0, &mut rng)),
                ("b.bias".into(), Tensor::randn(&[4], 1.0, &mut rng)),
                ("c.scalar".into(), Tensor::scalar(0.25)),
            ],
            adam_step: 314,
            moments: vec![("a.w".into(), vec![0.5; 6], vec![0.25; 6])],
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = std::env::temp_dir().join(format!("tandem-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.ckpt");
        let p2 = dir.join("b.ckpt");
        let ckpt = sample_checkpoint();
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        // values round-trip (modulo the requires-grad flag set on load)
        assert_eq!(loaded.config_text, ckpt.config_text);
        assert_eq!(loaded.step, ckpt.step);
        assert_eq!(loaded.rng_states, ckpt.rng_states);
        for ((n1, t1), (n2, t2)) in loaded.params.iter().zip(&ckpt.params) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.data(), t2.data());
        }
        loaded.save(&p2).unwrap();
        let (b1, b2) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(b1, b2, "re-save after load must be byte-identical");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_is_a_data_error() {
        let dir = std::env::temp_dir().join(format!("tandem-ckpt-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.ckpt");
        std::fs::write(&p, b"NOPE....").unwrap();
        match Checkpoint::load(&p) {
            Err(e) => assert_eq!(e.exit_code(), 2),
            Ok(_) => panic!("expected failure"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_file_is_a_data_error() {
        let err = Checkpoint::load(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
