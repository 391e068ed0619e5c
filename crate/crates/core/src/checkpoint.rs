//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic `MMNC`, format version (u32), mode and flag bytes, then the
//! header counts (types, scenarios, hidden layers, embedding dim, slots,
//! fields, step) as u64, the hidden layer widths, the field names and domain
//! codes as length-prefixed UTF-8, and finally every parameter and Adagrad
//! accumulator as f64: embedding, CTR tower, shared set, type sets, scenario
//! sets.

use std::path::Path;

use crate::data::write_atomic;
use crate::domains::DomainRegistry;
use crate::error::{Error, Result};
use crate::features::{EmbeddingTable, FeatureEncoder, Schema};
use crate::model::{MmnModel, ModelMode};
use crate::network::{ParamSet, Tower, TowerArchitecture};
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"MMNC";
pub const FORMAT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn params(&mut self, p: &ParamSet) {
        for s in p.slices() {
            self.f64s(s);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v < (1 << 40))
            .ok_or_else(|| Error::Checkpoint(format!("implausible {what}: {v}")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }

    fn strs(&mut self, n: usize) -> Result<Vec<String>> {
        (0..n).map(|_| self.str()).collect()
    }

    fn f64s(&mut self, out: &mut [f64]) -> Result<()> {
        let bytes = self.take(out.len() * 8)?;
        for (v, b) in out.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
        Ok(())
    }

    fn params(&mut self, shape: &ParamSet) -> Result<ParamSet> {
        let mut p = shape.clone();
        for s in p.slices_mut() {
            self.f64s(s)?;
        }
        Ok(p)
    }

    fn tower(&mut self, shape: &ParamSet) -> Result<Tower> {
        let params = self.params(shape)?;
        let accum = self.params(shape)?;
        Ok(Tower { params, accum })
    }
}

impl MmnModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u8(self.mode.code());
        w.u8(self.ctr_domain_features as u8);
        w.u64(self.registry.num_types() as u64);
        w.u64(self.registry.num_scenarios() as u64);
        w.u64(self.layer_units.len() as u64);
        w.u64(self.embedding.dim() as u64);
        w.u64(self.encoder.num_slots as u64);
        w.u64(self.encoder.schema.len() as u64);
        w.u64(self.step);
        for &u in &self.layer_units {
            w.u64(u as u64);
        }
        for s in self
            .encoder
            .schema
            .fields()
            .iter()
            .chain(self.registry.types())
            .chain(self.registry.scenarios())
        {
            w.str(s);
        }
        w.f64s(self.embedding.weights().data());
        w.f64s(self.embedding.accumulators().data());
        for t in self.ctr.iter().chain([&self.base]).chain(&self.types).chain(&self.scenarios) {
            w.params(&t.params);
            w.params(&t.accum);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mode = ModelMode::from_code(r.u8()?).ok_or_else(|| Error::Checkpoint("unknown mode".into()))?;
        let ctr_domain_features = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::Checkpoint(format!("bad flag byte {v}"))),
        };
        let num_types = r.usize("type count")?;
        let num_scenarios = r.usize("scenario count")?;
        let num_layers = r.usize("layer count")?;
        let dim = r.usize("embedding dim")?;
        let num_slots = r.usize("slot count")?;
        let num_fields = r.usize("field count")?;
        let step = r.u64()?;
        let layer_units = (0..num_layers).map(|_| r.usize("layer width")).collect::<Result<Vec<_>>>()?;
        let schema = Schema::new(r.strs(num_fields)?)?;
        let registry = DomainRegistry::new(r.strs(num_types)?, r.strs(num_scenarios)?)?;
        let encoder = FeatureEncoder::new(schema, num_slots)?;

        let table_len = num_slots
            .checked_mul(dim)
            .filter(|&n| n * 8 <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("embedding table larger than file".into()))?;
        let mut weights = vec![0.0; table_len];
        let mut accum = vec![0.0; table_len];
        r.f64s(&mut weights)?;
        r.f64s(&mut accum)?;
        let embedding = EmbeddingTable::from_parts(
            Matrix::new(num_slots, dim, weights)?,
            Matrix::new(num_slots, dim, accum)?,
        )?;

        let width = (num_fields + if mode.domain_features() { 2 } else { 0 }) * dim;
        let ctr_width = (num_fields + if mode.domain_features() || ctr_domain_features { 2 } else { 0 }) * dim;
        let cvr_shape = ParamSet::zeros(&TowerArchitecture::new(width, layer_units.clone())?);
        let ctr = if mode.has_ctr_tower() {
            let shape = ParamSet::zeros(&TowerArchitecture::new(ctr_width, layer_units.clone())?);
            Some(r.tower(&shape)?)
        } else {
            None
        };
        let base = r.tower(&cvr_shape)?;
        let (nt, ns) = if mode.has_domain_params() { (num_types, num_scenarios) } else { (0, 0) };
        let types = (0..nt).map(|_| r.tower(&cvr_shape)).collect::<Result<Vec<_>>>()?;
        let scenarios = (0..ns).map(|_| r.tower(&cvr_shape)).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        MmnModel::from_parts(
            mode,
            registry,
            encoder,
            embedding,
            layer_units,
            ctr_domain_features,
            (ctr, base, types, scenarios),
            step,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, MiniBatch, SyntheticSpec};
    use crate::model::{ModelConfig, TrainParams};

    fn trained(mode: ModelMode) -> MmnModel {
        let mut spec = SyntheticSpec::neutral(3, 2, 40, 1);
        spec.num_fields = 2;
        let log = generate(&spec).unwrap();
        let config = ModelConfig {
            mode,
            layer_units: vec![4, 3],
            embedding_dim: 2,
            num_slots: 31,
            seed: 5,
            ..ModelConfig::default()
        };
        let mut m = MmnModel::new(&config, log.schema.clone(), spec.registry()).unwrap();
        let inst = m.encode(&log.records).unwrap();
        let batch = MiniBatch::new(inst, m.registry()).unwrap();
        m.train_step(&batch, &TrainParams::default()).unwrap();
        m
    }

    #[test]
    fn round_trips_every_mode() {
        for mode in ModelMode::ALL {
            let m = trained(mode);
            let bytes = m.to_bytes();
            let back = MmnModel::from_bytes(&bytes).unwrap();
            assert_eq!(back, m, "{mode}");
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = trained(ModelMode::Mmn);
        m.save(&path).unwrap();
        assert_eq!(MmnModel::load(&path).unwrap(), m);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = trained(ModelMode::Mmn).to_bytes();
        assert!(MmnModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(MmnModel::from_bytes(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(MmnModel::from_bytes(&bad).is_err());
        let mut ver = bytes;
        ver[4] = 9;
        assert!(MmnModel::from_bytes(&ver).is_err());
        assert!(MmnModel::from_bytes(&[]).is_err());
    }
}
