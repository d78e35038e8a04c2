//! `CENCKPT1` files: step, config echo and a named tensor table holding
//! parameters, momentum buffers and running statistics.

use std::path::Path;

use cen_autograd::Element;

use crate::codec::{put_string, put_u32, Reader};
use crate::error::{CenError, Result};
use crate::models::ModelAssembly;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CENCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub step: u64,
    pub config: String,
    pub entries: Vec<Entry<T>>,
}

impl<T: Element> Checkpoint<T> {
    /// Snapshot in a stable order: parameters (store order), their momentum
    /// buffers, then running statistics bank by bank.
    pub fn capture(assembly: &ModelAssembly<T>, step: u64, config: &str) -> Self {
        let mut entries = Vec::new();
        for (_, p) in assembly.store.iter() {
            entries.push(Entry { name: p.name.clone(), dims: p.value.shape().to_vec(), data: p.value.data().to_vec() });
        }
        for (_, p) in assembly.store.iter() {
            entries.push(Entry { name: format!("{}.velocity", p.name), dims: p.value.shape().to_vec(), data: p.velocity.clone() });
        }
        for bank in &assembly.banks {
            let label = bank.key.label();
            let parts = [("enc", &bank.encoder), ("dec", &bank.decoder)];
            for (tag, norms) in parts {
                for (l, n) in norms.iter().enumerate() {
                    let c = n.channels();
                    let prefix = format!("bank.{label}.{tag}{l}");
                    entries.push(Entry { name: format!("{prefix}.running_mean"), dims: vec![c], data: n.running_mean.clone() });
                    entries.push(Entry { name: format!("{prefix}.running_var"), dims: vec![c], data: n.running_var.clone() });
                }
            }
        }
        Checkpoint { step, config: config.to_string(), entries }
    }

    /// Writes every entry back; names and shapes must match exactly.
    pub fn restore(&self, assembly: &mut ModelAssembly<T>) -> Result<()> {
        let expected = Checkpoint::capture(assembly, self.step, &self.config);
        if expected.entries.len() != self.entries.len() {
            return Err(CenError::Format(format!(
                "checkpoint has {} entries, model expects {}",
                self.entries.len(),
                expected.entries.len()
            )));
        }
        for (e, x) in self.entries.iter().zip(&expected.entries) {
            if e.name != x.name || e.dims != x.dims {
                return Err(CenError::Format(format!("checkpoint entry {} {:?} does not match model entry {} {:?}", e.name, e.dims, x.name, x.dims)));
            }
        }
        let mut it = self.entries.iter();
        let ids: Vec<_> = assembly.store.iter().map(|(id, _)| id).collect();
        for &id in &ids {
            assembly.store.get_mut(id).value.data_mut().copy_from_slice(&it.next().unwrap().data);
        }
        for &id in &ids {
            assembly.store.get_mut(id).velocity.copy_from_slice(&it.next().unwrap().data);
        }
        for bank in &mut assembly.banks {
            for n in bank.encoder.iter_mut().chain(bank.decoder.iter_mut()) {
                n.running_mean.copy_from_slice(&it.next().unwrap().data);
                n.running_var.copy_from_slice(&it.next().unwrap().data);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&self.step.to_le_bytes());
        put_string(&mut out, &self.config)?;
        put_string(&mut out, T::DTYPE)?;
        put_u32(&mut out, self.entries.len())?;
        for e in &self.entries {
            put_string(&mut out, &e.name)?;
            put_u32(&mut out, e.dims.len())?;
            for &d in &e.dims {
                put_u32(&mut out, d)?;
            }
            for &v in &e.data {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "checkpoint");
        if r.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
            return Err(CenError::Format("not a checkpoint (bad magic)".into()));
        }
        let step = r.u64()?;
        let config = r.string()?;
        let dtype = r.string()?;
        if dtype != T::DTYPE {
            return Err(CenError::Format(format!("checkpoint holds {dtype} values, expected {}", T::DTYPE)));
        }
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count.min(1 << 12));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CenError::Format("checkpoint entry size overflow".into()))?;
            let data = r.array(numel, T::BYTES, T::read_le)?;
            entries.push(Entry { name, dims, data });
        }
        r.finish()?;
        Ok(Checkpoint { step, config, entries })
    }
}

pub fn save_checkpoint<T: Element>(assembly: &ModelAssembly<T>, step: u64, config: &str, path: &Path) -> Result<()> {
    std::fs::write(path, Checkpoint::capture(assembly, step, config).to_bytes()?)?;
    Ok(())
}

/// Restores `assembly` from `path`; returns the step and config echo.
pub fn load_checkpoint<T: Element>(assembly: &mut ModelAssembly<T>, path: &Path) -> Result<(u64, String)> {
    let ck = Checkpoint::<T>::from_bytes(&std::fs::read(path)?)?;
    ck.restore(assembly)?;
    Ok((ck.step, ck.config))
}
