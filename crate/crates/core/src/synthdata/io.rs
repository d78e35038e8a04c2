//! Binary dataset file: `CENDATA1`, then little-endian u32 header fields and
//! f32 sample arrays. See FORMATS.md for the layout.

use std::path::Path;

use super::dataset::{Dataset, Split, TaskKind};
use crate::batch::TargetKind;
use crate::codec::{put_u32, Reader};
use crate::error::{CenError, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"CENDATA1";

impl Dataset {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = DATASET_MAGIC.to_vec();
        put_u32(&mut out, self.kind.code() as usize)?;
        for v in [self.train.len, self.val.len, self.height, self.width, self.num_inputs(), self.target_kinds.len()] {
            put_u32(&mut out, v)?;
        }
        for t in &self.target_kinds {
            let (tag, classes) = match *t {
                TargetKind::Regression => (0, 0),
                TargetKind::Classes(c) => (1, c),
            };
            put_u32(&mut out, tag)?;
            put_u32(&mut out, classes)?;
        }
        for split in [&self.train, &self.val] {
            for arr in split.inputs.iter().chain(&split.targets) {
                for v in arr {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "dataset");
        if r.take(8).ok() != Some(&DATASET_MAGIC[..]) {
            return Err(CenError::Format("not a dataset file (bad magic)".into()));
        }
        let code = r.u32()?;
        let kind = TaskKind::from_code(code as u32).ok_or_else(|| CenError::Format(format!("unknown task kind code {code}")))?;
        let (n_train, n_val, height, width, n_inputs, n_targets) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        if n_inputs != kind.input_views().len() || n_targets != kind.targets().len() {
            return Err(CenError::Format(format!("{kind} expects {} inputs and {} targets", kind.input_views().len(), kind.targets().len())));
        }
        let mut target_kinds = Vec::with_capacity(n_targets);
        for _ in 0..n_targets {
            target_kinds.push(match (r.u32()?, r.u32()?) {
                (0, _) => TargetKind::Regression,
                (1, c) if c > 0 => TargetKind::Classes(c),
                (tag, c) => return Err(CenError::Format(format!("bad target descriptor ({tag}, {c})"))),
            });
        }
        let hw = height * width;
        let mut read_split = |n: usize| -> Result<Split> {
            let f32s = |r: &mut Reader| r.array(n * hw, 4, |c| f32::from_le_bytes(c.try_into().unwrap()));
            let inputs = (0..n_inputs).map(|_| f32s(&mut r)).collect::<Result<_>>()?;
            let targets = (0..n_targets).map(|_| f32s(&mut r)).collect::<Result<_>>()?;
            Ok(Split { len: n, inputs, targets })
        };
        let train = read_split(n_train)?;
        let val = read_split(n_val)?;
        r.finish()?;
        Ok(Dataset { kind, height, width, target_kinds, train, val })
    }
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset.to_bytes()?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&std::fs::read(path)?)
}
