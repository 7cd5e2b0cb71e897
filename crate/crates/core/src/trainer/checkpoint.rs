use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::DType;

use super::{MmgerConfig, MmgerModel, Trainer};
use crate::error::{Error, Result};
use crate::lm::FrozenLm;
use crate::optim::Adam;
use crate::tensor_io::{self, meta_get};

pub const CHECKPOINT_FORMAT: &str = "mmger-checkpoint/1";

fn parse<T: std::str::FromStr>(
    meta: &HashMap<String, String>,
    key: &str,
    path: &Path,
) -> Result<T> {
    meta_get(meta, key, path)?
        .parse()
        .map_err(|_| Error::invalid_state(format!("{}: malformed {key}", path.display())))
}

fn dtype_name(dtype: DType) -> &'static str {
    match dtype {
        DType::F64 => "f64",
        _ => "f32",
    }
}

impl Trainer {
    /// Writes trainable parameters, optimizer moments and run position.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let params = self.model.store().snapshot();
        let mut tensors: BTreeMap<String, _> = params.clone();
        tensors.extend(self.adam.state_tensors());
        let cfg = self.model.config();
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
        meta.insert("config".into(), serde_json::to_string(cfg)?);
        meta.insert("num_accents".into(), self.model.num_accents().to_string());
        meta.insert("dtype".into(), dtype_name(self.model.dtype()).into());
        meta.insert("position".into(), self.position.to_string());
        meta.insert("optimizer_step".into(), self.adam.step_count().to_string());
        meta.insert(
            "skipped_infeasible".into(),
            self.skipped_infeasible.to_string(),
        );
        meta.insert("seed".into(), cfg.trainer.seed.to_string());
        meta.insert("lm_checksum".into(), self.model.lm().checksum().to_string());
        meta.insert("params_checksum".into(), self.model.store().checksum()?);
        tensor_io::save(path, &tensors, meta)
    }

    /// Restores a run; `lm` must be the frozen model the checkpoint was trained against.
    pub fn load_checkpoint(path: &Path, lm: FrozenLm) -> Result<Self> {
        let (tensors, meta) = tensor_io::load(path)?;
        if meta_get(&meta, "format", path)? != CHECKPOINT_FORMAT {
            return Err(Error::invalid_state(format!(
                "{} is not an mmger checkpoint",
                path.display()
            )));
        }
        let expected_lm = meta_get(&meta, "lm_checksum", path)?;
        if lm.checksum() != expected_lm {
            return Err(Error::Checksum {
                what: format!("frozen LM referenced by {}", path.display()),
                expected: expected_lm.to_string(),
                found: lm.checksum().to_string(),
            });
        }
        let cfg: MmgerConfig = serde_json::from_str(meta_get(&meta, "config", path)?)?;
        let dtype = match meta_get(&meta, "dtype", path)? {
            "f64" => DType::F64,
            _ => DType::F32,
        };
        let num_accents: usize = parse(&meta, "num_accents", path)?;
        let model = MmgerModel::new(&cfg, lm, num_accents, dtype)?;
        let params: BTreeMap<_, _> = tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("adam."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        model.store().load(&params)?;
        let expected = meta_get(&meta, "params_checksum", path)?;
        let found = model.store().checksum()?;
        if found != expected {
            return Err(Error::Checksum {
                what: path.display().to_string(),
                expected: expected.to_string(),
                found,
            });
        }
        let adam = Adam::restore(
            cfg.trainer.optimizer.clone(),
            parse(&meta, "optimizer_step", path)?,
            &tensors,
            dtype,
        )?;
        Ok(Trainer::from_parts(
            model,
            adam,
            parse(&meta, "position", path)?,
            parse(&meta, "skipped_infeasible", path)?,
        ))
    }
}
