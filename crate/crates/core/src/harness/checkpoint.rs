use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::Strategy;
use crate::csil::StageContext;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;

const FORMAT: &str = "csil-checkpoint";
const VERSION: u32 = 1;

/// Model parameters plus the context of the stage that produced them,
/// stored as JSON with round-trip-exact floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    pub strategy: Option<Strategy>,
    pub model: Model<T>,
    pub context: StageContext<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(strategy: Option<Strategy>, model: Model<T>, context: StageContext<T>) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            strategy,
            model,
            context,
        }
    }
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let w = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(w, ckpt)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let ckpt: Checkpoint<T> = serde_json::from_reader(r)?;
    if ckpt.format != FORMAT || ckpt.version != VERSION {
        return Err(Error::Format(format!(
            "not a version-{VERSION} checkpoint: {} v{}",
            ckpt.format, ckpt.version
        )));
    }
    if ckpt.context.masks.len() != ckpt.model.params().len() {
        return Err(Error::Format("checkpoint masks do not match its model".into()));
    }
    Ok(ckpt)
}
