//! Config file schema, `--set` overrides and dataset loading.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use oso_dpsgd::data::{
    load_idx, read_idx_dims, synth_classification, Dataset, IDX_IMAGES_MAGIC,
};
use oso_dpsgd::gridsearch::GridSpec;
use oso_dpsgd::numeric::RngStream;
use oso_dpsgd::trainer::{CosineSweep, TrainConfig};

use crate::CliError;

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of the samples held out as the test set.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub autoencode: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxData {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default)]
    pub autoencode: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticData),
    Idx(IdxData),
}

impl SyntheticData {
    fn test_len(&self) -> usize {
        (self.n as f64 * self.test_fraction).round() as usize
    }

    fn check(&self) -> Result<(), CliError> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(CliError::config("data.synthetic.test_fraction", "must be in (0, 1)"));
        }
        let test = self.test_len();
        if test == 0 || test >= self.n {
            return Err(CliError::config(
                "data.synthetic.n",
                "too small for a nonempty train/test split",
            ));
        }
        Ok(())
    }
}

impl DataSource {
    /// Training-set size from metadata alone.
    pub fn train_len(&self) -> Result<usize, CliError> {
        match self {
            DataSource::Synthetic(s) => {
                s.check()?;
                Ok(s.n - s.test_len())
            }
            DataSource::Idx(d) => Ok(read_idx_dims(&d.train_images, IDX_IMAGES_MAGIC)?[0]),
        }
    }

    pub fn load(&self) -> Result<(Dataset, Dataset), CliError> {
        let (train, test, auto) = match self {
            DataSource::Synthetic(s) => {
                s.check()?;
                let mut rng = RngStream::new(s.seed, 0);
                let all = synth_classification(s.n, s.dim, s.classes, s.separation, &mut rng)?;
                let (tr, te) = all.split_at(s.n - s.test_len())?;
                (tr, te, s.autoencode)
            }
            DataSource::Idx(d) => (
                load_idx(&d.train_images, &d.train_labels)?,
                load_idx(&d.test_images, &d.test_labels)?,
                d.autoencode,
            ),
        };
        Ok(if auto {
            (train.into_autoencoding(), test.into_autoencoding())
        } else {
            (train, test)
        })
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let DataSource::Idx(d) = self {
            for p in [
                &mut d.train_images,
                &mut d.train_labels,
                &mut d.test_images,
                &mut d.test_labels,
            ] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
}

/// Top-level config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub data: DataSource,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub cosine: Option<CosineSweep>,
}

const SECTIONS: [&str; 4] = ["data", "train", "grid", "cosine"];

fn parse_override(raw: &str) -> Result<(String, Value), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{raw}` is not of the form key=value")))?;
    if key.is_empty() {
        return Err(CliError::Usage(format!("override `{raw}` has an empty key")));
    }
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.to_string(), value))
}

/// Sets `path` in `root`. Every segment must name an existing key, except
/// below a `null`, which is replaced by an object.
fn set_path(root: &mut Value, full_key: &str, path: &[&str], value: Value) -> Result<(), CliError> {
    let unknown = || CliError::Usage(format!("unknown config key `{full_key}`"));
    let mut cur = root;
    for (i, seg) in path.iter().enumerate() {
        if cur.is_null() {
            *cur = Value::Object(Default::default());
            let obj = cur.as_object_mut().expect("just created");
            obj.insert((*seg).to_string(), Value::Null);
        }
        let obj = cur.as_object_mut().ok_or_else(unknown)?;
        let next = obj.get_mut(*seg).ok_or_else(unknown)?;
        if i + 1 == path.len() {
            *next = value;
            return Ok(());
        }
        cur = next;
    }
    Err(unknown())
}

/// Parses a config file and applies overrides relative to `section`.
pub fn load_config(path: &Path, section: &str, overrides: &[String]) -> Result<(ConfigFile, Value), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let parsed: ConfigFile = serde_json::from_str(&text).map_err(|e| CliError::json(path, e))?;
    // round trip so that defaulted keys exist and can be overridden
    let mut value = serde_json::to_value(&parsed).map_err(|e| CliError::json(path, e))?;
    for raw in overrides {
        let (key, v) = parse_override(raw)?;
        let mut segs: Vec<&str> = key.split('.').collect();
        if !SECTIONS.contains(&segs[0]) {
            segs.insert(0, section);
        }
        set_path(&mut value, &key, &segs, v)?;
    }
    let mut config: ConfigFile = serde_json::from_value(value.clone()).map_err(|e| CliError::json(path, e))?;
    if let Some(dir) = path.parent() {
        config.data.resolve_paths(dir);
    }
    Ok((config, value))
}
