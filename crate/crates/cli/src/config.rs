//! Optional TOML run configuration. Every key mirrors a command-line flag;
//! a flag given on the command line overrides the file.

use std::path::{Path, PathBuf};

use panelcf::data::Schema;
use panelcf::PanelError;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub method: Option<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub bootstrap: Option<usize>,
    pub intercept: Option<bool>,
    pub p_bar: Option<f64>,
    pub mode: Option<String>,
    pub x_bar: Option<Vec<Vec<f64>>>,
    pub k: Option<usize>,
    pub delta: Option<f64>,
    pub schema: Option<SchemaConfig>,
    pub mc: Option<McConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    pub id: Option<String>,
    pub t: Option<String>,
    pub y: Option<String>,
    pub x: Option<Vec<String>>,
    pub z: Option<Vec<String>>,
    #[serde(default)]
    pub w: Option<Vec<String>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub preset: Option<String>,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub estimators: Option<Vec<String>>,
}

pub fn load(path: Option<&Path>) -> Result<FileConfig, PanelError> {
    let Some(p) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(p).map_err(|e| PanelError::Config(format!("{}: {e}", p.display())))?;
    toml::from_str(&text).map_err(|e| PanelError::Config(format!("{}: {e}", p.display())))
}

/// Schema from flags over file over header inference. Returns None when
/// nothing was specified, leaving inference to the loader.
pub fn schema(
    file: Option<&SchemaConfig>,
    id: Option<String>,
    t: Option<String>,
    y: Option<String>,
    x: Option<Vec<String>>,
    z: Option<Vec<String>>,
    w: Option<Vec<String>>,
) -> Result<Option<Schema>, PanelError> {
    let empty = SchemaConfig::default();
    let f = file.unwrap_or(&empty);
    let id = id.or_else(|| f.id.clone());
    let t = t.or_else(|| f.t.clone());
    let y = y.or_else(|| f.y.clone());
    let x = x.or_else(|| f.x.clone());
    let z = z.or_else(|| f.z.clone());
    let w = w.or_else(|| f.w.clone());
    if id.is_none() && t.is_none() && y.is_none() && x.is_none() && z.is_none() && w.is_none() {
        return Ok(None);
    }
    match (x, z) {
        (Some(x), Some(z)) => Ok(Some(Schema {
            id: id.unwrap_or_else(|| "id".into()),
            t: t.unwrap_or_else(|| "t".into()),
            y: y.unwrap_or_else(|| "y".into()),
            x,
            z,
            w: w.unwrap_or_default(),
        })),
        _ => Err(PanelError::Config("a column mapping needs both x and z columns".into())),
    }
}
