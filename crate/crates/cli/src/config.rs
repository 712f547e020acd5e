//! Training settings: built-in preset, then config file, then flags.

use std::path::Path;

use fpdg::model::Variant;
use fpdg::training::{Precision, TrainConfig};
use serde_json::Value;

use crate::{Failure, PrecisionArg, TrainOverrides};

fn merge_file(base: &TrainConfig, path: &Path) -> Result<TrainConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let file: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
    let Value::Object(file) = file else {
        return Err(Failure::Usage(format!("config {} must be a JSON object", path.display())));
    };
    let mut merged = serde_json::to_value(base)?;
    let fields = merged.as_object_mut().expect("config serializes to an object");
    for (k, v) in file {
        if !fields.contains_key(&k) {
            return Err(Failure::Usage(format!("config {}: unknown setting `{k}`", path.display())));
        }
        fields.insert(k, v);
    }
    serde_json::from_value(merged).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
}

pub fn resolve(o: &TrainOverrides, variant: Option<&str>) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::preset(o.preset.as_deref().unwrap_or("desk"))?;
    if let Some(path) = &o.config {
        cfg = merge_file(&cfg, path)?;
    }
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = o.$field { cfg.$field = v; })*
        };
    }
    set!(dim, batch_size, epochs, lr, lambda_final, lambda_warmup, tau, seed, val_fraction);
    if let Some(m) = o.max_steps {
        cfg.max_steps = Some(m);
    }
    if let Some(p) = o.precision {
        cfg.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    if let Some(v) = variant {
        cfg.variant = Variant::parse(v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
