//! Flat `key = value` run configuration files.
//!
//! A file starts from a named profile (`profile = "desk"` or `"paper"`, default
//! desk) and overrides individual constants:
//!
//! | key | meaning |
//! |-----|---------|
//! | `learning_rate`, `beta` | Adam step size, saliency L1 weight |
//! | `batch_size`, `max_epochs`, `patience`, `seed`, `tta` | optimization schedule |
//! | `parallel` | data-parallel global module |
//! | `pretrain_epochs` | auxiliary backbone pretraining (0 = off) |
//! | `pool_percent`, `num_patches`, `zeta`, `omega` | pooling `t`, `K`, `ζ` (integer or `"inf"`), init constant |
//! | `patch_size`, `attention_hidden` | patch side, attention size `L` |
//! | `global_widths`, `global_strides`, `norm_groups` | global backbone |
//! | `local_widths`, `local_strides`, `local_norm` | local encoder (`batch`, `group`, `none`) |
//! | `max_shift`, `max_resize` | augmentation bounds in pixels |
//! | `val_modulus` | every `val_modulus`-th group is held out for validation |
//! | `search_space` | `desk`, `paper3d` or `paper2d` |

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::{config_err, Error, Result};
use crate::training::{SearchMode, SearchSpace, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: String,
    pub train: TrainConfig,
    pub val_modulus: u32,
    pub search_space: String,
}

impl RunConfig {
    pub fn profile(name: &str) -> Result<Self> {
        let train = match name {
            "desk" | "desk-scale" => TrainConfig::desk(),
            "paper" | "paper-scale" => TrainConfig::paper(),
            _ => return config_err(format!("unknown profile `{name}` (expected desk or paper)")),
        };
        Ok(Self {
            profile: name.to_string(),
            train,
            val_modulus: 5,
            search_space: if name.starts_with("paper") { "paper3d" } else { "desk" }.to_string(),
        })
    }

    pub fn search(&self) -> Result<SearchSpace> {
        match self.search_space.as_str() {
            "desk" => Ok(SearchSpace::desk()),
            "paper3d" => Ok(SearchSpace::paper(SearchMode::ThreeD)),
            "paper2d" => Ok(SearchSpace::paper(SearchMode::TwoD)),
            s => config_err(format!("unknown search space `{s}`")),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: Table = text.parse().map_err(|e| Error::Config(format!("config file: {e}")))?;
        let profile = match table.get("profile") {
            Some(Value::String(s)) => s.clone(),
            Some(v) => return config_err(format!("`profile` must be a string, got {v}")),
            None => "desk".into(),
        };
        let mut cfg = Self::profile(&profile)?;
        for (key, value) in &table {
            cfg.set(key, value)?;
        }
        cfg.train.validate()?;
        cfg.search()?;
        if cfg.val_modulus < 2 {
            return config_err("val_modulus must be at least 2");
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &Value) -> Result<()> {
        fn get<V: DeserializeOwned>(key: &str, v: &Value) -> Result<V> {
            v.clone().try_into().map_err(|e| Error::Config(format!("`{key}`: {e}")))
        }
        let t = &mut self.train;
        let m = &mut t.model;
        match key {
            "profile" => {}
            "learning_rate" => t.learning_rate = get(key, value)?,
            "beta" => t.beta = get(key, value)?,
            "batch_size" => t.batch_size = get(key, value)?,
            "max_epochs" => t.max_epochs = get(key, value)?,
            "patience" => t.patience = get(key, value)?,
            "seed" => t.seed = get(key, value)?,
            "tta" => t.tta = get(key, value)?,
            "parallel" => t.parallel = get(key, value)?,
            "pretrain_epochs" => t.pretrain_epochs = get(key, value)?,
            "max_shift" => t.augment.max_shift = get(key, value)?,
            "max_resize" => t.augment.max_resize = get(key, value)?,
            "pool_percent" => m.pool_percent = get(key, value)?,
            "num_patches" => m.num_patches = get(key, value)?,
            "zeta" => m.zeta = get(key, value)?,
            "omega" => m.omega = get(key, value)?,
            "patch_size" => m.patch_size = get(key, value)?,
            "attention_hidden" => m.attention_hidden = get(key, value)?,
            "global_widths" => m.global.widths = get(key, value)?,
            "global_strides" => m.global.strides = get(key, value)?,
            "norm_groups" => m.global.norm_groups = get(key, value)?,
            "local_widths" => m.local.widths = get(key, value)?,
            "local_strides" => m.local.strides = get(key, value)?,
            "local_norm" => m.local.norm = get(key, value)?,
            "val_modulus" => self.val_modulus = get(key, value)?,
            "search_space" => self.search_space = get(key, value)?,
            _ => return config_err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every key with its current value; parsing the result gives back `self`.
    pub fn to_toml(&self) -> String {
        fn val<V: Serialize>(v: &V) -> Value {
            Value::try_from(v).expect("serializable config value")
        }
        let t = &self.train;
        let m = &t.model;
        let mut table = Table::new();
        let mut put = |k: &str, v: Value| {
            table.insert(k.to_string(), v);
        };
        put("profile", val(&self.profile));
        put("learning_rate", val(&t.learning_rate));
        put("beta", val(&t.beta));
        put("batch_size", val(&(t.batch_size as u64)));
        put("max_epochs", val(&(t.max_epochs as u64)));
        put("patience", val(&(t.patience as u64)));
        put("seed", Value::Integer(t.seed as i64));
        put("tta", val(&(t.tta as u64)));
        put("parallel", val(&t.parallel));
        put("pretrain_epochs", val(&(t.pretrain_epochs as u64)));
        put("max_shift", val(&t.augment.max_shift));
        put("max_resize", val(&t.augment.max_resize));
        put("pool_percent", val(&m.pool_percent));
        put("num_patches", val(&(m.num_patches as u64)));
        put("zeta", val(&m.zeta));
        put("omega", val(&m.omega));
        put("patch_size", val(&(m.patch_size as u64)));
        put("attention_hidden", val(&(m.attention_hidden as u64)));
        put("global_widths", val(&m.global.widths));
        put("global_strides", val(&m.global.strides));
        put("norm_groups", val(&(m.global.norm_groups as u64)));
        put("local_widths", val(&m.local.widths));
        put("local_strides", val(&m.local.strides));
        put("local_norm", val(&m.local.norm));
        put("val_modulus", val(&self.val_modulus));
        put("search_space", val(&self.search_space));
        toml::to_string(&table).expect("table serializes")
    }
}
