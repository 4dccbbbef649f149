//! Training checkpoints: parameters, optimizer moments, progress and the
//! validation history, stored in one archive.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diff::archive::{Archive, Record};
use crate::diff::{AdamConfig, AdamState, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{inventory, Model, ModelDims, ModelOptions};

const KIND: &str = "rdrsr-checkpoint";
const HISTORY: &str = "history";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub epoch: usize,
    pub hr_10: f64,
    pub ndcg_10: f64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<ValidationPoint>,
}

fn bits(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn unbits(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::Checkpoint(format!("bad float field `{s}`")))
}

struct Meta<'a>(&'a Archive);

impl Meta<'_> {
    fn get(&self, key: &str) -> Result<&str> {
        self.0
            .meta_value(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing field `{key}`")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value `{v}` for `{key}`")))
    }
}

impl Checkpoint {
    /// Hash of the configuration that produced this checkpoint.
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn to_archive(&self) -> Archive {
        let d = &self.model.dims;
        let o = &self.model.options;
        let a = &self.adam.config;
        let mut meta: Vec<(String, String)> = vec![
            ("kind".into(), KIND.into()),
            ("epoch".into(), self.epoch.to_string()),
            ("config_hash".into(), self.config_hash()),
            ("dims.items".into(), d.items.to_string()),
            ("dims.users".into(), d.users.to_string()),
            ("dims.d".into(), d.d.to_string()),
            ("dims.t".into(), d.t.to_string()),
            ("dims.k".into(), d.k.to_string()),
            ("dims.num_blocks".into(), d.num_blocks.to_string()),
            ("dims.attn_hidden".into(), d.attn_hidden.to_string()),
            ("dims.policy_hidden".into(), d.policy_hidden.to_string()),
            ("options.temperature".into(), bits(o.temperature)),
            ("options.pooling".into(), o.pooling.key().into()),
            (
                "options.fixed_h".into(),
                o.fixed_h.map_or_else(|| "none".into(), |h| h.to_string()),
            ),
            ("adam.lr".into(), bits(a.lr)),
            ("adam.beta1".into(), bits(a.beta1)),
            ("adam.beta2".into(), bits(a.beta2)),
            ("adam.eps".into(), bits(a.eps)),
            ("adam.step".into(), self.adam.step_count().to_string()),
        ];
        for line in self.config.to_text().lines() {
            if let Some((k, v)) = line.split_once('=') {
                meta.push((format!("config.{}", k.trim()), v.trim().to_string()));
            }
        }
        let mut records = vec![Record {
            name: HISTORY.into(),
            rows: self.history.len(),
            cols: 3,
            values: self
                .history
                .iter()
                .flat_map(|p| [p.epoch as f64, p.hr_10, p.ndcg_10])
                .collect(),
        }];
        for (_, name, t) in self.model.store.iter() {
            records.push(Record {
                name: name.to_string(),
                rows: t.rows(),
                cols: t.cols(),
                values: t.data().to_vec(),
            });
        }
        for (prefix, moments) in [("adam.m.", self.adam.first_moments()), ("adam.v.", self.adam.second_moments())] {
            for ((_, name, t), values) in self.model.store.iter().zip(moments) {
                records.push(Record {
                    name: format!("{prefix}{name}"),
                    rows: t.rows(),
                    cols: t.cols(),
                    values: values.clone(),
                });
            }
        }
        Archive { meta, records }
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let m = Meta(archive);
        if m.get("kind")? != KIND {
            return Err(Error::Checkpoint("archive is not a checkpoint".into()));
        }
        let mut config = RunConfig::default();
        for (k, v) in &archive.meta {
            if let Some(key) = k.strip_prefix("config.") {
                config.set(key, v)?;
            }
        }
        let dims = ModelDims {
            items: m.num("dims.items")?,
            users: m.num("dims.users")?,
            d: m.num("dims.d")?,
            t: m.num("dims.t")?,
            k: m.num("dims.k")?,
            num_blocks: m.num("dims.num_blocks")?,
            attn_hidden: m.num("dims.attn_hidden")?,
            policy_hidden: m.num("dims.policy_hidden")?,
        };
        let options = ModelOptions {
            temperature: unbits(m.get("options.temperature")?)?,
            pooling: m.get("options.pooling")?.parse()?,
            fixed_h: match m.get("options.fixed_h")? {
                "none" => None,
                _ => Some(m.num("options.fixed_h")?),
            },
        };
        let record = |name: &str, rows: usize, cols: usize| -> Result<&Record> {
            let r = archive
                .record(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing record `{name}`")))?;
            if (r.rows, r.cols) != (rows, cols) {
                return Err(Error::Checkpoint(format!(
                    "record `{name}` is {}x{}, expected {rows}x{cols}",
                    r.rows, r.cols
                )));
            }
            Ok(r)
        };
        let mut store = ParamStore::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (name, rows, cols, _) in inventory(&dims) {
            let r = record(&name, rows, cols)?;
            store.insert(name.clone(), Tensor::from_vec(rows, cols, r.values.clone())?);
            first.push(record(&format!("adam.m.{name}"), rows, cols)?.values.clone());
            second.push(record(&format!("adam.v.{name}"), rows, cols)?.values.clone());
        }
        let model = Model::from_store(dims, options, store)?;
        let adam = AdamState::from_parts(
            AdamConfig {
                lr: unbits(m.get("adam.lr")?)?,
                beta1: unbits(m.get("adam.beta1")?)?,
                beta2: unbits(m.get("adam.beta2")?)?,
                eps: unbits(m.get("adam.eps")?)?,
            },
            m.num("adam.step")?,
            first,
            second,
        );
        let h = archive
            .record(HISTORY)
            .filter(|r| r.cols == 3)
            .ok_or_else(|| Error::Checkpoint("missing validation history".into()))?;
        let history = h
            .values
            .chunks(3)
            .map(|c| ValidationPoint {
                epoch: c[0] as usize,
                hr_10: c[1],
                ndcg_10: c[2],
            })
            .collect();
        let ck = Checkpoint {
            config,
            model,
            adam,
            epoch: m.num("epoch")?,
            history,
        };
        if ck.config_hash() != m.get("config_hash")? {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        Ok(ck)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.to_archive().write_to(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_archive(&Archive::read_from(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        self.to_archive().write_to(BufWriter::new(file))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::from_archive(&Archive::read_from(BufReader::new(file))?)
    }
}
