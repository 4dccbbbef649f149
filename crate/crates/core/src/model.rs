//! Parameter inventory and initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Pooling, RunConfig};
use crate::data::PAD;
use crate::diff::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// Catalogue size `m`; item ids are `1..=m`, row 0 is padding.
    pub items: usize,
    pub users: usize,
    pub d: usize,
    pub t: usize,
    pub k: usize,
    pub num_blocks: usize,
    /// Hidden width of the count head's position scorer.
    pub attn_hidden: usize,
    /// Hidden width of the policy network.
    pub policy_hidden: usize,
}

impl ModelDims {
    pub fn from_config(cfg: &RunConfig, items: usize, users: usize) -> Self {
        let or_d = |w: usize| if w == 0 { cfg.d } else { w };
        ModelDims {
            items,
            users,
            d: cfg.d,
            t: cfg.t,
            k: cfg.k,
            num_blocks: cfg.num_blocks,
            attn_hidden: or_d(cfg.attn_hidden),
            policy_hidden: or_d(cfg.policy_hidden),
        }
    }
}

/// Settings that change the forward computation but own no weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelOptions {
    pub temperature: f64,
    pub pooling: Pooling,
    /// Fixed interest count; disables the count head.
    pub fixed_h: Option<usize>,
}

impl ModelOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        ModelOptions {
            temperature: cfg.temperature,
            pooling: cfg.pooling,
            fixed_h: cfg.fixed_h,
        }
    }
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            temperature: 10.0,
            pooling: Pooling::Running,
            fixed_h: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_1: ParamId,
    pub b_1: ParamId,
    pub w_2: ParamId,
    pub b_2: ParamId,
}

#[derive(Clone, Debug)]
pub struct CountParams {
    pub w_f1: ParamId,
    pub w_u: ParamId,
    pub w_f2: ParamId,
    pub b: ParamId,
    pub w_count: ParamId,
}

#[derive(Clone, Debug)]
pub struct PolicyParams {
    pub w_1: ParamId,
    pub b_1: ParamId,
    pub w_2: ParamId,
    pub b_2: ParamId,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub item_emb: ParamId,
    pub user_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockParams>,
    pub count: CountParams,
    pub policy: PolicyParams,
    /// State transition weight, `(2d + k) × d`.
    pub w0: ParamId,
}

/// Every parameter as `(name, rows, cols, is_bias)`, in store order.
pub fn inventory(dims: &ModelDims) -> Vec<(String, usize, usize, bool)> {
    let ModelDims { items, users, d, t, k, .. } = *dims;
    let (da, di) = (dims.attn_hidden, dims.policy_hidden);
    let mut v = vec![
        ("item_emb".to_string(), items + 1, d, false),
        ("user_emb".to_string(), users, d, false),
        ("pos_emb".to_string(), t, d, false),
    ];
    for b in 0..dims.num_blocks {
        for (n, r, c, bias) in [
            ("w_q", d, d, false),
            ("w_k", d, d, false),
            ("w_v", d, d, false),
            ("w_1", d, d, false),
            ("b_1", 1, d, true),
            ("w_2", d, d, false),
            ("b_2", 1, d, true),
        ] {
            v.push((format!("block{b}.{n}"), r, c, bias));
        }
    }
    v.extend([
        ("did.w_f1".to_string(), d, da, false),
        ("did.w_u".to_string(), d, da, false),
        ("did.w_f2".to_string(), da, 1, false),
        ("did.b".to_string(), 1, 1, true),
        ("did.w_count".to_string(), d, k, false),
        ("policy.w_1".to_string(), d, di, false),
        ("policy.b_1".to_string(), 1, di, true),
        ("policy.w_2".to_string(), di, k, false),
        ("policy.b_2".to_string(), 1, k, true),
        ("state.w_0".to_string(), 2 * d + k, d, false),
    ]);
    v
}

impl ModelParams {
    /// Resolves every inventory name in `store`, checking shapes.
    pub fn bind(store: &ParamStore, dims: &ModelDims) -> Result<Self> {
        for (name, r, c, _) in inventory(dims) {
            let id = store.id(&name)?;
            let shape = store.get(id).shape();
            if shape != (r, c) {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {shape:?}, expected ({r}, {c})"
                )));
            }
        }
        if store.len() != inventory(dims).len() {
            return Err(Error::Checkpoint(format!(
                "store holds {} parameters, model defines {}",
                store.len(),
                inventory(dims).len()
            )));
        }
        let id = |n: &str| store.id(n).expect("checked above");
        let blocks = (0..dims.num_blocks)
            .map(|b| {
                let p = |n: &str| id(&format!("block{b}.{n}"));
                BlockParams {
                    w_q: p("w_q"),
                    w_k: p("w_k"),
                    w_v: p("w_v"),
                    w_1: p("w_1"),
                    b_1: p("b_1"),
                    w_2: p("w_2"),
                    b_2: p("b_2"),
                }
            })
            .collect();
        Ok(ModelParams {
            item_emb: id("item_emb"),
            user_emb: id("user_emb"),
            pos_emb: id("pos_emb"),
            blocks,
            count: CountParams {
                w_f1: id("did.w_f1"),
                w_u: id("did.w_u"),
                w_f2: id("did.w_f2"),
                b: id("did.b"),
                w_count: id("did.w_count"),
            },
            policy: PolicyParams {
                w_1: id("policy.w_1"),
                b_1: id("policy.b_1"),
                w_2: id("policy.w_2"),
                b_2: id("policy.b_2"),
            },
            w0: id("state.w_0"),
        })
    }
}

/// Weights, their layout, and the forward-pass options.
#[derive(Clone, Debug)]
pub struct Model {
    pub dims: ModelDims,
    pub options: ModelOptions,
    pub store: ParamStore,
    pub params: ModelParams,
}

impl Model {
    /// Uniform(−1/√d, 1/√d) weights, zero biases, zero frozen padding row.
    pub fn init(dims: ModelDims, options: ModelOptions, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dims.d as f64).sqrt();
        let mut store = ParamStore::new();
        for (name, r, c, bias) in inventory(&dims) {
            let data = if bias {
                vec![0.0; r * c]
            } else {
                (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect()
            };
            store.insert(name, Tensor::from_vec(r, c, data).expect("inventory shape"));
        }
        Self::from_store(dims, options, store).expect("fresh store matches inventory")
    }

    /// Wraps an existing store (e.g. from a checkpoint); zeroes and freezes
    /// the padding row.
    pub fn from_store(dims: ModelDims, options: ModelOptions, mut store: ParamStore) -> Result<Self> {
        let params = ModelParams::bind(&store, &dims)?;
        let emb = store.get_mut(params.item_emb);
        emb.row_slice_mut(PAD).iter_mut().for_each(|v| *v = 0.0);
        store.freeze_row(params.item_emb, PAD);
        Ok(Model {
            dims,
            options,
            store,
            params,
        })
    }

    /// Interest count used for every window in fixed mode.
    pub fn fixed_h(&self) -> Option<usize> {
        self.options.fixed_h
    }

    pub fn check_window(&self, window: &[usize], user: usize) -> Result<()> {
        if window.len() != self.dims.t {
            return Err(Error::WindowLength {
                got: window.len(),
                expected: self.dims.t,
            });
        }
        if let Some(&id) = window.iter().find(|&&i| i > self.dims.items) {
            return Err(Error::ItemOutOfRange {
                id,
                items: self.dims.items,
            });
        }
        if user >= self.dims.users {
            return Err(Error::UserOutOfRange {
                user,
                users: self.dims.users,
            });
        }
        Ok(())
    }

    pub fn check_items(&self, items: &[usize]) -> Result<()> {
        for &id in items {
            if id == PAD {
                return Err(Error::PaddingCandidate);
            }
            if id > self.dims.items {
                return Err(Error::ItemOutOfRange {
                    id,
                    items: self.dims.items,
                });
            }
        }
        Ok(())
    }

    pub fn item_row(&self, item: usize) -> &[f64] {
        self.store.get(self.params.item_emb).row_slice(item)
    }
}
