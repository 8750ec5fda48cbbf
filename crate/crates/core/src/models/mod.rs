//! Base scorers (BPRMF, NCF, LightGCN) and the two popularity heads, all
//! reading one [`ParameterStore`].
//!
//! Training goes through [`Forward`], which records onto a [`Tape`]. Ranking
//! the whole catalogue goes through [`InferenceSnapshot`], which precomputes
//! everything that does not depend on the (user, item) pair.

mod snapshot;

pub use snapshot::InferenceSnapshot;

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{InteractionDataset, ItemId, UserId};
use crate::numerics::{
    read_checkpoint, write_checkpoint, CheckpointHeader, NumericsError, ParamId, ParameterStore,
    SparseAdjacency, Tape, Tensor, Var,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{what} id {id} out of range (limit {limit})")]
    IdOutOfRange {
        what: &'static str,
        id: u32,
        limit: usize,
    },
    #[error("batch length mismatch: {users} users vs {items} items")]
    BatchLength { users: usize, items: usize },
    #[error("model has no {0} head")]
    MissingHead(&'static str),
    #[error("parameter {name}: {reason}")]
    Param { name: String, reason: String },
    #[error("checkpoint does not match: {0}")]
    Mismatch(String),
    #[error("unknown model kind {0:?}")]
    UnknownKind(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Bprmf,
    Ncf,
    Lightgcn,
}

impl ModelKind {
    pub fn tag(self) -> u8 {
        match self {
            ModelKind::Bprmf => 1,
            ModelKind::Ncf => 2,
            ModelKind::Lightgcn => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(ModelKind::Bprmf),
            2 => Some(ModelKind::Ncf),
            3 => Some(ModelKind::Lightgcn),
            _ => None,
        }
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bprmf" | "mf" => Ok(ModelKind::Bprmf),
            "ncf" | "neumf" => Ok(ModelKind::Ncf),
            "lightgcn" => Ok(ModelKind::Lightgcn),
            _ => Err(ModelError::UnknownKind(s.to_string())),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Bprmf => "bprmf",
            ModelKind::Ncf => "ncf",
            ModelKind::Lightgcn => "lightgcn",
        })
    }
}

/// Everything needed to rebuild a bundle's parameter layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub dim: usize,
    /// LightGCN propagation depth; ignored by the other kinds.
    pub layers: usize,
    pub num_users: usize,
    pub num_items: usize,
    pub pp_head: bool,
    pub gp_head: bool,
    /// Heads read the base tables when set, otherwise a second pair of tables.
    pub shared_embeddings: bool,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, dim: usize, num_users: usize, num_items: usize) -> Self {
        Self {
            kind,
            dim,
            layers: 3,
            num_users,
            num_items,
            pp_head: true,
            gp_head: true,
            shared_embeddings: true,
        }
    }

    /// Width of the hidden layer of the GP head and the second NCF layer.
    pub fn half_dim(&self) -> usize {
        (self.dim / 2).max(1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dense {
    pub(crate) w: ParamId,
    pub(crate) b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NcfParams {
    pub(crate) l1: Dense,
    pub(crate) l2: Dense,
    pub(crate) out: Dense,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct HeadParams {
    pub(crate) l1: Dense,
    pub(crate) l2: Dense,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ParamIds {
    pub(crate) user_emb: ParamId,
    pub(crate) item_emb: ParamId,
    pub(crate) head_user_emb: ParamId,
    pub(crate) head_item_emb: ParamId,
    pub(crate) ncf: Option<NcfParams>,
    pub(crate) pp: Option<HeadParams>,
    pub(crate) gp: Option<HeadParams>,
}

/// The base scorer and the PP/GP heads over one parameter store.
#[derive(Clone, Debug)]
pub struct ScorerBundle {
    spec: ModelSpec,
    store: ParameterStore,
    ids: ParamIds,
    adjacency: Option<Arc<SparseAdjacency>>,
}

/// Expected (name, shape) of every parameter for a spec, in creation order.
fn layout(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let (d, h) = (spec.dim, spec.half_dim());
    let mut out = vec![
        ("user_emb".to_string(), vec![spec.num_users, d]),
        ("item_emb".to_string(), vec![spec.num_items, d]),
    ];
    let heads = spec.pp_head || spec.gp_head;
    if heads && !spec.shared_embeddings {
        out.push(("head_user_emb".into(), vec![spec.num_users, d]));
        out.push(("head_item_emb".into(), vec![spec.num_items, d]));
    }
    let mut dense = |prefix: &str, fan_in: usize, fan_out: usize| {
        out.push((format!("{prefix}.w"), vec![fan_in, fan_out]));
        out.push((format!("{prefix}.b"), vec![fan_out]));
    };
    if spec.kind == ModelKind::Ncf {
        dense("ncf.l1", 2 * d, d);
        dense("ncf.l2", d, h);
        dense("ncf.out", d + h, 1);
    }
    if spec.pp_head {
        dense("pp.l1", 2 * d, d);
        dense("pp.l2", d, 1);
    }
    if spec.gp_head {
        dense("gp.l1", d, h);
        dense("gp.l2", h, 1);
    }
    out
}

fn resolve(spec: &ModelSpec, store: &ParameterStore) -> Result<ParamIds, ModelError> {
    let expected = layout(spec);
    if store.len() != expected.len() {
        return Err(ModelError::Mismatch(format!(
            "expected {} parameters, found {}",
            expected.len(),
            store.len()
        )));
    }
    for (name, shape) in &expected {
        let id = store.id(name).ok_or_else(|| ModelError::Param {
            name: name.clone(),
            reason: "missing".into(),
        })?;
        if store.value(id).shape() != shape.as_slice() {
            return Err(ModelError::Param {
                name: name.clone(),
                reason: format!("shape {:?}, expected {shape:?}", store.value(id).shape()),
            });
        }
    }
    let id = |n: &str| store.id(n).expect("checked above");
    let dense = |p: &str| Dense {
        w: id(&format!("{p}.w")),
        b: id(&format!("{p}.b")),
    };
    let (user_emb, item_emb) = (id("user_emb"), id("item_emb"));
    let separate = store.id("head_user_emb").zip(store.id("head_item_emb"));
    let (head_user_emb, head_item_emb) = separate.unwrap_or((user_emb, item_emb));
    Ok(ParamIds {
        user_emb,
        item_emb,
        head_user_emb,
        head_item_emb,
        ncf: (spec.kind == ModelKind::Ncf).then(|| NcfParams {
            l1: dense("ncf.l1"),
            l2: dense("ncf.l2"),
            out: dense("ncf.out"),
        }),
        pp: spec.pp_head.then(|| HeadParams {
            l1: dense("pp.l1"),
            l2: dense("pp.l2"),
        }),
        gp: spec.gp_head.then(|| HeadParams {
            l1: dense("gp.l1"),
            l2: dense("gp.l2"),
        }),
    })
}

fn build_adjacency(spec: &ModelSpec, ds: &InteractionDataset) -> Option<Arc<SparseAdjacency>> {
    (spec.kind == ModelKind::Lightgcn).then(|| {
        let edges: Vec<(UserId, ItemId)> =
            ds.train.interactions().iter().map(|it| (it.user, it.item)).collect();
        Arc::new(SparseAdjacency::from_edges(ds.num_users, ds.num_items, &edges))
    })
}

fn check_dataset(spec: &ModelSpec, ds: &InteractionDataset) -> Result<(), ModelError> {
    if spec.num_users != ds.num_users || spec.num_items != ds.num_items {
        return Err(ModelError::Mismatch(format!(
            "model is {}x{}, dataset is {}x{}",
            spec.num_users, spec.num_items, ds.num_users, ds.num_items
        )));
    }
    Ok(())
}

impl ScorerBundle {
    /// Fresh parameters: embeddings ~ N(0, 0.01²), weights Xavier-uniform, biases 0.
    pub fn init(spec: ModelSpec, ds: &InteractionDataset, seed: u64) -> Result<Self, ModelError> {
        check_dataset(&spec, ds)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.01).expect("valid std");
        let mut store = ParameterStore::new();
        for (name, shape) in layout(&spec) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if name.ends_with("emb") {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            } else if name.ends_with(".w") {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt() as f32;
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            } else {
                vec![0.0; n]
            };
            store.add(&name, Tensor::new(shape, data)?)?;
        }
        let ids = resolve(&spec, &store)?;
        let adjacency = build_adjacency(&spec, ds);
        Ok(Self {
            spec,
            store,
            ids,
            adjacency,
        })
    }

    /// Wraps an existing store, checking that every expected tensor is present.
    pub fn from_store(spec: ModelSpec, store: ParameterStore, ds: &InteractionDataset) -> Result<Self, ModelError> {
        check_dataset(&spec, ds)?;
        let ids = resolve(&spec, &store)?;
        let adjacency = build_adjacency(&spec, ds);
        Ok(Self {
            spec,
            store,
            ids,
            adjacency,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub(crate) fn ids(&self) -> &ParamIds {
        &self.ids
    }

    pub fn adjacency(&self) -> Option<&Arc<SparseAdjacency>> {
        self.adjacency.as_ref()
    }

    /// Sets every tensor of a head to zero, making its logit identically 0.
    pub fn zero_head(&mut self, head: Head) -> Result<(), ModelError> {
        let h = match head {
            Head::Pp => self.ids.pp.ok_or(ModelError::MissingHead("pp"))?,
            Head::Gp => self.ids.gp.ok_or(ModelError::MissingHead("gp"))?,
        };
        for id in [h.l1.w, h.l1.b, h.l2.w, h.l2.b] {
            self.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(())
    }

    pub fn snapshot(&self) -> InferenceSnapshot {
        InferenceSnapshot::build(self)
    }

    pub fn save(&self, w: &mut impl Write, dataset_hash: [u8; 32]) -> Result<(), ModelError> {
        let header = CheckpointHeader {
            dim: self.spec.dim as u32,
            num_users: self.spec.num_users as u32,
            num_items: self.spec.num_items as u32,
            model_tag: self.spec.kind.tag(),
            dataset_hash,
            metadata: serde_json::to_string(&self.spec).expect("spec serializes"),
        };
        write_checkpoint(w, &header, &self.store)?;
        Ok(())
    }

    /// Loads a checkpoint, refusing it when it was trained on a different dataset.
    pub fn load(r: &mut impl Read, ds: &InteractionDataset) -> Result<Self, ModelError> {
        let (header, store) = read_checkpoint(r)?;
        if header.dataset_hash != ds.content_digest() {
            return Err(ModelError::Mismatch(
                "checkpoint was trained on a different dataset split".into(),
            ));
        }
        let spec: ModelSpec = serde_json::from_str(&header.metadata)
            .map_err(|e| ModelError::Mismatch(format!("unreadable model metadata: {e}")))?;
        if ModelKind::from_tag(header.model_tag) != Some(spec.kind) || header.dim as usize != spec.dim {
            return Err(ModelError::Mismatch("header disagrees with metadata".into()));
        }
        Self::from_store(spec, store, ds)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Pp,
    Gp,
}

fn check_ids(ids: &[u32], limit: usize, what: &'static str) -> Result<(), ModelError> {
    match ids.iter().find(|&&v| v as usize >= limit) {
        Some(&id) => Err(ModelError::IdOutOfRange { what, id, limit }),
        None => Ok(()),
    }
}

fn check_pairs(bundle: &ScorerBundle, users: &[UserId], items: &[ItemId]) -> Result<(), ModelError> {
    if users.len() != items.len() {
        return Err(ModelError::BatchLength {
            users: users.len(),
            items: items.len(),
        });
    }
    check_ids(users, bundle.spec.num_users, "user")?;
    check_ids(items, bundle.spec.num_items, "item")
}

/// Records model computations for one mini-batch on a fresh tape.
pub struct Forward<'b> {
    bundle: &'b ScorerBundle,
    tape: Tape,
    vars: HashMap<ParamId, Var>,
    propagated: Option<Var>,
}

impl<'b> Forward<'b> {
    pub fn new(bundle: &'b ScorerBundle) -> Self {
        Self {
            bundle,
            tape: Tape::new(),
            vars: HashMap::new(),
            propagated: None,
        }
    }

    pub fn tape(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    fn param(&mut self, id: ParamId) -> Result<Var, ModelError> {
        if let Some(&v) = self.vars.get(&id) {
            return Ok(v);
        }
        let v = self.tape.param(&self.bundle.store, id)?;
        self.vars.insert(id, v);
        Ok(v)
    }

    fn dense(&mut self, x: Var, layer: Dense) -> Result<Var, ModelError> {
        let w = self.param(layer.w)?;
        let b = self.param(layer.b)?;
        let xw = self.tape.matmul(x, w)?;
        Ok(self.tape.add_bias(xw, b)?)
    }

    /// `[n, 1] → [n]`.
    fn flatten(&mut self, x: Var) -> Result<Var, ModelError> {
        let n = self.tape.value(x).rows();
        Ok(self.tape.reshape(x, &[n])?)
    }

    /// LightGCN node embeddings: mean of `Â^l E` over `l = 0..=L`.
    fn propagated(&mut self) -> Result<Var, ModelError> {
        if let Some(v) = self.propagated {
            return Ok(v);
        }
        let adj = Arc::clone(self.bundle.adjacency.as_ref().expect("lightgcn has an adjacency"));
        let ids = self.bundle.ids;
        let u = self.param(ids.user_emb)?;
        let i = self.param(ids.item_emb)?;
        let e0 = self.tape.concat_rows(u, i)?;
        let mut acc = e0;
        let mut cur = e0;
        for _ in 0..self.bundle.spec.layers {
            cur = self.tape.propagate(&adj, cur)?;
            acc = self.tape.add(acc, cur)?;
        }
        let out = self.tape.scale(acc, 1.0 / (self.bundle.spec.layers + 1) as f32)?;
        self.propagated = Some(out);
        Ok(out)
    }

    fn base_embeddings(&mut self, users: &[UserId], items: &[ItemId]) -> Result<(Var, Var), ModelError> {
        let ids = self.bundle.ids;
        if self.bundle.spec.kind == ModelKind::Lightgcn {
            let all = self.propagated()?;
            let offset = self.bundle.spec.num_users as u32;
            let shifted: Vec<u32> = items.iter().map(|&i| i + offset).collect();
            let ue = self.tape.gather_rows(all, users)?;
            let ie = self.tape.gather_rows(all, &shifted)?;
            return Ok((ue, ie));
        }
        let u = self.param(ids.user_emb)?;
        let i = self.param(ids.item_emb)?;
        Ok((self.tape.gather_rows(u, users)?, self.tape.gather_rows(i, items)?))
    }

    /// `r̂` for each (user, item) pair, shape `[n]`.
    pub fn base_scores(&mut self, users: &[UserId], items: &[ItemId]) -> Result<Var, ModelError> {
        check_pairs(self.bundle, users, items)?;
        let (ue, ie) = self.base_embeddings(users, items)?;
        match self.bundle.ids.ncf {
            None => Ok(self.tape.dot_rows(ue, ie)?),
            Some(ncf) => {
                let gmf = self.tape.mul(ue, ie)?;
                let x = self.tape.concat_cols(ue, ie)?;
                let h1 = self.dense(x, ncf.l1)?;
                let h1 = self.tape.relu(h1)?;
                let h2 = self.dense(h1, ncf.l2)?;
                let h2 = self.tape.relu(h2)?;
                let fused = self.tape.concat_cols(gmf, h2)?;
                let out = self.dense(fused, ncf.out)?;
                self.flatten(out)
            }
        }
    }

    /// Pre-sigmoid PP head output `p̂`, shape `[n]`.
    pub fn pp_logits(&mut self, users: &[UserId], items: &[ItemId]) -> Result<Var, ModelError> {
        check_pairs(self.bundle, users, items)?;
        let ids = self.bundle.ids;
        let head = ids.pp.ok_or(ModelError::MissingHead("pp"))?;
        let u = self.param(ids.head_user_emb)?;
        let i = self.param(ids.head_item_emb)?;
        let ue = self.tape.gather_rows(u, users)?;
        let ie = self.tape.gather_rows(i, items)?;
        let x = self.tape.concat_cols(ue, ie)?;
        let h = self.dense(x, head.l1)?;
        let h = self.tape.relu(h)?;
        let out = self.dense(h, head.l2)?;
        self.flatten(out)
    }

    /// Pre-sigmoid GP head output `ĝ`, shape `[n]`.
    pub fn gp_logits(&mut self, items: &[ItemId]) -> Result<Var, ModelError> {
        check_ids(items, self.bundle.spec.num_items, "item")?;
        let ids = self.bundle.ids;
        let head = ids.gp.ok_or(ModelError::MissingHead("gp"))?;
        let i = self.param(ids.head_item_emb)?;
        let ie = self.tape.gather_rows(i, items)?;
        let h = self.dense(ie, head.l1)?;
        let h = self.tape.relu(h)?;
        let out = self.dense(h, head.l2)?;
        self.flatten(out)
    }

    /// `λ · ‖Θ_batch‖²` over the embedding rows of `users` and `items` (each
    /// row counted once) plus every MLP tensor.
    pub fn l2_penalty(&mut self, lambda: f32, users: &[UserId], items: &[ItemId]) -> Result<Var, ModelError> {
        check_ids(users, self.bundle.spec.num_users, "user")?;
        check_ids(items, self.bundle.spec.num_items, "item")?;
        let unique = |ids: &[u32]| {
            let mut v = ids.to_vec();
            v.sort_unstable();
            v.dedup();
            v
        };
        let (us, is) = (unique(users), unique(items));
        let ids = self.bundle.ids;
        let mut terms = Vec::new();
        let mut tables = vec![(ids.user_emb, &us), (ids.item_emb, &is)];
        if ids.head_user_emb != ids.user_emb {
            tables.push((ids.head_user_emb, &us));
            tables.push((ids.head_item_emb, &is));
        }
        for (table, rows) in tables {
            let t = self.param(table)?;
            terms.push(self.tape.gather_rows(t, rows)?);
        }
        let mut mlps: Vec<Dense> = Vec::new();
        if let Some(n) = ids.ncf {
            mlps.extend([n.l1, n.l2, n.out]);
        }
        for h in [ids.pp, ids.gp].into_iter().flatten() {
            mlps.extend([h.l1, h.l2]);
        }
        for layer in mlps {
            terms.push(self.param(layer.w)?);
            terms.push(self.param(layer.b)?);
        }
        Ok(self.tape.l2_penalty(lambda, &terms)?)
    }
}
