//! Parameter storage, graph bindings and the layer building blocks shared by
//! the three networks.

use std::cell::RefCell;
use std::sync::Arc;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{BatchNormStats, Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Index of an entry in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Arc<Tensor>,
    /// Buffers such as batch-norm running statistics are stored but not optimized.
    pub trainable: bool,
}

/// Named tensors owned by one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(name.into(), tensor, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(name.into(), tensor, false)
    }

    fn push(&mut self, name: String, tensor: Tensor, trainable: bool) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            tensor: Arc::new(tensor),
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_arc(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.entries[id.0].tensor)
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor) {
        assert_eq!(self.entries[id.0].tensor.shape(), tensor.shape());
        self.entries[id.0].tensor = Arc::new(tensor);
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].tensor)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian values of every entry.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for d in e.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Replaces tensors by name from `other` (shapes must agree).
    pub fn load_from(&mut self, named: Vec<(String, Tensor)>) -> crate::Result<()> {
        for (name, t) in named {
            let id = self
                .find(&name)
                .ok_or_else(|| crate::Error::contract(format!("unknown tensor {name} in archive")))?;
            if self.get(id).shape() != t.shape() {
                return Err(crate::Error::contract(format!(
                    "tensor {name}: archive shape {:?} != model shape {:?}",
                    t.shape(),
                    self.get(id).shape()
                )));
            }
            self.set(id, t);
        }
        Ok(())
    }
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Debug)]
pub struct BnUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Binds a [`ParamStore`] onto a [`Graph`] for one forward/backward pass.
pub struct Ctx<'g, 's> {
    graph: &'g Graph,
    store: &'s ParamStore,
    vars: RefCell<Vec<Option<Var<'g>>>>,
    trainable: bool,
    bn_updates: RefCell<Vec<BnUpdate>>,
}

impl<'g, 's> Ctx<'g, 's> {
    /// Parameters become gradient-receiving leaves.
    pub fn trainable(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self::with_mode(graph, store, true)
    }

    /// Parameters become constants; gradients still flow through to inputs.
    pub fn frozen(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self::with_mode(graph, store, false)
    }

    fn with_mode(graph: &'g Graph, store: &'s ParamStore, trainable: bool) -> Self {
        Ctx {
            graph,
            store,
            vars: RefCell::new(vec![None; store.len()]),
            trainable,
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Var<'g> {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let entry = &self.store.entries[id.0];
        let v = self
            .graph
            .leaf(Arc::clone(&entry.tensor), self.trainable && entry.trainable);
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradients for every trainable entry that took part in the graph.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        let vars = self.vars.borrow();
        self.store
            .entries
            .iter()
            .zip(vars.iter())
            .map(|(e, v)| match v {
                Some(v) if e.trainable => grads.get(*v).cloned(),
                _ => None,
            })
            .collect()
    }

    pub fn push_bn_update(&self, update: BnUpdate) {
        self.bn_updates.borrow_mut().push(update);
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }
}

/// Applies exponential-moving-average batch-norm statistic updates.
pub fn apply_bn_updates(store: &mut ParamStore, updates: Vec<BnUpdate>, momentum: f64) {
    for u in updates {
        let mean = store.get_mut(u.mean_id);
        for (m, b) in mean.data_mut().iter_mut().zip(&u.batch_mean) {
            *m = (1.0 - momentum) * *m + momentum * b;
        }
        let var = store.get_mut(u.var_id);
        for (v, b) in var.data_mut().iter_mut().zip(&u.batch_var) {
            *v = (1.0 - momentum) * *v + momentum * b;
        }
    }
}

/// He-normal initialization std for a given fan-in.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(vec![out_channels, in_channels, kernel, kernel], init_std, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels])));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Var<'g>) -> Var<'g> {
        let y = x.conv2d(ctx.p(self.weight), self.stride, self.pad);
        match self.bias {
            Some(b) => y.add_bias(ctx.p(b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(vec![channels])),
            eps: 1e-5,
        }
    }

    /// `use_batch_stats` selects training-mode normalization and records a
    /// running-statistics update on the context.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Var<'g>, use_batch_stats: bool) -> Var<'g> {
        let store = ctx.store();
        let stats = if use_batch_stats {
            BatchNormStats::Batch
        } else {
            BatchNormStats::Running {
                mean: store.get(self.running_mean).data(),
                var: store.get(self.running_var).data(),
            }
        };
        let (y, batch) = x.batch_norm_op(ctx.p(self.gamma), ctx.p(self.beta), stats, self.eps);
        if let Some((batch_mean, batch_var)) = batch {
            ctx.push_bn_update(BnUpdate {
                mean_id: self.running_mean,
                var_id: self.running_var,
                batch_mean,
                batch_var,
            });
        }
        y
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), Tensor::randn(vec![output, input], init_std, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![output])),
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.linear(ctx.p(self.weight), ctx.p(self.bias))
    }
}
