//! The four parametric function approximators (encoder, decoder, auxiliary
//! Koopman-matrix network, Wasserstein critic), their parameter store, and
//! the forward-pass context that binds parameters onto an autodiff graph.

mod layers;
mod model;

pub use layers::{batch_norm, conv_layer, deconv_layer, dense, flatten, BN_EPS, BN_MOMENTUM};
pub use model::{aux_koopman, decode, discriminate, encode, init_params};

use crate::error::{Error, Result};
use crate::rng::init_rng;
use dakm_autograd::{Graph, Var};
use ndarray::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Shape hyperparameters of one model family.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub spatial_rank: usize,
    pub in_channels: usize,
    pub input_extent: Vec<usize>,
    /// Dropout keep probability while training (evaluation always keeps 1.0).
    pub dropout_keep: f64,
    pub encoder_channels: Vec<usize>,
    pub aux_hidden: Vec<usize>,
    pub disc_channels: Vec<usize>,
    /// Sigmoid on the decoder output (concentrations) or identity (unbounded).
    pub output_sigmoid: bool,
}

impl ModelConfig {
    pub fn ks_paper() -> Self {
        ModelConfig {
            latent_dim: 64,
            spatial_rank: 1,
            in_channels: 1,
            input_extent: vec![1024],
            dropout_keep: 0.8,
            encoder_channels: vec![64, 128, 256, 512, 512],
            aux_hidden: vec![128, 256, 512],
            disc_channels: vec![64, 128, 256, 512],
            output_sigmoid: false,
        }
    }

    pub fn gs_paper() -> Self {
        ModelConfig {
            latent_dim: 64,
            spatial_rank: 2,
            in_channels: 2,
            input_extent: vec![128, 128],
            dropout_keep: 0.8,
            encoder_channels: vec![64, 128, 256, 512, 512],
            aux_hidden: vec![128, 256, 512],
            disc_channels: vec![64, 128, 256, 512],
            output_sigmoid: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::InvalidConfig("latent_dim must be >= 1".into()));
        }
        if self.spatial_rank != 1 && self.spatial_rank != 2 {
            return Err(Error::InvalidConfig("spatial_rank must be 1 or 2".into()));
        }
        if self.input_extent.len() != self.spatial_rank {
            return Err(Error::InvalidConfig(
                "input_extent length must equal spatial_rank".into(),
            ));
        }
        let div = 1usize << self.encoder_channels.len();
        for &e in &self.input_extent {
            if e == 0 || e % div != 0 {
                return Err(Error::InvalidConfig(format!(
                    "input extent {e} must be divisible by 2^{} (one halving per encoder stage)",
                    self.encoder_channels.len()
                )));
            }
        }
        if self.encoder_channels.is_empty() || self.disc_channels.is_empty() {
            return Err(Error::InvalidConfig("empty channel lists".into()));
        }
        if !(0.0 < self.dropout_keep && self.dropout_keep <= 1.0) {
            return Err(Error::InvalidConfig("dropout_keep must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Decoder stage widths: encoder widths reversed (dropping the repeated
    /// head) with the data channel count appended.
    pub fn decoder_channels(&self) -> Vec<usize> {
        let n = self.encoder_channels.len();
        let mut out: Vec<usize> = self.encoder_channels[..n - 1].to_vec();
        out.reverse();
        out.push(self.in_channels);
        out
    }

    /// Spatial extent after all encoder stages.
    pub fn encoded_spatial(&self) -> Vec<usize> {
        let div = 1usize << self.encoder_channels.len();
        self.input_extent.iter().map(|&e| e / div).collect()
    }

    /// Flattened length of the encoder's final feature map.
    pub fn flat_after_encoder(&self) -> usize {
        self.encoder_channels.last().unwrap() * self.encoded_spatial().iter().product::<usize>()
    }

    /// Channel count of the critic input: conditioning sequence and
    /// continuation stacked along channels.
    pub fn disc_in_channels(&self, n_s: usize) -> usize {
        2 * n_s * self.in_channels
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    DeconvWeight,
    DenseWeight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Running statistics are buffers, not trainable parameters.
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Only convolution/dense weights enter the L2 regularization sum.
    pub fn regularized(self) -> bool {
        matches!(
            self,
            ParamKind::ConvWeight | ParamKind::DeconvWeight | ParamKind::DenseWeight
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: ArrayD<f64>,
    pub kind: ParamKind,
}

/// Ordered collection of named arrays for all networks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn insert(&mut self, name: String, entry: ParamEntry) {
        self.entries.insert(name, entry);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn names_with_prefix<'s>(&'s self, prefix: &'s str) -> impl Iterator<Item = &'s String> {
        self.entries.keys().filter(move |n| n.starts_with(prefix))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Exponential-moving-average statistics observed by one batch-norm layer
/// during a training forward pass.
pub struct BnBatchStats {
    pub prefix: String,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

enum StoreHandle<'a> {
    Init {
        store: &'a mut ParamStore,
        rng: &'a mut ChaCha8Rng,
    },
    Bound(&'a ParamStore),
}

/// Binds named parameters onto an autodiff graph for one forward pass.
///
/// In init mode, parameters are created on first touch by running the
/// forward functions once, which guarantees that names and shapes always
/// agree with the forward code.
pub struct Ctx<'a> {
    pub g: Graph,
    handle: StoreHandle<'a>,
    bound: BTreeMap<String, (Var, bool)>,
    trainable_prefixes: Vec<String>,
    pub mode: Mode,
    pub dropout_keep: f64,
    rng: Option<&'a mut ChaCha8Rng>,
    pub record_bn: bool,
    pub bn_updates: Vec<BnBatchStats>,
}

impl<'a> Ctx<'a> {
    pub fn init(g: &Graph, store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Ctx<'a> {
        Ctx {
            g: g.clone(),
            handle: StoreHandle::Init { store, rng },
            bound: BTreeMap::new(),
            trainable_prefixes: vec![],
            mode: Mode::Eval,
            dropout_keep: 1.0,
            rng: None,
            record_bn: false,
            bn_updates: vec![],
        }
    }

    /// Read-only evaluation context: frozen statistics, no dropout.
    pub fn eval(g: &Graph, store: &'a ParamStore) -> Ctx<'a> {
        Ctx {
            g: g.clone(),
            handle: StoreHandle::Bound(store),
            bound: BTreeMap::new(),
            trainable_prefixes: vec![],
            mode: Mode::Eval,
            dropout_keep: 1.0,
            rng: None,
            record_bn: false,
            bn_updates: vec![],
        }
    }

    /// Training context. Parameters whose names start with one of
    /// `trainable_prefixes` bind as gradient leaves, everything else as
    /// constants.
    pub fn train(
        g: &Graph,
        store: &'a ParamStore,
        trainable_prefixes: &[&str],
        dropout_keep: f64,
        rng: &'a mut ChaCha8Rng,
    ) -> Ctx<'a> {
        Ctx {
            g: g.clone(),
            handle: StoreHandle::Bound(store),
            bound: BTreeMap::new(),
            trainable_prefixes: trainable_prefixes.iter().map(|s| s.to_string()).collect(),
            mode: Mode::Train,
            dropout_keep,
            rng: Some(rng),
            record_bn: true,
            bn_updates: vec![],
        }
    }

    fn is_trainable(&self, name: &str) -> bool {
        self.trainable_prefixes.iter().any(|p| name.starts_with(p))
    }

    pub fn store(&self) -> &ParamStore {
        match &self.handle {
            StoreHandle::Init { store, .. } => store,
            StoreHandle::Bound(store) => store,
        }
    }

    /// Bind (or, in init mode, create) the named parameter.
    pub fn param(&mut self, name: &str, kind: ParamKind, shape: &[usize]) -> Var {
        self.param_with(name, kind, shape, false)
    }

    /// Like [`Ctx::param`] but zero-initialized regardless of kind (used for
    /// output layers that should start as the identity map).
    pub fn param_zeros(&mut self, name: &str, kind: ParamKind, shape: &[usize]) -> Var {
        self.param_with(name, kind, shape, true)
    }

    fn param_with(&mut self, name: &str, kind: ParamKind, shape: &[usize], zeros: bool) -> Var {
        if let Some((var, _)) = self.bound.get(name) {
            assert_eq!(var.shape(), shape, "parameter {name} bound with new shape");
            return var.clone();
        }
        let (var, trainable) = match &mut self.handle {
            StoreHandle::Init { store, rng } => {
                if store.get(name).is_none() {
                    let value = if zeros {
                        ArrayD::zeros(IxDyn(shape))
                    } else {
                        init_value(kind, shape, rng)
                    };
                    store.insert(name.to_string(), ParamEntry { value, kind });
                }
                let entry = store.get(name).unwrap();
                assert_eq!(entry.value.shape(), shape, "parameter {name} shape changed");
                (self.g.constant(entry.value.clone().into_shared()), false)
            }
            StoreHandle::Bound(store) => {
                let entry = store
                    .get(name)
                    .unwrap_or_else(|| panic!("parameter {name} missing from store"));
                assert_eq!(
                    entry.value.shape(),
                    shape,
                    "parameter {name} has stored shape {:?}, forward expects {:?}",
                    entry.value.shape(),
                    shape
                );
                assert_eq!(entry.kind, kind, "parameter {name} kind mismatch");
                let value = entry.value.clone().into_shared();
                if kind.trainable() && self.is_trainable(name) {
                    (self.g.leaf(value), true)
                } else {
                    (self.g.constant(value), false)
                }
            }
        };
        self.bound.insert(name.to_string(), (var.clone(), trainable));
        var
    }

    /// Parameters bound as gradient leaves during this pass.
    pub fn trainable_bound(&self) -> Vec<(String, Var)> {
        self.bound
            .iter()
            .filter(|(_, (_, t))| *t)
            .map(|(n, (v, _))| (n.clone(), v.clone()))
            .collect()
    }

    /// Inverted dropout; identity in eval mode or when keep is 1.
    pub fn dropout(&mut self, x: &Var) -> Var {
        if self.mode == Mode::Eval || self.dropout_keep >= 1.0 {
            return x.clone();
        }
        let keep = self.dropout_keep;
        let rng = self
            .rng
            .as_mut()
            .expect("training context with dropout needs an rng");
        let mask = ArrayD::from_shape_simple_fn(IxDyn(&x.shape()), || {
            if rand::Rng::gen::<f64>(*rng) < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = self.g.constant(mask.into_shared());
        x.mul(&m)
    }
}

/// Variance-scaling fan-in initialization for weights, zeros for biases and
/// shifts, ones for scales and running variances.
fn init_value(kind: ParamKind, shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let fan_in = match kind {
        ParamKind::ConvWeight => shape[1..].iter().product::<usize>(),
        ParamKind::DeconvWeight => shape[0] * shape[2..].iter().product::<usize>(),
        ParamKind::DenseWeight => shape[0],
        _ => 0,
    };
    match kind {
        ParamKind::ConvWeight | ParamKind::DeconvWeight | ParamKind::DenseWeight => {
            let std = (1.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            ArrayD::from_shape_simple_fn(IxDyn(shape), || normal.sample(rng))
        }
        ParamKind::Bias | ParamKind::Beta | ParamKind::RunningMean => ArrayD::zeros(IxDyn(shape)),
        ParamKind::Gamma | ParamKind::RunningVar => ArrayD::ones(IxDyn(shape)),
    }
}

/// Apply accumulated batch-norm statistics to the store's running buffers,
/// restricted to layers whose prefix matches `allow`.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnBatchStats], allow: &[&str]) {
    for stats in updates {
        if !allow.iter().any(|p| stats.prefix.starts_with(p)) {
            continue;
        }
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let name = format!("{}.{}", stats.prefix, suffix);
            let entry = store
                .get_mut(&name)
                .unwrap_or_else(|| panic!("missing buffer {name}"));
            let updated = entry.value.mapv(|v| v * BN_MOMENTUM)
                + &batch.mapv(|b| b * (1.0 - BN_MOMENTUM)).into_dyn();
            entry.value = updated;
        }
    }
}

/// Initialize all four networks by priming one forward pass of each; the
/// parameter set is a pure function of the configuration, the sequence
/// length (critic input width) and the seed.
pub fn init_params_impl(cfg: &ModelConfig, n_s: usize, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = init_rng(seed);
    let g = Graph::new();
    let mut ctx = Ctx::init(&g, &mut store, &mut rng);
    let mut xshape = vec![1, cfg.in_channels];
    xshape.extend_from_slice(&cfg.input_extent);
    let x = g.constant(ArrayD::zeros(IxDyn(&xshape)).into_shared());
    let z = model::encode(&mut ctx, cfg, &x);
    let _ = model::decode(&mut ctx, cfg, &z);
    let _ = model::aux_koopman(&mut ctx, cfg, &z);
    let mut pshape = vec![1, cfg.disc_in_channels(n_s)];
    pshape.extend_from_slice(&cfg.input_extent);
    let pair = g.constant(ArrayD::zeros(IxDyn(&pshape)).into_shared());
    let _ = model::discriminate(&mut ctx, cfg, &pair);
    drop(ctx);
    Ok(store)
}
