//! The candidate spatio-temporal operations and the registry that builds
//! them by name.
//!
//! Every operation maps a feature block (B, T, N, d) to a block of the same
//! shape. The search layer treats them only through [`StOperation`], so the
//! candidate set can be changed by registering a different builder.

mod attention;
mod cnn;
mod gcn;
mod rnn;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{ParamGroup, ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{Tensor, Var};

pub use attention::{AttentionOp, AttentionSampling};
pub use cnn::GatedCausalConv;
pub use gcn::DiffusionConvOp;
pub use rnn::Lstm;

/// Candidate operations, in selector-logit order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperationKind {
    #[serde(rename = "GCN")]
    Gcn,
    #[serde(rename = "RNN")]
    Rnn,
    #[serde(rename = "CNN")]
    Cnn,
    #[serde(rename = "TX")]
    Tx,
    #[serde(rename = "TX_S")]
    TxS,
}

impl OperationKind {
    pub const ALL: [OperationKind; 5] = [
        OperationKind::Gcn,
        OperationKind::Rnn,
        OperationKind::Cnn,
        OperationKind::Tx,
        OperationKind::TxS,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OperationKind::Gcn => "GCN",
            OperationKind::Rnn => "RNN",
            OperationKind::Cnn => "CNN",
            OperationKind::Tx => "TX",
            OperationKind::TxS => "TX_S",
        }
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Architecture(format!("unknown operation `{s}`")))
    }
}

/// Hyperparameters shared by all operations of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpSettings {
    pub diffusion_steps: usize,
    pub cnn_kernel: usize,
    pub cnn_dilation: usize,
    pub attention: AttentionSampling,
}

impl Default for OpSettings {
    fn default() -> Self {
        OpSettings {
            diffusion_steps: 2,
            cnn_kernel: 2,
            cnn_dilation: 1,
            attention: AttentionSampling::Dense,
        }
    }
}

/// A parameterized, shape-preserving transform of a (B, T, N, d) block.
pub trait StOperation: Send + Sync {
    fn kind(&self) -> OperationKind;

    fn hidden_dim(&self) -> usize;

    /// Every trainable parameter this operation owns.
    fn params(&self) -> Vec<ParamId>;

    fn forward(&self, sess: &mut Session<'_>, z: Var) -> Result<Var>;
}

/// Everything a builder needs to create one operation instance.
pub struct BuildContext<'a> {
    pub hidden_dim: usize,
    pub graph: Option<&'a Arc<Graph>>,
    pub settings: &'a OpSettings,
    /// Prefix for parameter names, e.g. `layer0.shared0.GCN`.
    pub prefix: &'a str,
}

pub type OpBuilder =
    fn(&BuildContext<'_>, &mut ParamStore, &mut Rng) -> Result<Box<dyn StOperation>>;

/// Maps operation names to builders.
pub struct OperationRegistry {
    builders: BTreeMap<&'static str, (OperationKind, OpBuilder)>,
}

impl OperationRegistry {
    pub fn empty() -> Self {
        OperationRegistry {
            builders: BTreeMap::new(),
        }
    }

    /// The five standard operations.
    pub fn standard() -> Self {
        let mut r = Self::empty();
        r.register(OperationKind::Gcn, gcn::build);
        r.register(OperationKind::Rnn, rnn::build);
        r.register(OperationKind::Cnn, cnn::build);
        r.register(OperationKind::Tx, attention::build_temporal);
        r.register(OperationKind::TxS, attention::build_spatial);
        r
    }

    pub fn register(&mut self, kind: OperationKind, builder: OpBuilder) {
        self.builders.insert(kind.name(), (kind, builder));
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.builders.keys().copied()
    }

    pub fn build_named(
        &self,
        name: &str,
        ctx: &BuildContext<'_>,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Box<dyn StOperation>> {
        let (_, builder) = self
            .builders
            .get(name)
            .ok_or_else(|| Error::Architecture(format!("no operation registered as `{name}`")))?;
        if ctx.hidden_dim == 0 {
            return Err(Error::Config("operation hidden dim must be at least 1".into()));
        }
        builder(ctx, store, rng)
    }

    pub fn build(
        &self,
        kind: OperationKind,
        ctx: &BuildContext<'_>,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Box<dyn StOperation>> {
        self.build_named(kind.name(), ctx, store, rng)
    }
}

/// Builds a standalone operation from the standard registry.
pub fn make_operation(
    kind: OperationKind,
    hidden_dim: usize,
    graph: Option<&Arc<Graph>>,
    settings: &OpSettings,
    store: &mut ParamStore,
    rng: &mut Rng,
) -> Result<Box<dyn StOperation>> {
    let prefix = kind.name().to_string();
    let ctx = BuildContext {
        hidden_dim,
        graph,
        settings,
        prefix: &prefix,
    };
    OperationRegistry::standard().build(kind, &ctx, store, rng)
}

/// Runs `op` on `z`, checking the shape contract on both sides.
pub fn apply(op: &dyn StOperation, sess: &mut Session<'_>, z: Var) -> Result<Var> {
    let shape = sess.tape.shape(z).to_vec();
    if shape.len() != 4 || shape[3] != op.hidden_dim() {
        return Err(Error::ShapeMismatch {
            primitive: op.kind().name(),
            lhs: shape,
            rhs: vec![op.hidden_dim()],
        });
    }
    let out = op.forward(sess, z)?;
    debug_assert_eq!(sess.tape.shape(out), &shape[..]);
    Ok(out)
}

/// Uniform(±1/√fan_in) weight matrix registered as a trainable weight.
pub(crate) fn init_uniform(
    store: &mut ParamStore,
    rng: &mut Rng,
    name: String,
    shape: &[usize],
    fan_in: usize,
) -> ParamId {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    store.add(
        name,
        ParamGroup::Weight,
        Tensor::new(shape.to_vec(), data).expect("shape matches"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn kind_order_matches_logit_indexing() {
        for (i, k) in OperationKind::ALL.iter().enumerate() {
            assert_eq!(k.index(), i);
            assert_eq!(OperationKind::from_index(i), Some(*k));
            assert_eq!(k.name().parse::<OperationKind>().unwrap(), *k);
        }
        assert!("MLP".parse::<OperationKind>().is_err());
    }

    #[test]
    fn registry_lists_standard_names_and_rejects_unknown() {
        let r = OperationRegistry::standard();
        let names: Vec<_> = r.names().collect();
        assert_eq!(names, ["CNN", "GCN", "RNN", "TX", "TX_S"]);
        let settings = OpSettings::default();
        let ctx = BuildContext {
            hidden_dim: 4,
            graph: None,
            settings: &settings,
            prefix: "x",
        };
        let mut store = ParamStore::new();
        let mut rng = rng::stream(0, rng::PARAM_INIT);
        assert!(r.build_named("MLP", &ctx, &mut store, &mut rng).is_err());
    }

    #[test]
    fn zero_hidden_dim_is_rejected() {
        let mut store = ParamStore::new();
        let mut rng = rng::stream(0, rng::PARAM_INIT);
        let r = make_operation(OperationKind::Tx, 0, None, &OpSettings::default(), &mut store, &mut rng);
        assert!(r.is_err());
    }
}
