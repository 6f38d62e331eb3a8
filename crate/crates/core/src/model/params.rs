use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use super::ModelError;
use crate::autodiff::{init_scale, Activation, ConvEncoderParams, GruParams, Linear, Mlp, ParamId, ParamSet};
use crate::render::{GridSpec, ObservationGrid, Resolution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    VisualOnly,
    RnnShared,
    VrnnShared,
    IndepRnn,
    SocialRnn,
    GraphRnn,
    GraphVrnn,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::VisualOnly,
        Variant::RnnShared,
        Variant::VrnnShared,
        Variant::IndepRnn,
        Variant::SocialRnn,
        Variant::GraphRnn,
        Variant::GraphVrnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::VisualOnly => "visual-only",
            Variant::RnnShared => "rnn-shared",
            Variant::VrnnShared => "vrnn-shared",
            Variant::IndepRnn => "indep-rnn",
            Variant::SocialRnn => "social-rnn",
            Variant::GraphRnn => "graph-rnn",
            Variant::GraphVrnn => "graph-vrnn",
        }
    }

    pub fn is_recurrent(self) -> bool {
        self != Variant::VisualOnly
    }

    pub fn is_variational(self) -> bool {
        matches!(self, Variant::VrnnShared | Variant::GraphVrnn)
    }

    /// One hidden state for the whole scene instead of one per agent.
    pub fn is_shared(self) -> bool {
        matches!(self, Variant::RnnShared | Variant::VrnnShared)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| ModelError::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_agents: usize,
    pub hidden: usize,
    pub latent: usize,
    /// Width of the learned state embedding fed to the recurrence and posterior.
    pub embed: usize,
    /// Width of relation-network messages.
    pub message: usize,
    pub mlp_hidden: usize,
    pub decoder_hidden: usize,
    pub attention_hidden: usize,
    pub observed: usize,
    pub horizon: usize,
    pub grid: GridSpec,
    pub resolution: Resolution,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::GraphVrnn,
            num_agents: 3,
            hidden: 64,
            latent: 16,
            embed: 32,
            message: 64,
            mlp_hidden: 64,
            decoder_hidden: 128,
            attention_hidden: 32,
            observed: 6,
            horizon: 4,
            grid: GridSpec::default(),
            resolution: Resolution::default(),
        }
    }
}

impl ModelConfig {
    pub fn steps(&self) -> usize {
        self.observed + self.horizon
    }

    pub fn cells(&self) -> usize {
        self.grid.cells()
    }

    /// Per-agent visual feature: spatial map over cells, its max, and the pooled backbone channels.
    pub fn visual_dim(&self) -> usize {
        self.cells() + 1 + crate::autodiff::ConvEncoderParams::OUT_CHANNELS
    }

    /// Width of the per-agent rows the decoder reads as "hidden state".
    pub fn decoder_state_dim(&self) -> usize {
        if self.variant.is_shared() {
            self.hidden + self.num_agents
        } else {
            self.hidden
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.num_agents == 0 || self.hidden == 0 || self.latent == 0 || self.embed == 0 {
            return bad("agent count and layer widths must be positive");
        }
        if self.observed == 0 || self.horizon == 0 {
            return bad("observed and horizon steps must be at least 1");
        }
        if self.resolution.width != 2 * self.grid.cols || self.resolution.height != 2 * self.grid.rows {
            return Err(ModelError::Config(format!(
                "raster {}x{} must be twice the {}x{} state grid",
                self.resolution.width, self.resolution.height, self.grid.cols, self.grid.rows
            )));
        }
        Ok(())
    }
}

/// Shared edge function of the interaction step; the first layer is split
/// into a receiver part and a sender part.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationParams {
    pub receiver: ParamId,
    pub sender: ParamId,
    pub bias: ParamId,
    pub second: Linear,
    pub node: Mlp,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Interaction {
    None,
    /// Mean of pairwise edge messages.
    Relation(RelationParams),
    /// Max-pool over neighbor embeddings.
    SocialPool(RelationParams),
}

/// Everything the recurrent variants add on top of the visual path.
#[derive(Clone, Debug, PartialEq)]
pub struct Dynamics {
    pub prior: Mlp,
    pub posterior: Mlp,
    /// Free per-cell table `[cells, embed]`.
    pub embed: ParamId,
    /// Projection of the fixed cell features `[CELL_FEATURES, embed]`.
    pub embed_coords: ParamId,
    pub gru: GruParams,
    pub dh: Mlp,
    /// Coefficients over the fixed cell features, added to the `dh` logits.
    pub dh_coords: Linear,
    /// [`cell_features`] of the grid and its `[CELL_FEATURES, cells]` transpose.
    pub features: Vec<f64>,
    pub features_t: Vec<f64>,
    pub sv: Mlp,
    pub sh: Mlp,
    pub interaction: Interaction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub set: ParamSet,
    pub backbone: ConvEncoderParams,
    /// `[K, 16]` per-agent 1x1 heads over the backbone map.
    pub heads: ParamId,
    pub head_bias: ParamId,
    pub dv: Mlp,
    /// Visual-only forecaster from the last observed features.
    pub horizon_decoder: Option<Mlp>,
    pub dynamics: Option<Dynamics>,
}

impl ModelParams {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let c = &config;
        let (k, g, vd) = (c.num_agents, c.cells(), c.visual_dim());
        let mut set = ParamSet::new();
        let res = c.resolution;
        let backbone = ConvEncoderParams::new(&mut set, "backbone", ObservationGrid::CHANNELS, res.height, res.width, rng);
        let oc = ConvEncoderParams::OUT_CHANNELS;
        let heads = set.uniform("heads.w", &[k, oc], init_scale(oc, 1), rng);
        let head_bias = set.zeros("heads.b", &[k, 1]);
        let dv = Mlp::new(&mut set, "dv", &[vd, c.decoder_hidden, g], Activation::Relu, Activation::Identity, rng);

        let horizon_decoder = (!c.variant.is_recurrent()).then(|| {
            Mlp::new(&mut set, "horizon", &[vd + c.horizon, c.decoder_hidden, g], Activation::Relu, Activation::Identity, rng)
        });

        let dynamics = c.variant.is_recurrent().then(|| {
            let (h, z, e) = (c.hidden, c.latent, c.embed);
            let shared = c.variant.is_shared();
            let targets_in = if shared { k * e } else { e };
            let hd = c.decoder_state_dim();
            let embed = set.uniform("embed", &[g, e], init_scale(g, e), rng);
            let embed_coords = set.uniform("embed.coords", &[CELL_FEATURES, e], init_scale(CELL_FEATURES, e), rng);
            let prior = Mlp::new(&mut set, "prior", &[h, c.mlp_hidden, 2 * z], Activation::Relu, Activation::Identity, rng);
            let posterior =
                Mlp::new(&mut set, "posterior", &[h + targets_in, c.mlp_hidden, 2 * z], Activation::Relu, Activation::Identity, rng);
            let gru = GruParams::new(&mut set, "gru", targets_in + z, h, rng);
            let dh = Mlp::new(&mut set, "dh", &[hd + 2 * z, c.decoder_hidden, g], Activation::Relu, Activation::Identity, rng);
            let dh_coords = Linear::new(&mut set, "dh.coords", hd + 2 * z, CELL_FEATURES, rng);
            let att_in = vd + hd + 2 * z + g;
            let sv = Mlp::new(&mut set, "sv", &[att_in, c.attention_hidden, 1], Activation::Relu, Activation::Identity, rng);
            let sh = Mlp::new(&mut set, "sh", &[att_in, c.attention_hidden, 1], Activation::Relu, Activation::Identity, rng);
            let interaction = match c.variant {
                Variant::GraphRnn | Variant::GraphVrnn => Interaction::Relation(RelationParams::new(&mut set, c, rng)),
                Variant::SocialRnn => Interaction::SocialPool(RelationParams::new(&mut set, c, rng)),
                _ => Interaction::None,
            };
            let features = cell_features(&c.grid);
            let mut features_t = vec![0.0; features.len()];
            for cell in 0..g {
                for j in 0..CELL_FEATURES {
                    features_t[j * g + cell] = features[cell * CELL_FEATURES + j];
                }
            }
            Dynamics { prior, posterior, embed, embed_coords, gru, dh, dh_coords, features, features_t, sv, sh, interaction }
        });

        Ok(ModelParams { config, set, backbone, heads, head_bias, dv, horizon_decoder, dynamics })
    }

    pub fn num_values(&self) -> usize {
        self.set.num_values()
    }
}

/// Width of [`cell_features`].
pub const CELL_FEATURES: usize = 17;

/// Fixed smooth features of every cell center, `[cells, CELL_FEATURES]`:
/// centered coordinates, their quadratic terms and three Fourier harmonics
/// per axis. Lets the state embedding and the dynamics decoder share
/// structure between neighboring cells.
pub fn cell_features(grid: &GridSpec) -> Vec<f64> {
    use core::f64::consts::PI;
    let mut out = Vec::with_capacity(grid.cells() * CELL_FEATURES);
    for cell in 0..grid.cells() {
        let [x, y] = grid.cell_center(cell);
        let (u, w) = (2.0 * x - 1.0, 2.0 * y - 1.0);
        out.extend_from_slice(&[u, w, u * u, w * w, u * w]);
        for m in 1..=3 {
            let f = m as f64 * PI;
            out.extend_from_slice(&[libm::sin(f * x), libm::cos(f * x), libm::sin(f * y), libm::cos(f * y)]);
        }
    }
    out
}

impl RelationParams {
    fn new<R: Rng + ?Sized>(set: &mut ParamSet, c: &ModelConfig, rng: &mut R) -> Self {
        let (h, m) = (c.hidden, c.message);
        let s = init_scale(2 * h, m);
        RelationParams {
            receiver: set.uniform("edge.receiver", &[h, m], s, rng),
            sender: set.uniform("edge.sender", &[h, m], s, rng),
            bias: set.zeros("edge.b", &[m]),
            second: Linear::new(set, "edge.1", m, m, rng),
            node: Mlp::new(set, "node", &[h + m, c.mlp_hidden, h], Activation::Relu, Activation::Tanh, rng),
        }
    }
}
