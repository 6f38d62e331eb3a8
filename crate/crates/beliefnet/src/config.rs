//! Flat `key = value` run configuration.
//!
//! `#` starts a comment, later keys override earlier ones and command-line
//! overrides are applied last. Every key has a default, so an empty file is
//! a complete configuration.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use beliefnet_core::data::{ExampleConfig, ObservationMode};
use beliefnet_core::eval::EvalConfig;
use beliefnet_core::model::{ModelConfig, Variant};
use beliefnet_core::render::{GridSpec, Resolution};
use beliefnet_core::sim::{CourtExtent, SoccerConfig, SynthConfig};
use beliefnet_core::train::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{0}: unknown key `{1}`")]
    UnknownKey(Origin, String),
    #[error("{origin}: `{key}` expects {expected}, got `{value}`")]
    Type { origin: Origin, key: String, expected: &'static str, value: String },
    #[error("{0}: expected `key = value`")]
    Syntax(Origin),
    #[error("{0}: cannot read: {1}")]
    Read(String, String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Where a setting came from.
#[derive(Debug, Clone, PartialEq)]
pub enum Origin {
    Line(usize),
    Flag,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Flag => f.write_str("command line"),
        }
    }
}

/// How agents are hidden from the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Observation {
    Occlusion,
    Camera,
    Full,
}

impl FromStr for Observation {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "occlusion" => Ok(Observation::Occlusion),
            "camera" => Ok(Observation::Camera),
            "full" => Ok(Observation::Full),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Observation::Occlusion => "occlusion",
            Observation::Camera => "camera",
            Observation::Full => "full",
        })
    }
}

trait Value: Sized {
    const EXPECTED: &'static str;
    fn parse(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! display_value {
    ($($ty:ty => $name:literal),*) => {$(
        impl Value for $ty {
            const EXPECTED: &'static str = $name;
            fn parse(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(
    usize => "a non-negative integer",
    u64 => "a non-negative integer",
    bool => "`true` or `false`",
    Variant => "a variant name",
    Observation => "`occlusion`, `camera` or `full`"
);

// Display prints the shortest representation that parses back exactly.
impl Value for f64 {
    const EXPECTED: &'static str = "a number";
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $key:ident: $ty:ty = $default:expr,)*) => {
        /// Every tunable of a run.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($key: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str, origin: Origin) -> Result<(), ConfigError> {
                match key {
                    $(stringify!($key) => {
                        self.$key = <$ty as Value>::parse(value).ok_or_else(|| ConfigError::Type {
                            origin,
                            key: key.to_string(),
                            expected: <$ty as Value>::EXPECTED,
                            value: value.to_string(),
                        })?;
                    })*
                    _ => return Err(ConfigError::UnknownKey(origin, key.to_string())),
                }
                Ok(())
            }

            /// Every key with its current value, in declaration order.
            pub fn to_cfg_string(&self) -> String {
                let mut s = String::new();
                $(let _ = writeln!(s, "{} = {}", stringify!($key), Value::render(&self.$key));)*
                s
            }
        }
    };
}

run_config! {
    seed: u64 = 0,
    variant: Variant = Variant::GraphVrnn,

    hidden: usize = 64,
    latent: usize = 16,
    embed: usize = 32,
    message: usize = 64,
    mlp_hidden: usize = 64,
    decoder_hidden: usize = 128,
    attention_hidden: usize = 32,

    observed: usize = 6,
    horizon: usize = 4,
    frames_per_step: usize = 5,
    grid_cols: usize = 24,
    grid_rows: usize = 16,
    width: usize = 48,
    height: usize = 32,
    observation: Observation = Observation::Occlusion,
    occlusion_period: usize = 10,

    beta_max: f64 = 1.0,
    anneal_fraction: f64 = 0.2,
    gamma: f64 = 0.8,
    teacher_forcing_fraction: f64 = 0.5,
    lr: f64 = 0.01,
    momentum: f64 = 0.9,
    warmup_steps: usize = 200,
    steps: usize = 5000,
    batch_size: usize = 8,
    clip_norm: f64 = 5.0,
    kl_on_forecast: bool = false,
    literal_lambda: bool = false,
    pretrain_steps: usize = 0,
    pretrain_lr: f64 = 0.01,
    /// Steps between progress lines on standard error; 0 disables them.
    log_every: usize = 100,

    episodes: usize = 500,
    synth_agents: usize = 3,
    synth_frames: usize = 50,
    interaction: f64 = 1.0,
    repulsion: bool = true,
    drive: f64 = 0.0015,
    damping: f64 = 0.02,
    init_speed: f64 = 0.012,
    max_speed: f64 = 0.03,
    switch_prob: f64 = 0.02,

    team_size: usize = 5,
    duration_secs: f64 = 300.0,
    ticks_per_sec: usize = 4,
    camera_width: f64 = 0.5,
    camera_height: f64 = 0.5,
    player_speed: f64 = 0.02,
    kick_prob: f64 = 0.3,
    idle_prob: f64 = 0.1,
    kick_power_min: f64 = 0.04,
    kick_power_max: f64 = 0.08,
    ball_friction: f64 = 0.8,
    contact_radius: f64 = 0.02,
    keeper_jitter: f64 = 0.005,
    support_weight: f64 = 0.3,

    court_width: f64 = 1.0,
    court_height: f64 = 1.0,

    eval_seed: u64 = 0,
    ll_samples: usize = 1,
}

impl RunConfig {
    /// Applies the lines of a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let origin = Origin::Line(i + 1);
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax(origin.clone()))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax(origin));
            }
            self.set(key, value.trim(), origin)?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        for o in overrides {
            let (key, value) = o.as_ref().split_once('=').ok_or(ConfigError::Syntax(Origin::Flag))?;
            self.set(key.trim(), value.trim(), Origin::Flag)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec { cols: self.grid_cols, rows: self.grid_rows }
    }

    pub fn resolution(&self) -> Resolution {
        Resolution { width: self.width, height: self.height }
    }

    pub fn model_config(&self, num_agents: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            num_agents,
            hidden: self.hidden,
            latent: self.latent,
            embed: self.embed,
            message: self.message,
            mlp_hidden: self.mlp_hidden,
            decoder_hidden: self.decoder_hidden,
            attention_hidden: self.attention_hidden,
            observed: self.observed,
            horizon: self.horizon,
            grid: self.grid(),
            resolution: self.resolution(),
        }
    }

    pub fn example_config(&self) -> ExampleConfig {
        ExampleConfig {
            observed: self.observed,
            horizon: self.horizon,
            frames_per_step: self.frames_per_step,
            grid: self.grid(),
            resolution: self.resolution(),
            mode: match self.observation {
                Observation::Occlusion => ObservationMode::Occlusion { period: self.occlusion_period },
                Observation::Camera => ObservationMode::Camera,
                Observation::Full => ObservationMode::Full,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            observed: self.observed,
            horizon: self.horizon,
            beta_max: self.beta_max,
            anneal_fraction: self.anneal_fraction,
            gamma: self.gamma,
            teacher_forcing_fraction: self.teacher_forcing_fraction,
            base_lr: self.lr,
            momentum: self.momentum,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            batch_size: self.batch_size,
            clip_norm: self.clip_norm,
            seed: self.seed,
            kl_on_forecast: self.kl_on_forecast,
            literal_lambda: self.literal_lambda,
            pretrain_steps: self.pretrain_steps,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            num_agents: self.synth_agents,
            episodes: self.episodes,
            frames: self.synth_frames,
            interaction: self.interaction,
            repulsion: self.repulsion,
            drive: self.drive,
            damping: self.damping,
            init_speed: self.init_speed,
            max_speed: self.max_speed,
            switch_prob: self.switch_prob,
        }
    }

    pub fn soccer_config(&self) -> SoccerConfig {
        SoccerConfig {
            team_size: self.team_size,
            duration_secs: self.duration_secs,
            ticks_per_sec: self.ticks_per_sec,
            window: [self.camera_width, self.camera_height],
            player_speed: self.player_speed,
            kick_prob: self.kick_prob,
            idle_prob: self.idle_prob,
            kick_power: (self.kick_power_min, self.kick_power_max),
            ball_friction: self.ball_friction,
            contact_radius: self.contact_radius,
            keeper_jitter: self.keeper_jitter,
            support_weight: self.support_weight,
        }
    }

    pub fn court(&self) -> CourtExtent {
        CourtExtent { width: self.court_width, height: self.court_height }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig { seed: self.eval_seed, ll_samples: self.ll_samples }
    }

    /// Cross-field checks that do not depend on the data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| ConfigError::Invalid(m.to_string());
        self.train_config().validate().map_err(bad)?;
        if self.grid_cols == 0 || self.grid_rows == 0 || self.width == 0 || self.height == 0 {
            return Err(bad("grid and raster sizes must be positive"));
        }
        if self.frames_per_step == 0 {
            return Err(bad("frames_per_step must be positive"));
        }
        if self.ll_samples == 0 {
            return Err(bad("ll_samples must be at least 1"));
        }
        if self.court_width <= 0.0 || self.court_height <= 0.0 {
            return Err(bad("court extent must be positive"));
        }
        self.model_config(2).validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

/// Reads a config file; a missing path means all defaults.
pub fn parse_config(path: Option<&Path>) -> Result<RunConfig, ConfigError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.display().to_string(), e.to_string()))?;
    RunConfig::parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_core_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.train_config(), TrainConfig::default());
        assert_eq!(c.model_config(3), ModelConfig::default());
        assert_eq!(c.example_config(), ExampleConfig::default());
        assert_eq!(c.soccer_config(), SoccerConfig::default());
        assert_eq!(SynthConfig { episodes: 100, ..c.synth_config() }, SynthConfig::default());
    }

    #[test]
    fn parses_and_reports() {
        let c = RunConfig::parse("# comment\n\ngamma = 0.8\nsteps = 10 # trailing\nsteps = 12\nvariant = graph-rnn\n").unwrap();
        assert_eq!(c.gamma, 0.8);
        assert_eq!(c.steps, 12);
        assert_eq!(c.variant, Variant::GraphRnn);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        let err = RunConfig::parse("steps = 3\ngamma = cat\n").unwrap_err();
        assert!(matches!(&err, ConfigError::Type { origin: Origin::Line(2), .. }));
        assert!(err.to_string().starts_with("line 2:"));
        assert_eq!(RunConfig::parse("colour = red").unwrap_err(), ConfigError::UnknownKey(Origin::Line(1), "colour".into()));
        assert_eq!(RunConfig::parse("gamma 0.8").unwrap_err(), ConfigError::Syntax(Origin::Line(1)));
        assert!(RunConfig::parse("lr = inf").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["lr=0.1234567891234", "variant = social-rnn", "observation=camera", "drive=1e-7"]).unwrap();
        let back = RunConfig::parse(&c.to_cfg_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.to_cfg_string().lines().count(), RunConfig::KEYS.len());
    }
}
