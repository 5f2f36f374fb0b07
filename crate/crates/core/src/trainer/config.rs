use std::fmt;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv;
use crate::model::{ExtractorConfig, SgdConfig};
use crate::par::Exec;
use crate::scenario::{build_scenario, scenario_from_map, ProtocolMode, ScenarioSpec, NUM_CHANNELS, SCENARIO_KEYS};

/// Which components of the method are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// Dense branch only with one background slot, no pseudo-labels.
    Baseline,
    /// Both branches and `K` slots; unseen pixels never take pseudo-labels.
    NoRemodel,
    /// Remodeling with a single unseen slot and no contrastive loss.
    NoMicro,
    Full,
    /// `Full` plus the replay buffer.
    FullMemory,
    /// All classes in one step with the full objective.
    Joint,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::NoRemodel,
        Variant::NoMicro,
        Variant::Full,
        Variant::FullMemory,
        Variant::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::NoRemodel => "no_remodel",
            Variant::NoMicro => "no_micro",
            Variant::Full => "full",
            Variant::FullMemory => "full_memory",
            Variant::Joint => "joint",
        }
    }

    pub fn dense_only(self) -> bool {
        self == Variant::Baseline
    }

    pub fn uses_pseudo_labels(self) -> bool {
        matches!(self, Variant::NoMicro | Variant::Full | Variant::FullMemory | Variant::Joint)
    }

    pub fn uses_micro(self) -> bool {
        matches!(self, Variant::NoRemodel | Variant::Full | Variant::FullMemory | Variant::Joint)
    }

    pub fn uses_memory(self) -> bool {
        self == Variant::FullMemory
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSource {
    Directory(PathBuf),
    Synthetic {
        num_train: usize,
        num_val: usize,
        height: usize,
        width: usize,
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProposalSource {
    /// Connected components of each sample's full mask.
    Oracle { max_n: usize },
    Grid { rows: usize, cols: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scenario: ScenarioSpec,
    pub order_seed: Option<u64>,
    pub data: DataSource,
    pub extractor: ExtractorConfig,
    pub k: usize,
    pub tau: f64,
    pub lambda: f64,
    pub proposals: ProposalSource,
    /// Pads every proposal set to this many masks.
    pub fixed_n: Option<usize>,
    pub optimizer: SgdConfig,
    pub epochs_per_step: usize,
    pub batch_size: usize,
    /// `0` disables replay even for `full_memory`.
    pub memory_capacity: usize,
    pub seed: u64,
    pub variant: Variant,
    pub init_scale: Option<f64>,
    pub exec: Exec,
}

const RUN_KEYS: &[&str] = &[
    "data_dir",
    "num_train",
    "num_val",
    "height",
    "width",
    "data_seed",
    "feature_channels",
    "depth",
    "kernel_size",
    "k",
    "tau",
    "lambda",
    "proposals",
    "max_n",
    "tiles",
    "fixed_n",
    "lr",
    "momentum",
    "weight_decay",
    "epochs",
    "batch_size",
    "memory_capacity",
    "seed",
    "variant",
    "init_scale",
    "parallel",
];

impl RunConfig {
    /// 8 classes in a `4-1` overlapped scenario over 200 + 80 synthetic
    /// 32×32 images.
    pub fn standard() -> Self {
        RunConfig {
            scenario: build_scenario(8, "4-1", ProtocolMode::Overlapped, None).expect("valid scenario"),
            order_seed: None,
            data: DataSource::Synthetic {
                num_train: 200,
                num_val: 80,
                height: 32,
                width: 32,
                seed: 0,
            },
            extractor: ExtractorConfig {
                in_channels: NUM_CHANNELS,
                feature_channels: 8,
                depth: 2,
                kernel_size: 3,
            },
            k: 5,
            tau: 0.7,
            lambda: 1.0,
            proposals: ProposalSource::Oracle { max_n: 64 },
            fixed_n: None,
            optimizer: SgdConfig::default(),
            epochs_per_step: 60,
            batch_size: 2,
            memory_capacity: 20,
            seed: 0,
            variant: Variant::Full,
            init_scale: None,
            exec: Exec::default(),
        }
    }

    /// Parses a flat `key = value` file. Missing keys keep the values of
    /// [`RunConfig::standard`]; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let allowed: Vec<&str> = SCENARIO_KEYS.iter().chain(RUN_KEYS).copied().collect();
        let map = kv::parse(text, &allowed)?;
        let mut cfg = RunConfig::standard();
        if SCENARIO_KEYS.iter().any(|k| map.contains_key(*k)) {
            cfg.scenario = scenario_from_map(&map)?;
            cfg.order_seed = map.get("order_seed").map(|s| kv::value("order_seed", s)).transpose()?;
        }
        let get = |key: &str| map.get(key).map(String::as_str);

        if let Some(dir) = get("data_dir") {
            if ["num_train", "num_val", "height", "width", "data_seed"].iter().any(|k| map.contains_key(*k)) {
                return Err(Error::Config("data_dir excludes synthetic dataset keys".into()));
            }
            cfg.data = DataSource::Directory(PathBuf::from(dir));
        } else if let DataSource::Synthetic {
            num_train,
            num_val,
            height,
            width,
            seed,
        } = &mut cfg.data
        {
            set(&map, "num_train", num_train)?;
            set(&map, "num_val", num_val)?;
            set(&map, "height", height)?;
            set(&map, "width", width)?;
            set(&map, "data_seed", seed)?;
        }
        set(&map, "feature_channels", &mut cfg.extractor.feature_channels)?;
        set(&map, "depth", &mut cfg.extractor.depth)?;
        set(&map, "kernel_size", &mut cfg.extractor.kernel_size)?;
        set(&map, "k", &mut cfg.k)?;
        set(&map, "tau", &mut cfg.tau)?;
        set(&map, "lambda", &mut cfg.lambda)?;
        set(&map, "lr", &mut cfg.optimizer.learning_rate)?;
        set(&map, "momentum", &mut cfg.optimizer.momentum)?;
        set(&map, "weight_decay", &mut cfg.optimizer.weight_decay)?;
        set(&map, "epochs", &mut cfg.epochs_per_step)?;
        set(&map, "batch_size", &mut cfg.batch_size)?;
        set(&map, "memory_capacity", &mut cfg.memory_capacity)?;
        set(&map, "seed", &mut cfg.seed)?;
        if let Some(v) = get("variant") {
            cfg.variant = v.parse()?;
        }
        if let Some(v) = get("init_scale") {
            cfg.init_scale = Some(kv::value("init_scale", v)?);
        }
        if let Some(v) = get("fixed_n") {
            cfg.fixed_n = Some(kv::value("fixed_n", v)?);
        }
        if let Some(v) = get("parallel") {
            cfg.exec = if kv::value::<bool>("parallel", v)? { Exec::Parallel } else { Exec::Serial };
        }
        cfg.proposals = match get("proposals").unwrap_or("oracle") {
            "oracle" => {
                let mut max_n = 64;
                set(&map, "max_n", &mut max_n)?;
                ProposalSource::Oracle { max_n }
            }
            "grid" => {
                let tiles: Vec<usize> = kv::list("tiles", get("tiles").unwrap_or("4,4"))?;
                match tiles[..] {
                    [rows, cols] => ProposalSource::Grid { rows, cols },
                    _ => return Err(Error::Config("tiles takes rows,cols".into())),
                }
            }
            other => return Err(Error::Config(format!("unknown proposal generator {other:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.optimizer.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if self.epochs_per_step == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.variant.uses_memory() && self.memory_capacity == 0 {
            return Err(Error::Config("full_memory needs memory_capacity > 0".into()));
        }
        Ok(())
    }

    /// Unseen slots actually allocated by the variant.
    pub fn effective_k(&self) -> usize {
        if self.variant.uses_micro() {
            self.k
        } else {
            1
        }
    }

    /// Contrastive weight actually applied by the variant.
    pub fn effective_lambda(&self) -> f64 {
        if self.variant.uses_micro() {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn init_scale(&self) -> f64 {
        self.init_scale.unwrap_or_else(|| self.extractor.default_init_scale())
    }

    /// Canonical config text; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let spec = &self.scenario;
        let _ = writeln!(out, "num_classes = {}", spec.num_classes());
        let sizes: Vec<String> = spec.step_sizes().iter().map(|s| s.to_string()).collect();
        let _ = writeln!(out, "step_sizes = {}", sizes.join(","));
        let _ = writeln!(out, "mode = {}", spec.mode());
        if let Some(s) = self.order_seed {
            let _ = writeln!(out, "order_seed = {s}");
        }
        match &self.data {
            DataSource::Directory(p) => {
                let _ = writeln!(out, "data_dir = {}", p.display());
            }
            DataSource::Synthetic {
                num_train,
                num_val,
                height,
                width,
                seed,
            } => {
                let _ = writeln!(
                    out,
                    "num_train = {num_train}\nnum_val = {num_val}\nheight = {height}\nwidth = {width}\ndata_seed = {seed}"
                );
            }
        }
        let e = &self.extractor;
        let _ = writeln!(
            out,
            "feature_channels = {}\ndepth = {}\nkernel_size = {}",
            e.feature_channels, e.depth, e.kernel_size
        );
        let _ = writeln!(out, "k = {}\ntau = {}\nlambda = {}", self.k, self.tau, self.lambda);
        match self.proposals {
            ProposalSource::Oracle { max_n } => {
                let _ = writeln!(out, "proposals = oracle\nmax_n = {max_n}");
            }
            ProposalSource::Grid { rows, cols } => {
                let _ = writeln!(out, "proposals = grid\ntiles = {rows},{cols}");
            }
        }
        if let Some(n) = self.fixed_n {
            let _ = writeln!(out, "fixed_n = {n}");
        }
        let o = &self.optimizer;
        let _ = writeln!(
            out,
            "lr = {}\nmomentum = {}\nweight_decay = {}",
            o.learning_rate, o.momentum, o.weight_decay
        );
        let _ = writeln!(
            out,
            "epochs = {}\nbatch_size = {}\nmemory_capacity = {}\nseed = {}\nvariant = {}",
            self.epochs_per_step, self.batch_size, self.memory_capacity, self.seed, self.variant
        );
        if let Some(s) = self.init_scale {
            let _ = writeln!(out, "init_scale = {s}");
        }
        out
    }
}

fn set<T: FromStr>(map: &std::collections::BTreeMap<String, String>, key: &str, slot: &mut T) -> Result<()> {
    if let Some(raw) = map.get(key) {
        *slot = kv::value(key, raw)?;
    }
    Ok(())
}
