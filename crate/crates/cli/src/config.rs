//! Command-line surface and the optional TOML file that mirrors it.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use tnprice_core::asian::AsianSpec;
use tnprice_core::basket::{parse_correlation_matrix, uniform_correlation, BasketSpec, PayoffKind};
use tnprice_core::binomial::{ExerciseStyle, OptionRight, Scheme};
use tnprice_core::ttcross::CrossConfig;
use tnprice_core::Method;

/// Environment variable naming the directory used when no `--output-path` is given.
pub const OUTPUT_DIR_ENV: &str = "TNPRICE_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "tnprice", version, about = "Tensor-network pricing of Asian and basket options")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Price one arithmetic-average Asian option.
    PriceAsian(Settings),
    /// Price one basket put.
    PriceBasket(Settings),
    /// Error and timing table for Asian engines against the enumeration oracle.
    BenchAsian(Settings),
    /// Error and timing table for basket prices against the full-grid oracle.
    BenchBasket(Settings),
    /// Exact reference price of an Asian or basket spec.
    Oracle(Settings),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::PriceAsian(_) => "price-asian",
            Command::PriceBasket(_) => "price-basket",
            Command::BenchAsian(_) => "bench-asian",
            Command::BenchBasket(_) => "bench-basket",
            Command::Oracle(_) => "oracle",
        }
    }

    pub fn settings(&self) -> &Settings {
        match self {
            Command::PriceAsian(s)
            | Command::PriceBasket(s)
            | Command::BenchAsian(s)
            | Command::BenchBasket(s)
            | Command::Oracle(s) => s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Product {
    Asian,
    Basket,
}

/// Every option of every subcommand. Unset values fall back to the config
/// file, then to built-in defaults.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Settings {
    /// TOML file with the same keys as the long flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Initial price (every asset for baskets).
    #[arg(long)]
    pub s0: Option<f64>,
    #[arg(long)]
    pub strike: Option<f64>,
    #[arg(long)]
    pub rate: Option<f64>,
    /// Volatility (every asset for baskets).
    #[arg(long)]
    pub vol: Option<f64>,
    #[arg(long)]
    pub expiry: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// crr or rb.
    #[arg(long)]
    pub scheme: Option<Scheme>,
    /// call or put (Asian only).
    #[arg(long)]
    pub right: Option<OptionRight>,

    #[arg(long)]
    pub assets: Option<usize>,
    /// min, max or avg.
    #[arg(long)]
    pub payoff: Option<PayoffKind>,
    /// european or american.
    #[arg(long)]
    pub style: Option<ExerciseStyle>,
    /// Common off-diagonal correlation.
    #[arg(long, conflicts_with = "corr_file")]
    pub corr: Option<f64>,
    /// Text file holding the full correlation matrix.
    #[arg(long)]
    pub corr_file: Option<PathBuf>,
    /// Product priced by `oracle`.
    #[arg(long, value_enum)]
    pub product: Option<Product>,

    /// bruteforce, ttcross, variational or montecarlo.
    #[arg(long)]
    pub method: Option<Method>,
    /// Comma-separated methods for bench commands.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    #[arg(long)]
    pub bond_dim: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub bond_dims: Option<Vec<usize>>,
    /// Monte Carlo sample counts; scientific notation such as 1e5 is accepted.
    #[arg(long, value_delimiter = ',')]
    pub samples: Option<Vec<f64>>,
    /// Pass budget for TT-cross or sweep count for the variational engine.
    #[arg(long)]
    pub sweeps: Option<usize>,
    /// TT-cross stopping tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Base seed; run `i` uses `seed + i`.
    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long, value_enum)]
    pub output: Option<OutputFormat>,
    #[arg(long)]
    pub output_path: Option<PathBuf>,
    /// Write the final MPS as JSON.
    #[arg(long)]
    pub dump_mps: Option<PathBuf>,
    /// Record wall times; without it they are left empty so reruns are identical.
    #[arg(long)]
    #[serde(default)]
    pub timing: bool,
}

macro_rules! overlay {
    ($flags:ident, $file:ident; $($field:ident),*) => {
        Settings {
            config: None,
            timing: $flags.timing || $file.timing,
            $($field: $flags.$field.clone().or($file.$field),)*
        }
    };
}

impl Settings {
    /// Merges the config file named by `--config`, letting flags win.
    pub fn resolve(&self) -> Result<Settings> {
        let Some(path) = &self.config else {
            return Ok(self.clone());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let file: Settings = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let flags = self;
        Ok(overlay!(flags, file; s0, strike, rate, vol, expiry, steps, scheme, right, assets, payoff, style,
            corr, corr_file, product, method, methods, bond_dim, bond_dims, samples, sweeps, tol, repeats,
            seed, output, output_path, dump_mps))
    }

    pub fn asian_spec(&self) -> Result<AsianSpec> {
        let base = AsianSpec::standard(self.steps.unwrap_or(20));
        let spec = AsianSpec {
            s0: self.s0.unwrap_or(base.s0),
            strike: self.strike.unwrap_or(base.strike),
            rate: self.rate.unwrap_or(base.rate),
            vol: self.vol.unwrap_or(base.vol),
            expiry: self.expiry.unwrap_or(base.expiry),
            scheme: self.scheme.unwrap_or(base.scheme),
            right: self.right.unwrap_or(base.right),
            ..base
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn basket_spec(&self) -> Result<BasketSpec> {
        let m = self.assets.unwrap_or(3);
        if m == 0 {
            bail!("--assets must be at least 1");
        }
        let corr = match (&self.corr_file, self.corr) {
            (Some(_), Some(_)) => bail!("give either --corr or --corr-file, not both"),
            (Some(path), None) => read_corr(path)?,
            (None, rho) => uniform_correlation(m, rho.unwrap_or(1.0 / 3.0)),
        };
        let spec = BasketSpec {
            s0: vec![self.s0.unwrap_or(100.0); m],
            strike: self.strike.unwrap_or(100.0),
            rate: self.rate.unwrap_or(0.1),
            vols: vec![self.vol.unwrap_or(0.5); m],
            corr,
            expiry: self.expiry.unwrap_or(1.0),
            steps: self.steps.unwrap_or(10),
            payoff: self.payoff.unwrap_or(PayoffKind::Min),
            style: self.style.unwrap_or(ExerciseStyle::American),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn repeats(&self) -> Result<usize> {
        match self.repeats.unwrap_or(1) {
            0 => bail!("--repeats must be at least 1"),
            r => Ok(r),
        }
    }

    /// Cross settings for one run with the given bond and seed.
    pub fn cross(&self, bond: usize, seed: u64) -> Result<CrossConfig> {
        let cfg = CrossConfig {
            max_bond: bond,
            n_sweeps: self.sweeps.unwrap_or(CrossConfig::default().n_sweeps),
            tol: self.tol.unwrap_or(CrossConfig::default().tol),
            seed,
            ..CrossConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn variational_sweeps(&self) -> usize {
        self.sweeps.unwrap_or(2)
    }

    pub fn sample_counts(&self, default: &[f64]) -> Result<Vec<u64>> {
        self.samples
            .as_deref()
            .unwrap_or(default)
            .iter()
            .map(|&s| {
                if s.fract() != 0.0 || !(2.0..=u64::MAX as f64).contains(&s) {
                    bail!("sample counts must be integers >= 2, got {s}");
                }
                Ok(s as u64)
            })
            .collect()
    }
}

fn read_corr(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_correlation_matrix(&text)?)
}
