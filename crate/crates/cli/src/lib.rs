//! Pricing commands and benchmark sweeps behind the `tnprice` binary.

pub mod config;
pub mod reference;

use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use tnprice_core::asian::{
    asian_cross, price_asian_bruteforce, price_asian_montecarlo, price_asian_ttcross, price_asian_variational,
    variational_filter,
};
use tnprice_core::basket::{decouple, payoff_to_mps, price_basket, price_basket_bruteforce, BasketSpec};
use tnprice_core::tensor::Mps;
use tnprice_core::{Method, PriceReport};

pub use config::{Cli, Command, OutputFormat, Product, Settings, OUTPUT_DIR_ENV};
pub use reference::{Reference, ReferenceCache};

/// Column order of every CSV document.
pub const CSV_HEADER: &str = "method,param_name,param_value,run_index,price,abs_error,wall_time_s,seed";

const DEFAULT_BOND: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: String,
    pub param_name: String,
    pub param_value: f64,
    pub run_index: usize,
    pub price: f64,
    pub abs_error: Option<f64>,
    pub wall_time_s: Option<f64>,
    pub seed: Option<u64>,
}

/// A finished command: the rendered document plus side products.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub document: String,
    pub format: OutputFormat,
    pub warnings: Vec<String>,
    pub mps: Option<Mps>,
}

/// Sorts rows by method, parameter value and run index.
pub fn sort_rows(rows: &mut [BenchRow]) {
    rows.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.param_value.total_cmp(&b.param_value))
            .then(a.run_index.cmp(&b.run_index))
    });
}

pub fn render_csv(rows: &[BenchRow]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(CSV_HEADER.split(','))?;
    for row in rows {
        writer.write_record([
            row.method.clone(),
            row.param_name.clone(),
            row.param_value.to_string(),
            row.run_index.to_string(),
            row.price.to_string(),
            row.abs_error.map(|v| v.to_string()).unwrap_or_default(),
            row.wall_time_s.map(|v| v.to_string()).unwrap_or_default(),
            row.seed.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    Ok(String::from_utf8(writer.into_inner()?)?)
}

fn report_value(report: &PriceReport, timing: bool) -> Result<Value> {
    let mut value = serde_json::to_value(report)?;
    if !timing {
        value["wall_time"] = Value::Null;
    }
    Ok(value)
}

fn param_of(report: &PriceReport) -> (&'static str, f64) {
    match report.method {
        Method::Montecarlo => ("n_samples", report.n_samples.unwrap_or(0) as f64),
        Method::Ttcross | Method::Variational => ("bond_dim", report.bond_dim.unwrap_or(0) as f64),
        Method::Bruteforce => ("none", 0.0),
    }
}

fn row_of(report: &PriceReport, run_index: usize, reference: Option<f64>, timing: bool) -> BenchRow {
    let (param_name, param_value) = param_of(report);
    BenchRow {
        method: report.method.to_string(),
        param_name: param_name.to_string(),
        param_value,
        run_index,
        price: report.price,
        abs_error: reference.map(|r| (report.price - r).abs()),
        wall_time_s: timing.then_some(report.wall_time),
        seed: report.seed,
    }
}

fn single_document(
    format: OutputFormat,
    spec: Value,
    report: &PriceReport,
    timing: bool,
) -> Result<String> {
    match format {
        OutputFormat::Json => {
            let mut doc = report_value(report, timing)?;
            doc["spec"] = spec;
            Ok(serde_json::to_string_pretty(&doc)? + "\n")
        }
        OutputFormat::Csv => render_csv(&[row_of(report, 0, None, timing)]),
    }
}

fn price_asian_command(s: &Settings) -> Result<Outcome> {
    let spec = s.asian_spec()?;
    let method = s.method.unwrap_or(Method::Ttcross);
    let bond = s.bond_dim.unwrap_or(DEFAULT_BOND);
    let seed = s.seed();
    let (report, mps) = match method {
        Method::Bruteforce => (price_asian_bruteforce(&spec)?, None),
        Method::Ttcross => {
            let cfg = s.cross(bond, seed)?;
            let report = price_asian_ttcross(&spec, &cfg)?;
            let mps = match s.dump_mps {
                Some(_) => Some(asian_cross(&spec, &cfg)?.mps),
                None => None,
            };
            (report, mps)
        }
        Method::Variational => {
            let sweeps = s.variational_sweeps();
            let report = price_asian_variational(&spec, bond, sweeps, seed)?;
            let mps = match s.dump_mps {
                Some(_) => Some(variational_filter(&spec, bond, sweeps, seed)?.filter.to_mps()),
                None => None,
            };
            (report, mps)
        }
        Method::Montecarlo => {
            let samples = s.sample_counts(&[1e5])?;
            if samples.len() != 1 {
                bail!("price-asian takes a single --samples value");
            }
            (price_asian_montecarlo(&spec, samples[0], seed)?, None)
        }
    };
    if s.dump_mps.is_some() && mps.is_none() {
        bail!("--dump-mps needs an MPS-based method (ttcross or variational), not {method}");
    }
    let format = s.output.unwrap_or(OutputFormat::Json);
    Ok(Outcome {
        document: single_document(format, serde_json::to_value(spec)?, &report, s.timing)?,
        format,
        warnings: report.warnings.clone(),
        mps,
    })
}

fn price_basket_command(s: &Settings) -> Result<Outcome> {
    let spec = s.basket_spec()?;
    let method = s.method.unwrap_or(Method::Ttcross);
    let report = match method {
        Method::Bruteforce => price_basket_bruteforce(&spec)?,
        Method::Ttcross => price_basket(&spec, &s.cross(s.bond_dim.unwrap_or(DEFAULT_BOND), s.seed())?)?,
        other => bail!("price-basket supports ttcross and bruteforce, not {other}"),
    };
    let mps = match s.dump_mps {
        Some(_) => Some(basket_payoff_mps(&spec, s)?),
        None => None,
    };
    let format = s.output.unwrap_or(OutputFormat::Json);
    Ok(Outcome {
        document: single_document(format, serde_json::to_value(&spec)?, &report, s.timing)?,
        format,
        warnings: report.warnings.clone(),
        mps,
    })
}

/// Expiry payoff MPS exactly as the pricer builds it (seed offset by the step count).
fn basket_payoff_mps(spec: &BasketSpec, s: &Settings) -> Result<Mps> {
    let model = decouple(spec)?;
    let cfg = s.cross(
        s.bond_dim.unwrap_or(DEFAULT_BOND),
        s.seed().wrapping_add(spec.steps as u64),
    )?;
    Ok(payoff_to_mps(spec, &model, spec.steps, &cfg)?.mps)
}

fn bench_document(
    format: OutputFormat,
    spec: Value,
    reference: &Reference,
    mut rows: Vec<BenchRow>,
    warnings: &[String],
) -> Result<String> {
    sort_rows(&mut rows);
    match format {
        OutputFormat::Csv => render_csv(&rows),
        OutputFormat::Json => {
            let doc = json!({
                "spec": spec,
                "reference": reference.price,
                "rows": rows,
                "warnings": warnings,
            });
            Ok(serde_json::to_string_pretty(&doc)? + "\n")
        }
    }
}

fn bench_asian_command(s: &Settings, cache: &mut ReferenceCache) -> Result<Outcome> {
    let spec = s.asian_spec()?;
    let repeats = s.repeats.map(|_| s.repeats()).transpose()?.unwrap_or(10);
    let methods = s
        .methods
        .clone()
        .unwrap_or_else(|| vec![Method::Ttcross, Method::Variational, Method::Montecarlo]);
    let bonds = s.bond_dims.clone().unwrap_or_else(|| vec![8, 16, 32, 64]);
    let samples = s.sample_counts(&[1e4, 1e5])?;
    let reference = cache.asian(&spec)?;
    let mut warnings: Vec<String> = reference.warning.iter().cloned().collect();
    let mut rows = Vec::new();
    for method in methods {
        for run in 0..repeats {
            let seed = s.seed().wrapping_add(run as u64);
            let reports = match method {
                Method::Bruteforce => vec![price_asian_bruteforce(&spec)?],
                Method::Ttcross => bonds
                    .iter()
                    .map(|&b| price_asian_ttcross(&spec, &s.cross(b, seed)?).map_err(Into::into))
                    .collect::<Result<Vec<_>>>()?,
                Method::Variational => bonds
                    .iter()
                    .map(|&b| price_asian_variational(&spec, b, s.variational_sweeps(), seed).map_err(Into::into))
                    .collect::<Result<Vec<_>>>()?,
                Method::Montecarlo => samples
                    .iter()
                    .map(|&n| price_asian_montecarlo(&spec, n, seed).map_err(Into::into))
                    .collect::<Result<Vec<_>>>()?,
            };
            for report in reports {
                warnings.extend(report.warnings.iter().map(|w| format!("{method} run {run}: {w}")));
                rows.push(row_of(&report, run, reference.price, s.timing));
            }
        }
    }
    let format = s.output.unwrap_or(OutputFormat::Csv);
    Ok(Outcome {
        document: bench_document(format, serde_json::to_value(spec)?, &reference, rows, &warnings)?,
        format,
        warnings,
        mps: None,
    })
}

fn bench_basket_command(s: &Settings, cache: &mut ReferenceCache) -> Result<Outcome> {
    let spec = s.basket_spec()?;
    let repeats = s.repeats.map(|_| s.repeats()).transpose()?.unwrap_or(10);
    let methods = s.methods.clone().unwrap_or_else(|| vec![Method::Ttcross]);
    let bonds = s.bond_dims.clone().unwrap_or_else(|| vec![4, 8, 16]);
    let reference = cache.basket(&spec)?;
    let mut warnings: Vec<String> = reference.warning.iter().cloned().collect();
    let mut rows = Vec::new();
    for method in methods {
        for run in 0..repeats {
            let seed = s.seed().wrapping_add(run as u64);
            let reports = match method {
                Method::Bruteforce => vec![price_basket_bruteforce(&spec)?],
                Method::Ttcross => bonds
                    .iter()
                    .map(|&b| {
                        let mut report = price_basket(&spec, &s.cross(b, seed)?)?;
                        report.bond_dim = Some(b);
                        Ok(report)
                    })
                    .collect::<Result<Vec<_>>>()?,
                other => bail!("bench-basket supports ttcross and bruteforce, not {other}"),
            };
            for report in reports {
                warnings.extend(report.warnings.iter().map(|w| format!("{method} run {run}: {w}")));
                rows.push(row_of(&report, run, reference.price, s.timing));
            }
        }
    }
    let format = s.output.unwrap_or(OutputFormat::Csv);
    Ok(Outcome {
        document: bench_document(format, serde_json::to_value(&spec)?, &reference, rows, &warnings)?,
        format,
        warnings,
        mps: None,
    })
}

fn oracle_command(s: &Settings, cache: &mut ReferenceCache) -> Result<Outcome> {
    let (spec, reference) = match s.product.unwrap_or(Product::Asian) {
        Product::Asian => {
            let spec = s.asian_spec()?;
            (serde_json::to_value(spec)?, cache.asian(&spec)?)
        }
        Product::Basket => {
            let spec = s.basket_spec()?;
            (serde_json::to_value(&spec)?, cache.basket(&spec)?)
        }
    };
    let Some(price) = reference.price else {
        bail!("{}", reference.warning.unwrap_or_default());
    };
    let report = PriceReport::new(Method::Bruteforce, price);
    let format = s.output.unwrap_or(OutputFormat::Json);
    Ok(Outcome {
        document: single_document(format, spec, &report, false)?,
        format,
        warnings: Vec::new(),
        mps: None,
    })
}

/// Runs one command against a caller-owned reference cache.
pub fn run_with_cache(command: &Command, cache: &mut ReferenceCache) -> Result<Outcome> {
    let settings = command.settings().resolve()?;
    match command {
        Command::PriceAsian(_) => price_asian_command(&settings),
        Command::PriceBasket(_) => price_basket_command(&settings),
        Command::BenchAsian(_) => bench_asian_command(&settings, cache),
        Command::BenchBasket(_) => bench_basket_command(&settings, cache),
        Command::Oracle(_) => oracle_command(&settings, cache),
    }
}

pub fn run(command: &Command) -> Result<Outcome> {
    run_with_cache(command, &mut ReferenceCache::new())
}

/// Where the document goes: `--output-path`, else the output directory from
/// the environment, else standard output.
fn destination(command: &Command, settings: &Settings, format: OutputFormat) -> Option<PathBuf> {
    if let Some(path) = &settings.output_path {
        return Some(path.clone());
    }
    let dir = std::env::var_os(OUTPUT_DIR_ENV)?;
    let ext = match format {
        OutputFormat::Json => "json",
        OutputFormat::Csv => "csv",
    };
    Some(PathBuf::from(dir).join(format!("{}.{ext}", command.name())))
}

/// Runs the command and writes every output it produces.
pub fn execute(cli: &Cli) -> Result<()> {
    let settings = cli.command.settings().resolve()?;
    let outcome = run(&cli.command)?;
    for warning in &outcome.warnings {
        eprintln!("warning: {warning}");
    }
    if let (Some(path), Some(mps)) = (&settings.dump_mps, &outcome.mps) {
        let text = serde_json::to_string(&mps.to_document())?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing MPS to {}", path.display()))?;
    }
    match destination(&cli.command, &settings, outcome.format) {
        Some(path) => std::fs::write(&path, &outcome.document)
            .with_context(|| format!("writing output to {}", path.display()))?,
        None => std::io::stdout().write_all(outcome.document.as_bytes())?,
    }
    Ok(())
}
