use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use spare_core::adversary::Strategy;
use spare_core::analytics::{self, Model};
use spare_core::exec::Execution;
use spare_core::sim::{self, Preset, ScenarioFile};
use spare_core::token::{embed_token, extract_token, mint_token, KeyConfig};
use spare_core::workload::{gen_benign, gen_malicious_demand, write_dataset};
use spare_core::{Firewall, FirewallConfig, KeyMaterial, Mode, TokenPayload};
use spare_gateway::{Gateway, ServiceConfig, SystemClock};

/// Token tooling, workload generation, simulation, sweeps and the gateway.
///
/// Every run is a pure function of its config file (or preset) and seed:
/// repeating a command with the same arguments reproduces its output
/// byte for byte. SPARE_KEY_HEX and SPARE_IV_HEX override the key material
/// of whatever config is loaded.
#[derive(Debug, Parser)]
#[command(name = "spare", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a request dataset (CSV plus a .meta.toml sidecar).
    Gen(GenArgs),
    /// Run a scenario and write report.json and records.csv.
    Simulate(SimulateArgs),
    /// Run a users x devices x threshold grid and emit one CSV row per cell.
    Sweep(SweepArgs),
    /// Fit a failure-rate model to grid rows.
    Fit(FitArgs),
    /// Run the HTTP validation gateway.
    Serve(ServeArgs),
    /// Print a token for a device.
    Mint(MintArgs),
    /// Judge one URL and print the verdict.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
struct Source {
    /// Scenario file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset shipped with the tool.
    #[arg(long)]
    preset: Option<Preset>,
}

impl Source {
    fn load(&self, fallback: Option<Preset>) -> Result<ScenarioFile> {
        let mut file = match (&self.config, self.preset.or(fallback)) {
            (Some(path), _) => ScenarioFile::load(path)?,
            (None, Some(p)) => p.config(),
            (None, None) => bail!("one of --config or --preset is required"),
        };
        apply_key_env(&mut file.key);
        Ok(file)
    }

    fn firewall(&self) -> Result<FirewallConfig> {
        if self.config.is_none() && self.preset.is_none() {
            let mut key = KeyConfig {
                key_hex: String::new(),
                iv_hex: String::new(),
            };
            apply_key_env(&mut key);
            if key.key_hex.is_empty() || key.iv_hex.is_empty() {
                bail!(
                    "no key material: pass --config/--preset or set SPARE_KEY_HEX and SPARE_IV_HEX"
                );
            }
            let key: KeyMaterial = key.try_into()?;
            return Ok(FirewallConfig::new(Default::default(), key)?);
        }
        Ok(self.load(None)?.build()?.firewall)
    }
}

fn apply_key_env(key: &mut KeyConfig) {
    if let Ok(v) = std::env::var("SPARE_KEY_HEX") {
        key.key_hex = v;
    }
    if let Ok(v) = std::env::var("SPARE_IV_HEX") {
        key.iv_hex = v;
    }
}

#[derive(Debug, Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Users per population.
    #[arg(long)]
    users: Option<u32>,
    /// Attack devices: harvesters and pool size.
    #[arg(long)]
    devices: Option<u32>,
    /// Daily threshold R.
    #[arg(long)]
    threshold: Option<u32>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    strategy: Option<Strategy>,
}

impl Overrides {
    fn apply(&self, file: &mut ScenarioFile) {
        if let Some(s) = self.seed {
            file.seed = s;
        }
        if let Some(u) = self.users {
            file.set_users(u);
        }
        if let Some(d) = self.devices {
            file.set_attack_devices(d);
        }
        if let Some(r) = self.threshold {
            file.firewall.daily_threshold = r;
        }
        if let Some(m) = self.mode {
            file.firewall.mode = m;
        }
        if let (Some(s), Some(a)) = (self.strategy, file.adversary.as_mut()) {
            a.strategy = s;
        }
    }
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    overrides: Overrides,
    /// Generate the malicious demand stream instead of the benign one.
    #[arg(long)]
    malicious: bool,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    overrides: Overrides,
    /// Replay this dataset through the configured firewall instead of generating one.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Base preset; defaults to table3_malicious.
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',', default_value = "100,200,300")]
    users: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_value = "10,20,30")]
    devices: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_value = "30,35,40")]
    threshold: Vec<u32>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Output CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Grid CSV; the shipped malicious table when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = "linear")]
    model: Model,
    /// Also write the fit as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Service or scenario config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides listen_address.
    #[arg(long)]
    listen: Option<String>,
}

#[derive(Debug, Args)]
struct MintArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    device: String,
    /// Mint time as a Unix timestamp; now when absent.
    #[arg(long)]
    at: Option<i64>,
    /// Print a full URL on this base instead of the bare token.
    #[arg(long)]
    url: Option<String>,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// URL or query string carrying id= and resubmit=.
    url: String,
    #[command(flatten)]
    source: Source,
    /// Server time as a Unix timestamp; now when absent.
    #[arg(long)]
    at: Option<i64>,
}

fn now() -> i64 {
    use spare_gateway::Clock;
    SystemClock.now()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => {
            let mut file = a.source.load(None)?;
            a.overrides.apply(&mut file);
            let scenario = file.build()?;
            let exec = Execution::default();
            let dataset = if a.malicious {
                let spec = scenario
                    .malicious
                    .as_ref()
                    .context("config has no malicious population")?;
                gen_malicious_demand(spec, exec)?
            } else {
                let spec = scenario
                    .benign
                    .as_ref()
                    .context("config has no benign population")?;
                gen_benign(spec, &scenario.firewall.key, exec)?
            };
            write_dataset(&dataset, &a.out)?;
            println!("{} events -> {}", dataset.events.len(), a.out.display());
        }
        Command::Simulate(a) => {
            let mut file = a.source.load(None)?;
            a.overrides.apply(&mut file);
            let scenario = file.build()?;
            let out = match &a.input {
                Some(path) => sim::replay_dataset(path, &scenario.firewall)?,
                None => sim::run_scenario(&scenario, Execution::default())?,
            };
            let (report, log) = sim::write_outputs(&out, &a.out)?;
            let t = &out.report.totals;
            println!(
                "{}: {} requests, {} accepted, {} rejected, failed {:.2}%",
                out.report.name.as_deref().unwrap_or("scenario"),
                t.requests,
                t.accepted,
                t.rejected,
                100.0 * t.failed_fraction
            );
            println!(
                "report -> {}\nrecords -> {}",
                report.display(),
                log.display()
            );
        }
        Command::Sweep(a) => {
            let source = Source {
                config: a.config,
                preset: a.preset,
            };
            let mut file = source.load(Some(Preset::Table3Malicious))?;
            if let Some(s) = a.seed {
                file.seed = s;
            }
            if let Some(m) = a.mode {
                file.firewall.mode = m;
            }
            if let (Some(s), Some(adv)) = (a.strategy, file.adversary.as_mut()) {
                adv.strategy = s;
            }
            let rows = analytics::sweep_grid(
                &a.users,
                &a.devices,
                &a.threshold,
                &file,
                Execution::default(),
            )?;
            match &a.out {
                Some(p) => analytics::write_grid_file(&rows, p)?,
                None => analytics::write_grid_csv(&rows, std::io::stdout().lock())?,
            }
        }
        Command::Fit(a) => {
            let rows = match &a.input {
                Some(p) => analytics::read_grid_file(p)
                    .with_context(|| format!("reading {}", p.display()))?,
                None => analytics::table3_fixture(),
            };
            let fit = analytics::fit(&rows, a.model)?;
            println!("model: {}", a.model.name());
            println!("rows: {}", rows.len());
            println!("R^2 = {:.5}", fit.r_squared);
            println!("{}", fit.equation());
            if let Some(p) = &a.out {
                write_json(p, &fit)?;
            }
        }
        Command::Serve(a) => serve(&a.config, a.listen)?,
        Command::Mint(a) => {
            let cfg = a.source.firewall()?;
            let p = TokenPayload::new(a.at.unwrap_or_else(now), a.device)?;
            let t = mint_token(&p, &cfg.key)?;
            match &a.url {
                Some(base) => println!("{}", embed_token(base, &t, false)),
                None => println!("{t}"),
            }
        }
        Command::Validate(a) => {
            let cfg = a.source.firewall()?;
            let (token, resubmit) = extract_token(&a.url);
            let v = Firewall::new(cfg).validate(token.as_ref(), resubmit, a.at.unwrap_or_else(now));
            if v.is_accept() {
                println!("accept");
            } else {
                println!("reject {}", v.reason());
            }
        }
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn serve(config: &Path, listen: Option<String>) -> Result<()> {
    let mut cfg = ServiceConfig::load(config)?;
    if let Some(l) = listen {
        cfg.listen_address = l;
    }
    let mut key = KeyConfig::from(cfg.firewall.key.clone());
    apply_key_env(&mut key);
    cfg.firewall.key = key.try_into()?;
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .try_init();
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let gw = Gateway::new(cfg, Arc::new(SystemClock))?;
        let listener = gw.bind().await?;
        eprintln!("listening on {}", listener.local_addr()?);
        gw.serve(listener, spare_gateway::shutdown_signal()).await?;
        Ok(())
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
