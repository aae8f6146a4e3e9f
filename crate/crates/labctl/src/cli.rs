//! Command-line front end. Every verb except `serve`, `verify` and
//! `sim --local` is a plain HTTP client.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use scooterlab::controller::enrich::providers_from_name;
use scooterlab::controller::{Acknowledgments, FleetController};
use scooterlab::model::{LoanId, ProjectId, Role, ScooterId, SensorKind, Timestamp, UserId};
use scooterlab::policy::PolicyDraft;
use scooterlab::protocol::{ApiError, Census};
use scooterlab::ramp::{parse_region, NewProject, NewUser, RegionMode, TripQuery};
use scooterlab::sim::scenario::open_policy;
use scooterlab::sim::{self, demo_scenario, DemoOptions, RunOptions, Scenario, SimController, SimReport};
use scooterlab_net::client::{Recorded, Recorder};
use scooterlab_net::server::NewScooter;
use scooterlab_net::{Bound, ClientError, FcClient, Http, HttpController, RampClient, ServeConfig};

use crate::acceptance;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "labctl", version, about = "Run, simulate and administer the scooter testbed")]
pub struct Cli {
    /// Fleet controller base URL.
    #[arg(long, global = true, env = "SCOOTERLAB_URL", default_value = "http://127.0.0.1:7070")]
    pub url: String,
    /// Research portal base URL.
    #[arg(long, global = true, env = "SCOOTERLAB_RAMP_URL", default_value = "http://127.0.0.1:7071")]
    pub ramp_url: String,
    /// Session token from `labctl login`.
    #[arg(long, global = true, env = "SCOOTERLAB_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    /// Print raw API responses as JSON.
    #[arg(long, global = true)]
    pub json: bool,
    /// Append every HTTP request to this file (JSON lines), for `labctl replay`.
    #[arg(long, global = true, value_name = "FILE")]
    pub record: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Start the fleet controller and research portal in one process.
    Serve(ServeArgs),
    /// Run simulations.
    #[command(subcommand)]
    Sim(SimCommand),
    /// Manage portal accounts.
    #[command(subcommand)]
    User(UserCommand),
    /// Open a session and print its token.
    Login {
        #[arg(long)]
        name: String,
        #[arg(long, env = "SCOOTERLAB_PASSWORD", hide_env_values = true)]
        password: String,
    },
    /// Close the current session.
    Logout,
    /// Show who the token belongs to.
    Whoami,
    /// Research projects.
    #[command(subcommand)]
    Project(ProjectCommand),
    /// Scooters, batteries and inspections.
    #[command(subcommand)]
    Fleet(FleetCommand),
    /// Rider loans.
    #[command(subcommand)]
    Loan(LoanCommand),
    /// Per-scooter data collection configs.
    #[command(subcommand)]
    Config(ConfigCommand),
    /// List trips matching a filter.
    Trips {
        #[command(flatten)]
        filter: FilterArgs,
        /// Fetch one page only.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        cursor: Option<String>,
    },
    /// Aggregate statistics for a filter.
    Stats {
        #[command(flatten)]
        filter: FilterArgs,
        /// Include days and scooters without trips.
        #[arg(long)]
        include_empty: bool,
    },
    /// Download trips as CSV, JSON lines or GeoJSON.
    Export {
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Write here instead of stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[command(flatten)]
        filter: FilterArgs,
    },
    /// Load a JSON-lines export.
    Import { file: PathBuf },
    /// Send previously recorded requests again.
    Replay { file: PathBuf },
    /// Run the acceptance checks in-process.
    Verify {
        /// Only these checks (repeatable).
        #[arg(long = "only", value_name = "NAME")]
        only: Vec<String>,
        /// List check names and exit.
        #[arg(long)]
        list: bool,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    #[arg(long, default_value_t = 7070)]
    pub fc_port: u16,
    #[arg(long, default_value_t = 7071)]
    pub ramp_port: u16,
    /// Journal directory; omit to keep everything in memory.
    #[arg(long)]
    pub storage: Option<PathBuf>,
    /// Enrichment providers: stub, down or none.
    #[arg(long, default_value = "stub")]
    pub provider: String,
    #[arg(long, default_value_t = 0)]
    pub provider_seed: u64,
    /// Key for scooter upload tokens.
    #[arg(long, env = "SCOOTERLAB_SECRET", default_value = "scooterlab-dev-secret", hide_env_values = true)]
    pub secret: String,
    /// Serve a built portal UI from this directory.
    #[arg(long = "static", value_name = "DIR")]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// Override the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the event log here.
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Use an in-process controller instead of the one at --url.
    #[arg(long)]
    pub local: bool,
    /// Check the sample ledger after every step (slower).
    #[arg(long)]
    pub check_every_step: bool,
}

#[derive(Debug, Subcommand)]
pub enum SimCommand {
    /// Run a scenario file.
    Run {
        scenario: PathBuf,
        #[command(flatten)]
        args: SimArgs,
    },
    /// Run the built-in eight-scooter campus demo.
    Demo {
        #[arg(long, default_value_t = 8)]
        scooters: usize,
        /// Simulated seconds.
        #[arg(long, default_value_t = 7_200.0)]
        duration: f64,
        #[command(flatten)]
        args: SimArgs,
    },
    /// Print the demo scenario as JSON, as a starting point for your own.
    Scenario {
        #[arg(long, default_value_t = 8)]
        scooters: usize,
        #[arg(long, default_value_t = 7_200.0)]
        duration: f64,
    },
}

#[derive(Debug, Subcommand)]
pub enum UserCommand {
    /// Create an account. The first account needs no token and must be an admin.
    Create {
        #[arg(long)]
        name: String,
        #[arg(long, value_enum)]
        role: RoleArg,
        #[arg(long, env = "SCOOTERLAB_PASSWORD", hide_env_values = true)]
        password: String,
        #[arg(long)]
        display_name: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ProjectCommand {
    /// Create a draft project.
    Create {
        #[arg(long)]
        title: String,
        /// Comma-separated scooter ids.
        #[arg(long, value_delimiter = ',', required = true)]
        fleet: Vec<String>,
        /// Policy JSON file; overrides --sensor and --fence.
        #[arg(long, value_name = "FILE")]
        policy: Option<PathBuf>,
        /// KIND=HZ, repeatable. Without a schedule the policy is always on.
        #[arg(long = "sensor", value_name = "KIND=HZ")]
        sensors: Vec<String>,
        /// Fence ring as lat,lon;lat,lon;...
        #[arg(long)]
        fence: Option<String>,
    },
    /// Push the project's policy to its fleet.
    Activate { project_id: String },
    /// Mark a project finished and release its scooters.
    Complete { project_id: String },
    List,
    Show { project_id: String },
}

#[derive(Debug, Subcommand)]
pub enum FleetCommand {
    List,
    /// Register a scooter and print its upload token.
    Register {
        scooter_id: String,
        #[arg(long, default_value = "Segway G30 Max")]
        model: String,
        #[arg(long, default_value_t = 100.0)]
        battery: f64,
    },
    /// Battery level for one scooter, or the whole fleet.
    Battery { scooter_id: Option<String> },
    /// Record a maintenance inspection.
    Inspect {
        scooter_id: String,
        /// Mark as failed (scooter stays in maintenance).
        #[arg(long)]
        fail: bool,
    },
}

#[derive(Debug, Args)]
pub struct AckArgs {
    /// Shorthand for all three acknowledgments.
    #[arg(long)]
    pub ack_all: bool,
    #[arg(long)]
    pub consent: bool,
    #[arg(long)]
    pub safety_video: bool,
    #[arg(long)]
    pub survey: bool,
}

impl AckArgs {
    fn acks(&self) -> Acknowledgments {
        Acknowledgments {
            consent: self.ack_all || self.consent,
            safety_video: self.ack_all || self.safety_video,
            survey: self.ack_all || self.survey,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum LoanCommand {
    Checkout {
        scooter_id: String,
        /// Borrower; defaults to the caller.
        #[arg(long)]
        rider: Option<String>,
        #[command(flatten)]
        acks: AckArgs,
    },
    Renew {
        loan_id: String,
        #[command(flatten)]
        acks: AckArgs,
    },
    Return {
        loan_id: String,
        /// Inspection found a problem.
        #[arg(long)]
        failed_inspection: bool,
    },
    List,
}

#[derive(Debug, Subcommand)]
pub enum ConfigCommand {
    /// Issue a new configuration version to one scooter.
    Issue {
        scooter_id: String,
        #[arg(long, value_name = "FILE")]
        policy: Option<PathBuf>,
        #[arg(long = "sensor", value_name = "KIND=HZ")]
        sensors: Vec<String>,
        #[arg(long)]
        project: Option<String>,
    },
    History { scooter_id: String },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RoleArg {
    Admin,
    Researcher,
    Rider,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Admin => Role::Admin,
            RoleArg::Researcher => Role::Researcher,
            RoleArg::Rider => Role::Rider,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Csv,
    Jsonl,
    Geojson,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Intersects,
    Contained,
}

#[derive(Debug, Args, Default)]
pub struct FilterArgs {
    #[arg(long)]
    pub project: Option<String>,
    /// Comma-separated.
    #[arg(long)]
    pub scooters: Option<String>,
    /// Epoch ms or RFC 3339.
    #[arg(long, value_parser = parse_time)]
    pub from: Option<i64>,
    #[arg(long, value_parser = parse_time)]
    pub to: Option<i64>,
    /// lat,lon;lat,lon;...
    #[arg(long)]
    pub region: Option<String>,
    #[arg(long, value_enum)]
    pub region_mode: Option<ModeArg>,
    #[arg(long)]
    pub min_distance: Option<f64>,
    /// Match every trip (a filter otherwise needs at least one criterion).
    #[arg(long)]
    pub all: bool,
}

impl FilterArgs {
    fn query(&self) -> TripQuery {
        TripQuery {
            project_id: self.project.clone(),
            scooter_ids: self.scooters.clone(),
            from: self.from.or(self.all.then_some(0)),
            to: self.to,
            region: self.region.clone(),
            region_mode: self.region_mode.map(|m| match m {
                ModeArg::Intersects => RegionMode::Intersects,
                ModeArg::Contained => RegionMode::Contained,
            }),
            min_distance_m: self.min_distance,
            ..TripQuery::default()
        }
    }
}

fn parse_time(s: &str) -> Result<i64, String> {
    if let Ok(ms) = s.parse::<i64>() {
        return Ok(ms);
    }
    chrono::DateTime::parse_from_rfc3339(s)
        .map(|t| t.timestamp_millis())
        .map_err(|e| format!("expected epoch milliseconds or RFC 3339: {e}"))
}

// ---- errors ----

#[derive(Debug)]
pub enum CliError {
    /// Non-verification failure; printed as `{code, message}`.
    Op(ApiError),
    /// A check or census did not balance.
    Verify(String),
}

impl CliError {
    fn op(code: &str, message: impl Into<String>) -> Self {
        CliError::Op(ApiError::new(code, message.into()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Op(_) => EXIT_ERROR,
            CliError::Verify(_) => EXIT_VERIFY,
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Api { error, .. } => CliError::Op(error),
            ClientError::Transport { .. } => CliError::op("Unreachable", e.to_string()),
            ClientError::Decode { .. } => CliError::op("BadResponse", e.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::op("IoError", e.to_string())
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

// ---- plumbing ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Service {
    Fc,
    Ramp,
}

/// A recorded request tagged with the service it went to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedCall {
    pub service: Service,
    #[serde(flatten)]
    pub request: Recorded,
}

struct Ctx<'a> {
    cli: &'a Cli,
    out: &'a mut dyn Write,
    fc_rec: Recorder,
    ramp_rec: Recorder,
}

fn check_url(url: &str) -> Result<()> {
    let ok = (url.starts_with("http://") || url.starts_with("https://"))
        && url.split_once("://").is_some_and(|(_, rest)| !rest.is_empty() && !rest.starts_with('/'))
        && !url.contains(char::is_whitespace);
    if ok {
        Ok(())
    } else {
        Err(CliError::op("InvalidArgument", format!("not an http(s) URL: {url:?}")))
    }
}

impl Ctx<'_> {
    fn http(&self, url: &str, rec: &Recorder) -> Result<Http> {
        check_url(url)?;
        Ok(Http::new(url).with_token(self.cli.token.clone()).with_recorder(rec.clone()))
    }

    fn fc(&self) -> Result<FcClient> {
        Ok(FcClient::new(self.http(&self.cli.url, &self.fc_rec)?))
    }

    fn ramp(&self) -> Result<RampClient> {
        Ok(RampClient::new(self.http(&self.cli.ramp_url, &self.ramp_rec)?))
    }

    fn token(&self) -> Result<&str> {
        self.cli
            .token
            .as_deref()
            .ok_or_else(|| CliError::op("Unauthenticated", "this command needs --token or SCOOTERLAB_TOKEN (see `labctl login`)"))
    }

    fn json<T: Serialize + ?Sized>(&mut self, value: &T) -> Result<()> {
        let text = serde_json::to_string(value).map_err(|e| CliError::op("Internal", e.to_string()))?;
        writeln!(self.out, "{text}")?;
        Ok(())
    }

    /// JSON in `--json` mode, otherwise the table `render` writes.
    fn show<T: Serialize + ?Sized>(&mut self, value: &T, render: impl FnOnce(&T) -> Table) -> Result<()> {
        if self.cli.json {
            self.json(value)
        } else {
            let table = render(value);
            table.write(self.out)?;
            Ok(())
        }
    }

    fn line(&mut self, text: impl AsRef<str>) -> Result<()> {
        writeln!(self.out, "{}", text.as_ref())?;
        Ok(())
    }

    fn flush_recording(&self) -> io::Result<()> {
        let Some(path) = &self.cli.record else { return Ok(()) };
        let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        for (service, rec) in [(Service::Fc, &self.fc_rec), (Service::Ramp, &self.ramp_rec)] {
            for request in rec.lock().unwrap_or_else(|e| e.into_inner()).drain(..) {
                let call = RecordedCall {
                    service: service.clone(),
                    request,
                };
                writeln!(file, "{}", serde_json::to_string(&call).expect("recorded calls serialize"))?;
            }
        }
        Ok(())
    }
}

/// Plain aligned columns.
struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: Vec<&'static str>) -> Self {
        Self { header, rows: Vec::new() }
    }

    fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    fn pairs(rows: Vec<(&'static str, String)>) -> Self {
        let mut t = Table::new(Vec::new());
        for (k, v) in rows {
            t.row(vec![k.to_owned(), v]);
        }
        t
    }

    fn write(&self, out: &mut dyn Write) -> io::Result<()> {
        let cols = self.header.len().max(self.rows.iter().map(Vec::len).max().unwrap_or(0));
        let mut width = vec![0; cols];
        for (i, h) in self.header.iter().enumerate() {
            width[i] = h.len();
        }
        for r in &self.rows {
            for (i, c) in r.iter().enumerate() {
                width[i] = width[i].max(c.chars().count());
            }
        }
        let line = |out: &mut dyn Write, cells: Vec<&str>| -> io::Result<()> {
            let mut s = String::new();
            for (i, c) in cells.iter().enumerate() {
                if i + 1 == cells.len() {
                    s.push_str(c);
                } else {
                    s.push_str(&format!("{c:<w$}  ", w = width[i]));
                }
            }
            writeln!(out, "{}", s.trim_end())
        };
        if !self.header.is_empty() {
            line(out, self.header.clone())?;
        }
        for r in &self.rows {
            line(out, r.iter().map(String::as_str).collect())?;
        }
        Ok(())
    }
}

fn time(t: Timestamp) -> String {
    chrono::DateTime::from_timestamp_millis(t.millis())
        .map(|d| d.format("%Y-%m-%d %H:%M:%SZ").to_string())
        .unwrap_or_else(|| t.millis().to_string())
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "-".to_owned(), T::to_string)
}

fn label<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => "?".into(),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::op("IoError", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::op("InvalidArgument", format!("{}: {e}", path.display())))
}

fn build_policy(file: Option<&Path>, sensors: &[String], fence: Option<&str>) -> Result<PolicyDraft> {
    if let Some(f) = file {
        return read_json(f);
    }
    if sensors.is_empty() {
        return Err(CliError::op("InvalidArgument", "give --policy FILE or at least one --sensor KIND=HZ"));
    }
    let mut rates = Vec::new();
    for s in sensors {
        let (kind, hz) = s
            .split_once('=')
            .ok_or_else(|| CliError::op("InvalidArgument", format!("{s:?} is not KIND=HZ")))?;
        let kind: SensorKind = kind
            .parse()
            .map_err(|e| CliError::op("InvalidArgument", format!("{kind:?}: {e}")))?;
        let hz: f64 = hz
            .parse()
            .map_err(|_| CliError::op("InvalidArgument", format!("{hz:?} is not a rate")))?;
        rates.push((kind, hz));
    }
    let mut policy = open_policy(&rates);
    if let Some(text) = fence {
        let f = parse_region(text).map_err(|e| CliError::op("InvalidArgument", e.to_string()))?;
        policy.fence = Some(f.into());
    }
    Ok(policy)
}

// ---- entry ----

/// Runs a parsed command line, writing normal output to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let mut ctx = Ctx {
        cli,
        out,
        fc_rec: Recorder::default(),
        ramp_rec: Recorder::default(),
    };
    let result = dispatch(&mut ctx);
    let recorded = ctx.flush_recording();
    result?;
    recorded?;
    Ok(())
}

/// Exit code for a command line, with errors reported on stderr.
pub fn main_with(cli: &Cli) -> i32 {
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let result = run(cli, &mut out);
    let _ = out.flush();
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            match &e {
                CliError::Op(api) => {
                    let body = serde_json::json!({ "code": api.code, "message": api.message });
                    eprintln!("{body}");
                }
                CliError::Verify(msg) => eprintln!("verification failed: {msg}"),
            }
            e.exit_code()
        }
    }
}

fn dispatch(ctx: &mut Ctx) -> Result<()> {
    let cli = ctx.cli;
    match &cli.command {
        Command::Serve(args) => serve(ctx, args),
        Command::Sim(cmd) => sim_command(ctx, cmd),
        Command::User(UserCommand::Create {
            name,
            role,
            password,
            display_name,
        }) => {
            let user = ctx.ramp()?.create_user(&NewUser {
                name: name.clone(),
                role: (*role).into(),
                credential: password.clone(),
                display_name: display_name.clone(),
            })?;
            ctx.show(&user, |u| {
                Table::pairs(vec![
                    ("user_id", u.user_id.to_string()),
                    ("role", label(&u.role)),
                    ("display_name", u.display_name.clone()),
                ])
            })
        }
        Command::Login { name, password } => {
            let session = ctx.ramp()?.login(name, password)?;
            if cli.json {
                ctx.json(&session)
            } else {
                ctx.line(&session.token)
            }
        }
        Command::Logout => {
            ctx.token()?;
            ctx.ramp()?.logout()?;
            if cli.json {
                ctx.json(&serde_json::json!({}))
            } else {
                ctx.line("logged out")
            }
        }
        Command::Whoami => {
            ctx.token()?;
            let me = ctx.ramp()?.whoami()?;
            ctx.show(&me, |c| Table::pairs(vec![("user_id", c.user_id.to_string()), ("role", label(&c.role))]))
        }
        Command::Project(cmd) => project(ctx, cmd),
        Command::Fleet(cmd) => fleet(ctx, cmd),
        Command::Loan(cmd) => loan(ctx, cmd),
        Command::Config(cmd) => config(ctx, cmd),
        Command::Trips { filter, limit, cursor } => {
            ctx.token()?;
            let mut q = filter.query();
            q.limit = *limit;
            q.cursor = cursor.clone();
            let ramp = ctx.ramp()?;
            let page = if limit.is_some() || cursor.is_some() {
                ramp.trips(&q)?
            } else {
                ramp.all_trips(&q)?
            };
            ctx.show(&page, |p| {
                let mut t = Table::new(vec!["trip", "scooter", "project", "started", "minutes", "km", "samples"]);
                for s in &p.trips {
                    t.row(vec![
                        s.trip_id.to_string(),
                        s.scooter_id.to_string(),
                        opt(&s.project_id),
                        time(s.started_at),
                        format!("{:.1}", s.duration_s / 60.0),
                        format!("{:.2}", s.distance_m / 1_000.0),
                        s.sample_counts.values().sum::<usize>().to_string(),
                    ]);
                }
                if let Some(c) = &p.next_cursor {
                    t.row(vec![format!("next cursor: {c}")]);
                }
                t
            })
        }
        Command::Stats { filter, include_empty } => {
            ctx.token()?;
            let mut q = filter.query();
            q.include_empty = include_empty.then_some(true);
            let report = ctx.ramp()?.stats(&q)?;
            ctx.show(&report, |r| {
                let mut t = Table::new(vec!["bucket", "trips", "km", "hours"]);
                let bucket = |t: &mut Table, name: String, b: &scooterlab::ramp::Bucket| {
                    t.row(vec![
                        name,
                        b.trip_count.to_string(),
                        format!("{:.2}", b.distance_m / 1_000.0),
                        format!("{:.2}", b.duration_s / 3_600.0),
                    ])
                };
                for (day, b) in &r.per_day {
                    bucket(&mut t, day.to_string(), b);
                }
                for (s, b) in &r.per_scooter {
                    bucket(&mut t, s.to_string(), b);
                }
                t.row(vec![
                    "total".into(),
                    r.trip_count.to_string(),
                    format!("{:.2}", r.total_distance_m / 1_000.0),
                    format!("{:.2}", r.total_duration_s / 3_600.0),
                ]);
                t.row(vec![format!("mean speed {:.2} m/s", r.mean_speed_mps)]);
                t
            })
        }
        Command::Export { format, out, filter } => {
            ctx.token()?;
            let mut q = filter.query();
            q.format = Some(
                match format {
                    Format::Csv => "csv",
                    Format::Jsonl => "jsonl",
                    Format::Geojson => "geojson",
                }
                .into(),
            );
            let download = ctx.ramp()?.export(&q)?;
            match out {
                Some(path) => {
                    fs::write(path, &download.bytes)?;
                    if cli.json {
                        ctx.json(&serde_json::json!({ "path": path, "bytes": download.bytes.len() }))
                    } else {
                        ctx.line(format!("wrote {} bytes to {}", download.bytes.len(), path.display()))
                    }
                }
                None => {
                    ctx.out.write_all(&download.bytes)?;
                    Ok(())
                }
            }
        }
        Command::Import { file } => {
            ctx.token()?;
            let bytes = fs::read(file).map_err(|e| CliError::op("IoError", format!("{}: {e}", file.display())))?;
            let done = ctx.ramp()?.import(bytes)?;
            ctx.show(&done, |d| Table::pairs(vec![("imported", d.imported.to_string())]))
        }
        Command::Replay { file } => replay(ctx, file),
        Command::Verify { only, list } => verify(ctx, only, *list),
    }
}

fn serve(ctx: &mut Ctx, a: &ServeArgs) -> Result<()> {
    let config = ServeConfig {
        fc_addr: SocketAddr::new(a.host, a.fc_port),
        ramp_addr: SocketAddr::new(a.host, a.ramp_port),
        storage: a.storage.clone(),
        secret: a.secret.clone(),
        provider: a.provider.clone(),
        provider_seed: a.provider_seed,
        static_dir: a.static_dir.clone(),
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let serve_err = |e: scooterlab_net::ServeError| {
        let code = match e {
            scooterlab_net::ServeError::Bind { .. } => "AddressInUse",
            scooterlab_net::ServeError::Storage(_) => "StorageError",
            scooterlab_net::ServeError::Config(_) => "InvalidArgument",
            scooterlab_net::ServeError::Io(_) => "IoError",
        };
        CliError::op(code, e.to_string())
    };
    let bound = rt.block_on(Bound::bind(&config)).map_err(serve_err)?;
    let (fc, ramp) = (bound.fc_addr(), bound.ramp_addr());
    if ctx.cli.json {
        ctx.json(&serde_json::json!({ "fc_url": format!("http://{fc}"), "ramp_url": format!("http://{ramp}") }))?;
    } else {
        ctx.line(format!("fleet controller listening on http://{fc}"))?;
        ctx.line(format!("research portal listening on http://{ramp}"))?;
    }
    ctx.out.flush()?;
    rt.block_on(bound.serve(shutdown_signal())).map_err(serve_err)?;
    if !ctx.cli.json {
        ctx.line("stopped; storage flushed")?;
    }
    Ok(())
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("SIGTERM handler installs");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

/// Census totals printed after a run; wall time stays out so output is
/// reproducible.
#[derive(Debug, Serialize)]
struct SimSummary<'a> {
    balanced: bool,
    seed: u64,
    scooters: usize,
    trips: usize,
    simulated_s: f64,
    generated: Census,
    suppressed: Census,
    recorded: Census,
    acked: Census,
    dropped: Census,
    quarantined: Census,
    ingested: Census,
    restarts: u32,
    max_speed_mps: f64,
    log_lines: u64,
    log_sha256: &'a str,
}

fn sim_command(ctx: &mut Ctx, cmd: &SimCommand) -> Result<()> {
    let demo = |scooters: usize, duration: f64| {
        demo_scenario(&DemoOptions {
            scooters,
            duration_s: duration,
            ..DemoOptions::default()
        })
    };
    let (mut scenario, args) = match cmd {
        SimCommand::Scenario { scooters, duration } => {
            ctx.line(demo(*scooters, *duration).to_json())?;
            return Ok(());
        }
        SimCommand::Run { scenario, args } => {
            let text = fs::read_to_string(scenario).map_err(|e| CliError::op("IoError", format!("{}: {e}", scenario.display())))?;
            let s = Scenario::from_json(&text).map_err(|e| CliError::op("InvalidScenario", format!("{}: {e}", scenario.display())))?;
            (s, args)
        }
        SimCommand::Demo { scooters, duration, args } => (demo(*scooters, *duration), args),
    };
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    scenario
        .validate()
        .map_err(|e| CliError::op("InvalidScenario", e.to_string()))?;

    let mut local;
    let mut remote;
    let controller: &mut dyn SimController = if args.local {
        local = FleetController::in_memory("labctl-local", providers_from_name("stub", scenario.seed).map_err(|e| CliError::op("InvalidArgument", e))?);
        &mut local
    } else {
        check_url(&ctx.cli.url)?;
        let token = ctx.token()?;
        remote = HttpController::new(&ctx.cli.url, token);
        remote.fc.http.health().map_err(CliError::from)?;
        &mut remote
    };
    let opts = RunOptions {
        check_every_step: args.check_every_step,
        ..RunOptions::default()
    };
    let started = Instant::now();
    let report = match &args.log {
        Some(path) => {
            let file = fs::File::create(path).map_err(|e| CliError::op("IoError", format!("{}: {e}", path.display())))?;
            let mut w = BufWriter::new(file);
            let r = sim::run(&scenario, controller, &opts, Some(&mut w));
            w.flush()?;
            r
        }
        None => sim::run(&scenario, controller, &opts, None),
    }
    .map_err(|e| match e {
        sim::SimError::Controller(m) => CliError::op("Unreachable", m),
        other => CliError::op("SimulationFailed", other.to_string()),
    })?;
    let wall = started.elapsed().as_secs_f64();
    let summary = summarize(&scenario, &report);
    if ctx.cli.json {
        ctx.json(&summary)?;
    } else {
        let c = |c: Census| c.samples.to_string();
        Table::pairs(vec![
            ("seed", summary.seed.to_string()),
            ("scooters", summary.scooters.to_string()),
            ("trips", summary.trips.to_string()),
            ("simulated", format!("{:.0} s in {wall:.1} s", summary.simulated_s)),
            ("generated", c(summary.generated)),
            ("suppressed", c(summary.suppressed)),
            ("recorded", c(summary.recorded)),
            ("ingested", c(summary.ingested)),
            ("restarts", summary.restarts.to_string()),
            ("max speed", format!("{:.2} m/s", summary.max_speed_mps)),
            ("log", format!("{} lines, sha256 {}", summary.log_lines, summary.log_sha256)),
            ("census", if summary.balanced { "balanced".into() } else { "MISMATCH".into() }),
        ])
        .write(ctx.out)?;
    }
    if summary.balanced {
        Ok(())
    } else {
        Err(CliError::Verify(census_diff(&report)))
    }
}

fn summarize<'a>(scenario: &Scenario, r: &'a SimReport) -> SimSummary<'a> {
    SimSummary {
        balanced: r.exactly_once(),
        seed: r.seed,
        scooters: scenario.scooters.len(),
        trips: r.trips.len(),
        simulated_s: r.simulated_s,
        generated: r.ledger.generated,
        suppressed: r.ledger.suppressed,
        recorded: r.ledger.recorded(),
        acked: r.ledger.acked,
        dropped: r.ledger.dropped,
        quarantined: r.ledger.quarantined,
        ingested: r.ingested,
        restarts: r.scooters.iter().map(|s| s.restarts).sum(),
        max_speed_mps: r.max_speed_mps,
        log_lines: r.log_lines,
        log_sha256: &r.log_sha256,
    }
}

fn census_diff(r: &SimReport) -> String {
    let recorded = r.ledger.recorded();
    let mut parts = Vec::new();
    if !r.drained {
        parts.push(format!("outboxes not drained, {} samples unsent", r.ledger.unsent.samples));
    }
    if r.ingested != recorded {
        parts.push(format!(
            "ingested {} vs generated-suppressed {} ({:+})",
            r.ingested.samples,
            recorded.samples,
            r.ingested.samples as i128 - recorded.samples as i128
        ));
        if r.ingested.samples == recorded.samples {
            parts.push("same count, different fingerprint".into());
        }
    }
    if r.ingested != r.ledger.acked {
        parts.push(format!("ingested {} vs acknowledged {}", r.ingested.samples, r.ledger.acked.samples));
    }
    for s in r.scooters.iter().filter(|s| !s.ledger.balanced()) {
        parts.push(format!("{} ledger unbalanced", s.scooter_id));
    }
    if parts.is_empty() {
        parts.push("census mismatch".into());
    }
    parts.join("; ")
}

fn project(ctx: &mut Ctx, cmd: &ProjectCommand) -> Result<()> {
    ctx.token()?;
    let ramp = ctx.ramp()?;
    let show = |ctx: &mut Ctx, p: &scooterlab::model::Project| {
        ctx.show(p, |p| {
            Table::pairs(vec![
                ("project_id", p.project_id.to_string()),
                ("title", p.title.clone()),
                ("owner", p.owner.to_string()),
                ("state", label(&p.state)),
                ("fleet", p.fleet.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")),
            ])
        })
    };
    match cmd {
        ProjectCommand::Create {
            title,
            fleet,
            policy,
            sensors,
            fence,
        } => {
            let policy = build_policy(policy.as_deref(), sensors, fence.as_deref())?;
            let fleet: BTreeSet<ScooterId> = fleet.iter().map(|s| ScooterId::new(s.trim())).collect();
            let p = ramp.create_project(&NewProject {
                title: title.clone(),
                policy,
                fleet,
            })?;
            show(ctx, &p)
        }
        ProjectCommand::Activate { project_id } => {
            let a = ramp.activate(&ProjectId::new(project_id))?;
            ctx.show(&a, |a| {
                let mut t = Table::new(vec!["scooter", "version", "issued"]);
                for c in &a.configs {
                    t.row(vec![c.scooter_id.to_string(), c.version.to_string(), time(c.issued_at)]);
                }
                t
            })
        }
        ProjectCommand::Complete { project_id } => {
            let p = ramp.complete(&ProjectId::new(project_id))?;
            show(ctx, &p)
        }
        ProjectCommand::Show { project_id } => {
            let p = ramp.project(&ProjectId::new(project_id))?;
            show(ctx, &p)
        }
        ProjectCommand::List => {
            let list = ramp.projects()?;
            ctx.show(&list, |l| {
                let mut t = Table::new(vec!["project", "state", "owner", "scooters", "title"]);
                for p in l {
                    t.row(vec![
                        p.project_id.to_string(),
                        label(&p.state),
                        p.owner.to_string(),
                        p.fleet.len().to_string(),
                        p.title.clone(),
                    ]);
                }
                t
            })
        }
    }
}

fn fleet(ctx: &mut Ctx, cmd: &FleetCommand) -> Result<()> {
    ctx.token()?;
    let fc = ctx.fc()?;
    match cmd {
        FleetCommand::List => {
            let list = fc.scooters()?;
            ctx.show(&list, |l| {
                let mut t = Table::new(vec!["scooter", "status", "battery", "odometer_km", "config", "model"]);
                for s in l {
                    t.row(vec![
                        s.scooter_id.to_string(),
                        label(&s.status),
                        format!("{:.0}%", s.battery_pct),
                        format!("{:.1}", s.odometer_m / 1_000.0),
                        s.current_config_version.to_string(),
                        s.model.clone(),
                    ]);
                }
                t
            })
        }
        FleetCommand::Register { scooter_id, model, battery } => {
            let reg = fc.register(&NewScooter {
                scooter_id: ScooterId::new(scooter_id),
                model: model.clone(),
                battery_pct: *battery,
            })?;
            ctx.show(&reg, |r| Table::pairs(vec![("scooter_id", r.scooter.scooter_id.to_string()), ("token", r.token.clone())]))
        }
        FleetCommand::Battery { scooter_id } => {
            let levels = match scooter_id {
                Some(id) => vec![fc.battery(&ScooterId::new(id))?],
                None => ctx.ramp()?.battery()?,
            };
            ctx.show(&levels, |l| {
                let mut t = Table::new(vec!["scooter", "battery", "range_miles", "reading"]);
                for b in l {
                    t.row(vec![
                        b.scooter_id.to_string(),
                        b.battery_pct.map_or("-".into(), |p| format!("{p:.0}%")),
                        b.est_range_miles.map_or("-".into(), |m| format!("{m:.1}")),
                        label(&b.status),
                    ]);
                }
                t
            })
        }
        FleetCommand::Inspect { scooter_id, fail } => {
            let status = fc.inspect(&ScooterId::new(scooter_id), !fail)?;
            ctx.show(&status, |s| Table::pairs(vec![("status", label(s))]))
        }
    }
}

fn loans_table(loans: &[scooterlab::model::Loan]) -> Table {
    let mut t = Table::new(vec!["loan", "scooter", "rider", "started", "due", "returned"]);
    for l in loans {
        t.row(vec![
            l.loan_id.to_string(),
            l.scooter_id.to_string(),
            l.rider_id.to_string(),
            time(l.started_at),
            time(l.due_at),
            l.returned_at.map_or("-".into(), time),
        ]);
    }
    t
}

fn loan(ctx: &mut Ctx, cmd: &LoanCommand) -> Result<()> {
    ctx.token()?;
    let fc = ctx.fc()?;
    match cmd {
        LoanCommand::Checkout { scooter_id, rider, acks } => {
            let rider = rider.as_deref().map(UserId::new);
            let l = fc.checkout(&ScooterId::new(scooter_id), rider.as_ref(), acks.acks())?;
            ctx.show(&l, |l| loans_table(std::slice::from_ref(l)))
        }
        LoanCommand::Renew { loan_id, acks } => {
            let l = fc.renew(&LoanId::new(loan_id), acks.acks())?;
            ctx.show(&l, |l| loans_table(std::slice::from_ref(l)))
        }
        LoanCommand::Return { loan_id, failed_inspection } => {
            let r = fc.return_loan(&LoanId::new(loan_id), !failed_inspection)?;
            ctx.show(&r, |r| {
                let mut t = loans_table(std::slice::from_ref(&r.loan));
                t.row(vec![format!("scooter now {}", label(&r.status))]);
                t
            })
        }
        LoanCommand::List => {
            let list = fc.loans()?;
            ctx.show(&list, |l| loans_table(l))
        }
    }
}

fn config(ctx: &mut Ctx, cmd: &ConfigCommand) -> Result<()> {
    ctx.token()?;
    let fc = ctx.fc()?;
    let table = |list: &[scooterlab::model::ScooterConfig]| {
        let mut t = Table::new(vec!["scooter", "version", "issued", "project", "sensors"]);
        for c in list {
            t.row(vec![
                c.scooter_id.to_string(),
                c.version.to_string(),
                time(c.issued_at),
                opt(&c.project_id),
                c.policy
                    .sensors()
                    .iter()
                    .map(|(k, hz)| format!("{k}={hz}"))
                    .collect::<Vec<_>>()
                    .join(","),
            ]);
        }
        t
    };
    match cmd {
        ConfigCommand::Issue {
            scooter_id,
            policy,
            sensors,
            project,
        } => {
            let policy = build_policy(policy.as_deref(), sensors, None)?;
            let c = fc.issue_config(&ScooterId::new(scooter_id), &policy, project.as_deref().map(ProjectId::new))?;
            ctx.show(&c, |c| table(std::slice::from_ref(c)))
        }
        ConfigCommand::History { scooter_id } => {
            let list = fc.config_history(&ScooterId::new(scooter_id))?;
            ctx.show(&list, |l| table(l))
        }
    }
}

fn replay(ctx: &mut Ctx, file: &Path) -> Result<()> {
    let text = fs::read_to_string(file).map_err(|e| CliError::op("IoError", format!("{}: {e}", file.display())))?;
    let fc = ctx.fc()?.http;
    let ramp = ctx.ramp()?.http;
    let mut results = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let call: RecordedCall = serde_json::from_str(line)
            .map_err(|e| CliError::op("InvalidArgument", format!("{}:{}: {e}", file.display(), n + 1)))?;
        let http = match call.service {
            Service::Fc => &fc,
            Service::Ramp => &ramp,
        };
        let method = call
            .request
            .method
            .parse()
            .map_err(|_| CliError::op("InvalidArgument", format!("bad method {:?}", call.request.method)))?;
        let body = call.request.body.clone().map(String::into_bytes);
        let json = body.is_some() && !call.request.path.starts_with("/v1/import");
        let r = http.raw(method, &call.request.path, body, json)?;
        results.push(serde_json::json!({
            "method": call.request.method,
            "path": call.request.path,
            "status": r.status,
        }));
    }
    ctx.show(&results, |rs| {
        let mut t = Table::new(vec!["status", "method", "path"]);
        for r in rs {
            t.row(vec![r["status"].to_string(), label(&r["method"]), label(&r["path"])]);
        }
        t
    })
}

fn verify(ctx: &mut Ctx, only: &[String], list: bool) -> Result<()> {
    if list {
        for name in acceptance::CRITERIA {
            ctx.line(name)?;
        }
        return Ok(());
    }
    let json = ctx.cli.json;
    let out = &mut *ctx.out;
    let outcomes = acceptance::run_selected(only, |o| {
        let _ = if json {
            writeln!(out, "{}", serde_json::json!({ "name": o.name, "pass": o.pass, "detail": o.detail }))
        } else {
            writeln!(out, "{o}")
        };
        let _ = out.flush();
    })
    .map_err(|e| CliError::op("InvalidArgument", e))?;
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass).map(|o| o.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verify(failed.join(", ")))
    }
}
