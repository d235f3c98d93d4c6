//! The `tbc` command line.
//!
//! Exit status is 0 on success, 1 for mistakes on the caller's side (bad
//! flags, invalid or empty queries, rejected credentials) and 2 when the
//! server or the network failed. Data goes to stdout, everything else to
//! stderr.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use terrabyte_core::{DatasetClass, FileType, Query, QuerySummary};

use crate::client::{Client, ClientConfig, ClientError, Progress, ProgressEvent, SystemClock, TlsTrust, SERVER_URL_ENV};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_SERVER: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "tbc", version, about = "Query and download images from a TerraByte portal")]
pub struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Config file to use instead of the default location.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Count the files, parts and bytes a query would download.
    Check {
        #[command(flatten)]
        filter: FilterArgs,
        /// Summarize a precompiled dataset instead of a filter query.
        #[arg(
            long,
            value_name = "ID",
            conflicts_with_all = ["species", "age_min", "age_max", "date_min", "date_max", "plant_id", "filetypes", "dataset_class"]
        )]
        precompiled: Option<String>,
    },
    /// Fetch a few random files per filetype for a quick look.
    Sample {
        #[command(flatten)]
        filter: FilterArgs,
        /// Directory to write into; defaults to the configured sample path.
        #[arg(long, value_name = "DIR")]
        dest: Option<PathBuf>,
    },
    /// Download every file matching a query.
    Download {
        #[command(flatten)]
        filter: FilterArgs,
        /// Directory to write into; defaults to the configured download path.
        #[arg(long, value_name = "DIR")]
        dest: Option<PathBuf>,
    },
    /// Precompiled datasets.
    #[command(subcommand)]
    Precompiled(PrecompiledCommand),
    /// Change the saved settings.
    #[command(subcommand)]
    Config(ConfigCommand),
}

#[derive(Debug, Subcommand)]
pub enum PrecompiledCommand {
    List,
    Get {
        id: String,
        #[arg(long, value_name = "DIR")]
        dest: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ConfigCommand {
    /// Save the user name and password sent with every request.
    SetCredentials {
        #[arg(long)]
        username: String,
        #[arg(long, conflicts_with = "password_stdin", required_unless_present = "password_stdin")]
        password: Option<String>,
        /// Read the password from the first line of stdin.
        #[arg(long)]
        password_stdin: bool,
    },
    SetSamplePath { path: PathBuf },
    SetDownloadPath { path: PathBuf },
    /// Set the server URL and which certificates to trust.
    SetServer {
        url: String,
        /// Trust only the certificate(s) in this PEM file.
        #[arg(long, value_name = "PEM", conflicts_with = "system_trust")]
        cert: Option<PathBuf>,
        /// Trust the platform's certificate store.
        #[arg(long)]
        system_trust: bool,
    },
    /// Print the current settings with the password hidden.
    Show,
}

fn parse_date(s: &str) -> Result<NaiveDate, String> {
    if s.len() != 10 {
        return Err(format!("expected YYYY-MM-DD, got {s:?}"));
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| format!("expected YYYY-MM-DD, got {s:?}: {e}"))
}

fn parse_filetype(s: &str) -> Result<FileType, String> {
    FileType::parse(s).ok_or_else(|| {
        let names: Vec<&str> = FileType::ALL.iter().map(|f| f.as_str()).collect();
        format!("unknown filetype {s:?}; expected one of {}", names.join(", "))
    })
}

fn parse_class(s: &str) -> Result<DatasetClass, String> {
    DatasetClass::parse(s).ok_or_else(|| format!("unknown dataset class {s:?}; expected eagli or field"))
}

/// Flags that map one-to-one onto query fields.
#[derive(Debug, Clone, Default, PartialEq, Eq, Args)]
pub struct FilterArgs {
    /// Species label; repeat to select several.
    #[arg(long = "species", value_name = "LABEL")]
    pub species: Vec<String>,
    #[arg(long, value_name = "DAYS")]
    pub age_min: Option<u32>,
    #[arg(long, value_name = "DAYS")]
    pub age_max: Option<u32>,
    #[arg(long, value_name = "YYYY-MM-DD", value_parser = parse_date)]
    pub date_min: Option<NaiveDate>,
    #[arg(long, value_name = "YYYY-MM-DD", value_parser = parse_date)]
    pub date_max: Option<NaiveDate>,
    #[arg(long, value_name = "ID")]
    pub plant_id: Option<String>,
    /// Comma-separated filetypes; all of them when omitted.
    #[arg(long, value_name = "LIST", value_delimiter = ',', value_parser = parse_filetype)]
    pub filetypes: Vec<FileType>,
    /// eagli (default) or field.
    #[arg(long, value_name = "CLASS", value_parser = parse_class)]
    pub dataset_class: Option<DatasetClass>,
}

impl FilterArgs {
    pub fn to_query(&self) -> Query {
        let filetypes: BTreeSet<FileType> = if self.filetypes.is_empty() {
            FileType::ALL.into_iter().collect()
        } else {
            self.filetypes.iter().copied().collect()
        };
        Query {
            species: self.species.clone(),
            age_min: self.age_min,
            age_max: self.age_max,
            date_min: self.date_min,
            date_max: self.date_max,
            plant_id: self.plant_id.clone(),
            filetypes,
            precompiled_id: None,
            dataset_class: self.dataset_class.unwrap_or_default(),
        }
    }
}

/// The filter flags that reproduce `q`. Precompiled ids are not filter
/// flags and are ignored.
pub fn render_filter_flags(q: &Query) -> Vec<String> {
    let mut out = Vec::new();
    for s in &q.species {
        out.push(format!("--species={s}"));
    }
    let mut opt = |flag: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push(format!("{flag}={v}"));
        }
    };
    opt("--age-min", q.age_min.map(|v| v.to_string()));
    opt("--age-max", q.age_max.map(|v| v.to_string()));
    opt("--date-min", q.date_min.map(|d| d.format("%Y-%m-%d").to_string()));
    opt("--date-max", q.date_max.map(|d| d.format("%Y-%m-%d").to_string()));
    opt("--plant-id", q.plant_id.clone());
    if q.filetypes.len() != FileType::ALL.len() {
        let list: Vec<&str> = q.filetypes.iter().map(|f| f.as_str()).collect();
        opt("--filetypes", Some(list.join(",")));
    }
    if q.dataset_class != DatasetClass::default() {
        opt("--dataset-class", Some(q.dataset_class.as_str().to_owned()));
    }
    out
}

/// Parses filter flags alone, as they appear after a query subcommand.
pub fn parse_filter_flags<I, S>(flags: I) -> Result<Query, clap::Error>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    #[derive(Parser)]
    #[command(no_binary_name = true)]
    struct Only {
        #[command(flatten)]
        filter: FilterArgs,
    }
    Only::try_parse_from(flags).map(|o| o.filter.to_query())
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn user(message: impl Into<String>) -> Self {
        Failure { code: EXIT_USER, message: message.into() }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        let code = match &e {
            ClientError::ConnectionFailed(_)
            | ClientError::Tls(_)
            | ClientError::ServerError { .. }
            | ClientError::Decode(_)
            | ClientError::Extraction(_) => EXIT_SERVER,
            ClientError::Api { .. }
            | ClientError::EmptyResult
            | ClientError::InvalidQuery(_)
            | ClientError::Io(_)
            | ClientError::Config(_) => EXIT_USER,
        };
        let message = match e {
            ClientError::EmptyResult => "empty result: the query matched no files".to_owned(),
            other => other.to_string(),
        };
        Failure { code, message }
    }
}

fn emit_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::user(e.to_string()))?;
    writeln!(out, "{text}").map_err(|e| Failure::user(e.to_string()))
}

fn human_bytes(n: u64) -> String {
    const UNITS: [&str; 5] = ["B", "KB", "MB", "GB", "TB"];
    let mut v = n as f64;
    let mut unit = 0;
    while v >= 1000.0 && unit + 1 < UNITS.len() {
        v /= 1000.0;
        unit += 1;
    }
    if unit == 0 {
        format!("{n} B")
    } else {
        format!("{v:.1} {}", UNITS[unit])
    }
}

#[derive(Serialize)]
struct WrittenFiles<'a> {
    dir: &'a Path,
    files: &'a [PathBuf],
}

#[derive(Serialize)]
struct ShownConfig<'a> {
    path: &'a Path,
    #[serde(flatten)]
    config: ClientConfig,
}

struct Session<'a> {
    json: bool,
    config_path: PathBuf,
    env: &'a dyn Fn(&str) -> Option<String>,
    stdin: &'a mut dyn BufRead,
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

impl Session<'_> {
    fn load(&self) -> Result<ClientConfig, Failure> {
        let mut config = ClientConfig::load_or_default(&self.config_path).map_err(|e| Failure::user(e.to_string()))?;
        if let Some(url) = (self.env)(SERVER_URL_ENV).filter(|u| !u.is_empty()) {
            config.server_url = url;
        }
        Ok(config)
    }

    fn client(&self) -> Result<(Client, ClientConfig), Failure> {
        let config = self.load()?;
        config.validate().map_err(|e| Failure::user(e.to_string()))?;
        Ok((Client::new(&config)?, config))
    }

    fn update(&mut self, change: impl FnOnce(&mut ClientConfig)) -> Result<(), Failure> {
        let mut config = ClientConfig::load_or_default(&self.config_path).map_err(|e| Failure::user(e.to_string()))?;
        change(&mut config);
        config.validate().map_err(|e| Failure::user(e.to_string()))?;
        config.save(&self.config_path).map_err(|e| Failure::user(e.to_string()))?;
        self.show(config)
    }

    fn show(&mut self, mut config: ClientConfig) -> Result<(), Failure> {
        if !config.password.is_empty() {
            config.password = "********".into();
        }
        let shown = ShownConfig { path: &self.config_path, config };
        if self.json {
            emit_json(self.out, &shown)
        } else {
            let text = serde_json::to_string_pretty(&shown).expect("config serializes");
            writeln!(self.out, "{text}").map_err(|e| Failure::user(e.to_string()))
        }
    }

    fn say(&mut self, text: impl AsRef<str>) {
        let _ = writeln!(self.err, "{}", text.as_ref());
    }

    fn print(&mut self, text: impl AsRef<str>) -> Result<(), Failure> {
        writeln!(self.out, "{}", text.as_ref()).map_err(|e| Failure::user(e.to_string()))
    }

    fn files(&mut self, dir: &Path, files: &[PathBuf]) -> Result<(), Failure> {
        if self.json {
            return emit_json(self.out, &WrittenFiles { dir, files });
        }
        for f in files {
            self.print(f.display().to_string())?;
        }
        self.say(format!("{} files written under {}", files.len(), dir.display()));
        Ok(())
    }

    fn run(&mut self, command: Command) -> Result<i32, Failure> {
        match command {
            Command::Check { filter, precompiled } => {
                let q = match precompiled {
                    Some(id) => Query::precompiled(id),
                    None => filter.to_query(),
                };
                q.validate().map_err(|e| Failure::user(format!("invalid query: {e}")))?;
                let (client, _) = self.client()?;
                let summary: QuerySummary = client.check_query(&q)?;
                if self.json {
                    emit_json(self.out, &summary)?;
                } else {
                    self.print(format!(
                        "{} files in {} parts, {}",
                        summary.file_count,
                        summary.part_count,
                        human_bytes(summary.total_bytes)
                    ))?;
                }
            }
            Command::Sample { filter, dest } => {
                let q = filter.to_query();
                q.validate_filter().map_err(|e| Failure::user(format!("invalid query: {e}")))?;
                let (client, config) = self.client()?;
                let dir = dest.unwrap_or(config.sample_path);
                let files = client.get_sample(&q, &dir)?;
                let sample_dir = files.first().and_then(|f| f.parent()).map(Path::to_path_buf).unwrap_or(dir);
                self.files(&sample_dir, &files)?;
            }
            Command::Download { filter, dest } => {
                let q = filter.to_query();
                q.validate_filter().map_err(|e| Failure::user(format!("invalid query: {e}")))?;
                let (client, config) = self.client()?;
                let dir = dest.unwrap_or_else(|| config.download_path.clone());
                let json = self.json;
                let err = &mut *self.err;
                let mut announced = false;
                let mut on_progress = |p: Progress<'_>| {
                    if json {
                        return;
                    }
                    let what = match p.event {
                        ProgressEvent::Polled => return,
                        ProgressEvent::Ready => "ready",
                        ProgressEvent::Fetched => "fetched",
                        ProgressEvent::Extracted => "extracted",
                        ProgressEvent::Abandoned => "abandoned",
                    };
                    if !announced {
                        let _ = writeln!(err, "job {}", p.job_id);
                        announced = true;
                    }
                    let _ = writeln!(err, "part {}: {what}", p.part);
                };
                let report = client.download_with(&q, &dir, config.loop_settings(), &SystemClock, &mut on_progress)?;
                if self.json {
                    emit_json(self.out, &report)?;
                } else {
                    self.print(format!(
                        "{} of {} parts, {} files, {} written to {} in {:.1} s",
                        report.parts_completed,
                        report.parts_total,
                        report.files_written,
                        human_bytes(report.bytes_written),
                        dir.display(),
                        report.wall_time.as_secs_f64()
                    ))?;
                }
                if !report.parts_abandoned.is_empty() {
                    let causes: Vec<String> =
                        report.abandon_causes.iter().map(|(i, c)| format!("part {i}: {c:?}")).collect();
                    self.say(format!("abandoned {}", causes.join(", ")));
                    return Ok(EXIT_SERVER);
                }
            }
            Command::Precompiled(PrecompiledCommand::List) => {
                let (client, _) = self.client()?;
                let list = client.precompiled_list()?;
                if self.json {
                    emit_json(self.out, &list)?;
                } else {
                    for p in list {
                        self.print(format!("{}\t{}\t{} files\t{}", p.id, p.name, p.file_count, human_bytes(p.bytes)))?;
                    }
                }
            }
            Command::Precompiled(PrecompiledCommand::Get { id, dest }) => {
                let (client, config) = self.client()?;
                let dir = dest.unwrap_or_else(|| config.download_path.join(&id));
                let files = client.precompiled_get(&id, &dir)?;
                self.files(&dir, &files)?;
            }
            Command::Config(cmd) => self.config(cmd)?,
        }
        Ok(EXIT_OK)
    }

    fn config(&mut self, cmd: ConfigCommand) -> Result<(), Failure> {
        match cmd {
            ConfigCommand::SetCredentials { username, password, password_stdin } => {
                let password = match password {
                    Some(p) => p,
                    None if password_stdin => {
                        let mut line = String::new();
                        self.stdin.read_line(&mut line).map_err(|e| Failure::user(e.to_string()))?;
                        line.trim_end_matches(['\r', '\n']).to_owned()
                    }
                    None => return Err(Failure::user("a password is required")),
                };
                if username.is_empty() || username.contains(':') {
                    return Err(Failure::user("user name must be non-empty and must not contain ':'"));
                }
                self.update(|c| {
                    c.username = username;
                    c.password = password;
                })
            }
            ConfigCommand::SetSamplePath { path } => {
                let path = absolute(&path);
                self.update(|c| c.sample_path = path)
            }
            ConfigCommand::SetDownloadPath { path } => {
                let path = absolute(&path);
                self.update(|c| c.download_path = path)
            }
            ConfigCommand::SetServer { url, cert, system_trust } => self.update(|c| {
                c.server_url = url.trim_end_matches('/').to_owned();
                if let Some(pem) = cert {
                    c.tls_trust = TlsTrust::Pem(absolute(&pem));
                } else if system_trust {
                    c.tls_trust = TlsTrust::System;
                }
            }),
            ConfigCommand::Show => {
                let config = self.load()?;
                self.show(config)
            }
        }
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Runs one `tbc` invocation. `args` includes the program name.
pub fn run<I, S>(
    args: I,
    env: &dyn Fn(&str) -> Option<String>,
    stdin: &mut dyn BufRead,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{e}");
                    EXIT_USER
                }
            };
        }
    };
    let config_path = match cli.config.clone().map(Ok).unwrap_or_else(|| ClientConfig::default_path(env)) {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_USER;
        }
    };
    let mut session = Session { json: cli.json, config_path, env, stdin, out: stdout, err: stderr };
    match session.run(cli.command) {
        Ok(code) => code,
        Err(f) => {
            session.say(format!("error: {}", f.message));
            f.code
        }
    }
}
