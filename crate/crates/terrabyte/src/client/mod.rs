//! Client library: config file, authenticated request wrapper and the
//! part-by-part download loop.

pub mod config;
pub mod http;
pub mod transfer;

pub use self::config::{ClientConfig, TlsTrust, CONFIG_ENV, SERVER_URL_ENV};
pub use self::http::{Client, ClientError};
pub use self::transfer::{
    get_files, run_job, Clock, DownloadReport, FakeClock, FetchError, LoopSettings, PartOutcome, PartSource, Progress,
    ProgressEvent, SystemClock,
};

impl ClientConfig {
    pub fn loop_settings(&self) -> LoopSettings {
        LoopSettings { backoff: self.backoff, max_tries: self.max_tries }
    }
}
