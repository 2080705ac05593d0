//! `key = value` configuration file shared by the CLI and the daemon.
//!
//! ```text
//! # this device
//! device_id = laptop
//! listen = 127.0.0.1:7401
//! state = laptop.json
//! # the paired device, as printed by its `twofe init`
//! peer_id = phone
//! peer = 127.0.0.1:7402
//! peer_key = 5f1c...
//! cloud = 127.0.0.1:7400
//! cloud_key = 9a0b...
//! policy = notify
//! folder.taxes/ = prompt
//! approval_window = 60
//! ```
//!
//! Relative paths are taken relative to the file's directory.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use twofe_protocol::approval::{ApprovalPolicy, Mode};
use twofe_protocol::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub device_id: Option<String>,
    pub listen: Option<String>,
    pub state: Option<PathBuf>,
    pub account: Option<String>,
    pub peer: Option<String>,
    pub peer_id: Option<String>,
    pub peer_key: Option<String>,
    pub cloud: Option<String>,
    pub cloud_key: Option<String>,
    pub cloud_dir: Option<PathBuf>,
    pub policy: Option<Mode>,
    pub folders: Vec<(String, Mode)>,
    pub approval_window: Option<Duration>,
    pub console: Option<SocketAddr>,
    pub console_token: Option<String>,
    pub notifications: Option<PathBuf>,
}

/// `tcp://host:port` or `host:port`.
pub fn strip_scheme(url: &str) -> &str {
    url.strip_prefix("tcp://").unwrap_or(url).trim_end_matches('/')
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Config::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Config> {
        let mut c = Config::default();
        let path = |v: &str| base.join(v);
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Malformed(format!("config line {}: {what}", n + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key = value"))?;
            let (key, value) = (key.trim(), value.trim().to_owned());
            if let Some(prefix) = key.strip_prefix("folder.") {
                c.folders.push((prefix.to_owned(), value.parse()?));
                continue;
            }
            match key {
                "device_id" => c.device_id = Some(value),
                "listen" => c.listen = Some(value),
                "state" => c.state = Some(path(&value)),
                "account" => c.account = Some(value),
                "peer" => c.peer = Some(value),
                "peer_id" => c.peer_id = Some(value),
                "peer_key" => c.peer_key = Some(value),
                "cloud" => c.cloud = Some(strip_scheme(&value).to_owned()),
                "cloud_key" => c.cloud_key = Some(value),
                "cloud_dir" => c.cloud_dir = Some(path(&value)),
                "policy" => c.policy = Some(value.parse()?),
                "approval_window" => {
                    let secs = value.parse().map_err(|_| bad("approval_window is whole seconds"))?;
                    c.approval_window = Some(Duration::from_secs(secs));
                }
                "console" => c.console = Some(value.parse().map_err(|_| bad("console is addr:port"))?),
                "console_token" => c.console_token = Some(value),
                "notifications" => c.notifications = Some(path(&value)),
                other => return Err(bad(&format!("unknown key {other:?}"))),
            }
        }
        Ok(c)
    }

    /// Policy with `mode` overriding the configured one. Notify by default.
    pub fn policy(&self, mode: Option<Mode>) -> ApprovalPolicy {
        let base = ApprovalPolicy::default();
        let mut p = ApprovalPolicy::new(mode.or(self.policy).unwrap_or(base.mode))
            .with_window(self.approval_window.unwrap_or(base.approval_window));
        for (prefix, m) in &self.folders {
            p = p.with_folder(prefix, *m);
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_key() {
        let c = Config::parse(
            "# comment\n\
             device_id = laptop\n\
             listen=127.0.0.1:1\n\
             state = s.json\n\
             peer = 127.0.0.1:2\n\
             peer_id = phone\n\
             peer_key = ab\n\
             cloud = tcp://127.0.0.1:3/\n\
             cloud_key = cd\n\
             policy = prompt\n\
             folder.tax/ = auto\n\
             approval_window = 30\n\
             console = 127.0.0.1:4\n",
            Path::new("/etc/twofe"),
        )
        .unwrap();
        assert_eq!(c.device_id.as_deref(), Some("laptop"));
        assert_eq!(c.state, Some(PathBuf::from("/etc/twofe/s.json")));
        assert_eq!(c.cloud.as_deref(), Some("127.0.0.1:3"));
        assert_eq!(c.folders, vec![("tax/".to_owned(), Mode::Auto)]);
        let p = c.policy(None);
        assert_eq!(p.mode, Mode::Prompt);
        assert_eq!(p.approval_window, Duration::from_secs(30));
        assert_eq!(p.mode_for(Some("tax/a")), Mode::Auto);
        assert_eq!(c.policy(Some(Mode::Notify)).mode, Mode::Notify);
    }

    #[test]
    fn rejects_unknown_keys_and_modes() {
        assert!(Config::parse("colour = blue", Path::new("")).is_err());
        assert!(Config::parse("policy = sometimes", Path::new("")).is_err());
        assert!(Config::parse("just words", Path::new("")).is_err());
    }

    #[test]
    fn default_policy_is_notify() {
        assert_eq!(Config::default().policy(None).mode, Mode::Notify);
    }
}
