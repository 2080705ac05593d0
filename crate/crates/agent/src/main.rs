use std::io::{Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use rand::rngs::OsRng;
use rand::RngCore;

use twofe_agent::config::{strip_scheme, Config};
use twofe_agent::console::ConsoleServer;
use twofe_agent::{bench, scenario};
use twofe_protocol::approval::{ApprovalQueue, Gate, Mode};
use twofe_protocol::channel::{IdentityKey, TcpDialer, TcpServer};
use twofe_protocol::clock::{Clock, SystemClock};
use twofe_protocol::cloud::{Cloud, CloudConfig};
use twofe_protocol::device::{Device, DeviceConfig};
use twofe_protocol::state::{parse_role, DeviceState, PeerInfo, StateFile};
use twofe_protocol::store::DirStore;
use twofe_protocol::transport::PeerKey;
use twofe_protocol::{Error, RecoveryMode, Result};

const EXIT_USAGE: u8 = 64;
const EXIT_VERDICT: u8 = 65;

#[derive(Parser)]
#[command(name = "twofe", version, about = "Two-factor encrypted cloud storage")]
struct Cli {
    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Approval mode for requests this device answers.
    #[arg(long, global = true)]
    policy: Option<Mode>,
    /// Cloud address, `host:port` or `tcp://host:port`.
    #[arg(long, global = true)]
    cloud: Option<String>,
    /// Address this device or cloud serves on.
    #[arg(long, global = true)]
    listen: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create this device's state file and identity key.
    Init {
        #[arg(long)]
        device_id: Option<String>,
    },
    /// Run a cloud server storing its data under DIR.
    Cloud {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Serve this device to its peer and the cloud, with the approval console.
    Daemon,
    /// Register an account (password and recovery secret from the environment).
    CreateAccount { account: Option<String> },
    /// Log this device in (password from the environment).
    Login { account: Option<String> },
    /// Enroll this device as primary with its paired peer as secondary.
    Enroll,
    /// Encrypt and upload a file.
    Put {
        file: PathBuf,
        /// Catalog name; defaults to the file name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Download and decrypt a file by name or tag.
    Get {
        name: String,
        /// Write here instead of standard output.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// List the catalog.
    Ls,
    /// Move a file to the cloud's trash.
    Rm { name: String },
    /// Take over a role from a live device, which must approve.
    Migrate { role: String },
    /// Take over the role of a lost device using the recovery secret.
    Recover { role: String },
    /// Kill the cloud sessions of a device.
    Invalidate { device_id: String },
    /// Re-randomize all shares together with the peer.
    Refresh,
    /// Measure key-derivation latency against file size.
    Bench {
        /// Comma-separated file sizes in bytes.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run adversary scenarios and print one verdict line per check.
    Scenario {
        /// Run only this scenario.
        name: Option<String>,
        #[arg(long, default_value_t = scenario::DEFAULT_SEED)]
        seed: u64,
        /// Print the verdicts as JSON lines instead.
        #[arg(long)]
        json: bool,
    },
}

fn env_secret(var: &str) -> Result<Vec<u8>> {
    std::env::var(var)
        .map(String::into_bytes)
        .map_err(|_| Error::State(format!("{var} is not set")))
}

struct Ctx {
    cfg: Config,
    cli_policy: Option<Mode>,
    cli_cloud: Option<String>,
    cli_listen: Option<String>,
    base: PathBuf,
}

impl Ctx {
    fn state_file(&self) -> StateFile {
        StateFile::from_env_or(self.cfg.state.clone().unwrap_or_else(|| self.base.join("twofe-state.json")))
    }

    fn listen(&self) -> Option<String> {
        self.cli_listen.clone().or_else(|| self.cfg.listen.clone())
    }

    fn account(&self, arg: Option<String>) -> Result<String> {
        arg.or_else(|| self.cfg.account.clone())
            .ok_or_else(|| Error::State("no account given and none configured".into()))
    }

    fn notifications(&self, state: &StateFile) -> PathBuf {
        self.cfg.notifications.clone().unwrap_or_else(|| {
            let mut p = state.path().as_os_str().to_owned();
            p.push(".notifications");
            PathBuf::from(p)
        })
    }

    /// Loads the device and applies the configured cloud, peer and address.
    fn device(&self) -> Result<(Arc<Device>, StateFile)> {
        let file = self.state_file();
        if !file.exists() {
            return Err(Error::State(format!("{} does not exist; run `twofe init`", file.path().display())));
        }
        let mut st = file.load()?;
        if let Some(addr) = self.listen() {
            st.addr = addr;
        }
        if let Some(addr) = self.cli_cloud.as_deref().map(strip_scheme).or(self.cfg.cloud.as_deref()) {
            let identity = match (&self.cfg.cloud_key, &st.cloud) {
                (Some(k), _) => PeerKey::from_hex(k)?,
                (None, Some(c)) => c.identity,
                (None, None) => return Err(Error::State("cloud_key is not configured".into())),
            };
            st.cloud = Some(PeerInfo {
                device_id: "cloud".into(),
                addr: addr.to_owned(),
                identity,
            });
        }
        // The configured peer only seeds a fresh device: after a migration
        // or recovery the state knows the replacement and must keep it.
        if st.peer.is_none() {
            if let (Some(addr), Some(key)) = (&self.cfg.peer, &self.cfg.peer_key) {
                st.peer = Some(PeerInfo {
                    device_id: self.cfg.peer_id.clone().unwrap_or_else(|| addr.clone()),
                    addr: addr.clone(),
                    identity: PeerKey::from_hex(key)?,
                });
            }
        }
        let clock: Arc<dyn Clock> = Arc::new(SystemClock);
        let queue = ApprovalQueue::with_log(clock.clone(), self.notifications(&file))?;
        let gate = Arc::new(Gate::new(self.cfg.policy(self.cli_policy), queue));
        let identity = Arc::new(IdentityKey::from_secret_bytes(&st.identity_secret[..])?);
        let config = DeviceConfig {
            lock_on_save: true,
            ..DeviceConfig::default()
        };
        let device = Device::new(st, Some(file.clone()), TcpDialer::new(identity, None), clock, gate, config)?;
        Ok((device, file))
    }

    /// Serves the device while a command runs, unless a daemon already
    /// holds its address; flows such as recovery call back into it.
    fn device_serving(&self) -> Result<(Arc<Device>, Option<TcpServer>)> {
        let (device, _) = self.device()?;
        let server = match TcpListener::bind(device.addr()) {
            Ok(l) => Some(TcpServer::spawn(l, device.identity_key(), device.clone())?),
            Err(_) => None,
        };
        Ok((device, server))
    }
}

fn print_identity(prefix: &str, id: &str, addr: &str, key: &PeerKey) {
    if !id.is_empty() {
        println!("{prefix}_id = {id}");
    }
    println!("{prefix} = {addr}");
    println!("{prefix}_key = {}", key.to_hex());
}

fn init(ctx: &Ctx, device_id: Option<String>) -> Result<()> {
    let file = ctx.state_file();
    if file.exists() {
        return Err(Error::State(format!("{} already exists", file.path().display())));
    }
    let addr = ctx.listen().ok_or_else(|| Error::State("--listen or listen = is required".into()))?;
    let id = device_id
        .or_else(|| ctx.cfg.device_id.clone())
        .unwrap_or_else(|| addr.clone());
    let key = IdentityKey::generate(&mut OsRng)?;
    let st = DeviceState::new(&id, &addr, *key.secret_bytes());
    let _lock = file.lock()?;
    file.store(&st)?;
    print_identity("peer", &id, &addr, &key.public());
    Ok(())
}

fn park_forever() -> ! {
    loop {
        std::thread::park();
    }
}

fn cloud(ctx: &Ctx, dir: Option<PathBuf>) -> Result<()> {
    let dir = dir
        .or_else(|| ctx.cfg.cloud_dir.clone())
        .ok_or_else(|| Error::State("--dir or cloud_dir = is required".into()))?;
    std::fs::create_dir_all(&dir)?;
    let key_path = dir.join("identity.key");
    let key = if key_path.exists() {
        let text = std::fs::read_to_string(&key_path)?;
        let bytes = hex::decode(text.trim()).map_err(|e| Error::State(format!("identity.key: {e}")))?;
        IdentityKey::from_secret_bytes(&bytes)?
    } else {
        let key = IdentityKey::generate(&mut OsRng)?;
        write_private(&key_path, hex::encode(key.secret_bytes()).as_bytes())?;
        key
    };
    let key = Arc::new(key);
    let listen = ctx.listen().unwrap_or_else(|| "127.0.0.1:0".into());
    let listener = TcpListener::bind(&listen)?;
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let cloud = Cloud::open(
        CloudConfig::default(),
        clock,
        TcpDialer::new(key.clone(), None),
        Arc::new(DirStore::open(dir.join("blobs"))?),
        &dir.join("journal"),
    )?;
    let server = TcpServer::spawn(listener, key.clone(), cloud.clone())?;
    print_identity("cloud", "", &server.addr().to_string(), &key.public());
    std::io::stdout().flush()?;
    loop {
        std::thread::sleep(Duration::from_secs(60));
        if let Err(e) = cloud.purge_expired() {
            eprintln!("purge failed [{}]: {e}", e.class());
        }
    }
}

fn write_private(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut opts = std::fs::OpenOptions::new();
    opts.create_new(true).write(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    opts.open(path)?.write_all(bytes)?;
    Ok(())
}

fn daemon(ctx: &Ctx) -> Result<()> {
    let (device, _) = ctx.device()?;
    let listener = TcpListener::bind(device.addr())?;
    let _server = TcpServer::spawn(listener, device.identity_key(), device.clone())?;
    let token = ctx.cfg.console_token.clone().unwrap_or_else(|| {
        let mut b = [0u8; 16];
        OsRng.fill_bytes(&mut b);
        hex::encode(b)
    });
    let console_addr = ctx.cfg.console.unwrap_or_else(|| "127.0.0.1:0".parse().unwrap());
    let console = ConsoleServer::spawn(console_addr, device.gate().clone(), token.clone())?;
    println!("device {} serving on {}", device.device_id(), device.addr());
    println!("console {}", console.url(&token));
    std::io::stdout().flush()?;
    park_forever()
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    if path == Path::new("-") {
        let mut buf = Vec::new();
        std::io::stdin().read_to_end(&mut buf)?;
        return Ok(buf);
    }
    Ok(std::fs::read(path)?)
}

fn run(ctx: &Ctx, command: Command) -> Result<u8> {
    match command {
        Command::Init { device_id } => init(ctx, device_id)?,
        Command::Cloud { dir } => cloud(ctx, dir)?,
        Command::Daemon => daemon(ctx)?,
        Command::CreateAccount { account } => {
            let account = ctx.account(account)?;
            let (device, _) = ctx.device()?;
            device.create_account(&account, &env_secret("TWOFE_PASSWORD")?, &env_secret("TWOFE_RECOVERY_SECRET")?)?;
        }
        Command::Login { account } => {
            let account = ctx.account(account)?;
            let (device, _) = ctx.device()?;
            device.login(&account, &env_secret("TWOFE_PASSWORD")?)?;
        }
        Command::Enroll => {
            let (device, _server) = ctx.device_serving()?;
            let peer = device.peer().ok_or_else(|| Error::PairingFailure("no peer configured".into()))?;
            eprintln!("pairing code {}", device.pairing_code(&peer.identity, true));
            device.enroll()?;
        }
        Command::Put { file, name } => {
            let name = match name {
                Some(n) => n,
                None => file
                    .file_name()
                    .and_then(|n| n.to_str())
                    .ok_or_else(|| Error::Malformed("cannot name the file; pass --name".into()))?
                    .to_owned(),
            };
            let data = read_input(&file)?;
            let (device, _server) = ctx.device_serving()?;
            println!("{}", device.encrypt(&name, &data)?.to_hex());
        }
        Command::Get { name, output } => {
            let (device, _server) = ctx.device_serving()?;
            let data = device.decrypt(&name)?;
            match output {
                Some(p) => std::fs::write(p, &data[..])?,
                None => std::io::stdout().write_all(&data)?,
            }
        }
        Command::Ls => {
            let (device, _server) = ctx.device_serving()?;
            for (name, tag) in device.list()? {
                println!("{name}\t{}", tag.to_hex());
            }
        }
        Command::Rm { name } => {
            let (device, _server) = ctx.device_serving()?;
            println!("{}", device.delete(&name)?.to_hex());
        }
        Command::Migrate { role } => {
            let (device, _server) = ctx.device_serving()?;
            device.replace(RecoveryMode::Migrate, parse_role(&role)?, None)?;
        }
        Command::Recover { role } => {
            let secret = env_secret("TWOFE_RECOVERY_SECRET")?;
            let (device, _server) = ctx.device_serving()?;
            device.replace(RecoveryMode::Recover, parse_role(&role)?, Some(&secret))?;
        }
        Command::Invalidate { device_id } => {
            let (device, _) = ctx.device()?;
            device.invalidate(&device_id)?;
        }
        Command::Refresh => {
            let (device, _server) = ctx.device_serving()?;
            device.refresh()?;
        }
        Command::Bench { sizes, reps, seed } => {
            let sizes = sizes.unwrap_or_else(|| bench::DEFAULT_SIZES.to_vec());
            let report = bench::run_bench(&sizes, reps, seed)?;
            print!("{}", report.json_lines());
            print!("{}", report.table());
        }
        Command::Scenario { name, seed, json } => {
            let verdicts = match name {
                Some(n) => vec![scenario::run(&n, seed)
                    .ok_or_else(|| Error::Malformed(format!("unknown scenario {n:?}; known: {}", scenario::names().join(", "))))?],
                None => scenario::run_all(seed),
            };
            for v in &verdicts {
                if json {
                    println!("{}", serde_json::to_string(v).expect("verdicts serialize"));
                } else {
                    for l in v.lines() {
                        println!("{l}");
                    }
                }
            }
            if !verdicts.iter().all(scenario::Verdict::passed) {
                return Ok(EXIT_VERDICT);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let loaded = match &cli.config {
        Some(p) => Config::load(p).map(|c| (c, p.parent().unwrap_or(Path::new("")).to_owned())),
        None => Ok((Config::default(), PathBuf::new())),
    };
    let (cfg, base) = match loaded {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.class());
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let ctx = Ctx {
        cfg,
        cli_policy: cli.policy,
        cli_cloud: cli.cloud,
        cli_listen: cli.listen,
        base,
    };
    match run(&ctx, cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error [{}]: {e}", e.class());
            ExitCode::from(e.code() as u8)
        }
    }
}
