//! Test deployments: a cloud and two devices, either on a simulated
//! in-process network or over TCP on loopback.

use std::net::TcpListener;
use std::sync::Arc;

use rand_core::OsRng;

use twofe_core::Role;

use crate::approval::{ApprovalPolicy, ApprovalQueue, Gate, Mode};
use crate::channel::{IdentityKey, TcpDialer, TcpServer};
use crate::clock::{Clock, ManualClock, SystemClock};
use crate::cloud::{Cloud, CloudConfig};
use crate::device::{Device, DeviceConfig};
use crate::error::Result;
use crate::state::{DeviceState, PeerInfo};
use crate::store::MemoryStore;
use crate::transport::{Endpoint, Network};

pub const CLOUD_ADDR: &str = "cloud";
pub const ACCOUNT: &str = "alice";
pub const PASSWORD: &[u8] = b"correct horse battery staple";
pub const RECOVERY_SECRET: &[u8] = b"printed-recovery-sheet-0001";

pub struct Deployment {
    pub net: Arc<Network>,
    pub clock: Arc<ManualClock>,
    pub cloud: Arc<Cloud>,
    pub cloud_info: PeerInfo,
    pub primary: Arc<Device>,
    pub secondary: Arc<Device>,
}

impl Deployment {
    /// Cloud plus two unenrolled devices; the secondary uses `policy`.
    pub fn unenrolled(policy: ApprovalPolicy) -> Result<Deployment> {
        Deployment::unenrolled_with(policy, CloudConfig::fast())
    }

    pub fn unenrolled_with(policy: ApprovalPolicy, config: CloudConfig) -> Result<Deployment> {
        let net = Network::new();
        let clock = Arc::new(ManualClock::new(1_700_000_000_000));
        let cloud_key = IdentityKey::generate(&mut OsRng)?;
        let cloud = Cloud::new(
            config,
            clock.clone(),
            net.dialer(CLOUD_ADDR, cloud_key.public()),
            Arc::new(MemoryStore::new()),
        );
        net.attach(CLOUD_ADDR, cloud_key.public(), cloud.clone() as Arc<dyn Endpoint>);
        let cloud_info = PeerInfo {
            device_id: "cloud".into(),
            addr: CLOUD_ADDR.into(),
            identity: cloud_key.public(),
        };
        let mut d = Deployment {
            primary: spawn(&net, &clock, &cloud_info, "primary", ApprovalPolicy::new(Mode::Auto))?,
            secondary: spawn(&net, &clock, &cloud_info, "secondary", policy)?,
            net,
            clock,
            cloud,
            cloud_info,
        };
        d.pair()?;
        Ok(d)
    }

    /// Account created, both devices logged in and enrolled.
    pub fn enrolled(policy: ApprovalPolicy) -> Result<Deployment> {
        Deployment::enrolled_with(policy, CloudConfig::fast())
    }

    pub fn enrolled_with(policy: ApprovalPolicy, config: CloudConfig) -> Result<Deployment> {
        let d = Deployment::unenrolled_with(policy, config)?;
        d.primary.create_account(ACCOUNT, PASSWORD, RECOVERY_SECRET)?;
        d.primary.login(ACCOUNT, PASSWORD)?;
        d.secondary.login(ACCOUNT, PASSWORD)?;
        d.primary.enroll()?;
        Ok(d)
    }

    fn pair(&mut self) -> Result<()> {
        self.primary.set_peer(self.secondary.info());
        self.secondary.set_peer(self.primary.info());
        Ok(())
    }

    /// A fresh logged-in device that has not enrolled.
    pub fn new_device(&self, name: &str, policy: ApprovalPolicy) -> Result<Arc<Device>> {
        let d = spawn(&self.net, &self.clock, &self.cloud_info, name, policy)?;
        d.login(ACCOUNT, PASSWORD)?;
        Ok(d)
    }

    pub fn device(&self, role: Role) -> &Arc<Device> {
        match role {
            Role::Primary => &self.primary,
            Role::Secondary => &self.secondary,
        }
    }
}

/// Creates a device at address `name` and attaches it to `net`.
pub fn spawn(
    net: &Arc<Network>,
    clock: &Arc<ManualClock>,
    cloud: &PeerInfo,
    name: &str,
    policy: ApprovalPolicy,
) -> Result<Arc<Device>> {
    let key = IdentityKey::generate(&mut OsRng)?;
    let mut st = DeviceState::new(name, name, *key.secret_bytes());
    st.cloud = Some(cloud.clone());
    let clock: Arc<dyn Clock> = clock.clone();
    let gate = Arc::new(Gate::new(policy, ApprovalQueue::new(clock.clone())));
    let device = Device::new(
        st,
        None,
        net.dialer(name, key.public()),
        clock,
        gate,
        DeviceConfig::default(),
    )?;
    net.attach(name, key.public(), device.clone() as Arc<dyn Endpoint>);
    Ok(device)
}

/// The same deployment over authenticated TCP on loopback.
pub struct TcpDeployment {
    pub cloud: Arc<Cloud>,
    pub primary: Arc<Device>,
    pub secondary: Arc<Device>,
    pub servers: Vec<TcpServer>,
}

impl TcpDeployment {
    pub fn enrolled(policy: ApprovalPolicy) -> Result<TcpDeployment> {
        TcpDeployment::enrolled_with(policy, CloudConfig::fast())
    }

    pub fn enrolled_with(policy: ApprovalPolicy, config: CloudConfig) -> Result<TcpDeployment> {
        let clock: Arc<dyn Clock> = Arc::new(SystemClock);
        let cloud_key = Arc::new(IdentityKey::generate(&mut OsRng)?);
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let cloud_addr = listener.local_addr()?.to_string();
        let cloud = Cloud::new(
            config,
            clock.clone(),
            TcpDialer::new(cloud_key.clone(), None),
            Arc::new(MemoryStore::new()),
        );
        let mut servers = vec![TcpServer::spawn(listener, cloud_key.clone(), cloud.clone())?];
        let cloud_info = PeerInfo {
            device_id: "cloud".into(),
            addr: cloud_addr,
            identity: cloud_key.public(),
        };
        let mut tcp_device = |name: &str, policy: ApprovalPolicy| -> Result<Arc<Device>> {
            let key = Arc::new(IdentityKey::generate(&mut OsRng)?);
            let listener = TcpListener::bind("127.0.0.1:0")?;
            let addr = listener.local_addr()?.to_string();
            let mut st = DeviceState::new(name, &addr, *key.secret_bytes());
            st.cloud = Some(cloud_info.clone());
            let gate = Arc::new(Gate::new(policy, ApprovalQueue::new(clock.clone())));
            let device = Device::new(
                st,
                None,
                TcpDialer::new(key.clone(), None),
                clock.clone(),
                gate,
                DeviceConfig::default(),
            )?;
            servers.push(TcpServer::spawn(listener, key, device.clone())?);
            Ok(device)
        };
        let primary = tcp_device("primary", ApprovalPolicy::new(Mode::Auto))?;
        let secondary = tcp_device("secondary", policy)?;
        primary.set_peer(secondary.info());
        secondary.set_peer(primary.info());
        primary.create_account(ACCOUNT, PASSWORD, RECOVERY_SECRET)?;
        primary.login(ACCOUNT, PASSWORD)?;
        secondary.login(ACCOUNT, PASSWORD)?;
        primary.enroll()?;
        Ok(TcpDeployment {
            cloud,
            primary,
            secondary,
            servers,
        })
    }
}
