//! Scripted adversaries against a simulated deployment.
//!
//! Each scenario compromises at most one device, captures what that
//! compromise exposes, and records named checks over confidentiality (can the
//! captured scalars be combined into the master key) and availability (do the
//! files uploaded before the compromise still decrypt after the prescribed
//! recovery). Capture models:
//!
//! * stolen: a copy of the device's state file; the device itself goes offline.
//! * temporary: live use of the device's API, nothing exfiltrated beyond replies.
//! * malware: the state file plus hooks into the device's protocol handlers.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use twofe_core::group::PrimeGroup;
use twofe_core::Role;
use twofe_protocol::approval::{ApprovalPolicy, Decision, Mode, RequestKind};
use twofe_protocol::device::{Device, DeviceConfig, Hooks};
use twofe_protocol::sim::{Deployment, ACCOUNT, RECOVERY_SECRET};
use twofe_protocol::state::{DeviceState, Scalar, G};
use twofe_protocol::wire::{Frame, MsgType};
use twofe_protocol::{Error, RecoveryMode, Result};

pub const DEFAULT_SEED: u64 = 0x2fe;

const GUESSED_SECRET: &[u8] = b"guessed-recovery-secret";

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Verdict {
    pub scenario: String,
    pub checks: Vec<Check>,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.pass)
    }

    /// `scenario<TAB>check<TAB>pass|fail`, one line per check. Details carry
    /// fresh key material and are left out so the lines are reproducible.
    pub fn lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| format!("{}\t{}\t{}", self.scenario, c.name, if c.pass { "pass" } else { "fail" }))
            .collect()
    }
}

type Script = fn(&mut Ctx) -> Result<()>;

const SCENARIOS: &[(&str, Script)] = &[
    ("stolen-primary", stolen_primary),
    ("stolen-secondary", stolen_secondary),
    ("temporary-primary", temporary_primary),
    ("temporary-secondary", temporary_secondary),
    ("malware-primary", malware_primary),
    ("malware-secondary", malware_secondary),
    ("primary-recovers-secondary", primary_recovers_secondary),
    ("secondary-recovers-primary", secondary_recovers_primary),
    ("primary-recovers-primary", primary_recovers_primary),
    ("secondary-recovers-secondary", secondary_recovers_secondary),
];

pub fn names() -> Vec<&'static str> {
    SCENARIOS.iter().map(|(n, _)| *n).collect()
}

pub fn run(name: &str, seed: u64) -> Option<Verdict> {
    let (name, script) = SCENARIOS.iter().find(|(n, _)| *n == name)?;
    let mut ctx = match Ctx::new(seed) {
        Ok(c) => c,
        Err(e) => {
            return Some(Verdict {
                scenario: (*name).to_owned(),
                checks: vec![Check {
                    name: "deployment".into(),
                    pass: false,
                    detail: e.to_string(),
                }],
            })
        }
    };
    let outcome = script(&mut ctx);
    ctx.check(
        "script ran to completion",
        outcome.is_ok(),
        outcome.err().map(|e| e.to_string()).unwrap_or_default(),
    );
    ctx.cloud_view_check();
    Some(Verdict {
        scenario: (*name).to_owned(),
        checks: ctx.checks,
    })
}

pub fn run_all(seed: u64) -> Vec<Verdict> {
    SCENARIOS
        .iter()
        .enumerate()
        .map(|(i, (n, _))| run(n, seed.wrapping_add(i as u64)).expect("listed scenario"))
        .collect()
}

/// True if some combination `Σ c_i·v_i` with every `c_i ∈ {-1, 0, 1}`, not
/// all zero, equals `target`. Covers every way of adding or subtracting
/// captured shares.
pub fn reconstructs(values: &[Scalar], target: Scalar) -> bool {
    fn walk(values: &[Scalar], acc: Scalar, used: bool, target: Scalar) -> bool {
        match values.split_first() {
            None => used && acc == target,
            Some((v, rest)) => {
                walk(rest, acc, used, target)
                    || walk(rest, acc + *v, true, target)
                    || walk(rest, acc - *v, true, target)
            }
        }
    }
    assert!(values.len() <= 14, "combination search over {} values", values.len());
    walk(values, G::scalar_from_u64(0), false, target)
}

struct Ctx {
    d: Deployment,
    rng: ChaCha20Rng,
    /// Set while the legitimate user is the one driving a device; the user's
    /// approval responder says yes only then.
    user: Arc<AtomicBool>,
    files: BTreeMap<String, Vec<u8>>,
    phi: Scalar,
    checks: Vec<Check>,
}

fn prompt() -> ApprovalPolicy {
    ApprovalPolicy::new(Mode::Prompt).with_window(Duration::ZERO)
}

impl Ctx {
    fn new(seed: u64) -> Result<Ctx> {
        let d = Deployment::enrolled(prompt())?;
        let user = Arc::new(AtomicBool::new(false));
        let mut ctx = Ctx {
            phi: G::scalar_from_u64(0),
            d,
            rng: ChaCha20Rng::seed_from_u64(seed),
            user,
            files: BTreeMap::new(),
            checks: Vec::new(),
        };
        ctx.d.primary.gate().set_policy(prompt());
        ctx.user_answers(&ctx.d.primary.clone());
        ctx.user_answers(&ctx.d.secondary.clone());
        ctx.phi = own(&ctx.d.primary) + own(&ctx.d.secondary);
        let n = ctx.rng.gen_range(2..=4);
        for i in 0..n {
            ctx.upload(&format!("before/{i}.txt"))?;
        }
        Ok(ctx)
    }

    fn user_answers(&self, device: &Arc<Device>) {
        let user = self.user.clone();
        device
            .gate()
            .queue()
            .set_responder(Some(Box::new(move |_| Some(user.load(Ordering::SeqCst)))));
    }

    /// The adversary answers this device's prompts, approving everything.
    fn adversary_answers(&self, device: &Arc<Device>) {
        device.gate().queue().set_responder(Some(Box::new(|_| Some(true))));
    }

    fn as_user<T>(&self, f: impl FnOnce() -> T) -> T {
        self.user.store(true, Ordering::SeqCst);
        let out = f();
        self.user.store(false, Ordering::SeqCst);
        out
    }

    fn check(&mut self, name: &str, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.to_owned(),
            pass,
            detail: detail.into(),
        });
    }

    fn upload(&mut self, name: &str) -> Result<()> {
        let len = self.rng.gen_range(1..4096);
        let mut data = vec![0u8; len];
        self.rng.fill(&mut data[..]);
        let primary = self.d.primary.clone();
        self.as_user(|| primary.encrypt(name, &data))?;
        self.files.insert(name.to_owned(), data);
        Ok(())
    }

    /// Decrypts every file uploaded so far through `primary`, as the user.
    fn all_files_decrypt(&mut self, name: &str, primary: &Arc<Device>) {
        let mut failures = Vec::new();
        for (f, data) in &self.files {
            match self.as_user(|| primary.decrypt(f)) {
                Ok(p) if p[..] == data[..] => {}
                Ok(_) => failures.push(format!("{f}: wrong plaintext")),
                Err(e) => failures.push(format!("{f}: {e}")),
            }
        }
        let pass = failures.is_empty();
        self.check(name, pass, failures.join("; "));
    }

    fn no_reconstruction(&mut self, name: &str, captured: &[Scalar]) {
        let hit = reconstructs(captured, self.phi);
        self.check(name, !captured.is_empty() && !hit, format!("{} captured scalars", captured.len()));
    }

    fn cloud_view_check(&mut self) {
        let seen = self.d.cloud.seen_scalars(ACCOUNT);
        let hit = seen.len() <= 14 && reconstructs(&seen, self.phi);
        self.check(
            "cloud's sub-shares do not reconstruct the master key",
            seen.len() <= 14 && !hit,
            format!("{} scalars held by the cloud", seen.len()),
        );
    }

    fn tprf_responses_to(&self, addr: &str) -> usize {
        self.d
            .net
            .log()
            .records()
            .iter()
            .filter(|r| r.from == addr && r.response_frame().kind == MsgType::TprfResp)
            .count()
    }

    /// Every scalar currently held by the two devices, encoded.
    fn scalar_encodings(&self, devices: &[&Arc<Device>]) -> Vec<Vec<u8>> {
        devices
            .iter()
            .flat_map(|d| d.snapshot().scalars())
            .map(|s| G::encode_scalar(&s))
            .collect()
    }

    fn wire_carries_any(&self, needles: &[Vec<u8>]) -> bool {
        self.d.net.log().records().iter().any(|r| {
            needles
                .iter()
                .any(|n| contains(&r.request, n) || contains(&r.response, n))
        })
    }

    /// A device built from a stolen state file, attached at `addr`.
    fn clone_device(&self, st: DeviceState, addr: &str) -> Result<Arc<Device>> {
        let key = twofe_protocol::channel::IdentityKey::from_secret_bytes(&st.identity_secret[..])?;
        let gate = Arc::new(twofe_protocol::approval::Gate::new(
            ApprovalPolicy::new(Mode::Auto),
            twofe_protocol::approval::ApprovalQueue::new(self.d.clock.clone()),
        ));
        let device = Device::new(
            st,
            None,
            self.d.net.dialer(addr, key.public()),
            self.d.clock.clone(),
            gate,
            DeviceConfig::default(),
        )?;
        self.d.net.attach(
            addr,
            key.public(),
            device.clone() as Arc<dyn twofe_protocol::transport::Endpoint>,
        );
        Ok(device)
    }

    fn releases_to(&self, addr: &str) -> Vec<Frame> {
        self.d
            .net
            .log()
            .records()
            .iter()
            .filter(|r| r.from == addr)
            .map(|r| r.response_frame())
            .filter(|f| f.kind == MsgType::ShareRelease)
            .collect()
    }

    fn migration_prompt_denied(&self, device: &Arc<Device>) -> bool {
        device
            .gate()
            .queue()
            .requests()
            .iter()
            .any(|r| r.kind == RequestKind::MigrateAuth && r.decision == Decision::Denied)
    }

    fn recovery_noted(&self, device: &Arc<Device>) -> bool {
        device
            .gate()
            .queue()
            .notifications()
            .iter()
            .any(|n| n.kind == RequestKind::MigrateAuth && n.outcome == "recovery-attempt-while-alive")
    }
}

fn own(d: &Arc<Device>) -> Scalar {
    d.snapshot()
        .enrollment
        .as_ref()
        .map(|e| e.shares.own_share)
        .unwrap_or_else(|| G::scalar_from_u64(0))
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

fn describe<T>(r: &Result<T>) -> String {
    match r {
        Ok(_) => "succeeded".into(),
        Err(e) => e.class().into(),
    }
}

// ---- stolen device ----

fn stolen(ctx: &mut Ctx, which: Role) -> Result<()> {
    let victim = ctx.d.device(which).clone();
    let survivor = ctx.d.device(which.peer()).clone();
    let capture = victim.snapshot();
    ctx.d.net.set_online(&victim.addr(), false);
    let stolen_scalars = capture.scalars();
    ctx.no_reconstruction("stolen state does not reconstruct the master key", &stolen_scalars);

    // The thief runs its own tooling over the stolen state.
    let thief = ctx.clone_device(capture.clone(), "thief")?;
    if which == Role::Primary {
        ctx.d.net.log().clear();
        let mut results = Vec::new();
        for f in ctx.files.keys() {
            results.push(thief.decrypt(f));
        }
        let denied = results.iter().all(|r| matches!(r, Err(Error::PolicyDenied)));
        let leaked = ctx.tprf_responses_to("thief");
        ctx.check(
            "thief's decryptions are refused without the user's approval",
            denied && leaked == 0,
            format!("{} evaluations answered", leaked),
        );
    }

    // Recovering the surviving device needs it silent and the printed secret.
    let mut unenrolled = capture;
    unenrolled.enrollment = None;
    let thief_tool = ctx.clone_device(unenrolled, "thief-tool")?;
    let r = thief_tool.replace(RecoveryMode::Recover, which.peer(), Some(GUESSED_SECRET));
    ctx.check(
        "thief cannot take over the surviving device",
        r == Err(Error::OldDeviceResponded) && ctx.d.cloud.releases(ACCOUNT) == 0,
        describe(&r),
    );
    let noted = ctx.recovery_noted(&survivor);
    ctx.check("user is told about the takeover attempt", noted, "");

    // The user recovers the lost role onto a new device.
    let replacement = ctx.d.new_device("replacement", prompt())?;
    ctx.user_answers(&replacement);
    ctx.as_user(|| replacement.replace(RecoveryMode::Recover, which, Some(RECOVERY_SECRET)))?;
    let primary = if which == Role::Primary { replacement.clone() } else { survivor.clone() };
    ctx.all_files_decrypt("recovery restores every pre-theft file", &primary);

    let mut cross = stolen_scalars.clone();
    cross.push(own(&survivor));
    ctx.no_reconstruction("stolen shares do not combine with post-recovery shares", &cross);
    let cut_off = survivor.peer().map(|p| p.identity) != Some(thief.identity());
    ctx.check("stolen device is no longer the survivor's peer", cut_off, "");
    if which == Role::Primary {
        let r = thief.decrypt(ctx.files.keys().next().unwrap());
        ctx.check("stolen primary derives nothing after recovery", r.is_err(), describe(&r));
    }
    Ok(())
}

fn stolen_primary(ctx: &mut Ctx) -> Result<()> {
    stolen(ctx, Role::Primary)
}

fn stolen_secondary(ctx: &mut Ctx) -> Result<()> {
    stolen(ctx, Role::Secondary)
}

// ---- temporary access ----

fn temporary_primary(ctx: &mut Ctx) -> Result<()> {
    let primary = ctx.d.primary.clone();
    let secondary = ctx.d.secondary.clone();
    let secrets = ctx.scalar_encodings(&[&primary, &secondary]);
    ctx.d.net.log().clear();

    // With prompts, nothing the adversary asks for is answered.
    let names: Vec<String> = ctx.files.keys().cloned().collect();
    let results: Vec<_> = names.iter().map(|f| primary.decrypt(f)).collect();
    let leaked = ctx.tprf_responses_to("primary");
    ctx.check(
        "with prompts, no decryption succeeds during temporary access",
        results.iter().all(|r| matches!(r, Err(Error::PolicyDenied))) && leaked == 0,
        format!("{leaked} evaluations answered"),
    );

    // Without prompts the primary's holder decrypts, but the secondary's log
    // shows every derivation.
    secondary.gate().set_policy(ApprovalPolicy::new(Mode::Notify));
    let before = secondary.gate().queue().notifications().len();
    let mut read = 0;
    for f in &names {
        if primary.decrypt(f).is_ok() {
            read += 1;
        }
    }
    let noted = secondary.gate().queue().notifications().len() - before;
    ctx.check(
        "with notifications, every decryption during temporary access is logged",
        read == names.len() && noted == read,
        format!("{read} decrypted, {noted} notifications"),
    );

    // An upload made during the access window still decrypts afterwards.
    let during = b"written while the adversary held the device".to_vec();
    primary.encrypt("during/adversary.txt", &during)?;
    ctx.files.insert("during/adversary.txt".into(), during);
    let carried = ctx.wire_carries_any(&secrets);
    ctx.check("no share crosses the wire during temporary access", !carried, "");

    secondary.gate().set_policy(prompt());
    ctx.all_files_decrypt("every file decrypts after temporary access", &primary);
    Ok(())
}

fn temporary_secondary(ctx: &mut Ctx) -> Result<()> {
    let primary = ctx.d.primary.clone();
    let secondary = ctx.d.secondary.clone();
    let secrets = ctx.scalar_encodings(&[&primary, &secondary]);
    ctx.d.net.log().clear();

    let name = ctx.files.keys().next().unwrap().clone();
    let r = secondary.decrypt(&name);
    ctx.check(
        "the secondary alone cannot derive a file key",
        matches!(r, Err(Error::ProtocolOrder(_))),
        describe(&r),
    );

    // The adversary tries to move the primary's role onto a device it owns.
    let adversary = ctx.d.new_device("adversary", ApprovalPolicy::new(Mode::Auto))?;
    let r = adversary.replace(RecoveryMode::Migrate, Role::Primary, None);
    let denied = ctx.migration_prompt_denied(&primary);
    ctx.check(
        "migrating the primary away needs the user's approval on the primary",
        r == Err(Error::ApprovalDenied) && denied && ctx.d.cloud.releases(ACCOUNT) == 0,
        describe(&r),
    );
    let carried = ctx.wire_carries_any(&secrets);
    ctx.check("no share crosses the wire during temporary access", !carried, "");
    ctx.all_files_decrypt("every file decrypts after temporary access", &primary);
    Ok(())
}

// ---- malware ----

fn malware_primary(ctx: &mut Ctx) -> Result<()> {
    let primary = ctx.d.primary.clone();
    let secondary = ctx.d.secondary.clone();
    let capture = primary.snapshot();
    let captured = capture.scalars();
    ctx.no_reconstruction("infected primary's state does not reconstruct the master key", &captured);

    ctx.d.net.log().clear();
    let names: Vec<String> = ctx.files.keys().cloned().collect();
    let results: Vec<_> = names.iter().map(|f| primary.decrypt(f)).collect();
    let leaked = ctx.tprf_responses_to("primary");
    ctx.check(
        "with prompts, malware's own decryptions are refused",
        results.iter().all(|r| matches!(r, Err(Error::PolicyDenied))) && leaked == 0,
        format!("{leaked} evaluations answered"),
    );

    // Files written while infected are at the malware's mercy; only the
    // pre-infection files are claimed available. The user cleans up by
    // moving the primary role to a fresh device, which refreshes all shares.
    let clean = ctx.d.new_device("clean", prompt())?;
    ctx.user_answers(&clean);
    ctx.as_user(|| clean.replace(RecoveryMode::Migrate, Role::Primary, None))?;
    ctx.check("infected primary is retired", primary.is_retired(), "");
    ctx.all_files_decrypt("pre-infection files decrypt after clean-up", &clean);

    let mut cross = captured;
    cross.push(own(&secondary));
    ctx.no_reconstruction("captured shares do not combine with post-clean-up shares", &cross);
    let rogue = ctx.clone_device(capture, "rogue")?;
    let r = rogue.decrypt(ctx.files.keys().next().unwrap());
    ctx.check("a copy of the infected state derives nothing after clean-up", r.is_err(), describe(&r));
    Ok(())
}

fn malware_secondary(ctx: &mut Ctx) -> Result<()> {
    let primary = ctx.d.primary.clone();
    let secondary = ctx.d.secondary.clone();
    let captured = secondary.snapshot().scalars();
    ctx.no_reconstruction("infected secondary's state does not reconstruct the master key", &captured);
    let name = ctx.files.keys().next().unwrap().clone();

    let mut rng = ChaCha20Rng::seed_from_u64(ctx.rng.gen());
    let wrong = twofe_core::group::random_scalar::<G, _>(&mut rng)?;
    secondary.set_hooks(Hooks {
        share_override: Some(wrong),
        ..Hooks::default()
    });
    let r = ctx.as_user(|| primary.decrypt(&name));
    ctx.check("evaluation under a wrong share is rejected", r.as_ref().err() == Some(&Error::BadProof), describe(&r));

    secondary.set_hooks(Hooks {
        tamper: Some(Box::new(|f: &mut Frame| {
            if f.kind == MsgType::TprfResp {
                f.fields[0][3] ^= 0x40;
            }
        })),
        ..Hooks::default()
    });
    let r = ctx.as_user(|| primary.decrypt(&name));
    ctx.check("a tampered evaluation is rejected", r.is_err(), describe(&r));

    let files_before = ctx.d.cloud.file_count(ACCOUNT);
    secondary.set_hooks(Hooks {
        tamper: Some(Box::new(|f: &mut Frame| {
            if f.kind == MsgType::SrShare {
                f.fields[0][0] ^= 1;
            }
        })),
        ..Hooks::default()
    });
    let r = primary.encrypt("during/biased.txt", b"seed under attack");
    ctx.check(
        "a tampered coin toss aborts the upload",
        r.is_err() && ctx.d.cloud.file_count(ACCOUNT) == files_before,
        describe(&r),
    );

    secondary.set_hooks(Hooks::default());
    ctx.all_files_decrypt("pre-existing files decrypt once the malware is gone", &primary);
    ctx.as_user(|| primary.refresh())?;
    let mut cross = captured;
    cross.push(own(&primary));
    ctx.no_reconstruction("captured shares do not combine with refreshed shares", &cross);
    Ok(())
}

// ---- recovery attacks ----

/// The adversary controls `controlled` (and so knows the account password)
/// and tries to move the other role onto a device it owns.
fn recover_other(ctx: &mut Ctx, controlled: Role) -> Result<()> {
    let target = ctx.d.device(controlled.peer()).clone();
    let adversary = ctx.d.new_device("adversary", ApprovalPolicy::new(Mode::Auto))?;

    let r = adversary.replace(RecoveryMode::Migrate, controlled.peer(), None);
    let denied = ctx.migration_prompt_denied(&target);
    ctx.check("migration is refused at the user's device", r == Err(Error::ApprovalDenied) && denied, describe(&r));

    let r = adversary.replace(RecoveryMode::Recover, controlled.peer(), Some(GUESSED_SECRET));
    let noted = ctx.recovery_noted(&target);
    ctx.check(
        "recovery is refused while the device answers, and the user is told",
        r == Err(Error::OldDeviceResponded) && noted,
        describe(&r),
    );

    ctx.d.net.set_online(&target.addr(), false);
    let r = adversary.replace(RecoveryMode::Recover, controlled.peer(), Some(GUESSED_SECRET));
    ctx.check(
        "recovery of a silent device fails identity verification",
        r == Err(Error::VerificationFailed),
        describe(&r),
    );
    ctx.d.net.set_online(&target.addr(), true);
    let released = ctx.d.cloud.releases(ACCOUNT) + ctx.releases_to("adversary").len();
    ctx.check("no sub-share is released to the adversary", released == 0, format!("{released} releases"));
    let primary = ctx.d.primary.clone();
    ctx.all_files_decrypt("every file still decrypts", &primary);
    Ok(())
}

/// The adversary controls `controlled` and moves that same role onto a
/// device it owns. It succeeds, but learns nothing it did not already hold.
fn recover_own(ctx: &mut Ctx, controlled: Role) -> Result<()> {
    let victim = ctx.d.device(controlled).clone();
    let survivor = ctx.d.device(controlled.peer()).clone();
    ctx.adversary_answers(&victim);
    let before = victim.snapshot();
    let prior = before.scalars();
    let prior_enc: Vec<Vec<u8>> = prior.iter().map(G::encode_scalar).collect();
    let prior_catalog = before.enrollment.as_ref().unwrap().catalog_key.as_bytes().to_vec();

    ctx.d.net.log().clear();
    let adversary = ctx.d.new_device("adversary", ApprovalPolicy::new(Mode::Auto))?;
    let r = adversary.replace(RecoveryMode::Migrate, controlled, None);
    ctx.check("the adversary can migrate a device it controls", r.is_ok(), describe(&r));

    let releases = ctx.releases_to("adversary");
    let subset = !releases.is_empty()
        && releases.iter().all(|f| {
            prior_enc.iter().any(|p| p[..] == *f.field("sub_share"))
                && (f.field("catalog_key").is_empty() || f.field("catalog_key") == &prior_catalog[..])
        });
    ctx.check(
        "released sub-shares were already on the controlled device",
        subset,
        format!("{} releases", releases.len()),
    );

    let mut knowledge = prior;
    knowledge.extend(adversary.snapshot().scalars());
    ctx.no_reconstruction("old and new adversary state together do not reconstruct the master key", &knowledge);
    let told = survivor
        .gate()
        .queue()
        .notifications()
        .iter()
        .any(|n| n.outcome == "recovery-attempt-while-alive" && n.tag.starts_with("peer replaced"));
    ctx.check("the surviving device tells the user its peer changed", told, "");
    let primary = if controlled == Role::Primary { adversary.clone() } else { survivor.clone() };
    if controlled == Role::Secondary {
        ctx.user_answers(&adversary);
    }
    ctx.all_files_decrypt("every file still decrypts after the migration", &primary);
    Ok(())
}

fn primary_recovers_secondary(ctx: &mut Ctx) -> Result<()> {
    recover_other(ctx, Role::Primary)
}

fn secondary_recovers_primary(ctx: &mut Ctx) -> Result<()> {
    recover_other(ctx, Role::Secondary)
}

fn primary_recovers_primary(ctx: &mut Ctx) -> Result<()> {
    recover_own(ctx, Role::Primary)
}

fn secondary_recovers_secondary(ctx: &mut Ctx) -> Result<()> {
    recover_own(ctx, Role::Secondary)
}
