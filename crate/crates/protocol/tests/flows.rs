use std::sync::Arc;

use twofe_core::group::PrimeGroup;
use twofe_core::Role;
use twofe_protocol::approval::{ApprovalPolicy, Mode};
use twofe_protocol::device::Hooks;
use twofe_protocol::sim::{Deployment, RECOVERY_SECRET};
use twofe_protocol::state::G;
use twofe_protocol::{Error, MsgType, RecoveryMode};

fn auto() -> ApprovalPolicy {
    ApprovalPolicy::new(Mode::Auto)
}

#[test]
fn enroll_encrypt_decrypt_roundtrip() {
    let d = Deployment::enrolled(auto()).unwrap();
    assert_eq!(d.primary.role(), Some(Role::Primary));
    assert_eq!(d.secondary.role(), Some(Role::Secondary));
    let tag = d.primary.encrypt("docs/a.txt", b"hello world").unwrap();
    assert_eq!(&d.primary.decrypt("docs/a.txt").unwrap()[..], b"hello world");
    assert_eq!(&d.primary.decrypt(&tag.to_hex()).unwrap()[..], b"hello world");
    let names: Vec<_> = d.primary.list().unwrap().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, vec!["docs/a.txt".to_owned()]);
    assert_eq!(d.primary.open_sessions(), 0);
    assert_eq!(d.secondary.open_sessions(), 0);
}

#[test]
fn vault_matches_device_shares() {
    let d = Deployment::enrolled(auto()).unwrap();
    let v = d.cloud.vault("alice").unwrap();
    let p = d.primary.snapshot().enrollment.unwrap();
    let s = d.secondary.snapshot().enrollment.unwrap();
    assert_eq!(v.primary, p.shares.sub_share_cloud);
    assert_eq!(v.secondary, s.shares.sub_share_cloud);
    assert_eq!(p.held, s.shares.sub_share_peer);
    assert_eq!(s.held, p.shares.sub_share_peer);
    assert_eq!(p.pk, s.shares.own_share * G::generator());
}

#[test]
fn message_counts_per_flow() {
    let d = Deployment::enrolled(auto()).unwrap();
    d.net.log().clear();
    d.primary.encrypt("f", b"x").unwrap();
    let enc: Vec<_> = d.net.log().records().into_iter().filter(|r| r.from == "primary" && r.to == "secondary").collect();
    let session = enc[0].request_frame().session;
    let msgs = d.net.log().session_messages(&session, "primary", "secondary");
    assert_eq!(msgs.len(), 5, "{msgs:?}");
    d.net.log().clear();
    d.primary.decrypt("f").unwrap();
    let dec: Vec<_> = d.net.log().records().into_iter().filter(|r| r.from == "primary" && r.to == "secondary").collect();
    let session = dec[0].request_frame().session;
    assert_eq!(d.net.log().session_messages(&session, "primary", "secondary").len(), 2);
}

#[test]
fn refresh_keeps_files_and_moves_shares() {
    let d = Deployment::enrolled(auto()).unwrap();
    d.primary.encrypt("f", b"payload").unwrap();
    let before = d.primary.snapshot().enrollment.unwrap().shares.own_share;
    d.primary.refresh().unwrap();
    d.secondary.refresh().unwrap();
    assert_eq!(d.primary.epoch(), Some(2));
    assert_eq!(d.secondary.epoch(), Some(2));
    assert_ne!(d.primary.snapshot().enrollment.unwrap().shares.own_share, before);
    assert_eq!(&d.primary.decrypt("f").unwrap()[..], b"payload");
    assert_eq!(d.cloud.vault("alice").unwrap().epoch, 2);
}

#[test]
fn bad_share_is_caught_by_the_proof() {
    let d = Deployment::enrolled(auto()).unwrap();
    d.primary.encrypt("f", b"x").unwrap();
    d.secondary.set_hooks(Hooks {
        share_override: Some(G::scalar_from_u64(7)),
        ..Hooks::default()
    });
    assert_eq!(d.primary.decrypt("f").unwrap_err(), Error::BadProof);
    assert_eq!(d.primary.encrypt("g", b"y").unwrap_err(), Error::BadProof);
}

#[test]
fn prompt_policy_blocks_until_decided() {
    let d = Deployment::enrolled(ApprovalPolicy::new(Mode::Prompt)).unwrap();
    d.primary.encrypt("secret", b"x").unwrap();
    d.secondary.gate().queue().set_responder(Some(Box::new(|_| Some(false))));
    assert_eq!(d.primary.decrypt("secret").unwrap_err(), Error::PolicyDenied);
    d.secondary.gate().queue().set_responder(Some(Box::new(|r| {
        assert_eq!(r.filename.as_deref(), Some("secret"));
        Some(true)
    })));
    assert_eq!(&d.primary.decrypt("secret").unwrap()[..], b"x");
}

#[test]
fn offline_secondary_stops_both_flows() {
    let d = Deployment::enrolled(auto()).unwrap();
    d.primary.encrypt("f", b"x").unwrap();
    d.net.set_online("secondary", false);
    assert_eq!(d.primary.encrypt("g", b"y").unwrap_err(), Error::PeerUnreachable);
    assert_eq!(d.primary.decrypt("f").unwrap_err(), Error::PeerUnreachable);
    d.net.set_online("secondary", true);
    assert_eq!(&d.primary.decrypt("f").unwrap()[..], b"x");
}

fn replace_and_check(mode: RecoveryMode, which: Role) {
    let d = Deployment::enrolled(auto()).unwrap();
    d.primary.encrypt("f", b"data").unwrap();
    let old = Arc::clone(d.device(which));
    if mode == RecoveryMode::Recover {
        d.net.set_online(&old.addr(), false);
    }
    let n = d.new_device("new", auto()).unwrap();
    n.replace(mode, which, Some(RECOVERY_SECRET)).unwrap();
    assert_eq!(n.role(), Some(which));
    let survivor = d.device(which.peer());
    assert_eq!(survivor.peer().unwrap().identity, n.identity());
    let primary = if which == Role::Primary { &n } else { survivor };
    assert_eq!(&primary.decrypt("f").unwrap()[..], b"data");
    primary.encrypt("g", b"more").unwrap();
    if mode == RecoveryMode::Migrate {
        assert!(old.is_retired());
    }
    assert_eq!(n.open_sessions() + survivor.open_sessions(), 0);
}

#[test]
fn migrate_primary() {
    replace_and_check(RecoveryMode::Migrate, Role::Primary);
}

#[test]
fn migrate_secondary() {
    replace_and_check(RecoveryMode::Migrate, Role::Secondary);
}

#[test]
fn recover_primary() {
    replace_and_check(RecoveryMode::Recover, Role::Primary);
}

#[test]
fn recover_secondary() {
    replace_and_check(RecoveryMode::Recover, Role::Secondary);
}

#[test]
fn recover_refused_while_old_device_answers() {
    let d = Deployment::enrolled(auto()).unwrap();
    let n = d.new_device("new", auto()).unwrap();
    assert_eq!(
        n.replace(RecoveryMode::Recover, Role::Secondary, Some(RECOVERY_SECRET)).unwrap_err(),
        Error::OldDeviceResponded
    );
}

#[test]
fn wrong_recovery_secret_locks_out() {
    let d = Deployment::enrolled(auto()).unwrap();
    d.net.set_online("secondary", false);
    let n = d.new_device("new", auto()).unwrap();
    for _ in 0..3 {
        assert_eq!(
            n.replace(RecoveryMode::Recover, Role::Secondary, Some(b"wrong-secret-0000000")).unwrap_err(),
            Error::VerificationFailed
        );
    }
    assert_eq!(
        n.replace(RecoveryMode::Recover, Role::Secondary, Some(RECOVERY_SECRET)).unwrap_err(),
        Error::RecoveryLocked
    );
    d.clock.advance(std::time::Duration::from_secs(3601));
    n.replace(RecoveryMode::Recover, Role::Secondary, Some(RECOVERY_SECRET)).unwrap();
}

#[test]
fn migration_denied_by_old_device() {
    let d = Deployment::enrolled(ApprovalPolicy::new(Mode::Prompt)).unwrap();
    d.secondary.gate().queue().set_responder(Some(Box::new(|_| Some(false))));
    let n = d.new_device("new", auto()).unwrap();
    assert_eq!(
        n.replace(RecoveryMode::Migrate, Role::Secondary, None).unwrap_err(),
        Error::ApprovalDenied
    );
    assert_eq!(d.net.log().count(MsgType::ShareRelease), 0);
}
