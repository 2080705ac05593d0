//! Wire-log and state inspection: what crosses which link, and what is left
//! behind after a flow ends.

use std::sync::{Arc, Mutex};

use twofe_core::group::PrimeGroup;
use twofe_core::Role;
use twofe_protocol::approval::{ApprovalPolicy, Mode};
use twofe_protocol::device::Hooks;
use twofe_protocol::sim::Deployment;
use twofe_protocol::state::G;
use twofe_protocol::transport::WireRecord;
use twofe_protocol::wire::{Frame, MsgType};
use twofe_protocol::Error;

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

fn between(records: &[WireRecord], from: &str, to: &str) -> Vec<WireRecord> {
    records.iter().filter(|r| r.from == from && r.to == to).cloned().collect()
}

#[test]
fn primary_sends_only_coin_toss_and_evaluation_input() {
    let d = Deployment::enrolled(ApprovalPolicy::new(Mode::Auto)).unwrap();
    d.net.log().clear();
    let tag = d.primary.encrypt("report.pdf", b"quarterly numbers").unwrap();
    d.primary.decrypt("report.pdf").unwrap();
    let records = d.net.log().records();
    let to_secondary = between(&records, "primary", "secondary");
    assert_eq!(to_secondary.len(), 4);
    for r in &to_secondary {
        let f = r.request_frame();
        assert!(
            matches!(f.kind, MsgType::SrCommit | MsgType::SrReveal | MsgType::TprfReq),
            "{:?}",
            f.kind
        );
        if f.kind == MsgType::TprfReq {
            assert_eq!(f.field("tag"), &tag.0);
            assert_eq!(f.field("seed").len(), 32);
        }
    }
    let own = G::encode_scalar(&d.primary.snapshot().enrollment.unwrap().shares.own_share);
    for r in &records {
        assert!(!contains(&r.request, &own) && !contains(&r.response, &own));
    }
}

#[test]
fn cloud_never_sees_names_or_content() {
    let d = Deployment::enrolled(ApprovalPolicy::new(Mode::Notify)).unwrap();
    d.net.log().clear();
    let name = b"medical/scan-results-2026.txt";
    let content = b"blood pressure 120/80, cholesterol fine, nothing to worry about";
    d.primary.encrypt(std::str::from_utf8(name).unwrap(), content).unwrap();
    d.primary.decrypt(std::str::from_utf8(name).unwrap()).unwrap();
    let records = d.net.log().records();
    let cloud_bound: Vec<_> = records.iter().filter(|r| r.to == "cloud").collect();
    assert!(cloud_bound.len() >= 4);
    for r in cloud_bound {
        for bytes in [&r.request, &r.response] {
            assert!(!contains(bytes, name));
            assert!(!contains(bytes, &content[..16]));
        }
    }
    // The secondary did learn the name, from the catalog, for its notification.
    let notes = d.secondary.gate().queue().notifications();
    assert_eq!(notes.last().unwrap().filename.as_deref(), Some("medical/scan-results-2026.txt"));
}

#[test]
fn sessions_are_empty_after_success_and_failure() {
    let d = Deployment::enrolled(ApprovalPolicy::new(Mode::Prompt)).unwrap();
    d.secondary.gate().queue().set_responder(Some(Box::new(|_| Some(false))));
    d.primary.encrypt("f", b"x").unwrap();
    assert_eq!(d.primary.decrypt("f").unwrap_err(), Error::PolicyDenied);
    assert_eq!(d.secondary.open_sessions(), 0);

    // A tampered coin-toss share leaves the two sides with different seeds.
    d.secondary.set_hooks(Hooks {
        tamper: Some(Box::new(|f: &mut Frame| {
            if f.kind == MsgType::SrShare {
                f.fields[0][0] ^= 1;
            }
        })),
        ..Hooks::default()
    });
    assert!(matches!(d.primary.encrypt("g", b"y").unwrap_err(), Error::ProtocolOrder(_)));
    assert_eq!(d.secondary.open_sessions(), 0);
    assert_eq!(d.primary.open_sessions(), 0);

    // A coin toss abandoned half way expires.
    d.secondary.set_hooks(Hooks {
        intercept: Some(Box::new(|_, f: &Frame| {
            (f.kind == MsgType::SrReveal).then(|| Frame::error(f.flow, f.session, &Error::PeerUnreachable))
        })),
        ..Hooks::default()
    });
    assert!(d.primary.encrypt("h", b"z").is_err());
    assert_eq!(d.secondary.open_sessions(), 1);
    d.clock.advance(std::time::Duration::from_secs(31));
    assert_eq!(d.secondary.open_sessions(), 0);
}

#[test]
fn invalidation_mid_encrypt_stops_at_next_cloud_call() {
    let d = Arc::new(Deployment::enrolled(ApprovalPolicy::new(Mode::Auto)).unwrap());
    d.primary.encrypt("before", b"1").unwrap();
    let files_before = d.cloud.file_count("alice");
    let secondary = Arc::downgrade(&d.secondary);
    let fired = Arc::new(Mutex::new(false));
    let fired2 = fired.clone();
    d.secondary.set_hooks(Hooks {
        intercept: Some(Box::new(move |_, f: &Frame| {
            if f.kind == MsgType::TprfReq && !*fired2.lock().unwrap() {
                *fired2.lock().unwrap() = true;
                secondary.upgrade().unwrap().invalidate("primary").unwrap();
            }
            None
        })),
        ..Hooks::default()
    });
    assert_eq!(d.primary.encrypt("during", b"2").unwrap_err(), Error::BadToken);
    assert!(*fired.lock().unwrap());
    assert_eq!(d.cloud.file_count("alice"), files_before);
    d.secondary.set_hooks(Hooks::default());
    d.primary.login("alice", twofe_protocol::sim::PASSWORD).unwrap();
    let names: Vec<_> = d.primary.list().unwrap().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, vec!["before".to_owned()]);
}

#[test]
fn cloud_holds_only_vault_sub_shares() {
    let d = Deployment::enrolled(ApprovalPolicy::new(Mode::Auto)).unwrap();
    d.primary.encrypt("f", b"x").unwrap();
    d.primary.refresh().unwrap();
    d.secondary.refresh().unwrap();
    let seen = d.cloud.seen_scalars("alice");
    // Two per epoch, across three epochs.
    assert_eq!(seen.len(), 6);
    let p = d.primary.snapshot().enrollment.unwrap();
    let s = d.secondary.snapshot().enrollment.unwrap();
    let phi = p.shares.own_share + s.shares.own_share;
    for a in &seen {
        assert_ne!(*a, phi);
        for b in &seen {
            assert_ne!(*a + *b, phi);
        }
    }
    assert_eq!(p.role(), Role::Primary);
}
