//! Replayed and reordered peer messages never advance a session.

use twofe_core::Role;
use twofe_protocol::approval::{ApprovalPolicy, Mode};
use twofe_protocol::sim::Deployment;
use twofe_protocol::transport::{Caller, Endpoint};
use twofe_protocol::wire::{Frame, MsgType, SessionId};

fn transcript(d: &Deployment, op: impl FnOnce()) -> Vec<Frame> {
    d.net.log().clear();
    op();
    d.net
        .log()
        .records()
        .into_iter()
        .filter(|r| r.from == "primary" && r.to == "secondary")
        .map(|r| r.request_frame())
        .collect()
}

/// All sequences of length 1..=max over `msgs`, with repetition.
fn sequences(n: usize, max: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..max {
        let mut next = Vec::new();
        for s in &frontier {
            for i in 0..n {
                let mut t = s.clone();
                t.push(i);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn with_session(f: &Frame, session: SessionId) -> Frame {
    let mut g = f.clone();
    g.session = session;
    g
}

#[test]
fn shuffled_encrypt_transcripts_yield_no_evaluation() {
    let d = Deployment::enrolled(ApprovalPolicy::new(Mode::Auto)).unwrap();
    let msgs = transcript(&d, || {
        d.primary.encrypt("f", b"payload").unwrap();
    });
    let kinds: Vec<_> = msgs.iter().map(|f| f.kind).collect();
    assert_eq!(kinds, [MsgType::SrCommit, MsgType::SrReveal, MsgType::TprfReq]);
    let caller = Caller {
        identity: d.primary.identity(),
    };
    let mut answered = 0;
    let mut tried = 0;
    for (i, seq) in sequences(msgs.len(), 5).into_iter().enumerate() {
        // Both the original session id and fresh ones.
        for fresh in [false, true] {
            let mut session = msgs[0].session;
            if fresh {
                session[..8].copy_from_slice(&(i as u64).to_be_bytes());
                session[8] = 0xEE;
            }
            for &m in &seq {
                let r = d.secondary.handle(&caller, with_session(&msgs[m], session));
                tried += 1;
                if r.kind == MsgType::TprfResp {
                    answered += 1;
                }
            }
        }
    }
    assert!(tried > 1000);
    assert_eq!(answered, 0);
    // The honest flow still works afterwards.
    d.primary.encrypt("g", b"more").unwrap();
}

#[test]
fn replayed_decrypt_request_is_refused() {
    let d = Deployment::enrolled(ApprovalPolicy::new(Mode::Auto)).unwrap();
    d.primary.encrypt("f", b"payload").unwrap();
    let msgs = transcript(&d, || {
        d.primary.decrypt("f").unwrap();
    });
    assert_eq!(msgs.len(), 1);
    let caller = Caller {
        identity: d.primary.identity(),
    };
    let r = d.secondary.handle(&caller, msgs[0].clone());
    assert_eq!(r.kind, MsgType::Error);
}

#[test]
fn foreign_devices_get_nothing() {
    let d = Deployment::enrolled(ApprovalPolicy::new(Mode::Auto)).unwrap();
    let msgs = transcript(&d, || {
        d.primary.encrypt("f", b"payload").unwrap();
    });
    let stranger = d.new_device("stranger", ApprovalPolicy::new(Mode::Auto)).unwrap();
    let caller = Caller {
        identity: stranger.identity(),
    };
    for f in &msgs {
        let mut g = f.clone();
        g.session = [0x55; 16];
        assert_eq!(d.secondary.handle(&caller, g).kind, MsgType::Error);
    }
    // Cloud-only messages from the peer are refused too.
    let peer = Caller {
        identity: d.primary.identity(),
    };
    let grant = Frame::new(
        twofe_protocol::Flow::Migrate,
        [1; 16],
        MsgType::RecoverGrant,
        vec![vec![1], vec![Role::Primary.as_byte()], b"x".to_vec(), b"x".to_vec(), vec![0; 32], vec![0, 0, 0, 0]],
    );
    assert_eq!(d.secondary.handle(&peer, grant).kind, MsgType::Error);
}
