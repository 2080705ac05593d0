use twofe_protocol::approval::{ApprovalPolicy, Mode};
use twofe_protocol::sim::TcpDeployment;

#[test]
fn flows_over_loopback_tcp() {
    let d = TcpDeployment::enrolled(ApprovalPolicy::new(Mode::Notify)).unwrap();
    let big: Vec<u8> = (0..3_000_000u32).map(|i| (i * 7) as u8).collect();
    d.primary.encrypt("big.bin", &big).unwrap();
    d.primary.encrypt("empty", b"").unwrap();
    assert_eq!(&d.primary.decrypt("big.bin").unwrap()[..], &big[..]);
    assert_eq!(d.primary.decrypt("empty").unwrap().len(), 0);
    d.primary.refresh().unwrap();
    assert_eq!(&d.primary.decrypt("big.bin").unwrap()[..], &big[..]);
    assert_eq!(d.secondary.gate().queue().notifications().len(), 3);
    assert_eq!(d.secondary.open_sessions(), 0);
}
