mod common;

use common::*;
use splitlab::model::Arch;
use splitlab::protocol::{inproc_pair, run_client, run_server, ClientNode, ServerNode, Topology};
use splitlab::Error;

#[test]
fn split_training_matches_monolithic_in_every_topology() {
    for topology in TOPOLOGIES {
        let cfg = session(Arch::Tiny, topology, 256, 100);
        let data = synth_for(Arch::Tiny, 256, 3);
        let mono = monolithic(&cfg, &data).unwrap();
        let split = split_inproc(&cfg, &data, false).unwrap().trajectory;
        assert_eq!(split.losses.len(), 100);
        let d = split.max_param_diff(&mono);
        assert!(d <= 1e-6, "{topology}: max parameter difference {d}");
        assert!(split.max_loss_diff(&mono) <= 1e-6, "{topology}: losses diverge");
    }
}

#[test]
fn transports_are_bit_identical() {
    for topology in TOPOLOGIES {
        let cfg = session(Arch::Tiny, topology, 128, 40);
        let data = synth_for(Arch::Tiny, 128, 4);
        let a = split_inproc(&cfg, &data, false).unwrap();
        let b = split_tcp(&cfg, &data, false).unwrap();
        assert!(a.trajectory.bits_eq(&b.trajectory), "{topology}");
        assert_eq!(a.client_frames, b.client_frames, "{topology}");
    }
}

#[test]
fn observation_tap_leaves_transcripts_unchanged() {
    for topology in TOPOLOGIES {
        let cfg = session(Arch::Tiny, topology, 128, 30);
        let data = synth_for(Arch::Tiny, 128, 5);
        let plain = split_inproc(&cfg, &data, false).unwrap();
        let tapped = split_inproc(&cfg, &data, true).unwrap();
        assert_eq!(tapped.tap_entries, 30);
        assert_eq!(plain.client_frames, tapped.client_frames, "{topology}");
        assert_eq!(plain.server_frames, tapped.server_frames, "{topology}");
        assert!(plain.trajectory.bits_eq(&tapped.trajectory));
    }
}

#[test]
fn mismatched_configuration_is_rejected_at_handshake() {
    let data = synth_for(Arch::Tiny, 64, 6);
    let client_cfg = session(Arch::Tiny, Topology::LabelSharing, 64, 4);
    let mut server_cfg = client_cfg.clone();
    server_cfg.batch_size = 16;
    let mut client = ClientNode::new(&client_cfg).unwrap();
    let mut server = ServerNode::new(&server_cfg).unwrap();
    let (mut ct, mut st) = inproc_pair();
    let (c, s) = std::thread::scope(|scope| {
        let h = scope.spawn(|| run_server(&server_cfg, &mut server, &mut st, None));
        (run_client(&client_cfg, &mut client, &mut ct, &data), h.join().unwrap())
    });
    for r in [c.map(|_| ()), s.map(|_| ())] {
        match r {
            Err(Error::Handshake(msg)) => assert!(msg.contains("mismatch"), "{msg}"),
            other => panic!("expected a handshake error, got {other:?}"),
        }
    }
}

#[test]
fn mnist_network_split_matches_monolithic() {
    let cfg = session(Arch::Mnist, Topology::ClientLabels, 64, 10);
    let data = synth_for(Arch::Mnist, 64, 7);
    let mono = monolithic(&cfg, &data).unwrap();
    let split = split_inproc(&cfg, &data, false).unwrap().trajectory;
    assert!(split.max_param_diff(&mono) <= 1e-6);
}
