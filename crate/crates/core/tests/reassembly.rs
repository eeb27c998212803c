mod common;

use mpsl_core::model::{head_forward, server_predict, Activations, Precision, Reassembly, SplitModel};
use mpsl_core::protocol::{run_mpsl_sequential, RunOptions};
use mpsl_core::transport::{Frame, Message};
use mpsl_tensor::Graph;

fn bits(m: &SplitModel) -> Vec<u64> {
    m.params.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn averaging_identical_heads_is_idempotent() {
    let cfg = common::tiny_model(Precision::F32, 1);
    let m = SplitModel::init(&cfg).unwrap();
    let head = m.head();
    let heads = vec![(&head, 3), (&head, 11), (&head, 1)];
    let avg = SplitModel::reassemble(&m.config, Reassembly::FedAvg, &heads, &m.server()).unwrap();
    assert_eq!(bits(&avg), bits(&m));
    let again = SplitModel::reassemble(&m.config, Reassembly::FedAvg, &[(&avg.head(), 5)], &avg.server()).unwrap();
    assert_eq!(bits(&again), bits(&m));
}

#[test]
fn fedavg_head_is_the_shard_weighted_mean() {
    let cfg = common::tiny_model(Precision::F64, 2);
    let s = common::setup(&cfg, &common::training(3, 3, 6));
    let art = run_mpsl_sequential(&s.fed, &s.init, &RunOptions::default()).unwrap();
    let model = art.reassemble(Reassembly::FedAvg).unwrap();
    let sizes = s.fed.shard_sizes();
    let total: usize = sizes.iter().sum();
    for (name, t) in model.head().iter() {
        for (k, &v) in t.data().iter().enumerate() {
            let expect: f64 = art
                .heads
                .iter()
                .zip(&sizes)
                .map(|(h, &n)| n as f64 / total as f64 * h.get(name).unwrap().data()[k])
                .sum();
            assert!((v - expect).abs() < 1e-12, "{name}[{k}]");
        }
    }
    assert_eq!(model.server(), art.server);
}

#[test]
fn reassembled_model_matches_split_inference() {
    let cfg = common::tiny_model(Precision::F32, 3);
    let s = common::setup(&cfg, &common::training(2, 4, 8));
    let art = run_mpsl_sequential(&s.fed, &s.init, &RunOptions::default()).unwrap();
    let probe = s.data.inputs(&s.data.test[..6]);
    for n in 0..2 {
        let model = art.reassemble(Reassembly::PerClient(n)).unwrap();
        let mut g = Graph::new(0);
        let (_, out) = model.forward(&mut g, &probe).unwrap();
        let standalone = g.value(out.prediction()).clone();

        let mut gc = Graph::new(0);
        let hb = art.heads[n].bind(&mut gc);
        let acts = head_forward(&mut gc, &art.model, &hb, &probe).unwrap().vars();
        let wire = Frame::new(1, n as u32, Message::Activations(acts.iter().map(|&v| gc.value(v).clone()).collect()));
        let Message::Activations(received) = Frame::decode(&wire.encode()).unwrap().message else { unreachable!() };
        let mut gs = Graph::new(0);
        let sb = art.server.bind(&mut gs);
        let leaf = gs.insert(received.into_iter().next().unwrap());
        let split = server_predict(&mut gs, &art.model, &sb, &Activations::Early(leaf)).unwrap();
        let diff = gs.value(split.prediction()).max_abs_diff(&standalone).unwrap();
        assert!(diff < 1e-5, "client {n}: {diff}");
    }
    assert!(art.reassemble(Reassembly::PerClient(2)).is_err());
}
