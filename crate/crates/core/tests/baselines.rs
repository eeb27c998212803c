mod common;

use mpsl_core::baselines::{fedavg_aggregate, run_centralized, run_fedavg_sequential, run_fedavg_threaded};
use mpsl_core::model::{ParamStore, Precision};
use mpsl_core::protocol::{run_mpsl_sequential, RunOptions};
use mpsl_core::transport::MsgType;
use mpsl_tensor::{DType, Tensor};

fn bits(p: &ParamStore) -> Vec<u64> {
    p.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cfg = common::tiny_model(Precision::F32, 1);
    let mut tc = common::training(2, 3, 8);
    tc.head_lr = 0.0;
    tc.server_lr = 0.0;
    let s = common::setup(&cfg, &tc);
    let c = run_centralized(&s.init, &tc, &s.data, &RunOptions::default()).unwrap();
    assert_eq!(bits(&c.server), bits(&s.init.params));
    let f = run_fedavg_sequential(&s.fed, &s.init, &RunOptions::default()).unwrap();
    assert_eq!(bits(&f.server), bits(&s.init.params));
}

#[test]
fn centralized_training_reduces_loss() {
    let cfg = common::tiny_model(Precision::F32, 2);
    let tc = common::training(1, 120, 16);
    let s = common::setup(&cfg, &tc);
    let c = run_centralized(&s.init, &tc, &s.data, &RunOptions::default()).unwrap();
    let l = c.log.losses();
    let head: f64 = l[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = l[l.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

#[test]
fn fedavg_with_one_client_is_centralized_training() {
    let cfg = common::tiny_model(Precision::F64, 3);
    let tc = common::training(1, 3, 8);
    let s = common::setup(&cfg, &tc);
    let f = run_fedavg_sequential(&s.fed, &s.init, &RunOptions::default()).unwrap();
    let steps_per_round = s.data.train.len() / 8;
    let mut ctc = tc.clone();
    ctc.rounds = 3 * steps_per_round as u32;
    let c = run_centralized(&s.init, &ctc, &s.data, &RunOptions::default()).unwrap();
    assert_eq!(bits(&f.server), bits(&c.server));
    let cl = c.log.losses();
    for (r, fl) in f.log.losses().iter().enumerate() {
        let epoch = &cl[r * steps_per_round..(r + 1) * steps_per_round];
        let mean = epoch.iter().sum::<f64>() / steps_per_round as f64;
        assert_eq!(*fl, f64::from(mean as f32));
    }
}

#[test]
fn aggregation_is_the_size_weighted_mean() {
    let store = |v: f64| {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![2], vec![v, -v], DType::F64).unwrap().with_requires_grad(true));
        p
    };
    let (a, b) = (store(1.0), store(5.0));
    let avg = fedavg_aggregate(&[&a, &b], &[1, 3]).unwrap();
    assert_eq!(avg.get("w").unwrap().data(), &[4.0, -4.0]);
    let same = fedavg_aggregate(&[&a, &a, &a], &[2, 7, 1]).unwrap();
    assert_eq!(bits(&same), bits(&a));
    assert!(fedavg_aggregate(&[], &[]).is_err());
}

#[test]
fn threaded_fedavg_matches_sequential() {
    let cfg = common::tiny_model(Precision::F32, 4);
    let s = common::setup(&cfg, &common::training(3, 2, 6));
    let a = run_fedavg_sequential(&s.fed, &s.init, &RunOptions::default()).unwrap();
    let b = run_fedavg_threaded(&s.fed, &s.init, &RunOptions::default()).unwrap();
    assert_eq!(bits(&a.server), bits(&b.server));
    assert_eq!(a.log, b.log);
}

#[test]
fn traffic_types_separate_the_methods() {
    let cfg = common::tiny_model(Precision::F32, 5);
    let tc = common::training(3, 3, 6);
    let s = common::setup(&cfg, &tc);
    let f = run_fedavg_sequential(&s.fed, &s.init, &RunOptions::default()).unwrap();
    assert_eq!(f.ledger.bytes_of_type(MsgType::Activations), 0);
    assert_eq!(f.ledger.bytes_of_type(MsgType::CutGrad), 0);
    assert!(f.ledger.bytes_of_type(MsgType::ModelPull) > 0);
    let m = run_mpsl_sequential(&s.fed, &s.init, &RunOptions::default()).unwrap();
    let model_bytes_in_training = m.ledger.sum(|_, _, round, t| {
        (1..=tc.rounds).contains(&round) && matches!(t, MsgType::ModelPull | MsgType::ModelPush)
    });
    assert_eq!(model_bytes_in_training, 0);
    assert!(m.ledger.bytes_of_type(MsgType::ModelPush) > 0);
}
