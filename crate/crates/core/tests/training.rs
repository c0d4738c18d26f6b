use crckd::trainer::{load_data, Checkpoint, Method, TrainConfig, TrainState, Trainer};

fn small(method: Method) -> TrainConfig {
    let mut cfg = TrainConfig::parse(
        "epochs = 4
ramp_t = 2
batch_size = 25
lr = 3e-3
k_p = 4
k_n = 16
hidden = 16
feature_dim = 8
proj_dim = 4
classes = 3
blob_counts = 60,30,10
blob_dim = 6
holdout = 20
checkpoint_every = 0
",
        None,
    )
    .unwrap();
    cfg.method = method;
    cfg
}

fn state(cfg: &TrainConfig) -> (TrainState, crckd::dataio::Dataset) {
    let (train, _) = load_data(cfg).unwrap();
    (TrainState::new(cfg.clone(), &train).unwrap(), train)
}

#[test]
fn zero_weights_reduce_to_the_wce_baseline() {
    let mut cfg = small(Method::Full);
    cfg.lambda1_max = 0.0;
    cfg.lambda2_ramp = 0.0;
    cfg.lambda2_after = 0.0;
    cfg.lambda3_max = 0.0;
    let (mut full, train) = state(&cfg);
    let (mut base, _) = state(&small(Method::B1));
    for _ in 0..cfg.epochs {
        let a = full.run_epoch(&train).unwrap();
        let b = base.run_epoch(&train).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.wce.to_bits(), y.wce.to_bits());
            assert_eq!(x.total.to_bits(), y.total.to_bits());
        }
    }
    assert_eq!(full.model.student, base.model.student);
    assert!(full.teacher_forwards > 0);
    assert_eq!(base.teacher_forwards, 0);
}

#[test]
fn hundred_steps_are_reproducible() {
    let cfg = small(Method::Full);
    let (mut a, train) = state(&cfg);
    let (mut b, _) = state(&cfg);
    let batch: Vec<usize> = (0..cfg.batch_size).collect();
    for i in 0..100 {
        a.epoch = i / 20;
        b.epoch = i / 20;
        let ra = a.train_step(&train, &batch).unwrap();
        let rb = b.train_step(&train, &batch).unwrap();
        assert_eq!(ra, rb);
    }
    assert_eq!(a, b);

    let mut other = cfg.clone();
    other.seed += 1;
    let (mut c, _) = state(&other);
    c.run_epoch(&train).unwrap();
    let (mut d, _) = state(&cfg);
    d.run_epoch(&train).unwrap();
    assert_ne!(c.model.student, d.model.student);
}

#[test]
fn every_method_trains_finitely() {
    for m in Method::ALL {
        let cfg = small(m);
        let mut t = Trainer::new(cfg).unwrap();
        let out = t.fit(None, None).unwrap();
        assert_eq!(out.epochs.len(), 4);
        let last = out.epochs.last().unwrap();
        assert!(last.total.is_finite());
        let ev = out.final_eval.unwrap();
        assert!((0.0..=1.0).contains(&ev.report.bma), "{m:?}");
        assert_eq!(ev.report.n, 20);
        assert_eq!(last.teacher_forwards > 0, m.uses_teacher());
    }
}

#[test]
fn terms_follow_the_method() {
    let cfg = small(Method::B2Crp);
    let (mut s, train) = state(&cfg);
    s.run_epoch(&train).unwrap();
    let recs = s.run_epoch(&train).unwrap();
    assert!(recs.iter().all(|r| r.kl.is_some() && r.crp.is_some() && r.ccd_s.is_none()));

    let cfg = small(Method::B2Ccd);
    let (mut s, train) = state(&cfg);
    let warm = s.run_epoch(&train).unwrap();
    assert!(warm.iter().all(|r| r.ccd_s.is_none()), "bank warm-up epoch");
    let recs = s.run_epoch(&train).unwrap();
    assert!(recs.iter().all(|r| r.ccd_s.is_some() && r.ccd_t.is_some() && r.crp.is_none()));
}

#[test]
fn state_resumes_bit_exactly() {
    let cfg = small(Method::Full);
    let (mut a, train) = state(&cfg);
    a.run_epoch(&train).unwrap();
    a.run_epoch(&train).unwrap();
    let bytes = a.to_checkpoint().to_bytes();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let mut b = TrainState::from_checkpoint(&ck, None, &train).unwrap();
    assert_eq!(a, b);
    for _ in 0..2 {
        let ra = a.run_epoch(&train).unwrap();
        let rb = b.run_epoch(&train).unwrap();
        assert_eq!(ra, rb);
    }
    assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
}

#[test]
fn checkpoint_for_another_model_is_rejected() {
    let cfg = small(Method::Full);
    let (a, train) = state(&cfg);
    let ck = a.to_checkpoint();
    let mut wider = cfg.clone();
    wider.hidden = 32;
    let e = TrainState::from_checkpoint(&ck, Some(wider), &train).unwrap_err();
    assert!(e.to_string().contains("shape"), "{e}");
}
