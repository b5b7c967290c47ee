use damsl::engine::{
    checkpoint_load, checkpoint_save, evaluate, fomaml, init_metric, meta_train, pretrain_encoders,
    train_model, EngineConfig, Metric, Model, VariantTag,
};
use damsl::featurebank::{
    gen_synthetic_domain, sample_episode, FeatureBank, Protocol, SyntheticDomainSpec,
};
use damsl::gnn::{GnnLayer, MetricNet};
use damsl::numerics::{argmax, Layer, Matrix, Mlp, Parameters};
use damsl::scorer::{ensemble_scores, fine_tune, EncoderHead, OptimizerTag};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn source(n_classes: usize, per_class: usize, seed: u64) -> FeatureBank {
    let spec = SyntheticDomainSpec {
        n_classes,
        ..SyntheticDomainSpec::default()
    };
    gen_synthetic_domain(&spec, per_class, seed).unwrap()
}

fn quick_cfg() -> EngineConfig {
    let mut cfg = EngineConfig::default();
    cfg.pretrain.epochs = 3;
    cfg.pretrain.fomaml_episodes = 5;
    cfg.fine_tune.epochs = 10;
    cfg.meta_episodes = 8;
    cfg.meta_protocol.n_query = 5;
    cfg
}

fn bits(params: &[f64]) -> Vec<u64> {
    params.iter().map(|v| v.to_bits()).collect()
}

fn model_bits(model: &Model) -> Vec<u64> {
    let mut out = Vec::new();
    for e in model.encoders() {
        out.extend(bits(&e.flatten_params()));
    }
    match model.metric() {
        Metric::None => {}
        Metric::Graph(net) => out.extend(bits(&net.flatten_params())),
        Metric::Proto(net) => out.extend(bits(&net.flatten_params())),
    }
    out
}

#[test]
fn supervised_pretraining_fits_separable_source() {
    let bank = source(20, 50, 1);
    let cfg = EngineConfig::default();
    let heads = pretrain_encoders(&VariantTag::LensemV2.spec(), &bank, &cfg, 5).unwrap();
    let (x, y) = bank.stacked();
    for head in &heads {
        let logits = head.logits(&x).unwrap();
        let correct = logits
            .iter_rows()
            .zip(&y)
            .filter(|(r, &l)| argmax(r) == l)
            .count();
        let acc = correct as f64 / y.len() as f64;
        assert!(acc > 0.95, "{:?} source accuracy {acc}", head.optimizer());
    }
}

#[test]
fn fomaml_without_episodes_leaves_encoder_unchanged() {
    let bank = source(8, 30, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let head = EncoderHead::random(
        bank.dim(),
        1,
        bank.n_classes(),
        OptimizerTag::Adam,
        &mut rng,
    )
    .unwrap();
    let cfg = EngineConfig::default();
    let out = fomaml(
        head.clone(),
        &bank,
        Protocol::new(5, 5, 5),
        &cfg.pretrain,
        0,
        &mut rng,
    )
    .unwrap();
    assert_eq!(bits(&out.flatten_params()), bits(&head.flatten_params()));

    let moved = fomaml(
        head.clone(),
        &bank,
        Protocol::new(5, 5, 5),
        &cfg.pretrain,
        3,
        &mut rng,
    )
    .unwrap();
    assert_ne!(moved.flatten_params(), head.flatten_params());
}

#[test]
fn v2_encoders_diverge_across_optimizers() {
    let bank = source(8, 30, 4);
    let heads = pretrain_encoders(&VariantTag::DamslV2.spec(), &bank, &quick_cfg(), 9).unwrap();
    assert_eq!(heads.len(), 2);
    assert_eq!(heads[0].optimizer(), OptimizerTag::Adam);
    assert_eq!(heads[1].optimizer(), OptimizerTag::SgdMomentum);
    assert_ne!(heads[0].flatten_params(), heads[1].flatten_params());
}

#[test]
fn v1_and_v2_share_the_first_encoder_initialisation() {
    let bank = source(8, 30, 4);
    let mut cfg = quick_cfg();
    cfg.pretrain.fomaml_episodes = 0;
    let v1 = pretrain_encoders(&VariantTag::DamslV1.spec(), &bank, &cfg, 9).unwrap();
    let v2 = pretrain_encoders(&VariantTag::DamslV2.spec(), &bank, &cfg, 9).unwrap();
    assert_eq!(bits(&v1[0].flatten_params()), bits(&v2[0].flatten_params()));
}

#[test]
fn meta_training_without_episodes_keeps_initial_metric() {
    let bank = source(8, 30, 5);
    let cfg = quick_cfg();
    let tag = VariantTag::DamslV1;
    let encoders = pretrain_encoders(&tag.spec(), &bank, &cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let metric = init_metric(tag, &encoders, 5, &cfg, &mut rng).unwrap();
    let mut model = Model::new(tag, 5, encoders, metric).unwrap();
    let before = model.clone();
    let losses = meta_train(&mut model, &bank, 0, &cfg, &mut rng).unwrap();
    assert!(losses.is_empty());
    assert_eq!(model_bits(&model), model_bits(&before));
}

#[test]
fn meta_training_rejects_metric_free_variants() {
    let bank = source(8, 30, 5);
    let cfg = quick_cfg();
    let (mut model, losses) = train_model(VariantTag::LensemV1, &bank, &cfg, 1).unwrap();
    assert!(losses.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(meta_train(&mut model, &bank, 1, &cfg, &mut rng).is_err());
}

#[test]
fn meta_training_loss_decreases() {
    let bank = source(20, 60, 6);
    let mut cfg = EngineConfig::default();
    cfg.fine_tune.epochs = 30;
    cfg.meta_protocol.n_query = 5;
    let (_, losses) = train_model(VariantTag::DamslV1, &bank, &cfg, 11).unwrap();
    assert_eq!(losses.len(), 500);
    let head = losses[..50].iter().sum::<f64>() / 50.0;
    let tail = losses[450..].iter().sum::<f64>() / 50.0;
    assert!(head > tail, "first 50 mean {head}, last 50 mean {tail}");
}

#[test]
fn training_and_evaluation_are_deterministic() {
    let bank = source(8, 30, 7);
    let target = gen_synthetic_domain(
        &SyntheticDomainSpec::default().with_shift(damsl::featurebank::DomainShift::MID),
        30,
        8,
    )
    .unwrap();
    let cfg = quick_cfg();
    for tag in [
        VariantTag::DamslV2,
        VariantTag::SprotoV1,
        VariantTag::FtgnnV1,
    ] {
        let (a, la) = train_model(tag, &bank, &cfg, 21).unwrap();
        let (b, lb) = train_model(tag, &bank, &cfg, 21).unwrap();
        assert_eq!(model_bits(&a), model_bits(&b), "{tag}");
        assert_eq!(bits(&la), bits(&lb));
        let p = Protocol::new(5, 5, 5);
        let ra = evaluate(&a, &target, p, 6, &cfg, 3).unwrap();
        let rb = evaluate(&b, &target, p, 6, &cfg, 3).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(ra.csv_row(), rb.csv_row());
    }
}

#[test]
fn evaluation_does_not_depend_on_execution_mode() {
    let bank = source(8, 30, 7);
    let mut cfg = quick_cfg();
    let (model, _) = train_model(VariantTag::DamslV1, &bank, &cfg, 2).unwrap();
    let p = Protocol::new(5, 5, 5);
    cfg.exec = damsl::parallel::ExecMode::Parallel;
    let par = evaluate(&model, &bank, p, 5, &cfg, 1).unwrap();
    cfg.exec = damsl::parallel::ExecMode::Sequential;
    let seq = evaluate(&model, &bank, p, 5, &cfg, 1).unwrap();
    assert_eq!(par, seq);
}

#[test]
fn random_guessing_is_near_chance() {
    let noise = SyntheticDomainSpec {
        n_classes: 10,
        mean_scale: 0.0,
        ..SyntheticDomainSpec::default()
    };
    let bank = gen_synthetic_domain(&noise, 40, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let enc = EncoderHead::random(bank.dim(), 1, 10, OptimizerTag::Adam, &mut rng).unwrap();
    let model = Model::new(VariantTag::Protonet, 5, vec![enc], Metric::None).unwrap();
    let report = evaluate(
        &model,
        &bank,
        Protocol::new(5, 5, 15),
        200,
        &EngineConfig::default(),
        4,
    )
    .unwrap();
    assert!((0.14..=0.26).contains(&report.mean), "mean {}", report.mean);
}

#[test]
fn evaluation_leaves_model_untouched() {
    let bank = source(8, 30, 9);
    let cfg = quick_cfg();
    let (model, _) = train_model(VariantTag::DamslV2, &bank, &cfg, 5).unwrap();
    let before = model_bits(&model);
    evaluate(&model, &bank, Protocol::new(5, 5, 5), 10, &cfg, 1).unwrap();
    assert_eq!(model_bits(&model), before);
}

#[test]
fn checkpoints_round_trip_every_variant() {
    let bank = source(8, 30, 10);
    let cfg = quick_cfg();
    let dir = tempfile::tempdir().unwrap();
    for tag in VariantTag::ALL {
        let (model, _) = train_model(tag, &bank, &cfg, 3).unwrap();
        let path = dir.path().join(format!("{tag}.ckpt"));
        checkpoint_save(&model, &path).unwrap();
        let back = checkpoint_load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(model_bits(&back), model_bits(&model));
        let p = Protocol::new(5, 5, 5);
        assert_eq!(
            evaluate(&model, &bank, p, 3, &cfg, 8).unwrap(),
            evaluate(&back, &bank, p, 3, &cfg, 8).unwrap()
        );
    }
}

/// Inserts `extra` zero input rows at `at` into a layer's weights.
fn pad_rows(layer: &Layer, at: usize, extra: usize) -> Layer {
    let w = &layer.weights;
    let padded = Matrix::from_fn(w.rows() + extra, w.cols(), |r, c| {
        if r < at {
            w.get(r, c)
        } else if r < at + extra {
            0.0
        } else {
            w.get(r - extra, c)
        }
    });
    Layer::new(padded, layer.biases.clone(), layer.activation).unwrap()
}

/// A net over `[block ‖ block']` that ignores the second score block.
fn widen(net: &MetricNet) -> MetricNet {
    let n = net.input_width();
    let layers = net
        .layers()
        .iter()
        .map(|l| {
            let mut edge_layers = l.edge.layers().to_vec();
            edge_layers[0] = pad_rows(&edge_layers[0], n, n);
            GnnLayer {
                edge: Mlp::new(edge_layers).unwrap(),
                theta_self: pad_rows(&l.theta_self, n, n),
                theta_adj: pad_rows(&l.theta_adj, n, n),
                activation: l.activation,
            }
        })
        .collect();
    MetricNet::from_parts(
        net.n_way(),
        2 * n,
        None,
        layers,
        pad_rows(net.output(), n, n),
    )
    .unwrap()
}

#[test]
fn identical_v2_heads_reduce_to_v1() {
    let bank = source(8, 30, 11);
    let cfg = quick_cfg();
    let (model, _) = train_model(VariantTag::DamslV1, &bank, &cfg, 4).unwrap();
    let Metric::Graph(net) = model.metric() else {
        panic!("damsl_v1 has a graph metric")
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut output = net.output().clone();
    for v in output.weights.data_mut() {
        *v = rand::Rng::random_range(&mut rng, -1.0..1.0);
    }
    let (n_way, width, proj, layers, _) = net.clone().into_parts();
    let net = MetricNet::from_parts(n_way, width, proj, layers, output).unwrap();
    let wide = widen(&net);
    for _ in 0..5 {
        let ep = sample_episode(&bank, Protocol::new(5, 5, 5), &mut rng).unwrap();
        let head = model.encoders()[0].with_fresh_classifier(5);
        let mut tune_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let tuned = fine_tune(
            &head,
            &ep.support_features,
            &ep.support_labels,
            &cfg.fine_tune,
            &mut tune_rng,
        )
        .unwrap();
        let pair = [tuned.clone(), tuned.clone()];
        let s1 = ensemble_scores(std::slice::from_ref(&tuned), &ep.support_features).unwrap();
        let q1 = ensemble_scores(std::slice::from_ref(&tuned), &ep.query_features).unwrap();
        let s2 = ensemble_scores(&pair, &ep.support_features).unwrap();
        let q2 = ensemble_scores(&pair, &ep.query_features).unwrap();
        let mode = damsl::parallel::ExecMode::Sequential;
        let l1 = net
            .logits(s1.values(), &ep.support_labels, q1.values(), mode)
            .unwrap();
        let l2 = wide
            .logits(s2.values(), &ep.support_labels, q2.values(), mode)
            .unwrap();
        assert_eq!(bits(l1.data()), bits(l2.data()));
        assert_eq!(
            net.predict(s1.values(), &ep.support_labels, q1.values(), mode)
                .unwrap(),
            wide.predict(s2.values(), &ep.support_labels, q2.values(), mode)
                .unwrap()
        );
    }
}
