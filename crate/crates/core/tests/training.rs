use emmil::attention::{mean_positive_entropy, train_attention, AttentionNetwork};
use emmil::data::{generate, SynthSpec};
use emmil::mil::{Bag, BagLabel, Dataset, FeatureSequence};
use emmil::numerics::{bce_loss, Activation, DenseMatrix, Layer, ScoringNetwork};
use emmil::training::{train, EmMilModel, Phase, TrainConfig, TrainMode, TrainState};

fn bag(id: &str, rows: Vec<Vec<f64>>, label: &[u8]) -> Bag {
    Bag {
        sequence: FeatureSequence::new(id, DenseMatrix::from_rows(&rows).unwrap(), 1.0).unwrap(),
        label: BagLabel::new(label.to_vec()).unwrap(),
        segments: None,
        key_instances: None,
    }
}

fn mean_q(model: &EmMilModel, data: &Dataset) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for b in data.bags() {
        let q = model.score(b.features()).unwrap().q;
        n += q.len();
        total += q.iter().sum::<f64>();
    }
    total / n as f64
}

#[test]
fn e_epoch_from_zero_assigner_lowers_its_loss() {
    let data = Dataset::new(
        2,
        3,
        vec![bag("a", vec![vec![2.0, 0.0, 1.0], vec![-1.0, 0.5, 0.0], vec![0.0, 0.0, -2.0], vec![1.0, 1.0, 1.0]], &[1, 0])],
    )
    .unwrap();
    let cfg = TrainConfig {
        seed: 3,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let mut model = EmMilModel::new(3, 2, &cfg).unwrap();
    model.assigner = ScoringNetwork::zeros(&[3, 1], Activation::Sigmoid).unwrap();
    let b = &data.bags()[0];
    let z = emmil::mil::e_step_pseudo_labels(&model.classifier.forward(b.features()).unwrap(), &b.label);
    let targets = DenseMatrix::column_vector(&z.iter().map(|&v| f64::from(u8::from(v))).collect::<Vec<_>>());
    let loss = |m: &EmMilModel| bce_loss(&m.assigner.forward(b.features()).unwrap(), &targets, None).unwrap().loss;

    let before = loss(&model);
    let mut state = TrainState::new(model, &cfg);
    state.run_e_epoch(&data, cfg.learning_rate, false).unwrap();
    assert!(loss(&state.model) < before, "{} !< {before}", loss(&state.model));
}

#[test]
fn negative_only_data_drives_assignment_down() {
    let bags = (0..4)
        .map(|i| {
            let rows = (0..6).map(|t| vec![f64::from(i) * 0.3 - 0.5, f64::from(t) * 0.2, 1.0]).collect();
            bag(&format!("n{i}"), rows, &[0])
        })
        .collect();
    let data = Dataset::new(1, 3, bags).unwrap();
    let cfg = TrainConfig::default();
    let model = EmMilModel::new(3, 1, &cfg).unwrap();
    let start = mean_q(&model, &data);
    let mut state = TrainState::new(model, &cfg);
    for _ in 0..20 {
        state.run_e_epoch(&data, cfg.learning_rate, true).unwrap();
    }
    let end = mean_q(&state.model, &data);
    assert!(end < start, "mean Q {start} -> {end}");
}

#[test]
fn one_hot_assignment_yields_one_target_row() {
    // Q is sigmoid(8 * x0 - 4): near one for the clip with x0 = 1, near zero elsewhere
    let assigner = ScoringNetwork::from_layers(vec![Layer {
        weights: DenseMatrix::from_rows(&[[8.0, 0.0]]).unwrap(),
        bias: vec![-4.0],
        activation: Activation::Sigmoid,
    }])
    .unwrap();
    let cfg = TrainConfig::default();
    let mut model = EmMilModel::new(2, 3, &cfg).unwrap();
    model.assigner = assigner;
    let rows = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, -1.0], vec![0.0, 0.5]];
    let data = Dataset::new(3, 2, vec![bag("p", rows, &[0, 1, 1]), bag("n", vec![vec![1.0, 1.0]; 3], &[0, 0, 0])]).unwrap();
    let mut state = TrainState::new(model, &cfg);
    let mut seen = 0;
    state
        .run_m_epoch_with_probe(&data, 1e-4, 0.15, &mut |b, y_hat| {
            seen += 1;
            if b.id() == "p" {
                for t in 0..4 {
                    let want = if t == 1 { [0.0, 1.0, 1.0] } else { [0.0; 3] };
                    assert_eq!(y_hat.row(t), &want[..], "clip {t}");
                }
            } else {
                assert!(y_hat.as_slice().iter().all(|&v| v == 0.0));
            }
        })
        .unwrap();
    assert_eq!(seen, 2);
}

#[test]
fn joint_epochs_move_both_branches() {
    let data = generate(&SynthSpec::separable_default(1)).unwrap();
    let cfg = TrainConfig {
        mode: TrainMode::Joint,
        ..TrainConfig::default()
    };
    let model = EmMilModel::new(data.feature_dim(), data.num_classes(), &cfg).unwrap();
    let (p0, q0) = (model.classifier.fingerprint(), model.assigner.fingerprint());
    let mut state = TrainState::new(model, &cfg);
    state.run_joint_epoch(&data, cfg.learning_rate, cfg.gamma, false).unwrap();
    assert_ne!(state.model.classifier.fingerprint(), p0);
    assert_ne!(state.model.assigner.fingerprint(), q0);
    assert_eq!(state.phase, Some(Phase::Joint));
}

#[test]
fn alternating_schedule_moves_one_branch_per_epoch() {
    let data = generate(&SynthSpec::separable_default(2)).unwrap();
    let cfg = TrainConfig::default();
    let mut state = TrainState::new(EmMilModel::new(data.feature_dim(), data.num_classes(), &cfg).unwrap(), &cfg);
    for p in cfg.epoch_plan().unwrap().iter().take(35) {
        let (pc, qa) = (state.model.classifier.fingerprint(), state.model.assigner.fingerprint());
        match p.phase {
            Phase::E => state.run_e_epoch(&data, p.learning_rate, p.warm_start).unwrap(),
            Phase::M => state.run_m_epoch(&data, p.learning_rate, cfg.gamma).unwrap(),
            Phase::Joint => unreachable!(),
        };
        let moved = [state.model.classifier.fingerprint() != pc, state.model.assigner.fingerprint() != qa];
        assert_eq!(moved, [p.phase == Phase::M, p.phase == Phase::E]);
    }
}

#[test]
fn key_instance_recall_holds_through_first_stage() {
    let (mut at10, mut at30) = (0.0, 0.0);
    for seed in 0..10 {
        let data = generate(&SynthSpec::separable_default(seed)).unwrap();
        let state = train(&TrainConfig { seed, ..TrainConfig::default() }, &data).unwrap();
        at10 += state.history[10].key_recall.unwrap();
        at30 += state.history[30].key_recall.unwrap();
    }
    assert!(at30 >= at10, "mean recall at epoch 30 {} < epoch 10 {}", at30 / 10.0, at10 / 10.0);
}

#[test]
fn attention_concentrates_during_training() {
    let data = generate(&SynthSpec::separable_default(3)).unwrap();
    let cfg = TrainConfig {
        seed: 3,
        ..TrainConfig::default()
    };
    let initial = mean_positive_entropy(&AttentionNetwork::new(data.feature_dim(), data.num_classes(), &cfg).unwrap(), &data).unwrap();
    let state = train_attention(&cfg, &data).unwrap();
    let last = state.history.last().unwrap().mean_positive_entropy;
    assert!(last < initial, "entropy {initial} -> {last}");
}

#[test]
fn log_records_every_epoch() {
    let data = generate(&SynthSpec::separable_default(0)).unwrap();
    let state = train(&TrainConfig::default(), &data).unwrap();
    assert_eq!(state.history.len(), 66);
    assert!(state.history[0].phase.is_none());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    emmil::training::write_training_log(&path, &state.history).unwrap();
    assert_eq!(emmil::training::read_training_log(&path).unwrap(), state.history);
}
