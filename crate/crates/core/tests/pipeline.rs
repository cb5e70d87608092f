use triggerless_core::backdoor::{select_target_neurons, train_backdoored, train_clean};
use triggerless_core::data::synthetic_blobs;
use triggerless_core::metrics::{evaluate_attack, EvalSettings, MetricsReport};
use triggerless_core::network::Checkpoint;
use triggerless_core::query::{predict, predict_activation_query, query_campaign, schedule_dos, spec_of};
use triggerless_core::{AttackConfig, LayerTargets, ModelSpec, Parameters, QuerySession, TrainConfig};

struct Trained {
    clean: Parameters,
    backdoored: Parameters,
    attack: AttackConfig,
    test: triggerless_core::Dataset,
}

fn trained(inference_rate: f64) -> Trained {
    let all = synthetic_blobs(4, 12, 200, 0.05, 11).unwrap();
    let train = all.select(&(0..all.len()).filter(|i| i % 4 != 0).collect::<Vec<_>>());
    let test = all.select(&(0..all.len()).filter(|i| i % 4 == 0).collect::<Vec<_>>());
    let spec = ModelSpec::new(vec![12, 64, 48, 4]).unwrap();
    let layer = spec.second_to_last_layer();
    let attack = AttackConfig {
        train: TrainConfig { epochs: 20, batch_size: 16, ..TrainConfig::default() },
        target_label: 0,
        targets: vec![LayerTargets::new(layer, select_target_neurons(&spec, layer, 1, 9).unwrap()).unwrap()],
        backdoor_batch_fraction: 0.2,
        inference_dropout_rate: inference_rate,
        spare_targets: true,
    };
    let (backdoored, _) = train_backdoored(&train, &spec, &attack).unwrap();
    let (clean, _) = train_clean(&train, &spec, &attack.train).unwrap();
    Trained { clean, backdoored, attack, test }
}

#[test]
fn train_checkpoint_and_evaluate() {
    let t = trained(0.05);
    let spec = spec_of(&t.backdoored);
    let bytes = Checkpoint { spec: spec.clone(), params: t.backdoored.clone(), metadata: "role = \"backdoored\"".into() }
        .encode()
        .unwrap();
    let loaded = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(loaded.spec, spec);
    assert_eq!(loaded.encode().unwrap(), bytes);

    let settings = EvalSettings { num_queries: 200, inference_rate: 0.05, eval_inputs: 200, ..EvalSettings::default() };
    let plan = t.attack.plan(&spec).unwrap();
    let (report, transcripts) =
        evaluate_attack(&loaded.params, &t.clean, &plan, 0, &t.test, &settings).unwrap();
    assert_eq!(transcripts.len(), 200);
    assert!(report.eligible_inputs > 100 && report.eligible_inputs < 200);
    assert!(report.attack_success_rate > 0.9, "{report:?}");
    assert!(report.utility.delta.abs() <= 0.02);
    assert_eq!(report.csv_row().split(',').count(), MetricsReport::CSV_COLUMNS.len());
}

#[test]
fn offline_prediction_matches_served_queries_and_dos_padding_works() {
    let t = trained(0.02);
    let spec = spec_of(&t.backdoored);
    let plan = t.attack.plan(&spec).unwrap();
    let input = t.test.input(100);
    for seed in 0..10u64 {
        let predicted = predict_activation_query(seed, 4, &spec, &plan, &t.attack.targets, 10_000).unwrap().unwrap();
        let mut session = QuerySession::new(seed);
        let served = query_campaign(&t.backdoored, input, &plan, predicted as usize, &mut session, 4).unwrap();
        assert!(served[..served.len() - 1].iter().all(|r| !r.activated));
        assert!(served.last().unwrap().activated);

        let mut session = QuerySession::new(seed);
        predict(&t.backdoored, input, &plan, &mut session, 4).unwrap();
        schedule_dos(&mut session, 4, &spec, &plan, &t.attack.targets, 10_000).unwrap();
        let hit = predict(&t.backdoored, input, &plan, &mut session, 4).unwrap();
        assert!(hit.activated);
        assert_eq!(hit.label, t.attack.target_label);
    }
}
