use acrkn_core::eval::predict_multistep;
use acrkn_core::experiment::score;
use acrkn_core::{EvalOptions, Mode, Network, RunConfig, Score, SyntheticSystem, SystemKind, TrainedModel};

fn tiny(mode: Mode) -> acrkn_core::ResolvedConfig {
    RunConfig {
        latent_obs_dim: Some(3),
        num_basis: Some(2),
        encoder_hidden: Some(vec![8]),
        decoder_hidden: Some(vec![8]),
        control_hidden: Some(vec![8]),
        action_decoder_hidden: Some(vec![8]),
        epochs: Some(3),
        batch_size: Some(4),
        ..Default::default()
    }
    .resolve(mode, 1, 1)
    .unwrap()
}

#[test]
fn checkpoints_restore_identical_predictions() {
    let data = SyntheticSystem::new(SystemKind::AntagonisticBacklash).simulate(8, 30, 4).unwrap();
    let (train, test) = (data.subset(&[0, 1, 2, 3, 4, 5]), data.subset(&[6, 7]));
    let (model, outcome) = TrainedModel::fit(&tiny(Mode::Forward), &train, Some(&test), |_| {}).unwrap();
    assert_eq!(outcome.metrics.len(), 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();
    let loaded = TrainedModel::load(&path).unwrap();
    assert_eq!(loaded.config, model.config);
    assert_eq!(loaded.best_epoch, model.best_epoch);

    let ep = &test.episodes[0];
    let predict = |m: &TrainedModel| {
        let Network::Forward(f) = &m.network else { unreachable!() };
        predict_multistep(f, &m.store, &m.norm, &ep.observations[..10], &ep.actions, 5).unwrap()
    };
    assert_eq!(predict(&model), predict(&loaded));
    let opts = EvalOptions { horizon: 4, warmup: 5, ..Default::default() };
    assert_eq!(score(&model, &test, &opts).unwrap(), score(&loaded, &test, &opts).unwrap());
}

#[test]
fn inverse_pipeline_scores_actions() {
    let data = SyntheticSystem::new(SystemKind::PendulumLag).simulate(6, 25, 9).unwrap();
    let (model, _) = TrainedModel::fit(&tiny(Mode::Inverse), &data.subset(&[0, 1, 2, 3]), None, |_| {}).unwrap();
    let Score::Inverse { action_rmse } = score(&model, &data.subset(&[4, 5]), &EvalOptions::default()).unwrap() else {
        panic!("expected an inverse score")
    };
    assert!(action_rmse.is_finite() && action_rmse > 0.0);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    std::fs::write(&path, r#"{"format": "acrkn-params", "version": 99, "meta": {}, "params": []}"#).unwrap();
    assert!(TrainedModel::load(&path).is_err());
    std::fs::write(&path, "not json").unwrap();
    assert!(TrainedModel::load(&path).is_err());
}
