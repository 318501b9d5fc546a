use untangle_core::embedding::{generate_synthetic_corpus, planted_world, PlantedWorldConfig, SyntheticBackend};
use untangle_core::predict::{aggregate_relevant, predict_entangled, rank_images, PredictorConfig};

#[test]
fn planted_attributes_are_recovered() {
    for seed in 0..3 {
        let world = planted_world(&PlantedWorldConfig {
            seed,
            ..Default::default()
        })
        .unwrap();
        let (corpus, _) = generate_synthetic_corpus(&world.spec, 2000).unwrap();
        let backend = SyntheticBackend::for_world(&world.spec).unwrap();
        let p = predict_entangled(
            &world.command,
            &corpus,
            &world.hierarchy,
            &backend,
            None,
            &PredictorConfig::default(),
            None,
        )
        .unwrap();
        let hits = p
            .entangled_texts()
            .iter()
            .filter(|a| world.planted.contains(a))
            .count();
        assert!(hits >= 8, "seed {seed}: {hits}/10 in {:?}", p.entangled_texts());
    }
}

#[test]
fn relevant_set_is_mostly_true_command_items() {
    let world = planted_world(&PlantedWorldConfig {
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    let (corpus, truth) = generate_synthetic_corpus(&world.spec, 2000).unwrap();
    assert!(truth.count(&world.command) >= 200);
    let backend = SyntheticBackend::for_world(&world.spec).unwrap();
    let ranking = rank_images(&corpus, &world.command, &backend).unwrap();
    let labels = world.hierarchy.labels_for_command(&world.command, None).unwrap();
    let set = aggregate_relevant(&ranking, &corpus, &labels, &backend, 100).unwrap();
    assert_eq!(set.item_ids.len(), 100);
    let correct = set
        .indices
        .iter()
        .filter(|&&i| truth.has(i, &world.command))
        .count();
    assert!(correct as f64 / set.indices.len() as f64 >= 0.9, "{correct}");
}

#[test]
fn binary_commands_filter_on_the_pair() {
    let h = untangle_core::hierarchy::AttributeHierarchy::bundled();
    assert_eq!(
        h.labels_for_command("with earrings", None).unwrap(),
        ["with earrings", "without earrings"]
    );
    let cfg = PredictorConfig::default();
    assert_eq!((cfg.n, cfg.rank_cap, cfg.top_images), (10, 40, 100));
}
