use super::*;
use crate::model::ModelConfig;
use crate::numerics::finite_diff_check;

fn micro() -> ModelParams {
    ModelParams::init(
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            max_len: 24,
            ..ModelConfig::default()
        },
        5,
    )
    .unwrap()
}

fn short_template() -> PromptTemplate {
    PromptTemplate {
        text: "{sentence}:".into(),
        pivot: Default::default(),
    }
}

fn data() -> Vec<Triplet> {
    vec![
        Triplet::new("red fox", "a red fox", "blue sea"),
        Triplet::new("cold rain", "the rain", "hot sand"),
        Triplet {
            anchor: "old tree".into(),
            positive: "tall tree".into(),
            negative: None,
        },
    ]
}

fn cfg() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size: 2,
        steps: 6,
        template: short_template(),
        restrict_batch_to_grid: false,
        ..TrainConfig::default()
    }
}

#[test]
fn defaults_follow_the_reference_settings() {
    let c = TrainConfig::default();
    assert_eq!(c.learning_rate, 2e-4);
    assert_eq!(c.seed, 42);
    assert_eq!(c.temperature, 0.05);
    assert!(BATCH_GRID.contains(&c.batch_size));
    assert!(c.validate().is_ok());
    let off_grid = TrainConfig { batch_size: 10, ..TrainConfig::default() };
    assert!(off_grid.validate().is_err());
}

#[test]
fn batch_gradient_matches_central_differences_everywhere() {
    let model = micro();
    let plan = DirectionPlan::last_bi(2).unwrap();
    let d = data();
    let batch: Vec<&Triplet> = d.iter().collect();
    let c = cfg();
    let bg = batch_gradient(&model, &plan, &batch, &c, &mut ForwardCtx::eval()).unwrap();
    let loss = batch_loss(&model, &plan, &batch, &c).unwrap();
    assert!((bg.loss - loss).abs() < 1e-12);

    let flat = model.store.trainable_flat();
    let analytic = bg.trainable_flat(&model.store);
    let mut probe = model.clone();
    let err = finite_diff_check(
        |x| {
            probe.store.set_trainable_flat(x)?;
            batch_loss(&probe, &plan, &batch, &c)
        },
        &flat,
        &analytic,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let model = micro();
    let plan = DirectionPlan::last_bi(2).unwrap();
    let out = train(&model, &plan, &data(), &TrainConfig { learning_rate: 0.0, ..cfg() }).unwrap();
    assert_eq!(out.model.store, model.store);
    assert_eq!(out.losses.len(), 6);
}

#[test]
fn loss_trace_is_reproducible() {
    let model = micro();
    let plan = DirectionPlan::last_bi(2).unwrap();
    let a = train(&model, &plan, &data(), &cfg()).unwrap();
    let b = train(&model, &plan, &data(), &cfg()).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.model.store, b.model.store);
    let other = train(&model, &plan, &data(), &TrainConfig { seed: 7, ..cfg() }).unwrap();
    assert_ne!(a.losses, other.losses);
}

#[test]
fn lora_training_moves_only_adapter_factors() {
    let base = micro();
    let c = TrainConfig {
        lora: Some(LoraConfig { rank: 4, alpha: 8.0, dropout: 0.1 }),
        ..cfg()
    };
    let (model, plan) = prepare(&base, &c).unwrap();
    let out = train(&model, &plan, &data(), &c).unwrap();
    let mut moved = 0;
    for (id, name, t) in out.model.store.iter() {
        let before = model.store.get(id);
        if name.contains("lora") {
            moved += usize::from(t.data() != before.data());
        } else {
            assert_eq!(t.data(), before.data(), "{name} changed");
        }
    }
    assert!(moved > 0);
}

#[test]
fn addition_strategy_trains_the_new_layer_under_lora() {
    let base = micro();
    let c = TrainConfig {
        strategy: Strategy::Addition,
        lora: Some(LoraConfig { rank: 2, alpha: 2.0, dropout: 0.0 }),
        ..cfg()
    };
    let (model, plan) = prepare(&base, &c).unwrap();
    assert_eq!(model.n_layers(), 3);
    assert_eq!(plan.turning_point(), 2);
    let out = train(&model, &plan, &data(), &c).unwrap();
    let changed = out
        .model
        .store
        .iter()
        .filter(|(id, _, t)| t.data() != model.store.get(*id).data())
        .map(|(_, name, _)| name.to_string())
        .collect::<Vec<_>>();
    assert!(changed.iter().any(|n| n.starts_with("layers.2.")));
    assert!(changed.iter().all(|n| n.starts_with("layers.2.") || n.contains("lora")));
}

#[test]
fn training_errors() {
    let model = micro();
    let plan = DirectionPlan::last_bi(2).unwrap();
    assert!(matches!(train(&model, &plan, &[], &cfg()), Err(Error::EmptyInput)));
    let wrong = DirectionPlan::last_bi(3).unwrap();
    assert!(train(&model, &wrong, &data(), &cfg()).is_err());
}
