use clp::data::{synthetic_text, tokenize, Corpus, VOCAB_SIZE};
use clp::gate::PruneWindow;
use clp::model::{ModelSpec, TransformerLM, BLOCK_PARAM_NAMES};
use clp::prune::{prune, PrunedModelMeta};
use clp::train::{lm_loss_and_grads, loss_curve_csv, train_lm, TrainConfig};
use clp::tune::{frozen_checksum, select_trainable, tune, TrainableSet, TuneConfig, TuneMode};
use clp::ClpError;

fn spec(layers: usize) -> ModelSpec {
    ModelSpec {
        num_layers: layers,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: VOCAB_SIZE,
        max_seq_len: 32,
        seed: 8,
    }
}

fn corpora() -> (Corpus, Corpus) {
    let c = tokenize(synthetic_text(5, 6000).as_bytes()).unwrap();
    c.split_tail(0.2).unwrap()
}

fn pruned(window: PruneWindow) -> (TransformerLM, PrunedModelMeta) {
    prune(&TransformerLM::init(&spec(6)).unwrap(), window).unwrap()
}

fn cfg(mode: TuneMode, steps: usize) -> TuneConfig {
    TuneConfig {
        mode,
        epochs: 1,
        learning_rate: 1e-3,
        batch_size: 4,
        seq_len: 16,
        rank: 2,
        max_steps: Some(steps),
        ..TuneConfig::default()
    }
}

fn layer_names(i: usize) -> Vec<String> {
    BLOCK_PARAM_NAMES.iter().map(|n| format!("layers.{i}.{n}")).collect()
}

#[test]
fn interior_window_trains_exactly_the_two_endpoint_layers() {
    let (model, meta) = pruned(PruneWindow::new(2, 2));
    let set = select_trainable(&model, Some(&meta), TuneMode::Endpoint).unwrap();
    let mut want = layer_names(1);
    want.extend(layer_names(2));
    assert_eq!(set.names.iter().cloned().collect::<Vec<_>>(), {
        want.sort();
        want
    });
    let per_layer = model.spec.params_per_layer();
    assert_eq!(set.parameter_count(&model), 2 * per_layer);
}

#[test]
fn boundary_windows_train_one_layer() {
    let (model, meta) = pruned(PruneWindow::tail(6, 2));
    let set = select_trainable(&model, Some(&meta), TuneMode::Endpoint).unwrap();
    assert_eq!(set.len(), BLOCK_PARAM_NAMES.len());
    assert!(set.contains("layers.3.attn.wq"));
    let (model, meta) = pruned(PruneWindow::new(0, 2));
    let set = select_trainable(&model, Some(&meta), TuneMode::Endpoint).unwrap();
    assert!(set.contains("layers.0.mlp.w1"));
    assert_eq!(set.len(), BLOCK_PARAM_NAMES.len());
}

#[test]
fn endpoint_mode_needs_metadata() {
    let model = TransformerLM::init(&spec(4)).unwrap();
    assert!(matches!(
        select_trainable(&model, None, TuneMode::Endpoint),
        Err(ClpError::Contract(_))
    ));
}

#[test]
fn endpoint_set_size_does_not_grow_with_depth() {
    for layers in [4, 8, 12] {
        let (model, meta) = prune(&TransformerLM::init(&spec(layers)).unwrap(), PruneWindow::new(1, 2)).unwrap();
        let set = select_trainable(&model, Some(&meta), TuneMode::Endpoint).unwrap();
        assert_eq!(set.len(), 2 * BLOCK_PARAM_NAMES.len());
    }
}

#[test]
fn lowrank_and_full_selections() {
    let (mut model, meta) = pruned(PruneWindow::new(2, 2));
    assert!(select_trainable(&model, Some(&meta), TuneMode::Lowrank).is_err());
    model.attach_adapters(2, 0).unwrap();
    let set = select_trainable(&model, Some(&meta), TuneMode::Lowrank).unwrap();
    assert_eq!(set.len(), 4 * 6 * 2);
    assert!(set.names.iter().all(|n| n.contains(".lora_")));
    let full = select_trainable(&model, Some(&meta), TuneMode::Full).unwrap();
    assert_eq!(full.len(), model.named_parameters().len());
    assert!(select_trainable(&model, Some(&meta), TuneMode::None).unwrap().is_empty());
}

#[test]
fn frozen_tensors_get_no_gradient_at_all() {
    let (model, meta) = pruned(PruneWindow::new(2, 2));
    let set = select_trainable(&model, Some(&meta), TuneMode::Endpoint).unwrap();
    let (train, _) = corpora();
    let batch = &clp::data::epoch_batches(&train, 16, 2, 0).unwrap()[0];
    let (_, grads) = lm_loss_and_grads(&model, batch, &|n| set.contains(n)).unwrap();
    let names: Vec<&str> = grads.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names.len(), set.len());
    assert!(names.iter().all(|n| set.contains(n)));
}

#[test]
fn endpoint_tuning_changes_only_the_endpoints() {
    let (model, meta) = pruned(PruneWindow::new(2, 2));
    let (train, eval) = corpora();
    let out = tune(&model, Some(&meta), &train, &eval, &cfg(TuneMode::Endpoint, 6)).unwrap();
    assert_eq!(out.steps, 6);
    assert_eq!(out.frozen_checksum_before, out.frozen_checksum_after);
    assert_eq!(frozen_checksum(&out.model, &out.trainable), frozen_checksum(&model, &out.trainable));
    assert_ne!(out.model.blocks[1], model.blocks[1]);
    assert_ne!(out.model.blocks[2], model.blocks[2]);
    for i in [0, 3] {
        assert_eq!(out.model.blocks[i], model.blocks[i]);
    }
    assert_eq!(out.model.head, model.head);
    assert!(out.eval_loss_after < out.eval_loss_before);
    let csv = loss_curve_csv(&out.curve);
    assert!(csv.starts_with("step,split,loss\n0,eval,"));
    assert_eq!(csv.lines().filter(|l| l.contains(",train,")).count(), 6);
}

#[test]
fn lowrank_tuning_freezes_the_base_and_merges() {
    let (model, meta) = pruned(PruneWindow::new(2, 2));
    let (train, eval) = corpora();
    let out = tune(&model, Some(&meta), &train, &eval, &cfg(TuneMode::Lowrank, 4)).unwrap();
    assert_eq!(out.frozen_checksum_before, out.frozen_checksum_after);
    assert!(out.model.blocks.iter().all(|b| b.adapters.is_none()));
    assert_eq!(out.model.spec, model.spec);
    assert_ne!(out.model, model);
    // rank 2 over four square attention projections and the two MLP matrices, four layers
    assert_eq!(out.trainable_params, 4 * 2 * (4 * (16 + 16) + 2 * (16 + 32)));
}

#[test]
fn zero_steps_return_the_input_model() {
    let (model, meta) = pruned(PruneWindow::new(2, 2));
    let (train, eval) = corpora();
    for mode in [TuneMode::Endpoint, TuneMode::Lowrank, TuneMode::Full, TuneMode::None] {
        let out = tune(&model, Some(&meta), &train, &eval, &cfg(mode, 0)).unwrap();
        assert_eq!(out.model, model, "{mode}");
        assert_eq!(out.model.checksum(), model.checksum());
        assert_eq!(out.steps, 0);
    }
    let none = TuneConfig {
        max_steps: None,
        ..cfg(TuneMode::None, 0)
    };
    assert_eq!(tune(&model, Some(&meta), &train, &eval, &none).unwrap().model, model);
}

#[test]
fn tuning_modes_parse() {
    for (s, m) in [
        ("endpoint", TuneMode::Endpoint),
        ("lowrank", TuneMode::Lowrank),
        ("full", TuneMode::Full),
        ("none", TuneMode::None),
    ] {
        assert_eq!(s.parse::<TuneMode>().unwrap(), m);
        assert_eq!(m.to_string(), s);
    }
    assert!(matches!("lora".parse::<TuneMode>(), Err(ClpError::Config(_))));
    let bad = TuneConfig {
        rank: 0,
        ..cfg(TuneMode::Lowrank, 1)
    };
    assert!(bad.validate().is_err());
}

#[test]
fn training_lowers_loss_and_is_reproducible() {
    let corpus = tokenize(synthetic_text(6, 20_000).as_bytes()).unwrap();
    let cfg = TrainConfig {
        steps: 30,
        batch_size: 4,
        seq_len: 24,
        warmup_steps: 5,
        eval_every: 10,
        eval_fraction: 0.1,
        ..TrainConfig::default()
    };
    let init = TransformerLM::init(&spec(2)).unwrap();
    let mut a = init.clone();
    let out_a = train_lm(&mut a, &corpus, &cfg).unwrap();
    let mut b = init.clone();
    let out_b = train_lm(&mut b, &corpus, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(loss_curve_csv(&out_a.curve), loss_curve_csv(&out_b.curve));
    let first = out_a.curve.first().unwrap().loss;
    assert!(out_a.final_eval_loss < first);
    let strict = TrainConfig {
        max_eval_ppl: Some(1.0),
        ..cfg
    };
    let mut c = init;
    assert!(matches!(train_lm(&mut c, &corpus, &strict), Err(ClpError::Diverged { .. })));
}

#[test]
fn trainable_set_membership() {
    let set = TrainableSet {
        mode: TuneMode::Full,
        names: ["a".to_string()].into_iter().collect(),
    };
    assert!(set.contains("a") && !set.contains("b"));
}
