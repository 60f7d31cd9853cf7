use rspnet::analysis::{count_params_report, grad_flow_report, Activation, FlowArch};
use rspnet::attention::{AttentionMode, MacroGenotype};
use rspnet::cell::Genotype;
use rspnet::config::SearchConfig;
use rspnet::data::{load_dataset, save_dataset, synth_dataset};
use rspnet::model::{ModelFile, Network};
use rspnet::primitives::PrimitiveKind;
use rspnet::train::{evaluate_miou, search_splits, stage1_cell_search, stage2_path_search, train_final, MetricsLog};

fn tiny() -> SearchConfig {
    let mut cfg = SearchConfig::default();
    for (k, v) in [
        ("channels", "8"),
        ("layers", "2"),
        ("stack_n", "1"),
        ("crop", "24x24"),
        ("batch_size", "4"),
        ("epochs_cell", "4"),
        ("epochs_path", "2"),
        ("epochs_train", "6"),
        ("synth_size", "24"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn data(cfg: &SearchConfig, n: usize) -> Vec<rspnet::data::SegSample> {
    synth_dataset(3, n, cfg.synth_size, cfg.num_classes).unwrap()
}

#[test]
fn generator_labels_stay_in_range() {
    let samples = synth_dataset(11, 1000, 16, 4).unwrap();
    assert_eq!(samples.len(), 1000);
    for s in &samples {
        assert!(s.labels.iter().all(|&l| l < 4));
        assert_eq!(s.image.len(), 16 * 16);
    }
    assert!(synth_dataset(11, 0, 16, 4).unwrap().is_empty());
    let shaped = samples.iter().filter(|s| s.labels.iter().any(|&l| l > 0)).count();
    assert_eq!(shaped, 1000);
}

#[test]
fn generator_is_deterministic_and_round_trips_on_disk() {
    let a = synth_dataset(5, 6, 20, 3).unwrap();
    assert_eq!(a, synth_dataset(5, 6, 20, 3).unwrap());
    assert_ne!(a, synth_dataset(6, 6, 20, 3).unwrap());
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &a).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), a);
}

#[test]
fn generator_rejects_bad_arguments() {
    assert!(synth_dataset(0, 1, 8, 3).is_err());
    assert!(synth_dataset(0, 1, 16, 1).is_err());
}

#[test]
fn cell_search_is_deterministic_and_learns() {
    let cfg = tiny();
    let all = data(&cfg, 24);
    let (a, b) = search_splits(&all, cfg.seed);
    let run = || {
        let mut log = MetricsLog::default();
        let out = stage1_cell_search::<f32>(&a, &b, &cfg, &mut log).unwrap();
        (out, log)
    };
    let (o1, l1) = run();
    let (o2, l2) = run();
    assert_eq!(o1.genotype, o2.genotype);
    assert_eq!(l1.to_csv(), l2.to_csv());
    assert_eq!(l1.rows.len(), cfg.epochs_cell);
    assert!(l1.rows.iter().all(|r| r.loss.is_finite()));
    assert!(l1.rows.last().unwrap().loss < l1.rows[0].loss);
    assert!(
        o1.final_miou > o1.initial_miou,
        "{} -> {}",
        o1.initial_miou,
        o1.final_miou
    );
    o1.genotype.validate().unwrap();
}

#[test]
fn literal_path_search_degenerates_to_leading_paths() {
    let mut cfg = tiny();
    cfg.set("layers", "3").unwrap();
    cfg.set("attention_mode", "literal").unwrap();
    let all = data(&cfg, 12);
    let (a, b) = search_splits(&all, 0);
    let g = Genotype::uniform(PrimitiveKind::Conv3x3, cfg.channels, false);
    let out = stage2_path_search::<f64>(&a, &b, &g, &cfg, &mut MetricsLog::default()).unwrap();
    for (l, s) in out.mean_scores.iter().enumerate() {
        assert!(s.iter().all(|v| (v - (l + 1) as f64).abs() < 1e-4), "{s:?}");
    }
    assert_eq!(
        out.macro_genotype,
        MacroGenotype::leading(3, cfg.k_paths, AttentionMode::Literal)
    );
}

#[test]
fn single_layer_path_search_keeps_the_stem() {
    let mut cfg = tiny();
    cfg.set("layers", "1").unwrap();
    let all = data(&cfg, 8);
    let (a, b) = search_splits(&all, 0);
    let g = Genotype::uniform(PrimitiveKind::Identity, cfg.channels, false);
    let out = stage2_path_search::<f32>(&a, &b, &g, &cfg, &mut MetricsLog::default()).unwrap();
    assert_eq!(out.macro_genotype.layers, vec![vec![0]]);
}

#[test]
fn final_training_fits_a_small_set_and_saves() {
    let mut cfg = tiny();
    cfg.set("epochs_train", "40").unwrap();
    cfg.set("batch_size", "2").unwrap();
    let train = data(&cfg, 8);
    let g = Genotype::uniform(PrimitiveKind::Conv3x3, cfg.channels, false);
    let m = MacroGenotype::leading(cfg.layers, cfg.k_paths, cfg.attention_mode);
    let mut log = MetricsLog::default();
    let out = train_final::<f32>(&g, &m, &train, &train, &cfg, &mut log).unwrap();
    assert!(out.report.mean > 0.8, "train-set miou {}", out.report.mean);
    assert_eq!(out.params, out.network.param_count());
    let csv = log.to_csv();
    assert!(csv.starts_with("epoch,phase,loss,miou\n1,train,"));
    assert!(!csv.contains('\r'));

    let json = out.network.to_file().unwrap().to_json().unwrap();
    let back = Network::<f32>::from_file(&ModelFile::from_json(&json).unwrap()).unwrap();
    let again = evaluate_miou(&back, &train, cfg.batch_size, cfg.num_classes).unwrap();
    assert_eq!(again.mean, out.report.mean);
}

#[test]
fn partial_wrapping_quarters_quadratic_edges() {
    let cfg = SearchConfig::default();
    for kind in [
        PrimitiveKind::Conv3x3,
        PrimitiveKind::Conv5x5,
        PrimitiveKind::DilatedConv3x3,
    ] {
        let r = count_params_report(&Genotype::uniform(kind, cfg.channels, false), None, &cfg).unwrap();
        assert_eq!(r.edge_ratio(), 0.25);
        assert!(r.ratio() <= 0.30);
    }
    let r = count_params_report(
        &Genotype::uniform(PrimitiveKind::Identity, cfg.channels, false),
        None,
        &cfg,
    )
    .unwrap();
    assert_eq!(r.ratio(), 1.0);
    assert_eq!(r.plain.total, r.plain.other);
}

#[test]
fn plain_first_layer_gradient_shrinks_with_depth() {
    let norms: Vec<f64> = [5, 10, 20, 40]
        .iter()
        .map(|&d| {
            grad_flow_report(d, Activation::Sigmoid, FlowArch::Plain, 1)
                .unwrap()
                .norms[0]
        })
        .collect();
    assert!(norms.windows(2).all(|w| w[1] <= w[0]), "{norms:?}");
    let plain = grad_flow_report(20, Activation::Sigmoid, FlowArch::Plain, 1).unwrap();
    let residual = grad_flow_report(20, Activation::Sigmoid, FlowArch::Residual, 1).unwrap();
    assert!(plain.ratio() < 1e-8 && residual.ratio() > 1e-8);
    assert!(plain.norms.iter().all(|n| n.is_finite() && *n >= 0.0));
}
