use std::path::Path;
use std::process::Command;

use image::{Rgb, RgbImage};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use ufal::data::{load_image_folder, make_blob_shift, make_two_moons_shift, BlobShift};
use ufal::experiment::{DatasetConfig, ExperimentConfig};
use ufal::loss::{build_ufm, distance_term, resample_assignments, ubf_k};
use ufal::model::{Architecture, ModelBundle, UncertaintyRecord};
use ufal::pseudo_store::PseudoLabelStore;
use ufal::report::{filtering_curve, project_features, run_ablation, AblationRow};
use ufal::trainer::{adapt, evaluate, train_source, AdaptationTrace, Metric, TrainConfig};
use ufal::UfalError;

fn write_png(path: &Path, color: [u8; 3], size: u32) {
    RgbImage::from_pixel(size, size, Rgb(color)).save(path).unwrap();
}

#[test]
fn image_folder_two_classes() {
    let dir = tempfile::tempdir().unwrap();
    for (class, color) in [("bike", [255, 0, 0]), ("car", [0, 0, 255])] {
        let d = dir.path().join("photo").join(class);
        std::fs::create_dir_all(&d).unwrap();
        write_png(&d.join("a.png"), color, 10);
        write_png(&d.join("b.png"), color, 7);
    }
    std::fs::write(dir.path().join("photo/car/notes.txt"), "not an image").unwrap();
    let data = load_image_folder(dir.path(), "photo", 4).unwrap();
    assert_eq!(data.class_names, vec!["bike", "car"]);
    assert_eq!(data.labels, vec![0, 0, 1, 1]);
    assert_eq!(data.input_dim(), 3 * 4 * 4);
    // red pixels for class 0, blue for class 1
    assert_eq!(data.inputs[[0, 0]], 1.0);
    assert_eq!(data.inputs[[0, 2]], 0.0);
    assert_eq!(data.inputs[[3, 2]], 1.0);
    assert!(matches!(load_image_folder(dir.path(), "missing", 4), Err(UfalError::Io(_))));
}

#[test]
fn image_folder_without_images_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("clipart/empty")).unwrap();
    assert!(matches!(load_image_folder(dir.path(), "clipart", 4), Err(UfalError::NoImages(_))));
}

#[test]
fn sixty_five_class_tree() {
    let dir = tempfile::tempdir().unwrap();
    for c in 0..65 {
        let d = dir.path().join("art").join(format!("class_{c:02}"));
        std::fs::create_dir_all(&d).unwrap();
        write_png(&d.join("0.png"), [c as u8, 0, 0], 2);
    }
    let data = load_image_folder(dir.path(), "art", 2).unwrap();
    assert_eq!(data.n_classes(), 65);
    assert_eq!(ubf_k(data.n_classes()), 16);
}

#[test]
fn twelve_blob_classes_give_k_three() {
    let (s, t) = make_blob_shift(&BlobShift::new(12, 5, 1.0, 1.5, 0)).unwrap();
    assert_eq!(s.n_classes(), 12);
    assert_eq!(t.n_classes(), 12);
    assert_eq!(ubf_k(s.n_classes()), 3);
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        n_replicas: 2,
        source_epochs: 15,
        learning_rate: 0.03,
        ..TrainConfig::default()
    }
}

fn source_only_accuracy(rotation: f64, seed: u64) -> f64 {
    let (source, target) = make_two_moons_shift(300, rotation, 0.1, seed).unwrap();
    let mut model = ModelBundle::new(Architecture::mlp(2, &[16, 16], 2), seed).unwrap();
    let config = TrainConfig { seed, ..quick_config() };
    train_source(&mut model, &source, &config).unwrap();
    evaluate(&model, &target, Metric::Accuracy).unwrap()
}

#[test]
fn rotation_degrades_source_only_accuracy() {
    let seeds = 0..5;
    let same: f64 = seeds.clone().map(|s| source_only_accuracy(0.0, s)).sum::<f64>() / 5.0;
    let rotated: f64 = seeds.map(|s| source_only_accuracy(45.0, s)).sum::<f64>() / 5.0;
    assert!(rotated < same, "45 deg {rotated} vs 0 deg {same}");
}

#[test]
fn separable_blobs_train_to_near_perfect_accuracy() {
    // seed 4 puts the two means about 8.4 standard deviations apart
    let spec = BlobShift {
        spread: 6.0,
        ..BlobShift::new(2, 100, 0.0, 1.0, 4)
    };
    let (source, _) = make_blob_shift(&spec).unwrap();
    let mut model = ModelBundle::new(Architecture::mlp(2, &[8], 2), 3).unwrap();
    let before = model.clone();
    train_source(&mut model, &source, &TrainConfig { source_epochs: 0, ..quick_config() }).unwrap();
    assert_eq!(model, before);
    train_source(&mut model, &source, &quick_config()).unwrap();
    assert!(evaluate(&model, &source, Metric::Accuracy).unwrap() >= 0.99);

    let mut again = before.clone();
    train_source(&mut again, &source, &quick_config()).unwrap();
    assert_eq!(again, model);
}

#[test]
fn adapt_runs_are_reproducible_and_traced() {
    let (source, target) = make_two_moons_shift(200, 30.0, 0.1, 2).unwrap();
    let mut model = ModelBundle::new(Architecture::mlp(2, &[16, 16], 2), 2).unwrap();
    let config = TrainConfig {
        adapt_steps: 120,
        ..quick_config()
    };
    train_source(&mut model, &source, &config).unwrap();
    let mut a = model.clone();
    let mut b = model.clone();
    let ta = adapt(&mut a, &source, &target.unlabeled(), &config, Some(&target)).unwrap();
    let tb = adapt(&mut b, &source, &target.unlabeled(), &config, Some(&target)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    assert_eq!(ta.steps.len(), 120);
    assert_eq!(filtering_curve(&ta).iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 50, 100]);
    assert!(ta.final_eval.as_ref().unwrap().accuracy.is_some());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    ta.write_jsonl(&path).unwrap();
    assert_eq!(AdaptationTrace::read_jsonl(&path).unwrap(), ta);
}

#[test]
fn ablation_is_bit_reproducible() {
    let mut config = ExperimentConfig {
        dataset: DatasetConfig::TwoMoons {
            n_per_domain: 120,
            rotation_degrees: 30.0,
            noise: 0.1,
            seed: None,
        },
        ..ExperimentConfig::default()
    };
    config.model.hidden = vec![8, 8];
    config.train.source_epochs = 3;
    config.train.adapt_steps = 30;
    let rows = [AblationRow::SourceOnly, AblationRow::BisSbl, AblationRow::Ufal];
    let a = run_ablation(&config, &rows, &[0, 1]).unwrap();
    let b = run_ablation(&config, &rows, &[0, 1]).unwrap();
    assert_eq!(a, b);
    assert!(!a.any_failed());
    assert!(a.get(AblationRow::SourceOnly).unwrap().traces.iter().all(Option::is_none));
}

#[test]
fn resampled_assignment_frequency() {
    let mut store = PseudoLabelStore::default();
    store.records = vec![
        UncertaintyRecord {
            p: vec![0.7, 0.3],
            p_tilde: vec![0.7, 0.3],
            p_hat: 0,
            feature: vec![0.0],
        };
        10_000
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let assigned = resample_assignments(&store, &vec![true; 10_000], &mut rng);
    let zeros = assigned.iter().filter(|a| **a == Some(0)).count() as f64;
    assert!((zeros / 10_000.0 - 0.7).abs() < 0.02);
    let chi2 = (zeros - 7000.0).powi(2) / 7000.0 + (3000.0 - (10_000.0 - zeros)).powi(2) / 3000.0;
    assert!(1.0 - ChiSquared::new(1.0).unwrap().cdf(chi2) > 0.001);
}

#[test]
fn filtered_samples_do_not_move_the_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut feats: Vec<Vec<f64>> = (0..50).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let assignments: Vec<Option<usize>> = (0..50).map(|i| (i % 5 != 0).then_some(i % 3)).collect();
    let before = build_ufm(&feats, &assignments, 3, None).unwrap();
    for (i, f) in feats.iter_mut().enumerate() {
        if assignments[i].is_none() {
            f.iter_mut().for_each(|v| *v += 1e3);
        }
    }
    let after = build_ufm(&feats, &assignments, 3, None).unwrap();
    assert_eq!(before, after);
}

#[test]
fn distance_term_minimum_is_the_entropy() {
    // with x = 0 and ||mean_c||^2 = -ln p_c the distance softmax equals p
    let p = [0.35, 0.30, 0.25, 0.10];
    let feats: Vec<Vec<f64>> = p.iter().map(|v: &f64| vec![(-v.ln()).sqrt(), 0.0]).collect();
    let means = build_ufm(&feats, &[Some(0), Some(1), Some(2), Some(3)], 4, None).unwrap();
    let (loss, grad) = distance_term(&[0.0, 0.0], &p, &means).unwrap();
    let entropy: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
    assert!((loss - entropy).abs() < 1e-12);
    assert!((entropy - 1.3055).abs() < 1e-4);
    assert!(grad.iter().all(|g| g.abs() < 1e-12));
    assert!(distance_term(&[0.1, -0.2], &p, &means).unwrap().0 > loss);
}

#[test]
fn projection_of_planar_data_preserves_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Array2::from_shape_fn((30, 2), |_| rng.random_range(-3.0..3.0));
    let proj = project_features(x.view(), &[0; 30]).unwrap();
    for i in 0..30 {
        for j in 0..30 {
            let d = |m: &Array2<f64>| ((m[[i, 0]] - m[[j, 0]]).powi(2) + (m[[i, 1]] - m[[j, 1]]).powi(2)).sqrt();
            assert!((d(&x) - d(&proj.coords)).abs() < 1e-6);
        }
    }
}

#[test]
fn projection_separates_blobs() {
    let spec = BlobShift {
        dim: 10,
        spread: 10.0,
        ..BlobShift::new(2, 100, 0.0, 1.0, 12)
    };
    let (source, _) = make_blob_shift(&spec).unwrap();
    let proj = project_features(source.inputs.view(), &source.labels).unwrap();
    let centroid = |c: usize| {
        let ids = &source.ids_by_class()[c];
        let n = ids.len() as f64;
        [0, 1].map(|k| ids.iter().map(|&i| proj.coords[[i, k]]).sum::<f64>() / n)
    };
    let (c0, c1) = (centroid(0), centroid(1));
    let separation = ((c0[0] - c1[0]).powi(2) + (c0[1] - c1[1]).powi(2)).sqrt();
    let ids = &source.ids_by_class()[0];
    let within = (ids
        .iter()
        .map(|&i| (proj.coords[[i, 0]] - c0[0]).powi(2) + (proj.coords[[i, 1]] - c0[1]).powi(2))
        .sum::<f64>()
        / ids.len() as f64)
        .sqrt();
    assert!(separation > 5.0 * within, "separation {separation}, within-class std {within}");
}

#[test]
fn projection_of_duplicates_coincides() {
    let x = array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [0.0, 1.0, -1.0], [4.0, 0.0, 2.0]];
    let proj = project_features(x.view(), &[0, 0, 1, 1]).unwrap();
    assert_eq!(proj.coords.row(0), proj.coords.row(1));
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ufal"))
}

#[test]
fn cli_reports_and_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("moons.toml");
    std::fs::write(
        &cfg,
        "[dataset]\nkind = \"two_moons\"\nn_per_domain = 100\nrotation_degrees = 30.0\nnoise = 0.1\n\n\
         [model]\nhidden = [8, 8]\n\n[train]\nsource_epochs = 3\nadapt_steps = 60\nn_replicas = 2\n",
    )
    .unwrap();
    let src = dir.path().join("src.json");
    let out = cli().arg("train-source").arg("--config").arg(&cfg).arg("--out").arg(&src).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("target accuracy"));

    let adapted = dir.path().join("adapted.json");
    let trace = dir.path().join("trace.jsonl");
    let out = cli()
        .args(["--format", "jsonl", "adapt", "--layout", "random", "--no-ubf"])
        .arg("--config")
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(&src)
        .arg("--out")
        .arg(&adapted)
        .arg("--trace")
        .arg(&trace)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let record: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(record["steps"], 60);

    let curve = dir.path().join("curve.csv");
    let projection = dir.path().join("projection.csv");
    let out = cli()
        .arg("report")
        .arg("--trace")
        .arg(&trace)
        .arg("--filtering-csv")
        .arg(&curve)
        .arg("--config")
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(&adapted)
        .arg("--projection-csv")
        .arg(&projection)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&curve).unwrap().lines().count(), 1 + 2);
    assert_eq!(std::fs::read_to_string(&projection).unwrap().lines().count(), 1 + 100);

    let out = cli().arg("evaluate").arg("--config").arg(&cfg).arg("--checkpoint").arg(dir.path().join("nope.json")).output().unwrap();
    assert!(!out.status.success());
    let out = cli().args(["adapt", "--layout", "sideways", "--checkpoint", "x", "--out", "y"]).output().unwrap();
    assert!(!out.status.success());

    let bad = dir.path().join("images.toml");
    std::fs::write(
        &bad,
        format!(
            "[dataset]\nkind = \"image_folder\"\nroot = \"{}\"\nsource_domain = \"a\"\ntarget_domain = \"b\"\n",
            dir.path().join("no_such_root").display()
        ),
    )
    .unwrap();
    let out = cli().args(["ablate", "--rows", "source_only"]).arg("--config").arg(&bad).output().unwrap();
    assert!(!out.status.success());
}
