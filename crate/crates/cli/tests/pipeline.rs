use std::path::{Path, PathBuf};
use std::process::Command;

use ctxnet_cli::checkpoint::Checkpoint;
use ctxnet_cli::eval::{evaluate, Source};
use ctxnet_cli::train::{checkpoint_path, train, TrainOptions, LOSS_LOG};
use ctxnet_cli::{synth, Error, Model, RunConfig};
use ctxnet_core::data::{read_image, Image};
use ctxnet_core::{ContextNet, Tensor, Variant};

fn dataset(root: &Path) -> PathBuf {
    let data = root.join("data");
    synth::generate(&data, 3, 40, 36, 5).unwrap();
    data
}

fn tiny_config(data: &Path, out: &Path) -> RunConfig {
    let mut c = RunConfig::desk();
    c.network.base_channels = 4;
    c.augment.crop_size = 16;
    c.schedule.total_iters = 12;
    c.checkpoint_every = 6;
    c.log_every = 1;
    c.batch_size = 2;
    c.workers = 0;
    c.data_root = data.to_path_buf();
    c.output_dir = out.to_path_buf();
    c
}

fn loss_log(dir: &Path) -> String {
    std::fs::read_to_string(dir.join(LOSS_LOG)).unwrap()
}

#[test]
fn training_is_reproducible_across_runs_and_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let mut logs = Vec::new();
    for (k, workers) in [1, 1, 4, 0].into_iter().enumerate() {
        let out = tmp.path().join(format!("run{k}"));
        let mut c = tiny_config(&data, &out);
        c.workers = workers;
        let summary = train(&c, &TrainOptions::default()).unwrap();
        assert_eq!(summary.iterations, 12);
        logs.push(loss_log(&out));
    }
    assert_eq!(logs[0].lines().count(), 13);
    assert!(logs.iter().all(|l| l == &logs[0]));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let full_dir = tmp.path().join("full");
    let full = train(&tiny_config(&data, &full_dir), &TrainOptions::default()).unwrap();

    let split_dir = tmp.path().join("split");
    let c = tiny_config(&data, &split_dir);
    let first = train(&c, &TrainOptions { resume: None, stop_at: Some(5) }).unwrap();
    assert_eq!(first.iterations, 5);
    let resumed = train(
        &c,
        &TrainOptions {
            resume: Some(checkpoint_path(&split_dir, 5)),
            stop_at: None,
        },
    )
    .unwrap();
    assert_eq!(resumed.iterations, 12);
    assert_eq!(loss_log(&split_dir), loss_log(&full_dir));
    let a = Checkpoint::load(&full.final_checkpoint).unwrap();
    let b = Checkpoint::load(&resumed.final_checkpoint).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let out = tmp.path().join("run");
    let mut c = tiny_config(&data, &out);
    c.schedule.total_iters = 2;
    let summary = train(&c, &TrainOptions::default()).unwrap();
    let mut bytes = std::fs::read(&summary.final_checkpoint).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let bad = tmp.path().join("bad.cen");
    std::fs::write(&bad, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&bad), Err(Error::Corrupt(_))));
    assert!(Model::load(&bad).is_err());
}

#[test]
fn non_finite_parameters_report_the_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let out = tmp.path().join("run");
    let c = tiny_config(&data, &out);
    let net = ContextNet::new(c.network.clone()).unwrap();
    let mut params = net.init_parameters(0);
    let (name, t) = params.iter().next().map(|(n, t)| (n.to_string(), t.clone())).unwrap();
    params.insert(name, t.map(|_| f32::NAN));
    let poisoned = tmp.path().join("nan.cen");
    Checkpoint {
        iteration: 7,
        params,
        optimizer: Some(ctxnet_core::optim::Adam::new()),
    }
    .save(&poisoned)
    .unwrap();
    let err = train(&c, &TrainOptions { resume: Some(poisoned), stop_at: None }).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { iteration: 7 }), "{err}");
    assert!(err.to_string().contains("iteration 7"));
}

#[test]
fn zeroed_global_context_is_an_exact_identity() {
    let mut c = RunConfig::desk().network;
    c.base_channels = 4;
    let full = ContextNet::new(c.clone().with_variant(Variant::Full)).unwrap();
    let local = ContextNet::new(c.with_variant(Variant::LocalContext)).unwrap();
    let x = Tensor::from_fn(ctxnet_core::Shape::new(1, 3, 16, 12), |[_, ch, y, x]| {
        ((ch * 7 + y * 3 + x) % 11) as f32 / 11.0
    });
    let a = full.infer(&full.init_parameters(3), &x).unwrap();
    let b = local.infer(&local.init_parameters(3), &x).unwrap();
    assert_eq!(a, b);
}

fn trained_model(tmp: &Path, iters: u64) -> (PathBuf, PathBuf) {
    let data = dataset(tmp);
    let out = tmp.join("run");
    let mut c = tiny_config(&data, &out);
    c.schedule.total_iters = iters;
    c.checkpoint_every = iters;
    (train(&c, &TrainOptions::default()).unwrap().final_checkpoint, data)
}

#[test]
fn inference_keeps_size_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let (ckpt, data) = trained_model(tmp.path(), 4);
    let model = Model::load(&ckpt).unwrap();
    let image = read_image(&data.join("input").join("synth_0000.png")).unwrap();
    let odd = image.crop(1, 2, 37, 29).unwrap();
    let a = model.enhance(&odd, None).unwrap();
    assert_eq!((a.width(), a.height()), (37, 29));
    assert_eq!(a, model.enhance(&odd, None).unwrap());

    let input = tmp.path().join("odd.png");
    ctxnet_core::data::write_image(&input, &odd).unwrap();
    let outs: Vec<Vec<u8>> = (0..2)
        .map(|k| {
            let path = tmp.path().join(format!("out{k}.png"));
            ctxnet_cli::infer::infer_file(&ckpt, &input, &path, None).unwrap();
            std::fs::read(path).unwrap()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
    let written = read_image(&tmp.path().join("out0.png")).unwrap();
    assert_eq!((written.width(), written.height()), (37, 29));
}

fn max_abs_diff(a: &Image, b: &Image) -> f32 {
    a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(p, q)| (p.clamp(0.0, 1.0) - q.clamp(0.0, 1.0)).abs())
        .fold(0.0, f32::max)
}

#[test]
fn tiled_inference_is_seam_free() {
    let tmp = tempfile::tempdir().unwrap();
    let (ckpt, _) = trained_model(tmp.path(), 30);
    let trained = Model::load(&ckpt).unwrap();
    // same weights with a strong global context branch
    let mut params = trained.params.clone();
    for (name, t) in params.iter_mut() {
        if name.starts_with("mid.gc.out.") {
            *t = t.map(|_| 0.2);
        }
    }
    let strong = Model::new(ContextNet::new(trained.net.config().clone()).unwrap(), params).unwrap();
    let image = Image::from_fn(160, 128, |x, y| {
        let (fx, fy) = (x as f32 / 160.0, y as f32 / 128.0);
        [0.1 + 0.2 * fx, 0.15 * (1.0 + (fx * 9.0).sin() * fy), 0.05 + 0.1 * fy]
    })
    .unwrap();
    for model in [&trained, &strong] {
        let whole = model.enhance(&image, None).unwrap();
        for tile in [16, 32, 48] {
            let diff = max_abs_diff(&whole, &model.enhance(&image, Some(tile)).unwrap());
            assert!(diff < 2.0 / 255.0, "tile {tile}: max difference {diff}");
        }
    }
    let off_grid = strong.enhance(&image.crop(0, 0, 150, 111).unwrap(), Some(32)).unwrap();
    assert_eq!((off_grid.width(), off_grid.height()), (150, 111));
    assert!(strong.enhance(&image, Some(6)).is_err());
}

#[test]
fn passthrough_target_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let report = evaluate(&Source::Target, &data).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(report.rows.iter().all(|r| r.psnr == f64::INFINITY && r.ssim == 1.0));
    assert_eq!(report.to_csv().lines().count(), 4);
    let input = evaluate(&Source::Input, &data).unwrap();
    assert!(input.rows.iter().all(|r| r.psnr.is_finite() && r.ssim < 1.0));
}

fn ctxnet(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ctxnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let out = tmp.path().join("run");
    let mut c = tiny_config(&data, &out);
    c.schedule.total_iters = 2;
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, c.to_text()).unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();

    assert!(ctxnet(&["train", "--config", &s(&cfg)]).status.success());
    let ckpt = out.join("final.cen");
    let input = data.join("input").join("synth_0001.png");
    let enhanced = tmp.path().join("enhanced.ppm");
    assert!(ctxnet(&["infer", "--checkpoint", &s(&ckpt), "--input", &s(&input), "--output", &s(&enhanced)])
        .status
        .success());
    assert_eq!(read_image(&enhanced).unwrap().width(), 40);

    let csv = tmp.path().join("m.csv");
    let eval = ctxnet(&["eval", "--checkpoint", &s(&ckpt), "--data", &s(&data), "--csv", &s(&csv)]);
    assert!(eval.status.success());
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);
    assert!(String::from_utf8_lossy(&eval.stdout).contains("mean"));

    assert!(ctxnet(&["preset", "desk"]).status.success());
    assert!(!ctxnet(&["preset", "huge"]).status.success());

    let missing = ctxnet(&["infer", "--checkpoint", "/nonexistent.cen", "--input", &s(&input), "--output", &s(&enhanced)]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error:"));

    std::fs::write(&cfg, "stages = 2\nbogus = 1\n").unwrap();
    let bad = ctxnet(&["train", "--config", &s(&cfg)]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("bogus"));
}

#[test]
fn gradcheck_command_reports_injected_fault() {
    let out = ctxnet(&["gradcheck", "--inject-fault", "conv2d"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("conv2d"), "{stderr}");
}
