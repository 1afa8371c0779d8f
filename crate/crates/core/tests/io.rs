use std::path::PathBuf;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semadv::io::{
    decode_checkpoint, decode_tensor, emit_grid, encode_checkpoint, encode_idx_images, encode_idx_labels,
    encode_tensor, load_classifier, load_energy, load_idx, load_tensor, parse_idx_images, parse_idx_labels,
    render_grid, save_classifier, save_energy, save_tensor, write_idx, IoError, RunConfig, GREEN, GRID_SCALE, RED,
};
use semadv::models::{ClassifierArch, ClassifierParams, EnergyArch, EnergyNetParams, ModelError, Network, ParamSet};
use semadv::tensor::Tensor;

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn read_golden(name: &str) -> Vec<u8> {
    std::fs::read(golden(name)).unwrap()
}

fn golden_params() -> ParamSet<f32> {
    ParamSet::new(vec![
        ("a.weight".into(), Tensor::new(&[2, 2], vec![1.0, -2.0, 0.5, 0.0]).unwrap()),
        ("a.bias".into(), Tensor::new(&[2], vec![0.125, -0.75]).unwrap()),
    ])
}

#[test]
fn golden_tensor_files() {
    let t = Tensor::new(&[2, 3], vec![0.0f32, 1.0, -1.5, 0.25, 1e-3, 65504.0]).unwrap();
    let bytes = read_golden("tensor_f32.saet");
    assert_eq!(encode_tensor(&t), bytes);
    let back = decode_tensor::<f32>(&bytes).unwrap();
    assert_eq!(back.shape(), t.shape());
    assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let pi = Tensor::new(&[], vec![std::f64::consts::PI]).unwrap();
    let bytes = read_golden("scalar_f64.saet");
    assert_eq!(encode_tensor(&pi), bytes);
    assert_eq!(load_tensor::<f64>(&golden("scalar_f64.saet")).unwrap(), pi);
}

#[test]
fn golden_idx_files() {
    let pixels = [0u8, 255, 128, 7, 1, 2, 3, 4, 250, 251, 252, 253, 9, 8, 7, 6, 100, 0, 0, 255, 5, 5, 5, 5];
    assert_eq!(encode_idx_images(&pixels, 3, 2, 4), read_golden("images.idx"));
    assert_eq!(encode_idx_labels(&[7, 0, 9]), read_golden("labels.idx"));
    let data = load_idx(&golden("images.idx"), &golden("labels.idx")).unwrap();
    assert_eq!(data.len(), 3);
    assert_eq!(data.images.shape(), &[3, 1, 2, 4]);
    assert_eq!(data.labels, vec![7, 0, 9]);
    assert_eq!(data.images.data()[1], 1.0);
    assert_eq!(data.images.data()[0], 0.0);
    assert_eq!(data.images.data()[2], 128.0 / 255.0);
}

#[test]
fn golden_checkpoint_file() {
    let params = golden_params();
    let bytes = read_golden("checkpoint.saec");
    assert_eq!(encode_checkpoint("test", serde_json::json!({"width": 2}), &params), bytes);
    let (manifest, back) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(manifest.kind, "test");
    assert_eq!(manifest.arch, serde_json::json!({"width": 2}));
    assert_eq!(manifest.params.iter().map(|e| e.name.as_str()).collect::<Vec<_>>(), vec!["a.weight", "a.bias"]);
    assert_eq!(back, params);
}

#[test]
fn golden_grid_file() {
    let tiles = [
        Tensor::new(&[1, 2, 2], vec![0.0f32, 1.0, 0.5, 0.2]).unwrap(),
        Tensor::new(&[1, 2, 2], vec![1.0f32, 1.0, 0.0, 0.0]).unwrap(),
    ];
    let img = render_grid(&tiles, 2, &[true, false]).unwrap();
    assert_eq!(img.to_ppm(), read_golden("grid.ppm"));
}

#[test]
fn idx_header_of_a_full_training_file() {
    // Header of a 60000 × 28 × 28 file, with the payload left out.
    let header = encode_idx_images(&[], 60000, 28, 28);
    assert_eq!(&header[..4], &[0, 0, 8, 3]);
    assert_eq!(u32::from_be_bytes(header[4..8].try_into().unwrap()), 60000);
    match parse_idx_images(&header) {
        Err(IoError::Truncated { expected, actual }) => {
            assert_eq!(expected, 16 + 60000 * 784);
            assert_eq!(actual, 16);
        }
        other => panic!("expected truncation, got {other:?}"),
    }
    let mut full = header;
    full.resize(16 + 60000 * 784, 0);
    let (n, rows, cols, px) = parse_idx_images(&full).unwrap();
    assert_eq!((n, rows, cols, px.len()), (60000, 28, 28, 60000 * 784));
}

#[test]
fn idx_errors_are_typed() {
    let bytes = read_golden("images.idx");
    let err = parse_idx_images(&bytes[..30]).unwrap_err();
    assert!(matches!(err, IoError::Truncated { expected: 40, actual: 30 }), "{err}");
    assert_eq!(err.to_string(), "truncated data: expected 40 bytes, found 30");
    assert!(matches!(parse_idx_images(&read_golden("labels.idx")), Err(IoError::BadMagic { .. })));
    assert!(matches!(parse_idx_labels(&bytes), Err(IoError::BadMagic { .. })));
    assert!(matches!(parse_idx_labels(&[0, 0]), Err(IoError::Truncated { .. })));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.idx");
    assert!(matches!(load_idx(&missing, &missing), Err(IoError::File { .. })));
}

#[test]
fn idx_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = (dir.path().join("nested/img.idx"), dir.path().join("nested/lbl.idx"));
    let pixels: Vec<u8> = (0..5 * 28 * 28).map(|i| (i % 256) as u8).collect();
    write_idx(&img, &lbl, &pixels, &[0, 1, 2, 3, 9], 28, 28).unwrap();
    let data = load_idx(&img, &lbl).unwrap();
    assert_eq!(data.images.shape(), &[5, 1, 28, 28]);
    assert!(data.images.data().iter().zip(&pixels).all(|(&v, &p)| v == p as f32 / 255.0));
    assert!(data.images.all_within(0.0, 1.0));
}

#[test]
fn tensor_file_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = Tensor::new(&[3, 28, 28], (0..3 * 784).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.saet");
    save_tensor(&path, &t).unwrap();
    let back = load_tensor::<f32>(&path).unwrap();
    assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(back.shape(), t.shape());
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, 13 + 3 * 8 + 3 * 784 * 4);
}

#[test]
fn tensor_format_errors() {
    let good = read_golden("tensor_f32.saet");
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(decode_tensor::<f32>(&bad), Err(IoError::BadMagic { .. })));
    let mut bad = good.clone();
    bad[4] = 2;
    assert!(matches!(decode_tensor::<f32>(&bad), Err(IoError::Version { found: 2, supported: 1 })));
    assert!(matches!(decode_tensor::<f64>(&good), Err(IoError::Dtype { .. })));
    assert!(matches!(decode_tensor::<f32>(&good[..good.len() - 1]), Err(IoError::Truncated { .. })));
    let mut long = good.clone();
    long.push(0);
    assert!(matches!(decode_tensor::<f32>(&long), Err(IoError::Trailing(1))));
    assert!(matches!(decode_tensor::<f32>(&good[..3]), Err(IoError::Truncated { .. })));
}

#[test]
fn checkpoint_errors_are_typed() {
    let good = read_golden("checkpoint.saec");
    let mut bad = good.clone();
    bad[3] = b'T';
    assert!(matches!(decode_checkpoint(&bad), Err(IoError::BadMagic { .. })));
    let cut = good.len() - encode_tensor(golden_params().get("a.bias").unwrap()).len();
    assert!(matches!(decode_checkpoint(&good[..cut]), Err(IoError::MissingKey(name)) if name == "a.bias"));
    assert!(matches!(decode_checkpoint(&good[..good.len() - 2]), Err(IoError::Truncated { .. })));
}

#[test]
fn classifier_checkpoint_preserves_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = ClassifierParams::<f32>::init(ClassifierArch::compact(), &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out/net.ckpt");
    save_classifier(&path, &net).unwrap();
    let back = load_classifier(&path, None).unwrap();
    assert_eq!(back, net);
    let probe = Tensor::new(&[4, 1, 28, 28], (0..4 * 784).map(|_| rng.gen::<f32>()).collect()).unwrap();
    let (a, b) = (net.classify(&probe).unwrap(), back.classify(&probe).unwrap());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    let (manifest, _) = decode_checkpoint(&std::fs::read(&path).unwrap()).unwrap();
    let mut names: Vec<&str> = manifest.params.iter().map(|e| e.name.as_str()).collect();
    assert_eq!(names, net.params().names().collect::<Vec<_>>());
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), net.params().len());
}

#[test]
fn wrong_architecture_names_the_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("compact.ckpt");
    save_classifier(&path, &ClassifierParams::init(ClassifierArch::compact(), &mut rng).unwrap()).unwrap();
    let err = load_classifier(&path, Some(ClassifierArch::madry())).unwrap_err();
    match &err {
        IoError::Model(ModelError::ParamShape { name, .. }) => assert_eq!(name, "conv1.weight"),
        other => panic!("unexpected error {other:?}"),
    }
    assert!(err.to_string().contains("conv1.weight"), "{err}");
    let wider = ClassifierArch { hidden: 65, ..ClassifierArch::compact() };
    let err = load_classifier(&path, Some(wider)).unwrap_err();
    assert!(err.to_string().contains("fc1.weight"), "{err}");
}

#[test]
fn energy_checkpoint_round_trip() {
    let net = EnergyNetParams::<f32>::init(EnergyArch::compact(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ebm.ckpt");
    save_energy(&path, &net).unwrap();
    assert_eq!(load_energy(&path, None).unwrap(), net);
    assert_eq!(load_energy(&path, Some(EnergyArch::compact())).unwrap(), net);
    assert!(load_energy(&path, Some(EnergyArch::standard())).is_err());
    assert!(load_classifier(&path, None).is_err());
}

#[test]
fn grid_layout_and_borders() {
    let tiles: Vec<Tensor<f32>> = (0..36).map(|i| Tensor::full(&[1, 28, 28], i as f32 / 35.0)).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.ppm");
    let img = emit_grid(&tiles, 6, &[false; 36], &path).unwrap();
    let tile = 28 * GRID_SCALE + 2;
    assert_eq!((img.width, img.height), (6 * tile, 6 * tile));
    for r in 0..6 {
        for c in 0..6 {
            let (ox, oy) = (c * tile, r * tile);
            for k in 0..tile {
                for (x, y) in [(ox + k, oy), (ox + k, oy + tile - 1), (ox, oy + k), (ox + tile - 1, oy + k)] {
                    assert_eq!(img.pixel(x, y), RED);
                }
            }
            let v = ((r * 6 + c) as f32 / 35.0 * 255.0).round() as u8;
            assert_eq!(img.pixel(ox + 1, oy + 1), [v; 3]);
            assert_eq!(img.pixel(ox + tile - 2, oy + tile - 2), [v; 3]);
        }
    }
    let file = std::fs::read(&path).unwrap();
    let head = format!("P6\n{} {}\n255\n", img.width, img.height);
    assert!(file.starts_with(head.as_bytes()));
    assert_eq!(file.len(), head.len() + img.width * img.height * 3);

    let flags: Vec<bool> = (0..5).map(|i| i % 2 == 0).collect();
    let img = render_grid(&tiles[..5], 3, &flags).unwrap();
    assert_eq!((img.width, img.height), (3 * tile, 2 * tile));
    assert_eq!(img.pixel(0, 0), GREEN);
    assert_eq!(img.pixel(tile, 0), RED);
    assert_eq!(img.pixel(0, tile), RED);
    assert_eq!(img.pixel(tile, tile), GREEN);
    assert_eq!(img.pixel(2 * tile, tile), [0; 3]);
}

#[test]
fn grid_upscales_nearest_neighbour() {
    let tile = Tensor::new(&[1, 2, 2], vec![0.0f32, 1.0, 1.0, 0.0]).unwrap();
    let img = render_grid(&[tile], 1, &[true]).unwrap();
    for y in 0..2 * GRID_SCALE {
        for x in 0..2 * GRID_SCALE {
            let on = (x / GRID_SCALE + y / GRID_SCALE) % 2 == 1;
            assert_eq!(img.pixel(x + 1, y + 1), if on { [255; 3] } else { [0; 3] });
        }
    }
}

#[test]
fn grid_rejects_bad_input() {
    let t = Tensor::<f32>::zeros(&[1, 4, 4]);
    assert!(render_grid(&[], 2, &[]).is_err());
    assert!(render_grid(&[t.clone()], 0, &[true]).is_err());
    assert!(render_grid(&[t.clone()], 1, &[true, false]).is_err());
    assert!(render_grid(&[t.clone(), Tensor::zeros(&[1, 5, 5])], 2, &[true, true]).is_err());
    assert!(render_grid(&[Tensor::full(&[1, 4, 4], 2.0)], 1, &[true]).is_err());
}

#[test]
fn config_parses_partial_tables_and_rejects_unknown_keys() {
    let cfg = RunConfig::from_toml(
        "[attack]\nm = 40\nkappa = 0.25\n[attack.sampler]\nsteps = 7\n[classifier.arch]\nhidden = 32\n[ebm]\nsteps = 3\n",
    )
    .unwrap();
    assert_eq!(cfg.attack.m, 40);
    assert_eq!(cfg.attack.kappa, 0.25);
    assert_eq!(cfg.attack.sampler.steps, 7);
    assert_eq!(cfg.attack.n, RunConfig::default().attack.n);
    assert_eq!(cfg.classifier.arch, ClassifierArch { hidden: 32, ..ClassifierArch::madry() });
    assert_eq!(cfg.ebm.steps, 3);
    assert_eq!(cfg.ebm.arch, EnergyArch::standard());
    for bad in ["[attack]\nmm = 1\n", "[nonsense]\n", "top = 1\n", "[attack.sampler]\nstep = 1\n", "[attack]\nm = \"x\"\n"] {
        assert!(matches!(RunConfig::from_toml(bad), Err(IoError::Config(_))), "{bad}");
    }
    assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
}

#[test]
fn config_file_loading() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    let mut cfg = RunConfig::default();
    cfg.data.synthetic_train = 123;
    cfg.family = cfg.family.with_tps_sigma(1.25);
    std::fs::write(&path, cfg.to_toml()).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    assert!(matches!(RunConfig::load(&dir.path().join("missing.toml")), Err(IoError::File { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensors_round_trip_bitwise(shape in proptest::collection::vec(0usize..5, 0..4), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t32 = Tensor::new(&shape, (0..n).map(|_| f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff)).collect()).unwrap();
        let back = decode_tensor::<f32>(&encode_tensor(&t32)).unwrap();
        prop_assert_eq!(back.shape(), t32.shape());
        prop_assert!(back.data().iter().zip(t32.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let t64 = Tensor::new(&shape, (0..n).map(|_| rng.gen::<f64>() * 1e6 - 5e5).collect()).unwrap();
        prop_assert_eq!(decode_tensor::<f64>(&encode_tensor(&t64)).unwrap(), t64);
    }

    #[test]
    fn config_round_trip_is_a_fixed_point(
        m in 1usize..5000,
        kappa in 0.01f64..=1.0,
        c1 in 0.0f64..10.0,
        steps in 0usize..10_000,
        sigma in 0.0f64..4.0,
        seed in any::<u32>(),
        lr in 1e-6f64..1e-1,
    ) {
        let mut cfg = RunConfig::default();
        cfg.attack.m = m;
        cfg.attack.n = m.min(100);
        cfg.attack.kappa = kappa;
        cfg.attack.energy.c1 = c1;
        cfg.ebm.steps = steps;
        cfg.ebm.seed = seed as u64;
        cfg.classifier.train.lr = lr;
        cfg.family = cfg.family.with_tps_sigma(sigma);
        let text = cfg.to_toml();
        let parsed = RunConfig::from_toml(&text).unwrap();
        prop_assert_eq!(&parsed, &cfg);
        prop_assert_eq!(parsed.to_toml(), text);
    }
}
