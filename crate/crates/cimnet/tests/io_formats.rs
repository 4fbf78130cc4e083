use cimnet::checkpoint::{checkpoint_container, checkpoint_from_container, load_checkpoint, save_checkpoint, CONFIG_ENTRY};
use cimnet::config::{load_model, parse_model_config, ModelConfig};
use cimnet::container::{ContainerError, Payload, TensorContainer};
use cimnet::image::{decode_pnm, encode_pnm, read_pnm, write_pnm};
use cimnet::presets::shipped_presets;
use cimnet_core::cimconv::Ratio;
use cimnet_core::model::graph_forward;
use cimnet_core::rng::{seeded_normal, seeded_uniform};
use cimnet_core::zoo::{Preset, ZooConfig};
use cimnet_core::{Rng, Tensor};

fn presets_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("presets")
}

#[test]
fn pnm_round_trip_within_one_step() {
    let dir = tempfile::tempdir().unwrap();
    let x: Tensor<f32> = seeded_uniform(&mut Rng::new(1, "img"), &[1, 3, 17, 23], 0.0, 1.0);
    let p = dir.path().join("x.ppm");
    write_pnm(&x, &p).unwrap();
    let y = read_pnm(&p).unwrap();
    assert_eq!(y.shape(), x.shape());
    for (a, b) in x.data().iter().zip(y.data()) {
        assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7);
    }
    let g: Tensor<f32> = seeded_uniform(&mut Rng::new(2, "img"), &[1, 1, 5, 4], 0.0, 1.0);
    let bytes = encode_pnm(&g).unwrap();
    assert!(bytes.starts_with(b"P5\n4 5\n255\n"));
    assert_eq!(decode_pnm(&bytes).unwrap().shape(), &[1, 1, 5, 4]);
}

#[test]
fn pnm_errors_are_reported_not_panics() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.ppm");
    std::fs::write(&p, b"P6 4 4 255\nabc").unwrap();
    let e = read_pnm(&p).unwrap_err().to_string();
    assert!(e.contains("truncated"), "{e}");
    assert!(read_pnm(dir.path().join("missing.ppm")).is_err());
}

#[test]
fn container_round_trips_bit_exactly() {
    assert_eq!(TensorContainer::from_bytes(&TensorContainer::new().to_bytes().unwrap()).unwrap().len(), 0);
    let mut c = TensorContainer::new();
    let a: Tensor<f64> = seeded_normal(&mut Rng::new(3, "c"), &[2, 3, 4], 0.0, 1e10);
    let b = Tensor::from_vec(&[3], vec![f32::MIN_POSITIVE, -0.0, 1.5]).unwrap();
    c.insert("a", Payload::F64(a.clone())).unwrap();
    c.insert("b", Payload::F32(b.clone())).unwrap();
    c.insert("raw", Payload::Raw(b"{\"x\":1}".to_vec())).unwrap();
    c.insert("s", Payload::F32(Tensor::scalar(2.0))).unwrap();
    let bytes = c.to_bytes().unwrap();
    let d = TensorContainer::from_bytes(&bytes).unwrap();
    assert_eq!(d, c);
    assert_eq!(d.to_bytes().unwrap(), bytes);
    match d.get("a").unwrap() {
        Payload::F64(t) => assert!(t.data().iter().zip(a.data()).all(|(x, y)| x.to_bits() == y.to_bits())),
        _ => panic!(),
    }
    match d.get("b").unwrap() {
        Payload::F32(t) => assert_eq!(t.data()[1].to_bits(), (-0.0f32).to_bits()),
        _ => panic!(),
    }
}

#[test]
fn container_header_layout() {
    let mut c = TensorContainer::new();
    c.insert("w", Payload::F32(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap())).unwrap();
    let b = c.to_bytes().unwrap();
    let mut want = b"CIMT".to_vec();
    want.extend([1, 0, 0, 0, 1, 0, 0, 0]);
    want.extend([1, 0, b'w', 0, 1, 2, 0, 0, 0]);
    want.extend(1.0f32.to_le_bytes());
    want.extend(2.0f32.to_le_bytes());
    assert_eq!(b, want);
}

#[test]
fn container_errors_are_distinct() {
    let mut c = TensorContainer::new();
    c.insert("x", Payload::F32(Tensor::zeros(&[2, 2]))).unwrap();
    assert_eq!(c.insert("x", Payload::Raw(vec![])), Err(ContainerError::DuplicateName("x".into())));
    let good = c.to_bytes().unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(TensorContainer::from_bytes(&bad), Err(ContainerError::BadMagic(_))));

    let mut bad = good.clone();
    bad[4] = 2;
    assert_eq!(TensorContainer::from_bytes(&bad), Err(ContainerError::Version(2)));

    let bad = &good[..good.len() - 3];
    assert!(matches!(TensorContainer::from_bytes(bad), Err(ContainerError::Length { .. })));

    let mut bad = good.clone();
    bad.push(0);
    assert_eq!(TensorContainer::from_bytes(&bad), Err(ContainerError::Trailing(1)));

    // Two entries with the same name.
    let mut twice = good[..8].to_vec();
    twice.extend(2u32.to_le_bytes());
    let entry = &good[12..];
    twice.extend_from_slice(entry);
    twice.extend_from_slice(entry);
    assert_eq!(TensorContainer::from_bytes(&twice), Err(ContainerError::DuplicateName("x".into())));

    assert!(matches!(TensorContainer::from_bytes(b"CIM"), Err(ContainerError::Truncated(_))));
}

#[test]
fn checkpoint_forward_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let g = Preset::CimNet.build(2, 16, 16, &ZooConfig::with_widths([4, 8, 8])).unwrap();
    let p = g.init_params::<f32>(7);
    let path = dir.path().join("m.cimt");
    save_checkpoint(&path, &g, &p).unwrap();
    let (g2, p2) = load_checkpoint(&path).unwrap();
    assert_eq!(g2.layers(), g.layers());
    assert_eq!(p2, p);
    let x: Tensor<f32> = seeded_uniform(&mut Rng::new(0, "x"), &[1, 3, 16, 16], 0.0, 1.0);
    let a = graph_forward(&g, &p, &x).unwrap();
    let b = graph_forward(&g2, &p2, &x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    let c = checkpoint_container(&g, &p).unwrap();
    assert!(c.raw(CONFIG_ENTRY).is_ok());
    assert!(c.f32("layer0.weight").is_ok());
    let mut missing = TensorContainer::new();
    for (name, payload) in c.entries().filter(|(n, _)| *n != "layer0.bias") {
        missing.insert(name, payload.clone()).unwrap();
    }
    assert!(checkpoint_from_container(&missing).unwrap_err().to_string().contains("layer0.bias"));
}

#[test]
fn shipped_presets_match_the_zoo() {
    let shipped = shipped_presets().unwrap();
    assert_eq!(std::fs::read_dir(presets_dir()).unwrap().count(), shipped.len());
    for (name, cfg) in shipped {
        let path = presets_dir().join(format!("{name}.json"));
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(parse_model_config(&text).unwrap(), cfg, "{name}");
        let g = load_model(&path).unwrap();
        assert_eq!(g.output_shape()[0], 3);
    }
}

#[test]
fn cimnet_s8_preset_builds() {
    let g = load_model(presets_dir().join("cimnet-v1-s8.json")).unwrap();
    assert_eq!(g.name(), "cimnet-v1-s8");
    assert_eq!(g.cimconv_spec(1).unwrap().f_scale, Ratio::HALF);
    let round = parse_model_config(&ModelConfig::from_graph(&g).to_json()).unwrap().build().unwrap();
    assert_eq!(round.layers(), g.layers());
    assert!(g.resized(100, 100).unwrap_err().to_string().contains("layer 0 (cimconv)"));
}
