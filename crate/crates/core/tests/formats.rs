use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use nq_core::bpw::builtin_shapes;
use nq_core::formats::{
    parse_shape_config, read_nqmx, read_nqpk, write_nqmx, write_nqpk, write_shape_config, PackedModel,
};
use nq_core::packing::FactorizedLayer;
use nq_core::{DenseMatrix, Error};

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut *rng))
}

fn random_model(rng: &mut ChaCha8Rng, layers: usize) -> PackedModel {
    let layers = (0..layers)
        .map(|k| {
            let (n, m) = (rng.random_range(1..70), rng.random_range(1..70));
            let r = rng.random_range(1..=n.min(m));
            // scales already on the binary16 grid so the round trip is exact
            let mut scale = |len| -> Vec<f64> {
                (0..len)
                    .map(|_| f16::from_f64(rng.random_range(1e-3..50.0)).to_f64())
                    .collect()
            };
            let (s1, s2) = (scale(n), scale(m));
            let layer = FactorizedLayer::from_latents(&gaussian(n, r, rng), &gaussian(m, r, rng), s1, s2).unwrap();
            (format!("block.{k}.proj"), layer)
        })
        .collect();
    PackedModel { layers }
}

#[test]
fn packed_model_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for count in 0..6 {
        let model = random_model(&mut rng, count);
        let bytes = write_nqpk(&model).unwrap();
        let back = read_nqpk(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(write_nqpk(&back).unwrap(), bytes);
    }
}

#[test]
fn packed_model_size_is_header_plus_payload() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = random_model(&mut rng, 3);
    let bytes = write_nqpk(&model).unwrap();
    let mut want = 12;
    for (name, l) in &model.layers {
        want += 4 + name.len() + 12 + 4 * (l.n() + l.m()) * l.rank().div_ceil(32) + 2 * (l.n() + l.m());
    }
    assert_eq!(bytes.len(), want);
}

#[test]
fn every_truncation_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bytes = write_nqpk(&random_model(&mut rng, 2)).unwrap();
    for len in 0..bytes.len() {
        assert!(read_nqpk(&bytes[..len]).is_err(), "prefix of {len} bytes accepted");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(read_nqpk(&extra).is_err());
}

#[test]
fn random_byte_flips_never_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bytes = write_nqpk(&random_model(&mut rng, 2)).unwrap();
    for _ in 0..2000 {
        let mut b = bytes.clone();
        for _ in 0..rng.random_range(1..4) {
            let i = rng.random_range(0..b.len());
            b[i] ^= 1 << rng.random_range(0..8);
        }
        if let Ok(model) = read_nqpk(&b) {
            // anything accepted must re-serialize to the same bytes
            assert_eq!(write_nqpk(&model).unwrap(), b);
        }
    }
}

#[test]
fn header_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bytes = write_nqpk(&random_model(&mut rng, 1)).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(read_nqpk(&bad_magic), Err(Error::Format(_))));
    let mut bad_version = bytes.clone();
    bad_version[4] = 2;
    assert!(matches!(read_nqpk(&bad_version), Err(Error::Format(_))));
    // a matrix file is not a model file
    let nqmx = write_nqmx(&DenseMatrix::identity(2)).unwrap();
    assert!(read_nqpk(&nqmx).is_err());
    assert!(read_nqmx(&bytes).is_err());
}

#[test]
fn zero_scale_rejected() {
    let layer = FactorizedLayer::from_latents(
        &DenseMatrix::identity(1),
        &DenseMatrix::identity(1),
        vec![1.0],
        vec![1.0],
    )
    .unwrap();
    let mut bytes = write_nqpk(&PackedModel { layers: vec![("a".into(), layer)] }).unwrap();
    let len = bytes.len();
    bytes[len - 2..].copy_from_slice(&f16::ZERO.to_bits().to_le_bytes());
    assert!(read_nqpk(&bytes).is_err());
    bytes[len - 2..].copy_from_slice(&f16::NAN.to_bits().to_le_bytes());
    assert!(read_nqpk(&bytes).is_err());
}

#[test]
fn set_padding_bits_rejected() {
    let layer = FactorizedLayer::from_latents(
        &DenseMatrix::from_rows(&[vec![1.0, -1.0]]).unwrap(),
        &DenseMatrix::from_rows(&[vec![-1.0, 1.0]]).unwrap(),
        vec![1.0],
        vec![1.0],
    )
    .unwrap();
    let bytes = write_nqpk(&PackedModel { layers: vec![("p".into(), layer)] }).unwrap();
    // header 12, name 4+1, dims 12, then U's single word
    let word_at = 12 + 5 + 12;
    let mut b = bytes.clone();
    b[word_at + 3] |= 0x80;
    assert!(read_nqpk(&b).is_err());
}

#[test]
fn tiny_scales_survive_as_subnormals() {
    let layer = FactorizedLayer::from_latents(
        &DenseMatrix::identity(1),
        &DenseMatrix::identity(1),
        vec![1e-12],
        vec![3.0],
    )
    .unwrap();
    let model = PackedModel { layers: vec![("t".into(), layer)] };
    let back = read_nqpk(&write_nqpk(&model).unwrap()).unwrap();
    assert!(back.layers[0].1.s1[0] > 0.0);
    let huge = FactorizedLayer::from_latents(
        &DenseMatrix::identity(1),
        &DenseMatrix::identity(1),
        vec![1e6],
        vec![1.0],
    )
    .unwrap();
    assert!(write_nqpk(&PackedModel { layers: vec![("h".into(), huge)] }).is_err());
}

#[test]
fn matrix_round_trip_is_f32_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let (r, c) = (rng.random_range(1..30), rng.random_range(1..30));
        let m = gaussian(r, c, &mut rng).map(|v| v as f32 as f64);
        let bytes = write_nqmx(&m).unwrap();
        assert_eq!(bytes.len(), 16 + 4 * r * c);
        assert_eq!(read_nqmx(&bytes).unwrap(), m);
    }
    assert!(matches!(
        write_nqmx(&DenseMatrix::from_rows(&[vec![1e300]]).unwrap()),
        Err(Error::NonFiniteInput)
    ));
}

#[test]
fn shipped_shapes_round_trip_through_text() {
    let shapes = builtin_shapes();
    assert_eq!(shapes.len(), 17);
    for (label, _, shape) in shapes {
        assert_eq!(shape.layers.len(), 7, "{label}");
        assert_eq!(parse_shape_config(&write_shape_config(&shape)).unwrap(), shape);
    }
}

#[test]
fn shape_config_errors_carry_line_numbers() {
    let err = parse_shape_config("# header\nq 4 4 2\nk 4 x 2\n").unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
    assert!(parse_shape_config("residual 5\nresidual 6\nq 1 1 1\n").is_err());
    assert!(parse_shape_config("q 0 4 1\n").is_err());
    assert!(parse_shape_config("# nothing\n").is_err());
    let ok = parse_shape_config("q 8 4 2 # trailing comment\n\nresidual 12\n").unwrap();
    assert_eq!(ok.residual_fp16_params, 12);
    assert_eq!(ok.quantized_params(), 64);
}
