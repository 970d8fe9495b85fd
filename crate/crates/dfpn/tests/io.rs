use std::fs;

use dfpn::checkpoint::{decode, encode, Checkpoint};
use dfpn::frames::{decode_pnm, encode_pgm, frame_name, load_sequence, sequence_dirs, write_synthetic, GrayImage, SyntheticFamily};
use dfpn::Error;
use dfpn_core::data::Pattern;
use dfpn_core::model::{init_parameters, ModelConfig};
use std::path::Path;

fn ppm(w: usize, h: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

#[test]
fn pgm_round_trip_and_header() {
    let img = GrayImage {
        h: 3,
        w: 5,
        data: (0..15).map(|i| (i * 17) as u8).collect(),
    };
    let bytes = encode_pgm(&img);
    assert!(bytes.starts_with(b"P5"));
    assert_eq!(&bytes[bytes.len() - 15..], &img.data[..]);
    assert_eq!(decode_pnm(&bytes, Path::new("x.pgm")).unwrap(), img);
}

#[test]
fn ppm_becomes_luma() {
    let bytes = ppm(2, 1, &[255, 0, 0, 10, 200, 30]);
    let img = decode_pnm(&bytes, Path::new("x.ppm")).unwrap();
    let want = |r: f64, g: f64, b: f64| (0.299 * r + 0.587 * g + 0.114 * b).round() as u8;
    assert_eq!(img.data, vec![want(255.0, 0.0, 0.0), want(10.0, 200.0, 30.0)]);
}

#[test]
fn garbage_is_a_format_error_naming_the_file() {
    let err = decode_pnm(b"hello", Path::new("bad.pgm")).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert!(err.to_string().contains("bad.pgm"));
}

#[test]
fn mixed_frame_sizes_name_the_offending_file() {
    let dir = tempfile::tempdir().unwrap();
    let small = GrayImage { h: 2, w: 2, data: vec![0; 4] };
    let big = GrayImage { h: 3, w: 2, data: vec![0; 6] };
    fs::write(dir.path().join(frame_name(0)), encode_pgm(&small)).unwrap();
    fs::write(dir.path().join(frame_name(1)), encode_pgm(&small)).unwrap();
    fs::write(dir.path().join(frame_name(2)), encode_pgm(&big)).unwrap();
    let err = load_sequence::<f32>(dir.path()).unwrap_err();
    assert!(err.to_string().contains(&frame_name(2)), "{err}");
}

#[test]
fn frames_load_in_name_order_scaled_to_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    for (i, v) in [(2, 255u8), (0, 0), (1, 51)] {
        let img = GrayImage { h: 1, w: 2, data: vec![v; 2] };
        fs::write(dir.path().join(frame_name(i)), encode_pgm(&img)).unwrap();
    }
    fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let seq = load_sequence::<f64>(dir.path()).unwrap();
    assert_eq!(seq.len(), 3);
    assert_eq!(seq.frame(0), &[0.0, 0.0]);
    assert_eq!(seq.frame(1), &[0.2, 0.2]);
    assert_eq!(seq.frame(2), &[1.0, 1.0]);
}

#[test]
fn empty_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_sequence::<f32>(dir.path()).is_err());
    assert!(sequence_dirs(dir.path()).is_err());
}

#[test]
fn synthetic_corpus_on_disk_matches_generator() {
    let dir = tempfile::tempdir().unwrap();
    let family = SyntheticFamily::parse("pattern=mixed,vy=1,vx=-2,frames=6,size=12x10,seed=3,count=3").unwrap();
    assert_eq!(family.velocity, (1.0, -2.0));
    assert_eq!((family.width, family.height), (12, 10));
    let dirs = write_synthetic(dir.path(), &family).unwrap();
    assert_eq!(dirs.len(), 3);
    assert_eq!(sequence_dirs(dir.path()).unwrap(), dirs);
    let generated = family.generate::<f64>().unwrap();
    for (d, g) in dirs.iter().zip(&generated) {
        let loaded = load_sequence::<f64>(d).unwrap();
        assert_eq!((loaded.height(), loaded.width(), loaded.len()), (10, 12, 6));
        for t in 0..6 {
            for (a, b) in loaded.frame(t).iter().zip(g.frame(t)) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        let spec = fs::read_to_string(d.join("spec.txt")).unwrap();
        assert!(spec.contains("velocity_x = -2"));
    }
    assert_eq!(family.specs()[1].pattern, Pattern::ALL[1]);
    assert!(SyntheticFamily::parse("speed=3").is_err());
}

#[test]
fn checkpoint_rejects_truncation_and_bad_magic() {
    let cfg = ModelConfig::tiny();
    let ck = Checkpoint {
        cfg,
        params: init_parameters(&cfg, 0).unwrap(),
        state: None,
    };
    let bytes = encode(&ck);
    assert_eq!(&bytes[..4], b"DFPN");
    assert_eq!(decode(&bytes, Path::new("a"), Some(&cfg)).unwrap(), ck);
    assert!(decode(&bytes[..bytes.len() - 9], Path::new("a"), None).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad, Path::new("a"), None), Err(Error::Format { .. })));
}
