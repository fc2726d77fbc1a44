use cinevol::classify::{
    load_preset_csv, preset, save_preset_csv, ControlPoint, TransferFunction, PRESET_NAMES,
};
use cinevol::imageio::{decode_pfm, encode_pfm, HdrImage};
use cinevol::volume::{
    load_dicom_series, load_nrrd, load_raw, make_phantom, parse_nrrd, save_nrrd, write_dicom_slice,
    DicomSlice, PhantomKind, RawDtype, VoxelGrid,
};
use cinevol::{DVec3, Error};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;

fn write_series(dir: &std::path::Path, slices: &[DicomSlice], names: &[String]) {
    for (s, name) in slices.iter().zip(names) {
        std::fs::write(dir.join(name), write_dicom_slice(s)).unwrap();
    }
}

fn ct_slices(n: usize, dz: f64) -> Vec<DicomSlice> {
    (0..n)
        .map(|k| {
            let pixels = (0..16).map(|p| (p * 10 + k * 100) as i32 - 500).collect();
            DicomSlice::ct(
                4,
                4,
                [0.273, 0.273],
                DVec3::new(-1.0, 2.0, k as f64 * dz),
                pixels,
            )
        })
        .collect()
}

#[test]
fn dicom_series_with_cardiac_ct_spacing() {
    let dir = tempfile::tempdir().unwrap();
    let slices = ct_slices(2, 0.625);
    write_series(dir.path(), &slices, &["a.dcm".into(), "b.dcm".into()]);
    let g = load_dicom_series(dir.path()).unwrap();
    assert_eq!(g.dims(), [4, 4, 2]);
    assert!(
        (g.spacing() - DVec3::new(0.273, 0.273, 0.625))
            .abs()
            .max_element()
            < 1e-12
    );
    assert_eq!(g.get(1, 0, 1), (10 + 100 - 500) as f32);
}

#[test]
fn dicom_file_order_does_not_matter() {
    let slices = ct_slices(7, 0.625);
    let reference = {
        let dir = tempfile::tempdir().unwrap();
        let names: Vec<String> = (0..7).map(|i| format!("s{i:02}.dcm")).collect();
        write_series(dir.path(), &slices, &names);
        load_dicom_series(dir.path()).unwrap()
    };
    let mut rng = Pcg32::seed_from_u64(21);
    for _ in 0..5 {
        let mut names: Vec<String> = (0..7).map(|i| format!("s{i:02}.dcm")).collect();
        names.shuffle(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        write_series(dir.path(), &slices, &names);
        assert_eq!(load_dicom_series(dir.path()).unwrap(), reference);
    }
}

#[test]
fn dicom_rescale_and_clamp() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = DicomSlice::ct(2, 2, [1.0, 1.0], DVec3::ZERO, vec![700, 0, 5000, -3000]);
    s.rescale_slope = Some(2.0);
    s.rescale_intercept = Some(-1000.0);
    write_series(dir.path(), &[s], &["x.dcm".into()]);
    let g = load_dicom_series(dir.path()).unwrap();
    assert_eq!(g.values(), &[400.0, -1000.0, 4095.0, -1024.0]);
}

#[test]
fn dicom_malformed_inputs() {
    let cases: Vec<(&str, Box<dyn Fn(&mut Vec<DicomSlice>)>, fn(&Error) -> bool)> = vec![
        ("missing rows", Box::new(|s| s[1].rows = None), |e| {
            matches!(e, Error::MissingTag { .. })
        }),
        (
            "missing position",
            Box::new(|s| s[0].image_position = None),
            |e| matches!(e, Error::MissingTag { .. }),
        ),
        ("missing pixels", Box::new(|s| s[0].pixels = None), |e| {
            matches!(e, Error::MissingTag { .. })
        }),
        (
            "mixed dimensions",
            Box::new(|s| {
                s[1].rows = Some(2);
                s[1].pixels = Some(vec![0; 8]);
            }),
            |e| matches!(e, Error::Ingest(_)),
        ),
        (
            "compressed",
            Box::new(|s| s[0].transfer_syntax = "1.2.840.10008.1.2.4.50".into()),
            |e| matches!(e, Error::UnsupportedFormat(_)),
        ),
    ];
    for (name, mutate, expected) in cases {
        let mut slices = ct_slices(2, 1.0);
        mutate(&mut slices);
        let dir = tempfile::tempdir().unwrap();
        write_series(dir.path(), &slices, &["0.dcm".into(), "1.dcm".into()]);
        let err = load_dicom_series(dir.path()).unwrap_err();
        assert!(expected(&err), "{name}: {err}");
    }
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_dicom_series(empty.path()),
        Err(Error::Ingest(_))
    ));
}

#[test]
fn nrrd_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [PhantomKind::SphereShell, PhantomKind::Noise(5)] {
        let g = make_phantom(kind, [64; 3]).unwrap();
        let path = dir.path().join("p.nrrd");
        save_nrrd(&g, &path).unwrap();
        let back = load_nrrd(&path).unwrap();
        assert_eq!(back.dims(), g.dims());
        assert_eq!(back.spacing(), g.spacing());
        assert_eq!(back.origin(), g.origin());
        assert!(back
            .values()
            .iter()
            .zip(g.values())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn nrrd_header_fields() {
    let mut bytes = b"NRRD0004\ntype: float\ndimension: 3\nsizes: 1 1 1\nspace directions: (0.5,0,0) (0,0.5,0) (0,0,1.0)\nendian: big\nencoding: raw\n\n".to_vec();
    bytes.extend_from_slice(&100.0f32.to_be_bytes());
    let g = parse_nrrd(&bytes, std::path::Path::new(".")).unwrap();
    assert_eq!(g.dims(), [1, 1, 1]);
    assert_eq!(g.spacing(), DVec3::new(0.5, 0.5, 1.0));
    assert_eq!(g.values(), &[100.0]);
}

#[test]
fn nrrd_malformed_inputs() {
    let gz = b"NRRD0004\ntype: float\ndimension: 3\nsizes: 1 1 1\nencoding: gzip\n\n\0\0\0\0";
    assert!(matches!(
        parse_nrrd(gz, std::path::Path::new(".")),
        Err(Error::UnsupportedFormat(_))
    ));
    let two_d = b"NRRD0004\ntype: float\ndimension: 2\nsizes: 1 1\nencoding: raw\n\n\0\0\0\0";
    assert!(matches!(
        parse_nrrd(two_d, std::path::Path::new(".")),
        Err(Error::Ingest(_))
    ));
    let short = b"NRRD0004\ntype: float\ndimension: 3\nsizes: 2 2 2\nencoding: raw\n\n\0\0\0\0";
    assert!(parse_nrrd(short, std::path::Path::new(".")).is_err());
}

#[test]
fn raw_volume_honors_byte_order() {
    let dir = tempfile::tempdir().unwrap();
    let vals: Vec<i16> = vec![-1000, 0, 40, 300, 1200, -5, 7, 4000];
    let path = dir.path().join("v.raw");
    std::fs::write(
        &path,
        vals.iter()
            .flat_map(|v| v.to_be_bytes())
            .collect::<Vec<u8>>(),
    )
    .unwrap();
    let g = load_raw(
        &path,
        [2, 2, 2],
        DVec3::new(0.5, 0.5, 2.0),
        RawDtype::I16,
        true,
    )
    .unwrap();
    assert_eq!(
        g.values(),
        vals.iter()
            .map(|&v| f32::from(v))
            .collect::<Vec<_>>()
            .as_slice()
    );
    assert!(matches!(
        load_raw(&path, [4, 4, 4], DVec3::ONE, RawDtype::I16, true),
        Err(Error::Ingest(_))
    ));
}

#[test]
fn tfcsv_round_trips() {
    let tf = TransferFunction::with_default_window(vec![
        ControlPoint::new(-1000.0, 0.0, 0.0, 0.0, 0.0),
        ControlPoint::new(400.0, 1.0, 0.8, 0.7, 0.9),
    ])
    .unwrap();
    let csv = save_preset_csv(&tf);
    let data_rows = String::from_utf8(csv.clone())
        .unwrap()
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .count();
    assert_eq!(data_rows, 2);
    assert_eq!(load_preset_csv(&csv).unwrap(), tf);
    for name in PRESET_NAMES {
        let p = preset(name).unwrap();
        assert_eq!(load_preset_csv(&save_preset_csv(&p)).unwrap(), p);
    }
}

#[test]
fn random_presets_survive_two_cycles() {
    let mut rng = Pcg32::seed_from_u64(31);
    for _ in 0..10 {
        let n = rng.random_range(2..9);
        let mut values: Vec<f64> = (0..n).map(|_| rng.random_range(-1024.0..3000.0)).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        let points = values
            .into_iter()
            .map(|v| ControlPoint::new(v, rng.random(), rng.random(), rng.random(), rng.random()))
            .collect();
        let tf = TransferFunction::new(
            points,
            rng.random_range(-500.0..500.0),
            rng.random_range(1.0..3000.0),
        )
        .unwrap();
        let once = load_preset_csv(&save_preset_csv(&tf)).unwrap();
        let twice = load_preset_csv(&save_preset_csv(&once)).unwrap();
        assert_eq!(once, tf);
        assert_eq!(twice, tf);
    }
}

#[test]
fn tfcsv_malformed_inputs() {
    let row = load_preset_csv(b"value,r,g,b,a\nabc,1,0,0,1\n");
    assert!(
        matches!(row, Err(Error::PresetParse { line: 2, .. })),
        "{row:?}"
    );
    let cols = load_preset_csv(b"value,r,g,b,a\n0,0,0,0,0\n1,1,1\n");
    assert!(matches!(cols, Err(Error::PresetParse { line: 3, .. })));
    let header = load_preset_csv(b"v,r,g,b\n0,0,0,0,0\n");
    assert!(matches!(header, Err(Error::PresetParse { line: 1, .. })));
    let width = load_preset_csv(b"value,r,g,b,a\n0,0,0,0,0\n1,1,1,1,1\n#level,0\n#width,0\n");
    assert!(matches!(width, Err(Error::InvalidTransferFunction(_))));
    let unsorted = load_preset_csv(b"value,r,g,b,a\n5,0,0,0,0\n1,1,1,1,1\n");
    assert!(matches!(unsorted, Err(Error::InvalidTransferFunction(_))));
}

#[test]
fn pfm_round_trip() {
    let mut rng = Pcg32::seed_from_u64(41);
    let img = HdrImage::from_fn(7, 5, |_, _| {
        DVec3::new(rng.random(), rng.random_range(0.0..50.0), 1e-3)
    });
    assert_eq!(decode_pfm(&encode_pfm(&img)).unwrap(), img);
}

#[test]
fn phantom_grids_are_deterministic() {
    let a: VoxelGrid = make_phantom(PhantomKind::TwoChamber, [24; 3]).unwrap();
    assert_eq!(a, make_phantom(PhantomKind::TwoChamber, [24; 3]).unwrap());
}
