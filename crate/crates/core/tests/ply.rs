use n3f::apps::{export_ply, write_ply, CloudPoint, PointCloud};
use ply_rs::parser::Parser;
use ply_rs::ply::{DefaultElement, Property};

fn parse(bytes: &[u8]) -> ply_rs::ply::Ply<DefaultElement> {
    Parser::<DefaultElement>::new().read_ply(&mut std::io::Cursor::new(bytes)).unwrap()
}

fn float(e: &DefaultElement, key: &str) -> f32 {
    match e[key] {
        Property::Float(v) => v,
        ref other => panic!("{key}: {other:?}"),
    }
}

fn uchar(e: &DefaultElement, key: &str) -> u8 {
    match e[key] {
        Property::UChar(v) => v,
        ref other => panic!("{key}: {other:?}"),
    }
}

#[test]
fn empty_cloud_is_a_valid_file() {
    let mut buf = Vec::new();
    write_ply(&PointCloud::default(), &mut buf).unwrap();
    let ply = parse(&buf);
    assert_eq!(ply.header.elements["vertex"].count, 0);
    assert!(ply.payload.get("vertex").is_none_or(|v| v.is_empty()));
}

#[test]
fn single_point_roundtrip() {
    let point = CloudPoint { position: [0.25, -1.5, 3.125], rgb: [1.0, 0.0, 0.5], density: 42.5 };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.ply");
    export_ply(&PointCloud { points: vec![point] }, &path).unwrap();
    let ply = parse(&std::fs::read(&path).unwrap());
    let v = &ply.payload["vertex"];
    assert_eq!(v.len(), 1);
    assert_eq!([float(&v[0], "x"), float(&v[0], "y"), float(&v[0], "z")], [0.25, -1.5, 3.125]);
    assert_eq!([uchar(&v[0], "red"), uchar(&v[0], "green"), uchar(&v[0], "blue")], [255, 0, 128]);
    assert_eq!(float(&v[0], "density"), 42.5);
}

#[test]
fn header_count_matches_body_lines() {
    let points: Vec<CloudPoint> = (0..17)
        .map(|i| CloudPoint { position: [i as f64 * 0.1, 0.0, -0.3], rgb: [0.2, 0.4, 0.6], density: i as f64 })
        .collect();
    let mut buf = Vec::new();
    write_ply(&PointCloud { points }, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    let (header, body) = text.split_once("end_header\n").unwrap();
    assert!(header.contains("element vertex 17\n"));
    assert_eq!(body.lines().count(), 17);
    assert_eq!(parse(&buf).payload["vertex"].len(), 17);
}
