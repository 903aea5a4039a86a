use std::path::Path;
use std::time::Duration;

use pollen::config::{Backend, CliConfig, KEYS};
use pollen::Error;
use pollen_core::detect::DetectParams;

fn parse(text: &str) -> pollen::Result<CliConfig> {
    CliConfig::parse(text, Path::new("run.conf"))
}

#[test]
fn documented_keys_parse() {
    let c = parse(
        "# comment\n\
         detect.k = 0.25\n\
         detect.min_area=500\n\
         embed.backend = external\n\
         embed.endpoint = tcp://127.0.0.1:9000\n\
         embed.timeout = 2.5\n\
         calib.preset = res-0.15\n\
         seed = 7\n",
    )
    .unwrap();
    assert_eq!(c.detect_k, Some(0.25));
    assert_eq!(c.embed_backend, Some(Backend::External));
    assert_eq!(c.embed_timeout, Some(Duration::from_millis(2500)));
    assert_eq!(c.seed, Some(7));
    let mut p = DetectParams::default();
    c.apply_detect(&mut p);
    assert_eq!((p.k, p.min_area, p.t_max), (0.25, 500.0, 0.5));
    assert_eq!(KEYS.len(), 14);
}

#[test]
fn unknown_keys_are_named() {
    match parse("seed = 1\ndetect.kk = 3\n") {
        Err(Error::Config(m)) => assert!(m.contains("detect.kk") && m.contains(":2:"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn bad_values_point_at_the_value() {
    match parse("  detect.k =  abc\n") {
        Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (1, 15)),
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse("embed.backend = gpu\n"), Err(Error::Parse { .. })));
    assert!(matches!(parse("just words\n"), Err(Error::Parse { line: 1, column: 1, .. })));
}
