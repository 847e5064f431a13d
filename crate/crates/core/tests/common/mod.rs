#![allow(dead_code)]

use std::io::Write;
use std::path::Path;
use std::process::{Command, Output};

use atlasrefine::{GridGeometry, LabelVolume};
use rand::Rng;

/// Print a line straight to stdout so it shows even when the harness
/// captures test output.
pub fn report_line(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

/// Print the verdict line of one acceptance criterion.
pub fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    report_line(&format!("criterion {id} [{name}]: {tag} | {detail}"));
}

pub fn unit_geom(dims: [usize; 3]) -> GridGeometry {
    GridGeometry::unit(dims).unwrap()
}

/// Random label volume with K = 2: a few boxes and balls plus sparse speckle.
pub fn random_labels(rng: &mut impl Rng, geom: GridGeometry) -> LabelVolume {
    let [nx, ny, nz] = geom.dims();
    let mut data = vec![0u8; geom.len()];
    let shapes = rng.random_range(1..=4);
    for _ in 0..shapes {
        let label = rng.random_range(1..=2u8);
        let c = [
            rng.random_range(0.0..nx as f64),
            rng.random_range(0.0..ny as f64),
            rng.random_range(0.0..nz as f64),
        ];
        let r = [
            rng.random_range(1.0..(nx as f64 / 2.0).max(1.5)),
            rng.random_range(1.0..(ny as f64 / 2.0).max(1.5)),
            rng.random_range(1.0..(nz as f64 / 2.0).max(1.5)),
        ];
        let ball = rng.random_bool(0.5);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let d = [
                        (x as f64 - c[0]) / r[0],
                        (y as f64 - c[1]) / r[1],
                        (z as f64 - c[2]) / r[2],
                    ];
                    let inside = if ball {
                        d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= 1.0
                    } else {
                        d.iter().all(|v| v.abs() <= 1.0)
                    };
                    if inside {
                        data[geom.index(x, y, z)] = label;
                    }
                }
            }
        }
    }
    for v in data.iter_mut() {
        if rng.random_bool(0.01) {
            *v = rng.random_range(0..=2);
        }
    }
    LabelVolume::new(geom, data, 2).unwrap()
}

pub fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atlasrefine"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn cli_ok(args: &[&str]) -> Output {
    let out = cli(args);
    assert!(
        out.status.success(),
        "atlasrefine {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// All regular files under `dir`, relative names, sorted.
pub fn list_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().unwrap().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}
