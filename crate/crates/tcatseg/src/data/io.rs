//! TCATCLOUD v1 text format.
//!
//! ```text
//! TCATCLOUD v1
//! n <points> t <teeth>
//! x y z nx ny nz label instance      (one line per point)
//! centroid <class> cx cy cz          (one line per tooth)
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so write/read is
//! bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geomkit::Coords;

use super::{Centroid, LabeledCloud};

const MAGIC: &str = "TCATCLOUD v1";

pub fn render_cloud(cloud: &LabeledCloud) -> String {
    let mut s = String::new();
    s.push_str(MAGIC);
    s.push('\n');
    s.push_str(&format!("n {} t {}\n", cloud.len(), cloud.centroids.len()));
    for i in 0..cloud.len() {
        let p = cloud.points.get(i);
        let n = cloud.normals[i];
        s.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            p[0], p[1], p[2], n[0], n[1], n[2], cloud.labels[i], cloud.instances[i]
        ));
    }
    for c in &cloud.centroids {
        s.push_str(&format!(
            "centroid {} {} {} {}\n",
            c.class_id, c.pos[0], c.pos[1], c.pos[2]
        ));
    }
    s
}

pub fn write_cloud(path: &Path, cloud: &LabeledCloud) -> Result<()> {
    fs::write(path, render_cloud(cloud))?;
    Ok(())
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::Parse {
            line,
            msg: format!("bad float {tok:?}"),
        })?;
    if !v.is_finite() {
        return Err(Error::Validation(format!(
            "non-finite value {tok:?} at line {line}"
        )));
    }
    Ok(v)
}

fn parse_usize(tok: &str, line: usize) -> Result<usize> {
    tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad integer {tok:?}"),
    })
}

pub fn parse_cloud(text: &str) -> Result<LabeledCloud> {
    let mut lines = text.lines().enumerate();
    let (_, magic) = lines.next().ok_or_else(|| Error::Format("empty file".to_string()))?;
    if magic.trim() != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {MAGIC:?}",
            magic.trim()
        )));
    }
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        msg: "file ends before the count header".to_string(),
    })?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 4 || toks[0] != "n" || toks[2] != "t" {
        return Err(Error::Parse {
            line: 2,
            msg: format!("expected 'n <count> t <teeth>', got {header:?}"),
        });
    }
    let n = parse_usize(toks[1], 2)?;
    let t = parse_usize(toks[3], 2)?;

    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut instances = Vec::with_capacity(n);
    let mut last_good = 2usize;
    for _ in 0..n {
        let (i, line) = lines.next().ok_or_else(|| Error::Parse {
            line: last_good,
            msg: format!("file truncated after line {last_good}: expected {n} point lines"),
        })?;
        let lineno = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 8 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 8 fields, got {}", toks.len()),
            });
        }
        points.push([
            parse_f64(toks[0], lineno)?,
            parse_f64(toks[1], lineno)?,
            parse_f64(toks[2], lineno)?,
        ]);
        normals.push([
            parse_f64(toks[3], lineno)?,
            parse_f64(toks[4], lineno)?,
            parse_f64(toks[5], lineno)?,
        ]);
        labels.push(parse_usize(toks[6], lineno)?);
        instances.push(parse_usize(toks[7], lineno)?);
        last_good = lineno;
    }

    let mut centroids = Vec::with_capacity(t);
    for _ in 0..t {
        let (i, line) = lines.next().ok_or_else(|| Error::Parse {
            line: last_good,
            msg: format!("file truncated after line {last_good}: expected {t} centroid lines"),
        })?;
        let lineno = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 5 || toks[0] != "centroid" {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 'centroid <class> cx cy cz', got {line:?}"),
            });
        }
        centroids.push(Centroid {
            class_id: parse_usize(toks[1], lineno)?,
            pos: [
                parse_f64(toks[2], lineno)?,
                parse_f64(toks[3], lineno)?,
                parse_f64(toks[4], lineno)?,
            ],
        });
        last_good = lineno;
    }

    Ok(LabeledCloud {
        points: Coords::new(points),
        normals,
        labels,
        instances,
        centroids,
    })
}

pub fn read_cloud(path: &Path) -> Result<LabeledCloud> {
    let text = fs::read_to_string(path)?;
    parse_cloud(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_arch, ArchSpec};

    #[test]
    fn round_trip_is_exact() {
        let spec = ArchSpec::standard(5, 19).unwrap();
        let cloud = generate_arch(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("arch.cloud");
        write_cloud(&path, &cloud).unwrap();
        let back = read_cloud(&path).unwrap();
        assert_eq!(cloud, back);
    }

    #[test]
    fn truncated_file_names_last_good_line() {
        let spec = ArchSpec::standard(2, 3).unwrap();
        let cloud = generate_arch(&spec).unwrap();
        let text = render_cloud(&cloud);
        let cut: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
        let err = parse_cloud(&cut).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 10),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn bad_magic_is_format_error() {
        assert!(matches!(
            parse_cloud("NOTCLOUD v9\nn 0 t 0\n"),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn nan_coordinate_is_validation_error() {
        let text = "TCATCLOUD v1\nn 1 t 0\nNaN 0 0 0 0 1 0 0\n";
        assert!(matches!(parse_cloud(text), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "TCATCLOUD v1\nn 1 t 0\n0 0 0 0 0 1 0\n";
        match parse_cloud(text).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other}"),
        }
    }
}
