//! Tab-separated dataset manifests: image path, landmark path, optional
//! depth path, optional yaw. Paths are relative to the manifest's folder.

use std::fs;
use std::path::Path;

use super::pts::{parse_depth, parse_pts};
use super::{Image, Sample};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub image: String,
    pub pts: String,
    pub depth: Option<String>,
    pub yaw: Option<f64>,
}

pub fn write_manifest(records: &[Record]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.image);
        s.push('\t');
        s.push_str(&r.pts);
        s.push('\t');
        s.push_str(r.depth.as_deref().unwrap_or(""));
        s.push('\t');
        if let Some(y) = r.yaw {
            s.push_str(&y.to_string());
        }
        s.push('\n');
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let err = |msg: String| CoreError::Parse { line: i + 1, msg };
        if !(2..=4).contains(&f.len()) || f[0].is_empty() || f[1].is_empty() {
            return Err(err("expected image<TAB>landmarks[<TAB>depth[<TAB>yaw]]".into()));
        }
        let depth = f.get(2).filter(|s| !s.is_empty()).map(|s| s.to_string());
        let yaw = match f.get(3).filter(|s| !s.is_empty()) {
            Some(s) => Some(s.parse::<f64>().map_err(|_| err(format!("yaw '{s}' is not a number")))?),
            None => None,
        };
        out.push(Record {
            image: f[0].to_string(),
            pts: f[1].to_string(),
            depth,
            yaw,
        });
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CoreError::io(path, e))
}

/// Loads one record; the landmark set is 3D when a depth sidecar exists.
pub fn load_record(root: &Path, r: &Record) -> Result<Sample> {
    let image = Image::load_png(&root.join(&r.image))?;
    let pts_path = root.join(&r.pts);
    let mut landmarks = parse_pts(&read(&pts_path)?).map_err(|e| match e {
        CoreError::Parse { line, msg } => CoreError::Data(format!("{}:{line}: {msg}", pts_path.display())),
        e => e,
    })?;
    if let Some(d) = &r.depth {
        let p = root.join(d);
        let z = parse_depth(&read(&p)?, landmarks.len())
            .map_err(|e| CoreError::Data(format!("{}: {e}", p.display())))?;
        landmarks = landmarks.with_depth(&z);
    }
    let id = Path::new(&r.image)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| r.image.clone());
    Sample::new(image, landmarks, None, r.yaw, id)
}

/// Reads a manifest and every file it names.
pub fn load_dataset(manifest: &Path) -> Result<Vec<Sample>> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    let records = parse_manifest(&read(manifest)?)?;
    if records.is_empty() {
        return Err(CoreError::Data(format!("{} lists no samples", manifest.display())));
    }
    records.iter().map(|r| load_record(root, r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_optional_fields() {
        let recs = vec![
            Record {
                image: "a.png".into(),
                pts: "a.pts".into(),
                depth: Some("a.txt".into()),
                yaw: Some(-12.5),
            },
            Record {
                image: "b.png".into(),
                pts: "b.pts".into(),
                depth: None,
                yaw: None,
            },
        ];
        assert_eq!(parse_manifest(&write_manifest(&recs)).unwrap(), recs);
        assert_eq!(parse_manifest("x.png\ty.pts\n").unwrap()[0].yaw, None);
    }

    #[test]
    fn bad_lines() {
        assert!(matches!(parse_manifest("only-one-field\n"), Err(CoreError::Parse { line: 1, .. })));
        assert!(matches!(
            parse_manifest("a\tb\n\na\tb\t\tnope\n"),
            Err(CoreError::Parse { line: 3, .. })
        ));
    }
}
