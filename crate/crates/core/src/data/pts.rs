//! Plain-text landmark files (`version`, `n_points`, braces, one `x y` per
//! line, 1-indexed) and per-landmark depth sidecars.

use crate::codec::LandmarkSet;
use crate::error::{CoreError, Result};

fn perr(line: usize, msg: impl Into<String>) -> CoreError {
    CoreError::Parse { line, msg: msg.into() }
}

fn header_value<'a>(line: Option<(usize, &'a str)>, key: &str, at: usize) -> Result<(usize, &'a str)> {
    let (n, text) = line.ok_or_else(|| perr(at, format!("missing '{key}' header")))?;
    let (k, v) = text
        .split_once(':')
        .ok_or_else(|| perr(n, format!("expected '{key}: <value>'")))?;
    if k.trim() != key {
        return Err(perr(n, format!("expected '{key}', found '{}'", k.trim())));
    }
    Ok((n, v.trim()))
}

/// Parses a landmark file, converting to 0-indexed pixel coordinates.
pub fn parse_pts(text: &str) -> Result<LandmarkSet> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (n, v) = header_value(lines.next(), "version", 1)?;
    v.parse::<f64>()
        .map_err(|_| perr(n, format!("version '{v}' is not a number")))?;
    let (n, v) = header_value(lines.next(), "n_points", n + 1)?;
    let count: usize = v
        .parse()
        .map_err(|_| perr(n, format!("n_points '{v}' is not a non-negative integer")))?;

    match lines.next() {
        Some((_, "{")) => {}
        Some((n, other)) => return Err(perr(n, format!("expected '{{', found '{other}'"))),
        None => return Err(perr(n + 1, "expected '{'")),
    }

    let mut points = Vec::with_capacity(count);
    let mut last = n;
    loop {
        let (n, line) = lines
            .next()
            .ok_or_else(|| perr(last + 1, "missing closing '}'"))?;
        last = n;
        if line == "}" {
            break;
        }
        let mut toks = line.split_whitespace();
        let mut coord = |name: &str| -> Result<f64> {
            let t = toks.next().ok_or_else(|| perr(n, format!("missing {name} coordinate")))?;
            let v: f64 = t.parse().map_err(|_| perr(n, format!("'{t}' is not a number")))?;
            if !v.is_finite() {
                return Err(perr(n, format!("'{t}' is not finite")));
            }
            Ok(v)
        };
        let (x, y) = (coord("x")?, coord("y")?);
        if let Some(extra) = toks.next() {
            return Err(perr(n, format!("unexpected token '{extra}'")));
        }
        points.push((x - 1.0, y - 1.0));
    }
    if points.len() != count {
        return Err(perr(
            last,
            format!("n_points declares {count} points but {} were given", points.len()),
        ));
    }
    if let Some((n, extra)) = lines.next() {
        return Err(perr(n, format!("unexpected content after '}}': '{extra}'")));
    }
    Ok(LandmarkSet::new_2d(&points))
}

/// Writes x,y in 1-indexed form. Values are printed in shortest
/// round-trip form.
pub fn write_pts(landmarks: &LandmarkSet) -> String {
    let mut s = format!("version: 1\nn_points: {}\n{{\n", landmarks.len());
    for p in &landmarks.points {
        s.push_str(&format!("{} {}\n", p[0] + 1.0, p[1] + 1.0));
    }
    s.push_str("}\n");
    s
}

pub fn parse_depth(text: &str, expected: usize) -> Result<Vec<f64>> {
    let mut z = Vec::with_capacity(expected);
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: f64 = t
            .parse()
            .map_err(|_| perr(i + 1, format!("'{t}' is not a number")))?;
        z.push(v);
    }
    if z.len() != expected {
        return Err(perr(
            text.lines().count(),
            format!("expected {expected} depth values, found {}", z.len()),
        ));
    }
    Ok(z)
}

pub fn write_depth(z: &[f64]) -> String {
    z.iter().map(|v| format!("{v}\n")).collect()
}
