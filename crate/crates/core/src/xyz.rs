//! XYZ structure files: atom count, a free comment line, then
//! `symbol x y z` per atom.

use std::fmt::Write as _;

use crate::encoding::Configuration;
use crate::error::{Error, Result};

pub const DEFAULT_SYMBOL: &str = "X";

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub comment: String,
    pub symbols: Vec<String>,
    pub configuration: Configuration,
}

/// One frame with coordinates at 12 significant digits.
pub fn to_xyz(c: &Configuration, comment: &str, symbol: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", c.len());
    let _ = writeln!(s, "{}", comment.replace('\n', " "));
    for p in c.positions() {
        let _ = writeln!(s, "{symbol} {:.11e} {:.11e} {:.11e}", p[0], p[1], p[2]);
    }
    s
}

/// Reads every frame of a (possibly multi-frame) XYZ text.
pub fn parse_xyz(text: &str) -> Result<Vec<Frame>> {
    let mut lines = text.lines().enumerate().peekable();
    let mut frames = Vec::new();
    loop {
        while lines.peek().is_some_and(|(_, l)| l.trim().is_empty()) {
            lines.next();
        }
        let Some((no, count_line)) = lines.next() else {
            break;
        };
        let count: usize = count_line.trim().parse().map_err(|_| {
            Error::Parse(format!("line {}: expected atom count, got {count_line:?}", no + 1))
        })?;
        let comment = lines
            .next()
            .map(|(_, l)| l.to_string())
            .ok_or_else(|| Error::Parse("missing comment line".into()))?;
        let mut symbols = Vec::with_capacity(count);
        let mut positions = Vec::with_capacity(count);
        for _ in 0..count {
            let (no, line) = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("expected {count} atom lines")))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 4 {
                return Err(Error::Parse(format!(
                    "line {}: expected `symbol x y z`, got {line:?}",
                    no + 1
                )));
            }
            let mut xyz = [0.0; 3];
            for (k, f) in fields[1..4].iter().enumerate() {
                xyz[k] = f
                    .parse()
                    .map_err(|_| Error::Parse(format!("line {}: bad number {f:?}", no + 1)))?;
            }
            symbols.push(fields[0].to_string());
            positions.push(xyz);
        }
        frames.push(Frame {
            comment,
            symbols,
            configuration: Configuration::new(positions)?,
        });
    }
    if frames.is_empty() {
        return Err(Error::Parse("no XYZ frames found".into()));
    }
    Ok(frames)
}

pub fn read_xyz_file(path: &std::path::Path) -> Result<Vec<Frame>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
    parse_xyz(&text).map_err(|e| e.context(format!("parsing {}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_read() {
        let c = Configuration::new(vec![[0.0, 0.0, 0.0], [1.122462048309373, -0.5, 1e-7]]).unwrap();
        let text = to_xyz(&c, "energy -1.0", "Ar");
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "2");
        assert_eq!(lines[1], "energy -1.0");
        assert_eq!(lines[3], "Ar 1.12246204831e0 -5.00000000000e-1 1.00000000000e-7");
        let frames = parse_xyz(&(text.clone() + "\n" + &text)).unwrap();
        assert_eq!(frames.len(), 2);
        let back = &frames[1].configuration;
        for (a, b) in c.positions().iter().zip(back.positions()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 1e-11 * a[k].abs().max(1e-300));
            }
        }
        assert_eq!(frames[0].symbols, vec!["Ar", "Ar"]);
    }

    #[test]
    fn malformed_input() {
        assert!(parse_xyz("").is_err());
        assert!(parse_xyz("two\n\n").is_err());
        assert!(parse_xyz("2\nc\nX 0 0 0\n").is_err());
        assert!(parse_xyz("2\nc\nX 0 0 0\nX 1 0\n").is_err());
    }
}
