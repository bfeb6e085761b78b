//! Text tensor format: a `shape: d0 d1 ...` header, then one line per
//! innermost slice with values at 9 significant digits.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

pub fn format_tensor(x: &FeatureMap) -> String {
    let shape: Vec<String> = x.shape().iter().map(usize::to_string).collect();
    let mut out = format!("shape: {}\n", shape.join(" "));
    let inner = *x.shape().last().unwrap_or(&1);
    for row in x.data().chunks(inner) {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_tensor(text: &str, source: &str) -> Result<FeatureMap> {
    let err = |line: usize, message: String| Error::Parse {
        path: source.into(),
        line,
        message,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err(1, "missing shape header".into()))?;
    let dims = header
        .strip_prefix("shape:")
        .ok_or_else(|| err(1, format!("expected `shape:` header, found {header:?}")))?;
    let shape = dims
        .split_whitespace()
        .map(|d| d.parse::<usize>().map_err(|_| err(1, format!("bad dimension {d:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if shape.is_empty() {
        return Err(err(1, "shape header lists no dimensions".into()));
    }
    let inner = *shape.last().unwrap();
    let mut data = Vec::with_capacity(shape.iter().product());
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        let row = line
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| err(lineno, format!("bad value {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != inner {
            return Err(err(lineno, format!("expected {inner} values, found {}", row.len())));
        }
        data.extend(row);
    }
    FeatureMap::new(shape, data)
}

pub fn save_tensor(path: &Path, x: &FeatureMap) -> Result<()> {
    fs::write(path, format_tensor(x)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<FeatureMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tensor(&text, &path.display().to_string())
}

/// Rounds every value through the text format.
pub fn round_trip(x: &FeatureMap) -> Result<FeatureMap> {
    parse_tensor(&format_tensor(x), "memory")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout() {
        let x = FeatureMap::new(vec![1, 2, 2], vec![1.0, -0.5, 0.0, 123456.789]).unwrap();
        assert_eq!(
            format_tensor(&x),
            "shape: 1 2 2\n1.00000000e0 -5.00000000e-1\n0.00000000e0 1.23456789e5\n"
        );
        assert_eq!(parse_tensor(&format_tensor(&x), "t").unwrap(), x);
    }

    #[test]
    fn rounding_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = FeatureMap::random_uniform(&[2, 3, 4], -5.0, 5.0, &mut rng);
        let once = round_trip(&x).unwrap();
        assert!(once.max_abs_diff(&x) <= 5e-8);
        assert_eq!(round_trip(&once).unwrap(), once);
        assert_eq!(format_tensor(&once), format_tensor(&x));
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse_tensor("", "t"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            parse_tensor("dims: 1", "t"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_tensor("shape: 1 2\n1 2 3\n", "t"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_tensor("shape: 1 2\n1 x\n", "t"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(parse_tensor("shape: 2 2\n1 2\n", "t").is_err());
    }
}
