//! Flat `key = value` config files merged in front of command-line flags.

use std::path::Path;

/// Parse a config file into `--key value` arguments. `true` booleans become
/// bare `--key`; `false` drops the key.
pub fn config_args(path: &Path) -> Result<Vec<String>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("config {}: {e}", path.display()))?;
    parse(&text).map_err(|e| format!("config {}: {e}", path.display()))
}

pub fn parse(text: &str) -> Result<Vec<String>, String> {
    let mut args = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", no + 1))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || key.starts_with('-') || key == "config" {
            return Err(format!("line {}: invalid key {key:?}", no + 1));
        }
        match value {
            "true" => args.push(format!("--{key}")),
            "false" => {}
            _ => {
                args.push(format!("--{key}"));
                args.push(value.to_string());
            }
        }
    }
    Ok(args)
}

/// Insert arguments from `--config FILE` right after the subcommand so that
/// explicit flags, which come later, take precedence.
pub fn expand(argv: Vec<String>) -> Result<Vec<String>, String> {
    let mut path = None;
    let mut iter = argv.iter().enumerate().skip(2);
    while let Some((_, a)) = iter.next() {
        if a == "--config" {
            path = iter.next().map(|(_, p)| p.clone());
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    if argv.len() < 2 {
        return Ok(argv);
    }
    let mut out = argv[..2].to_vec();
    out.extend(config_args(Path::new(&path))?);
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_and_booleans() {
        let args = parse("# run\nseed = 7\n\npaper-protocol=true\nno-augment = false\ncounts=1,2\n").unwrap();
        assert_eq!(args, ["--seed", "7", "--paper-protocol", "--counts", "1,2"]);
        assert!(parse("seed 7").is_err());
        assert!(parse("--seed = 7").is_err());
    }

    #[test]
    fn file_values_come_before_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "seed = 3\n").unwrap();
        let argv: Vec<String> = ["pca", "train", "--config", cfg.to_str().unwrap(), "--seed", "9"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let out = expand(argv).unwrap();
        assert_eq!(&out[..4], ["pca", "train", "--seed", "3"]);
        assert_eq!(out.last().unwrap(), "9");
    }
}
