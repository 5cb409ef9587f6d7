//! Parsing of `name(key=value, ...)` specs shared by measures and costs.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Call {
    pub name: String,
    pub args: Vec<(String, f64)>,
}

impl Call {
    /// Removes and returns the first argument matching any of `keys`.
    pub fn take(&mut self, keys: &[&str]) -> Option<f64> {
        let pos = self.args.iter().position(|(k, _)| keys.contains(&k.as_str()))?;
        Some(self.args.remove(pos).1)
    }

    pub fn require(&mut self, keys: &[&str]) -> Result<f64> {
        self.take(keys).ok_or_else(|| {
            Error::Config(format!("`{}` requires parameter `{}`", self.name, keys[0]))
        })
    }

    /// Errors if any argument was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.args.first() {
            None => Ok(()),
            Some((k, _)) => Err(Error::Config(format!(
                "`{}` does not accept parameter `{}`",
                self.name, k
            ))),
        }
    }
}

pub(crate) fn parse_call(text: &str) -> Result<Call> {
    let text = text.trim();
    let parse_err = |message: String| Error::Parse {
        location: format!("`{text}`"),
        message,
    };
    let (name, rest) = match text.find('(') {
        Some(i) => {
            if !text.ends_with(')') {
                return Err(parse_err("missing closing parenthesis".into()));
            }
            (&text[..i], &text[i + 1..text.len() - 1])
        }
        None => (text, ""),
    };
    let name = name.trim().to_ascii_lowercase();
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(parse_err(format!("invalid name `{name}`")));
    }
    let mut args = Vec::new();
    for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| parse_err(format!("expected key=value, found `{part}`")))?;
        let k = k.trim().to_ascii_lowercase();
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("`{}` is not a number", v.trim())))?;
        if args.iter().any(|(seen, _): &(String, f64)| *seen == k) {
            return Err(parse_err(format!("duplicate key `{k}`")));
        }
        args.push((k, v));
    }
    Ok(Call { name, args })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_arguments() {
        let c = parse_call(" gaussian(mu=1.0, sigma = 2) ").unwrap();
        assert_eq!(c.name, "gaussian");
        assert_eq!(c.args, vec![("mu".into(), 1.0), ("sigma".into(), 2.0)]);
        assert_eq!(parse_call("linear_sum").unwrap().args, vec![]);
    }

    #[test]
    fn rejects_malformed() {
        assert!(parse_call("gaussian(mu=1").is_err());
        assert!(parse_call("gaussian(mu)").is_err());
        assert!(parse_call("gaussian(mu=x)").is_err());
        assert!(parse_call("gaussian(mu=1,mu=2)").is_err());
    }
}
