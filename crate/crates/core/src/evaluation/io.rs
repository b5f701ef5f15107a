//! Line-oriented text formats for comparisons, qualities and curves.
//!
//! * pairs: `id_a<TAB>id_b<TAB>similarity<TAB>is_genuine(0|1)`
//! * qualities: `id<TAB>score`
//! * curve: a `#` header line with `fmr_target`, `threshold`, `auc`,
//!   `pauc25`, then `r<TAB>fnmr` per sample.
//!
//! Blank lines and lines starting with `#` are skipped on input.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

use super::{EdcCurve, VerificationPair};

#[derive(Debug, Clone, PartialEq)]
pub struct RawPair {
    pub id_a: String,
    pub id_b: String,
    pub similarity: f32,
    pub is_genuine: bool,
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn parse_err(source: &str, line: usize, message: String) -> Error {
    Error::Parse {
        location: format!("{source}:{line}"),
        message,
    }
}

/// `source` names the input in error messages.
pub fn parse_pairs(text: &str, source: &str) -> Result<Vec<RawPair>> {
    data_lines(text)
        .map(|(line, l)| {
            let fields: Vec<&str> = l.split('\t').collect();
            let [id_a, id_b, sim, genuine] = fields[..] else {
                return Err(parse_err(
                    source,
                    line,
                    format!("expected 4 tab-separated fields, got {}", fields.len()),
                ));
            };
            let similarity: f32 = sim
                .trim()
                .parse()
                .map_err(|_| parse_err(source, line, format!("bad similarity {sim:?}")))?;
            if !(-1.0..=1.0).contains(&similarity) {
                return Err(parse_err(
                    source,
                    line,
                    format!("similarity {similarity} outside [-1, 1]"),
                ));
            }
            let is_genuine = match genuine.trim() {
                "1" => true,
                "0" => false,
                other => {
                    return Err(parse_err(
                        source,
                        line,
                        format!("is_genuine must be 0 or 1, got {other:?}"),
                    ))
                }
            };
            Ok(RawPair {
                id_a: id_a.to_string(),
                id_b: id_b.to_string(),
                similarity,
                is_genuine,
            })
        })
        .collect()
}

pub fn parse_qualities(text: &str, source: &str) -> Result<BTreeMap<String, f32>> {
    let mut out = BTreeMap::new();
    for (line, l) in data_lines(text) {
        let (id, score) = l
            .split_once('\t')
            .ok_or_else(|| parse_err(source, line, "expected `id<TAB>score`".into()))?;
        let score: f32 = score
            .trim()
            .parse()
            .map_err(|_| parse_err(source, line, format!("bad score {score:?}")))?;
        if !score.is_finite() {
            return Err(parse_err(source, line, "score is not finite".into()));
        }
        if out.insert(id.to_string(), score).is_some() {
            return Err(parse_err(source, line, format!("duplicate id {id:?}")));
        }
    }
    Ok(out)
}

/// Joins comparisons with per-sample qualities. Every id must have a score;
/// otherwise the error lists all missing ids.
pub fn attach_qualities(
    pairs: &[RawPair],
    qualities: &BTreeMap<String, f32>,
) -> Result<Vec<VerificationPair>> {
    let mut missing: Vec<&str> = pairs
        .iter()
        .flat_map(|p| [p.id_a.as_str(), p.id_b.as_str()])
        .filter(|id| !qualities.contains_key(*id))
        .collect();
    missing.sort_unstable();
    missing.dedup();
    if !missing.is_empty() {
        return Err(Error::Contract(format!(
            "{} id(s) have no quality score: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    Ok(pairs
        .iter()
        .map(|p| VerificationPair {
            id_a: p.id_a.clone(),
            id_b: p.id_b.clone(),
            similarity: p.similarity,
            is_genuine: p.is_genuine,
            quality_a: qualities[&p.id_a],
            quality_b: qualities[&p.id_b],
        })
        .collect())
}

pub fn format_curve(curve: &EdcCurve) -> String {
    let mut out = format!(
        "# fmr_target={}\tthreshold={}\tauc={}\tpauc25={}\n",
        curve.fmr_target, curve.threshold.value, curve.auc, curve.pauc25
    );
    for s in &curve.samples {
        let _ = writeln!(out, "{}\t{}", s.reject_fraction, s.fnmr);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_and_reports_lines() {
        let text = "# header\na\tb\t0.5\t1\n\nc\td\t-0.25\t0\n";
        let pairs = parse_pairs(text, "pairs.tsv").unwrap();
        assert_eq!(pairs.len(), 2);
        assert!(pairs[0].is_genuine && !pairs[1].is_genuine);
        assert_eq!(pairs[1].similarity, -0.25);

        let err = parse_pairs("a\tb\t0.5\t2\n", "p").unwrap_err().to_string();
        assert!(err.contains("p:1"), "{err}");
        assert!(parse_pairs("a\tb\t1.5\t1\n", "p").is_err());
        assert!(parse_pairs("a\tb\t0.5\n", "p").is_err());
    }

    #[test]
    fn missing_ids_are_listed() {
        let pairs = parse_pairs("a\tb\t0.5\t1\nc\ta\t0.1\t0\nd\tc\t0.2\t0\n", "p").unwrap();
        let q = parse_qualities("a\t0.9\nb\t0.8\n", "q").unwrap();
        let msg = attach_qualities(&pairs, &q).unwrap_err().to_string();
        assert!(msg.contains("2 id(s)") && msg.contains("c, d"), "{msg}");

        let q = parse_qualities("a\t0.9\nb\t0.8\nc\t0.1\nd\t1\n", "q").unwrap();
        let joined = attach_qualities(&pairs, &q).unwrap();
        assert_eq!((joined[1].quality_a, joined[1].quality_b), (0.1, 0.9));
    }

    #[test]
    fn duplicate_quality_ids_rejected() {
        assert!(parse_qualities("a\t0.1\na\t0.2\n", "q").is_err());
    }
}
