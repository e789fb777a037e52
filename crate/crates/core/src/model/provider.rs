//! Frozen embeddings: per-sample visual features and pretrained text anchors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::domain::{Composition, PrimitiveVocab};
use crate::error::{Error, Result};
use crate::numkernel::norm;

/// Name-keyed frozen embeddings. Every vector is unit-norm.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingProvider {
    pub dim: usize,
    pub samples: BTreeMap<String, Vec<f64>>,
    /// Keyed by (attribute name, object name).
    pub comp_anchor: BTreeMap<(String, String), Vec<f64>>,
    pub attr_anchor: BTreeMap<String, Vec<f64>>,
    pub obj_anchor: BTreeMap<String, Vec<f64>>,
}

/// Anchors resolved against a vocabulary, indexed like it.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchors {
    pub attr: Vec<Vec<f64>>,
    pub obj: Vec<Vec<f64>>,
    pub comp: BTreeMap<Composition, Vec<f64>>,
}

impl EmbeddingProvider {
    pub fn sample(&self, id: &str) -> Result<&[f64]> {
        self.samples
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingAnchor(format!("no embedding for sample '{id}'")))
    }

    /// Primitive anchors for the whole vocabulary and composition anchors for
    /// `comps`.
    pub fn anchors<'a, I>(&self, vocab: &PrimitiveVocab, comps: I) -> Result<Anchors>
    where
        I: IntoIterator<Item = &'a Composition>,
    {
        let missing = |what: &str, name: &str| Error::MissingAnchor(format!("{what} '{name}'"));
        let attr = vocab
            .attributes()
            .iter()
            .map(|a| self.attr_anchor.get(a).cloned().ok_or_else(|| missing("attribute", a)))
            .collect::<Result<_>>()?;
        let obj = vocab
            .objects()
            .iter()
            .map(|o| self.obj_anchor.get(o).cloned().ok_or_else(|| missing("object", o)))
            .collect::<Result<_>>()?;
        let mut comp = BTreeMap::new();
        for &c in comps {
            if !vocab.contains(c) {
                return Err(Error::Range {
                    what: "composition",
                    value: c.obj.max(c.attr) as i64,
                    lo: 0,
                    hi: vocab.n_objs().max(vocab.n_attrs()) as i64 - 1,
                });
            }
            let key = (vocab.attributes()[c.attr].clone(), vocab.objects()[c.obj].clone());
            let v = self
                .comp_anchor
                .get(&key)
                .ok_or_else(|| missing("composition", &format!("{} {}", key.0, key.1)))?;
            comp.insert(c, v.clone());
        }
        Ok(Anchors { attr, obj, comp })
    }

    /// Serializes to the EMB text format. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn to_emb_text(&self) -> String {
        let count = self.samples.len()
            + self.comp_anchor.len()
            + self.attr_anchor.len()
            + self.obj_anchor.len();
        let mut out = format!("EMB {count} {}\n", self.dim);
        let mut row = |key: String, v: &[f64]| {
            out.push_str(&key);
            for x in v {
                write!(out, " {x}").expect("writing to a String");
            }
            out.push('\n');
        };
        for (id, v) in &self.samples {
            row(format!("s:{id}"), v);
        }
        for ((a, o), v) in &self.comp_anchor {
            row(format!("c:{a}|{o}"), v);
        }
        for (a, v) in &self.attr_anchor {
            row(format!("a:{a}"), v);
        }
        for (o, v) in &self.obj_anchor {
            row(format!("o:{o}"), v);
        }
        out
    }

    /// Parses the EMB format. Rows are normalized; rows already unit-norm
    /// within 1e-12 are kept verbatim so that exports round-trip exactly.
    pub fn parse_emb(text: &str) -> Result<Self> {
        let fmt_err = |line: usize, msg: String| Error::Format { line, msg };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| fmt_err(1, "empty file".into()))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        let (count, dim) = match head.as_slice() {
            ["EMB", c, d] => (
                c.parse::<usize>().map_err(|_| fmt_err(1, format!("bad count '{c}'")))?,
                d.parse::<usize>().map_err(|_| fmt_err(1, format!("bad dimension '{d}'")))?,
            ),
            _ => return Err(fmt_err(1, "header must be 'EMB <count> <dim>'".into())),
        };
        if dim == 0 {
            return Err(fmt_err(1, "dimension must be positive".into()));
        }

        let mut p = EmbeddingProvider {
            dim,
            ..Default::default()
        };
        let mut rows = 0;
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().expect("non-empty line");
            let v = parts
                .map(|t| t.parse::<f64>().map_err(|_| fmt_err(lineno, format!("bad float '{t}'"))))
                .collect::<Result<Vec<f64>>>()?;
            if v.len() != dim {
                return Err(fmt_err(
                    lineno,
                    format!("expected {dim} values after '{key}', found {}", v.len()),
                ));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(fmt_err(lineno, "non-finite value".into()));
            }
            let n = norm(&v);
            if n < crate::numkernel::FLOOR {
                return Err(Error::Norm(format!("line {lineno}: zero vector for '{key}'")));
            }
            let v = if (n - 1.0).abs() <= 1e-12 {
                v
            } else {
                v.into_iter().map(|x| x / n).collect()
            };
            let fresh = match key.split_once(':') {
                Some(("s", id)) if !id.is_empty() => p.samples.insert(id.to_string(), v).is_none(),
                Some(("c", pair)) => {
                    let (a, o) = pair
                        .split_once('|')
                        .filter(|(a, o)| !a.is_empty() && !o.is_empty())
                        .ok_or_else(|| fmt_err(lineno, format!("bad composition key '{key}'")))?;
                    p.comp_anchor.insert((a.to_string(), o.to_string()), v).is_none()
                }
                Some(("a", a)) if !a.is_empty() => p.attr_anchor.insert(a.to_string(), v).is_none(),
                Some(("o", o)) if !o.is_empty() => p.obj_anchor.insert(o.to_string(), v).is_none(),
                _ => return Err(fmt_err(lineno, format!("unknown key '{key}'"))),
            };
            if !fresh {
                return Err(fmt_err(lineno, format!("duplicate key '{key}'")));
            }
            rows += 1;
        }
        if rows != count {
            return Err(fmt_err(1, format!("header announces {count} rows, found {rows}")));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_emb_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingProvider> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EmbeddingProvider::parse_emb(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "EMB 4 2\ns:x1 3 4\nc:old|dog 1 0\na:old 0 2\no:dog 0.6 0.8\n";

    #[test]
    fn parses_and_normalizes() {
        let p = EmbeddingProvider::parse_emb(SMALL).unwrap();
        assert_eq!(p.dim, 2);
        assert_eq!(p.sample("x1").unwrap(), &[0.6, 0.8]);
        assert_eq!(p.attr_anchor["old"], vec![0.0, 1.0]);
        assert_eq!(p.obj_anchor["dog"], vec![0.6, 0.8]);
        let vocab = PrimitiveVocab::new(["old"], ["dog"]).unwrap();
        let anchors = p.anchors(&vocab, &[Composition::new(0, 0)]).unwrap();
        assert_eq!(anchors.comp[&Composition::new(0, 0)], vec![1.0, 0.0]);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let p = EmbeddingProvider::parse_emb(SMALL).unwrap();
        let q = EmbeddingProvider::parse_emb(&p.to_emb_text()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.to_emb_text(), q.to_emb_text());
    }

    #[test]
    fn malformed_files() {
        let e = EmbeddingProvider::parse_emb("EMB 1 3\ns:x 1 2\n").unwrap_err();
        assert!(matches!(e, Error::Format { line: 2, .. }), "{e}");
        assert!(matches!(
            EmbeddingProvider::parse_emb("EMB 1 2\ns:x 0 0\n"),
            Err(Error::Norm(_))
        ));
        assert!(matches!(
            EmbeddingProvider::parse_emb("EMB 2 1\ns:x 1\ns:x 2\n"),
            Err(Error::Format { line: 3, .. })
        ));
        assert!(matches!(
            EmbeddingProvider::parse_emb("EMB 1 1\nq:x 1\n"),
            Err(Error::Format { line: 2, .. })
        ));
        assert!(matches!(
            EmbeddingProvider::parse_emb("EMB 2 1\ns:x 1\n"),
            Err(Error::Format { line: 1, .. })
        ));
        assert!(EmbeddingProvider::parse_emb("EMBED 1 1\n").is_err());
    }

    #[test]
    fn missing_anchor() {
        let p = EmbeddingProvider::parse_emb(SMALL).unwrap();
        let vocab = PrimitiveVocab::new(["old"], ["dog"]).unwrap();
        assert!(matches!(
            p.anchors(&vocab, &[Composition::new(0, 1)]),
            Err(Error::Range { .. })
        ));
        let wider = PrimitiveVocab::new(["old", "wet"], ["dog"]).unwrap();
        assert!(matches!(p.anchors(&wider, &[]), Err(Error::MissingAnchor(_))));
        assert!(matches!(p.sample("nope"), Err(Error::MissingAnchor(_))));
    }
}
