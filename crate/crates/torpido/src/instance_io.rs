//! Line-oriented ground instance files.
//!
//! ```text
//! domain sysadmin vars 3 horizon 40 discount 0.990000
//! id sysadmin-n3-s0
//! constants a=0.450000 b=0.500000 d=0.100000
//! fluents
//! on(c0)
//! on(c1)
//! on(c2)
//! edges
//! 0 1
//! 1 2
//! init 1 1 1
//! ```
//!
//! Blocks (`fluents`, `edges`, `adjacency`) run until the next keyword line.
//! `grid <rows> <cols>` is required for navigation. `nodefeat <node>
//! <channel> <value>` lines set static node features; unset entries are 0.
//! An `adjacency` block of n rows of n bits may replace `edges`. `#` starts
//! a comment.

use std::collections::BTreeMap;
use std::fmt::Write;

use torpido_core::domain::{build_instance, DomainError, DomainKind, InstanceSpec, State};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error(transparent)]
    Semantic(#[from] DomainError),
}

const KEYWORDS: [&str; 9] = [
    "domain",
    "id",
    "grid",
    "constants",
    "fluents",
    "edges",
    "adjacency",
    "nodefeat",
    "init",
];

struct Token<'a> {
    text: &'a str,
    column: usize,
}

fn tokenize(line: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(Token {
                    text: &line[s..i],
                    column: s + 1,
                });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(Token {
            text: &line[s..],
            column: s + 1,
        });
    }
    out
}

#[derive(Clone, Copy, PartialEq)]
enum Block {
    None,
    Fluents,
    Edges,
    Adjacency,
}

struct Parser {
    line: usize,
}

impl Parser {
    fn err<T>(&self, column: usize, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError::Syntax {
            line: self.line,
            column,
            message: message.into(),
        })
    }

    fn num<T: std::str::FromStr>(&self, tok: &Token<'_>, what: &str) -> Result<T, ParseError> {
        tok.text
            .parse()
            .or_else(|_| self.err(tok.column, format!("{what}: invalid number `{}`", tok.text)))
    }

    fn arity(&self, toks: &[Token<'_>], n: usize, usage: &str) -> Result<(), ParseError> {
        if toks.len() != n {
            let col = toks.get(n).or(toks.last()).map_or(1, |t| t.column);
            return self.err(col, format!("expected `{usage}`"));
        }
        Ok(())
    }
}

/// Parses and validates an instance file.
pub fn parse_instance(text: &str) -> Result<InstanceSpec, ParseError> {
    let mut p = Parser { line: 0 };
    let mut header: Option<(DomainKind, usize, usize, f64)> = None;
    let mut id: Option<String> = None;
    let mut grid = None;
    let mut constants = BTreeMap::new();
    let mut fluents: Vec<(usize, usize, String)> = Vec::new();
    let mut edges: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut matrix: Vec<(usize, Vec<u8>)> = Vec::new();
    let mut nodefeat: Vec<(usize, usize, usize, usize, f64)> = Vec::new();
    let mut init: Option<(usize, Vec<u8>)> = None;
    let mut block = Block::None;
    let mut seen: Vec<&'static str> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        p.line = i + 1;
        let content = raw.split('#').next().unwrap_or("");
        let toks = tokenize(content);
        let Some(first) = toks.first() else { continue };
        let keyword = KEYWORDS.iter().copied().find(|k| *k == first.text);
        if keyword.is_none() {
            match block {
                Block::Fluents => {
                    p.arity(&toks, 1, "<fluent>")?;
                    fluents.push((p.line, first.column, first.text.to_string()));
                }
                Block::Edges => {
                    p.arity(&toks, 2, "<u> <v>")?;
                    let u = p.num(&toks[0], "edge")?;
                    let v = p.num(&toks[1], "edge")?;
                    edges.push((p.line, first.column, u, v));
                }
                Block::Adjacency => {
                    let row = toks
                        .iter()
                        .map(|t| p.num::<u8>(t, "adjacency"))
                        .collect::<Result<Vec<_>, _>>()?;
                    matrix.push((p.line, row));
                }
                Block::None => return p.err(first.column, format!("unknown keyword `{}`", first.text)),
            }
            continue;
        }
        let keyword = keyword.expect("checked above");
        if keyword != "nodefeat" {
            if seen.contains(&keyword) {
                return p.err(first.column, format!("duplicate `{keyword}`"));
            }
            seen.push(keyword);
        }
        if keyword != "domain" && header.is_none() {
            return p.err(first.column, "file must start with the `domain` header");
        }
        block = Block::None;
        match keyword {
            "domain" => {
                let usage = "domain <kind> vars <n> horizon <H> discount <gamma>";
                p.arity(&toks, 8, usage)?;
                for (k, want) in [(2, "vars"), (4, "horizon"), (6, "discount")] {
                    if toks[k].text != want {
                        return p.err(toks[k].column, format!("expected `{want}`"));
                    }
                }
                let kind = DomainKind::from_name(toks[1].text)?;
                header = Some((
                    kind,
                    p.num(&toks[3], "vars")?,
                    p.num(&toks[5], "horizon")?,
                    p.num(&toks[7], "discount")?,
                ));
            }
            "id" => {
                p.arity(&toks, 2, "id <name>")?;
                id = Some(toks[1].text.to_string());
            }
            "grid" => {
                p.arity(&toks, 3, "grid <rows> <cols>")?;
                grid = Some((p.num(&toks[1], "grid")?, p.num(&toks[2], "grid")?));
            }
            "constants" => {
                for t in &toks[1..] {
                    let Some((k, v)) = t.text.split_once('=') else {
                        return p.err(t.column, "expected `<name>=<value>`");
                    };
                    let value: f64 = v
                        .parse()
                        .or_else(|_| p.err(t.column + k.len() + 1, format!("constants.{k}: invalid number `{v}`")))?;
                    if constants.insert(k.to_string(), value).is_some() {
                        return p.err(t.column, format!("constants.{k} given twice"));
                    }
                }
            }
            "fluents" | "edges" | "adjacency" => {
                p.arity(&toks, 1, keyword)?;
                block = match keyword {
                    "fluents" => Block::Fluents,
                    "edges" => Block::Edges,
                    _ => Block::Adjacency,
                };
            }
            "nodefeat" => {
                p.arity(&toks, 4, "nodefeat <node> <channel> <value>")?;
                nodefeat.push((
                    p.line,
                    toks[1].column,
                    p.num(&toks[1], "nodefeat")?,
                    p.num(&toks[2], "nodefeat")?,
                    p.num(&toks[3], "nodefeat")?,
                ));
            }
            "init" => {
                let bits = toks[1..]
                    .iter()
                    .map(|t| match t.text {
                        "0" => Ok(0u8),
                        "1" => Ok(1u8),
                        _ => p.err(t.column, format!("init: `{}` is not a bit", t.text)),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                init = Some((p.line, bits));
            }
            _ => unreachable!(),
        }
    }

    p.line = text.lines().count().max(1);
    let Some((kind, n, horizon, discount)) = header else {
        return p.err(1, "missing `domain` header");
    };
    let Some((_, bits)) = init else {
        return p.err(1, "missing `init` line");
    };

    if !fluents.is_empty() {
        if fluents.len() != n {
            return Err(DomainError::LengthMismatch {
                field: "fluents",
                expected: n,
                found: fluents.len(),
            }
            .into());
        }
        for (k, (line, column, name)) in fluents.iter().enumerate() {
            let want = kind.fluent_name(k);
            if *name != want {
                p.line = *line;
                return p.err(*column, format!("fluents: expected `{want}`, found `{name}`"));
            }
        }
    }

    let mut adjacency = vec![0u8; n * n];
    if !matrix.is_empty() {
        if !edges.is_empty() {
            return p.err(1, "give either `edges` or `adjacency`, not both");
        }
        if matrix.len() != n {
            return Err(DomainError::LengthMismatch {
                field: "adjacency",
                expected: n * n,
                found: matrix.iter().map(|(_, r)| r.len()).sum(),
            }
            .into());
        }
        for (r, (line, row)) in matrix.iter().enumerate() {
            if row.len() != n {
                p.line = *line;
                return p.err(1, format!("adjacency: row {r} has {} entries, expected {n}", row.len()));
            }
            adjacency[r * n..(r + 1) * n].copy_from_slice(row);
        }
    }
    for &(line, column, u, v) in &edges {
        p.line = line;
        if u >= n || v >= n {
            return p.err(column, format!("edges: node out of range (n = {n})"));
        }
        if u == v {
            return Err(DomainError::SelfLoop(u).into());
        }
        if adjacency[u * n + v] == 1 {
            return p.err(column, format!("edges: duplicate edge {u} {v}"));
        }
        adjacency[u * n + v] = 1;
        adjacency[v * n + u] = 1;
    }

    let channels = kind.static_channels();
    let mut features = vec![0.0; n * channels];
    for &(line, column, node, ch, value) in &nodefeat {
        p.line = line;
        if node >= n || ch >= channels {
            return p.err(
                column,
                format!("nodefeat: ({node}, {ch}) out of range ({n} nodes, {channels} channels)"),
            );
        }
        features[node * channels + ch] = value;
    }

    let state = State::from_bits(&bits)?;
    let id = id.unwrap_or_else(|| format!("{}-n{}", kind.name(), n));
    Ok(build_instance(
        kind, id, n, grid, adjacency, features, constants, state, horizon, discount,
    )?)
}

/// Canonical text of a spec: same spec, same bytes.
pub fn serialize_instance(spec: &InstanceSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "domain {} vars {} horizon {} discount {:.6}",
        spec.domain.name(),
        spec.num_vars,
        spec.horizon,
        spec.discount
    );
    let _ = writeln!(out, "id {}", spec.instance_id);
    if let Some((r, c)) = spec.grid {
        let _ = writeln!(out, "grid {r} {c}");
    }
    out.push_str("constants");
    for (k, v) in &spec.constants {
        let _ = write!(out, " {k}={v:.6}");
    }
    out.push('\n');
    out.push_str("fluents\n");
    for i in 0..spec.num_vars {
        let _ = writeln!(out, "{}", spec.domain.fluent_name(i));
    }
    out.push_str("edges\n");
    for (u, v) in spec.edges() {
        let _ = writeln!(out, "{u} {v}");
    }
    let ch = spec.feature_channels;
    for node in 0..spec.num_vars {
        for c in 0..ch {
            let v = spec.node_features[node * ch + c];
            if v != 0.0 {
                let _ = writeln!(out, "nodefeat {node} {c} {v:.6}");
            }
        }
    }
    out.push_str("init");
    for b in spec.initial_state.bits() {
        let _ = write!(out, " {b}");
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use torpido_core::domain::generate_instance;

    const PAIR: &str = "domain sysadmin vars 2 horizon 40 discount 0.990000\n\
                        constants a=0.45 b=0.5 d=0.1\n\
                        edges\n0 1\n\
                        init 1 1\n";

    #[test]
    fn minimal_sysadmin() {
        let spec = parse_instance(PAIR).unwrap();
        assert_eq!(spec.num_vars, 2);
        assert_eq!(spec.adjacency, vec![0, 1, 1, 0]);
        assert_eq!(spec.num_actions(), 3);
    }

    #[test]
    fn asymmetric_matrix_rejected() {
        let text = "domain sysadmin vars 2 horizon 40 discount 0.99\n\
                    constants a=0.45 b=0.5 d=0.1\n\
                    adjacency\n0 1\n0 0\n\
                    init 1 1\n";
        let err = parse_instance(text).unwrap_err();
        assert!(err.to_string().contains("adjacency not symmetric"), "{err}");
    }

    #[test]
    fn syntax_error_position() {
        let text = PAIR.replace("edges\n0 1", "edges\n0 x");
        match parse_instance(&text).unwrap_err() {
            ParseError::Syntax { line, column, .. } => assert_eq!((line, column), (4, 3)),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let err = parse_instance(&PAIR.replace("d=0.1", "d=1.5")).unwrap_err();
        assert!(err.to_string().contains("constants.d"), "{err}");
        let err = parse_instance(&PAIR.replace("sysadmin", "chess")).unwrap_err();
        assert!(err.to_string().contains("unknown domain kind"), "{err}");
        let err = parse_instance(&PAIR.replace("init 1 1", "init 1 1 0")).unwrap_err();
        assert!(err.to_string().contains("initial_state"), "{err}");
    }

    #[test]
    fn sysadmin_declares_each_computer() {
        let spec = generate_instance(DomainKind::SysAdmin, 3, 4).unwrap();
        let text = serialize_instance(&spec);
        assert_eq!(text.matches("on(").count(), 3);
    }

    #[test]
    fn generated_round_trip() {
        for kind in DomainKind::ALL {
            for seed in 0..5 {
                let spec = generate_instance(kind, 9, seed).unwrap();
                let text = serialize_instance(&spec);
                let back = parse_instance(&text).unwrap();
                assert_eq!(back, spec);
                assert_eq!(serialize_instance(&back), text);
            }
        }
    }
}
