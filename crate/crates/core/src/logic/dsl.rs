//! Text form of rules.
//!
//! ```text
//! rule := HEAD "<-" pred ("^" pred)* (":" rel ("," rel)*)?
//! rel  := pred ("before" | "after" | "equal" | "none") pred
//! ```
//!
//! Keywords are case-insensitive, predicate names are not. Pairs without a
//! stated relation get `None`.

use std::collections::BTreeMap;

use super::{LogicError, Pred, PredicateLibrary, Rule, TemporalRelation};

pub const GRAMMAR: &str = "\
rule := HEAD \"<-\" pred (\"^\" pred)* (\":\" rel (\",\" rel)*)?
rel  := pred (\"before\" | \"after\" | \"equal\" | \"none\") pred
keywords are case-insensitive; predicate names are case-sensitive;
unstated pairs have no temporal constraint";

pub(crate) fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '.'
}

#[derive(Debug, Clone, PartialEq)]
enum Tok<'a> {
    Ident(&'a str),
    Arrow,
    And,
    Colon,
    Comma,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn next(&mut self) -> Result<Option<(usize, Tok<'a>)>, LogicError> {
        self.skip_ws();
        let start = self.pos;
        let rest = &self.src[start..];
        let Some(c) = rest.chars().next() else {
            return Ok(None);
        };
        let tok = match c {
            '^' => {
                self.pos += 1;
                Tok::And
            }
            ':' => {
                self.pos += 1;
                Tok::Colon
            }
            ',' => {
                self.pos += 1;
                Tok::Comma
            }
            '<' if rest.starts_with("<-") => {
                self.pos += 2;
                Tok::Arrow
            }
            c if is_ident_char(c) => {
                let len = rest.find(|c: char| !is_ident_char(c)).unwrap_or(rest.len());
                self.pos += len;
                Tok::Ident(&rest[..len])
            }
            other => {
                return Err(LogicError::Syntax {
                    pos: start,
                    msg: format!("unexpected character `{other}`"),
                })
            }
        };
        Ok(Some((start, tok)))
    }
}

struct Parser<'a, 'l> {
    toks: Vec<(usize, Tok<'a>)>,
    i: usize,
    end: usize,
    lib: &'l PredicateLibrary,
}

impl<'a> Parser<'a, '_> {
    fn peek(&self) -> Option<&Tok<'a>> {
        self.toks.get(self.i).map(|(_, t)| t)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.i).map_or(self.end, |(p, _)| *p)
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, LogicError> {
        Err(LogicError::Syntax {
            pos: self.pos(),
            msg: msg.into(),
        })
    }

    fn ident(&mut self, what: &str) -> Result<&'a str, LogicError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = *s;
                self.i += 1;
                Ok(s)
            }
            _ => self.err(format!("expected {what}")),
        }
    }

    fn expect(&mut self, tok: Tok<'a>, what: &str) -> Result<(), LogicError> {
        if self.peek() == Some(&tok) {
            self.i += 1;
            Ok(())
        } else {
            self.err(format!("expected {what}"))
        }
    }

    fn pred(&mut self) -> Result<(Pred, &'a str), LogicError> {
        let name = self.ident("predicate name")?;
        let p = self
            .lib
            .index_of(name)
            .ok_or_else(|| LogicError::UnknownPredicate(name.to_string()))?;
        Ok((p, name))
    }

    fn rule(&mut self) -> Result<Rule, LogicError> {
        let (head, head_name) = self.pred()?;
        if !self.lib.is_head(head) {
            return Err(LogicError::NotAHead(head_name.to_string()));
        }
        self.expect(Tok::Arrow, "`<-`")?;
        let mut body = Vec::new();
        loop {
            let (p, name) = self.pred()?;
            if body.contains(&p) {
                return Err(LogicError::DuplicateBodyPredicate(name.to_string()));
            }
            body.push(p);
            if self.peek() == Some(&Tok::And) {
                self.i += 1;
            } else {
                break;
            }
        }
        let mut rels: BTreeMap<(Pred, Pred), TemporalRelation> = BTreeMap::new();
        if self.peek() == Some(&Tok::Colon) {
            self.i += 1;
            loop {
                let (u, un) = self.pred()?;
                let kw = self.ident("`before`, `after`, `equal` or `none`")?;
                let rel = match kw.to_ascii_lowercase().as_str() {
                    "before" => TemporalRelation::Before,
                    "after" => TemporalRelation::After,
                    "equal" => TemporalRelation::Equal,
                    "none" => TemporalRelation::None,
                    _ => {
                        self.i -= 1;
                        return self.err(format!("unknown relation `{kw}`"));
                    }
                };
                let (v, vn) = self.pred()?;
                if u == v {
                    return Err(LogicError::SelfRelation(un.to_string()));
                }
                for (p, n) in [(u, un), (v, vn)] {
                    if !body.contains(&p) {
                        return Err(LogicError::PredicateNotInBody(n.to_string()));
                    }
                }
                // store with the smaller index first so both orientations collide
                let (key, rel) = if u < v { ((u, v), rel) } else { ((v, u), rel.inverse()) };
                match rels.get(&key) {
                    Some(&prev) if prev != rel => {
                        return Err(LogicError::ConflictingRelation(un.to_string(), vn.to_string()))
                    }
                    _ => {
                        rels.insert(key, rel);
                    }
                }
                if self.peek() == Some(&Tok::Comma) {
                    self.i += 1;
                } else {
                    break;
                }
            }
        }
        if self.i != self.toks.len() {
            return self.err("unexpected trailing input");
        }
        Ok(Rule::new(head, body, rels)?.canonicalize())
    }
}

/// Parses one rule and returns it in canonical form.
pub fn parse_rule(text: &str, lib: &PredicateLibrary) -> Result<Rule, LogicError> {
    let mut lx = Lexer { src: text, pos: 0 };
    let mut toks = Vec::new();
    while let Some(t) = lx.next()? {
        toks.push(t);
    }
    Parser {
        toks,
        i: 0,
        end: text.len(),
        lib,
    }
    .rule()
}

/// One rule per line; `#` starts a comment; blank lines are skipped.
pub fn parse_rule_file(text: &str, lib: &PredicateLibrary) -> Result<Vec<Rule>, LogicError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        if line.trim().is_empty() {
            continue;
        }
        let rule = parse_rule(line, lib).map_err(|e| LogicError::AtLine {
            line: i + 1,
            source: Box::new(e),
        })?;
        out.push(rule);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use TemporalRelation::*;

    fn lib() -> PredicateLibrary {
        PredicateLibrary::new(["A", "B", "C", "Y", "Z"], ["Y", "Z"]).unwrap()
    }

    #[test]
    fn parses_examples() {
        let l = lib();
        let r = parse_rule("Y <- A ^ B : A before B", &l).unwrap();
        assert_eq!(r.head(), 3);
        assert_eq!(r.body(), &[0, 1]);
        assert_eq!(r.relation(0, 1), Some(Before));

        let r = parse_rule("Y <- A ^ B", &l).unwrap();
        assert_eq!(r.relation(0, 1), Some(None));

        assert_eq!(
            parse_rule("Y <- A ^ A", &l),
            Err(LogicError::DuplicateBodyPredicate("A".into()))
        );
    }

    #[test]
    fn keywords_case_insensitive_names_not() {
        let l = lib();
        let r = parse_rule("Y<-B^A:B AFTER A", &l).unwrap();
        assert_eq!(r, parse_rule("Y <- A ^ B : A before B", &l).unwrap());
        assert_eq!(parse_rule("Y <- a", &l), Err(LogicError::UnknownPredicate("a".into())));
    }

    #[test]
    fn error_paths() {
        let l = lib();
        assert!(matches!(parse_rule("Y A", &l), Err(LogicError::Syntax { pos: 2, .. })));
        assert!(matches!(parse_rule("Y <- A ^", &l), Err(LogicError::Syntax { pos: 8, .. })));
        assert!(matches!(parse_rule("Y <- A ^ B : A near B", &l), Err(LogicError::Syntax { pos: 15, .. })));
        assert!(matches!(parse_rule("Y <- A $", &l), Err(LogicError::Syntax { pos: 7, .. })));
        assert_eq!(
            parse_rule("Y <- A ^ B : A before B, B before A", &l),
            Err(LogicError::ConflictingRelation("B".into(), "A".into()))
        );
        // same constraint restated in the other orientation is fine
        assert!(parse_rule("Y <- A ^ B : A before B, B after A", &l).is_ok());
        assert_eq!(parse_rule("A <- B", &l), Err(LogicError::NotAHead("A".into())));
        assert_eq!(
            parse_rule("Y <- A ^ B : A before C", &l),
            Err(LogicError::PredicateNotInBody("C".into()))
        );
        assert_eq!(parse_rule("Y <- A ^ B : A equal A", &l), Err(LogicError::SelfRelation("A".into())));
    }

    #[test]
    fn rule_file_with_comments() {
        let l = lib();
        let text = "# truth\nY <- A ^ B : A before B  # first\n\n   \nZ <- C\n";
        let rules = parse_rule_file(text, &l).unwrap();
        assert_eq!(rules.len(), 2);
        assert_eq!(rules[1].head(), 4);
        let err = parse_rule_file("Y <- A\nY <- Q\n", &l).unwrap_err();
        assert!(matches!(err, LogicError::AtLine { line: 2, .. }));
    }
}
