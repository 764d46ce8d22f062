//! Glob patterns over separator-delimited words.
//!
//! `*` matches within one word, `**` matches across separators, `?` matches a
//! single non-separator character, `[a-z]`/`[!0-9]` match character sets and
//! `{a,b}` matches alternatives. Hosts use `.` as separator, file paths `/`.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid glob {pattern:?}: {reason}")]
pub struct GlobError {
    pub pattern: String,
    pub reason: &'static str,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Lit(char),
    Star,
    SuperStar,
    Any,
    Class {
        negated: bool,
        ranges: Vec<(char, char)>,
    },
}

#[derive(Debug)]
enum Node {
    Tok(Token),
    Alt(Vec<Vec<Node>>),
}

const MAX_EXPANSIONS: usize = 1024;

/// A compiled glob pattern.
#[derive(Clone)]
pub struct Glob {
    source: String,
    separator: char,
    case_insensitive: bool,
    literal: bool,
    branches: Vec<Vec<Token>>,
}

impl fmt::Debug for Glob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Glob").field(&self.source).finish()
    }
}

impl fmt::Display for Glob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl PartialEq for Glob {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
            && self.separator == other.separator
            && self.case_insensitive == other.case_insensitive
    }
}

impl Eq for Glob {}

impl Glob {
    /// Host pattern: `.`-separated words, case-insensitive.
    pub fn host(pattern: &str) -> Result<Self, GlobError> {
        Self::new(pattern, '.', true)
    }

    /// Path pattern: `/`-separated segments, case-sensitive.
    pub fn path(pattern: &str) -> Result<Self, GlobError> {
        Self::new(pattern, '/', false)
    }

    pub fn new(pattern: &str, separator: char, case_insensitive: bool) -> Result<Self, GlobError> {
        let err = |reason| GlobError {
            pattern: pattern.to_string(),
            reason,
        };
        if pattern.is_empty() {
            return Err(err("empty pattern"));
        }
        let chars: Vec<char> = pattern.chars().collect();
        let mut pos = 0;
        let nodes = parse_seq(&chars, &mut pos, 0).map_err(err)?;
        if pos != chars.len() {
            return Err(err("unbalanced '}'"));
        }
        let mut branches = expand(&nodes).map_err(err)?;
        if case_insensitive {
            for b in &mut branches {
                for t in b.iter_mut() {
                    lower_token(t);
                }
            }
        }
        let literal = !pattern.contains(['*', '?', '[', '{', '\\']);
        Ok(Self {
            source: pattern.to_string(),
            separator,
            case_insensitive,
            literal,
            branches,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    /// True when the pattern has no metacharacters and thus matches exactly
    /// one string.
    pub fn is_literal(&self) -> bool {
        self.literal
    }

    pub fn is_match(&self, input: &str) -> bool {
        let chars: Vec<char> = if self.case_insensitive {
            input.chars().flat_map(char::to_lowercase).collect()
        } else {
            input.chars().collect()
        };
        self.branches
            .iter()
            .any(|b| match_tokens(b, &chars, self.separator))
    }
}

fn lower_token(t: &mut Token) {
    match t {
        Token::Lit(c) => *c = c.to_lowercase().next().unwrap_or(*c),
        Token::Class { ranges, .. } => {
            let mut extra = Vec::new();
            for (a, b) in ranges.iter() {
                let (la, lb) = (
                    a.to_lowercase().next().unwrap_or(*a),
                    b.to_lowercase().next().unwrap_or(*b),
                );
                if (la, lb) != (*a, *b) && la <= lb {
                    extra.push((la, lb));
                }
            }
            ranges.extend(extra);
        }
        _ => {}
    }
}

fn parse_seq(chars: &[char], pos: &mut usize, depth: usize) -> Result<Vec<Node>, &'static str> {
    let mut out = Vec::new();
    while *pos < chars.len() {
        let c = chars[*pos];
        match c {
            '}' | ',' if depth > 0 => return Ok(out),
            '\\' => {
                let next = *chars.get(*pos + 1).ok_or("trailing escape")?;
                out.push(Node::Tok(Token::Lit(next)));
                *pos += 2;
            }
            '*' => {
                if chars.get(*pos + 1) == Some(&'*') {
                    out.push(Node::Tok(Token::SuperStar));
                    *pos += 2;
                    while chars.get(*pos) == Some(&'*') {
                        *pos += 1;
                    }
                } else {
                    out.push(Node::Tok(Token::Star));
                    *pos += 1;
                }
            }
            '?' => {
                out.push(Node::Tok(Token::Any));
                *pos += 1;
            }
            '[' => {
                *pos += 1;
                out.push(Node::Tok(parse_class(chars, pos)?));
            }
            '{' => {
                *pos += 1;
                let mut alts = Vec::new();
                loop {
                    alts.push(parse_seq(chars, pos, depth + 1)?);
                    match chars.get(*pos) {
                        Some(',') => *pos += 1,
                        Some('}') => {
                            *pos += 1;
                            break;
                        }
                        _ => return Err("unclosed '{'"),
                    }
                }
                out.push(Node::Alt(alts));
            }
            _ => {
                out.push(Node::Tok(Token::Lit(c)));
                *pos += 1;
            }
        }
    }
    if depth > 0 {
        return Err("unclosed '{'");
    }
    Ok(out)
}

fn parse_class(chars: &[char], pos: &mut usize) -> Result<Token, &'static str> {
    let negated = matches!(chars.get(*pos), Some('!' | '^'));
    if negated {
        *pos += 1;
    }
    let mut ranges = Vec::new();
    loop {
        let c = *chars.get(*pos).ok_or("unclosed '['")?;
        if c == ']' {
            *pos += 1;
            break;
        }
        let lo = if c == '\\' {
            *pos += 1;
            *chars.get(*pos).ok_or("trailing escape")?
        } else {
            c
        };
        *pos += 1;
        if chars.get(*pos) == Some(&'-') && chars.get(*pos + 1).is_some_and(|c| *c != ']') {
            let hi = chars[*pos + 1];
            *pos += 2;
            if hi < lo {
                return Err("reversed character range");
            }
            ranges.push((lo, hi));
        } else {
            ranges.push((lo, lo));
        }
    }
    if ranges.is_empty() {
        return Err("empty character class");
    }
    Ok(Token::Class { negated, ranges })
}

fn expand(nodes: &[Node]) -> Result<Vec<Vec<Token>>, &'static str> {
    let mut acc: Vec<Vec<Token>> = vec![Vec::new()];
    for node in nodes {
        match node {
            Node::Tok(t) => acc.iter_mut().for_each(|b| b.push(t.clone())),
            Node::Alt(alts) => {
                let mut options = Vec::new();
                for alt in alts {
                    options.extend(expand(alt)?);
                }
                if acc.len() * options.len() > MAX_EXPANSIONS {
                    return Err("too many alternatives");
                }
                acc = acc
                    .iter()
                    .flat_map(|prefix| {
                        options.iter().map(move |o| {
                            let mut b = prefix.clone();
                            b.extend(o.iter().cloned());
                            b
                        })
                    })
                    .collect();
            }
        }
    }
    Ok(acc)
}

fn match_tokens(tokens: &[Token], input: &[char], sep: char) -> bool {
    // reachable[i] == pattern prefix matches input[..i]
    let n = input.len();
    let mut reachable = vec![false; n + 1];
    reachable[0] = true;
    for tok in tokens {
        let mut next = vec![false; n + 1];
        match tok {
            Token::Star | Token::SuperStar => {
                let crosses = matches!(tok, Token::SuperStar);
                let mut open = false;
                for i in 0..=n {
                    if reachable[i] {
                        open = true;
                    }
                    next[i] = open;
                    if i < n && input[i] == sep && !crosses {
                        open = false;
                    }
                }
            }
            _ => {
                for i in 0..n {
                    if reachable[i] && single(tok, input[i], sep) {
                        next[i + 1] = true;
                    }
                }
            }
        }
        reachable = next;
        if !reachable.iter().any(|r| *r) {
            return false;
        }
    }
    reachable[n]
}

fn single(tok: &Token, c: char, sep: char) -> bool {
    match tok {
        Token::Lit(l) => *l == c,
        Token::Any => c != sep,
        Token::Class { negated, ranges } => {
            c != sep && (ranges.iter().any(|(a, b)| (*a..=*b).contains(&c)) != *negated)
        }
        Token::Star | Token::SuperStar => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn host(p: &str, h: &str) -> bool {
        Glob::host(p).unwrap().is_match(h)
    }

    #[test]
    fn single_word_wildcard() {
        assert!(host("*.example.com", "primary.example.com"));
        assert!(!host("*.example.com", "primary.example.org"));
        assert!(!host("*.example.com", "a.b.example.com"));
        assert!(!host("*.example.com", "example.com"));
    }

    #[test]
    fn any_words_wildcard() {
        for h in ["", "a", "primary.example.com", "localhost:8080", "x.y.z.w"] {
            assert!(host("**", h));
        }
        assert!(host("**.example.com", "a.b.example.com"));
    }

    #[test]
    fn character_sets_and_alternatives() {
        assert!(host("cdn[0-9].example.com", "cdn7.example.com"));
        assert!(!host("cdn[!0-9].example.com", "cdn7.example.com"));
        assert!(host("{ingest,origin}.example.com", "origin.example.com"));
        assert!(!host("{ingest,origin}.example.com", "edge.example.com"));
        assert!(host("a?c.com", "abc.com"));
        assert!(!host("a?c.com", "a.c.com"));
    }

    #[test]
    fn hosts_are_case_insensitive() {
        assert!(host("Ingest.Example.COM", "ingest.example.com"));
        assert!(host("*.example.com", "PRIMARY.EXAMPLE.COM"));
    }

    #[test]
    fn literal_detection() {
        assert!(Glob::host("ingest.example.com").unwrap().is_literal());
        assert!(!Glob::host("*.example.com").unwrap().is_literal());
        assert!(!Glob::host("**").unwrap().is_literal());
    }

    #[test]
    fn rejects_malformed() {
        for bad in ["", "[", "[]", "{a,b", "a\\", "[z-a]"] {
            assert!(Glob::host(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn path_globs_use_slash() {
        let g = Glob::path("live/*/seg-*.m4s").unwrap();
        assert!(g.is_match("live/720p/seg-1.m4s"));
        assert!(!g.is_match("live/a/b/seg-1.m4s"));
        assert!(Glob::path("**").unwrap().is_match("a/b/c"));
        assert!(Glob::path("live/**").unwrap().is_match("live/a/b/c"));
    }
}
