use super::{NodeId, TaxonomyError, TaxonomyTree};

const RESERVED: &[u8] = b"()[]':;,";

fn syntax(offset: usize, message: impl Into<String>) -> TaxonomyError {
    TaxonomyError::Syntax { offset, message: message.into() }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    /// Skips whitespace and `[...]` comments.
    fn skip_trivia(&mut self) -> Result<(), TaxonomyError> {
        loop {
            match self.peek() {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'[') => {
                    let start = self.pos;
                    match self.bytes[self.pos..].iter().position(|&b| b == b']') {
                        Some(end) => self.pos += end + 1,
                        None => return Err(syntax(start, "unterminated comment")),
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    fn label(&mut self) -> Result<String, TaxonomyError> {
        self.skip_trivia()?;
        if self.peek() == Some(b'\'') {
            let start = self.pos;
            self.pos += 1;
            let mut out = String::new();
            loop {
                match self.peek() {
                    None => return Err(syntax(start, "unterminated quoted label")),
                    Some(b'\'') if self.bytes.get(self.pos + 1) == Some(&b'\'') => {
                        out.push('\'');
                        self.pos += 2;
                    }
                    Some(b'\'') => {
                        self.pos += 1;
                        return Ok(out);
                    }
                    Some(_) => {
                        let ch = self.text[self.pos..].chars().next().expect("in bounds");
                        out.push(ch);
                        self.pos += ch.len_utf8();
                    }
                }
            }
        }
        let start = self.pos;
        while let Some(b) = self.peek() {
            if b.is_ascii_whitespace() || RESERVED.contains(&b) {
                break;
            }
            self.pos += 1;
        }
        Ok(self.text[start..self.pos].to_string())
    }

    /// Consumes and discards an optional `:length` suffix.
    fn branch_length(&mut self) -> Result<(), TaxonomyError> {
        self.skip_trivia()?;
        if self.peek() != Some(b':') {
            return Ok(());
        }
        self.pos += 1;
        self.skip_trivia()?;
        let start = self.pos;
        while let Some(b) = self.peek() {
            if b.is_ascii_digit() || matches!(b, b'.' | b'-' | b'+' | b'e' | b'E') {
                self.pos += 1;
            } else {
                break;
            }
        }
        self.text[start..self.pos].parse::<f64>().map(|_| ()).map_err(|_| syntax(start, "invalid branch length"))
    }
}

/// Parses a single Newick tree. Branch lengths are accepted and ignored.
pub fn parse_newick(text: &str) -> Result<TaxonomyTree, TaxonomyError> {
    let mut cur = Cursor { bytes: text.as_bytes(), text, pos: 0 };
    let mut records: Vec<(String, Option<NodeId>)> = Vec::new();
    let mut open: Vec<NodeId> = Vec::new();
    // true right after '(' or ',': a subtree must start here
    let mut expect_subtree = true;

    loop {
        cur.skip_trivia()?;
        let at = cur.pos;
        if expect_subtree {
            if cur.peek() == Some(b'(') {
                cur.pos += 1;
                open.push(records.len());
                records.push((String::new(), open.len().checked_sub(2).map(|i| open[i])));
                continue;
            }
            if records.is_empty() && cur.peek().is_none() {
                return Err(syntax(at, "empty input"));
            }
            let name = cur.label()?;
            cur.branch_length()?;
            records.push((name, open.last().copied()));
            expect_subtree = false;
            if open.is_empty() {
                break;
            }
            continue;
        }
        match cur.peek() {
            Some(b',') if !open.is_empty() => {
                cur.pos += 1;
                expect_subtree = true;
            }
            Some(b')') if !open.is_empty() => {
                cur.pos += 1;
                let id = open.pop().expect("checked non-empty");
                records[id].0 = cur.label()?;
                cur.branch_length()?;
                if open.is_empty() {
                    break;
                }
            }
            Some(b) => return Err(syntax(at, format!("unexpected '{}'", b as char))),
            None => return Err(syntax(at, "unexpected end of input, missing ')'")),
        }
    }
    cur.skip_trivia()?;
    if cur.peek() != Some(b';') {
        return Err(syntax(cur.pos, "expected ';'"));
    }
    cur.pos += 1;
    cur.skip_trivia()?;
    if cur.pos != text.len() {
        return Err(syntax(cur.pos, "trailing characters after ';'"));
    }
    TaxonomyTree::from_parents(records)
}

pub(super) fn write_label(name: &str, out: &mut String) {
    let plain = !name.is_empty() && name.bytes().all(|b| !b.is_ascii_whitespace() && !RESERVED.contains(&b));
    if plain || name.is_empty() {
        out.push_str(name);
    } else {
        out.push('\'');
        out.push_str(&name.replace('\'', "''"));
        out.push('\'');
    }
}
