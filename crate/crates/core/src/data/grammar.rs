//! Statement grammar behind the synthetic corpora.
//!
//! Programs are newline-separated statements. The retain lexicon maps each
//! identifier to exactly one statement, so the completion of a statement
//! after its head is canonical; that makes held-out utility decidable by
//! exact match without executing anything.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const GRAMMAR_VERSION: u32 = 1;

/// Name of the pinned PRNG, recorded in dataset metadata.
pub const PRNG_NAME: &str = "chacha8";

pub const IDENTS: [&str; 26] = [
    "ax", "bee", "cod", "dig", "eel", "fox", "gap", "hut", "ice", "jug", "kit", "lop", "map",
    "nap", "oak", "pit", "quz", "rug", "sap", "tin", "urn", "vat", "wig", "xy", "yam", "zed",
];

pub const ARITH_FNS: [&str; 3] = ["add", "mul", "sub"];
pub const INFIX_OPS: [char; 4] = ['+', '-', '*', '/'];
pub const LIBS: [&str; 12] = [
    "net", "dbx", "uix", "fsx", "gfx", "sys", "app", "web", "rpc", "sql", "csv", "xml",
];
pub const API_FNS: [&str; 3] = ["get", "put", "run"];

/// Interface versions run 1..=8; at or above the split they are valid,
/// below it deprecated.
pub const VERSION_SPLIT: u8 = 5;
pub const MAX_VERSION: u8 = 8;

pub const INSECURE_FNS: [&str; 3] = ["unsafe_eval", "raw_exec", "weak_hash"];
pub const SECURE_FNS: [&str; 3] = ["safe_eval", "box_exec", "good_hash"];

/// Scanner patterns for the insecure task: a call to a flagged function.
pub fn insecure_patterns() -> Vec<String> {
    INSECURE_FNS.iter().map(|f| format!("{f}(")).collect()
}

/// A lexicon statement plus the head length at which eval prompts are cut.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexEntry {
    pub text: String,
    pub head_len: usize,
}

impl LexEntry {
    pub fn head(&self) -> &str {
        &self.text[..self.head_len]
    }

    pub fn tail(&self) -> &str {
        &self.text[self.head_len..]
    }
}

fn assign_statement(idx: usize) -> String {
    let ident = IDENTS[idx];
    let a = (3 * idx + 1) % 10;
    let b = (7 * idx + 4) % 10;
    if idx % 2 == 0 {
        let f = ARITH_FNS[idx % 3];
        format!("{ident}={f}({a},{b});")
    } else {
        let op = INFIX_OPS[(idx / 2) % 4];
        format!("{ident}={a}{op}{b};")
    }
}

fn decl_statement(idx: usize) -> String {
    let ident = IDENTS[idx];
    let c = (9 * idx + 2) % 10;
    format!("var {ident}={c};")
}

fn api_statement(lib_idx: usize) -> String {
    let lib = LIBS[lib_idx % LIBS.len()];
    let version = (lib_idx % 4) as u8 + VERSION_SPLIT;
    let f = API_FNS[lib_idx % 3];
    let ident = IDENTS[(lib_idx * 5) % IDENTS.len()];
    format!("{lib}.v{version}.{f}({ident});")
}

/// The retain statement lexicon: one assignment and one declaration per
/// identifier plus one call per library, each with its canonical cut.
pub fn retain_lexicon() -> Vec<LexEntry> {
    let mut out = Vec::new();
    for idx in 0..IDENTS.len() {
        let text = assign_statement(idx);
        let head_len = text.find('=').expect("assign has =") + 1;
        out.push(LexEntry { text, head_len });
    }
    for idx in 0..IDENTS.len() {
        let text = decl_statement(idx);
        let head_len = text.find('=').expect("decl has =") + 1;
        out.push(LexEntry { text, head_len });
    }
    for lib_idx in 0..6 {
        let text = api_statement(lib_idx);
        let head_len = text.find('v').expect("call has version") + 1;
        out.push(LexEntry { text, head_len });
    }
    out
}

/// A retain-lexicon program of `n_statements` newline-terminated statements.
pub fn retain_program(rng: &mut ChaCha8Rng, lexicon: &[LexEntry], n_statements: usize) -> String {
    let mut text = String::new();
    for _ in 0..n_statements {
        let entry = &lexicon[rng.gen_range(0..lexicon.len())];
        text.push_str(&entry.text);
        text.push('\n');
    }
    text
}

/// Forget identifiers: three-letter syllables disjoint from the retain pool.
pub fn forget_ident(rng: &mut ChaCha8Rng) -> String {
    const ONSET: [char; 6] = ['z', 'q', 'j', 'w', 'k', 'v'];
    const MID: [char; 6] = ['a', 'e', 'i', 'o', 'u', 'y'];
    const CODA: [char; 6] = ['x', 'z', 'q', 'w', 'p', 'm'];
    loop {
        let s: String = [
            ONSET[rng.gen_range(0..ONSET.len())],
            MID[rng.gen_range(0..MID.len())],
            CODA[rng.gen_range(0..CODA.len())],
        ]
        .iter()
        .collect();
        if !IDENTS.contains(&s.as_str()) {
            return s;
        }
    }
}

/// One unique forget statement: a call with two-digit arguments.
pub fn forget_statement(rng: &mut ChaCha8Rng) -> String {
    let ident = forget_ident(rng);
    let f = ARITH_FNS[rng.gen_range(0..ARITH_FNS.len())];
    let a = rng.gen_range(10..100);
    let b = rng.gen_range(10..100);
    format!("{ident}={f}({a},{b});")
}

// --- recognizer -------------------------------------------------------
//
// An independent parser over program text; the generators never call it.

struct Cursor<'a> {
    chars: Vec<char>,
    pos: usize,
    _line: &'a str,
}

impl<'a> Cursor<'a> {
    fn new(line: &'a str) -> Self {
        Self {
            chars: line.chars().collect(),
            pos: 0,
            _line: line,
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_str(&mut self, s: &str) -> bool {
        let save = self.pos;
        for c in s.chars() {
            if !self.eat(c) {
                self.pos = save;
                return false;
            }
        }
        true
    }

    fn eat_name(&mut self) -> bool {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_lowercase() || c == '_') {
            self.pos += 1;
        }
        self.pos > start
    }

    fn eat_number(&mut self) -> bool {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        let len = self.pos - start;
        (1..=2).contains(&len)
    }

    fn done(&self) -> bool {
        self.pos == self.chars.len()
    }
}

fn recognize_call_tail(cur: &mut Cursor) -> bool {
    // name "(" (num ["," num] | name) ");"
    if !cur.eat_name() || !cur.eat('(') {
        return false;
    }
    let arg_ok = if matches!(cur.peek(), Some(c) if c.is_ascii_digit()) {
        if !cur.eat_number() {
            return false;
        }
        if cur.eat(',') {
            cur.eat_number()
        } else {
            true
        }
    } else {
        cur.eat_name()
    };
    arg_ok && cur.eat_str(");")
}

fn recognize_line(line: &str) -> bool {
    // directive: "use " lib " v" digit ";"
    {
        let mut cur = Cursor::new(line);
        if cur.eat_str("use ")
            && cur.eat_name()
            && cur.eat_str(" v")
            && matches!(cur.peek(), Some(c) if c.is_ascii_digit())
        {
            cur.pos += 1;
            if cur.eat(';') && cur.done() {
                return true;
            }
        }
    }
    // declaration: "var " ident "=" num ";"
    {
        let mut cur = Cursor::new(line);
        if cur.eat_str("var ")
            && cur.eat_name()
            && cur.eat('=')
            && cur.eat_number()
            && cur.eat(';')
            && cur.done()
        {
            return true;
        }
    }
    // library call: lib ".v" digit "." name "(" (ident|num) ");"
    {
        let mut cur = Cursor::new(line);
        if cur.eat_name() && cur.eat_str(".v") {
            if matches!(cur.peek(), Some(c) if c.is_ascii_digit()) {
                cur.pos += 1;
                if cur.eat('.') && recognize_call_tail(&mut cur) && cur.done() {
                    return true;
                }
            }
        }
    }
    // assignment: ident "=" (call | num op num) ";"
    {
        let mut cur = Cursor::new(line);
        if cur.eat_name() && cur.eat('=') {
            let save = cur.pos;
            if recognize_call_tail(&mut cur) && cur.done() {
                return true;
            }
            cur.pos = save;
            if cur.eat_number()
                && matches!(cur.peek(), Some(c) if INFIX_OPS.contains(&c))
            {
                cur.pos += 1;
                if cur.eat_number() && cur.eat(';') && cur.done() {
                    return true;
                }
            }
        }
    }
    false
}

/// Whether every line of the program parses as a grammar statement.
pub fn recognize_program(text: &str) -> bool {
    let lines: Vec<&str> = text.split('\n').collect();
    if lines.is_empty() {
        return false;
    }
    // a well-formed program ends with a newline, leaving one empty tail
    let (body, tail) = lines.split_at(lines.len() - 1);
    if tail != [""] {
        return false;
    }
    !body.is_empty() && body.iter().all(|line| recognize_line(line))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn lexicon_heads_are_unique() {
        let lex = retain_lexicon();
        let mut heads: Vec<&str> = lex.iter().map(|e| e.head()).collect();
        heads.sort_unstable();
        let before = heads.len();
        heads.dedup();
        assert_eq!(before, heads.len());
    }

    #[test]
    fn lexicon_statements_parse() {
        for entry in retain_lexicon() {
            assert!(
                recognize_line(&entry.text),
                "unparsed statement {:?}",
                entry.text
            );
        }
    }

    #[test]
    fn forget_statements_parse_and_avoid_retain_idents() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let stmt = forget_statement(&mut rng);
            assert!(recognize_line(&stmt), "unparsed {stmt:?}");
            let ident = &stmt[..stmt.find('=').unwrap()];
            assert!(!IDENTS.contains(&ident));
        }
    }

    #[test]
    fn recognizer_rejects_garbage() {
        assert!(!recognize_line("kaboom"));
        assert!(!recognize_line("ax=add(1,2)"));
        assert!(!recognize_line("ax=add(123,2);"));
        assert!(!recognize_line("=add(1,2);"));
        assert!(!recognize_program("ax=add(1,4);"));
        assert!(!recognize_program(""));
    }

    #[test]
    fn generated_programs_are_recognized() {
        let lex = retain_lexicon();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n_stmts = rng.gen_range(4..=10);
            let program = retain_program(&mut rng, &lex, n_stmts);
            assert!(recognize_program(&program), "unparsed:\n{program}");
        }
    }

    #[test]
    fn statement_texts_fit_the_context_budget() {
        // head + tail must stay recoverable inside a 16-character window
        for entry in retain_lexicon() {
            assert!(entry.text.len() <= 16, "{:?}", entry.text);
        }
    }
}
