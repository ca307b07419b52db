//! Best-effort conversion of LMS rich-text page bodies into plain text.

const BLOCK_TAGS: &[&str] = &[
    "address", "article", "aside", "blockquote", "caption", "dd", "div", "dl", "dt",
    "fieldset", "figcaption", "figure", "footer", "form", "h1", "h2", "h3", "h4", "h5", "h6",
    "header", "hr", "li", "main", "nav", "ol", "p", "pre", "section", "table", "tbody",
    "thead", "tfoot", "tr", "ul",
];

const CELL_TAGS: &[&str] = &["td", "th"];

const SKIPPED_CONTENT_TAGS: &[&str] = &["script", "style", "head", "title"];

/// Strip tags, turn block elements into line breaks, decode entities and
/// collapse runs of blank lines into a single blank line.
pub fn strip_markup(raw: &str) -> String {
    let mut out = LineBuilder::default();
    let bytes = raw.as_bytes();
    let mut i = 0;

    while i < raw.len() {
        let rest = &raw[i..];
        let c = rest.chars().next().expect("non-empty remainder");

        if c == '<' {
            if let Some(consumed) = handle_markup(rest, &mut out) {
                i += consumed;
                continue;
            }
        } else if c == '&' {
            if let Some((decoded, consumed)) = decode_entity(rest) {
                out.push_char(decoded);
                i += consumed;
                continue;
            }
        }

        out.push_char(c);
        i += c.len_utf8();
        debug_assert!(i <= bytes.len());
    }

    out.finish()
}

/// Returns the number of bytes consumed when `rest` starts with a tag,
/// comment or declaration; `None` if the `<` is literal text.
fn handle_markup(rest: &str, out: &mut LineBuilder) -> Option<usize> {
    if let Some(body) = rest.strip_prefix("<!--") {
        let end = body.find("-->").map(|p| p + 3).unwrap_or(body.len());
        return Some(4 + end);
    }

    let second = rest[1..].chars().next()?;
    if !(second.is_ascii_alphabetic() || second == '/' || second == '!' || second == '?') {
        return None;
    }
    let close = rest.find('>')?;
    let inner = &rest[1..close];
    let closing = inner.starts_with('/');
    let name: String = inner
        .trim_start_matches(['/', '!', '?'])
        .chars()
        .take_while(|ch| ch.is_ascii_alphanumeric())
        .collect::<String>()
        .to_ascii_lowercase();

    let mut consumed = close + 1;

    if !closing && SKIPPED_CONTENT_TAGS.contains(&name.as_str()) && !inner.ends_with('/') {
        let end_tag = format!("</{name}");
        let after = &rest[consumed..];
        let lower = after.to_ascii_lowercase();
        match lower.find(&end_tag) {
            Some(pos) => {
                let tail = &after[pos..];
                let gt = tail.find('>').map(|p| p + 1).unwrap_or(tail.len());
                consumed += pos + gt;
            }
            None => consumed = rest.len(),
        }
        return Some(consumed);
    }

    if name == "br" {
        out.hard_break();
    } else if BLOCK_TAGS.contains(&name.as_str()) {
        out.soft_break();
    } else if CELL_TAGS.contains(&name.as_str()) {
        out.space();
    }
    Some(consumed)
}

fn decode_entity(rest: &str) -> Option<(char, usize)> {
    let semi = rest[1..].find(';')? + 1;
    if semi > 12 {
        return None;
    }
    let name = &rest[1..semi];
    let decoded = if let Some(num) = name.strip_prefix('#') {
        let code = match num.strip_prefix(['x', 'X']) {
            Some(hex) => u32::from_str_radix(hex, 16).ok()?,
            None => num.parse::<u32>().ok()?,
        };
        char::from_u32(code)?
    } else {
        match name {
            "amp" => '&',
            "lt" => '<',
            "gt" => '>',
            "quot" => '"',
            "apos" => '\'',
            "nbsp" => ' ',
            "ndash" => '\u{2013}',
            "mdash" => '\u{2014}',
            "hellip" => '\u{2026}',
            "lsquo" => '\u{2018}',
            "rsquo" => '\u{2019}',
            "ldquo" => '\u{201c}',
            "rdquo" => '\u{201d}',
            "copy" => '\u{a9}',
            "reg" => '\u{ae}',
            "euro" => '\u{20ac}',
            "bull" => '\u{2022}',
            "middot" => '\u{b7}',
            "times" => '\u{d7}',
            _ => return None,
        }
    };
    Some((decoded, semi + 1))
}

#[derive(Default)]
struct LineBuilder {
    lines: Vec<String>,
    current: String,
    pending_space: bool,
}

impl LineBuilder {
    fn push_char(&mut self, c: char) {
        if c == '\n' {
            self.hard_break();
        } else if c.is_whitespace() {
            self.space();
        } else {
            if self.pending_space && !self.current.is_empty() {
                self.current.push(' ');
            }
            self.pending_space = false;
            self.current.push(c);
        }
    }

    fn space(&mut self) {
        self.pending_space = true;
    }

    /// Ends the current line only if it has content, so adjacent block
    /// boundaries merge into one break.
    fn soft_break(&mut self) {
        if !self.current.is_empty() {
            self.hard_break();
        }
        self.pending_space = false;
    }

    fn hard_break(&mut self) {
        self.lines.push(std::mem::take(&mut self.current));
        self.pending_space = false;
    }

    fn finish(mut self) -> String {
        if !self.current.is_empty() {
            self.lines.push(std::mem::take(&mut self.current));
        }
        let mut result: Vec<&str> = Vec::with_capacity(self.lines.len());
        for line in &self.lines {
            let line = line.trim();
            if line.is_empty() && result.last().is_none_or(|l| l.is_empty()) {
                continue;
            }
            result.push(line);
        }
        while result.last().is_some_and(|l| l.is_empty()) {
            result.pop();
        }
        result.join("\n")
    }
}
