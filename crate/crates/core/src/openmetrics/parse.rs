use std::collections::HashSet;

use super::{
    check_value, is_label_name, is_metric_name, is_unit, CodecError, Exposition, LabelSet,
    MetricFamily, MetricType, Sample, Timestamp,
};

/// Parses a complete exposition. Samples without a timestamp keep `None`.
pub fn parse_exposition(text: &str) -> Result<Exposition, CodecError> {
    parse_exposition_with_default(text, None)
}

/// Parses a complete exposition, stamping samples that carry no timestamp
/// with `default_timestamp` when one is given.
pub fn parse_exposition_with_default(
    text: &str,
    default_timestamp: Option<Timestamp>,
) -> Result<Exposition, CodecError> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Err(CodecError::Semantic("missing # EOF terminator".into()));
    }
    let lines: Vec<&str> = body.split('\n').collect();
    let mut builder = Builder::default();
    let mut terminated = false;

    for (i, line) in lines.iter().enumerate() {
        let lineno = i + 1;
        if *line == "# EOF" {
            if i + 1 != lines.len() {
                return Err(CodecError::Syntax {
                    line: lineno + 1,
                    column: 1,
                    reason: "content after # EOF".into(),
                });
            }
            terminated = true;
            break;
        }
        let mut cur = Cursor::new(line, lineno);
        if line.starts_with('#') {
            builder.metadata(&mut cur)?;
        } else {
            builder.sample(&mut cur, default_timestamp)?;
        }
    }
    if !terminated {
        return Err(CodecError::Semantic("missing # EOF terminator".into()));
    }
    Ok(Exposition {
        families: builder.families,
    })
}

#[derive(Default)]
struct Builder {
    families: Vec<MetricFamily>,
    names: HashSet<String>,
    current: Option<Current>,
}

#[derive(Default)]
struct Current {
    has_type: bool,
    has_help: bool,
    has_unit: bool,
    has_samples: bool,
    seen: HashSet<(String, LabelSet, Option<Timestamp>)>,
}

enum Meta {
    Type,
    Help,
    Unit,
}

impl Builder {
    fn metadata(&mut self, cur: &mut Cursor<'_>) -> Result<(), CodecError> {
        cur.expect("# ")?;
        let keyword_col = cur.pos;
        let kind = match cur.take_while(|c| c.is_ascii_uppercase()) {
            "TYPE" => Meta::Type,
            "HELP" => Meta::Help,
            "UNIT" => Meta::Unit,
            _ => return Err(cur.error_at(keyword_col, "expected TYPE, HELP, UNIT or EOF")),
        };
        cur.expect(" ")?;
        let name = cur.metric_name()?;
        cur.expect(" ")?;
        let arg_col = cur.pos;
        let arg = cur.rest();
        let mtype = match kind {
            Meta::Type => Some(
                MetricType::from_token(arg)
                    .ok_or_else(|| cur.error_at(arg_col, "unknown metric type"))?,
            ),
            Meta::Unit if !is_unit(arg) => return Err(cur.error_at(arg_col, "invalid unit")),
            _ => None,
        };

        let idx = self.family_for_metadata(name)?;
        let state = self.current.as_mut().expect("current family");
        let fam = &mut self.families[idx];
        let duplicate = match kind {
            Meta::Type => std::mem::replace(&mut state.has_type, true),
            Meta::Help => std::mem::replace(&mut state.has_help, true),
            Meta::Unit => std::mem::replace(&mut state.has_unit, true),
        };
        if duplicate {
            return Err(CodecError::Semantic(format!(
                "repeated metadata for `{name}`"
            )));
        }
        match kind {
            Meta::Type => fam.mtype = mtype.expect("type token"),
            Meta::Help => fam.help = Some(arg.to_string()),
            Meta::Unit => {
                if !name.ends_with(&format!("_{arg}")) {
                    return Err(CodecError::Semantic(format!(
                        "family `{name}` does not end with unit `{arg}`"
                    )));
                }
                fam.unit = Some(arg.to_string());
            }
        }
        Ok(())
    }

    fn family_for_metadata(&mut self, name: &str) -> Result<usize, CodecError> {
        if let (Some(state), Some(last)) = (&self.current, self.families.last()) {
            if last.name == name {
                if state.has_samples {
                    return Err(CodecError::Semantic(format!(
                        "metadata for `{name}` after its samples"
                    )));
                }
                return Ok(self.families.len() - 1);
            }
        }
        self.open_family(name)
    }

    fn open_family(&mut self, name: &str) -> Result<usize, CodecError> {
        if !self.names.insert(name.to_string()) {
            return Err(CodecError::Semantic(format!(
                "duplicate or interleaved family `{name}`"
            )));
        }
        self.families
            .push(MetricFamily::new(name, MetricType::Unknown));
        self.current = Some(Current::default());
        Ok(self.families.len() - 1)
    }

    fn sample(
        &mut self,
        cur: &mut Cursor<'_>,
        default_timestamp: Option<Timestamp>,
    ) -> Result<(), CodecError> {
        let name = cur.metric_name()?;
        let labels = if cur.peek() == Some('{') {
            cur.labels()?
        } else {
            LabelSet::new()
        };
        cur.expect(" ")?;
        let value_col = cur.pos;
        let value = parse_number(cur.take_while(|c| c != ' '))
            .ok_or_else(|| cur.error_at(value_col, "invalid value"))?;
        let timestamp = if cur.at_end() {
            default_timestamp
        } else {
            cur.expect(" ")?;
            let ts_col = cur.pos;
            Some(
                parse_timestamp(cur.rest())
                    .ok_or_else(|| cur.error_at(ts_col, "invalid timestamp"))?,
            )
        };

        let matched = self.families.last().and_then(|fam| {
            let suffix = name.strip_prefix(fam.name.as_str())?;
            fam.mtype.accepts_suffix(suffix).then(|| suffix.to_string())
        });
        let suffix = match matched {
            Some(suffix) if self.current.is_some() => suffix,
            _ => {
                self.open_family(name)?;
                String::new()
            }
        };
        let fam = self.families.last_mut().expect("open family");
        let state = self.current.as_mut().expect("current family");
        check_value(&fam.name, fam.mtype, value).map_err(CodecError::Semantic)?;
        if !state
            .seen
            .insert((suffix.clone(), labels.clone(), timestamp))
        {
            return Err(CodecError::Semantic(format!(
                "duplicate sample in `{}`",
                fam.name
            )));
        }
        state.has_samples = true;
        fam.samples.push(Sample {
            suffix,
            labels,
            value,
            timestamp,
        });
        Ok(())
    }
}

struct Cursor<'a> {
    line: &'a str,
    pos: usize,
    lineno: usize,
}

impl<'a> Cursor<'a> {
    fn new(line: &'a str, lineno: usize) -> Self {
        Cursor {
            line,
            pos: 0,
            lineno,
        }
    }

    fn error_at(&self, pos: usize, reason: &str) -> CodecError {
        CodecError::Syntax {
            line: self.lineno,
            column: pos + 1,
            reason: reason.to_string(),
        }
    }

    fn error(&self, reason: &str) -> CodecError {
        self.error_at(self.pos, reason)
    }

    fn peek(&self) -> Option<char> {
        self.line[self.pos..].chars().next()
    }

    fn at_end(&self) -> bool {
        self.pos == self.line.len()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn expect(&mut self, s: &str) -> Result<(), CodecError> {
        if self.line[self.pos..].starts_with(s) {
            self.pos += s.len();
            Ok(())
        } else {
            Err(self.error(&format!("expected `{}`", s.escape_debug())))
        }
    }

    fn take_while(&mut self, pred: impl Fn(char) -> bool) -> &'a str {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if !pred(c) {
                break;
            }
            self.pos += c.len_utf8();
        }
        &self.line[start..self.pos]
    }

    fn rest(&mut self) -> &'a str {
        let rest = &self.line[self.pos..];
        self.pos = self.line.len();
        rest
    }

    fn metric_name(&mut self) -> Result<&'a str, CodecError> {
        let start = self.pos;
        let name = self.take_while(|c| c.is_ascii_alphanumeric() || c == '_' || c == ':');
        if is_metric_name(name) {
            Ok(name)
        } else {
            Err(self.error_at(start, "invalid metric name"))
        }
    }

    fn labels(&mut self) -> Result<LabelSet, CodecError> {
        self.expect("{")?;
        let mut set = LabelSet::new();
        loop {
            let start = self.pos;
            let name = self.take_while(|c| c.is_ascii_alphanumeric() || c == '_');
            if !is_label_name(name) {
                return Err(self.error_at(start, "invalid label name"));
            }
            self.expect("=\"")?;
            let value = self.label_value()?;
            if set.get(name).is_some() {
                return Err(self.error_at(start, "duplicate label name"));
            }
            set.insert(name, value).expect("validated label name");
            match self.bump() {
                Some(',') => continue,
                Some('}') => return Ok(set),
                _ => return Err(self.error_at(self.pos.saturating_sub(1), "expected `,` or `}`")),
            }
        }
    }

    fn label_value(&mut self) -> Result<String, CodecError> {
        let mut out = String::new();
        loop {
            match self.bump() {
                None => return Err(self.error("unterminated label value")),
                Some('"') => return Ok(out),
                Some('\\') => match self.bump() {
                    Some('\\') => out.push('\\'),
                    Some('"') => out.push('"'),
                    Some('n') => out.push('\n'),
                    _ => {
                        return Err(
                            self.error_at(self.pos.saturating_sub(1), "invalid escape sequence")
                        )
                    }
                },
                Some(c) => out.push(c),
            }
        }
    }
}

/// Strict decimal grammar: `[+-]?(d+(.d*)?|.d+)([eE][+-]?d+)?`, plus the
/// OpenMetrics `Inf`/`NaN` spellings (rejected later as non-finite).
fn parse_number(tok: &str) -> Option<f64> {
    let unsigned = tok.strip_prefix(['+', '-']).unwrap_or(tok);
    if unsigned == "Inf" {
        return Some(if tok.starts_with('-') {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        });
    }
    if tok == "NaN" {
        return Some(f64::NAN);
    }
    let b = unsigned.as_bytes();
    let mut i = 0;
    let digits = |i: &mut usize| {
        let s = *i;
        while *i < b.len() && b[*i].is_ascii_digit() {
            *i += 1;
        }
        *i - s
    };
    let int_digits = digits(&mut i);
    let mut frac_digits = 0;
    if i < b.len() && b[i] == b'.' {
        i += 1;
        frac_digits = digits(&mut i);
    }
    if int_digits + frac_digits == 0 {
        return None;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        if digits(&mut i) == 0 {
            return None;
        }
    }
    if i != b.len() {
        return None;
    }
    tok.parse().ok()
}

/// Integer tokens are milliseconds; tokens with a fractional part are
/// seconds, converted to milliseconds rounding half to even.
fn parse_timestamp(tok: &str) -> Option<Timestamp> {
    let (int, frac) = match tok.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (tok, None),
    };
    if int.is_empty() || !int.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let int: i64 = int.parse().ok()?;
    let Some(frac) = frac else {
        return Some(int);
    };
    if frac.is_empty() || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let (head, tail) = frac.split_at(frac.len().min(3));
    let mut millis: i64 = format!("{head:0<3}").parse().ok()?;
    let mut tail = tail.bytes();
    let round_up = match tail.next() {
        None => false,
        Some(d) if d > b'5' => true,
        Some(d) if d < b'5' => false,
        Some(_) => tail.any(|d| d != b'0') || millis % 2 == 1,
    };
    if round_up {
        millis += 1;
    }
    int.checked_mul(1000)?.checked_add(millis)
}
