use std::fmt::Write as _;

use super::{CodecError, Exposition, LabelSet};

/// Renders an exposition in the text format, terminated by `# EOF\n`.
///
/// Every family gets a `# TYPE` line; labels are written in canonical order.
pub fn serialize_exposition(e: &Exposition) -> Result<String, CodecError> {
    e.validate()?;
    let mut out = String::new();
    for fam in &e.families {
        let _ = writeln!(out, "# TYPE {} {}", fam.name, fam.mtype);
        if let Some(help) = &fam.help {
            let _ = writeln!(out, "# HELP {} {}", fam.name, help);
        }
        if let Some(unit) = &fam.unit {
            let _ = writeln!(out, "# UNIT {} {}", fam.name, unit);
        }
        for s in &fam.samples {
            out.push_str(&fam.name);
            out.push_str(&s.suffix);
            write_labels(&mut out, &s.labels);
            let _ = write!(out, " {}", s.value);
            if let Some(ts) = s.timestamp {
                let _ = write!(out, " {ts}");
            }
            out.push('\n');
        }
    }
    out.push_str("# EOF\n");
    Ok(out)
}

fn write_labels(out: &mut String, labels: &LabelSet) {
    if labels.is_empty() {
        return;
    }
    out.push('{');
    for (i, (k, v)) in labels.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(k);
        out.push_str("=\"");
        for c in v.chars() {
            match c {
                '\\' => out.push_str("\\\\"),
                '"' => out.push_str("\\\""),
                '\n' => out.push_str("\\n"),
                c => out.push(c),
            }
        }
        out.push('"');
    }
    out.push('}');
}
