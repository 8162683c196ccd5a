//! Helpers for pulling YAML-ish documents out of free-form LLM responses.

use serde_yaml::Value;

/// A fenced code block found in a response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FencedBlock {
    pub info: String,
    pub content: String,
    /// Line range `[start, end]` of the fences themselves.
    pub start_line: usize,
    pub end_line: usize,
}

/// Splits `text` into fenced blocks. Fails on an unterminated fence.
pub fn fenced_blocks(text: &str) -> Result<Vec<FencedBlock>, String> {
    let lines: Vec<&str> = text.lines().collect();
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let Some((fence, info)) = fence_open(lines[i]) else {
            i += 1;
            continue;
        };
        let start = i;
        let mut end = None;
        for (j, line) in lines.iter().enumerate().skip(i + 1) {
            if is_fence_close(line, &fence) {
                end = Some(j);
                break;
            }
        }
        let Some(end) = end else {
            return Err(format!("unterminated code fence opened on line {}", start + 1));
        };
        let mut content = lines[start + 1..end].join("\n");
        if end > start + 1 {
            content.push('\n');
        }
        blocks.push(FencedBlock {
            info,
            content,
            start_line: start,
            end_line: end,
        });
        i = end + 1;
    }
    Ok(blocks)
}

fn fence_open(line: &str) -> Option<(String, String)> {
    let t = line.trim_start();
    let ch = t.chars().next().filter(|c| *c == '`' || *c == '~')?;
    let len = t.chars().take_while(|c| *c == ch).count();
    if len < 3 {
        return None;
    }
    let fence: String = ch.to_string().repeat(len);
    let info = t[fence.len()..].trim().to_string();
    if ch == '`' && info.contains('`') {
        return None;
    }
    Some((fence, info))
}

fn is_fence_close(line: &str, fence: &str) -> bool {
    let t = line.trim();
    let ch = fence.chars().next().unwrap_or('`');
    t.len() >= fence.len() && t.chars().all(|c| c == ch)
}

/// Removes one pair of surrounding double quotes and trims whitespace.
pub fn clean_text(s: &str) -> String {
    let t = s.trim();
    let t = if t.len() >= 2 && t.starts_with('"') && t.ends_with('"') {
        &t[1..t.len() - 1]
    } else {
        t
    };
    t.trim().to_string()
}

/// Extracts the YAML document that starts at the first line whose key is
/// one of `keys`. The document continues over blank lines, more-indented
/// lines, and further `key:` lines at the same indentation; anything else
/// ends it.
pub fn yaml_region(text: &str, keys: &[&str]) -> Option<(usize, String)> {
    let lines: Vec<&str> = text.lines().collect();
    let (start, indent) = lines.iter().enumerate().find_map(|(i, line)| {
        let trimmed = line.trim_start();
        let indent = line.len() - trimmed.len();
        keys.iter()
            .any(|k| {
                trimmed
                    .strip_prefix(k)
                    .is_some_and(|rest| rest.trim_start().starts_with(':'))
            })
            .then_some((i, indent))
    })?;
    let mut out = String::new();
    for line in &lines[start..] {
        if line.trim().is_empty() {
            out.push('\n');
            continue;
        }
        let trimmed = line.trim_start();
        let this_indent = line.len() - trimmed.len();
        if this_indent < indent {
            break;
        }
        let body = &line[indent..];
        if this_indent == indent && !looks_like_key(body) && !body.starts_with("- ") && body != "-" {
            break;
        }
        out.push_str(body);
        out.push('\n');
    }
    Some((start, out))
}

fn looks_like_key(line: &str) -> bool {
    let Some((key, _)) = line.split_once(':') else {
        return false;
    };
    !key.is_empty() && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Renders a scalar as a YAML block value: a folded single line when the
/// text has no newline, a literal block otherwise. The text is wrapped in
/// double quotes, which [`clean_text`] strips again.
pub fn block_scalar(text: &str, indent: usize) -> String {
    let pad = " ".repeat(indent);
    let quoted = format!("\"{text}\"");
    if !quoted.contains('\n') {
        return format!(">-\n{pad}{quoted}\n");
    }
    let mut out = String::from("|-\n");
    for line in quoted.split('\n') {
        if line.is_empty() {
            out.push('\n');
        } else {
            out.push_str(&pad);
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

/// Renders a YAML scalar as plain text, numbers and booleans included.
pub fn scalar_string(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Reads a number from a YAML value, accepting numeric strings with an
/// optional trailing `%`.
pub fn scalar_number(value: &Value) -> Option<f64> {
    match value {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().trim_end_matches('%').trim().parse().ok(),
        _ => None,
    }
    .filter(|v: &f64| v.is_finite())
}
