//! Ink export, plus a parser and walker for the small Ink subset we emit:
//! a start divert, knots, text lines, and choices that either divert to a
//! knot or close with an epilogue and `-> END`.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use super::{choices, epilogue, narration_for, node_order, ExportError, Playthroughs};
use crate::narrator::Narrations;
use crate::plot_tree::{BranchingPlotTree, Target};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("ink line {line}: {message}")]
pub struct InkError {
    pub line: usize,
    pub message: String,
}

/// Knot name for a node id: characters outside `[A-Za-z0-9_]` become `_`,
/// and a leading digit gets an `n_` prefix.
pub fn knot_name(id: &str) -> String {
    let mut name: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect();
    if name.is_empty() || name.starts_with(|c: char| c.is_ascii_digit()) {
        name.insert_str(0, "n_");
    }
    name
}

/// Backslash-escapes characters Ink would otherwise read as markup.
pub fn escape(text: &str) -> String {
    let chars: Vec<char> = text.trim().chars().collect();
    let mut out = String::with_capacity(text.len());
    for (i, &c) in chars.iter().enumerate() {
        let prev = i.checked_sub(1).map(|j| chars[j]);
        let next = chars.get(i + 1).copied();
        let special = matches!(c, '\\' | '{' | '}' | '[' | ']' | '|' | '#' | '~')
            || (c == '/' && matches!(next, Some('/' | '*')))
            || (c == '>' && matches!(prev, Some('-' | '<')))
            || (i == 0 && matches!(c, '*' | '+' | '-' | '=' | '<' | '>' | '('));
        if special {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

fn unescape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(n) = chars.next() {
                out.push(n);
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Text markup that must not appear unescaped in our output.
fn unescaped_markup(text: &str) -> Option<&'static str> {
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        match chars[i] {
            '\\' => i += 1,
            '{' | '}' => return Some("logic braces"),
            '[' | ']' => return Some("square brackets"),
            '|' => return Some("alternatives bar"),
            '#' => return Some("tag marker"),
            '~' => return Some("logic line marker"),
            '-' if chars.get(i + 1) == Some(&'>') => return Some("divert arrow"),
            '<' if chars.get(i + 1) == Some(&'>') => return Some("glue"),
            '/' if matches!(chars.get(i + 1), Some('/' | '*')) => return Some("comment"),
            _ => {}
        }
        i += 1;
    }
    None
}

pub fn export_ink(tree: &BranchingPlotTree, narrations: &Narrations) -> Result<String, ExportError> {
    let mut owners: BTreeMap<String, &str> = BTreeMap::new();
    for id in tree.nodes.keys() {
        let name = knot_name(id);
        if let Some(first) = owners.insert(name.clone(), id) {
            return Err(ExportError::NameCollision {
                first: first.to_string(),
                second: id.clone(),
                name,
            });
        }
    }
    let mut out = String::new();
    writeln!(out, "// {}", tree.title.replace('\n', " ")).expect("string write");
    writeln!(out, "-> {}", knot_name(&tree.root)).expect("string write");
    for node in node_order(tree) {
        let narration = narration_for(narrations, &node.id)?;
        write!(out, "\n=== {} ===\n", knot_name(&node.id)).expect("string write");
        for paragraph in narration.paragraph_list() {
            writeln!(out, "{}\n", escape(paragraph)).expect("string write");
        }
        for (edge, label) in choices(tree, narration) {
            match &edge.to_target {
                Target::Node(next) => writeln!(out, "* [{}] -> {}", escape(label), knot_name(next)),
                Target::End => writeln!(
                    out,
                    "* [{}]\n    {}\n    -> END",
                    escape(label),
                    escape(&epilogue(edge))
                ),
            }
            .expect("string write");
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Divert {
    Knot(String),
    End,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InkChoice {
    pub label: String,
    /// Lines shown after the choice is taken, before the divert.
    pub body: Vec<String>,
    pub divert: Divert,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Knot {
    pub name: String,
    pub text: Vec<String>,
    pub choices: Vec<InkChoice>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InkScript {
    pub start: String,
    pub knots: Vec<Knot>,
}

fn knot_header() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^===\s*([A-Za-z_][A-Za-z0-9_]*)\s*===$").expect("valid regex"))
}

fn divert_target(rest: &str, line: usize) -> Result<Divert, InkError> {
    let target = rest.trim();
    if target == "END" {
        return Ok(Divert::End);
    }
    let valid = !target.is_empty()
        && !target.starts_with(|c: char| c.is_ascii_digit())
        && target.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    if valid {
        Ok(Divert::Knot(target.to_string()))
    } else {
        Err(InkError {
            line,
            message: format!("bad divert target `{target}`"),
        })
    }
}

/// Splits `[label] rest` at the first unescaped `]`.
fn split_label(s: &str) -> Option<(&str, &str)> {
    let body = s.strip_prefix('[')?;
    let mut escaped = false;
    for (i, c) in body.char_indices() {
        match c {
            _ if escaped => escaped = false,
            '\\' => escaped = true,
            ']' => return Some((&body[..i], &body[i + 1..])),
            _ => {}
        }
    }
    None
}

impl InkScript {
    /// Parses and checks a script: every divert must reach a knot or END
    /// and every knot must offer at least one choice.
    pub fn parse(source: &str) -> Result<InkScript, InkError> {
        let err = |line: usize, message: &str| InkError {
            line,
            message: message.to_string(),
        };
        let mut start = None;
        let mut knots: Vec<Knot> = Vec::new();
        let mut open_choice: Option<(usize, InkChoice)> = None;
        for (index, raw) in source.lines().enumerate() {
            let line = index + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() {
                continue;
            }
            let indented = raw.starts_with([' ', '\t']);
            if let Some((_, choice)) = open_choice.as_mut() {
                if !indented {
                    return Err(err(line, "choice body must end with a divert"));
                }
                if let Some(rest) = trimmed.strip_prefix("->") {
                    choice.divert = divert_target(rest, line)?;
                    let (_, done) = open_choice.take().expect("open choice");
                    knots.last_mut().expect("choice inside knot").choices.push(done);
                } else {
                    if let Some(what) = unescaped_markup(trimmed) {
                        return Err(err(line, &format!("unescaped {what} in text")));
                    }
                    choice.body.push(unescape(trimmed));
                }
                continue;
            }
            if let Some(c) = knot_header().captures(trimmed) {
                let name = c[1].to_string();
                if knots.iter().any(|k| k.name == name) {
                    return Err(err(line, &format!("duplicate knot `{name}`")));
                }
                knots.push(Knot {
                    name,
                    text: Vec::new(),
                    choices: Vec::new(),
                });
                continue;
            }
            let Some(knot) = knots.last_mut() else {
                if trimmed.starts_with("//") {
                    continue;
                }
                if let Some(rest) = trimmed.strip_prefix("->") {
                    if start.is_some() {
                        return Err(err(line, "second start divert"));
                    }
                    match divert_target(rest, line)? {
                        Divert::Knot(name) => start = Some(name),
                        Divert::End => return Err(err(line, "the story cannot start at END")),
                    }
                    continue;
                }
                return Err(err(line, "text before the first knot"));
            };
            if let Some(rest) = trimmed.strip_prefix('*') {
                let (label, after) =
                    split_label(rest.trim_start()).ok_or_else(|| err(line, "choice needs a [label]"))?;
                if let Some(what) = unescaped_markup(label) {
                    return Err(err(line, &format!("unescaped {what} in choice label")));
                }
                let choice = InkChoice {
                    label: unescape(label.trim()),
                    body: Vec::new(),
                    divert: Divert::End,
                };
                let after = after.trim();
                if let Some(rest) = after.strip_prefix("->") {
                    knot.choices.push(InkChoice {
                        divert: divert_target(rest, line)?,
                        ..choice
                    });
                } else if after.is_empty() {
                    open_choice = Some((line, choice));
                } else {
                    return Err(err(line, "unexpected text after choice label"));
                }
                continue;
            }
            if !knot.choices.is_empty() {
                return Err(err(line, "text after the choices of a knot"));
            }
            if let Some(what) = unescaped_markup(trimmed) {
                return Err(err(line, &format!("unescaped {what} in text")));
            }
            knot.text.push(unescape(trimmed));
        }
        if let Some((line, _)) = open_choice {
            return Err(err(line, "choice body must end with a divert"));
        }
        let start = start.ok_or_else(|| err(1, "missing start divert"))?;
        let names: HashSet<&str> = knots.iter().map(|k| k.name.as_str()).collect();
        if !names.contains(start.as_str()) {
            return Err(err(1, &format!("start divert to unknown knot `{start}`")));
        }
        for knot in &knots {
            if knot.choices.is_empty() {
                return Err(err(0, &format!("knot `{}` has no choices", knot.name)));
            }
            for choice in &knot.choices {
                if let Divert::Knot(target) = &choice.divert {
                    if !names.contains(target.as_str()) {
                        return Err(err(0, &format!("knot `{}` diverts to unknown `{target}`", knot.name)));
                    }
                }
            }
        }
        Ok(InkScript { start, knots })
    }

    pub fn knot(&self, name: &str) -> Option<&Knot> {
        self.knots.iter().find(|k| k.name == name)
    }
}

/// Takes every choice from the start knot; the epilogue is the body of the
/// final choice.
pub fn ink_playthroughs(script: &InkScript) -> Result<Playthroughs, ExportError> {
    fn walk(
        script: &InkScript,
        name: &str,
        labels: &mut Vec<String>,
        on_path: &mut HashSet<String>,
        out: &mut Playthroughs,
    ) -> Result<(), ExportError> {
        let knot = script.knot(name).ok_or_else(|| ExportError::DeadLink {
            passage: labels.last().cloned().unwrap_or_default(),
            target: name.to_string(),
        })?;
        if !on_path.insert(name.to_string()) {
            return Err(ExportError::Cycle(name.to_string()));
        }
        for choice in &knot.choices {
            labels.push(choice.label.clone());
            match &choice.divert {
                Divert::End => {
                    out.insert(labels.clone(), choice.body.join("\n"));
                }
                Divert::Knot(next) => walk(script, next, labels, on_path, out)?,
            }
            labels.pop();
        }
        on_path.remove(name);
        Ok(())
    }

    let mut out = Playthroughs::new();
    walk(script, &script.start, &mut Vec::new(), &mut HashSet::new(), &mut out)?;
    Ok(out)
}
