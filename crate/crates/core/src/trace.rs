//! Parser for the `.mtr` trace format.
//!
//! ```text
//! alloc r0 40
//! st r1 [r0, #8] w8 p1     # comments run to end of line
//! halt
//! ```

use thiserror::Error;

use crate::isa::{Instruction, MemAccess, Offset, Program, ProgramError, Reg, Width};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

fn err<T>(line: usize, message: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError {
        line,
        message: message.into(),
    })
}

fn parse_reg(tok: &str, line: usize) -> Result<Reg, ParseError> {
    let Some(digits) = tok.strip_prefix('r') else {
        return err(line, format!("expected register, found `{tok}`"));
    };
    let n: u64 = digits
        .parse()
        .or_else(|_| err(line, format!("expected register, found `{tok}`")))?;
    u8::try_from(n)
        .ok()
        .and_then(|n| Reg::new(n).ok())
        .map_or_else(|| err(line, format!("register r{n} out of range")), Ok)
}

fn parse_int(tok: &str, line: usize) -> Result<i64, ParseError> {
    let (neg, body) = match tok.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, tok),
    };
    let magnitude = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(&hex.replace('_', ""), 16)
    } else {
        body.replace('_', "").parse::<u64>()
    };
    let Ok(magnitude) = magnitude else {
        return err(line, format!("invalid integer `{tok}`"));
    };
    let v = magnitude as i64;
    Ok(if neg { v.wrapping_neg() } else { v })
}

fn parse_size(tok: &str, line: usize) -> Result<u64, ParseError> {
    let v = parse_int(tok, line)?;
    if v < 0 {
        return err(line, format!("invalid size `{tok}`"));
    }
    Ok(v as u64)
}

fn arity(toks: &[&str], n: usize, line: usize) -> Result<(), ParseError> {
    if toks.len() == n {
        Ok(())
    } else {
        err(line, format!("`{}` takes {} operand(s), found {}", toks[0], n - 1, toks.len() - 1))
    }
}

/// Splits a line into tokens, treating `[`, `]` and `,` as separators while
/// keeping the bracketed address operand recognizable.
fn tokenize(text: &str) -> Vec<String> {
    let mut toks = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        match ch {
            '[' | ']' => {
                if !cur.is_empty() {
                    toks.push(std::mem::take(&mut cur));
                }
                toks.push(ch.to_string());
            }
            ',' => {
                if !cur.is_empty() {
                    toks.push(std::mem::take(&mut cur));
                }
            }
            c if c.is_whitespace() => {
                if !cur.is_empty() {
                    toks.push(std::mem::take(&mut cur));
                }
            }
            c => cur.push(c),
        }
    }
    if !cur.is_empty() {
        toks.push(cur);
    }
    toks
}

fn parse_mem(toks: &[&str], line: usize) -> Result<MemAccess, ParseError> {
    // op reg [ base offset ] wN [pN] [atomic] [overread_ok]
    if toks.len() < 7 || toks[2] != "[" || toks[5] != "]" {
        return err(line, format!("malformed address operand in `{}`", toks.join(" ")));
    }
    let reg = parse_reg(toks[1], line)?;
    let base = parse_reg(toks[3], line)?;
    let offset = match toks[4].strip_prefix('#') {
        Some(imm) => Offset::Imm(parse_int(imm, line)?),
        None => Offset::Reg(parse_reg(toks[4], line)?),
    };

    let mut width = None;
    let mut pair = None;
    let mut atomic = false;
    let mut overread_ok = false;
    for &t in &toks[6..] {
        match t {
            "atomic" => atomic = true,
            "overread_ok" => overread_ok = true,
            _ if t.starts_with('w') && width.is_none() => {
                let n = t[1..].parse::<u64>().or_else(|_| err(line, format!("invalid width `{t}`")))?;
                width = Some(Width::from_bytes(n).map_or_else(|| err(line, format!("invalid width {n}")), Ok)?);
            }
            _ if t.starts_with('p') && pair.is_none() => {
                let n = t[1..].parse::<u8>().or_else(|_| err(line, format!("invalid pair count `{t}`")))?;
                if n != 1 && n != 2 {
                    return err(line, format!("invalid pair count {n}"));
                }
                pair = Some(n);
            }
            _ => return err(line, format!("unexpected token `{t}`")),
        }
    }
    let Some(width) = width else {
        return err(line, "missing width");
    };
    Ok(MemAccess {
        reg,
        base,
        offset,
        width,
        pair: pair.unwrap_or(1),
        atomic,
        overread_ok,
    })
}

/// Cuts a trailing `#` comment; `#` inside brackets introduces an immediate.
fn strip_comment(text: &str) -> &str {
    let mut depth = 0u32;
    for (i, c) in text.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => depth = depth.saturating_sub(1),
            '#' if depth == 0 => return &text[..i],
            _ => {}
        }
    }
    text
}

fn parse_line(text: &str, line: usize) -> Result<Option<Instruction>, ParseError> {
    let code = strip_comment(text);
    let owned = tokenize(code);
    let toks: Vec<&str> = owned.iter().map(String::as_str).collect();
    let Some(&op) = toks.first() else {
        return Ok(None);
    };
    let ins = match op {
        "alloc" => {
            arity(&toks, 3, line)?;
            Instruction::Alloc {
                dst: parse_reg(toks[1], line)?,
                size: parse_size(toks[2], line)?,
            }
        }
        "free" => {
            arity(&toks, 2, line)?;
            Instruction::Free {
                src: parse_reg(toks[1], line)?,
            }
        }
        "mov" => {
            arity(&toks, 3, line)?;
            Instruction::Mov {
                dst: parse_reg(toks[1], line)?,
                imm: parse_int(toks[2], line)?,
            }
        }
        "add" => {
            arity(&toks, 4, line)?;
            Instruction::Add {
                dst: parse_reg(toks[1], line)?,
                src: parse_reg(toks[2], line)?,
                imm: parse_int(toks[3], line)?,
            }
        }
        "ld" => Instruction::Load(parse_mem(&toks, line)?),
        "st" => Instruction::Store(parse_mem(&toks, line)?),
        "syscall" | "ret" | "halt" => {
            arity(&toks, 1, line)?;
            match op {
                "syscall" => Instruction::Syscall,
                "ret" => Instruction::Ret,
                _ => Instruction::Halt,
            }
        }
        other => return err(line, format!("unknown mnemonic `{other}`")),
    };
    Ok(Some(ins))
}

/// Parses trace text into a validated [`Program`].
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let mut instructions = Vec::new();
    let mut lines = Vec::new();
    let mut last_line = 0;
    for (i, raw) in text.lines().enumerate() {
        last_line = i + 1;
        if let Some(ins) = parse_line(raw, i + 1)? {
            instructions.push(ins);
            lines.push(i + 1);
        }
    }
    let line_of = |index: usize| lines.get(index).copied().unwrap_or(last_line.max(1));
    let last = line_of(lines.len().saturating_sub(1));
    let pair_line = |e: &ProgramError| match e {
        ProgramError::PairOutOfRange { index, .. } => line_of(*index),
        _ => last,
    };
    let lines_copy = lines.clone();
    Program::with_lines(instructions, lines_copy).map_err(|e| ParseError {
        line: pair_line(&e),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_minimal_program() {
        let p = parse_program("alloc r0 40\nst r1 [r0, #8] w8 p1\nhalt").unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(
            p.instructions()[1],
            Instruction::Store(MemAccess {
                reg: Reg::new(1).unwrap(),
                base: Reg::new(0).unwrap(),
                offset: Offset::Imm(8),
                width: Width::B8,
                pair: 1,
                atomic: false,
                overread_ok: false,
            })
        );
    }

    #[test]
    fn rejects_bad_width() {
        let e = parse_program("ld r0 [r1, #0] w3 p1\nhalt").unwrap_err();
        assert_eq!(e.line, 1);
        assert!(e.message.contains("invalid width 3"), "{e}");
    }

    #[test]
    fn diagnostics_name_the_line() {
        let e = parse_program("# header\nmov r0 1\nfrob r1\nhalt").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.message.contains("unknown mnemonic"));
        let e = parse_program("mov r32 1\nhalt").unwrap_err();
        assert!(e.message.contains("out of range"));
        assert!(parse_program("mov r0 1").unwrap_err().message.contains("halt"));
        assert!(parse_program("ld r31 [r0, #0] w8 p2\nhalt").is_err());
    }

    #[test]
    fn comments_and_register_offsets() {
        let p = parse_program(
            "  # setup\nmov r2 0x10 # sixteen\nld r3 [r1, r2] w16 p2 atomic overread_ok # tail\nret\nhalt\n",
        )
        .unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p.source_line(0), Some(2));
        match p.instructions()[1] {
            Instruction::Load(m) => {
                assert_eq!(m.offset, Offset::Reg(Reg::new(2).unwrap()));
                assert_eq!(m.size(), 32);
                assert!(m.atomic && m.overread_ok);
            }
            ref other => panic!("{other:?}"),
        }
        assert_eq!(p.render(), "mov r2 16\nld r3 [r1, r2] w16 p2 atomic overread_ok\nret\nhalt\n");
    }

    fn reg() -> impl Strategy<Value = Reg> {
        (0u8..32).prop_map(|i| Reg::new(i).unwrap())
    }

    fn mem() -> impl Strategy<Value = MemAccess> {
        (
            (0u8..31).prop_map(|i| Reg::new(i).unwrap()),
            reg(),
            prop_oneof![any::<i64>().prop_map(Offset::Imm), reg().prop_map(Offset::Reg)],
            proptest::sample::select(Width::ALL.to_vec()),
            1u8..=2,
            any::<bool>(),
            any::<bool>(),
        )
            .prop_map(|(reg, base, offset, width, pair, atomic, overread_ok)| MemAccess {
                reg,
                base,
                offset,
                width,
                pair,
                atomic,
                overread_ok,
            })
    }

    fn instruction() -> impl Strategy<Value = Instruction> {
        prop_oneof![
            mem().prop_map(Instruction::Load),
            mem().prop_map(Instruction::Store),
            (reg(), any::<i64>()).prop_map(|(dst, imm)| Instruction::Mov { dst, imm }),
            (reg(), reg(), any::<i64>()).prop_map(|(dst, src, imm)| Instruction::Add { dst, src, imm }),
            (reg(), any::<u32>()).prop_map(|(dst, s)| Instruction::Alloc { dst, size: u64::from(s) }),
            reg().prop_map(|src| Instruction::Free { src }),
            Just(Instruction::Syscall),
            Just(Instruction::Ret),
        ]
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(mut body in proptest::collection::vec(instruction(), 0..40)) {
            body.push(Instruction::Halt);
            let p = Program::new(body).unwrap();
            let text = p.render();
            let q = parse_program(&text).unwrap();
            prop_assert_eq!(&q, &p);
            prop_assert_eq!(q.render(), text);
        }
    }
}
